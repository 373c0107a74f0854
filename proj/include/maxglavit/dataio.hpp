#pragma once

// Dataset ingestion: directory scanning (root/{train,validation,test}/{class}/*),
// PPM P6 and 8-bit RGB PNG decoding with [-1,1] normalization, and the synthetic
// disc dataset used by desk-scale training runs.

#include <zlib.h>

#include <array>
#include <filesystem>
#include <fstream>

#include "training.hpp"

namespace maxglavit {

inline constexpr std::array<const char*, 3> kSplitNames = {"train", "validation", "test"};
inline constexpr std::array<const char*, 3> kClassNames = {"advanced", "early", "normal"};

// ------------------------------------------------------------------ manifest

struct DatasetManifest {
    std::string root;
    // split -> class -> root-relative paths, sorted lexicographically
    std::map<std::string, std::map<std::string, std::vector<std::string>>> files;

    static int64_t label_of(const std::string& class_name) {
        for (size_t i = 0; i < kClassNames.size(); ++i)
            if (class_name == kClassNames[i]) return int64_t(i);
        throw std::invalid_argument("unknown class name: " + class_name);
    }

    int64_t count(const std::string& split) const {
        int64_t n = 0;
        for (const auto& [cls, list] : files.at(split)) n += int64_t(list.size());
        return n;
    }

    int64_t count(const std::string& split, const std::string& cls) const {
        return int64_t(files.at(split).at(cls).size());
    }

    int64_t class_total(const std::string& cls) const {
        int64_t n = 0;
        for (const auto& [split, classes] : files) n += int64_t(classes.at(cls).size());
        return n;
    }
};

inline bool has_image_extension(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    for (char& c : ext) c = char(std::tolower(static_cast<unsigned char>(c)));
    return ext == ".png" || ext == ".ppm";
}

inline DatasetManifest scan_dataset(const std::string& root,
                                    std::vector<std::string>* warnings = nullptr) {
    namespace fs = std::filesystem;
    const std::string layout =
        "; expected layout root/{train,validation,test}/{advanced,early,normal}/*.{png,ppm}";
    if (!fs::is_directory(root))
        throw std::invalid_argument("dataset root does not exist: " + root + layout);

    auto warn = [&](const std::string& msg) {
        if (warnings) warnings->push_back(msg);
    };

    DatasetManifest m;
    m.root = root;
    for (const char* split : kSplitNames) {
        fs::path split_dir = fs::path(root) / split;
        if (!fs::is_directory(split_dir))
            throw std::invalid_argument("missing split directory '" + std::string(split) +
                                        "' under " + root + layout);
        for (const auto& entry : fs::directory_iterator(split_dir)) {
            if (!entry.is_directory()) {
                warn("stray file ignored: " + entry.path().string());
                continue;
            }
            std::string cls = entry.path().filename().string();
            bool known = false;
            for (const char* c : kClassNames) known = known || cls == c;
            if (!known) warn("unknown class directory ignored: " + entry.path().string());
        }
        for (const char* cls : kClassNames) {
            fs::path class_dir = split_dir / cls;
            if (!fs::is_directory(class_dir))
                throw std::invalid_argument("missing class directory '" + std::string(cls) +
                                            "' under " + split_dir.string() + layout);
            std::vector<std::string>& list = m.files[split][cls];
            for (const auto& entry : fs::directory_iterator(class_dir)) {
                if (!entry.is_regular_file()) {
                    warn("skipping non-file entry: " + entry.path().string());
                    continue;
                }
                if (!has_image_extension(entry.path())) {
                    warn("skipping unrecognized file: " + entry.path().string());
                    continue;
                }
                list.push_back((fs::path(split) / cls / entry.path().filename()).string());
            }
            std::sort(list.begin(), list.end());
            if (list.empty())
                throw std::invalid_argument("class directory '" + std::string(split) + "/" +
                                            cls + "' contains no images" + layout);
        }
    }
    return m;
}

inline Json manifest_to_json(const DatasetManifest& m) {
    Json splits = Json::object();
    for (const auto& [split, classes] : m.files) {
        Json per_class = Json::object();
        for (const auto& [cls, list] : classes)
            per_class[cls] = Json{{"count", list.size()}, {"files", list}};
        splits[split] = per_class;
    }
    Json labels = Json::object();
    for (size_t i = 0; i < kClassNames.size(); ++i) labels[kClassNames[i]] = i;
    return Json{{"root", m.root}, {"label_map", labels}, {"splits", splits}};
}

// Checks counts against the published HDV1 split/class totals.
inline void verify_hdv1(const DatasetManifest& m) {
    const std::array<int64_t, 3> split_totals = {754, 324, 464};
    const std::array<int64_t, 3> class_totals = {467, 289, 786};
    for (size_t i = 0; i < kSplitNames.size(); ++i)
        if (m.count(kSplitNames[i]) != split_totals[i])
            throw std::runtime_error("hdv1 mismatch: split '" + std::string(kSplitNames[i]) +
                                     "' has " + std::to_string(m.count(kSplitNames[i])) +
                                     " images, expected " + std::to_string(split_totals[i]));
    for (size_t i = 0; i < kClassNames.size(); ++i)
        if (m.class_total(kClassNames[i]) != class_totals[i])
            throw std::runtime_error("hdv1 mismatch: class '" + std::string(kClassNames[i]) +
                                     "' has " + std::to_string(m.class_total(kClassNames[i])) +
                                     " images, expected " + std::to_string(class_totals[i]));
}

// ------------------------------------------------------------------ decoding

struct Rgb8Image {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> pixels;  // interleaved RGB, row-major
};

namespace image_detail {

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image: " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                                std::istreambuf_iterator<char>());
}

inline Rgb8Image decode_ppm(const std::vector<uint8_t>& bytes, const std::string& path) {
    size_t pos = 2;  // past "P6"
    auto next_int = [&]() -> int64_t {
        // Skip whitespace and '#' comments between header fields.
        while (pos < bytes.size()) {
            if (std::isspace(bytes[pos])) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        int64_t v = -1;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            if (v < 0) v = 0;
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
        }
        if (v < 0) throw std::runtime_error("ppm: malformed header in " + path);
        return v;
    };
    Rgb8Image img;
    img.width = next_int();
    img.height = next_int();
    int64_t maxval = next_int();
    if (maxval != 255)
        throw std::runtime_error("ppm: only 8-bit images supported (maxval " +
                                 std::to_string(maxval) + ") in " + path);
    ++pos;  // single whitespace after maxval
    size_t need = size_t(img.width * img.height * 3);
    if (bytes.size() < pos + need) throw std::runtime_error("ppm: truncated file " + path);
    img.pixels.assign(bytes.begin() + int64_t(pos), bytes.begin() + int64_t(pos + need));
    return img;
}

inline uint32_t be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
           uint32_t(p[3]);
}

inline uint8_t paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return uint8_t(a);
    if (pb <= pc) return uint8_t(b);
    return uint8_t(c);
}

inline Rgb8Image decode_png(const std::vector<uint8_t>& bytes, const std::string& path) {
    static const uint8_t sig[8] = {137, 'P', 'N', 'G', 13, 10, 26, 10};
    if (bytes.size() < 8 || !std::equal(sig, sig + 8, bytes.data()))
        throw std::runtime_error("png: bad signature in " + path);

    Rgb8Image img;
    std::vector<uint8_t> idat;
    bool saw_ihdr = false, saw_iend = false;
    size_t pos = 8;
    while (pos < bytes.size() && !saw_iend) {
        if (pos + 12 > bytes.size()) throw std::runtime_error("png: truncated file " + path);
        uint32_t len = be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size())
            throw std::runtime_error("png: truncated file " + path);
        const uint8_t* type = bytes.data() + pos + 4;
        const uint8_t* data = bytes.data() + pos + 8;
        uint32_t stored_crc = be32(data + len);
        uint32_t crc = uint32_t(crc32(crc32(0L, type, 4), data, len));
        if (crc != stored_crc) throw std::runtime_error("png: chunk crc mismatch in " + path);
        std::string tname(reinterpret_cast<const char*>(type), 4);

        if (tname == "IHDR") {
            if (len != 13) throw std::runtime_error("png: malformed IHDR in " + path);
            img.width = be32(data);
            img.height = be32(data + 4);
            int bit_depth = data[8], color_type = data[9], interlace = data[12];
            if (bit_depth != 8 || color_type != 2)
                throw std::runtime_error("png: only 8-bit RGB supported (bit depth " +
                                         std::to_string(bit_depth) + ", color type " +
                                         std::to_string(color_type) + ") in " + path);
            if (interlace != 0)
                throw std::runtime_error("png: interlaced images not supported in " + path);
            saw_ihdr = true;
        } else if (tname == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (tname == "IEND") {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || !saw_iend || img.width <= 0 || img.height <= 0)
        throw std::runtime_error("png: truncated file " + path);

    const int64_t stride = img.width * 3;
    std::vector<uint8_t> raw(size_t(img.height * (stride + 1)));
    uLongf raw_len = uLongf(raw.size());
    int zrc = uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size()));
    if (zrc != Z_OK || int64_t(raw_len) != int64_t(raw.size()))
        throw std::runtime_error("png: corrupt or truncated pixel data in " + path);

    img.pixels.assign(size_t(img.height * stride), 0);
    for (int64_t y = 0; y < img.height; ++y) {
        const uint8_t* src = raw.data() + y * (stride + 1);
        uint8_t filter = src[0];
        uint8_t* cur = img.pixels.data() + y * stride;
        const uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
        for (int64_t i = 0; i < stride; ++i) {
            int a = i >= 3 ? cur[i - 3] : 0;
            int b = up ? up[i] : 0;
            int c = (up && i >= 3) ? up[i - 3] : 0;
            int x = src[1 + i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default:
                    throw std::runtime_error("png: unknown row filter " +
                                             std::to_string(filter) + " in " + path);
            }
            cur[i] = uint8_t(x & 0xff);
        }
    }
    return img;
}

}  // namespace image_detail

inline Rgb8Image decode_rgb8(const std::string& path) {
    std::vector<uint8_t> bytes = image_detail::read_file_bytes(path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6')
        return image_detail::decode_ppm(bytes, path);
    if (bytes.size() >= 8 && bytes[0] == 137 && bytes[1] == 'P')
        return image_detail::decode_png(bytes, path);
    throw std::runtime_error("unsupported image format (want PPM P6 or PNG): " + path);
}

// -------------------------------------------------------- resize + normalize

// Bilinear resize of a [C, H, W] tensor using half-pixel centers.
inline Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w) {
    check(img.rank() == 3, "resize_bilinear: image must be [C, H, W]");
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h == out_h && w == out_w) return img.clone();
    Tensor out = Tensor::zeros({c, out_h, out_w}, img.dtype());
    const double sy = double(h) / double(out_h), sx = double(w) / double(out_w);
    for (int64_t y = 0; y < out_h; ++y)
        for (int64_t x = 0; x < out_w; ++x) {
            double src_y = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(h - 1));
            double src_x = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(w - 1));
            int64_t y0 = int64_t(src_y), x0 = int64_t(src_x);
            int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            double fy = src_y - double(y0), fx = src_x - double(x0);
            for (int64_t ch = 0; ch < c; ++ch) {
                auto pix = [&](int64_t yy, int64_t xx) {
                    return img.value_at((ch * h + yy) * w + xx);
                };
                double v = (1 - fy) * ((1 - fx) * pix(y0, x0) + fx * pix(y0, x1)) +
                           fy * ((1 - fx) * pix(y1, x0) + fx * pix(y1, x1));
                out.set_value_at((ch * out_h + y) * out_w + x, v);
            }
        }
    return out;
}

struct NormStats {
    std::array<double, 3> mean = {0.5, 0.5, 0.5};
    std::array<double, 3> stdev = {0.5, 0.5, 0.5};
};

struct ImageSample {
    Tensor pixels;  // [3, H, W], normalized
    int64_t label = -1;
    std::string path;
};

inline Tensor denormalize_image(const Tensor& img, const NormStats& stats = {}) {
    check(img.rank() == 3 && img.dim(0) == 3, "denormalize_image: image must be [3, H, W]");
    Tensor out = Tensor::zeros(img.shape(), img.dtype());
    int64_t hw = img.dim(1) * img.dim(2);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            out.set_value_at(c * hw + i,
                             img.value_at(c * hw + i) * stats.stdev[size_t(c)] +
                                 stats.mean[size_t(c)]);
    return out;
}

inline ImageSample decode_image(const std::string& path, int64_t target_size = 224,
                                Dtype dtype = Dtype::real32, const NormStats& stats = {}) {
    check(target_size >= 1, "decode_image: target size must be >= 1");
    Rgb8Image raw = decode_rgb8(path);
    Tensor planar = Tensor::zeros({3, raw.height, raw.width}, dtype);
    for (int64_t y = 0; y < raw.height; ++y)
        for (int64_t x = 0; x < raw.width; ++x)
            for (int64_t c = 0; c < 3; ++c)
                planar.set_value_at((c * raw.height + y) * raw.width + x,
                                    double(raw.pixels[size_t((y * raw.width + x) * 3 + c)]) /
                                        255.0);
    Tensor resized = resize_bilinear(planar, target_size, target_size);
    int64_t hw = target_size * target_size;
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            resized.set_value_at(c * hw + i, (resized.value_at(c * hw + i) -
                                              stats.mean[size_t(c)]) /
                                                 stats.stdev[size_t(c)]);
    ImageSample s;
    s.pixels = resized;
    s.path = path;
    return s;
}

inline InMemoryDataset load_split(const DatasetManifest& m, const std::string& split,
                                  int64_t target_size = 224, Dtype dtype = Dtype::real32,
                                  const NormStats& stats = {}) {
    InMemoryDataset ds;
    ds.num_classes = int64_t(kClassNames.size());
    auto it = m.files.find(split);
    check(it != m.files.end(), "load_split: unknown split '" + split + "'");
    for (const char* cls : kClassNames) {
        int64_t label = DatasetManifest::label_of(cls);
        for (const std::string& rel : it->second.at(cls)) {
            std::string full = (std::filesystem::path(m.root) / rel).string();
            ds.images.push_back(decode_image(full, target_size, dtype, stats).pixels);
            ds.labels.push_back(label);
        }
    }
    return ds;
}

// ------------------------------------------------------------ synthetic data

// Noise-free class template: a bright unit disc whose radius and quadrant both
// depend on the class, on a zero background.
inline Tensor synthetic_template(int64_t cls, int64_t size, Dtype dtype = Dtype::real32) {
    check(cls >= 0 && cls < 3, "synthetic_template: class must be in [0, 3)");
    check(size >= 8, "synthetic_template: size must be >= 8");
    const std::array<double, 3> radius = {6.0, 12.0, 18.0};
    const std::array<std::pair<double, double>, 3> center = {{
        {0.25, 0.25},  // advanced-like: top-left
        {0.75, 0.25},  // early-like: top-right
        {0.25, 0.75},  // normal-like: bottom-left
    }};
    double cx = center[size_t(cls)].first * double(size);
    double cy = center[size_t(cls)].second * double(size);
    double r2 = radius[size_t(cls)] * radius[size_t(cls)];
    Tensor img = Tensor::zeros({3, size, size}, dtype);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            double dx = double(x) - cx, dy = double(y) - cy;
            if (dx * dx + dy * dy <= r2)
                for (int64_t c = 0; c < 3; ++c)
                    img.set_value_at((c * size + y) * size + x, 1.0);
        }
    return img;
}

// Balanced in-memory dataset: template(idx % classes) + Gaussian noise (sigma
// 0.1), deterministic per (seed, index).
inline InMemoryDataset synthetic_dataset(uint64_t seed, int64_t per_class, int64_t size = 64,
                                         int64_t classes = 3, Dtype dtype = Dtype::real32) {
    check(per_class >= 1, "synthetic_dataset: per_class must be >= 1");
    check(classes >= 1 && classes <= 3, "synthetic_dataset: classes must be in [1, 3]");
    InMemoryDataset ds;
    ds.num_classes = classes;
    for (int64_t idx = 0; idx < per_class * classes; ++idx) {
        int64_t cls = idx % classes;
        Tensor img = synthetic_template(cls, size, dtype);
        RngState rng = RngState::substream(seed, {0x5D15C, uint64_t(idx)});
        for (int64_t i = 0; i < img.numel(); ++i)
            img.set_value_at(i, img.value_at(i) + rng.normal(0.0, 0.1));
        ds.images.push_back(img);
        ds.labels.push_back(cls);
    }
    return ds;
}

}  // namespace maxglavit
