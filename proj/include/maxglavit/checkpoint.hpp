#pragma once

// Binary checkpoint: 8-byte magic "MGVTCKPT", u32 version, u64 header length,
// UTF-8 JSON header (config snapshot + tensor manifest), then raw
// little-endian tensor payloads in manifest order. Loading rebuilds the model
// from the stored config before filling weights, so a checkpoint is
// self-contained. Extra tensors (optimizer state) ride along by name.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "serialize.hpp"

namespace maxglavit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'M', 'G', 'V', 'T', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointExtra {
    std::map<std::string, Tensor> tensors;  // optimizer state and the like
    Json meta = Json::object();             // small metadata, e.g. {"epoch": 12}
};

namespace ckpt_detail {

inline void io_check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

template <class T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

inline void append_tensor_bytes(std::string& payload, const Tensor& t) {
    size_t n = size_t(t.numel()) * dtype_size(t.dtype());
    size_t at = payload.size();
    payload.resize(at + n);
    const void* src = t.dtype() == Dtype::real32 ? static_cast<const void*>(t.data<float>())
                                                 : static_cast<const void*>(t.data<double>());
    std::memcpy(payload.data() + at, src, n);
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Model& m, const std::string& path,
                            const CheckpointExtra* extra = nullptr) {
    std::map<std::string, Tensor> all;
    for (const auto& [name, t] : m.params) all.emplace(name, t);
    for (const auto& [name, t] : m.buffers)
        check(all.emplace(name, t).second, "checkpoint: duplicate tensor name: " + name);
    if (extra)
        for (const auto& [name, t] : extra->tensors)
            check(all.emplace(name, t).second, "checkpoint: duplicate tensor name: " + name);

    Json manifest = Json::array();
    std::string payload;
    for (const auto& [name, t] : all) {
        manifest.push_back(Json{{"name", name},
                                {"shape", t.shape()},
                                {"dtype", dtype_name(t.dtype())},
                                {"offset", payload.size()},
                                {"nbytes", size_t(t.numel()) * dtype_size(t.dtype())}});
        ckpt_detail::append_tensor_bytes(payload, t);
    }
    Json header{{"config", config_to_json(m.config)},
                {"dtype", dtype_name(m.dtype)},
                {"tensors", std::move(manifest)}};
    if (extra && !extra->meta.empty()) header["extra"] = extra->meta;
    std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    ckpt_detail::io_check(bool(os), "checkpoint: cannot open for writing: " + path);
    ckpt_detail::write_bytes(os, kCheckpointMagic, 8);
    ckpt_detail::write_pod(os, kCheckpointVersion);
    ckpt_detail::write_pod(os, uint64_t(hs.size()));
    ckpt_detail::write_bytes(os, hs.data(), hs.size());
    ckpt_detail::write_bytes(os, payload.data(), payload.size());
    os.flush();
    ckpt_detail::io_check(bool(os), "checkpoint: write failed: " + path);
}

inline Model load_checkpoint(const std::string& path, CheckpointExtra* extra = nullptr) {
    using ckpt_detail::io_check;
    std::ifstream is(path, std::ios::binary);
    io_check(bool(is), "checkpoint: cannot open: " + path);
    std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    io_check(blob.size() >= 20, "checkpoint: truncated file: " + path);
    io_check(std::memcmp(blob.data(), kCheckpointMagic, 8) == 0,
             "checkpoint: bad magic, not a checkpoint file: " + path);
    uint32_t version = 0;
    std::memcpy(&version, blob.data() + 8, 4);
    io_check(version == kCheckpointVersion,
             "checkpoint: unsupported version " + std::to_string(version));
    uint64_t hlen = 0;
    std::memcpy(&hlen, blob.data() + 12, 8);
    io_check(hlen <= blob.size() - 20, "checkpoint: truncated header: " + path);
    Json header;
    try {
        header = Json::parse(blob.substr(20, size_t(hlen)));
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("checkpoint: invalid header JSON: ") + e.what());
    }
    const char* base = blob.data() + 20 + hlen;
    const uint64_t payload_size = blob.size() - 20 - hlen;

    Model m;
    std::set<std::string> seen;
    try {
        ModelConfig cfg = config_from_json(header.at("config"));
        InitContext ctx;
        ctx.dtype = dtype_from_name(header.at("dtype").get<std::string>());
        ctx.zeros = true;
        m = Model::build(cfg, ctx);

        for (const Json& e : header.at("tensors")) {
            const std::string name = e.at("name").get<std::string>();
            const Shape shape = e.at("shape").get<Shape>();
            const Dtype dt = dtype_from_name(e.at("dtype").get<std::string>());
            const uint64_t offset = e.at("offset").get<uint64_t>();
            const uint64_t nbytes = e.at("nbytes").get<uint64_t>();
            io_check(seen.insert(name).second, "checkpoint: duplicate tensor " + name);
            io_check(nbytes == uint64_t(shape_numel(shape)) * dtype_size(dt),
                     "checkpoint: inconsistent manifest entry for tensor " + name);
            io_check(offset <= payload_size && nbytes <= payload_size - offset,
                     "checkpoint: truncated payload (tensor " + name + ")");
            Tensor target;
            const bool model_tensor = m.params.contains(name) || m.buffers.contains(name);
            if (model_tensor) {
                target = m.params.contains(name) ? m.params.get(name) : m.buffers.get(name);
                io_check(target.shape() == shape, "checkpoint: shape mismatch for tensor " + name +
                                                      ": file " + shape_str(shape) + " vs model " +
                                                      shape_str(target.shape()));
                io_check(target.dtype() == dt, "checkpoint: dtype mismatch for tensor " + name);
            } else {
                target = Tensor::zeros(shape, dt);
            }
            void* dst = dt == Dtype::real32 ? static_cast<void*>(target.data<float>())
                                            : static_cast<void*>(target.data<double>());
            std::memcpy(dst, base + offset, size_t(nbytes));
            if (!model_tensor && extra)
                io_check(extra->tensors.emplace(name, target).second,
                         "checkpoint: duplicate tensor " + name);
        }
    } catch (const Json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
    }
    for (const auto& [name, t] : m.params)
        io_check(seen.count(name) != 0, "checkpoint: file missing tensor " + name);
    for (const auto& [name, t] : m.buffers)
        io_check(seen.count(name) != 0, "checkpoint: file missing tensor " + name);
    if (extra) extra->meta = header.value("extra", Json::object());
    return m;
}

}  // namespace maxglavit
