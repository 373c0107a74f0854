#pragma once

// Training harness: fused softmax cross-entropy, Adam with bias correction,
// step-decay LR schedule, random-affine augmentation, and the epoch loop with
// best-validation checkpointing. All randomness flows through substreams keyed
// by (seed, epoch, sample), so runs and resumed runs are bit-reproducible.

#include <cmath>
#include <ostream>

#include "checkpoint.hpp"

namespace maxglavit {

// ------------------------------------------------------------ cross entropy

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp. The
// backward pass uses the fused closed form (softmax - onehot) / N.
inline Tensor cross_entropy(Tensor logits, std::vector<int64_t> labels) {
    check(logits.rank() == 2,
          "cross_entropy: logits must be [N, K], got " + shape_str(logits.shape()));
    const int64_t n = logits.dim(0), k = logits.dim(1);
    check(int64_t(labels.size()) == n, "cross_entropy: got " + std::to_string(labels.size()) +
                                           " labels for batch of " + std::to_string(n));
    for (int64_t i = 0; i < n; ++i)
        check(labels[size_t(i)] >= 0 && labels[size_t(i)] < k,
              "cross_entropy: label " + std::to_string(labels[size_t(i)]) +
                  " out of range [0, " + std::to_string(k) + ")");

    Tensor out = Tensor::zeros(Shape{}, logits.dtype());
    std::vector<double> probs(size_t(n * k), 0.0);
    dispatch_dtype(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pl = logits.data<T>();
        double loss = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double mx = double(pl[i * k]);
            for (int64_t c = 1; c < k; ++c) mx = std::max(mx, double(pl[i * k + c]));
            double denom = 0.0;
            for (int64_t c = 0; c < k; ++c) denom += std::exp(double(pl[i * k + c]) - mx);
            double lse = mx + std::log(denom);
            loss += lse - double(pl[i * k + labels[size_t(i)]]);
            for (int64_t c = 0; c < k; ++c)
                probs[size_t(i * k + c)] = std::exp(double(pl[i * k + c]) - mx) / denom;
        }
        out.data<T>()[0] = T(loss / double(n));
    });
    record_op("cross_entropy", {logits}, out, [=]() mutable {
        dispatch_dtype(logits.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const double go = double(out.grad_data<T>()[0]);
            T* gl = logits.grad_data<T>();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t c = 0; c < k; ++c) {
                    double onehot = c == labels[size_t(i)] ? 1.0 : 0.0;
                    gl[i * k + c] +=
                        T(go * (probs[size_t(i * k + c)] - onehot) / double(n));
                }
        });
    });
    return out;
}

// --------------------------------------------------------------- TrainConfig

enum class DecayMode { lr, weight };

inline const char* decay_mode_name(DecayMode m) {
    return m == DecayMode::lr ? "lr" : "weight";
}

inline DecayMode decay_mode_from_name(const std::string& s) {
    if (s == "lr") return DecayMode::lr;
    if (s == "weight") return DecayMode::weight;
    throw std::invalid_argument("unknown decay mode: " + s);
}

struct TrainConfig {
    double learning_rate = 1e-3;
    double lr_decay_factor = 0.8;
    int lr_decay_every_epochs = 10;
    int batch_size = 16;
    int epochs = 50;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 42;
    DecayMode decay_mode = DecayMode::lr;
    bool augment_enabled = true;
    double aug_rotation_deg = 15.0;
    double aug_shift_frac = 0.1;
    double aug_scale_min = 0.9;
    double aug_scale_max = 1.1;
    double grad_clip = 0.0;        // global L2 clip; 0 disables
    double stop_train_acc = -1.0;  // early-exit thresholds; negative disables
    double stop_train_loss = -1.0;
    std::string checkpoint_path;       // best-validation model, when non-empty
    std::string last_checkpoint_path;  // final model + optimizer state, for resume
};

inline void validate_train_config(const TrainConfig& cfg) {
    check(cfg.learning_rate > 0.0, "TrainConfig: learning_rate must be > 0");
    check(cfg.lr_decay_factor > 0.0 && cfg.lr_decay_factor <= 1.0,
          "TrainConfig: lr_decay_factor must be in (0, 1]");
    check(cfg.lr_decay_every_epochs >= 1, "TrainConfig: lr_decay_every_epochs must be >= 1");
    check(cfg.batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    check(cfg.epochs >= 0, "TrainConfig: epochs must be >= 0");
    check(cfg.aug_scale_min > 0.0 && cfg.aug_scale_min <= cfg.aug_scale_max,
          "TrainConfig: augment scale range invalid");
}

inline Json train_config_to_json(const TrainConfig& cfg) {
    return Json{{"learning_rate", cfg.learning_rate},
                {"lr_decay_factor", cfg.lr_decay_factor},
                {"lr_decay_every_epochs", cfg.lr_decay_every_epochs},
                {"batch_size", cfg.batch_size},
                {"epochs", cfg.epochs},
                {"adam_beta1", cfg.adam_beta1},
                {"adam_beta2", cfg.adam_beta2},
                {"adam_eps", cfg.adam_eps},
                {"seed", cfg.seed},
                {"decay_mode", decay_mode_name(cfg.decay_mode)},
                {"augment_enabled", cfg.augment_enabled},
                {"aug_rotation_deg", cfg.aug_rotation_deg},
                {"aug_shift_frac", cfg.aug_shift_frac},
                {"aug_scale_min", cfg.aug_scale_min},
                {"aug_scale_max", cfg.aug_scale_max},
                {"grad_clip", cfg.grad_clip},
                {"stop_train_acc", cfg.stop_train_acc},
                {"stop_train_loss", cfg.stop_train_loss}};
}

// Partial objects are fine; unlisted fields keep their defaults.
inline TrainConfig train_config_from_json(const Json& j) {
    ser_detail::reject_unknown_keys(
        j, "train config",
        {"learning_rate", "lr_decay_factor", "lr_decay_every_epochs", "batch_size", "epochs",
         "adam_beta1", "adam_beta2", "adam_eps", "seed", "decay_mode", "augment_enabled",
         "aug_rotation_deg", "aug_shift_frac", "aug_scale_min", "aug_scale_max", "grad_clip",
         "stop_train_acc", "stop_train_loss"});
    TrainConfig cfg;
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.lr_decay_factor = j.value("lr_decay_factor", cfg.lr_decay_factor);
    cfg.lr_decay_every_epochs = j.value("lr_decay_every_epochs", cfg.lr_decay_every_epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("decay_mode"))
        cfg.decay_mode = decay_mode_from_name(j.at("decay_mode").get<std::string>());
    cfg.augment_enabled = j.value("augment_enabled", cfg.augment_enabled);
    cfg.aug_rotation_deg = j.value("aug_rotation_deg", cfg.aug_rotation_deg);
    cfg.aug_shift_frac = j.value("aug_shift_frac", cfg.aug_shift_frac);
    cfg.aug_scale_min = j.value("aug_scale_min", cfg.aug_scale_min);
    cfg.aug_scale_max = j.value("aug_scale_max", cfg.aug_scale_max);
    cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
    cfg.stop_train_acc = j.value("stop_train_acc", cfg.stop_train_acc);
    cfg.stop_train_loss = j.value("stop_train_loss", cfg.stop_train_loss);
    return cfg;
}

inline double lr_at(int epoch, const TrainConfig& cfg) {
    check(epoch >= 0, "lr_at: epoch must be >= 0");
    return cfg.learning_rate *
           std::pow(cfg.lr_decay_factor, double(epoch / cfg.lr_decay_every_epochs));
}

// ---------------------------------------------------------------------- Adam

struct AdamState {
    int64_t step = 0;
    std::map<std::string, Tensor> m, v;
};

inline void adam_step(ParameterSet& params, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(beta2, double(st.step));
    for (auto& [name, p] : params) {
        auto slot = [&](std::map<std::string, Tensor>& side) -> Tensor {
            auto it = side.find(name);
            if (it == side.end())
                it = side.emplace(name, Tensor::zeros(p.shape(), p.dtype())).first;
            check(it->second.shape() == p.shape() && it->second.dtype() == p.dtype(),
                  "adam_step: state misaligned with parameter " + name);
            return it->second;
        };
        Tensor mt = slot(st.m), vt = slot(st.v);
        dispatch_dtype(p.dtype(), [&](auto tag) {
            using T = decltype(tag);
            T* pd = p.template data<T>();
            T* md = mt.template data<T>();
            T* vd = vt.template data<T>();
            const T* gd = p.template grad_data<T>();  // zero-filled if backward never reached it
            for (int64_t i = 0; i < p.numel(); ++i) {
                double g = double(gd[i]);
                double m = beta1 * double(md[i]) + (1.0 - beta1) * g;
                double v = beta2 * double(vd[i]) + (1.0 - beta2) * g * g;
                md[i] = T(m);
                vd[i] = T(v);
                double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
                pd[i] = T(double(pd[i]) - update - lr * weight_decay * double(pd[i]));
            }
        });
    }
}

// Scales all gradients so their global L2 norm is at most max_norm.
inline double clip_gradients(ParameterSet& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : params) {
        dispatch_dtype(p.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* gd = p.template grad_data<T>();
            for (int64_t i = 0; i < p.numel(); ++i) sq += double(gd[i]) * double(gd[i]);
        });
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double scale = max_norm / norm;
        for (auto& [name, p] : params) {
            dispatch_dtype(p.dtype(), [&](auto tag) {
                using T = decltype(tag);
                T* gd = p.template grad_data<T>();
                for (int64_t i = 0; i < p.numel(); ++i) gd[i] = T(double(gd[i]) * scale);
            });
        }
    }
    return norm;
}

// -------------------------------------------------------------- augmentation

struct AugmentParams {
    double rotation_deg = 0.0;
    double scale = 1.0;
    double shift_x = 0.0;  // pixels
    double shift_y = 0.0;
};

// Affine warp with bilinear resampling and zero fill outside the frame. Pure
// data preprocessing: never recorded on the autodiff tape.
inline Tensor affine_resample(const Tensor& img, const AugmentParams& p) {
    check(img.rank() == 3, "affine_resample: image must be [C, H, W], got " +
                               shape_str(img.shape()));
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    check(p.scale > 0.0, "affine_resample: scale must be > 0");
    Tensor out = Tensor::zeros(img.shape(), img.dtype());
    const double th = p.rotation_deg * 3.14159265358979323846 / 180.0;
    const double cos_t = std::cos(th), sin_t = std::sin(th);
    const double cx = double(w - 1) / 2.0, cy = double(h - 1) / 2.0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            // Invert shift, then rotation+scale, about the image center.
            double dx = double(x) - cx - p.shift_x;
            double dy = double(y) - cy - p.shift_y;
            double sx = (cos_t * dx + sin_t * dy) / p.scale + cx;
            double sy = (-sin_t * dx + cos_t * dy) / p.scale + cy;
            int64_t x0 = int64_t(std::floor(sx)), y0 = int64_t(std::floor(sy));
            double fx = sx - double(x0), fy = sy - double(y0);
            auto pix = [&](int64_t ch, int64_t yy, int64_t xx) -> double {
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
                return img.value_at((ch * h + yy) * w + xx);
            };
            for (int64_t ch = 0; ch < c; ++ch) {
                double v = (1 - fy) * ((1 - fx) * pix(ch, y0, x0) + fx * pix(ch, y0, x0 + 1)) +
                           fy * ((1 - fx) * pix(ch, y0 + 1, x0) + fx * pix(ch, y0 + 1, x0 + 1));
                out.set_value_at((ch * h + y) * w + x, v);
            }
        }
    return out;
}

inline AugmentParams draw_augment_params(RngState& rng, const TrainConfig& cfg, int64_t h,
                                         int64_t w) {
    AugmentParams p;
    p.rotation_deg = rng.uniform(-cfg.aug_rotation_deg, cfg.aug_rotation_deg);
    p.scale = rng.uniform(cfg.aug_scale_min, cfg.aug_scale_max);
    p.shift_x = rng.uniform(-cfg.aug_shift_frac, cfg.aug_shift_frac) * double(w);
    p.shift_y = rng.uniform(-cfg.aug_shift_frac, cfg.aug_shift_frac) * double(h);
    return p;
}

inline Tensor augment(const Tensor& img, RngState& rng, const TrainConfig& cfg) {
    return affine_resample(img, draw_augment_params(rng, cfg, img.dim(1), img.dim(2)));
}

// ----------------------------------------------------------------- train loop

struct InMemoryDataset {
    std::vector<Tensor> images;  // each [C, H, W], already normalized
    std::vector<int64_t> labels;
    int64_t num_classes = 0;

    size_t size() const { return images.size(); }
};

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_val_acc = -1.0;
    bool stopped_early = false;

    std::string to_csv() const {
        auto g17 = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            return std::string(buf);
        };
        std::string out = "epoch,lr,train_loss,train_acc,val_loss,val_acc\n";
        for (const EpochStats& e : epochs)
            out += std::to_string(e.epoch) + "," + g17(e.lr) + "," + g17(e.train_loss) + "," +
                   g17(e.train_acc) + "," + g17(e.val_loss) + "," + g17(e.val_acc) + "\n";
        return out;
    }
};

namespace train_detail {

inline int64_t argmax_row(const Tensor& logits, int64_t row) {
    int64_t k = logits.dim(1), best = 0;
    double bv = logits.value_at(row * k);
    for (int64_t c = 1; c < k; ++c) {
        double v = logits.value_at(row * k + c);
        if (v > bv) {
            bv = v;
            best = c;
        }
    }
    return best;
}

inline void copy_sample(Tensor& batch, int64_t slot, const Tensor& img) {
    check(img.dtype() == batch.dtype(), "train: sample dtype does not match model dtype");
    int64_t per = img.numel();
    check(per == batch.numel() / batch.dim(0), "train: sample shape " + shape_str(img.shape()) +
                                                   " does not match batch " +
                                                   shape_str(batch.shape()));
    dispatch_dtype(batch.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = img.data<T>();
        T* dst = batch.data<T>() + slot * per;
        std::copy(src, src + per, dst);
    });
}

// Forward a split in eval mode (no augmentation, fixed order, no recording)
// and report mean loss and accuracy.
inline std::pair<double, double> evaluate_split(const Model& model, const InMemoryDataset& ds,
                                                int batch_size) {
    int64_t n = int64_t(ds.size());
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (int64_t b = 0; b < n; b += batch_size) {
        int64_t bn = std::min<int64_t>(batch_size, n - b);
        Tensor x = Tensor::zeros({bn, ds.images[0].dim(0), ds.images[0].dim(1),
                                  ds.images[0].dim(2)},
                                 model.dtype);
        std::vector<int64_t> labels;
        for (int64_t j = 0; j < bn; ++j) {
            copy_sample(x, j, ds.images[size_t(b + j)]);
            labels.push_back(ds.labels[size_t(b + j)]);
        }
        Tensor logits = model.forward(x, /*training=*/false);
        loss_sum += cross_entropy(logits, labels).value_at(0) * double(bn);
        for (int64_t j = 0; j < bn; ++j)
            if (argmax_row(logits, j) == labels[size_t(j)]) ++correct;
    }
    return {loss_sum / double(n), double(correct) / double(n)};
}

}  // namespace train_detail

inline CheckpointExtra adam_to_extra(const AdamState& st) {
    CheckpointExtra extra;
    for (const auto& [name, t] : st.m) extra.tensors.emplace("optim.m." + name, t);
    for (const auto& [name, t] : st.v) extra.tensors.emplace("optim.v." + name, t);
    extra.meta["adam_step"] = st.step;
    return extra;
}

inline AdamState adam_from_extra(const CheckpointExtra& extra) {
    AdamState st;
    if (extra.meta.contains("adam_step")) st.step = extra.meta.at("adam_step").get<int64_t>();
    for (const auto& [name, t] : extra.tensors) {
        if (name.rfind("optim.m.", 0) == 0) st.m.emplace(name.substr(8), t);
        if (name.rfind("optim.v.", 0) == 0) st.v.emplace(name.substr(8), t);
    }
    return st;
}

inline TrainHistory train(Model& model, const InMemoryDataset& train_set,
                          const InMemoryDataset& val_set, const TrainConfig& cfg,
                          AdamState* state = nullptr, int start_epoch = 0,
                          std::ostream* log = nullptr) {
    validate_train_config(cfg);
    check(!train_set.images.empty(), "train: empty training set");
    check(!val_set.images.empty(), "train: empty validation set");
    check(train_set.images.size() == train_set.labels.size() &&
              val_set.images.size() == val_set.labels.size(),
          "train: image/label count mismatch");
    for (int64_t l : train_set.labels)
        check(l >= 0 && l < model.config.num_classes,
              "train: label " + std::to_string(l) + " outside model's " +
                  std::to_string(model.config.num_classes) + " classes");

    AdamState local_state;
    AdamState& st = state ? *state : local_state;
    TrainHistory history;
    const int64_t n = int64_t(train_set.size());

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.decay_mode == DecayMode::lr ? lr_at(epoch, cfg)
                                                          : cfg.learning_rate;
        const double wd = cfg.decay_mode == DecayMode::weight ? cfg.lr_decay_factor : 0.0;
        std::vector<int64_t> order(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
        RngState shuffle_rng = RngState::substream(cfg.seed, {0x54F1E5, uint64_t(epoch)});
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        int64_t correct = 0;
        for (int64_t b = 0; b < n; b += cfg.batch_size) {
            int64_t bn = std::min<int64_t>(cfg.batch_size, n - b);
            Tensor x = Tensor::zeros({bn, train_set.images[0].dim(0),
                                      train_set.images[0].dim(1), train_set.images[0].dim(2)},
                                     model.dtype);
            std::vector<int64_t> labels;
            for (int64_t j = 0; j < bn; ++j) {
                int64_t idx = order[size_t(b + j)];
                Tensor img = train_set.images[size_t(idx)];
                if (cfg.augment_enabled) {
                    RngState arng = RngState::substream(
                        cfg.seed, {0xA0657A6E, uint64_t(epoch), uint64_t(idx)});
                    img = augment(img, arng, cfg);
                }
                train_detail::copy_sample(x, j, img);
                labels.push_back(train_set.labels[size_t(idx)]);
            }

            for (auto& [name, p] : model.params) p.zero_grad();
            RecordGuard guard;
            Tensor logits = model.forward(x, /*training=*/true);
            Tensor loss = cross_entropy(logits, labels);
            double lv = loss.value_at(0);
            if (!std::isfinite(lv))
                throw std::runtime_error(
                    "train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(b / cfg.batch_size) + ", lr " + std::to_string(lr) +
                    "; aborting (consider --grad-clip or a lower learning rate)");
            backward(loss);
            if (cfg.grad_clip > 0.0) clip_gradients(model.params, cfg.grad_clip);
            adam_step(model.params, st, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, wd);

            loss_sum += lv * double(bn);
            for (int64_t j = 0; j < bn; ++j)
                if (train_detail::argmax_row(logits, j) == labels[size_t(j)]) ++correct;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.train_loss = loss_sum / double(n);
        stats.train_acc = double(correct) / double(n);
        auto [vl, va] = train_detail::evaluate_split(model, val_set, cfg.batch_size);
        stats.val_loss = vl;
        stats.val_acc = va;
        history.epochs.push_back(stats);
        if (log)
            *log << "epoch " << epoch << " lr " << lr << " train_loss " << stats.train_loss
                 << " train_acc " << stats.train_acc << " val_loss " << vl << " val_acc " << va
                 << "\n";

        if (va > history.best_val_acc) {
            history.best_val_acc = va;
            history.best_epoch = epoch;
            if (!cfg.checkpoint_path.empty()) {
                CheckpointExtra extra;
                extra.meta = Json{{"epoch", epoch}, {"val_acc", va}};
                save_checkpoint(model, cfg.checkpoint_path, &extra);
            }
        }

        bool acc_target = cfg.stop_train_acc >= 0.0 || cfg.stop_train_loss >= 0.0;
        if (acc_target && (cfg.stop_train_acc < 0.0 || stats.train_acc >= cfg.stop_train_acc) &&
            (cfg.stop_train_loss < 0.0 || stats.train_loss <= cfg.stop_train_loss)) {
            history.stopped_early = true;
            break;
        }
    }

    if (!cfg.last_checkpoint_path.empty()) {
        CheckpointExtra extra = adam_to_extra(st);
        int next_epoch = history.epochs.empty() ? start_epoch : history.epochs.back().epoch + 1;
        extra.meta["epoch"] = next_epoch;
        save_checkpoint(model, cfg.last_checkpoint_path, &extra);
    }
    return history;
}

}  // namespace maxglavit
