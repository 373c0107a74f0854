// maxglavit command line: describe, grad-check, train, eval, predict,
// verify-data. Exit codes: 0 success, 1 operational failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "maxglavit/dataio.hpp"
#include "maxglavit/grad_check.hpp"
#include "maxglavit/metrics.hpp"

using namespace maxglavit;

namespace {

bool known_preset(const std::string& name) {
    for (const std::string& p : preset_names())
        if (p == name) return true;
    return false;
}

std::string preset_list() {
    std::string out;
    for (const std::string& p : preset_names()) out += (out.empty() ? "" : ", ") + p;
    return out;
}

Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw std::runtime_error("invalid JSON in " + path + ": " + e.what());
    }
}

ModelConfig resolve_model_config(const std::string& preset, const std::string& config_path) {
    if (!config_path.empty()) return config_from_json(read_json_file(config_path));
    return preset_config(preset);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

Tensor batch_of(const std::vector<Tensor>& images, int64_t begin, int64_t count, Dtype dtype) {
    Tensor x = Tensor::zeros(
        {count, images[0].dim(0), images[0].dim(1), images[0].dim(2)}, dtype);
    for (int64_t j = 0; j < count; ++j)
        train_detail::copy_sample(x, j, images[size_t(begin + j)]);
    return x;
}

std::vector<double> softmax_row(const Tensor& logits, int64_t row) {
    int64_t k = logits.dim(1);
    double mx = logits.value_at(row * k);
    for (int64_t c = 1; c < k; ++c) mx = std::max(mx, logits.value_at(row * k + c));
    double denom = 0.0;
    std::vector<double> p(static_cast<size_t>(k));
    for (int64_t c = 0; c < k; ++c) {
        p[size_t(c)] = std::exp(logits.value_at(row * k + c) - mx);
        denom += p[size_t(c)];
    }
    for (double& v : p) v /= denom;
    return p;
}

std::string class_label(int64_t cls, int64_t num_classes) {
    if (num_classes == int64_t(kClassNames.size())) return kClassNames[size_t(cls)];
    return std::to_string(cls);
}

// ------------------------------------------------------------------ describe

int cmd_describe(const ModelConfig& cfg, const std::string& expect) {
    ModelPlan plan = ModelPlan::from_config(cfg);
    std::printf("%-34s %-14s %-16s %12s\n", "layer", "kind", "output", "params");
    for (const PlanRow& r : plan.rows)
        std::printf("%-34s %-14s %-16s %12lld\n", r.name.c_str(), r.kind.c_str(),
                    shape_str(r.output_shape).c_str(), (long long)r.params);
    std::printf("total parameters: %lld\n", (long long)plan.total);

    if (!expect.empty()) {
        size_t dots = expect.find("..");
        int64_t lo = 0, hi = 0;
        try {
            if (dots == std::string::npos) throw std::invalid_argument("no ..");
            lo = std::stoll(expect.substr(0, dots));
            hi = std::stoll(expect.substr(dots + 2));
        } catch (const std::exception&) {
            std::cerr << "error: --expect-params wants LOW..HIGH, got '" << expect << "'\n";
            return 2;
        }
        if (plan.total < lo || plan.total > hi) {
            std::printf("total %lld outside expected [%lld, %lld]\n", (long long)plan.total,
                        (long long)lo, (long long)hi);
            return 1;
        }
        std::printf("total %lld within expected [%lld, %lld]\n", (long long)plan.total,
                    (long long)lo, (long long)hi);
    }
    return 0;
}

// ----------------------------------------------------------------- grad-check

int cmd_grad_check(const std::string& preset, int64_t samples, double tolerance, uint64_t seed,
                   const std::string& corrupt_op) {
    ModelConfig cfg = reduced_config(preset_config(preset));
    InitContext ctx;
    ctx.seed = seed;
    ctx.dtype = Dtype::real64;
    Model model = Model::build(cfg, ctx);

    RngState drng = RngState::substream(seed, {0x6AD});
    Tensor x = Tensor::zeros({1, cfg.input_channels, cfg.input_size, cfg.input_size},
                             Dtype::real64);
    for (int64_t i = 0; i < x.numel(); ++i) x.set_value_at(i, drng.uniform(-1.0, 1.0));
    std::vector<int64_t> labels = {int64_t(drng.below(uint64_t(cfg.num_classes)))};

    std::vector<Tensor> inputs;
    GradCheckOptions opts;
    opts.eps = 1e-4;
    opts.tolerance = tolerance;
    opts.max_coords = samples;
    opts.seed = seed;
    for (auto& [name, p] : model.params) {
        inputs.push_back(p);
        opts.names.push_back(name);
    }

    static std::string fault_storage;
    if (!corrupt_op.empty()) {
        fault_storage = corrupt_op;
        debug_backward_fault_op() = fault_storage.c_str();
        std::printf("backward fault injected into op '%s'\n", corrupt_op.c_str());
    }
    GradCheckReport report = grad_check(
        [&] { return cross_entropy(model.forward(x, /*training=*/false), labels); }, inputs,
        opts);
    debug_backward_fault_op() = nullptr;

    std::printf("grad-check preset %s (reduced, input %lld): %lld coordinates, h 1e-04, "
                "tolerance %g\n",
                preset.c_str(), (long long)cfg.input_size, (long long)report.checked,
                tolerance);
    std::printf("max relative error %.6e at %s[%lld] (analytic %.9e, numeric %.9e)\n",
                report.max_rel_err, report.worst_name.c_str(), (long long)report.worst_flat,
                report.worst_analytic, report.worst_numeric);
    std::printf("%s\n", report.pass ? "PASS" : "FAIL");
    return report.pass ? 0 : 1;
}

// --------------------------------------------------------------------- train

struct TrainCliArgs {
    std::string data, out, last_out, history, resume, train_config_path;
    bool synthetic = false;
    bool no_augment = false;
    int64_t per_class = 16, val_per_class = 4;
    TrainConfig flags;  // flag values land here; merged below
    std::string decay_mode_name = "lr";
    CLI::Option *o_lr = nullptr, *o_factor = nullptr, *o_every = nullptr, *o_batch = nullptr,
                *o_epochs = nullptr, *o_seed = nullptr, *o_mode = nullptr, *o_clip = nullptr,
                *o_stop_acc = nullptr, *o_stop_loss = nullptr, *o_rot = nullptr,
                *o_shift = nullptr, *o_smin = nullptr, *o_smax = nullptr;
};

TrainConfig merge_train_config(const TrainCliArgs& a) {
    TrainConfig cfg;
    if (!a.train_config_path.empty())
        cfg = train_config_from_json(read_json_file(a.train_config_path));
    // Explicit flags override the file.
    if (a.o_lr->count()) cfg.learning_rate = a.flags.learning_rate;
    if (a.o_factor->count()) cfg.lr_decay_factor = a.flags.lr_decay_factor;
    if (a.o_every->count()) cfg.lr_decay_every_epochs = a.flags.lr_decay_every_epochs;
    if (a.o_batch->count()) cfg.batch_size = a.flags.batch_size;
    if (a.o_epochs->count()) cfg.epochs = a.flags.epochs;
    if (a.o_seed->count()) cfg.seed = a.flags.seed;
    if (a.o_mode->count()) cfg.decay_mode = decay_mode_from_name(a.decay_mode_name);
    if (a.o_clip->count()) cfg.grad_clip = a.flags.grad_clip;
    if (a.o_stop_acc->count()) cfg.stop_train_acc = a.flags.stop_train_acc;
    if (a.o_stop_loss->count()) cfg.stop_train_loss = a.flags.stop_train_loss;
    if (a.o_rot->count()) cfg.aug_rotation_deg = a.flags.aug_rotation_deg;
    if (a.o_shift->count()) cfg.aug_shift_frac = a.flags.aug_shift_frac;
    if (a.o_smin->count()) cfg.aug_scale_min = a.flags.aug_scale_min;
    if (a.o_smax->count()) cfg.aug_scale_max = a.flags.aug_scale_max;
    if (a.no_augment) cfg.augment_enabled = false;
    cfg.checkpoint_path = a.out;
    cfg.last_checkpoint_path = a.last_out;
    return cfg;
}

int cmd_train(const ModelConfig& mcfg_cli, const TrainCliArgs& args) {
    TrainConfig tcfg = merge_train_config(args);
    validate_train_config(tcfg);

    Model model;
    AdamState state;
    int start_epoch = 0;
    if (args.resume.empty()) {
        InitContext ctx;
        ctx.seed = tcfg.seed;
        model = Model::build(mcfg_cli, ctx);
    } else {
        CheckpointExtra extra;
        model = load_checkpoint(args.resume, &extra);
        state = adam_from_extra(extra);
        if (extra.meta.contains("epoch")) start_epoch = extra.meta.at("epoch").get<int>();
        std::printf("resuming from %s at epoch %d\n", args.resume.c_str(), start_epoch);
    }

    InMemoryDataset train_set, val_set;
    if (args.synthetic) {
        train_set = synthetic_dataset(tcfg.seed, args.per_class, model.config.input_size, 3,
                                      model.dtype);
        val_set = synthetic_dataset(tcfg.seed + 1, args.val_per_class,
                                    model.config.input_size, 3, model.dtype);
    } else {
        std::vector<std::string> warnings;
        DatasetManifest manifest = scan_dataset(args.data, &warnings);
        for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
        train_set = load_split(manifest, "train", model.config.input_size, model.dtype);
        val_set = load_split(manifest, "validation", model.config.input_size, model.dtype);
    }
    std::printf("training on %zu images, validating on %zu, %lld classes\n", train_set.size(),
                val_set.size(), (long long)train_set.num_classes);

    TrainHistory history =
        train(model, train_set, val_set, tcfg, &state, start_epoch, &std::cout);

    if (!args.history.empty()) write_text_file(args.history, history.to_csv());
    if (!history.epochs.empty()) {
        const EpochStats& last = history.epochs.back();
        std::printf("final epoch %d: train_loss %.6f train_acc %.4f val_loss %.6f val_acc "
                    "%.4f%s\n",
                    last.epoch, last.train_loss, last.train_acc, last.val_loss, last.val_acc,
                    history.stopped_early ? " (stopped early)" : "");
        std::printf("best epoch %d: val_acc %.4f\n", history.best_epoch,
                    history.best_val_acc);
    }
    if (!tcfg.checkpoint_path.empty())
        std::printf("best checkpoint: %s\n", tcfg.checkpoint_path.c_str());
    if (!tcfg.last_checkpoint_path.empty())
        std::printf("last checkpoint: %s\n", tcfg.last_checkpoint_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------- eval

std::pair<std::vector<int64_t>, std::vector<int64_t>> read_pred_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open prediction csv: " + path);
    std::vector<int64_t> y_true, y_pred;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1 && line.find_first_not_of("0123456789,") != std::string::npos)
            continue;  // header
        size_t comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("malformed prediction line " + std::to_string(lineno) +
                                     ": '" + line + "' (want true,pred)");
        try {
            size_t used = 0;
            int64_t t = std::stoll(line.substr(0, comma), &used);
            if (used != comma) throw std::invalid_argument("junk");
            std::string rest = line.substr(comma + 1);
            int64_t p = std::stoll(rest, &used);
            if (used != rest.size()) throw std::invalid_argument("junk");
            y_true.push_back(t);
            y_pred.push_back(p);
        } catch (const std::exception&) {
            throw std::runtime_error("malformed prediction line " + std::to_string(lineno) +
                                     ": '" + line + "' (want true,pred)");
        }
    }
    if (y_true.empty()) throw std::runtime_error("prediction csv has no rows: " + path);
    return {y_true, y_pred};
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split,
             const std::string& pred_csv, const std::string& averaging_name,
             const std::string& csv_out) {
    Averaging avg = averaging_from_name(averaging_name);
    ConfusionMatrix cm;
    if (!pred_csv.empty()) {
        auto [y_true, y_pred] = read_pred_csv(pred_csv);
        int64_t k = 0;
        for (int64_t v : y_true) k = std::max(k, v + 1);
        for (int64_t v : y_pred) k = std::max(k, v + 1);
        std::vector<std::string> names;
        if (k == int64_t(kClassNames.size()))
            names.assign(kClassNames.begin(), kClassNames.end());
        cm = confusion(y_true, y_pred, k, names);
    } else {
        Model model = load_checkpoint(ckpt);
        std::vector<std::string> warnings;
        DatasetManifest manifest = scan_dataset(data, &warnings);
        for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
        InMemoryDataset ds = load_split(manifest, split, model.config.input_size, model.dtype);
        std::vector<int64_t> preds;
        const int64_t bs = 16;
        for (int64_t b = 0; b < int64_t(ds.size()); b += bs) {
            int64_t bn = std::min<int64_t>(bs, int64_t(ds.size()) - b);
            Tensor logits = model.forward(batch_of(ds.images, b, bn, model.dtype), false);
            for (int64_t j = 0; j < bn; ++j)
                preds.push_back(train_detail::argmax_row(logits, j));
        }
        std::vector<std::string> names;
        if (model.config.num_classes == int64_t(kClassNames.size()))
            names.assign(kClassNames.begin(), kClassNames.end());
        cm = confusion(ds.labels, preds, model.config.num_classes, names);
        std::printf("split %s: %zu images\n", split.c_str(), ds.size());
    }

    RenderedReport rendered = render_report(cm, avg);
    std::fputs(rendered.table.c_str(), stdout);
    if (!csv_out.empty()) write_text_file(csv_out, rendered.csv);
    return 0;
}

// ------------------------------------------------------------------- predict

int cmd_predict(const std::string& ckpt, const std::vector<std::string>& images) {
    Model model = load_checkpoint(ckpt);
    bool any_failed = false;
    for (const std::string& path : images) {
        try {
            ImageSample sample = decode_image(path, model.config.input_size, model.dtype);
            Tensor x = batch_of({sample.pixels}, 0, 1, model.dtype);
            Tensor logits = model.forward(x, /*training=*/false);
            std::vector<double> probs = softmax_row(logits, 0);
            int64_t arg = train_detail::argmax_row(logits, 0);
            std::string line = path + "," + class_label(arg, model.config.num_classes) + ",";
            char buf[32];
            for (size_t c = 0; c < probs.size(); ++c) {
                std::snprintf(buf, sizeof(buf), "%.8f", probs[c]);
                line += std::string(c ? " " : "") + buf;
            }
            std::printf("%s\n", line.c_str());
        } catch (const std::exception& e) {
            std::cerr << "error: " << path << ": " << e.what() << "\n";
            any_failed = true;
        }
    }
    return any_failed ? 1 : 0;
}

// --------------------------------------------------------------- verify-data

int cmd_verify_data(const std::string& data, bool expect_hdv1, const std::string& json_out) {
    std::vector<std::string> warnings;
    DatasetManifest m = scan_dataset(data, &warnings);
    for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";

    std::printf("%-12s", "split");
    for (const char* cls : kClassNames) std::printf(" %9s", cls);
    std::printf(" %9s\n", "total");
    int64_t grand = 0;
    for (const char* split : kSplitNames) {
        std::printf("%-12s", split);
        for (const char* cls : kClassNames)
            std::printf(" %9lld", (long long)m.count(split, cls));
        std::printf(" %9lld\n", (long long)m.count(split));
        grand += m.count(split);
    }
    std::printf("Total %lld\n", (long long)grand);

    if (!json_out.empty()) write_text_file(json_out, manifest_to_json(m).dump(2) + "\n");
    if (expect_hdv1) {
        verify_hdv1(m);
        std::printf("hdv1 counts verified\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"maxglavit: scaled multi-axis vision transformer toolkit"};
    app.require_subcommand(1);

    // describe
    auto* describe = app.add_subcommand("describe", "print the per-layer plan and totals");
    std::string d_preset = "maxglavit", d_config, d_expect;
    describe->add_option("--preset", d_preset, "model preset (" + preset_list() + ")");
    describe->add_option("--config", d_config, "model config JSON file");
    describe->add_option("--expect-params", d_expect, "LOW..HIGH bound on the total");

    // grad-check
    auto* gradcheck = app.add_subcommand("grad-check",
                                         "finite-difference gradient verification on a "
                                         "reduced model");
    std::string g_preset = "maxglavit", g_corrupt;
    int64_t g_samples = 50;
    double g_tolerance = 1e-3;
    uint64_t g_seed = 42;
    gradcheck->add_option("--preset", g_preset, "model preset to reduce and check");
    gradcheck->add_option("--samples", g_samples, "parameter coordinates to sample")
        ->check(CLI::PositiveNumber);
    gradcheck->add_option("--tolerance", g_tolerance, "max relative error allowed");
    gradcheck->add_option("--seed", g_seed, "rng seed");
    gradcheck->add_option("--corrupt-backward", g_corrupt,
                          "negative control: scale the named op's backward by 1.5");

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::string t_preset = "maxglavit", t_config;
    TrainCliArgs t;
    train_cmd->add_option("--preset", t_preset, "model preset");
    train_cmd->add_option("--config", t_config, "model config JSON file");
    train_cmd->add_option("--train-config", t.train_config_path, "train config JSON file");
    auto* t_data = train_cmd->add_option("--data", t.data, "dataset root directory");
    auto* t_synth = train_cmd->add_flag("--synthetic", t.synthetic,
                                        "use the built-in synthetic disc dataset");
    t_data->excludes(t_synth);
    train_cmd->add_option("--per-class", t.per_class, "synthetic train images per class")
        ->check(CLI::PositiveNumber);
    train_cmd
        ->add_option("--val-per-class", t.val_per_class, "synthetic val images per class")
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--out", t.out, "best-validation checkpoint path");
    train_cmd->add_option("--last-out", t.last_out, "final checkpoint path (resume support)");
    train_cmd->add_option("--history", t.history, "write history CSV here");
    train_cmd->add_option("--resume", t.resume, "checkpoint to resume from");
    t.o_lr = train_cmd->add_option("--lr", t.flags.learning_rate, "learning rate");
    t.o_factor = train_cmd->add_option("--lr-decay-factor", t.flags.lr_decay_factor,
                                       "step decay factor");
    t.o_every = train_cmd->add_option("--lr-decay-every", t.flags.lr_decay_every_epochs,
                                      "epochs per decay step");
    t.o_batch = train_cmd->add_option("--batch-size", t.flags.batch_size, "batch size");
    t.o_epochs = train_cmd->add_option("--epochs", t.flags.epochs, "epochs to train");
    t.o_seed = train_cmd->add_option("--seed", t.flags.seed, "rng seed");
    t.o_mode = train_cmd->add_option("--decay-mode", t.decay_mode_name,
                                     "lr (schedule) or weight (decoupled decay)")
                   ->check(CLI::IsMember({"lr", "weight"}));
    train_cmd->add_flag("--no-augment", t.no_augment, "disable training augmentation");
    t.o_clip = train_cmd->add_option("--grad-clip", t.flags.grad_clip,
                                     "global L2 gradient clip (0 = off)");
    t.o_stop_acc = train_cmd->add_option("--stop-train-acc", t.flags.stop_train_acc,
                                         "stop once train accuracy reaches this");
    t.o_stop_loss = train_cmd->add_option("--stop-train-loss", t.flags.stop_train_loss,
                                          "stop once train loss reaches this");
    t.o_rot = train_cmd->add_option("--aug-rotation", t.flags.aug_rotation_deg,
                                    "augment rotation range (degrees)");
    t.o_shift = train_cmd->add_option("--aug-shift", t.flags.aug_shift_frac,
                                      "augment shift range (fraction)");
    t.o_smin = train_cmd->add_option("--aug-scale-min", t.flags.aug_scale_min,
                                     "augment scale lower bound");
    t.o_smax = train_cmd->add_option("--aug-scale-max", t.flags.aug_scale_max,
                                     "augment scale upper bound");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or a prediction CSV");
    std::string e_ckpt, e_data, e_split = "test", e_pred, e_avg = "weighted", e_csv;
    eval_cmd->add_option("--ckpt", e_ckpt, "checkpoint path");
    eval_cmd->add_option("--data", e_data, "dataset root directory");
    eval_cmd->add_option("--split", e_split, "dataset split")
        ->check(CLI::IsMember({"train", "validation", "test"}));
    eval_cmd->add_option("--pred", e_pred, "CSV of true,pred label pairs");
    eval_cmd->add_option("--averaging", e_avg, "weighted, macro, or per_class")
        ->check(CLI::IsMember({"weighted", "macro", "per_class"}));
    eval_cmd->add_option("--csv", e_csv, "write the metrics CSV here");

    // predict
    auto* predict = app.add_subcommand("predict", "classify images with a checkpoint");
    std::string p_ckpt;
    std::vector<std::string> p_images;
    predict->add_option("--ckpt", p_ckpt, "checkpoint path")->required();
    predict->add_option("--image", p_images, "image file (repeatable)")
        ->required()
        ->take_all();

    // verify-data
    auto* verify = app.add_subcommand("verify-data", "scan a dataset tree and print counts");
    std::string v_data, v_json;
    bool v_hdv1 = false;
    verify->add_option("--data", v_data, "dataset root directory")->required();
    verify->add_flag("--expect-hdv1", v_hdv1, "assert the published HDV1 counts");
    verify->add_option("--json", v_json, "write the manifest JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*describe) {
            if (d_config.empty() && !known_preset(d_preset)) {
                std::cerr << "error: unknown preset '" << d_preset << "' (have "
                          << preset_list() << ")\n";
                return 2;
            }
            return cmd_describe(resolve_model_config(d_preset, d_config), d_expect);
        }
        if (*gradcheck) {
            if (!known_preset(g_preset)) {
                std::cerr << "error: unknown preset '" << g_preset << "' (have "
                          << preset_list() << ")\n";
                return 2;
            }
            return cmd_grad_check(g_preset, g_samples, g_tolerance, g_seed, g_corrupt);
        }
        if (*train_cmd) {
            if (!t.synthetic && t.data.empty()) {
                std::cerr << "error: train needs --data DIR or --synthetic\n";
                return 2;
            }
            if (t_config.empty() && !known_preset(t_preset)) {
                std::cerr << "error: unknown preset '" << t_preset << "' (have "
                          << preset_list() << ")\n";
                return 2;
            }
            return cmd_train(resolve_model_config(t_preset, t_config), t);
        }
        if (*eval_cmd) {
            if (e_pred.empty() && (e_ckpt.empty() || e_data.empty())) {
                std::cerr << "error: eval needs --pred CSV, or --ckpt with --data\n";
                return 2;
            }
            return cmd_eval(e_ckpt, e_data, e_split, e_pred, e_avg, e_csv);
        }
        if (*predict) return cmd_predict(p_ckpt, p_images);
        if (*verify) return cmd_verify_data(v_data, v_hdv1, v_json);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
