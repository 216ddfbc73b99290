#include "pmae/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "pmae/error.hpp"
#include "pmae/evaluation.hpp"
#include "pmae/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pmae {

namespace {

struct Options {
    std::string config;
    std::optional<uint64_t> seed;
    std::string out;
    std::string checkpoint;
    std::string resume;
    std::vector<std::string> overrides;
    int64_t epochs = 0;
    int64_t count = 8;
    std::string embedder = "default";
    bool use_cls = false;
};

fs::path out_dir(const Options& o, const std::string& verb) {
    if (!o.out.empty()) return o.out;
    const char* root = std::getenv(kOutRootEnv);
    return fs::path(root != nullptr && *root != '\0' ? root : "runs") / verb;
}

RunConfig config_from_options(const Options& o) {
    if (o.config.empty()) throw ConfigError("--config is required");
    auto cfg = load_run_config(o.config, o.overrides);
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.validate();
    }
    return cfg;
}

// Checkpoint config with --override applied (e.g. data.root for a labeled set).
LoadedModel model_from_options(const Options& o) {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    auto model = load_model(o.checkpoint);
    if (!o.overrides.empty()) {
        auto text = run_config_text(model.config);
        model.config = parse_run_config(text, o.overrides);
    }
    if (o.seed) model.config.seed = *o.seed;
    return model;
}

DatasetHandle split_or_train(const RunConfig& cfg, Split split) {
    if (cfg.data.root.empty()) throw ConfigError("data.root is required (set it with --override data.root=<dir>)");
    const fs::path root = cfg.data.root;
    if (split == Split::val && !fs::exists(root / "val")) split = Split::train;
    auto ds = load_dataset(root, split, cfg.data.image_size);
    if (cfg.data.limit > 0 && ds.size() > cfg.data.limit) ds = ds.subset(cfg.data.limit);
    return ds;
}

void write_text(const fs::path& file, const std::string& text) {
    std::ofstream f(file);
    if (!f) throw IoError("cannot write " + file.string());
    f << text;
}

int cmd_pretrain(const Options& o, std::ostream& out) {
    auto cfg = config_from_options(o);
    const auto dir = out_dir(o, "pretrain");
    const fs::path resume = o.resume;
    auto result = pretrain(cfg, dir, nullptr, o.resume.empty() ? nullptr : &resume);
    out << "checkpoint " << result.checkpoint.string() << "\n";
    out << "metrics " << result.metrics_log.string() << "\n";
    return 0;
}

int cmd_probe(const Options& o, std::ostream& out, bool finetune) {
    auto model = model_from_options(o);
    const auto dir = out_dir(o, finetune ? "finetune" : "probe");
    fs::create_directories(dir);
    save_run_config(dir / "resolved_config.yaml", model.config);
    const auto train = split_or_train(model.config, Split::train);
    const auto val = split_or_train(model.config, Split::val);
    const auto& norm = model.config.data.augment.normalization;
    ProbeResult r;
    json options;
    if (finetune) {
        FinetuneOptions fo;
        fo.seed = model.config.seed;
        if (o.epochs > 0) fo.epochs = o.epochs;
        fo.warmup_epochs = std::min<double>(fo.warmup_epochs, static_cast<double>(fo.epochs) / 2);
        r = finetune_classifier(model.generator->encoder, train, &val, norm, fo);
        options = {{"epochs", fo.epochs}, {"batch_size", fo.batch_size}, {"lr", fo.lr}, {"seed", fo.seed}};
    } else {
        ProbeOptions po;
        po.seed = model.config.seed;
        po.use_cls = o.use_cls;
        if (o.epochs > 0) po.epochs = o.epochs;
        r = linear_probe(model.generator->encoder, train, &val, norm, po);
        options = {{"epochs", po.epochs}, {"batch_size", po.batch_size}, {"lr", po.lr}, {"seed", po.seed},
                   {"use_cls", po.use_cls}};
    }
    json report = {{"accuracy", r.accuracy},
                   {"train_accuracy", r.train_accuracy},
                   {"train_samples", train.size()},
                   {"eval_samples", val.size()},
                   {"options", options}};
    write_text(dir / "report.json", report.dump(2) + "\n");
    out << (finetune ? "finetune" : "probe") << " accuracy " << r.accuracy << "\n";
    return 0;
}

Embedder embedder_from_options(const Options& o, const LoadedModel& model) {
    if (o.embedder == "default") return Embedder::default_embedder();
    if (o.embedder == "discriminator") {
        return Embedder::from_spec({LossNetworkKind::discriminator, {}, std::nullopt}, model.discriminator);
    }
    return Embedder::from_spec({LossNetworkKind::external, {}, fs::path(o.embedder)});
}

int cmd_eval(const Options& o, std::ostream& out) {
    auto model = model_from_options(o);
    const auto dir = out_dir(o, "eval-recon");
    fs::create_directories(dir);
    save_run_config(dir / "resolved_config.yaml", model.config);
    const auto data = split_or_train(model.config, Split::val);
    const auto embedder = embedder_from_options(o, model);
    EvalOptions eo;
    eo.mask_seed = model.config.seed;
    eo.patch_size = model.config.encoder.patch_size;
    eo.mask_ratio = model.config.mask_ratio;
    const auto report = evaluate_reconstruction(model_reconstructor(model), data,
                                                model.config.data.augment.normalization, embedder, eo);
    write_text(dir / "report.json", report.to_json().dump(2) + "\n");
    write_text(dir / "table.txt", report.table());
    const auto n = std::min<int64_t>(o.count, data.size());
    render_outputs(model, data.images().narrow(0, 0, n), dir / "images", eo.mask_seed);
    out << report.table();
    return 0;
}

int cmd_render(const Options& o, std::ostream& out) {
    auto model = model_from_options(o);
    const auto dir = out_dir(o, "render");
    const auto data = split_or_train(model.config, Split::val);
    const auto n = std::min<int64_t>(o.count, data.size());
    const auto files = render_outputs(model, data.images().narrow(0, 0, n), dir, model.config.seed);
    save_run_config(dir / "resolved_config.yaml", model.config);
    out << "wrote " << files.size() << " images to " << dir.string() << "\n";
    return 0;
}

int cmd_validate(const Options& o, std::ostream& out) {
    auto cfg = config_from_options(o);
    cfg.resolve();
    cfg.validate();
    out << run_config_text(cfg);
    return 0;
}

int fail(std::ostream& err, const char* category, const std::string& detail, int code) {
    std::string line = detail;
    for (auto& c : line) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    err << "error: " << category << ": " << line << std::endl;
    return code;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Masked-autoencoder pretraining with perceptual and adversarial losses", "pmae"};
    app.require_subcommand(1, 1);
    Options o;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "Seed for every random stream");
        sub->add_option("--out", o.out, std::string("Output directory (default: $") + kOutRootEnv + "/<verb>)");
        sub->add_option("--override", o.overrides, "Dotted key=value config override (repeatable)");
    };
    auto* pre = app.add_subcommand("pretrain", "Pretrain a masked autoencoder");
    pre->add_option("--config", o.config, "Run configuration (YAML)")->required();
    pre->add_option("--resume", o.resume, "Checkpoint directory to resume from");
    add_common(pre);
    auto* probe = app.add_subcommand("probe", "Linear probe on frozen encoder features");
    auto* fine = app.add_subcommand("finetune", "Fine-tune the encoder with a classification head");
    auto* eval = app.add_subcommand("eval-recon", "Reconstruction metrics (L1, PSNR, SSIM, IS, FID)");
    auto* render = app.add_subcommand("render", "Reconstruction grids and [CLS] attention maps");
    for (auto* sub : {probe, fine, eval, render}) {
        sub->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
        sub->add_option("--config", o.config, "Unused; the checkpoint carries its configuration");
        add_common(sub);
    }
    for (auto* sub : {probe, fine}) sub->add_option("--epochs", o.epochs, "Classifier training epochs");
    probe->add_flag("--cls", o.use_cls, "Probe the [CLS] token instead of mean-pooled patch tokens");
    eval->add_option("--embedder", o.embedder, "default | discriminator | <loss-network weights dir>");
    for (auto* sub : {eval, render}) sub->add_option("--count", o.count, "Images to render");
    auto* validate = app.add_subcommand("validate-config", "Resolve and check a configuration");
    validate->add_option("--config", o.config, "Run configuration (YAML)")->required();
    add_common(validate);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail(err, "usage", e.what(), 2);
    }

    try {
        if (pre->parsed()) return cmd_pretrain(o, out);
        if (probe->parsed()) return cmd_probe(o, out, false);
        if (fine->parsed()) return cmd_probe(o, out, true);
        if (eval->parsed()) return cmd_eval(o, out);
        if (render->parsed()) return cmd_render(o, out);
        return cmd_validate(o, out);
    } catch (const ConfigError& e) {
        return fail(err, "config", e.what(), 2);
    } catch (const YAML::Exception& e) {
        return fail(err, "config", e.what(), 2);
    } catch (const NonFiniteLossError& e) {
        return fail(err, "non_finite", e.what(), 1);
    } catch (const IoError& e) {
        return fail(err, "io", e.what(), 1);
    } catch (const ShapeError& e) {
        return fail(err, "shape", e.what(), 1);
    } catch (const std::exception& e) {
        return fail(err, "runtime", e.what(), 1);
    }
}

} // namespace pmae
