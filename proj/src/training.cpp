#include "pmae/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "pmae/checkpoint.hpp"
#include "pmae/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pmae {

double learning_rate(const OptimizerConfig& opt, int64_t total_epochs, double epoch) {
    const double warmup = opt.warmup_epochs;
    if (warmup > 0.0 && epoch < warmup) return opt.lr * epoch / warmup;
    const double span = static_cast<double>(total_epochs) - warmup;
    if (span <= 0.0) return opt.lr;
    const double t = std::clamp((epoch - warmup) / span, 0.0, 1.0);
    return opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

// Matrices get weight decay; biases, norms, tokens do not.
std::unique_ptr<torch::optim::AdamW> make_adamw(const std::vector<torch::Tensor>& params, double lr,
                                                const OptimizerConfig& opt) {
    std::vector<torch::Tensor> decay;
    std::vector<torch::Tensor> no_decay;
    for (const auto& p : params) (p.dim() >= 2 && p.size(0) > 1 && p.numel() != p.size(-1) ? decay : no_decay).push_back(p);
    auto options = torch::optim::AdamWOptions(lr).betas({opt.beta1, opt.beta2});
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(decay, std::make_unique<torch::optim::AdamWOptions>(
                                   torch::optim::AdamWOptions(lr).betas({opt.beta1, opt.beta2}).weight_decay(
                                       opt.weight_decay)));
    groups.emplace_back(no_decay, std::make_unique<torch::optim::AdamWOptions>(
                                      torch::optim::AdamWOptions(lr).betas({opt.beta1, opt.beta2}).weight_decay(0.0)));
    return std::make_unique<torch::optim::AdamW>(groups, options);
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

void check_finite(const torch::Tensor& value, const std::string& term, const TrainState& st) {
    if (!std::isfinite(value.item<double>())) {
        throw NonFiniteLossError(term, "non-finite loss term '" + term + "' at epoch " + std::to_string(st.epoch) +
                                           ", step " + std::to_string(st.global_step));
    }
}

// Toggles requires_grad on a module's parameters for the lifetime of the guard.
class FreezeGuard {
public:
    explicit FreezeGuard(torch::nn::Module* m) : module_(m) {
        if (module_ == nullptr) return;
        for (auto& p : module_->parameters()) p.set_requires_grad(false);
    }
    ~FreezeGuard() {
        if (module_ == nullptr) return;
        for (auto& p : module_->parameters()) p.set_requires_grad(true);
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    torch::nn::Module* module_;
};

std::vector<ImageBatch> detach_all(const std::vector<ImageBatch>& xs) {
    std::vector<ImageBatch> out;
    for (const auto& x : xs) out.push_back(x.detach());
    return out;
}

} // namespace

TrainState::TrainState(RunConfig cfg) : config(std::move(cfg)) {
    config.validate();
    torch::set_num_threads(static_cast<int>(config.threads));
    torch::manual_seed(config.seed);
    generator = MaskedAutoencoder(config.encoder, config.decoder);
    generator_opt = make_adamw(generator->parameters(), config.optimizer.lr, config.optimizer);
    if (needs_discriminator(config.variant)) {
        discriminator = Discriminator(config.adversarial.discriminator);
        const double lr = config.adversarial.lr > 0.0 ? config.adversarial.lr : config.optimizer.lr;
        discriminator_opt = make_adamw(discriminator->parameters(), lr, config.optimizer);
    }
    if (config.variant == ObjectiveVariant::loss_network_perceptual) {
        external_loss = LossNetwork::external(config.loss.network);
    }
    ada = config.adversarial.ada;
    path_length = config.adversarial.path_length;
}

json StepRecord::to_json() const {
    json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["lr"] = lr;
    j["ada_p"] = ada_p;
    j["terms"] = terms;
    j["skipped"] = skipped;
    return j;
}

ImageBatch patch_normalized_target(const ImageBatch& images, int64_t patch_size) {
    auto seq = patchify(images, patch_size);
    auto mean = seq.tokens.mean(-1, true);
    auto var = seq.tokens.var(-1, /*unbiased=*/false, /*keepdim=*/true);
    seq.tokens = (seq.tokens - mean) / (var + 1e-6).sqrt();
    return unpatchify(seq);
}

StepRecord train_step(TrainState& st, const Batch& batch, int64_t steps_per_epoch) {
    const auto& cfg = st.config;
    StepRecord rec;
    rec.epoch = st.epoch;
    rec.step = st.global_step;
    rec.lr = learning_rate(cfg.optimizer, cfg.epochs,
                           static_cast<double>(st.epoch) +
                               static_cast<double>(st.batch_in_epoch) / static_cast<double>(steps_per_epoch));
    set_lr(*st.generator_opt, rec.lr);
    if (st.discriminator_opt) {
        const double scale = cfg.adversarial.lr > 0.0 ? cfg.adversarial.lr / cfg.optimizer.lr : 1.0;
        set_lr(*st.discriminator_opt, rec.lr * scale);
    }
    st.generator->train();

    const auto& images = batch.images;
    const auto b = images.size(0);
    auto mask_rng = derive_rng(cfg.seed, RngStream::mask, static_cast<std::uint64_t>(st.global_step));
    const auto plan = sample_mask(b, cfg.encoder.num_patches(), cfg.mask_ratio, mask_rng);
    const auto target = cfg.loss.norm_pix_target ? patch_normalized_target(images, cfg.encoder.patch_size) : images;
    auto bundle = st.generator->forward(images, plan);

    ObjectiveInputs in;
    in.pred = bundle.full;
    in.target = target;
    in.epoch = st.epoch;
    in.ssim = {3, cfg.data.augment.normalization.dynamic_range()};
    in.ssim_scales = cfg.loss.ssim_scales;
    if (cfg.loss.masked_only) {
        in.pixel_mask = pixel_mask(plan, {cfg.encoder.grid_side(), cfg.encoder.grid_side()}, cfg.encoder.patch_size);
    }

    std::optional<PathLengthResult> pl;
    ObjectiveResult objective;
    if (needs_discriminator(cfg.variant)) {
        const auto levels = cfg.msg_enabled ? static_cast<int64_t>(cfg.decoder.scale_heads.size()) : 1;
        const auto fake = cfg.msg_enabled ? bundle.pyramid : std::vector<ImageBatch>{bundle.full};
        const auto real = image_pyramid(target, levels);
        const bool use_ada = cfg.adversarial.ada_enabled;
        auto ada_rng = [&](std::uint64_t k) {
            return derive_rng(cfg.seed, RngStream::ada, static_cast<std::uint64_t>(st.global_step), k);
        };

        // Discriminator step on detached reconstructions.
        auto r_real = ada_rng(0);
        auto r_fake = ada_rng(1);
        const auto d_real_in = use_ada ? ada_augment(real, st.ada, r_real) : real;
        const auto d_fake_in = use_ada ? ada_augment(detach_all(fake), st.ada, r_fake) : detach_all(fake);
        auto d_real = st.discriminator->forward(d_real_in).score;
        auto d_fake = st.discriminator->forward(d_fake_in).score;
        auto d_loss = lsgan_d_loss(d_real, d_fake);
        check_finite(d_loss, "d_loss", st);
        st.discriminator_opt->zero_grad();
        d_loss.backward();
        st.discriminator_opt->step();
        rec.terms["d_loss"] = d_loss.item<double>();
        if (use_ada) st.ada = ada_update(st.ada, d_real);

        // Generator step: D is frozen; real and fake share augmentation draws so features align.
        FreezeGuard frozen(st.discriminator.ptr().get());
        auto r_g_fake = ada_rng(2);
        auto r_g_real = ada_rng(2);
        const auto g_fake_in = use_ada ? ada_augment(fake, st.ada, r_g_fake) : fake;
        const auto g_real_in = use_ada ? ada_augment(real, st.ada, r_g_real) : real;
        auto fake_out = st.discriminator->forward(g_fake_in);
        LossNetworkFeatures real_features;
        {
            torch::NoGradGuard no_grad;
            real_features = st.discriminator->forward(g_real_in).features;
        }
        in.pred_features = fake_out.features;
        in.real_features = real_features;
        in.d_fake = fake_out.score;
        objective = generator_objective(cfg.variant, in, cfg.loss.weights);

        if (cfg.adversarial.path_length_enabled) {
            if (st.global_step % st.path_length.every == 0) {
                auto pl_rng = derive_rng(cfg.seed, RngStream::path_length, static_cast<std::uint64_t>(st.global_step));
                auto projection = unit_projection(fake_out.features.layers.back(), pl_rng);
                pl = path_length_penalty(bundle.decoder_input_tokens, fake_out.features, st.path_length, projection);
                check_finite(pl->penalty, "path_length", st);
            } else {
                rec.skipped.push_back("path_length");
            }
        }
    } else if (cfg.variant == ObjectiveVariant::loss_network_perceptual) {
        in.pred_features = st.external_loss->extract(bundle.full);
        torch::NoGradGuard no_grad;
        in.real_features = st.external_loss->extract(target);
    }
    if (!needs_discriminator(cfg.variant)) objective = generator_objective(cfg.variant, in, cfg.loss.weights);

    auto total = objective.total;
    for (const auto& t : objective.terms) {
        if (!t.active) {
            rec.skipped.push_back(t.name);
            continue;
        }
        check_finite(t.value, t.name, st);
        rec.terms[t.name] = t.value.item<double>();
    }
    if (pl) {
        total = total + pl->penalty;
        rec.terms["path_length"] = pl->penalty.item<double>();
    }
    check_finite(total, "total", st);
    rec.terms["total"] = total.item<double>();

    st.generator_opt->zero_grad();
    total.backward();
    st.generator_opt->step();
    if (pl) st.path_length = pl->state;
    rec.ada_p = st.ada.p;
    st.global_step += 1;
    st.batch_in_epoch += 1;
    return rec;
}

namespace {

void append_optimizer(ArrayBundle& bundle, torch::optim::AdamW& opt, const std::string& prefix) {
    int64_t idx = 0;
    for (auto& group : opt.param_groups()) {
        for (auto& p : group.params()) {
            auto it = opt.state().find(p.unsafeGetTensorImpl());
            if (it != opt.state().end()) {
                auto& s = static_cast<torch::optim::AdamWParamState&>(*it->second);
                const auto base = prefix + std::to_string(idx) + ".";
                bundle.arrays.push_back({base + "step", torch::tensor({s.step()}, torch::kInt64)});
                bundle.arrays.push_back({base + "exp_avg", s.exp_avg()});
                bundle.arrays.push_back({base + "exp_avg_sq", s.exp_avg_sq()});
            }
            ++idx;
        }
    }
}

void load_optimizer(torch::optim::AdamW& opt, const ArrayBundle& bundle, const std::string& prefix) {
    int64_t idx = 0;
    for (auto& group : opt.param_groups()) {
        for (auto& p : group.params()) {
            const auto base = prefix + std::to_string(idx) + ".";
            if (const auto* step = bundle.find(base + "step")) {
                auto s = std::make_unique<torch::optim::AdamWParamState>();
                s->step(step->item<int64_t>());
                const auto& avg = bundle.at(base + "exp_avg");
                const auto& avg_sq = bundle.at(base + "exp_avg_sq");
                if (!avg.sizes().equals(p.sizes()) || !avg_sq.sizes().equals(p.sizes())) {
                    throw ConfigError("checkpoint mismatch at '" + base + "exp_avg': optimizer moment shape differs");
                }
                s->exp_avg(avg.clone());
                s->exp_avg_sq(avg_sq.clone());
                opt.state()[p.unsafeGetTensorImpl()] = std::move(s);
            }
            ++idx;
        }
    }
}

json ada_json(const AdaState& a) {
    return {{"p", a.p},
            {"target", a.target},
            {"step", a.step},
            {"window", a.window},
            {"rt_estimate", a.rt_estimate},
            {"sign_offset", a.sign_offset},
            {"accum_sum", a.accum_sum},
            {"accum_count", a.accum_count},
            {"accum_batches", a.accum_batches}};
}

void ada_from_json(const json& j, AdaState& a) {
    a.p = j.at("p").get<double>();
    a.target = j.at("target").get<double>();
    a.step = j.at("step").get<double>();
    a.window = j.at("window").get<int64_t>();
    a.rt_estimate = j.at("rt_estimate").get<double>();
    a.sign_offset = j.at("sign_offset").get<double>();
    a.accum_sum = j.at("accum_sum").get<double>();
    a.accum_count = j.at("accum_count").get<int64_t>();
    a.accum_batches = j.at("accum_batches").get<int64_t>();
}

} // namespace

void save_checkpoint(const TrainState& st, const fs::path& dir) {
    ArrayBundle bundle;
    bundle.metadata = {{"kind", "pmae_train_state"},
                       {"config", run_config_text(st.config)},
                       {"epoch", st.epoch},
                       {"global_step", st.global_step},
                       {"batch_in_epoch", st.batch_in_epoch},
                       {"log_cursor", st.log_cursor},
                       {"seed", st.config.seed},
                       {"ada", ada_json(st.ada)},
                       {"path_length",
                        {{"ema_a", st.path_length.ema_a},
                         {"decay", st.path_length.decay},
                         {"weight", st.path_length.weight},
                         {"every", st.path_length.every}}}};
    append_module(bundle, *st.generator, "generator.");
    append_optimizer(bundle, *st.generator_opt, "generator_opt.");
    if (st.discriminator) {
        append_module(bundle, *st.discriminator, "discriminator.");
        append_optimizer(bundle, *st.discriminator_opt, "discriminator_opt.");
    }
    save_bundle(dir, bundle);
}

namespace {

RunConfig config_from_bundle(const ArrayBundle& bundle, const fs::path& dir) {
    if (bundle.metadata.value("kind", "") != "pmae_train_state") {
        throw IoError("checkpoint at " + dir.string() + " is not a training state");
    }
    return parse_run_config(bundle.metadata.at("config").get<std::string>());
}

} // namespace

TrainState load_checkpoint(const fs::path& dir) {
    const auto bundle = load_bundle(dir);
    TrainState st(config_from_bundle(bundle, dir));
    load_module(*st.generator, bundle, "generator.");
    load_optimizer(*st.generator_opt, bundle, "generator_opt.");
    if (st.discriminator) {
        load_module(*st.discriminator, bundle, "discriminator.");
        load_optimizer(*st.discriminator_opt, bundle, "discriminator_opt.");
    }
    const auto& m = bundle.metadata;
    st.epoch = m.at("epoch").get<int64_t>();
    st.global_step = m.at("global_step").get<int64_t>();
    st.batch_in_epoch = m.at("batch_in_epoch").get<int64_t>();
    st.log_cursor = m.at("log_cursor").get<int64_t>();
    ada_from_json(m.at("ada"), st.ada);
    const auto& pl = m.at("path_length");
    st.path_length.ema_a = pl.at("ema_a").get<double>();
    st.path_length.decay = pl.at("decay").get<double>();
    st.path_length.weight = pl.at("weight").get<double>();
    st.path_length.every = pl.at("every").get<int64_t>();
    return st;
}

LoadedModel load_model(const fs::path& dir) {
    const auto bundle = load_bundle(dir);
    LoadedModel m;
    m.config = config_from_bundle(bundle, dir);
    torch::manual_seed(m.config.seed);
    m.generator = MaskedAutoencoder(m.config.encoder, m.config.decoder);
    load_module(*m.generator, bundle, "generator.");
    if (needs_discriminator(m.config.variant)) {
        m.discriminator = Discriminator(m.config.adversarial.discriminator);
        load_module(*m.discriminator, bundle, "discriminator.");
    }
    m.generator->eval();
    return m;
}

PretrainResult pretrain(const RunConfig& cfg_in, const fs::path& out_dir, const DatasetHandle* dataset,
                        const fs::path* resume) {
    RunConfig cfg = cfg_in;
    cfg.resolve();
    cfg.validate();
    std::optional<DatasetHandle> owned;
    if (dataset == nullptr) {
        if (cfg.data.root.empty()) throw ConfigError("data.root is required");
        owned = load_dataset(cfg.data.root, Split::train, cfg.data.image_size);
        dataset = &*owned;
    }
    if (cfg.data.limit > 0 && dataset->size() > cfg.data.limit) {
        owned = dataset->subset(cfg.data.limit);
        dataset = &*owned;
    }
    if (dataset->size() == 0) throw ConfigError("dataset is empty");
    if (dataset->image_size() != cfg.data.image_size) {
        throw ConfigError("dataset image size " + std::to_string(dataset->image_size()) + " != data.image_size " +
                          std::to_string(cfg.data.image_size));
    }

    fs::create_directories(out_dir);
    save_run_config(out_dir / "resolved_config.yaml", cfg);

    TrainState st = resume ? load_checkpoint(*resume) : TrainState(cfg);
    if (resume) {
        // The resumed run continues under the checkpoint's own config except for the epoch budget.
        st.config.epochs = cfg.epochs;
        st.config.validate();
    }

    PretrainResult result;
    result.metrics_log = out_dir / "metrics.jsonl";
    std::vector<std::string> kept_lines;
    if (resume && fs::exists(result.metrics_log)) {
        std::ifstream old(result.metrics_log);
        for (std::string line; static_cast<int64_t>(kept_lines.size()) < st.log_cursor && std::getline(old, line);) {
            kept_lines.push_back(line);
        }
    }
    std::ofstream log(result.metrics_log, std::ios::trunc);
    for (const auto& l : kept_lines) log << l << "\n";

    const auto n = dataset->size();
    const auto bs = st.config.optimizer.batch_size;
    const auto steps_per_epoch = (n + bs - 1) / bs;
    while (st.epoch < st.config.epochs) {
        const auto order = epoch_order(n, st.config.seed, st.epoch);
        while (st.batch_in_epoch < steps_per_epoch) {
            const auto begin = st.batch_in_epoch * bs;
            const auto end = std::min(n, begin + bs);
            std::vector<int64_t> idx(order.begin() + begin, order.begin() + end);
            const auto batch = make_batch(*dataset, idx, st.config.data.augment, st.config.seed, st.epoch);
            StepRecord rec;
            try {
                rec = train_step(st, batch, steps_per_epoch);
            } catch (const NonFiniteLossError&) {
                save_checkpoint(st, out_dir / "last_good");
                throw;
            }
            log << rec.to_json().dump() << "\n";
            log.flush();
            st.log_cursor += 1;
            result.records.push_back(std::move(rec));
        }
        st.epoch += 1;
        st.batch_in_epoch = 0;
        if (st.config.checkpoint_every > 0 && st.epoch % st.config.checkpoint_every == 0 &&
            st.epoch < st.config.epochs) {
            save_checkpoint(st, out_dir / ("checkpoint_epoch_" + std::to_string(st.epoch)));
        }
    }
    result.checkpoint = out_dir / "checkpoint";
    save_checkpoint(st, result.checkpoint);
    return result;
}

std::map<int64_t, double> epoch_means(const std::vector<StepRecord>& records, const std::string& term) {
    std::map<int64_t, std::pair<double, int64_t>> acc;
    for (const auto& r : records) {
        auto it = r.terms.find(term);
        if (it == r.terms.end()) continue;
        acc[r.epoch].first += it->second;
        acc[r.epoch].second += 1;
    }
    std::map<int64_t, double> out;
    for (const auto& [e, v] : acc) out[e] = v.first / static_cast<double>(v.second);
    return out;
}

torch::Tensor encoder_features(ViTEncoder& encoder, const DatasetHandle& dataset, const Normalization& norm,
                               bool use_cls, int64_t batch_size) {
    torch::NoGradGuard no_grad;
    encoder->eval();
    std::vector<torch::Tensor> out;
    const auto n = dataset.size();
    for (int64_t i = 0; i < n; i += batch_size) {
        const auto len = std::min(batch_size, n - i);
        auto x = normalize(dataset.images().narrow(0, i, len), norm);
        auto plan = MaskPlan::none(len, encoder->config().num_patches());
        auto tokens = encoder->forward(x, plan).tokens;
        out.push_back(use_cls ? tokens.select(1, 0) : tokens.narrow(1, 1, tokens.size(1) - 1).mean(1));
    }
    return torch::cat(out, 0);
}

namespace {

double accuracy(const torch::Tensor& logits, const torch::Tensor& labels) {
    return logits.argmax(1).eq(labels).to(torch::kFloat64).mean().item<double>();
}

void require_labels(const DatasetHandle& d, const char* op) {
    if (!d.labeled()) throw ConfigError(std::string(op) + " needs a labeled dataset (class-per-subdirectory layout)");
}

} // namespace

ProbeResult linear_probe(ViTEncoder encoder, const DatasetHandle& train, const DatasetHandle* eval,
                         const Normalization& norm, const ProbeOptions& opts) {
    require_labels(train, "linear_probe");
    if (eval == nullptr) eval = &train;
    require_labels(*eval, "linear_probe");
    ProbeResult r;
    r.encoder_checksum_before = parameter_checksum(*encoder);
    for (auto& p : encoder->parameters()) p.set_requires_grad(false);

    auto f_train = encoder_features(encoder, train, norm, opts.use_cls);
    auto f_eval = encoder_features(encoder, *eval, norm, opts.use_cls);
    auto mean = f_train.mean(0, true);
    auto stdev = f_train.std(0, true, true) + 1e-6;
    f_train = (f_train - mean) / stdev;
    f_eval = (f_eval - mean) / stdev;

    const auto classes = static_cast<int64_t>(train.class_names().size());
    torch::manual_seed(opts.seed);
    torch::nn::Linear head(f_train.size(1), classes);
    torch::optim::AdamW opt(head->parameters(), torch::optim::AdamWOptions(opts.lr).weight_decay(0.0));
    auto rng = derive_rng(opts.seed, RngStream::probe, 0);
    auto gen = torch_generator(rng);
    const auto n = f_train.size(0);
    for (int64_t e = 0; e < opts.epochs; ++e) {
        auto perm = torch::randperm(n, gen, torch::kLong);
        for (int64_t i = 0; i < n; i += opts.batch_size) {
            auto idx = perm.narrow(0, i, std::min(opts.batch_size, n - i));
            auto loss = torch::nn::functional::cross_entropy(head(f_train.index_select(0, idx)),
                                                             train.labels().index_select(0, idx));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    torch::NoGradGuard no_grad;
    r.train_accuracy = accuracy(head(f_train), train.labels());
    r.accuracy = accuracy(head(f_eval), eval->labels());
    r.encoder_checksum_after = parameter_checksum(*encoder);
    return r;
}

ProbeResult linear_probe(const fs::path& checkpoint, const DatasetHandle& train, const DatasetHandle* eval,
                         const ProbeOptions& opts) {
    auto model = load_model(checkpoint);
    return linear_probe(model.generator->encoder, train, eval, model.config.data.augment.normalization, opts);
}

ProbeResult finetune_classifier(ViTEncoder encoder, const DatasetHandle& train, const DatasetHandle* eval,
                                const Normalization& norm, const FinetuneOptions& opts) {
    require_labels(train, "finetune_classifier");
    if (eval == nullptr) eval = &train;
    require_labels(*eval, "finetune_classifier");
    ProbeResult r;
    r.encoder_checksum_before = parameter_checksum(*encoder);
    for (auto& p : encoder->parameters()) p.set_requires_grad(true);
    const auto classes = static_cast<int64_t>(train.class_names().size());
    torch::manual_seed(opts.seed);
    torch::nn::Linear head(encoder->config().width, classes);

    OptimizerConfig oc;
    oc.lr = opts.lr;
    oc.weight_decay = opts.weight_decay;
    oc.beta1 = opts.beta1;
    oc.beta2 = opts.beta2;
    oc.warmup_epochs = std::min(opts.warmup_epochs, static_cast<double>(opts.epochs));
    auto params = encoder->parameters();
    for (auto& p : head->parameters()) params.push_back(p);
    auto opt = make_adamw(params, opts.lr, oc);

    auto logits_of = [&](const torch::Tensor& images) {
        auto plan = MaskPlan::none(images.size(0), encoder->config().num_patches());
        return head(encoder->forward(images, plan).tokens.select(1, 0));
    };
    auto rng = derive_rng(opts.seed, RngStream::probe, 1);
    auto gen = torch_generator(rng);
    const auto n = train.size();
    const auto steps = (n + opts.batch_size - 1) / opts.batch_size;
    for (int64_t e = 0; e < opts.epochs; ++e) {
        encoder->train();
        auto perm = torch::randperm(n, gen, torch::kLong);
        for (int64_t s = 0; s < steps; ++s) {
            set_lr(*opt, learning_rate(oc, opts.epochs, static_cast<double>(e) + static_cast<double>(s) / steps));
            auto idx = perm.narrow(0, s * opts.batch_size, std::min(opts.batch_size, n - s * opts.batch_size));
            auto x = normalize(train.images().index_select(0, idx), norm);
            auto loss = torch::nn::functional::cross_entropy(logits_of(x), train.labels().index_select(0, idx));
            opt->zero_grad();
            loss.backward();
            opt->step();
        }
    }
    torch::NoGradGuard no_grad;
    encoder->eval();
    auto eval_logits = [&](const DatasetHandle& d) {
        std::vector<torch::Tensor> out;
        for (int64_t i = 0; i < d.size(); i += 128) {
            const auto len = std::min<int64_t>(128, d.size() - i);
            out.push_back(logits_of(normalize(d.images().narrow(0, i, len), norm)));
        }
        return torch::cat(out, 0);
    };
    r.train_accuracy = accuracy(eval_logits(train), train.labels());
    r.accuracy = accuracy(eval_logits(*eval), eval->labels());
    r.encoder_checksum_after = parameter_checksum(*encoder);
    return r;
}

ProbeResult finetune_classifier(const fs::path& checkpoint, const DatasetHandle& train, const DatasetHandle* eval,
                                const FinetuneOptions& opts) {
    auto model = load_model(checkpoint);
    return finetune_classifier(model.generator->encoder, train, eval, model.config.data.augment.normalization, opts);
}

} // namespace pmae
