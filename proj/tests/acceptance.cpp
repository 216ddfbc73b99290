// Acceptance gate: one PASS/FAIL/SKIP line per criterion. Criterion 6 runs only with PMAE_SLOW=1.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <map>
#include <iostream>
#include <sstream>

#include "helpers.hpp"
#include "oracles.hpp"
#include "pmae/adversarial.hpp"
#include "pmae/error.hpp"
#include "pmae/evaluation.hpp"
#include "pmae/losses.hpp"
#include "pmae/synthetic.hpp"
#include "pmae/training.hpp"

using namespace pmae;
using testing_support::TempDir;
using testing_support::tiny_config;
using testing_support::tiny_dataset;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
    Status status = Status::pass;
    std::string detail;
};

// Collects failed checks; the first few are reported.
struct Checks {
    int total = 0;
    std::vector<std::string> failures;
    double worst = 0.0;

    void expect(bool ok, const std::string& what) {
        ++total;
        if (!ok) failures.push_back(what);
    }
    void near(double got, double want, double tol, const std::string& what) {
        const double err = std::abs(got - want);
        worst = std::max(worst, err);
        std::ostringstream s;
        s << what << " got " << got << " want " << want;
        expect(err <= tol, s.str());
    }
    Outcome outcome(const std::string& summary) const {
        std::ostringstream s;
        s << summary << " (" << total - static_cast<int>(failures.size()) << "/" << total << " checks";
        if (!failures.empty()) s << "; first failure: " << failures.front();
        s << ")";
        return {failures.empty() ? Status::pass : Status::fail, s.str()};
    }
};

torch::Tensor rand64(std::vector<int64_t> shape) { return torch::rand(shape, torch::kFloat64); }

LossNetworkFeatures random_features(int64_t b, int64_t c0) {
    return LossNetworkFeatures::from_layers({torch::randn({b, c0, 6, 6}, torch::kFloat64),
                                             torch::randn({b, c0 + 2, 3, 3}, torch::kFloat64)});
}

std::vector<oracle::Array4> arrays(const LossNetworkFeatures& f) {
    std::vector<oracle::Array4> out;
    for (const auto& l : f.layers) out.push_back(oracle::array4(l));
    return out;
}

Outcome loss_oracles() {
    Checks c;
    torch::manual_seed(101);
    for (int i = 0; i < 20; ++i) {
        const auto tag = " #" + std::to_string(i);
        auto a = torch::randn({1 + i % 3, 3, 6 + i % 5, 6}, torch::kFloat64);
        auto b = torch::randn_like(a);
        c.near(pmae::l1_loss(a, b).item<double>(), oracle::l1(oracle::flat(a), oracle::flat(b)), 1e-12, "l1" + tag);

        const int64_t scales = 1 + i % 4;
        const int64_t side = (int64_t{1} << (scales - 1)) * 3 + (i % 3) * 2;
        auto x = rand64({1 + i % 2, 3, side, side});
        auto y = (x + 0.2 * torch::randn_like(x)).clamp(0.0, 1.0);
        c.near(ms_ssim_loss(x, y, 0.85, scales, {3, 1.0}).item<double>(),
               oracle::ms_ssim_loss(oracle::array4(x), oracle::array4(y), 0.85, scales, 1.0), 1e-9, "ms_ssim" + tag);

        auto f = torch::randn({1 + i % 2, 2 + i % 4, 3 + i % 3, 4}, torch::kFloat64);
        const auto g = oracle::flat(gram(f));
        const auto gw = oracle::gram(oracle::array4(f));
        double gerr = 0.0;
        for (size_t k = 0; k < g.size(); ++k) gerr = std::max(gerr, std::abs(g[k] - gw[k]));
        c.near(gerr, 0.0, 1e-12, "gram" + tag);

        auto p = random_features(1 + i % 2, 2 + i % 3);
        auto r = random_features(1 + i % 2, 2 + i % 3);
        LossWeights w;
        w.delta_s = 40.0 / (1 + i % 3);
        c.near(feature_matching_loss(p, r, w).item<double>(),
               oracle::feature_matching(arrays(p), arrays(r), w.delta_f, w.delta_s), 1e-10, "feature_matching" + tag);

        auto dr = torch::randn({2 + i, 1}, torch::kFloat64);
        auto df = torch::randn({2 + i, 1}, torch::kFloat64);
        c.near(lsgan_d_loss(dr, df).item<double>(), oracle::lsgan_d(oracle::flat(dr), oracle::flat(df)), 1e-12,
               "lsgan_d" + tag);
        c.near(lsgan_g_loss(df).item<double>(), oracle::lsgan_g(oracle::flat(df)), 1e-12, "lsgan_g" + tag);

        auto u = torch::rand({2, 3, 8, 8});
        auto v = torch::rand({2, 3, 8, 8});
        c.near(psnr(u, v), oracle::psnr(oracle::flat(u), oracle::flat(v), 1.0), 1e-4, "psnr" + tag);

        EmbeddingSet ea{torch::randn({50 + i, 5}, torch::kFloat64), EmbeddingSource::file};
        EmbeddingSet eb{torch::randn({60, 5}, torch::kFloat64).matmul(torch::randn({5, 5}, torch::kFloat64)) + 0.5,
                        EmbeddingSource::file};
        const double want_fid = oracle::fid(oracle::matrix(ea.vectors), oracle::matrix(eb.vectors));
        c.expect(oracle::relative_error(compute_fid(ea, eb), want_fid) < 1e-4, "fid" + tag);

        auto probs = torch::softmax(torch::randn({30 + i, 6}, torch::kFloat64) * 2, 1);
        std::vector<std::vector<double>> rows;
        for (int64_t k = 0; k < probs.size(0); ++k) rows.push_back(oracle::flat(probs[k]));
        const auto scores = oracle::inception_scores(rows, 4);
        double mean = 0.0;
        for (double s : scores) mean += s / 4;
        c.near(compute_is(probs, 4).first, mean, 1e-9, "is" + tag);
    }
    return c.outcome("l1, ms_ssim, gram, feature matching, lsgan, psnr, fid, is against loop/closed-form oracles");
}

// Smooth stand-in networks (double precision) for the gradient checks.
struct SmoothNet {
    torch::Tensor w1, w2;
    explicit SmoothNet(uint64_t seed) {
        torch::manual_seed(seed);
        w1 = torch::randn({4, 3, 3, 3}, torch::kFloat64) * 0.3;
        w2 = torch::randn({5, 4, 3, 3}, torch::kFloat64) * 0.3;
    }
    LossNetworkFeatures features(const torch::Tensor& x) const {
        auto a = torch::tanh(torch::conv2d(x, w1, {}, 1, 1));
        auto b = torch::tanh(torch::conv2d(a, w2, {}, 2, 1));
        return LossNetworkFeatures::from_layers({a, b});
    }
};

double max_relative_gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                   const torch::Tensor& x0, uint64_t seed) {
    auto x = x0.clone().requires_grad_(true);
    auto g = torch::autograd::grad({f(x)}, {x})[0].reshape(-1);
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<int64_t> pick(0, x0.numel() - 1);
    std::vector<int64_t> coords;
    for (int i = 0; i < 50; ++i) coords.push_back(pick(gen));
    const auto numeric = oracle::central_differences([&](const torch::Tensor& t) { return f(t).item<double>(); },
                                                     x0, coords);
    double worst = 0.0;
    for (size_t i = 0; i < coords.size(); ++i) {
        worst = std::max(worst, oracle::relative_error(g[coords[i]].item<double>(), numeric[i]));
    }
    return worst;
}

Outcome gradients() {
    Checks c;
    torch::manual_seed(202);
    auto x = rand64({1, 3, 24, 24});
    auto target = rand64({1, 3, 24, 24});
    SmoothNet net(7);
    const auto real = net.features(target);
    LossWeights w;

    const double e_ssim = max_relative_gradient_error(
        [&](const torch::Tensor& t) { return ms_ssim_loss(t, target, 0.85, 4); }, x, 1);
    const double e_fm = max_relative_gradient_error(
        [&](const torch::Tensor& t) { return feature_matching_loss(net.features(t), real, w); }, x, 2);
    const double e_g = max_relative_gradient_error(
        [&](const torch::Tensor& t) { return lsgan_g_loss(net.features(t).layers.back().mean({1, 2, 3})); }, x, 3);
    auto projection = torch::randn({1, 5, 12, 12}, torch::kFloat64);
    projection /= projection.norm();
    PathLengthState pl;
    pl.ema_a = 0.2;
    const double e_pl = max_relative_gradient_error(
        [&](const torch::Tensor& t) {
            auto latent = t.requires_grad() ? t : t.clone().requires_grad_(true);
            return path_length_penalty(latent, net.features(latent), pl, projection).penalty;
        },
        x, 4);
    std::ostringstream s;
    s << "max relative error at 50 coords: ms_ssim " << e_ssim << ", feature_matching " << e_fm << ", lsgan_g "
      << e_g << ", path_length " << e_pl;
    for (double e : {e_ssim, e_fm, e_g, e_pl}) c.expect(e < 1e-3, s.str());
    return c.outcome(s.str());
}

MaskPlan plan_for(int64_t b, int64_t n, uint64_t seed) {
    auto rng = derive_rng(seed, RngStream::mask, 0);
    return sample_mask(b, n, 0.75, rng);
}

Outcome structure() {
    Checks c;
    torch::manual_seed(303);
    auto img = torch::rand({2, 3, 224, 224});
    c.expect(torch::equal(unpatchify(patchify(img, 16)), img), "patchify/unpatchify roundtrip");
    auto plan = plan_for(4, 196, 1);
    c.expect(plan.num_masked() == 147 && plan.num_visible() == 49, "147/49 split at N=196");

    EncoderConfig enc{2, 32, 2, 4, 32, 3, 2.0};
    DecoderConfig dec;
    dec.depth = 2;
    dec.width = 32;
    dec.heads = 2;
    dec.mlp_ratio = 2.0;
    torch::manual_seed(5);
    MaskedAutoencoder base(enc, dec);
    auto mdec = dec;
    mdec.msg_enabled = true;
    mdec.scale_heads = {32, 16, 8};
    mdec.skip_pairs = default_skip_pairs(enc.depth, mdec.depth);
    MaskedAutoencoder msg(enc, mdec);
    {
        torch::NoGradGuard no_grad;
        auto dst = msg->named_parameters();
        for (const auto& p : base->named_parameters()) dst[p.key()].copy_(p.value());
    }
    auto x = torch::randn({2, 3, 32, 32});
    auto mplan = plan_for(2, 64, 2);
    auto out = msg->forward(x, mplan);
    c.expect(out.pyramid.size() == 3, "three pyramid levels");
    if (out.pyramid.size() == 3) {
        for (size_t i = 0; i < 3; ++i) {
            const int64_t side = 32 >> i;
            c.expect(out.pyramid[i].sizes() == torch::IntArrayRef({2, 3, side, side}),
                     "pyramid level " + std::to_string(i));
        }
    }
    c.expect(torch::equal(out.full, base->forward(x, mplan).full), "zero-init MSG equals base model");

    auto maps = extract_cls_attention(base->encoder, x);
    c.near((maps.weights.sum(-1) - 1.0).abs().max().item<double>(), 0.0, 1e-5, "attention row sums");

    TempDir dir;
    auto cfg = tiny_config(ObjectiveVariant::gan_perceptual, true);
    cfg.adversarial.ada_enabled = true;
    cfg.adversarial.ada.p = 0.3;
    cfg.adversarial.path_length_enabled = true;
    cfg.adversarial.path_length.every = 1;
    cfg.validate();
    auto ds = tiny_dataset();
    std::vector<int64_t> idx{0, 1, 2, 3};
    auto batch = make_batch(ds, idx, cfg.data.augment, cfg.seed, 0);
    TrainState a(cfg);
    train_step(a, batch, 4);
    train_step(a, batch, 4);
    save_checkpoint(a, dir / "ck");
    auto b = load_checkpoint(dir / "ck");
    auto ra = train_step(a, batch, 4);
    auto rb = train_step(b, batch, 4);
    bool same = ra.terms == rb.terms;
    auto pb = b.generator->named_parameters();
    for (const auto& p : a.generator->named_parameters()) same = same && torch::equal(p.value(), pb[p.key()]);
    auto db = b.discriminator->named_parameters();
    for (const auto& p : a.discriminator->named_parameters()) same = same && torch::equal(p.value(), db[p.key()]);
    c.expect(same, "checkpoint roundtrip next step bit-exact");
    return c.outcome("roundtrip, mask cardinality, MSG shapes, zero-init, attention rows, checkpoint resume");
}

Outcome schedule() {
    Checks c;
    auto cfg = tiny_config(ObjectiveVariant::gan_perceptual);
    auto ds = tiny_dataset();
    TrainState st(cfg);
    std::vector<int64_t> idx{0, 1, 2, 3};
    for (int64_t e = 0; e < 4; ++e) {
        st.epoch = e;
        st.batch_in_epoch = 0;
        auto rec = train_step(st, make_batch(ds, idx, cfg.data.augment, cfg.seed, e), 4);
        c.expect(rec.terms.count("feat") == (e % 2 == 0 ? 1u : 0u), "feat on epoch " + std::to_string(e));
    }
    OptimizerConfig o;
    o.lr = 1.5e-4;
    o.warmup_epochs = 40;
    c.near(learning_rate(o, 300, 40.0), 1.5e-4, 1e-9, "lr at warmup end");

    AdaState s;
    s.step = 0.05;
    s.window = 4;
    std::mt19937_64 gen(404);
    std::normal_distribution<double> normal(0.0, 3.0);
    bool inside = true;
    for (int i = 0; i < 10000; ++i) {
        std::vector<double> scores(4);
        for (auto& v : scores) v = normal(gen);
        s = ada_update(s, torch::tensor(scores));
        inside = inside && s.p >= 0.0 && s.p <= 1.0;
    }
    c.expect(inside, "ada p within [0, 1]");
    return c.outcome("feat parity, lr at warmup end, ada p range over 10k windows");
}

// Fixed 256-image set, so augmentation is off; D is slowed so pixel terms dominate early training.
RunConfig overfit_config() {
    RunConfig cfg;
    cfg.variant = ObjectiveVariant::gan_perceptual;
    cfg.epochs = 20;
    cfg.seed = 1;
    cfg.data.image_size = 32;
    cfg.data.augment.crop_enabled = false;
    cfg.data.augment.flip_prob = 0.0;
    cfg.decoder.width = 256;
    cfg.decoder.heads = 8;
    cfg.optimizer.batch_size = 8;
    cfg.optimizer.lr = 5e-4;
    cfg.optimizer.warmup_epochs = 2;
    cfg.adversarial.lr = 1e-4;
    cfg.resolve();
    cfg.validate();
    return cfg;
}

Outcome overfit() {
    TempDir dir;
    auto cfg = overfit_config();
    auto ds = synthetic_dataset({8, 32, 32, 77});
    try {
        auto r = pretrain(cfg, dir / "run", &ds);
        auto l1 = epoch_means(r.records, "l1");
        if (l1.size() < 2) return {Status::fail, "l1 term missing from records"};
        const double first = l1.begin()->second, last = l1.rbegin()->second;
        std::ostringstream s;
        s << "256 images, vit-tiny, gan_perceptual, 20 epochs: l1 epoch 1 " << first << " -> epoch 20 " << last
          << " (ratio " << last / first << ")";
        return {last < 0.5 * first ? Status::pass : Status::fail, s.str()};
    } catch (const NonFiniteLossError& e) {
        return {Status::fail, std::string("non-finite loss: ") + e.what()};
    }
}

// Full protocol: 10k labeled images, 50 epochs, three variants, three seeds each.
Outcome directional() {
    const char* slow = std::getenv("PMAE_SLOW");
    if (slow == nullptr || std::string(slow) != "1") return {Status::skip, "set PMAE_SLOW=1 to run (hours)"};
    TempDir dir;
    auto train = synthetic_dataset({10, 1000, 32, 600});
    auto val = synthetic_dataset({10, 100, 32, 601});
    std::map<ObjectiveVariant, double> mean;
    std::ostringstream s;
    for (auto v : {ObjectiveVariant::mse, ObjectiveVariant::ms_ssim_l1, ObjectiveVariant::gan_perceptual}) {
        for (uint64_t seed = 0; seed < 3; ++seed) {
            RunConfig cfg;
            cfg.variant = v;
            cfg.epochs = 50;
            cfg.seed = seed;
            cfg.optimizer.warmup_epochs = 5;
            cfg.data.augment.normalization = dataset_statistics(train);
            cfg.resolve();
            cfg.validate();
            const auto out = dir / (to_string(v) + "_" + std::to_string(seed));
            auto r = pretrain(cfg, out, &train);
            auto model = load_model(r.checkpoint);
            ProbeOptions po;
            po.seed = seed;
            mean[v] += linear_probe(model.generator->encoder, train, &val, cfg.data.augment.normalization, po)
                           .accuracy / 3.0;
        }
        s << to_string(v) << " " << mean[v] << " ";
    }
    const bool ok = mean[ObjectiveVariant::ms_ssim_l1] >= mean[ObjectiveVariant::mse] &&
                    mean[ObjectiveVariant::gan_perceptual] >= mean[ObjectiveVariant::mse];
    return {ok ? Status::pass : Status::fail, "mean probe accuracy: " + s.str()};
}

Outcome evaluation_plumbing() {
    Checks c;
    auto ds = synthetic_dataset({4, 8, 32, 9});
    auto report = evaluate_reconstruction(identity_reconstructor(), ds, dataset_statistics(ds),
                                          Embedder::default_embedder(), {});
    c.near(report.l1, 0.0, 1e-6, "l1");
    c.near(report.ssim, 1.0, 1e-5, "ssim");
    c.expect(report.fid < 1e-3, "fid " + std::to_string(report.fid));
    std::ostringstream s;
    s << "identity model: l1 " << report.l1 << ", ssim " << report.ssim << ", fid " << report.fid;
    return c.outcome(s.str());
}

} // namespace

int main() {
    at::set_num_threads(1);
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, loss_oracles}, {2, gradients}, {3, structure}, {4, schedule},
        {5, overfit},      {6, directional}, {7, evaluation_plumbing}};
    bool failed = false;
    for (const auto& [n, run] : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {Status::fail, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
        std::cout << "criterion " << n << ": " << tag << " [" << std::fixed << std::setprecision(1) << secs
                  << "s] " << std::defaultfloat << std::setprecision(6) << o.detail << std::endl;
        failed = failed || o.status == Status::fail;
    }
    return failed ? 1 : 0;
}
