#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <sstream>

#include "helpers.hpp"
#include "pmae/checkpoint.hpp"
#include "pmae/error.hpp"
#include "pmae/training.hpp"

using namespace pmae;
using testing_support::TempDir;
using testing_support::tiny_config;
using testing_support::tiny_dataset;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Batch batch_of(const DatasetHandle& ds, const RunConfig& cfg, int64_t epoch = 0) {
    std::vector<int64_t> idx(static_cast<size_t>(cfg.optimizer.batch_size));
    std::iota(idx.begin(), idx.end(), 0);
    return make_batch(ds, idx, cfg.data.augment, cfg.seed, epoch);
}

bool same_parameters(torch::nn::Module& a, torch::nn::Module& b) {
    auto pa = a.named_parameters();
    auto pb = b.named_parameters();
    if (pa.size() != pb.size()) return false;
    for (const auto& p : pa) {
        if (!torch::equal(p.value(), pb[p.key()])) return false;
    }
    return true;
}

} // namespace

TEST(LearningRate, WarmupThenCosine) {
    OptimizerConfig o;
    o.lr = 1e-3;
    o.warmup_epochs = 5;
    EXPECT_DOUBLE_EQ(learning_rate(o, 25, 0.0), 0.0);
    EXPECT_NEAR(learning_rate(o, 25, 2.5), 5e-4, 1e-15);
    EXPECT_NEAR(learning_rate(o, 25, 5.0), 1e-3, 1e-9);
    EXPECT_NEAR(learning_rate(o, 25, 15.0), 5e-4, 1e-12);
    EXPECT_NEAR(learning_rate(o, 25, 25.0), 0.0, 1e-15);
    double prev = 1.0;
    for (double e = 5.0; e <= 25.0; e += 0.5) {
        const double lr = learning_rate(o, 25, e);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(PatchNormalizedTarget, EachPatchStandardized) {
    torch::manual_seed(40);
    auto x = torch::rand({2, 3, 8, 8}) * 3.0 + 1.0;
    auto t = patchify(patch_normalized_target(x, 4), 4).tokens;
    EXPECT_LT(t.mean(-1).abs().max().item<double>(), 1e-5);
    EXPECT_LT((t.var(-1, false) - 1.0).abs().max().item<double>(), 1e-3);
}

TEST(TrainStep, EveryVariantProducesFiniteTerms) {
    TempDir dir;
    auto net = make_random_loss_network(3, {8, 16}, 2);
    save_loss_network(dir / "lossnet", net);
    auto ds = tiny_dataset();
    for (auto v : {ObjectiveVariant::mse, ObjectiveVariant::ms_ssim_l1, ObjectiveVariant::gan_perceptual,
                   ObjectiveVariant::loss_network_perceptual}) {
        auto cfg = tiny_config(v == ObjectiveVariant::loss_network_perceptual ? ObjectiveVariant::mse : v);
        if (v == ObjectiveVariant::loss_network_perceptual) {
            cfg.variant = v;
            cfg.loss.network = {LossNetworkKind::external, {"conv1", "conv2"}, dir / "lossnet"};
            cfg.validate();
        }
        TrainState st(cfg);
        const auto before = st.external_loss ? st.external_loss->checksum() : 0;
        auto rec = train_step(st, batch_of(ds, cfg), 4);
        ASSERT_TRUE(rec.terms.count("total")) << to_string(v);
        for (const auto& [name, value] : rec.terms) EXPECT_TRUE(std::isfinite(value)) << name;
        EXPECT_EQ(st.global_step, 1);
        if (st.external_loss) EXPECT_EQ(before, st.external_loss->checksum());
        if (v == ObjectiveVariant::gan_perceptual) {
            for (const char* t : {"l1", "feat", "adv", "d_loss"}) EXPECT_TRUE(rec.terms.count(t)) << t;
        }
    }
}

TEST(TrainStep, FeatureTermSkippedOnOddEpochs) {
    auto cfg = tiny_config();
    auto ds = tiny_dataset();
    TrainState st(cfg);
    st.epoch = 1;
    auto rec = train_step(st, batch_of(ds, cfg, 1), 4);
    EXPECT_FALSE(rec.terms.count("feat"));
    EXPECT_NE(std::find(rec.skipped.begin(), rec.skipped.end(), "feat"), rec.skipped.end());
}

TEST(TrainStep, GeneratorStepLeavesDiscriminatorToItsOwnStep) {
    // Only the discriminator optimizer may move D: freeze D's lr to zero and check D is unchanged.
    auto cfg = tiny_config();
    cfg.adversarial.lr = 1e-30;
    auto ds = tiny_dataset();
    TrainState st(cfg);
    const auto d_before = parameter_checksum(*st.discriminator);
    const auto g_before = parameter_checksum(*st.generator);
    st.batch_in_epoch = 1;  // non-zero lr
    train_step(st, batch_of(ds, cfg), 4);
    EXPECT_NE(g_before, parameter_checksum(*st.generator));
    // AdamW's first step moves each weight by about lr, which is far below float resolution here.
    EXPECT_EQ(d_before, parameter_checksum(*st.discriminator));
}

TEST(Checkpoint, ResumedStepIsBitIdentical) {
    TempDir dir;
    auto cfg = tiny_config(ObjectiveVariant::gan_perceptual, true);
    cfg.adversarial.ada_enabled = true;
    cfg.adversarial.ada.p = 0.3;
    cfg.adversarial.ada.window = 1;
    cfg.adversarial.path_length_enabled = true;
    cfg.adversarial.path_length.every = 1;
    cfg.validate();
    auto ds = tiny_dataset();
    TrainState a(cfg);
    for (int i = 0; i < 2; ++i) train_step(a, batch_of(ds, cfg), 4);
    save_checkpoint(a, dir / "ck");
    auto b = load_checkpoint(dir / "ck");
    EXPECT_EQ(b.global_step, 2);
    EXPECT_EQ(b.ada.p, a.ada.p);
    EXPECT_EQ(b.path_length.ema_a, a.path_length.ema_a);
    auto ra = train_step(a, batch_of(ds, cfg), 4);
    auto rb = train_step(b, batch_of(ds, cfg), 4);
    EXPECT_EQ(ra.terms, rb.terms);
    EXPECT_TRUE(same_parameters(*a.generator, *b.generator));
    EXPECT_TRUE(same_parameters(*a.discriminator, *b.discriminator));
}

TEST(Checkpoint, MismatchedArchitectureIsReported) {
    TempDir dir;
    auto cfg = tiny_config(ObjectiveVariant::mse);
    TrainState st(cfg);
    save_checkpoint(st, dir / "ck");
    auto bundle = load_bundle(dir / "ck");
    auto bigger = cfg;
    bigger.decoder.width = 64;
    MaskedAutoencoder other(bigger.encoder, bigger.decoder);
    try {
        load_module(*other, bundle, "generator.");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("generator.decoder"), std::string::npos) << e.what();
    }
}

TEST(Pretrain, DeterministicLogsAndResume) {
    TempDir dir;
    auto cfg = tiny_config(ObjectiveVariant::gan_perceptual);
    cfg.checkpoint_every = 1;
    auto ds = tiny_dataset(2, 4);
    auto r1 = pretrain(cfg, dir / "a", &ds);
    auto r2 = pretrain(cfg, dir / "b", &ds);
    const auto log = slurp(r1.metrics_log);
    EXPECT_FALSE(log.empty());
    EXPECT_EQ(log, slurp(r2.metrics_log));
    EXPECT_TRUE(std::filesystem::exists(dir / "a" / "resolved_config.yaml"));
    EXPECT_EQ(r1.records.size(), 4u);

    const std::filesystem::path mid = dir / "a" / "checkpoint_epoch_1";
    ASSERT_TRUE(std::filesystem::exists(mid / "manifest.json"));
    std::filesystem::create_directories(dir / "c");
    std::filesystem::copy_file(dir / "a" / "metrics.jsonl", dir / "c" / "metrics.jsonl");
    auto r3 = pretrain(cfg, dir / "c", &ds, &mid);
    EXPECT_EQ(log, slurp(r3.metrics_log));
    auto fa = load_bundle(r1.checkpoint);
    auto fc = load_bundle(r3.checkpoint);
    for (const auto& arr : fa.arrays) EXPECT_TRUE(torch::equal(arr.value, fc.at(arr.name))) << arr.name;
}

TEST(Pretrain, NonFiniteLossStopsWithLastGood) {
    TempDir dir;
    auto cfg = tiny_config(ObjectiveVariant::mse);
    auto ds = tiny_dataset(2, 4);
    auto images = ds.images().clone();
    images[0].fill_(std::numeric_limits<float>::quiet_NaN());
    auto bad = DatasetHandle::from_tensors(images, ds.labels(), ds.class_names());
    try {
        pretrain(cfg, dir / "run", &bad);
        FAIL() << "expected NonFiniteLossError";
    } catch (const NonFiniteLossError& e) {
        EXPECT_EQ(e.term(), "mse");
    }
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / "last_good" / "manifest.json"));
}

TEST(Probe, FrozenEncoderAndFinetuneUpdates) {
    auto cfg = tiny_config(ObjectiveVariant::mse);
    auto ds = tiny_dataset(2, 8);
    TrainState st(cfg);
    ProbeOptions po;
    po.epochs = 30;
    auto r = linear_probe(st.generator->encoder, ds, nullptr, cfg.data.augment.normalization, po);
    EXPECT_EQ(r.encoder_checksum_before, r.encoder_checksum_after);
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    EXPECT_GT(r.train_accuracy, 0.5);

    FinetuneOptions fo;
    fo.epochs = 2;
    fo.warmup_epochs = 1;
    auto f = finetune_classifier(st.generator->encoder, ds, nullptr, cfg.data.augment.normalization, fo);
    EXPECT_NE(f.encoder_checksum_before, f.encoder_checksum_after);
}

TEST(Probe, RequiresLabels) {
    auto cfg = tiny_config(ObjectiveVariant::mse);
    auto ds = tiny_dataset(2, 2);
    auto unlabeled = DatasetHandle::from_tensors(ds.images(), torch::Tensor(), {});
    TrainState st(cfg);
    EXPECT_THROW(linear_probe(st.generator->encoder, unlabeled, nullptr, {}, {}), ConfigError);
}
