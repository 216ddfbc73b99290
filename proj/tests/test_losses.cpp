#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pmae/error.hpp"
#include "pmae/losses.hpp"

using namespace pmae;

namespace {

torch::Tensor rand64(std::vector<int64_t> shape) { return torch::rand(shape, torch::kFloat64); }

LossNetworkFeatures random_features(int64_t b, std::vector<std::array<int64_t, 3>> layers) {
    std::vector<torch::Tensor> out;
    for (const auto& [c, h, w] : layers) out.push_back(torch::randn({b, c, h, w}, torch::kFloat64));
    return LossNetworkFeatures::from_layers(out);
}

std::vector<oracle::Array4> arrays(const LossNetworkFeatures& f) {
    std::vector<oracle::Array4> out;
    for (const auto& l : f.layers) out.push_back(oracle::array4(l));
    return out;
}

} // namespace

TEST(LossWeights, DefaultsFollowTheProtocol) {
    LossWeights w;
    EXPECT_DOUBLE_EQ(w.alpha, 0.85);
    EXPECT_DOUBLE_EQ(w.delta_f, 0.05);
    EXPECT_DOUBLE_EQ(w.delta_s, 40.0);
    EXPECT_TRUE(w.perceptual_even_epochs_only);
}

TEST(L1, MatchesLoopOracle) {
    torch::manual_seed(10);
    for (int i = 0; i < 20; ++i) {
        auto a = torch::randn({1 + i % 3, 3, 5 + i, 7}, torch::kFloat64);
        auto b = torch::randn_like(a);
        EXPECT_NEAR(pmae::l1_loss(a, b).item<double>(), oracle::l1(oracle::flat(a), oracle::flat(b)), 1e-12);
    }
    EXPECT_THROW(pmae::l1_loss(torch::zeros({1, 3, 4, 4}), torch::zeros({1, 3, 4, 5})), ShapeError);
}

TEST(MaskedL1, IgnoresUnmaskedPixels) {
    torch::manual_seed(11);
    auto a = torch::randn({2, 3, 8, 8}, torch::kFloat64);
    auto b = torch::randn_like(a);
    auto mask = torch::zeros({2, 1, 8, 8}, torch::kFloat64);
    mask.narrow(2, 0, 4).fill_(1.0);
    auto b2 = b.clone();
    b2.narrow(2, 4, 4).add_(5.0);
    EXPECT_DOUBLE_EQ(masked_l1_loss(a, b, mask).item<double>(), masked_l1_loss(a, b2, mask).item<double>());
    EXPECT_NEAR(masked_l1_loss(a, b, mask).item<double>(),
                oracle::l1(oracle::flat(a.narrow(2, 0, 4)), oracle::flat(b.narrow(2, 0, 4))), 1e-12);
}

TEST(MsSsim, MatchesWindowLoopOracle) {
    torch::manual_seed(12);
    for (int i = 0; i < 20; ++i) {
        const int64_t scales = 1 + i % 4;
        const int64_t side = (int64_t{1} << (scales - 1)) * 3 + (i % 3) * 2;
        const double range = i % 2 == 0 ? 1.0 : 4.0;
        auto x = rand64({1 + i % 2, 1 + 2 * (i % 2), side, side + i % 2}) * range;
        auto y = (x + 0.2 * range * torch::randn_like(x)).clamp(0.0, range);
        const double alpha = 0.85;
        const double got = ms_ssim_loss(x, y, alpha, scales, {3, range}).item<double>();
        const double want = oracle::ms_ssim_loss(oracle::array4(x), oracle::array4(y), alpha, scales, range);
        EXPECT_NEAR(got, want, 1e-9) << "instance " << i;
    }
}

TEST(MsSsim, IdenticalIsZeroAndBounded) {
    torch::manual_seed(13);
    auto x = rand64({2, 3, 24, 24});
    EXPECT_NEAR(ms_ssim_loss(x, x, 0.85).item<double>(), 0.0, 1e-12);
    auto y = rand64({2, 3, 24, 24});
    const double v = ms_ssim_loss(x, -y, 0.85).item<double>();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 0.85);
}

TEST(MsSsim, RejectsTooSmallImages) {
    EXPECT_THROW(ms_ssim_loss(torch::zeros({1, 3, 23, 23}), torch::zeros({1, 3, 23, 23}), 0.85, 4), ShapeError);
}

TEST(Gram, MatchesLoopOracleAndIsSymmetric) {
    torch::manual_seed(14);
    for (int i = 0; i < 20; ++i) {
        auto f = torch::randn({1 + i % 2, 2 + i % 5, 3 + i % 4, 2 + i % 3}, torch::kFloat64);
        auto g = gram(f);
        const auto want = oracle::gram(oracle::array4(f));
        const auto got = oracle::flat(g);
        ASSERT_EQ(got.size(), want.size());
        for (size_t k = 0; k < got.size(); ++k) ASSERT_NEAR(got[k], want[k], 1e-12);
        EXPECT_TRUE(torch::allclose(g, g.transpose(1, 2)));
    }
}

TEST(FeatureMatching, MatchesLoopOracle) {
    torch::manual_seed(15);
    for (int i = 0; i < 20; ++i) {
        LossWeights w;
        w.delta_f = 0.05 * (1 + i % 3);
        w.delta_s = 40.0 / (1 + i % 2);
        auto p = random_features(1 + i % 2, {{4, 8, 8}, {8, 4, 4}, {3 + i % 3, 2, 2}});
        auto r = random_features(1 + i % 2, {{4, 8, 8}, {8, 4, 4}, {3 + i % 3, 2, 2}});
        EXPECT_NEAR(feature_matching_loss(p, r, w).item<double>(),
                    oracle::feature_matching(arrays(p), arrays(r), w.delta_f, w.delta_s), 1e-10);
    }
}

TEST(FeatureMatching, ZeroForIdenticalAndRejectsMismatch) {
    torch::manual_seed(16);
    auto p = random_features(2, {{4, 4, 4}});
    EXPECT_DOUBLE_EQ(feature_matching_loss(p, p, {}).item<double>(), 0.0);
    auto q = random_features(2, {{4, 4, 4}, {2, 2, 2}});
    EXPECT_THROW(feature_matching_loss(p, q, {}), ShapeError);
    EXPECT_EQ(p.element_counts.front(), 2 * 4 * 4 * 4);
}

TEST(Schedule, PerceptualTermOnEvenEpochsOnly) {
    LossWeights w;
    for (int64_t e = 0; e < 10; ++e) EXPECT_EQ(perceptual_active(w, e), e % 2 == 0);
    w.perceptual_even_epochs_only = false;
    for (int64_t e = 0; e < 10; ++e) EXPECT_TRUE(perceptual_active(w, e));
}

TEST(Objective, MseVariant) {
    torch::manual_seed(17);
    ObjectiveInputs in;
    in.pred = rand64({2, 3, 8, 8});
    in.target = rand64({2, 3, 8, 8});
    auto r = generator_objective(ObjectiveVariant::mse, in, {});
    ASSERT_EQ(r.terms.size(), 1u);
    EXPECT_NEAR(r.total.item<double>(), oracle::mse(oracle::flat(in.pred), oracle::flat(in.target)), 1e-12);
}

TEST(Objective, MsSsimL1WeightsByAlpha) {
    torch::manual_seed(18);
    ObjectiveInputs in;
    in.pred = rand64({1, 3, 24, 24});
    in.target = rand64({1, 3, 24, 24});
    LossWeights w;
    auto r = generator_objective(ObjectiveVariant::ms_ssim_l1, in, w);
    const double want = oracle::ms_ssim_loss(oracle::array4(in.pred), oracle::array4(in.target), 0.85, 4, 1.0) +
                        0.15 * oracle::l1(oracle::flat(in.pred), oracle::flat(in.target));
    EXPECT_NEAR(r.total.item<double>(), want, 1e-9);
    ASSERT_NE(r.find("ms_ssim"), nullptr);
    ASSERT_NE(r.find("l1"), nullptr);
}

TEST(Objective, GanPerceptualScheduleAndTerms) {
    torch::manual_seed(19);
    ObjectiveInputs in;
    in.pred = rand64({2, 3, 8, 8});
    in.target = rand64({2, 3, 8, 8});
    in.pred_features = random_features(2, {{4, 4, 4}});
    in.real_features = random_features(2, {{4, 4, 4}});
    in.d_fake = torch::randn({2}, torch::kFloat64);
    LossWeights w;
    const double l1 = oracle::l1(oracle::flat(in.pred), oracle::flat(in.target));
    const double adv = oracle::lsgan_g(oracle::flat(*in.d_fake));
    const double feat =
        oracle::feature_matching(arrays(*in.pred_features), arrays(*in.real_features), w.delta_f, w.delta_s);
    in.epoch = 2;
    auto even = generator_objective(ObjectiveVariant::gan_perceptual, in, w);
    EXPECT_TRUE(even.find("feat")->active);
    EXPECT_NEAR(even.total.item<double>(), l1 + feat + adv, 1e-10);
    in.epoch = 3;
    auto odd = generator_objective(ObjectiveVariant::gan_perceptual, in, w);
    EXPECT_FALSE(odd.find("feat")->active);
    EXPECT_NEAR(odd.total.item<double>(), l1 + adv, 1e-10);
    in.d_fake.reset();
    EXPECT_THROW(generator_objective(ObjectiveVariant::gan_perceptual, in, w), ConfigError);
}

TEST(Objective, LossNetworkVariantNeedsFeatures) {
    ObjectiveInputs in;
    in.pred = rand64({1, 3, 8, 8});
    in.target = rand64({1, 3, 8, 8});
    EXPECT_THROW(generator_objective(ObjectiveVariant::loss_network_perceptual, in, {}), ConfigError);
}

TEST(Objective, VariantNames) {
    for (auto v : {ObjectiveVariant::mse, ObjectiveVariant::ms_ssim_l1, ObjectiveVariant::gan_perceptual,
                   ObjectiveVariant::loss_network_perceptual}) {
        EXPECT_EQ(objective_from_string(to_string(v)), v);
    }
    EXPECT_THROW(objective_from_string("wgan"), ConfigError);
    EXPECT_TRUE(needs_discriminator(ObjectiveVariant::gan_perceptual));
    EXPECT_FALSE(needs_discriminator(ObjectiveVariant::mse));
}
