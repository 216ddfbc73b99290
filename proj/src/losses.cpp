#include "pmae/losses.hpp"

#include <sstream>

#include "pmae/adversarial.hpp"
#include "pmae/error.hpp"

namespace pmae {

void LossWeights::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("loss.alpha must lie in [0, 1]");
    if (!(delta_f >= 0.0) || !(delta_s >= 0.0)) throw ConfigError("loss.delta_f and loss.delta_s must be >= 0");
}

LossNetworkFeatures LossNetworkFeatures::from_layers(std::vector<torch::Tensor> layers) {
    LossNetworkFeatures f;
    f.element_counts.reserve(layers.size());
    for (const auto& l : layers) f.element_counts.push_back(l.numel());
    f.layers = std::move(layers);
    return f;
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
    if (!a.sizes().equals(b.sizes())) {
        std::ostringstream msg;
        msg << op << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
        throw ShapeError(msg.str());
    }
}

} // namespace

torch::Tensor l1_loss(const ImageBatch& pred, const ImageBatch& target) {
    require_same_shape(pred, target, "l1_loss");
    return (pred - target).abs().mean();
}

torch::Tensor masked_l1_loss(const ImageBatch& pred, const ImageBatch& target, const torch::Tensor& mask) {
    require_same_shape(pred, target, "masked_l1_loss");
    auto m = mask.to(pred.dtype());
    auto denom = (m.sum() * pred.size(1)).clamp_min(1.0);
    return ((pred - target).abs() * m).sum() / denom;
}

torch::Tensor ssim_map(const ImageBatch& x, const ImageBatch& y, const SsimOptions& opts) {
    require_same_shape(x, y, "ssim");
    const double c1 = std::pow(0.01 * opts.dynamic_range, 2);
    const double c2 = std::pow(0.03 * opts.dynamic_range, 2);
    auto box = [&](const torch::Tensor& t) { return torch::avg_pool2d(t, {opts.window, opts.window}, {1, 1}); };
    auto mu_x = box(x);
    auto mu_y = box(y);
    auto var_x = box(x * x) - mu_x * mu_x;
    auto var_y = box(y * y) - mu_y * mu_y;
    auto cov = box(x * y) - mu_x * mu_y;
    auto num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
    auto den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
    return num / den;
}

torch::Tensor ms_ssim_loss(const ImageBatch& pred, const ImageBatch& target, double alpha, int64_t scales,
                           const SsimOptions& opts) {
    require_same_shape(pred, target, "ms_ssim_loss");
    if (scales < 1) throw ConfigError("ms_ssim_loss needs at least one scale");
    const int64_t min_side = (int64_t{1} << (scales - 1)) * opts.window;
    if (pred.size(2) < min_side || pred.size(3) < min_side) {
        throw ShapeError("ms_ssim_loss with " + std::to_string(scales) + " scales and a " +
                         std::to_string(opts.window) + "x" + std::to_string(opts.window) +
                         " window needs images of at least " + std::to_string(min_side) + "x" +
                         std::to_string(min_side));
    }
    auto x = pred;
    auto y = target;
    auto acc = torch::zeros({}, pred.options());
    for (int64_t s = 0; s < scales; ++s) {
        acc = acc + ((1.0 - ssim_map(x, y, opts)) / 2.0).mean();
        if (s + 1 < scales) {
            x = torch::avg_pool2d(x, {2, 2});
            y = torch::avg_pool2d(y, {2, 2});
        }
    }
    return alpha * acc / static_cast<double>(scales);
}

torch::Tensor gram(const torch::Tensor& features) {
    if (features.dim() < 3) throw ShapeError("gram expects B×C×spatial features");
    const auto b = features.size(0);
    const auto c = features.size(1);
    auto f = features.reshape({b, c, -1});
    const auto spatial = f.size(2);
    return torch::bmm(f, f.transpose(1, 2)) / static_cast<double>(c * spatial);
}

torch::Tensor feature_matching_loss(const LossNetworkFeatures& pred, const LossNetworkFeatures& real,
                                    const LossWeights& weights) {
    if (pred.size() != real.size()) {
        throw ShapeError("feature_matching_loss: layer count mismatch (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(real.size()) + ")");
    }
    if (pred.size() == 0) throw ShapeError("feature_matching_loss needs at least one layer");
    auto feat = torch::zeros({}, pred.layers.front().options());
    auto style = torch::zeros({}, pred.layers.front().options());
    for (size_t j = 0; j < pred.size(); ++j) {
        require_same_shape(pred.layers[j], real.layers[j], "feature_matching_loss");
        const auto n = static_cast<double>(pred.element_counts[j]);
        feat = feat + (pred.layers[j] - real.layers[j]).abs().sum() / n;
        if (weights.delta_s != 0.0) {
            style = style + (gram(pred.layers[j]) - gram(real.layers[j])).abs().sum() / n;
        }
    }
    return weights.delta_f * feat + weights.delta_s * style;
}

std::string to_string(ObjectiveVariant v) {
    switch (v) {
        case ObjectiveVariant::mse: return "mse";
        case ObjectiveVariant::ms_ssim_l1: return "ms_ssim_l1";
        case ObjectiveVariant::gan_perceptual: return "gan_perceptual";
        case ObjectiveVariant::loss_network_perceptual: return "loss_network_perceptual";
    }
    return "unknown";
}

ObjectiveVariant objective_from_string(const std::string& name) {
    if (name == "mse") return ObjectiveVariant::mse;
    if (name == "ms_ssim_l1") return ObjectiveVariant::ms_ssim_l1;
    if (name == "gan_perceptual") return ObjectiveVariant::gan_perceptual;
    if (name == "loss_network_perceptual") return ObjectiveVariant::loss_network_perceptual;
    throw ConfigError("unknown variant '" + name +
                      "' (expected mse, ms_ssim_l1, gan_perceptual or loss_network_perceptual)");
}

bool needs_discriminator(ObjectiveVariant v) { return v == ObjectiveVariant::gan_perceptual; }

const LossTerm* ObjectiveResult::find(const std::string& name) const {
    for (const auto& t : terms) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

bool perceptual_active(const LossWeights& weights, int64_t epoch) {
    return !weights.perceptual_even_epochs_only || epoch % 2 == 0;
}

ObjectiveResult generator_objective(ObjectiveVariant variant, const ObjectiveInputs& in, const LossWeights& weights) {
    require_same_shape(in.pred, in.target, "generator_objective");
    auto pixel_l1 = [&] {
        return in.pixel_mask ? masked_l1_loss(in.pred, in.target, *in.pixel_mask) : pmae::l1_loss(in.pred, in.target);
    };
    auto zero = torch::zeros({}, in.pred.options());
    ObjectiveResult r;

    auto add_feat = [&](const char* missing) {
        if (!in.pred_features || !in.real_features) throw ConfigError(missing);
        if (perceptual_active(weights, in.epoch)) {
            r.terms.push_back({"feat", feature_matching_loss(*in.pred_features, *in.real_features, weights), true});
        } else {
            r.terms.push_back({"feat", zero, false});
        }
    };

    switch (variant) {
        case ObjectiveVariant::mse: {
            auto sq = (in.pred - in.target).pow(2);
            torch::Tensor mse;
            if (in.pixel_mask) {
                auto m = in.pixel_mask->to(in.pred.dtype());
                mse = (sq * m).sum() / (m.sum() * in.pred.size(1)).clamp_min(1.0);
            } else {
                mse = sq.mean();
            }
            r.terms.push_back({"mse", mse, true});
            break;
        }
        case ObjectiveVariant::ms_ssim_l1:
            r.terms.push_back({"ms_ssim", ms_ssim_loss(in.pred, in.target, weights.alpha, in.ssim_scales, in.ssim), true});
            r.terms.push_back({"l1", (1.0 - weights.alpha) * pixel_l1(), true});
            break;
        case ObjectiveVariant::gan_perceptual:
            r.terms.push_back({"l1", pixel_l1(), true});
            add_feat("gan_perceptual needs discriminator features for the reconstruction and the target");
            if (!in.d_fake) throw ConfigError("gan_perceptual needs discriminator scores for the reconstruction");
            r.terms.push_back({"adv", lsgan_g_loss(*in.d_fake), true});
            break;
        case ObjectiveVariant::loss_network_perceptual:
            r.terms.push_back({"l1", pixel_l1(), true});
            add_feat("loss_network_perceptual needs external loss-network features");
            break;
    }
    r.total = zero;
    for (const auto& t : r.terms) {
        if (t.active) r.total = r.total + t.value;
    }
    return r;
}

} // namespace pmae
