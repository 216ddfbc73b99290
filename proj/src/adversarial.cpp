#include "pmae/adversarial.hpp"

#include <algorithm>
#include <cmath>

#include "pmae/error.hpp"

namespace F = torch::nn::functional;

namespace pmae {

void DiscriminatorConfig::validate() const {
    if (base_channels <= 0 || num_blocks <= 0) throw ConfigError("discriminator base_channels/num_blocks must be positive");
    if (image_size % (int64_t{1} << num_blocks) != 0) {
        throw ConfigError("discriminator image_size must be divisible by 2^num_blocks");
    }
    if (!multi_scale) return;
    if (input_resolutions.empty() || input_resolutions.front() != image_size) {
        throw ConfigError("multi-scale discriminator: first input resolution must equal image_size");
    }
    if (static_cast<int64_t>(input_resolutions.size()) > num_blocks) {
        throw ConfigError("multi-scale discriminator: more input resolutions than blocks");
    }
    for (size_t k = 1; k < input_resolutions.size(); ++k) {
        if (input_resolutions[k] * 2 != input_resolutions[k - 1]) {
            throw ConfigError("multi-scale discriminator: resolutions must halve at each level");
        }
    }
}

namespace {

int64_t block_channels(const DiscriminatorConfig& cfg, int64_t b) {
    return std::min(cfg.base_channels << b, cfg.max_channels);
}

torch::Tensor lrelu(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2)); }

} // namespace

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    from_rgb_ = register_module("from_rgb", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.channels,
                                                                                        block_channels(cfg_, 0), 1)));
    const auto taps = cfg_.multi_scale ? static_cast<int64_t>(cfg_.input_resolutions.size()) : 1;
    for (int64_t b = 0; b < cfg_.num_blocks; ++b) {
        const auto extra = (b > 0 && b < taps) ? cfg_.channels : 0;
        const auto c_in = block_channels(cfg_, b);
        const auto c_out = block_channels(cfg_, b + 1);
        conv_a_.push_back(register_module("block" + std::to_string(b) + "_conv_a",
                                          torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in + extra, c_in, 3).padding(1))));
        conv_b_.push_back(register_module("block" + std::to_string(b) + "_conv_b",
                                          torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in, c_out, 3).padding(1))));
    }
    const auto side = cfg_.image_size >> cfg_.num_blocks;
    score_ = register_module("score", torch::nn::Linear(block_channels(cfg_, cfg_.num_blocks) * side * side, 1));
}

DiscriminatorOutput DiscriminatorImpl::forward(const ImageBatch& images) {
    return forward(std::vector<ImageBatch>{images});
}

DiscriminatorOutput DiscriminatorImpl::forward(const std::vector<ImageBatch>& pyramid) {
    if (pyramid.empty()) throw ShapeError("discriminator needs at least one input image");
    const auto expected_levels = cfg_.multi_scale ? cfg_.input_resolutions.size() : size_t{1};
    if (pyramid.size() != expected_levels) {
        throw ShapeError("discriminator expects " + std::to_string(expected_levels) + " pyramid levels, got " +
                         std::to_string(pyramid.size()));
    }
    for (size_t k = 0; k < pyramid.size(); ++k) {
        const auto want = cfg_.image_size >> k;
        if (pyramid[k].size(2) != want || pyramid[k].size(3) != want || pyramid[k].size(1) != cfg_.channels) {
            throw ShapeError("discriminator level " + std::to_string(k) + " must be " + std::to_string(cfg_.channels) +
                             "x" + std::to_string(want) + "x" + std::to_string(want));
        }
    }
    std::vector<torch::Tensor> feats;
    auto x = lrelu(from_rgb_(pyramid[0]));
    for (int64_t b = 0; b < cfg_.num_blocks; ++b) {
        if (b > 0 && b < static_cast<int64_t>(pyramid.size())) x = torch::cat({x, pyramid[b]}, 1);
        x = lrelu(conv_a_[b](x));
        x = lrelu(conv_b_[b](x));
        x = torch::avg_pool2d(x, {2, 2});
        feats.push_back(x);
    }
    DiscriminatorOutput out;
    out.score = score_(x.flatten(1)).squeeze(1);
    out.features = LossNetworkFeatures::from_layers(std::move(feats));
    return out;
}

DiscriminatorOutput discriminate(Discriminator& d, const std::vector<ImageBatch>& pyramid) {
    return d->forward(pyramid);
}

std::vector<ImageBatch> image_pyramid(const ImageBatch& images, int64_t levels) {
    std::vector<ImageBatch> out{images};
    for (int64_t k = 1; k < levels; ++k) out.push_back(torch::avg_pool2d(out.back(), {2, 2}));
    return out;
}

torch::Tensor lsgan_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
    return 0.5 * (d_real - 1.0).pow(2).mean() + 0.5 * d_fake.pow(2).mean();
}

torch::Tensor lsgan_g_loss(const torch::Tensor& d_fake) { return 0.5 * (d_fake - 1.0).pow(2).mean(); }

void AdaState::validate() const {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("ada.p must lie in [0, 1]");
    if (!(target > 0.0 && target < 1.0)) throw ConfigError("ada.target must lie in (0, 1)");
    if (!(step >= 0.0)) throw ConfigError("ada.step must be >= 0");
    if (window <= 0) throw ConfigError("ada.window must be positive");
}

namespace {

struct AdaDraw {
    bool flip = false;
    int64_t rot_k = 0;
    double shift_x = 0.0;  // fraction of the width, multiple of 1/width at full resolution
    double shift_y = 0.0;
    double brightness = 0.0;
    double contrast = 1.0;
};

AdaDraw draw_ada(const AdaState& s, int64_t width, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    const int64_t max_shift = std::max<int64_t>(width / 8, 0);
    std::uniform_int_distribution<int64_t> shift(-max_shift, max_shift);
    std::uniform_int_distribution<int64_t> rot(1, 3);
    // Every draw happens unconditionally so the stream does not depend on p.
    AdaDraw d;
    const bool do_flip = u(rng) < s.p;
    const bool do_rot = u(rng) < s.p;
    const auto k = rot(rng);
    const bool do_shift = u(rng) < s.p;
    const auto sx = shift(rng);
    const auto sy = shift(rng);
    const bool do_color = u(rng) < s.p;
    const auto b = 0.2 * n(rng);
    const auto c = std::exp2(0.5 * n(rng));
    if (s.pipeline.flip && do_flip) d.flip = true;
    if (s.pipeline.rotate90 && do_rot) d.rot_k = k;
    if (s.pipeline.translate && do_shift) {
        d.shift_x = static_cast<double>(sx) / static_cast<double>(width);
        d.shift_y = static_cast<double>(sy) / static_cast<double>(width);
    }
    if (s.pipeline.color && do_color) {
        d.brightness = b;
        d.contrast = c;
    }
    return d;
}

torch::Tensor shift_image(const torch::Tensor& img, int64_t dx, int64_t dy) {
    if (dx == 0 && dy == 0) return img;
    const auto h = img.size(2);
    const auto w = img.size(3);
    const auto px = std::abs(dx);
    const auto py = std::abs(dy);
    auto padded = F::pad(img, F::PadFuncOptions({px, px, py, py}).mode(torch::kReflect));
    return padded.narrow(2, py - dy, h).narrow(3, px - dx, w);
}

torch::Tensor apply_draw(torch::Tensor img, const AdaDraw& d) {
    if (d.flip) img = img.flip({3});
    if (d.rot_k != 0) img = torch::rot90(img, d.rot_k, {2, 3});
    const auto w = img.size(3);
    const auto dx = static_cast<int64_t>(std::llround(d.shift_x * static_cast<double>(w)));
    const auto dy = static_cast<int64_t>(std::llround(d.shift_y * static_cast<double>(w)));
    img = shift_image(img, std::clamp<int64_t>(dx, -(w - 1), w - 1), std::clamp<int64_t>(dy, -(w - 1), w - 1));
    if (d.brightness != 0.0 || d.contrast != 1.0) {
        img = img + d.brightness;
        auto mean = img.mean({1, 2, 3}, true);
        img = (img - mean) * d.contrast + mean;
    }
    return img;
}

} // namespace

std::vector<ImageBatch> ada_augment(const std::vector<ImageBatch>& pyramid, const AdaState& state, Rng& rng) {
    if (pyramid.empty()) return {};
    if (state.p <= 0.0) return pyramid;
    const auto b = pyramid[0].size(0);
    std::vector<std::vector<torch::Tensor>> per_level(pyramid.size());
    for (int64_t i = 0; i < b; ++i) {
        const auto draw = draw_ada(state, pyramid[0].size(3), rng);
        for (size_t k = 0; k < pyramid.size(); ++k) {
            per_level[k].push_back(apply_draw(pyramid[k].narrow(0, i, 1), draw));
        }
    }
    std::vector<ImageBatch> out;
    for (auto& level : per_level) out.push_back(torch::cat(level, 0));
    return out;
}

ImageBatch ada_augment(const ImageBatch& images, const AdaState& state, Rng& rng) {
    return ada_augment(std::vector<ImageBatch>{images}, state, rng).front();
}

AdaState ada_update(AdaState state, const torch::Tensor& d_real_scores) {
    auto s = d_real_scores.detach().to(torch::kFloat64);
    state.accum_sum += torch::sign(s - state.sign_offset).sum().item<double>();
    state.accum_count += s.numel();
    state.accum_batches += 1;
    if (state.accum_batches < state.window) return state;
    state.rt_estimate = state.accum_count > 0 ? state.accum_sum / static_cast<double>(state.accum_count) : 0.0;
    if (state.rt_estimate > state.target) {
        state.p += state.step;
    } else if (state.rt_estimate < state.target) {
        state.p -= state.step;
    }
    state.p = std::clamp(state.p, 0.0, 1.0);
    state.accum_sum = 0.0;
    state.accum_count = 0;
    state.accum_batches = 0;
    return state;
}

void PathLengthState::validate() const {
    if (!(ema_a >= 0.0)) throw ConfigError("path_length.ema_a must be >= 0");
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("path_length.decay must lie in (0, 1)");
    if (!(weight >= 0.0)) throw ConfigError("path_length.weight must be >= 0");
    if (every <= 0) throw ConfigError("path_length.every must be positive");
}

torch::Tensor unit_projection(const torch::Tensor& like, Rng& rng) {
    auto gen = torch_generator(rng);
    auto y = torch::randn(like.sizes(), gen, like.options().requires_grad(false));
    auto flat = y.reshape({y.size(0), -1});
    flat = flat / flat.norm(2, {1}, true).clamp_min(1e-12);
    return flat.reshape(like.sizes());
}

torch::Tensor jacobian_projection_norm(const torch::Tensor& latent, const torch::Tensor& features,
                                       const torch::Tensor& projection, bool create_graph) {
    const auto b = latent.size(0);
    if (!features.requires_grad() || !latent.requires_grad()) {
        return torch::zeros({b}, latent.options().requires_grad(false));
    }
    auto grads = torch::autograd::grad({(features * projection).sum()}, {latent}, {}, /*retain_graph=*/true,
                                       create_graph, /*allow_unused=*/true);
    if (!grads[0].defined()) return torch::zeros({b}, latent.options().requires_grad(false));
    return (grads[0].reshape({b, -1}).pow(2).sum(1) + 1e-12).sqrt();
}

PathLengthResult path_length_penalty(const torch::Tensor& decoder_input_tokens, const LossNetworkFeatures& features,
                                     const PathLengthState& state, const torch::Tensor& projection) {
    if (features.size() == 0) throw ShapeError("path_length_penalty needs at least one feature layer");
    PathLengthResult r;
    r.norms = jacobian_projection_norm(decoder_input_tokens, features.layers.back(), projection);
    r.penalty = state.weight * (r.norms - state.ema_a).pow(2).mean();
    r.state = state;
    const double mean_norm = r.norms.detach().mean().item<double>();
    r.state.ema_a = std::max(0.0, state.ema_a + state.decay * (mean_norm - state.ema_a));
    return r;
}

} // namespace pmae
