#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "pmae/losses.hpp"
#include "pmae/patching.hpp"
#include "pmae/rng.hpp"

namespace pmae {

struct DiscriminatorConfig {
    int64_t base_channels = 32;
    int64_t num_blocks = 3;
    int64_t max_channels = 256;
    bool multi_scale = false;
    std::vector<int64_t> input_resolutions;  // finest first; one tap per resolution when multi_scale
    int64_t image_size = 32;
    int64_t channels = 3;

    void validate() const;
};

struct DiscriminatorOutput {
    torch::Tensor score;           // B realness scores
    LossNetworkFeatures features;  // one tap per block, shallow to deep
};

/// Strided convolutional discriminator. Each block halves the resolution;
/// in multi-scale mode pyramid level k is concatenated onto the input of
/// block k (the block running at that level's resolution).
class DiscriminatorImpl : public torch::nn::Module {
public:
    explicit DiscriminatorImpl(DiscriminatorConfig cfg);

    DiscriminatorOutput forward(const ImageBatch& images);
    DiscriminatorOutput forward(const std::vector<ImageBatch>& pyramid);

    const DiscriminatorConfig& config() const { return cfg_; }

private:
    DiscriminatorConfig cfg_;
    torch::nn::Conv2d from_rgb_{nullptr};
    std::vector<torch::nn::Conv2d> conv_a_;
    std::vector<torch::nn::Conv2d> conv_b_;
    torch::nn::Linear score_{nullptr};
};
TORCH_MODULE(Discriminator);

DiscriminatorOutput discriminate(Discriminator& d, const std::vector<ImageBatch>& pyramid);

// [x, pool2(x), pool4(x), ...] with `levels` entries.
std::vector<ImageBatch> image_pyramid(const ImageBatch& images, int64_t levels);

// ½·mean[(d_real−1)²] + ½·mean[d_fake²]
torch::Tensor lsgan_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);
// ½·mean[(d_fake−1)²]
torch::Tensor lsgan_g_loss(const torch::Tensor& d_fake);

struct AdaPipeline {
    bool flip = true;
    bool rotate90 = true;
    bool translate = true;
    bool color = true;

    static AdaPipeline flip_only() { return {true, false, false, false}; }
};

struct AdaState {
    double p = 0.0;
    double target = 0.6;
    double step = 0.005;
    int64_t window = 4;
    double rt_estimate = 0.0;
    // Scores are compared against this value before taking the sign. LS-GAN
    // targets are 0 (fake) and 1 (real), so 0.5 is the decision boundary.
    double sign_offset = 0.5;
    AdaPipeline pipeline;

    double accum_sum = 0.0;
    int64_t accum_count = 0;
    int64_t accum_batches = 0;

    void validate() const;
};

/// Applies each enabled augmentation independently with probability p:
/// horizontal flip, 90° rotation, integer translation up to 1/8 of the width
/// (reflect padded), brightness/contrast jitter. All ops are differentiable.
ImageBatch ada_augment(const ImageBatch& images, const AdaState& state, Rng& rng);

// Same per-image draws applied to every pyramid level (translations scaled per level).
std::vector<ImageBatch> ada_augment(const std::vector<ImageBatch>& pyramid, const AdaState& state, Rng& rng);

// Accumulates sign(d_real - sign_offset); every `window` batches sets rt_estimate
// and moves p by ±step toward keeping rt_estimate at target, clamped to [0, 1].
AdaState ada_update(AdaState state, const torch::Tensor& d_real_scores);

struct PathLengthState {
    double ema_a = 0.0;
    double decay = 0.01;
    double weight = 2.0;
    int64_t every = 4;

    void validate() const;
};

// Per-sample random directions with unit L2 norm, shaped like `like`.
torch::Tensor unit_projection(const torch::Tensor& like, Rng& rng);

// Per-sample ‖Jᵀy‖ where J = ∂features/∂latent; zero when features do not depend on latent.
torch::Tensor jacobian_projection_norm(const torch::Tensor& latent, const torch::Tensor& features,
                                       const torch::Tensor& projection, bool create_graph = true);

struct PathLengthResult {
    torch::Tensor penalty;  // weight · mean_b (‖Jᵀy‖_b − ema_a)²
    torch::Tensor norms;
    PathLengthState state;  // ema_a moved toward the mean observed norm
};

/// Penalty on the deepest feature layer. Uses the incoming ema_a, then
/// returns the updated state.
PathLengthResult path_length_penalty(const torch::Tensor& decoder_input_tokens, const LossNetworkFeatures& features,
                                     const PathLengthState& state, const torch::Tensor& projection);

} // namespace pmae
