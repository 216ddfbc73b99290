#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pmae/patching.hpp"

namespace pmae {

struct LossWeights {
    double alpha = 0.85;     // MS-SSIM share; L1 gets 1 - alpha
    double delta_f = 0.05;   // feature reconstruction
    double delta_s = 40.0;   // style (Gram) reconstruction
    bool perceptual_even_epochs_only = true;

    void validate() const;
};

/// Per-layer loss-network activations φ^j, shallow to deep.
struct LossNetworkFeatures {
    std::vector<torch::Tensor> layers;
    std::vector<int64_t> element_counts;

    static LossNetworkFeatures from_layers(std::vector<torch::Tensor> layers);
    size_t size() const { return layers.size(); }
};

// Mean absolute difference over every element.
torch::Tensor l1_loss(const ImageBatch& pred, const ImageBatch& target);

// Mean of |pred - target| restricted to pixels where mask (B×1×H×W) is 1.
torch::Tensor masked_l1_loss(const ImageBatch& pred, const ImageBatch& target, const torch::Tensor& mask);

struct SsimOptions {
    int64_t window = 3;
    double dynamic_range = 1.0;
};

// Per-pixel SSIM map over a uniform window (valid positions only), B×C×(H-w+1)×(W-w+1).
torch::Tensor ssim_map(const ImageBatch& x, const ImageBatch& y, const SsimOptions& opts);

/// alpha · mean over scales of mean over pixels of (1 - SSIM)/2.
///
/// Scales are built by 2×2 average pooling; each uses a uniform 3×3 window.
/// The result lies in [0, alpha]. Throws ShapeError when the image is smaller
/// than 2^(scales-1) · window.
torch::Tensor ms_ssim_loss(const ImageBatch& pred, const ImageBatch& target, double alpha, int64_t scales = 4,
                           const SsimOptions& opts = {});

// Ψ(F)_{cc'} = Σ_spatial F_c F_c' / (C·H·W), batched: B×C×C.
torch::Tensor gram(const torch::Tensor& features);

// δ_f Σ_j ||φ_p − φ_r||_1 / N_j + δ_s Σ_j ||Ψ(φ_p) − Ψ(φ_r)||_1 / N_j.
torch::Tensor feature_matching_loss(const LossNetworkFeatures& pred, const LossNetworkFeatures& real,
                                    const LossWeights& weights);

enum class ObjectiveVariant { mse, ms_ssim_l1, gan_perceptual, loss_network_perceptual };

std::string to_string(ObjectiveVariant v);
ObjectiveVariant objective_from_string(const std::string& name);
bool needs_discriminator(ObjectiveVariant v);

struct ObjectiveInputs {
    ImageBatch pred;
    ImageBatch target;
    int64_t epoch = 0;
    std::optional<torch::Tensor> pixel_mask;  // restrict pixel terms to masked patches when set
    std::optional<LossNetworkFeatures> pred_features;
    std::optional<LossNetworkFeatures> real_features;
    std::optional<torch::Tensor> d_fake;       // discriminator scores on the reconstruction
    SsimOptions ssim;
    int64_t ssim_scales = 4;
};

struct LossTerm {
    std::string name;
    torch::Tensor value;  // weighted contribution; zero scalar when skipped
    bool active = true;
};

struct ObjectiveResult {
    torch::Tensor total;
    std::vector<LossTerm> terms;

    const LossTerm* find(const std::string& name) const;
};

// True when the feature/style term runs this epoch.
bool perceptual_active(const LossWeights& weights, int64_t epoch);

/// Generator objective for one variant:
///   mse                      → MSE
///   ms_ssim_l1               → ms_ssim_loss(α) + (1−α)·L1
///   gan_perceptual           → L1 + feat (scheduled) + LS-GAN generator term
///   loss_network_perceptual  → L1 + feat (scheduled) from an external loss network
ObjectiveResult generator_objective(ObjectiveVariant variant, const ObjectiveInputs& in, const LossWeights& weights);

} // namespace pmae
