#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "pmae/data.hpp"
#include "pmae/loss_network.hpp"
#include "pmae/training.hpp"

namespace pmae {

inline constexpr double kPsnrCap = 99.0;

// 10·log10(max² / MSE) over the whole batch, capped at kPsnrCap dB.
double psnr(const ImageBatch& pred, const ImageBatch& target, double max_value = 1.0);

// Mean SSIM over a uniform 7×7 window (or the image side when smaller).
double ssim_index(const ImageBatch& pred, const ImageBatch& target, double dynamic_range = 1.0);

enum class EmbeddingSource { discriminator, external, file };

struct EmbeddingSet {
    torch::Tensor vectors;  // M×d float64
    EmbeddingSource source = EmbeddingSource::external;
};

void save_embeddings(const std::filesystem::path& dir, const EmbeddingSet& set);
EmbeddingSet load_embeddings(const std::filesystem::path& dir);

/// Fréchet distance between Gaussians fit to both sets. Covariances are
/// regularized with 1e-6·I (with a warning) when M < d+1.
double compute_fid(const EmbeddingSet& a, const EmbeddingSet& b);

// Mean and population std of exp(E[KL(p(y|x) ‖ p(y))]) across `splits` contiguous splits.
std::pair<double, double> compute_is(const torch::Tensor& probs, int64_t splits = 4);

/// Maps [0, 1] images to embeddings and class posteriors for FID/IS.
///
/// The default is a frozen conv network built from a fixed seed; its
/// parameter checksum is part of id() so reports state what produced them.
class Embedder {
public:
    static Embedder default_embedder();
    // kind=external loads weights_path; kind=discriminator uses `d` (required then).
    static Embedder from_spec(const LossNetworkSpec& spec, Discriminator d = nullptr);

    // Global-average-pooled deepest tapped layer, M×d float64.
    EmbeddingSet embed(const ImageBatch& images01, int64_t batch_size = 128) const;
    // Softmax over embedding dimensions after standardizing with the reference set's per-dimension statistics.
    torch::Tensor class_probs(const EmbeddingSet& set, const EmbeddingSet& reference) const;
    const std::string& id() const { return id_; }

private:
    Embedder(LossNetwork net, EmbeddingSource source, std::string id);

    LossNetwork net_;
    EmbeddingSource source_;
    std::string id_;
};

struct MetricsReport {
    double l1 = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
    double is_mean = 0.0;
    double is_std = 0.0;
    double fid = 0.0;
    int64_t sample_count = 0;
    std::string embedder_id;

    nlohmann::json to_json() const;
    // Columns L1 | PSNR | SSIM | IS | FID.
    std::string table() const;
};

// Maps normalized images and a mask plan to normalized reconstructions.
using Reconstructor = std::function<ImageBatch(const ImageBatch& images, const MaskPlan& plan)>;

// Bypass that returns its input.
Reconstructor identity_reconstructor();
// Full G(I_m) of a trained model; patch-normalized targets are mapped back with each patch's own statistics.
Reconstructor model_reconstructor(const LoadedModel& model);

struct EvalOptions {
    uint64_t mask_seed = 0;
    double mask_ratio = 0.75;
    int64_t patch_size = 4;
    int64_t batch_size = 64;
    int64_t is_splits = 4;
};

/// Masks every image with a plan derived from mask_seed, reconstructs, and
/// scores clamp(denormalize(G(I_m))) against the original [0, 1] images.
MetricsReport evaluate_reconstruction(const Reconstructor& model, const DatasetHandle& dataset,
                                      const Normalization& norm, const Embedder& embedder,
                                      const EvalOptions& opts);
MetricsReport evaluate_reconstruction(const std::filesystem::path& checkpoint, const DatasetHandle& dataset,
                                      const Embedder& embedder, EvalOptions opts);

// Same masking as evaluate_reconstruction for image i of a batch drawn with `seed`.
MaskPlan eval_mask(int64_t batch, int64_t num_patches, double ratio, uint64_t seed, int64_t batch_index);

// Original with masked patches set to mid gray.
ImageBatch masked_panel(const ImageBatch& images01, const MaskPlan& plan, int64_t patch_size);

/// For each image writes recon_<i>.png (original | masked | reconstruction) and
/// attention_<i>.png (one [0, 1]-normalized [CLS] heatmap per head, upsampled
/// to the image size). Returns the written paths, grids first.
std::vector<std::filesystem::path> render_outputs(const LoadedModel& model, const ImageBatch& images01,
                                                  const std::filesystem::path& out_dir, uint64_t mask_seed = 0);

// Per-head maps normalized to [0, 1] each, B×heads×S×S.
torch::Tensor attention_heatmaps(ViTEncoder& encoder, const ImageBatch& normalized, int64_t image_size);

} // namespace pmae
