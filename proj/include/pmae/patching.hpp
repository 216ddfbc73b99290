#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "pmae/rng.hpp"

namespace pmae {

// B×C×H×W floating-point image tensor.
using ImageBatch = torch::Tensor;

struct PatchGrid {
    int64_t rows = 0;
    int64_t cols = 0;
    int64_t count() const { return rows * cols; }
    bool operator==(const PatchGrid&) const = default;
};

// Tokens are B×N×(P·P·C); each token is laid out pixel-major with channels last.
struct PatchSequence {
    torch::Tensor tokens;
    int64_t patch_size = 0;
    int64_t channels = 0;
    PatchGrid grid;
};

PatchSequence patchify(const ImageBatch& images, int64_t patch_size);
ImageBatch unpatchify(const PatchSequence& patches);

/// Per-image partition of patch indices into masked and visible sets.
///
/// Indices are stored sorted, so two plans built from the same sets in a
/// different order are identical. Every image in the batch has the same
/// number of masked patches.
class MaskPlan {
public:
    MaskPlan() = default;

    /// Builds a plan from explicit masked index sets; visible indices are the complement.
    static MaskPlan from_masked(const std::vector<std::vector<int64_t>>& masked, int64_t num_patches);

    /// Plan with nothing masked (probe / attention mode).
    static MaskPlan none(int64_t batch, int64_t num_patches);

    int64_t batch_size() const { return masked_.size(0); }
    int64_t num_patches() const { return num_patches_; }
    int64_t num_masked() const { return masked_.size(1); }
    int64_t num_visible() const { return visible_.size(1); }
    double ratio() const { return static_cast<double>(num_masked()) / static_cast<double>(num_patches_); }

    // B×num_masked / B×num_visible int64 index tensors.
    const torch::Tensor& masked() const { return masked_; }
    const torch::Tensor& visible() const { return visible_; }

    // B×N float tensor, 1 at masked positions.
    torch::Tensor mask() const;

    MaskPlan select(int64_t index) const;

private:
    torch::Tensor masked_;
    torch::Tensor visible_;
    int64_t num_patches_ = 0;
};

int64_t masked_count(int64_t num_patches, double ratio);

MaskPlan sample_mask(int64_t num_patches, double ratio, Rng& rng);
MaskPlan sample_mask(int64_t batch, int64_t num_patches, double ratio, Rng& rng);

// Predicted pixels in masked patches, original pixels elsewhere.
ImageBatch composite(const ImageBatch& original, const ImageBatch& predicted, const MaskPlan& plan,
                     int64_t patch_size);

// Per-pixel mask at image resolution (B×1×H×W), 1 inside masked patches.
torch::Tensor pixel_mask(const MaskPlan& plan, PatchGrid grid, int64_t patch_size);

} // namespace pmae
