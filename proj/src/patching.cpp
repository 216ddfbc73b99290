#include "pmae/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pmae/error.hpp"

namespace pmae {

PatchSequence patchify(const ImageBatch& images, int64_t patch_size) {
    if (images.dim() != 4) {
        throw ShapeError("patchify expects B×C×H×W images, got " + std::to_string(images.dim()) + " dims");
    }
    if (patch_size <= 0) throw ConfigError("patch size must be positive");
    const auto b = images.size(0);
    const auto c = images.size(1);
    const auto h = images.size(2);
    const auto w = images.size(3);
    if (h % patch_size != 0 || w % patch_size != 0) {
        std::ostringstream msg;
        msg << "image " << h << "x" << w << " is not divisible by patch size " << patch_size;
        throw ConfigError(msg.str());
    }
    const PatchGrid grid{h / patch_size, w / patch_size};
    auto x = images.reshape({b, c, grid.rows, patch_size, grid.cols, patch_size});
    x = x.permute({0, 2, 4, 3, 5, 1});  // b, rows, cols, p, q, c
    auto tokens = x.reshape({b, grid.count(), patch_size * patch_size * c});
    return {tokens, patch_size, c, grid};
}

ImageBatch unpatchify(const PatchSequence& patches) {
    const auto& t = patches.tokens;
    const auto p = patches.patch_size;
    const auto c = patches.channels;
    if (t.dim() != 3) throw ShapeError("unpatchify expects B×N×D tokens");
    if (t.size(1) != patches.grid.count()) {
        throw ShapeError("token count " + std::to_string(t.size(1)) + " does not match grid " +
                         std::to_string(patches.grid.rows) + "x" + std::to_string(patches.grid.cols));
    }
    if (t.size(2) != p * p * c) {
        throw ShapeError("token dim " + std::to_string(t.size(2)) + " != P*P*C = " + std::to_string(p * p * c));
    }
    const auto b = t.size(0);
    auto x = t.reshape({b, patches.grid.rows, patches.grid.cols, p, p, c});
    x = x.permute({0, 5, 1, 3, 2, 4});  // b, c, rows, p, cols, q
    return x.reshape({b, c, patches.grid.rows * p, patches.grid.cols * p});
}

MaskPlan MaskPlan::from_masked(const std::vector<std::vector<int64_t>>& masked, int64_t num_patches) {
    if (masked.empty()) throw ShapeError("mask plan needs at least one image");
    const auto n_masked = static_cast<int64_t>(masked.front().size());
    const auto batch = static_cast<int64_t>(masked.size());
    auto masked_t = torch::empty({batch, n_masked}, torch::kLong);
    auto visible_t = torch::empty({batch, num_patches - n_masked}, torch::kLong);
    auto m_acc = masked_t.accessor<int64_t, 2>();
    auto v_acc = visible_t.accessor<int64_t, 2>();
    for (int64_t i = 0; i < batch; ++i) {
        if (static_cast<int64_t>(masked[i].size()) != n_masked) {
            throw ShapeError("every image in a mask plan must mask the same number of patches");
        }
        std::vector<char> is_masked(static_cast<size_t>(num_patches), 0);
        for (auto idx : masked[i]) {
            if (idx < 0 || idx >= num_patches) throw ShapeError("masked index out of range: " + std::to_string(idx));
            if (is_masked[idx]) throw ShapeError("duplicate masked index: " + std::to_string(idx));
            is_masked[idx] = 1;
        }
        int64_t mi = 0;
        int64_t vi = 0;
        for (int64_t k = 0; k < num_patches; ++k) {
            if (is_masked[k]) {
                m_acc[i][mi++] = k;
            } else {
                v_acc[i][vi++] = k;
            }
        }
    }
    MaskPlan plan;
    plan.masked_ = masked_t;
    plan.visible_ = visible_t;
    plan.num_patches_ = num_patches;
    return plan;
}

MaskPlan MaskPlan::none(int64_t batch, int64_t num_patches) {
    return from_masked(std::vector<std::vector<int64_t>>(static_cast<size_t>(batch)), num_patches);
}

torch::Tensor MaskPlan::mask() const {
    auto m = torch::zeros({batch_size(), num_patches_});
    if (num_masked() > 0) m.scatter_(1, masked_, 1.0);
    return m;
}

MaskPlan MaskPlan::select(int64_t index) const {
    MaskPlan plan;
    plan.masked_ = masked_.narrow(0, index, 1);
    plan.visible_ = visible_.narrow(0, index, 1);
    plan.num_patches_ = num_patches_;
    return plan;
}

int64_t masked_count(int64_t num_patches, double ratio) {
    return static_cast<int64_t>(std::llround(ratio * static_cast<double>(num_patches)));
}

MaskPlan sample_mask(int64_t num_patches, double ratio, Rng& rng) {
    return sample_mask(1, num_patches, ratio, rng);
}

MaskPlan sample_mask(int64_t batch, int64_t num_patches, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ConfigError("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
    }
    if (num_patches < 2) throw ConfigError("masking needs at least 2 patches");
    const auto count = masked_count(num_patches, ratio);
    std::vector<std::vector<int64_t>> masked(static_cast<size_t>(batch));
    std::vector<int64_t> order(static_cast<size_t>(num_patches));
    for (auto& m : masked) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        m.assign(order.begin(), order.begin() + count);
    }
    return MaskPlan::from_masked(masked, num_patches);
}

torch::Tensor pixel_mask(const MaskPlan& plan, PatchGrid grid, int64_t patch_size) {
    if (grid.count() != plan.num_patches()) throw ShapeError("mask plan does not match the patch grid");
    auto m = plan.mask().reshape({plan.batch_size(), 1, grid.rows, grid.cols});
    return m.repeat_interleave(patch_size, 2).repeat_interleave(patch_size, 3);
}

ImageBatch composite(const ImageBatch& original, const ImageBatch& predicted, const MaskPlan& plan,
                     int64_t patch_size) {
    if (!original.sizes().equals(predicted.sizes())) {
        throw ShapeError("composite: original and predicted shapes differ");
    }
    if (original.size(0) != plan.batch_size()) throw ShapeError("composite: batch size differs from mask plan");
    const PatchGrid grid{original.size(2) / patch_size, original.size(3) / patch_size};
    auto m = pixel_mask(plan, grid, patch_size).to(torch::kBool);
    return torch::where(m, predicted, original);
}

} // namespace pmae
