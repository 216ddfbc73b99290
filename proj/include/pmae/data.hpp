#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pmae/patching.hpp"
#include "pmae/rng.hpp"

namespace pmae {

enum class Split { train, val };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct Normalization {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.25, 0.25, 0.25};

    // Spread of normalized values for an input spanning [0, 1]; used as the SSIM dynamic range.
    double dynamic_range() const;
};

ImageBatch normalize(const ImageBatch& images, const Normalization& norm);
ImageBatch denormalize(const ImageBatch& images, const Normalization& norm);

struct AugmentPolicy {
    bool crop_enabled = true;
    std::array<double, 2> crop_scale{0.2, 1.0};
    std::array<double, 2> crop_ratio{3.0 / 4.0, 4.0 / 3.0};
    double flip_prob = 0.5;
    Normalization normalization;

    // Throws ConfigError on out-of-range fields.
    void validate() const;

    static AugmentPolicy identity(const Normalization& norm = {});
};

/// Random resized crop and horizontal flip, then normalization.
///
/// Input values are expected in [0, 1]. With every augmentation disabled the
/// result is exactly normalize(images).
ImageBatch apply_augment(const ImageBatch& images, const AugmentPolicy& policy, Rng& rng);

/// An image-folder dataset decoded into memory.
///
/// The root holds either one subdirectory per class or image files directly
/// (unlabeled). If `root/train` or `root/val` exists it is used for the
/// corresponding split.
class DatasetHandle {
public:
    const std::filesystem::path& root() const { return root_; }
    Split split() const { return split_; }
    int64_t image_size() const { return image_size_; }
    const std::vector<std::string>& class_names() const { return class_names_; }
    bool labeled() const { return !class_names_.empty(); }
    int64_t size() const { return images_.size(0); }

    // N×3×S×S float tensor in [0, 1].
    const torch::Tensor& images() const { return images_; }
    // N int64 labels (empty tensor when unlabeled).
    const torch::Tensor& labels() const { return labels_; }
    const std::vector<std::filesystem::path>& files() const { return files_; }

    // Keeps the first `count` samples (after the deterministic ordering).
    DatasetHandle subset(int64_t count) const;

    static DatasetHandle from_tensors(torch::Tensor images, torch::Tensor labels, std::vector<std::string> class_names);

private:
    friend DatasetHandle load_dataset(const std::filesystem::path&, Split, int64_t);

    std::filesystem::path root_;
    Split split_ = Split::train;
    int64_t image_size_ = 0;
    std::vector<std::string> class_names_;
    std::vector<std::filesystem::path> files_;
    torch::Tensor images_;
    torch::Tensor labels_;
};

DatasetHandle load_dataset(const std::filesystem::path& root, Split split, int64_t image_size);

// Reads one image as 3×S×S float in [0, 1]; nullopt when the file cannot be decoded.
std::optional<torch::Tensor> read_image(const std::filesystem::path& file, int64_t image_size);
// Writes a 3×H×W (or 1×H×W) [0, 1] tensor as an 8-bit PNG/JPEG chosen by extension.
void write_image(const std::filesystem::path& file, const torch::Tensor& image);

// Per-channel mean/std of a dataset's [0, 1] pixels.
Normalization dataset_statistics(const DatasetHandle& dataset);

struct Batch {
    ImageBatch images;   // normalized
    torch::Tensor labels;
    std::vector<int64_t> indices;
};

// Deterministic epoch ordering: a permutation of [0, n) derived from (seed, epoch).
std::vector<int64_t> epoch_order(int64_t n, std::uint64_t seed, int64_t epoch, bool shuffle = true);

/// Assembles an augmented batch. Each sample draws from a generator derived
/// from (seed, epoch, sample index), so results do not depend on how samples
/// are split across worker threads.
Batch make_batch(const DatasetHandle& dataset, const std::vector<int64_t>& indices, const AugmentPolicy& policy,
                 std::uint64_t seed, int64_t epoch);

} // namespace pmae
