#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pmae/data.hpp"

namespace pmae {

/// Labeled toy images: each class is a shape family (disc, square, triangle,
/// ring, stripes, checker, cross, ...) drawn with random color, position,
/// scale and background, so labels depend on structure rather than color.
struct SyntheticSpec {
    int64_t classes = 10;
    int64_t per_class = 32;
    int64_t image_size = 32;
    uint64_t seed = 0;
};

inline constexpr int64_t kSyntheticMaxClasses = 10;

std::vector<std::string> synthetic_class_names(int64_t classes);

// In-memory dataset (images in [0, 1]); sample order is class-interleaved.
DatasetHandle synthetic_dataset(const SyntheticSpec& spec);

// Writes root/<class>/<index>.png; returns the number of files written.
int64_t write_synthetic_dataset(const std::filesystem::path& root, const SyntheticSpec& spec);

} // namespace pmae
