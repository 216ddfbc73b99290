#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace pmae {

struct NamedArray {
    std::string name;
    torch::Tensor value;
};

struct ArrayBundle {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const torch::Tensor* find(const std::string& name) const;
    const torch::Tensor& at(const std::string& name) const;
};

/// Writes `dir/manifest.json` and `dir/arrays.bin`.
///
/// The manifest lists every array once with dtype, shape, byte order, offset,
/// byte length and crc32; the blob holds the raw little-endian bytes back to
/// back. Supported dtypes: float32, float64, int64, uint8.
void save_bundle(const std::filesystem::path& dir, const ArrayBundle& bundle);

// Throws IoError describing what disagrees between manifest and blob.
ArrayBundle load_bundle(const std::filesystem::path& dir);

// Parameters and buffers of a module as "<prefix><name>" arrays.
void append_module(ArrayBundle& bundle, const torch::nn::Module& module, const std::string& prefix);

// Copies arrays into the module; throws ConfigError naming the first array whose
// name, dtype or shape does not match the module.
void load_module(torch::nn::Module& module, const ArrayBundle& bundle, const std::string& prefix);

} // namespace pmae
