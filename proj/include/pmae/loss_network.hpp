#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pmae/adversarial.hpp"
#include "pmae/losses.hpp"

namespace pmae {

enum class LossNetworkKind { discriminator, external };

struct LossNetworkSpec {
    LossNetworkKind kind = LossNetworkKind::discriminator;
    std::vector<std::string> layer_taps;  // empty: every layer
    std::optional<std::filesystem::path> weights_path;

    void validate() const;
};

// Small strided conv stack standing in for a pre-trained encoder. Layers are
// named "conv1".."convK"; each is a stride-2 3×3 convolution followed by ReLU.
class ConvLossNetworkImpl : public torch::nn::Module {
public:
    ConvLossNetworkImpl(int64_t in_channels, std::vector<int64_t> widths);

    std::vector<std::string> layer_names() const;
    // Activations of the requested layers, in network order.
    std::vector<torch::Tensor> forward(const torch::Tensor& images, const std::vector<std::string>& taps);

    int64_t in_channels() const { return in_channels_; }
    const std::vector<int64_t>& widths() const { return widths_; }

private:
    int64_t in_channels_;
    std::vector<int64_t> widths_;
    std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(ConvLossNetwork);

// Writes a network in the manifest+blob format (architecture stored in metadata).
void save_loss_network(const std::filesystem::path& dir, ConvLossNetwork& net);
ConvLossNetwork load_loss_network(const std::filesystem::path& dir);

// Seeded random network used in tests and as the default evaluation embedder.
ConvLossNetwork make_random_loss_network(int64_t in_channels, std::vector<int64_t> widths, uint64_t seed);

/// Frozen feature extractor behind a LossNetworkSpec.
///
/// Parameters never receive gradients or updates; gradients still flow to the
/// image argument. For kind=discriminator the features are exactly those of
/// discriminate() on the given discriminator.
class LossNetwork {
public:
    static LossNetwork external(const LossNetworkSpec& spec);
    static LossNetwork external(ConvLossNetwork net, std::vector<std::string> taps);
    static LossNetwork from_discriminator(Discriminator d, std::vector<std::string> taps = {});

    LossNetworkFeatures extract(const ImageBatch& images) const;
    LossNetworkFeatures extract(const std::vector<ImageBatch>& pyramid) const;

    std::vector<std::string> available_taps() const;
    LossNetworkKind kind() const { return kind_; }
    std::uint64_t checksum() const;

private:
    LossNetworkKind kind_ = LossNetworkKind::external;
    ConvLossNetwork net_{nullptr};
    Discriminator disc_{nullptr};
    std::vector<std::string> taps_;
    std::vector<size_t> tap_indices_;
};

LossNetworkFeatures extract_features(const ImageBatch& images, const LossNetworkSpec& spec);

} // namespace pmae
