#include "pmae/loss_network.hpp"

#include <algorithm>

#include "pmae/backbone.hpp"
#include "pmae/checkpoint.hpp"
#include "pmae/error.hpp"

namespace fs = std::filesystem;

namespace pmae {

void LossNetworkSpec::validate() const {
    if (kind == LossNetworkKind::external && !weights_path) {
        throw ConfigError("external loss network requires weights_path");
    }
}

ConvLossNetworkImpl::ConvLossNetworkImpl(int64_t in_channels, std::vector<int64_t> widths)
    : in_channels_(in_channels), widths_(std::move(widths)) {
    if (widths_.empty()) throw ConfigError("loss network needs at least one layer");
    int64_t c = in_channels_;
    for (size_t i = 0; i < widths_.size(); ++i) {
        convs_.push_back(register_module("conv" + std::to_string(i + 1),
                                         torch::nn::Conv2d(torch::nn::Conv2dOptions(c, widths_[i], 3)
                                                               .stride(2)
                                                               .padding(1))));
        c = widths_[i];
    }
}

std::vector<std::string> ConvLossNetworkImpl::layer_names() const {
    std::vector<std::string> names;
    for (size_t i = 0; i < convs_.size(); ++i) names.push_back("conv" + std::to_string(i + 1));
    return names;
}

std::vector<torch::Tensor> ConvLossNetworkImpl::forward(const torch::Tensor& images,
                                                        const std::vector<std::string>& taps) {
    const auto names = layer_names();
    std::vector<torch::Tensor> all;
    auto x = images;
    for (auto& conv : convs_) {
        x = torch::relu(conv(x));
        all.push_back(x);
    }
    if (taps.empty()) return all;
    std::vector<torch::Tensor> out;
    for (size_t i = 0; i < names.size(); ++i) {
        if (std::find(taps.begin(), taps.end(), names[i]) != taps.end()) out.push_back(all[i]);
    }
    return out;
}

void save_loss_network(const fs::path& dir, ConvLossNetwork& net) {
    ArrayBundle bundle;
    bundle.metadata = {{"kind", "conv_loss_network"}, {"in_channels", net->in_channels()}, {"widths", net->widths()}};
    append_module(bundle, *net, "");
    save_bundle(dir, bundle);
}

ConvLossNetwork load_loss_network(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) {
        throw IoError("loss network weights not found: " + (dir / "manifest.json").string());
    }
    auto bundle = load_bundle(dir);
    const auto& meta = bundle.metadata;
    if (meta.value("kind", "") != "conv_loss_network") {
        throw IoError("weights at " + dir.string() + " are not a conv_loss_network");
    }
    ConvLossNetwork net(meta.at("in_channels").get<int64_t>(), meta.at("widths").get<std::vector<int64_t>>());
    load_module(*net, bundle, "");
    return net;
}

ConvLossNetwork make_random_loss_network(int64_t in_channels, std::vector<int64_t> widths, uint64_t seed) {
    torch::manual_seed(seed);
    return ConvLossNetwork(in_channels, std::move(widths));
}

namespace {

void freeze(torch::nn::Module& m) {
    m.eval();
    for (auto& p : m.parameters()) p.set_requires_grad(false);
}

} // namespace

LossNetwork LossNetwork::external(const LossNetworkSpec& spec) {
    spec.validate();
    if (spec.kind != LossNetworkKind::external) throw ConfigError("LossNetwork::external needs kind=external");
    return external(load_loss_network(*spec.weights_path), spec.layer_taps);
}

LossNetwork LossNetwork::external(ConvLossNetwork net, std::vector<std::string> taps) {
    LossNetwork ln;
    ln.kind_ = LossNetworkKind::external;
    const auto names = net->layer_names();
    for (const auto& t : taps) {
        if (std::find(names.begin(), names.end(), t) == names.end()) {
            std::string avail;
            for (const auto& n : names) avail += (avail.empty() ? "" : ", ") + n;
            throw ConfigError("unknown loss-network tap '" + t + "'; available taps: " + avail);
        }
    }
    freeze(*net);
    ln.net_ = std::move(net);
    ln.taps_ = std::move(taps);
    return ln;
}

LossNetwork LossNetwork::from_discriminator(Discriminator d, std::vector<std::string> taps) {
    LossNetwork ln;
    ln.kind_ = LossNetworkKind::discriminator;
    ln.disc_ = std::move(d);
    ln.taps_ = std::move(taps);
    const auto names = ln.available_taps();
    for (const auto& t : ln.taps_) {
        auto it = std::find(names.begin(), names.end(), t);
        if (it == names.end()) {
            std::string avail;
            for (const auto& n : names) avail += (avail.empty() ? "" : ", ") + n;
            throw ConfigError("unknown loss-network tap '" + t + "'; available taps: " + avail);
        }
        ln.tap_indices_.push_back(static_cast<size_t>(it - names.begin()));
    }
    std::sort(ln.tap_indices_.begin(), ln.tap_indices_.end());
    return ln;
}

std::vector<std::string> LossNetwork::available_taps() const {
    if (kind_ == LossNetworkKind::external) return net_->layer_names();
    std::vector<std::string> names;
    for (int64_t b = 0; b < disc_->config().num_blocks; ++b) names.push_back("block" + std::to_string(b));
    return names;
}

LossNetworkFeatures LossNetwork::extract(const ImageBatch& images) const {
    if (kind_ == LossNetworkKind::discriminator) {
        return extract(image_pyramid(images, disc_->config().multi_scale
                                                 ? static_cast<int64_t>(disc_->config().input_resolutions.size())
                                                 : 1));
    }
    auto net = net_;
    return LossNetworkFeatures::from_layers(net->forward(images, taps_));
}

LossNetworkFeatures LossNetwork::extract(const std::vector<ImageBatch>& pyramid) const {
    if (kind_ == LossNetworkKind::external) return extract(pyramid.front());
    // Gradients reach the images but are never accumulated into discriminator parameters.
    std::vector<bool> previous;
    for (auto& p : disc_->parameters()) {
        previous.push_back(p.requires_grad());
        p.set_requires_grad(false);
    }
    auto d = disc_;
    auto out = discriminate(d, pyramid).features;
    size_t i = 0;
    for (auto& p : disc_->parameters()) p.set_requires_grad(previous[i++]);
    if (tap_indices_.empty()) return out;
    std::vector<torch::Tensor> picked;
    for (auto idx : tap_indices_) picked.push_back(out.layers[idx]);
    return LossNetworkFeatures::from_layers(std::move(picked));
}

std::uint64_t LossNetwork::checksum() const {
    return kind_ == LossNetworkKind::external ? parameter_checksum(*net_) : parameter_checksum(*disc_);
}

LossNetworkFeatures extract_features(const ImageBatch& images, const LossNetworkSpec& spec) {
    if (spec.kind == LossNetworkKind::discriminator) {
        throw ConfigError("extract_features(spec) with kind=discriminator needs a discriminator; use "
                          "LossNetwork::from_discriminator");
    }
    return LossNetwork::external(spec).extract(images);
}

} // namespace pmae
