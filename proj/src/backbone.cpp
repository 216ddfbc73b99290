#include "pmae/backbone.hpp"

#include <cmath>
#include <sstream>

#include "pmae/error.hpp"

namespace pmae {

void EncoderConfig::validate() const {
    if (depth <= 0 || width <= 0 || heads <= 0) throw ConfigError("encoder depth/width/heads must be positive");
    if (width % heads != 0) throw ConfigError("encoder width must be divisible by heads");
    if (width % 4 != 0) throw ConfigError("encoder width must be divisible by 4 for 2-D position tables");
    if (patch_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    }
}

EncoderConfig EncoderConfig::preset(const std::string& name, int64_t image_size, int64_t patch_size) {
    EncoderConfig cfg;
    cfg.image_size = image_size;
    cfg.patch_size = patch_size;
    if (name == "vit-tiny") {
        cfg.depth = 4;
        cfg.width = 192;
        cfg.heads = 3;
    } else if (name == "vit-b") {
        cfg.depth = 12;
        cfg.width = 768;
        cfg.heads = 12;
    } else {
        throw ConfigError("unknown encoder preset '" + name + "' (expected vit-tiny or vit-b)");
    }
    return cfg;
}

void DecoderConfig::validate(const EncoderConfig& encoder) const {
    if (depth <= 0 || width <= 0 || heads <= 0) throw ConfigError("decoder depth/width/heads must be positive");
    if (width % heads != 0) throw ConfigError("decoder width must be divisible by heads");
    if (width % 4 != 0) throw ConfigError("decoder width must be divisible by 4 for 2-D position tables");
    if (!msg_enabled) return;
    for (size_t i = 0; i < skip_pairs.size(); ++i) {
        const auto [e, d] = skip_pairs[i];
        if (e < 0 || e >= encoder.depth) throw ConfigError("skip pair encoder layer out of range: " + std::to_string(e));
        if (d < 0 || d >= depth) throw ConfigError("skip pair decoder layer out of range: " + std::to_string(d));
        if (i > 0 && (e <= skip_pairs[i - 1].first || d <= skip_pairs[i - 1].second)) {
            throw ConfigError("skip_pairs must be strictly increasing on both sides");
        }
    }
    if (scale_heads.empty()) throw ConfigError("msg_enabled requires at least one scale head");
    if (scale_heads.front() != encoder.image_size) {
        throw ConfigError("the first scale head must equal the input resolution " + std::to_string(encoder.image_size));
    }
    const auto grid = encoder.grid_side();
    for (size_t i = 0; i < scale_heads.size(); ++i) {
        const auto r = scale_heads[i];
        if (r < grid || r % grid != 0) {
            throw ConfigError("scale head " + std::to_string(r) + " must be a multiple of the patch grid side " +
                              std::to_string(grid));
        }
        if (i > 0 && scale_heads[i - 1] != 2 * r) {
            throw ConfigError("scale_heads must be descending powers of two (each half the previous)");
        }
    }
}

std::vector<SkipPair> default_skip_pairs(int64_t encoder_depth, int64_t decoder_depth) {
    const int64_t sources = encoder_depth - 1;
    const int64_t n = std::min(sources, decoder_depth);
    std::vector<SkipPair> pairs;
    if (n <= 0) return pairs;
    auto spaced = [n](int64_t t, int64_t count) -> int64_t {
        if (n == 1) return 0;
        return static_cast<int64_t>(std::llround(static_cast<double>(t) * static_cast<double>(count - 1) /
                                                 static_cast<double>(n - 1)));
    };
    for (int64_t t = 0; t < n; ++t) pairs.emplace_back(spaced(t, sources), spaced(t, decoder_depth));
    return pairs;
}

std::vector<int64_t> default_scale_heads(int64_t image_size, int64_t grid_side, int64_t levels) {
    std::vector<int64_t> out;
    for (int64_t r = image_size; r >= grid_side && static_cast<int64_t>(out.size()) < levels; r /= 2) {
        out.push_back(r);
        if (r % 2 != 0) break;
    }
    return out;
}

torch::Tensor sincos_position_table(int64_t dim, int64_t grid_side) {
    const int64_t quarter = dim / 4;
    auto omega = torch::arange(quarter, torch::kFloat64) / static_cast<double>(quarter);
    omega = 1.0 / torch::pow(10000.0, omega);
    auto coords = torch::arange(grid_side, torch::kFloat64);
    auto rows = coords.repeat_interleave(grid_side);  // row index of each patch
    auto cols = coords.repeat({grid_side});
    auto embed = [&](const torch::Tensor& pos) {
        auto out = torch::outer(pos, omega);
        return torch::cat({torch::sin(out), torch::cos(out)}, 1);
    };
    auto table = torch::cat({embed(cols), embed(rows)}, 1);
    table = torch::cat({torch::zeros({1, dim}, torch::kFloat64), table}, 0);
    return table.to(torch::kFloat32);
}

namespace {

void init_linear(torch::nn::Linear& l) {
    torch::nn::init::xavier_uniform_(l->weight);
    if (l->options.bias()) torch::nn::init::zeros_(l->bias);
}

void zero_linear(torch::nn::Linear& l) {
    torch::NoGradGuard g;
    l->weight.zero_();
    if (l->options.bias()) l->bias.zero_();
}

torch::nn::LayerNorm layer_norm(int64_t dim) {
    return torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6));
}

} // namespace

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t dim, int64_t heads)
    : heads_(heads), scale_(1.0 / std::sqrt(static_cast<double>(dim / heads))) {
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
    init_linear(qkv_);
    init_linear(proj_);
}

std::pair<torch::Tensor, torch::Tensor> MultiHeadAttentionImpl::forward(const torch::Tensor& x, bool keep_weights) {
    const auto b = x.size(0);
    const auto t = x.size(1);
    const auto d = x.size(2);
    auto qkv = qkv_(x).reshape({b, t, 3, heads_, d / heads_}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0];
    auto k = qkv[1];
    auto v = qkv[2];
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale_, -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, t, d});
    return {proj_(out), keep_weights ? attn : torch::Tensor()};
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, double mlp_ratio) {
    const auto hidden = static_cast<int64_t>(static_cast<double>(dim) * mlp_ratio);
    norm1_ = register_module("norm1", layer_norm(dim));
    attn_ = register_module("attn", MultiHeadAttention(dim, heads));
    norm2_ = register_module("norm2", layer_norm(dim));
    fc1_ = register_module("fc1", torch::nn::Linear(dim, hidden));
    fc2_ = register_module("fc2", torch::nn::Linear(hidden, dim));
    init_linear(fc1_);
    init_linear(fc2_);
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, torch::Tensor* attention) {
    auto [a, weights] = attn_(norm1_(x), attention != nullptr);
    if (attention != nullptr) *attention = weights;
    auto h = x + a;
    return h + fc2_(torch::gelu(fc1_(norm2_(h))));
}

ViTEncoderImpl::ViTEncoderImpl(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto token_dim = cfg_.patch_size * cfg_.patch_size * cfg_.channels;
    patch_embed_ = register_module("patch_embed", torch::nn::Linear(token_dim, cfg_.width));
    init_linear(patch_embed_);
    cls_token_ = register_parameter("cls_token", torch::randn({1, 1, cfg_.width}) * 0.02);
    pos_table_ = register_buffer("pos_table", sincos_position_table(cfg_.width, cfg_.grid_side()).unsqueeze(0));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg_.depth; ++i) {
        blocks_->push_back(TransformerBlock(cfg_.width, cfg_.heads, cfg_.mlp_ratio));
    }
    norm_ = register_module("norm", layer_norm(cfg_.width));
}

EncoderOutput ViTEncoderImpl::forward(const ImageBatch& images, const MaskPlan& plan, bool keep_attention) {
    if (images.size(1) != cfg_.channels || images.size(2) != cfg_.image_size || images.size(3) != cfg_.image_size) {
        std::ostringstream msg;
        msg << "encoder expects B×" << cfg_.channels << "×" << cfg_.image_size << "×" << cfg_.image_size
            << " images, got " << images.sizes();
        throw ShapeError(msg.str());
    }
    if (plan.num_patches() != cfg_.num_patches() || plan.batch_size() != images.size(0)) {
        throw ShapeError("mask plan does not match the image batch / patch grid");
    }
    const auto b = images.size(0);
    auto x = patch_embed_(patchify(images, cfg_.patch_size).tokens);
    x = x + pos_table_.narrow(1, 1, cfg_.num_patches());
    auto vis = plan.visible().to(x.device());
    x = x.gather(1, vis.unsqueeze(-1).expand({b, vis.size(1), cfg_.width}));
    auto cls = (cls_token_ + pos_table_.narrow(1, 0, 1)).expand({b, 1, cfg_.width});
    x = torch::cat({cls, x}, 1);

    EncoderOutput out;
    out.intermediates.reserve(static_cast<size_t>(cfg_.depth));
    for (size_t i = 0; i < blocks_->size(); ++i) {
        const bool last = i + 1 == blocks_->size();
        x = blocks_[i]->as<TransformerBlock>()->forward(x, (keep_attention && last) ? &out.last_attention : nullptr);
        out.intermediates.push_back(x);
    }
    out.tokens = norm_(x);
    return out;
}

MaeDecoderImpl::MaeDecoderImpl(DecoderConfig cfg, const EncoderConfig& encoder)
    : cfg_(std::move(cfg)),
      patch_size_(encoder.patch_size),
      channels_(encoder.channels),
      grid_side_(encoder.grid_side()) {
    cfg_.validate(encoder);
    embed_ = register_module("embed", torch::nn::Linear(encoder.width, cfg_.width));
    init_linear(embed_);
    mask_token_ = register_parameter("mask_token", torch::randn({1, 1, cfg_.width}) * 0.02);
    pos_table_ = register_buffer("pos_table", sincos_position_table(cfg_.width, grid_side_).unsqueeze(0));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg_.depth; ++i) blocks_->push_back(TransformerBlock(cfg_.width, cfg_.heads, cfg_.mlp_ratio));
    norm_ = register_module("norm", layer_norm(cfg_.width));
    pixel_head_ = register_module("pixel_head",
                                  torch::nn::Linear(cfg_.width, patch_size_ * patch_size_ * channels_));
    init_linear(pixel_head_);

    skip_slot_.assign(static_cast<size_t>(cfg_.depth), -1);
    if (!cfg_.msg_enabled) return;
    for (size_t i = 0; i < cfg_.skip_pairs.size(); ++i) {
        torch::nn::Linear proj = register_module("skip_proj_" + std::to_string(i),
                                    torch::nn::Linear(cfg_.width + encoder.width, cfg_.width));
        zero_linear(proj);
        skip_proj_.push_back(proj);
        skip_slot_[static_cast<size_t>(cfg_.skip_pairs[i].second)] = static_cast<int64_t>(i);
    }
    for (size_t k = 1; k < cfg_.scale_heads.size(); ++k) {
        const auto p = cfg_.scale_heads[k] / grid_side_;
        scale_norms_.push_back(register_module("scale_norm_" + std::to_string(k), layer_norm(cfg_.width)));
        torch::nn::Linear proj = register_module("scale_head_" + std::to_string(k), torch::nn::Linear(cfg_.width, p * p * channels_));
        zero_linear(proj);
        scale_proj_.push_back(proj);
    }
}

torch::Tensor MaeDecoderImpl::to_full_grid(const torch::Tensor& visible_tokens, const MaskPlan& plan,
                                           const torch::Tensor& fill) const {
    const auto b = visible_tokens.size(0);
    const auto d = visible_tokens.size(2);
    const auto n = plan.num_patches();
    auto grid = fill.expand({b, n, d});
    auto vis = plan.visible().to(visible_tokens.device()).unsqueeze(-1).expand({b, plan.num_visible(), d});
    grid = grid.scatter(1, vis, visible_tokens.narrow(1, 1, plan.num_visible()));
    return torch::cat({visible_tokens.narrow(1, 0, 1), grid}, 1);
}

ReconstructionBundle MaeDecoderImpl::forward(const torch::Tensor& tokens, const MaskPlan& plan,
                                             const std::vector<torch::Tensor>& intermediates) {
    if (tokens.size(1) != plan.num_visible() + 1) {
        throw ShapeError("decoder expects N_visible+1 tokens, got " + std::to_string(tokens.size(1)));
    }
    if (cfg_.msg_enabled) {
        for (const auto& [e, d] : cfg_.skip_pairs) {
            if (e >= static_cast<int64_t>(intermediates.size()) || !intermediates[e].defined()) {
                throw ShapeError("msg decoder needs encoder intermediate " + std::to_string(e) + " for decoder layer " +
                                 std::to_string(d));
            }
        }
    }
    ReconstructionBundle out;
    out.decoder_input_tokens = embed_(tokens);
    auto x = to_full_grid(out.decoder_input_tokens, plan, mask_token_) + pos_table_;

    const auto n_scales = static_cast<int64_t>(cfg_.msg_enabled ? cfg_.scale_heads.size() : 0);
    std::vector<torch::Tensor> taps(static_cast<size_t>(std::max<int64_t>(n_scales, 1)));
    for (int64_t layer = 0; layer < cfg_.depth; ++layer) {
        const auto slot = skip_slot_[static_cast<size_t>(layer)];
        if (slot >= 0) {
            const auto& src = intermediates[static_cast<size_t>(cfg_.skip_pairs[slot].first)];
            auto zeros = torch::zeros({1, 1, src.size(2)}, src.options());
            auto skip = to_full_grid(src, plan, zeros);
            x = x + skip_proj_[slot](torch::cat({x, skip}, -1));
        }
        x = blocks_[layer]->as<TransformerBlock>()->forward(x);
        for (int64_t k = 1; k < n_scales; ++k) {
            if (std::max<int64_t>(0, cfg_.depth - 1 - k) == layer) taps[k] = x;
        }
    }
    auto pixels = pixel_head_(norm_(x)).narrow(1, 1, plan.num_patches());
    out.full = unpatchify({pixels, patch_size_, channels_, {grid_side_, grid_side_}});
    if (n_scales > 0) {
        out.pyramid.push_back(out.full);
        for (int64_t k = 1; k < n_scales; ++k) {
            const auto p = cfg_.scale_heads[k] / grid_side_;
            auto y = scale_proj_[k - 1](scale_norms_[k - 1](taps[k])).narrow(1, 1, plan.num_patches());
            out.pyramid.push_back(unpatchify({y, p, channels_, {grid_side_, grid_side_}}));
        }
    }
    return out;
}

MaskedAutoencoderImpl::MaskedAutoencoderImpl(EncoderConfig enc, DecoderConfig dec) {
    encoder = register_module("encoder", ViTEncoder(enc));
    decoder = register_module("decoder", MaeDecoder(std::move(dec), enc));
}

ReconstructionBundle MaskedAutoencoderImpl::forward(const ImageBatch& images, const MaskPlan& plan) {
    auto enc = encoder->forward(images, plan);
    return decoder->forward(enc.tokens, plan, enc.intermediates);
}

ReconstructionBundle decode(MaeDecoder& decoder, const torch::Tensor& tokens, const MaskPlan& plan,
                            const std::vector<torch::Tensor>& intermediates) {
    return decoder->forward(tokens, plan, intermediates);
}

torch::Tensor AttentionMaps::cls_grid() const {
    const auto n = cls_row.size(2);
    const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) throw ShapeError("CLS attention row is not a square grid");
    return cls_row.reshape({cls_row.size(0), cls_row.size(1), side, side});
}

AttentionMaps extract_cls_attention(ViTEncoder& encoder, const ImageBatch& images) {
    torch::NoGradGuard no_grad;
    auto plan = MaskPlan::none(images.size(0), encoder->config().num_patches());
    auto out = encoder->forward(images, plan, true);
    AttentionMaps maps;
    maps.weights = out.last_attention;
    maps.cls_row = out.last_attention.select(2, 0).narrow(2, 1, plan.num_patches());
    return maps;
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const torch::Tensor& t) {
        auto c = t.detach().contiguous().cpu();
        const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
        const auto n = c.numel() * static_cast<int64_t>(c.element_size());
        for (int64_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& p : module.named_parameters()) mix(p.value());
    for (const auto& b : module.named_buffers()) mix(b.value());
    return h;
}

} // namespace pmae
