#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "pmae/patching.hpp"

namespace pmae {

struct EncoderConfig {
    int64_t depth = 4;
    int64_t width = 192;
    int64_t heads = 3;
    int64_t patch_size = 4;
    int64_t image_size = 32;
    int64_t channels = 3;
    double mlp_ratio = 4.0;

    int64_t grid_side() const { return image_size / patch_size; }
    int64_t num_patches() const { return grid_side() * grid_side(); }
    void validate() const;

    // "vit-tiny" (depth 4, width 192) or "vit-b" (depth 12, width 768).
    static EncoderConfig preset(const std::string& name, int64_t image_size, int64_t patch_size);
};

// (encoder layer index, decoder layer index); the skip feeds the input of that decoder block.
using SkipPair = std::pair<int64_t, int64_t>;

struct DecoderConfig {
    int64_t depth = 4;
    int64_t width = 128;
    int64_t heads = 4;
    double mlp_ratio = 4.0;
    bool msg_enabled = false;
    std::vector<SkipPair> skip_pairs;
    std::vector<int64_t> scale_heads;  // output resolutions, finest first

    void validate(const EncoderConfig& encoder) const;
};

// Evenly spaced encoder layers (excluding the last one, which already feeds the
// decoder through the main path) mapped in order onto evenly spaced decoder layers.
std::vector<SkipPair> default_skip_pairs(int64_t encoder_depth, int64_t decoder_depth);

// [S, S/2, ...] down to the patch grid side, at most `levels` entries.
std::vector<int64_t> default_scale_heads(int64_t image_size, int64_t grid_side, int64_t levels = 3);

// Fixed 2-D sine-cosine position table, (1 + grid²)×dim with a zero row for [CLS].
torch::Tensor sincos_position_table(int64_t dim, int64_t grid_side);

class MultiHeadAttentionImpl : public torch::nn::Module {
public:
    MultiHeadAttentionImpl(int64_t dim, int64_t heads);
    // Returns the output and, when requested, the B×heads×T×T attention weights.
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, bool keep_weights = false);

private:
    int64_t heads_;
    double scale_;
    torch::nn::Linear qkv_{nullptr};
    torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

// Pre-norm transformer block.
class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(int64_t dim, int64_t heads, double mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x, torch::Tensor* attention = nullptr);

private:
    torch::nn::LayerNorm norm1_{nullptr};
    MultiHeadAttention attn_{nullptr};
    torch::nn::LayerNorm norm2_{nullptr};
    torch::nn::Linear fc1_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

struct EncoderOutput {
    torch::Tensor tokens;                     // B×(N_visible+1)×width, [CLS] first, final norm applied
    std::vector<torch::Tensor> intermediates; // one B×(N_visible+1)×width entry per block
    torch::Tensor last_attention;             // B×heads×T×T when requested
};

class ViTEncoderImpl : public torch::nn::Module {
public:
    explicit ViTEncoderImpl(EncoderConfig cfg);
    EncoderOutput forward(const ImageBatch& images, const MaskPlan& plan, bool keep_attention = false);
    const EncoderConfig& config() const { return cfg_; }

private:
    EncoderConfig cfg_;
    torch::nn::Linear patch_embed_{nullptr};
    torch::Tensor cls_token_;
    torch::Tensor pos_table_;
    torch::nn::ModuleList blocks_;
    torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(ViTEncoder);

struct ReconstructionBundle {
    ImageBatch full;
    std::vector<ImageBatch> pyramid;     // empty unless msg is enabled; pyramid[0] is `full`
    torch::Tensor decoder_input_tokens;  // B×(N_visible+1)×decoder width
};

class MaeDecoderImpl : public torch::nn::Module {
public:
    MaeDecoderImpl(DecoderConfig cfg, const EncoderConfig& encoder);

    /// Inserts mask tokens at masked positions, runs the decoder blocks, and
    /// emits the full-resolution prediction plus one image per extra scale head.
    /// Skip features are scattered onto the full grid (zeros at masked slots),
    /// concatenated with the running stream and projected back to decoder width
    /// as a residual, so zero-initialized projections leave the stream untouched.
    ReconstructionBundle forward(const torch::Tensor& tokens, const MaskPlan& plan,
                                 const std::vector<torch::Tensor>& intermediates);

    const DecoderConfig& config() const { return cfg_; }

    // Zeroed at construction; exposed so tests can perturb them.
    std::vector<torch::nn::Linear> skip_projections() const { return skip_proj_; }

private:
    torch::Tensor to_full_grid(const torch::Tensor& visible_tokens, const MaskPlan& plan,
                               const torch::Tensor& fill) const;

    DecoderConfig cfg_;
    int64_t patch_size_;
    int64_t channels_;
    int64_t grid_side_;
    torch::nn::Linear embed_{nullptr};
    torch::Tensor mask_token_;
    torch::Tensor pos_table_;
    torch::nn::ModuleList blocks_;
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear pixel_head_{nullptr};
    std::vector<torch::nn::Linear> skip_proj_;
    std::vector<int64_t> skip_slot_;  // decoder layer -> index into skip_proj_ (or -1)
    std::vector<torch::nn::LayerNorm> scale_norms_;
    std::vector<torch::nn::Linear> scale_proj_;
};
TORCH_MODULE(MaeDecoder);

/// Encoder + decoder. `forward` runs both; the pieces are usable separately.
class MaskedAutoencoderImpl : public torch::nn::Module {
public:
    MaskedAutoencoderImpl(EncoderConfig encoder, DecoderConfig decoder);

    ReconstructionBundle forward(const ImageBatch& images, const MaskPlan& plan);

    ViTEncoder encoder{nullptr};
    MaeDecoder decoder{nullptr};
};
TORCH_MODULE(MaskedAutoencoder);

ReconstructionBundle decode(MaeDecoder& decoder, const torch::Tensor& tokens, const MaskPlan& plan,
                            const std::vector<torch::Tensor>& intermediates);

struct AttentionMaps {
    torch::Tensor weights;  // B×heads×(N+1)×(N+1), last encoder layer
    torch::Tensor cls_row;  // B×heads×N, [CLS] query over patch keys

    // B×heads×grid×grid view of cls_row.
    torch::Tensor cls_grid() const;
};

AttentionMaps extract_cls_attention(ViTEncoder& encoder, const ImageBatch& images);

// FNV-1a over all parameter bytes; used to assert parameters were not touched.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

} // namespace pmae
