#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "pmae/adversarial.hpp"
#include "pmae/backbone.hpp"
#include "pmae/data.hpp"
#include "pmae/loss_network.hpp"
#include "pmae/losses.hpp"

namespace pmae {

struct DataConfig {
    std::string root;
    int64_t image_size = 32;
    int64_t limit = 0;  // 0: use every sample
    AugmentPolicy augment;
};

struct OptimizerConfig {
    double lr = 1.5e-4;
    double weight_decay = 0.05;
    double warmup_epochs = 40;
    double beta1 = 0.9;
    double beta2 = 0.95;
    int64_t batch_size = 16;

    void validate(int64_t total_epochs) const;
};

struct AdversarialConfig {
    DiscriminatorConfig discriminator;
    double lr = 0.0;  // 0: same as optimizer.lr
    bool ada_enabled = false;
    AdaState ada;
    bool path_length_enabled = false;
    PathLengthState path_length;
};

struct LossConfig {
    LossWeights weights;
    bool masked_only = false;      // pixel terms on masked patches only
    bool norm_pix_target = false;  // per-patch normalized reconstruction targets
    int64_t ssim_scales = 4;
    LossNetworkSpec network{LossNetworkKind::external, {}, std::nullopt};
};

/// Everything needed to reproduce a pretraining run.
struct RunConfig {
    ObjectiveVariant variant = ObjectiveVariant::gan_perceptual;
    bool msg_enabled = false;
    int64_t epochs = 20;
    uint64_t seed = 0;
    int64_t threads = 1;
    double mask_ratio = 0.75;
    int64_t checkpoint_every = 0;  // epochs; 0: final checkpoint only

    DataConfig data;
    std::string encoder_preset = "vit-tiny";
    EncoderConfig encoder = EncoderConfig::preset("vit-tiny", 32, 4);
    DecoderConfig decoder;
    LossConfig loss;
    OptimizerConfig optimizer;
    AdversarialConfig adversarial;

    // When set, resolve() replaces decoder.skip_pairs with default_skip_pairs().
    bool auto_skip_pairs = true;

    // Fills derived defaults (skip pairs, scale heads, discriminator taps) and checks
    // cross-field compatibility. Throws ConfigError with the offending key.
    void resolve();
    void validate() const;
};

// Parses a YAML document; unknown keys and mistyped values raise ConfigError.
RunConfig run_config_from_yaml(const YAML::Node& root);
YAML::Node run_config_to_yaml(const RunConfig& cfg);

// "a.b.c=value" with the value parsed as a YAML scalar or flow sequence.
void apply_override(YAML::Node& root, const std::string& assignment);

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});
RunConfig parse_run_config(const std::string& yaml_text, const std::vector<std::string>& overrides = {});
void save_run_config(const std::filesystem::path& file, const RunConfig& cfg);
std::string run_config_text(const RunConfig& cfg);

} // namespace pmae
