#include "pmae/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "pmae/error.hpp"

namespace fs = std::filesystem;

namespace pmae {

void OptimizerConfig::validate(int64_t total_epochs) const {
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw ConfigError("optimizer.beta1/beta2 must lie in (0, 1)");
    }
    if (!(warmup_epochs >= 0.0) || warmup_epochs > static_cast<double>(total_epochs)) {
        throw ConfigError("optimizer.warmup_epochs must lie in [0, epochs]");
    }
    if (batch_size <= 0) throw ConfigError("optimizer.batch_size must be positive");
}

namespace {

// Reads one YAML mapping, rejecting keys outside `allowed` and naming the full
// dotted path in every error.
class MapReader {
public:
    MapReader(YAML::Node node, std::string path, std::set<std::string> allowed)
        : node_(std::move(node)), path_(std::move(path)), allowed_(std::move(allowed)) {
        if (!node_ || node_.IsNull()) return;
        if (!node_.IsMap()) throw ConfigError(label() + " must be a mapping");
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (!allowed_.count(key)) throw ConfigError("unknown config key '" + join(key) + "'");
        }
    }

    bool has(const std::string& key) const { return node_ && node_.IsMap() && node_[key]; }

    template <typename T>
    void get(const std::string& key, T& out) const {
        if (!has(key)) return;
        try {
            out = node_[key].as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError("config key '" + join(key) + "' has the wrong type");
        }
    }

    void get_array3(const std::string& key, std::array<double, 3>& out) const {
        if (!has(key)) return;
        std::vector<double> v;
        get(key, v);
        if (v.size() != 3) throw ConfigError("config key '" + join(key) + "' needs 3 values");
        std::copy(v.begin(), v.end(), out.begin());
    }

    void get_array2(const std::string& key, std::array<double, 2>& out) const {
        if (!has(key)) return;
        std::vector<double> v;
        get(key, v);
        if (v.size() != 2) throw ConfigError("config key '" + join(key) + "' needs 2 values");
        out = {v[0], v[1]};
    }

    MapReader child(const std::string& key, std::set<std::string> allowed) const {
        return MapReader(has(key) ? node_[key] : YAML::Node(), join(key), std::move(allowed));
    }

private:
    std::string label() const { return path_.empty() ? "config root" : "'" + path_ + "'"; }
    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    YAML::Node node_;
    std::string path_;
    std::set<std::string> allowed_;
};

} // namespace

void RunConfig::resolve() {
    encoder.image_size = data.image_size;
    encoder.validate();
    decoder.msg_enabled = msg_enabled;
    if (msg_enabled) {
        if (decoder.scale_heads.empty()) decoder.scale_heads = default_scale_heads(data.image_size, encoder.grid_side());
        if (auto_skip_pairs) decoder.skip_pairs = default_skip_pairs(encoder.depth, decoder.depth);
    }
    auto& d = adversarial.discriminator;
    d.image_size = data.image_size;
    d.channels = encoder.channels;
    d.multi_scale = msg_enabled;
    d.input_resolutions = msg_enabled ? decoder.scale_heads : std::vector<int64_t>{};
    if (msg_enabled && d.num_blocks < static_cast<int64_t>(d.input_resolutions.size())) {
        d.num_blocks = static_cast<int64_t>(d.input_resolutions.size());
    }
}

void RunConfig::validate() const {
    if (epochs <= 0) throw ConfigError("epochs must be positive");
    if (threads <= 0) throw ConfigError("threads must be positive");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0, 1)");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (data.image_size <= 0) throw ConfigError("data.image_size must be positive");
    data.augment.validate();
    encoder.validate();
    if (encoder.image_size != data.image_size) throw ConfigError("encoder image size differs from data.image_size");
    decoder.validate(encoder);
    if (decoder.msg_enabled != msg_enabled) throw ConfigError("decoder.msg_enabled differs from msg_enabled");
    loss.weights.validate();
    optimizer.validate(epochs);
    if (variant == ObjectiveVariant::ms_ssim_l1) {
        const int64_t min_side = (int64_t{1} << (loss.ssim_scales - 1)) * 3;
        if (loss.ssim_scales < 1 || data.image_size < min_side) {
            throw ConfigError("loss.ssim_scales=" + std::to_string(loss.ssim_scales) + " needs images of at least " +
                              std::to_string(min_side) + " pixels");
        }
    }
    if (variant == ObjectiveVariant::loss_network_perceptual) {
        if (loss.network.kind != LossNetworkKind::external || !loss.network.weights_path) {
            throw ConfigError("variant=loss_network_perceptual requires loss.network.kind=external with weights_path");
        }
    }
    if (needs_discriminator(variant)) {
        adversarial.discriminator.validate();
        if (adversarial.ada_enabled) adversarial.ada.validate();
        if (adversarial.path_length_enabled) adversarial.path_length.validate();
        if (adversarial.lr < 0.0) throw ConfigError("discriminator.lr must be >= 0");
    } else if (adversarial.ada_enabled || adversarial.path_length_enabled) {
        throw ConfigError("discriminator.ada / discriminator.path_length require variant=gan_perceptual");
    }
}

RunConfig run_config_from_yaml(const YAML::Node& root) {
    RunConfig cfg;
    MapReader top(root, "",
                  {"variant", "msg_enabled", "epochs", "seed", "threads", "mask_ratio", "checkpoint_every", "data",
                   "encoder", "decoder", "loss", "optimizer", "discriminator"});
    std::string variant = to_string(cfg.variant);
    top.get("variant", variant);
    cfg.variant = objective_from_string(variant);
    top.get("msg_enabled", cfg.msg_enabled);
    top.get("epochs", cfg.epochs);
    top.get("seed", cfg.seed);
    top.get("threads", cfg.threads);
    top.get("mask_ratio", cfg.mask_ratio);
    top.get("checkpoint_every", cfg.checkpoint_every);

    auto data = top.child("data", {"root", "image_size", "limit", "normalization", "augment"});
    data.get("root", cfg.data.root);
    data.get("image_size", cfg.data.image_size);
    data.get("limit", cfg.data.limit);
    auto norm = data.child("normalization", {"mean", "std"});
    norm.get_array3("mean", cfg.data.augment.normalization.mean);
    norm.get_array3("std", cfg.data.augment.normalization.std);
    auto aug = data.child("augment", {"crop_enabled", "crop_scale", "crop_ratio", "flip_prob"});
    aug.get("crop_enabled", cfg.data.augment.crop_enabled);
    aug.get_array2("crop_scale", cfg.data.augment.crop_scale);
    aug.get_array2("crop_ratio", cfg.data.augment.crop_ratio);
    aug.get("flip_prob", cfg.data.augment.flip_prob);

    auto enc = top.child("encoder", {"preset", "depth", "width", "heads", "patch_size", "mlp_ratio"});
    enc.get("preset", cfg.encoder_preset);
    int64_t patch = cfg.encoder.patch_size;
    enc.get("patch_size", patch);
    cfg.encoder = EncoderConfig::preset(cfg.encoder_preset, cfg.data.image_size, patch);
    enc.get("depth", cfg.encoder.depth);
    enc.get("width", cfg.encoder.width);
    enc.get("heads", cfg.encoder.heads);
    enc.get("mlp_ratio", cfg.encoder.mlp_ratio);

    auto dec = top.child("decoder", {"depth", "width", "heads", "mlp_ratio", "skip_pairs", "scale_heads"});
    dec.get("depth", cfg.decoder.depth);
    dec.get("width", cfg.decoder.width);
    dec.get("heads", cfg.decoder.heads);
    dec.get("mlp_ratio", cfg.decoder.mlp_ratio);
    if (dec.has("skip_pairs")) {
        std::vector<std::vector<int64_t>> pairs;
        dec.get("skip_pairs", pairs);
        for (const auto& p : pairs) {
            if (p.size() != 2) throw ConfigError("decoder.skip_pairs entries must be [encoder_layer, decoder_layer]");
            cfg.decoder.skip_pairs.emplace_back(p[0], p[1]);
        }
        cfg.auto_skip_pairs = false;
    }
    dec.get("scale_heads", cfg.decoder.scale_heads);

    auto loss = top.child("loss", {"alpha", "delta_f", "delta_s", "perceptual_even_epochs_only", "masked_only",
                                   "norm_pix_target", "ssim_scales", "network"});
    loss.get("alpha", cfg.loss.weights.alpha);
    loss.get("delta_f", cfg.loss.weights.delta_f);
    loss.get("delta_s", cfg.loss.weights.delta_s);
    loss.get("perceptual_even_epochs_only", cfg.loss.weights.perceptual_even_epochs_only);
    loss.get("masked_only", cfg.loss.masked_only);
    loss.get("norm_pix_target", cfg.loss.norm_pix_target);
    loss.get("ssim_scales", cfg.loss.ssim_scales);
    auto net = loss.child("network", {"kind", "taps", "weights_path"});
    std::string kind = "external";
    net.get("kind", kind);
    if (kind == "external") {
        cfg.loss.network.kind = LossNetworkKind::external;
    } else if (kind == "discriminator") {
        cfg.loss.network.kind = LossNetworkKind::discriminator;
    } else {
        throw ConfigError("loss.network.kind must be external or discriminator");
    }
    net.get("taps", cfg.loss.network.layer_taps);
    if (net.has("weights_path")) {
        std::string p;
        net.get("weights_path", p);
        cfg.loss.network.weights_path = p;
    }

    auto opt = top.child("optimizer", {"lr", "weight_decay", "warmup_epochs", "beta1", "beta2", "batch_size"});
    opt.get("lr", cfg.optimizer.lr);
    opt.get("weight_decay", cfg.optimizer.weight_decay);
    opt.get("warmup_epochs", cfg.optimizer.warmup_epochs);
    opt.get("beta1", cfg.optimizer.beta1);
    opt.get("beta2", cfg.optimizer.beta2);
    opt.get("batch_size", cfg.optimizer.batch_size);

    auto disc = top.child("discriminator", {"base_channels", "num_blocks", "max_channels", "lr", "ada", "path_length"});
    disc.get("base_channels", cfg.adversarial.discriminator.base_channels);
    disc.get("num_blocks", cfg.adversarial.discriminator.num_blocks);
    disc.get("max_channels", cfg.adversarial.discriminator.max_channels);
    disc.get("lr", cfg.adversarial.lr);
    auto ada = disc.child("ada", {"enabled", "initial_p", "target", "step", "window", "sign_offset"});
    ada.get("enabled", cfg.adversarial.ada_enabled);
    ada.get("initial_p", cfg.adversarial.ada.p);
    ada.get("target", cfg.adversarial.ada.target);
    ada.get("step", cfg.adversarial.ada.step);
    ada.get("window", cfg.adversarial.ada.window);
    ada.get("sign_offset", cfg.adversarial.ada.sign_offset);
    auto pl = disc.child("path_length", {"enabled", "weight", "decay", "every"});
    pl.get("enabled", cfg.adversarial.path_length_enabled);
    pl.get("weight", cfg.adversarial.path_length.weight);
    pl.get("decay", cfg.adversarial.path_length.decay);
    pl.get("every", cfg.adversarial.path_length.every);

    cfg.resolve();
    cfg.validate();
    return cfg;
}

YAML::Node run_config_to_yaml(const RunConfig& cfg) {
    YAML::Node n;
    n["variant"] = to_string(cfg.variant);
    n["msg_enabled"] = cfg.msg_enabled;
    n["epochs"] = cfg.epochs;
    n["seed"] = cfg.seed;
    n["threads"] = cfg.threads;
    n["mask_ratio"] = cfg.mask_ratio;
    n["checkpoint_every"] = cfg.checkpoint_every;

    auto seq = [](const auto& values) {
        YAML::Node s(YAML::NodeType::Sequence);
        for (const auto& v : values) s.push_back(v);
        s.SetStyle(YAML::EmitterStyle::Flow);
        return s;
    };
    n["data"]["root"] = cfg.data.root;
    n["data"]["image_size"] = cfg.data.image_size;
    n["data"]["limit"] = cfg.data.limit;
    n["data"]["normalization"]["mean"] = seq(cfg.data.augment.normalization.mean);
    n["data"]["normalization"]["std"] = seq(cfg.data.augment.normalization.std);
    n["data"]["augment"]["crop_enabled"] = cfg.data.augment.crop_enabled;
    n["data"]["augment"]["crop_scale"] = seq(cfg.data.augment.crop_scale);
    n["data"]["augment"]["crop_ratio"] = seq(cfg.data.augment.crop_ratio);
    n["data"]["augment"]["flip_prob"] = cfg.data.augment.flip_prob;

    n["encoder"]["preset"] = cfg.encoder_preset;
    n["encoder"]["depth"] = cfg.encoder.depth;
    n["encoder"]["width"] = cfg.encoder.width;
    n["encoder"]["heads"] = cfg.encoder.heads;
    n["encoder"]["patch_size"] = cfg.encoder.patch_size;
    n["encoder"]["mlp_ratio"] = cfg.encoder.mlp_ratio;

    n["decoder"]["depth"] = cfg.decoder.depth;
    n["decoder"]["width"] = cfg.decoder.width;
    n["decoder"]["heads"] = cfg.decoder.heads;
    n["decoder"]["mlp_ratio"] = cfg.decoder.mlp_ratio;
    YAML::Node pairs(YAML::NodeType::Sequence);
    for (const auto& [e, d] : cfg.decoder.skip_pairs) pairs.push_back(seq(std::vector<int64_t>{e, d}));
    pairs.SetStyle(YAML::EmitterStyle::Flow);
    n["decoder"]["skip_pairs"] = pairs;
    n["decoder"]["scale_heads"] = seq(cfg.decoder.scale_heads);

    n["loss"]["alpha"] = cfg.loss.weights.alpha;
    n["loss"]["delta_f"] = cfg.loss.weights.delta_f;
    n["loss"]["delta_s"] = cfg.loss.weights.delta_s;
    n["loss"]["perceptual_even_epochs_only"] = cfg.loss.weights.perceptual_even_epochs_only;
    n["loss"]["masked_only"] = cfg.loss.masked_only;
    n["loss"]["norm_pix_target"] = cfg.loss.norm_pix_target;
    n["loss"]["ssim_scales"] = cfg.loss.ssim_scales;
    n["loss"]["network"]["kind"] = cfg.loss.network.kind == LossNetworkKind::external ? "external" : "discriminator";
    n["loss"]["network"]["taps"] = seq(cfg.loss.network.layer_taps);
    if (cfg.loss.network.weights_path) n["loss"]["network"]["weights_path"] = cfg.loss.network.weights_path->string();

    n["optimizer"]["lr"] = cfg.optimizer.lr;
    n["optimizer"]["weight_decay"] = cfg.optimizer.weight_decay;
    n["optimizer"]["warmup_epochs"] = cfg.optimizer.warmup_epochs;
    n["optimizer"]["beta1"] = cfg.optimizer.beta1;
    n["optimizer"]["beta2"] = cfg.optimizer.beta2;
    n["optimizer"]["batch_size"] = cfg.optimizer.batch_size;

    n["discriminator"]["base_channels"] = cfg.adversarial.discriminator.base_channels;
    n["discriminator"]["num_blocks"] = cfg.adversarial.discriminator.num_blocks;
    n["discriminator"]["max_channels"] = cfg.adversarial.discriminator.max_channels;
    n["discriminator"]["lr"] = cfg.adversarial.lr;
    n["discriminator"]["ada"]["enabled"] = cfg.adversarial.ada_enabled;
    n["discriminator"]["ada"]["initial_p"] = cfg.adversarial.ada.p;
    n["discriminator"]["ada"]["target"] = cfg.adversarial.ada.target;
    n["discriminator"]["ada"]["step"] = cfg.adversarial.ada.step;
    n["discriminator"]["ada"]["window"] = cfg.adversarial.ada.window;
    n["discriminator"]["ada"]["sign_offset"] = cfg.adversarial.ada.sign_offset;
    n["discriminator"]["path_length"]["enabled"] = cfg.adversarial.path_length_enabled;
    n["discriminator"]["path_length"]["weight"] = cfg.adversarial.path_length.weight;
    n["discriminator"]["path_length"]["decay"] = cfg.adversarial.path_length.decay;
    n["discriminator"]["path_length"]["every"] = cfg.adversarial.path_length.every;
    return n;
}

void apply_override(YAML::Node& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' must look like dotted.key=value");
    }
    const auto key = assignment.substr(0, eq);
    const auto value_text = assignment.substr(eq + 1);
    YAML::Node value;
    try {
        value = YAML::Load(value_text);
    } catch (const YAML::Exception& e) {
        throw ConfigError("override '" + assignment + "': cannot parse value: " + e.what());
    }
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) {
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty segment");
        parts.push_back(part);
    }
    // yaml-cpp nodes are handles; walk with fresh handles so assignment rebinds the child, not the parent.
    std::vector<YAML::Node> chain{root};
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        YAML::Node next = chain.back()[parts[i]];
        if (!next || next.IsNull()) {
            chain.back()[parts[i]] = YAML::Node(YAML::NodeType::Map);
            next = chain.back()[parts[i]];
        } else if (!next.IsMap()) {
            throw ConfigError("override key '" + key + "': '" + parts[i] + "' is not a mapping");
        }
        chain.push_back(next);
    }
    chain.back()[parts.back()] = value;
}

RunConfig parse_run_config(const std::string& yaml_text, const std::vector<std::string>& overrides) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("cannot parse config: ") + e.what());
    }
    if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    for (const auto& o : overrides) apply_override(root, o);
    return run_config_from_yaml(root);
}

RunConfig load_run_config(const fs::path& file, const std::vector<std::string>& overrides) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), overrides);
}

namespace {

// Rewrites real-valued scalars in their shortest round-trip form.
void shorten_reals(YAML::Node node) {
    if (node.IsMap()) {
        for (auto it : node) shorten_reals(it.second);
    } else if (node.IsSequence()) {
        for (auto it : node) shorten_reals(it);
    } else if (node.IsScalar()) {
        const auto& text = node.Scalar();
        if (text.find_first_of(".eE") == std::string::npos) return;
        double v = 0.0;
        const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || end != text.data() + text.size()) return;
        char buf[32];
        const auto res = std::to_chars(buf, buf + sizeof buf, v);
        std::string shortest(buf, res.ptr);
        if (shortest.find_first_of(".eEn") == std::string::npos) shortest += ".0";
        node = shortest;
    }
}

} // namespace

std::string run_config_text(const RunConfig& cfg) {
    YAML::Emitter out;
    auto node = run_config_to_yaml(cfg);
    shorten_reals(node);
    out << node;
    return std::string(out.c_str()) + "\n";
}

void save_run_config(const fs::path& file, const RunConfig& cfg) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::trunc);
    out << run_config_text(cfg);
    if (!out) throw IoError("cannot write " + file.string());
}

} // namespace pmae
