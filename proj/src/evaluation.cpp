#include "pmae/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "pmae/checkpoint.hpp"
#include "pmae/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pmae {

namespace {

constexpr uint64_t kDefaultEmbedderSeed = 20240917;
const std::vector<int64_t> kDefaultEmbedderWidths{32, 64, 128};

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
    if (!a.sizes().equals(b.sizes())) {
        std::ostringstream os;
        os << op << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
        throw ShapeError(os.str());
    }
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

const char* source_name(EmbeddingSource s) {
    switch (s) {
        case EmbeddingSource::discriminator: return "discriminator";
        case EmbeddingSource::external: return "external";
        case EmbeddingSource::file: return "file";
    }
    return "external";
}

// Symmetric PSD square root through an eigendecomposition.
torch::Tensor sqrtm_psd(const torch::Tensor& m) {
    auto [evals, evecs] = torch::linalg_eigh(0.5 * (m + m.t()));
    return evecs.matmul(torch::diag(evals.clamp_min(0.0).sqrt())).matmul(evecs.t());
}

} // namespace

double psnr(const ImageBatch& pred, const ImageBatch& target, double max_value) {
    require_same_shape(pred, target, "psnr");
    const double mse = (pred.to(torch::kFloat64) - target.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(max_value * max_value / mse));
}

double ssim_index(const ImageBatch& pred, const ImageBatch& target, double dynamic_range) {
    require_same_shape(pred, target, "ssim_index");
    const auto window = std::min<int64_t>({7, pred.size(2), pred.size(3)});
    return ssim_map(pred.to(torch::kFloat64), target.to(torch::kFloat64), {window, dynamic_range})
        .mean()
        .item<double>();
}

void save_embeddings(const fs::path& dir, const EmbeddingSet& set) {
    ArrayBundle bundle;
    bundle.metadata = {{"kind", "embeddings"}, {"source", source_name(set.source)}};
    bundle.arrays.push_back({"vectors", set.vectors.to(torch::kFloat64).contiguous()});
    save_bundle(dir, bundle);
}

EmbeddingSet load_embeddings(const fs::path& dir) {
    auto bundle = load_bundle(dir);
    if (bundle.metadata.value("kind", "") != "embeddings") throw IoError(dir.string() + " does not hold embeddings");
    return {bundle.at("vectors").to(torch::kFloat64), EmbeddingSource::file};
}

double compute_fid(const EmbeddingSet& a, const EmbeddingSet& b) {
    if (a.vectors.dim() != 2 || b.vectors.dim() != 2 || a.vectors.size(1) != b.vectors.size(1)) {
        throw ShapeError("compute_fid: embedding sets must be M×d with the same d");
    }
    if (a.vectors.size(0) < 2 || b.vectors.size(0) < 2) throw ShapeError("compute_fid: need at least 2 vectors per set");
    const auto d = a.vectors.size(1);
    auto stats = [&](const torch::Tensor& v) {
        auto x = v.to(torch::kFloat64);
        auto mu = x.mean(0);
        auto c = x - mu;
        auto cov = c.t().matmul(c) / static_cast<double>(x.size(0) - 1);
        if (x.size(0) < d + 1) {
            TORCH_WARN("compute_fid: ", x.size(0), " vectors for dimension ", d,
                       "; covariance regularized with 1e-6*I");
            cov = cov + 1e-6 * torch::eye(d, torch::kFloat64);
        }
        return std::make_pair(mu, cov);
    };
    const auto [mu_a, cov_a] = stats(a.vectors);
    const auto [mu_b, cov_b] = stats(b.vectors);
    const auto root_a = sqrtm_psd(cov_a);
    const auto cross = sqrtm_psd(root_a.matmul(cov_b).matmul(root_a));
    const double fid = (mu_a - mu_b).pow(2).sum().item<double>() +
                       (cov_a.trace() + cov_b.trace() - 2.0 * cross.trace()).item<double>();
    return std::max(0.0, fid);
}

std::pair<double, double> compute_is(const torch::Tensor& probs, int64_t splits) {
    if (probs.dim() != 2) throw ShapeError("compute_is: probabilities must be M×K");
    if (splits < 1 || probs.size(0) < splits) throw ConfigError("compute_is: need 1 <= splits <= rows");
    auto p = probs.to(torch::kFloat64);
    if (p.lt(0).any().item<bool>() || (p.sum(1) - 1.0).abs().gt(1e-5).any().item<bool>()) {
        throw ConfigError("compute_is: rows must be non-negative and sum to 1");
    }
    const auto m = p.size(0);
    std::vector<double> scores;
    for (int64_t s = 0; s < splits; ++s) {
        const auto begin = s * m / splits;
        const auto end = (s + 1) * m / splits;
        auto part = p.narrow(0, begin, end - begin);
        auto marginal = part.mean(0, true);
        // 0·log 0 contributes nothing.
        auto terms = torch::where(part > 0, part * (part.clamp_min(1e-300).log() - marginal.clamp_min(1e-300).log()),
                                  torch::zeros_like(part));
        scores.push_back(std::exp(terms.sum(1).mean().item<double>()));
    }
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    return {mean, std::sqrt(var / static_cast<double>(scores.size()))};
}

Embedder::Embedder(LossNetwork net, EmbeddingSource source, std::string id)
    : net_(std::move(net)), source_(source), id_(std::move(id)) {}

Embedder Embedder::default_embedder() {
    auto net = make_random_loss_network(3, kDefaultEmbedderWidths, kDefaultEmbedderSeed);
    auto ln = LossNetwork::external(net, {});
    return Embedder(ln, EmbeddingSource::external,
                    "default-conv32-64-128:seed" + std::to_string(kDefaultEmbedderSeed) + ":" + hex(ln.checksum()));
}

Embedder Embedder::from_spec(const LossNetworkSpec& spec, Discriminator d) {
    if (spec.kind == LossNetworkKind::discriminator) {
        if (!d) throw ConfigError("discriminator embedder requested but the checkpoint has no discriminator");
        auto ln = LossNetwork::from_discriminator(d, spec.layer_taps);
        return Embedder(ln, EmbeddingSource::discriminator, "discriminator:" + hex(ln.checksum()));
    }
    if (!spec.weights_path) return default_embedder();
    auto ln = LossNetwork::external(spec);
    return Embedder(ln, EmbeddingSource::external,
                    "external:" + spec.weights_path->filename().string() + ":" + hex(ln.checksum()));
}

EmbeddingSet Embedder::embed(const ImageBatch& images01, int64_t batch_size) const {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < images01.size(0); i += batch_size) {
        const auto len = std::min(batch_size, images01.size(0) - i);
        auto x = images01.narrow(0, i, len) * 2.0 - 1.0;
        auto features = net_.extract(x);
        out.push_back(features.layers.back().mean({2, 3}).to(torch::kFloat64));
    }
    return {torch::cat(out, 0), source_};
}

torch::Tensor Embedder::class_probs(const EmbeddingSet& set, const EmbeddingSet& reference) const {
    const auto mean = reference.vectors.mean(0, true);
    const auto stdev = reference.vectors.size(0) > 1 ? reference.vectors.std(0, true, true) + 1e-8
                                                     : torch::ones_like(mean);
    return torch::softmax((set.vectors - mean) / stdev, 1);
}

json MetricsReport::to_json() const {
    return {{"l1", l1},          {"psnr", psnr},       {"ssim", ssim},
            {"is_mean", is_mean}, {"is_std", is_std}, {"fid", fid},
            {"sample_count", sample_count}, {"embedder_id", embedder_id}};
}

std::string MetricsReport::table() const {
    char is[64];
    std::snprintf(is, sizeof is, "%.3f +/- %.3f", is_mean, is_std);
    char row[256];
    std::snprintf(row, sizeof row, "%10.5f | %8.3f | %8.5f | %17s | %10.5f", l1, psnr, ssim, is, fid);
    std::ostringstream os;
    os << "        L1 |     PSNR |     SSIM |                IS |        FID\n";
    os << "-----------+----------+----------+-------------------+-----------\n";
    os << row << "\n";
    os << "samples: " << sample_count << ", embedder: " << embedder_id << "\n";
    return os.str();
}

Reconstructor identity_reconstructor() {
    return [](const ImageBatch& images, const MaskPlan&) { return images; };
}

Reconstructor model_reconstructor(const LoadedModel& model) {
    auto generator = model.generator;
    const bool norm_pix = model.config.loss.norm_pix_target;
    const auto patch = model.config.encoder.patch_size;
    return [generator, norm_pix, patch](const ImageBatch& images, const MaskPlan& plan) mutable {
        torch::NoGradGuard no_grad;
        generator->eval();
        auto full = generator->forward(images, plan).full;
        if (!norm_pix) return full;
        auto pred = patchify(full, patch);
        const auto ref = patchify(images, patch).tokens;
        auto mean = ref.mean(-1, true);
        auto var = ref.var(-1, false, true);
        pred.tokens = pred.tokens * (var + 1e-6).sqrt() + mean;
        return unpatchify(pred);
    };
}

MaskPlan eval_mask(int64_t batch, int64_t num_patches, double ratio, uint64_t seed, int64_t batch_index) {
    auto rng = derive_rng(seed, RngStream::eval_mask, static_cast<std::uint64_t>(batch_index));
    return sample_mask(batch, num_patches, ratio, rng);
}

MetricsReport evaluate_reconstruction(const Reconstructor& model, const DatasetHandle& dataset,
                                      const Normalization& norm, const Embedder& embedder,
                                      const EvalOptions& opts) {
    const auto n = dataset.size();
    if (n == 0) throw ConfigError("evaluate_reconstruction: empty dataset");
    const auto side = dataset.image_size() / opts.patch_size;
    std::vector<torch::Tensor> recon;
    for (int64_t i = 0, bi = 0; i < n; i += opts.batch_size, ++bi) {
        const auto len = std::min(opts.batch_size, n - i);
        const auto originals = dataset.images().narrow(0, i, len);
        const auto plan = eval_mask(len, side * side, opts.mask_ratio, opts.mask_seed, bi);
        auto pred = model(normalize(originals, norm), plan);
        recon.push_back(denormalize(pred, norm).clamp(0.0, 1.0).to(torch::kFloat32));
    }
    const auto pred = torch::cat(recon, 0);
    const auto target = denormalize(normalize(dataset.images(), norm), norm).clamp(0.0, 1.0);

    MetricsReport r;
    r.sample_count = n;
    r.l1 = (pred.to(torch::kFloat64) - target.to(torch::kFloat64)).abs().mean().item<double>();
    r.psnr = psnr(pred, target, 1.0);
    r.ssim = ssim_index(pred, target, 1.0);
    const auto real = embedder.embed(target);
    const auto fake = embedder.embed(pred);
    r.fid = compute_fid(real, fake);
    const auto splits = std::min<int64_t>(opts.is_splits, n);
    std::tie(r.is_mean, r.is_std) = compute_is(embedder.class_probs(fake, real), splits);
    r.embedder_id = embedder.id();
    return r;
}

MetricsReport evaluate_reconstruction(const fs::path& checkpoint, const DatasetHandle& dataset,
                                      const Embedder& embedder, EvalOptions opts) {
    const auto model = load_model(checkpoint);
    opts.patch_size = model.config.encoder.patch_size;
    opts.mask_ratio = model.config.mask_ratio;
    return evaluate_reconstruction(model_reconstructor(model), dataset, model.config.data.augment.normalization,
                                   embedder, opts);
}

ImageBatch masked_panel(const ImageBatch& images01, const MaskPlan& plan, int64_t patch_size) {
    const auto side = images01.size(2) / patch_size;
    const auto m = pixel_mask(plan, {side, side}, patch_size).to(images01.dtype());
    return images01 * (1.0 - m) + 0.5 * m;
}

torch::Tensor attention_heatmaps(ViTEncoder& encoder, const ImageBatch& normalized, int64_t image_size) {
    torch::NoGradGuard no_grad;
    auto maps = extract_cls_attention(encoder, normalized).cls_grid();
    maps = torch::nn::functional::interpolate(
        maps, torch::nn::functional::InterpolateFuncOptions()
                  .size(std::vector<int64_t>{image_size, image_size})
                  .mode(torch::kNearest));
    const auto flat = maps.flatten(2);
    const auto lo = std::get<0>(flat.min(2, true)).unsqueeze(-1);
    const auto hi = std::get<0>(flat.max(2, true)).unsqueeze(-1);
    return (maps - lo) / (hi - lo).clamp_min(1e-12);
}

std::vector<fs::path> render_outputs(const LoadedModel& model, const ImageBatch& images01, const fs::path& out_dir,
                                     uint64_t mask_seed) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    const auto& cfg = model.config;
    const auto& norm = cfg.data.augment.normalization;
    const auto b = images01.size(0);
    const auto s = images01.size(2);
    const auto plan = eval_mask(b, cfg.encoder.num_patches(), cfg.mask_ratio, mask_seed, 0);
    const auto x = normalize(images01, norm);
    const auto recon = denormalize(model_reconstructor(model)(x, plan), norm).clamp(0.0, 1.0);
    const auto masked = masked_panel(images01, plan, cfg.encoder.patch_size);
    auto encoder = model.generator->encoder;
    const auto heat = attention_heatmaps(encoder, x, s);

    const auto gap = torch::ones({3, s, 1});
    std::vector<fs::path> grids;
    std::vector<fs::path> attention;
    for (int64_t i = 0; i < b; ++i) {
        auto grid = torch::cat({images01[i], gap, masked[i], gap, recon[i]}, 2);
        grids.push_back(out_dir / ("recon_" + std::to_string(i) + ".png"));
        write_image(grids.back(), grid);
        std::vector<torch::Tensor> heads;
        for (int64_t h = 0; h < heat.size(1); ++h) {
            if (h > 0) heads.push_back(torch::ones({1, s, 1}));
            heads.push_back(heat[i][h].unsqueeze(0));
        }
        attention.push_back(out_dir / ("attention_" + std::to_string(i) + ".png"));
        write_image(attention.back(), torch::cat(heads, 2));
    }
    grids.insert(grids.end(), attention.begin(), attention.end());
    return grids;
}

} // namespace pmae
