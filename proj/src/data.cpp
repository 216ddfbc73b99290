#include "pmae/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <ATen/Parallel.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pmae/error.hpp"

namespace fs = std::filesystem;

namespace pmae {

std::string to_string(Split split) { return split == Split::train ? "train" : "val"; }

Split split_from_string(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    throw ConfigError("unknown split '" + name + "' (expected train or val)");
}

double Normalization::dynamic_range() const {
    double range = 0.0;
    for (double s : std) range = std::max(range, 1.0 / s);
    return range;
}

namespace {

torch::Tensor channel_tensor(const std::array<double, 3>& v, const torch::Tensor& like) {
    return torch::tensor({v[0], v[1], v[2]}, like.options()).reshape({1, 3, 1, 1});
}

} // namespace

ImageBatch normalize(const ImageBatch& images, const Normalization& norm) {
    return (images - channel_tensor(norm.mean, images)) / channel_tensor(norm.std, images);
}

ImageBatch denormalize(const ImageBatch& images, const Normalization& norm) {
    return images * channel_tensor(norm.std, images) + channel_tensor(norm.mean, images);
}

void AugmentPolicy::validate() const {
    if (!(crop_scale[0] > 0.0 && crop_scale[0] <= crop_scale[1] && crop_scale[1] <= 1.0)) {
        throw ConfigError("augment.crop_scale must satisfy 0 < lo <= hi <= 1");
    }
    if (!(crop_ratio[0] > 0.0 && crop_ratio[0] <= crop_ratio[1])) {
        throw ConfigError("augment.crop_ratio must satisfy 0 < lo <= hi");
    }
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("augment.flip_prob must lie in [0, 1]");
    for (double s : normalization.std) {
        if (!(s > 0.0)) throw ConfigError("normalization std must be positive");
    }
}

AugmentPolicy AugmentPolicy::identity(const Normalization& norm) {
    AugmentPolicy p;
    p.crop_enabled = false;
    p.flip_prob = 0.0;
    p.normalization = norm;
    return p;
}

namespace {

// Returns (top, left, height, width) following the usual random-resized-crop sampling.
std::array<int64_t, 4> sample_crop(int64_t h, int64_t w, const AugmentPolicy& policy, Rng& rng) {
    const double area = static_cast<double>(h * w);
    std::uniform_real_distribution<double> scale_dist(policy.crop_scale[0], policy.crop_scale[1]);
    std::uniform_real_distribution<double> log_ratio_dist(std::log(policy.crop_ratio[0]),
                                                          std::log(policy.crop_ratio[1]));
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * scale_dist(rng);
        const double ratio = std::exp(log_ratio_dist(rng));
        const auto cw = static_cast<int64_t>(std::llround(std::sqrt(target * ratio)));
        const auto ch = static_cast<int64_t>(std::llround(std::sqrt(target / ratio)));
        if (cw > 0 && ch > 0 && cw <= w && ch <= h) {
            std::uniform_int_distribution<int64_t> top(0, h - ch);
            std::uniform_int_distribution<int64_t> left(0, w - cw);
            return {top(rng), left(rng), ch, cw};
        }
    }
    // Fallback: centered crop clamped to the ratio bounds.
    const double in_ratio = static_cast<double>(w) / static_cast<double>(h);
    int64_t cw = w;
    int64_t ch = h;
    if (in_ratio < policy.crop_ratio[0]) {
        ch = static_cast<int64_t>(std::llround(static_cast<double>(w) / policy.crop_ratio[0]));
    } else if (in_ratio > policy.crop_ratio[1]) {
        cw = static_cast<int64_t>(std::llround(static_cast<double>(h) * policy.crop_ratio[1]));
    }
    return {(h - ch) / 2, (w - cw) / 2, ch, cw};
}

} // namespace

ImageBatch apply_augment(const ImageBatch& images, const AugmentPolicy& policy, Rng& rng) {
    if (images.dim() != 4) throw ShapeError("apply_augment expects B×C×H×W images");
    const auto b = images.size(0);
    const auto h = images.size(2);
    const auto w = images.size(3);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::vector<torch::Tensor> out;
    out.reserve(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        auto img = images[i].unsqueeze(0);
        if (policy.crop_enabled) {
            const auto [top, left, ch, cw] = sample_crop(h, w, policy, rng);
            img = img.narrow(2, top, ch).narrow(3, left, cw);
            img = torch::nn::functional::interpolate(
                img, torch::nn::functional::InterpolateFuncOptions()
                         .size(std::vector<int64_t>{h, w})
                         .mode(torch::kBilinear)
                         .align_corners(false));
        }
        // Always draw so the stream position does not depend on flip_prob.
        if (coin(rng) < policy.flip_prob) img = img.flip({3});
        out.push_back(img);
    }
    return normalize(torch::cat(out, 0), policy.normalization);
}

std::optional<torch::Tensor> read_image(const fs::path& file, int64_t image_size) {
    cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) return std::nullopt;
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    if (rgb.rows != image_size || rgb.cols != image_size) {
        cv::Mat resized;
        cv::resize(rgb, resized, cv::Size(static_cast<int>(image_size), static_cast<int>(image_size)), 0, 0,
                   cv::INTER_AREA);
        rgb = resized;
    }
    cv::Mat f;
    rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
    auto t = torch::from_blob(f.data, {image_size, image_size, 3}, torch::kFloat32);
    return t.permute({2, 0, 1}).contiguous().clone();
}

void write_image(const fs::path& file, const torch::Tensor& image) {
    if (image.dim() != 3 || (image.size(0) != 3 && image.size(0) != 1)) {
        throw ShapeError("write_image expects a 3×H×W or 1×H×W tensor");
    }
    auto u8 = (image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                  .round()
                  .to(torch::kUInt8)
                  .permute({1, 2, 0})
                  .contiguous();
    const int rows = static_cast<int>(u8.size(0));
    const int cols = static_cast<int>(u8.size(1));
    cv::Mat out;
    if (image.size(0) == 3) {
        cv::Mat rgb(rows, cols, CV_8UC3, u8.data_ptr<uint8_t>());
        cv::cvtColor(rgb, out, cv::COLOR_RGB2BGR);
    } else {
        out = cv::Mat(rows, cols, CV_8UC1, u8.data_ptr<uint8_t>()).clone();
    }
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    if (!cv::imwrite(file.string(), out)) throw IoError("cannot write image " + file.string());
}

namespace {

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> sorted_images(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

} // namespace

DatasetHandle load_dataset(const fs::path& root, Split split, int64_t image_size) {
    if (image_size <= 0) throw ConfigError("image_size must be positive");
    if (!fs::is_directory(root)) throw ConfigError("dataset root does not exist: " + root.string());
    fs::path dir = root;
    if (fs::is_directory(root / to_string(split))) dir = root / to_string(split);

    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) subdirs.push_back(e.path());
    }
    std::sort(subdirs.begin(), subdirs.end());

    std::vector<fs::path> files;
    std::vector<int64_t> labels;
    std::vector<std::string> class_names;
    if (!subdirs.empty()) {
        for (const auto& sub : subdirs) {
            const auto label = static_cast<int64_t>(class_names.size());
            class_names.push_back(sub.filename().string());
            for (auto& f : sorted_images(sub)) {
                files.push_back(f);
                labels.push_back(label);
            }
        }
    } else {
        files = sorted_images(dir);
    }
    if (files.empty()) throw ConfigError("no samples found under " + dir.string());

    std::vector<std::optional<torch::Tensor>> decoded(files.size());
    at::parallel_for(0, static_cast<int64_t>(files.size()), 16, [&](int64_t begin, int64_t end) {
        for (int64_t i = begin; i < end; ++i) decoded[i] = read_image(files[i], image_size);
    });

    DatasetHandle handle;
    handle.root_ = root;
    handle.split_ = split;
    handle.image_size_ = image_size;
    handle.class_names_ = std::move(class_names);
    std::vector<torch::Tensor> kept;
    std::vector<int64_t> kept_labels;
    for (size_t i = 0; i < files.size(); ++i) {
        if (!decoded[i]) {
            TORCH_WARN("skipping unreadable image ", files[i].string());
            continue;
        }
        kept.push_back(*decoded[i]);
        handle.files_.push_back(files[i]);
        if (!labels.empty()) kept_labels.push_back(labels[i]);
    }
    if (kept.empty()) throw ConfigError("no samples found under " + dir.string() + " (all images unreadable)");
    handle.images_ = torch::stack(kept);
    handle.labels_ = handle.labeled() ? torch::tensor(kept_labels, torch::kLong) : torch::Tensor();
    return handle;
}

DatasetHandle DatasetHandle::subset(int64_t count) const {
    DatasetHandle out = *this;
    count = std::min(count, size());
    out.images_ = images_.narrow(0, 0, count);
    if (labels_.defined()) out.labels_ = labels_.narrow(0, 0, count);
    if (!files_.empty()) out.files_.resize(static_cast<size_t>(count));
    return out;
}

DatasetHandle DatasetHandle::from_tensors(torch::Tensor images, torch::Tensor labels,
                                          std::vector<std::string> class_names) {
    if (images.dim() != 4 || images.size(2) != images.size(3)) {
        throw ShapeError("from_tensors expects N×C×S×S images");
    }
    DatasetHandle h;
    h.image_size_ = images.size(2);
    h.images_ = std::move(images);
    h.labels_ = std::move(labels);
    h.class_names_ = std::move(class_names);
    return h;
}

Normalization dataset_statistics(const DatasetHandle& dataset) {
    const auto& x = dataset.images();
    auto mean = x.mean({0, 2, 3});
    auto stdev = x.std({0, 2, 3});
    Normalization n;
    for (int c = 0; c < 3; ++c) {
        n.mean[c] = mean[c].item<double>();
        n.std[c] = std::max(stdev[c].item<double>(), 1e-3);
    }
    return n;
}

std::vector<int64_t> epoch_order(int64_t n, std::uint64_t seed, int64_t epoch, bool shuffle) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) {
        auto rng = derive_rng(seed, RngStream::shuffle, static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);
    }
    return order;
}

Batch make_batch(const DatasetHandle& dataset, const std::vector<int64_t>& indices, const AugmentPolicy& policy,
                 std::uint64_t seed, int64_t epoch) {
    const auto n = static_cast<int64_t>(indices.size());
    std::vector<torch::Tensor> samples(static_cast<size_t>(n));
    at::parallel_for(0, n, 1, [&](int64_t begin, int64_t end) {
        for (int64_t i = begin; i < end; ++i) {
            auto rng = derive_rng(seed, RngStream::augment, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(indices[i]));
            samples[i] = apply_augment(dataset.images()[indices[i]].unsqueeze(0), policy, rng);
        }
    });
    Batch batch;
    batch.images = torch::cat(samples, 0);
    batch.indices = indices;
    if (dataset.labeled()) {
        batch.labels = dataset.labels().index_select(0, torch::tensor(indices, torch::kLong));
    }
    return batch;
}

} // namespace pmae
