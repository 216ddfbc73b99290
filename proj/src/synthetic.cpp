#include "pmae/synthetic.hpp"

#include <array>
#include <random>

#include <opencv2/imgproc.hpp>

#include "pmae/error.hpp"

namespace fs = std::filesystem;

namespace pmae {

namespace {

const std::array<const char*, kSyntheticMaxClasses> kNames{"disc",   "square",  "triangle", "ring",  "hstripes",
                                                           "vstripes", "checker", "cross",    "diamond", "dots"};

cv::Scalar random_color(Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 255.0);
    return {u(rng), u(rng), u(rng)};
}

cv::Mat render(int64_t cls, int size, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    cv::Mat img(size, size, CV_8UC3);
    const auto a = random_color(rng);
    const auto b = random_color(rng);
    const bool vertical = u(rng) < 0.5;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double t = static_cast<double>(vertical ? y : x) / (size - 1);
            auto& px = img.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) px[c] = cv::saturate_cast<uchar>(a[c] * (1 - t) + b[c] * t);
        }
    }
    auto fg = random_color(rng);
    // Keep the foreground visibly apart from the background.
    for (int c = 0; c < 3; ++c) {
        if (std::abs(fg[c] - 0.5 * (a[c] + b[c])) < 60) fg[c] = a[c] + b[c] > 255 ? 20 : 235;
    }
    const double s = size;
    const double r = s * (0.18 + 0.14 * u(rng));
    const cv::Point c(static_cast<int>(r + u(rng) * (s - 2 * r)), static_cast<int>(r + u(rng) * (s - 2 * r)));
    const int ri = static_cast<int>(r);
    const int period = std::max(3, static_cast<int>(s / (4 + 4 * u(rng))));
    switch (cls) {
        case 0: cv::circle(img, c, ri, fg, cv::FILLED, cv::LINE_AA); break;
        case 1: cv::rectangle(img, {c.x - ri, c.y - ri}, {c.x + ri, c.y + ri}, fg, cv::FILLED); break;
        case 2: {
            std::vector<cv::Point> pts{{c.x, c.y - ri}, {c.x - ri, c.y + ri}, {c.x + ri, c.y + ri}};
            cv::fillConvexPoly(img, pts, fg, cv::LINE_AA);
            break;
        }
        case 3: cv::circle(img, c, ri, fg, std::max(2, ri / 3), cv::LINE_AA); break;
        case 4:
            for (int y = static_cast<int>(u(rng) * period); y < size; y += period) {
                cv::rectangle(img, {0, y}, {size - 1, y + period / 2 - 1}, fg, cv::FILLED);
            }
            break;
        case 5:
            for (int x = static_cast<int>(u(rng) * period); x < size; x += period) {
                cv::rectangle(img, {x, 0}, {x + period / 2 - 1, size - 1}, fg, cv::FILLED);
            }
            break;
        case 6:
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    if (((x / period) + (y / period)) % 2 == 0) {
                        img.at<cv::Vec3b>(y, x) = cv::Vec3b(cv::saturate_cast<uchar>(fg[0]), cv::saturate_cast<uchar>(fg[1]),
                                                            cv::saturate_cast<uchar>(fg[2]));
                    }
                }
            }
            break;
        case 7: {
            const int t = std::max(2, ri / 3);
            cv::rectangle(img, {c.x - ri, c.y - t / 2}, {c.x + ri, c.y + t / 2}, fg, cv::FILLED);
            cv::rectangle(img, {c.x - t / 2, c.y - ri}, {c.x + t / 2, c.y + ri}, fg, cv::FILLED);
            break;
        }
        case 8: {
            std::vector<cv::Point> pts{{c.x, c.y - ri}, {c.x + ri, c.y}, {c.x, c.y + ri}, {c.x - ri, c.y}};
            cv::fillConvexPoly(img, pts, fg, cv::LINE_AA);
            break;
        }
        default: {
            const int dr = std::max(1, size / 16);
            for (int y = period / 2; y < size; y += period) {
                for (int x = period / 2; x < size; x += period) cv::circle(img, {x, y}, dr, fg, cv::FILLED);
            }
            break;
        }
    }
    // Mild pixel noise.
    std::normal_distribution<double> n(0.0, 6.0);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            auto& px = img.at<cv::Vec3b>(y, x);
            for (int k = 0; k < 3; ++k) px[k] = cv::saturate_cast<uchar>(px[k] + n(rng));
        }
    }
    return img;
}

void check(const SyntheticSpec& spec) {
    if (spec.classes < 1 || spec.classes > kSyntheticMaxClasses) {
        throw ConfigError("synthetic classes must be in [1, " + std::to_string(kSyntheticMaxClasses) + "]");
    }
    if (spec.per_class < 1) throw ConfigError("synthetic per_class must be positive");
    if (spec.image_size < 8) throw ConfigError("synthetic image_size must be at least 8");
}

// Sample i of class k; independent of how many samples are generated overall.
cv::Mat sample(const SyntheticSpec& spec, int64_t k, int64_t i) {
    auto rng = derive_rng(spec.seed, {0x5e7e11cULL, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i)});
    return render(k, static_cast<int>(spec.image_size), rng);
}

} // namespace

std::vector<std::string> synthetic_class_names(int64_t classes) {
    return {kNames.begin(), kNames.begin() + classes};
}

DatasetHandle synthetic_dataset(const SyntheticSpec& spec) {
    check(spec);
    const auto n = spec.classes * spec.per_class;
    const auto s = spec.image_size;
    auto images = torch::empty({n, 3, s, s});
    auto labels = torch::empty({n}, torch::kInt64);
    for (int64_t i = 0; i < spec.per_class; ++i) {
        for (int64_t k = 0; k < spec.classes; ++k) {
            const auto idx = i * spec.classes + k;
            cv::Mat img = sample(spec, k, i);
            auto t = torch::from_blob(img.data, {s, s, 3}, torch::kUInt8).to(torch::kFloat32).div(255.0);
            images[idx].copy_(t.permute({2, 0, 1}).flip(0));  // BGR to RGB
            labels[idx] = k;
        }
    }
    return DatasetHandle::from_tensors(images, labels, synthetic_class_names(spec.classes));
}

int64_t write_synthetic_dataset(const fs::path& root, const SyntheticSpec& spec) {
    check(spec);
    const auto ds = synthetic_dataset(spec);
    const auto names = synthetic_class_names(spec.classes);
    int64_t written = 0;
    for (int64_t idx = 0; idx < ds.size(); ++idx) {
        const auto k = ds.labels()[idx].item<int64_t>();
        char name[32];
        std::snprintf(name, sizeof name, "%06lld.png", static_cast<long long>(idx / spec.classes));
        write_image(root / names[static_cast<size_t>(k)] / name, ds.images()[idx]);
        ++written;
    }
    return written;
}

} // namespace pmae
