#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "pmae/config.hpp"
#include "pmae/synthetic.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("pmae_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Small enough for a CPU step in milliseconds: 16×16 images, 4×4 patches.
inline pmae::RunConfig tiny_config(pmae::ObjectiveVariant variant = pmae::ObjectiveVariant::gan_perceptual,
                                   bool msg = false) {
    pmae::RunConfig cfg;
    cfg.variant = variant;
    cfg.msg_enabled = msg;
    cfg.epochs = 2;
    cfg.seed = 11;
    cfg.data.image_size = 16;
    cfg.data.augment.crop_enabled = false;
    cfg.encoder = {2, 32, 2, 4, 16, 3, 2.0};
    cfg.decoder.depth = 2;
    cfg.decoder.width = 32;
    cfg.decoder.heads = 2;
    cfg.decoder.mlp_ratio = 2.0;
    cfg.loss.ssim_scales = 2;
    cfg.optimizer.warmup_epochs = 1;
    cfg.optimizer.batch_size = 4;
    cfg.optimizer.lr = 1e-3;
    cfg.adversarial.discriminator.base_channels = 8;
    cfg.adversarial.discriminator.num_blocks = 2;
    cfg.adversarial.discriminator.max_channels = 16;
    cfg.resolve();
    cfg.validate();
    return cfg;
}

inline pmae::DatasetHandle tiny_dataset(int64_t classes = 4, int64_t per_class = 4, int64_t size = 16,
                                        uint64_t seed = 5) {
    return pmae::synthetic_dataset({classes, per_class, size, seed});
}

} // namespace testing_support
