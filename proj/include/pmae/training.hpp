#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "pmae/config.hpp"
#include "pmae/data.hpp"

namespace pmae {

// Linear warmup from 0 to lr over warmup_epochs, then half-cosine to 0 at total_epochs.
// `epoch` is fractional (epoch index + fraction of the epoch completed).
double learning_rate(const OptimizerConfig& opt, int64_t total_epochs, double epoch);

/// Models, optimizers and controller state of a pretraining run.
///
/// All randomness is derived from (seed, counters), so restoring the counters
/// together with parameters and optimizer moments reproduces the next step
/// bit for bit.
class TrainState {
public:
    explicit TrainState(RunConfig cfg);

    RunConfig config;
    MaskedAutoencoder generator{nullptr};
    Discriminator discriminator{nullptr};
    std::unique_ptr<torch::optim::AdamW> generator_opt;
    std::unique_ptr<torch::optim::AdamW> discriminator_opt;
    std::optional<LossNetwork> external_loss;
    AdaState ada;
    PathLengthState path_length;

    int64_t epoch = 0;
    int64_t global_step = 0;
    int64_t batch_in_epoch = 0;
    int64_t log_cursor = 0;  // metrics records written so far
};

struct StepRecord {
    int64_t epoch = 0;
    int64_t step = 0;
    double lr = 0.0;
    double ada_p = 0.0;
    std::map<std::string, double> terms;
    std::vector<std::string> skipped;

    nlohmann::json to_json() const;
};

// Per-patch normalized targets (each patch to zero mean, unit variance).
ImageBatch patch_normalized_target(const ImageBatch& images, int64_t patch_size);

/// One optimisation step on a normalized batch: a discriminator step (when
/// the variant has one) on real and generated images, then a generator step
/// with the scheduled objective. `steps_per_epoch` positions the lr schedule.
/// Throws NonFiniteLossError before applying an update computed from a
/// non-finite term.
StepRecord train_step(TrainState& state, const Batch& batch, int64_t steps_per_epoch);

void save_checkpoint(const TrainState& state, const std::filesystem::path& dir);
TrainState load_checkpoint(const std::filesystem::path& dir);

// Generator-only view of a checkpoint (used by probe, fine-tune, eval, render).
struct LoadedModel {
    RunConfig config;
    MaskedAutoencoder generator{nullptr};
    Discriminator discriminator{nullptr};
};
LoadedModel load_model(const std::filesystem::path& dir);

struct PretrainResult {
    std::filesystem::path checkpoint;
    std::filesystem::path metrics_log;
    std::vector<StepRecord> records;
};

/// Runs (or resumes, when `resume` is given) pretraining and writes into out_dir:
/// resolved_config.yaml, metrics.jsonl (one record per step) and checkpoint/.
/// On a non-finite loss the current parameters are saved to last_good/ and the
/// NonFiniteLossError is rethrown.
PretrainResult pretrain(const RunConfig& cfg, const std::filesystem::path& out_dir,
                        const DatasetHandle* dataset = nullptr, const std::filesystem::path* resume = nullptr);

// Mean of a logged term over each epoch (epochs without the term are omitted).
std::map<int64_t, double> epoch_means(const std::vector<StepRecord>& records, const std::string& term);

struct ProbeOptions {
    int64_t epochs = 50;
    int64_t batch_size = 64;
    double lr = 1e-3;
    bool use_cls = false;  // default: mean of patch tokens
    uint64_t seed = 0;
};

struct ProbeResult {
    double accuracy = 0.0;        // on the evaluation set
    double train_accuracy = 0.0;
    std::uint64_t encoder_checksum_before = 0;
    std::uint64_t encoder_checksum_after = 0;
};

// Pooled encoder features with no masking (N×width).
torch::Tensor encoder_features(ViTEncoder& encoder, const DatasetHandle& dataset, const Normalization& norm,
                               bool use_cls, int64_t batch_size = 128);

/// Frozen encoder, one linear layer on standardized pooled features.
/// `eval` defaults to the training set.
ProbeResult linear_probe(ViTEncoder encoder, const DatasetHandle& train, const DatasetHandle* eval,
                         const Normalization& norm, const ProbeOptions& opts);
ProbeResult linear_probe(const std::filesystem::path& checkpoint, const DatasetHandle& train,
                         const DatasetHandle* eval, const ProbeOptions& opts);

struct FinetuneOptions {
    int64_t epochs = 10;
    int64_t batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 0.05;
    double warmup_epochs = 5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    uint64_t seed = 0;
};

/// Encoder plus a LayerNorm + Linear head on the [CLS] token, all trainable.
ProbeResult finetune_classifier(ViTEncoder encoder, const DatasetHandle& train, const DatasetHandle* eval,
                                const Normalization& norm, const FinetuneOptions& opts);
ProbeResult finetune_classifier(const std::filesystem::path& checkpoint, const DatasetHandle& train,
                                const DatasetHandle* eval, const FinetuneOptions& opts);

} // namespace pmae
