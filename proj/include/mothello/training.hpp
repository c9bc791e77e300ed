#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mothello/corpus.hpp"
#include "mothello/language.hpp"
#include "mothello/nnet.hpp"

namespace mothello::nn {

struct TrainConfig {
    int epochs = 1;
    int batch_size = 128;
    double lr = 1e-4;
    int warmup_steps = 100;
    std::string lr_schedule = "constant";  // constant | cosine
    double min_lr_frac = 0.1;
    double clip = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;  // decoupled, applied to all parameters
    int patience = 3;               // early-stopping validation evaluations
    int checkpoints_per_epoch = 1;  // intra-epoch snapshots handed to the sink
    uint64_t seed = 0;
    int jobs = 0;                   // 0 = hardware concurrency
    int log_every = 50;
};

struct MetricsRow {
    int64_t step = 0;
    int epoch = 0;
    std::string split;  // train | validation
    double loss = 0.0;
};

struct CheckpointInfo {
    int epoch = 0;          // 1-based epoch the snapshot belongs to
    double fraction = 0.0;  // progress within the epoch, (0,1]
    int64_t step = 0;
    int ordinal = 0;        // 1-based snapshot index across training
};

using CheckpointSink = std::function<void(const CheckpointInfo&, const Transformer<float>&)>;

struct TrainResult {
    std::vector<MetricsRow> history;
    int checkpoints_emitted = 0;
    int epochs_run = 0;
    bool early_stopped = false;
    double best_validation_loss = std::numeric_limits<double>::quiet_NaN();
    double final_train_loss = 0.0;
};

// Padded batch assembly. Standard mode: next-token targets (last real token
// and pads masked). Unified mode: unified_targets per sequence.
TokenBatch make_standard_batch(const std::vector<const lang::TokenSequence*>& seqs, int max_seq);
TokenBatch make_unified_batch(const std::vector<const lang::TokenSequence*>& seqs, int max_seq,
                              const lang::LanguageFamily& family, const lang::UnifiedOutputMap& map);

// Mini-batch training with Adam (linear warmup, optional cosine decay,
// global-norm clipping). When a validation split is given, the loss is
// evaluated once per epoch; training stops after `patience` evaluations
// without improvement and the best-validation parameters are restored.
// Deterministic for fixed (seed, jobs) on one device. Throws DivergenceError
// on a non-finite loss.
TrainResult train(Transformer<float>& model, const corpus::DatasetSplit& train_split,
                  const corpus::DatasetSplit* validation_split,
                  const lang::LanguageFamily& family, const TrainConfig& cfg,
                  const CheckpointSink& sink = {});

// Mean masked cross entropy of a split under the current parameters.
double evaluate_loss(const Transformer<float>& model, const corpus::DatasetSplit& split,
                     const lang::LanguageFamily& family, int batch_size = 256, int jobs = 0);

void write_train_log(const std::filesystem::path& path, const std::vector<MetricsRow>& history);

// ---- checkpoint container: <base>.bin tensor blob + <base>.json metadata --

struct CheckpointMeta {
    TransformerConfig config;
    std::string family_hash;
    int epoch = 0;
    double fraction = 0.0;
    int64_t step = 0;
    int format_version = 1;
    std::map<std::string, double> metrics;
};

void save_checkpoint(const std::filesystem::path& base, const Transformer<float>& model,
                     const CheckpointMeta& meta);
Transformer<float> load_checkpoint(const std::filesystem::path& base, CheckpointMeta* meta = nullptr);

std::string transformer_config_to_json(const TransformerConfig& cfg);
TransformerConfig transformer_config_from_json(const std::string& text);

}  // namespace mothello::nn
