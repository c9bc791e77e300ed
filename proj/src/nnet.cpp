#include "mothello/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mothello/util.hpp"

using nlohmann::json;

namespace mothello::nn {

namespace {

struct AdamState {
    std::vector<float> m, v;
    int64_t t = 0;

    explicit AdamState(size_t n) : m(n, 0.0f), v(n, 0.0f) {}
};

void adam_step(nn::AlignedVec<float>& w, const nn::AlignedVec<float>& g, AdamState& st,
               const TrainConfig& cfg, double lr) {
    ++st.t;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    const auto decay = static_cast<float>(lr * cfg.weight_decay);
    for (size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        st.m[i] = static_cast<float>(b1 * st.m[i] + (1.0 - b1) * gi);
        st.v[i] = static_cast<float>(b2 * st.v[i] + (1.0 - b2) * gi * gi);
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps)) + decay * w[i];
    }
}

double clip_gradient(nn::AlignedVec<float>& g, double max_norm) {
    if (max_norm <= 0) return 0.0;
    double sq = 0.0;
    for (float x : g) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const auto scale = static_cast<float>(max_norm / norm);
        for (float& x : g) x *= scale;
    }
    return norm;
}

double schedule_lr(const TrainConfig& cfg, int64_t step, int64_t total_steps) {
    double lr = cfg.lr;
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return lr * static_cast<double>(step + 1) / cfg.warmup_steps;
    if (cfg.lr_schedule == "cosine" && total_steps > cfg.warmup_steps) {
        const double progress = static_cast<double>(step - cfg.warmup_steps) /
                                static_cast<double>(total_steps - cfg.warmup_steps);
        const double floor = cfg.min_lr_frac * lr;
        lr = floor + 0.5 * (lr - floor) * (1.0 + std::cos(3.14159265358979323846 * progress));
    }
    return lr;
}

int resolve_jobs(int jobs) { return jobs > 0 ? jobs : default_jobs(); }

// slices a padded logical batch row-wise for data-parallel workers
TokenBatch slice_batch(const TokenBatch& batch, int b0, int b1) {
    TokenBatch out;
    out.batch = b1 - b0;
    out.seq = batch.seq;
    out.unified = batch.unified;
    const auto begin = static_cast<size_t>(b0) * batch.seq;
    const auto end = static_cast<size_t>(b1) * batch.seq;
    out.tokens.assign(batch.tokens.begin() + begin, batch.tokens.begin() + end);
    if (!batch.targets.empty())
        out.targets.assign(batch.targets.begin() + begin, batch.targets.begin() + end);
    return out;
}

}  // namespace

TokenBatch make_standard_batch(const std::vector<const lang::TokenSequence*>& seqs, int max_seq) {
    TokenBatch batch;
    batch.batch = static_cast<int>(seqs.size());
    int T = 1;
    for (const auto* s : seqs) T = std::max(T, static_cast<int>(s->tokens.size()));
    T = std::min(T, max_seq);
    batch.seq = T;
    batch.tokens.assign(static_cast<size_t>(batch.batch) * T, lang::kPadToken);
    batch.targets.assign(static_cast<size_t>(batch.batch) * T, -1);
    for (int b = 0; b < batch.batch; ++b) {
        const auto& toks = seqs[static_cast<size_t>(b)]->tokens;
        const int len = std::min(static_cast<int>(toks.size()), T);
        for (int t = 0; t < len; ++t) {
            batch.tokens[static_cast<size_t>(b) * T + t] = toks[static_cast<size_t>(t)];
            if (t + 1 < len)
                batch.targets[static_cast<size_t>(b) * T + t] = toks[static_cast<size_t>(t) + 1];
        }
    }
    return batch;
}

TokenBatch make_unified_batch(const std::vector<const lang::TokenSequence*>& seqs, int max_seq,
                              const lang::LanguageFamily& family,
                              const lang::UnifiedOutputMap& map) {
    TokenBatch batch;
    batch.unified = true;
    batch.batch = static_cast<int>(seqs.size());
    int T = 1;
    for (const auto* s : seqs) T = std::max(T, static_cast<int>(s->tokens.size()));
    T = std::min(T, max_seq);
    batch.seq = T;
    batch.tokens.assign(static_cast<size_t>(batch.batch) * T, lang::kPadToken);
    batch.targets.assign(static_cast<size_t>(batch.batch) * T, -1);
    for (int b = 0; b < batch.batch; ++b) {
        const auto& seq = *seqs[static_cast<size_t>(b)];
        const auto targets = lang::unified_targets(seq, family.language(seq.language_id), map);
        const int len = std::min(static_cast<int>(seq.tokens.size()), T);
        for (int t = 0; t < len; ++t) {
            batch.tokens[static_cast<size_t>(b) * T + t] = seq.tokens[static_cast<size_t>(t)];
            batch.targets[static_cast<size_t>(b) * T + t] = targets[static_cast<size_t>(t)];
        }
    }
    return batch;
}

namespace {

TokenBatch assemble(const corpus::DatasetSplit& split, const std::vector<int64_t>& order,
                    size_t i0, size_t i1, const lang::LanguageFamily& family, bool unified,
                    int max_seq) {
    std::vector<const lang::TokenSequence*> seqs;
    seqs.reserve(i1 - i0);
    for (size_t i = i0; i < i1; ++i) {
        const auto& seq = split.sequences[static_cast<size_t>(order[i])];
        if (!seq.tokens.empty()) seqs.push_back(&seq);
    }
    if (seqs.empty()) return {};
    static const auto identity = lang::UnifiedOutputMap::identity();
    return unified ? make_unified_batch(seqs, max_seq, family, identity)
                   : make_standard_batch(seqs, max_seq);
}

// data-parallel loss+grad over one logical batch; workers' gradients are
// reduced in chunk order so results depend only on (batch, jobs)
double forward_backward_sharded(const Transformer<float>& model, const TokenBatch& batch,
                                std::vector<Workspace<float>>& wss,
                                std::vector<AlignedVec<float>>& grads, int jobs) {
    const int64_t active = model.count_active(batch);
    std::vector<double> losses(static_cast<size_t>(jobs), 0.0);
    for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
    parallel_chunks(batch.batch, jobs, [&](int chunk, int64_t b0, int64_t b1) {
        const TokenBatch shard = slice_batch(batch, static_cast<int>(b0), static_cast<int>(b1));
        auto& ws = wss[static_cast<size_t>(chunk)];
        model.forward(ws, shard);
        losses[static_cast<size_t>(chunk)] = model.loss(ws, shard, active);
        model.backward(ws, shard, grads[static_cast<size_t>(chunk)]);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total;
}

}  // namespace

double evaluate_loss(const Transformer<float>& model, const corpus::DatasetSplit& split,
                     const lang::LanguageFamily& family, int batch_size, int jobs) {
    jobs = resolve_jobs(jobs);
    std::vector<int64_t> order(split.sequences.size());
    std::iota(order.begin(), order.end(), 0);
    const int max_seq = model.config().max_seq;

    double total = 0.0;
    int64_t active_total = 0;
    std::vector<Workspace<float>> wss(static_cast<size_t>(jobs));
    for (size_t i0 = 0; i0 < order.size(); i0 += static_cast<size_t>(batch_size)) {
        const size_t i1 = std::min(order.size(), i0 + static_cast<size_t>(batch_size));
        const TokenBatch batch =
            assemble(split, order, i0, i1, family, model.config().unified, max_seq);
        if (batch.batch == 0) continue;
        const int64_t active = model.count_active(batch);
        if (active == 0) continue;
        std::vector<double> losses(static_cast<size_t>(jobs), 0.0);
        parallel_chunks(batch.batch, jobs, [&](int chunk, int64_t b0, int64_t b1) {
            const TokenBatch shard = slice_batch(batch, static_cast<int>(b0), static_cast<int>(b1));
            auto& ws = wss[static_cast<size_t>(chunk)];
            model.forward(ws, shard);
            losses[static_cast<size_t>(chunk)] = model.loss(ws, shard, active);
        });
        double batch_loss = 0.0;
        for (double l : losses) batch_loss += l;
        total += batch_loss * static_cast<double>(active);
        active_total += active;
    }
    return active_total > 0 ? total / static_cast<double>(active_total) : 0.0;
}

TrainResult train(Transformer<float>& model, const corpus::DatasetSplit& train_split,
                  const corpus::DatasetSplit* validation_split,
                  const lang::LanguageFamily& family, const TrainConfig& cfg,
                  const CheckpointSink& sink) {
    if (train_split.sequences.empty()) throw std::invalid_argument("empty training split");
    const int jobs = resolve_jobs(cfg.jobs);
    const int max_seq = model.config().max_seq;
    const bool unified = model.config().unified;

    const int64_t n = static_cast<int64_t>(train_split.sequences.size());
    const int64_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = batches_per_epoch * cfg.epochs;

    std::vector<Workspace<float>> wss(static_cast<size_t>(jobs));
    std::vector<AlignedVec<float>> grads(
        static_cast<size_t>(jobs),
        AlignedVec<float>(static_cast<size_t>(model.num_params()), 0.0f));
    AlignedVec<float> grad(static_cast<size_t>(model.num_params()), 0.0f);
    AdamState adam(static_cast<size_t>(model.num_params()));

    TrainResult result;
    int64_t step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    AlignedVec<float> best_params;
    int evals_since_best = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg.seed, 0x5AFF1E00ULL + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        // intra-epoch snapshot points: after batch ceil(nb*k/cpe), k=1..cpe
        std::vector<int64_t> snap_at;
        for (int k = 1; k <= cfg.checkpoints_per_epoch; ++k)
            snap_at.push_back(std::max<int64_t>(
                1, (batches_per_epoch * k + cfg.checkpoints_per_epoch - 1) /
                       cfg.checkpoints_per_epoch));

        double epoch_loss = 0.0;
        int64_t batch_index = 0;
        for (size_t i0 = 0; i0 < order.size(); i0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t i1 = std::min(order.size(), i0 + static_cast<size_t>(cfg.batch_size));
            const TokenBatch batch = assemble(train_split, order, i0, i1, family, unified, max_seq);
            ++batch_index;
            if (batch.batch == 0) continue;

            const double loss = forward_backward_sharded(model, batch, wss, grads, jobs);
            if (!std::isfinite(loss))
                throw DivergenceError("training loss became non-finite at step " +
                                      std::to_string(step));
            // reduce worker gradients in fixed chunk order
            std::fill(grad.begin(), grad.end(), 0.0f);
            for (const auto& g : grads)
                for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
            clip_gradient(grad, cfg.clip);
            adam_step(model.params(), grad, adam, cfg, schedule_lr(cfg, step, total_steps));

            epoch_loss = loss;
            if (cfg.log_every > 0 && step % cfg.log_every == 0)
                result.history.push_back({step, epoch, "train", loss});
            ++step;

            for (int k = 0; k < cfg.checkpoints_per_epoch; ++k) {
                if (snap_at[static_cast<size_t>(k)] == batch_index) {
                    ++result.checkpoints_emitted;
                    if (sink)
                        sink(CheckpointInfo{epoch,
                                            static_cast<double>(k + 1) / cfg.checkpoints_per_epoch,
                                            step, result.checkpoints_emitted},
                             model);
                }
            }
        }
        result.final_train_loss = epoch_loss;
        result.epochs_run = epoch;

        if (validation_split && !validation_split->sequences.empty()) {
            const double vloss = evaluate_loss(model, *validation_split, family, 256, jobs);
            result.history.push_back({step, epoch, "validation", vloss});
            if (!std::isfinite(vloss)) throw DivergenceError("validation loss became non-finite");
            if (vloss < best_val) {
                best_val = vloss;
                best_params = model.params();
                evals_since_best = 0;
            } else {
                ++evals_since_best;
                if (evals_since_best >= cfg.patience) {
                    result.early_stopped = true;
                    break;
                }
            }
        }
    }

    if (validation_split && !best_params.empty()) {
        model.params() = best_params;
        result.best_validation_loss = best_val;
    }
    return result;
}

void write_train_log(const std::filesystem::path& path, const std::vector<MetricsRow>& history) {
    std::ostringstream out;
    out << "step,epoch,split,loss\n";
    for (const auto& row : history)
        out << row.step << ',' << row.epoch << ',' << row.split << ',' << row.loss << '\n';
    write_text_file(path, out.str());
}

// ---- config / checkpoint serialization ------------------------------------

std::string transformer_config_to_json(const TransformerConfig& cfg) {
    json j;
    j["layers"] = cfg.layers;
    j["heads"] = cfg.heads;
    j["dim"] = cfg.dim;
    j["max_seq"] = cfg.max_seq;
    j["vocab"] = cfg.vocab;
    j["unified"] = cfg.unified;
    j["unified_classes"] = cfg.unified_classes;
    return j.dump();
}

TransformerConfig transformer_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    TransformerConfig cfg;
    cfg.layers = j.at("layers").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.dim = j.at("dim").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.unified = j.at("unified").get<bool>();
    cfg.unified_classes = j.at("unified_classes").get<int>();
    cfg.validate();
    return cfg;
}

namespace {
constexpr char kCkptMagic[8] = {'M', 'O', 'T', 'H', 'C', 'K', 'P', 'T'};
}

void save_checkpoint(const std::filesystem::path& base, const Transformer<float>& model,
                     const CheckpointMeta& meta) {
    if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
    {
        std::ofstream out(base.string() + ".bin", std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint blob");
        out.write(kCkptMagic, sizeof kCkptMagic);
        const uint32_t version = 1;
        const uint64_t count = model.params().size();
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&count), sizeof count);
        out.write(reinterpret_cast<const char*>(model.params().data()),
                  static_cast<std::streamsize>(count * sizeof(float)));
    }
    json j;
    j["format"] = "mothello-checkpoint";
    j["format_version"] = meta.format_version;
    j["config"] = json::parse(transformer_config_to_json(meta.config));
    j["family_hash"] = meta.family_hash;
    j["progress"] = {{"epoch", meta.epoch}, {"fraction", meta.fraction}, {"step", meta.step}};
    j["metrics"] = meta.metrics;
    write_text_file(base.string() + ".json", j.dump(2));
}

Transformer<float> load_checkpoint(const std::filesystem::path& base, CheckpointMeta* meta) {
    const json j = json::parse(read_text_file(base.string() + ".json"));
    if (j.at("format") != "mothello-checkpoint") throw std::runtime_error("not a checkpoint");
    const TransformerConfig cfg = transformer_config_from_json(j.at("config").dump());
    Transformer<float> model(cfg);

    std::ifstream in(base.string() + ".bin", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint blob");
    char magic[8];
    uint32_t version = 0;
    uint64_t count = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&count), sizeof count);
    if (std::memcmp(magic, kCkptMagic, sizeof magic) != 0 || version != 1 ||
        count != model.params().size())
        throw std::runtime_error("checkpoint blob mismatch");
    in.read(reinterpret_cast<char*>(model.params().data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint blob");

    if (meta) {
        meta->config = cfg;
        meta->family_hash = j.at("family_hash").get<std::string>();
        meta->epoch = j.at("progress").at("epoch").get<int>();
        meta->fraction = j.at("progress").at("fraction").get<double>();
        meta->step = j.at("progress").at("step").get<int64_t>();
        meta->format_version = j.at("format_version").get<int>();
        meta->metrics.clear();
        for (auto& [k, v] : j.at("metrics").items()) meta->metrics[k] = v.get<double>();
    }
    return model;
}

}  // namespace mothello::nn
