#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mothello/corpus.hpp"
#include "mothello/language.hpp"
#include "mothello/probes.hpp"
#include "mothello/training.hpp"

namespace mothello::exp {

inline const char* kToolVersion = "0.1.0";

// One measured quantity with full provenance inside its run directory.
struct MetricsRecord {
    std::string metric;      // same_probe_acc | cross_probe_acc | top1_legal_acc |
                             // intervention_error | loss
    double value = 0.0;
    std::string checkpoint;  // final | pretrained | ck<ordinal> | ...
    int lang_a = -1;
    int lang_b = -1;
    int layer = -1;
};

// ---- experiment specification ---------------------------------------------

struct CorpusPlan {
    int64_t general = 0;       // unconstrained pretraining sequences
    int64_t pretrain = 0;      // prefix-filtered pretraining sequences
    int64_t validation = 0;    // prefix-filtered validation sequences
    int64_t finetune = 0;      // single-language finetune sequences
    int probe_games = 800;     // probe-training games per language
    int probe_eval_games = 200;
    int eval_games = 1000;     // held-out games for top-1 accuracy
};

struct ExperimentSpec {
    std::string preset;
    std::string scale = "desk";  // desk | paper
    uint64_t seed = 1;
    std::vector<uint64_t> seeds; // run-level seeds for multi-seed presets
    int jobs = 0;

    std::vector<lang::Variant> variants;
    lang::AnchorConfig anchors;

    CorpusPlan corpus;
    nn::TransformerConfig model;
    nn::TrainConfig train;
    nn::TrainConfig finetune_train;
    probes::ProbeConfig probe;
    int probe_layer = -1;  // -1 = pick by layer scan

    std::string to_json() const;
    static ExperimentSpec from_json(const std::string& text);
    std::string content_hash() const;
};

// Built-in presets, keyed by the tables/figures they reproduce. Scale is
// "desk" or "paper".
ExperimentSpec make_preset(const std::string& name, const std::string& scale, uint64_t seed_override = 0);
std::vector<std::string> preset_names();

// ---- run directories --------------------------------------------------------

// runs/<run-id>/{manifest.json, family.json, corpus/, checkpoints/,
// metrics.csv, matrices/, curves/}. The manifest is written before any
// compute; metrics append one CSV row at a time; status flips to "complete"
// last. Run ids are deterministic slugs of (preset, scale, seed, spec hash)
// so reruns resume instead of duplicating work.
class RunDir {
public:
    RunDir(const std::filesystem::path& root, const ExperimentSpec& spec,
           const std::string& id_suffix = {});

    const std::filesystem::path& path() const { return dir_; }
    const std::string& run_id() const { return run_id_; }
    bool already_complete() const { return already_complete_; }

    void append_metric(const MetricsRecord& rec);
    void add_artifact(const std::string& relative_path);
    void write_matrix_csv(const std::string& name, const std::vector<std::vector<double>>& cells);
    void write_curve_csv(const std::string& name, const std::vector<std::string>& header,
                         const std::vector<std::vector<double>>& rows);
    void mark_complete();

    std::vector<MetricsRecord> read_metrics() const;

private:
    void write_manifest(const std::string& status);

    std::filesystem::path dir_;
    std::string run_id_;
    ExperimentSpec spec_;
    std::vector<std::string> artifacts_;
    bool already_complete_ = false;
};

std::filesystem::path default_runs_root();  // $MOTHELLO_RUNS_DIR or ./runs

// ---- metrics ---------------------------------------------------------------

// Fraction of move boundaries where the model's greedy next-move prediction
// is a legal move of the current board. Standard mode decodes up to 3 tokens
// greedily and requires them all to belong to `language`; unified mode takes
// the argmax unified class.
double top1_legal_accuracy(const nn::Transformer<float>& model,
                           const std::vector<othello::GameRecord>& games,
                           const lang::LanguageSpec& language, int jobs = 0);

// Generic scorer variant (tests plumb the legality oracle through this seam).
// sequence_logits(tokens) returns one logits row per position; continuation
// logits are requested for speculative tokens appended after a boundary.
struct SequenceScorer {
    virtual ~SequenceScorer() = default;
    virtual int output_classes() const = 0;
    virtual bool unified() const = 0;
    virtual nn::Mat<float> sequence_logits(const std::vector<lang::TokenId>& tokens) = 0;
    virtual nn::RowVec<float> continuation_logits(const std::vector<lang::TokenId>& context,
                                                  const std::vector<lang::TokenId>& appended) = 0;
};
double top1_legal_accuracy(SequenceScorer& scorer, const std::vector<othello::GameRecord>& games,
                           const lang::LanguageSpec& language);

std::vector<othello::GameRecord> fresh_games(uint64_t seed, const std::string& tag, int64_t count,
                                             int jobs = 0);

// ---- drivers ----------------------------------------------------------------

struct LayerScanResult {
    std::vector<double> same_acc;   // per layer 0..L
    std::vector<double> cross_acc;  // per layer, empty when monolingual
    int best_layer = 0;             // argmax same_acc
};

struct AlignmentRunResult {
    std::string run_id;
    int layer = 0;
    std::vector<std::vector<double>> matrix;  // M x M
    double top1_lang0 = 0.0;
};

struct SweepCell {
    std::string pair_type;  // Atom+Atom | Atom+Split | Atom+Compositional
    int anchors = 0;
    double cross_acc = 0.0;                  // averaged over seeds
    std::vector<double> per_seed_cross;
    std::vector<double> per_seed_same;
};

struct TransferPoint {
    int ordinal = 0;  // 1..epochs*checkpoints_per_epoch
    int epoch = 0;
    double fraction = 0.0;
    double top1_src = 0.0;
    double top1_tgt = 0.0;       // mean over non-finetuned languages when M > 2
    double cross_alignment = 0.0;
};

struct TransferResult {
    std::string run_id;
    double pre_top1_src = 0.0;
    double pre_top1_tgt = 0.0;
    double pre_cross_alignment = 0.0;
    std::vector<TransferPoint> points;
    std::vector<std::vector<double>> per_language_top1;  // [checkpoint][language]
};

struct InterventionSummary {
    double original_aligned = 0.0;
    double cross_aligned = 0.0;
    double original_nonaligned = 0.0;
    double cross_nonaligned = 0.0;
    double null_aligned = 0.0;
    double null_nonaligned = 0.0;
    int edits = 0;
    int skipped_nonconverged = 0;
};

// Monolingual baseline: train, scan layers, report probe accuracy at the best
// layer plus top-1 legal accuracy on held-out games.
struct MonolingualResult {
    std::string run_id;
    LayerScanResult scan;
    double probe_acc = 0.0;
    double top1 = 0.0;
};
MonolingualResult run_monolingual(const ExperimentSpec& spec, const std::filesystem::path& root);

// Naive multilingual pretraining: trains one model on M languages with no
// anchors and emits the pairwise alignment matrix at the scanned layer.
AlignmentRunResult run_naive_alignment(const ExperimentSpec& spec,
                                       const std::filesystem::path& root);

// Bilingual anchor sweep over {0,1,2,4} anchors x pair types, seeds averaged.
std::vector<SweepCell> run_anchor_sweep(const ExperimentSpec& spec,
                                        const std::filesystem::path& root,
                                        const std::vector<int>& anchor_counts,
                                        const std::vector<std::string>& pair_types);

// One bilingual (or multilingual) alignment cell: train on the general corpus
// and probe. Exposed for reuse by the sweep and the intervention validation.
AlignmentRunResult run_alignment_cell(const ExperimentSpec& spec,
                                      const std::filesystem::path& root);

// Cross-lingual transfer: prefix-filtered pretraining with early stopping,
// single-language finetune with 5 checkpoints/epoch, per-checkpoint top-1 in
// every language plus cross alignment from the finetuning language.
enum class TransferMode { Naive, Anchors, Unified };
TransferResult run_transfer(const ExperimentSpec& spec, const std::filesystem::path& root,
                            TransferMode mode);

// Indirect anchors: 3 atomic languages, anchors on (0,1) and (0,2) only;
// reports cross accuracy for all three pairs.
struct IndirectAnchorResult {
    std::string run_id;
    double acc_01 = 0.0, acc_02 = 0.0, acc_12 = 0.0;
};
IndirectAnchorResult run_indirect_anchor(const ExperimentSpec& spec,
                                         const std::filesystem::path& root);

// Seed sweep: one alignment matrix per seed over 5 atomic languages.
struct SeedSweepResult {
    std::vector<std::string> run_ids;
    std::vector<std::vector<std::vector<double>>> matrices;
    int seeds_fully_aligned = 0;  // all-pairs cross >= 0.9
};
SeedSweepResult run_seed_sweep(const ExperimentSpec& spec, const std::filesystem::path& root);

// Layer scan on an existing trained model.
LayerScanResult layer_scan(const nn::Transformer<float>& model, const lang::LanguageFamily& family,
                           const ExperimentSpec& spec, RunDir* run = nullptr);

// Intervention validation over aligned (4-anchor) and non-aligned (naive)
// bilingual models.
InterventionSummary run_intervention_validation(const ExperimentSpec& spec,
                                                const std::filesystem::path& root, int edits = 200);

// The smoke preset end to end (tiny sizes); used by the determinism check.
struct SmokeResult {
    std::string run_id;
    std::filesystem::path run_path;
    std::string corpus_hash;
    std::string metrics_hash;
};
SmokeResult run_smoke(const ExperimentSpec& spec, const std::filesystem::path& root,
                      const std::string& id_suffix = {});

// Dispatch by preset name; returns 0 on success.
int run_preset(const ExperimentSpec& spec, const std::filesystem::path& root);

struct MissingArtifact : std::runtime_error {
    explicit MissingArtifact(const std::string& what) : std::runtime_error(what) {}
};

// Renders report.md (plus plot-ready CSVs already in the run dir) for a
// completed run. Throws MissingArtifact naming anything absent.
std::string emit_report(const std::filesystem::path& run_dir);

}  // namespace mothello::exp
