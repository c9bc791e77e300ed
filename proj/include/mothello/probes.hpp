#pragma once

#include <array>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "mothello/language.hpp"
#include "mothello/nnet.hpp"
#include "mothello/othello.hpp"

namespace mothello::probes {

struct NoConvergence : std::runtime_error {
    explicit NoConvergence(const std::string& what) : std::runtime_error(what) {}
};

// Absolute tile colors: 0 empty, 1 black, 2 white.
using BoardLabel = std::array<uint8_t, 64>;

BoardLabel board_label(const othello::Board& b);

// (activation, board) pairs collected at move-final token positions of one
// language at one layer.
struct ActivationDataset {
    int layer = 0;
    int language_id = 0;
    nn::Mat<float> x;            // N x D
    std::vector<BoardLabel> y;   // N
};

struct ProbeConfig {
    int hidden = 512;
    int epochs = 16;
    int batch_size = 1024;
    double lr = 1e-3;
    double clip = 1.0;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    uint64_t seed = 0;
    int jobs = 0;
};

// Two-layer perceptron D -> hidden -> 64x3 tile logits. Segments are padded
// to 64-byte boundaries (see nn::AlignedVec).
struct Probe {
    int in_dim = 0;
    int hidden = 0;
    int layer = 0;        // collection layer
    int language_id = 0;  // training language
    nn::AlignedVec<float> w;  // W1 (in x h), b1 (h), W2 (h x 192), b2 (192)

    static int64_t pad16(int64_t n) { return (n + 15) & ~int64_t(15); }
    int64_t w1_off() const { return 0; }
    int64_t b1_off() const { return pad16(static_cast<int64_t>(in_dim) * hidden); }
    int64_t w2_off() const { return b1_off() + pad16(hidden); }
    int64_t b2_off() const { return w2_off() + pad16(static_cast<int64_t>(hidden) * 192); }
    int64_t size() const { return b2_off() + pad16(192); }

    // logits for a batch of activations: N x 192 (64 tiles x 3 classes)
    nn::Mat<float> forward(const nn::Mat<float>& x) const;
    // per-tile argmax classes for one logits row
    static BoardLabel decode(const nn::RowVec<float>& logits_row);
    // gradient of mean per-tile CE w.r.t. the input activation (used by the
    // intervention optimizer; probe weights stay frozen)
    nn::RowVec<float> input_gradient(const nn::RowVec<float>& x, const BoardLabel& target) const;
    double tile_loss(const nn::RowVec<float>& x, const BoardLabel& target) const;
};

// One (x, y) pair per move of every game: x at the move-final token position
// at `layer`, y the simulator board after that move.
ActivationDataset collect_activations(const nn::Transformer<float>& model,
                                      const std::vector<othello::GameRecord>& games,
                                      const lang::LanguageSpec& lang, int layer, int jobs = 0);

// Collects every layer 0..L in a single forward pass over the games.
std::vector<ActivationDataset> collect_activations_all_layers(
    const nn::Transformer<float>& model, const std::vector<othello::GameRecord>& games,
    const lang::LanguageSpec& lang, int jobs = 0);

Probe train_probe(const ActivationDataset& ds, const ProbeConfig& cfg);

// Mean over samples of (matching tiles / 64).
double probe_accuracy(const Probe& probe, const ActivationDataset& ds);

struct CrossAccuracy {
    double plain = 0.0;
    double flipped = 0.0;      // black/white swapped in the probe's predictions
    double reported = 0.0;     // max(plain, flipped), aggregated per pair
};

CrossAccuracy cross_alignment_detail(const Probe& probe, const ActivationDataset& target_ds);
double cross_alignment_accuracy(const Probe& probe, const ActivationDataset& target_ds);

// cell (i,j) = cross accuracy of probe i evaluated on language j's
// activations; diagonal = plain same-language accuracy.
std::vector<std::vector<double>> pairwise_alignment_matrix(
    const std::vector<Probe>& probes, const std::vector<ActivationDataset>& eval_sets);

struct InterventionConfig {
    int max_steps = 1000;
    double step_size = 0.1;
};

struct InterventionResult {
    nn::RowVec<float> distribution;           // softmax over the output space after the edit
    nn::RowVec<float> null_distribution;      // same recompute path, unedited activation
    int steps = 0;
    bool full_board_match = false;
};

// Gradient-edits the layer-`layer` residual activation at the final position
// until the probe reads `target_board`, then recomputes blocks layer+1..L at
// that position. Throws NoConvergence if the probe still misclassifies an
// edited tile after max_steps.
InterventionResult intervene(const nn::Transformer<float>& model, const Probe& probe,
                             const std::vector<lang::TokenId>& tokens,
                             const BoardLabel& target_board, int layer,
                             const InterventionConfig& cfg);

// Top-n set mismatch: n = |legal(edited_board)|, the n highest-probability
// move tokens of `lang` are compared against the legal set; the error counts
// legal moves missing from that set. Requires a single-token-per-move
// (atomic) language.
int intervention_error(const nn::RowVec<float>& distribution, const othello::Board& edited_board,
                       const lang::LanguageSpec& lang);

// unified-output models: rank the 60 unified classes instead of tokens
int intervention_error_unified(const nn::RowVec<float>& distribution,
                               const othello::Board& edited_board,
                               const lang::UnifiedOutputMap& map);

void save_probe(const std::filesystem::path& base, const Probe& probe,
                const std::string& dataset_hash, uint64_t seed);
Probe load_probe(const std::filesystem::path& base);

}  // namespace mothello::probes
