#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mothello/language.hpp"
#include "mothello/othello.hpp"

namespace mothello::corpus {

struct IllegalPrefix : std::runtime_error {
    explicit IllegalPrefix(const std::string& what) : std::runtime_error(what) {}
};

// Split names are fixed vocabulary; see CorpusSpec.
extern const std::vector<std::string> kSplitNames;

struct SplitSpec {
    std::string name;                    // pretrain | pretrain_validation | finetune | probe_train | eval
    int64_t count = 0;
    bool prefix_filtered = false;        // games share the spec's 3 fixed first moves
    std::optional<int> fixed_language;   // all games in this language (else uniform per game)
};

struct CorpusSpec {
    std::string family_hash;
    std::vector<SplitSpec> splits;
    std::vector<othello::Move> prefix;   // exactly 3 moves when any split is prefix-filtered
    uint64_t seed = 0;
};

struct DatasetSplit {
    std::string name;
    std::vector<lang::TokenSequence> sequences;  // each carries its language_id
};

// First three plies of the lexicographically smallest legal opening under the
// 1-based cell ordering. Default prefix filter for transfer presets.
std::vector<othello::Move> default_prefix();

// Game whose first moves equal `prefix`, remainder uniform random legal play.
// Throws IllegalPrefix.
othello::GameRecord prefix_constrained_game(const std::vector<othello::Move>& prefix,
                                            uint64_t seed);

// Deterministic dataset materialization per spec+seed. Per game: derived seed,
// language drawn uniformly (or fixed), fresh (optionally prefix-constrained)
// game, translated. Parallel across games via per-game derived seeds.
std::vector<DatasetSplit> generate_corpus(const CorpusSpec& spec,
                                          const lang::LanguageFamily& family, int jobs = 0);

// n unconstrained games, all translated into one language.
DatasetSplit sample_finetune(uint64_t general_seed, int64_t n, int language_id,
                             const lang::LanguageFamily& family, int jobs = 0);

// Corpus file: header "MOTHELLO-CORPUS v1 <family-hash> <split-name> <count>",
// then one sequence per line: language_id TAB space-separated token ids.
// LF endings, UTF-8.
void write_split(const std::filesystem::path& path, const std::string& family_hash,
                 const DatasetSplit& split);
DatasetSplit read_split(const std::filesystem::path& path,
                        const std::string& expected_family_hash = {});

// Writes every split plus manifest.json (spec, seed, per-file hashes) into
// `dir`. Returns the manifest text.
std::string write_corpus_dir(const std::filesystem::path& dir, const CorpusSpec& spec,
                             const lang::LanguageFamily& family,
                             const std::vector<DatasetSplit>& splits);

}  // namespace mothello::corpus
