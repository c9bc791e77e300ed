#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mothello/othello.hpp"

namespace mothello::lang {

using TokenId = int32_t;

// Global pad id. Loss-masked everywhere and deliberately not shared as a
// semantic token, so it cannot act as an accidental anchor.
constexpr TokenId kPadToken = 0;

// The 4 center cells are occupied from the start and never playable, so the
// move vocabulary of every language covers exactly 60 cells.
constexpr int kPlayableMoves = 60;

int slot_of_cell(othello::Move m);           // 0..59, throws on center cells
othello::Move cell_of_slot(int slot);        // inverse
bool is_playable_cell(othello::Move m);

enum class Variant : uint8_t { Atomic, Split, Compositional };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct UndecodableToken : std::runtime_error {
    UndecodableToken(TokenId token, size_t position)
        : std::runtime_error("undecodable token " + std::to_string(token) + " at position " +
                             std::to_string(position)),
          token(token),
          position(position) {}
    TokenId token;
    size_t position;
};

struct ConflictingAnchors : std::runtime_error {
    explicit ConflictingAnchors(const std::string& what) : std::runtime_error(what) {}
};

// One language L_k: per-move token templates over the family's global id
// space. Templates are prefix-free and uniquely decodable (checked on build).
struct LanguageSpec {
    int language_id = 0;
    Variant variant = Variant::Atomic;
    std::array<std::vector<TokenId>, kPlayableMoves> templates;  // by move slot

    bool contains(TokenId t) const;
    const std::vector<TokenId>& template_for(othello::Move m) const {
        return templates[static_cast<size_t>(slot_of_cell(m))];
    }
    std::vector<TokenId> token_ids() const;  // sorted, unique
    size_t max_template_len() const;

    // decode state machine over the template trie
    struct Decoder {
        const LanguageSpec* lang = nullptr;
        int node = 0;  // 0 = root
        // Feeds one token. Returns the decoded move slot when a template
        // completes, std::nullopt while mid-template. Throws UndecodableToken.
        std::optional<int> feed(TokenId t, size_t position);
        bool mid_template() const { return node != 0; }
        void reset() { node = 0; }
    };
    Decoder decoder() const { return Decoder{this, 0}; }

    // trie built in build_family / deserialization; throws if templates are
    // not prefix-free or not uniquely decodable
    void build_trie();
    std::vector<std::vector<std::pair<TokenId, int32_t>>> trie;  // node -> (token -> node)
    std::vector<int32_t> trie_slot;                              // node -> slot or -1
};

struct AnchorPair {
    int lang_a = 0;
    int lang_b = 0;
    int count = 0;
    uint64_t seed = 0;
    // Optional explicit anchored moves (cells). When empty, `count` moves are
    // drawn uniformly without replacement from the playable moves not yet
    // anchored by an earlier pair, controlled by `seed`.
    std::vector<othello::Move> moves;
};

using AnchorConfig = std::vector<AnchorPair>;

struct AnchorLedgerEntry {
    int lang_a = 0;
    int lang_b = 0;
    std::vector<othello::Move> moves;
};

struct LanguageFamily {
    uint64_t build_seed = 0;
    int vocab_size = 0;  // ids live in [0, vocab_size); 0 is pad
    std::vector<LanguageSpec> languages;
    std::vector<AnchorLedgerEntry> anchors;

    int num_languages() const { return static_cast<int>(languages.size()); }
    const LanguageSpec& language(int k) const { return languages.at(static_cast<size_t>(k)); }
    size_t max_sequence_tokens() const;  // 60 * max template length over languages

    std::string to_json() const;
    static LanguageFamily from_json(const std::string& text);
    void save(const std::string& path) const;
    static LanguageFamily load(const std::string& path);
    std::string content_hash() const;
};

// Token rendering of one game in one language. move_boundaries[j] is the
// index of the last token of move j.
struct TokenSequence {
    std::vector<TokenId> tokens;
    std::vector<int32_t> move_boundaries;
    int language_id = 0;
};

// Deterministic family construction. Split template lengths are drawn
// per-move uniformly from {1,2,3}; anchored moves collapse to a single token
// id shared verbatim by both pair members, whatever their variants.
LanguageFamily build_family(int num_languages, const std::vector<Variant>& variants,
                            const AnchorConfig& anchors, uint64_t seed);

TokenSequence translate(const othello::GameRecord& game, const LanguageSpec& lang);

struct ParseResult {
    othello::GameRecord game;
    bool trailing_partial = false;
};

// Greedy unique decoding. Throws UndecodableToken.
ParseResult parse(const std::vector<TokenId>& tokens, const LanguageSpec& lang);

// Recomputes move_boundaries for a token sequence loaded from disk. Throws
// UndecodableToken / invalid_argument when the tokens do not decode cleanly.
void rebuild_boundaries(TokenSequence& seq, const LanguageSpec& lang);

// Language-neutral output classes for the unified-output training regime:
// a bijection from the 60 playable moves onto class ids [0,60).
struct UnifiedOutputMap {
    std::array<int32_t, kPlayableMoves> class_of_slot{};

    static UnifiedOutputMap identity();
    int class_of(othello::Move m) const { return class_of_slot[static_cast<size_t>(slot_of_cell(m))]; }
    othello::Move move_of_class(int cls) const;
};

constexpr int kUnifiedClasses = kPlayableMoves;

// Per-token-position training targets for unified output mode: at the
// boundary of move j (j < last), the class of move j+1; everywhere else -1
// (masked, no loss).
std::vector<int32_t> unified_targets(const TokenSequence& seq, const LanguageSpec& lang,
                                     const UnifiedOutputMap& map);

}  // namespace mothello::lang
