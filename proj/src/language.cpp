#include "mothello/language.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "mothello/rng.hpp"
#include "mothello/util.hpp"

using nlohmann::json;

namespace mothello::lang {

namespace {

constexpr std::array<int, 4> kCenterCells0 = {27, 28, 35, 36};  // d4, e4, d5, e5

std::array<int32_t, 64> make_slot_table() {
    std::array<int32_t, 64> table{};
    table.fill(-1);
    int slot = 0;
    for (int idx = 0; idx < 64; ++idx) {
        if (std::find(kCenterCells0.begin(), kCenterCells0.end(), idx) != kCenterCells0.end())
            continue;
        table[static_cast<size_t>(idx)] = slot++;
    }
    return table;
}

const std::array<int32_t, 64>& slot_table() {
    static const auto table = make_slot_table();
    return table;
}

std::array<int32_t, kPlayableMoves> make_cell_table() {
    std::array<int32_t, kPlayableMoves> cells{};
    const auto& slots = slot_table();
    for (int idx = 0; idx < 64; ++idx)
        if (slots[static_cast<size_t>(idx)] >= 0) cells[static_cast<size_t>(slots[static_cast<size_t>(idx)])] = idx;
    return cells;
}

const std::array<int32_t, kPlayableMoves>& cell_table() {
    static const auto table = make_cell_table();
    return table;
}

}  // namespace

bool is_playable_cell(othello::Move m) {
    const int idx = m.index();
    return idx >= 0 && idx < 64 && slot_table()[static_cast<size_t>(idx)] >= 0;
}

int slot_of_cell(othello::Move m) {
    if (!is_playable_cell(m)) throw std::invalid_argument("not a playable cell: " + std::to_string(m.cell));
    return slot_table()[static_cast<size_t>(m.index())];
}

othello::Move cell_of_slot(int slot) {
    if (slot < 0 || slot >= kPlayableMoves) throw std::invalid_argument("bad move slot");
    return othello::Move::from_index(cell_table()[static_cast<size_t>(slot)]);
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Atomic: return "atomic";
        case Variant::Split: return "split";
        case Variant::Compositional: return "compositional";
    }
    throw std::logic_error("bad variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "atomic") return Variant::Atomic;
    if (name == "split") return Variant::Split;
    if (name == "compositional") return Variant::Compositional;
    throw std::invalid_argument("unknown language variant: " + name);
}

bool LanguageSpec::contains(TokenId t) const {
    if (trie.empty()) throw std::logic_error("trie not built");
    for (const auto& [tok, node] : trie[0])
        if (tok == t) return true;
    // non-initial tokens: scan all nodes (rare path, used in error reporting)
    for (const auto& edges : trie)
        for (const auto& [tok, node] : edges)
            if (tok == t) return true;
    return false;
}

std::vector<TokenId> LanguageSpec::token_ids() const {
    std::set<TokenId> ids;
    for (const auto& tmpl : templates) ids.insert(tmpl.begin(), tmpl.end());
    return std::vector<TokenId>(ids.begin(), ids.end());
}

size_t LanguageSpec::max_template_len() const {
    size_t len = 0;
    for (const auto& tmpl : templates) len = std::max(len, tmpl.size());
    return len;
}

void LanguageSpec::build_trie() {
    trie.assign(1, {});
    trie_slot.assign(1, -1);
    for (int slot = 0; slot < kPlayableMoves; ++slot) {
        const auto& tmpl = templates[static_cast<size_t>(slot)];
        if (tmpl.empty() || tmpl.size() > 3)
            throw std::logic_error("template length out of range for slot " + std::to_string(slot));
        int node = 0;
        for (size_t i = 0; i < tmpl.size(); ++i) {
            if (trie_slot[static_cast<size_t>(node)] >= 0)
                throw std::logic_error("templates not prefix-free in language " +
                                       std::to_string(language_id));
            int next = -1;
            for (const auto& [tok, child] : trie[static_cast<size_t>(node)])
                if (tok == tmpl[i]) next = child;
            if (next < 0) {
                next = static_cast<int>(trie.size());
                trie[static_cast<size_t>(node)].emplace_back(tmpl[i], next);
                trie.emplace_back();
                trie_slot.push_back(-1);
            }
            node = next;
        }
        if (trie_slot[static_cast<size_t>(node)] >= 0 || !trie[static_cast<size_t>(node)].empty())
            throw std::logic_error("duplicate or prefix-sharing template in language " +
                                   std::to_string(language_id));
        trie_slot[static_cast<size_t>(node)] = slot;
    }
}

std::optional<int> LanguageSpec::Decoder::feed(TokenId t, size_t position) {
    const auto& edges = lang->trie[static_cast<size_t>(node)];
    int next = -1;
    for (const auto& [tok, child] : edges)
        if (tok == t) next = child;
    if (next < 0) throw UndecodableToken(t, position);
    const int slot = lang->trie_slot[static_cast<size_t>(next)];
    if (slot >= 0) {
        node = 0;
        return slot;
    }
    node = next;
    return std::nullopt;
}

size_t LanguageFamily::max_sequence_tokens() const {
    size_t len = 1;
    for (const auto& l : languages) len = std::max(len, l.max_template_len());
    return len * 60;
}

LanguageFamily build_family(int num_languages, const std::vector<Variant>& variants,
                            const AnchorConfig& anchors, uint64_t seed) {
    if (static_cast<int>(variants.size()) != num_languages)
        throw std::invalid_argument("variants list length must equal language count");

    LanguageFamily family;
    family.build_seed = seed;

    // Resolve anchored moves first. anchored_id[k][slot] >= 0 marks slot as
    // anchored in language k; ids get allocated in the template pass.
    std::vector<std::array<int32_t, kPlayableMoves>> anchor_group(
        static_cast<size_t>(num_languages));
    for (auto& row : anchor_group) row.fill(-1);
    std::set<int> moves_taken;  // slots anchored by any pair: one pair per move
    int group_count = 0;

    for (size_t pi = 0; pi < anchors.size(); ++pi) {
        const AnchorPair& pair = anchors[pi];
        if (pair.lang_a == pair.lang_b || pair.lang_a < 0 || pair.lang_b < 0 ||
            pair.lang_a >= num_languages || pair.lang_b >= num_languages)
            throw std::invalid_argument("bad anchor pair language indices");

        std::vector<int> slots;
        if (!pair.moves.empty()) {
            for (othello::Move m : pair.moves) slots.push_back(slot_of_cell(m));
        } else {
            Rng rng(pair.seed ? pair.seed : derive_seed(seed, 0xA11C0000ULL + pi));
            std::vector<int> pool;
            for (int s = 0; s < kPlayableMoves; ++s)
                if (!moves_taken.count(s)) pool.push_back(s);
            if (pair.count > static_cast<int>(pool.size()))
                throw ConflictingAnchors("not enough unanchored moves left for pair");
            for (int i = 0; i < pair.count; ++i) {
                const size_t j = rng.next_below(pool.size());
                slots.push_back(pool[j]);
                pool.erase(pool.begin() + static_cast<long>(j));
            }
        }

        AnchorLedgerEntry entry{pair.lang_a, pair.lang_b, {}};
        for (int s : slots) {
            if (moves_taken.count(s))
                throw ConflictingAnchors("move " + std::to_string(cell_of_slot(s).cell) +
                                         " anchored by more than one pair");
            moves_taken.insert(s);
            const int g = group_count++;
            anchor_group[static_cast<size_t>(pair.lang_a)][static_cast<size_t>(s)] = g;
            anchor_group[static_cast<size_t>(pair.lang_b)][static_cast<size_t>(s)] = g;
            entry.moves.push_back(cell_of_slot(s));
        }
        std::sort(entry.moves.begin(), entry.moves.end());
        family.anchors.push_back(std::move(entry));
    }

    TokenId next_id = kPadToken + 1;
    std::vector<TokenId> anchor_token(static_cast<size_t>(group_count), -1);

    for (int k = 0; k < num_languages; ++k) {
        LanguageSpec spec;
        spec.language_id = k;
        spec.variant = variants[static_cast<size_t>(k)];
        Rng rng(derive_seed(seed, 0x1A500000ULL + static_cast<uint64_t>(k)));

        std::array<TokenId, 8> file_tokens{}, rank_tokens{};
        if (spec.variant == Variant::Compositional) {
            for (auto& t : file_tokens) t = next_id++;
            for (auto& t : rank_tokens) t = next_id++;
        }

        for (int slot = 0; slot < kPlayableMoves; ++slot) {
            // split lengths are drawn for every slot to keep the language's
            // layout independent of which moves happen to be anchored
            const int split_len = 1 + static_cast<int>(rng.next_below(3));

            const int group = anchor_group[static_cast<size_t>(k)][static_cast<size_t>(slot)];
            if (group >= 0) {
                if (anchor_token[static_cast<size_t>(group)] < 0)
                    anchor_token[static_cast<size_t>(group)] = next_id++;
                spec.templates[static_cast<size_t>(slot)] = {anchor_token[static_cast<size_t>(group)]};
                continue;
            }
            switch (spec.variant) {
                case Variant::Atomic:
                    spec.templates[static_cast<size_t>(slot)] = {next_id++};
                    break;
                case Variant::Split: {
                    std::vector<TokenId> tmpl;
                    for (int i = 0; i < split_len; ++i) tmpl.push_back(next_id++);
                    spec.templates[static_cast<size_t>(slot)] = std::move(tmpl);
                    break;
                }
                case Variant::Compositional: {
                    const int idx = cell_of_slot(slot).index();
                    spec.templates[static_cast<size_t>(slot)] = {
                        file_tokens[static_cast<size_t>(idx % 8)],
                        rank_tokens[static_cast<size_t>(idx / 8)]};
                    break;
                }
            }
        }
        spec.build_trie();
        family.languages.push_back(std::move(spec));
    }

    family.vocab_size = next_id;
    return family;
}

TokenSequence translate(const othello::GameRecord& game, const LanguageSpec& lang) {
    TokenSequence seq;
    seq.language_id = lang.language_id;
    seq.tokens.reserve(game.moves.size() * 2);
    seq.move_boundaries.reserve(game.moves.size());
    for (othello::Move m : game.moves) {
        const auto& tmpl = lang.template_for(m);
        seq.tokens.insert(seq.tokens.end(), tmpl.begin(), tmpl.end());
        seq.move_boundaries.push_back(static_cast<int32_t>(seq.tokens.size()) - 1);
    }
    return seq;
}

ParseResult parse(const std::vector<TokenId>& tokens, const LanguageSpec& lang) {
    ParseResult out;
    auto dec = lang.decoder();
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (auto slot = dec.feed(tokens[i], i)) out.game.moves.push_back(cell_of_slot(*slot));
    }
    out.trailing_partial = dec.mid_template();
    return out;
}

void rebuild_boundaries(TokenSequence& seq, const LanguageSpec& lang) {
    seq.move_boundaries.clear();
    auto dec = lang.decoder();
    for (size_t i = 0; i < seq.tokens.size(); ++i)
        if (dec.feed(seq.tokens[i], i)) seq.move_boundaries.push_back(static_cast<int32_t>(i));
    if (dec.mid_template())
        throw std::invalid_argument("token sequence ends mid-template");
}

UnifiedOutputMap UnifiedOutputMap::identity() {
    UnifiedOutputMap map;
    for (int s = 0; s < kPlayableMoves; ++s) map.class_of_slot[static_cast<size_t>(s)] = s;
    return map;
}

othello::Move UnifiedOutputMap::move_of_class(int cls) const {
    for (int s = 0; s < kPlayableMoves; ++s)
        if (class_of_slot[static_cast<size_t>(s)] == cls) return cell_of_slot(s);
    throw std::invalid_argument("bad unified class id");
}

std::vector<int32_t> unified_targets(const TokenSequence& seq, const LanguageSpec& lang,
                                     const UnifiedOutputMap& map) {
    std::vector<int32_t> targets(seq.tokens.size(), -1);
    const ParseResult parsed = parse(seq.tokens, lang);
    if (parsed.trailing_partial || parsed.game.moves.size() != seq.move_boundaries.size())
        throw std::invalid_argument("token sequence does not decode in its own language");
    for (size_t j = 0; j + 1 < seq.move_boundaries.size(); ++j)
        targets[static_cast<size_t>(seq.move_boundaries[j])] =
            static_cast<int32_t>(map.class_of(parsed.game.moves[j + 1]));
    return targets;
}

std::string LanguageFamily::to_json() const {
    json j;
    j["format"] = "mothello-family";
    j["version"] = 1;
    j["seed"] = build_seed;
    j["vocab_size"] = vocab_size;
    j["pad_token"] = kPadToken;
    json langs = json::array();
    for (const auto& l : languages) {
        json jl;
        jl["id"] = l.language_id;
        jl["variant"] = variant_name(l.variant);
        json tmpls = json::array();
        for (const auto& t : l.templates) tmpls.push_back(t);
        jl["templates"] = tmpls;
        langs.push_back(jl);
    }
    j["languages"] = langs;
    json ja = json::array();
    for (const auto& a : anchors) {
        json e;
        e["lang_a"] = a.lang_a;
        e["lang_b"] = a.lang_b;
        json cells = json::array();
        for (othello::Move m : a.moves) cells.push_back(m.cell);
        e["cells"] = cells;
        ja.push_back(e);
    }
    j["anchors"] = ja;
    return j.dump(2);
}

LanguageFamily LanguageFamily::from_json(const std::string& text) {
    const json j = json::parse(text);
    if (j.at("format") != "mothello-family") throw std::invalid_argument("not a family file");
    LanguageFamily family;
    family.build_seed = j.at("seed").get<uint64_t>();
    family.vocab_size = j.at("vocab_size").get<int>();
    for (const auto& jl : j.at("languages")) {
        LanguageSpec l;
        l.language_id = jl.at("id").get<int>();
        l.variant = variant_from_name(jl.at("variant").get<std::string>());
        const auto& tmpls = jl.at("templates");
        if (tmpls.size() != kPlayableMoves) throw std::invalid_argument("bad template count");
        for (size_t s = 0; s < kPlayableMoves; ++s)
            l.templates[s] = tmpls[s].get<std::vector<TokenId>>();
        l.build_trie();
        family.languages.push_back(std::move(l));
    }
    for (const auto& ja : j.at("anchors")) {
        AnchorLedgerEntry e;
        e.lang_a = ja.at("lang_a").get<int>();
        e.lang_b = ja.at("lang_b").get<int>();
        for (int cell : ja.at("cells").get<std::vector<int>>()) e.moves.push_back(othello::Move{cell});
        family.anchors.push_back(std::move(e));
    }
    return family;
}

void LanguageFamily::save(const std::string& path) const { write_text_file(path, to_json()); }

LanguageFamily LanguageFamily::load(const std::string& path) {
    return from_json(read_text_file(path));
}

std::string LanguageFamily::content_hash() const { return hash_bytes(to_json()); }

}  // namespace mothello::lang
