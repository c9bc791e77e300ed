#include "mothello/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "mothello/rng.hpp"
#include "mothello/util.hpp"

using nlohmann::json;

namespace mothello::corpus {

const std::vector<std::string> kSplitNames = {"pretrain", "pretrain_validation", "finetune",
                                              "probe_train", "eval"};

namespace {

void check_split_name(const std::string& name) {
    if (std::find(kSplitNames.begin(), kSplitNames.end(), name) == kSplitNames.end())
        throw std::invalid_argument("unknown split name: " + name);
}

uint64_t split_stream(const SplitSpec& split, size_t index_in_spec) {
    Fnv1a h;
    h.update(split.name);
    h.update_u64(index_in_spec);
    return h.value();
}

othello::Board board_after_prefix(const std::vector<othello::Move>& prefix) {
    othello::Board b = othello::Board::initial();
    for (size_t i = 0; i < prefix.size(); ++i) {
        try {
            b = othello::apply_move(b, prefix[i]);
        } catch (const othello::IllegalMove&) {
            throw IllegalPrefix("prefix move " + std::to_string(i + 1) + " (cell " +
                                std::to_string(prefix[i].cell) + ") is not legal");
        }
    }
    return b;
}

othello::GameRecord random_continuation(othello::Board b, othello::GameRecord game, Rng& rng) {
    for (;;) {
        uint64_t mask = othello::legal_mask(b);
        if (!mask) break;
        const int n = std::popcount(mask);
        int k = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
        while (k--) mask &= mask - 1;
        const auto m = othello::Move::from_index(std::countr_zero(mask));
        b = othello::apply_move(b, m);
        game.moves.push_back(m);
    }
    return game;
}

}  // namespace

std::vector<othello::Move> default_prefix() {
    othello::Board b = othello::Board::initial();
    std::vector<othello::Move> prefix;
    for (int i = 0; i < 3; ++i) {
        const auto lm = othello::legal_moves(b);  // ascending by cell
        prefix.push_back(lm.front());
        b = othello::apply_move(b, lm.front());
    }
    return prefix;
}

othello::GameRecord prefix_constrained_game(const std::vector<othello::Move>& prefix,
                                            uint64_t seed) {
    const othello::Board b = board_after_prefix(prefix);
    Rng rng(seed);
    return random_continuation(b, othello::GameRecord{prefix}, rng);
}

std::vector<DatasetSplit> generate_corpus(const CorpusSpec& spec,
                                          const lang::LanguageFamily& family, int jobs) {
    if (jobs <= 0) jobs = default_jobs();
    const int num_languages = family.num_languages();
    const bool any_prefix =
        std::any_of(spec.splits.begin(), spec.splits.end(),
                    [](const SplitSpec& s) { return s.prefix_filtered; });
    if (any_prefix) {
        if (spec.prefix.size() != 3)
            throw IllegalPrefix("prefix filter requires exactly 3 moves");
        board_after_prefix(spec.prefix);  // throws IllegalPrefix if not a legal opening
    }

    std::vector<DatasetSplit> out;
    for (size_t si = 0; si < spec.splits.size(); ++si) {
        const SplitSpec& split = spec.splits[si];
        check_split_name(split.name);
        if (split.count < 0) throw std::invalid_argument("negative split count");
        if (split.fixed_language &&
            (*split.fixed_language < 0 || *split.fixed_language >= num_languages))
            throw std::invalid_argument("fixed_language out of range");

        DatasetSplit ds;
        ds.name = split.name;
        ds.sequences.resize(static_cast<size_t>(split.count));
        const uint64_t base = derive_seed(spec.seed, split_stream(split, si));
        parallel_chunks(split.count, jobs, [&](int, int64_t begin, int64_t end) {
            for (int64_t i = begin; i < end; ++i) {
                Rng rng(derive_seed(base, static_cast<uint64_t>(i)));
                const int language = split.fixed_language
                                         ? *split.fixed_language
                                         : static_cast<int>(rng.next_below(
                                               static_cast<uint64_t>(num_languages)));
                const uint64_t game_seed = rng.next_u64();
                const othello::GameRecord game =
                    split.prefix_filtered ? prefix_constrained_game(spec.prefix, game_seed)
                                          : othello::generate_game(game_seed);
                ds.sequences[static_cast<size_t>(i)] =
                    lang::translate(game, family.language(language));
            }
        });
        out.push_back(std::move(ds));
    }
    return out;
}

DatasetSplit sample_finetune(uint64_t general_seed, int64_t n, int language_id,
                             const lang::LanguageFamily& family, int jobs) {
    CorpusSpec spec;
    spec.family_hash = family.content_hash();
    spec.seed = general_seed;
    spec.splits = {SplitSpec{"finetune", n, false, language_id}};
    auto splits = generate_corpus(spec, family, jobs);
    return std::move(splits.front());
}

void write_split(const std::filesystem::path& path, const std::string& family_hash,
                 const DatasetSplit& split) {
    check_split_name(split.name);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path.string());
    out << "MOTHELLO-CORPUS v1 " << family_hash << ' ' << split.name << ' '
        << split.sequences.size() << '\n';
    std::string line;
    for (const auto& seq : split.sequences) {
        line.clear();
        line += std::to_string(seq.language_id);
        line += '\t';
        for (size_t i = 0; i < seq.tokens.size(); ++i) {
            if (i) line += ' ';
            line += std::to_string(seq.tokens[i]);
        }
        line += '\n';
        out << line;
    }
}

DatasetSplit read_split(const std::filesystem::path& path,
                        const std::string& expected_family_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path.string());
    std::string magic, version, family_hash, split_name;
    int64_t count = 0;
    in >> magic >> version >> family_hash >> split_name >> count;
    if (magic != "MOTHELLO-CORPUS" || version != "v1")
        throw std::runtime_error("bad corpus header in " + path.string());
    if (!expected_family_hash.empty() && family_hash != expected_family_hash)
        throw std::runtime_error("corpus family hash mismatch in " + path.string());
    in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');

    DatasetSplit ds;
    ds.name = split_name;
    ds.sequences.reserve(static_cast<size_t>(count));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        lang::TokenSequence seq;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error("bad corpus line");
        seq.language_id = std::stoi(line.substr(0, tab));
        const char* p = line.c_str() + tab + 1;
        while (*p) {
            char* next = nullptr;
            seq.tokens.push_back(static_cast<lang::TokenId>(std::strtol(p, &next, 10)));
            p = next;
            while (*p == ' ') ++p;
        }
        ds.sequences.push_back(std::move(seq));
    }
    if (ds.sequences.size() != static_cast<size_t>(count))
        throw std::runtime_error("corpus sequence count mismatch in " + path.string());
    return ds;
}

std::string write_corpus_dir(const std::filesystem::path& dir, const CorpusSpec& spec,
                             const lang::LanguageFamily& family,
                             const std::vector<DatasetSplit>& splits) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = "mothello-corpus-manifest";
    manifest["version"] = 1;
    manifest["family_hash"] = family.content_hash();
    manifest["seed"] = spec.seed;
    json prefix_cells = json::array();
    for (othello::Move m : spec.prefix) prefix_cells.push_back(m.cell);
    manifest["prefix"] = prefix_cells;
    json jsplits = json::array();
    for (size_t i = 0; i < splits.size(); ++i) {
        const auto file = dir / (splits[i].name + ".txt");
        write_split(file, family.content_hash(), splits[i]);
        json js;
        js["name"] = splits[i].name;
        js["count"] = splits[i].sequences.size();
        if (i < spec.splits.size()) {
            js["prefix_filtered"] = spec.splits[i].prefix_filtered;
            if (spec.splits[i].fixed_language)
                js["fixed_language"] = *spec.splits[i].fixed_language;
        }
        js["file"] = file.filename().string();
        js["hash"] = hash_file(file);
        jsplits.push_back(js);
    }
    manifest["splits"] = jsplits;
    const std::string text = manifest.dump(2);
    write_text_file(dir / "manifest.json", text);
    return text;
}

}  // namespace mothello::corpus
