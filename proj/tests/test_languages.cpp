#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "mothello/language.hpp"
#include "mothello/rng.hpp"

using namespace mothello;
using namespace mothello::lang;
using othello::GameRecord;
using othello::Move;
using othello::move_from_name;

namespace {

GameRecord record(std::initializer_list<const char*> names) {
    GameRecord g;
    for (const char* n : names) g.moves.push_back(move_from_name(n));
    return g;
}

std::set<TokenId> id_set(const LanguageSpec& l) {
    const auto ids = l.token_ids();
    return std::set<TokenId>(ids.begin(), ids.end());
}

std::set<TokenId> intersect(const std::set<TokenId>& a, const std::set<TokenId>& b) {
    std::set<TokenId> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                          std::inserter(out, out.begin()));
    return out;
}

}  // namespace

TEST_CASE("vocabulary sizes") {
    SUBCASE("two atomic languages, no anchors") {
        const auto fam = build_family(2, {Variant::Atomic, Variant::Atomic}, {}, 1);
        CHECK(fam.vocab_size == 1 + 60 + 60);  // pad + disjoint atomic spaces
        CHECK(intersect(id_set(fam.language(0)), id_set(fam.language(1))).empty());
    }
    SUBCASE("two atomic languages, 4 anchors") {
        const auto fam =
            build_family(2, {Variant::Atomic, Variant::Atomic}, {AnchorPair{0, 1, 4, 77}}, 1);
        CHECK(fam.vocab_size == 121 - 4);
        CHECK(intersect(id_set(fam.language(0)), id_set(fam.language(1))).size() == 4);
        REQUIRE(fam.anchors.size() == 1);
        CHECK(fam.anchors[0].moves.size() == 4);
    }
    SUBCASE("compositional language uses 16 component tokens") {
        const auto fam = build_family(1, {Variant::Compositional}, {}, 1);
        CHECK(id_set(fam.language(0)).size() == 16);
        CHECK(fam.vocab_size == 1 + 16);
    }
}

TEST_CASE("split template lengths are roughly uniform over {1,2,3}") {
    int counts[4] = {0, 0, 0, 0};
    int total = 0;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        const auto fam = build_family(1, {Variant::Split}, {}, seed);
        for (const auto& tmpl : fam.language(0).templates) {
            REQUIRE(tmpl.size() >= 1);
            REQUIRE(tmpl.size() <= 3);
            ++counts[tmpl.size()];
            ++total;
        }
    }
    // 2400 draws, each length expected 1/3 of the time; allow 5 sigma
    const double expected = total / 3.0;
    const double sigma = std::sqrt(total * (1.0 / 3) * (2.0 / 3));
    for (int len = 1; len <= 3; ++len) {
        CHECK(counts[len] > expected - 5 * sigma);
        CHECK(counts[len] < expected + 5 * sigma);
    }
}

TEST_CASE("translate mirrors the worked examples") {
    const GameRecord g = record({"a1", "a2", "b1"});

    SUBCASE("atomic: one token per move") {
        const auto fam = build_family(1, {Variant::Atomic}, {}, 3);
        const auto seq = translate(g, fam.language(0));
        CHECK(seq.tokens.size() == 3);
        CHECK(seq.move_boundaries == std::vector<int32_t>{0, 1, 2});
        CHECK(seq.tokens[0] == fam.language(0).template_for(move_from_name("a1"))[0]);
    }
    SUBCASE("split: move-specific fragment runs") {
        const auto fam = build_family(1, {Variant::Split}, {}, 3);
        const auto& l = fam.language(0);
        const auto seq = translate(g, l);
        size_t expect = l.template_for(g.moves[0]).size() + l.template_for(g.moves[1]).size() +
                        l.template_for(g.moves[2]).size();
        CHECK(seq.tokens.size() == expect);
        CHECK(seq.move_boundaries.size() == 3);
        CHECK(seq.move_boundaries.back() == static_cast<int32_t>(expect) - 1);
    }
    SUBCASE("compositional: [a,1,a,2,b,1] sharing pattern") {
        const auto fam = build_family(1, {Variant::Compositional}, {}, 3);
        const auto seq = translate(g, fam.language(0));
        REQUIRE(seq.tokens.size() == 6);
        CHECK(seq.move_boundaries == std::vector<int32_t>{1, 3, 5});
        CHECK(seq.tokens[0] == seq.tokens[2]);  // a1, a2 share the file token
        CHECK(seq.tokens[1] == seq.tokens[5]);  // a1, b1 share the rank token
        CHECK(seq.tokens[0] != seq.tokens[4]);  // file a vs file b
        CHECK(seq.tokens[1] != seq.tokens[3]);  // rank 1 vs rank 2
    }
}

TEST_CASE("parse is the inverse of translate") {
    const std::vector<Variant> variants = {Variant::Atomic, Variant::Split,
                                           Variant::Compositional};
    const auto fam = build_family(3, variants, {}, 9);
    for (uint64_t seed = 0; seed < 400; ++seed) {
        const GameRecord g = othello::generate_game(seed);
        for (const auto& l : fam.languages) {
            const auto seq = translate(g, l);
            const ParseResult parsed = parse(seq.tokens, l);
            CHECK(parsed.game == g);
            CHECK_FALSE(parsed.trailing_partial);
        }
    }
}

TEST_CASE("parse flags trailing partial templates") {
    const auto fam = build_family(1, {Variant::Compositional}, {}, 5);
    const auto& l = fam.language(0);
    auto seq = translate(record({"a1"}), l);
    REQUIRE(seq.tokens.size() == 2);
    std::vector<TokenId> toks = {seq.tokens[0], seq.tokens[1], seq.tokens[0]};  // [a,1,a]
    const ParseResult parsed = parse(toks, l);
    CHECK(parsed.game.moves.size() == 1);
    CHECK(parsed.trailing_partial);
}

TEST_CASE("parse rejects tokens from other languages") {
    const auto fam = build_family(2, {Variant::Atomic, Variant::Atomic}, {}, 6);
    const auto seq = translate(record({"a1"}), fam.language(1));
    CHECK_THROWS_AS(parse(seq.tokens, fam.language(0)), UndecodableToken);
    try {
        parse(seq.tokens, fam.language(0));
    } catch (const UndecodableToken& e) {
        CHECK(e.position == 0);
        CHECK(e.token == seq.tokens[0]);
    }
}

TEST_CASE("anchor semantics") {
    SUBCASE("anchored moves translate identically in both pair members") {
        for (Variant vb : {Variant::Atomic, Variant::Split, Variant::Compositional}) {
            const auto fam =
                build_family(2, {Variant::Atomic, vb}, {AnchorPair{0, 1, 8, 123}}, 2);
            REQUIRE(fam.anchors.size() == 1);
            for (Move m : fam.anchors[0].moves) {
                const auto& ta = fam.language(0).template_for(m);
                const auto& tb = fam.language(1).template_for(m);
                CHECK(ta == tb);
                CHECK(ta.size() == 1);  // anchors are single-token in both languages
            }
        }
    }
    SUBCASE("indirect anchor preset leaves languages 1 and 2 fully disjoint") {
        const AnchorConfig cfg = {AnchorPair{0, 1, 2, 11}, AnchorPair{0, 2, 2, 13}};
        const auto fam =
            build_family(3, {Variant::Atomic, Variant::Atomic, Variant::Atomic}, cfg, 4);
        CHECK(intersect(id_set(fam.language(1)), id_set(fam.language(2))).empty());
        CHECK(intersect(id_set(fam.language(0)), id_set(fam.language(1))).size() == 2);
        CHECK(intersect(id_set(fam.language(0)), id_set(fam.language(2))).size() == 2);
    }
    SUBCASE("one move anchored by two pairs is a conflict") {
        const Move m = move_from_name("a1");
        const AnchorConfig cfg = {AnchorPair{0, 1, 0, 0, {m}}, AnchorPair{0, 2, 0, 0, {m}}};
        CHECK_THROWS_AS(
            build_family(3, {Variant::Atomic, Variant::Atomic, Variant::Atomic}, cfg, 4),
            ConflictingAnchors);
    }
}

TEST_CASE("non-anchored token spaces are pairwise disjoint") {
    const auto fam = build_family(
        4, {Variant::Atomic, Variant::Split, Variant::Compositional, Variant::Atomic},
        {AnchorPair{0, 1, 4, 21}}, 10);
    for (int a = 0; a < 4; ++a) {
        for (int b = a + 1; b < 4; ++b) {
            const auto shared = intersect(id_set(fam.language(a)), id_set(fam.language(b)));
            if (a == 0 && b == 1)
                CHECK(shared.size() == 4);
            else
                CHECK(shared.empty());
        }
    }
}

TEST_CASE("unified targets mask everything but pre-final move boundaries") {
    const auto map = UnifiedOutputMap::identity();

    SUBCASE("atomic two-move sequence") {
        const auto fam = build_family(1, {Variant::Atomic}, {}, 8);
        const GameRecord g = record({"d3", "c3"});
        const auto seq = translate(g, fam.language(0));
        const auto targets = unified_targets(seq, fam.language(0), map);
        REQUIRE(targets.size() == 2);
        CHECK(targets[0] == map.class_of(move_from_name("c3")));
        CHECK(targets[1] == -1);
    }
    SUBCASE("multi-token templates mask intra-move positions") {
        const auto fam = build_family(1, {Variant::Compositional}, {}, 8);
        const GameRecord g = record({"d3", "c3"});
        const auto seq = translate(g, fam.language(0));
        const auto targets = unified_targets(seq, fam.language(0), map);
        REQUIRE(targets.size() == 4);
        CHECK(targets[0] == -1);
        CHECK(targets[1] == map.class_of(move_from_name("c3")));
        CHECK(targets[2] == -1);
        CHECK(targets[3] == -1);
    }
    SUBCASE("empty sequence") {
        const auto fam = build_family(1, {Variant::Atomic}, {}, 8);
        const auto targets = unified_targets(TokenSequence{}, fam.language(0), map);
        CHECK(targets.empty());
    }
}

TEST_CASE("unified output map is a bijection over playable moves") {
    const auto map = UnifiedOutputMap::identity();
    std::set<int> classes;
    for (int s = 0; s < kPlayableMoves; ++s) {
        const Move m = cell_of_slot(s);
        const int cls = map.class_of(m);
        CHECK(map.move_of_class(cls) == m);
        classes.insert(cls);
    }
    CHECK(classes.size() == kPlayableMoves);
}

TEST_CASE("family serialization round trip preserves the content hash") {
    const auto fam = build_family(2, {Variant::Atomic, Variant::Split},
                                  {AnchorPair{0, 1, 2, 5}}, 31);
    const auto reloaded = LanguageFamily::from_json(fam.to_json());
    CHECK(reloaded.content_hash() == fam.content_hash());
    CHECK(reloaded.vocab_size == fam.vocab_size);
    REQUIRE(reloaded.num_languages() == 2);
    for (int k = 0; k < 2; ++k)
        CHECK(reloaded.language(k).templates == fam.language(k).templates);
    // parse still works after reload (trie rebuilt)
    const GameRecord g = othello::generate_game(1);
    CHECK(parse(translate(g, reloaded.language(1)).tokens, reloaded.language(1)).game == g);
}

TEST_CASE("move slots exclude the four center cells") {
    CHECK_FALSE(is_playable_cell(move_from_name("d4")));
    CHECK_FALSE(is_playable_cell(move_from_name("e4")));
    CHECK_FALSE(is_playable_cell(move_from_name("d5")));
    CHECK_FALSE(is_playable_cell(move_from_name("e5")));
    CHECK_THROWS_AS(slot_of_cell(move_from_name("d4")), std::invalid_argument);
    std::set<int> slots;
    for (int cell = 1; cell <= 64; ++cell) {
        const Move m{cell};
        if (is_playable_cell(m)) slots.insert(slot_of_cell(m));
    }
    CHECK(slots.size() == 60);
}
