#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "mothello/experiments.hpp"
#include "mothello/util.hpp"

using namespace mothello;
using namespace mothello::exp;
namespace fs = std::filesystem;

namespace {

fs::path temp_root(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("mothello_exp_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// scripted next-move scorer: always puts full probability on the template of
// the first legal move, token by token
struct LegalOracleScorer : SequenceScorer {
    const lang::LanguageFamily* family;
    const lang::LanguageSpec* language;
    int classes;

    int output_classes() const override { return classes; }
    bool unified() const override { return false; }

    nn::RowVec<float> row_for(const std::vector<lang::TokenId>& context, size_t appended_len) {
        const auto parsed = lang::parse(context, *language);
        const auto trace = othello::simulate(parsed.game);
        const auto legal = othello::legal_moves(trace.boards.back());
        nn::RowVec<float> row = nn::RowVec<float>::Zero(classes);
        if (!legal.empty()) {
            const auto& tmpl = language->template_for(legal.front());
            row(tmpl.at(appended_len)) = 10.0f;
        }
        return row;
    }

    nn::Mat<float> sequence_logits(const std::vector<lang::TokenId>& tokens) override {
        nn::Mat<float> logits = nn::Mat<float>::Zero(static_cast<int64_t>(tokens.size()), classes);
        auto dec = language->decoder();
        std::vector<lang::TokenId> prefix;
        for (size_t p = 0; p < tokens.size(); ++p) {
            prefix.push_back(tokens[p]);
            if (dec.feed(tokens[p], p)) logits.row(static_cast<int64_t>(p)) = row_for(prefix, 0);
        }
        return logits;
    }

    nn::RowVec<float> continuation_logits(const std::vector<lang::TokenId>& context,
                                          const std::vector<lang::TokenId>& appended) override {
        return row_for(context, appended.size());
    }
};

struct RandomScorer : SequenceScorer {
    int classes;
    Rng rng{99};
    int output_classes() const override { return classes; }
    bool unified() const override { return false; }
    nn::RowVec<float> random_row() {
        nn::RowVec<float> row(classes);
        for (int i = 0; i < classes; ++i) row(i) = static_cast<float>(rng.next_double());
        return row;
    }
    nn::Mat<float> sequence_logits(const std::vector<lang::TokenId>& tokens) override {
        nn::Mat<float> logits(static_cast<int64_t>(tokens.size()), classes);
        for (int64_t p = 0; p < logits.rows(); ++p) logits.row(p) = random_row();
        return logits;
    }
    nn::RowVec<float> continuation_logits(const std::vector<lang::TokenId>&,
                                          const std::vector<lang::TokenId>&) override {
        return random_row();
    }
};

}  // namespace

TEST_CASE("preset definitions carry the published configurations") {
    SUBCASE("paper scale") {
        const auto s = make_preset("table-anchor-effect", "paper");
        CHECK(s.model.layers == 8);
        CHECK(s.model.heads == 8);
        CHECK(s.model.dim == 512);
        CHECK(s.corpus.general == 20'000'000);
        CHECK(s.train.epochs == 9);
        CHECK(s.train.batch_size == 1024);
        CHECK(s.finetune_train.epochs == 4);
        CHECK(s.finetune_train.checkpoints_per_epoch == 5);
        CHECK(s.probe.epochs == 16);
        CHECK(s.probe.batch_size == 1024);
        CHECK(s.probe.hidden == 512);
        CHECK(s.corpus.probe_games == 800);
    }
    SUBCASE("paper transfer corpus") {
        const auto s = make_preset("fig-bigfig-anchors", "paper");
        CHECK(s.corpus.pretrain == 460'000);
        CHECK(s.corpus.validation == 30'000);
        CHECK(s.corpus.finetune == 102'000);
        CHECK(s.train.epochs == 40);
        REQUIRE(s.anchors.size() == 1);
        CHECK(s.anchors[0].count == 8);
    }
    SUBCASE("desk scale") {
        const auto s = make_preset("monolingual-sanity", "desk");
        CHECK(s.model.layers == 4);
        CHECK(s.model.heads == 4);
        CHECK(s.model.dim == 128);
        CHECK(s.corpus.general == 200'000);
        CHECK(s.corpus.pretrain == 60'000);
        CHECK(s.corpus.validation == 5'000);
        CHECK(s.corpus.finetune == 20'000);
    }
    SUBCASE("cluster preset language counts") {
        CHECK(make_preset("fig-parallel-20", "paper").variants.size() == 20);
        CHECK(make_preset("fig-parallel-20", "desk").variants.size() == 10);
        CHECK_THROWS(make_preset("fig-parallel-100", "desk"));
        CHECK(make_preset("fig-parallel-100", "paper").variants.size() == 100);
    }
    SUBCASE("seed sweep runs 9 seeds over 5 languages") {
        const auto s = make_preset("seed-sweep", "desk");
        CHECK(s.variants.size() == 5);
        CHECK(s.seeds.size() == 9);
    }
    SUBCASE("unknown preset rejected") { CHECK_THROWS(make_preset("nope", "desk")); }
}

TEST_CASE("experiment spec json round trip") {
    auto s = make_preset("fig-bigfig-anchors", "desk");
    s.seed = 77;
    const auto text = s.to_json();
    const auto back = ExperimentSpec::from_json(text);
    CHECK(back.preset == s.preset);
    CHECK(back.seed == 77);
    CHECK(back.variants == s.variants);
    CHECK(back.corpus.pretrain == s.corpus.pretrain);
    CHECK(back.train.epochs == s.train.epochs);
    CHECK(back.content_hash() == s.content_hash());
    // any field change moves the hash
    auto t = s;
    t.train.lr *= 2;
    CHECK(t.content_hash() != s.content_hash());
}

TEST_CASE("run directories") {
    const auto root = temp_root("rundir");
    auto spec = make_preset("smoke", "smoke");

    RunDir run(root, spec);
    CHECK_FALSE(run.already_complete());
    CHECK(fs::exists(run.path() / "manifest.json"));
    CHECK(fs::exists(run.path() / "metrics.csv"));

    run.append_metric({"top1_legal_acc", 0.5, "ck01", 0, -1, -1});
    run.append_metric({"cross_probe_acc", 0.25, "final", 0, 1, 3});
    const auto metrics_rows = run.read_metrics();
    REQUIRE(metrics_rows.size() == 2);
    CHECK(metrics_rows[1].metric == "cross_probe_acc");
    CHECK(metrics_rows[1].value == 0.25);
    CHECK(metrics_rows[1].lang_b == 1);
    CHECK(metrics_rows[1].layer == 3);

    SUBCASE("incomplete runs are wiped on reopen") {
        RunDir again(root, spec);
        CHECK_FALSE(again.already_complete());
        CHECK(again.read_metrics().empty());
    }
    SUBCASE("complete runs are resumed") {
        run.mark_complete();
        RunDir again(root, spec);
        CHECK(again.already_complete());
        CHECK(again.read_metrics().size() == 2);
    }
    fs::remove_all(root);
}

TEST_CASE("fresh games are deterministic and tag-separated") {
    const auto a = fresh_games(5, "top1_eval", 20, 2);
    const auto b = fresh_games(5, "top1_eval", 20, 1);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    const auto c = fresh_games(5, "probe_train_0", 20, 2);
    CHECK(a[0].moves != c[0].moves);
}

TEST_CASE("top1 legal accuracy") {
    SUBCASE("legality oracle scores exactly 1.0 on every variant") {
        for (auto variant :
             {lang::Variant::Atomic, lang::Variant::Split, lang::Variant::Compositional}) {
            const auto fam = lang::build_family(1, {variant}, {}, 3);
            LegalOracleScorer scorer;
            scorer.family = &fam;
            scorer.language = &fam.language(0);
            scorer.classes = fam.vocab_size;
            const auto games = fresh_games(9, "oracle_eval", 25, 2);
            CHECK(top1_legal_accuracy(scorer, games, fam.language(0)) == 1.0);
        }
    }
    SUBCASE("uniform random scorer matches the counting argument") {
        const auto fam = lang::build_family(2, {lang::Variant::Atomic, lang::Variant::Atomic},
                                            {}, 3);
        REQUIRE(fam.vocab_size == 121);
        RandomScorer scorer;
        scorer.classes = fam.vocab_size;
        const auto games = fresh_games(11, "random_eval", 100, 2);
        // expected accuracy = mean over positions of |legal| / vocab
        double legal_total = 0;
        int64_t positions = 0;
        for (const auto& g : games) {
            const auto trace = othello::simulate(g);
            for (size_t j = 0; j + 1 < g.moves.size(); ++j) {
                legal_total += static_cast<double>(othello::legal_moves(trace.boards[j + 1]).size());
                ++positions;
            }
        }
        const double expected = legal_total / static_cast<double>(positions) / 121.0;
        const double got = top1_legal_accuracy(scorer, games, fam.language(0));
        CHECK(got == doctest::Approx(expected).epsilon(0.25));
        CHECK(got < 0.2);  // far from a trained model
    }
}

TEST_CASE("smoke transfer produces epochs x checkpoints_per_epoch curve points") {
    const auto root = temp_root("transfer");
    auto spec = make_preset("fig-bigfig-naive", "smoke");
    spec.probe_layer = 1;
    const auto res = run_transfer(spec, root, TransferMode::Naive);
    const int expected_points = spec.finetune_train.epochs * spec.finetune_train.checkpoints_per_epoch;
    CHECK(static_cast<int>(res.points.size()) == expected_points);
    CHECK(res.points.front().ordinal == 1);
    CHECK(res.points.back().ordinal == expected_points);
    CHECK(res.points.back().epoch == spec.finetune_train.epochs);
    CHECK(res.pre_top1_src >= 0.0);

    // curve CSVs: one per language plus alignment, rows = checkpoints
    const auto run_dir = root / res.run_id;
    for (const char* name : {"top1_lang0", "top1_lang1", "alignment"}) {
        const auto text = read_text_file(run_dir / "curves" / (std::string(name) + ".csv"));
        const auto rows = std::count(text.begin(), text.end(), '\n') - 1;
        CHECK(rows == expected_points);
    }

    SUBCASE("rerun resumes from the completed run") {
        const auto again = run_transfer(spec, root, TransferMode::Naive);
        REQUIRE(again.points.size() == res.points.size());
        for (size_t i = 0; i < res.points.size(); ++i) {
            CHECK(again.points[i].top1_src == doctest::Approx(res.points[i].top1_src));
            CHECK(again.points[i].cross_alignment ==
                  doctest::Approx(res.points[i].cross_alignment));
        }
    }
    fs::remove_all(root);
}

TEST_CASE("smoke preset is deterministic end to end") {
    const auto spec = make_preset("smoke", "smoke");
    const auto root_a = temp_root("det_a");
    const auto root_b = temp_root("det_b");
    const auto a = run_smoke(spec, root_a);
    const auto b = run_smoke(spec, root_b);
    CHECK(a.corpus_hash == b.corpus_hash);
    CHECK(a.metrics_hash == b.metrics_hash);
    fs::remove_all(root_a);
    fs::remove_all(root_b);
}

TEST_CASE("emit_report") {
    const auto root = temp_root("report");
    const auto spec = make_preset("smoke", "smoke");
    const auto res = run_smoke(spec, root);

    SUBCASE("renders a report for a complete run") {
        const auto text = emit_report(res.run_path);
        CHECK(text.find("# Run report") != std::string::npos);
        CHECK(text.find("smoke") != std::string::npos);
        CHECK(fs::exists(res.run_path / "report.md"));
    }
    SUBCASE("incomplete run raises MissingArtifact") {
        // fresh run dir that never completes
        auto broken = spec;
        broken.seed = 999;
        RunDir run(root, broken);
        CHECK_THROWS_AS(emit_report(run.path()), MissingArtifact);
    }
    SUBCASE("missing artifact file is named") {
        fs::remove(res.run_path / "train_log.csv");
        try {
            emit_report(res.run_path);
            FAIL("expected MissingArtifact");
        } catch (const MissingArtifact& e) {
            CHECK(std::string(e.what()).find("train_log.csv") != std::string::npos);
        }
    }
    fs::remove_all(root);
}
