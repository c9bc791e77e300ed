// mothello: multilingual Othello world-model laboratory CLI.
//
// Subcommands: gen-family, gen-corpus, train, finetune, probe, cross-probe,
// layer-scan, intervene, experiment <preset>, report <run-id>.
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "mothello/corpus.hpp"
#include "mothello/experiments.hpp"
#include "mothello/probes.hpp"
#include "mothello/training.hpp"
#include "mothello/util.hpp"

using namespace mothello;
namespace fs = std::filesystem;

namespace {

exp::ExperimentSpec resolve_spec(const std::string& preset, const std::string& scale,
                                 uint64_t seed, const std::string& config_path, int jobs) {
    exp::ExperimentSpec spec;
    if (!config_path.empty()) {
        spec = exp::ExperimentSpec::from_json(read_text_file(config_path));
        if (seed) spec.seed = seed;
    } else {
        spec = exp::make_preset(preset, scale, seed);
    }
    if (jobs > 0) spec.jobs = jobs;
    return spec;
}

fs::path runs_root(const std::string& flag) {
    return flag.empty() ? exp::default_runs_root() : fs::path(flag);
}

// resolves a run id or path to a run directory
fs::path find_run(const fs::path& root, const std::string& id_or_path) {
    if (fs::exists(fs::path(id_or_path) / "manifest.json")) return id_or_path;
    if (fs::exists(root / id_or_path / "manifest.json")) return root / id_or_path;
    // prefix match over run directories
    std::vector<fs::path> hits;
    if (fs::exists(root))
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory() && e.path().filename().string().rfind(id_or_path, 0) == 0)
                hits.push_back(e.path());
    if (hits.size() == 1) return hits.front();
    throw std::invalid_argument(hits.empty() ? "no run matches '" + id_or_path + "'"
                                             : "run id '" + id_or_path + "' is ambiguous");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mothello: multilingual Othello world-model laboratory"};
    app.require_subcommand(1);

    std::string scale = "desk", runs_flag, config_path, out_path, preset, run_id;
    uint64_t seed = 0;
    int jobs = 0;
    app.add_option("--runs-dir", runs_flag, "run directory root (default $MOTHELLO_RUNS_DIR or ./runs)");

    auto add_common = [&](CLI::App* cmd, bool training) {
        cmd->add_option("--seed", seed, "override the preset seed");
        cmd->add_option("--jobs", jobs, "worker threads (default: hardware)");
        cmd->add_option("--config", config_path, "experiment spec JSON instead of a built-in preset");
        if (training)
            cmd->add_option("--scale", scale, "preset scale")
                ->check(CLI::IsMember({"paper", "desk", "smoke"}));
    };

    // gen-family
    auto* gen_family = app.add_subcommand("gen-family", "build a language family descriptor");
    int m_langs = 2;
    std::vector<std::string> variant_names;
    std::vector<std::string> anchor_specs;
    gen_family->add_option("--languages", m_langs, "number of languages");
    gen_family->add_option("--variants", variant_names,
                           "per-language variants (atomic|split|compositional)");
    gen_family->add_option("--anchors", anchor_specs, "anchor pairs as a:b:count");
    gen_family->add_option("--out", out_path, "output family JSON")->required();
    gen_family->add_option("--seed", seed, "family seed");

    // gen-corpus
    auto* gen_corpus = app.add_subcommand("gen-corpus", "materialize corpus files for a family");
    std::string family_path;
    int64_t n_pretrain = 0, n_validation = 0, n_finetune = 0, n_eval = 0;
    bool prefix_filtered = false;
    int finetune_language = 0;
    gen_corpus->add_option("--family", family_path, "family JSON path")->required();
    gen_corpus->add_option("--out", out_path, "output directory")->required();
    gen_corpus->add_option("--pretrain", n_pretrain, "pretrain sequences");
    gen_corpus->add_option("--validation", n_validation, "validation sequences");
    gen_corpus->add_option("--finetune", n_finetune, "finetune sequences");
    gen_corpus->add_option("--eval", n_eval, "eval sequences");
    gen_corpus->add_flag("--prefix-filtered", prefix_filtered,
                         "pretrain/validation share the default 3-move prefix");
    gen_corpus->add_option("--finetune-language", finetune_language, "finetune split language");
    gen_corpus->add_option("--seed", seed, "corpus seed");
    gen_corpus->add_option("--jobs", jobs, "worker threads");

    // experiment
    auto* experiment = app.add_subcommand("experiment", "run a named experiment preset");
    experiment->add_option("preset", preset, "preset name")->required();
    add_common(experiment, true);

    // train / finetune (thin wrappers over experiment presets)
    auto* train_cmd = app.add_subcommand("train", "general pretraining (monolingual-sanity preset)");
    add_common(train_cmd, true);
    auto* finetune_cmd =
        app.add_subcommand("finetune", "transfer pipeline (fig-bigfig presets)");
    std::string mode = "naive";
    finetune_cmd->add_option("--mode", mode, "naive|anchors|unified")
        ->check(CLI::IsMember({"naive", "anchors", "unified"}));
    add_common(finetune_cmd, true);

    // probe / cross-probe / layer-scan / intervene on an existing run
    auto* probe_cmd = app.add_subcommand("probe", "train + evaluate a same-language probe");
    auto* cross_cmd = app.add_subcommand("cross-probe", "cross-lingual alignment probe accuracy");
    auto* scan_cmd = app.add_subcommand("layer-scan", "probe accuracy per layer");
    auto* intervene_cmd = app.add_subcommand("intervene", "intervention validation preset");
    std::string checkpoint = "final";
    int probe_lang = 0, eval_lang = 1, probe_layer = -1;
    for (auto* cmd : {probe_cmd, cross_cmd, scan_cmd}) {
        cmd->add_option("--run", run_id, "run id or path holding the checkpoint")->required();
        cmd->add_option("--checkpoint", checkpoint, "checkpoint name (default final)");
        cmd->add_option("--layer", probe_layer, "probe layer (default: scan)");
        cmd->add_option("--games", n_eval, "override probe-training game count");
        cmd->add_option("--seed", seed, "probe seed");
        cmd->add_option("--jobs", jobs, "worker threads");
    }
    probe_cmd->add_option("--lang", probe_lang, "language to probe");
    cross_cmd->add_option("--src", probe_lang, "probe training language");
    cross_cmd->add_option("--tgt", eval_lang, "evaluation language");
    add_common(intervene_cmd, true);

    // report
    auto* report_cmd = app.add_subcommand("report", "emit report.md for a completed run");
    report_cmd->add_option("run", run_id, "run id or path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the offending flag and usage
        return 1;
    }

    try {
        const fs::path root = runs_root(runs_flag);

        if (gen_family->parsed()) {
            std::vector<lang::Variant> variants;
            for (const auto& v : variant_names) variants.push_back(lang::variant_from_name(v));
            while (static_cast<int>(variants.size()) < m_langs)
                variants.push_back(lang::Variant::Atomic);
            lang::AnchorConfig anchors;
            for (const auto& a : anchor_specs) {
                lang::AnchorPair p;
                if (std::sscanf(a.c_str(), "%d:%d:%d", &p.lang_a, &p.lang_b, &p.count) != 3)
                    throw std::invalid_argument("bad anchor spec '" + a + "', expected a:b:count");
                p.seed = derive_seed(seed, 0xA11C0000ULL + anchors.size());
                anchors.push_back(p);
            }
            const auto family = lang::build_family(m_langs, variants, anchors, seed);
            family.save(out_path);
            std::printf("family %s vocab=%d -> %s\n", family.content_hash().c_str(),
                        family.vocab_size, out_path.c_str());
            return 0;
        }

        if (gen_corpus->parsed()) {
            const auto family = lang::LanguageFamily::load(family_path);
            corpus::CorpusSpec cs;
            cs.family_hash = family.content_hash();
            cs.seed = seed;
            cs.prefix = corpus::default_prefix();
            if (n_pretrain)
                cs.splits.push_back({"pretrain", n_pretrain, prefix_filtered, std::nullopt});
            if (n_validation)
                cs.splits.push_back(
                    {"pretrain_validation", n_validation, prefix_filtered, std::nullopt});
            if (n_finetune) cs.splits.push_back({"finetune", n_finetune, false, finetune_language});
            if (n_eval) cs.splits.push_back({"eval", n_eval, false, std::nullopt});
            if (cs.splits.empty()) throw std::invalid_argument("no split counts given");
            const auto splits = corpus::generate_corpus(cs, family, jobs);
            corpus::write_corpus_dir(out_path, cs, family, splits);
            std::printf("corpus written to %s\n", out_path.c_str());
            return 0;
        }

        if (experiment->parsed()) {
            const auto spec = resolve_spec(preset, scale, seed, config_path, jobs);
            return exp::run_preset(spec, root);
        }
        if (train_cmd->parsed()) {
            const auto spec = resolve_spec("monolingual-sanity", scale, seed, config_path, jobs);
            exp::run_monolingual(spec, root);
            return 0;
        }
        if (finetune_cmd->parsed()) {
            const auto spec = resolve_spec("fig-bigfig-" + mode, scale, seed, config_path, jobs);
            exp::run_preset(spec, root);
            return 0;
        }
        if (intervene_cmd->parsed()) {
            const auto spec = resolve_spec("table-intervention", scale, seed, config_path, jobs);
            const auto sum = exp::run_intervention_validation(spec, root);
            std::printf("intervention errors: original/aligned %.3f cross/aligned %.3f "
                        "original/non-aligned %.3f cross/non-aligned %.3f null %.3f/%.3f\n",
                        sum.original_aligned, sum.cross_aligned, sum.original_nonaligned,
                        sum.cross_nonaligned, sum.null_aligned, sum.null_nonaligned);
            return 0;
        }

        if (probe_cmd->parsed() || cross_cmd->parsed() || scan_cmd->parsed()) {
            const auto dir = find_run(root, run_id);
            const auto family = lang::LanguageFamily::load((dir / "family.json").string());
            const auto model = nn::load_checkpoint(dir / "checkpoints" / checkpoint);
            exp::ExperimentSpec spec;  // probe defaults
            spec.seed = seed ? seed : 1;
            if (jobs > 0) spec.jobs = jobs;
            spec.variants.assign(static_cast<size_t>(family.num_languages()),
                                 lang::Variant::Atomic);
            if (n_eval > 0) spec.corpus.probe_games = static_cast<int>(n_eval);

            if (scan_cmd->parsed()) {
                const auto scan = exp::layer_scan(model, family, spec, nullptr);
                std::printf("layer,same_probe_acc%s\n",
                            scan.cross_acc.empty() ? "" : ",cross_probe_acc");
                for (size_t l = 0; l < scan.same_acc.size(); ++l) {
                    if (scan.cross_acc.empty())
                        std::printf("%zu,%.4f\n", l, scan.same_acc[l]);
                    else
                        std::printf("%zu,%.4f,%.4f\n", l, scan.same_acc[l], scan.cross_acc[l]);
                }
                std::printf("best layer: %d\n", scan.best_layer);
                return 0;
            }

            const int layer = probe_layer >= 0
                                  ? probe_layer
                                  : exp::layer_scan(model, family, spec, nullptr).best_layer;
            const auto games =
                exp::fresh_games(spec.seed, "probe_train_" + std::to_string(probe_lang),
                                 spec.corpus.probe_games, spec.jobs);
            auto ds = probes::collect_activations(model, games, family.language(probe_lang), layer,
                                                  spec.jobs);
            probes::ProbeConfig pc;
            pc.seed = spec.seed;
            pc.jobs = spec.jobs;
            const auto probe = probes::train_probe(ds, pc);
            const auto eval_games =
                exp::fresh_games(spec.seed, "probe_eval_" + std::to_string(probe_lang),
                                 spec.corpus.probe_eval_games, spec.jobs);
            const auto own = probes::collect_activations(model, eval_games,
                                                         family.language(probe_lang), layer,
                                                         spec.jobs);
            std::printf("layer %d same_probe_acc %.4f\n", layer, probes::probe_accuracy(probe, own));
            if (cross_cmd->parsed()) {
                const auto tgt_games =
                    exp::fresh_games(spec.seed, "probe_eval_" + std::to_string(eval_lang),
                                     spec.corpus.probe_eval_games, spec.jobs);
                const auto tgt = probes::collect_activations(
                    model, tgt_games, family.language(eval_lang), layer, spec.jobs);
                const auto detail = probes::cross_alignment_detail(probe, tgt);
                std::printf("cross_probe_acc %.4f (plain %.4f flipped %.4f)\n", detail.reported,
                            detail.plain, detail.flipped);
            }
            return 0;
        }

        if (report_cmd->parsed()) {
            const auto dir = find_run(root, run_id);
            exp::emit_report(dir);
            std::printf("report written to %s\n", (dir / "report.md").string().c_str());
            return 0;
        }
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const exp::MissingArtifact& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return 2;
    }
    return 1;
}
