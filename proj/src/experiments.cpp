#include "mothello/experiments.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mothello/rng.hpp"
#include "mothello/util.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace mothello::exp {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

json train_config_to_json(const nn::TrainConfig& c) {
    json j;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["warmup_steps"] = c.warmup_steps;
    j["lr_schedule"] = c.lr_schedule;
    j["min_lr_frac"] = c.min_lr_frac;
    j["clip"] = c.clip;
    j["weight_decay"] = c.weight_decay;
    j["patience"] = c.patience;
    j["checkpoints_per_epoch"] = c.checkpoints_per_epoch;
    j["seed"] = c.seed;
    j["log_every"] = c.log_every;
    return j;
}

nn::TrainConfig train_config_from_json(const json& j) {
    nn::TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    c.lr_schedule = j.at("lr_schedule").get<std::string>();
    c.min_lr_frac = j.at("min_lr_frac").get<double>();
    c.clip = j.at("clip").get<double>();
    c.weight_decay = j.value("weight_decay", 0.0);
    c.patience = j.at("patience").get<int>();
    c.checkpoints_per_epoch = j.at("checkpoints_per_epoch").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.log_every = j.at("log_every").get<int>();
    return c;
}

json probe_config_to_json(const probes::ProbeConfig& c) {
    json j;
    j["hidden"] = c.hidden;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["clip"] = c.clip;
    j["seed"] = c.seed;
    return j;
}

probes::ProbeConfig probe_config_from_json(const json& j) {
    probes::ProbeConfig c;
    c.hidden = j.at("hidden").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.clip = j.at("clip").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

}  // namespace

std::string ExperimentSpec::to_json() const {
    json j;
    j["format"] = "mothello-experiment";
    j["version"] = 1;
    j["preset"] = preset;
    j["scale"] = scale;
    j["seed"] = seed;
    j["seeds"] = seeds;
    json vs = json::array();
    for (auto v : variants) vs.push_back(lang::variant_name(v));
    j["variants"] = vs;
    json as = json::array();
    for (const auto& a : anchors) {
        json ja;
        ja["a"] = a.lang_a;
        ja["b"] = a.lang_b;
        ja["count"] = a.count;
        ja["seed"] = a.seed;
        json cells = json::array();
        for (auto m : a.moves) cells.push_back(m.cell);
        ja["cells"] = cells;
        as.push_back(ja);
    }
    j["anchors"] = as;
    j["corpus"] = {{"general", corpus.general},
                   {"pretrain", corpus.pretrain},
                   {"validation", corpus.validation},
                   {"finetune", corpus.finetune},
                   {"probe_games", corpus.probe_games},
                   {"probe_eval_games", corpus.probe_eval_games},
                   {"eval_games", corpus.eval_games}};
    j["model"] = json::parse(nn::transformer_config_to_json(model));
    j["train"] = train_config_to_json(train);
    j["finetune_train"] = train_config_to_json(finetune_train);
    j["probe"] = probe_config_to_json(probe);
    j["probe_layer"] = probe_layer;
    return j.dump(2);
}

ExperimentSpec ExperimentSpec::from_json(const std::string& text) {
    const json j = json::parse(text);
    if (j.at("format") != "mothello-experiment") throw std::invalid_argument("not an experiment spec");
    ExperimentSpec s;
    s.preset = j.at("preset").get<std::string>();
    s.scale = j.at("scale").get<std::string>();
    s.seed = j.at("seed").get<uint64_t>();
    s.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    for (const auto& v : j.at("variants"))
        s.variants.push_back(lang::variant_from_name(v.get<std::string>()));
    for (const auto& ja : j.at("anchors")) {
        lang::AnchorPair a;
        a.lang_a = ja.at("a").get<int>();
        a.lang_b = ja.at("b").get<int>();
        a.count = ja.at("count").get<int>();
        a.seed = ja.at("seed").get<uint64_t>();
        for (int cell : ja.at("cells").get<std::vector<int>>())
            a.moves.push_back(othello::Move{cell});
        s.anchors.push_back(std::move(a));
    }
    const auto& jc = j.at("corpus");
    s.corpus.general = jc.at("general").get<int64_t>();
    s.corpus.pretrain = jc.at("pretrain").get<int64_t>();
    s.corpus.validation = jc.at("validation").get<int64_t>();
    s.corpus.finetune = jc.at("finetune").get<int64_t>();
    s.corpus.probe_games = jc.at("probe_games").get<int>();
    s.corpus.probe_eval_games = jc.at("probe_eval_games").get<int>();
    s.corpus.eval_games = jc.at("eval_games").get<int>();
    s.model = nn::transformer_config_from_json(j.at("model").dump());
    s.train = train_config_from_json(j.at("train"));
    s.finetune_train = train_config_from_json(j.at("finetune_train"));
    s.probe = probe_config_from_json(j.at("probe"));
    s.probe_layer = j.at("probe_layer").get<int>();
    return s;
}

std::string ExperimentSpec::content_hash() const { return hash_bytes(to_json()); }

// ---- presets ----------------------------------------------------------------

namespace {

void apply_scale_defaults(ExperimentSpec& s) {
    s.model.vocab = 0;    // derived from the family at run time
    s.model.max_seq = 0;  // derived from the family's longest rendering
    if (s.scale == "paper") {
        s.model.layers = 8;
        s.model.heads = 8;
        s.model.dim = 512;
        s.corpus.general = 20'000'000;
        s.corpus.pretrain = 460'000;
        s.corpus.validation = 30'000;
        s.corpus.finetune = 102'000;
        s.train.epochs = 9;
        s.train.batch_size = 1024;
        s.train.lr = 1e-4;
        s.train.warmup_steps = 100;
        s.train.patience = 3;
        s.finetune_train = s.train;
        s.finetune_train.epochs = 4;
        s.finetune_train.checkpoints_per_epoch = 5;
        s.probe.epochs = 16;
        s.probe.batch_size = 1024;
    } else if (s.scale == "desk") {
        s.model.layers = 4;
        s.model.heads = 4;
        s.model.dim = 128;
        s.corpus.general = 200'000;
        s.corpus.pretrain = 60'000;
        s.corpus.validation = 5'000;
        s.corpus.finetune = 20'000;
        s.train.epochs = 2;
        s.train.batch_size = 128;
        s.train.lr = 1e-3;
        s.train.warmup_steps = 100;
        s.train.lr_schedule = "cosine";
        s.train.min_lr_frac = 0.1;
        s.train.patience = 3;
        s.finetune_train = s.train;
        s.finetune_train.epochs = 4;
        s.finetune_train.checkpoints_per_epoch = 5;
        s.finetune_train.lr = 3e-4;
        s.finetune_train.lr_schedule = "constant";
        s.finetune_train.warmup_steps = 20;
        s.probe.epochs = 16;
        s.probe.batch_size = 1024;
        s.probe.lr = 1e-3;
    } else if (s.scale == "smoke") {
        s.model.layers = 2;
        s.model.heads = 2;
        s.model.dim = 64;
        s.corpus.general = 2'000;
        s.corpus.pretrain = 1'500;
        s.corpus.validation = 300;
        s.corpus.finetune = 600;
        s.corpus.probe_games = 60;
        s.corpus.probe_eval_games = 30;
        s.corpus.eval_games = 60;
        s.train.epochs = 1;
        s.train.batch_size = 64;
        s.train.lr = 1e-3;
        s.train.warmup_steps = 10;
        s.train.patience = 2;
        s.finetune_train = s.train;
        s.finetune_train.epochs = 2;
        s.finetune_train.checkpoints_per_epoch = 2;
        s.probe.epochs = 3;
        s.probe.batch_size = 512;
    } else {
        throw std::invalid_argument("unknown scale: " + s.scale);
    }
}

lang::AnchorPair anchor_pair(int a, int b, int count) {
    lang::AnchorPair p;
    p.lang_a = a;
    p.lang_b = b;
    p.count = count;
    // anchored-move choice depends on the count, not the run seed, so sweep
    // columns share anchors across seeds
    p.seed = derive_seed(0xA11C0A11ULL, static_cast<uint64_t>(count) * 131 +
                                            static_cast<uint64_t>(a) * 17 +
                                            static_cast<uint64_t>(b));
    return p;
}

}  // namespace

ExperimentSpec make_preset(const std::string& name, const std::string& scale,
                           uint64_t seed_override) {
    ExperimentSpec s;
    s.preset = name;
    s.scale = scale;
    s.seed = seed_override ? seed_override : 1;
    s.seeds = {1, 2, 3};
    apply_scale_defaults(s);
    using lang::Variant;

    if (name == "monolingual-sanity") {
        s.variants = {Variant::Atomic};
    } else if (name == "table-anchor-effect") {
        s.variants = {Variant::Atomic, Variant::Atomic};  // sweep varies the pair type
    } else if (name == "table-choice-layer") {
        s.variants = {Variant::Atomic, Variant::Atomic};
    } else if (name == "fig-bigfig-naive" || name == "fig-bigfig-unified") {
        s.variants = {Variant::Atomic, Variant::Atomic};
        s.train.epochs = scale == "paper" ? 40 : (scale == "desk" ? 12 : 2);
    } else if (name == "fig-bigfig-anchors") {
        s.variants = {Variant::Atomic, Variant::Atomic};
        s.anchors = {anchor_pair(0, 1, 8)};
        s.train.epochs = scale == "paper" ? 40 : (scale == "desk" ? 12 : 2);
    } else if (name == "fig-mixed-ft-naive" || name == "fig-mixed-ft-unified") {
        s.variants = {Variant::Atomic, Variant::Atomic, Variant::Split, Variant::Compositional};
        s.train.epochs = scale == "paper" ? 40 : (scale == "desk" ? 12 : 2);
    } else if (name == "fig-mixed-ft-anchors") {
        s.variants = {Variant::Atomic, Variant::Atomic, Variant::Split, Variant::Compositional};
        s.anchors = {anchor_pair(0, 1, 8), anchor_pair(0, 2, 8), anchor_pair(0, 3, 8)};
        s.train.epochs = scale == "paper" ? 40 : (scale == "desk" ? 12 : 2);
    } else if (name == "fig-parallel-20") {
        const int m = scale == "paper" ? 20 : (scale == "smoke" ? 3 : 10);
        s.variants.assign(static_cast<size_t>(m), Variant::Atomic);
    } else if (name == "fig-parallel-100") {
        if (scale != "paper")
            throw std::invalid_argument("fig-parallel-100 ships paper-scale only");
        s.variants.assign(100, Variant::Atomic);
    } else if (name == "table-indirect-anchor") {
        s.variants = {Variant::Atomic, Variant::Atomic, Variant::Atomic};
        s.anchors = {anchor_pair(0, 1, 2), anchor_pair(0, 2, 2)};
    } else if (name == "seed-sweep") {
        s.variants.assign(5, Variant::Atomic);
        s.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    } else if (name == "table-intervention") {
        s.variants = {Variant::Atomic, Variant::Atomic};
    } else if (name == "smoke") {
        s.scale = "smoke";
        apply_scale_defaults(s);
        s.variants = {Variant::Atomic, Variant::Atomic};
    } else {
        throw std::invalid_argument("unknown preset: " + name);
    }
    return s;
}

std::vector<std::string> preset_names() {
    return {"monolingual-sanity", "table-anchor-effect", "table-choice-layer",
            "fig-bigfig-naive",   "fig-bigfig-anchors",  "fig-bigfig-unified",
            "fig-mixed-ft-naive", "fig-mixed-ft-anchors", "fig-mixed-ft-unified",
            "fig-parallel-20",    "fig-parallel-100",    "table-indirect-anchor",
            "seed-sweep",         "table-intervention",  "smoke"};
}

// ---- run directories ----------------------------------------------------------

std::filesystem::path default_runs_root() {
    if (const char* env = std::getenv("MOTHELLO_RUNS_DIR")) return fs::path(env);
    return fs::path("runs");
}

RunDir::RunDir(const fs::path& root, const ExperimentSpec& spec, const std::string& id_suffix)
    : spec_(spec) {
    run_id_ = spec.preset + "-" + spec.scale + "-s" + std::to_string(spec.seed) +
              (id_suffix.empty() ? "" : "-" + id_suffix) + "-" +
              spec.content_hash().substr(0, 8);
    dir_ = root / run_id_;
    if (fs::exists(dir_ / "manifest.json")) {
        try {
            const json m = json::parse(read_text_file(dir_ / "manifest.json"));
            if (m.at("status") == "complete") {
                already_complete_ = true;
                for (const auto& a : m.at("artifacts"))
                    artifacts_.push_back(a.get<std::string>());
                return;
            }
        } catch (...) {
        }
        fs::remove_all(dir_);  // stale incomplete run
    }
    fs::create_directories(dir_);
    fs::create_directories(dir_ / "checkpoints");
    fs::create_directories(dir_ / "matrices");
    fs::create_directories(dir_ / "curves");
    write_manifest("running");
    std::ofstream metrics(dir_ / "metrics.csv", std::ios::trunc);
    metrics << "metric,value,checkpoint,lang_a,lang_b,layer\n";
}

void RunDir::write_manifest(const std::string& status) {
    json m;
    m["format"] = "mothello-run-manifest";
    m["version"] = 1;
    m["run_id"] = run_id_;
    m["tool_version"] = kToolVersion;
    char when[64];
    std::time_t now = std::time(nullptr);
    std::strftime(when, sizeof when, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    m["created_at"] = when;
    m["jobs"] = spec_.jobs > 0 ? spec_.jobs : default_jobs();
    m["spec"] = json::parse(spec_.to_json());
    m["status"] = status;
    m["artifacts"] = artifacts_;
    write_text_file(dir_ / "manifest.json", m.dump(2));
}

void RunDir::append_metric(const MetricsRecord& rec) {
    std::ofstream out(dir_ / "metrics.csv", std::ios::app);
    out << rec.metric << ',' << fmt(rec.value) << ',' << rec.checkpoint << ',' << rec.lang_a << ','
        << rec.lang_b << ',' << rec.layer << '\n';
    out.flush();
}

void RunDir::add_artifact(const std::string& relative_path) { artifacts_.push_back(relative_path); }

void RunDir::write_matrix_csv(const std::string& name,
                              const std::vector<std::vector<double>>& cells) {
    std::ostringstream out;
    out << "probe_lang";
    for (size_t j = 0; j < cells.size(); ++j) out << ',' << j;
    out << '\n';
    for (size_t i = 0; i < cells.size(); ++i) {
        out << i;
        for (size_t j = 0; j < cells[i].size(); ++j) out << ',' << fmt(cells[i][j]);
        out << '\n';
    }
    const auto rel = "matrices/" + name + ".csv";
    write_text_file(dir_ / rel, out.str());
    add_artifact(rel);
}

void RunDir::write_curve_csv(const std::string& name, const std::vector<std::string>& header,
                             const std::vector<std::vector<double>>& rows) {
    std::ostringstream out;
    for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << fmt(row[i]);
        out << '\n';
    }
    const auto rel = "curves/" + name + ".csv";
    write_text_file(dir_ / rel, out.str());
    add_artifact(rel);
}

void RunDir::mark_complete() { write_manifest("complete"); }

std::vector<MetricsRecord> RunDir::read_metrics() const {
    std::vector<MetricsRecord> out;
    std::ifstream in(dir_ / "metrics.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        MetricsRecord r;
        std::stringstream ss(line);
        std::string field;
        std::getline(ss, r.metric, ',');
        std::getline(ss, field, ',');
        r.value = std::stod(field);
        std::getline(ss, r.checkpoint, ',');
        std::getline(ss, field, ',');
        r.lang_a = std::stoi(field);
        std::getline(ss, field, ',');
        r.lang_b = std::stoi(field);
        std::getline(ss, field, ',');
        r.layer = std::stoi(field);
        out.push_back(std::move(r));
    }
    return out;
}

// ---- shared pipeline helpers ---------------------------------------------------

std::vector<othello::GameRecord> fresh_games(uint64_t seed, const std::string& tag, int64_t count,
                                             int jobs) {
    if (jobs <= 0) jobs = default_jobs();
    Fnv1a h;
    h.update(tag);
    const uint64_t base = derive_seed(seed, h.value());
    std::vector<othello::GameRecord> games(static_cast<size_t>(count));
    parallel_chunks(count, jobs, [&](int, int64_t a, int64_t b) {
        for (int64_t i = a; i < b; ++i)
            games[static_cast<size_t>(i)] =
                othello::generate_game(derive_seed(base, static_cast<uint64_t>(i)));
    });
    return games;
}

namespace {

// Shared per-boundary judgment: greedy decode from the boundary's logits,
// requesting continuation logits for multi-token templates (cap 3 tokens);
// correct iff the decoded tokens all belong to the language and the move is
// legal on `board`. Unified mode takes the argmax class directly.
template <typename NextLogitsFn>
bool judge_boundary(const nn::RowVec<float>& logits0, NextLogitsFn&& next_logits,
                    const lang::LanguageSpec& language, bool unified,
                    const othello::Board& board) {
    static const auto unified_map = lang::UnifiedOutputMap::identity();
    if (unified) {
        int cls = 0;
        logits0.maxCoeff(&cls);
        const auto mv = unified_map.move_of_class(cls);
        return (othello::legal_mask(board) >> mv.index()) & 1;
    }
    auto dec = language.decoder();
    int tok = 0;
    logits0.maxCoeff(&tok);
    std::vector<lang::TokenId> appended;
    for (int step = 0; step < 3; ++step) {
        std::optional<int> slot;
        try {
            slot = dec.feed(tok, static_cast<size_t>(step));
        } catch (const lang::UndecodableToken&) {
            return false;  // decoded token not in this language
        }
        if (slot) {
            const auto mv = lang::cell_of_slot(*slot);
            return (othello::legal_mask(board) >> mv.index()) & 1;
        }
        if (step == 2) break;  // cap: no full move within 3 tokens
        appended.push_back(tok);
        const nn::RowVec<float> logits = next_logits(appended);
        logits.maxCoeff(&tok);
    }
    return false;
}

}  // namespace

double top1_legal_accuracy(const nn::Transformer<float>& model,
                           const std::vector<othello::GameRecord>& games,
                           const lang::LanguageSpec& language, int jobs) {
    if (jobs <= 0) jobs = default_jobs();
    const bool unified = model.config().unified;

    std::vector<int64_t> correct(static_cast<size_t>(jobs), 0);
    std::vector<int64_t> total(static_cast<size_t>(jobs), 0);
    parallel_chunks(static_cast<int64_t>(games.size()), jobs, [&](int chunk, int64_t g0, int64_t g1) {
        nn::Workspace<float> ws;
        nn::SeqCache<float> cache;
        nn::StepScratch<float> scratch;
        constexpr int kGamesPerBatch = 64;
        for (int64_t b0 = g0; b0 < g1; b0 += kGamesPerBatch) {
            const int64_t b1 = std::min(g1, b0 + kGamesPerBatch);
            std::vector<lang::TokenSequence> seqs;
            std::vector<othello::BoardTrace> traces;
            seqs.reserve(static_cast<size_t>(b1 - b0));
            traces.reserve(static_cast<size_t>(b1 - b0));
            for (int64_t g = b0; g < b1; ++g) {
                seqs.push_back(lang::translate(games[static_cast<size_t>(g)], language));
                traces.push_back(othello::simulate(games[static_cast<size_t>(g)]));
            }
            std::vector<const lang::TokenSequence*> ptrs;
            for (const auto& s : seqs) ptrs.push_back(&s);
            nn::TokenBatch batch = nn::make_standard_batch(ptrs, model.config().max_seq);
            batch.targets.clear();
            model.forward(ws, batch);

            for (size_t bi = 0; bi < seqs.size(); ++bi) {
                const auto& seq = seqs[bi];
                const auto& trace = traces[bi];
                bool cache_ready = false;
                for (size_t j = 0; j + 1 < seq.move_boundaries.size(); ++j) {
                    const int pos = static_cast<int>(bi) * batch.seq + seq.move_boundaries[j];
                    ++total[static_cast<size_t>(chunk)];
                    const nn::RowVec<float> logits0 = ws.logits.row(pos);
                    const auto next_logits =
                        [&](const std::vector<lang::TokenId>& appended) -> nn::RowVec<float> {
                        if (!cache_ready) {
                            model.prefill(cache, seq.tokens);
                            cache_ready = true;
                        }
                        scratch.reset(model.config(), 3);
                        nn::RowVec<float> out;
                        for (lang::TokenId t : appended)
                            out = model.speculative_step(cache, seq.move_boundaries[j] + 1,
                                                         scratch, t);
                        return out;
                    };
                    correct[static_cast<size_t>(chunk)] += judge_boundary(
                        logits0, next_logits, language, unified, trace.boards[j + 1]);
                }
            }
        }
    });
    int64_t c = 0, t = 0;
    for (int i = 0; i < jobs; ++i) {
        c += correct[static_cast<size_t>(i)];
        t += total[static_cast<size_t>(i)];
    }
    return t > 0 ? static_cast<double>(c) / static_cast<double>(t) : 0.0;
}

double top1_legal_accuracy(SequenceScorer& scorer, const std::vector<othello::GameRecord>& games,
                           const lang::LanguageSpec& language) {
    int64_t correct = 0, total = 0;
    for (const auto& game : games) {
        const auto seq = lang::translate(game, language);
        const auto trace = othello::simulate(game);
        const nn::Mat<float> logits = scorer.sequence_logits(seq.tokens);
        for (size_t j = 0; j + 1 < seq.move_boundaries.size(); ++j) {
            ++total;
            const std::vector<lang::TokenId> context(
                seq.tokens.begin(), seq.tokens.begin() + seq.move_boundaries[j] + 1);
            const auto next_logits =
                [&](const std::vector<lang::TokenId>& appended) -> nn::RowVec<float> {
                return scorer.continuation_logits(context, appended);
            };
            const nn::RowVec<float> logits0 = logits.row(seq.move_boundaries[j]);
            correct += judge_boundary(logits0, next_logits, language, scorer.unified(),
                                      trace.boards[j + 1]);
        }
    }
    return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

namespace {

struct Pipeline {
    ExperimentSpec spec;
    lang::LanguageFamily family;
    int jobs = 0;

    explicit Pipeline(const ExperimentSpec& s) : spec(s) {
        family = lang::build_family(static_cast<int>(s.variants.size()), s.variants, s.anchors,
                                    derive_seed(s.seed, 0xFA111ULL));
        jobs = s.jobs > 0 ? s.jobs : default_jobs();
    }

    nn::TransformerConfig model_config() const {
        nn::TransformerConfig cfg = spec.model;
        if (cfg.vocab <= 0) cfg.vocab = family.vocab_size;
        if (cfg.max_seq <= 0) cfg.max_seq = static_cast<int>(family.max_sequence_tokens());
        cfg.validate();
        return cfg;
    }

    corpus::CorpusSpec corpus_spec(const std::vector<corpus::SplitSpec>& splits) const {
        corpus::CorpusSpec cs;
        cs.family_hash = family.content_hash();
        cs.seed = derive_seed(spec.seed, 0xC0B905ULL);
        cs.prefix = corpus::default_prefix();
        cs.splits = splits;
        return cs;
    }

    // when set, probe games share the corpus prefix (used by transfer runs so
    // probing stays on the pretraining distribution)
    std::vector<othello::Move> probe_game_prefix;

    std::vector<othello::GameRecord> prefixed_games(const std::string& tag, int64_t count) const {
        if (probe_game_prefix.empty()) return fresh_games(spec.seed, tag, count, jobs);
        Fnv1a h;
        h.update(tag);
        const uint64_t base = derive_seed(spec.seed, h.value());
        std::vector<othello::GameRecord> games(static_cast<size_t>(count));
        parallel_chunks(count, jobs, [&](int, int64_t a, int64_t b) {
            for (int64_t i = a; i < b; ++i)
                games[static_cast<size_t>(i)] = corpus::prefix_constrained_game(
                    probe_game_prefix, derive_seed(base, static_cast<uint64_t>(i)));
        });
        return games;
    }

    std::vector<othello::GameRecord> probe_train_games(int language) const {
        return prefixed_games("probe_train_" + std::to_string(language), spec.corpus.probe_games);
    }
    std::vector<othello::GameRecord> probe_eval_games(int language) const {
        return prefixed_games("probe_eval_" + std::to_string(language),
                              spec.corpus.probe_eval_games);
    }
    std::vector<othello::GameRecord> top1_eval_games() const {
        return fresh_games(spec.seed, "top1_eval", spec.corpus.eval_games, jobs);
    }

    probes::Probe train_language_probe(const nn::Transformer<float>& model, int language,
                                       int layer) const {
        const auto ds = probes::collect_activations(model, probe_train_games(language),
                                                    family.language(language), layer, jobs);
        probes::ProbeConfig pc = spec.probe;
        pc.seed = derive_seed(spec.seed, 0x9B0B0000ULL + static_cast<uint64_t>(language));
        pc.jobs = jobs;
        return probes::train_probe(ds, pc);
    }

    probes::ActivationDataset eval_activations(const nn::Transformer<float>& model, int language,
                                               int layer) const {
        return probes::collect_activations(model, probe_eval_games(language),
                                           family.language(language), layer, jobs);
    }
};

void save_model_checkpoint(RunDir& run, const Pipeline& pipe, const nn::Transformer<float>& model,
                           const std::string& name, int epoch, double fraction, int64_t step,
                           const std::map<std::string, double>& metrics) {
    nn::CheckpointMeta meta;
    meta.config = model.config();
    meta.family_hash = pipe.family.content_hash();
    meta.epoch = epoch;
    meta.fraction = fraction;
    meta.step = step;
    meta.metrics = metrics;
    nn::save_checkpoint(run.path() / "checkpoints" / name, model, meta);
    run.add_artifact("checkpoints/" + name + ".bin");
    run.add_artifact("checkpoints/" + name + ".json");
}

}  // namespace

LayerScanResult layer_scan(const nn::Transformer<float>& model, const lang::LanguageFamily& family,
                           const ExperimentSpec& spec, RunDir* run) {
    Pipeline pipe(spec);
    pipe.family = family;
    const int L = model.config().layers;
    LayerScanResult scan;

    const auto train_sets = probes::collect_activations_all_layers(
        model, pipe.probe_train_games(0), family.language(0), pipe.jobs);
    const auto eval_sets_own = probes::collect_activations_all_layers(
        model, pipe.probe_eval_games(0), family.language(0), pipe.jobs);
    std::vector<probes::ActivationDataset> eval_sets_other;
    if (family.num_languages() > 1)
        eval_sets_other = probes::collect_activations_all_layers(
            model, pipe.probe_eval_games(1), family.language(1), pipe.jobs);

    for (int l = 0; l <= L; ++l) {
        probes::ProbeConfig pc = spec.probe;
        pc.seed = derive_seed(spec.seed, 0x5CA40000ULL + static_cast<uint64_t>(l));
        pc.jobs = pipe.jobs;
        const auto probe = probes::train_probe(train_sets[static_cast<size_t>(l)], pc);
        scan.same_acc.push_back(
            probes::probe_accuracy(probe, eval_sets_own[static_cast<size_t>(l)]));
        if (!eval_sets_other.empty())
            scan.cross_acc.push_back(probes::cross_alignment_accuracy(
                probe, eval_sets_other[static_cast<size_t>(l)]));
        if (run) {
            run->append_metric({"same_probe_acc", scan.same_acc.back(), "final", 0, 0, l});
            if (!eval_sets_other.empty())
                run->append_metric({"cross_probe_acc", scan.cross_acc.back(), "final", 0, 1, l});
        }
    }
    scan.best_layer = static_cast<int>(
        std::max_element(scan.same_acc.begin(), scan.same_acc.end()) - scan.same_acc.begin());
    return scan;
}

MonolingualResult run_monolingual(const ExperimentSpec& spec, const fs::path& root) {
    Pipeline pipe(spec);
    RunDir run(root, spec);
    MonolingualResult out;
    out.run_id = run.run_id();
    if (run.already_complete()) {
        for (const auto& r : run.read_metrics()) {
            if (r.metric == "top1_legal_acc") out.top1 = r.value;
            if (r.metric == "same_probe_acc" && r.checkpoint == "best_layer") {
                out.probe_acc = r.value;
                out.scan.best_layer = r.layer;
            }
        }
        return out;
    }

    pipe.family.save((run.path() / "family.json").string());
    run.add_artifact("family.json");

    const auto splits = corpus::generate_corpus(
        pipe.corpus_spec({corpus::SplitSpec{"pretrain", spec.corpus.general, false, std::nullopt}}),
        pipe.family, pipe.jobs);

    nn::Transformer<float> model(pipe.model_config());
    model.init_params(derive_seed(spec.seed, 0x11170000ULL));
    nn::TrainConfig tc = spec.train;
    tc.seed = derive_seed(spec.seed, 0x7121A11ULL);
    tc.jobs = pipe.jobs;
    const auto tr = nn::train(model, splits[0], nullptr, pipe.family, tc);
    nn::write_train_log(run.path() / "train_log.csv", tr.history);
    run.add_artifact("train_log.csv");
    run.append_metric({"loss", tr.final_train_loss, "final", 0, -1, -1});
    save_model_checkpoint(run, pipe, model, "final", tr.epochs_run, 1.0, 0, {});

    out.scan = layer_scan(model, pipe.family, spec, &run);
    const int layer = spec.probe_layer >= 0 ? spec.probe_layer : out.scan.best_layer;
    out.probe_acc = out.scan.same_acc[static_cast<size_t>(layer)];
    run.append_metric({"same_probe_acc", out.probe_acc, "best_layer", 0, 0, layer});

    out.top1 = top1_legal_accuracy(model, pipe.top1_eval_games(), pipe.family.language(0), pipe.jobs);
    run.append_metric({"top1_legal_acc", out.top1, "final", 0, -1, -1});

    std::vector<std::vector<double>> scan_rows;
    for (size_t l = 0; l < out.scan.same_acc.size(); ++l)
        scan_rows.push_back({static_cast<double>(l), out.scan.same_acc[l]});
    run.write_curve_csv("layer_scan", {"layer", "same_probe_acc"}, scan_rows);
    run.mark_complete();
    return out;
}

AlignmentRunResult run_alignment_cell(const ExperimentSpec& spec, const fs::path& root) {
    Pipeline pipe(spec);
    RunDir run(root, spec);
    AlignmentRunResult out;
    out.run_id = run.run_id();
    const int M = pipe.family.num_languages();
    if (run.already_complete()) {
        out.matrix.assign(static_cast<size_t>(M), std::vector<double>(static_cast<size_t>(M), 0.0));
        for (const auto& r : run.read_metrics()) {
            if (r.metric == "cross_probe_acc" || r.metric == "same_probe_acc") {
                if (r.checkpoint == "final" && r.lang_a >= 0 && r.lang_b >= 0) {
                    out.matrix[static_cast<size_t>(r.lang_a)][static_cast<size_t>(r.lang_b)] =
                        r.value;
                    out.layer = r.layer;
                }
            }
            if (r.metric == "top1_legal_acc" && r.lang_a == 0) out.top1_lang0 = r.value;
        }
        return out;
    }

    pipe.family.save((run.path() / "family.json").string());
    run.add_artifact("family.json");
    const auto splits = corpus::generate_corpus(
        pipe.corpus_spec({corpus::SplitSpec{"pretrain", spec.corpus.general, false, std::nullopt}}),
        pipe.family, pipe.jobs);

    nn::Transformer<float> model(pipe.model_config());
    model.init_params(derive_seed(spec.seed, 0x11170000ULL));
    nn::TrainConfig tc = spec.train;
    tc.seed = derive_seed(spec.seed, 0x7121A11ULL);
    tc.jobs = pipe.jobs;
    const auto tr = nn::train(model, splits[0], nullptr, pipe.family, tc);
    nn::write_train_log(run.path() / "train_log.csv", tr.history);
    run.add_artifact("train_log.csv");
    run.append_metric({"loss", tr.final_train_loss, "final", 0, -1, -1});
    save_model_checkpoint(run, pipe, model, "final", tr.epochs_run, 1.0, 0, {});

    int layer = spec.probe_layer;
    if (layer < 0) {
        const auto scan = layer_scan(model, pipe.family, spec, nullptr);
        layer = scan.best_layer;
    }
    out.layer = layer;
    run.append_metric({"loss", static_cast<double>(layer), "probe_layer", -1, -1, layer});

    std::vector<probes::Probe> lang_probes;
    std::vector<probes::ActivationDataset> eval_sets;
    for (int k = 0; k < M; ++k) {
        lang_probes.push_back(pipe.train_language_probe(model, k, layer));
        eval_sets.push_back(pipe.eval_activations(model, k, layer));
    }
    out.matrix = probes::pairwise_alignment_matrix(lang_probes, eval_sets);
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < M; ++j)
            run.append_metric({i == j ? "same_probe_acc" : "cross_probe_acc", out.matrix[i][j],
                               "final", i, j, layer});
    run.write_matrix_csv("alignment", out.matrix);

    out.top1_lang0 =
        top1_legal_accuracy(model, pipe.top1_eval_games(), pipe.family.language(0), pipe.jobs);
    run.append_metric({"top1_legal_acc", out.top1_lang0, "final", 0, -1, -1});
    run.mark_complete();
    return out;
}

AlignmentRunResult run_naive_alignment(const ExperimentSpec& spec, const fs::path& root) {
    return run_alignment_cell(spec, root);
}

std::vector<SweepCell> run_anchor_sweep(const ExperimentSpec& spec, const fs::path& root,
                                        const std::vector<int>& anchor_counts,
                                        const std::vector<std::string>& pair_types) {
    using lang::Variant;
    Fnv1a cells_id;
    for (int n : anchor_counts) cells_id.update_u64(static_cast<uint64_t>(n));
    for (const auto& p : pair_types) cells_id.update(p);
    RunDir sweep_run(root, spec, "sweep-" + cells_id.hex().substr(0, 8));
    std::vector<SweepCell> cells;

    for (const auto& pair_type : pair_types) {
        std::vector<Variant> variants;
        if (pair_type == "Atom+Atom")
            variants = {Variant::Atomic, Variant::Atomic};
        else if (pair_type == "Atom+Split")
            variants = {Variant::Atomic, Variant::Split};
        else if (pair_type == "Atom+Compositional")
            variants = {Variant::Atomic, Variant::Compositional};
        else
            throw std::invalid_argument("unknown pair type: " + pair_type);

        for (int n : anchor_counts) {
            SweepCell cell;
            cell.pair_type = pair_type;
            cell.anchors = n;
            for (uint64_t seed : spec.seeds) {
                ExperimentSpec cs = spec;
                cs.preset = "table-anchor-effect-cell";
                cs.variants = variants;
                cs.anchors.clear();
                if (n > 0) cs.anchors = {anchor_pair(0, 1, n)};
                cs.seed = seed;
                cs.seeds = {seed};
                const auto cell_res = run_alignment_cell(cs, root);
                cell.per_seed_cross.push_back(cell_res.matrix[0][1]);
                cell.per_seed_same.push_back(cell_res.matrix[0][0]);
            }
            cell.cross_acc =
                std::accumulate(cell.per_seed_cross.begin(), cell.per_seed_cross.end(), 0.0) /
                static_cast<double>(cell.per_seed_cross.size());
            cells.push_back(cell);
            if (!sweep_run.already_complete())
                sweep_run.append_metric({"cross_probe_acc", cell.cross_acc,
                                         pair_type + "+a" + std::to_string(n), 0, 1, -1});
        }
    }

    if (!sweep_run.already_complete()) {
        std::ostringstream table;
        table << "pair_type";
        for (int n : anchor_counts) table << ",anchors_" << n;
        table << '\n';
        size_t idx = 0;
        for (const auto& pair_type : pair_types) {
            table << pair_type;
            for (size_t c = 0; c < anchor_counts.size(); ++c) table << ',' << fmt(cells[idx + c].cross_acc);
            table << '\n';
            idx += anchor_counts.size();
        }
        write_text_file(sweep_run.path() / "matrices" / "anchor_sweep.csv", table.str());
        sweep_run.add_artifact("matrices/anchor_sweep.csv");
        sweep_run.mark_complete();
    }
    return cells;
}

TransferResult run_transfer(const ExperimentSpec& spec, const fs::path& root, TransferMode mode) {
    ExperimentSpec s = spec;
    s.model.unified = mode == TransferMode::Unified;
    Pipeline pipe(s);
    RunDir run(root, s);
    TransferResult out;
    out.run_id = run.run_id();
    const int M = pipe.family.num_languages();

    if (run.already_complete()) {
        std::map<int, TransferPoint> pts;
        std::map<int, std::vector<double>> per_lang;
        for (const auto& r : run.read_metrics()) {
            if (r.checkpoint == "pretrained") {
                if (r.metric == "top1_legal_acc" && r.lang_a == 0) out.pre_top1_src = r.value;
                if (r.metric == "top1_legal_acc" && r.lang_a == 1) out.pre_top1_tgt = r.value;
                if (r.metric == "cross_probe_acc") out.pre_cross_alignment = r.value;
            } else if (r.checkpoint.rfind("ck", 0) == 0) {
                const int ord = std::stoi(r.checkpoint.substr(2));
                auto& p = pts[ord];
                p.ordinal = ord;
                if (r.metric == "top1_legal_acc") {
                    auto& v = per_lang[ord];
                    if (v.size() < static_cast<size_t>(M)) v.resize(static_cast<size_t>(M), 0.0);
                    if (r.lang_a >= 0 && r.lang_a < M) v[static_cast<size_t>(r.lang_a)] = r.value;
                }
                if (r.metric == "cross_probe_acc") p.cross_alignment = r.value;
            }
        }
        for (auto& [ord, p] : pts) {
            const auto& v = per_lang[ord];
            if (!v.empty()) {
                p.top1_src = v[0];
                double t = 0.0;
                for (size_t k = 1; k < v.size(); ++k) t += v[k];
                p.top1_tgt = v.size() > 1 ? t / static_cast<double>(v.size() - 1) : 0.0;
                out.per_language_top1.push_back(v);
            }
            out.points.push_back(p);
        }
        return out;
    }

    pipe.family.save((run.path() / "family.json").string());
    run.add_artifact("family.json");
    // probes in transfer runs stay on the pretraining distribution
    pipe.probe_game_prefix = corpus::default_prefix();

    const corpus::CorpusSpec cspec = pipe.corpus_spec(
        {corpus::SplitSpec{"pretrain", s.corpus.pretrain, true, std::nullopt},
         corpus::SplitSpec{"pretrain_validation", s.corpus.validation, true, std::nullopt},
         corpus::SplitSpec{"finetune", s.corpus.finetune, false, 0}});
    const auto splits = corpus::generate_corpus(cspec, pipe.family, pipe.jobs);
    corpus::write_corpus_dir(run.path() / "corpus", cspec, pipe.family, splits);
    run.add_artifact("corpus/manifest.json");

    nn::Transformer<float> model(pipe.model_config());
    model.init_params(derive_seed(s.seed, 0x11170000ULL));
    nn::TrainConfig tc = s.train;
    tc.seed = derive_seed(s.seed, 0x7121A11ULL);
    tc.jobs = pipe.jobs;
    const auto pre = nn::train(model, splits[0], &splits[1], pipe.family, tc);
    nn::write_train_log(run.path() / "train_log.csv", pre.history);
    run.add_artifact("train_log.csv");
    run.append_metric({"loss", pre.best_validation_loss, "pretrained", -1, -1, -1});
    save_model_checkpoint(run, pipe, model, "pretrained", pre.epochs_run, 1.0, 0, {});

    int layer = s.probe_layer;
    if (layer < 0) layer = layer_scan(model, pipe.family, s, nullptr).best_layer;

    const auto eval_games = pipe.top1_eval_games();
    auto measure = [&](const nn::Transformer<float>& m, const std::string& ck)
        -> std::pair<std::vector<double>, double> {
        std::vector<double> top1(static_cast<size_t>(M), 0.0);
        for (int k = 0; k < M; ++k) {
            top1[static_cast<size_t>(k)] =
                top1_legal_accuracy(m, eval_games, pipe.family.language(k), pipe.jobs);
            run.append_metric({"top1_legal_acc", top1[static_cast<size_t>(k)], ck, k, -1, -1});
        }
        const auto probe0 = pipe.train_language_probe(m, 0, layer);
        double cross = 0.0;
        for (int k = 1; k < M; ++k)
            cross += probes::cross_alignment_accuracy(probe0, pipe.eval_activations(m, k, layer));
        cross /= std::max(1, M - 1);
        run.append_metric({"cross_probe_acc", cross, ck, 0, M > 1 ? 1 : 0, layer});
        return {top1, cross};
    };

    {
        const auto [top1, cross] = measure(model, "pretrained");
        out.pre_top1_src = top1[0];
        double t = 0.0;
        for (size_t k = 1; k < top1.size(); ++k) t += top1[k];
        out.pre_top1_tgt = top1.size() > 1 ? t / static_cast<double>(top1.size() - 1) : 0.0;
        out.pre_cross_alignment = cross;
    }

    nn::TrainConfig fc = s.finetune_train;
    fc.seed = derive_seed(s.seed, 0xF17E0000ULL);
    fc.jobs = pipe.jobs;
    const auto sink = [&](const nn::CheckpointInfo& info, const nn::Transformer<float>& m) {
        char name[16];
        std::snprintf(name, sizeof name, "ck%02d", info.ordinal);
        save_model_checkpoint(run, pipe, m, name, info.epoch, info.fraction, info.step, {});
        const auto [top1, cross] = measure(m, name);
        TransferPoint p;
        p.ordinal = info.ordinal;
        p.epoch = info.epoch;
        p.fraction = info.fraction;
        p.top1_src = top1[0];
        double t = 0.0;
        for (size_t k = 1; k < top1.size(); ++k) t += top1[k];
        p.top1_tgt = top1.size() > 1 ? t / static_cast<double>(top1.size() - 1) : 0.0;
        p.cross_alignment = cross;
        out.points.push_back(p);
        out.per_language_top1.push_back(top1);
    };
    nn::train(model, splits[2], nullptr, pipe.family, fc, sink);

    for (int k = 0; k < M; ++k) {
        std::vector<std::vector<double>> rows;
        for (size_t i = 0; i < out.points.size(); ++i)
            rows.push_back({static_cast<double>(out.points[i].ordinal),
                            static_cast<double>(out.points[i].epoch), out.points[i].fraction,
                            out.per_language_top1[i][static_cast<size_t>(k)]});
        run.write_curve_csv("top1_lang" + std::to_string(k),
                            {"checkpoint", "epoch", "fraction", "top1_legal_acc"}, rows);
    }
    {
        std::vector<std::vector<double>> rows;
        for (const auto& p : out.points)
            rows.push_back({static_cast<double>(p.ordinal), static_cast<double>(p.epoch),
                            p.fraction, p.cross_alignment});
        run.write_curve_csv("alignment", {"checkpoint", "epoch", "fraction", "cross_probe_acc"},
                            rows);
    }
    run.mark_complete();
    return out;
}

IndirectAnchorResult run_indirect_anchor(const ExperimentSpec& spec, const fs::path& root) {
    const auto cell = run_alignment_cell(spec, root);
    IndirectAnchorResult out;
    out.run_id = cell.run_id;
    out.acc_01 = cell.matrix[0][1];
    out.acc_02 = cell.matrix[0][2];
    out.acc_12 = cell.matrix[1][2];
    return out;
}

SeedSweepResult run_seed_sweep(const ExperimentSpec& spec, const fs::path& root) {
    SeedSweepResult out;
    for (uint64_t seed : spec.seeds) {
        ExperimentSpec cs = spec;
        cs.preset = "seed-sweep-cell";
        cs.seed = seed;
        cs.seeds = {seed};
        const auto cell = run_alignment_cell(cs, root);
        out.run_ids.push_back(cell.run_id);
        double min_cross = 1.0;
        const size_t m = cell.matrix.size();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < m; ++j)
                if (i != j) min_cross = std::min(min_cross, cell.matrix[i][j]);
        out.seeds_fully_aligned += min_cross >= 0.9;
        out.matrices.push_back(cell.matrix);
    }
    return out;
}

namespace {

struct EditCase {
    std::vector<lang::TokenId> tokens;   // context in language 0
    othello::Board true_board;
    othello::Board edited_board;
    probes::BoardLabel target_label;
};

std::vector<EditCase> make_edit_cases(const Pipeline& pipe, int edits, uint64_t seed) {
    std::vector<EditCase> cases;
    Rng rng(derive_seed(seed, 0xED17ULL));
    int64_t game_idx = 0;
    const auto pool = fresh_games(seed, "intervention", edits * 4, pipe.jobs);
    while (static_cast<int>(cases.size()) < edits &&
           game_idx < static_cast<int64_t>(pool.size())) {
        const auto& game = pool[static_cast<size_t>(game_idx++)];
        if (game.moves.size() < 12) continue;
        const auto prefix_len =
            8 + rng.next_below(std::min<uint64_t>(game.moves.size() - 8, 40));
        othello::GameRecord prefix;
        prefix.moves.assign(game.moves.begin(), game.moves.begin() + static_cast<long>(prefix_len));
        const auto trace = othello::simulate(prefix);
        const othello::Board& board = trace.boards.back();

        // flip one occupied tile's color so that the legal-move set changes
        std::vector<int> occupied;
        for (int i = 0; i < 64; ++i)
            if (board.tile(i) != othello::Tile::Empty) occupied.push_back(i);
        rng.shuffle(occupied);
        for (int tile : occupied) {
            othello::Board edited = board;
            const uint64_t bit = 1ULL << tile;
            if (edited.black & bit) {
                edited.black &= ~bit;
                edited.white |= bit;
            } else {
                edited.white &= ~bit;
                edited.black |= bit;
            }
            if (othello::legal_mask(edited) == othello::legal_mask(board)) continue;
            if (othello::legal_mask(edited) == 0) continue;
            EditCase ec;
            ec.tokens = lang::translate(prefix, pipe.family.language(0)).tokens;
            ec.true_board = board;
            ec.edited_board = edited;
            ec.target_label = probes::board_label(edited);
            cases.push_back(std::move(ec));
            break;
        }
    }
    if (static_cast<int>(cases.size()) < edits)
        throw std::runtime_error("could not sample enough intervention edits");
    return cases;
}

struct ConditionStats {
    double sum = 0.0;
    int counted = 0;
    int skipped = 0;
    double mean() const { return counted ? sum / counted : 0.0; }
};

}  // namespace

InterventionSummary run_intervention_validation(const ExperimentSpec& spec, const fs::path& root,
                                                int edits) {
    using lang::Variant;
    RunDir run(root, spec, "intervention");

    ExperimentSpec aligned_spec = spec;
    aligned_spec.preset = "table-anchor-effect-cell";
    aligned_spec.variants = {Variant::Atomic, Variant::Atomic};
    aligned_spec.anchors = {anchor_pair(0, 1, 4)};
    aligned_spec.seeds = {aligned_spec.seed};
    ExperimentSpec naive_spec = aligned_spec;
    naive_spec.anchors.clear();

    const auto aligned_cell = run_alignment_cell(aligned_spec, root);
    const auto naive_cell = run_alignment_cell(naive_spec, root);

    InterventionSummary out;
    out.edits = edits;
    if (run.already_complete()) {
        for (const auto& r : run.read_metrics()) {
            if (r.metric != "intervention_error") continue;
            if (r.checkpoint == "original_aligned") out.original_aligned = r.value;
            if (r.checkpoint == "cross_aligned") out.cross_aligned = r.value;
            if (r.checkpoint == "original_nonaligned") out.original_nonaligned = r.value;
            if (r.checkpoint == "cross_nonaligned") out.cross_nonaligned = r.value;
            if (r.checkpoint == "null_aligned") out.null_aligned = r.value;
            if (r.checkpoint == "null_nonaligned") out.null_nonaligned = r.value;
        }
        return out;
    }

    probes::InterventionConfig icfg;
    Pipeline pipe(aligned_spec);
    const auto cases = make_edit_cases(pipe, edits, spec.seed);

    struct ModelSide {
        std::string tag;
        nn::Transformer<float> model;
        int layer;
        probes::Probe original, cross;
    };
    std::vector<ModelSide> sides;
    for (const auto& [tag, cell, cell_spec] :
         {std::tuple{std::string("aligned"), &aligned_cell, &aligned_spec},
          std::tuple{std::string("nonaligned"), &naive_cell, &naive_spec}}) {
        RunDir cell_run(root, *cell_spec);
        ModelSide side{tag,
                       nn::load_checkpoint(cell_run.path() / "checkpoints" / "final"),
                       cell->layer,
                       {},
                       {}};
        Pipeline cell_pipe(*cell_spec);
        side.original = cell_pipe.train_language_probe(side.model, 0, side.layer);
        side.cross = cell_pipe.train_language_probe(side.model, 1, side.layer);
        sides.push_back(std::move(side));
    }

    std::map<std::string, ConditionStats> stats;
    for (auto& side : sides) {
        nn::SeqCache<float> cache;
        for (const auto& ec : cases) {
            // null baseline: the unedited model's prediction scored against
            // the edited board; needs no probe and no optimization
            side.model.prefill(cache, ec.tokens);
            const int last = cache.len - 1;
            const nn::RowVec<float> original_act =
                cache.resid[static_cast<size_t>(side.layer)].row(last);
            const auto null_logits =
                side.model.recompute_from_layer(cache, last, side.layer, original_act);
            const float null_max = null_logits.maxCoeff();
            nn::RowVec<float> null_dist = (null_logits.array() - null_max).exp();
            null_dist /= null_dist.sum();
            stats["null_" + side.tag].sum += probes::intervention_error(
                null_dist, ec.edited_board, pipe.family.language(0));
            ++stats["null_" + side.tag].counted;

            for (const auto& [probe_tag, probe] :
                 {std::pair{std::string("original"), &side.original},
                  std::pair{std::string("cross"), &side.cross}}) {
                const std::string key = probe_tag + "_" + side.tag;
                try {
                    const auto res = probes::intervene(side.model, *probe, ec.tokens,
                                                       ec.target_label, side.layer, icfg);
                    stats[key].sum += probes::intervention_error(
                        res.distribution, ec.edited_board, pipe.family.language(0));
                    ++stats[key].counted;
                } catch (const probes::NoConvergence&) {
                    ++stats[key].skipped;
                }
            }
        }
    }

    out.original_aligned = stats["original_aligned"].mean();
    out.cross_aligned = stats["cross_aligned"].mean();
    out.original_nonaligned = stats["original_nonaligned"].mean();
    out.cross_nonaligned = stats["cross_nonaligned"].mean();
    out.null_aligned = stats["null_aligned"].mean();
    out.null_nonaligned = stats["null_nonaligned"].mean();
    for (const auto& [key, st] : stats) {
        run.append_metric({"intervention_error", st.mean(), key, 0, 0, -1});
        run.append_metric({"intervention_error", static_cast<double>(st.counted), key + "_n", 0, 0, -1});
        out.skipped_nonconverged += st.skipped;
    }
    run.mark_complete();
    return out;
}

SmokeResult run_smoke(const ExperimentSpec& spec, const fs::path& root,
                      const std::string& id_suffix) {
    Pipeline pipe(spec);
    RunDir run(root, spec, id_suffix);
    SmokeResult out;
    out.run_id = run.run_id();
    out.run_path = run.path();
    if (run.already_complete()) {
        out.corpus_hash = hash_file(run.path() / "corpus" / "pretrain.txt");
        out.metrics_hash = hash_file(run.path() / "metrics.csv");
        return out;
    }

    pipe.family.save((run.path() / "family.json").string());
    run.add_artifact("family.json");
    const auto cspec = pipe.corpus_spec(
        {corpus::SplitSpec{"pretrain", spec.corpus.pretrain, true, std::nullopt},
         corpus::SplitSpec{"pretrain_validation", spec.corpus.validation, true, std::nullopt},
         corpus::SplitSpec{"finetune", spec.corpus.finetune, false, 0}});
    const auto splits = corpus::generate_corpus(cspec, pipe.family, pipe.jobs);
    corpus::write_corpus_dir(run.path() / "corpus", cspec, pipe.family, splits);
    run.add_artifact("corpus/manifest.json");

    nn::Transformer<float> model(pipe.model_config());
    model.init_params(derive_seed(spec.seed, 0x11170000ULL));
    nn::TrainConfig tc = spec.train;
    tc.seed = derive_seed(spec.seed, 0x7121A11ULL);
    tc.jobs = pipe.jobs;
    const auto pre = nn::train(model, splits[0], &splits[1], pipe.family, tc);
    nn::write_train_log(run.path() / "train_log.csv", pre.history);
    run.add_artifact("train_log.csv");
    for (const auto& row : pre.history)
        if (row.split == "validation")
            run.append_metric({"loss", row.loss, "pretrained", -1, -1, -1});
    save_model_checkpoint(run, pipe, model, "pretrained", pre.epochs_run, 1.0, 0, {});

    const int layer = spec.probe_layer >= 0 ? spec.probe_layer : spec.model.layers / 2;
    const auto eval_games = pipe.top1_eval_games();
    nn::TrainConfig fc = spec.finetune_train;
    fc.seed = derive_seed(spec.seed, 0xF17E0000ULL);
    fc.jobs = pipe.jobs;
    const auto sink = [&](const nn::CheckpointInfo& info, const nn::Transformer<float>& m) {
        char name[16];
        std::snprintf(name, sizeof name, "ck%02d", info.ordinal);
        for (int k = 0; k < pipe.family.num_languages(); ++k)
            run.append_metric({"top1_legal_acc",
                               top1_legal_accuracy(m, eval_games, pipe.family.language(k), pipe.jobs),
                               name, k, -1, -1});
        const auto probe0 = pipe.train_language_probe(m, 0, layer);
        run.append_metric({"cross_probe_acc",
                           probes::cross_alignment_accuracy(
                               probe0, pipe.eval_activations(m, 1, layer)),
                           name, 0, 1, layer});
    };
    nn::train(model, splits[2], nullptr, pipe.family, fc, sink);
    run.mark_complete();
    out.corpus_hash = hash_file(run.path() / "corpus" / "pretrain.txt");
    out.metrics_hash = hash_file(run.path() / "metrics.csv");
    return out;
}

int run_preset(const ExperimentSpec& spec, const fs::path& root) {
    const std::string& name = spec.preset;
    if (name == "monolingual-sanity") {
        run_monolingual(spec, root);
    } else if (name == "table-anchor-effect") {
        run_anchor_sweep(spec, root, {0, 1, 2, 4},
                         {"Atom+Atom", "Atom+Split", "Atom+Compositional"});
    } else if (name == "table-choice-layer") {
        ExperimentSpec cs = spec;
        cs.probe_layer = -1;
        run_alignment_cell(cs, root);
    } else if (name == "fig-bigfig-naive" || name == "fig-mixed-ft-naive") {
        run_transfer(spec, root, TransferMode::Naive);
    } else if (name == "fig-bigfig-anchors" || name == "fig-mixed-ft-anchors") {
        run_transfer(spec, root, TransferMode::Anchors);
    } else if (name == "fig-bigfig-unified" || name == "fig-mixed-ft-unified") {
        run_transfer(spec, root, TransferMode::Unified);
    } else if (name == "fig-parallel-20" || name == "fig-parallel-100") {
        run_naive_alignment(spec, root);
    } else if (name == "table-indirect-anchor") {
        run_indirect_anchor(spec, root);
        ExperimentSpec four = spec;
        four.anchors = {anchor_pair(0, 1, 4), anchor_pair(0, 2, 4)};
        run_indirect_anchor(four, root);
    } else if (name == "seed-sweep") {
        run_seed_sweep(spec, root);
    } else if (name == "table-intervention") {
        run_intervention_validation(spec, root);
    } else if (name == "smoke") {
        run_smoke(spec, root);
    } else {
        throw std::invalid_argument("unknown preset: " + name);
    }
    return 0;
}

}  // namespace mothello::exp
