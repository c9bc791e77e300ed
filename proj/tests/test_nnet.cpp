#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mothello/corpus.hpp"
#include "mothello/training.hpp"

using namespace mothello;
using namespace mothello::nn;

namespace {

TransformerConfig tiny_config() {
    TransformerConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.dim = 16;
    cfg.max_seq = 8;
    cfg.vocab = 24;
    return cfg;
}

TokenBatch random_batch(const TransformerConfig& cfg, int B, int T, uint64_t seed) {
    Rng rng(seed);
    TokenBatch batch;
    batch.batch = B;
    batch.seq = T;
    batch.tokens.resize(static_cast<size_t>(B) * T);
    for (auto& t : batch.tokens) t = 1 + static_cast<int32_t>(rng.next_below(cfg.vocab - 1));
    batch.targets.assign(batch.tokens.size(), -1);
    for (int b = 0; b < B; ++b)
        for (int t = 0; t + 1 < T; ++t)
            batch.targets[static_cast<size_t>(b) * T + t] =
                batch.tokens[static_cast<size_t>(b) * T + t + 1];
    return batch;
}

corpus::DatasetSplit tiny_split(const lang::LanguageFamily& fam, int64_t n, uint64_t seed,
                                const char* name = "pretrain") {
    corpus::CorpusSpec spec;
    spec.seed = seed;
    spec.splits = {corpus::SplitSpec{name, n, false, std::nullopt}};
    return std::move(corpus::generate_corpus(spec, fam, 1).front());
}

}  // namespace

TEST_CASE("forward shapes and softmax normalization") {
    auto cfg = tiny_config();
    Transformer<float> model(cfg);
    model.init_params(1);
    Workspace<float> ws;
    const auto batch = random_batch(cfg, 3, 8, 2);
    model.forward(ws, batch);
    CHECK(ws.logits.rows() == 3 * 8);
    CHECK(ws.logits.cols() == cfg.vocab);
    for (int i = 0; i < ws.logits.rows(); ++i) {
        const auto row = ws.logits.row(i);
        const float m = row.maxCoeff();
        const float z = (row.array() - m).exp().sum();
        const float sum = ((row.array() - m).exp() / z).sum();
        CHECK(sum == doctest::Approx(1.0f).epsilon(1e-5));
    }
}

TEST_CASE("causality: perturbing position j leaves earlier positions unchanged") {
    auto cfg = tiny_config();
    Transformer<float> model(cfg);
    model.init_params(3);
    auto batch = random_batch(cfg, 1, 8, 4);
    Workspace<float> ws_a, ws_b;
    model.forward(ws_a, batch);

    const int j = 5;
    batch.tokens[j] = batch.tokens[j] == 1 ? 2 : 1;
    model.forward(ws_b, batch);

    for (int t = 0; t < j; ++t) {
        CHECK(ws_a.logits.row(t) == ws_b.logits.row(t));
        // every exposed layer activation is causal too, not just logits
        for (int l = 0; l <= cfg.layers; ++l)
            CHECK(ws_a.residual(l).row(t) == ws_b.residual(l).row(t));
    }
    bool later_changed = false;
    for (int t = j; t < 8; ++t)
        if (ws_a.logits.row(t) != ws_b.logits.row(t)) later_changed = true;
    CHECK(later_changed);
}

TEST_CASE("uniform logits loss equals ln(vocab)") {
    auto cfg = tiny_config();
    cfg.vocab = 121;
    Transformer<float> model(cfg);  // zero params -> zero logits -> uniform
    Workspace<float> ws;
    const auto batch = random_batch(cfg, 2, 8, 5);
    model.forward(ws, batch);
    const double l = model.loss(ws, batch);
    CHECK(l == doctest::Approx(std::log(121.0)).epsilon(1e-4));
}

TEST_CASE("all-masked loss is zero with zero gradient") {
    auto cfg = tiny_config();
    Transformer<float> model(cfg);
    model.init_params(7);
    Workspace<float> ws;
    auto batch = random_batch(cfg, 2, 6, 6);
    std::fill(batch.targets.begin(), batch.targets.end(), -1);
    model.forward(ws, batch);
    CHECK(model.loss(ws, batch) == 0.0);
    nn::AlignedVec<float> grad(static_cast<size_t>(model.num_params()), 0.0f);
    model.backward(ws, batch, grad);
    for (float g : grad) CHECK(g == 0.0f);
}

TEST_CASE("gradient check") {
    auto cfg = tiny_config();
    const auto batch = random_batch(cfg, 2, 8, 11);

    SUBCASE("double precision") {
        Transformer<double> model(cfg);
        model.init_params(13);
        const double err = gradient_check<double>(model, batch, 200, 17, 1e-5, 1e-4);
        CHECK(err <= 1e-6);
    }
    SUBCASE("single precision") {
        Transformer<float> model(cfg);
        model.init_params(13);
        const float err = gradient_check<float>(model, batch, 200, 17, 1e-4, 1e-3f);
        CHECK(err <= 1e-3f);
    }
    SUBCASE("zeroed analytic gradient is detected") {
        Transformer<float> model(cfg);
        model.init_params(13);
        // a broken backward producing zero gradients yields rel err ~ 1:
        // simulate by comparing zero against finite differences directly
        Workspace<float> ws;
        Rng rng(19);
        float max_rel = 0.0f;
        auto& w = model.params();
        for (int c = 0; c < 20; ++c) {
            const auto i = static_cast<size_t>(rng.next_below(w.size()));
            const float keep = w[i];
            w[i] = keep + 1e-2f;
            model.forward(ws, batch);
            const double lp = model.loss(ws, batch);
            w[i] = keep - 1e-2f;
            model.forward(ws, batch);
            const double lm = model.loss(ws, batch);
            w[i] = keep;
            const auto fd = static_cast<float>((lp - lm) / 2e-2);
            if (std::abs(fd) > 1e-3f) max_rel = std::max(max_rel, std::abs(0.0f - fd) / std::abs(fd));
        }
        CHECK(max_rel == doctest::Approx(1.0f));
    }
    SUBCASE("deterministic across repeat runs") {
        Transformer<float> model(cfg);
        model.init_params(13);
        const float a = gradient_check<float>(model, batch, 50, 23, 1e-4, 1e-3f);
        const float b = gradient_check<float>(model, batch, 50, 23, 1e-4, 1e-3f);
        CHECK(a == b);
    }
}

TEST_CASE("training reduces loss on a small corpus") {
    const auto fam = lang::build_family(1, {lang::Variant::Atomic}, {}, 2);
    const auto split = tiny_split(fam, 512, 3);

    TransformerConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.dim = 32;
    cfg.max_seq = 60;
    cfg.vocab = fam.vocab_size;
    Transformer<float> model(cfg);
    model.init_params(4);

    const double before = evaluate_loss(model, split, fam, 128, 2);
    TrainConfig tc;
    tc.epochs = 12;
    tc.batch_size = 32;
    tc.lr = 2e-3;
    tc.warmup_steps = 20;
    tc.seed = 5;
    tc.jobs = 2;
    const auto result = train(model, split, nullptr, fam, tc);
    const double after = evaluate_loss(model, split, fam, 128, 2);
    CHECK(result.epochs_run == 12);
    CHECK(after < before - 0.4);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto fam = lang::build_family(1, {lang::Variant::Atomic}, {}, 2);
    const auto split = tiny_split(fam, 96, 4);
    TransformerConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.dim = 16;
    cfg.max_seq = 60;
    cfg.vocab = fam.vocab_size;
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 32;
    tc.lr = 1e-3;
    tc.seed = 6;
    tc.jobs = 2;
    tc.log_every = 1;

    std::vector<double> losses_a, losses_b;
    for (auto* sink : {&losses_a, &losses_b}) {
        Transformer<float> model(cfg);
        model.init_params(9);
        const auto result = train(model, split, nullptr, fam, tc);
        for (const auto& row : result.history) sink->push_back(row.loss);
    }
    CHECK(losses_a == losses_b);
}

TEST_CASE("finetune checkpoint cadence: epochs x checkpoints_per_epoch") {
    const auto fam = lang::build_family(1, {lang::Variant::Atomic}, {}, 2);
    const auto split = tiny_split(fam, 200, 7, "finetune");
    TransformerConfig cfg;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.dim = 16;
    cfg.max_seq = 60;
    cfg.vocab = fam.vocab_size;
    Transformer<float> model(cfg);
    model.init_params(1);

    TrainConfig tc;
    tc.epochs = 4;
    tc.checkpoints_per_epoch = 5;
    tc.batch_size = 16;
    tc.lr = 1e-3;
    tc.seed = 8;
    tc.jobs = 2;

    std::vector<std::pair<int, double>> seen;
    const auto result = train(model, split, nullptr, fam, tc,
                              [&](const CheckpointInfo& info, const Transformer<float>&) {
                                  seen.emplace_back(info.epoch, info.fraction);
                              });
    CHECK(result.checkpoints_emitted == 20);
    REQUIRE(seen.size() == 20);
    CHECK(seen.front() == std::pair<int, double>{1, 0.2});
    CHECK(seen.back() == std::pair<int, double>{4, 1.0});
}

TEST_CASE("early stopping restores best-validation parameters") {
    const auto fam = lang::build_family(1, {lang::Variant::Atomic}, {}, 2);
    const auto split = tiny_split(fam, 64, 9);
    const auto val = tiny_split(fam, 64, 10, "pretrain_validation");
    TransformerConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.dim = 16;
    cfg.max_seq = 60;
    cfg.vocab = fam.vocab_size;
    Transformer<float> model(cfg);
    model.init_params(2);

    TrainConfig tc;
    tc.epochs = 30;
    tc.batch_size = 32;
    tc.lr = 3e-2;  // deliberately hot so validation deteriorates and stopping kicks in
    tc.warmup_steps = 0;
    tc.patience = 3;
    tc.seed = 11;
    tc.jobs = 2;
    const auto result = train(model, split, &val, fam, tc);

    const double final_val = evaluate_loss(model, val, fam, 64, 2);
    CHECK(final_val == doctest::Approx(result.best_validation_loss).epsilon(1e-6));
    double last_val_row = 0.0;
    for (const auto& row : result.history)
        if (row.split == "validation") last_val_row = row.loss;
    CHECK(result.best_validation_loss <= last_val_row + 1e-12);
}

TEST_CASE("divergence raises") {
    const auto fam = lang::build_family(1, {lang::Variant::Atomic}, {}, 2);
    const auto split = tiny_split(fam, 64, 12);
    TransformerConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.dim = 16;
    cfg.max_seq = 60;
    cfg.vocab = fam.vocab_size;
    Transformer<float> model(cfg);
    model.init_params(3);
    TrainConfig tc;
    tc.epochs = 50;
    tc.batch_size = 64;
    tc.lr = 1e30;  // guaranteed blow-up
    tc.warmup_steps = 0;
    tc.clip = 0.0;
    tc.seed = 13;
    tc.jobs = 2;
    CHECK_THROWS_AS(train(model, split, nullptr, fam, tc), DivergenceError);
}

TEST_CASE("checkpoint save/load reproduces forward outputs bit-identically") {
    auto cfg = tiny_config();
    Transformer<float> model(cfg);
    model.init_params(21);
    const auto batch = random_batch(cfg, 2, 8, 22);
    Workspace<float> ws_a, ws_b;
    model.forward(ws_a, batch);

    const auto base = std::filesystem::temp_directory_path() / "mothello_ckpt_test" / "ck";
    CheckpointMeta meta;
    meta.config = cfg;
    meta.family_hash = "aabbccdd";
    meta.epoch = 2;
    meta.fraction = 0.4;
    meta.step = 77;
    meta.metrics["loss"] = 1.5;
    save_checkpoint(base, model, meta);

    CheckpointMeta loaded_meta;
    const auto loaded = load_checkpoint(base, &loaded_meta);
    CHECK(loaded_meta.family_hash == "aabbccdd");
    CHECK(loaded_meta.epoch == 2);
    CHECK(loaded_meta.step == 77);
    CHECK(loaded_meta.metrics.at("loss") == 1.5);
    CHECK(loaded.config() == cfg);
    loaded.forward(ws_b, batch);
    CHECK(ws_a.logits == ws_b.logits);
    std::filesystem::remove_all(base.parent_path());
}

TEST_CASE("unified output mode") {
    const auto fam = lang::build_family(2, {lang::Variant::Atomic, lang::Variant::Atomic}, {}, 2);
    TransformerConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.dim = 16;
    cfg.max_seq = 60;
    cfg.vocab = fam.vocab_size;
    cfg.unified = true;
    Transformer<float> model(cfg);
    model.init_params(5);
    CHECK(cfg.output_classes() == 60);

    const auto split = tiny_split(fam, 8, 14);
    std::vector<const lang::TokenSequence*> seqs;
    for (const auto& s : split.sequences) seqs.push_back(&s);

    const auto unified = make_unified_batch(seqs, cfg.max_seq, fam, lang::UnifiedOutputMap::identity());
    Workspace<float> ws;
    model.forward(ws, unified);
    CHECK(ws.logits.cols() == 60);
    CHECK(std::isfinite(model.loss(ws, unified)));

    // standard-mode targets are rejected by a unified model and vice versa
    const auto standard = make_standard_batch(seqs, cfg.max_seq);
    model.forward(ws, standard);
    CHECK_THROWS_AS(model.loss(ws, standard), ShapeError);

    TransformerConfig std_cfg = cfg;
    std_cfg.unified = false;
    Transformer<float> std_model(std_cfg);
    std_model.init_params(5);
    Workspace<float> ws2;
    std_model.forward(ws2, unified);
    CHECK_THROWS_AS(std_model.loss(ws2, unified), ShapeError);
}

TEST_CASE("shape errors") {
    auto cfg = tiny_config();
    Transformer<float> model(cfg);
    model.init_params(1);
    Workspace<float> ws;

    TokenBatch bad = random_batch(cfg, 1, 8, 1);
    bad.tokens[0] = cfg.vocab;  // out of range
    CHECK_THROWS_AS(model.forward(ws, bad), ShapeError);

    TokenBatch too_long = random_batch(cfg, 1, 8, 1);
    too_long.seq = 16;
    too_long.tokens.resize(16, 1);
    too_long.targets.resize(16, -1);
    CHECK_THROWS_AS(model.forward(ws, too_long), ShapeError);
}

TEST_CASE("incremental prefill matches batched forward") {
    auto cfg = tiny_config();
    Transformer<float> model(cfg);
    model.init_params(31);
    const auto batch = random_batch(cfg, 1, 8, 32);

    Workspace<float> ws;
    model.forward(ws, batch);
    SeqCache<float> cache;
    model.prefill(cache, batch.tokens);

    for (int t = 0; t < 8; ++t) {
        for (int c = 0; c < cfg.vocab; ++c)
            CHECK(cache.logits(t, c) == doctest::Approx(ws.logits(t, c)).epsilon(2e-4));
        for (int l = 0; l <= cfg.layers; ++l)
            for (int d = 0; d < cfg.dim; ++d)
                CHECK(cache.resid[static_cast<size_t>(l)](t, d) ==
                      doctest::Approx(ws.residual(l)(t, d)).epsilon(2e-4));
    }

    // speculative continuation equals a longer prefill
    StepScratch<float> scratch;
    scratch.reset(cfg, 3);
    const auto ext_logits = model.speculative_step(cache, 5, scratch, batch.tokens[5]);
    std::vector<int32_t> shorter(batch.tokens.begin(), batch.tokens.begin() + 6);
    SeqCache<float> cache2;
    model.prefill(cache2, shorter);
    for (int c = 0; c < cfg.vocab; ++c)
        CHECK(ext_logits(c) == doctest::Approx(cache2.logits(5, c)).epsilon(2e-4));

    // recompute with the unchanged residual reproduces the cached logits row
    const nn::RowVec<float> same = cache.resid[1].row(7);
    const auto replayed = model.recompute_from_layer(cache, 7, 1, same);
    for (int c = 0; c < cfg.vocab; ++c)
        CHECK(replayed(c) == doctest::Approx(cache.logits(7, c)).epsilon(2e-4));
}
