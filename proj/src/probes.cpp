#include "mothello/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "mothello/training.hpp"
#include "mothello/util.hpp"

using nlohmann::json;

namespace mothello::probes {

BoardLabel board_label(const othello::Board& b) {
    BoardLabel y{};
    for (int i = 0; i < 64; ++i) y[static_cast<size_t>(i)] = static_cast<uint8_t>(b.tile(i));
    return y;
}

nn::Mat<float> Probe::forward(const nn::Mat<float>& x) const {
    Eigen::Map<const nn::Mat<float>> w1(w.data() + w1_off(), in_dim, hidden);
    Eigen::Map<const nn::RowVec<float>> b1(w.data() + b1_off(), hidden);
    Eigen::Map<const nn::Mat<float>> w2(w.data() + w2_off(), hidden, 192);
    Eigen::Map<const nn::RowVec<float>> b2(w.data() + b2_off(), 192);
    nn::Mat<float> h = x * w1;
    h.rowwise() += b1;
    h = h.cwiseMax(0.0f);
    nn::Mat<float> logits = h * w2;
    logits.rowwise() += b2;
    return logits;
}

BoardLabel Probe::decode(const nn::RowVec<float>& row) {
    BoardLabel out{};
    for (int tile = 0; tile < 64; ++tile) {
        int best = 0;
        float best_v = row(tile * 3);
        for (int c = 1; c < 3; ++c) {
            if (row(tile * 3 + c) > best_v) {
                best_v = row(tile * 3 + c);
                best = c;
            }
        }
        out[static_cast<size_t>(tile)] = static_cast<uint8_t>(best);
    }
    return out;
}

double Probe::tile_loss(const nn::RowVec<float>& x, const BoardLabel& target) const {
    nn::Mat<float> xm(1, in_dim);
    xm.row(0) = x;
    const nn::Mat<float> logits = forward(xm);
    double total = 0.0;
    for (int tile = 0; tile < 64; ++tile) {
        const auto seg = logits.row(0).segment(tile * 3, 3);
        const float m = seg.maxCoeff();
        const float z = (seg.array() - m).exp().sum();
        total += std::log(static_cast<double>(z)) -
                 static_cast<double>(seg(target[static_cast<size_t>(tile)]) - m);
    }
    return total / 64.0;
}

nn::RowVec<float> Probe::input_gradient(const nn::RowVec<float>& x, const BoardLabel& target) const {
    Eigen::Map<const nn::Mat<float>> w1(w.data() + w1_off(), in_dim, hidden);
    Eigen::Map<const nn::RowVec<float>> b1(w.data() + b1_off(), hidden);
    Eigen::Map<const nn::Mat<float>> w2(w.data() + w2_off(), hidden, 192);
    Eigen::Map<const nn::RowVec<float>> b2(w.data() + b2_off(), 192);

    nn::RowVec<float> pre = x * w1 + b1;
    nn::RowVec<float> h = pre.cwiseMax(0.0f);
    nn::RowVec<float> logits = h * w2 + b2;

    nn::RowVec<float> dlogits(192);
    for (int tile = 0; tile < 64; ++tile) {
        auto seg = logits.segment(tile * 3, 3);
        const float m = seg.maxCoeff();
        Eigen::Matrix<float, 1, 3> p = (seg.array() - m).exp();
        p /= p.sum();
        p(target[static_cast<size_t>(tile)]) -= 1.0f;
        dlogits.segment(tile * 3, 3) = p / 64.0f;
    }
    nn::RowVec<float> dh = dlogits * w2.transpose();
    for (int i = 0; i < hidden; ++i)
        if (pre(i) <= 0.0f) dh(i) = 0.0f;
    return dh * w1.transpose();
}

ActivationDataset collect_activations(const nn::Transformer<float>& model,
                                      const std::vector<othello::GameRecord>& games,
                                      const lang::LanguageSpec& lang, int layer, int jobs) {
    auto all = collect_activations_all_layers(model, games, lang, jobs);
    if (layer < 0 || layer >= static_cast<int>(all.size()))
        throw std::invalid_argument("layer out of range");
    return std::move(all[static_cast<size_t>(layer)]);
}

std::vector<ActivationDataset> collect_activations_all_layers(
    const nn::Transformer<float>& model, const std::vector<othello::GameRecord>& games,
    const lang::LanguageSpec& lang, int jobs) {
    if (jobs <= 0) jobs = default_jobs();
    const int L = model.config().layers;
    const int D = model.config().dim;

    // translate games and lay out output rows
    std::vector<lang::TokenSequence> seqs(games.size());
    std::vector<int64_t> row_offset(games.size() + 1, 0);
    for (size_t g = 0; g < games.size(); ++g) {
        seqs[g] = lang::translate(games[g], lang);
        row_offset[g + 1] = row_offset[g] + static_cast<int64_t>(seqs[g].move_boundaries.size());
    }
    const int64_t total = row_offset[games.size()];

    std::vector<ActivationDataset> out(static_cast<size_t>(L) + 1);
    for (int l = 0; l <= L; ++l) {
        out[static_cast<size_t>(l)].layer = l;
        out[static_cast<size_t>(l)].language_id = lang.language_id;
        out[static_cast<size_t>(l)].x.setZero(total, D);
        out[static_cast<size_t>(l)].y.resize(static_cast<size_t>(total));
    }

    constexpr int kGamesPerBatch = 64;
    parallel_chunks(static_cast<int64_t>(games.size()), jobs, [&](int, int64_t g0, int64_t g1) {
        nn::Workspace<float> ws;
        for (int64_t b0 = g0; b0 < g1; b0 += kGamesPerBatch) {
            const int64_t b1 = std::min(g1, b0 + kGamesPerBatch);
            std::vector<const lang::TokenSequence*> batch_seqs;
            for (int64_t g = b0; g < b1; ++g) batch_seqs.push_back(&seqs[static_cast<size_t>(g)]);
            nn::TokenBatch batch = nn::make_standard_batch(batch_seqs, model.config().max_seq);
            batch.targets.clear();
            model.forward(ws, batch);
            for (int64_t g = b0; g < b1; ++g) {
                const auto& seq = seqs[static_cast<size_t>(g)];
                const auto trace = othello::simulate(games[static_cast<size_t>(g)]);
                const int bi = static_cast<int>(g - b0);
                for (size_t j = 0; j < seq.move_boundaries.size(); ++j) {
                    const int64_t row = row_offset[static_cast<size_t>(g)] + static_cast<int64_t>(j);
                    const int pos = bi * batch.seq + seq.move_boundaries[j];
                    const BoardLabel label = board_label(trace.boards[j + 1]);
                    for (int l = 0; l <= L; ++l) {
                        out[static_cast<size_t>(l)].x.row(row) = ws.residual(l).row(pos);
                        out[static_cast<size_t>(l)].y[static_cast<size_t>(row)] = label;
                    }
                }
            }
        }
    });
    return out;
}

namespace {

// forward + backward over a row range; returns summed CE over (samples x tiles)
double probe_fb(const Probe& probe, const ActivationDataset& ds, const std::vector<int64_t>& order,
                size_t i0, size_t i1, nn::AlignedVec<float>& grad) {
    const int in = probe.in_dim, hid = probe.hidden;
    const auto n = static_cast<int>(i1 - i0);
    Eigen::Map<const nn::Mat<float>> w1(probe.w.data() + probe.w1_off(), in, hid);
    Eigen::Map<const nn::RowVec<float>> b1(probe.w.data() + probe.b1_off(), hid);
    Eigen::Map<const nn::Mat<float>> w2(probe.w.data() + probe.w2_off(), hid, 192);
    Eigen::Map<const nn::RowVec<float>> b2(probe.w.data() + probe.b2_off(), 192);

    nn::Mat<float> x(n, in);
    for (int i = 0; i < n; ++i) x.row(i) = ds.x.row(order[i0 + static_cast<size_t>(i)]);
    nn::Mat<float> pre = x * w1;
    pre.rowwise() += b1;
    nn::Mat<float> h = pre.cwiseMax(0.0f);
    nn::Mat<float> logits = h * w2;
    logits.rowwise() += b2;

    nn::Mat<float> dlogits(n, 192);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto& label = ds.y[static_cast<size_t>(order[i0 + static_cast<size_t>(i)])];
        for (int tile = 0; tile < 64; ++tile) {
            auto seg = logits.row(i).segment(tile * 3, 3);
            const float m = seg.maxCoeff();
            Eigen::Matrix<float, 1, 3> p = (seg.array() - m).exp();
            const float z = p.sum();
            p /= z;
            total += std::log(static_cast<double>(z)) -
                     static_cast<double>(seg(label[static_cast<size_t>(tile)]) - m);
            p(label[static_cast<size_t>(tile)]) -= 1.0f;
            dlogits.row(i).segment(tile * 3, 3) = p;
        }
    }

    Eigen::Map<nn::Mat<float>> gw1(grad.data() + probe.w1_off(), in, hid);
    Eigen::Map<nn::RowVec<float>> gb1(grad.data() + probe.b1_off(), hid);
    Eigen::Map<nn::Mat<float>> gw2(grad.data() + probe.w2_off(), hid, 192);
    Eigen::Map<nn::RowVec<float>> gb2(grad.data() + probe.b2_off(), 192);
    gw2.noalias() += h.transpose() * dlogits;
    gb2 += dlogits.colwise().sum();
    nn::Mat<float> dh = dlogits * w2.transpose();
    dh = (pre.array() > 0.0f).select(dh, 0.0f);
    gw1.noalias() += x.transpose() * dh;
    gb1 += dh.colwise().sum();
    return total;
}

}  // namespace

Probe train_probe(const ActivationDataset& ds, const ProbeConfig& cfg) {
    if (ds.x.rows() == 0) throw std::invalid_argument("empty activation dataset");
    const int jobs = cfg.jobs > 0 ? cfg.jobs : default_jobs();

    Probe probe;
    probe.in_dim = static_cast<int>(ds.x.cols());
    probe.hidden = cfg.hidden;
    probe.layer = ds.layer;
    probe.language_id = ds.language_id;
    probe.w.assign(static_cast<size_t>(probe.size()), 0.0f);
    Rng rng(derive_seed(cfg.seed, 0x9B0BE));
    const float sd1 = 1.0f / std::sqrt(static_cast<float>(probe.in_dim));
    const float sd2 = 1.0f / std::sqrt(static_cast<float>(probe.hidden));
    for (int64_t i = probe.w1_off(); i < probe.b1_off(); ++i)
        probe.w[static_cast<size_t>(i)] = static_cast<float>(rng.next_normal()) * sd1;
    for (int64_t i = probe.w2_off(); i < probe.b2_off(); ++i)
        probe.w[static_cast<size_t>(i)] = static_cast<float>(rng.next_normal()) * sd2;

    std::vector<float> m(probe.w.size(), 0.0f), v(probe.w.size(), 0.0f);
    std::vector<nn::AlignedVec<float>> grads(static_cast<size_t>(jobs),
                                             nn::AlignedVec<float>(probe.w.size(), 0.0f));
    int64_t t = 0;

    const int64_t n = ds.x.rows();
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg.seed, 0xE90C000ULL + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (size_t i0 = 0; i0 < order.size(); i0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t i1 = std::min(order.size(), i0 + static_cast<size_t>(cfg.batch_size));
            const auto batch_n = static_cast<double>((i1 - i0) * 64);
            std::vector<double> losses(static_cast<size_t>(jobs), 0.0);
            for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
            parallel_chunks(static_cast<int64_t>(i1 - i0), jobs, [&](int chunk, int64_t a, int64_t b) {
                losses[static_cast<size_t>(chunk)] =
                    probe_fb(probe, ds, order, i0 + static_cast<size_t>(a),
                             i0 + static_cast<size_t>(b), grads[static_cast<size_t>(chunk)]);
            });
            double loss = 0.0;
            for (double l : losses) loss += l;
            loss /= batch_n;
            if (!std::isfinite(loss)) throw nn::DivergenceError("probe loss became non-finite");

            // reduce, scale to mean, clip, Adam
            auto& g = grads[0];
            for (int j = 1; j < jobs; ++j)
                for (size_t i = 0; i < g.size(); ++i) g[i] += grads[static_cast<size_t>(j)][i];
            const auto inv_n = static_cast<float>(1.0 / batch_n);
            double sq = 0.0;
            for (float& x : g) {
                x *= inv_n;
                sq += static_cast<double>(x) * x;
            }
            const double norm = std::sqrt(sq);
            if (cfg.clip > 0 && norm > cfg.clip) {
                const auto s = static_cast<float>(cfg.clip / norm);
                for (float& x : g) x *= s;
            }
            ++t;
            const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
            for (size_t i = 0; i < probe.w.size(); ++i) {
                const double gi = g[i];
                m[i] = static_cast<float>(cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * gi);
                v[i] = static_cast<float>(cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * gi * gi);
                probe.w[i] -= static_cast<float>(cfg.lr * (m[i] / bc1) /
                                                 (std::sqrt(v[i] / bc2) + cfg.adam_eps));
            }
        }
    }
    return probe;
}

namespace {

// counts of matching tiles under plain and color-flipped predictions
std::pair<int64_t, int64_t> match_counts(const Probe& probe, const ActivationDataset& ds) {
    int64_t plain = 0, flipped = 0;
    constexpr int kChunk = 4096;
    for (int64_t r0 = 0; r0 < ds.x.rows(); r0 += kChunk) {
        const int64_t r1 = std::min<int64_t>(ds.x.rows(), r0 + kChunk);
        const nn::Mat<float> logits = probe.forward(ds.x.middleRows(r0, r1 - r0));
        for (int64_t r = r0; r < r1; ++r) {
            const BoardLabel pred = Probe::decode(logits.row(r - r0));
            const auto& truth = ds.y[static_cast<size_t>(r)];
            for (int tile = 0; tile < 64; ++tile) {
                const uint8_t p = pred[static_cast<size_t>(tile)];
                const uint8_t q = truth[static_cast<size_t>(tile)];
                plain += p == q;
                const uint8_t pf = p == 1 ? 2 : (p == 2 ? 1 : 0);
                flipped += pf == q;
            }
        }
    }
    return {plain, flipped};
}

}  // namespace

double probe_accuracy(const Probe& probe, const ActivationDataset& ds) {
    if (ds.x.rows() == 0) return 0.0;
    return static_cast<double>(match_counts(probe, ds).first) /
           static_cast<double>(ds.x.rows() * 64);
}

CrossAccuracy cross_alignment_detail(const Probe& probe, const ActivationDataset& target_ds) {
    CrossAccuracy out;
    if (target_ds.x.rows() == 0) return out;
    const auto [plain, flipped] = match_counts(probe, target_ds);
    const auto denom = static_cast<double>(target_ds.x.rows() * 64);
    out.plain = static_cast<double>(plain) / denom;
    out.flipped = static_cast<double>(flipped) / denom;
    out.reported = std::max(out.plain, out.flipped);
    return out;
}

double cross_alignment_accuracy(const Probe& probe, const ActivationDataset& target_ds) {
    return cross_alignment_detail(probe, target_ds).reported;
}

std::vector<std::vector<double>> pairwise_alignment_matrix(
    const std::vector<Probe>& probes, const std::vector<ActivationDataset>& eval_sets) {
    const size_t m = probes.size();
    if (eval_sets.size() != m) throw std::invalid_argument("probe/eval set count mismatch");
    std::vector<std::vector<double>> cells(m, std::vector<double>(m, 0.0));
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < m; ++j)
            cells[i][j] = i == j ? probe_accuracy(probes[i], eval_sets[j])
                                 : cross_alignment_accuracy(probes[i], eval_sets[j]);
    return cells;
}

InterventionResult intervene(const nn::Transformer<float>& model, const Probe& probe,
                             const std::vector<lang::TokenId>& tokens,
                             const BoardLabel& target_board, int layer,
                             const InterventionConfig& cfg) {
    if (layer < 0 || layer > model.config().layers)
        throw std::invalid_argument("intervention layer out of range");
    nn::SeqCache<float> cache;
    model.prefill(cache, tokens);
    const int last = cache.len - 1;

    InterventionResult result;
    {
        const nn::RowVec<float> original = cache.resid[static_cast<size_t>(layer)].row(last);
        const auto logits = model.recompute_from_layer(cache, last, layer, original);
        const float m = logits.maxCoeff();
        nn::RowVec<float> p = (logits.array() - m).exp();
        result.null_distribution = p / p.sum();
    }

    nn::RowVec<float> act = cache.resid[static_cast<size_t>(layer)].row(last);
    BoardLabel read = Probe::decode(probe.forward(act).row(0));
    int step = 0;
    while (read != target_board && step < cfg.max_steps) {
        const nn::RowVec<float> g = probe.input_gradient(act, target_board);
        act -= static_cast<float>(cfg.step_size) * g;
        read = Probe::decode(probe.forward(act).row(0));
        ++step;
    }
    result.steps = step;
    result.full_board_match = read == target_board;

    // the edit must at least take on the tiles that were changed
    const nn::RowVec<float> original = cache.resid[static_cast<size_t>(layer)].row(last);
    const BoardLabel initial_read = Probe::decode(probe.forward(original).row(0));
    for (int tile = 0; tile < 64; ++tile) {
        if (initial_read[static_cast<size_t>(tile)] != target_board[static_cast<size_t>(tile)] &&
            read[static_cast<size_t>(tile)] != target_board[static_cast<size_t>(tile)])
            throw NoConvergence("probe still misclassifies edited tile " + std::to_string(tile) +
                                " after " + std::to_string(step) + " steps");
    }

    const auto logits = model.recompute_from_layer(cache, last, layer, act);
    const float m = logits.maxCoeff();
    nn::RowVec<float> p = (logits.array() - m).exp();
    result.distribution = p / p.sum();
    return result;
}

namespace {

int top_n_error(const std::vector<std::pair<float, int>>& prob_by_cell,
                const othello::Board& edited_board) {
    const auto legal = othello::legal_moves(edited_board);
    const size_t n = legal.size();
    std::vector<std::pair<float, int>> ranked = prob_by_cell;
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<long>(std::min(n, ranked.size())),
                      ranked.end(), [](const auto& a, const auto& b) {
                          return a.first > b.first || (a.first == b.first && a.second < b.second);
                      });
    std::vector<char> in_top(65, 0);
    for (size_t i = 0; i < std::min(n, ranked.size()); ++i)
        in_top[static_cast<size_t>(ranked[i].second)] = 1;
    int error = 0;
    for (const auto mv : legal) error += !in_top[static_cast<size_t>(mv.cell)];
    return error;
}

}  // namespace

int intervention_error(const nn::RowVec<float>& distribution, const othello::Board& edited_board,
                       const lang::LanguageSpec& lang) {
    std::vector<std::pair<float, int>> prob_by_cell;
    prob_by_cell.reserve(lang::kPlayableMoves);
    for (int slot = 0; slot < lang::kPlayableMoves; ++slot) {
        const auto& tmpl = lang.templates[static_cast<size_t>(slot)];
        if (tmpl.size() != 1)
            throw std::invalid_argument("intervention_error requires single-token move templates");
        prob_by_cell.emplace_back(distribution(tmpl[0]), lang::cell_of_slot(slot).cell);
    }
    return top_n_error(prob_by_cell, edited_board);
}

int intervention_error_unified(const nn::RowVec<float>& distribution,
                               const othello::Board& edited_board,
                               const lang::UnifiedOutputMap& map) {
    std::vector<std::pair<float, int>> prob_by_cell;
    prob_by_cell.reserve(lang::kPlayableMoves);
    for (int cls = 0; cls < lang::kUnifiedClasses; ++cls)
        prob_by_cell.emplace_back(distribution(cls), map.move_of_class(cls).cell);
    return top_n_error(prob_by_cell, edited_board);
}

void save_probe(const std::filesystem::path& base, const Probe& probe,
                const std::string& dataset_hash, uint64_t seed) {
    if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
    {
        std::ofstream out(base.string() + ".bin", std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write probe blob");
        const uint64_t count = probe.w.size();
        out.write(reinterpret_cast<const char*>(&count), sizeof count);
        out.write(reinterpret_cast<const char*>(probe.w.data()),
                  static_cast<std::streamsize>(count * sizeof(float)));
    }
    json j;
    j["format"] = "mothello-probe";
    j["in_dim"] = probe.in_dim;
    j["hidden"] = probe.hidden;
    j["layer"] = probe.layer;
    j["language_id"] = probe.language_id;
    j["dataset_hash"] = dataset_hash;
    j["seed"] = seed;
    write_text_file(base.string() + ".json", j.dump(2));
}

Probe load_probe(const std::filesystem::path& base) {
    const json j = json::parse(read_text_file(base.string() + ".json"));
    if (j.at("format") != "mothello-probe") throw std::runtime_error("not a probe file");
    Probe probe;
    probe.in_dim = j.at("in_dim").get<int>();
    probe.hidden = j.at("hidden").get<int>();
    probe.layer = j.at("layer").get<int>();
    probe.language_id = j.at("language_id").get<int>();
    probe.w.assign(static_cast<size_t>(probe.size()), 0.0f);
    std::ifstream in(base.string() + ".bin", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open probe blob");
    uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof count);
    if (count != probe.w.size()) throw std::runtime_error("probe blob mismatch");
    in.read(reinterpret_cast<char*>(probe.w.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw std::runtime_error("truncated probe blob");
    return probe;
}

}  // namespace mothello::probes
