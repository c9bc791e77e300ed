#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mothello/rng.hpp"

namespace mothello::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>;

// Parameter and gradient storage. 64-byte aligned with segment offsets padded
// to 16 floats so that every mapped tensor keeps the same alignment wherever
// the allocation lands; Eigen kernel results are then bit-reproducible across
// process states, which the determinism contract relies on.
template <typename S>
using AlignedVec = std::vector<S, Eigen::aligned_allocator<S>>;

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

struct TransformerConfig {
    int layers = 4;
    int heads = 4;
    int dim = 128;
    int max_seq = 60;
    int vocab = 121;
    bool unified = false;    // predict language-neutral move classes
    int unified_classes = 60;

    int head_dim() const { return dim / heads; }
    int ffn_dim() const { return 4 * dim; }
    int output_classes() const { return unified ? unified_classes : vocab; }

    void validate() const {
        if (layers < 1 || heads < 1 || dim < 1 || max_seq < 1 || vocab < 2)
            throw ShapeError("bad transformer config");
        if (dim % heads != 0) throw ShapeError("dim must be divisible by heads");
    }
    bool operator==(const TransformerConfig&) const = default;
};

// Token batch, right-padded with pad id 0. Targets are class ids, -1 = no
// loss at that position. `unified` tags the target space so that a model in
// one output mode rejects batches built for the other.
struct TokenBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int32_t> tokens;   // batch*seq
    std::vector<int32_t> targets;  // batch*seq or empty for forward-only
    bool unified = false;

    int32_t token(int b, int t) const { return tokens[static_cast<size_t>(b) * seq + t]; }
    int32_t target(int b, int t) const { return targets[static_cast<size_t>(b) * seq + t]; }
};

namespace detail {

// flat parameter layout; offsets in scalars
struct ParamLayout {
    struct PerLayer {
        int64_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_pr, b_pr;
    };
    int64_t wte = 0, wpe = 0, lnf_g = 0, lnf_b = 0, w_head = 0, total = 0;
    std::vector<PerLayer> layer;

    static ParamLayout make(const TransformerConfig& c) {
        ParamLayout lo;
        int64_t at = 0;
        const int64_t d = c.dim, f = c.ffn_dim();
        auto take = [&at](int64_t n) {
            const int64_t o = at;
            at += (n + 15) & ~int64_t(15);  // pad segments to 64-byte boundaries
            return o;
        };
        lo.wte = take(static_cast<int64_t>(c.vocab) * d);
        lo.wpe = take(static_cast<int64_t>(c.max_seq) * d);
        lo.layer.resize(static_cast<size_t>(c.layers));
        for (auto& pl : lo.layer) {
            pl.ln1_g = take(d);
            pl.ln1_b = take(d);
            pl.w_qkv = take(d * 3 * d);
            pl.b_qkv = take(3 * d);
            pl.w_o = take(d * d);
            pl.b_o = take(d);
            pl.ln2_g = take(d);
            pl.ln2_b = take(d);
            pl.w_fc = take(d * f);
            pl.b_fc = take(f);
            pl.w_pr = take(f * d);
            pl.b_pr = take(d);
        }
        lo.lnf_g = take(d);
        lo.lnf_b = take(d);
        lo.w_head = take(d * c.output_classes());
        lo.total = at;
        return lo;
    }
};

template <typename S>
inline S gelu(S x) {
    const S k = S(0.7978845608028654);  // sqrt(2/pi)
    const S c = S(0.044715);
    return S(0.5) * x * (S(1) + std::tanh(k * (x + c * x * x * x)));
}

template <typename S>
inline S gelu_grad(S x) {
    const S k = S(0.7978845608028654);
    const S c = S(0.044715);
    const S u = k * (x + c * x * x * x);
    const S t = std::tanh(u);
    const S du = k * (S(1) + S(3) * c * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

}  // namespace detail

// Activation buffers for one forward/backward pass over a padded batch.
// residual(l) is the exposed "layer l activation": l = 0 is the embedding
// sum, l = 1..L the residual stream after block l.
template <typename S>
struct Workspace {
    int batch = 0, seq = 0;

    std::vector<Mat<S>> resid;                       // L+1 of (B*T) x D
    std::vector<Mat<S>> ln1_out, ln2_out;            // L of (B*T) x D
    std::vector<Mat<S>> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;  // L of (B*T) x 1
    std::vector<Mat<S>> qkv;                         // L of (B*T) x 3D
    std::vector<Mat<S>> att_probs;                   // L of (B*H*T) x T
    std::vector<Mat<S>> att_ctx;                     // L of (B*T) x D
    std::vector<Mat<S>> fc_out, gelu_tanh, gelu_out; // L of (B*T) x F
    Mat<S> lnf_out, lnf_mean, lnf_rstd;
    Mat<S> logits;      // (B*T) x C
    Mat<S> dlogits;     // (B*T) x C
    std::vector<char> pos_mask;                      // B*T, 1 = real token
    std::vector<int> seq_len;                        // B, real tokens per row

    // backward scratch, reused across layers and steps
    Mat<S> bw_x_mid, bw_d_gelu, bw_d_fc, bw_d_ln2, bw_d_xmid, bw_d_ctx, bw_d_qkv, bw_d_lnf;

    const Mat<S>& residual(int l) const { return resid.at(static_cast<size_t>(l)); }

    // Allocation only; every buffer is fully overwritten by forward/backward,
    // so repeated same-shape calls cost nothing.
    void resize(const TransformerConfig& c, int B, int T) {
        const int BT = B * T;
        if (batch == B && seq == T && lnf_out.rows() == BT && lnf_out.cols() == c.dim &&
            logits.cols() == c.output_classes() &&
            resid.size() == static_cast<size_t>(c.layers) + 1 &&
            !fc_out.empty() && fc_out[0].cols() == c.ffn_dim())
            return;
        batch = B;
        seq = T;
        const auto L = static_cast<size_t>(c.layers);
        resid.resize(L + 1);
        for (auto& m : resid) m.resize(BT, c.dim);
        auto sz = [&](std::vector<Mat<S>>& v, int rows, int cols) {
            v.resize(L);
            for (auto& m : v) m.resize(rows, cols);
        };
        sz(ln1_out, BT, c.dim);
        sz(ln2_out, BT, c.dim);
        sz(ln1_mean, BT, 1);
        sz(ln1_rstd, BT, 1);
        sz(ln2_mean, BT, 1);
        sz(ln2_rstd, BT, 1);
        sz(qkv, BT, 3 * c.dim);
        sz(att_probs, B * c.heads * T, T);
        sz(att_ctx, BT, c.dim);
        sz(fc_out, BT, c.ffn_dim());
        sz(gelu_tanh, BT, c.ffn_dim());
        sz(gelu_out, BT, c.ffn_dim());
        lnf_out.resize(BT, c.dim);
        lnf_mean.resize(BT, 1);
        lnf_rstd.resize(BT, 1);
        logits.resize(BT, c.output_classes());
        dlogits.resize(BT, c.output_classes());
        pos_mask.assign(static_cast<size_t>(BT), 0);
        seq_len.assign(static_cast<size_t>(B), 0);
        bw_x_mid.resize(BT, c.dim);
        bw_d_gelu.resize(BT, c.ffn_dim());
        bw_d_fc.resize(BT, c.ffn_dim());
        bw_d_ln2.resize(BT, c.dim);
        bw_d_xmid.resize(BT, c.dim);
        bw_d_ctx.resize(BT, c.dim);
        bw_d_qkv.resize(BT, 3 * c.dim);
        bw_d_lnf.resize(BT, c.dim);
    }
};

// Per-sequence attention cache for incremental single-position evaluation
// (greedy multi-token decoding, intervention recompute). Row t of k[l]/v[l]
// is position t's key/value at layer l.
template <typename S>
struct SeqCache {
    int len = 0;
    std::vector<Mat<S>> k, v;       // L of T x D
    std::vector<Mat<S>> resid;      // L+1 of T x D
    Mat<S> logits;                  // T x C

    void resize(const TransformerConfig& c, int T) {
        len = T;
        k.assign(static_cast<size_t>(c.layers), Mat<S>::Zero(T, c.dim));
        v.assign(static_cast<size_t>(c.layers), Mat<S>::Zero(T, c.dim));
        resid.assign(static_cast<size_t>(c.layers) + 1, Mat<S>::Zero(T, c.dim));
        logits.setZero(T, c.output_classes());
    }
};

// Scratch keys/values for speculative continuation tokens that must not
// disturb the underlying cache.
template <typename S>
struct StepScratch {
    std::vector<Mat<S>> k, v;  // L of (max steps) x D
    int used = 0;

    void reset(const TransformerConfig& c, int max_steps) {
        k.assign(static_cast<size_t>(c.layers), Mat<S>::Zero(max_steps, c.dim));
        v.assign(static_cast<size_t>(c.layers), Mat<S>::Zero(max_steps, c.dim));
        used = 0;
    }
};

template <typename S>
class Transformer {
public:
    Transformer() = default;
    explicit Transformer(const TransformerConfig& cfg) : cfg_(cfg), layout_(detail::ParamLayout::make(cfg)) {
        cfg.validate();
        w_.assign(static_cast<size_t>(layout_.total), S(0));
    }

    const TransformerConfig& config() const { return cfg_; }
    int64_t num_params() const { return layout_.total; }
    AlignedVec<S>& params() { return w_; }
    const AlignedVec<S>& params() const { return w_; }

    // GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    // 1/sqrt(2L), zero biases, unit layer-norm gains.
    void init_params(uint64_t seed) {
        Rng rng(seed);
        const S base = S(0.02);
        const S resid_scale = S(1) / std::sqrt(S(2) * S(cfg_.layers));
        auto fill_normal = [&](int64_t off, int64_t n, S sd) {
            for (int64_t i = 0; i < n; ++i) w_[static_cast<size_t>(off + i)] = S(rng.next_normal()) * sd;
        };
        auto fill_const = [&](int64_t off, int64_t n, S v) {
            for (int64_t i = 0; i < n; ++i) w_[static_cast<size_t>(off + i)] = v;
        };
        const int64_t d = cfg_.dim, f = cfg_.ffn_dim();
        fill_normal(layout_.wte, static_cast<int64_t>(cfg_.vocab) * d, base);
        fill_normal(layout_.wpe, static_cast<int64_t>(cfg_.max_seq) * d, base);
        for (const auto& pl : layout_.layer) {
            fill_const(pl.ln1_g, d, S(1));
            fill_const(pl.ln1_b, d, S(0));
            fill_normal(pl.w_qkv, d * 3 * d, base);
            fill_const(pl.b_qkv, 3 * d, S(0));
            fill_normal(pl.w_o, d * d, base * resid_scale);
            fill_const(pl.b_o, d, S(0));
            fill_const(pl.ln2_g, d, S(1));
            fill_const(pl.ln2_b, d, S(0));
            fill_normal(pl.w_fc, d * f, base);
            fill_const(pl.b_fc, f, S(0));
            fill_normal(pl.w_pr, f * d, base * resid_scale);
            fill_const(pl.b_pr, d, S(0));
        }
        fill_const(layout_.lnf_g, d, S(1));
        fill_const(layout_.lnf_b, d, S(0));
        fill_normal(layout_.w_head, d * cfg_.output_classes(), base);
    }

    // ---- forward -----------------------------------------------------

    void forward(Workspace<S>& ws, const TokenBatch& batch) const {
        check_batch(batch);
        const int B = batch.batch, T = batch.seq, D = cfg_.dim;
        ws.resize(cfg_, B, T);

        for (int b = 0; b < B; ++b) {
            int len = 0;
            for (int t = 0; t < T; ++t) {
                const int32_t tok = batch.token(b, t);
                const int row = b * T + t;
                ws.pos_mask[static_cast<size_t>(row)] = tok != 0;
                if (tok != 0) {
                    if (len != t) throw ShapeError("pad tokens must form a tail");
                    len = t + 1;
                }
                ws.resid[0].row(row) = cmat(layout_.wte, cfg_.vocab, D).row(tok) +
                                       cmat(layout_.wpe, cfg_.max_seq, D).row(t);
            }
            ws.seq_len[static_cast<size_t>(b)] = len;
        }
        for (int l = 0; l < cfg_.layers; ++l) block_forward(ws, l, B, T);

        layernorm_forward(ws.resid[static_cast<size_t>(cfg_.layers)], layout_.lnf_g, layout_.lnf_b,
                          ws.lnf_out, ws.lnf_mean, ws.lnf_rstd);
        ws.logits.noalias() = ws.lnf_out * cmat(layout_.w_head, D, cfg_.output_classes());
    }

    int64_t count_active(const TokenBatch& batch) const {
        int64_t n = 0;
        for (int32_t t : batch.targets) n += t >= 0;
        return n;
    }

    // Masked mean cross entropy over target positions. Requires forward() on
    // the same workspace first. Fills ws.dlogits scaled for backward.
    // When norm > 0 it replaces the batch-local active count in the 1/N
    // normalization, so data-parallel shards of one logical batch sum to the
    // full-batch loss and gradient.
    double loss(Workspace<S>& ws, const TokenBatch& batch, int64_t norm = 0) const {
        check_targets(batch);
        const int BT = batch.batch * batch.seq;
        const int C = cfg_.output_classes();
        const int64_t n_active = count_active(batch);
        ws.dlogits.setZero(BT, C);
        if (n_active == 0) return 0.0;  // all-masked convention: zero loss, zero grad
        const auto n = static_cast<double>(norm > 0 ? norm : n_active);

        double total = 0.0;
        for (int i = 0; i < BT; ++i) {
            const int32_t tgt = batch.targets[static_cast<size_t>(i)];
            if (tgt < 0) continue;
            if (tgt >= C) throw ShapeError("target id out of range");
            auto row = ws.logits.row(i);
            const S m = row.maxCoeff();
            RowVec<S> p = (row.array() - m).exp();
            const S z = p.sum();
            total += std::log(static_cast<double>(z)) - static_cast<double>(row(tgt) - m);
            ws.dlogits.row(i) = p / (z * S(n));
            ws.dlogits(i, tgt) -= S(1) / S(n);
        }
        return total / n;
    }

    // Accumulates parameter gradients into `grad` (size num_params; caller
    // zeroes). Requires forward() + loss() on the workspace first.
    void backward(Workspace<S>& ws, const TokenBatch& batch, AlignedVec<S>& grad) const {
        if (static_cast<int64_t>(grad.size()) != layout_.total) throw ShapeError("bad grad size");
        const int B = batch.batch, T = batch.seq, D = cfg_.dim;

        Mat<S>& d_lnf_out = ws.bw_d_lnf;
        Mat<S> d_resid(B * T, D);
        // head
        d_lnf_out.noalias() = ws.dlogits * cmat(layout_.w_head, D, cfg_.output_classes()).transpose();
        gmat(grad, layout_.w_head, D, cfg_.output_classes()).noalias() +=
            ws.lnf_out.transpose() * ws.dlogits;
        // final layernorm
        layernorm_backward(ws.resid[static_cast<size_t>(cfg_.layers)], ws.lnf_mean, ws.lnf_rstd,
                           layout_.lnf_g, d_lnf_out, grad, layout_.lnf_g, layout_.lnf_b, d_resid,
                           /*accumulate=*/false);

        for (int l = cfg_.layers - 1; l >= 0; --l) block_backward(ws, l, B, T, d_resid, grad);

        // embeddings
        auto g_wte = gmat(grad, layout_.wte, cfg_.vocab, D);
        auto g_wpe = gmat(grad, layout_.wpe, cfg_.max_seq, D);
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                const int row = b * T + t;
                g_wte.row(batch.token(b, t)) += d_resid.row(row);
                g_wpe.row(t) += d_resid.row(row);
            }
        }
    }

    // ---- incremental single-sequence paths ----------------------------

    // Full forward over one unpadded sequence, retaining K/V, residuals and
    // logits. Deterministic and independent of batch padding.
    void prefill(SeqCache<S>& cache, const std::vector<int32_t>& tokens) const {
        const int T = static_cast<int>(tokens.size());
        if (T < 1 || T > cfg_.max_seq) throw ShapeError("bad sequence length for prefill");
        cache.resize(cfg_, T);
        for (int t = 0; t < T; ++t) {
            if (tokens[static_cast<size_t>(t)] < 0 || tokens[static_cast<size_t>(t)] >= cfg_.vocab)
                throw ShapeError("token id out of range");
            RowVec<S> x = cmat(layout_.wte, cfg_.vocab, cfg_.dim).row(tokens[static_cast<size_t>(t)]) +
                          cmat(layout_.wpe, cfg_.max_seq, cfg_.dim).row(t);
            cache.resid[0].row(t) = x;
            advance_position(cache, t, 0, x);
        }
    }

    // Recomputes blocks from_layer+1..L for position `pos` after overriding
    // its residual at layer `from_layer`. Returns the logits row at `pos`.
    // Cache rows for k/v at the affected layers are updated in place.
    RowVec<S> recompute_from_layer(SeqCache<S>& cache, int pos, int from_layer,
                                   const RowVec<S>& resid_override) const {
        if (from_layer < 0 || from_layer > cfg_.layers) throw ShapeError("bad layer index");
        cache.resid[static_cast<size_t>(from_layer)].row(pos) = resid_override;
        RowVec<S> x = resid_override;
        advance_position(cache, pos, from_layer, x);
        return cache.logits.row(pos);
    }

    // Speculative continuation: appends `token` after context length ctx_len
    // (cache rows [0, ctx_len) plus scratch rows) without touching the cache.
    // Returns the logits row for the appended position.
    RowVec<S> speculative_step(const SeqCache<S>& cache, int ctx_len, StepScratch<S>& scratch,
                               int32_t token) const {
        const int pos = ctx_len + scratch.used;
        if (pos >= cfg_.max_seq) throw ShapeError("speculative step beyond max_seq");
        if (token < 0 || token >= cfg_.vocab) throw ShapeError("token id out of range");
        RowVec<S> x = cmat(layout_.wte, cfg_.vocab, cfg_.dim).row(token) +
                      cmat(layout_.wpe, cfg_.max_seq, cfg_.dim).row(pos);
        const int D = cfg_.dim, H = cfg_.heads, hs = cfg_.head_dim();
        RowVec<S> ln(D), q(D), ctx(D);
        for (int l = 0; l < cfg_.layers; ++l) {
            const auto& pl = layout_.layer[static_cast<size_t>(l)];
            layernorm_row(x, pl.ln1_g, pl.ln1_b, ln);
            RowVec<S> qkv = ln * cmat(pl.w_qkv, D, 3 * D);
            qkv += crow(pl.b_qkv, 3 * D);
            q = qkv.segment(0, D);
            scratch.k[static_cast<size_t>(l)].row(scratch.used) = qkv.segment(D, D);
            scratch.v[static_cast<size_t>(l)].row(scratch.used) = qkv.segment(2 * D, D);
            const S scale = S(1) / std::sqrt(S(hs));
            for (int h = 0; h < H; ++h) {
                const auto qh = q.segment(h * hs, hs);
                RowVec<S> scores(pos + 1);
                for (int t = 0; t < ctx_len; ++t)
                    scores(t) = qh.dot(cache.k[static_cast<size_t>(l)].row(t).segment(h * hs, hs)) * scale;
                for (int sidx = 0; sidx <= scratch.used; ++sidx)
                    scores(ctx_len + sidx) =
                        qh.dot(scratch.k[static_cast<size_t>(l)].row(sidx).segment(h * hs, hs)) * scale;
                const S m = scores.maxCoeff();
                scores = (scores.array() - m).exp();
                scores /= scores.sum();
                RowVec<S> out = RowVec<S>::Zero(hs);
                for (int t = 0; t < ctx_len; ++t)
                    out += scores(t) * cache.v[static_cast<size_t>(l)].row(t).segment(h * hs, hs);
                for (int sidx = 0; sidx <= scratch.used; ++sidx)
                    out += scores(ctx_len + sidx) *
                           scratch.v[static_cast<size_t>(l)].row(sidx).segment(h * hs, hs);
                ctx.segment(h * hs, hs) = out;
            }
            RowVec<S> att = ctx * cmat(pl.w_o, D, D);
            att += crow(pl.b_o, D);
            x += att;
            layernorm_row(x, pl.ln2_g, pl.ln2_b, ln);
            RowVec<S> fc = ln * cmat(pl.w_fc, D, cfg_.ffn_dim());
            fc += crow(pl.b_fc, cfg_.ffn_dim());
            for (int i = 0; i < cfg_.ffn_dim(); ++i) fc(i) = detail::gelu(fc(i));
            RowVec<S> pr = fc * cmat(pl.w_pr, cfg_.ffn_dim(), D);
            pr += crow(pl.b_pr, D);
            x += pr;
        }
        ++scratch.used;
        RowVec<S> lnf(D);
        layernorm_row(x, layout_.lnf_g, layout_.lnf_b, lnf);
        return lnf * cmat(layout_.w_head, D, cfg_.output_classes());
    }

    // ---- parameter access ---------------------------------------------

    Eigen::Map<const Mat<S>> cmat(int64_t off, int rows, int cols) const {
        return Eigen::Map<const Mat<S>>(w_.data() + off, rows, cols);
    }
    Eigen::Map<const RowVec<S>> crow(int64_t off, int n) const {
        return Eigen::Map<const RowVec<S>>(w_.data() + off, n);
    }
    const detail::ParamLayout& layout() const { return layout_; }

private:
    static Eigen::Map<Mat<S>> gmat(AlignedVec<S>& g, int64_t off, int rows, int cols) {
        return Eigen::Map<Mat<S>>(g.data() + off, rows, cols);
    }
    static Eigen::Map<RowVec<S>> grow(AlignedVec<S>& g, int64_t off, int n) {
        return Eigen::Map<RowVec<S>>(g.data() + off, n);
    }

    void check_batch(const TokenBatch& batch) const {
        if (batch.batch < 1 || batch.seq < 1) throw ShapeError("empty batch");
        if (batch.seq > cfg_.max_seq) throw ShapeError("sequence longer than max_seq");
        if (batch.tokens.size() != static_cast<size_t>(batch.batch) * batch.seq)
            throw ShapeError("token buffer size mismatch");
        for (int32_t t : batch.tokens)
            if (t < 0 || t >= cfg_.vocab) throw ShapeError("token id out of range");
    }

    void check_targets(const TokenBatch& batch) const {
        if (batch.targets.size() != batch.tokens.size())
            throw ShapeError("target buffer size mismatch");
        if (batch.unified != cfg_.unified)
            throw ShapeError(cfg_.unified ? "unified model requires unified targets"
                                          : "standard model cannot take unified targets");
    }

    void layernorm_forward(const Mat<S>& x, int64_t g_off, int64_t b_off, Mat<S>& out, Mat<S>& mean,
                           Mat<S>& rstd) const {
        const auto g = crow(g_off, cfg_.dim);
        const auto b = crow(b_off, cfg_.dim);
        const S eps = S(1e-5);
        for (int i = 0; i < x.rows(); ++i) {
            const S mu = x.row(i).mean();
            const S var = (x.row(i).array() - mu).square().mean();
            const S rs = S(1) / std::sqrt(var + eps);
            mean(i, 0) = mu;
            rstd(i, 0) = rs;
            out.row(i) = ((x.row(i).array() - mu) * rs).matrix().cwiseProduct(g) + b;
        }
    }

    void layernorm_row(const RowVec<S>& x, int64_t g_off, int64_t b_off, RowVec<S>& out) const {
        const S eps = S(1e-5);
        const S mu = x.mean();
        const S var = (x.array() - mu).square().mean();
        const S rs = S(1) / std::sqrt(var + eps);
        out = ((x.array() - mu) * rs).matrix().cwiseProduct(crow(g_off, cfg_.dim)) +
              crow(b_off, cfg_.dim);
    }

    // dx = f(dout) given cached mean/rstd; accumulates dgain/dbias into grad
    void layernorm_backward(const Mat<S>& x, const Mat<S>& mean, const Mat<S>& rstd, int64_t g_off,
                            const Mat<S>& dout, AlignedVec<S>& grad, int64_t g_grad_off,
                            int64_t b_grad_off, Mat<S>& dx, bool accumulate) const {
        const auto g = crow(g_off, cfg_.dim);
        auto dg = grow(grad, g_grad_off, cfg_.dim);
        auto db = grow(grad, b_grad_off, cfg_.dim);
        const S invd = S(1) / S(cfg_.dim);
        RowVec<S> xhat(cfg_.dim), dxhat(cfg_.dim);
        for (int i = 0; i < x.rows(); ++i) {
            const S mu = mean(i, 0), rs = rstd(i, 0);
            xhat = ((x.row(i).array() - mu) * rs).matrix();
            db += dout.row(i);
            dg += dout.row(i).cwiseProduct(xhat);
            dxhat = dout.row(i).cwiseProduct(g);
            const S sum_dxhat = dxhat.sum();
            const S sum_dxhat_xhat = dxhat.dot(xhat);
            RowVec<S> d =
                (dxhat.array() - invd * sum_dxhat - xhat.array() * invd * sum_dxhat_xhat) * rs;
            if (accumulate)
                dx.row(i) += d;
            else
                dx.row(i) = d;
        }
    }

    void block_forward(Workspace<S>& ws, int l, int B, int T) const {
        const auto& pl = layout_.layer[static_cast<size_t>(l)];
        const int D = cfg_.dim, H = cfg_.heads, hs = cfg_.head_dim(), F = cfg_.ffn_dim();
        const auto& x = ws.resid[static_cast<size_t>(l)];
        auto& xo = ws.resid[static_cast<size_t>(l) + 1];

        layernorm_forward(x, pl.ln1_g, pl.ln1_b, ws.ln1_out[static_cast<size_t>(l)],
                          ws.ln1_mean[static_cast<size_t>(l)], ws.ln1_rstd[static_cast<size_t>(l)]);
        auto& qkv = ws.qkv[static_cast<size_t>(l)];
        qkv.noalias() = ws.ln1_out[static_cast<size_t>(l)] * cmat(pl.w_qkv, D, 3 * D);
        qkv.rowwise() += crow(pl.b_qkv, 3 * D);

        const S scale = S(1) / std::sqrt(S(hs));
        auto& probs = ws.att_probs[static_cast<size_t>(l)];
        auto& ctx = ws.att_ctx[static_cast<size_t>(l)];
        Mat<S> qh(T, hs), kh(T, hs), vh(T, hs), sc(T, T), out(T, hs);
        for (int b = 0; b < B; ++b) {
            const int len = ws.seq_len[static_cast<size_t>(b)];
            for (int h = 0; h < H; ++h) {
                for (int t = 0; t < T; ++t) {
                    qh.row(t) = qkv.row(b * T + t).segment(h * hs, hs);
                    kh.row(t) = qkv.row(b * T + t).segment(D + h * hs, hs);
                    vh.row(t) = qkv.row(b * T + t).segment(2 * D + h * hs, hs);
                }
                sc.noalias() = qh * kh.transpose() * scale;
                // pads are a tail, so the causal window of a real query holds
                // no pad keys; pad queries collapse to self-attention
                for (int q = 0; q < T; ++q) {
                    if (q < len) {
                        auto row = sc.row(q).head(q + 1);
                        const S m = row.maxCoeff();
                        row = (row.array() - m).exp();
                        row /= row.sum();
                        if (q + 1 < T) sc.row(q).tail(T - q - 1).setZero();
                    } else {
                        sc.row(q).setZero();
                        sc(q, q) = S(1);
                    }
                }
                probs.block((b * H + h) * T, 0, T, T) = sc;
                out.noalias() = sc * vh;
                for (int t = 0; t < T; ++t)
                    ctx.row(b * T + t).segment(h * hs, hs) = out.row(t);
            }
        }
        xo.noalias() = ctx * cmat(pl.w_o, D, D);
        xo.rowwise() += crow(pl.b_o, D);
        xo += x;

        layernorm_forward(xo, pl.ln2_g, pl.ln2_b, ws.ln2_out[static_cast<size_t>(l)],
                          ws.ln2_mean[static_cast<size_t>(l)], ws.ln2_rstd[static_cast<size_t>(l)]);
        auto& fc = ws.fc_out[static_cast<size_t>(l)];
        fc.noalias() = ws.ln2_out[static_cast<size_t>(l)] * cmat(pl.w_fc, D, F);
        fc.rowwise() += crow(pl.b_fc, F);
        auto& th = ws.gelu_tanh[static_cast<size_t>(l)];
        auto& gl = ws.gelu_out[static_cast<size_t>(l)];
        const S gk = S(0.7978845608028654), gc = S(0.044715);
        th = ((fc.array() + gc * fc.array().cube()) * gk).tanh().matrix();
        gl = (S(0.5) * fc.array() * (S(1) + th.array())).matrix();
        xo.noalias() += gl * cmat(pl.w_pr, F, D);
        xo.rowwise() += crow(pl.b_pr, D);
    }

    // d_resid on entry holds dL/d resid[l+1]; on exit dL/d resid[l].
    void block_backward(Workspace<S>& ws, int l, int B, int T, Mat<S>& d_resid,
                        AlignedVec<S>& grad) const {
        const auto& pl = layout_.layer[static_cast<size_t>(l)];
        const int D = cfg_.dim, H = cfg_.heads, hs = cfg_.head_dim(), F = cfg_.ffn_dim();
        const int BT = B * T;

        // ln2's input x_mid = x + att_out was not stored; rebuild it as
        // resid[l] + att_ctx*W_o + b_o
        Mat<S>& x_mid = ws.bw_x_mid;
        x_mid.noalias() = ws.att_ctx[static_cast<size_t>(l)] * cmat(pl.w_o, D, D);
        x_mid.rowwise() += crow(pl.b_o, D);
        x_mid += ws.resid[static_cast<size_t>(l)];

        // MLP backward
        Mat<S>& d_gelu = ws.bw_d_gelu;
        Mat<S>& d_fc = ws.bw_d_fc;
        Mat<S>& d_ln2 = ws.bw_d_ln2;
        Mat<S>& d_xmid = ws.bw_d_xmid;
        gmat(grad, pl.w_pr, F, D).noalias() += ws.gelu_out[static_cast<size_t>(l)].transpose() * d_resid;
        grow(grad, pl.b_pr, D) += d_resid.colwise().sum();
        d_gelu.noalias() = d_resid * cmat(pl.w_pr, F, D).transpose();
        const auto& fc = ws.fc_out[static_cast<size_t>(l)];
        const auto& th = ws.gelu_tanh[static_cast<size_t>(l)];
        const S gk = S(0.7978845608028654), gc = S(0.044715);
        d_fc = (d_gelu.array() *
                (S(0.5) * (S(1) + th.array()) +
                 S(0.5) * fc.array() * (S(1) - th.array().square()) * gk *
                     (S(1) + S(3) * gc * fc.array().square())))
                   .matrix();
        gmat(grad, pl.w_fc, D, F).noalias() += ws.ln2_out[static_cast<size_t>(l)].transpose() * d_fc;
        grow(grad, pl.b_fc, F) += d_fc.colwise().sum();
        d_ln2.noalias() = d_fc * cmat(pl.w_fc, D, F).transpose();
        // ln2 backward, then add the residual path (d_resid flows to x_mid too)
        layernorm_backward(x_mid, ws.ln2_mean[static_cast<size_t>(l)],
                           ws.ln2_rstd[static_cast<size_t>(l)], pl.ln2_g, d_ln2, grad, pl.ln2_g,
                           pl.ln2_b, d_xmid, /*accumulate=*/false);
        d_xmid += d_resid;

        // attention output projection backward
        Mat<S>& d_ctx = ws.bw_d_ctx;
        gmat(grad, pl.w_o, D, D).noalias() += ws.att_ctx[static_cast<size_t>(l)].transpose() * d_xmid;
        grow(grad, pl.b_o, D) += d_xmid.colwise().sum();
        d_ctx.noalias() = d_xmid * cmat(pl.w_o, D, D).transpose();

        // attention core backward
        Mat<S>& d_qkv = ws.bw_d_qkv;
        d_qkv.setZero();
        const auto& qkv = ws.qkv[static_cast<size_t>(l)];
        const auto& probs = ws.att_probs[static_cast<size_t>(l)];
        const S scale = S(1) / std::sqrt(S(hs));
        Mat<S> qh(T, hs), kh(T, hs), vh(T, hs), dout(T, hs), dP(T, T), dS(T, T), dQ(T, hs),
            dK(T, hs), dV(T, hs);
        for (int b = 0; b < B; ++b) {
            const int len = ws.seq_len[static_cast<size_t>(b)];
            for (int h = 0; h < H; ++h) {
                for (int t = 0; t < T; ++t) {
                    qh.row(t) = qkv.row(b * T + t).segment(h * hs, hs);
                    kh.row(t) = qkv.row(b * T + t).segment(D + h * hs, hs);
                    vh.row(t) = qkv.row(b * T + t).segment(2 * D + h * hs, hs);
                    dout.row(t) = d_ctx.row(b * T + t).segment(h * hs, hs);
                }
                const auto P = probs.block((b * H + h) * T, 0, T, T);
                dP.noalias() = dout * vh.transpose();
                dV.noalias() = P.transpose() * dout;
                // softmax backward per row; pad rows carry constant attention
                dS.setZero();
                for (int q = 0; q < len; ++q) {
                    const auto p = P.row(q).head(q + 1);
                    const auto dp = dP.row(q).head(q + 1);
                    const S dot = dp.dot(p);
                    dS.row(q).head(q + 1) = p.cwiseProduct(dp) - dot * p;
                }
                dQ.noalias() = dS * kh * scale;
                dK.noalias() = dS.transpose() * qh * scale;
                for (int t = 0; t < T; ++t) {
                    d_qkv.row(b * T + t).segment(h * hs, hs) += dQ.row(t);
                    d_qkv.row(b * T + t).segment(D + h * hs, hs) += dK.row(t);
                    d_qkv.row(b * T + t).segment(2 * D + h * hs, hs) += dV.row(t);
                }
            }
        }
        gmat(grad, pl.w_qkv, D, 3 * D).noalias() +=
            ws.ln1_out[static_cast<size_t>(l)].transpose() * d_qkv;
        grow(grad, pl.b_qkv, 3 * D) += d_qkv.colwise().sum();
        Mat<S> d_ln1(BT, D);
        d_ln1.noalias() = d_qkv * cmat(pl.w_qkv, D, 3 * D).transpose();
        layernorm_backward(ws.resid[static_cast<size_t>(l)], ws.ln1_mean[static_cast<size_t>(l)],
                           ws.ln1_rstd[static_cast<size_t>(l)], pl.ln1_g, d_ln1, grad, pl.ln1_g,
                           pl.ln1_b, d_xmid, /*accumulate=*/true);
        d_resid = d_xmid;
    }

    // shared by prefill and recompute_from_layer: runs blocks from_layer..L-1
    // for position `pos` (x = residual at layer from_layer), filling cache
    // k/v/resid rows and the logits row.
    void advance_position(SeqCache<S>& cache, int pos, int from_layer, RowVec<S> x) const {
        const int D = cfg_.dim, H = cfg_.heads, hs = cfg_.head_dim();
        RowVec<S> ln(D), ctx(D);
        for (int l = from_layer; l < cfg_.layers; ++l) {
            const auto& pl = layout_.layer[static_cast<size_t>(l)];
            layernorm_row(x, pl.ln1_g, pl.ln1_b, ln);
            RowVec<S> qkv = ln * cmat(pl.w_qkv, D, 3 * D);
            qkv += crow(pl.b_qkv, 3 * D);
            cache.k[static_cast<size_t>(l)].row(pos) = qkv.segment(D, D);
            cache.v[static_cast<size_t>(l)].row(pos) = qkv.segment(2 * D, D);
            const S scale = S(1) / std::sqrt(S(hs));
            for (int h = 0; h < H; ++h) {
                const auto qh = qkv.segment(h * hs, hs);
                RowVec<S> scores(pos + 1);
                for (int t = 0; t <= pos; ++t)
                    scores(t) = qh.dot(cache.k[static_cast<size_t>(l)].row(t).segment(h * hs, hs)) * scale;
                const S m = scores.maxCoeff();
                scores = (scores.array() - m).exp();
                scores /= scores.sum();
                RowVec<S> out = RowVec<S>::Zero(hs);
                for (int t = 0; t <= pos; ++t)
                    out += scores(t) * cache.v[static_cast<size_t>(l)].row(t).segment(h * hs, hs);
                ctx.segment(h * hs, hs) = out;
            }
            RowVec<S> att = ctx * cmat(pl.w_o, D, D);
            att += crow(pl.b_o, D);
            x += att;
            layernorm_row(x, pl.ln2_g, pl.ln2_b, ln);
            RowVec<S> fc = ln * cmat(pl.w_fc, D, cfg_.ffn_dim());
            fc += crow(pl.b_fc, cfg_.ffn_dim());
            for (int i = 0; i < cfg_.ffn_dim(); ++i) fc(i) = detail::gelu(fc(i));
            RowVec<S> pr = fc * cmat(pl.w_pr, cfg_.ffn_dim(), D);
            pr += crow(pl.b_pr, D);
            x += pr;
            cache.resid[static_cast<size_t>(l) + 1].row(pos) = x;
        }
        RowVec<S> lnf(D);
        layernorm_row(x, layout_.lnf_g, layout_.lnf_b, lnf);
        cache.logits.row(pos) = lnf * cmat(layout_.w_head, D, cfg_.output_classes());
    }

    TransformerConfig cfg_;
    detail::ParamLayout layout_;
    AlignedVec<S> w_;
};

// Analytic-vs-central-difference gradient comparison over `coords` randomly
// sampled parameter coordinates. The finite-difference side always runs in
// double (the extended-precision oracle), so the returned guarded relative
// error measures the working-precision error of the analytic gradient.
template <typename S>
S gradient_check(const Transformer<S>& model, const TokenBatch& batch, int coords, uint64_t seed,
                 double fd_step, S denom_floor) {
    Workspace<S> ws;
    AlignedVec<S> grad(static_cast<size_t>(model.num_params()), S(0));
    model.forward(ws, batch);
    model.loss(ws, batch);
    model.backward(ws, batch, grad);

    Transformer<double> fd_model(model.config());
    auto& wd = fd_model.params();
    for (size_t i = 0; i < wd.size(); ++i) wd[i] = static_cast<double>(model.params()[i]);
    Workspace<double> wsd;

    Rng rng(seed);
    S max_rel = S(0);
    for (int c = 0; c < coords; ++c) {
        const auto i = static_cast<size_t>(rng.next_below(wd.size()));
        const double keep = wd[i];
        wd[i] = keep + fd_step;
        fd_model.forward(wsd, batch);
        const double lp = fd_model.loss(wsd, batch);
        wd[i] = keep - fd_step;
        fd_model.forward(wsd, batch);
        const double lm = fd_model.loss(wsd, batch);
        wd[i] = keep;
        const S fd = static_cast<S>((lp - lm) / (2.0 * fd_step));
        const S a = grad[i];
        const S denom = std::max({std::abs(a), std::abs(fd), denom_floor});
        max_rel = std::max(max_rel, std::abs(a - fd) / denom);
    }
    return max_rel;
}

}  // namespace mothello::nn
