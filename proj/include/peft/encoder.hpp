#pragma once

// Desk-scale transformer encoder with adaptor injection points, the
// two-layer downstream heads, and masked-frame pretraining of the base.
//
// Block layout (post layer norm):
//   a   = MHA(x)            q/k/v projections carry the LoRA deltas
//   x1  = LN(x + a)
//   f   = FF(x1)            W2 gelu(W1 x1 + b1) + b2
//   f'  = BA(f)             f + up(relu(down(f)))
//   x2  = LN(x1 + f')
//   out = sigmoid(g) .* x2  weight gating on the block output

#include "peft/adapters.hpp"
#include "peft/arch.hpp"
#include "peft/autodiff.hpp"
#include "peft/core.hpp"
#include "peft/data.hpp"

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace peft {

struct BlockParams {
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;  // d x d, 1 x d
    Matrix ln1_g, ln1_b;
    Matrix w1, b1;  // d_ff x d, 1 x d_ff
    Matrix w2, b2;  // d x d_ff, 1 x d
    Matrix ln2_g, ln2_b;
};

struct EncoderParams {
    Matrix frontend_w;  // d x F, stands in for the convolutional feature extractor
    Matrix frontend_b;  // 1 x d
    std::vector<BlockParams> blocks;

    template <typename Rng>
    static EncoderParams init(const ArchShape& arch, Rng& rng) {
        arch.validate();
        const Index d = arch.d_model;
        const Index F = arch.in_features;
        const Index dff = arch.d_ff;
        auto uniform = [&](Index rows, Index cols) {
            const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
            std::uniform_real_distribution<double> u(-bound, bound);
            return Matrix(Matrix::NullaryExpr(rows, cols, [&] { return u(rng); }));
        };
        EncoderParams p;
        p.frontend_w = uniform(d, F);
        p.frontend_b = Matrix::Zero(1, d);
        for (int l = 0; l < arch.layers; ++l) {
            BlockParams b;
            b.wq = uniform(d, d);
            b.wk = uniform(d, d);
            b.wv = uniform(d, d);
            b.wo = uniform(d, d);
            b.bq = b.bk = b.bv = b.bo = Matrix::Zero(1, d);
            b.ln1_g = Matrix::Ones(1, d);
            b.ln1_b = Matrix::Zero(1, d);
            b.w1 = uniform(dff, d);
            b.b1 = Matrix::Zero(1, dff);
            b.w2 = uniform(d, dff);
            b.b2 = Matrix::Zero(1, d);
            b.ln2_g = Matrix::Ones(1, d);
            b.ln2_b = Matrix::Zero(1, d);
            p.blocks.push_back(std::move(b));
        }
        return p;
    }

    static EncoderParams init(const ArchShape& arch, std::uint64_t seed) {
        std::mt19937_64 rng(seed ^ 0xe2c0de5ULL);
        return init(arch, rng);
    }
};

enum class Task { classification, regression };

inline const char* to_string(Task t) { return t == Task::classification ? "classification" : "regression"; }

inline int output_dim(Task t) { return t == Task::classification ? kNumEmotions : 3; }

/// Two fully connected layers with ReLU between; hidden width d.
struct DownstreamHead {
    Task task = Task::classification;
    Matrix w1, b1;  // d x d, 1 x d
    Matrix w2, b2;  // out x d, 1 x out

    int out_dim() const { return static_cast<int>(w2.rows()); }

    static DownstreamHead init(const ArchShape& arch, Task task, std::uint64_t seed) {
        std::mt19937_64 rng(seed ^ 0x4eadULL);
        const Index d = arch.d_model;
        const Index out = output_dim(task);
        auto uniform = [&](Index rows, Index cols) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
            std::uniform_real_distribution<double> u(-bound, bound);
            return Matrix(Matrix::NullaryExpr(rows, cols, [&] { return u(rng); }));
        };
        DownstreamHead h;
        h.task = task;
        h.w1 = uniform(d, d);
        h.b1 = Matrix::Zero(1, d);
        h.w2 = uniform(out, d);
        h.b2 = Matrix::Zero(1, out);
        return h;
    }
};

/// Everything a training run owns.
struct Model {
    ArchShape arch;
    EncoderParams encoder;
    AdapterSet adapters;
    DownstreamHead head;

    static Model create(const ArchShape& arch, const AdapterConfig& acfg, Task task, std::uint64_t seed) {
        Model m;
        m.arch = arch;
        m.encoder = EncoderParams::init(arch, seed);
        m.adapters = AdapterSet::create(arch, acfg, seed);
        m.head = DownstreamHead::init(arch, task, seed);
        return m;
    }
};

// ---------------------------------------------------------------------------
// Parameter enumeration

enum class ParamGroup { frontend, block, ba, lora, ws, wg, head };

inline const char* to_string(ParamGroup g) {
    switch (g) {
    case ParamGroup::frontend: return "frontend";
    case ParamGroup::block: return "block";
    case ParamGroup::ba: return "ba";
    case ParamGroup::lora: return "lora";
    case ParamGroup::ws: return "ws";
    case ParamGroup::wg: return "wg";
    case ParamGroup::head: return "head";
    }
    return "?";
}

inline ParamGroup group_of(AdapterKind k) {
    switch (k) {
    case AdapterKind::ba: return ParamGroup::ba;
    case AdapterKind::lora: return ParamGroup::lora;
    case AdapterKind::ws: return ParamGroup::ws;
    case AdapterKind::wg: return ParamGroup::wg;
    }
    return ParamGroup::head;
}

/// Calls fn(name, group, matrix) for every parameter block of `m` in a fixed order.
/// Works for const and non-const models.
template <typename M, typename Fn>
    requires std::same_as<std::remove_const_t<M>, Model>
void visit_params(M& m, Fn&& fn) {
    fn("encoder.frontend.w", ParamGroup::frontend, m.encoder.frontend_w);
    fn("encoder.frontend.b", ParamGroup::frontend, m.encoder.frontend_b);
    for (std::size_t l = 0; l < m.encoder.blocks.size(); ++l) {
        auto& b = m.encoder.blocks[l];
        const std::string p = "encoder.layers." + std::to_string(l) + ".";
        fn(p + "attn.wq", ParamGroup::block, b.wq);
        fn(p + "attn.bq", ParamGroup::block, b.bq);
        fn(p + "attn.wk", ParamGroup::block, b.wk);
        fn(p + "attn.bk", ParamGroup::block, b.bk);
        fn(p + "attn.wv", ParamGroup::block, b.wv);
        fn(p + "attn.bv", ParamGroup::block, b.bv);
        fn(p + "attn.wo", ParamGroup::block, b.wo);
        fn(p + "attn.bo", ParamGroup::block, b.bo);
        fn(p + "ln1.g", ParamGroup::block, b.ln1_g);
        fn(p + "ln1.b", ParamGroup::block, b.ln1_b);
        fn(p + "ff.w1", ParamGroup::block, b.w1);
        fn(p + "ff.b1", ParamGroup::block, b.b1);
        fn(p + "ff.w2", ParamGroup::block, b.w2);
        fn(p + "ff.b2", ParamGroup::block, b.b2);
        fn(p + "ln2.g", ParamGroup::block, b.ln2_g);
        fn(p + "ln2.b", ParamGroup::block, b.ln2_b);
    }
    for (std::size_t l = 0; l < m.adapters.ba.size(); ++l) {
        auto& a = m.adapters.ba[l];
        const std::string p = "adapters.ba." + std::to_string(l) + ".";
        fn(p + "w_down", ParamGroup::ba, a.w_down);
        fn(p + "b_down", ParamGroup::ba, a.b_down);
        fn(p + "w_up", ParamGroup::ba, a.w_up);
        fn(p + "b_up", ParamGroup::ba, a.b_up);
    }
    for (std::size_t l = 0; l < m.adapters.lora.size(); ++l) {
        for (auto& f : m.adapters.lora[l]) {
            const std::string p = "adapters.lora." + std::to_string(l) + "." + to_string(f.target) + ".";
            fn(p + "A", ParamGroup::lora, f.A);
            fn(p + "B", ParamGroup::lora, f.B);
        }
    }
    if (m.adapters.use_ws) fn(std::string("adapters.ws.w"), ParamGroup::ws, m.adapters.ws.w);
    if (m.adapters.use_wg) fn(std::string("adapters.wg.g"), ParamGroup::wg, m.adapters.wg.g);
    fn("head.w1", ParamGroup::head, m.head.w1);
    fn("head.b1", ParamGroup::head, m.head.b1);
    fn("head.w2", ParamGroup::head, m.head.w2);
    fn("head.b2", ParamGroup::head, m.head.b2);
}

// ---------------------------------------------------------------------------
// Tape forward

/// Maps parameter blocks to tape leaves. Blocks registered with `train` receive gradient into the
/// supplied buffer; all others are frozen constants.
class Binder {
public:
    explicit Binder(ad::Tape& tape) : tape_(tape) {}

    void train(const Matrix& param, Matrix* grad) { sinks_[&param] = grad; }

    ad::Var operator()(const Matrix& param) {
        if (auto it = cache_.find(&param); it != cache_.end()) return it->second;
        Matrix* sink = nullptr;
        if (auto it = sinks_.find(&param); it != sinks_.end()) sink = it->second;
        ad::Var v = tape_.param(param, sink);
        cache_.emplace(&param, v);
        return v;
    }

    ad::Tape& tape() { return tape_; }

private:
    ad::Tape& tape_;
    std::unordered_map<const Matrix*, Matrix*> sinks_;
    std::unordered_map<const Matrix*, ad::Var> cache_;
};

inline Matrix sinusoidal_positions(Index T, Index d) {
    Matrix pe(T, d);
    for (Index t = 0; t < T; ++t) {
        for (Index i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            pe(t, i) = (i % 2 == 0) ? std::sin(static_cast<double>(t) * rate) : std::cos(static_cast<double>(t) * rate);
        }
    }
    return pe;
}

struct EncodeOptions {
    bool positional = true;
};

inline void check_frames(const Matrix& frames, const ArchShape& arch) {
    if (frames.rows() < 1) throw InputError("encode: utterance has no frames");
    if (frames.rows() > arch.max_frames) {
        throw InputError("encode: " + std::to_string(frames.rows()) + " frames exceeds T_max " +
                         std::to_string(arch.max_frames));
    }
    if (frames.cols() != arch.in_features) {
        throw InputError("encode: frame width " + std::to_string(frames.cols()) + " != F " +
                         std::to_string(arch.in_features));
    }
}

namespace ad {

/// Frontend projection plus positional encoding: T x d.
inline Var embed(Binder& bind, const Model& m, const Matrix& frames, const EncodeOptions& opt = {}) {
    Tape& t = bind.tape();
    Var x = t.constant(frames);
    Var h = add_row(t, matmul_nt(t, x, bind(m.encoder.frontend_w)), bind(m.encoder.frontend_b));
    if (opt.positional) h = add(t, h, t.constant(sinusoidal_positions(frames.rows(), m.arch.d_model)));
    return h;
}

inline Var attention(Binder& bind, const Model& m, int layer, Var x) {
    Tape& t = bind.tape();
    const auto& b = m.encoder.blocks[static_cast<std::size_t>(layer)];
    const auto& as = m.adapters;
    auto project = [&](const Matrix& w, const Matrix& bias, int which) {
        Var y;
        if (as.use_lora) {
            const auto& f = as.lora[static_cast<std::size_t>(layer)][static_cast<std::size_t>(which)];
            y = lora_project(t, x, bind(w), bind(f.A), bind(f.B));
        } else {
            y = matmul_nt(t, x, bind(w));
        }
        return add_row(t, y, bind(bias));
    };
    Var q = project(b.wq, b.bq, 0);
    Var k = project(b.wk, b.bk, 1);
    Var v = project(b.wv, b.bv, 2);
    const Index dh = m.arch.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(m.arch.heads));
    for (int h = 0; h < m.arch.heads; ++h) {
        Var qh = slice_cols(t, q, h * dh, dh);
        Var kh = slice_cols(t, k, h * dh, dh);
        Var vh = slice_cols(t, v, h * dh, dh);
        Var att = softmax_rows(t, scale(t, matmul_nt(t, qh, kh), inv_sqrt));
        heads.push_back(matmul(t, att, vh));
    }
    Var ctx = heads.size() == 1 ? heads[0] : concat_cols(t, heads);
    return add_row(t, matmul_nt(t, ctx, bind(b.wo)), bind(b.bo));
}

inline Var block(Binder& bind, const Model& m, int layer, Var x) {
    Tape& t = bind.tape();
    const auto& b = m.encoder.blocks[static_cast<std::size_t>(layer)];
    const auto& as = m.adapters;
    Var x1 = layer_norm(t, add(t, x, attention(bind, m, layer, x)), bind(b.ln1_g), bind(b.ln1_b));
    Var f = add_row(t, matmul_nt(t, gelu(t, add_row(t, matmul_nt(t, x1, bind(b.w1)), bind(b.b1))), bind(b.w2)),
                    bind(b.b2));
    if (as.use_ba) {
        const auto& a = as.ba[static_cast<std::size_t>(layer)];
        f = bottleneck(t, f, bind(a.w_down), bind(a.b_down), bind(a.w_up), bind(a.b_up));
    }
    Var x2 = layer_norm(t, add(t, x1, f), bind(b.ln2_g), bind(b.ln2_b));
    if (as.use_wg) {
        const int r = as.wg.row_of(layer);
        if (r >= 0) x2 = gate(t, x2, slice_rows(t, bind(as.wg.g), r, 1));
    }
    return x2;
}

/// Hidden states of every block, first to last.
inline std::vector<Var> encode(Binder& bind, const Model& m, const Matrix& frames, const EncodeOptions& opt = {}) {
    check_frames(frames, m.arch);
    Var h = embed(bind, m, frames, opt);
    std::vector<Var> states;
    states.reserve(static_cast<std::size_t>(m.arch.layers));
    for (int l = 0; l < m.arch.layers; ++l) {
        h = block(bind, m, l, h);
        states.push_back(h);
    }
    return states;
}

/// Pooled 1 x d head input: mean over frames of the weighted-sum mix (or the last state).
inline Var pool(Binder& bind, const Model& m, std::span<const Var> states) {
    Tape& t = bind.tape();
    Var mixed = m.adapters.use_ws ? softmax_mix(t, states, bind(m.adapters.ws.w)) : states.back();
    return mean_rows(t, mixed);
}

inline Var head(Binder& bind, const DownstreamHead& h, Var pooled) {
    Tape& t = bind.tape();
    Var z = relu(t, add_row(t, matmul_nt(t, pooled, bind(h.w1)), bind(h.b1)));
    return add_row(t, matmul_nt(t, z, bind(h.w2)), bind(h.b2));
}

} // namespace ad

// ---------------------------------------------------------------------------
// Plain forward

/// Hidden states of every block for one utterance.
inline std::vector<Matrix> encode(const Matrix& frames, const Model& m, const EncodeOptions& opt = {}) {
    m.adapters.validate(m.arch);
    ad::Tape tape;
    Binder bind(tape);
    const auto vars = ad::encode(bind, m, frames, opt);
    std::vector<Matrix> out;
    out.reserve(vars.size());
    for (auto v : vars) out.push_back(tape.value(v));
    return out;
}

/// Encoder forward with the parameters and adaptors given separately.
inline std::vector<Matrix> encode(const Matrix& frames, const ArchShape& arch, const EncoderParams& params,
                                  const AdapterSet& aset, const EncodeOptions& opt = {}) {
    Model m;
    m.arch = arch;
    m.encoder = params;
    m.adapters = aset;
    return encode(frames, m, opt);
}

/// Mean-pooled head input: weighted sum of `states` when WS is enabled, otherwise the last state.
inline RowVector pooled_features(std::span<const Matrix> states, const AdapterSet& aset) {
    if (states.empty()) throw DimensionError("pool: no hidden states");
    const Matrix mixed = aset.use_ws ? weighted_sum(states, aset.ws) : states.back();
    return mixed.colwise().mean();
}

inline RowVector head_forward(const RowVector& pooled, const DownstreamHead& h) {
    if (pooled.cols() != h.w1.cols()) {
        throw DimensionError("head: input width " + std::to_string(pooled.cols()) + " != " + std::to_string(h.w1.cols()));
    }
    RowVector z = (pooled * h.w1.transpose() + h.b1).cwiseMax(0.0);
    return z * h.w2.transpose() + h.b2;
}

/// 4 logits (classification) or 3 attributes (regression).
inline RowVector pool_and_predict(std::span<const Matrix> states, const AdapterSet& aset, const DownstreamHead& h) {
    return head_forward(pooled_features(states, aset), h);
}

inline RowVector predict(const Model& m, const Matrix& frames) {
    const auto states = encode(frames, m);
    return pool_and_predict(states, m.adapters, m.head);
}

/// Row-wise attention probabilities of every head at `layer` (for inspection and tests).
inline std::vector<Matrix> attention_maps(const Model& m, const Matrix& frames, int layer) {
    check_frames(frames, m.arch);
    ad::Tape tape;
    Binder bind(tape);
    ad::Var h = ad::embed(bind, m, frames);
    for (int l = 0; l < layer; ++l) h = ad::block(bind, m, l, h);
    const auto& b = m.encoder.blocks[static_cast<std::size_t>(layer)];
    auto proj = [&](const Matrix& w, const Matrix& bias, int which) {
        Matrix W = w;
        if (m.adapters.use_lora) {
            W = lora_merge(w, m.adapters.lora[static_cast<std::size_t>(layer)][static_cast<std::size_t>(which)]);
        }
        Matrix y = tape.value(h) * W.transpose();
        y.rowwise() += bias.row(0);
        return y;
    };
    const Matrix q = proj(b.wq, b.bq, 0);
    const Matrix k = proj(b.wk, b.bk, 1);
    const Index dh = m.arch.head_dim();
    std::vector<Matrix> maps;
    for (int hd = 0; hd < m.arch.heads; ++hd) {
        Matrix s = q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose() / std::sqrt(static_cast<double>(dh));
        maps.push_back(ad::softmax_rows_value(s));
    }
    return maps;
}

} // namespace peft
