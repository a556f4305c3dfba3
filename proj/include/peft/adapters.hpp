#pragma once

// Parameter-efficient adaptor blocks: bottleneck adapter, low-rank attention
// deltas, softmax layer weighting and sigmoid weight gating. Each block has a
// plain Eigen forward (used for inspection and tests) and a tape forward used
// by the encoder during training.

#include "peft/arch.hpp"
#include "peft/autodiff.hpp"
#include "peft/core.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace peft {

enum class LoraTarget { query = 0, key = 1, value = 2 };

inline const char* to_string(LoraTarget t) {
    switch (t) {
    case LoraTarget::query: return "query";
    case LoraTarget::key: return "key";
    case LoraTarget::value: return "value";
    }
    return "?";
}

/// Low-rank delta B*A for a frozen d x k projection.
struct LoRAFactors {
    Matrix A;  // r x k, down factor
    Matrix B;  // d x r, up factor
    LoraTarget target = LoraTarget::query;

    int rank() const { return static_cast<int>(A.rows()); }
    Index out_dim() const { return B.rows(); }
    Index in_dim() const { return A.cols(); }

    /// A uniform in +-0.01/sqrt(r), B zero, so the delta vanishes at init.
    template <typename Rng>
    static LoRAFactors init(Index d, Index k, int rank, LoraTarget target, Rng& rng) {
        if (rank < 1 || rank >= std::min<Index>(d, k)) {
            throw ConfigError("lora: rank " + std::to_string(rank) + " must satisfy 1 <= r < min(d,k) = " +
                              std::to_string(std::min<Index>(d, k)));
        }
        const double bound = 0.01 / std::sqrt(static_cast<double>(rank));
        std::uniform_real_distribution<double> u(-bound, bound);
        LoRAFactors f;
        f.A = Matrix::NullaryExpr(rank, k, [&] { return u(rng); });
        f.B = Matrix::Zero(d, rank);
        f.target = target;
        return f;
    }

    void validate(Index d, Index k) const {
        if (A.rows() != B.cols()) {
            throw DimensionError("lora: A is " + shape_str(A) + " but B is " + shape_str(B));
        }
        if (A.cols() != k) throw DimensionError("lora: A has " + std::to_string(A.cols()) + " columns, W has " + std::to_string(k));
        if (B.rows() != d) throw DimensionError("lora: B has " + std::to_string(B.rows()) + " rows, W has " + std::to_string(d));
        if (rank() < 1 || rank() >= std::min(d, k)) {
            throw DimensionError("lora: rank " + std::to_string(rank()) + " not below min(d,k)");
        }
    }
};

/// Down-project, nonlinearity, up-project, with a residual around the block.
/// Weights use the out x in convention: w_down is m x d, w_up is d x m.
struct BottleneckAdapter {
    Matrix w_down;  // m x d
    Matrix b_down;  // 1 x m
    Matrix w_up;    // d x m
    Matrix b_up;    // 1 x d

    int bottleneck() const { return static_cast<int>(w_down.rows()); }
    Index dim() const { return w_down.cols(); }

    template <typename Rng>
    static BottleneckAdapter init(Index d, int m, Rng& rng) {
        if (m < 1 || 2 * static_cast<Index>(m) > d) {
            throw ConfigError("bottleneck: m=" + std::to_string(m) + " must satisfy 1 <= m <= d/2 (d=" +
                              std::to_string(d) + ")");
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        std::uniform_real_distribution<double> u(-bound, bound);
        BottleneckAdapter a;
        a.w_down = Matrix::NullaryExpr(m, d, [&] { return u(rng); });
        a.b_down = Matrix::Zero(1, m);
        a.w_up = Matrix::Zero(d, m);
        a.b_up = Matrix::Zero(1, d);
        return a;
    }

    void validate(Index d) const {
        const Index m = w_down.rows();
        require_shape(w_down, m, d, "bottleneck w_down");
        require_shape(b_down, 1, m, "bottleneck b_down");
        require_shape(w_up, d, m, "bottleneck w_up");
        require_shape(b_up, 1, d, "bottleneck b_up");
    }
};

/// One raw (pre-softmax) scalar per transformer block.
struct LayerWeights {
    Matrix w;  // 1 x L

    static LayerWeights init(int layers) { return {Matrix::Zero(1, layers)}; }

    int layers() const { return static_cast<int>(w.cols()); }

    RowVector coefficients() const { return ad::softmax_rows_value(w).row(0); }
};

/// Raw gate vectors, one row per gated layer.
struct GateVector {
    std::vector<int> sites;  // layer indices, ascending
    Matrix g;                // sites.size() x d

    static GateVector init(int layers, Index d, double value = 0.0) {
        GateVector gv;
        for (int i = 0; i < layers; ++i) gv.sites.push_back(i);
        gv.g = Matrix::Constant(layers, d, value);
        return gv;
    }

    /// Row index of `layer` in g, or -1 when the layer is not gated.
    int row_of(int layer) const {
        for (std::size_t i = 0; i < sites.size(); ++i) {
            if (sites[i] == layer) return static_cast<int>(i);
        }
        return -1;
    }
};

enum class AdapterKind { ba, lora, ws, wg };

inline constexpr std::array<AdapterKind, 4> kAdapterKinds = {AdapterKind::ba, AdapterKind::lora,
                                                              AdapterKind::ws, AdapterKind::wg};

inline const char* to_string(AdapterKind k) {
    switch (k) {
    case AdapterKind::ba: return "BA";
    case AdapterKind::lora: return "LoRA";
    case AdapterKind::ws: return "WS";
    case AdapterKind::wg: return "WG";
    }
    return "?";
}

struct AdapterConfig {
    bool ba = false;
    bool lora = false;
    bool ws = false;
    bool wg = false;
    int bottleneck = 64;
    int rank = 24;
    double gate_init = 0.0;

    bool enabled(AdapterKind k) const {
        switch (k) {
        case AdapterKind::ba: return ba;
        case AdapterKind::lora: return lora;
        case AdapterKind::ws: return ws;
        case AdapterKind::wg: return wg;
        }
        return false;
    }

    static AdapterConfig all(int bottleneck, int rank) { return {true, true, true, true, bottleneck, rank, 0.0}; }
    static AdapterConfig none() { return {}; }
};

struct AdapterSet {
    bool use_ba = false;
    bool use_lora = false;
    bool use_ws = false;
    bool use_wg = false;
    std::vector<BottleneckAdapter> ba;               // one per layer
    std::vector<std::array<LoRAFactors, 3>> lora;    // per layer: query, key, value
    LayerWeights ws;
    GateVector wg;

    bool enabled(AdapterKind k) const {
        switch (k) {
        case AdapterKind::ba: return use_ba;
        case AdapterKind::lora: return use_lora;
        case AdapterKind::ws: return use_ws;
        case AdapterKind::wg: return use_wg;
        }
        return false;
    }

    bool any() const { return use_ba || use_lora || use_ws || use_wg; }

    /// Fresh adaptors for `arch`. Disabled kinds allocate nothing.
    static AdapterSet create(const ArchShape& arch, const AdapterConfig& cfg, std::uint64_t seed) {
        arch.validate();
        std::mt19937_64 rng(seed ^ 0xada97e5ULL);
        AdapterSet s;
        s.use_ba = cfg.ba;
        s.use_lora = cfg.lora;
        s.use_ws = cfg.ws;
        s.use_wg = cfg.wg;
        const Index d = arch.d_model;
        if (cfg.ba) {
            for (int l = 0; l < arch.layers; ++l) s.ba.push_back(BottleneckAdapter::init(d, cfg.bottleneck, rng));
        }
        if (cfg.lora) {
            for (int l = 0; l < arch.layers; ++l) {
                s.lora.push_back({LoRAFactors::init(d, d, cfg.rank, LoraTarget::query, rng),
                                  LoRAFactors::init(d, d, cfg.rank, LoraTarget::key, rng),
                                  LoRAFactors::init(d, d, cfg.rank, LoraTarget::value, rng)});
            }
        }
        if (cfg.ws) s.ws = LayerWeights::init(arch.layers);
        if (cfg.wg) s.wg = GateVector::init(arch.layers, d, cfg.gate_init);
        return s;
    }

    /// Throws ConfigError unless every enabled block matches `arch` and disabled kinds are empty.
    void validate(const ArchShape& arch) const {
        const Index d = arch.d_model;
        const auto L = static_cast<std::size_t>(arch.layers);
        auto fail = [](const std::string& m) { throw ConfigError("adapter set: " + m); };
        if (use_ba != !ba.empty() || (use_ba && ba.size() != L)) fail("bottleneck list does not match layers");
        if (use_lora != !lora.empty() || (use_lora && lora.size() != L)) fail("LoRA list does not match layers");
        if (use_ws != (ws.w.size() > 0) || (use_ws && (ws.w.rows() != 1 || ws.layers() != arch.layers))) {
            fail("layer weights do not match layers");
        }
        if (use_wg != !wg.sites.empty()) fail("gate sites do not match enable flag");
        try {
            for (const auto& a : ba) a.validate(d);
            for (const auto& triple : lora) {
                for (const auto& f : triple) f.validate(d, d);
            }
        } catch (const DimensionError& e) {
            fail(e.what());
        }
        if (use_wg) {
            if (wg.g.rows() != static_cast<Index>(wg.sites.size()) || wg.g.cols() != d) fail("gate matrix shape");
            for (int s : wg.sites) {
                if (s < 0 || s >= arch.layers) fail("gate site out of range");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Plain forwards

/// x * (W + B*A)^T. W is never modified.
inline Matrix lora_apply(const Matrix& x, const Matrix& W, const LoRAFactors& f) {
    if (x.cols() != W.cols()) {
        throw DimensionError("lora_apply: x is " + shape_str(x) + " but W is " + shape_str(W));
    }
    f.validate(W.rows(), W.cols());
    return x * W.transpose() + (x * f.A.transpose()) * f.B.transpose();
}

/// W + B*A
inline Matrix lora_merge(const Matrix& W, const LoRAFactors& f) {
    f.validate(W.rows(), W.cols());
    return W + f.B * f.A;
}

enum class Activation { relu, gelu };

inline Matrix activate(const Matrix& x, Activation act) {
    if (act == Activation::relu) return x.cwiseMax(0.0);
    constexpr double c = 0.7978845608028654;
    return (0.5 * x.array() * (1.0 + (c * (x.array() + 0.044715 * x.array().cube())).tanh())).matrix();
}

/// h + act(h W_down^T + b_down) W_up^T + b_up, row-wise.
inline Matrix bottleneck_forward(const Matrix& h, const BottleneckAdapter& a,
                                 Activation act = Activation::relu) {
    if (h.cols() != a.dim()) {
        throw DimensionError("bottleneck_forward: h is " + shape_str(h) + " but adapter dim is " +
                             std::to_string(a.dim()));
    }
    a.validate(a.dim());
    Matrix z = h * a.w_down.transpose();
    z.rowwise() += a.b_down.row(0);
    Matrix up = activate(z, act) * a.w_up.transpose();
    up.rowwise() += a.b_up.row(0);
    return h + up;
}

/// sum_i softmax(w)_i * states_i
inline Matrix weighted_sum(std::span<const Matrix> states, const LayerWeights& lw) {
    if (states.empty()) throw ConfigError("weighted_sum: no hidden states");
    if (static_cast<int>(states.size()) != lw.layers()) {
        throw ConfigError("weighted_sum: " + std::to_string(states.size()) + " states but " +
                          std::to_string(lw.layers()) + " layer weights");
    }
    const RowVector p = lw.coefficients();
    Matrix out = Matrix::Zero(states[0].rows(), states[0].cols());
    for (std::size_t i = 0; i < states.size(); ++i) {
        if (states[i].rows() != out.rows() || states[i].cols() != out.cols()) {
            throw DimensionError("weighted_sum: state " + std::to_string(i) + " is " + shape_str(states[i]));
        }
        out += p(static_cast<Index>(i)) * states[i];
    }
    return out;
}

inline RowVector gate_values(const GateVector& gv, int layer) {
    const int r = gv.row_of(layer);
    if (r < 0) throw ConfigError("weight_gate: layer " + std::to_string(layer) + " is not gated");
    return (1.0 / (1.0 + (-gv.g.row(r).array()).exp())).matrix();
}

/// sigmoid(g) .* h, broadcast over frames.
inline Matrix weight_gate(const Matrix& h, const GateVector& gv, int layer) {
    const RowVector gate = gate_values(gv, layer);
    if (h.cols() != gate.cols()) {
        throw DimensionError("weight_gate: h is " + shape_str(h) + " but gate has " +
                             std::to_string(gate.cols()) + " entries");
    }
    return (h.array().rowwise() * gate.array()).matrix();
}

// ---------------------------------------------------------------------------
// Counting

struct ParamCounts {
    long long ba = 0;
    long long lora = 0;
    long long ws = 0;
    long long wg = 0;

    long long total() const { return ba + lora + ws + wg; }
    long long of(AdapterKind k) const {
        switch (k) {
        case AdapterKind::ba: return ba;
        case AdapterKind::lora: return lora;
        case AdapterKind::ws: return ws;
        case AdapterKind::wg: return wg;
        }
        return 0;
    }
};

/// Exact trainable-value counts per enabled adaptor kind, read off the allocated blocks.
inline ParamCounts count_params(const AdapterSet& aset, const ArchShape& arch) {
    aset.validate(arch);
    ParamCounts c;
    for (const auto& a : aset.ba) c.ba += a.w_down.size() + a.b_down.size() + a.w_up.size() + a.b_up.size();
    for (const auto& triple : aset.lora) {
        for (const auto& f : triple) c.lora += f.A.size() + f.B.size();
    }
    if (aset.use_ws) c.ws = aset.ws.w.size();
    if (aset.use_wg) c.wg = aset.wg.g.size();
    return c;
}

/// Closed-form counts: L(2dm+m+d), 3Lr(d+k) with k=d, L, L*d.
inline ParamCounts count_formula(const ArchShape& arch, const AdapterConfig& cfg) {
    const long long L = arch.layers;
    const long long d = arch.d_model;
    const long long m = cfg.bottleneck;
    const long long r = cfg.rank;
    ParamCounts c;
    if (cfg.ba) c.ba = L * (2 * d * m + m + d);
    if (cfg.lora) c.lora = 3 * L * r * (d + d);
    if (cfg.ws) c.ws = L;
    if (cfg.wg) c.wg = L * d;
    return c;
}

// ---------------------------------------------------------------------------
// Tape forwards

namespace ad {

/// x * W^T + (x * A^T) * B^T
inline Var lora_project(Tape& t, Var x, Var W, Var A, Var B) {
    return add(t, matmul_nt(t, x, W), matmul_nt(t, matmul_nt(t, x, A), B));
}

inline Var bottleneck(Tape& t, Var h, Var w_down, Var b_down, Var w_up, Var b_up) {
    Var z = relu(t, add_row(t, matmul_nt(t, h, w_down), b_down));
    return add(t, h, add_row(t, matmul_nt(t, z, w_up), b_up));
}

inline Var gate(Tape& t, Var h, Var g_row) { return mul_row(t, h, sigmoid(t, g_row)); }

} // namespace ad
} // namespace peft
