#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every intermediate value of one forward pass. Leaves created
// with `param` route their accumulated gradient into an external buffer when
// `backward` runs; leaves created with `constant` never receive gradient, and
// nodes that depend only on constants skip their backward step entirely.

#include "peft/core.hpp"

#include <cmath>
#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace peft::ad {

struct Var {
    int id = -1;
};

class Tape {
public:
    Tape() { nodes_.reserve(512); }

    Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

    /// Leaf bound to a parameter block. When `grad_sink` is null the leaf is treated as frozen.
    Var param(const Matrix& value, Matrix* grad_sink) {
        Var v = push(value, grad_sink != nullptr, nullptr);
        nodes_[v.id].sink = grad_sink;
        return v;
    }

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient of the last `backward` target with respect to `v`; zero-sized if none flowed.
    const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

    void backward(Var loss) {
        auto& root = nodes_[loss.id];
        if (root.value.size() != 1) {
            throw DimensionError("backward: loss must be 1x1, got " + shape_str(root.value));
        }
        if (!root.requires_grad) return;
        root.grad = Matrix::Ones(1, 1);
        for (int i = loss.id; i >= 0; --i) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.back) n.back(*this, i);
            if (n.sink) {
                if (n.sink->size() == 0) {
                    *n.sink = n.grad;
                } else {
                    *n.sink += n.grad;
                }
            }
        }
    }

    // Op construction interface.
    using Backward = std::function<void(Tape&, int)>;

    Var node(Matrix value, std::initializer_list<Var> inputs, Backward back) {
        bool rg = false;
        for (auto in : inputs) rg = rg || nodes_[in.id].requires_grad;
        return push(std::move(value), rg, rg ? std::move(back) : Backward{});
    }

    Var node(Matrix value, std::span<const Var> inputs, Backward back) {
        bool rg = false;
        for (auto in : inputs) rg = rg || nodes_[in.id].requires_grad;
        return push(std::move(value), rg, rg ? std::move(back) : Backward{});
    }

    const Matrix& out_grad(int self) const { return nodes_[self].grad; }

    /// Adds `g` into the gradient of `v` when `v` participates in differentiation.
    template <typename Expr>
    void accumulate(Var v, const Expr& g) {
        auto& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward back;
        Matrix* sink = nullptr;
    };

    Var push(Matrix value, bool rg, Backward back) {
        nodes_.push_back(Node{std::move(value), Matrix(), rg, std::move(back), nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Linear algebra

/// a * b
inline Var matmul(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    if (A.cols() != B.rows()) {
        throw DimensionError("matmul: " + shape_str(A) + " * " + shape_str(B));
    }
    return t.node(A * B, {a, b}, [a, b](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
        if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
    });
}

/// a * b^T, the row-major projection idiom x * W^T.
inline Var matmul_nt(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    if (A.cols() != B.cols()) {
        throw DimensionError("matmul_nt: " + shape_str(A) + " * (" + shape_str(B) + ")^T");
    }
    return t.node(A * B.transpose(), {a, b}, [a, b](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b));
        if (tp.requires_grad(b)) tp.accumulate(b, g.transpose() * tp.value(a));
    });
}

inline Var add(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) {
        throw DimensionError("add: " + shape_str(A) + " + " + shape_str(B));
    }
    return t.node(A + B, {a, b}, [a, b](Tape& tp, int self) {
        tp.accumulate(a, tp.out_grad(self));
        tp.accumulate(b, tp.out_grad(self));
    });
}

/// a + row, broadcasting a 1xC row over every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
    const Matrix& A = t.value(a);
    const Matrix& R = t.value(row);
    if (R.rows() != 1 || R.cols() != A.cols()) {
        throw DimensionError("add_row: " + shape_str(A) + " + " + shape_str(R));
    }
    Matrix out = A;
    out.rowwise() += R.row(0);
    return t.node(std::move(out), {a, row}, [a, row](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        tp.accumulate(a, g);
        if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
    });
}

inline Var scale(Tape& t, Var a, double s) {
    return t.node(t.value(a) * s, {a}, [a, s](Tape& tp, int self) {
        tp.accumulate(a, tp.out_grad(self) * s);
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var relu(Tape& t, Var a) {
    return t.node(t.value(a).cwiseMax(0.0), {a}, [a](Tape& tp, int self) {
        const Matrix& x = tp.value(a);
        tp.accumulate(a, tp.out_grad(self).cwiseProduct(
                             (x.array() > 0.0).cast<double>().matrix()));
    });
}

/// tanh approximation of GELU.
inline constexpr double kSqrt2OverPi = 0.7978845608028654;

inline Var gelu(Tape& t, Var a) {
    constexpr double c = kSqrt2OverPi;
    const Matrix& x = t.value(a);
    Matrix u = (c * (x.array() + 0.044715 * x.array().cube())).matrix();
    Matrix th = u.array().tanh().matrix();
    Matrix out = (0.5 * x.array() * (1.0 + th.array())).matrix();
    return t.node(std::move(out), {a}, [a, th = std::move(th)](Tape& tp, int self) {
        const auto x = tp.value(a).array();
        const auto dth = 1.0 - th.array().square();
        const auto du = kSqrt2OverPi * (1.0 + 3.0 * 0.044715 * x.square());
        Matrix d = (0.5 * (1.0 + th.array()) + 0.5 * x * dth * du).matrix();
        tp.accumulate(a, tp.out_grad(self).cwiseProduct(d));
    });
}

inline Var sigmoid(Tape& t, Var a) {
    Matrix s = (1.0 / (1.0 + (-t.value(a).array()).exp())).matrix();
    return t.node(s, {a}, [a, s](Tape& tp, int self) {
        tp.accumulate(a, tp.out_grad(self).cwiseProduct(
                             (s.array() * (1.0 - s.array())).matrix()));
    });
}

/// a .* row, broadcasting a 1xC row over every row of a.
inline Var mul_row(Tape& t, Var a, Var row) {
    const Matrix& A = t.value(a);
    const Matrix& R = t.value(row);
    if (R.rows() != 1 || R.cols() != A.cols()) {
        throw DimensionError("mul_row: " + shape_str(A) + " .* " + shape_str(R));
    }
    Matrix out = A.array().rowwise() * R.row(0).array();
    return t.node(std::move(out), {a, row}, [a, row](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        if (tp.requires_grad(a)) {
            tp.accumulate(a, (g.array().rowwise() * tp.value(row).row(0).array()).matrix());
        }
        if (tp.requires_grad(row)) {
            tp.accumulate(row, g.cwiseProduct(tp.value(a)).colwise().sum());
        }
    });
}

// ---------------------------------------------------------------------------
// Row-wise normalisations

inline Matrix softmax_rows_value(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const double mx = x.row(r).maxCoeff();
        out.row(r) = (x.row(r).array() - mx).exp().matrix();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

inline Var softmax_rows(Tape& t, Var a) {
    Matrix s = softmax_rows_value(t.value(a));
    return t.node(s, {a}, [a, s](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        Vector dot = g.cwiseProduct(s).rowwise().sum();
        Matrix d = s.array() * (g.colwise() - dot).array();
        tp.accumulate(a, d);
    });
}

/// Per-row layer normalisation with learned gain and bias (both 1xC).
inline Var layer_norm(Tape& t, Var a, Var gamma, Var beta, double eps = 1e-5) {
    const Matrix& x = t.value(a);
    const Index n = x.cols();
    if (t.value(gamma).cols() != n || t.value(beta).cols() != n) {
        throw DimensionError("layer_norm: gain/bias width mismatch with " + shape_str(x));
    }
    Vector mean = x.rowwise().mean();
    Matrix xc = x.colwise() - mean;
    Vector inv_std = (xc.array().square().rowwise().mean() + eps).rsqrt().matrix();
    Matrix xhat = xc.array().colwise() * inv_std.array();
    Matrix out = xhat.array().rowwise() * t.value(gamma).row(0).array();
    out.rowwise() += t.value(beta).row(0);
    return t.node(std::move(out), {a, gamma, beta},
                  [a, gamma, beta, xhat, inv_std](Tape& tp, int self) {
                      const Matrix& g = tp.out_grad(self);
                      if (tp.requires_grad(gamma)) {
                          tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                      }
                      if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                      if (tp.requires_grad(a)) {
                          Matrix gx = g.array().rowwise() * tp.value(gamma).row(0).array();
                          Vector m1 = gx.rowwise().mean();
                          Vector m2 = gx.cwiseProduct(xhat).rowwise().mean();
                          Matrix d = gx.colwise() - m1;
                          d -= (xhat.array().colwise() * m2.array()).matrix();
                          d = d.array().colwise() * inv_std.array();
                          tp.accumulate(a, d);
                      }
                  });
}

// ---------------------------------------------------------------------------
// Structural

inline Var slice_cols(Tape& t, Var a, Index start, Index count) {
    const Matrix& A = t.value(a);
    if (start < 0 || count < 0 || start + count > A.cols()) {
        throw DimensionError("slice_cols: out of range for " + shape_str(A));
    }
    return t.node(A.middleCols(start, count), {a}, [a, start, count](Tape& tp, int self) {
        const Matrix& A0 = tp.value(a);
        Matrix g = Matrix::Zero(A0.rows(), A0.cols());
        g.middleCols(start, count) = tp.out_grad(self);
        tp.accumulate(a, g);
    });
}

/// Rows [start, start+count) of a.
inline Var slice_rows(Tape& t, Var a, Index start, Index count) {
    const Matrix& A = t.value(a);
    if (start < 0 || count < 0 || start + count > A.rows()) {
        throw DimensionError("slice_rows: out of range for " + shape_str(A));
    }
    return t.node(A.middleRows(start, count), {a}, [a, start, count](Tape& tp, int self) {
        const Matrix& A0 = tp.value(a);
        Matrix g = Matrix::Zero(A0.rows(), A0.cols());
        g.middleRows(start, count) = tp.out_grad(self);
        tp.accumulate(a, g);
    });
}

inline Var concat_cols(Tape& t, std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no operands");
    const Index rows = t.value(parts[0]).rows();
    Index cols = 0;
    for (auto p : parts) {
        if (t.value(p).rows() != rows) throw DimensionError("concat_cols: row mismatch");
        cols += t.value(p).cols();
    }
    Matrix out(rows, cols);
    Index c = 0;
    for (auto p : parts) {
        out.middleCols(c, t.value(p).cols()) = t.value(p);
        c += t.value(p).cols();
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return t.node(std::move(out), parts, [ins](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        Index off = 0;
        for (auto p : ins) {
            const Index w = tp.value(p).cols();
            if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(off, w));
            off += w;
        }
    });
}

inline Var stack_rows(Tape& t, std::span<const Var> rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no operands");
    const Index cols = t.value(rows[0]).cols();
    Matrix out(static_cast<Index>(rows.size()), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Matrix& r = t.value(rows[i]);
        if (r.rows() != 1 || r.cols() != cols) throw DimensionError("stack_rows: operand " + std::to_string(i) + " is " + shape_str(r));
        out.row(static_cast<Index>(i)) = r.row(0);
    }
    std::vector<Var> ins(rows.begin(), rows.end());
    return t.node(std::move(out), rows, [ins](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        for (std::size_t i = 0; i < ins.size(); ++i) {
            if (tp.requires_grad(ins[i])) tp.accumulate(ins[i], g.row(static_cast<Index>(i)));
        }
    });
}

/// Column means: TxC -> 1xC.
inline Var mean_rows(Tape& t, Var a) {
    const Matrix& A = t.value(a);
    const double inv = 1.0 / static_cast<double>(A.rows());
    return t.node(A.colwise().mean(), {a}, [a, inv](Tape& tp, int self) {
        const Matrix& A0 = tp.value(a);
        Matrix g = tp.out_grad(self).replicate(A0.rows(), 1) * inv;
        tp.accumulate(a, g);
    });
}

/// sum_i softmax(w)_i * states_i with `w` a 1xL row.
inline Var softmax_mix(Tape& t, std::span<const Var> states, Var w) {
    const Matrix& W = t.value(w);
    if (states.empty() || W.rows() != 1 || W.cols() != static_cast<Index>(states.size())) {
        throw ConfigError("softmax_mix: " + std::to_string(states.size()) + " states vs weights " +
                          shape_str(W));
    }
    Matrix p = softmax_rows_value(W);
    const Matrix& s0 = t.value(states[0]);
    Matrix out = Matrix::Zero(s0.rows(), s0.cols());
    for (std::size_t i = 0; i < states.size(); ++i) {
        const Matrix& si = t.value(states[i]);
        if (si.rows() != s0.rows() || si.cols() != s0.cols()) {
            throw DimensionError("softmax_mix: state " + std::to_string(i) + " is " + shape_str(si));
        }
        out += p(0, static_cast<Index>(i)) * si;
    }
    std::vector<Var> ins(states.begin(), states.end());
    std::vector<Var> all = ins;
    all.push_back(w);
    return t.node(std::move(out), all, [ins, w, p](Tape& tp, int self) {
        const Matrix& g = tp.out_grad(self);
        const Index L = static_cast<Index>(ins.size());
        RowVector dp(L);
        for (Index i = 0; i < L; ++i) {
            const Var s = ins[static_cast<std::size_t>(i)];
            dp(i) = g.cwiseProduct(tp.value(s)).sum();
            if (tp.requires_grad(s)) tp.accumulate(s, g * p(0, i));
        }
        if (tp.requires_grad(w)) {
            const double dot = dp.dot(p.row(0));
            Matrix dw = (p.row(0).array() * (dp.array() - dot)).matrix();
            tp.accumulate(w, dw);
        }
    });
}

// ---------------------------------------------------------------------------
// Losses (all return 1x1)

inline Var sum_all(Tape& t, Var a) {
    Matrix out(1, 1);
    out(0, 0) = t.value(a).sum();
    return t.node(std::move(out), {a}, [a](Tape& tp, int self) {
        const Matrix& A = tp.value(a);
        tp.accumulate(a, Matrix::Constant(A.rows(), A.cols(), tp.out_grad(self)(0, 0)));
    });
}

/// Mean softmax cross-entropy of BxC logits against integer labels.
inline Var cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
    const Matrix& Z = t.value(logits);
    if (Z.rows() != static_cast<Index>(labels.size())) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             shape_str(Z));
    }
    Matrix p = softmax_rows_value(Z);
    double loss = 0.0;
    for (Index i = 0; i < Z.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= Z.cols()) throw InputError("cross_entropy: label out of range");
        const double mx = Z.row(i).maxCoeff();
        loss += -(Z(i, y) - mx - std::log((Z.row(i).array() - mx).exp().sum()));
    }
    const double inv = 1.0 / static_cast<double>(Z.rows());
    Matrix out(1, 1);
    out(0, 0) = loss * inv;
    std::vector<int> ys(labels.begin(), labels.end());
    return t.node(std::move(out), {logits}, [logits, p, ys, inv](Tape& tp, int self) {
        Matrix d = p;
        for (std::size_t i = 0; i < ys.size(); ++i) d(static_cast<Index>(i), ys[i]) -= 1.0;
        tp.accumulate(logits, d * (inv * tp.out_grad(self)(0, 0)));
    });
}

/// Mean squared error over all entries.
inline Var mse(Tape& t, Var pred, const Matrix& target) {
    const Matrix& P = t.value(pred);
    require_shape(target, P.rows(), P.cols(), "mse target");
    Matrix diff = P - target;
    const double inv = 1.0 / static_cast<double>(P.size());
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm() * inv;
    return t.node(std::move(out), {pred}, [pred, diff, inv](Tape& tp, int self) {
        tp.accumulate(pred, diff * (2.0 * inv * tp.out_grad(self)(0, 0)));
    });
}

/// Mean squared error restricted to the rows flagged in `rows`.
inline Var masked_row_mse(Tape& t, Var pred, const Matrix& target, const std::vector<bool>& rows) {
    const Matrix& P = t.value(pred);
    require_shape(target, P.rows(), P.cols(), "masked_row_mse target");
    if (static_cast<Index>(rows.size()) != P.rows()) throw DimensionError("masked_row_mse: mask length");
    Matrix diff = Matrix::Zero(P.rows(), P.cols());
    Index n = 0;
    for (Index r = 0; r < P.rows(); ++r) {
        if (!rows[static_cast<std::size_t>(r)]) continue;
        diff.row(r) = P.row(r) - target.row(r);
        ++n;
    }
    const double inv = n > 0 ? 1.0 / static_cast<double>(n * P.cols()) : 0.0;
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm() * inv;
    return t.node(std::move(out), {pred}, [pred, diff, inv](Tape& tp, int self) {
        tp.accumulate(pred, diff * (2.0 * inv * tp.out_grad(self)(0, 0)));
    });
}

/// 1 - mean over columns of the concordance correlation between pred and target columns.
/// Columns whose denominator vanishes contribute zero concordance and zero gradient.
inline Var ccc_loss(Tape& t, Var pred, const Matrix& target) {
    const Matrix& P = t.value(pred);
    require_shape(target, P.rows(), P.cols(), "ccc_loss target");
    const Index n = P.rows();
    const Index k = P.cols();
    const double invn = 1.0 / static_cast<double>(n);
    Matrix dccc = Matrix::Zero(n, k);
    double total = 0.0;
    for (Index c = 0; c < k; ++c) {
        const Vector p = P.col(c);
        const Vector a = target.col(c);
        const double mp = p.mean();
        const double ma = a.mean();
        const Vector pc = p.array() - mp;
        const Vector ac = a.array() - ma;
        const double cov = pc.dot(ac) * invn;
        const double vp = pc.squaredNorm() * invn;
        const double va = ac.squaredNorm() * invn;
        const double den = va + vp + (ma - mp) * (ma - mp);
        if (den <= 0.0) continue;
        const double num = 2.0 * cov;
        total += num / den;
        // d num / dp_i = 2 ac_i / n ; d den / dp_i = 2 pc_i / n - 2 (ma - mp) / n
        const Vector dnum = ac * (2.0 * invn);
        const Vector dden = (pc.array() - (ma - mp)).matrix() * (2.0 * invn);
        dccc.col(c) = (dnum * den - dden * num) / (den * den);
    }
    Matrix out(1, 1);
    out(0, 0) = 1.0 - total / static_cast<double>(k);
    return t.node(std::move(out), {pred}, [pred, dccc, k](Tape& tp, int self) {
        tp.accumulate(pred, dccc * (-tp.out_grad(self)(0, 0) / static_cast<double>(k)));
    });
}

} // namespace peft::ad
