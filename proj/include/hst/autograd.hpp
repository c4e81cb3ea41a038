#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Every value is a row-major matrix. Batched sequences are stored "stacked":
// B blocks of N rows each, row b*N + i holding token i of sample b. Ops that
// need the block structure take the block length explicitly.

#include "hst/errors.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hst {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

namespace ag {

struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Mat& grad_ref() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    const Mat& value() const { return n_->value; }
    Mat& mutable_value() { return n_->value; }
    const Mat& grad() const { return n_->grad; }
    Mat& grad_ref() const { return n_->grad_ref(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    Eigen::Index rows() const { return n_->value.rows(); }
    Eigen::Index cols() const { return n_->value.cols(); }
    double scalar() const { return n_->value(0, 0); }
    bool defined() const { return static_cast<bool>(n_); }
    const std::shared_ptr<Node>& node() const { return n_; }

    void zero_grad() {
        if (n_) n_->grad.setZero(n_->value.rows(), n_->value.cols());
    }

private:
    std::shared_ptr<Node> n_;
};

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII scope in which no graph is recorded (evaluation mode).
class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline Var constant(Mat value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

inline Var parameter(Mat value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

inline Var scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }

namespace detail {

inline Var make(Mat value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_enabled_flag()) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (auto& in : inputs) n->parents.push_back(in.node());
            n->backward_fn = std::move(fn);
        }
    }
    return Var(std::move(n));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline Mat& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_ref(); }
inline const Mat& pval(const Node& self, std::size_t i) { return self.parents[i]->value; }

inline void require_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

}  // namespace detail

// Runs reverse accumulation from a 1x1 root.
inline void backward(const Var& root) {
    if (!root.requires_grad()) return;
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be scalar");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_ref()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    return detail::make(a.value() + b.value(), {a, b}, [](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0) += s.grad;
        if (detail::wants(s, 1)) detail::pgrad(s, 1) += s.grad;
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape(a.value(), b.value(), "sub");
    return detail::make(a.value() - b.value(), {a, b}, [](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0) += s.grad;
        if (detail::wants(s, 1)) detail::pgrad(s, 1) -= s.grad;
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    return detail::make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0) += s.grad.cwiseProduct(detail::pval(s, 1));
        if (detail::wants(s, 1)) detail::pgrad(s, 1) += s.grad.cwiseProduct(detail::pval(s, 0));
    });
}

inline Var scale(const Var& a, double c) {
    return detail::make(a.value() * c, {a}, [c](Node& s) {
        detail::pgrad(s, 0) += s.grad * c;
    });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// a + row broadcast over every row.
inline Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias width mismatch");
    Mat out = a.value().rowwise() + row.value().row(0);
    return detail::make(std::move(out), {a, row}, [](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0) += s.grad;
        if (detail::wants(s, 1)) detail::pgrad(s, 1) += s.grad.colwise().sum();
    });
}

// a * row broadcast (cwise) over every row.
inline Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: width mismatch");
    Mat out = a.value().array().rowwise() * row.value().row(0).array();
    return detail::make(std::move(out), {a, row}, [](Node& s) {
        const Mat& av = detail::pval(s, 0);
        const Mat& rv = detail::pval(s, 1);
        if (detail::wants(s, 0))
            detail::pgrad(s, 0).array() += s.grad.array().rowwise() * rv.row(0).array();
        if (detail::wants(s, 1)) detail::pgrad(s, 1) += s.grad.cwiseProduct(av).colwise().sum();
    });
}

// a * column broadcast: row r scaled by col(r, 0).
inline Var mul_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("mul_col: height mismatch");
    Mat out = a.value().array().colwise() * col.value().col(0).array();
    return detail::make(std::move(out), {a, col}, [](Node& s) {
        const Mat& av = detail::pval(s, 0);
        const Mat& cv = detail::pval(s, 1);
        if (detail::wants(s, 0))
            detail::pgrad(s, 0).array() += s.grad.array().colwise() * cv.col(0).array();
        if (detail::wants(s, 1)) detail::pgrad(s, 1) += s.grad.cwiseProduct(av).rowwise().sum();
    });
}

// Stacked a [(B*N) x C] scaled column-wise by per-block gates g [B x C].
inline Var mul_block_row(const Var& a, const Var& g, Eigen::Index block) {
    const Eigen::Index nb = g.rows();
    if (g.cols() != a.cols() || nb * block != a.rows()) throw ShapeError("mul_block_row: shape mismatch");
    Mat out(a.rows(), a.cols());
    for (Eigen::Index b = 0; b < nb; ++b)
        out.middleRows(b * block, block) =
            a.value().middleRows(b * block, block).array().rowwise() * g.value().row(b).array();
    return detail::make(std::move(out), {a, g}, [block, nb](Node& s) {
        const Mat& av = detail::pval(s, 0);
        const Mat& gv = detail::pval(s, 1);
        for (Eigen::Index b = 0; b < nb; ++b) {
            auto gb = s.grad.middleRows(b * block, block);
            if (detail::wants(s, 0))
                detail::pgrad(s, 0).middleRows(b * block, block).array() +=
                    gb.array().rowwise() * gv.row(b).array();
            if (detail::wants(s, 1))
                detail::pgrad(s, 1).row(b) +=
                    gb.cwiseProduct(av.middleRows(b * block, block)).colwise().sum();
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
    return detail::make(a.value() * b.value(), {a, b}, [](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0).noalias() += s.grad * detail::pval(s, 1).transpose();
        if (detail::wants(s, 1)) detail::pgrad(s, 1).noalias() += detail::pval(s, 0).transpose() * s.grad;
    });
}

// x W^T (+ b). W is [out x in], b is [1 x out].
inline Var linear(const Var& x, const Var& w, const Var& b) {
    if (x.cols() != w.cols()) throw ShapeError("linear: input width mismatch");
    if (b.rows() != 1 || b.cols() != w.rows()) throw ShapeError("linear: bias width mismatch");
    Mat out = x.value() * w.value().transpose();
    out.rowwise() += b.value().row(0);
    return detail::make(std::move(out), {x, w, b}, [](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0).noalias() += s.grad * detail::pval(s, 1);
        if (detail::wants(s, 1)) detail::pgrad(s, 1).noalias() += s.grad.transpose() * detail::pval(s, 0);
        if (detail::wants(s, 2)) detail::pgrad(s, 2) += s.grad.colwise().sum();
    });
}

inline Var linear(const Var& x, const Var& w) {
    if (x.cols() != w.cols()) throw ShapeError("linear: input width mismatch");
    return detail::make(x.value() * w.value().transpose(), {x, w}, [](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0).noalias() += s.grad * detail::pval(s, 1);
        if (detail::wants(s, 1)) detail::pgrad(s, 1).noalias() += s.grad.transpose() * detail::pval(s, 0);
    });
}

inline Var transpose(const Var& a) {
    return detail::make(a.value().transpose(), {a}, [](Node& s) {
        detail::pgrad(s, 0) += s.grad.transpose();
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var tanh(const Var& a) {
    return detail::make(a.value().array().tanh().matrix(), {a}, [](Node& s) {
        detail::pgrad(s, 0).array() += s.grad.array() * (1.0 - s.value.array().square());
    });
}

inline Mat sigmoid_values(const Mat& x) {
    return x.unaryExpr([](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
}

inline Var sigmoid(const Var& a) {
    return detail::make(sigmoid_values(a.value()), {a}, [](Node& s) {
        detail::pgrad(s, 0).array() += s.grad.array() * s.value.array() * (1.0 - s.value.array());
    });
}

inline Var relu(const Var& a) {
    return detail::make(a.value().cwiseMax(0.0), {a}, [](Node& s) {
        detail::pgrad(s, 0).array() += (detail::pval(s, 0).array() > 0.0).select(s.grad.array(), 0.0);
    });
}

inline double softplus_value(double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }

inline Var softplus(const Var& a) {
    return detail::make(a.value().unaryExpr(&softplus_value), {a}, [](Node& s) {
        detail::pgrad(s, 0).array() += s.grad.array() * sigmoid_values(detail::pval(s, 0)).array();
    });
}

inline Var exp(const Var& a) {
    return detail::make(a.value().array().exp().matrix(), {a}, [](Node& s) {
        detail::pgrad(s, 0).array() += s.grad.array() * s.value.array();
    });
}

// phi(z) = (exp(z) - 1) / z, the zero-order-hold input gain for a scalar pole.
inline double zoh_phi_value(double z) {
    if (std::abs(z) < 1e-6) return 1.0 + z / 2.0 + z * z / 6.0;
    return std::expm1(z) / z;
}

inline double zoh_phi_derivative(double z) {
    if (std::abs(z) < 1e-4) return 0.5 + z / 3.0 + z * z / 8.0;
    return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

inline Var zoh_phi(const Var& a) {
    return detail::make(a.value().unaryExpr(&zoh_phi_value), {a}, [](Node& s) {
        detail::pgrad(s, 0).array() +=
            s.grad.array() * detail::pval(s, 0).unaryExpr(&zoh_phi_derivative).array();
    });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var detach(const Var& a) { return constant(a.value()); }

// Forward value q, gradient passed to z unchanged: z + sg(q - z).
inline Var straight_through(const Var& z, const Mat& q) {
    detail::require_same_shape(z.value(), q, "straight_through");
    return detail::make(q, {z}, [](Node& s) { detail::pgrad(s, 0) += s.grad; });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    Eigen::Index rows = parts[0].rows(), cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat out(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return detail::make(std::move(out), parts, [](Node& s) {
        Eigen::Index c0 = 0;
        for (std::size_t i = 0; i < s.parents.size(); ++i) {
            const Eigen::Index w = s.parents[i]->value.cols();
            if (detail::wants(s, i)) detail::pgrad(s, i) += s.grad.middleCols(c0, w);
            c0 += w;
        }
    });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
    return detail::make(a.value().middleCols(start, count), {a}, [start, count](Node& s) {
        detail::pgrad(s, 0).middleCols(start, count) += s.grad;
    });
}

inline Var gather_rows(const Var& a, std::vector<Eigen::Index> idx) {
    Mat out(static_cast<Eigen::Index>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
    }
    return detail::make(std::move(out), {a}, [idx = std::move(idx)](Node& s) {
        Mat& g = detail::pgrad(s, 0);
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += s.grad.row(static_cast<Eigen::Index>(i));
    });
}

// Rows t*stride .. for a stacked [(B*N) x C] input: returns row b*N + t of every block.
inline Var rows_at(const Var& a, Eigen::Index t, Eigen::Index block) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index r = t; r < a.rows(); r += block) idx.push_back(r);
    return gather_rows(a, std::move(idx));
}

// Inverse of rows_at over all t: steps[t] is [B x C]; output row b*N + t = steps[t].row(b).
inline Var stack_steps(const std::vector<Var>& steps) {
    if (steps.empty()) throw ShapeError("stack_steps: no inputs");
    const Eigen::Index n = static_cast<Eigen::Index>(steps.size());
    const Eigen::Index nb = steps[0].rows(), c = steps[0].cols();
    Mat out(nb * n, c);
    for (Eigen::Index t = 0; t < n; ++t) {
        if (steps[t].rows() != nb || steps[t].cols() != c) throw ShapeError("stack_steps: shape mismatch");
        for (Eigen::Index b = 0; b < nb; ++b) out.row(b * n + t) = steps[t].value().row(b);
    }
    return detail::make(std::move(out), steps, [n, nb](Node& s) {
        for (Eigen::Index t = 0; t < n; ++t) {
            if (!detail::wants(s, t)) continue;
            Mat& g = detail::pgrad(s, t);
            for (Eigen::Index b = 0; b < nb; ++b) g.row(b) += s.grad.row(b * n + t);
        }
    });
}

inline Mat block_transpose_values(const Mat& a, Eigen::Index block) {
    const Eigen::Index nb = a.rows() / block, c = a.cols();
    Mat out(nb * c, block);
    for (Eigen::Index b = 0; b < nb; ++b)
        out.middleRows(b * c, c) = a.middleRows(b * block, block).transpose();
    return out;
}

// Within each block, row i receives row i-1 of the input; row 0 is zero.
inline Var shift_in_blocks(const Var& a, Eigen::Index block) {
    if (block <= 0 || a.rows() % block != 0) throw ShapeError("shift_in_blocks: rows not divisible by block");
    Mat out = Mat::Zero(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < a.rows(); r += block)
        out.middleRows(r + 1, block - 1) = a.value().middleRows(r, block - 1);
    return detail::make(std::move(out), {a}, [block](Node& s) {
        Mat& g = detail::pgrad(s, 0);
        for (Eigen::Index r = 0; r < s.grad.rows(); r += block)
            g.middleRows(r, block - 1) += s.grad.middleRows(r + 1, block - 1);
    });
}

// Transposes every [N x C] block of a stacked matrix, giving [(B*C) x N].
inline Var block_transpose(const Var& a, Eigen::Index block) {
    if (block <= 0 || a.rows() % block != 0) throw ShapeError("block_transpose: rows not divisible by block");
    const Eigen::Index c = a.cols();
    return detail::make(block_transpose_values(a.value(), block), {a}, [c](Node& s) {
        detail::pgrad(s, 0) += block_transpose_values(s.grad, c);
    });
}

// Adds P [N x C] to every block.
inline Var add_block(const Var& a, const Var& p) {
    const Eigen::Index block = p.rows();
    if (p.cols() != a.cols() || a.rows() % block != 0) throw ShapeError("add_block: shape mismatch");
    Mat out = a.value();
    for (Eigen::Index r = 0; r < a.rows(); r += block) out.middleRows(r, block) += p.value();
    return detail::make(std::move(out), {a, p}, [block](Node& s) {
        if (detail::wants(s, 0)) detail::pgrad(s, 0) += s.grad;
        if (detail::wants(s, 1)) {
            Mat& g = detail::pgrad(s, 1);
            for (Eigen::Index r = 0; r < s.grad.rows(); r += block) g += s.grad.middleRows(r, block);
        }
    });
}

// Mean over columns: [R x C] -> [R x 1].
inline Var row_mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a.cols());
    return detail::make(a.value().rowwise().mean(), {a}, [inv](Node& s) {
        detail::pgrad(s, 0).colwise() += s.grad.col(0) * inv;
    });
}

// Mean over the rows of each block: [(B*N) x C] -> [B x C].
inline Var block_mean(const Var& a, Eigen::Index block) {
    if (block <= 0 || a.rows() % block != 0) throw ShapeError("block_mean: rows not divisible by block");
    const Eigen::Index nb = a.rows() / block;
    Mat out(nb, a.cols());
    for (Eigen::Index b = 0; b < nb; ++b) out.row(b) = a.value().middleRows(b * block, block).colwise().mean();
    const double inv = 1.0 / static_cast<double>(block);
    return detail::make(std::move(out), {a}, [block, nb, inv](Node& s) {
        Mat& g = detail::pgrad(s, 0);
        for (Eigen::Index b = 0; b < nb; ++b) g.middleRows(b * block, block).rowwise() += s.grad.row(b) * inv;
    });
}

// [(B*N) x 1] -> [B x N].
inline Var fold_column(const Var& a, Eigen::Index block) {
    if (a.cols() != 1 || a.rows() % block != 0) throw ShapeError("fold_column: shape mismatch");
    const Eigen::Index nb = a.rows() / block;
    Mat out = Eigen::Map<const Mat>(a.value().data(), nb, block);
    return detail::make(std::move(out), {a}, [nb, block](Node& s) {
        detail::pgrad(s, 0) += Eigen::Map<const Mat>(s.grad.data(), nb * block, 1);
    });
}

// [B x N] -> [(B*N) x 1].
inline Var unfold_rows(const Var& a) {
    const Eigen::Index nb = a.rows(), n = a.cols();
    Mat out = Eigen::Map<const Mat>(a.value().data(), nb * n, 1);
    return detail::make(std::move(out), {a}, [nb, n](Node& s) {
        detail::pgrad(s, 0) += Eigen::Map<const Mat>(s.grad.data(), nb, n);
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Var sum(const Var& a) {
    return detail::make(Mat::Constant(1, 1, a.value().sum()), {a}, [](Node& s) {
        detail::pgrad(s, 0).array() += s.grad(0, 0);
    });
}

inline Var add_scalars(const std::vector<std::pair<double, Var>>& terms) {
    double v = 0.0;
    std::vector<Var> ins;
    std::vector<double> w;
    for (const auto& [c, t] : terms) {
        v += c * t.scalar();
        ins.push_back(t);
        w.push_back(c);
    }
    return detail::make(Mat::Constant(1, 1, v), ins, [w](Node& s) {
        for (std::size_t i = 0; i < w.size(); ++i)
            if (detail::wants(s, i)) detail::pgrad(s, i)(0, 0) += w[i] * s.grad(0, 0);
    });
}

// Mean over all elements of (a - b)^2.
inline Var mse(const Var& a, const Var& b) {
    detail::require_same_shape(a.value(), b.value(), "mse");
    const double inv = 1.0 / static_cast<double>(a.value().size());
    Mat diff = a.value() - b.value();
    const double v = diff.squaredNorm() * inv;
    return detail::make(Mat::Constant(1, 1, v), {a, b}, [diff = std::move(diff), inv](Node& s) {
        const double g = s.grad(0, 0) * 2.0 * inv;
        if (detail::wants(s, 0)) detail::pgrad(s, 0) += diff * g;
        if (detail::wants(s, 1)) detail::pgrad(s, 1) -= diff * g;
    });
}

// Mean over rows of the squared L2 norm of (a - b) per row.
inline Var mean_row_sqdist(const Var& a, const Var& b) {
    detail::require_same_shape(a.value(), b.value(), "mean_row_sqdist");
    const double inv = 1.0 / static_cast<double>(a.rows());
    Mat diff = a.value() - b.value();
    const double v = diff.squaredNorm() * inv;
    return detail::make(Mat::Constant(1, 1, v), {a, b}, [diff = std::move(diff), inv](Node& s) {
        const double g = s.grad(0, 0) * 2.0 * inv;
        if (detail::wants(s, 0)) detail::pgrad(s, 0) += diff * g;
        if (detail::wants(s, 1)) detail::pgrad(s, 1) -= diff * g;
    });
}

inline Mat softmax_rows(const Mat& logits) {
    Mat p = logits;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// Mean cross-entropy of integer labels under row-wise softmax of logits.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
        throw ShapeError("softmax_cross_entropy: label count mismatch");
    Mat p = softmax_rows(logits.value());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= p.cols()) throw ShapeError("softmax_cross_entropy: label out of range");
        loss -= std::log(std::max(p(r, y), 1e-300));
    }
    const double inv = 1.0 / static_cast<double>(p.rows());
    return detail::make(Mat::Constant(1, 1, loss * inv), {logits}, [p = std::move(p), labels, inv](Node& s) {
        Mat g = p;
        for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
        detail::pgrad(s, 0) += g * (inv * s.grad(0, 0));
    });
}

// ---------------------------------------------------------------------------
// Fused layers

// Row-wise layer normalization with affine gain/bias rows [1 x C].
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    const Eigen::Index r = x.rows(), c = x.cols();
    if (gain.cols() != c || bias.cols() != c) throw ShapeError("layer_norm: width mismatch");
    Mat xhat(r, c);
    Vec inv_std(r);
    for (Eigen::Index i = 0; i < r; ++i) {
        const double mu = x.value().row(i).mean();
        const double var = (x.value().row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
    }
    Mat out = xhat.array().rowwise() * gain.value().row(0).array();
    out.rowwise() += bias.value().row(0);
    return detail::make(std::move(out), {x, gain, bias},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& s) {
                            const Mat& gv = detail::pval(s, 1);
                            if (detail::wants(s, 0)) {
                                Mat dxhat = s.grad.array().rowwise() * gv.row(0).array();
                                Mat& g = detail::pgrad(s, 0);
                                for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                                    const double m1 = dxhat.row(i).mean();
                                    const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(dxhat.cols());
                                    g.row(i).array() +=
                                        inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                                }
                            }
                            if (detail::wants(s, 1)) detail::pgrad(s, 1) += s.grad.cwiseProduct(xhat).colwise().sum();
                            if (detail::wants(s, 2)) detail::pgrad(s, 2) += s.grad.colwise().sum();
                        });
}

// Multi-head scaled dot-product attention within each block of a stacked
// sequence. q, k, v are [(B*N) x C]; heads must divide C.
inline Var block_attention(const Var& q, const Var& k, const Var& v, int heads, Eigen::Index block) {
    const Eigen::Index rows = q.rows(), c = q.cols();
    detail::require_same_shape(q.value(), k.value(), "block_attention");
    detail::require_same_shape(q.value(), v.value(), "block_attention");
    if (heads <= 0 || c % heads != 0) throw ShapeError("block_attention: width not divisible by heads");
    if (block <= 0 || rows % block != 0) throw ShapeError("block_attention: rows not divisible by block");
    const Eigen::Index nb = rows / block, dh = c / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Mat> probs(static_cast<std::size_t>(nb * heads));
    Mat out(rows, c);
    for (Eigen::Index b = 0; b < nb; ++b) {
        for (Eigen::Index h = 0; h < heads; ++h) {
            auto qb = q.value().block(b * block, h * dh, block, dh);
            auto kb = k.value().block(b * block, h * dh, block, dh);
            auto vb = v.value().block(b * block, h * dh, block, dh);
            Mat scores = (qb * kb.transpose()) * sc;
            Mat p = softmax_rows(scores);
            out.block(b * block, h * dh, block, dh).noalias() = p * vb;
            probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
        }
    }
    return detail::make(std::move(out), {q, k, v},
                        [probs = std::move(probs), nb, heads, block, dh, sc](Node& s) {
                            const Mat& qv = detail::pval(s, 0);
                            const Mat& kv = detail::pval(s, 1);
                            const Mat& vv = detail::pval(s, 2);
                            const bool wq = detail::wants(s, 0), wk = detail::wants(s, 1), wv = detail::wants(s, 2);
                            for (Eigen::Index b = 0; b < nb; ++b) {
                                for (Eigen::Index h = 0; h < heads; ++h) {
                                    const Mat& p = probs[static_cast<std::size_t>(b * heads + h)];
                                    auto go = s.grad.block(b * block, h * dh, block, dh);
                                    auto qb = qv.block(b * block, h * dh, block, dh);
                                    auto kb = kv.block(b * block, h * dh, block, dh);
                                    auto vb = vv.block(b * block, h * dh, block, dh);
                                    if (wv) detail::pgrad(s, 2).block(b * block, h * dh, block, dh).noalias() += p.transpose() * go;
                                    if (!wq && !wk) continue;
                                    Mat dp = go * vb.transpose();
                                    Vec rowdot = dp.cwiseProduct(p).rowwise().sum();
                                    Mat ds = p.array() * (dp.colwise() - rowdot).array();
                                    ds *= sc;
                                    if (wq) detail::pgrad(s, 0).block(b * block, h * dh, block, dh).noalias() += ds * kb;
                                    if (wk) detail::pgrad(s, 1).block(b * block, h * dh, block, dh).noalias() += ds.transpose() * qb;
                                }
                            }
                        });
}

}  // namespace ag
}  // namespace hst
