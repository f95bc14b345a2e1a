#pragma once

// Tape-based reverse-mode differentiation over dense row-major float64 arrays.
//
// A Tape records every operation in creation order, which is a topological
// order by construction. Parameters live outside the tape; binding one with
// Tape::param() copies its values into a leaf node whose gradient is added
// back into Parameter::grad when backward() reaches it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aga {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated (empty mask, sigma out of range, ...).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Test hook: when set, matmul's backward pass flips the sign of the gradient
/// it sends to its left operand. Used by the mutation check of the verifier.
namespace fault {
inline bool flip_matmul_backward = false;
}

/// Trainable array living outside any tape.
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    // False until some backward pass reaches this parameter (like a None grad).
    bool has_grad = false;

    Parameter() = default;
    Parameter(std::string n, Shape s)
        : name(std::move(n)), shape(std::move(s)), data(numel(shape), 0.0) {}

    std::size_t size() const { return data.size(); }

    void zero_grad() {
        grad.assign(data.size(), 0.0);
        has_grad = false;
    }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class DiffTensor {
public:
    DiffTensor() = default;

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const { return numel(shape()); }
    std::size_t rows() const;
    std::size_t cols() const;
    std::span<const double> data() const;
    /// Gradient from the most recent backward pass; zeros if never reached.
    std::vector<double> grad() const;
    bool requires_grad() const;
    std::size_t node_id() const { return id_; }
    Tape& tape() const { return *tape_; }
    bool valid() const { return tape_ != nullptr; }

    double item() const;
    double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

private:
    friend class Tape;
    DiffTensor(Tape* t, std::size_t id) : tape_(t), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    struct Node {
        std::string op;
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        bool reached = false;
        BackwardFn backward;
        Parameter* sink = nullptr;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    DiffTensor param(Parameter& p) {
        auto t = push("param", p.shape, p.data, {}, true, nullptr);
        nodes_[t.id_].sink = &p;
        return t;
    }

    /// Differentiable leaf with no backing parameter; read its gradient via grad().
    DiffTensor variable(Shape shape, std::vector<double> value) {
        check_size(shape, value);
        return push("variable", std::move(shape), std::move(value), {}, true, nullptr);
    }

    DiffTensor constant(Shape shape, std::vector<double> value) {
        check_size(shape, value);
        return push("constant", std::move(shape), std::move(value), {}, false, nullptr);
    }

    /// Append a node computed from `inputs`. The node requires grad iff any input does.
    DiffTensor push(std::string op, Shape shape, std::vector<double> value,
                    std::vector<std::size_t> inputs, BackwardFn backward) {
        bool rg = false;
        for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
        return push(std::move(op), std::move(shape), std::move(value), std::move(inputs), rg,
                    std::move(backward));
    }

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& record() const { return nodes_; }

    const std::vector<double>& value(std::size_t id) const { return nodes_[id].value; }
    const std::vector<double>& out_grad(std::size_t id) const { return nodes_[id].grad; }
    bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of `id` for accumulation; marks the node as reached.
    std::span<double> grad_acc(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        n.reached = true;
        return n.grad;
    }

    /// Reverse sweep from a scalar. Intermediate gradients are reset on every
    /// call; parameter gradients accumulate across calls.
    void backward(const DiffTensor& loss) {
        if (loss.tape_ != this) throw ContractError("backward: loss does not belong to this tape");
        if (numel(nodes_[loss.id_].shape) != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                shape_str(nodes_[loss.id_].shape));
        for (auto& n : nodes_) {
            n.grad.clear();
            n.reached = false;
        }
        last_visits_ = 0;
        grad_acc(loss.id_)[0] = 1.0;
        for (std::size_t k = loss.id_ + 1; k-- > 0;) {
            auto& n = nodes_[k];
            if (!n.reached || !n.requires_grad) continue;
            ++last_visits_;
            if (n.sink) {
                auto& p = *n.sink;
                if (p.grad.size() != p.data.size()) p.grad.assign(p.data.size(), 0.0);
                for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
                p.has_grad = true;
            }
            if (n.backward) n.backward(*this, k);
        }
    }

    std::size_t last_backward_visits() const { return last_visits_; }

private:
    friend class DiffTensor;

    static void check_size(const Shape& shape, const std::vector<double>& value) {
        if (numel(shape) != value.size())
            throw ShapeError("leaf: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(value.size()));
    }

    DiffTensor push(std::string op, Shape shape, std::vector<double> value,
                    std::vector<std::size_t> inputs, bool rg, BackwardFn backward) {
        Node n;
        n.op = std::move(op);
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        n.requires_grad = rg;
        if (rg) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return DiffTensor(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::size_t last_visits_ = 0;
};

inline const Shape& DiffTensor::shape() const { return tape_->node(id_).shape; }
inline std::span<const double> DiffTensor::data() const { return tape_->node(id_).value; }
inline bool DiffTensor::requires_grad() const { return tape_->node(id_).requires_grad; }

inline std::vector<double> DiffTensor::grad() const {
    const auto& n = tape_->node(id_);
    if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
    return n.grad;
}

inline std::size_t DiffTensor::rows() const {
    const auto& s = shape();
    if (s.size() == 2) return s[0];
    if (s.size() == 1) return 1;
    throw ShapeError("rows(): tensor of shape " + shape_str(s) + " is not a matrix");
}

inline std::size_t DiffTensor::cols() const {
    const auto& s = shape();
    if (s.size() == 2) return s[1];
    if (s.size() == 1) return s[0];
    throw ShapeError("cols(): tensor of shape " + shape_str(s) + " is not a matrix");
}

inline double DiffTensor::item() const {
    if (size() != 1) throw ShapeError("item(): tensor of shape " + shape_str(shape()) + " is not scalar");
    return data()[0];
}

namespace detail {

inline Tape& same_tape(const DiffTensor& a, const DiffTensor& b, const char* op) {
    if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
    return a.tape();
}

inline void require_matrix(const DiffTensor& a, const char* op) {
    if (a.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline void require_same_shape(const DiffTensor& a, const DiffTensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Elementwise unary op: forward f(x), backward dy * df(x, y).
template <class F, class DF>
DiffTensor unary(const DiffTensor& a, const char* op, F f, DF df) {
    auto& t = a.tape();
    auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    auto ia = a.node_id();
    return t.push(op, a.shape(), std::move(y), {ia}, [ia, df](Tape& tp, std::size_t self) {
        if (!tp.needs_grad(ia)) return;
        const auto& g = tp.out_grad(self);
        const auto& xv = tp.value(ia);
        const auto& yv = tp.value(self);
        auto ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline DiffTensor matmul(const DiffTensor& a, const DiffTensor& b) {
    auto& t = detail::same_tape(a, b, "matmul");
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    auto av = a.data();
    auto bv = b.data();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }
    auto ia = a.node_id(), ib = b.node_id();
    return t.push("matmul", {m, n}, std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        const auto& A = tp.value(ia);
        const auto& B = tp.value(ib);
        if (tp.needs_grad(ia)) {
            // dA = G * B^T
            const double sign = fault::flip_matmul_backward ? -1.0 : 1.0;
            auto ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                    ga[i * k + p] += sign * s;
                }
        }
        if (tp.needs_grad(ib)) {
            // dB = A^T * G
            auto gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                }
        }
    });
}

inline DiffTensor transpose(const DiffTensor& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    auto x = a.data();
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
    auto ia = a.node_id();
    return a.tape().push("transpose", {n, m}, std::move(y), {ia}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        auto ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
}

inline DiffTensor reshape(const DiffTensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    std::vector<double> y(a.data().begin(), a.data().end());
    auto ia = a.node_id();
    return a.tape().push("reshape", std::move(shape), std::move(y), {ia}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        auto ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops on equal shapes

inline DiffTensor add(const DiffTensor& a, const DiffTensor& b) {
    auto& t = detail::same_tape(a, b, "add");
    detail::require_same_shape(a, b, "add");
    auto x = a.data(), y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
    auto ia = a.node_id(), ib = b.node_id();
    return t.push("add", a.shape(), std::move(z), {ia, ib}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        for (auto id : {ia, ib}) {
            if (!tp.needs_grad(id)) continue;
            auto gi = tp.grad_acc(id);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

inline DiffTensor sub(const DiffTensor& a, const DiffTensor& b) {
    auto& t = detail::same_tape(a, b, "sub");
    detail::require_same_shape(a, b, "sub");
    auto x = a.data(), y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] - y[i];
    auto ia = a.node_id(), ib = b.node_id();
    return t.push("sub", a.shape(), std::move(z), {ia, ib}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        if (tp.needs_grad(ia)) {
            auto ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(ib)) {
            auto gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

inline DiffTensor mul(const DiffTensor& a, const DiffTensor& b) {
    auto& t = detail::same_tape(a, b, "mul");
    detail::require_same_shape(a, b, "mul");
    auto x = a.data(), y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
    auto ia = a.node_id(), ib = b.node_id();
    return t.push("mul", a.shape(), std::move(z), {ia, ib}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        const auto& A = tp.value(ia);
        const auto& B = tp.value(ib);
        if (tp.needs_grad(ia)) {
            auto ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (tp.needs_grad(ib)) {
            auto gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
        }
    });
}

inline DiffTensor div(const DiffTensor& a, const DiffTensor& b) {
    auto& t = detail::same_tape(a, b, "div");
    detail::require_same_shape(a, b, "div");
    auto x = a.data(), y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] / y[i];
    auto ia = a.node_id(), ib = b.node_id();
    return t.push("div", a.shape(), std::move(z), {ia, ib}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        const auto& B = tp.value(ib);
        const auto& Z = tp.value(self);
        if (tp.needs_grad(ia)) {
            auto ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / B[i];
        }
        if (tp.needs_grad(ib)) {
            auto gb = tp.grad_acc(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * Z[i] / B[i];
        }
    });
}

inline DiffTensor operator+(const DiffTensor& a, const DiffTensor& b) { return add(a, b); }
inline DiffTensor operator-(const DiffTensor& a, const DiffTensor& b) { return sub(a, b); }
inline DiffTensor operator*(const DiffTensor& a, const DiffTensor& b) { return mul(a, b); }
inline DiffTensor operator/(const DiffTensor& a, const DiffTensor& b) { return div(a, b); }

inline DiffTensor scale(const DiffTensor& a, double c) {
    return detail::unary(a, "scale", [c](double x) { return c * x; },
                         [c](double, double) { return c; });
}

inline DiffTensor add_scalar(const DiffTensor& a, double c) {
    return detail::unary(a, "add_scalar", [c](double x) { return x + c; },
                         [](double, double) { return 1.0; });
}

inline DiffTensor tanh(const DiffTensor& a) {
    return detail::unary(a, "tanh", [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline DiffTensor exp(const DiffTensor& a) {
    return detail::unary(a, "exp", [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
}

inline DiffTensor log(const DiffTensor& a) {
    return detail::unary(a, "log", [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Broadcasting (only the two forms the model needs)

/// a[m x n] + row[n] added to every row (bias).
inline DiffTensor add_row(const DiffTensor& a, const DiffTensor& row) {
    auto& t = detail::same_tape(a, row, "add_row");
    detail::require_matrix(a, "add_row");
    const std::size_t m = a.rows(), n = a.cols();
    if (row.size() != n)
        throw ShapeError("add_row: " + shape_str(a.shape()) + " + " + shape_str(row.shape()));
    auto x = a.data(), r = row.data();
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] + r[j];
    auto ia = a.node_id(), ir = row.node_id();
    return t.push("add_row", a.shape(), std::move(y), {ia, ir}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        if (tp.needs_grad(ia)) {
            auto ga = tp.grad_acc(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(ir)) {
            auto gr = tp.grad_acc(ir);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
        }
    });
}

/// col[m x 1] repeated across n columns.
inline DiffTensor broadcast_col(const DiffTensor& col, std::size_t n) {
    const std::size_t m = col.size();
    if (col.rank() == 2 && col.cols() != 1)
        throw ShapeError("broadcast_col: expected a column, got " + shape_str(col.shape()));
    auto c = col.data();
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = c[i];
    auto ic = col.node_id();
    return col.tape().push("broadcast_col", {m, n}, std::move(y), {ic}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        auto gc = tp.grad_acc(ic);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gc[i] += g[i * n + j];
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline DiffTensor sum(const DiffTensor& a) {
    auto x = a.data();
    double s = 0.0;
    for (double v : x) s += v;
    auto ia = a.node_id();
    return a.tape().push("sum", {}, {s}, {ia}, [=](Tape& tp, std::size_t self) {
        const double g = tp.out_grad(self)[0];
        auto ga = tp.grad_acc(ia);
        for (auto& v : ga) v += g;
    });
}

inline DiffTensor mean(const DiffTensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Per-row sum, [m x n] -> [m x 1].
inline DiffTensor row_sum(const DiffTensor& a) {
    detail::require_matrix(a, "row_sum");
    const std::size_t m = a.rows(), n = a.cols();
    auto x = a.data();
    std::vector<double> y(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i] += x[i * n + j];
    auto ia = a.node_id();
    return a.tape().push("row_sum", {m, 1}, std::move(y), {ia}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        auto ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
    });
}

/// Mean over rows, [m x n] -> [1 x n] (pooling).
inline DiffTensor mean_rows(const DiffTensor& a) {
    detail::require_matrix(a, "mean_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (m == 0) throw ShapeError("mean_rows: no rows");
    auto x = a.data();
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[j] += x[i * n + j];
    const double inv = 1.0 / static_cast<double>(m);
    for (auto& v : y) v *= inv;
    auto ia = a.node_id();
    return a.tape().push("mean_rows", {1, n}, std::move(y), {ia}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        auto ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
    });
}

namespace detail {

// Row extreme; gradient goes to the first arg-extreme index.
template <class Better>
DiffTensor row_extreme(const DiffTensor& a, const char* op, Better better) {
    require_matrix(a, op);
    const std::size_t m = a.rows(), n = a.cols();
    if (n == 0) throw ShapeError(std::string(op) + ": empty rows");
    auto x = a.data();
    std::vector<double> y(m);
    std::vector<std::size_t> arg(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (better(x[i * n + j], x[i * n + best])) best = j;
        arg[i] = best;
        y[i] = x[i * n + best];
    }
    auto ia = a.node_id();
    return a.tape().push(op, {m, 1}, std::move(y), {ia},
                         [=, arg = std::move(arg)](Tape& tp, std::size_t self) {
                             const auto& g = tp.out_grad(self);
                             auto ga = tp.grad_acc(ia);
                             for (std::size_t i = 0; i < m; ++i) ga[i * n + arg[i]] += g[i];
                         });
}

}  // namespace detail

inline DiffTensor row_max(const DiffTensor& a) {
    return detail::row_extreme(a, "row_max", [](double x, double y) { return x > y; });
}

inline DiffTensor row_min(const DiffTensor& a) {
    return detail::row_extreme(a, "row_min", [](double x, double y) { return x < y; });
}

// ---------------------------------------------------------------------------
// Masking, indexing, assembly

/// Entries where mask is true are replaced by `value`; the mask is a constant.
inline DiffTensor masked_fill(const DiffTensor& a, const std::vector<bool>& mask, double value) {
    if (mask.size() != a.size())
        throw ShapeError("masked_fill: mask has " + std::to_string(mask.size()) + " entries for " +
                         shape_str(a.shape()));
    auto x = a.data();
    std::vector<double> y(x.begin(), x.end());
    for (std::size_t i = 0; i < y.size(); ++i)
        if (mask[i]) y[i] = value;
    auto ia = a.node_id();
    return a.tape().push("masked_fill", a.shape(), std::move(y), {ia},
                         [=](Tape& tp, std::size_t self) {
                             const auto& g = tp.out_grad(self);
                             auto ga = tp.grad_acc(ia);
                             for (std::size_t i = 0; i < g.size(); ++i)
                                 if (!mask[i]) ga[i] += g[i];
                         });
}

inline DiffTensor gather_rows(const DiffTensor& a, const std::vector<std::size_t>& index) {
    detail::require_matrix(a, "gather_rows");
    const std::size_t m = a.rows(), n = a.cols();
    for (auto r : index)
        if (r >= m)
            throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " +
                             shape_str(a.shape()));
    auto x = a.data();
    std::vector<double> y(index.size() * n);
    for (std::size_t i = 0; i < index.size(); ++i)
        std::copy_n(x.begin() + index[i] * n, n, y.begin() + i * n);
    auto ia = a.node_id();
    return a.tape().push("gather_rows", {index.size(), n}, std::move(y), {ia},
                         [=](Tape& tp, std::size_t self) {
                             const auto& g = tp.out_grad(self);
                             auto ga = tp.grad_acc(ia);
                             for (std::size_t i = 0; i < index.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) ga[index[i] * n + j] += g[i * n + j];
                         });
}

/// Inverse of gather_rows: places row i of `a` at row index[i] of a zero [total x n] matrix.
inline DiffTensor scatter_rows(const DiffTensor& a, const std::vector<std::size_t>& index,
                               std::size_t total) {
    detail::require_matrix(a, "scatter_rows");
    const std::size_t n = a.cols();
    if (index.size() != a.rows())
        throw ShapeError("scatter_rows: " + std::to_string(index.size()) + " targets for " +
                         shape_str(a.shape()));
    auto x = a.data();
    std::vector<double> y(total * n, 0.0);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= total) throw ShapeError("scatter_rows: target row out of range");
        std::copy_n(x.begin() + i * n, n, y.begin() + index[i] * n);
    }
    auto ia = a.node_id();
    return a.tape().push("scatter_rows", {total, n}, std::move(y), {ia},
                         [=](Tape& tp, std::size_t self) {
                             const auto& g = tp.out_grad(self);
                             auto ga = tp.grad_acc(ia);
                             for (std::size_t i = 0; i < index.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[index[i] * n + j];
                         });
}

/// Stack matrices (or vectors, as single rows) with equal column counts.
inline DiffTensor concat_rows(const std::vector<DiffTensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
    auto& t = parts.front().tape();
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    std::vector<std::size_t> ids, offsets;
    for (const auto& p : parts) {
        if (&p.tape() != &t) throw ContractError("concat_rows: operands on different tapes");
        if (p.cols() != n)
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                             " vs " + shape_str(p.shape()));
        ids.push_back(p.node_id());
        offsets.push_back(m * n);
        m += p.rows();
    }
    std::vector<double> y;
    y.reserve(m * n);
    for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
    return t.push("concat_rows", {m, n}, std::move(y), ids, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tp.needs_grad(ids[k])) continue;
            auto gk = tp.grad_acc(ids[k]);
            for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[offsets[k] + i];
        }
    });
}

/// Diagonal of a square matrix as an [m x 1] column.
inline DiffTensor diagonal(const DiffTensor& a) {
    detail::require_matrix(a, "diagonal");
    const std::size_t m = a.rows();
    if (a.cols() != m) throw ShapeError("diagonal: not square " + shape_str(a.shape()));
    auto x = a.data();
    std::vector<double> y(m);
    for (std::size_t i = 0; i < m; ++i) y[i] = x[i * m + i];
    auto ia = a.node_id();
    return a.tape().push("diagonal", {m, 1}, std::move(y), {ia}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        auto ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < m; ++i) ga[i * m + i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Softmax family and normalization

/// Softmax along each row. Masked (true) entries are excluded and come out exactly 0.
inline DiffTensor row_softmax(const DiffTensor& a, const std::optional<std::vector<bool>>& mask = {}) {
    detail::require_matrix(a, "row_softmax");
    const std::size_t m = a.rows(), n = a.cols();
    if (mask && mask->size() != m * n)
        throw ShapeError("row_softmax: mask size does not match " + shape_str(a.shape()));
    auto live = [&](std::size_t idx) { return !mask || !(*mask)[idx]; };
    auto x = a.data();
    std::vector<double> y(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (live(i * n + j)) mx = std::max(mx, x[i * n + j]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw ContractError("row_softmax: row " + std::to_string(i) + " is fully masked");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (live(i * n + j)) z += (y[i * n + j] = std::exp(x[i * n + j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= z;
    }
    auto ia = a.node_id();
    return a.tape().push("row_softmax", a.shape(), std::move(y), {ia}, [=](Tape& tp, std::size_t self) {
        const auto& g = tp.out_grad(self);
        const auto& Y = tp.value(self);
        auto ga = tp.grad_acc(ia);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * Y[i * n + j];
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += Y[i * n + j] * (g[i * n + j] - dot);
        }
    });
}

inline DiffTensor row_log_softmax(const DiffTensor& a) {
    detail::require_matrix(a, "row_log_softmax");
    const std::size_t m = a.rows(), n = a.cols();
    auto x = a.data();
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(x[i * n + j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] - lse;
    }
    auto ia = a.node_id();
    return a.tape().push("row_log_softmax", a.shape(), std::move(y), {ia},
                         [=](Tape& tp, std::size_t self) {
                             const auto& g = tp.out_grad(self);
                             const auto& Y = tp.value(self);
                             auto ga = tp.grad_acc(ia);
                             for (std::size_t i = 0; i < m; ++i) {
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                     ga[i * n + j] += g[i * n + j] - std::exp(Y[i * n + j]) * gs;
                             }
                         });
}

inline constexpr double kNormEps = 1e-8;

/// x / max(||x||, eps) along the trailing axis. Zero vectors stay zero.
inline DiffTensor l2_normalize(const DiffTensor& a, double eps = kNormEps) {
    if (a.rank() == 0) throw ShapeError("l2_normalize: scalar input");
    const std::size_t d = a.shape().back();
    const std::size_t m = d == 0 ? 0 : a.size() / d;
    auto x = a.data();
    std::vector<double> y(a.size()), norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
        norms[i] = std::sqrt(s);
        const double den = std::max(norms[i], eps);
        for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] / den;
    }
    auto ia = a.node_id();
    return a.tape().push("l2_normalize", a.shape(), std::move(y), {ia},
                         [=, norms = std::move(norms)](Tape& tp, std::size_t self) {
                             const auto& g = tp.out_grad(self);
                             const auto& X = tp.value(ia);
                             auto ga = tp.grad_acc(ia);
                             for (std::size_t i = 0; i < m; ++i) {
                                 const double r = norms[i];
                                 if (!(r > eps)) {
                                     for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[i * d + j] / eps;
                                     continue;
                                 }
                                 // d/dx [x / r] = I/r - x x^T / r^3
                                 double gx = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) gx += g[i * d + j] * X[i * d + j];
                                 const double c = gx / (r * r * r);
                                 for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[i * d + j] / r - c * X[i * d + j];
                             }
                         });
}

}  // namespace aga
