#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sgvqa/rng.hpp"

namespace sgvqa {

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a value leaves the domain an operation can handle (zero norms,
/// log of non-positive input, non-finite results).
class NumericError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

enum class Mode { train, eval };

/// Axis::rows is the leading dimension (numpy axis 0), Axis::cols the
/// trailing one. Reductions collapse the named axis; concat joins along it.
enum class Axis { rows, cols };

struct Shape {
    std::size_t rows = 1;
    std::size_t cols = 1;

    constexpr std::size_t size() const { return rows * cols; }
    friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

template <class T>
class BasicTape;

inline std::string to_string(Shape s) {
    return "(" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + ")";
}

/// Dense row-major matrix over scalar type T with an optional gradient slot.
///
/// BasicTensor is a shared handle: copies alias the same storage, which is what
/// lets a parameter appear in many tape records and still collect a single
/// gradient. Use clone() for an independent deep copy. Vectors are 1xN and
/// scalars 1x1.
template <class T>
class BasicTensor {
   public:
    using value_type = T;

    BasicTensor() = default;

    BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : s_(std::make_shared<Storage>()) {
        if (shape.rows == 0 || shape.cols == 0) {
            throw ShapeError("tensor extents must be positive, got " + to_string(shape));
        }
        if (values.size() != shape.size()) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + to_string(shape));
        }
        s_->shape = shape;
        s_->data = std::move(values);
        s_->requires_grad = requires_grad;
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        return BasicTensor(shape, std::vector<T>(shape.size(), 0.0), requires_grad);
    }
    static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
        return BasicTensor(shape, std::vector<T>(shape.size(), value), requires_grad);
    }
    static BasicTensor scalar(T value, bool requires_grad = false) {
        return BasicTensor({1, 1}, {value}, requires_grad);
    }
    static BasicTensor row(std::vector<T> values, bool requires_grad = false) {
        const std::size_t n = values.size();
        return BasicTensor({1, n}, std::move(values), requires_grad);
    }
    static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                         bool requires_grad = false) {
        std::vector<T> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw ShapeError("ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return BasicTensor({rows.size(), cols}, std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }
    Shape shape() const { return s_->shape; }
    std::size_t rows() const { return s_->shape.rows; }
    std::size_t cols() const { return s_->shape.cols; }
    std::size_t size() const { return s_->data.size(); }

    std::span<const T> data() const { return s_->data; }
    std::span<T> data() { return s_->data; }
    T operator()(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }
    T& operator()(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
        return s_->data[0];
    }
    std::vector<T> row_values(std::size_t r) const {
        return {s_->data.begin() + static_cast<std::ptrdiff_t>(r * cols()),
                s_->data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols())};
    }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool v) { s_->requires_grad = v; }

    /// Gradient buffer, allocated as zeros on first access.
    std::span<T> grad() {
        ensure_grad();
        return s_->grad;
    }
    std::span<const T> grad() const {
        ensure_grad();
        return s_->grad;
    }
    bool has_grad() const { return !s_->grad.empty(); }
    BasicTensor grad_tensor() const {
        ensure_grad();
        return BasicTensor(shape(), s_->grad);
    }

    /// Clears the gradient and the in-graph flag.
    void zero_grad() {
        std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
        s_->in_graph = false;
    }

    /// True when the tensor was reachable from the loss of a backward pass
    /// since the last zero_grad(). Tensors outside the loss graph keep an
    /// exactly-zero gradient and are skipped by the optimizer.
    bool in_graph() const { return s_->in_graph; }

    const void* id() const { return s_.get(); }
    bool same_storage(const BasicTensor& other) const { return s_ == other.s_; }

    BasicTensor clone() const {
        BasicTensor t(shape(), s_->data, s_->requires_grad);
        return t;
    }

   private:
    struct Storage {
        Shape shape;
        std::vector<T> data;
        mutable std::vector<T> grad;
        bool requires_grad = false;
        bool in_graph = false;
        bool reached = false;
    };

    void ensure_grad() const {
        if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), 0.0);
    }

    std::shared_ptr<Storage> s_;
    template <class>
    friend class BasicTape;
};

/// Value-preserving stop-gradient: the result shares no tape linkage and
/// never requires a gradient, so nothing upstream of it receives one.
template <class T>
BasicTensor<T> detach(const BasicTensor<T>& t) {
    return BasicTensor<T>(t.shape(), {t.data().begin(), t.data().end()});
}

/// Running statistics for batch normalization.
template <class T>
struct BasicNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = 0.1;
    Mode mode = Mode::train;

    static BasicNormState fresh(std::size_t features, T momentum = 0.1) {
        return {std::vector<T>(features, 0.0), std::vector<T>(features, 1.0), momentum, Mode::train};
    }
};

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kNormFloor = 1e-12;

/// Records differentiable primitives and replays them in reverse.
///
/// A tape is confined to one thread. Records are appended in execution order,
/// so the record list is a topological order of the computation and backward
/// is a single reverse sweep. Only steps with at least one input requiring a
/// gradient are recorded.
template <class T>
class BasicTape {
   public:
    using Tensor = BasicTensor<T>;
    using NormState = BasicNormState<T>;

    enum class Kind {
        add, sub, mul, scale, shift, matmul, transpose, concat, sum, mean, max, softmax,
        log_softmax, log, exp, relu, elu, leaky_relu, l2_normalize, dropout, gather_rows,
        batch_norm, softmax_cross_entropy
    };

    struct Record {
        Kind kind;
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void(Record&)> backward;
    };

    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const std::vector<Record>& records() const { return records_; }
    void clear() { records_.clear(); }

    /// With recording off the tape evaluates eagerly and keeps nothing, for
    /// inference passes that never call backward.
    void set_recording(bool on) { recording_ = on; }
    bool recording() const { return recording_; }

    // ---- elementwise binary ops with 2-D broadcasting ----

    Tensor add(const Tensor& a, const Tensor& b) { return binary(Kind::add, a, b); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary(Kind::sub, a, b); }
    Tensor mul(const Tensor& a, const Tensor& b) { return binary(Kind::mul, a, b); }

    Tensor scale(const Tensor& a, T factor) {
        Tensor out = make_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) out.s_->data[i] = a.s_->data[i] * factor;
        record(Kind::scale, {a}, out, [factor](Record& r) {
            auto go = r.output.grad();
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += factor * go[i];
        });
        return out;
    }

    Tensor shift(const Tensor& a, T offset) {
        Tensor out = make_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) out.s_->data[i] = a.s_->data[i] + offset;
        record(Kind::shift, {a}, out, [](Record& r) {
            auto go = r.output.grad();
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
        });
        return out;
    }

    // ---- linear algebra ----

    /// a (m x k) times b (k x n), or times b^T when transpose_b is set.
    Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
        const std::size_t m = a.rows(), k = a.cols();
        const std::size_t kb = transpose_b ? b.cols() : b.rows();
        const std::size_t n = transpose_b ? b.rows() : b.cols();
        if (k != kb) {
            throw ShapeError("matmul contraction mismatch " + to_string(a.shape()) + " x " +
                             to_string(b.shape()) + (transpose_b ? "^T" : ""));
        }
        Tensor out = Tensor::zeros({m, n});
        const T* A = a.s_->data.data();
        const T* B = b.s_->data.data();
        T* C = out.s_->data.data();
        if (transpose_b) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    T acc = 0.0;
                    for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
                    C[i * n + j] = acc;
                }
        } else {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = A[i * k + p];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
                }
        }
        record(Kind::matmul, {a, b}, out, [m, k, n, transpose_b](Record& r) {
            const T* G = r.output.grad().data();
            const T* A = r.inputs[0].s_->data.data();
            const T* B = r.inputs[1].s_->data.data();
            if (auto* gA = grad_of(r.inputs[0])) {
                // dA = G * B^T  (or G * B when b was transposed)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T gv = G[i * n + j];
                        if (gv == 0.0) continue;
                        if (transpose_b)
                            for (std::size_t p = 0; p < k; ++p) gA[i * k + p] += gv * B[j * k + p];
                        else
                            for (std::size_t p = 0; p < k; ++p) gA[i * k + p] += gv * B[p * n + j];
                    }
            }
            if (auto* gB = grad_of(r.inputs[1])) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T gv = G[i * n + j];
                        if (gv == 0.0) continue;
                        if (transpose_b)
                            for (std::size_t p = 0; p < k; ++p) gB[j * k + p] += gv * A[i * k + p];
                        else
                            for (std::size_t p = 0; p < k; ++p) gB[p * n + j] += gv * A[i * k + p];
                    }
            }
        });
        return out;
    }

    Tensor transpose(const Tensor& a) {
        const std::size_t m = a.rows(), n = a.cols();
        Tensor out = Tensor::zeros({n, m});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.s_->data[j * m + i] = a.s_->data[i * n + j];
        record(Kind::transpose, {a}, out, [m, n](Record& r) {
            auto go = r.output.grad();
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go[j * m + i];
        });
        return out;
    }

    /// Joins tensors side by side (Axis::cols) or stacks them (Axis::rows).
    Tensor concat(std::span<const Tensor> parts, Axis axis) {
        if (parts.empty()) throw ShapeError("concat of zero tensors");
        std::size_t rows = 0, cols = 0;
        for (const auto& p : parts) {
            if (axis == Axis::cols) {
                if (p.rows() != parts[0].rows()) throw ShapeError("concat(cols) row mismatch");
                cols += p.cols();
            } else {
                if (p.cols() != parts[0].cols()) throw ShapeError("concat(rows) column mismatch");
                rows += p.rows();
            }
        }
        if (axis == Axis::cols) rows = parts[0].rows();
        else cols = parts[0].cols();
        Tensor out = Tensor::zeros({rows, cols});
        std::size_t offset = 0;
        for (const auto& p : parts) {
            for (std::size_t i = 0; i < p.rows(); ++i)
                for (std::size_t j = 0; j < p.cols(); ++j) {
                    const std::size_t oi = axis == Axis::cols ? i : offset + i;
                    const std::size_t oj = axis == Axis::cols ? offset + j : j;
                    out.s_->data[oi * cols + oj] = p.s_->data[i * p.cols() + j];
                }
            offset += axis == Axis::cols ? p.cols() : p.rows();
        }
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        record(Kind::concat, std::move(inputs), out, [axis, cols](Record& r) {
            auto go = r.output.grad();
            std::size_t offset = 0;
            for (auto& p : r.inputs) {
                if (auto* g = grad_of(p)) {
                    for (std::size_t i = 0; i < p.rows(); ++i)
                        for (std::size_t j = 0; j < p.cols(); ++j) {
                            const std::size_t oi = axis == Axis::cols ? i : offset + i;
                            const std::size_t oj = axis == Axis::cols ? offset + j : j;
                            g[i * p.cols() + j] += go[oi * cols + oj];
                        }
                }
                offset += axis == Axis::cols ? p.cols() : p.rows();
            }
        });
        return out;
    }
    Tensor concat(std::initializer_list<Tensor> parts, Axis axis) {
        std::vector<Tensor> v(parts);
        return concat(std::span<const Tensor>(v), axis);
    }

    /// Selects rows by index; repeated indices are allowed.
    Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
        if (index.empty()) throw ShapeError("gather_rows with no indices");
        const std::size_t n = a.cols();
        Tensor out = Tensor::zeros({index.size(), n});
        for (std::size_t i = 0; i < index.size(); ++i) {
            if (index[i] >= a.rows()) throw ShapeError("gather_rows index out of range");
            std::copy_n(a.s_->data.begin() + static_cast<std::ptrdiff_t>(index[i] * n), n,
                        out.s_->data.begin() + static_cast<std::ptrdiff_t>(i * n));
        }
        std::vector<std::size_t> idx(index.begin(), index.end());
        record(Kind::gather_rows, {a}, out, [idx = std::move(idx), n](Record& r) {
            auto go = r.output.grad();
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += go[i * n + j];
        });
        return out;
    }

    Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
        if (begin + count > a.rows() || count == 0) throw ShapeError("slice_rows out of range");
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
        return gather_rows(a, idx);
    }

    // ---- reductions ----

    Tensor sum(const Tensor& a) {
        T acc = 0.0;
        for (T v : a.s_->data) acc += v;
        Tensor out = Tensor::scalar(acc);
        record(Kind::sum, {a}, out, [](Record& r) {
            const T go = r.output.grad()[0];
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < r.inputs[0].size(); ++i) g[i] += go;
        });
        return out;
    }

    Tensor sum(const Tensor& a, Axis axis) { return reduce_sum(a, axis, 1.0, Kind::sum); }

    Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<T>(a.size())); }

    Tensor mean(const Tensor& a, Axis axis) {
        const T n = static_cast<T>(axis == Axis::rows ? a.rows() : a.cols());
        return reduce_sum(a, axis, 1.0 / n, Kind::mean);
    }

    /// Maximum along an axis. Ties route the gradient to the lowest index.
    Tensor max(const Tensor& a, Axis axis) {
        const std::size_t m = a.rows(), n = a.cols();
        const bool over_rows = axis == Axis::rows;
        const std::size_t outer = over_rows ? n : m, inner = over_rows ? m : n;
        Tensor out = over_rows ? Tensor::zeros({1, n}) : Tensor::zeros({m, 1});
        std::vector<std::size_t> arg(outer);
        for (std::size_t o = 0; o < outer; ++o) {
            std::size_t best = 0;
            T bv = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < inner; ++i) {
                const T v = over_rows ? a.s_->data[i * n + o] : a.s_->data[o * n + i];
                if (v > bv) {
                    bv = v;
                    best = i;
                }
            }
            arg[o] = over_rows ? best * n + o : o * n + best;
            out.s_->data[o] = bv;
        }
        record(Kind::max, {a}, out, [arg = std::move(arg)](Record& r) {
            auto go = r.output.grad();
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += go[o];
        });
        return out;
    }

    // ---- row-wise distributions ----

    /// Softmax over each row. `mask`, when given, has one entry per element;
    /// zero entries are excluded and produce probability 0.
    Tensor softmax(const Tensor& a, const std::vector<std::uint8_t>* mask = nullptr) {
        Tensor out = make_like(a);
        row_softmax(a, mask, out.s_->data, false);
        const std::size_t n = a.cols();
        record(Kind::softmax, {a}, out, [n](Record& r) {
            auto go = r.output.grad();
            const auto& y = r.output.s_->data;
            if (auto* g = grad_of(r.inputs[0])) {
                for (std::size_t i = 0; i < r.output.rows(); ++i) {
                    T dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                        g[i * n + j] += y[i * n + j] * (go[i * n + j] - dot);
                }
            }
        });
        return out;
    }

    /// Log-softmax over each row with max-shift. Masked entries are reported
    /// as 0 and receive no gradient.
    Tensor log_softmax(const Tensor& a, const std::vector<std::uint8_t>* mask = nullptr) {
        Tensor out = make_like(a);
        row_softmax(a, mask, out.s_->data, true);
        const std::size_t n = a.cols();
        std::vector<std::uint8_t> keep = mask ? *mask : std::vector<std::uint8_t>(a.size(), 1);
        record(Kind::log_softmax, {a}, out, [n, keep = std::move(keep)](Record& r) {
            auto go = r.output.grad();
            const auto& y = r.output.s_->data;
            if (auto* g = grad_of(r.inputs[0])) {
                for (std::size_t i = 0; i < r.output.rows(); ++i) {
                    T gs = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        if (keep[i * n + j]) gs += go[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                        if (keep[i * n + j])
                            g[i * n + j] += go[i * n + j] - std::exp(y[i * n + j]) * gs;
                }
            }
        });
        return out;
    }

    /// Mean over rows of -log softmax(logits)[target].
    Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
        const std::size_t m = logits.rows(), n = logits.cols();
        if (targets.size() != m) throw ShapeError("cross entropy target count mismatch");
        std::vector<T> probs(logits.size());
        row_softmax(logits, nullptr, probs, false);
        std::vector<T> logp(logits.size());
        row_softmax(logits, nullptr, logp, true);
        T loss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (targets[i] >= n) throw std::out_of_range("answer id out of range");
            loss -= logp[i * n + targets[i]];
        }
        Tensor out = Tensor::scalar(loss / static_cast<T>(m));
        std::vector<std::size_t> t(targets.begin(), targets.end());
        record(Kind::softmax_cross_entropy, {logits}, out,
               [probs = std::move(probs), t = std::move(t), m, n](Record& r) {
                   const T go = r.output.grad()[0] / static_cast<T>(m);
                   if (auto* g = grad_of(r.inputs[0]))
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                               g[i * n + j] += go * (probs[i * n + j] - (j == t[i] ? 1.0 : 0.0));
               });
        return out;
    }

    // ---- elementwise unary ----

    Tensor log(const Tensor& a) {
        Tensor out = make_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const T v = a.s_->data[i];
            if (!(v > 0.0)) throw NumericError("log of non-positive value");
            out.s_->data[i] = std::log(v);
        }
        record(Kind::log, {a}, out, [](Record& r) {
            auto go = r.output.grad();
            const auto& x = r.inputs[0].s_->data;
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] / x[i];
        });
        return out;
    }

    Tensor exp(const Tensor& a) {
        Tensor out = make_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) {
            out.s_->data[i] = std::exp(a.s_->data[i]);
            if (!std::isfinite(out.s_->data[i])) throw NumericError("exp overflow");
        }
        record(Kind::exp, {a}, out, [](Record& r) {
            auto go = r.output.grad();
            const auto& y = r.output.s_->data;
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * y[i];
        });
        return out;
    }

    Tensor relu(const Tensor& a) {
        return pointwise(Kind::relu, a, [](T x) { return x > 0.0 ? x : 0.0; },
                         [](T x, T) { return x > 0.0 ? 1.0 : 0.0; });
    }

    Tensor elu(const Tensor& a, T alpha = 1.0) {
        return pointwise(
            Kind::elu, a, [alpha](T x) { return x > 0.0 ? x : alpha * std::expm1(x); },
            [alpha](T x, T y) { return x > 0.0 ? 1.0 : y + alpha; });
    }

    Tensor leaky_relu(const Tensor& a, T slope = 0.2) {
        return pointwise(Kind::leaky_relu, a, [slope](T x) { return x > 0.0 ? x : slope * x; },
                         [slope](T x, T) { return x > 0.0 ? 1.0 : slope; });
    }

    /// Scales every row to unit L2 norm; rows with norm below 1e-12 are an error.
    Tensor l2_normalize(const Tensor& a) {
        const std::size_t m = a.rows(), n = a.cols();
        Tensor out = make_like(a);
        std::vector<T> norms(m);
        for (std::size_t i = 0; i < m; ++i) {
            T ss = 0.0;
            for (std::size_t j = 0; j < n; ++j) ss += a.s_->data[i * n + j] * a.s_->data[i * n + j];
            const T nr = std::sqrt(ss);
            if (nr < kNormFloor) throw NumericError("l2_normalize: row norm below 1e-12");
            norms[i] = nr;
            for (std::size_t j = 0; j < n; ++j) out.s_->data[i * n + j] = a.s_->data[i * n + j] / nr;
        }
        record(Kind::l2_normalize, {a}, out, [norms = std::move(norms), n](Record& r) {
            auto go = r.output.grad();
            const auto& y = r.output.s_->data;
            if (auto* g = grad_of(r.inputs[0])) {
                for (std::size_t i = 0; i < norms.size(); ++i) {
                    T dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                        g[i * n + j] += (go[i * n + j] - y[i * n + j] * dot) / norms[i];
                }
            }
        });
        return out;
    }

    /// Inverted dropout. Eval mode (or rate 0) returns the input unchanged.
    Tensor dropout(const Tensor& a, T rate, Mode mode, Rng& rng) {
        if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
        if (mode == Mode::eval || rate == 0.0) return a;
        const T keep_scale = 1.0 / (1.0 - rate);
        std::vector<T> mask(a.size());
        Tensor out = make_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) {
            mask[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
            out.s_->data[i] = a.s_->data[i] * mask[i];
        }
        record(Kind::dropout, {a}, out, [mask = std::move(mask)](Record& r) {
            auto go = r.output.grad();
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * mask[i];
        });
        return out;
    }

    /// Batch normalization over rows of a (batch x features) matrix followed
    /// by a per-feature affine map. Train mode uses batch statistics and
    /// updates the running estimates; eval mode uses the running estimates.
    Tensor batch_norm(const Tensor& x, NormState& state, const Tensor& gamma, const Tensor& beta) {
        const std::size_t m = x.rows(), n = x.cols();
        if (gamma.shape() != Shape{1, n} || beta.shape() != Shape{1, n} ||
            state.running_mean.size() != n || state.running_var.size() != n) {
            throw ShapeError("batch_norm feature mismatch");
        }
        std::vector<T> mu(n), inv_std(n);
        if (state.mode == Mode::train) {
            if (m < 2) throw std::invalid_argument("batch_norm in train mode needs a batch of at least 2");
            for (std::size_t j = 0; j < n; ++j) {
                T s = 0.0;
                for (std::size_t i = 0; i < m; ++i) s += x.s_->data[i * n + j];
                mu[j] = s / static_cast<T>(m);
                T v = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const T d = x.s_->data[i * n + j] - mu[j];
                    v += d * d;
                }
                const T var = v / static_cast<T>(m);
                inv_std[j] = 1.0 / std::sqrt(var + kNormEpsilon);
                const T unbiased = v / static_cast<T>(m - 1);
                state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
                state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
            }
        } else {
            for (std::size_t j = 0; j < n; ++j) {
                mu[j] = state.running_mean[j];
                inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + kNormEpsilon);
            }
        }
        std::vector<T> xhat(x.size());
        Tensor out = make_like(x);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const T h = (x.s_->data[i * n + j] - mu[j]) * inv_std[j];
                xhat[i * n + j] = h;
                out.s_->data[i * n + j] = gamma.s_->data[j] * h + beta.s_->data[j];
            }
        const bool batch_stats = state.mode == Mode::train;
        record(Kind::batch_norm, {x, gamma, beta}, out,
               [xhat = std::move(xhat), inv_std = std::move(inv_std), m, n, batch_stats](Record& r) {
                   auto go = r.output.grad();
                   const auto& gam = r.inputs[1].s_->data;
                   if (auto* gg = grad_of(r.inputs[1]))
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * xhat[i * n + j];
                   if (auto* gb = grad_of(r.inputs[2]))
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
                   auto* gx = grad_of(r.inputs[0]);
                   if (!gx) return;
                   const T mm = static_cast<T>(m);
                   for (std::size_t j = 0; j < n; ++j) {
                       if (!batch_stats) {
                           for (std::size_t i = 0; i < m; ++i) gx[i * n + j] += go[i * n + j] * gam[j] * inv_std[j];
                           continue;
                       }
                       T sg = 0.0, sgx = 0.0;
                       for (std::size_t i = 0; i < m; ++i) {
                           sg += go[i * n + j];
                           sgx += go[i * n + j] * xhat[i * n + j];
                       }
                       for (std::size_t i = 0; i < m; ++i) {
                           gx[i * n + j] += gam[j] * inv_std[j] / mm *
                                            (mm * go[i * n + j] - sg - xhat[i * n + j] * sgx);
                       }
                   }
               });
        return out;
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls until zero_grad(); intermediate gradients are reset each sweep.
    void backward(const Tensor& loss) {
        if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got " + to_string(loss.shape()));
        for (auto& rec : records_) {
            auto& s = *rec.output.s_;
            std::fill(s.grad.begin(), s.grad.end(), 0.0);
            s.reached = false;
            for (auto& in : rec.inputs) in.s_->reached = false;
        }
        loss.s_->reached = true;
        if (loss.s_->requires_grad) {
            loss.ensure_grad();
            loss.s_->grad[0] += 1.0;
            loss.s_->in_graph = true;
        }
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->output.s_->reached) continue;
            it->output.ensure_grad();
            it->backward(*it);
            for (auto& in : it->inputs) {
                if (!in.s_->requires_grad) continue;
                in.s_->reached = true;
                in.s_->in_graph = true;
            }
        }
    }

   private:
    static T* grad_of(Tensor& t) {
        if (!t.s_->requires_grad) return nullptr;
        t.ensure_grad();
        return t.s_->grad.data();
    }

    static Tensor make_like(const Tensor& a) { return Tensor::zeros(a.shape()); }

    void record(Kind kind, std::vector<Tensor> inputs, Tensor& out, std::function<void(Record&)> bw) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (!any || !recording_) return;
        out.s_->requires_grad = true;
        records_.push_back({kind, std::move(inputs), out, std::move(bw)});
    }

    static Shape broadcast_shape(Shape a, Shape b) {
        auto dim = [&](std::size_t x, std::size_t y) {
            if (x == y || y == 1) return x;
            if (x == 1) return y;
            throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
        };
        return {dim(a.rows, b.rows), dim(a.cols, b.cols)};
    }

    Tensor binary(Kind kind, const Tensor& a, const Tensor& b) {
        const Shape os = broadcast_shape(a.shape(), b.shape());
        Tensor out = Tensor::zeros(os);
        const auto ia = [as = a.shape()](std::size_t i, std::size_t j) {
            return (as.rows == 1 ? 0 : i) * as.cols + (as.cols == 1 ? 0 : j);
        };
        const auto ib = [bs = b.shape()](std::size_t i, std::size_t j) {
            return (bs.rows == 1 ? 0 : i) * bs.cols + (bs.cols == 1 ? 0 : j);
        };
        const auto& A = a.s_->data;
        const auto& B = b.s_->data;
        auto& O = out.s_->data;
        for (std::size_t i = 0; i < os.rows; ++i)
            for (std::size_t j = 0; j < os.cols; ++j) {
                const T x = A[ia(i, j)], y = B[ib(i, j)];
                O[i * os.cols + j] = kind == Kind::add ? x + y : kind == Kind::sub ? x - y : x * y;
            }
        record(kind, {a, b}, out, [kind, os, ia, ib](Record& r) {
            auto go = r.output.grad();
            const auto& A = r.inputs[0].s_->data;
            const auto& B = r.inputs[1].s_->data;
            T* ga = grad_of(r.inputs[0]);
            T* gb = grad_of(r.inputs[1]);
            for (std::size_t i = 0; i < os.rows; ++i)
                for (std::size_t j = 0; j < os.cols; ++j) {
                    const T g = go[i * os.cols + j];
                    const std::size_t pa = ia(i, j), pb = ib(i, j);
                    switch (kind) {
                        case Kind::add:
                            if (ga) ga[pa] += g;
                            if (gb) gb[pb] += g;
                            break;
                        case Kind::sub:
                            if (ga) ga[pa] += g;
                            if (gb) gb[pb] -= g;
                            break;
                        default:
                            if (ga) ga[pa] += g * B[pb];
                            if (gb) gb[pb] += g * A[pa];
                    }
                }
        });
        return out;
    }

    Tensor reduce_sum(const Tensor& a, Axis axis, T factor, Kind kind) {
        const std::size_t m = a.rows(), n = a.cols();
        const bool over_rows = axis == Axis::rows;
        Tensor out = over_rows ? Tensor::zeros({1, n}) : Tensor::zeros({m, 1});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out.s_->data[over_rows ? j : i] += factor * a.s_->data[i * n + j];
        record(kind, {a}, out, [m, n, over_rows, factor](Record& r) {
            auto go = r.output.grad();
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += factor * go[over_rows ? j : i];
        });
        return out;
    }

    template <class F, class D>
    Tensor pointwise(Kind kind, const Tensor& a, F f, D df) {
        Tensor out = make_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) out.s_->data[i] = f(a.s_->data[i]);
        record(kind, {a}, out, [df](Record& r) {
            auto go = r.output.grad();
            const auto& x = r.inputs[0].s_->data;
            const auto& y = r.output.s_->data;
            if (auto* g = grad_of(r.inputs[0]))
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * df(x[i], y[i]);
        });
        return out;
    }

    static void row_softmax(const Tensor& a, const std::vector<std::uint8_t>* mask,
                            std::vector<T>& out, bool log_space) {
        const std::size_t m = a.rows(), n = a.cols();
        if (mask && mask->size() != a.size()) throw ShapeError("softmax mask size mismatch");
        const auto& x = a.s_->data;
        for (std::size_t i = 0; i < m; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            std::size_t arg = n;
            for (std::size_t j = 0; j < n; ++j)
                if ((!mask || (*mask)[i * n + j]) && (arg == n || x[i * n + j] > mx)) mx = x[i * n + j], arg = j;
            if (arg == n) throw ShapeError("softmax over an empty axis");
            // The max entry contributes exactly 1; log1p keeps small tails exact.
            T rest = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                if (j != arg && (!mask || (*mask)[i * n + j])) rest += std::exp(x[i * n + j] - mx);
            const T logz = std::log1p(rest);
            for (std::size_t j = 0; j < n; ++j) {
                if (mask && !(*mask)[i * n + j]) {
                    out[i * n + j] = 0.0;
                } else {
                    const T lp = x[i * n + j] - mx - logz;
                    out[i * n + j] = log_space ? lp : std::exp(lp);
                }
            }
        }
    }

    std::vector<Record> records_;
    bool recording_ = true;
};

using Tensor = BasicTensor<double>;
using NormState = BasicNormState<double>;
using Tape = BasicTape<double>;

/// Extended-precision instantiation, used by the gradient checker.
using XTensor = BasicTensor<long double>;
using XTape = BasicTape<long double>;

/// Element-wise conversion to another scalar type. Gradients are not copied.
template <class U, class T>
BasicTensor<U> convert(const BasicTensor<T>& t) {
    if (!t.defined()) return {};
    return BasicTensor<U>(t.shape(), std::vector<U>(t.data().begin(), t.data().end()), t.requires_grad());
}

template <class U, class T>
BasicNormState<U> convert(const BasicNormState<T>& s) {
    return {std::vector<U>(s.running_mean.begin(), s.running_mean.end()),
            std::vector<U>(s.running_var.begin(), s.running_var.end()), static_cast<U>(s.momentum), s.mode};
}

}  // namespace sgvqa
