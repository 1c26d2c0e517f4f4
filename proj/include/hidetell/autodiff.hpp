#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hidetell/error.hpp"
#include "hidetell/tensor.hpp"

namespace hidetell {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so every node's inputs precede it and a reverse sweep is a valid
/// topological order. A tape supports exactly one backward pass.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad)>;

  /// With `record == false` the tape keeps values only (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, "constant"); }

  Var<T> variable(Tensor<T> value) { return push(std::move(value), record_, {}, "variable"); }

  /// Leaf bound to a parameter tensor owned elsewhere. Repeated calls with
  /// the same tensor return the same node so gradients accumulate in one place.
  Var<T> parameter(const Tensor<T>& param) {
    auto it = param_nodes_.find(&param);
    if (it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push(Tensor<T>(), record_, {}, "parameter");
    nodes_[v.id].ref = &param;
    param_nodes_.emplace(&param, v.id);
    return v;
  }

  /// Appends an op result. `backward` receives the upstream gradient and must
  /// accumulate into the inputs through `accumulate`.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                const char* op) {
    bool needs = false;
    for (const Var<T>& in : inputs) {
      check_owner(in, op);
      needs = needs || nodes_[in.id].requires_grad;
    }
    if (!value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
    Var<T> v = push(std::move(value), record_ && needs, {}, op);
    if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  /// Variant for ops with a runtime-sized input list (concat).
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward,
                const char* op) {
    bool needs = false;
    for (const Var<T>& in : inputs) {
      check_owner(in, op);
      needs = needs || nodes_[in.id].requires_grad;
    }
    if (!value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
    Var<T> v = push(std::move(value), record_ && needs, {}, op);
    if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owner(v, "value");
    return nodes_[v.id].get();
  }

  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void accumulate(std::size_t id, Tensor<T>&& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Reverse sweep from a scalar loss.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw TapeError("loss was not recorded on this tape");
    if (!record_) throw TapeError("backward on an inference-mode tape");
    if (backward_done_) throw TapeError("backward already ran on this tape; re-run the forward pass");
    const Tensor<T>& lv = nodes_[loss.id].get();
    if (lv.size() != 1) throw TapeError("loss is not a scalar: shape " + shape_str(lv.shape()));
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor<T>(lv.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradient of a node; zeros when the node was unreachable from the loss.
  Tensor<T> grad(Var<T> v) const {
    check_owner(v, "grad");
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor<T>(n.get().shape());
    return n.grad;
  }

  /// Gradient for a parameter bound through `parameter()`; zeros if the
  /// parameter never entered this tape.
  Tensor<T> grad_of(const Tensor<T>& param) const {
    auto it = param_nodes_.find(&param);
    if (it == param_nodes_.end()) return Tensor<T>(param.shape());
    return grad(Var<T>{const_cast<Tape*>(this), it->second});
  }

  bool has_parameter(const Tensor<T>& param) const { return param_nodes_.count(&param) != 0; }

  /// Structural counters, e.g. how many times a layer ran on this tape.
  void mark(std::string_view what) { ++marks_[std::string(what)]; }
  std::size_t marks(std::string_view what) const {
    auto it = marks_.find(std::string(what));
    return it == marks_.end() ? 0 : it->second;
  }

  std::string_view op_name(Var<T> v) const { return nodes_[v.id].op; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    const char* op = "";
    const Tensor<T>* ref = nullptr;  // parameters are read in place

    const Tensor<T>& get() const { return ref ? *ref : value; }
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn, const char* op) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn), op, nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(Var<T> v, const char* op) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw TapeError(std::string("operand of ") + op + " belongs to another tape");
    }
  }

  bool record_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;  // stable references: value() stays valid as the tape grows
  std::unordered_map<const Tensor<T>*, std::size_t> param_nodes_;
  std::map<std::string, std::size_t, std::less<>> marks_;
};

namespace kernels {

// C[m×n] = A[m×k] · B[k×n]
template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
            std::size_t k, std::size_t n) {
  std::fill(c.begin(), c.end(), T{0});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×n] = A[m×k] · B[n×k]ᵀ
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = acc;
    }
  }
}

// C[m×n] = A[k×m]ᵀ · B[k×n]
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t k,
               std::size_t m, std::size_t n) {
  std::fill(c.begin(), c.end(), T{0});
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * m;
    const T* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, axis extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s,
                                                                    std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

/// C = A·B for A[m×k], B[k×n].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul inner extents differ: " + shape_str(av.shape()) + " · " +
                         shape_str(bv.shape()));
  }
  Tensor<T> out(Shape{m, n});
  kernels::matmul<T>(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& A = tape.value(Var<T>{&tape, ia});
        const Tensor<T>& B = tape.value(Var<T>{&tape, ib});
        if (tape.requires_grad(Var<T>{&tape, ia})) {
          Tensor<T> da(Shape{m, k});
          kernels::matmul_nt<T>(g.data(), B.data(), da.data(), m, n, k);
          tape.accumulate(ia, std::move(da));
        }
        if (tape.requires_grad(Var<T>{&tape, ib})) {
          Tensor<T> db(Shape{k, n});
          kernels::matmul_tn<T>(A.data(), g.data(), db.data(), m, k, n);
          tape.accumulate(ib, std::move(db));
        }
      },
      "matmul");
}

/// C = A·Bᵀ for A[m×k], B[n×k]; the natural form for `x·Wᵀ` with W[out×in].
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) {
    throw DimensionError("matmul_nt inner extents differ: " + shape_str(av.shape()) + " · " +
                         shape_str(bv.shape()) + "ᵀ");
  }
  Tensor<T> out(Shape{m, n});
  kernels::matmul_nt<T>(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& A = tape.value(Var<T>{&tape, ia});
        const Tensor<T>& B = tape.value(Var<T>{&tape, ib});
        if (tape.requires_grad(Var<T>{&tape, ia})) {
          Tensor<T> da(Shape{m, k});
          kernels::matmul<T>(g.data(), B.data(), da.data(), m, n, k);
          tape.accumulate(ia, std::move(da));
        }
        if (tape.requires_grad(Var<T>{&tape, ib})) {
          Tensor<T> db(Shape{n, k});
          kernels::matmul_tn<T>(g.data(), A.data(), db.data(), m, n, k);
          tape.accumulate(ib, std::move(db));
        }
      },
      "matmul_nt");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(ia, g);
        tape.accumulate(ib, g);
      },
      "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(ia, g);
        Tensor<T> neg = g;
        for (T& v : neg.data()) v = -v;
        tape.accumulate(ib, std::move(neg));
      },
      "sub");
}

/// Elementwise (Hadamard) product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& A = tape.value(Var<T>{&tape, ia});
        const Tensor<T>& B = tape.value(Var<T>{&tape, ib});
        if (tape.requires_grad(Var<T>{&tape, ia})) {
          Tensor<T> da = g;
          auto d = da.data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] *= B[i];
          tape.accumulate(ia, std::move(da));
        }
        if (tape.requires_grad(Var<T>{&tape, ib})) {
          Tensor<T> db = g;
          auto d = db.data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] *= A[i];
          tape.accumulate(ib, std::move(db));
        }
      },
      "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= factor;
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), {a},
      [ia, factor](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> d = g;
        for (T& v : d.data()) v *= factor;
        tape.accumulate(ia, std::move(d));
      },
      "scale");
}

/// 1 − a, elementwise.
template <typename T>
Var<T> one_minus(Var<T> a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = T{1} - v;
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), {a},
      [ia](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> d = g;
        for (T& v : d.data()) v = -v;
        tape.accumulate(ia, std::move(d));
      },
      "one_minus");
}

/// x[m×n] + b[n] broadcast over rows.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = b.value();
  detail::require_matrix(xv, "add_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (bv.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " vs input " +
                         shape_str(xv.shape()));
  }
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bv[j];
  }
  const std::size_t ix = x.id, ib = b.id;
  const Shape bshape = bv.shape();
  return x.tape->record(
      std::move(out), {x, b},
      [ix, ib, m, n, bshape](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(ix, g);
        if (tape.requires_grad(Var<T>{&tape, ib})) {
          Tensor<T> db(bshape);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) db[j] += g.at(i, j);
          }
          tape.accumulate(ib, std::move(db));
        }
      },
      "add_bias");
}

/// Multiplies row i of a matrix by a constant factor[i] (no gradient to the
/// factors).
template <typename T>
Var<T> scale_rows(Var<T> x, std::span<const T> factors) {
  const Tensor<T>& xv = x.value();
  detail::require_matrix(xv, "scale_rows");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (factors.size() != m) {
    throw DimensionError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                         std::to_string(m) + " rows");
  }
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= factors[i];
  }
  std::vector<T> f(factors.begin(), factors.end());
  const std::size_t ix = x.id;
  return x.tape->record(
      std::move(out), {x},
      [ix, f = std::move(f), n](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> d = g;
        for (std::size_t i = 0; i < f.size(); ++i) {
          for (std::size_t j = 0; j < n; ++j) d.at(i, j) *= f[i];
        }
        tape.accumulate(ix, std::move(d));
      },
      "scale_rows");
}

enum class Activation { relu, selu, tanh, sigmoid };

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "selu") return Activation::selu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

template <typename T>
T activate(Activation kind, T x) {
  switch (kind) {
    case Activation::relu:
      return x > T{0} ? x : T{0};
    case Activation::selu: {
      const T lambda = static_cast<T>(kSeluLambda);
      const T alpha = static_cast<T>(kSeluAlpha);
      return x > T{0} ? lambda * x : lambda * alpha * std::expm1(x);
    }
    case Activation::tanh:
      return std::tanh(x);
    case Activation::sigmoid:
      return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
  }
  throw ConfigError("unknown activation kind");
}

template <typename T>
Var<T> activation(Activation kind, Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = activate(kind, v);
  const std::size_t ix = x.id;
  const std::size_t iy = x.tape->size();  // id the result will receive
  return x.tape->record(
      std::move(out), {x},
      [ix, iy, kind](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& X = tape.value(Var<T>{&tape, ix});
        const Tensor<T>& Y = tape.value(Var<T>{&tape, iy});
        Tensor<T> d = g;
        auto dd = d.data();
        for (std::size_t i = 0; i < dd.size(); ++i) {
          T deriv{};
          switch (kind) {
            case Activation::relu:
              deriv = X[i] > T{0} ? T{1} : T{0};
              break;
            case Activation::selu: {
              const T lambda = static_cast<T>(kSeluLambda);
              const T alpha = static_cast<T>(kSeluAlpha);
              deriv = X[i] > T{0} ? lambda : Y[i] + lambda * alpha;
              break;
            }
            case Activation::tanh:
              deriv = T{1} - Y[i] * Y[i];
              break;
            case Activation::sigmoid:
              deriv = Y[i] * (T{1} - Y[i]);
              break;
          }
          dd[i] *= deriv;
        }
        tape.accumulate(ix, std::move(d));
      },
      "activation");
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return activation(Activation::tanh, x);
}
template <typename T>
Var<T> sigmoid(Var<T> x) {
  return activation(Activation::sigmoid, x);
}
template <typename T>
Var<T> selu(Var<T> x) {
  return activation(Activation::selu, x);
}
template <typename T>
Var<T> relu(Var<T> x) {
  return activation(Activation::relu, x);
}

namespace detail {

// Softmax over the middle extent of an (outer, len, inner) view, restricted to
// entries where `allowed(o, i, j)` holds; disallowed entries get exactly 0.
template <typename T, typename Allowed>
Tensor<T> softmax_values(const Tensor<T>& x, std::size_t outer, std::size_t len,
                         std::size_t inner, Allowed allowed) {
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        if (allowed(o, in, j)) mx = std::max(mx, x[base + j * inner]);
      }
      T total{0};
      for (std::size_t j = 0; j < len; ++j) {
        if (!allowed(o, in, j)) continue;
        const T e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= total;
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& g, std::size_t outer,
                           std::size_t len, std::size_t inner) {
  Tensor<T> d(y.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T dot{0};
      for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t k = base + j * inner;
        d[k] = y[k] * (g[k] - dot);
      }
    }
  }
  return d;
}

}  // namespace detail

/// Softmax along `axis`, shifted by the per-slice max.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(xv.shape()));
  }
  auto [outer, len, inner] = detail::split_axis(xv.shape(), axis);
  Tensor<T> y = detail::softmax_values(xv, outer, len, inner,
                                       [](std::size_t, std::size_t, std::size_t) { return true; });
  const std::size_t ix = x.id;
  const std::size_t iy = x.tape->size();
  return x.tape->record(
      std::move(y), {x},
      [ix, iy, outer = outer, len = len, inner = inner](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& Y = tape.value(Var<T>{&tape, iy});
        tape.accumulate(ix, detail::softmax_backward(Y, g, outer, len, inner));
      },
      "softmax");
}

/// Row softmax of a square score matrix where row i only attends to columns j
/// with `group[j] == group[i]`. Entries across groups are exactly zero.
template <typename T>
Var<T> grouped_row_softmax(Var<T> x, std::span<const std::size_t> group) {
  const Tensor<T>& xv = x.value();
  detail::require_matrix(xv, "grouped_row_softmax");
  const std::size_t n = xv.dim(0);
  if (xv.dim(1) != n || group.size() != n) {
    throw DimensionError("grouped_row_softmax expects a square matrix with one group id per row, "
                         "got " + shape_str(xv.shape()) + " and " +
                         std::to_string(group.size()) + " ids");
  }
  Tensor<T> y = detail::softmax_values(
      xv, n, n, 1, [&](std::size_t i, std::size_t, std::size_t j) { return group[i] == group[j]; });
  const std::size_t ix = x.id;
  const std::size_t iy = x.tape->size();
  return x.tape->record(
      std::move(y), {x},
      [ix, iy, n](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& Y = tape.value(Var<T>{&tape, iy});
        tape.accumulate(ix, detail::softmax_backward(Y, g, n, n, 1));
      },
      "grouped_row_softmax");
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var<T>& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat extent mismatch: " + shape_str(first) + " vs " + shape_str(s));
    }
    out_shape[axis] += s[axis];
  }
  auto [outer, total, inner] = detail::split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, lens;
  std::size_t offset = 0;
  for (const Var<T>& p : parts) {
    const Tensor<T>& v = p.value();
    const std::size_t len = v.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data().begin() + o * len * inner, len * inner,
                  out.data().begin() + (o * total + offset) * inner);
    }
    ids.push_back(p.id);
    lens.push_back(len);
    offset += len;
  }
  return parts[0].tape->record(
      std::move(out), parts,
      [ids = std::move(ids), lens = std::move(lens), outer = outer, total = total, inner = inner,
       axis](Tape<T>& tape, const Tensor<T>& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (tape.requires_grad(Var<T>{&tape, ids[k]})) {
            Shape s = g.shape();
            s[axis] = lens[k];
            Tensor<T> d(s);
            for (std::size_t o = 0; o < outer; ++o) {
              std::copy_n(g.data().begin() + (o * total + off) * inner, lens[k] * inner,
                          d.data().begin() + o * lens[k] * inner);
            }
            tape.accumulate(ids[k], std::move(d));
          }
          off += lens[k];
        }
      },
      "concat");
}

template <typename T>
Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
  return concat(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  return concat(std::span<const Var<T>>(parts), axis);
}

/// Half-open range [begin, end) along `axis`.
template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank() || begin >= end || end > xv.shape()[axis]) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(xv.shape()));
  }
  auto [outer, len, inner] = detail::split_axis(xv.shape(), axis);
  Shape s = xv.shape();
  s[axis] = end - begin;
  const std::size_t w = end - begin;
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data().begin() + (o * len + begin) * inner, w * inner,
                out.data().begin() + o * w * inner);
  }
  const std::size_t ix = x.id;
  const Shape in_shape = xv.shape();
  return x.tape->record(
      std::move(out), {x},
      [ix, in_shape, outer = outer, len = len, inner = inner, begin, w](Tape<T>& tape,
                                                                        const Tensor<T>& g) {
        Tensor<T> d(in_shape);
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(g.data().begin() + o * w * inner, w * inner,
                      d.data().begin() + (o * len + begin) * inner);
        }
        tape.accumulate(ix, std::move(d));
      },
      "slice");
}

/// out[k] = x[rows[k]] for a matrix x; rows may repeat.
template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
  const Tensor<T>& xv = x.value();
  detail::require_matrix(xv, "gather_rows");
  const std::size_t n = xv.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows with no indices");
  Tensor<T> out(Shape{rows.size(), n});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= xv.dim(0)) {
      throw DimensionError("gather_rows index " + std::to_string(rows[k]) + " out of range for " +
                           shape_str(xv.shape()));
    }
    std::copy_n(xv.row(rows[k]).begin(), n, out.row(k).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t ix = x.id;
  const Shape in_shape = xv.shape();
  return x.tape->record(
      std::move(out), {x},
      [ix, in_shape, idx = std::move(idx), n](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> d(in_shape);
        for (std::size_t k = 0; k < idx.size(); ++k) {
          for (std::size_t j = 0; j < n; ++j) d.at(idx[k], j) += g.at(k, j);
        }
        tape.accumulate(ix, std::move(d));
      },
      "gather_rows");
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  const Tensor<T>& xv = x.value();
  if (shape_size(shape) != xv.size()) {
    throw DimensionError("reshape " + shape_str(xv.shape()) + " to " + shape_str(shape));
  }
  const std::size_t ix = x.id;
  const Shape in_shape = xv.shape();
  return x.tape->record(
      xv.reshaped(std::move(shape)), {x},
      [ix, in_shape](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(ix, g.reshaped(in_shape));
      },
      "reshape");
}

template <typename T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T total{0};
  for (T v : xv.data()) total += v;
  const std::size_t ix = x.id;
  const Shape in_shape = xv.shape();
  return x.tape->record(
      Tensor<T>::scalar(total), {x},
      [ix, in_shape](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(ix, Tensor<T>(in_shape, g.item()));
      },
      "sum");
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Σ_r weight[r] · −log softmax(logits)[r][target[r]]. Rows with weight 0
/// are skipped (their targets are not validated).
template <typename T>
Var<T> weighted_cross_entropy(Var<T> logits, std::span<const std::size_t> targets,
                              std::span<const T> weights) {
  const Tensor<T>& lv = logits.value();
  detail::require_matrix(lv, "cross_entropy");
  const std::size_t rows = lv.dim(0), vocab = lv.dim(1);
  if (targets.size() != rows || weights.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " logit rows, " +
                         std::to_string(targets.size()) + " targets, " +
                         std::to_string(weights.size()) + " weights");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] != T{0} && targets[r] >= vocab) {
      throw DimensionError("cross_entropy target id " + std::to_string(targets[r]) +
                           " >= vocabulary " + std::to_string(vocab));
    }
  }
  Tensor<T> probs(lv.shape());
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == T{0}) continue;
    auto row = lv.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T z{0};
    for (std::size_t j = 0; j < vocab; ++j) {
      const T e = std::exp(row[j] - mx);
      probs.at(r, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) probs.at(r, j) /= z;
    total += weights[r] * -(row[targets[r]] - mx - std::log(z));
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  const std::size_t il = logits.id;
  return logits.tape->record(
      Tensor<T>::scalar(total), {logits},
      [il, probs = std::move(probs), tg = std::move(tg), w = std::move(w), rows,
       vocab](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> d(probs.shape());
        const T up = g.item();
        for (std::size_t r = 0; r < rows; ++r) {
          if (w[r] == T{0}) continue;
          const T scale = up * w[r];
          for (std::size_t j = 0; j < vocab; ++j) d.at(r, j) = probs.at(r, j) * scale;
          d.at(r, tg[r]) -= scale;
        }
        tape.accumulate(il, std::move(d));
      },
      "cross_entropy");
}

/// Mean over non-padded rows of −log softmax(logits)[row][target]. `pad[r]`
/// nonzero marks a row excluded from the loss.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> targets,
                     std::span<const std::uint8_t> pad) {
  if (pad.size() != targets.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets, " +
                         std::to_string(pad.size()) + " mask entries");
  }
  const std::size_t count =
      static_cast<std::size_t>(std::count(pad.begin(), pad.end(), std::uint8_t{0}));
  if (count == 0) throw DimensionError("cross_entropy: every position is padded (degenerate batch)");
  const T inv = T{1} / static_cast<T>(count);
  std::vector<T> weights(pad.size());
  for (std::size_t r = 0; r < pad.size(); ++r) weights[r] = pad[r] ? T{0} : inv;
  return weighted_cross_entropy(logits, targets, std::span<const T>(weights));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> targets) {
  std::vector<std::uint8_t> pad(targets.size(), 0);
  return cross_entropy(logits, targets, std::span<const std::uint8_t>(pad));
}

}  // namespace hidetell
