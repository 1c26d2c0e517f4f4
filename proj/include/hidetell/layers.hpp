#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hidetell/autodiff.hpp"

namespace hidetell {

/// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)), used for layers that
/// feed tanh/sigmoid nonlinearities.
inline double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename T>
void init_glorot_uniform(Tensor<T>& w, std::mt19937_64& rng) {
  const double bound = glorot_bound(w.cols(), w.rows());
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : w.data()) v = static_cast<T>(dist(rng));
}

/// Zero-mean normal with std sqrt(1 / fan_in); the SELU-friendly scheme.
template <typename T>
void init_lecun_normal(Tensor<T>& w, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(w.cols())));
  for (T& v : w.data()) v = static_cast<T>(dist(rng));
}

/// Per-slot affine map x·Wᵀ + b. Over a stack of slot features this is a
/// kernel-1 one-dimensional convolution.
template <typename T>
struct LinearMap {
  Tensor<T> weight;  // out × in
  Tensor<T> bias;    // out; empty when the map has no bias

  LinearMap() = default;
  LinearMap(std::size_t out, std::size_t in, bool with_bias)
      : weight(Shape{out, in}), bias(with_bias ? Tensor<T>(Shape{out}) : Tensor<T>()) {}

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
  bool has_bias() const { return !bias.empty(); }

  Var<T> apply(Tape<T>& tape, Var<T> x) const {
    if (x.value().rank() != 2 || x.cols() != in_features()) {
      throw DimensionError("linear map " + shape_str(weight.shape()) + " applied to " +
                           shape_str(x.shape()));
    }
    Var<T> y = matmul_nt(x, tape.parameter(weight));
    return has_bias() ? add_bias(y, tape.parameter(bias)) : y;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (has_bias()) f(prefix + ".bias", bias);
  }
};

/// Gated recurrent unit with the reset/update formulation:
///   z = σ(W_z x + U_z h + b_z)
///   r = σ(W_r x + U_r h + b_r)
///   h̃ = tanh(W_h x + U_h (r ∘ h) + b_h)
///   h' = (1 − z) ∘ h + z ∘ h̃
template <typename T>
struct GRUCell {
  Tensor<T> w_z, u_z, b_z;
  Tensor<T> w_r, u_r, b_r;
  Tensor<T> w_h, u_h, b_h;

  GRUCell() = default;
  GRUCell(std::size_t input, std::size_t hidden)
      : w_z(Shape{hidden, input}), u_z(Shape{hidden, hidden}), b_z(Shape{hidden}),
        w_r(Shape{hidden, input}), u_r(Shape{hidden, hidden}), b_r(Shape{hidden}),
        w_h(Shape{hidden, input}), u_h(Shape{hidden, hidden}), b_h(Shape{hidden}) {}

  std::size_t input_size() const { return w_z.dim(1); }
  std::size_t hidden_size() const { return w_z.dim(0); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w_z", w_z);
    f(prefix + ".u_z", u_z);
    f(prefix + ".b_z", b_z);
    f(prefix + ".w_r", w_r);
    f(prefix + ".u_r", u_r);
    f(prefix + ".b_r", b_r);
    f(prefix + ".w_h", w_h);
    f(prefix + ".u_h", u_h);
    f(prefix + ".b_h", b_h);
  }

  void init(std::mt19937_64& rng) {
    for (Tensor<T>* w : {&w_z, &u_z, &w_r, &u_r, &w_h, &u_h}) init_glorot_uniform(*w, rng);
    for (Tensor<T>* b : {&b_z, &b_r, &b_h}) b->fill(T{0});
  }
};

/// One GRU step over a batch of rows: h_prev[B×H], x[B×Din] → [B×H].
template <typename T>
Var<T> gru_step(const GRUCell<T>& cell, Tape<T>& tape, Var<T> h_prev, Var<T> x) {
  const std::size_t hidden = cell.hidden_size();
  if (x.value().rank() != 2 || h_prev.value().rank() != 2 || x.cols() != cell.input_size() ||
      h_prev.cols() != hidden || x.rows() != h_prev.rows()) {
    throw DimensionError("gru_step: cell " + std::to_string(cell.input_size()) + "→" +
                         std::to_string(hidden) + " given x " + shape_str(x.shape()) + ", h " +
                         shape_str(h_prev.shape()));
  }
  auto affine = [&](const Tensor<T>& w, const Tensor<T>& u, const Tensor<T>& b, Var<T> h) {
    Var<T> pre = add(matmul_nt(x, tape.parameter(w)), matmul_nt(h, tape.parameter(u)));
    return add_bias(pre, tape.parameter(b));
  };
  Var<T> z = sigmoid(affine(cell.w_z, cell.u_z, cell.b_z, h_prev));
  Var<T> r = sigmoid(affine(cell.w_r, cell.u_r, cell.b_r, h_prev));
  Var<T> candidate = tanh(affine(cell.w_h, cell.u_h, cell.b_h, mul(r, h_prev)));
  return add(mul(one_minus(z), h_prev), mul(z, candidate));
}

/// Rank-1 convenience form: h_prev[H], x[Din] → [H].
template <typename T>
Var<T> gru_step_vector(const GRUCell<T>& cell, Tape<T>& tape, Var<T> h_prev, Var<T> x) {
  Var<T> h = gru_step(cell, tape, reshape(h_prev, Shape{1, h_prev.value().size()}),
                      reshape(x, Shape{1, x.value().size()}));
  return reshape(h, Shape{cell.hidden_size()});
}

template <typename T>
struct BiGRU {
  GRUCell<T> forward;
  GRUCell<T> backward;

  BiGRU() = default;
  BiGRU(std::size_t input, std::size_t hidden) : forward(input, hidden), backward(input, hidden) {}

  std::size_t output_size() const { return 2 * forward.hidden_size(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    forward.visit(prefix + ".fwd", f);
    backward.visit(prefix + ".bwd", f);
  }

  void init(std::mt19937_64& rng) {
    forward.init(rng);
    backward.init(rng);
  }
};

/// Bidirectional pass over a sequence of row batches: steps[t] is [B×Din].
/// Both directions start from a zero hidden state; output t is
/// [→h_t ; ←h_t] of width 2H.
template <typename T>
std::vector<Var<T>> bigru_forward(const BiGRU<T>& net, Tape<T>& tape,
                                  std::span<const Var<T>> steps) {
  if (steps.empty()) throw DimensionError("bigru_forward: empty sequence");
  const std::size_t batch = steps[0].rows();
  const std::size_t hidden = net.forward.hidden_size();
  Var<T> zero = tape.constant(Tensor<T>(Shape{batch, hidden}));
  std::vector<Var<T>> fwd, bwd(steps.size());
  Var<T> h = zero;
  for (const Var<T>& x : steps) {
    h = gru_step(net.forward, tape, h, x);
    fwd.push_back(h);
  }
  h = zero;
  for (std::size_t t = steps.size(); t-- > 0;) {
    h = gru_step(net.backward, tape, h, steps[t]);
    bwd[t] = h;
  }
  std::vector<Var<T>> out;
  out.reserve(steps.size());
  for (std::size_t t = 0; t < steps.size(); ++t) out.push_back(concat({fwd[t], bwd[t]}, 1));
  return out;
}

/// Single-sequence form: seq[T×Din] → [T×2H].
template <typename T>
Var<T> bigru_forward(const BiGRU<T>& net, Tape<T>& tape, Var<T> seq) {
  if (seq.value().rank() != 2) {
    throw DimensionError("bigru_forward expects [T×D], got " + shape_str(seq.shape()));
  }
  std::vector<Var<T>> steps;
  for (std::size_t t = 0; t < seq.rows(); ++t) steps.push_back(slice(seq, 0, t, t + 1));
  return concat(bigru_forward(net, tape, std::span<const Var<T>>(steps)), 0);
}

/// Embedded-Gaussian non-local block over slot features. Each row of the
/// input is one element; projections are bias-free kernel-1 convolutions.
template <typename T>
struct NonLocalBlock {
  LinearMap<T> theta;  // d_inner × d_in
  LinearMap<T> phi;    // d_inner × d_in
  LinearMap<T> g;      // d_inner × d_in
  LinearMap<T> z;      // d_in × d_inner

  NonLocalBlock() = default;
  NonLocalBlock(std::size_t d_in, std::size_t d_inner)
      : theta(d_inner, d_in, false), phi(d_inner, d_in, false), g(d_inner, d_in, false),
        z(d_in, d_inner, false) {}

  std::size_t input_size() const { return theta.in_features(); }
  std::size_t inner_size() const { return theta.out_features(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    theta.visit(prefix + ".theta", f);
    phi.visit(prefix + ".phi", f);
    g.visit(prefix + ".g", f);
    z.visit(prefix + ".z", f);
  }

  // Inputs come out of SELU, so the projections use the SELU-matched scheme.
  void init(std::mt19937_64& rng) {
    for (LinearMap<T>* m : {&theta, &phi, &g, &z}) init_lecun_normal(m->weight, rng);
  }
};

/// Optional capture of a non-local pass, for inspection and tests.
template <typename T>
struct NonLocalTrace {
  Tensor<T> correlation;  // row-stochastic R×R map
};

/// Z = softmax(θ(x)·φ(x)ᵀ)·g(x)·W_zᵀ + x, softmax over keys (columns).
/// `groups[i]` assigns row i to a story; rows only attend within their story.
/// An empty `groups` puts every row in one story.
template <typename T>
Var<T> nonlocal_forward(const NonLocalBlock<T>& block, Tape<T>& tape, Var<T> x,
                        std::span<const std::size_t> groups = {},
                        NonLocalTrace<T>* trace = nullptr) {
  if (x.value().rank() != 2 || x.cols() != block.input_size()) {
    throw DimensionError("nonlocal_forward: block expects width " +
                         std::to_string(block.input_size()) + ", got " + shape_str(x.shape()));
  }
  tape.mark("nonlocal");
  const std::size_t rows = x.rows();
  std::vector<std::size_t> single;
  if (groups.empty()) {
    single.assign(rows, 0);
    groups = single;
  }
  Var<T> scores = matmul_nt(block.theta.apply(tape, x), block.phi.apply(tape, x));
  Var<T> attn = grouped_row_softmax(scores, groups);
  if (trace) trace->correlation = attn.value();
  Var<T> y = matmul(attn, block.g.apply(tape, x));
  return add(block.z.apply(tape, y), x);
}

/// Decoder output head: logits = W_out·tanh(W_w·h + b_w) + b_out.
template <typename T>
struct OutputHead {
  LinearMap<T> hidden;  // H_w × H_dec
  LinearMap<T> out;     // V × H_w

  OutputHead() = default;
  OutputHead(std::size_t input, std::size_t width, std::size_t vocab)
      : hidden(width, input, true), out(vocab, width, true) {}

  std::size_t vocab_size() const { return out.out_features(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    hidden.visit(prefix + ".w_w", f);
    out.visit(prefix + ".w_out", f);
  }

  void init(std::mt19937_64& rng) {
    init_glorot_uniform(hidden.weight, rng);
    init_glorot_uniform(out.weight, rng);
    hidden.bias.fill(T{0});
    out.bias.fill(T{0});
  }
};

template <typename T>
Var<T> output_head(const OutputHead<T>& head, Tape<T>& tape, Var<T> h) {
  return head.out.apply(tape, tanh(head.hidden.apply(tape, h)));
}

}  // namespace hidetell
