#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hidetell/autodiff.hpp"

namespace hidetell {

/// Worst coordinate of a finite-difference comparison.
struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline void fold(GradCheckResult& r, std::size_t index, double analytic, double numeric) {
  const double err = relative_error(analytic, numeric);
  ++r.coordinates;
  if (r.coordinates == 1 || err > r.max_relative_error) {
    r.max_relative_error = err;
    r.worst_index = index;
    r.analytic = analytic;
    r.numeric = numeric;
  }
}

template <typename Fn>
double eval_scalar(Fn& f, const Tensor<double>& x) {
  Tape<double> tape(false);
  Var<double> in = tape.variable(x);
  Var<double> out = f(tape, in);
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite function value");
  return v;
}

}  // namespace detail

/// Compares the tape gradient of a scalar function `f(tape, x)` against
/// central differences (f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps) for every
/// coordinate of `x`. Relative error uses max(|analytic|, |numeric|, 1e-8).
template <typename Fn>
GradCheckResult grad_check(Fn f, const Tensor<double>& x, double eps = 1e-5) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    Var<double> in = tape.variable(x);
    Var<double> out = f(tape, in);
    if (!std::isfinite(out.value().item())) {
      throw NumericalError("grad_check: non-finite function value");
    }
    tape.backward(out);
    analytic = tape.grad(in);
  }
  GradCheckResult result;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double plus = detail::eval_scalar(f, probe);
    probe[i] = orig - eps;
    const double minus = detail::eval_scalar(f, probe);
    probe[i] = orig;
    detail::fold(result, i, analytic[i], (plus - minus) / (2.0 * eps));
  }
  return result;
}

namespace detail {

inline std::vector<std::pair<std::size_t, std::size_t>> probe_coordinates(
    const std::vector<std::size_t>& sizes, std::size_t max_coords, std::mt19937_64* rng) {
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < sizes.size(); ++p) {
    for (std::size_t i = 0; i < sizes[p]; ++i) coords.emplace_back(p, i);
  }
  if (max_coords != 0 && coords.size() > max_coords) {
    if (rng == nullptr) throw ConfigError("grad_check: sampling coordinates requires an rng");
    std::shuffle(coords.begin(), coords.end(), *rng);
    coords.resize(max_coords);
  }
  return coords;
}

inline std::vector<Tensor<double>> analytic_gradients(
    const std::function<Var<double>(Tape<double>&)>& loss,
    std::span<Tensor<double>* const> params) {
  Tape<double> tape;
  Var<double> out = loss(tape);
  if (!std::isfinite(out.value().item())) throw NumericalError("grad_check: non-finite loss");
  tape.backward(out);
  std::vector<Tensor<double>> g;
  for (Tensor<double>* p : params) g.push_back(tape.grad_of(*p));
  return g;
}

// Central differences in precision X over `probe` (same layout as the
// analytic gradients).
template <typename X, typename EvalFn>
GradCheckResult compare(const std::vector<Tensor<double>>& analytic,
                        std::span<Tensor<X>* const> probe, EvalFn eval, double eps,
                        std::size_t max_coords, std::mt19937_64* rng) {
  std::vector<std::size_t> sizes, offsets;
  std::size_t flat = 0;
  for (Tensor<X>* p : probe) {
    sizes.push_back(p->size());
    offsets.push_back(flat);
    flat += p->size();
  }
  GradCheckResult result;
  const X h = static_cast<X>(eps);
  for (auto [p, i] : probe_coordinates(sizes, max_coords, rng)) {
    Tensor<X>& t = *probe[p];
    const X orig = t[i];
    t[i] = orig + h;
    const X plus = eval();
    t[i] = orig - h;
    const X minus = eval();
    t[i] = orig;
    detail::fold(result, offsets[p] + i, analytic[p][i],
                 static_cast<double>((plus - minus) / (X{2} * h)));
  }
  return result;
}

}  // namespace detail

/// Same comparison over parameter tensors owned by a model. `loss(tape)`
/// rebuilds the forward pass, binding parameters through `tape.parameter`.
/// When `max_coords` is nonzero only that many coordinates, drawn with `rng`,
/// are probed per call.
template <typename LossFn>
GradCheckResult grad_check_parameters(LossFn loss, std::span<Tensor<double>* const> params,
                                      double eps = 1e-5, std::size_t max_coords = 0,
                                      std::mt19937_64* rng = nullptr) {
  const auto analytic = detail::analytic_gradients(loss, params);
  auto eval = [&] {
    Tape<double> tape(false);
    const double v = loss(tape).value().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss");
    return v;
  };
  return detail::compare<double>(analytic, params, eval, eps, max_coords, rng);
}

/// Precision used for the finite-difference side of grad_check_model.
using Extended = long double;

/// Gradient check for a whole model. Analytic gradients come from the 64-bit
/// model; the central differences are evaluated on an extended-precision copy.
/// In 64-bit the loss carries round-off near 1e-16·|loss|, which at eps=1e-5
/// is an absolute error around 1e-11 in the numeric slope and swamps
/// coordinates whose gradient is below ~1e-7. `loss(model, tape)` must be
/// generic in the scalar type.
template <typename Model, typename LossFn>
GradCheckResult grad_check_model(Model& model, LossFn loss, double eps = 1e-5,
                                 std::size_t max_coords = 0, std::mt19937_64* rng = nullptr) {
  auto named = model.parameters();
  std::vector<Tensor<double>*> params;
  for (auto& [name, p] : named) params.push_back(p);
  const auto analytic = detail::analytic_gradients(
      [&](Tape<double>& tape) { return loss(std::as_const(model), tape); },
      std::span<Tensor<double>* const>(params));

  auto ext = model.template cast<Extended>();
  auto ext_named = ext.parameters();
  std::vector<Tensor<Extended>*> probe;
  for (auto& [name, p] : ext_named) probe.push_back(p);
  auto eval = [&] {
    Tape<Extended> tape(false);
    const Extended v = loss(std::as_const(ext), tape).value().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss");
    return v;
  };
  return detail::compare<Extended>(analytic, std::span<Tensor<Extended>* const>(probe), eval, eps,
                                   max_coords, rng);
}

}  // namespace hidetell
