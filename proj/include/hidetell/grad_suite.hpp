#pragma once

// Random-instance gradient checks for every differentiable op, every layer
// and the full training loss, on micro sizes (3 slots, D = 8, V = 7). Each
// entry draws a fresh random point from the rng and returns its worst
// relative error. Used by the test suite and by `hidetell gradcheck`.

#include <functional>
#include <map>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "hidetell/grad_check.hpp"
#include "hidetell/model.hpp"

namespace hidetell::gradsuite {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

template <typename T>
void randomize(INetModel<T>& model, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  model.visit([&](const std::string&, Tensor<T>& t) {
    for (T& v : t.data()) v = static_cast<T>(dist(rng));
  });
}

template <typename U>
std::vector<TrainingStory<U>> cast_batch(const std::vector<TrainingStory<double>>& batch) {
  std::vector<TrainingStory<U>> out;
  for (const auto& s : batch) out.push_back({s.features.template cast<U>(), s.targets});
  return out;
}

// forward_loss with a fixed mask seed, callable in 64-bit and extended
// precision (see grad_check_model).
struct FixedMaskLoss {
  explicit FixedMaskLoss(const std::vector<TrainingStory<double>>& batch, int b_total = 1,
                         std::uint64_t seed = 5)
      : d(batch), x(cast_batch<Extended>(batch)), b_total(b_total), seed(seed) {}

  template <typename U>
  Var<U> operator()(const INetModel<U>& m, Tape<U>& t) const {
    std::mt19937_64 r(seed);
    if constexpr (std::is_same_v<U, double>) {
      return forward_loss(m, t, std::span<const TrainingStory<U>>(d), b_total, r);
    } else {
      return forward_loss(m, t, std::span<const TrainingStory<U>>(x), b_total, r);
    }
  }

  std::vector<TrainingStory<double>> d;
  std::vector<TrainingStory<Extended>> x;
  int b_total;
  std::uint64_t seed;
};

// Small model used across suites: 3 slots, D=8, V=7.
inline INetConfig micro_config() {
  INetConfig c;
  c.slots = 3;
  c.feature_dim = 8;
  c.hidden = 4;
  c.vocab = 7;
  c.max_len = 4;
  c.decoder_hidden = 5;
  c.head_width = 6;
  c.alpha = 2;
  c.beta = 4;
  return c;
}

// Parameter coordinates probed per random point in whole-model checks.
inline constexpr std::size_t kModelCoords = 64;

struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::mt19937_64&)> run;
};

namespace detail {

using T2 = Tensor<double>;
using Op = std::function<Var<double>(Tape<double>&, Var<double>, std::mt19937_64&)>;

// Random linear functional of an op's output, so every output coordinate
// contributes to the checked gradient.
inline GradCase op_case(std::string name, Shape in, Op op) {
  return {std::move(name), [in, op](std::mt19937_64& rng) {
            const T2 x = random_tensor(in, rng);
            const std::uint64_t seed = rng();
            std::map<Shape, T2> probes;
            return grad_check(
                [&](Tape<double>& t, Var<double> v) {
                  std::mt19937_64 local(seed);  // same constants on every evaluation
                  Var<double> y = op(t, v, local);
                  auto it = probes.find(y.shape());
                  if (it == probes.end()) it = probes.emplace(y.shape(), random_tensor(y.shape(), local)).first;
                  return sum(mul(y, t.constant(it->second)));
                },
                x);
          }};
}

template <typename U> GRUCell<U> make_like(const GRUCell<double>& c) { return GRUCell<U>(c.input_size(), c.hidden_size()); }
template <typename U> BiGRU<U> make_like(const BiGRU<double>& n) {
  return BiGRU<U>(n.forward.input_size(), n.forward.hidden_size());
}
template <typename U> NonLocalBlock<U> make_like(const NonLocalBlock<double>& b) {
  return NonLocalBlock<U>(b.theta.in_features(), b.theta.out_features());
}
template <typename U> OutputHead<U> make_like(const OutputHead<double>& h) {
  return OutputHead<U>(h.hidden.in_features(), h.hidden.out_features(), h.vocab_size());
}

template <typename Layer>
std::vector<T2*> params_of(Layer& layer) {
  std::vector<T2*> out;
  layer.visit("p", [&](const std::string&, T2& t) { out.push_back(&t); });
  return out;
}

// Same layer in another precision; relies on visit() order being fixed.
template <typename U, template <typename> class Layer>
Layer<U> cast_layer(const Layer<double>& layer) {
  Layer<U> out = make_like<U>(layer);
  std::vector<Tensor<U>*> dst;
  out.visit("p", [&](const std::string&, Tensor<U>& t) { dst.push_back(&t); });
  std::size_t k = 0;
  const_cast<Layer<double>&>(layer).visit("p", [&](const std::string&, T2& t) { *dst[k++] = t.cast<U>(); });
  return out;
}

template <typename Layer>
void randomize_layer(Layer& layer, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 0.5);
  layer.visit("p", [&](const std::string&, T2& t) {
    for (double& v : t.data()) v = d(rng);
  });
}

// Parameter and input gradients of one random layer. Analytic gradients
// come from the 64-bit layer; central differences run on an extended copy,
// as in grad_check_model.
template <template <typename> class Layer, typename Fwd>
GradCheckResult layer_check(const Layer<double>& layer, const T2& x, const T2& probe, Fwd fwd) {
  Layer<double> ld = layer;
  T2 xd = x;
  std::vector<T2*> params = params_of(ld);
  params.push_back(&xd);
  const auto analytic = hidetell::detail::analytic_gradients(
      [&](Tape<double>& t) { return sum(mul(fwd(ld, t, t.parameter(xd)), t.constant(probe))); },
      std::span<T2* const>(params));

  Layer<Extended> lx = cast_layer<Extended>(layer);
  Tensor<Extended> xx = x.cast<Extended>();
  const Tensor<Extended> px = probe.cast<Extended>();
  std::vector<Tensor<Extended>*> probe_params;
  lx.visit("p", [&](const std::string&, Tensor<Extended>& t) { probe_params.push_back(&t); });
  probe_params.push_back(&xx);
  auto eval = [&] {
    Tape<Extended> t(false);
    return sum(mul(fwd(lx, t, t.constant(xx)), t.constant(px))).value().item();
  };
  return hidetell::detail::compare<Extended>(
      analytic, std::span<Tensor<Extended>* const>(probe_params), eval, 1e-5, 0, nullptr);
}

inline TrainingStory<double> micro_story(std::mt19937_64& rng, const INetConfig& c) {
  TrainingStory<double> s{random_tensor(Shape{c.slots, c.feature_dim}, rng), {}};
  std::uniform_int_distribution<std::size_t> word(kUnkId, c.vocab - 1), len(0, c.max_len - 1);
  for (std::size_t i = 0; i < c.slots; ++i) {
    std::vector<std::size_t> t(len(rng));
    for (auto& w : t) w = word(rng);
    t.push_back(kEosId);
    s.targets.push_back(std::move(t));
  }
  return s;
}

inline INetModel<double> micro_model(std::mt19937_64& rng, Ablation ablation = Ablation::full,
                                     std::size_t embed = 0) {
  INetConfig c = micro_config();
  c.ablation = ablation;
  c.embed_dim = embed;
  INetModel<double> m(c);
  randomize(m, rng, 0.5);
  return m;
}

// Projection of one encoder stage, generic in the scalar type so it can run
// under grad_check_model.
struct StageLoss {
  bool telling;
  Tensor<double> input, probe;

  template <typename U>
  Var<U> operator()(const INetModel<U>& m, Tape<U>& t) const {
    Var<U> x = t.constant(input.template cast<U>());
    Var<U> y = telling ? tell(m, t, x) : imagine(m, t, x);
    return sum(mul(y, t.constant(probe.template cast<U>())));
  }
};

}  // namespace detail

inline std::vector<GradCase> gradient_cases() {
  using namespace detail;
  std::vector<GradCase> cases;
  auto constant = [](Tape<double>& t, Shape s, std::mt19937_64& r) { return t.constant(random_tensor(s, r)); };

  cases.push_back(op_case("matmul", {3, 4}, [=](auto& t, auto v, auto& r) { return matmul(v, constant(t, {4, 2}, r)); }));
  cases.push_back(op_case("matmul_rhs", {4, 2}, [=](auto& t, auto v, auto& r) { return matmul(constant(t, {3, 4}, r), v); }));
  cases.push_back(op_case("matmul_nt", {3, 4}, [=](auto& t, auto v, auto& r) { return matmul_nt(v, constant(t, {5, 4}, r)); }));
  cases.push_back(op_case("matmul_nt_rhs", {5, 4}, [=](auto& t, auto v, auto& r) { return matmul_nt(constant(t, {3, 4}, r), v); }));
  cases.push_back(op_case("add", {3, 4}, [=](auto& t, auto v, auto& r) { return add(v, constant(t, {3, 4}, r)); }));
  cases.push_back(op_case("sub", {3, 4}, [=](auto& t, auto v, auto& r) { return sub(constant(t, {3, 4}, r), v); }));
  cases.push_back(op_case("mul", {3, 4}, [=](auto& t, auto v, auto& r) { return mul(v, add(v, constant(t, {3, 4}, r))); }));
  cases.push_back(op_case("scale", {3, 4}, [](auto&, auto v, auto&) { return scale(v, -1.7); }));
  cases.push_back(op_case("one_minus", {3, 4}, [](auto&, auto v, auto&) { return one_minus(v); }));
  cases.push_back(op_case("tanh", {3, 4}, [](auto&, auto v, auto&) { return tanh(v); }));
  cases.push_back(op_case("sigmoid", {3, 4}, [](auto&, auto v, auto&) { return sigmoid(v); }));
  cases.push_back(op_case("selu", {3, 4}, [](auto&, auto v, auto&) { return selu(v); }));
  cases.push_back(op_case("relu", {3, 4}, [](auto&, auto v, auto&) { return relu(v); }));
  cases.push_back(op_case("add_bias", {3, 4}, [=](auto& t, auto v, auto& r) { return add_bias(v, constant(t, {4}, r)); }));
  cases.push_back(op_case("add_bias_b", {4}, [=](auto& t, auto v, auto& r) { return add_bias(constant(t, {3, 4}, r), v); }));
  cases.push_back(op_case("scale_rows", {3, 4}, [](auto&, auto v, auto& r) {
    static thread_local std::vector<double> f;
    const T2 rows = random_tensor({3}, r);
    f.assign(rows.data().begin(), rows.data().end());
    return scale_rows(v, std::span<const double>(f));
  }));
  cases.push_back(op_case("softmax_rows", {3, 4}, [](auto&, auto v, auto&) { return softmax(v, 1); }));
  cases.push_back(op_case("softmax_cols", {3, 4}, [](auto&, auto v, auto&) { return softmax(v, 0); }));
  cases.push_back(op_case("grouped_row_softmax", {4, 4}, [](auto&, auto v, auto&) {
    static const std::size_t groups[] = {0, 1, 0, 1};
    return grouped_row_softmax(v, std::span<const std::size_t>(groups));
  }));
  cases.push_back(op_case("concat", {3, 4}, [=](auto& t, auto v, auto& r) { return concat({v, constant(t, {3, 2}, r), v}, 1); }));
  cases.push_back(op_case("concat_rows", {3, 4}, [=](auto& t, auto v, auto& r) { return concat({constant(t, {2, 4}, r), v}, 0); }));
  cases.push_back(op_case("slice", {3, 4}, [](auto&, auto v, auto&) { return slice(v, 1, 1, 3); }));
  cases.push_back(op_case("gather_rows", {3, 4}, [](auto&, auto v, auto&) {
    static const std::size_t rows[] = {2, 0, 2};
    return gather_rows(v, std::span<const std::size_t>(rows));
  }));
  cases.push_back(op_case("reshape", {3, 4}, [](auto&, auto v, auto&) { return reshape(v, Shape{2, 6}); }));
  cases.push_back(op_case("sum", {3, 4}, [](auto&, auto v, auto&) { return sum(v); }));
  cases.push_back(op_case("mean", {3, 4}, [](auto&, auto v, auto&) { return mean(v); }));
  cases.push_back(op_case("cross_entropy", {3, 7}, [](auto&, auto v, auto& r) {
    static thread_local std::vector<std::size_t> tg;
    static const std::uint8_t pad[] = {0, 1, 0};
    std::uniform_int_distribution<std::size_t> w(0, 6);
    tg = {w(r), w(r), w(r)};
    return cross_entropy(v, std::span<const std::size_t>(tg), std::span<const std::uint8_t>(pad));
  }));
  cases.push_back(op_case("weighted_cross_entropy", {3, 7}, [](auto&, auto v, auto& r) {
    static thread_local std::vector<std::size_t> tg;
    static thread_local std::vector<double> wt;
    std::uniform_int_distribution<std::size_t> w(0, 6);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    tg = {w(r), w(r), w(r)};
    wt = {u(r), u(r), u(r)};
    return weighted_cross_entropy(v, std::span<const std::size_t>(tg), std::span<const double>(wt));
  }));

  cases.push_back({"gru_step", [](std::mt19937_64& r) {
                     GRUCell<double> cell(4, 3);
                     randomize_layer(cell, r);
                     const T2 x = random_tensor({2, 4}, r), h = random_tensor({2, 3}, r), p = random_tensor({2, 3}, r);
                     return layer_check(cell, h, p, [&](const auto& c, auto& t, auto in) {
                       using U = typename std::decay_t<decltype(in.value())>::value_type;
                       return gru_step(c, t, in, t.constant(x.template cast<U>()));
                     });
                   }});
  cases.push_back({"bigru", [](std::mt19937_64& r) {
                     BiGRU<double> net(8, 4);
                     randomize_layer(net, r);
                     const T2 x = random_tensor({3, 8}, r), p = random_tensor({3, 8}, r);
                     return layer_check(net, x, p, [](const auto& n, auto& t, auto in) {
                       return bigru_forward(n, t, in);
                     });
                   }});
  cases.push_back({"nonlocal", [](std::mt19937_64& r) {
                     NonLocalBlock<double> block(8, 4);
                     randomize_layer(block, r);
                     const T2 x = random_tensor({3, 8}, r), p = random_tensor({3, 8}, r);
                     return layer_check(block, x, p, [](const auto& b, auto& t, auto in) {
                       return nonlocal_forward(b, t, in);
                     });
                   }});
  cases.push_back({"output_head", [](std::mt19937_64& r) {
                     OutputHead<double> head(5, 6, 7);
                     randomize_layer(head, r);
                     const T2 h = random_tensor({3, 5}, r), p = random_tensor({3, 7}, r);
                     return layer_check(head, h, p, [](const auto& hd, auto& t, auto in) {
                       return output_head(hd, t, in);
                     });
                   }});
  cases.push_back({"imagine", [](std::mt19937_64& r) {
                     auto m = micro_model(r);
                     StageLoss loss{false, random_tensor({3, 8}, r), random_tensor({3, 8}, r)};
                     return grad_check_model(m, loss, 1e-5, kModelCoords, &r);
                   }});
  cases.push_back({"tell", [](std::mt19937_64& r) {
                     auto m = micro_model(r);
                     StageLoss loss{true, random_tensor({3, 8}, r), random_tensor({3, 8}, r)};
                     return grad_check_model(m, loss, 1e-5, kModelCoords, &r);
                   }});
  for (Ablation a : {Ablation::full, Ablation::no_blinding, Ablation::no_nonlocal, Ablation::no_telling}) {
    cases.push_back({"forward_loss_" + ablation_name(a), [a](std::mt19937_64& r) {
                       auto m = micro_model(r, a);
                       std::vector<TrainingStory<double>> batch{micro_story(r, m.config), micro_story(r, m.config)};
                       std::uniform_int_distribution<int> level(0, 2);
                       return grad_check_model(m, FixedMaskLoss(batch, level(r), r()), 1e-5, kModelCoords, &r);
                     }});
  }
  cases.push_back({"forward_loss_embedding", [](std::mt19937_64& r) {
                     auto m = micro_model(r, Ablation::full, 3);
                     std::vector<TrainingStory<double>> batch{micro_story(r, m.config)};
                     return grad_check_model(m, FixedMaskLoss(batch, 1, r()), 1e-5, kModelCoords, &r);
                   }});
  return cases;
}

struct CaseReport {
  std::string name;
  std::size_t points = 0;
  GradCheckResult worst;
};

inline constexpr double kGradTolerance = 1e-4;

/// Runs every case at `points` random points drawn from one seeded stream.
inline std::vector<CaseReport> run_suite(std::size_t points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CaseReport> out;
  for (const GradCase& c : gradient_cases()) {
    CaseReport rep{c.name, points, {}};
    for (std::size_t i = 0; i < points; ++i) {
      const GradCheckResult r = c.run(rng);
      if (i == 0 || r.max_relative_error > rep.worst.max_relative_error) rep.worst = r;
    }
    out.push_back(std::move(rep));
  }
  return out;
}

}  // namespace hidetell::gradsuite
