#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "test_support.hpp"

using namespace hidetell;
using hidetell::testing::random_tensor;
using T2 = Tensor<double>;

namespace {

template <typename Layer>
void randomize(Layer& layer, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> d(0.0, scale);
  layer.visit("p", [&](const std::string&, T2& t) {
    for (double& v : t.data()) v = d(rng);
  });
}

template <typename Layer>
std::vector<T2*> params_of(Layer& layer) {
  std::vector<T2*> out;
  layer.visit("p", [&](const std::string&, T2& t) { out.push_back(&t); });
  return out;
}

}  // namespace

TEST(Init, GlorotBound) {
  EXPECT_NEAR(glorot_bound(100, 100), std::sqrt(6.0 / 200.0), 1e-15);
  // sqrt(6/200); 0.2449 would be sqrt(6/100), i.e. fan_in alone.
  EXPECT_NEAR(glorot_bound(100, 100), 0.1732, 1e-4);
  EXPECT_NEAR(glorot_bound(50, 50), 0.2449, 1e-4);
}

TEST(Init, DeterministicAndBounded) {
  GRUCell<double> a(6, 4), b(6, 4);
  std::mt19937_64 r1(11), r2(11);
  a.init(r1);
  b.init(r2);
  auto pa = params_of(a), pb = params_of(b);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
  const double bound = glorot_bound(6, 4);
  for (double v : a.w_z.data()) EXPECT_LE(std::abs(v), bound);
  EXPECT_EQ(a.b_z, T2(Shape{4}));
  EXPECT_EQ(a.b_h, T2(Shape{4}));

  OutputHead<double> head(4, 5, 6);
  head.init(r1);
  EXPECT_EQ(head.hidden.bias, T2(Shape{5}));
  EXPECT_EQ(head.out.bias, T2(Shape{6}));
}

TEST(Init, LecunNormalScale) {
  T2 w(Shape{400, 50});
  std::mt19937_64 rng(5);
  init_lecun_normal(w, rng);
  double sq = 0;
  for (double v : w.data()) sq += v * v;
  const double sd = std::sqrt(sq / static_cast<double>(w.size()));
  EXPECT_NEAR(sd, std::sqrt(1.0 / 50.0), 0.01);
}

TEST(Linear, ShapesAndErrors) {
  LinearMap<double> m(3, 4, true);
  Tape<double> tape;
  EXPECT_EQ(m.apply(tape, tape.constant(T2(Shape{5, 4}))).shape(), (Shape{5, 3}));
  EXPECT_THROW(m.apply(tape, tape.constant(T2(Shape{5, 3}))), DimensionError);
}

TEST(GRU, ZeroParametersHalveState) {
  GRUCell<double> cell(3, 4);
  Tape<double> tape;
  T2 h = T2::matrix({{1.0, -2.0, 0.5, 4.0}});
  auto out = gru_step(cell, tape, tape.constant(h), tape.constant(T2::matrix({{7, 8, 9}}))).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out[i], 0.5 * h[i]);
  auto zero = gru_step(cell, tape, tape.constant(T2(Shape{1, 4})), tape.constant(T2::matrix({{7, 8, 9}})));
  EXPECT_EQ(zero.value(), T2(Shape{1, 4}));
}

TEST(GRU, MatchesOracle) {
  std::mt19937_64 rng(21);
  GRUCell<double> cell(3, 4);
  randomize(cell, rng);
  for (int trial = 0; trial < 20; ++trial) {
    T2 h = random_tensor({4}, rng), x = random_tensor({3}, rng);
    Tape<double> tape;
    auto got = gru_step_vector(cell, tape, tape.constant(h), tape.constant(x)).value();
    auto want = oracle::gru(cell, oracle::to_vec(h), oracle::to_vec(x));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got[i], want[i], 1e-13);
  }
  Tape<double> tape;
  EXPECT_THROW(gru_step(cell, tape, tape.constant(T2(Shape{1, 3})), tape.constant(T2(Shape{1, 3}))),
               DimensionError);
}

TEST(GRU, GradientsForEveryGate) {
  std::mt19937_64 rng(22);
  GRUCell<double> cell(3, 4);
  randomize(cell, rng);
  T2 h = random_tensor({2, 4}, rng), x = random_tensor({2, 3}, rng), probe = random_tensor({2, 4}, rng);
  auto params = params_of(cell);
  auto loss = [&](Tape<double>& t) {
    return sum(mul(gru_step(cell, t, t.constant(h), t.constant(x)), t.constant(probe)));
  };
  auto r = grad_check_parameters(loss, std::span<T2* const>(params));
  EXPECT_LT(r.max_relative_error, 1e-4);
  // Input and state gradients too.
  auto rx = grad_check([&](Tape<double>& t, Var<double> v) {
    return sum(mul(gru_step(cell, t, v, t.constant(x)), t.constant(probe)));
  }, h);
  EXPECT_LT(rx.max_relative_error, 1e-4);
}

TEST(BiGRU, SingleStepIsTwoGruSteps) {
  std::mt19937_64 rng(31);
  BiGRU<double> net(3, 2);
  randomize(net, rng);
  T2 x = random_tensor({1, 3}, rng);
  Tape<double> tape;
  auto out = bigru_forward(net, tape, tape.constant(x)).value();
  auto f = oracle::gru(net.forward, {0, 0}, oracle::to_vec(x));
  auto b = oracle::gru(net.backward, {0, 0}, oracle::to_vec(x));
  ASSERT_EQ(out.shape(), (Shape{1, 4}));
  EXPECT_NEAR(out[0], f[0], 1e-14);
  EXPECT_NEAR(out[1], f[1], 1e-14);
  EXPECT_NEAR(out[2], b[0], 1e-14);
  EXPECT_NEAR(out[3], b[1], 1e-14);
}

TEST(BiGRU, ReversalSwapsHalves) {
  std::mt19937_64 rng(32);
  BiGRU<double> net(3, 2);
  randomize(net, rng);
  // Same cell in both directions makes the swap exact.
  net.backward = net.forward;
  T2 x = random_tensor({5, 3}, rng);
  T2 rev(Shape{5, 3});
  for (std::size_t t = 0; t < 5; ++t) std::copy_n(x.row(4 - t).begin(), 3, rev.row(t).begin());
  Tape<double> tape;
  auto a = bigru_forward(net, tape, tape.constant(x)).value();
  auto b = bigru_forward(net, tape, tape.constant(rev)).value();
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_NEAR(a.at(t, k), b.at(4 - t, 2 + k), 1e-14);
      EXPECT_NEAR(a.at(t, 2 + k), b.at(4 - t, k), 1e-14);
    }
  }
}

TEST(BiGRU, MatchesOracleAndZeroParams) {
  std::mt19937_64 rng(33);
  BiGRU<double> net(3, 2);
  T2 x = random_tensor({4, 3}, rng);
  {
    Tape<double> tape;
    EXPECT_EQ(bigru_forward(net, tape, tape.constant(x)).value(), T2(Shape{4, 4}));
  }
  randomize(net, rng);
  Tape<double> tape;
  auto out = bigru_forward(net, tape, tape.constant(x)).value();
  oracle::Vec hf{0, 0}, hb{0, 0};
  std::vector<oracle::Vec> fwd(4), bwd(4);
  for (std::size_t t = 0; t < 4; ++t) fwd[t] = hf = oracle::gru(net.forward, hf, oracle::to_vec(T2(Shape{3}, std::vector<double>(x.row(t).begin(), x.row(t).end()))));
  for (std::size_t t = 4; t-- > 0;) bwd[t] = hb = oracle::gru(net.backward, hb, oracle::to_vec(T2(Shape{3}, std::vector<double>(x.row(t).begin(), x.row(t).end()))));
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_NEAR(out.at(t, k), fwd[t][k], 1e-13);
      EXPECT_NEAR(out.at(t, 2 + k), bwd[t][k], 1e-13);
    }
  }
}

TEST(BiGRU, Gradients) {
  std::mt19937_64 rng(34);
  BiGRU<double> net(3, 2);
  randomize(net, rng);
  T2 x = random_tensor({3, 3}, rng), probe = random_tensor({3, 4}, rng);
  auto params = params_of(net);
  auto r = grad_check_parameters(
      [&](Tape<double>& t) { return sum(mul(bigru_forward(net, t, t.constant(x)), t.constant(probe))); },
      std::span<T2* const>(params));
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(NonLocal, ZeroWzIsIdentity) {
  std::mt19937_64 rng(41);
  NonLocalBlock<double> block(8, 4);
  block.init(rng);
  block.z.weight.fill(0.0);
  T2 x = random_tensor({5, 8}, rng);
  Tape<double> tape;
  EXPECT_EQ(nonlocal_forward(block, tape, tape.constant(x)).value(), x);
}

TEST(NonLocal, SingleElement) {
  std::mt19937_64 rng(42);
  NonLocalBlock<double> block(4, 2);
  block.init(rng);
  T2 x = random_tensor({1, 4}, rng);
  Tape<double> tape;
  NonLocalTrace<double> trace;
  auto z = nonlocal_forward(block, tape, tape.constant(x), {}, &trace).value();
  EXPECT_EQ(trace.correlation, T2::matrix({{1.0}}));
  auto want = oracle::matvec(oracle::to_mat(block.z.weight),
                            oracle::matvec(oracle::to_mat(block.g.weight), oracle::to_vec(x)));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(z[k], want[k] + x[k], 1e-14);
}

TEST(NonLocal, MatchesOracleAndRowsSumToOne) {
  std::mt19937_64 rng(43);
  NonLocalBlock<double> block(8, 4);
  for (int trial = 0; trial < 100; ++trial) {
    block.init(rng);
    T2 x = random_tensor({5, 8}, rng);
    Tape<double> tape;
    NonLocalTrace<double> trace;
    auto z = nonlocal_forward(block, tape, tape.constant(x), {}, &trace).value();
    auto want = oracle::nonlocal(block, oracle::to_mat(x));
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) s += trace.correlation.at(i, j);
      ASSERT_NEAR(s, 1.0, 1e-9);
      for (std::size_t k = 0; k < 8; ++k) ASSERT_NEAR(z.at(i, k), want[i][k], 1e-10);
    }
  }
}

TEST(NonLocal, PermutationEquivariant) {
  std::mt19937_64 rng(44);
  NonLocalBlock<double> block(8, 4);
  block.init(rng);
  T2 x = random_tensor({5, 8}, rng);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  T2 px(Shape{5, 8});
  for (std::size_t i = 0; i < 5; ++i) std::copy_n(x.row(perm[i]).begin(), 8, px.row(i).begin());
  Tape<double> tape;
  auto z = nonlocal_forward(block, tape, tape.constant(x)).value();
  auto pz = nonlocal_forward(block, tape, tape.constant(px)).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(pz.at(i, k), z.at(perm[i], k), 1e-12);

  // The GRU is order-sensitive, which is what separates the two layers.
  BiGRU<double> net(8, 3);
  net.init(rng);
  auto g = bigru_forward(net, tape, tape.constant(x)).value();
  auto pg = bigru_forward(net, tape, tape.constant(px)).value();
  double diff = 0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 6; ++k) diff += std::abs(pg.at(i, k) - g.at(perm[i], k));
  EXPECT_GT(diff, 1e-3);
}

TEST(NonLocal, GroupsKeepStoriesApart) {
  std::mt19937_64 rng(45);
  NonLocalBlock<double> block(4, 2);
  block.init(rng);
  T2 a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  // Slot-major interleave of two stories: row 2t is story a, row 2t+1 story b.
  T2 both(Shape{6, 4});
  for (std::size_t t = 0; t < 3; ++t) {
    std::copy_n(a.row(t).begin(), 4, both.row(2 * t).begin());
    std::copy_n(b.row(t).begin(), 4, both.row(2 * t + 1).begin());
  }
  const std::size_t groups[] = {0, 1, 0, 1, 0, 1};
  Tape<double> tape;
  auto joint = nonlocal_forward(block, tape, tape.constant(both), std::span<const std::size_t>(groups)).value();
  auto solo = nonlocal_forward(block, tape, tape.constant(a)).value();
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(joint.at(2 * t, k), solo.at(t, k), 1e-13);
}

TEST(NonLocal, Gradients) {
  std::mt19937_64 rng(46);
  NonLocalBlock<double> block(4, 2);
  block.init(rng);
  T2 x = random_tensor({3, 4}, rng), probe = random_tensor({3, 4}, rng);
  auto params = params_of(block);
  auto r = grad_check_parameters(
      [&](Tape<double>& t) { return sum(mul(nonlocal_forward(block, t, t.constant(x)), t.constant(probe))); },
      std::span<T2* const>(params));
  EXPECT_LT(r.max_relative_error, 1e-4);
  auto rx = grad_check([&](Tape<double>& t, Var<double> v) {
    return sum(mul(nonlocal_forward(block, t, v), t.constant(probe)));
  }, x);
  EXPECT_LT(rx.max_relative_error, 1e-4);
}

TEST(OutputHead, ZeroIsUniformAndEngineered) {
  OutputHead<double> head(3, 2, 4);
  Tape<double> tape;
  auto probs = softmax(output_head(head, tape, tape.constant(T2::matrix({{1, 2, 3}}))), 1).value();
  for (double p : probs.data()) EXPECT_DOUBLE_EQ(p, 0.25);

  // V=2: zero hidden layer, output bias [1, 0] gives logits [1, 0].
  OutputHead<double> two(3, 2, 2);
  two.out.bias = T2::vector({1.0, 0.0});
  auto v = softmax(output_head(two, tape, tape.constant(T2::matrix({{0.3, -1, 2}}))), 1).value();
  EXPECT_NEAR(v[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(v[0], 0.7311, 1e-4);
  EXPECT_NEAR(v[1], 0.2689, 1e-4);
}

TEST(OutputHead, MatchesOracleAndGradients) {
  std::mt19937_64 rng(51);
  OutputHead<double> head(3, 4, 5);
  randomize(head, rng);
  T2 h = random_tensor({1, 3}, rng);
  Tape<double> tape;
  auto got = output_head(head, tape, tape.constant(h)).value();
  auto want = oracle::head(head, oracle::to_vec(h));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(got[i], want[i], 1e-14);

  auto params = params_of(head);
  const std::size_t target[] = {2, 4};
  T2 hh = random_tensor({2, 3}, rng);
  auto r = grad_check_parameters(
      [&](Tape<double>& t) { return cross_entropy(output_head(head, t, t.constant(hh)), std::span<const std::size_t>(target)); },
      std::span<T2* const>(params));
  EXPECT_LT(r.max_relative_error, 1e-4);
}
