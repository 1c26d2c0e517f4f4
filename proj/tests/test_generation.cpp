#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_support.hpp"

using namespace hidetell;
using hidetell::testing::random_tensor;
using hidetell::testing::randomize;
using hidetell::testing::WarningCapture;

namespace {

INetConfig gen_config(std::size_t vocab, std::size_t max_len) {
  INetConfig c;
  c.slots = 5;
  c.feature_dim = 8;
  c.hidden = 4;
  c.vocab = vocab;
  c.max_len = max_len;
  c.decoder_hidden = 5;
  c.head_width = 6;
  c.alpha = 1;
  c.beta = 2;
  return c;
}

INetModel<double> random_model(const INetConfig& c, std::uint64_t seed, double scale = 0.8) {
  INetModel<double> m(c);
  std::mt19937_64 rng(seed);
  randomize(m, rng, scale);
  return m;
}

// Decoder whose hidden state remembers the previous word and whose head maps
// BOS -> 4 -> 5 -> EOS.
INetModel<double> chain_model() {
  INetConfig c = gen_config(6, 6);
  c.decoder_hidden = 6;
  c.head_width = 6;
  INetModel<double> m(c);
  const std::size_t d = c.feature_dim;
  for (std::size_t j = 0; j < 6; ++j) {
    m.decoder.b_z[j] = 20.0;  // z ~ 1: h = tanh(candidate)
    m.decoder.w_h.at(j, d + j) = 5.0;
    m.head.hidden.weight.at(j, j) = 3.0;
  }
  m.head.out.weight.at(4, kBosId) = 10.0;
  m.head.out.weight.at(5, 4) = 10.0;
  m.head.out.weight.at(kEosId, 5) = 10.0;
  return m;
}

std::span<const double> row_span(const Tensor<double>& t, std::size_t r) { return t.row(r); }

}  // namespace

TEST(Beam, WideBeamMatchesExhaustiveSearch) {
  for (std::size_t vocab : {4u, 7u}) {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
      const auto m = random_model(gen_config(vocab, 3), seed, 1.5);
      std::mt19937_64 rng(seed + 100);
      const Tensor<double> f = random_tensor(Shape{1, 8}, rng);
      const oracle::Scored want = oracle::best_sequence(oracle::enumerate_sequences(m, oracle::to_vec(f), 3));
      DecodeOptions o;
      o.beam = 1000;
      const Hypothesis got = beam_search_hypothesis(m, row_span(f, 0), o);
      EXPECT_EQ(got.tokens, want.tokens) << "V=" << vocab << " seed " << seed;
      EXPECT_NEAR(got.log_prob, want.log_prob, 1e-10);
    }
  }
}

TEST(Beam, ScoresAgreeWithOracle) {
  const auto m = random_model(gen_config(7, 3), 4, 1.0);
  std::mt19937_64 rng(9);
  const Tensor<double> f = random_tensor(Shape{1, 8}, rng);
  for (const oracle::Scored& s : oracle::enumerate_sequences(m, oracle::to_vec(f), 3)) {
    EXPECT_NEAR(sequence_log_prob(m, row_span(f, 0), s.tokens), s.log_prob, 1e-10);
  }
}

TEST(Beam, WidthOneIsGreedy) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto m = random_model(gen_config(9, 6), seed);
    std::mt19937_64 rng(seed);
    const Tensor<double> f = random_tensor(Shape{1, 8}, rng);
    DecodeOptions o;
    o.beam = 1;
    EXPECT_EQ(beam_search(m, row_span(f, 0), o), greedy_decode(m, row_span(f, 0)));
  }
}

TEST(Beam, WiderBeamNeverScoresBelowGreedyWhenExact) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto m = random_model(gen_config(6, 3), seed, 1.5);
    std::mt19937_64 rng(seed);
    const Tensor<double> f = random_tensor(Shape{1, 8}, rng);
    const auto greedy = greedy_decode(m, row_span(f, 0));
    DecodeOptions o;
    o.beam = 1000;
    const auto wide = beam_search(m, row_span(f, 0), o);
    if (greedy.back() == kEosId) {
      EXPECT_GE(sequence_log_prob(m, row_span(f, 0), wide) + 1e-12,
                sequence_log_prob(m, row_span(f, 0), greedy));
    }
  }
}

TEST(Beam, ThreeWordVocabularyEmitsOnlyEos) {
  INetModel<double> m(gen_config(3, 5));
  const std::vector<double> f(8, 0.3);
  EXPECT_EQ(beam_search(m, std::span<const double>(f)), (std::vector<std::size_t>{kEosId}));
  EXPECT_EQ(greedy_decode(m, std::span<const double>(f)), (std::vector<std::size_t>{kEosId}));
}

TEST(Beam, EngineeredChainIsRecovered) {
  const auto m = chain_model();
  const std::vector<double> f(8, 0.0);
  const std::vector<std::size_t> want{4, 5, kEosId};
  EXPECT_EQ(beam_search(m, std::span<const double>(f)), want);
  EXPECT_EQ(greedy_decode(m, std::span<const double>(f)), want);
  DecodeOptions o;
  o.beam = 5;
  EXPECT_EQ(beam_search(m, std::span<const double>(f), o), want);
}

TEST(Beam, OutputIsWellFormed) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const auto m = random_model(gen_config(8, 5), seed, 2.0);
    std::mt19937_64 rng(seed);
    const Tensor<double> f = random_tensor(Shape{1, 8}, rng);
    for (std::size_t beam : {1u, 3u, 7u}) {
      DecodeOptions o;
      o.beam = beam;
      const auto seq = beam_search(m, row_span(f, 0), o);
      ASSERT_FALSE(seq.empty());
      EXPECT_LE(seq.size(), 5u);
      for (std::size_t i = 0; i < seq.size(); ++i) {
        EXPECT_NE(seq[i], kPadId);
        EXPECT_NE(seq[i], kBosId);
        EXPECT_LT(seq[i], 8u);
        if (seq[i] == kEosId) {
          EXPECT_EQ(i + 1, seq.size());
        }
      }
    }
  }
}

TEST(Beam, BadArguments) {
  const auto m = random_model(gen_config(7, 3), 1);
  const std::vector<double> f(8, 0.1), short_f(5, 0.1);
  DecodeOptions o;
  o.beam = 0;
  EXPECT_THROW(beam_search(m, std::span<const double>(f), o), ConfigError);
  EXPECT_THROW(beam_search(m, std::span<const double>(short_f)), DimensionError);
}

TEST(Generate, DeterministicAndFiveSentences) {
  const auto m = random_model(gen_config(9, 6), 3);
  std::mt19937_64 rng(2);
  const Tensor<double> story = random_tensor(Shape{5, 8}, rng);
  const auto a = generate_story(m, story);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(a, generate_story(m, story));
  EXPECT_EQ(a, generate_story(m, story, MaskPattern::all_visible(5)));
  const auto hidden = generate_story(m, story, MaskPattern::hiding(5, {2}));
  EXPECT_EQ(hidden.size(), 5u);
  for (const auto& s : hidden) EXPECT_FALSE(s.empty());
  EXPECT_EQ(generate_story(m, hide(story, MaskPattern::hiding(5, {2}))), hidden);
}

TEST(Generate, OtherStoryLengthsWarn) {
  const auto m = random_model(gen_config(7, 4), 5);
  std::mt19937_64 rng(2);
  for (std::size_t n : {3u, 5u, 9u}) {
    WarningCapture warnings;
    const auto out = generate_story(m, random_tensor(Shape{n, 8}, rng));
    EXPECT_EQ(out.size(), n);
    EXPECT_EQ(warnings.messages.size(), n == 5 ? 0u : 1u);
  }
  EXPECT_THROW(generate_story(m, random_tensor(Shape{5, 6}, rng)), DimensionError);
}

TEST(Interpolate, InterleavesBlackSlots) {
  std::mt19937_64 rng(8);
  const Tensor<double> story = random_tensor(Shape{5, 8}, rng);
  const Tensor<double> nine = interleave_black_slots(story);
  ASSERT_EQ(nine.shape(), (Shape{9, 8}));
  for (std::size_t i = 0; i < 9; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      if (i % 2 == 1) {
        EXPECT_EQ(nine.at(i, j), 0.0);
      } else {
        EXPECT_EQ(nine.at(i, j), story.at(i / 2, j));
      }
    }
    EXPECT_EQ(is_inserted_slot(i), i % 2 == 1);
  }
  EXPECT_THROW(interleave_black_slots(random_tensor(Shape{4, 8}, rng)), DimensionError);
  EXPECT_THROW(interleave_black_slots(random_tensor(Shape{6, 8}, rng)), DimensionError);
}

TEST(Interpolate, NineSentences) {
  const auto m = random_model(gen_config(7, 4), 6);
  std::mt19937_64 rng(3);
  const Tensor<double> story = random_tensor(Shape{5, 8}, rng);
  const auto out = interpolate_story(m, story);
  EXPECT_EQ(out.size(), 9u);
  EXPECT_EQ(out, interpolate_story(m, story));
  EXPECT_THROW(interpolate_story(m, random_tensor(Shape{3, 8}, rng)), DimensionError);
}
