// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <cstring>

#include "test_support.hpp"
#include "oracles.hpp"

using namespace hidetell;
using hidetell::testing::random_tensor;
using hidetell::testing::randomize;
using T2 = Tensor<double>;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

__attribute__((format(printf, 1, 2))) std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1: every op, layer and the full loss at 50 random points each.
Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  for (const auto& rep : gradsuite::run_suite(50, 20240101)) {
    ++cases;
    if (rep.worst.max_relative_error >= worst) {
      worst = rep.worst.max_relative_error;
      worst_name = rep.name;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < gradsuite::kGradTolerance && secs < 120.0,
          fmt("%zu ops/layers x 50 points, worst relative error %.3g (%s), %.1f s", cases, worst,
              worst_name.c_str(), secs)};
}

// 2: the step functions written out as a table of epoch ranges.
Outcome schedules() {
  struct Row {
    int from, to, level;
    double lr;
  };
  const Row table[] = {{0, 49, 0, 4e-4}, {50, 79, 1, 2e-4}, {80, 200, 2, 1e-4}};
  std::size_t checked = 0;
  for (const Row& r : table) {
    for (int e = r.from; e <= r.to; ++e, ++checked) {
      if (curriculum_level(e, 50, 80) != r.level || lr_schedule(e, 4e-4, 50, 80) != r.lr) {
        return {false, fmt("mismatch at epoch %d", e)};
      }
    }
  }
  return {checked == 201, fmt("epochs 0..200 exact for (alpha, beta) = (50, 80)")};
}

// 3: hide is bitwise, sampler uniform without replacement.
Outcome masking() {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const T2 x = random_tensor({5, 8}, rng);
    if (hide(x, MaskPattern::all_visible(5)) != x) return {false, "all-ones mask changed the input"};
    const MaskPattern m = sample_mask(5, static_cast<std::size_t>(i % 3), rng);
    const T2 h = hide(x, m);
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t c = 0; c < 8; ++c) {
        const double want = m.is_hidden(r) ? 0.0 : x.at(r, c);
        if (std::memcmp(&h.at(r, c), &want, sizeof(double)) != 0) return {false, "hide is not bitwise"};
      }
    }
  }
  std::array<std::size_t, 5> hits{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const MaskPattern m = sample_mask(5, 1, rng);
    if (m.hidden_count() != 1) return {false, "b_total=1 hid a different number of slots"};
    for (std::size_t s = 0; s < 5; ++s) hits[s] += m.is_hidden(s);
  }
  for (int i = 0; i < 2000; ++i) {
    const MaskPattern m = sample_mask(5, 2, rng);
    if (m.hidden_count() != 2) return {false, "b_total=2 repeated a slot"};
  }
  double lo = 1, hi = 0;
  for (std::size_t h : hits) {
    lo = std::min(lo, h / double(draws));
    hi = std::max(hi, h / double(draws));
  }
  return {lo >= 0.18 && hi <= 0.22, fmt("per-slot hide frequency in [%.4f, %.4f]", lo, hi)};
}

// 4: non-local block against the straight-line oracle.
Outcome nonlocal() {
  std::mt19937_64 rng(4);
  double worst = 0.0, worst_row = 0.0;
  for (int i = 0; i < 100; ++i) {
    NonLocalBlock<double> block(8, 4);
    block.init(rng);
    for (double& v : block.z.weight.data()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
    const T2 x = random_tensor({5, 8}, rng);
    Tape<double> t(false);
    NonLocalTrace<double> trace;
    const T2 got = nonlocal_forward(block, t, t.constant(x), {}, &trace).value();
    const oracle::Mat want = oracle::nonlocal(block, oracle::to_mat(x));
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (double v : trace.correlation.row(r)) s += v;
      worst_row = std::max(worst_row, std::abs(s - 1.0));
      for (std::size_t c = 0; c < 8; ++c) worst = std::max(worst, std::abs(got.at(r, c) - want[r][c]));
    }
  }
  NonLocalBlock<double> block(8, 4);
  block.init(rng);
  block.z.weight.fill(0.0);
  const T2 x = random_tensor({5, 8}, rng);
  Tape<double> t(false);
  const bool identity = nonlocal_forward(block, t, t.constant(x)).value() == x;
  return {worst < 1e-10 && worst_row < 1e-9 && identity,
          fmt("max |diff| %.3g, max |row sum - 1| %.3g, W_z=0 identity %s", worst, worst_row,
              identity ? "exact" : "violated")};
}

INetConfig beam_config(std::size_t vocab, std::size_t max_len) {
  INetConfig c;
  c.slots = 3;
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

// 5: beam search against exhaustive enumeration, and width 1 against greedy.
Outcome beam() {
  std::mt19937_64 rng(5);
  int exact = 0, greedy_same = 0;
  for (int i = 0; i < 100; ++i) {
    INetModel<double> m(beam_config(4, 3));
    randomize(m, rng, 1.5);
    const T2 f = random_tensor({1, 8}, rng);
    const auto want = oracle::best_sequence(oracle::enumerate_sequences(m, oracle::to_vec(f), 3));
    DecodeOptions o;
    o.beam = 64;  // V^T_max
    exact += beam_search(m, f.row(0), o) == want.tokens;
  }
  for (int i = 0; i < 100; ++i) {
    INetModel<double> m(beam_config(7, 6));
    randomize(m, rng, 1.0);
    const T2 f = random_tensor({1, 8}, rng);
    DecodeOptions o;
    o.beam = 1;
    greedy_same += beam_search(m, f.row(0), o) == greedy_decode(m, f.row(0));
  }
  return {exact == 100 && greedy_same == 100,
          fmt("exhaustive match %d/100 (V=4, T_max=3), beam=1 == greedy %d/100", exact, greedy_same)};
}

// 6: hand-derived metric fixtures.
Outcome metrics() {
  auto s = [](const char* x) { return std::vector<Tokens>{tokenize(x)}; };
  const double id = bleu(s("the cat sat on the mat"), s("the cat sat on the mat")).bleu[3];
  const BleuResult clip = bleu(s("the the the the the the the"), s("the cat is on the mat"));
  const BleuResult bp = bleu(s("a b"), s("a b c d"));
  const bool bleu_ok = std::abs(id - 1.0) < 1e-9 && std::abs(clip.precisions[0] - 2.0 / 7.0) < 1e-9 &&
                       std::abs(bp.brevity_penalty - std::exp(-1.0)) < 1e-9;
  // LCS("a b x y", "a y b") = 2 by hand: P = 1/2, R = 2/3.
  const double p = 0.5, r = 2.0 / 3.0, b2 = 1.2 * 1.2;
  const bool rouge_ok = lcs_length(tokenize("a b x y"), tokenize("a y b")) == 2 &&
                        rouge_l_pair(tokenize("a b x y"), tokenize("a y b")) == (1 + b2) * p * r / (r + b2 * p) &&
                        rouge_l_pair(tokenize("a b c"), tokenize("a b c")) == 1.0 &&
                        rouge_l_pair(tokenize("a b"), tokenize("c d")) == 0.0;
  return {bleu_ok && rouge_ok, fmt("BLEU identity %.9f, p1 %.9f, BP %.9f; ROUGE-L fixtures %s", id,
                                   clip.precisions[0], bp.brevity_penalty, rouge_ok ? "exact" : "wrong")};
}

// Shared by 7 and 8: the synthetic corpus and both trained models.
struct Experiment {
  Vocabulary vocab;
  std::vector<SyntheticStory> test;
  std::vector<EvalStory<float>> eval;
  INetModel<float> full, no_blinding;
  double seconds = 0.0;
};

constexpr int kEpochs = 60;  // the (50, 80) curriculum of a 100-epoch run, scaled by 0.6
constexpr int kAlpha = 30;
constexpr int kBeta = 48;

const Experiment& experiment() {
  static std::optional<Experiment> ex;
  if (ex) return *ex;
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec spec;
  spec.topics = 8;
  spec.slots = 5;
  spec.feature_dim = 16;
  auto splits = synth_generate(spec, {500, 100});
  Experiment e;
  std::vector<std::string> all;
  for (const auto& s : splits[0]) all.insert(all.end(), s.sentences.begin(), s.sentences.end());
  e.vocab = Vocabulary::build(all);
  std::vector<TrainingStory<float>> train_set;
  for (const auto& s : splits[0]) train_set.push_back(to_training_story<float>(s.features, s.sentences, e.vocab));
  e.test = splits[1];
  for (const auto& s : e.test) e.eval.push_back({s.features.cast<float>(), s.sentences});

  auto run = [&](Ablation a) {
    INetConfig c;
    c.slots = 5;
    c.feature_dim = 16;
    c.hidden = 8;
    c.vocab = e.vocab.size();
    c.max_len = 8;
    c.decoder_hidden = 32;
    c.head_width = 32;
    c.alpha = kAlpha;
    c.beta = kBeta;
    c.ablation = a;
    TrainConfig tc;
    tc.alpha = kAlpha;
    tc.beta = kBeta;
    tc.epochs = kEpochs;
    tc.batch_size = 32;
    tc.seed = 1;
    tc.precision = Precision::f32;
    auto st = make_trainer_state<float>(c, tc.seed);
    train(st, std::span<const TrainingStory<float>>(train_set), tc);
    return st.model;
  };
  e.full = run(Ablation::full);
  e.no_blinding = run(Ablation::no_blinding);
  e.seconds = seconds_since(t0);
  ex = std::move(e);
  return *ex;
}

EvalOptions hidden_slot_eval() {
  EvalOptions o;
  o.hide_one = true;
  o.seed = 1;
  o.template_words = {"the", "was"};
  return o;
}

// 7: hide-and-tell recovers hidden slots; no masking does not.
Outcome synthetic() {
  const Experiment& e = experiment();
  const double full = *evaluate(e.full, e.vocab, e.eval, hidden_slot_eval()).report.masked_slot_accuracy;
  const double base = *evaluate(e.no_blinding, e.vocab, e.eval, hidden_slot_eval()).report.masked_slot_accuracy;
  return {full >= 0.8 && full > base && e.seconds < 900.0,
          fmt("masked_slot_accuracy full %.4f vs INet-B %.4f (V=%zu, %d epochs, %.0f s)", full, base,
              e.vocab.size(), kEpochs, e.seconds)};
}

// 8: interpolation emits 9 sentences around black slots and stays on topic.
Outcome interpolation() {
  std::mt19937_64 rng(8);
  INetModel<double> m(beam_config(9, 5));
  m.config.slots = 5;
  randomize(m, rng, 0.8);
  for (int i = 0; i < 50; ++i) {
    const T2 x = random_tensor({5, 8}, rng);
    const T2 nine = interleave_black_slots(x);
    for (std::size_t r = 0; r < 9; ++r) {
      for (std::size_t c = 0; c < 8; ++c) {
        const double want = r % 2 ? 0.0 : x.at(r / 2, c);
        if (nine.at(r, c) != want) return {false, "black slots misplaced"};
      }
    }
    if (interpolate_story(m, x).size() != 9) return {false, "interpolation did not emit 9 sentences"};
  }
  const Experiment& e = experiment();
  std::vector<std::vector<Tokens>> gen, gold;
  for (const auto& s : e.eval) {
    std::vector<Tokens> story;
    for (const auto& ids : interpolate_story(e.full, s.features)) story.push_back(tokenize(e.vocab.decode(ids)));
    gen.push_back(std::move(story));
    std::vector<Tokens> g;
    for (const auto& x : s.sentences) g.push_back(tokenize(x));
    gold.push_back(std::move(g));
  }
  const double c = interpolation_consistency(gen, gold, {"the", "was"});
  return {c > 0.125, fmt("9 sentences, black slots inserted at 2,4,6,8 of 9; inserted-slot consistency %.4f", c)};
}

// 9: bitwise determinism and checkpoint resume.
Outcome persistence() {
  SyntheticSpec spec;
  spec.slots = 5;
  spec.feature_dim = 8;
  spec.topics = 6;
  Vocabulary vocab;
  const auto corpus = hidetell::testing::synthetic_training_set<double>(spec, 24, vocab);
  INetConfig c;
  c.feature_dim = 8;
  c.hidden = 4;
  c.vocab = vocab.size();
  c.max_len = 8;
  c.decoder_hidden = 8;
  c.head_width = 8;
  c.alpha = 2;
  c.beta = 4;
  TrainConfig tc;
  tc.alpha = 2;
  tc.beta = 4;
  tc.epochs = 6;
  tc.batch_size = 8;
  tc.precision = Precision::f64;
  const std::span<const TrainingStory<double>> data(corpus);

  auto a = make_trainer_state<double>(c, 77), b = make_trainer_state<double>(c, 77);
  const auto ha = train(a, data, tc), hb = train(b, data, tc);
  const bool same = ha == hb;
  const CheckpointRecord<double> end_a{c, tc, a};

  TrainConfig first = tc;
  first.epochs = 3;
  auto r = make_trainer_state<double>(c, 77);
  auto hr = train(r, data, first);
  const auto loaded = decode_checkpoint<double>(encode_checkpoint(CheckpointRecord<double>{c, first, r}));
  auto resumed = loaded.state;
  const auto tail = train(resumed, data, tc);
  hr.insert(hr.end(), tail.begin(), tail.end());
  const bool resume_ok = hr == ha && encode_checkpoint(CheckpointRecord<double>{c, tc, resumed}) == encode_checkpoint(end_a);

  std::vector<TrainingStory<float>> corpus32;
  for (const auto& s : corpus) corpus32.push_back({s.features.cast<float>(), s.targets});
  TrainConfig tf = tc;
  tf.precision = Precision::f32;
  auto fa = make_trainer_state<float>(c, 5), fb = make_trainer_state<float>(c, 5);
  const bool same32 = train(fa, std::span<const TrainingStory<float>>(corpus32), tf) ==
                      train(fb, std::span<const TrainingStory<float>>(corpus32), tf);
  return {same && same32 && resume_ok,
          fmt("repeat runs identical (f64 %s, f32 %s); resume at epoch 3 %s", same ? "yes" : "no",
              same32 ? "yes" : "no", resume_ok ? "bitwise equal" : "differs")};
}

// 10: ablations differ only where they should.
Outcome ablations() {
  INetConfig c = hidetell::testing::micro_config();
  std::mt19937_64 rng(10);
  INetModel<double> full = init_parameters<double>(c, rng);
  randomize(full, rng, 0.5);
  std::vector<TrainingStory<double>> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(hidetell::gradsuite::detail::micro_story(rng, c));
  const std::span<const TrainingStory<double>> data(batch);
  auto loss = [&](const INetModel<double>& m, int b_total, std::size_t* marks = nullptr) {
    Tape<double> t(false);
    std::mt19937_64 r(3);
    const double v = forward_loss(m, t, data, b_total, r).value().item();
    if (marks) *marks = t.marks("nonlocal");
    return v;
  };
  INetModel<double> b = full, n = full, r = full;
  b.config.ablation = Ablation::no_blinding;
  n.config.ablation = Ablation::no_nonlocal;
  r.config.ablation = Ablation::no_telling;
  const bool b_ok = loss(full, 0) == loss(b, 0) && loss(b, 2) == loss(b, 0);
  std::size_t n_marks = 99, full_marks = 0;
  loss(n, 1, &n_marks);
  loss(full, 1, &full_marks);
  Tape<double> t(false);
  const Var<double> x = t.constant(random_tensor({3, 8}, rng));
  const Var<double> told = tell(r, t, x);
  const bool r_ok = told.id == x.id && told.value() == x.value();
  return {b_ok && n_marks == 0 && full_marks > 0 && r_ok,
          fmt("INet-B loss == full at b_total=0 %s; INet-N non-local calls %zu (full %zu); INet-R tell identity %s",
              b_ok ? "yes" : "no", n_marks, full_marks, r_ok ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"gradient suite", gradients},       {"curriculum and lr schedule", schedules},
      {"masking", masking},                {"non-local correctness", nonlocal},
      {"beam oracle", beam},               {"metric fixtures", metrics},
      {"synthetic hide-and-tell", synthetic}, {"interpolation contract", interpolation},
      {"determinism and persistence", persistence}, {"ablation structure", ablations},
  };
  int failed = 0, k = 0;
  for (const auto& [name, run] : criteria) {
    ++k;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", k, name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
