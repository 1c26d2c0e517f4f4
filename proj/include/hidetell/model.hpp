#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hidetell/autodiff.hpp"
#include "hidetell/config.hpp"
#include "hidetell/data_io.hpp"
#include "hidetell/layers.hpp"
#include "hidetell/log.hpp"

namespace hidetell {

/// Ablated variants: no_blinding never masks (INet-B), no_nonlocal replaces
/// both non-local blocks by the identity (INet-N), no_telling drops the
/// second RNN-NL block (INet-R).
enum class Ablation { full, no_blinding, no_nonlocal, no_telling };

inline Ablation parse_ablation(std::string_view name) {
  if (name == "full") return Ablation::full;
  if (name == "no-blinding" || name == "no_blinding") return Ablation::no_blinding;
  if (name == "no-nonlocal" || name == "no_nonlocal") return Ablation::no_nonlocal;
  if (name == "no-telling" || name == "no_telling") return Ablation::no_telling;
  throw ConfigError("unknown ablation '" + std::string(name) +
                    "' (expected full, no-blinding, no-nonlocal, no-telling)");
}

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_blinding: return "no-blinding";
    case Ablation::no_nonlocal: return "no-nonlocal";
    case Ablation::no_telling: return "no-telling";
  }
  return "full";
}

struct INetConfig {
  std::size_t slots = 5;            // N
  std::size_t feature_dim = 64;     // D
  std::size_t hidden = 32;          // H per GRU direction; 2H must equal D
  std::size_t nonlocal_inner = 0;   // 0 selects D / 2
  std::size_t vocab = 0;            // V
  std::size_t max_len = 20;         // T_max, EOS included
  std::size_t decoder_hidden = 64;
  std::size_t head_width = 64;
  std::size_t embed_dim = 0;        // 0: literal one-hot word input
  Ablation ablation = Ablation::full;
  int alpha = 50;
  int beta = 80;
  double scheduled_sampling = 0.0;

  std::size_t inner() const { return nonlocal_inner ? nonlocal_inner : feature_dim / 2; }
  std::size_t word_dim() const { return embed_dim ? embed_dim : vocab; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be > 0");
    };
    positive(slots, "slots");
    positive(feature_dim, "feature_dim");
    positive(hidden, "hidden");
    positive(vocab, "vocab");
    positive(max_len, "max_len");
    positive(decoder_hidden, "decoder_hidden");
    positive(head_width, "head_width");
    if (2 * hidden != feature_dim) {
      throw ConfigError("reminding connection needs 2*hidden == feature_dim (hidden=" +
                        std::to_string(hidden) + ", feature_dim=" + std::to_string(feature_dim) +
                        ")");
    }
    if (inner() == 0) throw ConfigError("nonlocal_inner resolves to 0");
    if (vocab <= kEosId) throw ConfigError("vocab must include PAD, BOS and EOS (vocab >= 3)");
    if (alpha < 0 || beta < 0 || alpha > beta) {
      throw ConfigError("curriculum needs 0 <= alpha <= beta (alpha=" + std::to_string(alpha) +
                        ", beta=" + std::to_string(beta) + ")");
    }
    if (!(scheduled_sampling >= 0.0 && scheduled_sampling <= 1.0)) {
      throw ConfigError("scheduled_sampling must lie in [0, 1]");
    }
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("model.slots", std::to_string(slots));
    kv.set("model.feature_dim", std::to_string(feature_dim));
    kv.set("model.hidden", std::to_string(hidden));
    kv.set("model.nonlocal_inner", std::to_string(nonlocal_inner));
    kv.set("model.vocab", std::to_string(vocab));
    kv.set("model.max_len", std::to_string(max_len));
    kv.set("model.decoder_hidden", std::to_string(decoder_hidden));
    kv.set("model.head_width", std::to_string(head_width));
    kv.set("model.embed_dim", std::to_string(embed_dim));
    kv.set("model.ablation", ablation_name(ablation));
    kv.set("model.alpha", std::to_string(alpha));
    kv.set("model.beta", std::to_string(beta));
    kv.set("model.scheduled_sampling", format_double(scheduled_sampling));
    return kv;
  }

  static INetConfig from_key_values(const KeyValues& kv) { return from_key_values(kv, INetConfig()); }

  static INetConfig from_key_values(const KeyValues& kv, INetConfig c) {
    c.slots = kv.get_number<std::size_t>("model.slots", c.slots);
    c.feature_dim = kv.get_number<std::size_t>("model.feature_dim", c.feature_dim);
    c.hidden = kv.get_number<std::size_t>("model.hidden", c.hidden);
    c.nonlocal_inner = kv.get_number<std::size_t>("model.nonlocal_inner", c.nonlocal_inner);
    c.vocab = kv.get_number<std::size_t>("model.vocab", c.vocab);
    c.max_len = kv.get_number<std::size_t>("model.max_len", c.max_len);
    c.decoder_hidden = kv.get_number<std::size_t>("model.decoder_hidden", c.decoder_hidden);
    c.head_width = kv.get_number<std::size_t>("model.head_width", c.head_width);
    c.embed_dim = kv.get_number<std::size_t>("model.embed_dim", c.embed_dim);
    if (kv.has("model.ablation")) c.ablation = parse_ablation(kv.get("model.ablation", "full"));
    c.alpha = kv.get_number<int>("model.alpha", c.alpha);
    c.beta = kv.get_number<int>("model.beta", c.beta);
    c.scheduled_sampling = kv.get_number<double>("model.scheduled_sampling", c.scheduled_sampling);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Hiding step.

/// Visibility per slot: 1 visible, 0 hidden.
struct MaskPattern {
  std::vector<std::uint8_t> visible;

  static MaskPattern all_visible(std::size_t n) { return MaskPattern{std::vector<std::uint8_t>(n, 1)}; }

  static MaskPattern hiding(std::size_t n, std::initializer_list<std::size_t> hidden) {
    MaskPattern m = all_visible(n);
    for (std::size_t i : hidden) m.visible.at(i) = 0;
    return m;
  }

  std::size_t size() const { return visible.size(); }
  std::size_t hidden_count() const {
    return static_cast<std::size_t>(std::count(visible.begin(), visible.end(), std::uint8_t{0}));
  }
  bool is_hidden(std::size_t i) const { return visible.at(i) == 0; }

  friend bool operator==(const MaskPattern&, const MaskPattern&) = default;
};

/// Number of slots to hide at `epoch`: 0 before alpha, 1 until beta, then 2.
inline int curriculum_level(int epoch, int alpha, int beta) {
  if (epoch < 0) throw ConfigError("negative epoch " + std::to_string(epoch));
  if (alpha > beta) throw ConfigError("curriculum requires alpha <= beta");
  if (epoch < alpha) return 0;
  if (epoch < beta) return 1;
  return 2;
}

/// Hides `b_total` distinct slots chosen uniformly without replacement. Draws
/// nothing from `rng` when b_total is 0.
inline MaskPattern sample_mask(std::size_t n_slots, std::size_t b_total, std::mt19937_64& rng) {
  if (b_total > n_slots) {
    throw ConfigError("cannot hide " + std::to_string(b_total) + " of " +
                      std::to_string(n_slots) + " slots");
  }
  MaskPattern m = MaskPattern::all_visible(n_slots);
  if (b_total == 0) return m;
  std::vector<std::size_t> idx(n_slots);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first b_total entries are a uniform sample.
  for (std::size_t i = 0; i < b_total; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_slots - 1);
    std::swap(idx[i], idx[pick(rng)]);
    m.visible[idx[i]] = 0;
  }
  return m;
}

/// Row i of the result is F_i when visible and exactly +0 when hidden.
template <typename T>
Tensor<T> hide(const Tensor<T>& features, const MaskPattern& mask) {
  if (features.rank() != 2 || features.dim(0) != mask.size()) {
    throw DimensionError("hide: mask of length " + std::to_string(mask.size()) +
                         " for features " + shape_str(features.shape()));
  }
  Tensor<T> out = features;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.is_hidden(i)) std::fill(out.row(i).begin(), out.row(i).end(), T{0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network.

template <typename T>
struct INetModel {
  INetConfig config;
  BiGRU<T> imagine_rnn;
  NonLocalBlock<T> imagine_nl;
  BiGRU<T> tell_rnn;
  NonLocalBlock<T> tell_nl;
  GRUCell<T> decoder;
  OutputHead<T> head;
  Tensor<T> embedding;  // V × E, only when embed_dim > 0

  INetModel() = default;

  /// Builds zero-valued parameters of the configured shapes.
  explicit INetModel(const INetConfig& cfg) : config(cfg) {
    cfg.validate();
    const std::size_t d = cfg.feature_dim;
    imagine_rnn = BiGRU<T>(d, cfg.hidden);
    imagine_nl = NonLocalBlock<T>(2 * cfg.hidden, cfg.inner());
    tell_rnn = BiGRU<T>(d, cfg.hidden);
    tell_nl = NonLocalBlock<T>(2 * cfg.hidden, cfg.inner());
    decoder = GRUCell<T>(d + cfg.word_dim(), cfg.decoder_hidden);
    head = OutputHead<T>(cfg.decoder_hidden, cfg.head_width, cfg.vocab);
    if (cfg.embed_dim) embedding = Tensor<T>(Shape{cfg.vocab, cfg.embed_dim});
  }

  /// Fan-in-scaled random initialization; biases zero.
  void init(std::mt19937_64& rng) {
    imagine_rnn.init(rng);
    imagine_nl.init(rng);
    tell_rnn.init(rng);
    tell_nl.init(rng);
    decoder.init(rng);
    head.init(rng);
    if (!embedding.empty()) init_lecun_normal(embedding, rng);
  }

  /// Calls f(name, tensor) for every parameter in a fixed order.
  template <typename F>
  void visit(F&& f) {
    imagine_rnn.visit("imagine.rnn", f);
    imagine_nl.visit("imagine.nl", f);
    tell_rnn.visit("tell.rnn", f);
    tell_nl.visit("tell.nl", f);
    decoder.visit("decoder", f);
    head.visit("head", f);
    if (!embedding.empty()) f(std::string("embedding"), embedding);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<INetModel*>(this)->visit(
        [&](const std::string& name, Tensor<T>& t) { f(name, static_cast<const Tensor<T>&>(t)); });
  }

  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    visit([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  template <typename U>
  INetModel<U> cast() const {
    INetModel<U> out(config);
    auto dst = out.parameters();
    std::size_t k = 0;
    visit([&](const std::string&, const Tensor<T>& t) { *dst[k++].second = t.template cast<U>(); });
    return out;
  }
};

/// Same-architecture models with a parameter-wise initialization seed.
template <typename T>
INetModel<T> init_parameters(const INetConfig& cfg, std::mt19937_64& rng) {
  INetModel<T> m(cfg);
  m.init(rng);
  return m;
}

/// Optional record of what a forward pass did.
struct ForwardTrace {
  std::vector<MaskPattern> masks;
  int b_total = 0;
};

/// Slot-major stack of B stories into one (N·B)×D matrix whose row t·B + b is
/// slot t of story b. Every story must have the same slot count.
template <typename T>
Tensor<T> stack_time_major(std::span<const Tensor<T>> stories) {
  if (stories.empty()) throw DimensionError("empty batch");
  const std::size_t n = stories[0].dim(0), d = stories[0].dim(1);
  const std::size_t b = stories.size();
  Tensor<T> out(Shape{n * b, d});
  for (std::size_t s = 0; s < b; ++s) {
    if (stories[s].rank() != 2 || stories[s].dim(0) != n || stories[s].dim(1) != d) {
      throw DimensionError("story " + std::to_string(s) + " has shape " +
                           shape_str(stories[s].shape()) + ", batch expects " +
                           shape_str(Shape{n, d}));
    }
    for (std::size_t t = 0; t < n; ++t) {
      std::copy_n(stories[s].row(t).begin(), d, out.row(t * b + s).begin());
    }
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> story_groups(std::size_t rows, std::size_t batch) {
  std::vector<std::size_t> g(rows);
  for (std::size_t r = 0; r < rows; ++r) g[r] = r % batch;
  return g;
}

// BiGRU → SELU → non-local (or identity) over a slot-major stack.
template <typename T>
Var<T> rnn_nl_block(const BiGRU<T>& rnn, const NonLocalBlock<T>& nl, bool use_nonlocal,
                    Tape<T>& tape, Var<T> x, std::size_t batch) {
  const std::size_t rows = x.rows();
  if (rows % batch != 0) throw DimensionError("rows not divisible by batch size");
  const std::size_t slots = rows / batch;
  std::vector<Var<T>> steps;
  steps.reserve(slots);
  for (std::size_t t = 0; t < slots; ++t) steps.push_back(slice(x, 0, t * batch, (t + 1) * batch));
  Var<T> h = selu(concat(bigru_forward(rnn, tape, std::span<const Var<T>>(steps)), 0));
  if (!use_nonlocal) return h;
  const std::vector<std::size_t> groups = story_groups(rows, batch);
  return nonlocal_forward(nl, tape, h, std::span<const std::size_t>(groups));
}

}  // namespace detail

/// Imagining step over a slot-major stack of blinded features:
/// F_reminded = F_blind + NL(SELU(BiGRU(F_blind))).
template <typename T>
Var<T> imagine(const INetModel<T>& model, Tape<T>& tape, Var<T> blind, std::size_t batch = 1) {
  if (blind.value().rank() != 2 || blind.cols() != model.config.feature_dim) {
    throw DimensionError("imagine: expected width " + std::to_string(model.config.feature_dim) +
                         ", got " + shape_str(blind.shape()));
  }
  const bool nl = model.config.ablation != Ablation::no_nonlocal;
  Var<T> z = detail::rnn_nl_block(model.imagine_rnn, model.imagine_nl, nl, tape, blind, batch);
  return add(blind, z);
}

/// Telling step: the second RNN-NL block with its own parameters; identity
/// under the no_telling ablation.
template <typename T>
Var<T> tell(const INetModel<T>& model, Tape<T>& tape, Var<T> reminded, std::size_t batch = 1) {
  if (model.config.ablation == Ablation::no_telling) return reminded;
  const bool nl = model.config.ablation != Ablation::no_nonlocal;
  return detail::rnn_nl_block(model.tell_rnn, model.tell_nl, nl, tape, reminded, batch);
}

/// hide → imagine → tell for a batch of already-masked stories; returns the
/// slot-major f_tell stack.
template <typename T>
Var<T> encode_stories(const INetModel<T>& model, Tape<T>& tape,
                      std::span<const Tensor<T>> blinded) {
  Var<T> x = tape.constant(stack_time_major(blinded));
  return tell(model, tape, imagine(model, tape, x, blinded.size()), blinded.size());
}

/// Single-story convenience: returns f_tell as an N×D tensor.
template <typename T>
Tensor<T> encode_story(const INetModel<T>& model, const Tensor<T>& blinded) {
  Tape<T> tape(false);
  return encode_stories(model, tape, std::span<const Tensor<T>>(&blinded, 1)).value();
}

template <typename T>
Tensor<T> one_hot_rows(std::span<const std::size_t> ids, std::size_t vocab) {
  Tensor<T> out(Shape{ids.size(), vocab});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= vocab) {
      throw DimensionError("token id " + std::to_string(ids[r]) + " >= vocabulary " +
                           std::to_string(vocab));
    }
    out.at(r, ids[r]) = T{1};
  }
  return out;
}

/// One decoder step over R rows: h = GRU(h_prev, [f_tell ; v_prev]),
/// logits = head(h). `prev_tokens[r]` is the previous word (BOS at start).
template <typename T>
std::pair<Var<T>, Var<T>> decode_step(const INetModel<T>& model, Tape<T>& tape, Var<T> h_prev,
                                      Var<T> f_tell, std::span<const std::size_t> prev_tokens) {
  if (prev_tokens.size() != f_tell.rows()) {
    throw DimensionError("decode_step: " + std::to_string(prev_tokens.size()) +
                         " previous tokens for " + std::to_string(f_tell.rows()) + " rows");
  }
  Var<T> word = tape.constant(one_hot_rows<T>(prev_tokens, model.config.vocab));
  if (!model.embedding.empty()) word = matmul(word, tape.parameter(model.embedding));
  Var<T> h = gru_step(model.decoder, tape, h_prev, concat({f_tell, word}, 1));
  return {h, output_head(model.head, tape, h)};
}

/// Form taking explicit one-hot rows; rejects anything that is not one-hot.
template <typename T>
std::pair<Var<T>, Var<T>> decode_step(const INetModel<T>& model, Tape<T>& tape, Var<T> h_prev,
                                      Var<T> f_tell, const Tensor<T>& v_prev) {
  if (v_prev.rank() != 2 || v_prev.dim(1) != model.config.vocab) {
    throw DimensionError("decode_step: v_prev must be R×V, got " + shape_str(v_prev.shape()));
  }
  std::vector<std::size_t> ids(v_prev.dim(0));
  for (std::size_t r = 0; r < v_prev.dim(0); ++r) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < v_prev.dim(1); ++j) {
      const T v = v_prev.at(r, j);
      if (v == T{1}) {
        ++ones;
        ids[r] = j;
      } else if (v != T{0}) {
        ones = 2;
      }
    }
    if (ones != 1) throw DimensionError("decode_step: v_prev row " + std::to_string(r) + " is not one-hot");
  }
  return decode_step(model, tape, h_prev, f_tell, std::span<const std::size_t>(ids));
}

/// Teacher-forced loss Σ_r Σ_t weight[r]·CE over the decoder rows.
/// `targets[r]` ends with EOS; `row_weight[r]` scales every token of row r.
template <typename T>
Var<T> teacher_forced_loss(const INetModel<T>& model, Tape<T>& tape, Var<T> f_tell,
                           const std::vector<std::vector<std::size_t>>& targets,
                           std::span<const T> row_weight, std::mt19937_64* rng = nullptr) {
  const std::size_t rows = f_tell.rows();
  if (targets.size() != rows || row_weight.size() != rows) {
    throw DimensionError("teacher_forced_loss: row count mismatch");
  }
  std::size_t steps = 0;
  for (const auto& t : targets) steps = std::max(steps, t.size());
  if (steps == 0) throw DimensionError("teacher_forced_loss: all target sequences are empty");

  const double ss = model.config.scheduled_sampling;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Var<T> h = tape.constant(Tensor<T>(Shape{rows, model.config.decoder_hidden}));
  std::vector<std::size_t> prev(rows, kBosId);
  std::vector<Var<T>> all_logits;
  std::vector<std::size_t> flat_targets;
  std::vector<T> weights;
  for (std::size_t s = 0; s < steps; ++s) {
    auto [h_next, logits] = decode_step(model, tape, h, f_tell, std::span<const std::size_t>(prev));
    h = h_next;
    all_logits.push_back(logits);
    for (std::size_t r = 0; r < rows; ++r) {
      const bool live = s < targets[r].size();
      flat_targets.push_back(live ? targets[r][s] : kPadId);
      weights.push_back(live ? row_weight[r] : T{0});
      std::size_t next = live ? targets[r][s] : kPadId;
      if (live && ss > 0.0 && rng != nullptr && coin(*rng) < ss) {
        auto row = logits.value().row(r);
        next = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      }
      prev[r] = next;
    }
  }
  return weighted_cross_entropy(concat(all_logits, 0), std::span<const std::size_t>(flat_targets),
                                std::span<const T>(weights));
}

/// One training item: features N×D and N reference token sequences (each
/// ending in EOS).
template <typename T>
struct TrainingStory {
  Tensor<T> features;
  std::vector<std::vector<std::size_t>> targets;
};

/// Clips a target sequence to max_len tokens, keeping a terminal EOS.
inline std::vector<std::size_t> clip_target(std::vector<std::size_t> ids, std::size_t max_len) {
  if (ids.size() <= max_len) return ids;
  warn("reference sentence of " + std::to_string(ids.size()) + " tokens truncated to " +
       std::to_string(max_len));
  ids.resize(max_len);
  ids.back() = kEosId;
  return ids;
}

/// Cross-entropy over all N sentences of every story (hidden slots
/// included), averaged over each story's tokens and then over the batch.
/// Masks come from `b_total` and `rng` unless the model is no_blinding.
template <typename T>
Var<T> forward_loss(const INetModel<T>& model, Tape<T>& tape,
                    std::span<const TrainingStory<T>> batch, int b_total, std::mt19937_64& rng,
                    ForwardTrace* trace = nullptr) {
  if (batch.empty()) throw DimensionError("forward_loss: empty batch");
  const std::size_t n = batch[0].features.dim(0);
  const std::size_t b = batch.size();
  const bool blinding = model.config.ablation != Ablation::no_blinding;
  if (trace) {
    trace->b_total = blinding ? b_total : 0;
    trace->masks.clear();
  }

  std::vector<Tensor<T>> blinded;
  blinded.reserve(b);
  for (const TrainingStory<T>& story : batch) {
    if (story.targets.size() != story.features.dim(0) || story.features.dim(0) != n) {
      throw DimensionError("forward_loss: every story needs " + std::to_string(n) +
                           " slots and as many sentences");
    }
    MaskPattern mask = blinding ? sample_mask(n, static_cast<std::size_t>(b_total), rng)
                                : MaskPattern::all_visible(n);
    blinded.push_back(hide(story.features, mask));
    if (trace) trace->masks.push_back(std::move(mask));
  }
  Var<T> f_tell = encode_stories(model, tape, std::span<const Tensor<T>>(blinded));

  std::vector<std::vector<std::size_t>> targets(n * b);
  std::vector<T> row_weight(n * b);
  for (std::size_t s = 0; s < b; ++s) {
    std::size_t tokens = 0;
    for (std::size_t t = 0; t < n; ++t) {
      targets[t * b + s] = clip_target(batch[s].targets[t], model.config.max_len);
      tokens += targets[t * b + s].size();
    }
    if (tokens == 0) throw DimensionError("forward_loss: story with no target tokens");
    const T w = T{1} / (static_cast<T>(tokens) * static_cast<T>(b));
    for (std::size_t t = 0; t < n; ++t) row_weight[t * b + s] = w;
  }
  return teacher_forced_loss(model, tape, f_tell, targets, std::span<const T>(row_weight), &rng);
}

/// Loss at a training epoch: b_total follows the curriculum.
template <typename T>
Var<T> forward_loss_at_epoch(const INetModel<T>& model, Tape<T>& tape,
                             std::span<const TrainingStory<T>> batch, int epoch,
                             std::mt19937_64& rng, ForwardTrace* trace = nullptr) {
  const int level = curriculum_level(epoch, model.config.alpha, model.config.beta);
  return forward_loss(model, tape, batch, level, rng, trace);
}

}  // namespace hidetell
