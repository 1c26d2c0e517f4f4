#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hidetell/autodiff.hpp"
#include "hidetell/config.hpp"
#include "hidetell/model.hpp"

namespace hidetell {

enum class Precision { f32, f64 };

inline Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

inline std::string precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::f32 : Precision::f64;
}

struct TrainConfig {
  double base_lr = 4e-4;
  int alpha = 50;
  int beta = 80;
  std::size_t batch_size = 32;
  int epochs = 100;
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  int checkpoint_every = 0;  // epochs; 0 disables
  std::string checkpoint_path;
  double clip_norm = 0.0;    // global gradient-norm clip; 0 disables

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
    if (alpha < 0 || alpha > beta) throw ConfigError("curriculum requires 0 <= alpha <= beta");
    if (batch_size == 0) throw ConfigError("batch_size must be > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("train.base_lr", format_double(base_lr));
    kv.set("train.alpha", std::to_string(alpha));
    kv.set("train.beta", std::to_string(beta));
    kv.set("train.batch_size", std::to_string(batch_size));
    kv.set("train.epochs", std::to_string(epochs));
    kv.set("train.seed", std::to_string(seed));
    kv.set("train.precision", precision_name(precision));
    kv.set("train.checkpoint_every", std::to_string(checkpoint_every));
    kv.set("train.checkpoint_path", checkpoint_path);
    kv.set("train.clip_norm", format_double(clip_norm));
    return kv;
  }

  static TrainConfig from_key_values(const KeyValues& kv) { return from_key_values(kv, TrainConfig()); }

  static TrainConfig from_key_values(const KeyValues& kv, TrainConfig c) {
    c.base_lr = kv.get_number<double>("train.base_lr", c.base_lr);
    c.alpha = kv.get_number<int>("train.alpha", c.alpha);
    c.beta = kv.get_number<int>("train.beta", c.beta);
    c.batch_size = kv.get_number<std::size_t>("train.batch_size", c.batch_size);
    c.epochs = kv.get_number<int>("train.epochs", c.epochs);
    c.seed = kv.get_number<std::uint64_t>("train.seed", c.seed);
    if (kv.has("train.precision")) c.precision = parse_precision(kv.get("train.precision", "f32"));
    c.checkpoint_every = kv.get_number<int>("train.checkpoint_every", c.checkpoint_every);
    c.checkpoint_path = kv.get("train.checkpoint_path", c.checkpoint_path);
    c.clip_norm = kv.get_number<double>("train.clip_norm", c.clip_norm);
    return c;
  }
};

/// Features plus encoded references (each ending in EOS) for one story.
template <typename T>
TrainingStory<T> to_training_story(const FeatureStream& features,
                                   const std::vector<std::string>& sentences,
                                   const Vocabulary& vocab) {
  if (features.rank() != 2 || features.dim(0) != sentences.size()) {
    throw DimensionError("story has " + std::to_string(sentences.size()) + " sentences for features " +
                         shape_str(features.shape()));
  }
  TrainingStory<T> story{features.template cast<T>(), {}};
  for (const std::string& s : sentences) story.targets.push_back(vocab.encode(s));
  return story;
}

/// Base rate until alpha, halved at alpha and again at beta.
inline double lr_schedule(int epoch, double base_lr, int alpha, int beta) {
  if (epoch < 0) throw ConfigError("negative epoch " + std::to_string(epoch));
  if (epoch < alpha) return base_lr;
  if (epoch < beta) return base_lr / 2.0;
  return base_lr / 4.0;
}

inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  return lr_schedule(epoch, cfg.base_lr, cfg.alpha, cfg.beta);
}

/// Adam moments keyed by parameter name.
template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  friend bool operator==(const AdamState& a, const AdamState& b) {
    return a.step == b.step && a.m == b.m && a.v == b.v && a.beta1 == b.beta1 &&
           a.beta2 == b.beta2 && a.eps == b.eps;
  }
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before any parameter changes.
template <typename T>
void adam_step(AdamState<T>& state, const NamedTensors<T>& params,
               const std::map<std::string, Tensor<T>>& grads, double lr) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ConfigError("adam_step: no gradient for " + name);
    if (it->second.shape() != p->shape()) {
      throw DimensionError("adam_step: gradient " + shape_str(it->second.shape()) +
                           " for parameter " + name + " " + shape_str(p->shape()));
    }
    if (!it->second.all_finite()) {
      throw NumericalError("adam_step: non-finite gradient for " + name);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, p] : params) {
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& m = state.m.try_emplace(name, p->shape()).first->second;
    Tensor<T>& v = state.v.try_emplace(name, p->shape()).first->second;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / bc1;
      const double v_hat = vi / bc2;
      (*p)[i] = static_cast<T>(static_cast<double>((*p)[i]) - lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
template <typename T>
void clip_gradients(std::map<std::string, Tensor<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const T factor = static_cast<T>(max_norm / norm);
  for (auto& [_, g] : grads) {
    for (T& v : g.data()) v *= factor;
  }
}

struct EpochLog {
  int epoch = 0;
  int b_total = 0;
  double lr = 0.0;
  double loss = 0.0;

  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

/// Everything needed to continue training bit-exactly.
template <typename T>
struct TrainerState {
  INetModel<T> model;
  AdamState<T> adam;
  int next_epoch = 0;
  std::mt19937_64 rng;
};

/// Fresh state: parameters drawn from `seed`, training stream from a
/// derived seed, so one seed controls every random choice.
template <typename T>
TrainerState<T> make_trainer_state(const INetConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 init_rng(seed);
  TrainerState<T> st{init_parameters<T>(cfg, init_rng), AdamState<T>{}, 0,
                     std::mt19937_64(seed ^ 0xa0761d6478bd642fULL)};
  return st;
}

struct TrainHooks {
  /// Called after every completed epoch.
  std::function<void(const EpochLog&)> on_epoch;
  /// Called when a checkpoint is due (cadence reached) or training diverged.
  std::function<void(int epoch)> on_checkpoint;
};

/// Runs epochs [state.next_epoch, cfg.epochs). Each epoch shuffles with the
/// state rng, sets b_total from the curriculum, and applies one Adam step per
/// minibatch at the scheduled rate. On a non-finite loss or gradient the
/// state is rolled back to the start of the epoch and DivergenceError is
/// thrown.
template <typename T>
std::vector<EpochLog> train(TrainerState<T>& state, std::span<const TrainingStory<T>> corpus,
                            const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("train: empty corpus");
  state.model.config.validate();
  if (state.model.config.alpha != cfg.alpha || state.model.config.beta != cfg.beta) {
    throw ConfigError("train: model and training curriculum (alpha, beta) disagree");
  }
  std::vector<EpochLog> history;
  std::vector<std::size_t> order(corpus.size());
  auto params = state.model.parameters();

  for (int epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
    const INetModel<T> model_backup = state.model;
    const AdamState<T> adam_backup = state.adam;
    const std::mt19937_64 rng_backup = state.rng;

    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), state.rng);
    const int level = curriculum_level(epoch, cfg.alpha, cfg.beta);
    const double lr = lr_schedule(epoch, cfg);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<TrainingStory<T>> batch;
        batch.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) batch.push_back(corpus[order[i]]);

        Tape<T> tape;
        Var<T> loss = forward_loss(state.model, tape, std::span<const TrainingStory<T>>(batch),
                                   level, state.rng);
        tape.backward(loss);
        std::map<std::string, Tensor<T>> grads;
        for (const auto& [name, p] : params) grads.emplace(name, tape.grad_of(*p));
        if (cfg.clip_norm > 0.0) clip_gradients(grads, cfg.clip_norm);
        adam_step(state.adam, params, grads, lr);
        loss_sum += static_cast<double>(loss.value().item());
        ++batches;
      }
    } catch (const NumericalError& e) {
      state.model = model_backup;
      state.adam = adam_backup;
      state.rng = rng_backup;
      state.next_epoch = epoch;
      if (hooks.on_checkpoint) hooks.on_checkpoint(epoch);
      throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " +
                            e.what());
    }
    EpochLog log{epoch, level, lr, loss_sum / static_cast<double>(batches)};
    history.push_back(log);
    state.next_epoch = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(log);
    if (cfg.checkpoint_every > 0 && hooks.on_checkpoint &&
        ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs)) {
      hooks.on_checkpoint(epoch + 1);
    }
  }
  return history;
}

}  // namespace hidetell
