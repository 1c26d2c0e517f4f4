#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "hidetell/model.hpp"

namespace hidetell {

inline constexpr std::size_t kDefaultBeam = 3;

struct Hypothesis {
  std::vector<std::size_t> tokens;
  double log_prob = 0.0;
  std::vector<double> hidden;  // decoder state after the last token
  bool finished = false;
};

struct DecodeOptions {
  std::size_t beam = kDefaultBeam;
  std::size_t max_len = 0;        // 0: model's max_len
  bool length_normalize = false;  // rank finished hypotheses by mean log-prob
};

namespace detail {

inline bool decodable(std::size_t id) { return id != kPadId && id != kBosId; }

// Runs one decoder step for every row and returns (new hidden rows,
// log-probabilities) in double.
template <typename T>
std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> decoder_log_probs(
    const INetModel<T>& model, std::span<const T> f_tell,
    const std::vector<std::vector<double>>& hidden, std::span<const std::size_t> prev) {
  const std::size_t rows = hidden.size();
  const std::size_t hd = model.config.decoder_hidden;
  const std::size_t d = f_tell.size();
  Tensor<T> h(Shape{rows, hd});
  Tensor<T> f(Shape{rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < hd; ++j) h.at(r, j) = static_cast<T>(hidden[r][j]);
    std::copy(f_tell.begin(), f_tell.end(), f.row(r).begin());
  }
  Tape<T> tape(false);
  auto [h_next, logits] = decode_step(model, tape, tape.constant(std::move(h)),
                                      tape.constant(std::move(f)), prev);
  std::vector<std::vector<double>> new_hidden(rows), log_probs(rows);
  const Tensor<T>& hv = h_next.value();
  const Tensor<T>& lv = logits.value();
  for (std::size_t r = 0; r < rows; ++r) {
    new_hidden[r].assign(hv.row(r).begin(), hv.row(r).end());
    auto row = lv.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (T v : row) z += std::exp(static_cast<double>(v) - mx);
    const double lz = mx + std::log(z);
    log_probs[r].resize(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) log_probs[r][j] = static_cast<double>(row[j]) - lz;
  }
  return {std::move(new_hidden), std::move(log_probs)};
}

inline double ranking_score(const Hypothesis& h, bool normalize) {
  return normalize ? h.log_prob / static_cast<double>(std::max<std::size_t>(1, h.tokens.size()))
                   : h.log_prob;
}

// Higher score first, then lexicographically smaller token sequence.
inline bool better(const Hypothesis& a, const Hypothesis& b, bool normalize) {
  const double sa = ranking_score(a, normalize), sb = ranking_score(b, normalize);
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;
}

}  // namespace detail

/// Length-synchronous beam search over one slot's f_tell. Hypotheses that
/// emit EOS retire to a finished pool; the best finished hypothesis wins,
/// falling back to the best unfinished one at max_len. PAD and BOS are never
/// emitted. Ranking is by raw summed log-probability unless
/// `length_normalize` is set, with ties broken by token-id order.
template <typename T>
Hypothesis beam_search_hypothesis(const INetModel<T>& model, std::span<const T> f_tell,
                                  const DecodeOptions& opts = {}) {
  if (opts.beam < 1) throw ConfigError("beam width must be >= 1");
  if (f_tell.size() != model.config.feature_dim) {
    throw DimensionError("beam_search: f_tell has " + std::to_string(f_tell.size()) +
                         " values, model expects " + std::to_string(model.config.feature_dim));
  }
  const std::size_t max_len = opts.max_len ? opts.max_len : model.config.max_len;
  const std::size_t vocab = model.config.vocab;
  std::vector<Hypothesis> live{
      Hypothesis{{}, 0.0, std::vector<double>(model.config.decoder_hidden, 0.0), false}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<std::vector<double>> hidden;
    std::vector<std::size_t> prev;
    for (const Hypothesis& h : live) {
      hidden.push_back(h.hidden);
      prev.push_back(h.tokens.empty() ? kBosId : h.tokens.back());
    }
    auto [next_hidden, log_probs] =
        detail::decoder_log_probs(model, f_tell, hidden, std::span<const std::size_t>(prev));

    std::vector<Hypothesis> candidates;
    candidates.reserve(live.size() * vocab);
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t v = 0; v < vocab; ++v) {
        if (!detail::decodable(v)) continue;
        Hypothesis c;
        c.tokens = live[i].tokens;
        c.tokens.push_back(v);
        c.log_prob = live[i].log_prob + log_probs[i][v];
        c.finished = v == kEosId;
        if (!c.finished) c.hidden = next_hidden[i];
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(opts.beam, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), [&](const Hypothesis& a, const Hypothesis& b) {
                        return detail::better(a, b, false);
                      });
    live.clear();
    for (std::size_t k = 0; k < keep; ++k) {
      if (candidates[k].finished) {
        finished.push_back(std::move(candidates[k]));
      } else {
        live.push_back(std::move(candidates[k]));
      }
    }
    // Log-probabilities only decrease, so no live hypothesis can overtake a
    // strictly better finished one.
    if (!opts.length_normalize && !finished.empty() && !live.empty()) {
      const auto best_f = std::min_element(finished.begin(), finished.end(),
                                           [](const auto& a, const auto& b) {
                                             return detail::better(a, b, false);
                                           });
      double best_live = -std::numeric_limits<double>::infinity();
      for (const Hypothesis& h : live) best_live = std::max(best_live, h.log_prob);
      if (best_f->log_prob > best_live) live.clear();
    }
  }
  const std::vector<Hypothesis>& pool = finished.empty() ? live : finished;
  return *std::min_element(pool.begin(), pool.end(), [&](const auto& a, const auto& b) {
    return detail::better(a, b, opts.length_normalize && !finished.empty());
  });
}

template <typename T>
std::vector<std::size_t> beam_search(const INetModel<T>& model, std::span<const T> f_tell,
                                     const DecodeOptions& opts = {}) {
  return beam_search_hypothesis(model, f_tell, opts).tokens;
}

/// Argmax decoding from BOS until EOS or max_len; ties go to the lowest id.
template <typename T>
std::vector<std::size_t> greedy_decode(const INetModel<T>& model, std::span<const T> f_tell,
                                       std::size_t max_len = 0) {
  if (max_len == 0) max_len = model.config.max_len;
  std::vector<std::vector<double>> hidden{std::vector<double>(model.config.decoder_hidden, 0.0)};
  std::vector<std::size_t> out;
  std::size_t prev = kBosId;
  double total = 0.0;
  while (out.size() < max_len) {
    auto [next_hidden, log_probs] =
        detail::decoder_log_probs(model, f_tell, hidden, std::span<const std::size_t>(&prev, 1));
    // Compare running totals, exactly as a width-1 beam would.
    std::size_t best = kEosId;
    double best_total = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < log_probs[0].size(); ++v) {
      if (!detail::decodable(v)) continue;
      const double cand = total + log_probs[0][v];
      if (cand > best_total) {
        best_total = cand;
        best = v;
      }
    }
    out.push_back(best);
    total = best_total;
    if (best == kEosId) break;
    hidden = std::move(next_hidden);
    prev = best;
  }
  return out;
}

/// Total log-probability the model assigns to a token sequence.
template <typename T>
double sequence_log_prob(const INetModel<T>& model, std::span<const T> f_tell,
                         const std::vector<std::size_t>& tokens) {
  std::vector<std::vector<double>> hidden{std::vector<double>(model.config.decoder_hidden, 0.0)};
  std::size_t prev = kBosId;
  double total = 0.0;
  for (std::size_t tok : tokens) {
    auto [next_hidden, log_probs] =
        detail::decoder_log_probs(model, f_tell, hidden, std::span<const std::size_t>(&prev, 1));
    total += log_probs[0].at(tok);
    hidden = std::move(next_hidden);
    prev = tok;
  }
  return total;
}

namespace detail {

template <typename T>
std::vector<std::vector<std::size_t>> decode_all_slots(const INetModel<T>& model,
                                                       const Tensor<T>& blinded,
                                                       const DecodeOptions& opts) {
  if (blinded.rank() != 2 || blinded.dim(1) != model.config.feature_dim) {
    throw DimensionError("features " + shape_str(blinded.shape()) +
                         " do not match feature_dim " + std::to_string(model.config.feature_dim));
  }
  const Tensor<T> f_tell = encode_story(model, blinded);
  std::vector<std::vector<std::size_t>> story;
  for (std::size_t i = 0; i < f_tell.dim(0); ++i) {
    story.push_back(beam_search(model, f_tell.row(i), opts));
  }
  return story;
}

}  // namespace detail

/// hide → imagine → tell once, then one beam-decoded sentence per slot,
/// hidden slots included.
template <typename T>
std::vector<std::vector<std::size_t>> generate_story(const INetModel<T>& model,
                                                     const Tensor<T>& features,
                                                     const std::optional<MaskPattern>& mask = {},
                                                     const DecodeOptions& opts = {}) {
  if (features.rank() == 2 && features.dim(0) != model.config.slots) {
    warn("story has " + std::to_string(features.dim(0)) + " slots; model was configured for " +
         std::to_string(model.config.slots));
  }
  return detail::decode_all_slots(model, mask ? hide(features, *mask) : features, opts);
}

/// Interleaves an all-zero slot between consecutive real slots:
/// 5 real rows become 9 rows with zeros at 0-based positions 1, 3, 5, 7.
template <typename T>
Tensor<T> interleave_black_slots(const Tensor<T>& features) {
  if (features.rank() != 2 || features.dim(0) != 5) {
    throw DimensionError("story interpolation needs a 5-slot stream, got " +
                         shape_str(features.shape()));
  }
  const std::size_t d = features.dim(1);
  Tensor<T> out(Shape{9, d});
  for (std::size_t i = 0; i < 5; ++i) {
    std::copy_n(features.row(i).begin(), d, out.row(2 * i).begin());
  }
  return out;
}

template <typename T>
std::vector<std::vector<std::size_t>> interpolate_story(const INetModel<T>& model,
                                                        const Tensor<T>& features,
                                                        const DecodeOptions& opts = {}) {
  return detail::decode_all_slots(model, interleave_black_slots(features), opts);
}

inline bool is_inserted_slot(std::size_t index) { return index % 2 == 1; }

}  // namespace hidetell
