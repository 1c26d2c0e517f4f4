#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hidetell/data_io.hpp"
#include "hidetell/generation.hpp"

namespace hidetell {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------------------
// BLEU

struct BleuResult {
  std::vector<double> bleu;        // bleu[n-1] = BLEU-n
  std::vector<double> precisions;  // clipped n-gram precision p_n
  std::vector<std::size_t> matches;
  std::vector<std::size_t> totals;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
  double brevity_penalty = 0.0;
};

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& toks,
                                                                    std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace detail

/// Corpus BLEU with one reference per candidate. Clipped n-gram counts are
/// pooled over the corpus; BP = 1 if c > r else exp(1 − r/c). A zero
/// precision zeroes every BLEU-n that includes it unless `smooth` adds one
/// to numerator and denominator for n ≥ 2.
inline BleuResult bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                       std::size_t n_max = 4, bool smooth = false) {
  if (candidates.size() != references.size()) {
    throw DimensionError("bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                         std::to_string(references.size()) + " references");
  }
  if (n_max == 0) throw ConfigError("bleu: n_max must be >= 1");
  BleuResult r;
  r.matches.assign(n_max, 0);
  r.totals.assign(n_max, 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    r.candidate_length += candidates[i].size();
    r.reference_length += references[i].size();
    for (std::size_t n = 1; n <= n_max; ++n) {
      const auto cand = detail::ngram_counts(candidates[i], n);
      const auto ref = detail::ngram_counts(references[i], n);
      for (const auto& [gram, count] : cand) {
        r.totals[n - 1] += count;
        auto it = ref.find(gram);
        if (it != ref.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  const double c = static_cast<double>(r.candidate_length);
  const double ref_len = static_cast<double>(r.reference_length);
  if (c == 0.0) {
    r.brevity_penalty = 0.0;
  } else {
    r.brevity_penalty = c > ref_len ? 1.0 : std::exp(1.0 - ref_len / c);
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= n_max; ++n) {
    double m = static_cast<double>(r.matches[n - 1]);
    double t = static_cast<double>(r.totals[n - 1]);
    if (smooth && n >= 2) {
      m += 1.0;
      t += 1.0;
    }
    const double p = t > 0.0 ? m / t : 0.0;
    r.precisions.push_back(p);
    if (p == 0.0) zero = true;
    if (!zero) log_sum += std::log(p);
    r.bleu.push_back(zero ? 0.0 : r.brevity_penalty * std::exp(log_sum / static_cast<double>(n)));
  }
  return r;
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

/// LCS F-measure (1+β²)PR / (R + β²P); 0 for an empty candidate or reference.
inline double rouge_l_pair(const Tokens& candidate, const Tokens& reference,
                           double beta = kRougeBeta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(candidate, reference));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(candidate.size());
  const double r = l / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

/// Mean pairwise ROUGE-L over the corpus.
inline double rouge_l(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                      double beta = kRougeBeta) {
  if (candidates.size() != references.size()) {
    throw DimensionError("rouge_l: candidate/reference count mismatch");
  }
  if (candidates.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    total += rouge_l_pair(candidates[i], references[i], beta);
  }
  return total / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// Content-token agreement on hidden slots.

namespace detail {

inline Tokens content_tokens(const Tokens& toks, const std::set<std::string>& ignore) {
  static const std::set<std::string> reserved{"<pad>", "<bos>", "<eos>", "<unk>"};
  Tokens out;
  for (const std::string& t : toks) {
    if (!reserved.count(t) && !ignore.count(t)) out.push_back(t);
  }
  return out;
}

}  // namespace detail

/// Clipped multiset overlap of content tokens divided by the larger content
/// count, so both missing and spurious content words cost.
inline double content_agreement(const Tokens& generated, const Tokens& gold,
                                const std::set<std::string>& template_words) {
  const Tokens g = detail::content_tokens(generated, template_words);
  const Tokens r = detail::content_tokens(gold, template_words);
  const std::size_t denom = std::max(g.size(), r.size());
  if (denom == 0) return 1.0;
  std::map<std::string, std::size_t> gold_counts;
  for (const auto& t : r) ++gold_counts[t];
  std::size_t hits = 0;
  for (const auto& t : g) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(denom);
}

/// Mean content agreement over hidden slots only; absent when no slot is
/// hidden.
inline std::optional<double> masked_slot_accuracy(const std::vector<std::vector<Tokens>>& generated,
                                                  const std::vector<std::vector<Tokens>>& gold,
                                                  const std::vector<MaskPattern>& masks,
                                                  const std::set<std::string>& template_words) {
  if (generated.size() != gold.size() || generated.size() != masks.size()) {
    throw DimensionError("masked_slot_accuracy: story count mismatch");
  }
  double total = 0.0;
  std::size_t slots = 0;
  for (std::size_t s = 0; s < generated.size(); ++s) {
    if (generated[s].size() != masks[s].size() || gold[s].size() != masks[s].size()) {
      throw DimensionError("masked_slot_accuracy: slot count mismatch in story " +
                           std::to_string(s));
    }
    for (std::size_t i = 0; i < masks[s].size(); ++i) {
      if (!masks[s].is_hidden(i)) continue;
      total += content_agreement(generated[s][i], gold[s][i], template_words);
      ++slots;
    }
  }
  if (slots == 0) return std::nullopt;
  return total / static_cast<double>(slots);
}

/// For 9-sentence interpolations of 5-slot stories: mean over inserted slots
/// of the better content agreement with the two adjacent real slots' gold
/// sentences.
inline double interpolation_consistency(const std::vector<std::vector<Tokens>>& interpolated,
                                        const std::vector<std::vector<Tokens>>& gold,
                                        const std::set<std::string>& template_words) {
  if (interpolated.size() != gold.size()) throw DimensionError("story count mismatch");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < interpolated.size(); ++s) {
    if (interpolated[s].size() != 9 || gold[s].size() != 5) {
      throw DimensionError("interpolation_consistency expects 9 generated and 5 gold sentences");
    }
    for (std::size_t k = 1; k < 9; k += 2) {
      const double left = content_agreement(interpolated[s][k], gold[s][k / 2], template_words);
      const double right = content_agreement(interpolated[s][k], gold[s][k / 2 + 1], template_words);
      total += std::max(left, right);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricReport {
  std::vector<double> bleu;  // BLEU-1..4
  double rouge_l = 0.0;
  std::optional<double> masked_slot_accuracy;
  std::size_t stories = 0;
  std::size_t sentences = 0;

  std::string to_text() const {
    std::string out;
    char buf[64];
    for (std::size_t n = 0; n < bleu.size(); ++n) {
      std::snprintf(buf, sizeof(buf), "bleu_%zu: %.6f\n", n + 1, bleu[n]);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "rouge_l: %.6f\n", rouge_l);
    out += buf;
    if (masked_slot_accuracy) {
      std::snprintf(buf, sizeof(buf), "masked_slot_accuracy: %.6f\n", *masked_slot_accuracy);
      out += buf;
    }
    out += "stories: " + std::to_string(stories) + "\n";
    out += "sentences: " + std::to_string(sentences) + "\n";
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (std::size_t n = 0; n < bleu.size(); ++n) j["bleu_" + std::to_string(n + 1)] = bleu[n];
    j["rouge_l"] = rouge_l;
    if (masked_slot_accuracy) j["masked_slot_accuracy"] = *masked_slot_accuracy;
    j["stories"] = stories;
    j["sentences"] = sentences;
    return j;
  }
};

/// Slot-wise scoring: sentence i of each generated story against sentence i
/// of its reference story, pooled over the corpus.
inline MetricReport score_stories(const std::vector<std::vector<Tokens>>& generated,
                                  const std::vector<std::vector<Tokens>>& references,
                                  bool smooth = false) {
  if (generated.size() != references.size()) {
    throw DimensionError("score_stories: story count mismatch");
  }
  std::vector<Tokens> cands, refs;
  for (std::size_t s = 0; s < generated.size(); ++s) {
    if (generated[s].size() != references[s].size()) {
      throw DimensionError("score_stories: story " + std::to_string(s) + " has " +
                           std::to_string(generated[s].size()) + " generated and " +
                           std::to_string(references[s].size()) + " reference sentences");
    }
    cands.insert(cands.end(), generated[s].begin(), generated[s].end());
    refs.insert(refs.end(), references[s].begin(), references[s].end());
  }
  MetricReport rep;
  rep.bleu = bleu(cands, refs, 4, smooth).bleu;
  rep.rouge_l = rouge_l(cands, refs);
  rep.stories = generated.size();
  rep.sentences = cands.size();
  return rep;
}

template <typename T>
struct EvalStory {
  Tensor<T> features;
  std::vector<std::string> sentences;
};

struct EvalOptions {
  DecodeOptions decode;
  bool hide_one = false;  // hide one random slot per story and score it
  std::uint64_t seed = 1;
  std::set<std::string> template_words;
  bool smooth = false;
};

struct EvalResult {
  MetricReport report;
  std::vector<std::vector<Tokens>> generated;
  std::vector<MaskPattern> masks;
};

/// Generates every story with beam search and scores it slot-wise against
/// its references.
template <typename T>
EvalResult evaluate(const INetModel<T>& model, const Vocabulary& vocab,
                    const std::vector<EvalStory<T>>& corpus, const EvalOptions& opts = {}) {
  if (vocab.size() != model.config.vocab) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) +
                      " entries but the model was built for " +
                      std::to_string(model.config.vocab));
  }
  std::mt19937_64 rng(opts.seed);
  EvalResult out;
  std::vector<std::vector<Tokens>> refs;
  for (const EvalStory<T>& story : corpus) {
    const std::size_t n = story.features.dim(0);
    if (story.sentences.size() != n) {
      throw DimensionError("evaluate: story with " + std::to_string(n) + " slots and " +
                           std::to_string(story.sentences.size()) + " sentences");
    }
    MaskPattern mask = opts.hide_one ? sample_mask(n, 1, rng) : MaskPattern::all_visible(n);
    const auto ids = generate_story(model, story.features, std::optional<MaskPattern>(mask),
                                    opts.decode);
    std::vector<Tokens> gen, ref;
    for (std::size_t i = 0; i < n; ++i) {
      gen.push_back(tokenize(vocab.decode(ids[i])));
      ref.push_back(tokenize(story.sentences[i]));
    }
    out.generated.push_back(std::move(gen));
    refs.push_back(std::move(ref));
    out.masks.push_back(std::move(mask));
  }
  out.report = score_stories(out.generated, refs, opts.smooth);
  out.report.masked_slot_accuracy =
      masked_slot_accuracy(out.generated, refs, out.masks, opts.template_words);
  return out;
}

}  // namespace hidetell
