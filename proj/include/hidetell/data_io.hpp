#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hidetell/error.hpp"
#include "hidetell/tensor.hpp"

namespace hidetell {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with host byte order; big-endian hosts need swapping");

/// An N×D matrix of per-slot visual features.
using FeatureStream = Tensor<float>;

// ---------------------------------------------------------------------------
// Little-endian byte helpers shared by the binary formats.

namespace bytes {

template <typename U>
void put(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    std::string_view s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(what_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", have " + std::to_string(data_.size() - pos_) +
                        ")");
    }
  }

  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace bytes

// ---------------------------------------------------------------------------
// INFT feature files: "INFT", u32 version, u32 N, u32 D, N·D f32 row-major.

inline constexpr std::array<char, 4> kFeatureMagic{'I', 'N', 'F', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string encode_features(const FeatureStream& f) {
  if (f.rank() != 2) throw DimensionError("feature stream must be N×D, got " + shape_str(f.shape()));
  if (!f.all_finite()) throw NumericalError("feature stream contains non-finite values");
  std::string out(kFeatureMagic.begin(), kFeatureMagic.end());
  bytes::put<std::uint32_t>(out, kFeatureVersion);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.dim(0)));
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.dim(1)));
  for (float v : f.data()) bytes::put<float>(out, v);
  return out;
}

inline FeatureStream decode_features(std::string_view data, const std::string& what = "INFT") {
  bytes::Reader r(data, what);
  std::string_view magic = r.take(4);
  if (magic != std::string_view(kFeatureMagic.data(), 4)) throw FormatError(what + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kFeatureVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  }
  const auto n = r.get<std::uint32_t>();
  const auto d = r.get<std::uint32_t>();
  if (n == 0 || d == 0) throw FormatError(what + ": zero extent");
  const std::size_t count = static_cast<std::size_t>(n) * d;
  if (r.remaining() != count * sizeof(float)) {
    throw FormatError(what + ": payload holds " + std::to_string(r.remaining()) +
                      " bytes, expected " + std::to_string(count * sizeof(float)));
  }
  std::vector<float> values(count);
  for (float& v : values) v = r.get<float>();
  return FeatureStream(Shape{n, d}, std::move(values));
}

/// Writes an "INFT" file. A stream with a zero extent cannot be built, so a
/// D of zero is rejected by the Tensor constructor before reaching here.
inline void write_features(const std::filesystem::path& path, const FeatureStream& f) {
  bytes::write_file(path, encode_features(f));
}

inline FeatureStream read_features(const std::filesystem::path& path) {
  return decode_features(bytes::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Tokenization and vocabulary.

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kBosId = 1;
inline constexpr std::size_t kEosId = 2;
inline constexpr std::size_t kUnkId = 3;
inline constexpr std::size_t kNumReserved = 4;

inline bool is_reserved(std::size_t id) { return id < kNumReserved; }

/// Lowercase, drop ASCII punctuation, split on whitespace.
inline std::vector<std::string> tokenize(std::string_view sentence) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : sentence) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

inline std::string normalize(std::string_view sentence) {
  std::string out;
  for (const std::string& t : tokenize(sentence)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {}

  /// Tokens with count ≥ min_count, ordered by descending frequency then
  /// lexicographically.
  static Vocabulary build(const std::vector<std::string>& sentences, std::size_t min_count = 1) {
    if (min_count < 1) throw ConfigError("min_count must be >= 1");
    if (sentences.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const std::string& s : sentences) {
      for (std::string& t : tokenize(s)) ++counts[std::move(t)];
    }
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, n] : counts) {
      if (n >= min_count) kept.emplace_back(tok, n);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (auto& [tok, n] : kept) v.add(tok);
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    for (const std::string& t : tokens) v.add(t);
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  std::size_t id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) {
      throw DimensionError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                           std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  /// Token ids followed by EOS.
  std::vector<std::size_t> encode(std::string_view sentence) const {
    std::vector<std::size_t> ids;
    for (const std::string& t : tokenize(sentence)) ids.push_back(id(t));
    ids.push_back(kEosId);
    return ids;
  }

  /// Stops at the first EOS; reserved ids are never emitted.
  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (std::size_t id : ids) {
      const std::string& tok = token(id);
      if (id == kEosId) break;
      if (is_reserved(id)) continue;
      if (!out.empty()) out.push_back(' ');
      out += tok;
    }
    return out;
  }

  /// One non-reserved token per line; line k holds id k + 4.
  void save(const std::filesystem::path& path) const {
    std::string text;
    for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) text += tokens_[i] + "\n";
    bytes::write_file(path, text);
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::istringstream in(bytes::read_file(path));
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) throw FormatError(path.string() + ": empty vocabulary line");
      tokens.push_back(line);
    }
    Vocabulary v;
    for (const std::string& t : tokens) {
      if (v.contains(t)) throw FormatError(path.string() + ": duplicate token '" + t + "'");
      v.add(t);
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& tok) {
    if (index_.count(tok)) return;
    index_.emplace(tok, tokens_.size());
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Corpus records: one JSON object per line.

struct StoryRecord {
  std::string story_id;
  std::filesystem::path features;  // INFT file
  std::vector<std::string> sentences;
};

inline std::string story_to_json_line(const StoryRecord& rec) {
  nlohmann::json j;
  j["story_id"] = rec.story_id;
  j["features"] = rec.features.generic_string();
  j["sentences"] = rec.sentences;
  return j.dump();
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<StoryRecord>& recs) {
  std::string text;
  for (const StoryRecord& r : recs) text += story_to_json_line(r) + "\n";
  bytes::write_file(path, text);
}

/// Relative feature paths are resolved against the corpus file's directory.
inline std::vector<StoryRecord> read_corpus(const std::filesystem::path& path) {
  std::istringstream in(bytes::read_file(path));
  std::vector<StoryRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    StoryRecord rec;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      rec.story_id = j.at("story_id").get<std::string>();
      rec.features = j.at("features").get<std::string>();
      rec.sentences = j.at("sentences").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (rec.features.is_relative()) rec.features = path.parent_path() / rec.features;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic photo streams with a deterministic topic chain.

struct SyntheticSpec {
  std::size_t topics = 8;
  std::size_t slots = 5;
  std::size_t feature_dim = 16;
  double noise = 0.1;
  std::uint64_t seed = 7;

  void validate() const {
    if (topics == 0) throw ConfigError("synthetic world: topics must be > 0");
    if (slots == 0) throw ConfigError("synthetic world: slots must be > 0");
    if (feature_dim == 0) throw ConfigError("synthetic world: feature_dim must be > 0");
    if (topics > feature_dim) {
      throw ConfigError("synthetic world: " + std::to_string(topics) +
                        " topics cannot be embedded injectively in " +
                        std::to_string(feature_dim) + " dims");
    }
    if (!(noise >= 0.0)) throw ConfigError("synthetic world: noise must be >= 0");
  }
};

/// Words shared by every synthetic sentence; not counted as content.
inline const std::vector<std::string>& synthetic_template_words() {
  static const std::vector<std::string> words{"the", "was"};
  return words;
}

inline std::vector<std::string> synthetic_topic_words(std::size_t topic) {
  static const std::vector<std::vector<std::string>> table{
      {"ocean", "sand", "sunny", "calm"},      {"cake", "balloons", "loud", "fun"},
      {"bride", "flowers", "elegant", "joyful"}, {"trail", "mountain", "steep", "green"},
      {"street", "lights", "busy", "bright"},  {"table", "food", "tasty", "warm"},
      {"stage", "band", "noisy", "exciting"},  {"hill", "sled", "cold", "white"},
  };
  if (topic < table.size()) return table[topic];
  std::vector<std::string> words;
  for (int j = 0; j < 4; ++j) {
    words.push_back("topic" + std::to_string(topic) + "w" + std::to_string(j));
  }
  return words;
}

/// "the <noun> <noun> was <adj> <adj>"
inline std::string synthetic_sentence(std::size_t topic) {
  const auto w = synthetic_topic_words(topic);
  return "the " + w[0] + " " + w[1] + " was " + w[2] + " " + w[3];
}

struct SyntheticStory {
  std::string story_id;
  std::vector<std::size_t> topics;
  FeatureStream features;
  std::vector<std::string> sentences;
};

/// Fixed world of a synthetic corpus: the topic chain and the embedding.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const SyntheticSpec& spec) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(spec_.seed);
    // A single cycle through every topic, so the chain is a bijection and a
    // slot is recoverable from either neighbour.
    std::vector<std::size_t> order(spec_.topics);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    next_.resize(spec_.topics);
    prev_.resize(spec_.topics);
    for (std::size_t i = 0; i < order.size(); ++i) {
      const std::size_t a = order[i], b = order[(i + 1) % order.size()];
      next_[a] = b;
      prev_[b] = a;
    }
    // Orthogonalised gaussian projection: distinct, equal-norm topic codes.
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> cols;
    while (cols.size() < spec_.topics) {
      std::vector<double> c(spec_.feature_dim);
      for (double& v : c) v = normal(rng);
      for (const auto& q : cols) {
        double dot = 0;
        for (std::size_t i = 0; i < c.size(); ++i) dot += c[i] * q[i];
        for (std::size_t i = 0; i < c.size(); ++i) c[i] -= dot * q[i];
      }
      double norm = 0;
      for (double v : c) norm += v * v;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (double& v : c) v /= norm;
      cols.push_back(std::move(c));
    }
    const double scale = std::sqrt(static_cast<double>(spec_.feature_dim));
    projection_ = Tensor<double>(Shape{spec_.topics, spec_.feature_dim});
    for (std::size_t k = 0; k < spec_.topics; ++k) {
      for (std::size_t i = 0; i < spec_.feature_dim; ++i) projection_.at(k, i) = cols[k][i] * scale;
    }
  }

  const SyntheticSpec& spec() const { return spec_; }
  std::size_t next(std::size_t topic) const { return next_.at(topic); }
  std::size_t prev(std::size_t topic) const { return prev_.at(topic); }
  const Tensor<double>& projection() const { return projection_; }

  /// Topic of slot `hidden` given the visible topics; uses the left neighbour
  /// when there is one, else the right.
  std::size_t recover_topic(const std::vector<std::size_t>& topics, std::size_t hidden) const {
    if (hidden > 0) return next(topics[hidden - 1]);
    return prev(topics.at(hidden + 1));
  }

  /// Topic whose sentence contains `word`, if any.
  std::optional<std::size_t> topic_of_word(std::string_view word) const {
    for (std::size_t k = 0; k < spec_.topics; ++k) {
      for (const std::string& w : synthetic_topic_words(k)) {
        if (w == word) return k;
      }
    }
    return std::nullopt;
  }

  SyntheticStory make_story(std::string id, std::mt19937_64& rng) const {
    SyntheticStory s;
    s.story_id = std::move(id);
    std::uniform_int_distribution<std::size_t> first(0, spec_.topics - 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    s.topics.push_back(first(rng));
    for (std::size_t i = 1; i < spec_.slots; ++i) s.topics.push_back(next(s.topics.back()));
    s.features = FeatureStream(Shape{spec_.slots, spec_.feature_dim});
    for (std::size_t i = 0; i < spec_.slots; ++i) {
      for (std::size_t j = 0; j < spec_.feature_dim; ++j) {
        const double eps = spec_.noise > 0 ? spec_.noise * noise(rng) : 0.0;
        s.features.at(i, j) = static_cast<float>(projection_.at(s.topics[i], j) + eps);
      }
      s.sentences.push_back(synthetic_sentence(s.topics[i]));
    }
    return s;
  }

 private:
  SyntheticSpec spec_;
  std::vector<std::size_t> next_, prev_;
  Tensor<double> projection_;
};

/// Generates consecutive splits (e.g. {train, test}) from one seeded stream.
inline std::vector<std::vector<SyntheticStory>> synth_generate(
    const SyntheticSpec& spec, const std::vector<std::size_t>& split_sizes) {
  SyntheticWorld world(spec);
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::vector<SyntheticStory>> splits;
  std::size_t counter = 0;
  for (std::size_t n : split_sizes) {
    std::vector<SyntheticStory> split;
    for (std::size_t i = 0; i < n; ++i) {
      split.push_back(world.make_story("story" + std::to_string(counter++), rng));
    }
    splits.push_back(std::move(split));
  }
  return splits;
}

}  // namespace hidetell
