#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include <zlib.h>

#include "hidetell/data_io.hpp"
#include "hidetell/training.hpp"

namespace hidetell {

// Layout (all integers little-endian):
//   "INCK" u32 version
//   u32 config length, UTF-8 `key = value` config text
//   parameters: u32 count, then records
//   optimizer:  u64 adam step, u32 count, then records ("m/<name>", "v/<name>")
//   state:      u32 next epoch, u32 rng text length, rng text
//   u32 CRC-32 of every preceding byte
// record = u16 name length, name, u8 rank, u32 dims[rank], raw values in the
// configured precision.

inline constexpr std::array<char, 4> kCheckpointMagic{'I', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct CheckpointRecord {
  INetConfig model_config;
  TrainConfig train_config;
  TrainerState<T> state;
};

namespace detail {

template <typename T>
void put_record(std::string& out, const std::string& name, const Tensor<T>& t) {
  if (name.size() > 0xffff) throw FormatError("tensor name too long: " + name);
  if (t.rank() > 0xff) throw FormatError("tensor rank too large: " + name);
  bytes::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  bytes::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (T v : t.data()) bytes::put<T>(out, v);
}

template <typename T>
std::pair<std::string, Tensor<T>> get_record(bytes::Reader& r) {
  const auto len = r.get<std::uint16_t>();
  std::string name(r.take(len));
  const auto rank = r.get<std::uint8_t>();
  Shape shape(rank);
  for (auto& d : shape) {
    d = r.get<std::uint32_t>();
    if (d == 0) throw FormatError("checkpoint: zero extent in record " + name);
  }
  std::vector<T> values(shape_size(shape));
  for (T& v : values) v = r.get<T>();
  return {std::move(name), Tensor<T>(std::move(shape), std::move(values))};
}

inline std::uint32_t crc32_of(std::string_view data) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const CheckpointRecord<T>& rec) {
  if (rec.train_config.precision != precision_of<T>()) {
    throw ConfigError("checkpoint precision does not match the tensor type");
  }
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  bytes::put<std::uint32_t>(out, kCheckpointVersion);

  KeyValues kv = rec.model_config.to_key_values();
  const KeyValues train_kv = rec.train_config.to_key_values();
  for (const auto& [k, v] : train_kv.entries()) kv.set(k, v);
  const std::string config = kv.to_text();
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out += config;

  std::uint32_t count = 0;
  rec.state.model.visit([&](const std::string&, const Tensor<T>&) { ++count; });
  bytes::put<std::uint32_t>(out, count);
  rec.state.model.visit(
      [&](const std::string& name, const Tensor<T>& t) { detail::put_record(out, name, t); });

  bytes::put<std::uint64_t>(out, rec.state.adam.step);
  bytes::put<std::uint32_t>(out,
                            static_cast<std::uint32_t>(rec.state.adam.m.size() + rec.state.adam.v.size()));
  for (const auto& [name, t] : rec.state.adam.m) detail::put_record(out, "m/" + name, t);
  for (const auto& [name, t] : rec.state.adam.v) detail::put_record(out, "v/" + name, t);

  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(rec.state.next_epoch));
  std::ostringstream rng_text;
  rng_text << rec.state.rng;
  const std::string rng = rng_text.str();
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(rng.size()));
  out += rng;

  bytes::put<std::uint32_t>(out, detail::crc32_of(out));
  return out;
}

/// Reads just the configuration text, e.g. to pick the precision before
/// decoding the tensors.
inline KeyValues peek_checkpoint_config(std::string_view data) {
  bytes::Reader r(data, "checkpoint");
  if (r.take(4) != std::string_view(kCheckpointMagic.data(), 4)) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto len = r.get<std::uint32_t>();
  return KeyValues::parse(r.take(len), "checkpoint config");
}

template <typename T>
CheckpointRecord<T> decode_checkpoint(std::string_view data) {
  if (data.size() < 12) throw FormatError("checkpoint: truncated");
  const std::string_view body = data.substr(0, data.size() - 4);
  bytes::Reader tail(data.substr(data.size() - 4), "checkpoint");
  const KeyValues kv = peek_checkpoint_config(body);
  if (tail.get<std::uint32_t>() != detail::crc32_of(body)) {
    throw FormatError("checkpoint: checksum mismatch (corrupted or truncated file)");
  }

  bytes::Reader r(body, "checkpoint");
  r.take(8);
  r.take(r.get<std::uint32_t>());

  CheckpointRecord<T> rec;
  rec.model_config = INetConfig::from_key_values(kv);
  rec.train_config = TrainConfig::from_key_values(kv);
  if (rec.train_config.precision != precision_of<T>()) {
    throw FormatError("checkpoint holds " + precision_name(rec.train_config.precision) +
                      " tensors");
  }
  rec.model_config.validate();
  rec.state.model = INetModel<T>(rec.model_config);

  std::map<std::string, Tensor<T>> loaded;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = detail::get_record<T>(r);
    loaded.emplace(std::move(name), std::move(t));
  }
  std::size_t matched = 0;
  rec.state.model.visit([&](const std::string& name, Tensor<T>& t) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError("checkpoint: missing parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw FormatError("checkpoint: parameter " + name + " has shape " +
                        shape_str(it->second.shape()) + ", config implies " + shape_str(t.shape()));
    }
    t = std::move(it->second);
    ++matched;
  });
  if (matched != loaded.size()) throw FormatError("checkpoint: unexpected parameter records");

  rec.state.adam.step = r.get<std::uint64_t>();
  const auto opt_count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < opt_count; ++i) {
    auto [name, t] = detail::get_record<T>(r);
    if (name.rfind("m/", 0) == 0) {
      rec.state.adam.m.emplace(name.substr(2), std::move(t));
    } else if (name.rfind("v/", 0) == 0) {
      rec.state.adam.v.emplace(name.substr(2), std::move(t));
    } else {
      throw FormatError("checkpoint: unknown optimizer record " + name);
    }
  }

  rec.state.next_epoch = static_cast<int>(r.get<std::uint32_t>());
  const auto rng_len = r.get<std::uint32_t>();
  std::istringstream rng_text{std::string(r.take(rng_len))};
  rng_text >> rec.state.rng;
  if (!rng_text) throw FormatError("checkpoint: unreadable rng state");
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return rec;
}

template <typename T>
void save_checkpoint(const CheckpointRecord<T>& rec, const std::filesystem::path& path) {
  bytes::write_file(path, encode_checkpoint(rec));
}

template <typename T>
CheckpointRecord<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(bytes::read_file(path));
}

}  // namespace hidetell
