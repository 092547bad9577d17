#pragma once

// Checkpoint file layout (all integers and floats little-endian):
//
//   "GSOPCKPT"                      8 bytes
//   u32 version                     currently 1
//   u32 tensor count
//   tensor count x {
//     u32 name length, UTF-8 name bytes,
//     u32 rank, rank x u32 dims,
//     prod(dims) x f32 values
//   }
//   blocks until end of file, each { 4-byte tag, u64 payload length, payload }:
//     "MOMT"  u32 count + tensors as above: momentum buffers keyed by parameter name
//     "BNRS"  u32 count + rank-1 tensors: running statistics and other buffers
//     "RNGS"  u32 length + text: dropout generator state (std::mt19937_64 stream form)
//     "PROG"  u64 epochs completed, u64 optimizer steps, f64 best validation top-1 error
//     "LOGS"  u32 rows x { u64 epoch, f64 lr, f64 train_loss, f64 val_top1, f64 val_top5 }, NaN = not measured
//     "CONF"  u32 length + text: resolved run configuration
//   Unknown tags are skipped.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gsop/data.hpp"
#include "gsop/error.hpp"
#include "gsop/module.hpp"

namespace gsop {

inline constexpr char kCheckpointMagic[8] = {'G', 'S', 'O', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct MetricsRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_top1;
  std::optional<double> val_top5;
};

struct Checkpoint {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> momentum;
  std::vector<NamedTensor> buffers;
  std::string rng_state;
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  double best_val_top1 = std::nan("");
  std::vector<MetricsRow> log;
  std::string config_text;
};

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& b, double d) { put_u64(b, std::bit_cast<std::uint64_t>(d)); }

inline void put_text(std::vector<std::uint8_t>& b, const std::string& s) {
  put_u32(b, static_cast<std::uint32_t>(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

inline void put_tensors(std::vector<std::uint8_t>& b, const std::vector<NamedTensor>& ts) {
  put_u32(b, static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    put_text(b, t.name);
    put_u32(b, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(b, d);
    for (float v : t.values) put_f32(b, v);
  }
}

inline void put_block(std::vector<std::uint8_t>& b, const char (&tag)[5], const std::vector<std::uint8_t>& payload) {
  b.insert(b.end(), tag, tag + 4);
  put_u64(b, payload.size());
  b.insert(b.end(), payload.begin(), payload.end());
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t begin, std::size_t end, std::string where)
      : b_(b), pos_(begin), end_(end), where_(std::move(where)) {}

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ >= end_; }

  void need(std::size_t n, const char* what) const {
    if (end_ - pos_ < n)
      throw IngestionError(where_ + ": truncated " + what + " at byte offset " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4, "u32");
    auto v = get_u32(&b_[pos_]);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string tag() {
    need(4, "tag");
    std::string s(b_.begin() + pos_, b_.begin() + pos_ + 4);
    pos_ += 4;
    return s;
  }
  std::string text() {
    const std::size_t n = u32();
    need(n, "string");
    std::string s(b_.begin() + pos_, b_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  std::vector<NamedTensor> tensors() {
    std::vector<NamedTensor> out(u32());
    for (auto& t : out) {
      t.name = text();
      const std::uint32_t rank = u32();
      if (rank > 8) throw CorruptDataError(where_ + ": tensor '" + t.name + "' has rank " + std::to_string(rank));
      std::uint64_t count = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        t.dims.push_back(u32());
        count *= t.dims.back();
      }
      if (count > (end_ - pos_) / 4) need(std::size_t(count) * 4, "tensor data");
      t.values.resize(count);
      for (auto& v : t.values) {
        v = get_f32(&b_[pos_]);
        pos_ += 4;
      }
    }
    return out;
  }
  ByteReader sub(std::size_t n) {
    need(n, "block");
    ByteReader r(b_, pos_, pos_ + n, where_);
    pos_ += n;
    return r;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_, end_;
  std::string where_;
};

inline double or_nan(const std::optional<double>& v) { return v ? *v : std::nan(""); }
inline std::optional<double> from_nan(double v) { return std::isnan(v) ? std::nullopt : std::optional<double>(v); }

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> b(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32(b, kCheckpointVersion);
  detail::put_tensors(b, c.params);
  std::vector<std::uint8_t> p;
  detail::put_tensors(p, c.momentum);
  detail::put_block(b, "MOMT", p);
  p.clear();
  detail::put_tensors(p, c.buffers);
  detail::put_block(b, "BNRS", p);
  p.clear();
  detail::put_text(p, c.rng_state);
  detail::put_block(b, "RNGS", p);
  p.clear();
  detail::put_u64(p, c.epoch);
  detail::put_u64(p, c.step);
  detail::put_f64(p, c.best_val_top1);
  detail::put_block(b, "PROG", p);
  p.clear();
  detail::put_u32(p, static_cast<std::uint32_t>(c.log.size()));
  for (const auto& r : c.log) {
    detail::put_u64(p, r.epoch);
    detail::put_f64(p, r.lr);
    detail::put_f64(p, r.train_loss);
    detail::put_f64(p, detail::or_nan(r.val_top1));
    detail::put_f64(p, detail::or_nan(r.val_top5));
  }
  detail::put_block(b, "LOGS", p);
  p.clear();
  detail::put_text(p, c.config_text);
  detail::put_block(b, "CONF", p);
  return b;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& b, const std::string& where = "checkpoint") {
  if (b.size() < 12 || std::memcmp(b.data(), kCheckpointMagic, 8) != 0)
    throw CorruptDataError(where + ": bad magic at byte offset 0 (not a GSOPCKPT file)");
  detail::ByteReader r(b, 8, b.size(), where);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw VersionError(version, kCheckpointVersion);
  Checkpoint c;
  c.params = r.tensors();
  while (!r.done()) {
    r.need(12, "block header");
    const std::string tag = r.tag();
    const std::uint64_t len = r.u64();
    if (len > b.size()) r.need(b.size() + 1, "block payload");
    auto block = r.sub(static_cast<std::size_t>(len));
    if (tag == "MOMT") {
      c.momentum = block.tensors();
    } else if (tag == "BNRS") {
      c.buffers = block.tensors();
    } else if (tag == "RNGS") {
      c.rng_state = block.text();
    } else if (tag == "PROG") {
      c.epoch = block.u64();
      c.step = block.u64();
      c.best_val_top1 = block.f64();
    } else if (tag == "LOGS") {
      c.log.resize(block.u32());
      for (auto& row : c.log) {
        row.epoch = block.u64();
        row.lr = block.f64();
        row.train_loss = block.f64();
        row.val_top1 = detail::from_nan(block.f64());
        row.val_top5 = detail::from_nan(block.f64());
      }
    } else if (tag == "CONF") {
      c.config_text = block.text();
    }
  }
  return c;
}

/// Writes to a sibling temporary and renames, so a crash never leaves a torn file.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestionError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

template <class T>
std::vector<NamedTensor> named_tensors(const std::vector<ParamSlot<T>>& params) {
  std::vector<NamedTensor> out;
  for (const auto& p : params) {
    NamedTensor t{p.name, {}, {}};
    for (auto d : p.tensor->shape()) t.dims.push_back(static_cast<std::uint32_t>(d));
    for (T v : p.tensor->data()) t.values.push_back(static_cast<float>(v));
    out.push_back(std::move(t));
  }
  return out;
}

template <class T>
std::vector<NamedTensor> named_buffers(const std::vector<BufferSlot<T>>& buffers) {
  std::vector<NamedTensor> out;
  for (const auto& b : buffers) {
    NamedTensor t{b.name, {static_cast<std::uint32_t>(b.values->size())}, {}};
    for (T v : *b.values) t.values.push_back(static_cast<float>(v));
    out.push_back(std::move(t));
  }
  return out;
}

/// Copies checkpoint parameters and buffers into a module; names and shapes must match exactly.
template <class T>
void load_weights(Module<T>& m, const Checkpoint& c) {
  auto params = m.parameters();
  if (params.size() != c.params.size())
    throw ConfigError("checkpoint has " + std::to_string(c.params.size()) + " tensors, network has " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = c.params[i];
    Shape s(t.dims.begin(), t.dims.end());
    if (t.name != params[i].name || s != params[i].tensor->shape())
      throw ConfigError("checkpoint tensor '" + t.name + "' " + to_string(s) + " does not match network tensor '" +
                        params[i].name + "' " + to_string(params[i].tensor->shape()));
    auto dst = params[i].tensor->mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(t.values[k]);
  }
  auto buffers = m.buffers();
  if (buffers.size() != c.buffers.size())
    throw ConfigError("checkpoint has " + std::to_string(c.buffers.size()) + " buffers, network has " +
                      std::to_string(buffers.size()));
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    const auto& t = c.buffers[i];
    if (t.name != buffers[i].name || t.values.size() != buffers[i].values->size())
      throw ConfigError("checkpoint buffer '" + t.name + "' does not match network buffer '" + buffers[i].name + "'");
    for (std::size_t k = 0; k < t.values.size(); ++k) (*buffers[i].values)[k] = static_cast<T>(t.values[k]);
  }
}

}  // namespace gsop
