#pragma once

// Datasets, on-disk formats and batching.
//
// CIFAR binary: fixed-size records, no header. Each record holds the label
// byte(s) (CIFAR-10: 1 byte; CIFAR-100: coarse byte then fine byte) and
// 3072 pixel bytes: the 1024 red values row-major, then green, then blue.
// Directory layout: cifar10 reads data_batch_1.bin .. data_batch_5.bin and
// test_batch.bin; cifar100 reads train.bin and test.bin.
//
// Raw tensor import (little-endian):
//   8 bytes  magic "GSOPRAW1"
//   u32      count, C, H, W
//   f32      count*C*H*W values, NCHW order
//   u32      count labels

#include <algorithm>
#include <array>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "gsop/error.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

enum class Split { train, val };

/// Images are kept either as raw bytes (CIFAR) or as floats (synthetic and
/// raw-tensor imports); exactly one of the two stores is populated.
struct Dataset {
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<std::uint8_t> bytes;
  std::vector<float> floats;
  std::vector<std::int32_t> labels;
  std::size_t class_count = 0;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  bool byte_storage() const { return !bytes.empty(); }

  float value(std::size_t n, std::size_t k) const {
    const std::size_t i = n * image_size() + k;
    return byte_storage() ? static_cast<float>(bytes[i]) : floats[i];
  }

  void copy_image(std::size_t n, float* dst) const {
    for (std::size_t k = 0, m = image_size(); k < m; ++k) dst[k] = value(n, k);
  }

  void validate() const {
    const std::size_t stored = byte_storage() ? bytes.size() : floats.size();
    if (stored != size() * image_size())
      throw CorruptDataError("dataset holds " + std::to_string(stored) + " values for " + std::to_string(size()) +
                             " images of " + std::to_string(image_size()));
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count)
        throw CorruptDataError("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) +
                               " outside [0, " + std::to_string(class_count) + ")");
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.class_count = class_count;
    out.split = split;
    const std::size_t m = image_size();
    for (std::size_t n : idx) {
      if (n >= size()) throw DimensionError("subset index " + std::to_string(n) + " out of range");
      if (byte_storage())
        out.bytes.insert(out.bytes.end(), bytes.begin() + static_cast<long>(n * m),
                         bytes.begin() + static_cast<long>((n + 1) * m));
      else
        out.floats.insert(out.floats.end(), floats.begin() + static_cast<long>(n * m),
                          floats.begin() + static_cast<long>((n + 1) * m));
      out.labels.push_back(labels[n]);
    }
    return out;
  }

  /// First `n` images and the rest, as (train, val).
  std::pair<Dataset, Dataset> split_at(std::size_t n) const {
    if (n > size()) throw ConfigError("split point " + std::to_string(n) + " beyond " + std::to_string(size()));
    std::vector<std::size_t> a(n), b(size() - n);
    std::iota(a.begin(), a.end(), std::size_t{0});
    std::iota(b.begin(), b.end(), n);
    auto tr = subset(a), va = subset(b);
    tr.split = Split::train;
    va.split = Split::val;
    return {std::move(tr), std::move(va)};
  }
};

// ---------------------------------------------------------------------------
// CIFAR binary

enum class CifarVariant { cifar10, cifar100 };

inline CifarVariant parse_cifar_variant(const std::string& s) {
  if (s == "cifar10") return CifarVariant::cifar10;
  if (s == "cifar100") return CifarVariant::cifar100;
  throw ConfigError("unknown CIFAR variant '" + s + "' (expected cifar10 or cifar100)");
}

inline std::size_t cifar_label_bytes(CifarVariant v) { return v == CifarVariant::cifar10 ? 1 : 2; }
inline std::size_t cifar_record_bytes(CifarVariant v) { return cifar_label_bytes(v) + 3 * 1024; }
inline std::size_t cifar_classes(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string() + ": cannot open (byte offset 0)");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> buf(size);
  if (size && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size)))
    throw IngestionError(path.string() + ": read failed at byte offset " + std::to_string(in.gcount()));
  return buf;
}

}  // namespace detail

/// Appends the records of one batch file to `ds`.
inline void read_cifar_file(const std::filesystem::path& path, CifarVariant v, Dataset& ds) {
  const auto buf = detail::read_file(path);
  const std::size_t rec = cifar_record_bytes(v), lb = cifar_label_bytes(v);
  if (buf.empty()) throw IngestionError(path.string() + ": empty file (byte offset 0)");
  if (buf.size() % rec != 0) {
    const std::size_t last = buf.size() / rec * rec;
    throw IngestionError(path.string() + ": truncated record at byte offset " + std::to_string(last) + " (" +
                         std::to_string(buf.size() - last) + " of " + std::to_string(rec) + " bytes)");
  }
  ds.channels = 3;
  ds.height = ds.width = 32;
  ds.class_count = cifar_classes(v);
  for (std::size_t off = 0; off < buf.size(); off += rec) {
    const std::uint8_t label = buf[off + lb - 1];
    if (label >= ds.class_count)
      throw CorruptDataError(path.string() + ": label " + std::to_string(label) + " at byte offset " +
                             std::to_string(off + lb - 1) + " exceeds " + std::to_string(ds.class_count - 1));
    ds.labels.push_back(label);
    ds.bytes.insert(ds.bytes.end(), buf.begin() + static_cast<long>(off + lb),
                    buf.begin() + static_cast<long>(off + rec));
  }
}

/// Writes byte-storage images in the CIFAR record layout (coarse label 0 for cifar100).
inline void write_cifar_file(const std::filesystem::path& path, CifarVariant v, const Dataset& ds) {
  if (ds.channels != 3 || ds.height != 32 || ds.width != 32 || !ds.byte_storage())
    throw ConfigError("CIFAR records need 3x32x32 byte images");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError(path.string() + ": cannot open for writing");
  const std::size_t m = ds.image_size();
  for (std::size_t n = 0; n < ds.size(); ++n) {
    if (v == CifarVariant::cifar100) out.put(0);
    out.put(static_cast<char>(ds.labels[n]));
    out.write(reinterpret_cast<const char*>(ds.bytes.data() + n * m), static_cast<std::streamsize>(m));
  }
  if (!out) throw IngestionError(path.string() + ": write failed");
}

inline std::pair<Dataset, Dataset> load_cifar(const std::filesystem::path& dir, CifarVariant v) {
  if (!std::filesystem::is_directory(dir)) throw IngestionError(dir.string() + ": not a directory (byte offset 0)");
  std::vector<std::string> train_files, test_files;
  if (v == CifarVariant::cifar10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back("data_batch_" + std::to_string(i) + ".bin");
    test_files = {"test_batch.bin"};
  } else {
    train_files = {"train.bin"};
    test_files = {"test.bin"};
  }
  Dataset train, test;
  for (const auto& f : train_files) read_cifar_file(dir / f, v, train);
  for (const auto& f : test_files) read_cifar_file(dir / f, v, test);
  train.split = Split::train;
  test.split = Split::val;
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Raw tensor import

inline constexpr char kRawMagic[8] = {'G', 'S', 'O', 'P', 'R', 'A', 'W', '1'};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline void put_f32(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(b, u);
}

inline float get_f32(const std::uint8_t* p) {
  const std::uint32_t u = get_u32(p);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline void write_raw(const std::filesystem::path& path, const Dataset& ds) {
  std::vector<std::uint8_t> b(kRawMagic, kRawMagic + 8);
  detail::put_u32(b, static_cast<std::uint32_t>(ds.size()));
  detail::put_u32(b, static_cast<std::uint32_t>(ds.channels));
  detail::put_u32(b, static_cast<std::uint32_t>(ds.height));
  detail::put_u32(b, static_cast<std::uint32_t>(ds.width));
  for (std::size_t n = 0; n < ds.size(); ++n)
    for (std::size_t k = 0; k < ds.image_size(); ++k) detail::put_f32(b, ds.value(n, k));
  for (auto l : ds.labels) detail::put_u32(b, static_cast<std::uint32_t>(l));
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw IngestionError(path.string() + ": write failed");
}

/// Loads a raw-tensor file; class_count 0 infers max(label) + 1.
inline Dataset read_raw(const std::filesystem::path& path, std::size_t class_count = 0) {
  const auto buf = detail::read_file(path);
  const std::string where = path.string() + ": ";
  if (buf.size() < 24) throw IngestionError(where + "header truncated at byte offset " + std::to_string(buf.size()));
  if (std::memcmp(buf.data(), kRawMagic, 8) != 0) throw IngestionError(where + "bad magic at byte offset 0");
  Dataset ds;
  const std::size_t count = detail::get_u32(&buf[8]);
  ds.channels = detail::get_u32(&buf[12]);
  ds.height = detail::get_u32(&buf[16]);
  ds.width = detail::get_u32(&buf[20]);
  const std::size_t values = count * ds.image_size();
  const std::size_t need = 24 + 4 * values + 4 * count;
  if (buf.size() < need)
    throw IngestionError(where + "data truncated at byte offset " + std::to_string(buf.size()) + " (expected " +
                         std::to_string(need) + " bytes)");
  ds.floats.resize(values);
  for (std::size_t i = 0; i < values; ++i) ds.floats[i] = detail::get_f32(&buf[24 + 4 * i]);
  std::uint32_t max_label = 0;
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t off = 24 + 4 * values + 4 * n;
    const std::uint32_t l = detail::get_u32(&buf[off]);
    if (class_count && l >= class_count)
      throw CorruptDataError(where + "label " + std::to_string(l) + " at byte offset " + std::to_string(off) +
                             " exceeds " + std::to_string(class_count - 1));
    if (l > 0x7fffffffu) throw CorruptDataError(where + "label at byte offset " + std::to_string(off) + " too large");
    max_label = std::max(max_label, l);
    ds.labels.push_back(static_cast<std::int32_t>(l));
  }
  ds.class_count = class_count ? class_count : max_label + 1;
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic covariance-separated textures

struct SynthOptions {
  double rho = 0.9;          // strength of the class-specific colour correlation
  double offset = 2.0;       // stddev of the per-image, per-channel constant
  double noise = 1.0;        // white pixel noise
  double smoothness = 3.0;   // Gaussian blur sigma of the texture field (0: white field)
  double grating = 0.0;      // amplitude of an oriented grating, per-class angle, random phase
};

namespace detail {

/// Separable 13-tap Gaussian (unit L2 norm) with circular boundary.
inline void blur_circular(std::vector<double>& f, std::size_t S, double sigma) {
  constexpr int R = 6;
  std::array<double, 2 * R + 1> k{};
  double nrm = 0;
  for (int t = -R; t <= R; ++t) nrm += (k[t + R] = std::exp(-double(t * t) / (2 * sigma * sigma))) * k[t + R];
  for (auto& v : k) v /= std::sqrt(nrm);
  std::vector<double> tmp(S * S);
  const long s = static_cast<long>(S);
  auto wrap = [s](long i) { return ((i % s) + s) % s; };
  for (long y = 0; y < s; ++y)
    for (long x = 0; x < s; ++x) {
      double a = 0;
      for (int t = -R; t <= R; ++t) a += k[t + R] * f[y * s + wrap(x + t)];
      tmp[y * s + x] = a;
    }
  for (long y = 0; y < s; ++y)
    for (long x = 0; x < s; ++x) {
      double a = 0;
      for (int t = -R; t <= R; ++t) a += k[t + R] * tmp[wrap(y + t) * s + x];
      f[y * s + x] = a;
    }
}

}  // namespace detail

/// Class k has colour covariance [[1, a, 0], [a, 1, b], [0, b, 1]] with
/// (a, b) = rho (cos t_k, sin t_k), t_k = 2 pi k / classes, applied to a smooth
/// Gaussian texture. Means are equal across classes, and the per-image offset
/// hides colour means further, so the label is carried by second-order colour
/// statistics. Labels are interleaved (image i has label i % classes).
inline Dataset synth_dataset(std::size_t classes, std::size_t per_class, std::size_t size, std::uint64_t seed,
                             const SynthOptions& opt = {}) {
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (size < 2) throw ConfigError("synthetic image size must be >= 2");
  if (!(opt.rho >= 0.0 && opt.rho < 1.0)) throw ConfigError("synthetic rho must be in [0, 1)");
  const std::size_t n = classes * per_class, pad = 6, S = size + 2 * pad;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  // Textures first, then a global normalization by the mean per-map stddev.
  std::vector<double> tex(n * 3 * size * size);
  std::vector<double> field(S * S);
  double std_sum = 0;
  for (std::size_t i = 0; i < n * 3; ++i) {
    for (auto& v : field) v = g(rng);
    if (opt.smoothness > 0) detail::blur_circular(field, S, opt.smoothness);
    double m = 0, q = 0;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double v = field[(y + pad) * S + x + pad];
        tex[(i * size + y) * size + x] = v;
        m += v;
      }
    m /= double(size * size);
    for (std::size_t p = 0; p < size * size; ++p) q += (tex[i * size * size + p] - m) * (tex[i * size * size + p] - m);
    std_sum += std::sqrt(q / double(size * size - 1));
  }
  const double scale = opt.smoothness > 0 ? double(n * 3) / std_sum : 1.0;

  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = size;
  ds.class_count = classes;
  ds.floats.resize(n * 3 * size * size);
  const std::size_t P = size * size;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    const double t = 2.0 * std::numbers::pi * double(k) / double(classes);
    const double a = opt.rho * std::cos(t), b = opt.rho * std::sin(t);
    // Cholesky factor of [[1, a, 0], [a, 1, b], [0, b, 1]].
    const double l11 = std::sqrt(1 - a * a), l21 = b / l11, l22 = std::sqrt(1 - l21 * l21);
    const double L[3][3] = {{1, 0, 0}, {a, l11, 0}, {0, l21, l22}};
    double off[3];
    for (auto& o : off) o = opt.offset * g(rng);
    const double ph = phase(rng), ang = t / 2;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        double v = 0;
        for (std::size_t j = 0; j <= c; ++j) v += L[c][j] * tex[(i * 3 + j) * P + p] * scale;
        if (opt.grating != 0.0) {
          const double y = double(p / size), x = double(p % size);
          v += opt.grating * std::cos(0.8 * (x * std::cos(ang) + y * std::sin(ang)) + ph);
        }
        ds.floats[(i * 3 + c) * P + p] = static_cast<float>(v + off[c] + opt.noise * g(rng));
      }
    ds.labels.push_back(static_cast<std::int32_t>(k));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation and batching

struct AugmentationPolicy {
  double horizontal_flip = 0.0;  // probability
  std::size_t random_crop = 0;   // zero-padding pixels before a random crop back to H x W
  std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
  std::optional<std::array<float, 3>> stddev;

  void validate() const {
    if (!(horizontal_flip >= 0.0 && horizontal_flip <= 1.0))
      throw ConfigError("flip probability must be in [0, 1]");
    if (stddev)
      for (float s : *stddev)
        if (!(s > 0.0f)) throw ConfigError("normalization stddev must be positive");
  }

  float normalize(float v, std::size_t c) const { return stddev ? (v - mean[c]) / (*stddev)[c] : v - mean[c]; }
  float denormalize(float v, std::size_t c) const { return stddev ? v * (*stddev)[c] + mean[c] : v + mean[c]; }
};

/// CIFAR protocol on byte images: flip 0.5, 4-pixel crop padding, standard
/// channel statistics. Evaluation uses the same normalization without augmentation.
inline AugmentationPolicy cifar_policy(bool train) {
  AugmentationPolicy p;
  if (train) {
    p.horizontal_flip = 0.5;
    p.random_crop = 4;
  }
  p.mean = {125.3f, 123.0f, 113.9f};
  p.stddev = std::array<float, 3>{63.0f, 62.1f, 66.7f};
  return p;
}

struct Batch {
  Tensor<float> images;
  std::vector<std::int32_t> labels;
};

namespace detail {

struct RawBatch {
  Shape shape;
  std::vector<float> data;
  std::vector<std::int32_t> labels;
};

/// Normalizes, then pads with zeros (the normalized mean) and crops, then flips.
inline void augment_into(const Dataset& ds, std::size_t n, const AugmentationPolicy& p, std::mt19937_64& rng,
                         float* dst) {
  const std::size_t C = ds.channels, H = ds.height, W = ds.width;
  long dy = 0, dx = 0;
  if (p.random_crop) {
    std::uniform_int_distribution<long> d(-static_cast<long>(p.random_crop), static_cast<long>(p.random_crop));
    dy = d(rng);
    dx = d(rng);
  }
  bool flip = false;
  if (p.horizontal_flip > 0.0) flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p.horizontal_flip;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const long sx0 = flip ? static_cast<long>(W - 1 - x) : static_cast<long>(x);
        const long sy = static_cast<long>(y) + dy, sx = sx0 + dx;
        float v = 0.0f;
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(H) && sx < static_cast<long>(W))
          v = p.normalize(ds.value(n, (c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)), c);
        dst[(c * H + y) * W + x] = v;
      }
}

}  // namespace detail

/// One epoch over a dataset: seeded permutation (or identity order), per-image
/// augmentation, final short batch. With prefetch > 0, a single producer thread
/// prepares up to `prefetch` batches ahead; the batch contents do not depend
/// on it because one RNG is consumed in batch order by one thread.
class BatchStream {
 public:
  static constexpr std::size_t kDefaultPrefetch = 4;

  BatchStream(const Dataset& ds, std::size_t batch_size, std::uint64_t shuffle_seed, AugmentationPolicy policy,
              bool shuffle = true, std::size_t prefetch = 0)
      : ds_(ds), batch_(batch_size), policy_(std::move(policy)), rng_(shuffle_seed), order_(ds.size()),
        prefetch_(prefetch) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    policy_.validate();
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle) std::shuffle(order_.begin(), order_.end(), rng_);
    if (prefetch_) worker_ = std::thread([this] { produce(); });
  }

  BatchStream(const BatchStream&) = delete;
  BatchStream& operator=(const BatchStream&) = delete;

  ~BatchStream() {
    if (worker_.joinable()) {
      {
        std::lock_guard<std::mutex> lock(mu_);
        stop_ = true;
      }
      cv_.notify_all();
      worker_.join();
    }
  }

  std::size_t batches() const { return (ds_.size() + batch_ - 1) / batch_; }

  bool next(Batch& out) {
    detail::RawBatch raw;
    if (prefetch_) {
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait(lock, [this] { return !queue_.empty() || done_; });
      if (queue_.empty()) return false;
      raw = std::move(queue_.front());
      queue_.pop_front();
      lock.unlock();
      cv_.notify_all();
    } else if (!make(raw)) {
      return false;
    }
    out.images = Tensor<float>(std::move(raw.shape), std::move(raw.data));
    out.labels = std::move(raw.labels);
    return true;
  }

 private:
  bool make(detail::RawBatch& b) {
    if (cursor_ >= order_.size()) return false;
    const std::size_t count = std::min(batch_, order_.size() - cursor_), m = ds_.image_size();
    b.shape = Shape{count, ds_.channels, ds_.height, ds_.width};
    b.data.resize(count * m);
    b.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t n = order_[cursor_ + i];
      detail::augment_into(ds_, n, policy_, rng_, b.data.data() + i * m);
      b.labels[i] = ds_.labels[n];
    }
    cursor_ += count;
    return true;
  }

  void produce() {
    for (;;) {
      detail::RawBatch b;
      const bool more = make(b);
      std::unique_lock<std::mutex> lock(mu_);
      if (!more) {
        done_ = true;
        cv_.notify_all();
        return;
      }
      cv_.wait(lock, [this] { return queue_.size() < prefetch_ || stop_; });
      if (stop_) return;
      queue_.push_back(std::move(b));
      cv_.notify_all();
    }
  }

  const Dataset& ds_;
  std::size_t batch_;
  AugmentationPolicy policy_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t prefetch_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<detail::RawBatch> queue_;
  bool done_ = false;
  bool stop_ = false;
};

}  // namespace gsop
