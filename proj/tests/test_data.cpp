#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gsop/data.hpp"

using namespace gsop;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("gsop_test_data_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Two handcrafted CIFAR-10 records: label 3 with pixel k = k mod 251, label 9
// with pixel k = 255 - (k mod 256).
std::vector<std::uint8_t> golden_cifar10() {
  std::vector<std::uint8_t> b;
  b.push_back(3);
  for (int k = 0; k < 3072; ++k) b.push_back(static_cast<std::uint8_t>(k % 251));
  b.push_back(9);
  for (int k = 0; k < 3072; ++k) b.push_back(static_cast<std::uint8_t>(255 - k % 256));
  return b;
}

// Binary logistic regression by full-batch gradient descent; returns validation accuracy.
double logistic_probe(const std::vector<std::vector<double>>& f, const std::vector<std::int32_t>& y, std::size_t n_train) {
  const std::size_t d = f[0].size();
  std::vector<double> mu(d, 0), sd(d, 0);
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += f[i][j] / double(n_train);
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(f[i][j] - mu[j], 2) / double(n_train);
  for (auto& s : sd) s = std::sqrt(s) + 1e-12;
  std::vector<double> w(d + 1, 0.0);
  auto z = [&](std::size_t i) {
    double s = w[d];
    for (std::size_t j = 0; j < d; ++j) s += w[j] * (f[i][j] - mu[j]) / sd[j];
    return s;
  };
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> g(d + 1, 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
      const double e = 1.0 / (1.0 + std::exp(-z(i))) - y[i];
      for (std::size_t j = 0; j < d; ++j) g[j] += e * (f[i][j] - mu[j]) / sd[j];
      g[d] += e;
    }
    for (std::size_t j = 0; j <= d; ++j) w[j] -= 0.5 * g[j] / double(n_train);
  }
  std::size_t ok = 0;
  for (std::size_t i = n_train; i < f.size(); ++i) ok += (z(i) > 0) == (y[i] == 1);
  return double(ok) / double(f.size() - n_train);
}

}  // namespace

TEST(Cifar, RecordLengths) {
  EXPECT_EQ(cifar_record_bytes(CifarVariant::cifar10), 3073u);
  EXPECT_EQ(cifar_record_bytes(CifarVariant::cifar100), 3074u);
}

TEST(Cifar, GoldenTwoRecordFile) {
  auto d = temp_dir("golden");
  write_bytes(d / "golden.bin", golden_cifar10());
  Dataset ds;
  read_cifar_file(d / "golden.bin", CifarVariant::cifar10, ds);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.labels, (std::vector<std::int32_t>{3, 9}));
  EXPECT_EQ(ds.class_count, 10u);
  EXPECT_EQ(ds.image_size(), 3072u);
  // Red channel row-major first, then green (offset 1024), then blue (2048).
  EXPECT_EQ(ds.value(0, 0), 0.0f);
  EXPECT_EQ(ds.value(0, 32), 32.0f);          // red, row 1, column 0
  EXPECT_EQ(ds.value(0, 1024 + 5), 25.0f);    // green (1029 mod 251)
  EXPECT_EQ(ds.value(1, 2048 + 1), 254.0f);   // blue, second record
  for (std::size_t k = 0; k < 3072; ++k) {
    ASSERT_EQ(ds.bytes[k], k % 251);
    ASSERT_EQ(ds.bytes[3072 + k], 255 - k % 256);
  }
}

TEST(Cifar, Cifar100UsesFineLabel) {
  auto d = temp_dir("c100");
  std::vector<std::uint8_t> b{7, 42};
  b.resize(3074, 1);
  write_bytes(d / "train.bin", b);
  write_bytes(d / "test.bin", b);
  auto [train, test] = load_cifar(d, CifarVariant::cifar100);
  EXPECT_EQ(train.labels, (std::vector<std::int32_t>{42}));
  EXPECT_EQ(train.class_count, 100u);
  EXPECT_EQ(test.split, Split::val);
}

TEST(Cifar, WriteLoadRoundTripBitwise) {
  auto d = temp_dir("roundtrip");
  Dataset ds;
  ds.height = ds.width = 32;
  ds.class_count = 10;
  std::mt19937_64 rng(1);
  for (int n = 0; n < 5; ++n) {
    ds.labels.push_back(n * 2);
    for (int k = 0; k < 3072; ++k) ds.bytes.push_back(static_cast<std::uint8_t>(rng()));
  }
  for (int i = 1; i <= 5; ++i) write_cifar_file(d / ("data_batch_" + std::to_string(i) + ".bin"), CifarVariant::cifar10, ds);
  write_cifar_file(d / "test_batch.bin", CifarVariant::cifar10, ds);
  auto [train, test] = load_cifar(d, CifarVariant::cifar10);
  EXPECT_EQ(train.size(), 25u);
  EXPECT_EQ(test.bytes, ds.bytes);
  EXPECT_EQ(test.labels, ds.labels);
}

TEST(Cifar, IngestionErrors) {
  auto d = temp_dir("errors");
  EXPECT_THROW(load_cifar(d / "missing", CifarVariant::cifar10), IngestionError);
  EXPECT_THROW(load_cifar(d, CifarVariant::cifar10), IngestionError);
  auto b = golden_cifar10();
  b.resize(3073 + 100);
  write_bytes(d / "short.bin", b);
  Dataset ds;
  try {
    read_cifar_file(d / "short.bin", CifarVariant::cifar10, ds);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 3073"), std::string::npos) << e.what();
  }
  b = golden_cifar10();
  b[3073] = 10;
  write_bytes(d / "label.bin", b);
  try {
    read_cifar_file(d / "label.bin", CifarVariant::cifar10, ds);
    FAIL();
  } catch (const CorruptDataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 3073"), std::string::npos) << e.what();
  }
}

TEST(Raw, RoundTripAndHeader) {
  auto d = temp_dir("raw");
  auto ds = synth_dataset(3, 4, 5, 1);
  write_raw(d / "x.raw", ds);
  const auto size = fs::file_size(d / "x.raw");
  EXPECT_EQ(size, 24u + 4u * 12 * 75 + 4u * 12);
  auto back = read_raw(d / "x.raw");
  EXPECT_EQ(back.floats, ds.floats);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.class_count, 3u);
  EXPECT_EQ(back.height, 5u);
  std::ifstream in(d / "x.raw", std::ios::binary);
  char head[12];
  in.read(head, 12);
  EXPECT_EQ(std::string(head, 8), "GSOPRAW1");
  EXPECT_EQ(head[8], 12);  // little-endian count
  EXPECT_EQ(head[9], 0);
  EXPECT_THROW(read_raw(d / "x.raw", 2), CorruptDataError);
  write_bytes(d / "bad.raw", {'G', 'S', 'O', 'P', 'R', 'A', 'W', '2', 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_THROW(read_raw(d / "bad.raw"), IngestionError);
}

TEST(Synth, BalancedDeterministic) {
  auto a = synth_dataset(2, 100, 16, 7), b = synth_dataset(2, 100, 16, 7), c = synth_dataset(2, 100, 16, 8);
  EXPECT_EQ(a.size(), 200u);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 0), 100);
  EXPECT_EQ(a.floats, b.floats);
  EXPECT_NE(a.floats, c.floats);
  EXPECT_NO_THROW(a.validate());
  EXPECT_THROW(synth_dataset(1, 10, 16, 1), ConfigError);
}

TEST(Synth, ClassSeparationIsSecondOrder) {
  auto ds = synth_dataset(2, 500, 16, 1234);
  std::vector<std::vector<double>> means, covs;
  const std::size_t P = 256;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    double m[3] = {0, 0, 0};
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < P; ++p) m[c] += ds.value(n, c * P + p) / double(P);
    std::vector<double> cv;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i; j < 3; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < P; ++p) s += (ds.value(n, i * P + p) - m[i]) * (ds.value(n, j * P + p) - m[j]);
        cv.push_back(s / double(P));
      }
    means.push_back({m[0], m[1], m[2]});
    covs.push_back(cv);
  }
  EXPECT_LT(logistic_probe(means, ds.labels, 800), 0.60);
  EXPECT_GT(logistic_probe(covs, ds.labels, 800), 0.80);
}

TEST(Batches, SizesAndFinalShortBatch) {
  auto ds = synth_dataset(2, 100, 4, 1);
  BatchStream s(ds, 128, 1, {});
  EXPECT_EQ(s.batches(), 2u);
  Batch b;
  ASSERT_TRUE(s.next(b));
  EXPECT_EQ(b.images.shape(), (Shape{128, 3, 4, 4}));
  ASSERT_TRUE(s.next(b));
  EXPECT_EQ(b.images.dim(0), 72u);
  EXPECT_EQ(b.labels.size(), 72u);
  EXPECT_FALSE(s.next(b));
  EXPECT_THROW(BatchStream(ds, 0, 1, {}), ConfigError);
}

TEST(Batches, IdentityPolicyGivesRawData) {
  auto ds = synth_dataset(2, 5, 4, 2);
  BatchStream s(ds, 4, 1, {}, false);
  Batch b;
  std::vector<float> all;
  std::vector<std::int32_t> labels;
  while (s.next(b)) {
    all.insert(all.end(), b.images.values().begin(), b.images.values().end());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  }
  EXPECT_EQ(all, ds.floats);
  EXPECT_EQ(labels, ds.labels);
}

TEST(Batches, SeededOrderAndPrefetchAgree) {
  auto ds = synth_dataset(4, 20, 8, 3);
  AugmentationPolicy p;
  p.horizontal_flip = 0.5;
  p.random_crop = 2;
  p.mean = {0.1f, 0.2f, 0.3f};
  p.stddev = std::array<float, 3>{2.0f, 1.0f, 0.5f};
  auto collect = [&](std::uint64_t seed, std::size_t prefetch) {
    BatchStream s(ds, 7, seed, p, true, prefetch);
    std::vector<float> v;
    Batch b;
    while (s.next(b)) {
      v.insert(v.end(), b.images.values().begin(), b.images.values().end());
      for (auto l : b.labels) v.push_back(float(l));
    }
    return v;
  };
  EXPECT_EQ(collect(5, 0), collect(5, 0));
  EXPECT_EQ(collect(5, 0), collect(5, BatchStream::kDefaultPrefetch));
  EXPECT_NE(collect(5, 0), collect(6, 0));
  // Early destruction with a full queue must not hang.
  BatchStream s(ds, 1, 5, p, true, 2);
  Batch b;
  ASSERT_TRUE(s.next(b));
}

TEST(Augmentation, FlipCropAndNormalization) {
  Dataset ds;
  ds.height = 2;
  ds.width = 3;
  ds.class_count = 2;
  ds.floats = {1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6};
  ds.labels = {1};
  AugmentationPolicy flip;
  flip.horizontal_flip = 1.0;
  BatchStream s(ds, 1, 1, flip, false);
  Batch b;
  ASSERT_TRUE(s.next(b));
  EXPECT_EQ(std::vector<float>(b.images.values().begin(), b.images.values().begin() + 6),
            (std::vector<float>{3, 2, 1, 6, 5, 4}));
  EXPECT_EQ(b.labels[0], 1);

  AugmentationPolicy crop;
  crop.random_crop = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    BatchStream c(ds, 1, seed, crop, false);
    ASSERT_TRUE(c.next(b));
    EXPECT_EQ(b.images.shape(), (Shape{1, 3, 2, 3}));
    for (float v : b.images.values()) EXPECT_TRUE(v == 0.0f || (v >= 1.0f && v <= 6.0f));
  }

  auto p = cifar_policy(false);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(p.denormalize(p.normalize(200.0f, c), c), 200.0f);
  AugmentationPolicy bad;
  bad.horizontal_flip = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}
