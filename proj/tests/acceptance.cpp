// Acceptance criteria 1-10: one PASS/FAIL line each on stdout, exit status 1
// if any criterion fails. Tolerances and time limits are pinned below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gsop.hpp"
#include "oracles.hpp"

using namespace gsop;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// 1. Parameter counts of the conv4_x blocks; the published figures have two
// decimals, so the count is compared at that precision.
Outcome criterion1() {
  constexpr double kTol = 0.02, kChannel = 0.72, kPosition = 0.16;
  const double c = std::stod(format_millions(count_arch("gsop-channel-conv4x", 14, 14).total_params()));
  const auto pos_raw = count_arch("gsop-position-conv4x", 14, 14).total_params();
  const double p = std::stod(format_millions(pos_raw));
  Outcome o;
  o.pass = rel(c, kChannel) <= kTol && rel(p, kPosition) <= kTol;
  o.detail = "channel " + fmt("%.2fM", c) + ", position " + fmt("%.2fM", p) + " (raw " + std::to_string(pos_raw) +
             ", " + fmt("%+.1f%%", 100 * (pos_raw / 1e6 - kPosition) / kPosition) + ")";
  return o;
}

// 2. MAC counts of the same blocks.
Outcome criterion2() {
  constexpr double kTol = 0.02, kChannel = 28.1, kPosition = 26.2;
  const double c = count_arch("gsop-channel-conv4x", 14, 14).total_macs() / 1e6;
  const double p = count_arch("gsop-position-conv4x", 14, 14).total_macs() / 1e6;
  Outcome o;
  o.pass = rel(c, kChannel) <= kTol && rel(p, kPosition) <= kTol;
  o.detail = "channel " + fmt("%.2fM", c) + " (" + fmt("%+.2f%%", 100 * (c - kChannel) / kChannel) + "), position " +
             fmt("%.2fM", p) + " (" + fmt("%+.2f%%", 100 * (p - kPosition) / kPosition) + ")";
  return o;
}

// 3. MAC ratio of GSoP-Net1 (no downsampling in the last stage) to the vanilla
// network at 224x224, on the ResNet-50 backbone.
Outcome criterion3() {
  constexpr double kTarget = 1.58, kTol = 0.05;
  auto ratio = [](const char* a, const char* b) {
    return double(count_arch(a).total_macs()) / double(count_arch(b).total_macs());
  };
  const double r50 = ratio("resnet50_gsop1", "resnet50_vanilla");
  const double r26 = ratio("resnet26_gsop1", "resnet26_vanilla");
  Outcome o;
  o.pass = std::abs(r50 - kTarget) <= kTol;
  o.detail = "resnet50 " + fmt("%.3f", r50) + " (resnet26 " + fmt("%.3f", r26) + ", informational)";
  return o;
}

// 4. GSoP-Net2 representation lengths.
Outcome criterion4() {
  IsqrtConfig a, b;
  a.c_reduced = 256;
  b.c_reduced = 128;
  const auto la = a.representation_length(), lb = b.representation_length();
  const auto net = preset("resnet26_gsop2").representation_dim();
  std::mt19937_64 rng(1);
  IsqrtCovHead<float> head(512, b, rng);
  NoGradGuard g;
  const auto realized = head.forward(random_normal<float>({2, 512, 4, 4}, rng), Mode::eval).dim(1);
  Outcome o;
  o.pass = la == 32896 && lb == 8256 && net == 32896 && realized == 8256;
  o.detail = "c_r=256 -> " + std::to_string(la) + ", c_r=128 -> " + std::to_string(lb) + ", resnet26_gsop2 head " +
             std::to_string(net) + ", realized " + std::to_string(realized);
  return o;
}

// 5. Finite-difference certification on three seeds.
Outcome criterion5() {
  const std::vector<std::pair<std::string, double>> suites{
      {"channel", 1e-4}, {"position", 1e-4}, {"fused", 1e-4}, {"isqrt", 1e-3}};
  Outcome o{true, ""};
  for (const auto& [suite, tol] : suites) {
    double worst = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) worst = std::max(worst, certify(suite, seed).max_error());
    o.pass &= worst < tol;
    o.detail += (o.detail.empty() ? "" : ", ") + suite + " " + fmt("%.1e", worst);
  }
  return o;
}

// 6. Covariance against the double-loop oracle, plus randomized properties.
Outcome criterion6() {
  constexpr double kOracleTol = 1e-12;
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> dim(2, 9);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t N = 2, C = dim(rng), H = dim(rng), W = dim(rng);
    auto x = random_normal<double>({N, C, H, W}, rng, 1.5);
    const bool chan = t % 2 == 0;
    auto got = chan ? channel_covariance(x) : position_covariance(x);
    auto want = chan ? oracle::channel_covariance(x.values(), N, C, H * W)
                     : oracle::position_covariance(x.values(), N, C, H * W);
    double scale = 0.0;
    for (double v : want) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]) / scale);
  }

  std::size_t cases = 0, failures = 0;
  std::uniform_real_distribution<double> u(-3.0, 3.0), s(0.1, 4.0);
  for (int t = 0; t < 1000; ++t, ++cases) {
    const std::size_t C = dim(rng), H = dim(rng) / 2 + 1, W = dim(rng) / 2 + 1, P = H * W;
    const bool chan = t % 2 == 0;
    auto x = random_normal<double>({1, C, H, W}, rng);
    auto cov = [&](const Tensor<double>& in) { return (chan ? channel_covariance(in) : position_covariance(in)).values(); };
    const auto a = cov(x);
    const std::size_t d = chan ? C : P;
    double scale = 1e-300;
    for (double v : a) scale = std::max(scale, std::abs(v));
    bool ok = true;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) ok &= a[i * d + j] == a[j * d + i];
    ok &= oracle::min_eigenvalue(a.data(), d) >= -1e-12 * scale;
    // Shift: a constant per channel (channel-wise) or per position (position-wise).
    std::vector<double> shifted(x.values());
    std::vector<double> offsets(chan ? C : P);
    for (auto& o : offsets) o = u(rng);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) shifted[c * P + p] += chan ? offsets[c] : offsets[p];
    const auto b = cov(Tensor<double>(x.shape(), shifted));
    for (std::size_t i = 0; i < a.size(); ++i) ok &= std::abs(a[i] - b[i]) <= 1e-10 * (scale + 9.0);
    const double k = s(rng);
    std::vector<double> scaled(x.values());
    for (auto& v : scaled) v *= k;
    const auto c2 = cov(Tensor<double>(x.shape(), scaled));
    for (std::size_t i = 0; i < a.size(); ++i) ok &= std::abs(c2[i] - k * k * a[i]) <= 1e-12 * k * k * scale;
    failures += !ok;
  }
  Outcome o;
  o.pass = worst <= kOracleTol && failures == 0 && cases >= 1000;
  o.detail = "oracle max rel diff " + fmt("%.1e", worst) + " over 100 inputs, " + std::to_string(cases - failures) +
             "/" + std::to_string(cases) + " property cases";
  return o;
}

// 7. Five Newton-Schulz iterations against the eigendecomposition oracle.
Outcome criterion7() {
  constexpr double kTol = 5e-2;
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd A = oracle::random_spd(64, 1.0, 100.0, rng);
    const Eigen::MatrixXd S = oracle::sqrtm(A);
    auto y = newton_schulz_sqrt(Tensor<double>(Shape{64, 64}, oracle::from_matrix(A)), 5);
    const Eigen::MatrixXd Y = oracle::to_matrix(y.data().data(), 64);
    worst = std::max(worst, (Y - S).norm() / S.norm());
  }
  return {worst < kTol, "worst relative Frobenius error " + fmt("%.4f", worst) + " over 50 matrices, cond 100"};
}

// 8. Every intermediate shape of both conv4_x block columns.
Outcome criterion8() {
  std::mt19937_64 rng(8);
  std::vector<std::string> bad;
  std::size_t checked = 0;
  auto expect = [&](const char* what, const Shape& got, const Shape& want) {
    ++checked;
    if (got != want) bad.push_back(std::string(what) + " " + to_string(got) + " != " + to_string(want));
  };
  NoGradGuard g;
  auto x = random_normal<float>({1, 1024, 14, 14}, rng);
  {
    GsopChannelBlock<float> b(conv4x_channel_config(), rng);
    expect("channel input", x.shape(), {1, 1024, 14, 14});
    auto r = b.reduce().forward(x, Mode::eval);
    expect("channel 1x1 conv", r.shape(), {1, 128, 14, 14});
    auto cov = channel_covariance(r);
    expect("channel covariance", cov.shape(), {1, 128, 128});
    auto rows = b.rownorm().forward(cov, Mode::eval);
    expect("channel row-wise normalized", rows.shape(), {1, 128, 1, 128});
    expect("channel row conv", b.excite().hidden(rows, Mode::eval).shape(), {1, 512, 1, 1});
    expect("channel conv + sigmoid", b.weights(x, Mode::eval).shape(), {1, 1024, 1, 1});
    expect("channel scaled output", b.forward(x, Mode::eval).shape(), {1, 1024, 14, 14});
  }
  {
    GsopPositionBlock<float> b(conv4x_position_config(), rng);
    auto r = b.reduce().forward(x, Mode::eval);
    expect("position 1x1 conv", r.shape(), {1, 128, 14, 14});
    auto d = adaptive_avg_pool2d(r, 8, 8);
    expect("position downsample", d.shape(), {1, 128, 8, 8});
    auto cov = position_covariance(d);
    expect("position covariance", cov.shape(), {1, 64, 64});
    auto rows = b.rownorm().forward(cov, Mode::eval);
    expect("position row-wise normalized", rows.shape(), {1, 64, 1, 64});
    expect("position row conv", b.excite().hidden(rows, Mode::eval).shape(), {1, 256, 1, 1});
    expect("position conv + sigmoid", b.excite().forward(rows, Mode::eval).shape(), {1, 64, 1, 1});
    expect("position upsampled map", b.weights(x, Mode::eval).shape(), {1, 1, 14, 14});
    expect("position scaled output", b.forward(x, Mode::eval).shape(), {1, 1024, 14, 14});
  }
  Outcome o;
  o.pass = bad.empty();
  o.detail = std::to_string(checked - bad.size()) + "/" + std::to_string(checked) + " shapes";
  for (const auto& s : bad) o.detail += "; " + s;
  return o;
}

// 9. Channel-GSoP toy network vs. the vanilla toy network of matched budget
// on the covariance-separated synthetic set, median over three seeds.
Outcome criterion9() {
  constexpr double kMinGap = 10.0;  // percentage points
  auto run = [](const std::string& arch, std::uint64_t seed) {
    auto all = synth_dataset(2, 500, 16, seed);
    auto [tr, va] = all.split_at(800);
    TrainConfig cfg;
    cfg.lr_initial = 0.05;
    cfg.lr_schedule = {{15, 0.1}};
    cfg.momentum = 0.9;
    cfg.weight_decay = 1e-4;
    cfg.batch_size = 32;
    cfg.epochs = 20;
    cfg.seed = seed;
    cfg.eval_every = 20;
    cfg.train_policy.horizontal_flip = 0.5;
    auto net = build_network(preset(arch), seed);
    train(*net, tr, &va, cfg);
    return evaluate(*net, va).top1;
  };
  std::vector<double> g, v;
  for (std::uint64_t seed : {1, 2, 3}) {
    g.push_back(run("toy_gsop1", seed));
    v.push_back(run("toy_vanilla", seed));
  }
  auto median = [](std::vector<double> x) {
    std::sort(x.begin(), x.end());
    return x[1];
  };
  const double mg = median(g), mv = median(v);
  Outcome o;
  o.pass = mv - mg >= kMinGap;
  o.detail = "val error gsop " + fmt("%.2f", g[0]) + "/" + fmt("%.2f", g[1]) + "/" + fmt("%.2f", g[2]) + " vanilla " +
             fmt("%.2f", v[0]) + "/" + fmt("%.2f", v[1]) + "/" + fmt("%.2f", v[2]) + ", median gap " +
             fmt("%.2f", mv - mg) + " pp (need >= 10)";
  return o;
}

// 10. Seeded reproducibility, checkpoint round trip, golden CIFAR file.
Outcome criterion10() {
  const auto dir = fs::temp_directory_path() / "gsop_acceptance_10";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<std::string> failed;

  auto ds = synth_dataset(2, 24, 16, 10);
  auto [tr, va] = ds.split_at(32);
  TrainConfig cfg;
  cfg.lr_initial = 0.05;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  cfg.seed = 7;
  cfg.train_policy.horizontal_flip = 0.5;
  cfg.train_policy.random_crop = 2;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  auto a = build_network(preset("toy_gsop1"), 7), b = build_network(preset("toy_gsop1"), 7);
  train(*a, tr, &va, cfg, {dir / "a", "run", {}});
  train(*b, tr, &va, cfg, {dir / "b", "run", {}});
  if (slurp(dir / "a" / "metrics.csv") != slurp(dir / "b" / "metrics.csv")) failed.push_back("metrics differ");
  if (slurp(dir / "a" / "checkpoint.gsop") != slurp(dir / "b" / "checkpoint.gsop"))
    failed.push_back("checkpoints differ");

  const auto bytes = slurp(dir / "a" / "checkpoint.gsop");
  const auto ckpt = read_checkpoint(dir / "a" / "checkpoint.gsop");
  const auto again = encode_checkpoint(ckpt);
  if (std::string(again.begin(), again.end()) != bytes) failed.push_back("re-encoded checkpoint differs");
  auto fresh = build_network(preset("toy_gsop1"), 1234);
  restore_checkpoint(*fresh, ckpt);
  auto pa = a->parameters(), pf = fresh->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].tensor->values() != pf[i].tensor->values()) failed.push_back("restored " + pa[i].name);
  const auto ea = evaluate(*a, va), ef = evaluate(*fresh, va);
  if (ea.top1 != ef.top1 || ea.loss != ef.loss) failed.push_back("restored evaluation differs");

  // Golden CIFAR-10 file: labels 3 and 9; record 0 pixel k = k mod 251,
  // record 1 pixel k = 255 - (k mod 256); channel-major 32x32 planes.
  std::vector<char> golden;
  golden.push_back(3);
  for (int k = 0; k < 3072; ++k) golden.push_back(static_cast<char>(k % 251));
  golden.push_back(9);
  for (int k = 0; k < 3072; ++k) golden.push_back(static_cast<char>(255 - k % 256));
  {
    std::ofstream out(dir / "golden.bin", std::ios::binary);
    out.write(golden.data(), static_cast<std::streamsize>(golden.size()));
  }
  Dataset g;
  read_cifar_file(dir / "golden.bin", CifarVariant::cifar10, g);
  bool golden_ok = g.size() == 2 && g.labels == std::vector<std::int32_t>{3, 9} && g.height == 32 && g.width == 32;
  golden_ok = golden_ok && g.value(0, 1024 + 5) == 25.0f && g.value(1, 0) == 255.0f && g.value(1, 3071) == 0.0f;
  for (int k = 0; golden_ok && k < 3072; ++k)
    golden_ok = g.value(0, k) == float(k % 251) && g.value(1, k) == float(255 - k % 256);
  if (!golden_ok) failed.push_back("golden CIFAR file");

  Outcome o;
  o.pass = failed.empty();
  o.detail = failed.empty() ? "metrics and checkpoints identical, round trip bitwise, golden file exact" : "";
  for (const auto& f : failed) o.detail += (o.detail.empty() ? "" : "; ") + f;
  fs::remove_all(dir);
  return o;
}

}  // namespace

// Optional arguments restrict the run to the listed criterion numbers.
int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  struct Criterion {
    int id;
    double limit_s;  // 0: no time limit
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, 1.0, criterion1},  {2, 1.0, criterion2},    {3, 0.0, criterion3},   {4, 0.0, criterion4},
      {5, 300.0, criterion5}, {6, 120.0, criterion6}, {7, 60.0, criterion7},  {8, 1.0, criterion8},
      {9, 1800.0, criterion9}, {10, 0.0, criterion10},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0.0 || s < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::string limit = c.limit_s > 0.0 ? fmt(" (limit %.0fs)", c.limit_s) : "";
    std::printf("CRITERION %d: %s  %s  [%.2fs%s%s]\n", c.id, pass ? "PASS" : "FAIL", o.detail.c_str(), s,
                limit.c_str(), in_time ? "" : ", over time");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
