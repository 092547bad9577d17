#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gsop/backbone.hpp"
#include "gsop/checkpoint.hpp"
#include "gsop/data.hpp"
#include "gsop/ops.hpp"

namespace gsop {

/// At `epoch` the current rate is multiplied by `multiplier` (steps compound).
struct LrStep {
  std::size_t epoch = 0;
  double multiplier = 1.0;
  bool operator==(const LrStep&) const = default;
};

struct TrainConfig {
  double lr_initial = 0.1;
  std::vector<LrStep> lr_schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t eval_every = 1;        // 0: never evaluate
  std::size_t prefetch = 0;
  AugmentationPolicy train_policy;
  AugmentationPolicy eval_policy;

  void validate() const {
    if (!(lr_initial > 0.0) || !std::isfinite(lr_initial)) throw ConfigError("lr_initial must be positive");
    for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
      if (!(lr_schedule[i].multiplier > 0.0)) throw ConfigError("lr schedule multipliers must be positive");
      if (i > 0 && lr_schedule[i].epoch <= lr_schedule[i - 1].epoch)
        throw ConfigError("lr schedule epochs must be strictly increasing");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    train_policy.validate();
    eval_policy.validate();
  }
};

/// ImageNet recipe: 0.1, divided by 10 every 30 epochs, 100 epochs, batch 160.
inline TrainConfig imagenet_train_config() {
  TrainConfig c;
  c.lr_initial = 0.1;
  c.lr_schedule = {{30, 0.1}, {60, 0.1}, {90, 0.1}};
  c.batch_size = 160;
  c.epochs = 100;
  return c;
}

/// CIFAR recipe: 0.25, reduced to 0.025 at epoch 80 and 0.0025 at epoch 95.
inline TrainConfig cifar_train_config() {
  TrainConfig c;
  c.lr_initial = 0.25;
  c.lr_schedule = {{80, 0.1}, {95, 0.1}};
  c.batch_size = 128;
  c.epochs = 110;
  c.train_policy = cifar_policy(true);
  c.eval_policy = cifar_policy(false);
  return c;
}

inline double lr_at(const TrainConfig& c, std::size_t epoch) {
  double lr = c.lr_initial;
  for (const auto& s : c.lr_schedule)
    if (epoch >= s.epoch) lr *= s.multiplier;
  return lr;
}

/// Classic coupled SGD: v = m v + g + wd p, p -= lr v. Normalization
/// parameters skip the decay term. Gradients are checked before any update,
/// so a non-finite gradient leaves every parameter untouched.
template <class T>
void sgd_step(const std::vector<ParamSlot<T>>& params, std::vector<std::vector<T>>& velocity, double lr,
              double momentum, double weight_decay) {
  if (velocity.size() != params.size()) {
    velocity.clear();
    for (const auto& p : params) velocity.emplace_back(p.tensor->numel(), T(0));
  }
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (T g : p.tensor->grad())
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter '" + p.name + "'");
  }
  const T m = static_cast<T>(momentum), l = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& t = *params[i].tensor;
    const T wd = params[i].kind == ParamKind::norm ? T(0) : static_cast<T>(weight_decay);
    auto w = t.mutable_data();
    auto& v = velocity[i];
    if (t.has_grad()) {
      auto g = t.grad();
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = m * v[k] + g[k] + wd * w[k];
        w[k] -= l * v[k];
      }
    } else {
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = m * v[k] + wd * w[k];
        w[k] -= l * v[k];
      }
    }
  }
}

struct EvalResult {
  double top1 = 0.0;  // error, percent
  std::optional<double> top5;
  double loss = 0.0;
};

namespace detail {

/// Center crop [N, C, H, W] to [N, C, h, w].
template <class T>
Tensor<T> center_crop(const Tensor<T>& x, std::size_t h, std::size_t w) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == h && W == w) return x;
  if (H < h || W < w) throw DimensionError("cannot crop " + to_string(x.shape()) + " to " + std::to_string(h) + "x" +
                                           std::to_string(w));
  const std::size_t oy = (H - h) / 2, ox = (W - w) / 2;
  std::vector<T> out(N * C * h * w);
  auto src = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(nc * h + y) * w + xx] = src[(nc * H + y + oy) * W + xx + ox];
  return Tensor<T>(Shape{N, C, h, w}, std::move(out));
}

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Seed of the shuffle/augmentation stream of one epoch; a function of
/// (seed, epoch) only, which is what makes resumed runs match.
inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return detail::splitmix64(detail::splitmix64(seed) ^ static_cast<std::uint64_t>(epoch));
}

/// Eval-mode pass over a dataset in its stored order. Images larger than the
/// network input are center-cropped.
template <class T>
EvalResult evaluate(Network<T>& net, const Dataset& ds, const AugmentationPolicy& policy = {},
                    std::size_t batch_size = 64) {
  NoGradGuard guard;
  const auto& spec = net.spec();
  BatchStream stream(ds, batch_size, 0, AugmentationPolicy{0.0, 0, policy.mean, policy.stddev}, false);
  std::size_t wrong1 = 0, wrong5 = 0;
  double loss = 0.0;
  Batch b;
  while (stream.next(b)) {
    Tensor<T> x;
    if constexpr (std::is_same_v<T, float>) {
      x = detail::center_crop(b.images, spec.input_h, spec.input_w);
    } else {
      Tensor<float> c = detail::center_crop(b.images, spec.input_h, spec.input_w);
      x = Tensor<T>(c.shape(), std::vector<T>(c.data().begin(), c.data().end()));
    }
    Tensor<T> logits = net.forward(x, Mode::eval);
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    auto z = logits.data();
    for (std::size_t i = 0; i < N; ++i) {
      const T* row = z.data() + i * K;
      const auto y = static_cast<std::size_t>(b.labels[i]);
      std::size_t above = 0;
      for (std::size_t k = 0; k < K; ++k) above += row[k] > row[y] || (row[k] == row[y] && k < y);
      wrong1 += above >= 1;
      wrong5 += above >= 5;
      double zmax = row[0];
      for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, double(row[k]));
      double denom = 0.0;
      for (std::size_t k = 0; k < K; ++k) denom += std::exp(double(row[k]) - zmax);
      loss += std::log(denom) + zmax - double(row[y]);
    }
  }
  EvalResult r;
  const double n = static_cast<double>(std::max<std::size_t>(ds.size(), 1));
  r.top1 = 100.0 * double(wrong1) / n;
  if (spec.classes >= 5) r.top5 = 100.0 * double(wrong5) / n;
  r.loss = loss / n;
  return r;
}

struct TrainState {
  std::size_t epoch = 0;  // epochs completed
  std::uint64_t step = 0;
  std::vector<std::vector<float>> momentum;
  double best_val_top1 = std::numeric_limits<double>::quiet_NaN();
  std::vector<MetricsRow> log;
};

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[160];
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", *v);
    return std::string(b);
  };
  std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6f,", r.epoch, r.lr, r.train_loss);
  return std::string(buf) + opt(r.val_top1) + "," + opt(r.val_top5);
}

inline std::string metrics_csv(const std::vector<MetricsRow>& log) {
  std::string s = "epoch,lr,train_loss,val_top1,val_top5\n";
  for (const auto& r : log) s += format_metrics_row(r) + "\n";
  return s;
}

/// Where a run writes its artifacts. An empty directory disables all output.
struct TrainOutput {
  std::filesystem::path dir;
  std::string config_text;  // stored in every checkpoint
  std::function<void(const MetricsRow&)> on_epoch;
  static constexpr const char* kMetricsFile = "metrics.csv";
  static constexpr const char* kCheckpointFile = "checkpoint.gsop";
};

template <class T>
Checkpoint make_checkpoint(Network<T>& net, const TrainState& s, const std::string& config_text) {
  Checkpoint c;
  auto params = net.parameters();
  c.params = named_tensors(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedTensor m{params[i].name, c.params[i].dims, {}};
    if (i < s.momentum.size()) m.values = s.momentum[i];
    else m.values.assign(c.params[i].values.size(), 0.0f);
    c.momentum.push_back(std::move(m));
  }
  c.buffers = named_buffers(net.buffers());
  std::ostringstream rng;
  rng << net.dropout_rng();
  c.rng_state = rng.str();
  c.epoch = s.epoch;
  c.step = s.step;
  c.best_val_top1 = s.best_val_top1;
  c.log = s.log;
  c.config_text = config_text;
  return c;
}

/// Restores weights, buffers and generator state into `net`; returns the optimizer state.
template <class T>
TrainState restore_checkpoint(Network<T>& net, const Checkpoint& c) {
  load_weights(net, c);
  TrainState s;
  s.epoch = c.epoch;
  s.step = c.step;
  s.best_val_top1 = c.best_val_top1;
  s.log = c.log;
  auto params = net.parameters();
  if (!c.momentum.empty()) {
    if (c.momentum.size() != params.size()) throw ConfigError("checkpoint momentum does not match the network");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (c.momentum[i].name != params[i].name || c.momentum[i].values.size() != params[i].tensor->numel())
        throw ConfigError("checkpoint momentum '" + c.momentum[i].name + "' does not match '" + params[i].name + "'");
      s.momentum.push_back(c.momentum[i].values);
    }
  }
  if (!c.rng_state.empty()) {
    std::istringstream in(c.rng_state);
    in >> net.dropout_rng();
    if (!in) throw CorruptDataError("checkpoint RNG state is malformed");
  }
  return s;
}

namespace detail {

inline void write_text_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot write " + p.string());
  out << s;
}

template <class T>
void save_run(Network<T>& net, const TrainState& s, const TrainOutput& out) {
  if (out.dir.empty()) return;
  write_checkpoint(out.dir / TrainOutput::kCheckpointFile, make_checkpoint(net, s, out.config_text));
}

}  // namespace detail

/// Softmax cross-entropy training from `state` (fresh by default) to cfg.epochs.
/// One metrics row per epoch. On a non-finite loss or gradient a DivergenceError
/// is thrown and the checkpoint on disk is the last one written successfully.
template <class T>
TrainState train(Network<T>& net, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                 const TrainOutput& out = {}, TrainState state = {}) {
  cfg.validate();
  const auto& spec = net.spec();
  if (train_set.height != spec.input_h || train_set.width != spec.input_w || train_set.channels != 3)
    throw DimensionError("training images are " + std::to_string(train_set.height) + "x" +
                         std::to_string(train_set.width) + ", network '" + spec.name + "' expects " +
                         std::to_string(spec.input_h) + "x" + std::to_string(spec.input_w));
  if (train_set.class_count > spec.classes)
    throw ConfigError("dataset has " + std::to_string(train_set.class_count) + " classes, network has " +
                      std::to_string(spec.classes));
  if (!out.dir.empty()) std::filesystem::create_directories(out.dir);

  auto params = net.parameters();
  std::vector<std::vector<T>> velocity;
  if (!state.momentum.empty()) {
    for (auto& m : state.momentum) velocity.emplace_back(m.begin(), m.end());
  } else {
    for (const auto& p : params) velocity.emplace_back(p.tensor->numel(), T(0));
  }

  for (std::size_t e = state.epoch; e < cfg.epochs; ++e) {
    const double lr = lr_at(cfg, e);
    BatchStream stream(train_set, cfg.batch_size, epoch_seed(cfg.seed, e), cfg.train_policy, true, cfg.prefetch);
    double loss_sum = 0.0;
    Batch b;
    while (stream.next(b)) {
      net.zero_grad();
      Tensor<T> x;
      if constexpr (std::is_same_v<T, float>)
        x = b.images;
      else
        x = Tensor<T>(b.images.shape(), std::vector<T>(b.images.data().begin(), b.images.data().end()));
      Tensor<T> loss = softmax_cross_entropy(net.forward(x, Mode::train), std::span<const std::int32_t>(b.labels));
      const double l = static_cast<double>(loss.item());
      if (!std::isfinite(l))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(e) + " step " + std::to_string(state.step));
      backward(loss);
      sgd_step(params, velocity, lr, cfg.momentum, cfg.weight_decay);
      ++state.step;
      loss_sum += l * static_cast<double>(b.labels.size());
    }
    MetricsRow row;
    row.epoch = e;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(train_set.size(), 1));
    const bool last = e + 1 == cfg.epochs;
    if (val_set && cfg.eval_every > 0 && ((e + 1) % cfg.eval_every == 0 || last)) {
      auto r = evaluate(net, *val_set, cfg.eval_policy, std::max<std::size_t>(cfg.batch_size, 64));
      row.val_top1 = r.top1;
      row.val_top5 = r.top5;
      if (std::isnan(state.best_val_top1) || r.top1 < state.best_val_top1) state.best_val_top1 = r.top1;
    }
    state.log.push_back(row);
    if (out.on_epoch) out.on_epoch(row);
    state.epoch = e + 1;
    state.momentum.clear();
    for (auto& v : velocity) state.momentum.emplace_back(v.begin(), v.end());
    if (!out.dir.empty()) {
      detail::write_text_file(out.dir / TrainOutput::kMetricsFile, metrics_csv(state.log));
      if (last || (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0))
        detail::save_run(net, state, out);
    }
  }
  if (!out.dir.empty() && state.log.empty()) {
    detail::write_text_file(out.dir / TrainOutput::kMetricsFile, metrics_csv(state.log));
    detail::save_run(net, state, out);
  }
  return state;
}

}  // namespace gsop
