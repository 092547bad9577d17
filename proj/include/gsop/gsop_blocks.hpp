#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <string>

#include "gsop/covariance.hpp"
#include "gsop/module.hpp"
#include "gsop/pool.hpp"

namespace gsop {

struct GsopChannelConfig {
  std::size_t c_in = 0;
  std::size_t c_reduced = 128;
  std::size_t expansion = 4;
  double lrelu_slope = 0.1;
  bool use_shortcut = true;

  void validate() const {
    if (c_reduced < 2 || c_reduced >= c_in)
      throw ConfigError("channel GSoP: reduced channels " + std::to_string(c_reduced) + " must be in [2, " +
                        std::to_string(c_in) + ")");
    if (expansion < 1) throw ConfigError("channel GSoP: expansion must be >= 1");
  }
};

struct GsopPositionConfig {
  std::size_t c_in = 0;
  std::size_t c_reduced = 128;
  std::size_t target_h = 8;
  std::size_t target_w = 8;
  std::size_t expansion = 4;
  double lrelu_slope = 0.1;
  bool use_shortcut = true;

  std::size_t positions() const { return target_h * target_w; }

  void validate() const {
    if (c_reduced < 2 || c_reduced >= c_in)
      throw ConfigError("position GSoP: reduced channels " + std::to_string(c_reduced) + " must be in [2, " +
                        std::to_string(c_in) + ")");
    if (positions() < 4) throw ConfigError("position GSoP: target size must cover at least 4 positions");
    if (expansion < 1) throw ConfigError("position GSoP: expansion must be >= 1");
  }
};

enum class FusionMode { average, maximum, concatenation };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::average:
      return "average";
    case FusionMode::maximum:
      return "maximum";
    case FusionMode::concatenation:
      return "concatenation";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "average") return FusionMode::average;
  if (s == "maximum") return FusionMode::maximum;
  if (s == "concatenation") return FusionMode::concatenation;
  throw ConfigError("unknown fusion mode '" + s + "' (expected average, maximum or concatenation)");
}

/// Treats each d x d covariance as a d-channel 1 x d feature map (row i ->
/// channel i) and batch-normalizes it per row.
template <class T>
class RowNormalize : public Module<T> {
 public:
  explicit RowNormalize(std::size_t d) : d_(d), bn_(d) {}

  Tensor<T> forward(const Tensor<T>& cov, Mode mode) {
    if (cov.rank() != 3 || cov.dim(1) != d_ || cov.dim(2) != d_)
      throw DimensionError("row_normalize: expected [N, " + std::to_string(d_) + ", " + std::to_string(d_) + "], got " +
                           to_string(cov.shape()));
    return bn_.forward(reshape(cov, Shape{cov.dim(0), d_, 1, d_}), mode);
  }

  void collect(const std::string& prefix, Registry<T>& r) override { bn_.collect(join_name(prefix, "bn"), r); }

  BatchNorm2d<T>& bn() { return bn_; }

 private:
  std::size_t d_;
  BatchNorm2d<T> bn_;
};

/// Excitation: per-row grouped convolution (groups = d, kernel 1 x d,
/// expansion outputs per row) + BN + LReLU, then a biased 1 x 1 convolution
/// to `outputs` channels and a sigmoid. Output [N, outputs, 1, 1] in (0, 1).
template <class T>
class Excitation : public Module<T> {
 public:
  Excitation(std::size_t d, std::size_t outputs, std::size_t expansion, double slope, std::mt19937_64& rng)
      : d_(d),
        row_(d, expansion * d, 1, d, Conv2dOptions{.groups = d}, Activation::leaky_relu, rng, slope),
        fc_(expansion * d, outputs, 1, 1, Conv2dOptions{}, true, rng) {}

  Tensor<T> forward(const Tensor<T>& rows, Mode mode) {
    if (rows.rank() != 4 || rows.dim(1) != d_ || rows.dim(2) != 1 || rows.dim(3) != d_)
      throw DimensionError("excitation: expected [N, " + std::to_string(d_) + ", 1, " + std::to_string(d_) + "], got " +
                           to_string(rows.shape()));
    return sigmoid(fc_.forward(hidden(rows, mode)));
  }

  /// Row-convolution stage alone ([N, expansion*d, 1, 1]).
  Tensor<T> hidden(const Tensor<T>& rows, Mode mode) { return row_.forward(rows, mode); }

  void collect(const std::string& prefix, Registry<T>& r) override {
    row_.collect(join_name(prefix, "row"), r);
    fc_.collect(join_name(prefix, "fc"), r);
  }

  ConvBnAct<T>& row() { return row_; }
  Conv2d<T>& fc() { return fc_; }

 private:
  std::size_t d_;
  ConvBnAct<T> row_;
  Conv2d<T> fc_;
};

/// Common interface of the three block flavors. scaled_term is the attention
/// product before the residual add; forward adds the shortcut when enabled.
template <class T>
class GsopBlock : public Module<T> {
 public:
  virtual Tensor<T> scaled_term(const Tensor<T>& x, Mode mode) = 0;
  virtual bool use_shortcut() const = 0;
  virtual std::size_t channels() const = 0;

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != channels())
      throw DimensionError("GSoP block expects " + std::to_string(channels()) + " channels, got " +
                           to_string(x.shape()));
    Tensor<T> s = scaled_term(x, mode);
    return use_shortcut() ? add(x, s) : s;
  }
};

template <class T>
class GsopChannelBlock : public GsopBlock<T> {
 public:
  GsopChannelBlock(const GsopChannelConfig& cfg, std::mt19937_64& rng)
      : cfg_((cfg.validate(), cfg)),
        reduce_(cfg.c_in, cfg.c_reduced, 1, 1, Conv2dOptions{}, Activation::relu, rng),
        rownorm_(cfg.c_reduced),
        excite_(cfg.c_reduced, cfg.c_in, cfg.expansion, cfg.lrelu_slope, rng) {}

  /// Per-channel weights [N, c_in, 1, 1].
  Tensor<T> weights(const Tensor<T>& x, Mode mode) {
    Tensor<T> r = reduce_.forward(x, mode);
    return excite_.forward(rownorm_.forward(channel_covariance(r), mode), mode);
  }

  Tensor<T> scaled_term(const Tensor<T>& x, Mode mode) override { return mul(x, weights(x, mode)); }
  bool use_shortcut() const override { return cfg_.use_shortcut; }
  std::size_t channels() const override { return cfg_.c_in; }

  void collect(const std::string& prefix, Registry<T>& r) override {
    reduce_.collect(join_name(prefix, "reduce"), r);
    rownorm_.collect(join_name(prefix, "rownorm"), r);
    excite_.collect(join_name(prefix, "excite"), r);
  }

  const GsopChannelConfig& config() const { return cfg_; }
  ConvBnAct<T>& reduce() { return reduce_; }
  RowNormalize<T>& rownorm() { return rownorm_; }
  Excitation<T>& excite() { return excite_; }

 private:
  GsopChannelConfig cfg_;
  ConvBnAct<T> reduce_;
  RowNormalize<T> rownorm_;
  Excitation<T> excite_;
};

template <class T>
class GsopPositionBlock : public GsopBlock<T> {
 public:
  GsopPositionBlock(const GsopPositionConfig& cfg, std::mt19937_64& rng)
      : cfg_((cfg.validate(), cfg)),
        reduce_(cfg.c_in, cfg.c_reduced, 1, 1, Conv2dOptions{}, Activation::relu, rng),
        rownorm_(cfg.positions()),
        excite_(cfg.positions(), cfg.positions(), cfg.expansion, cfg.lrelu_slope, rng) {}

  /// Spatial weight map at the input resolution, [N, 1, H, W].
  Tensor<T> weights(const Tensor<T>& x, Mode mode) {
    const std::size_t H = x.dim(2), W = x.dim(3);
    if (H < cfg_.target_h || W < cfg_.target_w)
      throw ConfigError("position GSoP: input " + to_string(x.shape()) + " smaller than target " +
                        std::to_string(cfg_.target_h) + "x" + std::to_string(cfg_.target_w));
    Tensor<T> r = adaptive_avg_pool2d(reduce_.forward(x, mode), cfg_.target_h, cfg_.target_w);
    Tensor<T> w = excite_.forward(rownorm_.forward(position_covariance(r), mode), mode);
    Tensor<T> map = reshape(w, Shape{x.dim(0), 1, cfg_.target_h, cfg_.target_w});
    return resize_bilinear(map, H, W);
  }

  Tensor<T> scaled_term(const Tensor<T>& x, Mode mode) override { return mul(x, weights(x, mode)); }
  bool use_shortcut() const override { return cfg_.use_shortcut; }
  std::size_t channels() const override { return cfg_.c_in; }

  void collect(const std::string& prefix, Registry<T>& r) override {
    reduce_.collect(join_name(prefix, "reduce"), r);
    rownorm_.collect(join_name(prefix, "rownorm"), r);
    excite_.collect(join_name(prefix, "excite"), r);
  }

  const GsopPositionConfig& config() const { return cfg_; }
  ConvBnAct<T>& reduce() { return reduce_; }
  RowNormalize<T>& rownorm() { return rownorm_; }
  Excitation<T>& excite() { return excite_; }

 private:
  GsopPositionConfig cfg_;
  ConvBnAct<T> reduce_;
  RowNormalize<T> rownorm_;
  Excitation<T> excite_;
};

/// Runs both attention branches on the same input and fuses their scaled
/// outputs; the shortcut is added once, after fusion.
template <class T>
class GsopFusedBlock : public GsopBlock<T> {
 public:
  GsopFusedBlock(const GsopChannelConfig& channel_cfg, const GsopPositionConfig& position_cfg, FusionMode mode,
                 std::mt19937_64& rng)
      : channel_(without_shortcut(channel_cfg), rng),
        position_(without_shortcut(position_cfg), rng),
        mode_(mode),
        use_shortcut_(channel_cfg.use_shortcut) {
    if (channel_cfg.c_in != position_cfg.c_in)
      throw ConfigError("fused GSoP: branch input channels differ (" + std::to_string(channel_cfg.c_in) + " vs " +
                        std::to_string(position_cfg.c_in) + ")");
    if (mode == FusionMode::concatenation)
      restore_ = std::make_unique<Conv2d<T>>(2 * channel_cfg.c_in, channel_cfg.c_in, 1, 1, Conv2dOptions{}, true, rng);
  }

  Tensor<T> fuse(const Tensor<T>& a, const Tensor<T>& b) const {
    switch (mode_) {
      case FusionMode::average:
        return scale(add(a, b), T(0.5));
      case FusionMode::maximum:
        return maximum(a, b);
      case FusionMode::concatenation:
        return restore_->forward(concat_channels(a, b));
    }
    return a;
  }

  Tensor<T> scaled_term(const Tensor<T>& x, Mode mode) override {
    return fuse(channel_.scaled_term(x, mode), position_.scaled_term(x, mode));
  }
  bool use_shortcut() const override { return use_shortcut_; }
  std::size_t channels() const override { return channel_.channels(); }

  void collect(const std::string& prefix, Registry<T>& r) override {
    channel_.collect(join_name(prefix, "channel"), r);
    position_.collect(join_name(prefix, "position"), r);
    if (restore_) restore_->collect(join_name(prefix, "restore"), r);
  }

  FusionMode mode() const { return mode_; }
  bool has_restore() const { return static_cast<bool>(restore_); }
  GsopChannelBlock<T>& channel_branch() { return channel_; }
  GsopPositionBlock<T>& position_branch() { return position_; }

 private:
  template <class Cfg>
  static Cfg without_shortcut(Cfg cfg) {
    cfg.use_shortcut = false;
    return cfg;
  }

  GsopChannelBlock<T> channel_;
  GsopPositionBlock<T> position_;
  FusionMode mode_;
  bool use_shortcut_;
  std::unique_ptr<Conv2d<T>> restore_;
};

}  // namespace gsop
