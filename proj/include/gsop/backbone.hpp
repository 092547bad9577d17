#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gsop/gsop_blocks.hpp"
#include "gsop/isqrt.hpp"
#include "gsop/module.hpp"
#include "gsop/pool.hpp"

namespace gsop {

enum class GsopKind { none, channel, position, fused };
enum class HeadKind { plain_gavp, gavp_after_gsop, isqrt_cov };

inline const char* to_string(GsopKind k) {
  switch (k) {
    case GsopKind::none:
      return "none";
    case GsopKind::channel:
      return "channel";
    case GsopKind::position:
      return "position";
    case GsopKind::fused:
      return "fused";
  }
  return "?";
}

inline GsopKind parse_gsop_kind(const std::string& s) {
  if (s == "none") return GsopKind::none;
  if (s == "channel") return GsopKind::channel;
  if (s == "position") return GsopKind::position;
  if (s == "fused") return GsopKind::fused;
  throw ConfigError("unknown GSoP kind '" + s + "' (expected none, channel, position or fused)");
}

inline const char* to_string(HeadKind k) {
  switch (k) {
    case HeadKind::plain_gavp:
      return "plain_gavp";
    case HeadKind::gavp_after_gsop:
      return "gavp_after_gsop";
    case HeadKind::isqrt_cov:
      return "isqrt_cov";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "plain_gavp") return HeadKind::plain_gavp;
  if (s == "gavp_after_gsop") return HeadKind::gavp_after_gsop;
  if (s == "isqrt_cov") return HeadKind::isqrt_cov;
  throw ConfigError("unknown head '" + s + "' (expected plain_gavp, gavp_after_gsop or isqrt_cov)");
}

struct StemSpec {
  std::size_t kernel = 7;
  std::size_t stride = 2;
  std::size_t channels = 64;
  bool max_pool = true;  // 3x3, stride 2, padding 1
};

struct StageSpec {
  std::size_t bottlenecks = 2;
  std::size_t inner = 64;  // output channels are 4x inner
  std::size_t stride = 1;
  GsopKind gsop = GsopKind::none;
  std::size_t gsop_every = 0;  // 0: one block after the last bottleneck; k: after every k-th

  std::size_t out() const { return 4 * inner; }
};

struct Resolution {
  std::size_t h, w;
  bool operator==(const Resolution&) const = default;
};

/// Declarative backbone description. Networks, parameter counts and MAC
/// counts are all derived from it.
struct NetworkSpec {
  std::string name;
  StemSpec stem;
  std::vector<StageSpec> stages;
  bool preact = false;
  bool downsample_last_stage = true;
  std::size_t gsop_reduced = 0;  // 0 selects min(128, c'/2)
  std::size_t position_h = 8;
  std::size_t position_w = 8;
  FusionMode fusion = FusionMode::average;
  HeadKind head = HeadKind::plain_gavp;
  GsopKind head_gsop = GsopKind::channel;
  IsqrtConfig isqrt{};
  double dropout = 0.0;
  std::size_t classes = 1000;
  std::size_t input_h = 224;
  std::size_t input_w = 224;

  std::size_t reduced_for(std::size_t c_in) const { return gsop_reduced ? gsop_reduced : std::min<std::size_t>(128, c_in / 2); }

  std::size_t stage_stride(std::size_t i) const {
    return (i + 1 == stages.size() && !downsample_last_stage) ? 1 : stages[i].stride;
  }

  std::size_t block_input_channels(std::size_t stage, std::size_t block) const {
    if (block > 0) return stages[stage].out();
    return stage == 0 ? stem.channels : stages[stage - 1].out();
  }

  bool gsop_after(std::size_t stage, std::size_t block) const {
    const StageSpec& s = stages[stage];
    if (s.gsop == GsopKind::none) return false;
    if (s.gsop_every == 0) return block + 1 == s.bottlenecks;
    return (block + 1) % s.gsop_every == 0;
  }

  Resolution stem_resolution() const {
    const std::size_t pad = stem.kernel / 2;
    Resolution r{(input_h + 2 * pad - stem.kernel) / stem.stride + 1, (input_w + 2 * pad - stem.kernel) / stem.stride + 1};
    if (stem.max_pool) r = {(r.h + 2 - 3) / 2 + 1, (r.w + 2 - 3) / 2 + 1};
    return r;
  }

  /// Spatial size at the output of each stage.
  std::vector<Resolution> stage_resolutions() const {
    std::vector<Resolution> out;
    Resolution r = stem_resolution();
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::size_t s = stage_stride(i);
      r = {(r.h + 2 - 3) / s + 1, (r.w + 2 - 3) / s + 1};
      out.push_back(r);
    }
    return out;
  }

  std::size_t feature_channels() const { return stages.back().out(); }

  std::size_t representation_dim() const {
    return head == HeadKind::isqrt_cov ? isqrt.representation_length() : feature_channels();
  }

  GsopChannelConfig channel_config(std::size_t c_in) const {
    GsopChannelConfig c;
    c.c_in = c_in;
    c.c_reduced = reduced_for(c_in);
    return c;
  }

  GsopPositionConfig position_config(std::size_t c_in) const {
    GsopPositionConfig c;
    c.c_in = c_in;
    c.c_reduced = reduced_for(c_in);
    c.target_h = position_h;
    c.target_w = position_w;
    return c;
  }

  void validate() const {
    const std::string who = "network '" + name + "': ";
    if (stages.empty()) throw ConfigError(who + "at least one stage required");
    if (stem.kernel == 0 || stem.stride == 0 || stem.channels == 0) throw ConfigError(who + "invalid stem");
    if (classes < 2) throw ConfigError(who + "classes must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError(who + "dropout must be in [0, 1)");
    if (input_h + 2 * (stem.kernel / 2) < stem.kernel || input_w + 2 * (stem.kernel / 2) < stem.kernel)
      throw ConfigError(who + "input smaller than the stem kernel");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const StageSpec& s = stages[i];
      const std::string at = who + "stage " + std::to_string(i + 1) + ": ";
      if (s.bottlenecks == 0 || s.inner == 0 || s.stride == 0) throw ConfigError(at + "invalid bottleneck settings");
      if (i > 0 && s.out() < stages[i - 1].out()) throw ConfigError(at + "output channels must not decrease");
    }
    const auto res = stage_resolutions();
    auto check_block = [&](GsopKind kind, std::size_t c_in, Resolution r, const std::string& where) {
      if (kind == GsopKind::none) return;
      try {
        if (kind == GsopKind::channel || kind == GsopKind::fused) {
          channel_config(c_in).validate();
          if (r.h * r.w < 2) throw ConfigError("feature map too small for a covariance");
        }
        if (kind == GsopKind::position || kind == GsopKind::fused) {
          position_config(c_in).validate();
          if (r.h < position_h || r.w < position_w) throw ConfigError("feature map smaller than the position target");
        }
      } catch (const ConfigError& e) {
        throw ConfigError(who + where + ": " + e.what());
      }
    };
    for (std::size_t i = 0; i < stages.size(); ++i)
      for (std::size_t b = 0; b < stages[i].bottlenecks; ++b)
        if (gsop_after(i, b))
          check_block(stages[i].gsop, stages[i].out(), res[i], "stage " + std::to_string(i + 1) + " GSoP block");
    if (head == HeadKind::gavp_after_gsop) {
      if (head_gsop == GsopKind::none) throw ConfigError(who + "gavp_after_gsop head needs a GSoP kind");
      check_block(head_gsop, feature_channels(), res.back(), "head GSoP block");
    }
    if (head == HeadKind::isqrt_cov) {
      isqrt.validate();
      if (res.back().h * res.back().w < 2) throw ConfigError(who + "feature map too small for the covariance head");
    }
  }
};

template <class T>
class Layer : public Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
};

/// Post-activation bottleneck (stride on the 3x3 convolution); projection
/// shortcut when the shape changes.
template <class T>
class Bottleneck : public Layer<T> {
 public:
  Bottleneck(std::size_t in, std::size_t inner, std::size_t stride, std::mt19937_64& rng)
      : conv1_(in, inner, 1, 1, {}, false, rng),
        bn1_(inner),
        conv2_(inner, inner, 3, 3, Conv2dOptions{.stride = stride, .pad_h = 1, .pad_w = 1}, false, rng),
        bn2_(inner),
        conv3_(inner, 4 * inner, 1, 1, {}, false, rng),
        bn3_(4 * inner) {
    if (in != 4 * inner || stride != 1) {
      proj_ = std::make_unique<Conv2d<T>>(in, 4 * inner, 1, 1, Conv2dOptions{.stride = stride}, false, rng);
      proj_bn_ = std::make_unique<BatchNorm2d<T>>(4 * inner);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    Tensor<T> h = relu(bn1_.forward(conv1_.forward(x), mode));
    h = relu(bn2_.forward(conv2_.forward(h), mode));
    h = bn3_.forward(conv3_.forward(h), mode);
    Tensor<T> sc = proj_ ? proj_bn_->forward(proj_->forward(x), mode) : x;
    return relu(add(h, sc));
  }

  void collect(const std::string& p, Registry<T>& r) override {
    conv1_.collect(join_name(p, "conv1"), r);
    bn1_.collect(join_name(p, "bn1"), r);
    conv2_.collect(join_name(p, "conv2"), r);
    bn2_.collect(join_name(p, "bn2"), r);
    conv3_.collect(join_name(p, "conv3"), r);
    bn3_.collect(join_name(p, "bn3"), r);
    if (proj_) {
      proj_->collect(join_name(p, "proj"), r);
      proj_bn_->collect(join_name(p, "proj_bn"), r);
    }
  }

 private:
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  Conv2d<T> conv3_;
  BatchNorm2d<T> bn3_;
  std::unique_ptr<Conv2d<T>> proj_;
  std::unique_ptr<BatchNorm2d<T>> proj_bn_;
};

/// Pre-activation bottleneck: BN+ReLU before each convolution, projection
/// applied to the pre-activated input, no activation after the add.
template <class T>
class PreActBottleneck : public Layer<T> {
 public:
  PreActBottleneck(std::size_t in, std::size_t inner, std::size_t stride, std::mt19937_64& rng)
      : bn1_(in),
        conv1_(in, inner, 1, 1, {}, false, rng),
        bn2_(inner),
        conv2_(inner, inner, 3, 3, Conv2dOptions{.stride = stride, .pad_h = 1, .pad_w = 1}, false, rng),
        bn3_(inner),
        conv3_(inner, 4 * inner, 1, 1, {}, false, rng) {
    if (in != 4 * inner || stride != 1)
      proj_ = std::make_unique<Conv2d<T>>(in, 4 * inner, 1, 1, Conv2dOptions{.stride = stride}, false, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    Tensor<T> a = relu(bn1_.forward(x, mode));
    Tensor<T> h = conv1_.forward(a);
    h = conv2_.forward(relu(bn2_.forward(h, mode)));
    h = conv3_.forward(relu(bn3_.forward(h, mode)));
    return add(h, proj_ ? proj_->forward(a) : x);
  }

  void collect(const std::string& p, Registry<T>& r) override {
    bn1_.collect(join_name(p, "bn1"), r);
    conv1_.collect(join_name(p, "conv1"), r);
    bn2_.collect(join_name(p, "bn2"), r);
    conv2_.collect(join_name(p, "conv2"), r);
    bn3_.collect(join_name(p, "bn3"), r);
    conv3_.collect(join_name(p, "conv3"), r);
    if (proj_) proj_->collect(join_name(p, "proj"), r);
  }

 private:
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn2_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn3_;
  Conv2d<T> conv3_;
  std::unique_ptr<Conv2d<T>> proj_;
};

template <class T>
std::unique_ptr<GsopBlock<T>> make_gsop_block(GsopKind kind, std::size_t c_in, const NetworkSpec& spec,
                                              std::mt19937_64& rng) {
  switch (kind) {
    case GsopKind::channel:
      return std::make_unique<GsopChannelBlock<T>>(spec.channel_config(c_in), rng);
    case GsopKind::position:
      return std::make_unique<GsopPositionBlock<T>>(spec.position_config(c_in), rng);
    case GsopKind::fused:
      return std::make_unique<GsopFusedBlock<T>>(spec.channel_config(c_in), spec.position_config(c_in), spec.fusion,
                                                 rng);
    case GsopKind::none:
      break;
  }
  throw ConfigError("no GSoP block for kind none");
}

/// A backbone realized from a NetworkSpec. Parameter names:
///   stem.conv / stem.bn, stageS.blockB.*, stageS.gsopB.*, final_bn (pre-activation
///   only), head.gsop.* or head.isqrt.*, classifier.
template <class T>
class Network : public Module<T> {
 public:
  Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    const StemSpec& st = spec_.stem;
    const std::size_t pad = st.kernel / 2;
    stem_conv_ = std::make_unique<Conv2d<T>>(
        3, st.channels, st.kernel, st.kernel, Conv2dOptions{.stride = st.stride, .pad_h = pad, .pad_w = pad}, false, rng);
    if (!spec_.preact) stem_bn_ = std::make_unique<BatchNorm2d<T>>(st.channels);
    for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
      const StageSpec& stage = spec_.stages[s];
      for (std::size_t b = 0; b < stage.bottlenecks; ++b) {
        const std::size_t in = spec_.block_input_channels(s, b);
        const std::size_t stride = b == 0 ? spec_.stage_stride(s) : 1;
        Unit u;
        u.name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        if (spec_.preact)
          u.body = std::make_unique<PreActBottleneck<T>>(in, stage.inner, stride, rng);
        else
          u.body = std::make_unique<Bottleneck<T>>(in, stage.inner, stride, rng);
        if (spec_.gsop_after(s, b)) {
          u.gsop_name = "stage" + std::to_string(s + 1) + ".gsop" + std::to_string(b);
          u.gsop = make_gsop_block<T>(stage.gsop, stage.out(), spec_, rng);
        }
        units_.push_back(std::move(u));
      }
    }
    const std::size_t c = spec_.feature_channels();
    if (spec_.preact) final_bn_ = std::make_unique<BatchNorm2d<T>>(c);
    if (spec_.head == HeadKind::gavp_after_gsop) head_gsop_ = make_gsop_block<T>(spec_.head_gsop, c, spec_, rng);
    if (spec_.head == HeadKind::isqrt_cov) isqrt_ = std::make_unique<IsqrtCovHead<T>>(c, spec_.isqrt, rng);
    classifier_ = std::make_unique<Linear<T>>(spec_.representation_dim(), spec_.classes, rng);
  }

  /// Image representation fed to the classifier, [N, representation_dim].
  Tensor<T> features(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != spec_.input_h || x.dim(3) != spec_.input_w)
      throw DimensionError("network '" + spec_.name + "' expects [N, 3, " + std::to_string(spec_.input_h) + ", " +
                           std::to_string(spec_.input_w) + "], got " + to_string(x.shape()));
    Tensor<T> h = stem_conv_->forward(x);
    if (stem_bn_) h = relu(stem_bn_->forward(h, mode));
    if (spec_.stem.max_pool) h = max_pool2d(h, 3, 2, 1);
    for (auto& u : units_) {
      h = u.body->forward(h, mode);
      if (u.gsop) h = u.gsop->forward(h, mode);
    }
    if (final_bn_) h = relu(final_bn_->forward(h, mode));
    if (isqrt_) return isqrt_->forward(h, mode);
    if (head_gsop_) h = head_gsop_->forward(h, mode);
    return flatten(global_avg_pool(h));
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> f = features(x, mode);
    if (spec_.dropout > 0.0) f = dropout(f, spec_.dropout, dropout_rng_, mode);
    return classifier_->forward(f);
  }

  void collect(const std::string& prefix, Registry<T>& r) override {
    stem_conv_->collect(join_name(prefix, "stem.conv"), r);
    if (stem_bn_) stem_bn_->collect(join_name(prefix, "stem.bn"), r);
    for (auto& u : units_) {
      u.body->collect(join_name(prefix, u.name), r);
      if (u.gsop) u.gsop->collect(join_name(prefix, u.gsop_name), r);
    }
    if (final_bn_) final_bn_->collect(join_name(prefix, "final_bn"), r);
    if (head_gsop_) head_gsop_->collect(join_name(prefix, "head.gsop"), r);
    if (isqrt_) isqrt_->collect(join_name(prefix, "head.isqrt"), r);
    classifier_->collect(join_name(prefix, "classifier"), r);
  }

  const NetworkSpec& spec() const { return spec_; }
  std::mt19937_64& dropout_rng() { return dropout_rng_; }

 private:
  struct Unit {
    std::string name;
    std::unique_ptr<Layer<T>> body;
    std::string gsop_name;
    std::unique_ptr<GsopBlock<T>> gsop;
  };

  NetworkSpec spec_;
  std::mt19937_64 dropout_rng_;
  std::unique_ptr<Conv2d<T>> stem_conv_;
  std::unique_ptr<BatchNorm2d<T>> stem_bn_;
  std::vector<Unit> units_;
  std::unique_ptr<BatchNorm2d<T>> final_bn_;
  std::unique_ptr<GsopBlock<T>> head_gsop_;
  std::unique_ptr<IsqrtCovHead<T>> isqrt_;
  std::unique_ptr<Linear<T>> classifier_;
};

template <class T = float>
std::unique_ptr<Network<T>> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  return std::make_unique<Network<T>>(spec, seed);
}

/// Copy of a spec with every GSoP block removed (head falls back to plain GAvP).
inline NetworkSpec without_gsop(NetworkSpec spec) {
  for (auto& s : spec.stages) s.gsop = GsopKind::none;
  if (spec.head == HeadKind::gavp_after_gsop) spec.head = HeadKind::plain_gavp;
  return spec;
}

namespace detail {

inline NetworkSpec resnet_imagenet(const std::string& name, std::vector<std::size_t> depths, GsopKind gsop,
                                   HeadKind head) {
  NetworkSpec s;
  s.name = name;
  const std::size_t inner[4] = {64, 128, 256, 512};
  for (std::size_t i = 0; i < 4; ++i) {
    StageSpec st;
    st.bottlenecks = depths[i];
    st.inner = inner[i];
    st.stride = i == 0 ? 1 : 2;
    st.gsop = i < 3 ? gsop : GsopKind::none;
    s.stages.push_back(st);
  }
  s.gsop_reduced = 128;
  s.head = head;
  s.head_gsop = gsop == GsopKind::none ? GsopKind::channel : gsop;
  // GSoP networks keep the last stage at full resolution; the baseline downsamples.
  s.downsample_last_stage = head == HeadKind::plain_gavp;
  s.isqrt.c_reduced = 256;
  s.classes = 1000;
  return s;
}

inline NetworkSpec cifar(const std::string& name, GsopKind gsop, HeadKind head) {
  NetworkSpec s;
  s.name = name;
  s.preact = true;
  s.stem = {3, 1, 64, false};
  const std::size_t inner[3] = {32, 64, 128};
  for (std::size_t i = 0; i < 3; ++i) {
    StageSpec st;
    st.bottlenecks = 3;
    st.inner = inner[i];
    st.stride = i == 0 ? 1 : 2;
    st.gsop = i < 2 ? gsop : GsopKind::none;
    st.gsop_every = 3;
    s.stages.push_back(st);
  }
  s.gsop_reduced = 64;
  s.head = head;
  s.downsample_last_stage = head == HeadKind::plain_gavp;
  s.isqrt.c_reduced = 128;
  s.dropout = head == HeadKind::isqrt_cov ? 0.5 : 0.0;
  s.classes = 100;
  s.input_h = s.input_w = 32;
  return s;
}

inline NetworkSpec toy(const std::string& name, GsopKind gsop, HeadKind head, std::size_t inner1, std::size_t inner2) {
  NetworkSpec s;
  s.name = name;
  s.stem = {3, 1, 16, false};
  s.stages = {StageSpec{1, inner1, 1, gsop, 0}, StageSpec{1, inner2, 2, GsopKind::none, 0}};
  s.head = head;
  s.head_gsop = gsop == GsopKind::none ? GsopKind::channel : gsop;
  s.position_h = s.position_w = 4;
  s.isqrt.c_reduced = 8;
  s.classes = 2;
  s.input_h = s.input_w = 16;
  return s;
}

}  // namespace detail

/// Named, validated specs. toy_vanilla widens its bottlenecks to match the
/// parameter budget of toy_gsop1.
inline std::map<std::string, NetworkSpec> preset_specs() {
  using detail::cifar;
  using detail::resnet_imagenet;
  using detail::toy;
  std::map<std::string, NetworkSpec> m;
  auto put = [&](NetworkSpec s) {
    s.validate();
    std::string key = s.name;
    m.emplace(std::move(key), std::move(s));
  };
  const std::vector<std::size_t> r26{2, 2, 2, 2}, r50{3, 4, 6, 3};
  put(resnet_imagenet("resnet26_vanilla", r26, GsopKind::none, HeadKind::plain_gavp));
  put(resnet_imagenet("resnet26_gsop1", r26, GsopKind::channel, HeadKind::gavp_after_gsop));
  put(resnet_imagenet("resnet26_gsop2", r26, GsopKind::channel, HeadKind::isqrt_cov));
  put(resnet_imagenet("resnet26_gsop1_position", r26, GsopKind::position, HeadKind::gavp_after_gsop));
  put(resnet_imagenet("resnet50_vanilla", r50, GsopKind::none, HeadKind::plain_gavp));
  put(resnet_imagenet("resnet50_gsop1", r50, GsopKind::channel, HeadKind::gavp_after_gsop));
  put(resnet_imagenet("resnet50_gsop2", r50, GsopKind::channel, HeadKind::isqrt_cov));
  put(cifar("cifar_vanilla", GsopKind::none, HeadKind::plain_gavp));
  put(cifar("cifar_gsop1", GsopKind::channel, HeadKind::gavp_after_gsop));
  put(cifar("cifar_gsop2", GsopKind::channel, HeadKind::isqrt_cov));
  put(toy("toy_vanilla", GsopKind::none, HeadKind::plain_gavp, 16, 30));
  put(toy("toy_gsop1", GsopKind::channel, HeadKind::gavp_after_gsop, 8, 16));
  put(toy("toy_gsop1_position", GsopKind::position, HeadKind::gavp_after_gsop, 8, 16));
  auto fused = toy("toy_gsop1_fused", GsopKind::fused, HeadKind::gavp_after_gsop, 8, 16);
  fused.fusion = FusionMode::concatenation;
  put(fused);
  put(toy("toy_gsop2", GsopKind::channel, HeadKind::isqrt_cov, 8, 16));
  return m;
}

inline std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (auto& [k, v] : preset_specs()) names.push_back(k);
  return names;
}

inline NetworkSpec preset(const std::string& name) {
  auto m = preset_specs();
  auto it = m.find(name);
  if (it == m.end()) {
    std::string list;
    for (auto& [k, v] : m) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("unknown preset '" + name + "'; available: " + list);
  }
  return it->second;
}

}  // namespace gsop
