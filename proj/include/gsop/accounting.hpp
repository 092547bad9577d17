#pragma once

// Analytic parameter / multiply-accumulate (MAC) counting.
//
// Convention (1 MAC = one multiply-add):
//   convolution   (c_in/groups) * kh * kw * c_out * H_out * W_out
//   linear        in * out
//   covariance    d(d+1)/2 * m  (symmetric; m = contraction length)
//   batch norm    0             (folds into the preceding convolution)
//   activations, scaling, residual add, upsampling: 1 per output element
//   average pooling: 1 per input element; max pooling: k*k per output element
//   Newton-Schulz: 3 d^3 per iteration + d^2 for each of pre/post scaling
// Centering inside the covariance is not counted. Parameter counts include
// BN scale/shift (2 per channel) and exclude running statistics.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gsop/backbone.hpp"

namespace gsop {

struct CostEntry {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::vector<CostEntry> entries;
  std::size_t input_h = 0;
  std::size_t input_w = 0;

  std::uint64_t total_params() const {
    std::uint64_t t = 0;
    for (const auto& e : entries) t += e.params;
    return t;
  }
  std::uint64_t total_macs() const {
    std::uint64_t t = 0;
    for (const auto& e : entries) t += e.macs;
    return t;
  }

  void add(std::string layer, std::uint64_t params, std::uint64_t macs) {
    entries.push_back({std::move(layer), params, macs});
  }
  void conv(const std::string& layer, std::size_t in, std::size_t out, std::size_t kh, std::size_t kw, std::size_t groups,
            std::size_t ho, std::size_t wo, bool bias) {
    const std::uint64_t k = static_cast<std::uint64_t>(in / groups) * kh * kw;
    add(layer, k * out + (bias ? out : 0), k * out * ho * wo);
  }
  void bn(const std::string& layer, std::size_t channels) { add(layer, 2 * channels, 0); }
  void elementwise(const std::string& layer, std::uint64_t count) { add(layer, 0, count); }
  void linear(const std::string& layer, std::size_t in, std::size_t out) {
    add(layer, static_cast<std::uint64_t>(in) * out + out, static_cast<std::uint64_t>(in) * out);
  }
};

/// Millions with two decimals, the display precision of the block table.
inline std::string format_millions(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(v) / 1e6);
  return buf;
}

inline std::uint64_t symmetric_gram_macs(std::size_t d, std::size_t m) {
  return static_cast<std::uint64_t>(d) * (d + 1) / 2 * m;
}

namespace detail {

inline void count_excitation(CostReport& r, const std::string& p, std::size_t d, std::size_t outputs,
                             std::size_t expansion) {
  r.conv(join_name(p, "row.conv"), d, expansion * d, 1, d, d, 1, 1, false);
  r.bn(join_name(p, "row.bn"), expansion * d);
  r.elementwise(join_name(p, "row.lrelu"), expansion * d);
  r.conv(join_name(p, "fc"), expansion * d, outputs, 1, 1, 1, 1, 1, true);
  r.elementwise(join_name(p, "sigmoid"), outputs);
}

inline void count_reduce(CostReport& r, const std::string& p, std::size_t c_in, std::size_t c, std::size_t H,
                         std::size_t W) {
  r.conv(join_name(p, "reduce.conv"), c_in, c, 1, 1, 1, H, W, false);
  r.bn(join_name(p, "reduce.bn"), c);
  r.elementwise(join_name(p, "reduce.relu"), static_cast<std::uint64_t>(c) * H * W);
}

inline void count_channel_term(CostReport& r, const std::string& p, const GsopChannelConfig& cfg, std::size_t H,
                               std::size_t W) {
  const std::size_t c = cfg.c_reduced;
  count_reduce(r, p, cfg.c_in, c, H, W);
  r.elementwise(join_name(p, "covariance"), symmetric_gram_macs(c, H * W));
  r.bn(join_name(p, "rownorm.bn"), c);
  count_excitation(r, join_name(p, "excite"), c, cfg.c_in, cfg.expansion);
  r.elementwise(join_name(p, "scale"), static_cast<std::uint64_t>(cfg.c_in) * H * W);
}

inline void count_position_term(CostReport& r, const std::string& p, const GsopPositionConfig& cfg, std::size_t H,
                                std::size_t W) {
  const std::size_t c = cfg.c_reduced, hw = cfg.positions();
  count_reduce(r, p, cfg.c_in, c, H, W);
  r.elementwise(join_name(p, "downsample"), static_cast<std::uint64_t>(c) * H * W);
  r.elementwise(join_name(p, "covariance"), symmetric_gram_macs(hw, c));
  r.bn(join_name(p, "rownorm.bn"), hw);
  count_excitation(r, join_name(p, "excite"), hw, hw, cfg.expansion);
  if (H != cfg.target_h || W != cfg.target_w) r.elementwise(join_name(p, "upsample"), static_cast<std::uint64_t>(H) * W);
  r.elementwise(join_name(p, "scale"), static_cast<std::uint64_t>(cfg.c_in) * H * W);
}

}  // namespace detail

inline void count_block_into(CostReport& r, const std::string& p, const GsopChannelConfig& cfg, std::size_t H,
                             std::size_t W) {
  detail::count_channel_term(r, p, cfg, H, W);
  if (cfg.use_shortcut) r.elementwise(join_name(p, "shortcut"), static_cast<std::uint64_t>(cfg.c_in) * H * W);
}

inline void count_block_into(CostReport& r, const std::string& p, const GsopPositionConfig& cfg, std::size_t H,
                             std::size_t W) {
  detail::count_position_term(r, p, cfg, H, W);
  if (cfg.use_shortcut) r.elementwise(join_name(p, "shortcut"), static_cast<std::uint64_t>(cfg.c_in) * H * W);
}

inline void count_fused_into(CostReport& r, const std::string& p, const GsopChannelConfig& ccfg,
                             const GsopPositionConfig& pcfg, FusionMode mode, std::size_t H, std::size_t W) {
  const std::uint64_t elems = static_cast<std::uint64_t>(ccfg.c_in) * H * W;
  detail::count_channel_term(r, join_name(p, "channel"), ccfg, H, W);
  detail::count_position_term(r, join_name(p, "position"), pcfg, H, W);
  switch (mode) {
    case FusionMode::average:
      r.elementwise(join_name(p, "fuse"), 2 * elems);
      break;
    case FusionMode::maximum:
      r.elementwise(join_name(p, "fuse"), elems);
      break;
    case FusionMode::concatenation:
      r.conv(join_name(p, "restore"), 2 * ccfg.c_in, ccfg.c_in, 1, 1, 1, H, W, true);
      break;
  }
  if (ccfg.use_shortcut) r.elementwise(join_name(p, "shortcut"), elems);
}

/// Cost of one GSoP block on an H x W input.
template <class Cfg>
CostReport count_block(const Cfg& cfg, std::size_t H, std::size_t W) {
  cfg.validate();
  CostReport r;
  r.input_h = H;
  r.input_w = W;
  count_block_into(r, "", cfg, H, W);
  return r;
}

namespace detail {

inline void count_gsop(CostReport& r, const std::string& p, GsopKind kind, std::size_t c_in, const NetworkSpec& spec,
                       std::size_t H, std::size_t W) {
  switch (kind) {
    case GsopKind::channel:
      count_block_into(r, p, spec.channel_config(c_in), H, W);
      break;
    case GsopKind::position:
      count_block_into(r, p, spec.position_config(c_in), H, W);
      break;
    case GsopKind::fused:
      count_fused_into(r, p, spec.channel_config(c_in), spec.position_config(c_in), spec.fusion, H, W);
      break;
    case GsopKind::none:
      break;
  }
}

inline void count_bottleneck(CostReport& r, const std::string& p, bool preact, std::size_t in, std::size_t inner,
                             std::size_t stride, std::size_t H, std::size_t W) {
  const std::size_t out = 4 * inner;
  const std::size_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  const std::uint64_t inner_in = static_cast<std::uint64_t>(inner) * H * W;
  const std::uint64_t inner_out = static_cast<std::uint64_t>(inner) * Ho * Wo;
  const std::uint64_t out_elems = static_cast<std::uint64_t>(out) * Ho * Wo;
  const bool project = in != out || stride != 1;
  if (preact) {
    r.bn(join_name(p, "bn1"), in);
    r.elementwise(join_name(p, "relu1"), static_cast<std::uint64_t>(in) * H * W);
    r.conv(join_name(p, "conv1"), in, inner, 1, 1, 1, H, W, false);
    r.bn(join_name(p, "bn2"), inner);
    r.elementwise(join_name(p, "relu2"), inner_in);
    r.conv(join_name(p, "conv2"), inner, inner, 3, 3, 1, Ho, Wo, false);
    r.bn(join_name(p, "bn3"), inner);
    r.elementwise(join_name(p, "relu3"), inner_out);
    r.conv(join_name(p, "conv3"), inner, out, 1, 1, 1, Ho, Wo, false);
    if (project) r.conv(join_name(p, "proj"), in, out, 1, 1, 1, Ho, Wo, false);
    r.elementwise(join_name(p, "add"), out_elems);
    return;
  }
  r.conv(join_name(p, "conv1"), in, inner, 1, 1, 1, H, W, false);
  r.bn(join_name(p, "bn1"), inner);
  r.elementwise(join_name(p, "relu1"), inner_in);
  r.conv(join_name(p, "conv2"), inner, inner, 3, 3, 1, Ho, Wo, false);
  r.bn(join_name(p, "bn2"), inner);
  r.elementwise(join_name(p, "relu2"), inner_out);
  r.conv(join_name(p, "conv3"), inner, out, 1, 1, 1, Ho, Wo, false);
  r.bn(join_name(p, "bn3"), out);
  if (project) {
    r.conv(join_name(p, "proj"), in, out, 1, 1, 1, Ho, Wo, false);
    r.bn(join_name(p, "proj_bn"), out);
  }
  r.elementwise(join_name(p, "add"), out_elems);
  r.elementwise(join_name(p, "relu_out"), out_elems);
}

}  // namespace detail

/// Per-layer cost of a whole network at the NetworkSpec input size (or an override).
inline CostReport count_network(const NetworkSpec& spec_in, std::size_t input_h = 0, std::size_t input_w = 0) {
  NetworkSpec spec = spec_in;
  if (input_h) spec.input_h = input_h;
  if (input_w) spec.input_w = input_w;
  spec.validate();
  CostReport r;
  r.input_h = spec.input_h;
  r.input_w = spec.input_w;

  const StemSpec& st = spec.stem;
  const std::size_t pad = st.kernel / 2;
  std::size_t H = (spec.input_h + 2 * pad - st.kernel) / st.stride + 1;
  std::size_t W = (spec.input_w + 2 * pad - st.kernel) / st.stride + 1;
  r.conv("stem.conv", 3, st.channels, st.kernel, st.kernel, 1, H, W, false);
  if (!spec.preact) {
    r.bn("stem.bn", st.channels);
    r.elementwise("stem.relu", static_cast<std::uint64_t>(st.channels) * H * W);
  }
  if (st.max_pool) {
    H = (H + 2 - 3) / 2 + 1;
    W = (W + 2 - 3) / 2 + 1;
    r.elementwise("stem.maxpool", 9ULL * st.channels * H * W);
  }
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const StageSpec& stage = spec.stages[s];
    for (std::size_t b = 0; b < stage.bottlenecks; ++b) {
      const std::size_t stride = b == 0 ? spec.stage_stride(s) : 1;
      const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      detail::count_bottleneck(r, name, spec.preact, spec.block_input_channels(s, b), stage.inner, stride, H, W);
      H = (H - 1) / stride + 1;
      W = (W - 1) / stride + 1;
      if (spec.gsop_after(s, b))
        detail::count_gsop(r, "stage" + std::to_string(s + 1) + ".gsop" + std::to_string(b), stage.gsop, stage.out(),
                           spec, H, W);
    }
  }
  const std::size_t c = spec.feature_channels();
  if (spec.preact) {
    r.bn("final_bn", c);
    r.elementwise("final_relu", static_cast<std::uint64_t>(c) * H * W);
  }
  if (spec.head == HeadKind::isqrt_cov) {
    const std::size_t d = spec.isqrt.c_reduced;
    detail::count_reduce(r, "head.isqrt", c, d, H, W);
    r.elementwise("head.isqrt.covariance", symmetric_gram_macs(d, H * W));
    const std::uint64_t d2 = static_cast<std::uint64_t>(d) * d;
    r.elementwise("head.isqrt.sqrt", 3ULL * spec.isqrt.iterations * d2 * d + 2 * d2);
  } else {
    if (spec.head == HeadKind::gavp_after_gsop) detail::count_gsop(r, "head.gsop", spec.head_gsop, c, spec, H, W);
    r.elementwise("head.gavp", static_cast<std::uint64_t>(c) * H * W);
  }
  r.linear("classifier", spec.representation_dim(), spec.classes);
  return r;
}

/// Parameter count of a realized network per layer against the analytic report.
struct CostResidual {
  std::string layer;
  std::int64_t analytic = 0;
  std::int64_t realized = 0;
  std::int64_t diff() const { return realized - analytic; }
};

struct CostVerification {
  std::vector<CostResidual> residuals;  // only layers that disagree

  bool ok() const { return residuals.empty(); }
  std::string describe() const {
    std::ostringstream os;
    for (const auto& r : residuals)
      os << r.layer << ": analytic " << r.analytic << ", realized " << r.realized << " (residual " << r.diff() << ")\n";
    return os.str();
  }
};

inline std::string layer_of(const std::string& param_name) {
  const auto dot = param_name.rfind('.');
  return dot == std::string::npos ? param_name : param_name.substr(0, dot);
}

template <class T>
CostVerification verify_runtime_cost(const CostReport& report, Module<T>& net) {
  std::map<std::string, std::int64_t> analytic, realized;
  for (const auto& e : report.entries)
    if (e.params) analytic[e.layer] += static_cast<std::int64_t>(e.params);
  for (const auto& p : net.parameters()) realized[layer_of(p.name)] += static_cast<std::int64_t>(p.tensor->numel());
  CostVerification v;
  for (const auto& [layer, n] : analytic) {
    auto it = realized.find(layer);
    const std::int64_t got = it == realized.end() ? 0 : it->second;
    if (got != n) v.residuals.push_back({layer, n, got});
  }
  for (const auto& [layer, n] : realized)
    if (!analytic.count(layer)) v.residuals.push_back({layer, 0, n});
  return v;
}

/// Block presets: conv4_x position of a ResNet, 14 x 14 x 1024 input.
inline std::map<std::string, std::string> block_presets() {
  return {{"gsop-channel-conv4x", "channel-wise GSoP block, c'=1024, c=128"},
          {"gsop-position-conv4x", "position-wise GSoP block, c'=1024, c=128, 8x8 target"}};
}

inline GsopChannelConfig conv4x_channel_config() {
  GsopChannelConfig c;
  c.c_in = 1024;
  c.c_reduced = 128;
  return c;
}

inline GsopPositionConfig conv4x_position_config() {
  GsopPositionConfig c;
  c.c_in = 1024;
  c.c_reduced = 128;
  c.target_h = c.target_w = 8;
  return c;
}

/// Resolves a block preset or a network preset. H/W of 0 keep the default
/// input size (14x14 for blocks, the NetworkSpec input for networks).
inline CostReport count_arch(const std::string& arch, std::size_t H = 0, std::size_t W = 0) {
  if (arch == "gsop-channel-conv4x") return count_block(conv4x_channel_config(), H ? H : 14, W ? W : 14);
  if (arch == "gsop-position-conv4x") return count_block(conv4x_position_config(), H ? H : 14, W ? W : 14);
  auto specs = preset_specs();
  auto it = specs.find(arch);
  if (it == specs.end()) {
    std::string list;
    for (auto& [k, v] : block_presets()) list += (list.empty() ? "" : ", ") + k;
    for (auto& [k, v] : specs) list += ", " + k;
    throw ConfigError("unknown architecture '" + arch + "'; available: " + list);
  }
  return count_network(it->second, H, W);
}

inline std::string report_csv(const CostReport& r) {
  std::ostringstream os;
  os << "layer,params,macs\n";
  for (const auto& e : r.entries) os << e.layer << ',' << e.params << ',' << e.macs << '\n';
  os << "TOTAL," << r.total_params() << ',' << r.total_macs() << '\n';
  return os.str();
}

inline std::string report_text(const CostReport& r) {
  std::size_t width = 5;
  for (const auto& e : r.entries) width = std::max(width, e.layer.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s %14s %16s\n", static_cast<int>(width), "layer", "params", "macs");
  os << line;
  for (const auto& e : r.entries) {
    std::snprintf(line, sizeof line, "%-*s %14llu %16llu\n", static_cast<int>(width), e.layer.c_str(),
                  static_cast<unsigned long long>(e.params), static_cast<unsigned long long>(e.macs));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-*s %14llu %16llu\n", static_cast<int>(width), "TOTAL",
                static_cast<unsigned long long>(r.total_params()), static_cast<unsigned long long>(r.total_macs()));
  os << line;
  os << "input " << r.input_h << "x" << r.input_w << ": " << format_millions(r.total_params()) << "M params, "
     << format_millions(r.total_macs()) << "M MACs\n";
  return os.str();
}

}  // namespace gsop
