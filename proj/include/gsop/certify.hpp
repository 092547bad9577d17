#pragma once

// Finite-difference certification of the analytic backward passes. Each
// suite builds a small f64 instance of a component from a seed, takes a
// random projection of its output as the loss, and compares gradients with
// respect to every parameter group (and the input) against a central
// difference.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gsop/backbone.hpp"
#include "gsop/gradcheck.hpp"

namespace gsop {

inline const std::vector<std::string>& certify_suites() {
  static const std::vector<std::string> names{"channel", "position", "fused", "isqrt", "network"};
  return names;
}

/// Tolerance the suite is expected to meet (the square-root head iterates,
/// so it is held to a looser bound).
inline double certify_tolerance(const std::string& suite) {
  return suite == "isqrt" || suite == "network" ? 1e-3 : 1e-4;
}

namespace detail {

inline void jitter_norm_params(Module<double>& m, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 0.2);
  for (auto& p : m.parameters())
    if (p.kind == ParamKind::norm || p.kind == ParamKind::bias)
      for (auto& v : p.tensor->mutable_data()) v += d(rng);
}

template <class Block>
GradcheckReport check_block(Block& block, Shape input, std::mt19937_64& rng, const GradcheckOptions& opt) {
  jitter_norm_params(block, rng);
  auto x = random_normal<double>(input, rng, 1.0, true);
  std::size_t outputs = 0;
  {
    NoGradGuard g;
    outputs = block.forward(x, Mode::train).numel();
  }
  auto r = projection_weights(outputs, rng());
  auto targets = parameter_targets(block);
  targets.emplace_back("input", &x);
  auto loss = [&] { return weighted_sum(block.forward(x, Mode::train), std::span<const double>(r)); };
  return gradcheck(targets, loss, opt, &block);
}

inline GsopChannelConfig small_channel_config() {
  GsopChannelConfig c;
  c.c_in = 8;
  c.c_reduced = 4;
  return c;
}

inline GsopPositionConfig small_position_config() {
  GsopPositionConfig c;
  c.c_in = 8;
  c.c_reduced = 4;
  c.target_h = c.target_w = 3;
  return c;
}

/// Random SPD matrix with eigenvalues in [0.5, 4].
inline Tensor<double> random_spd(std::size_t d, std::mt19937_64& rng) {
  auto b = random_normal<double>({d, d}, rng);
  std::vector<double> a(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += b[k * d + i] * b[k * d + j];
      a[i * d + j] = s / static_cast<double>(d) + (i == j ? 0.5 : 0.0);
    }
  return Tensor<double>(Shape{d, d}, std::move(a));
}

}  // namespace detail

/// Runs one suite. Batches hold 4 items so that every BN layer (including the
/// excitation's, which sees one value per item) has a non-degenerate batch.
inline GradcheckReport certify(const std::string& suite, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradcheckOptions opt;
  opt.seed = seed;
  if (suite == "channel") {
    GsopChannelBlock<double> b(detail::small_channel_config(), rng);
    return detail::check_block(b, {4, 8, 6, 6}, rng, opt);
  }
  if (suite == "position") {
    GsopPositionBlock<double> b(detail::small_position_config(), rng);
    return detail::check_block(b, {4, 8, 6, 6}, rng, opt);
  }
  if (suite == "fused") {
    GradcheckReport all;
    for (FusionMode m : {FusionMode::average, FusionMode::maximum, FusionMode::concatenation}) {
      GsopFusedBlock<double> b(detail::small_channel_config(), detail::small_position_config(), m, rng);
      all.merge(detail::check_block(b, {4, 8, 6, 6}, rng, opt), to_string(m));
    }
    return all;
  }
  if (suite == "isqrt") {
    GradcheckReport all;
    auto a = detail::random_spd(6, rng);
    a.set_requires_grad(true);
    auto r = projection_weights(36, rng());
    all.merge(gradcheck({{"A", &a}}, [&] { return weighted_sum(newton_schulz_sqrt(a, 5), std::span<const double>(r)); },
                        opt),
              "sqrt");
    IsqrtConfig cfg;
    cfg.c_reduced = 4;
    IsqrtCovHead<double> head(8, cfg, rng);
    all.merge(detail::check_block(head, {4, 8, 5, 5}, rng, opt), "head");
    return all;
  }
  if (suite == "network") {
    NetworkSpec spec = preset("toy_gsop2");
    Network<double> net(spec, seed);
    detail::jitter_norm_params(net, rng);
    auto x = random_normal<double>({4, 3, spec.input_h, spec.input_w}, rng, 1.0, true);
    auto r = projection_weights(4 * spec.classes, rng());
    auto loss = [&] { return weighted_sum(net.forward(x, Mode::train), std::span<const double>(r)); };
    auto targets = parameter_targets(net);
    // About 30 sampled parameter entries spread over all groups.
    opt.samples_per_group = std::max<std::size_t>(1, 30 / targets.size());
    return gradcheck(targets, loss, opt, &net);
  }
  std::string list;
  for (const auto& s : certify_suites()) list += (list.empty() ? "" : ", ") + s;
  throw ConfigError("unknown gradcheck block '" + suite + "'; available: " + list);
}

inline std::string format_report(const GradcheckReport& r) {
  std::ostringstream os;
  os.precision(3);
  for (const auto& g : r.groups)
    os << g.name << " max_rel_error=" << std::scientific << g.max_rel_error << " checked=" << g.checked << '\n';
  return os.str();
}

}  // namespace gsop
