#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gsop/module.hpp"
#include "gsop/ops.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

struct GradcheckOptions {
  double step = 1e-4;
  std::size_t samples_per_group = 0;  // 0 checks every element
  double floor = 1e-4;                // denominator floor of the relative error
  std::uint64_t seed = 0;
  // A kink (ReLU, max) inside the stencil makes the two second-order
  // differences it contains disagree; the step is then cut by 10x, up to
  // kink_retries times, keeping the most self-consistent estimate.
  double kink_threshold = 1e-5;
  std::size_t kink_retries = 3;
};

struct GroupError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradcheckReport {
  std::vector<GroupError> groups;

  double max_error() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_error);
    return m;
  }
  const GroupError* worst() const {
    const GroupError* w = nullptr;
    for (const auto& g : groups)
      if (!w || g.max_rel_error > w->max_rel_error) w = &g;
    return w;
  }
  bool passed(double tol) const { return max_error() < tol; }
  void merge(const GradcheckReport& other, const std::string& prefix = "") {
    for (auto g : other.groups) {
      if (!prefix.empty()) g.name = prefix + "/" + g.name;
      groups.push_back(std::move(g));
    }
  }
};

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Fixed random projection so that every output element reaches the loss
/// with a distinct weight.
inline std::vector<double> projection_weights(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> w(n);
  for (auto& v : w) v = dist(rng);
  return w;
}

/// Compares analytic gradients against the fourth-order central difference
/// (f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h for each named target. `loss` must
/// rebuild the graph from the targets' current values on every call. Buffers
/// of `stateful` (BN running statistics) are restored after every evaluation
/// so the probes do not drift the state.
template <class LossFn>
GradcheckReport gradcheck(const std::vector<std::pair<std::string, Tensor<double>*>>& targets, LossFn&& loss,
                          const GradcheckOptions& opt = {}, Module<double>* stateful = nullptr) {
  std::vector<std::vector<double>> saved_buffers;
  std::vector<BufferSlot<double>> buffers;
  if (stateful) {
    buffers = stateful->buffers();
    for (auto& b : buffers) saved_buffers.push_back(*b.values);
  }
  auto restore = [&] {
    for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].values = saved_buffers[i];
  };

  for (auto& [name, t] : targets) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  {
    Tensor<double> l = loss();
    backward(l);
  }
  restore();
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : targets) {
    auto g = t->grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t->numel(), 0.0);
  }

  auto eval = [&] {
    NoGradGuard guard;
    const double v = loss().item();
    restore();
    return v;
  };

  std::mt19937_64 rng(opt.seed);
  GradcheckReport report;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    auto& [name, t] = targets[k];
    std::vector<std::size_t> idx(t->numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.samples_per_group && opt.samples_per_group < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.samples_per_group);
      std::sort(idx.begin(), idx.end());
    }
    GroupError ge;
    ge.name = name;
    auto data = t->mutable_data();
    for (std::size_t i : idx) {
      const double x0 = data[i];
      double numeric = 0.0, best = 0.0;
      double h = opt.step * std::max(1.0, std::abs(x0));
      for (std::size_t attempt = 0; attempt <= opt.kink_retries; ++attempt, h *= 0.1) {
        double f[4];
        const double offsets[4] = {-2.0, -1.0, 1.0, 2.0};
        for (int s = 0; s < 4; ++s) {
          data[i] = x0 + offsets[s] * h;
          f[s] = eval();
        }
        data[i] = x0;
        const double d1 = (f[2] - f[1]) / (2.0 * h), d2 = (f[3] - f[0]) / (4.0 * h);
        // Rounding noise of the differences, so noise alone never looks like a kink.
        const double fmax = std::max({std::abs(f[0]), std::abs(f[1]), std::abs(f[2]), std::abs(f[3])});
        const double noise = 64.0 * std::numeric_limits<double>::epsilon() * fmax / h;
        const double allowed = opt.kink_threshold * std::max({std::abs(d1), std::abs(d2), opt.floor}) + noise;
        const double excess = std::abs(d1 - d2) / allowed;
        if (attempt == 0 || excess < best) {
          best = excess;
          numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h);
        }
        if (excess <= 1.0) break;
      }
      const double err = relative_error(analytic[k][i], numeric, opt.floor);
      if (ge.checked == 0 || err > ge.max_rel_error) {
        ge.max_rel_error = err;
        ge.worst_index = i;
        ge.analytic = analytic[k][i];
        ge.numeric = numeric;
      }
      ++ge.checked;
    }
    report.groups.push_back(std::move(ge));
  }
  return report;
}

/// Targets for every parameter of a module, named by registry path.
inline std::vector<std::pair<std::string, Tensor<double>*>> parameter_targets(Module<double>& m) {
  std::vector<std::pair<std::string, Tensor<double>*>> out;
  for (auto& p : m.parameters()) out.emplace_back(p.name, p.tensor);
  return out;
}

/// Gaussian tensor, used for random test inputs.
template <class T>
Tensor<T> random_normal(Shape shape, std::mt19937_64& rng, double stddev = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

}  // namespace gsop
