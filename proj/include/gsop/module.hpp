#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "gsop/conv.hpp"
#include "gsop/norm.hpp"
#include "gsop/ops.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

/// Role of a parameter; normalization parameters are exempt from weight decay.
enum class ParamKind { weight, bias, norm };

template <class T>
struct ParamSlot {
  std::string name;
  Tensor<T>* tensor;
  ParamKind kind;
};

template <class T>
struct BufferSlot {
  std::string name;
  std::vector<T>* values;
};

template <class T>
struct Registry {
  std::vector<ParamSlot<T>> params;
  std::vector<BufferSlot<T>> buffers;
};

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

/// Anything owning parameters or buffers. Names are dot-joined paths, stable
/// across runs; checkpoints and cost verification key on them.
template <class T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(const std::string& prefix, Registry<T>& out) = 0;

  std::vector<ParamSlot<T>> parameters() {
    Registry<T> r;
    collect("", r);
    return r.params;
  }
  std::vector<BufferSlot<T>> buffers() {
    Registry<T> r;
    collect("", r);
    return r.buffers;
  }
  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }
  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.tensor->numel();
    return n;
  }
};

/// Fan-in scaled normal initialization. Values are drawn in double precision
/// so float and double networks built from the same seed agree.
template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 2.0) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw, Conv2dOptions opt, bool with_bias,
         std::mt19937_64& rng)
      : opt_(opt), weight_(he_normal<T>(Shape{out, in / opt.groups, kh, kw}, in / opt.groups * kh * kw, rng)) {
    if (opt.groups == 0 || in % opt.groups || out % opt.groups)
      throw ConfigError("Conv2d: channels " + std::to_string(in) + "->" + std::to_string(out) +
                        " not divisible by groups " + std::to_string(opt.groups));
    if (with_bias) bias_ = Tensor<T>(Shape{out}, T(0), true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight_, bias_.defined() ? &bias_ : nullptr, opt_); }

  void collect(const std::string& prefix, Registry<T>& r) override {
    r.params.push_back({join_name(prefix, "weight"), &weight_, ParamKind::weight});
    if (bias_.defined()) r.params.push_back({join_name(prefix, "bias"), &bias_, ParamKind::bias});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Conv2dOptions& options() const { return opt_; }

 private:
  Conv2dOptions opt_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <class T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::size_t channels, BatchNormOptions opt = {})
      : opt_(opt), gamma_(Shape{channels}, T(1), true), beta_(Shape{channels}, T(0), true), state_(channels) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return batch_norm(x, gamma_, beta_, state_, mode, opt_); }

  void collect(const std::string& prefix, Registry<T>& r) override {
    r.params.push_back({join_name(prefix, "gamma"), &gamma_, ParamKind::norm});
    r.params.push_back({join_name(prefix, "beta"), &beta_, ParamKind::norm});
    r.buffers.push_back({join_name(prefix, "running_mean"), &state_.running_mean});
    r.buffers.push_back({join_name(prefix, "running_var"), &state_.running_var});
  }

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  BatchNormState<T>& state() { return state_; }

 private:
  BatchNormOptions opt_;
  Tensor<T> gamma_;
  Tensor<T> beta_;
  BatchNormState<T> state_;
};

template <class T>
class Linear : public Module<T> {
 public:
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight_(he_normal<T>(Shape{out, in}, in, rng, 1.0)), bias_(Shape{out}, T(0), true) {}

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight_, &bias_); }

  void collect(const std::string& prefix, Registry<T>& r) override {
    r.params.push_back({join_name(prefix, "weight"), &weight_, ParamKind::weight});
    r.params.push_back({join_name(prefix, "bias"), &bias_, ParamKind::bias});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

enum class Activation { none, relu, leaky_relu, sigmoid };

template <class T>
Tensor<T> activate(const Tensor<T>& x, Activation act, double slope = 0.1) {
  switch (act) {
    case Activation::relu:
      return relu(x);
    case Activation::leaky_relu:
      return leaky_relu(x, static_cast<T>(slope));
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::none:
      break;
  }
  return x;
}

/// conv -> BN -> activation, the unit used for reductions and excitation rows.
template <class T>
class ConvBnAct : public Module<T> {
 public:
  ConvBnAct(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw, Conv2dOptions opt, Activation act,
            std::mt19937_64& rng, double slope = 0.1)
      : conv_(in, out, kh, kw, opt, false, rng), bn_(out), act_(act), slope_(slope) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return activate(bn_.forward(conv_.forward(x), mode), act_, slope_);
  }

  void collect(const std::string& prefix, Registry<T>& r) override {
    conv_.collect(join_name(prefix, "conv"), r);
    bn_.collect(join_name(prefix, "bn"), r);
  }

  Conv2d<T>& conv() { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  Activation act_;
  double slope_;
};

}  // namespace gsop
