#pragma once

// Trainable layers on top of the autodiff tape, plus Adam. Modules expose
// two views of their state: collect_trainable() feeds the optimizer, and
// collect_state() yields every named tensor (weights and normalization
// buffers) for checkpointing and identity hashing.

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "adps/autodiff.hpp"
#include "adps/rng.hpp"
#include "adps/tensor.hpp"

namespace adps::nn {

using NamedState = std::vector<std::pair<std::string, Tensor*>>;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int kernel, int cin, int cout, int stride, int pad, Rng& rng, bool trainable) {
    stride_ = stride;
    pad_ = pad;
    const real stddev = std::sqrt(2.0 / (static_cast<real>(kernel) * kernel * cin));
    w_ = ag::leaf(Tensor::normal(Shape{kernel, kernel, cin, cout}, rng, 0.0, stddev), trainable);
    b_ = ag::leaf(Tensor(1, 1, 1, cout), trainable);
  }

  ag::Var forward(const ag::Var& x) const { return ag::conv2d(x, w_, b_, stride_, pad_); }

  void collect_trainable(std::vector<ag::Var>& out) const {
    if (w_->requires_grad) {
      out.push_back(w_);
      out.push_back(b_);
    }
  }
  void collect_state(const std::string& prefix, NamedState& out) {
    out.emplace_back(prefix + ".w", &w_->value);
    out.emplace_back(prefix + ".b", &b_->value);
  }

  ag::Var w_, b_;
  int stride_ = 1, pad_ = 0;
};

class TConv2d {
 public:
  TConv2d() = default;
  TConv2d(int cin, int cout, Rng& rng, bool trainable) {
    const real stddev = std::sqrt(2.0 / (4.0 * cin));
    w_ = ag::leaf(Tensor::normal(Shape{2, 2, cin, cout}, rng, 0.0, stddev), trainable);
    b_ = ag::leaf(Tensor(1, 1, 1, cout), trainable);
  }

  ag::Var forward(const ag::Var& x) const { return ag::conv_transpose2d_2x(x, w_, b_); }

  void collect_trainable(std::vector<ag::Var>& out) const {
    if (w_->requires_grad) {
      out.push_back(w_);
      out.push_back(b_);
    }
  }
  void collect_state(const std::string& prefix, NamedState& out) {
    out.emplace_back(prefix + ".w", &w_->value);
    out.emplace_back(prefix + ".b", &b_->value);
  }

  ag::Var w_, b_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(int channels, bool trainable) {
    gamma_ = ag::leaf(Tensor::full(Shape{1, 1, 1, channels}, 1.0), trainable);
    beta_ = ag::leaf(Tensor(1, 1, 1, channels), trainable);
    running_mean_ = Tensor(1, 1, 1, channels);
    running_var_ = Tensor::full(Shape{1, 1, 1, channels}, 1.0);
  }

  ag::Var forward(const ag::Var& x, bool training) {
    return ag::batch_norm(x, gamma_, beta_, running_mean_, running_var_, training, momentum_,
                          eps_);
  }

  void collect_trainable(std::vector<ag::Var>& out) const {
    if (gamma_->requires_grad) {
      out.push_back(gamma_);
      out.push_back(beta_);
    }
  }
  void collect_state(const std::string& prefix, NamedState& out) {
    out.emplace_back(prefix + ".gamma", &gamma_->value);
    out.emplace_back(prefix + ".beta", &beta_->value);
    out.emplace_back(prefix + ".running_mean", &running_mean_);
    out.emplace_back(prefix + ".running_var", &running_var_);
  }

  ag::Var gamma_, beta_;
  Tensor running_mean_, running_var_;
  real momentum_ = 0.1;
  real eps_ = 1e-5;
};

// conv -> [BN] -> ReLU
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(int kernel, int cin, int cout, int stride, Rng& rng, bool use_bn, bool trainable)
      : conv_(kernel, cin, cout, stride, kernel / 2, rng, trainable), use_bn_(use_bn) {
    if (use_bn) bn_ = BatchNorm2d(cout, trainable);
  }

  ag::Var forward(const ag::Var& x, bool training) {
    ag::Var y = conv_.forward(x);
    if (use_bn_) y = bn_.forward(y, training);
    return ag::relu(y);
  }

  void collect_trainable(std::vector<ag::Var>& out) const {
    conv_.collect_trainable(out);
    if (use_bn_) bn_.collect_trainable(out);
  }
  void collect_state(const std::string& prefix, NamedState& out) {
    conv_.collect_state(prefix + ".conv", out);
    if (use_bn_) bn_.collect_state(prefix + ".bn", out);
  }

  Conv2d conv_;
  BatchNorm2d bn_;
  bool use_bn_ = true;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<ag::Var> params, real beta1 = 0.9, real beta2 = 0.999,
                real eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const ag::Var& p : params_) slots_.push_back({Tensor(p->value.shape()),
                                                       Tensor(p->value.shape())});
  }

  void zero_grad() {
    for (ag::Var& p : params_)
      if (p->grad.size() == p->value.size()) p->grad.fill(0.0);
  }

  void step(real lr) {
    ++t_;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ag::Var& p = params_[i];
      if (p->grad.size() != p->value.size()) continue;  // no gradient this step
      Tensor& m = slots_[i].m;
      Tensor& v = slots_[i].v;
      for (std::size_t j = 0; j < p->value.size(); ++j) {
        const real g = p->grad[j];
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        p->value[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::vector<ag::Var> params_;
  struct Slot {
    Tensor m, v;
  };
  std::vector<Slot> slots_;
  real beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

inline std::uint64_t state_hash(const NamedState& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, tensor] : state) {
    h = tensor_bytes_hash(h ^ hash_tag(name), *tensor);
  }
  return h;
}

}  // namespace adps::nn
