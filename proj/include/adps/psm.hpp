#pragma once

// Post-Segmentation Module: a U-Net style decoder over the weighted pyramid
// {C_1..C_n}. Decoding starts from the deepest map, each UpBlock doubles the
// resolution (2x transposed conv), concatenates the matching skip, and
// applies two conv-BN-ReLU stacks. A final chain of 2x transposed convs
// bridges the shallowest stage resolution to full input resolution, followed
// by a 3x3 conv to two channels and a softmax (channel 0 normal, channel 1
// abnormal).
//
// Requires consecutive stage strides to differ by exactly 2x and the first
// stride to be a power of two; other geometries cannot be tiled by 2x
// upsampling.

#include <string>
#include <vector>

#include "adps/autodiff.hpp"
#include "adps/errors.hpp"
#include "adps/nn.hpp"
#include "adps/tensor.hpp"

namespace adps::psm {

// Softmax-normalized segmentation mask; channel 1 is the anomaly probability.
struct SegMask {
  Tensor probs;  // [n, H, W, 2]

  Tensor abnormal() const {
    Tensor a(probs.n(), probs.h(), probs.w(), 1);
    const std::size_t positions = static_cast<std::size_t>(probs.n()) * probs.h() * probs.w();
    for (std::size_t p = 0; p < positions; ++p) a[p] = probs[p * 2 + 1];
    return a;
  }
};

struct PsmConfig {
  int stages = 0;
  std::vector<int> upblock_channels;  // processing order (deep -> shallow), size stages-1
  int final_channels = 2;
};

class UpBlock {
 public:
  UpBlock() = default;
  UpBlock(int c_prev, int c_skip, int c_out, Rng& rng, bool trainable)
      : up_(c_prev, c_out, rng, trainable),
        conv1_(3, c_out + c_skip, c_out, 1, 1, rng, trainable),
        bn1_(c_out, trainable),
        conv2_(3, c_out, c_out, 1, 1, rng, trainable),
        bn2_(c_out, trainable) {}

  ag::Var forward(const ag::Var& p_prev, const ag::Var& skip, bool training) {
    ag::Var m = up_.forward(p_prev);
    if (m->value.h() != skip->value.h() || m->value.w() != skip->value.w())
      throw ShapeError("upblock: upsampled " + m->value.shape().str() +
                       " does not align with skip " + skip->value.shape().str());
    ag::Var pc = ag::concat_channels(m, skip);
    ag::Var y = ag::relu(bn1_.forward(conv1_.forward(pc), training));
    return ag::relu(bn2_.forward(conv2_.forward(y), training));
  }

  void collect_trainable(std::vector<ag::Var>& out) const {
    up_.collect_trainable(out);
    conv1_.collect_trainable(out);
    bn1_.collect_trainable(out);
    conv2_.collect_trainable(out);
    bn2_.collect_trainable(out);
  }
  void collect_state(const std::string& prefix, nn::NamedState& out) {
    up_.collect_state(prefix + ".up", out);
    conv1_.collect_state(prefix + ".conv1", out);
    bn1_.collect_state(prefix + ".bn1", out);
    conv2_.collect_state(prefix + ".conv2", out);
    bn2_.collect_state(prefix + ".bn2", out);
  }

 private:
  nn::TConv2d up_;
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::Conv2d conv2_;
  nn::BatchNorm2d bn2_;
};

class Psm {
 public:
  Psm() = default;

  // stage_channels/stage_strides shallow -> deep, as in the backbone config.
  Psm(const std::vector<int>& stage_channels, const std::vector<int>& stage_strides,
      std::uint64_t seed, std::vector<int> upblock_channels = {}, bool trainable = true) {
    const int n = static_cast<int>(stage_channels.size());
    if (n < 1 || stage_channels.size() != stage_strides.size())
      throw ConfigError("psm: bad stage configuration");
    for (int i = 0; i + 1 < n; ++i)
      if (stage_strides[i + 1] != 2 * stage_strides[i])
        throw ConfigError("psm: consecutive stage strides must differ by 2x");
    int s0 = stage_strides[0];
    if ((s0 & (s0 - 1)) != 0)
      throw ConfigError("psm: first stage stride must be a power of two");

    cfg_.stages = n;
    if (upblock_channels.empty()) {
      for (int j = n - 2; j >= 0; --j) upblock_channels.push_back(stage_channels[j]);
    }
    if (static_cast<int>(upblock_channels.size()) != n - 1)
      throw ConfigError("psm: expected " + std::to_string(n - 1) + " upblock channel entries");
    cfg_.upblock_channels = upblock_channels;

    Rng rng(derive_seed(seed, "psm-init"));
    int c_prev = stage_channels[n - 1];
    for (int idx = 0; idx < n - 1; ++idx) {
      const int c_skip = stage_channels[n - 2 - idx];
      const int c_out = upblock_channels[idx];
      blocks_.emplace_back(c_prev, c_skip, c_out, rng, trainable);
      c_prev = c_out;
    }
    while (s0 > 1) {
      bridge_up_.emplace_back(c_prev, c_prev, rng, trainable);
      bridge_bn_.emplace_back(c_prev, trainable);
      s0 /= 2;
    }
    final_ = nn::Conv2d(3, c_prev, cfg_.final_channels, 1, 1, rng, trainable);
  }

  const PsmConfig& config() const { return cfg_; }

  // pyramid: C_1..C_n shallow -> deep. Returns softmax probabilities.
  ag::Var forward(const std::vector<ag::Var>& pyramid, bool training) {
    if (static_cast<int>(pyramid.size()) != cfg_.stages)
      throw ShapeError("psm: pyramid has " + std::to_string(pyramid.size()) +
                       " stages, expected " + std::to_string(cfg_.stages));
    ag::Var p = pyramid.back();
    for (std::size_t idx = 0; idx < blocks_.size(); ++idx)
      p = blocks_[idx].forward(p, pyramid[pyramid.size() - 2 - idx], training);
    for (std::size_t i = 0; i < bridge_up_.size(); ++i) {
      p = bridge_up_[i].forward(p);
      p = ag::relu(bridge_bn_[i].forward(p, training));
    }
    return ag::softmax_channels(final_.forward(p));
  }

  void collect_trainable(std::vector<ag::Var>& out) const {
    for (const auto& b : blocks_) b.collect_trainable(out);
    for (const auto& t : bridge_up_) t.collect_trainable(out);
    for (const auto& b : bridge_bn_) b.collect_trainable(out);
    final_.collect_trainable(out);
  }
  nn::NamedState state(const std::string& prefix) {
    nn::NamedState out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect_state(prefix + ".up" + std::to_string(i + 1), out);
    for (std::size_t i = 0; i < bridge_up_.size(); ++i) {
      bridge_up_[i].collect_state(prefix + ".bridge" + std::to_string(i + 1) + ".up", out);
      bridge_bn_[i].collect_state(prefix + ".bridge" + std::to_string(i + 1) + ".bn", out);
    }
    final_.collect_state(prefix + ".final", out);
    return out;
  }

 private:
  PsmConfig cfg_;
  std::vector<UpBlock> blocks_;
  std::vector<nn::TConv2d> bridge_up_;
  std::vector<nn::BatchNorm2d> bridge_bn_;
  nn::Conv2d final_;
};

// Inference convenience over plain tensors.
inline SegMask segment(Psm& net, const std::vector<Tensor>& weighted_pyramid) {
  std::vector<ag::Var> vars;
  vars.reserve(weighted_pyramid.size());
  for (const Tensor& t : weighted_pyramid) vars.push_back(ag::constant(t));
  SegMask m;
  m.probs = net.forward(vars, /*training=*/false)->value;
  return m;
}

}  // namespace adps::psm
