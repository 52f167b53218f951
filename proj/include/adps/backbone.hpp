#pragma once

// Teacher and student feature extractors. Both share one architecture: per
// stage, a strided entry ConvBlock followed by a stride-1 ConvBlock
// (conv-norm-ReLU each). The teacher is frozen and always runs with stored
// normalization statistics; the student owns independent trainable
// parameters.
//
// The asymmetric forward stacks all patches of the batch along n and runs
// them jointly, so training-mode normalization statistics are computed over
// the whole patch batch. Per-stage outputs are reassembled to full maps by
// original position; with stage splits active the reassembly folds the split
// stack in reverse. Patch indices compose sample-major, then row-major per
// split level.

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adps/archive.hpp"
#include "adps/autodiff.hpp"
#include "adps/errors.hpp"
#include "adps/nn.hpp"
#include "adps/rng.hpp"
#include "adps/tensor.hpp"

namespace adps::backbone {

using json = nlohmann::json;

struct BackboneConfig {
  std::vector<int> stage_channels;
  std::vector<int> stage_strides;  // cumulative downsample factor per stage
  int input_channels = 3;
  bool norm = true;
  int kernel_size = 3;  // 1 yields a per-pixel network (receptive field 1)

  int stages() const { return static_cast<int>(stage_channels.size()); }

  void validate() const {
    if (stage_channels.empty() || stage_channels.size() != stage_strides.size())
      throw ConfigError("backbone: stage_channels and stage_strides must be same nonzero size");
    int prev = 0;
    for (std::size_t i = 0; i < stage_strides.size(); ++i) {
      const int s = stage_strides[i];
      if (s <= prev) throw ConfigError("backbone: strides must be strictly increasing");
      const int base = (i == 0) ? 1 : stage_strides[i - 1];
      if (s % base != 0)
        throw ConfigError("backbone: stride " + std::to_string(s) + " not a multiple of " +
                          std::to_string(base));
      prev = s;
    }
    for (int c : stage_channels)
      if (c <= 0) throw ConfigError("backbone: channels must be positive");
    if (input_channels <= 0) throw ConfigError("backbone: input_channels must be positive");
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ConfigError("backbone: kernel_size must be odd and >= 1");
  }

  json to_json() const {
    return json{{"stage_channels", stage_channels},
                {"stage_strides", stage_strides},
                {"input_channels", input_channels},
                {"norm", norm},
                {"kernel_size", kernel_size}};
  }

  static BackboneConfig from_json(const json& j) {
    BackboneConfig cfg;
    cfg.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    cfg.stage_strides = j.at("stage_strides").get<std::vector<int>>();
    cfg.input_channels = j.at("input_channels").get<int>();
    cfg.norm = j.at("norm").get<bool>();
    cfg.kernel_size = j.at("kernel_size").get<int>();
    return cfg;
  }
};

// Ordered shallow -> deep.
struct StagePyramid {
  std::vector<Tensor> stages;
};

struct AsymmetryPlan {
  int input_k = 1;
  // stage index (1-based) -> split factor applied to that stage's output
  // before the next stage consumes it. Factors compose with the input split.
  std::map<int, int> stage_splits;
};

// Walks the stage/split schedule over patch dims; every division must be
// exact or the plan is rejected.
inline void validate_plan_geometry(const BackboneConfig& cfg, int in_h, int in_w,
                                   const AsymmetryPlan& plan) {
  if (plan.input_k < 1) throw DivisibilityError("asymmetry plan: input_k must be >= 1");
  if (in_h % plan.input_k != 0 || in_w % plan.input_k != 0)
    throw DivisibilityError("asymmetry plan: input " + std::to_string(in_h) + "x" +
                            std::to_string(in_w) + " not divisible by k=" +
                            std::to_string(plan.input_k));
  const int stages = cfg.stages();
  int h = in_h / plan.input_k;
  int w = in_w / plan.input_k;
  for (int i = 0; i < stages; ++i) {
    const int ratio =
        (i == 0) ? cfg.stage_strides[0] : cfg.stage_strides[i] / cfg.stage_strides[i - 1];
    if (h % ratio != 0 || w % ratio != 0)
      throw DivisibilityError("asymmetry plan: patch " + std::to_string(h) + "x" +
                              std::to_string(w) + " not divisible by stage " +
                              std::to_string(i + 1) + " stride " + std::to_string(ratio));
    h /= ratio;
    w /= ratio;
    auto split = plan.stage_splits.find(i + 1);
    if (split != plan.stage_splits.end() && i + 1 < stages && split->second > 1) {
      if (h % split->second != 0 || w % split->second != 0)
        throw DivisibilityError("asymmetry plan: stage " + std::to_string(i + 1) +
                                " features " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by split " + std::to_string(split->second));
      h /= split->second;
      w /= split->second;
    }
  }
  for (const auto& [stage, factor] : plan.stage_splits) {
    if (stage < 1 || stage >= stages)
      throw DivisibilityError("asymmetry plan: stage split index " + std::to_string(stage) +
                              " out of range [1, " + std::to_string(stages - 1) + "]");
    if (factor < 1) throw DivisibilityError("asymmetry plan: split factor must be >= 1");
  }
}

class Backbone {
 public:
  Backbone() = default;

  Backbone(const BackboneConfig& cfg, std::uint64_t seed, bool trainable) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "backbone-init"));
    int cin = cfg_.input_channels;
    for (int i = 0; i < cfg_.stages(); ++i) {
      const int ratio = (i == 0) ? cfg_.stage_strides[0]
                                 : cfg_.stage_strides[i] / cfg_.stage_strides[i - 1];
      const int cout = cfg_.stage_channels[i];
      entry_.emplace_back(cfg_.kernel_size, cin, cout, ratio, rng, cfg_.norm, trainable);
      inner_.emplace_back(cfg_.kernel_size, cout, cout, 1, rng, cfg_.norm, trainable);
      cin = cout;
    }
    trainable_ = trainable;
  }

  const BackboneConfig& config() const { return cfg_; }
  bool trainable() const { return trainable_; }
  int deepest_stride() const { return cfg_.stage_strides.back(); }

  int entry_ratio(int stage) const {
    return (stage == 0) ? cfg_.stage_strides[0]
                        : cfg_.stage_strides[stage] / cfg_.stage_strides[stage - 1];
  }

  ag::Var stage_forward(int stage, const ag::Var& x, bool training) {
    const int ratio = entry_ratio(stage);
    if (x->value.h() % ratio != 0 || x->value.w() % ratio != 0)
      throw ShapeError("backbone stage " + std::to_string(stage + 1) + ": dims " +
                       x->value.shape().str() + " not divisible by stride " +
                       std::to_string(ratio));
    ag::Var y = entry_[stage].forward(x, training);
    return inner_[stage].forward(y, training);
  }

  // Whole-input forward; one Var per stage, shallow -> deep.
  std::vector<ag::Var> forward(const ag::Var& x, bool training) {
    std::vector<ag::Var> stages;
    ag::Var cur = x;
    for (int i = 0; i < cfg_.stages(); ++i) {
      cur = stage_forward(i, cur, training);
      stages.push_back(cur);
    }
    return stages;
  }

  // Patch-asymmetric forward. Emits full-resolution (reassembled) per-stage
  // feature maps shape-aligned with a whole-image forward.
  std::vector<ag::Var> forward_asymmetric(const ag::Var& x, const AsymmetryPlan& plan,
                                          bool training) {
    validate_plan(x->value.shape(), plan);
    std::vector<ag::Var> stages;
    std::vector<int> stack;
    ag::Var cur = x;
    if (plan.input_k > 1) {
      cur = ag::to_patches(cur, plan.input_k);
      stack.push_back(plan.input_k);
    }
    for (int i = 0; i < cfg_.stages(); ++i) {
      cur = stage_forward(i, cur, training);
      ag::Var emit = cur;
      for (auto it = stack.rbegin(); it != stack.rend(); ++it) emit = ag::from_patches(emit, *it);
      stages.push_back(emit);
      auto split = plan.stage_splits.find(i + 1);
      if (split != plan.stage_splits.end() && i + 1 < cfg_.stages() && split->second > 1) {
        cur = ag::to_patches(cur, split->second);
        stack.push_back(split->second);
      }
    }
    return stages;
  }

  void collect_trainable(std::vector<ag::Var>& out) const {
    for (const auto& b : entry_) b.collect_trainable(out);
    for (const auto& b : inner_) b.collect_trainable(out);
  }

  nn::NamedState state(const std::string& prefix) {
    nn::NamedState out;
    for (std::size_t i = 0; i < entry_.size(); ++i) {
      entry_[i].collect_state(prefix + ".stage" + std::to_string(i + 1) + ".entry", out);
      inner_[i].collect_state(prefix + ".stage" + std::to_string(i + 1) + ".inner", out);
    }
    return out;
  }

  std::uint64_t identity_hash() { return nn::state_hash(state("net")); }

 private:
  void validate_plan(const Shape& in, const AsymmetryPlan& plan) const {
    validate_plan_geometry(cfg_, in.h, in.w, plan);
  }

  BackboneConfig cfg_;
  std::vector<nn::ConvBlock> entry_;
  std::vector<nn::ConvBlock> inner_;
  bool trainable_ = false;
};

enum class WeightsMode { kRandomFrozen, kLoadCheckpoint };

inline void save_backbone(Backbone& net, const std::string& path) {
  json meta;
  meta["kind"] = "adps-backbone";
  meta["backbone_config"] = net.config().to_json();
  archive::save(path, meta, net.state("net"));
}

// The teacher is frozen: parameters never require gradients and forwards run
// in eval mode only.
inline Backbone build_teacher(const BackboneConfig& cfg, WeightsMode mode,
                              std::uint64_t seed = 0, const std::string& checkpoint_path = "") {
  Backbone net(cfg, seed, /*trainable=*/false);
  if (mode == WeightsMode::kLoadCheckpoint) {
    archive::Loaded loaded;
    try {
      loaded = archive::load(checkpoint_path);
    } catch (const CheckpointError&) {
      throw;
    }
    archive::restore_state(loaded, net.state("net"), "teacher checkpoint");
  }
  return net;
}

inline StagePyramid teacher_forward(Backbone& net, const Tensor& image) {
  if (image.h() % net.deepest_stride() != 0 || image.w() % net.deepest_stride() != 0)
    throw ShapeError("teacher_forward: input " + image.shape().str() +
                     " not divisible by deepest stride " +
                     std::to_string(net.deepest_stride()));
  auto stages = net.forward(ag::constant(image), /*training=*/false);
  StagePyramid p;
  for (auto& s : stages) p.stages.push_back(std::move(s->value));
  return p;
}

inline StagePyramid student_forward(Backbone& net, const Tensor& image,
                                    const AsymmetryPlan& plan) {
  auto stages = net.forward_asymmetric(ag::constant(image), plan, /*training=*/false);
  StagePyramid p;
  for (auto& s : stages) p.stages.push_back(std::move(s->value));
  return p;
}

}  // namespace adps::backbone
