#pragma once

// Weight Mask Block: per-position teacher/student similarity masks and the
// weighted feature C = (1 - W) * T, plus the two alternative fusion routes
// (feature difference, concat + 3x3 conv) used for comparisons.
//
// Mask conventions: cosine masks live in [-1, 1]; MSE masks map the raw
// per-position squared error d to 1 - d / max(d) per sample map, so 1 always
// means perfect agreement. A zero feature vector has cosine similarity 0
// (norms are clamped below at 1e-8 before dividing).

#include <string>
#include <vector>

#include "adps/autodiff.hpp"
#include "adps/errors.hpp"
#include "adps/nn.hpp"
#include "adps/tensor.hpp"

namespace adps::wmb {

enum class Metric { kCosine, kMse };
enum class FusionMode { kWmb, kDifference, kConcatConv };

struct SimilarityMask {
  Tensor values;  // [n, h, w, 1]
  Metric metric = Metric::kCosine;
};

namespace detail {

inline Tensor mse_map(const Tensor& t, const Tensor& s) {
  t.require_same_shape(s, "similarity_mask");
  Tensor d(t.n(), t.h(), t.w(), 1);
  const std::size_t positions = static_cast<std::size_t>(t.n()) * t.h() * t.w();
  for (std::size_t p = 0; p < positions; ++p) {
    real acc = 0.0;
    for (int c = 0; c < t.c(); ++c) {
      const real diff = t[p * t.c() + c] - s[p * t.c() + c];
      acc += diff * diff;
    }
    d[p] = acc / static_cast<real>(t.c());
  }
  return d;
}

// 1 - d / max(d), max taken per sample map; an all-zero map yields W == 1.
inline void normalize_mse_inplace(Tensor& d) {
  const std::size_t per_sample = static_cast<std::size_t>(d.h()) * d.w();
  for (int n = 0; n < d.n(); ++n) {
    real mx = 0.0;
    for (std::size_t p = 0; p < per_sample; ++p) mx = std::max(mx, d[n * per_sample + p]);
    if (mx <= 0.0) {
      for (std::size_t p = 0; p < per_sample; ++p) d[n * per_sample + p] = 1.0;
    } else {
      for (std::size_t p = 0; p < per_sample; ++p)
        d[n * per_sample + p] = 1.0 - d[n * per_sample + p] / mx;
    }
  }
}

}  // namespace detail

inline SimilarityMask similarity_mask(const Tensor& t, const Tensor& s, Metric metric) {
  t.require_same_shape(s, "similarity_mask");
  SimilarityMask mask;
  mask.metric = metric;
  if (metric == Metric::kCosine) {
    mask.values = Tensor(t.n(), t.h(), t.w(), 1);
    const std::size_t positions = static_cast<std::size_t>(t.n()) * t.h() * t.w();
    for (std::size_t p = 0; p < positions; ++p) {
      real nt, ns, dot;
      mask.values[p] =
          ag::detail::cosine_at(t.data() + p * t.c(), s.data() + p * t.c(), t.c(), nt, ns, dot);
    }
  } else {
    mask.values = detail::mse_map(t, s);
    detail::normalize_mse_inplace(mask.values);
  }
  return mask;
}

// C = (1 - W) * T, W broadcast over channels.
inline Tensor weight_features(const Tensor& t, const Tensor& mask_values) {
  if (mask_values.n() != t.n() || mask_values.h() != t.h() || mask_values.w() != t.w() ||
      mask_values.c() != 1)
    throw ShapeError("weight_features: mask " + mask_values.shape().str() + " vs features " +
                     t.shape().str());
  Tensor c(t.shape());
  const std::size_t positions = static_cast<std::size_t>(t.n()) * t.h() * t.w();
  for (std::size_t p = 0; p < positions; ++p) {
    const real wgt = 1.0 - mask_values[p];
    for (int ch = 0; ch < t.c(); ++ch) c[p * t.c() + ch] = wgt * t[p * t.c() + ch];
  }
  return c;
}

inline Tensor weight_features(const Tensor& t, const SimilarityMask& mask) {
  return weight_features(t, mask.values);
}

// ---------------------------------------------------------------------------
// Graph-level mask ops
// ---------------------------------------------------------------------------

// Differentiable cosine mask; gradients flow into t/s wherever they require
// them.
inline ag::Var mask_var(const ag::Var& t, const ag::Var& s, Metric metric) {
  if (metric == Metric::kCosine) return ag::cosine_map(t, s);
  // MSE mask: gradient flows through d; the per-sample max is treated as a
  // constant scale.
  Tensor d = detail::mse_map(t->value, s->value);
  const std::size_t per_sample = static_cast<std::size_t>(d.h()) * d.w();
  std::vector<real> maxd(d.n(), 0.0);
  for (int n = 0; n < d.n(); ++n)
    for (std::size_t p = 0; p < per_sample; ++p)
      maxd[n] = std::max(maxd[n], d[n * per_sample + p]);
  Tensor w(d.shape());
  for (int n = 0; n < d.n(); ++n)
    for (std::size_t p = 0; p < per_sample; ++p)
      w[n * per_sample + p] =
          maxd[n] <= 0.0 ? 1.0 : 1.0 - d[n * per_sample + p] / maxd[n];
  return ag::make_op(std::move(w), {t, s}, [maxd, per_sample](ag::Node& n) {
    ag::Var& t = n.parents[0];
    ag::Var& s = n.parents[1];
    const int cc = t->value.c();
    if (t->requires_grad) t->ensure_grad();
    if (s->requires_grad) s->ensure_grad();
    for (int sn = 0; sn < t->value.n(); ++sn) {
      if (maxd[sn] <= 0.0) continue;
      for (std::size_t p = 0; p < per_sample; ++p) {
        const std::size_t pos = sn * per_sample + p;
        const real g = -n.grad[pos] / maxd[sn] * 2.0 / static_cast<real>(cc);
        for (int c = 0; c < cc; ++c) {
          const real diff = t->value[pos * cc + c] - s->value[pos * cc + c];
          if (t->requires_grad) t->grad[pos * cc + c] += g * diff;
          if (s->requires_grad) s->grad[pos * cc + c] -= g * diff;
        }
      }
    }
  });
}

// Detached mask: computed from current values, enters the graph as a
// constant. This is the default training path for the similarity mask.
inline ag::Var mask_const(const ag::Var& t, const ag::Var& s, Metric metric) {
  return ag::constant(similarity_mask(t->value, s->value, metric).values);
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

// Owns the per-stage 3x3 reduction convs needed by the concat-conv mode;
// the other two modes are parameter-free.
class Fusion {
 public:
  Fusion() = default;

  Fusion(FusionMode mode, Metric metric, const std::vector<int>& stage_channels,
         std::uint64_t seed)
      : mode_(mode), metric_(metric) {
    if (mode_ == FusionMode::kConcatConv) {
      Rng rng(derive_seed(seed, "fusion-init"));
      for (int c : stage_channels)
        convs_.emplace_back(3, 2 * c, c, 1, 1, rng, /*trainable=*/true);
    }
  }

  FusionMode mode() const { return mode_; }
  Metric metric() const { return metric_; }

  // stage is 0-based. detach_student severs the student branch so
  // segmentation gradients do not reach it (the default).
  ag::Var fuse_stage(int stage, const ag::Var& t, const ag::Var& s, bool detach_student,
                     ag::Var* mask_out = nullptr) {
    ag::Var sv = detach_student ? ag::constant(s->value) : s;
    switch (mode_) {
      case FusionMode::kWmb: {
        ag::Var w = detach_student ? mask_const(t, sv, metric_) : mask_var(t, sv, metric_);
        if (mask_out) *mask_out = w;
        return ag::weight_by_mask(t, w);
      }
      case FusionMode::kDifference:
        return ag::sub(t, sv);
      case FusionMode::kConcatConv:
        return convs_.at(stage).forward(ag::concat_channels(t, sv));
    }
    throw ConfigError("fuse: unknown fusion mode");
  }

  void collect_trainable(std::vector<ag::Var>& out) const {
    for (const auto& c : convs_) c.collect_trainable(out);
  }
  nn::NamedState state(const std::string& prefix) {
    nn::NamedState out;
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect_state(prefix + ".stage" + std::to_string(i + 1), out);
    return out;
  }
  bool has_params() const { return !convs_.empty(); }

 private:
  FusionMode mode_ = FusionMode::kWmb;
  Metric metric_ = Metric::kCosine;
  std::vector<nn::Conv2d> convs_;
};

// One-shot fusion over plain tensors (inference/test convenience).
inline Tensor fuse(const Tensor& t, const Tensor& s, Fusion& fusion, int stage = 0) {
  return fusion.fuse_stage(stage, ag::constant(t), ag::constant(s), /*detach_student=*/true)
      ->value;
}

inline Metric metric_from_string(const std::string& s) {
  if (s == "cosine") return Metric::kCosine;
  if (s == "mse") return Metric::kMse;
  throw ConfigError("unknown mask metric '" + s + "' (expected cosine|mse)");
}

inline std::string to_string(Metric m) { return m == Metric::kCosine ? "cosine" : "mse"; }

inline FusionMode fusion_from_string(const std::string& s) {
  if (s == "wmb") return FusionMode::kWmb;
  if (s == "difference") return FusionMode::kDifference;
  if (s == "concat-conv") return FusionMode::kConcatConv;
  throw ConfigError("unknown fusion mode '" + s + "' (expected wmb|difference|concat-conv)");
}

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::kWmb: return "wmb";
    case FusionMode::kDifference: return "difference";
    case FusionMode::kConcatConv: return "concat-conv";
  }
  return "wmb";
}

}  // namespace adps::wmb
