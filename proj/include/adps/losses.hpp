#pragma once

// Training losses: the per-stage distillation loss over channel-wise cosine
// similarity, the focal segmentation loss, their weighted total, and
// max-pool downsampling of pixel ground truth to stage resolutions. The
// graph-level kernels live in autodiff.hpp; these wrappers evaluate over
// plain tensors with the same code.

#include <vector>

#include "adps/autodiff.hpp"
#include "adps/backbone.hpp"
#include "adps/errors.hpp"
#include "adps/psm.hpp"
#include "adps/tensor.hpp"

namespace adps::losses {

// Full-resolution binary ground truth; [n, H, W, 1] with values in {0, 1}.
struct PixelGT {
  Tensor mask;

  bool any() const {
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i] > 0.5) return true;
    return false;
  }
};

struct LossWeights {
  real lambda = 1.0;
  real tau = 2.0;
};

// Max-pool to (h, w): a cell is anomalous iff any covered pixel is.
inline Tensor downsample_gt(const Tensor& y, int h, int w) {
  if (y.c() != 1) throw ShapeError("downsample_gt: expected single-channel mask");
  if (h < 1 || w < 1 || y.h() % h != 0 || y.w() % w != 0)
    throw DivisibilityError("downsample_gt: " + std::to_string(y.h()) + "x" +
                            std::to_string(y.w()) + " not divisible by " + std::to_string(h) +
                            "x" + std::to_string(w));
  const int by = y.h() / h;
  const int bx = y.w() / w;
  Tensor out(y.n(), h, w, 1);
  for (int n = 0; n < y.n(); ++n)
    for (int oy = 0; oy < h; ++oy)
      for (int ox = 0; ox < w; ++ox) {
        real v = 0.0;
        for (int dy = 0; dy < by && v < 0.5; ++dy)
          for (int dx = 0; dx < bx; ++dx)
            if (y.at(n, oy * by + dy, ox * bx + dx, 0) > 0.5) {
              v = 1.0;
              break;
            }
        out.at(n, oy, ox, 0) = v;
      }
  return out;
}

inline Tensor downsample_gt(const PixelGT& y, int h, int w) {
  return downsample_gt(y.mask, h, w);
}

// Sum over stages of the mean over positions of
// (1 - y) * (1 - cos(T_i, S_i)) + y * cos(T_i, S_i).
inline real distillation_loss(const std::vector<Tensor>& teacher,
                              const std::vector<Tensor>& student, const Tensor& gt) {
  if (teacher.size() != student.size() || teacher.empty())
    throw ShapeError("distillation_loss: pyramid size mismatch");
  real total = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const Tensor& t = teacher[i];
    Tensor y = downsample_gt(gt, t.h(), t.w());
    total += ag::distill_stage_loss(ag::constant(t), ag::constant(student[i]), y)->value[0];
  }
  return total;
}

inline real distillation_loss(const backbone::StagePyramid& teacher,
                              const backbone::StagePyramid& student, const PixelGT& gt) {
  return distillation_loss(teacher.stages, student.stages, gt.mask);
}

// Mean over pixels; p is the abnormal-channel probability clamped to
// [1e-7, 1 - 1e-7].
inline real focal_loss(const Tensor& probs, const Tensor& gt, real tau) {
  return ag::focal_loss_probs(ag::constant(probs), gt, tau)->value[0];
}

inline real focal_loss(const psm::SegMask& m, const PixelGT& gt, real tau) {
  return focal_loss(m.probs, gt.mask, tau);
}

inline real total_loss(real distill, real segmentation, const LossWeights& w) {
  return distill + w.lambda * segmentation;
}

}  // namespace adps::losses
