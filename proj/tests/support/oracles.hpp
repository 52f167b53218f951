#pragma once

// Test-only reference implementations. These stay independent of the library
// code paths they validate: the gradient checker uses central finite
// differences, the metric oracles enumerate thresholds / pairs by brute
// force, and the PRO oracle carries its own flood fill.

#include <algorithm>
#include <functional>
#include <set>
#include <vector>

#include "adps/autodiff.hpp"
#include "adps/tensor.hpp"

namespace oracle {

using adps::Tensor;
using adps::real;

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckSetup {
  std::function<adps::ag::Var()> loss;  // rebuilds the graph, returns a scalar
  std::function<void()> reset;          // restores mutated state (e.g. BN running stats)
  real step = 1e-6;
};

// Max over all entries of all vars of |fd - analytic| / max(|fd|+|analytic|, 1e-6).
inline real max_rel_grad_err(const std::vector<adps::ag::Var>& vars,
                             const GradCheckSetup& gc) {
  if (gc.reset) gc.reset();
  adps::ag::Var l = gc.loss();
  adps::ag::backward(l);
  std::vector<Tensor> grads;
  for (const auto& v : vars) grads.push_back(v->grad);

  real worst = 0.0;
  for (std::size_t vi = 0; vi < vars.size(); ++vi) {
    adps::ag::Var v = vars[vi];
    for (std::size_t i = 0; i < v->value.size(); ++i) {
      const real orig = v->value[i];
      v->value[i] = orig + gc.step;
      if (gc.reset) gc.reset();
      const real lp = gc.loss()->value[0];
      v->value[i] = orig - gc.step;
      if (gc.reset) gc.reset();
      const real lm = gc.loss()->value[0];
      v->value[i] = orig;
      const real fd = (lp - lm) / (2.0 * gc.step);
      const real an = grads[vi].size() ? grads[vi][i] : 0.0;
      const real denom = std::max(std::abs(fd) + std::abs(an), 1e-6);
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  if (gc.reset) gc.reset();
  return worst;
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

// Explicit positive/negative pair comparison.
inline real auroc_pairwise(const std::vector<real>& scores, const std::vector<int>& labels) {
  real wins = 0.0, ties = 0.0;
  std::int64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 0) continue;
    ++pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) ties += 1.0;
    }
  }
  for (int y : labels) neg += (y == 0);
  return (wins + 0.5 * ties) / (static_cast<real>(pos) * static_cast<real>(neg));
}

// Rescan the full score list at every distinct threshold (descending).
inline real ap_threshold_scan(const std::vector<real>& scores, const std::vector<int>& labels) {
  std::set<real, std::greater<real>> thresholds(scores.begin(), scores.end());
  std::int64_t total_pos = 0;
  for (int y : labels) total_pos += (y != 0);
  real ap = 0.0, prev_recall = 0.0;
  for (real t : thresholds) {
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (labels[i] != 0 ? tp : fp)++;
    }
    const real precision = static_cast<real>(tp) / static_cast<real>(tp + fp);
    const real recall = static_cast<real>(tp) / static_cast<real>(total_pos);
    ap += precision * (recall - prev_recall);
    prev_recall = recall;
  }
  return ap;
}

// 8-connected flood fill, written independently of the library version.
inline int flood_components(const Tensor& mask, std::vector<int>& labels) {
  const int h = mask.h(), w = mask.w();
  labels.assign(static_cast<std::size_t>(h) * w, -1);
  int count = 0;
  for (int sy = 0; sy < h; ++sy)
    for (int sx = 0; sx < w; ++sx) {
      if (mask.at(0, sy, sx, 0) <= 0.5 || labels[sy * w + sx] != -1) continue;
      std::vector<std::pair<int, int>> stack{{sy, sx}};
      labels[sy * w + sx] = count;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (mask.at(0, ny, nx, 0) > 0.5 && labels[ny * w + nx] == -1) {
              labels[ny * w + nx] = count;
              stack.push_back({ny, nx});
            }
          }
      }
      ++count;
    }
  return count;
}

// Full recomputation at every distinct threshold, then the same trapezoidal
// integration over FPR in [0, limit].
inline real pro_threshold_scan(const std::vector<Tensor>& maps, const std::vector<Tensor>& gts,
                               real fpr_limit) {
  struct Px {
    real score;
    int region;
  };
  std::vector<Px> pixels;
  std::vector<std::int64_t> region_size;
  std::int64_t total_neg = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    std::vector<int> labels;
    const int n = flood_components(gts[i], labels);
    const int base = static_cast<int>(region_size.size());
    region_size.resize(base + n, 0);
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const int r = labels[p] >= 0 ? base + labels[p] : -1;
      if (r >= 0) region_size[r]++;
      else total_neg++;
      pixels.push_back({maps[i][p], r});
    }
  }

  std::set<real, std::greater<real>> thresholds;
  for (const Px& p : pixels) thresholds.insert(p.score);

  real area = 0.0, prev_fpr = 0.0, prev_ov = 0.0;
  bool done = false;
  for (real t : thresholds) {
    std::vector<std::int64_t> hits(region_size.size(), 0);
    std::int64_t fp = 0;
    for (const Px& p : pixels) {
      if (p.score >= t) {
        if (p.region >= 0) hits[p.region]++;
        else fp++;
      }
    }
    real ov = 0.0;
    for (std::size_t r = 0; r < hits.size(); ++r)
      ov += static_cast<real>(hits[r]) / static_cast<real>(region_size[r]);
    ov /= static_cast<real>(region_size.size());
    const real fpr = static_cast<real>(fp) / static_cast<real>(total_neg);
    if (fpr >= fpr_limit) {
      real ov_at = ov;
      if (fpr > prev_fpr)
        ov_at = prev_ov + (ov - prev_ov) * (fpr_limit - prev_fpr) / (fpr - prev_fpr);
      area += (fpr_limit - prev_fpr) * 0.5 * (prev_ov + ov_at);
      done = true;
      break;
    }
    area += (fpr - prev_fpr) * 0.5 * (prev_ov + ov);
    prev_fpr = fpr;
    prev_ov = ov;
  }
  if (!done) area += (fpr_limit - prev_fpr) * prev_ov;
  return area / fpr_limit;
}

}  // namespace oracle
