#pragma once

// Evaluation metrics: image/pixel AUROC (Mann-Whitney with tie handling),
// average precision over pooled pixel scores (step interpolation across all
// distinct thresholds), and per-region overlap (PRO) integrated against the
// global false-positive rate up to a limit. All of them are rank statistics:
// any strictly increasing transform of the scores leaves them unchanged.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adps/errors.hpp"
#include "adps/tensor.hpp"

namespace adps::metrics {

using json = nlohmann::json;

struct EvalBatch {
  std::vector<Tensor> anomaly_maps;  // [1,H,W,1] anomaly probabilities
  std::vector<Tensor> gts;           // [1,H,W,1] binary
  std::vector<real> image_scores;
  std::vector<int> image_labels;

  void validate() const {
    if (anomaly_maps.size() != gts.size() || anomaly_maps.size() != image_scores.size() ||
        anomaly_maps.size() != image_labels.size())
      throw ShapeError("eval batch: field lengths disagree");
    for (std::size_t i = 0; i < anomaly_maps.size(); ++i)
      anomaly_maps[i].require_same_shape(gts[i], "eval batch");
  }
};

struct MetricsReport {
  real auroc_cla = 0.0;
  real auroc_seg = 0.0;
  real pro_seg = 0.0;
  real ap_seg = 0.0;
  int n_images = 0;
  int n_anomalous_images = 0;
  std::int64_t n_pixels = 0;
  std::int64_t n_anomalous_pixels = 0;
  real fpr_limit = 0.3;

  json to_json() const {
    return json{{"auroc_cla", auroc_cla},
                {"auroc_seg", auroc_seg},
                {"pro_seg", pro_seg},
                {"ap_seg", ap_seg},
                {"n_images", n_images},
                {"n_anomalous_images", n_anomalous_images},
                {"n_pixels", n_pixels},
                {"n_anomalous_pixels", n_anomalous_pixels},
                {"fpr_limit", fpr_limit}};
  }
};

// ---------------------------------------------------------------------------
// AUROC
// ---------------------------------------------------------------------------

// P(score+ > score-) + 0.5 * P(score+ == score-), computed over tie groups.
inline real auroc(const std::vector<real>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: length mismatch");
  std::int64_t pos = 0, neg = 0;
  for (int y : labels) (y != 0 ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw DegenerateLabelsError("auroc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  real wins = 0.0, ties = 0.0;
  std::int64_t cum_neg = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::int64_t gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] != 0 ? gp : gn)++;
      ++j;
    }
    wins += static_cast<real>(gp) * static_cast<real>(cum_neg);
    ties += static_cast<real>(gp) * static_cast<real>(gn);
    cum_neg += gn;
    i = j;
  }
  return (wins + 0.5 * ties) / (static_cast<real>(pos) * static_cast<real>(neg));
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

// Area under the precision-recall curve across all distinct thresholds of
// the pooled scores: sum over thresholds (descending) of
// precision * (recall - previous recall).
inline real average_precision_pooled(const std::vector<real>& scores,
                                     const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("average_precision: length mismatch");
  std::int64_t total_pos = 0;
  for (int y : labels) total_pos += (y != 0);
  if (total_pos == 0)
    throw DegenerateLabelsError("average_precision: no positive labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  real ap = 0.0;
  real prev_recall = 0.0;
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] != 0 ? tp : fp)++;
      ++j;
    }
    const real precision = static_cast<real>(tp) / static_cast<real>(tp + fp);
    const real recall = static_cast<real>(tp) / static_cast<real>(total_pos);
    ap += precision * (recall - prev_recall);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

inline void pool_pixels(const std::vector<Tensor>& maps, const std::vector<Tensor>& gts,
                        std::vector<real>& scores, std::vector<int>& labels) {
  if (maps.size() != gts.size()) throw ShapeError("pool_pixels: list length mismatch");
  std::size_t total = 0;
  for (const Tensor& m : maps) total += m.size();
  scores.reserve(total);
  labels.reserve(total);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    maps[i].require_same_shape(gts[i], "pool_pixels");
    for (std::size_t p = 0; p < maps[i].size(); ++p) {
      scores.push_back(maps[i][p]);
      labels.push_back(gts[i][p] > 0.5 ? 1 : 0);
    }
  }
}

inline real average_precision(const std::vector<Tensor>& maps, const std::vector<Tensor>& gts) {
  std::vector<real> scores;
  std::vector<int> labels;
  pool_pixels(maps, gts, scores, labels);
  return average_precision_pooled(scores, labels);
}

// ---------------------------------------------------------------------------
// PRO
// ---------------------------------------------------------------------------

// 8-connected components of a binary mask; labels start at 0, background -1.
inline int connected_components(const Tensor& mask, std::vector<int>& labels_out) {
  const int h = mask.h(), w = mask.w();
  labels_out.assign(static_cast<std::size_t>(h) * w, -1);
  int next = 0;
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (mask.at(0, y, x, 0) <= 0.5 || labels_out[y * w + x] != -1) continue;
      labels_out[y * w + x] = next;
      queue.emplace_back(y, x);
      while (!queue.empty()) {
        auto [cy, cx] = queue.front();
        queue.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (mask.at(0, ny, nx, 0) > 0.5 && labels_out[ny * w + nx] == -1) {
              labels_out[ny * w + nx] = next;
              queue.emplace_back(ny, nx);
            }
          }
      }
      ++next;
    }
  return next;
}

// Per-region overlap vs false-positive rate, integrated (trapezoid) from 0
// to fpr_limit and normalized by it. Thresholds are all distinct score
// values; prediction at threshold t is {score >= t}.
inline real pro(const std::vector<Tensor>& maps, const std::vector<Tensor>& gts,
                real fpr_limit = 0.3) {
  if (maps.size() != gts.size() || maps.empty())
    throw ShapeError("pro: list length mismatch");
  if (fpr_limit <= 0.0 || fpr_limit > 1.0)
    throw ConfigError("pro: fpr_limit must lie in (0,1]");

  struct Pixel {
    real score;
    int region;  // global region id, -1 for background
  };
  std::vector<Pixel> pixels;
  std::vector<std::int64_t> region_size;
  std::int64_t total_neg = 0;

  for (std::size_t i = 0; i < maps.size(); ++i) {
    maps[i].require_same_shape(gts[i], "pro");
    std::vector<int> labels;
    const int regions = connected_components(gts[i], labels);
    const int base = static_cast<int>(region_size.size());
    region_size.resize(base + regions, 0);
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const int r = labels[p] >= 0 ? base + labels[p] : -1;
      if (r >= 0)
        region_size[r]++;
      else
        total_neg++;
      pixels.push_back({maps[i][p], r});
    }
  }
  if (region_size.empty()) throw DegenerateLabelsError("pro: no anomalous region");
  if (total_neg == 0) throw DegenerateLabelsError("pro: no normal pixels");

  std::sort(pixels.begin(), pixels.end(),
            [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

  std::vector<std::int64_t> hits(region_size.size(), 0);
  std::int64_t fp = 0;
  const real regions = static_cast<real>(region_size.size());

  real area = 0.0;
  real prev_fpr = 0.0, prev_ov = 0.0;  // threshold above max score: empty prediction
  bool done = false;

  std::size_t i = 0;
  while (i < pixels.size() && !done) {
    std::size_t j = i;
    while (j < pixels.size() && pixels[j].score == pixels[i].score) {
      if (pixels[j].region >= 0)
        hits[pixels[j].region]++;
      else
        fp++;
      ++j;
    }
    real ov_sum = 0.0;
    for (std::size_t r = 0; r < hits.size(); ++r)
      ov_sum += static_cast<real>(hits[r]) / static_cast<real>(region_size[r]);
    const real mean_ov = ov_sum / regions;
    const real fpr = static_cast<real>(fp) / static_cast<real>(total_neg);

    if (fpr >= fpr_limit) {
      real ov_at_limit = mean_ov;
      if (fpr > prev_fpr)
        ov_at_limit = prev_ov + (mean_ov - prev_ov) * (fpr_limit - prev_fpr) / (fpr - prev_fpr);
      area += (fpr_limit - prev_fpr) * 0.5 * (prev_ov + ov_at_limit);
      done = true;
    } else {
      area += (fpr - prev_fpr) * 0.5 * (prev_ov + mean_ov);
      prev_fpr = fpr;
      prev_ov = mean_ov;
    }
    i = j;
  }
  if (!done) area += (fpr_limit - prev_fpr) * 0.5 * (prev_ov + prev_ov);
  return area / fpr_limit;
}

// ---------------------------------------------------------------------------
// Image-level score
// ---------------------------------------------------------------------------

// Max over pixels of the Gaussian-smoothed map (replicated borders);
// sigma == 0 returns the raw max.
inline real image_score(const Tensor& anomaly_map, real smooth_sigma) {
  if (smooth_sigma <= 0.0) return anomaly_map.max();
  const int radius = static_cast<int>(std::ceil(3.0 * smooth_sigma));
  std::vector<real> kernel(2 * radius + 1);
  real ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (smooth_sigma * smooth_sigma));
    ksum += kernel[i + radius];
  }
  for (real& k : kernel) k /= ksum;

  const int h = anomaly_map.h(), w = anomaly_map.w();
  Tensor tmp(1, h, w, 1), out(1, h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      real acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::clamp(x + i, 0, w - 1);
        acc += kernel[i + radius] * anomaly_map.at(0, y, xx, 0);
      }
      tmp.at(0, y, x, 0) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      real acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::clamp(y + i, 0, h - 1);
        acc += kernel[i + radius] * tmp.at(0, yy, x, 0);
      }
      out.at(0, y, x, 0) = acc;
    }
  return out.max();
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct ReportOptions {
  real fpr_limit = 0.3;
  bool per_image_auroc = false;  // pooled pixels by default
};

inline MetricsReport compute_report(const EvalBatch& batch, const ReportOptions& opts = {}) {
  batch.validate();
  MetricsReport rep;
  rep.fpr_limit = opts.fpr_limit;
  rep.n_images = static_cast<int>(batch.anomaly_maps.size());
  for (int y : batch.image_labels) rep.n_anomalous_images += (y != 0);

  rep.auroc_cla = auroc(batch.image_scores, batch.image_labels);

  std::vector<real> px_scores;
  std::vector<int> px_labels;
  pool_pixels(batch.anomaly_maps, batch.gts, px_scores, px_labels);
  rep.n_pixels = static_cast<std::int64_t>(px_labels.size());
  for (int y : px_labels) rep.n_anomalous_pixels += (y != 0);

  if (opts.per_image_auroc) {
    real acc = 0.0;
    int used = 0;
    for (std::size_t i = 0; i < batch.anomaly_maps.size(); ++i) {
      std::vector<real> s;
      std::vector<int> l;
      pool_pixels({batch.anomaly_maps[i]}, {batch.gts[i]}, s, l);
      const bool has_pos = std::any_of(l.begin(), l.end(), [](int y) { return y != 0; });
      const bool has_neg = std::any_of(l.begin(), l.end(), [](int y) { return y == 0; });
      if (!has_pos || !has_neg) continue;
      acc += auroc(s, l);
      ++used;
    }
    if (used == 0) throw DegenerateLabelsError("per-image auroc: no image has both classes");
    rep.auroc_seg = acc / used;
  } else {
    rep.auroc_seg = auroc(px_scores, px_labels);
  }
  rep.ap_seg = average_precision_pooled(px_scores, px_labels);
  rep.pro_seg = pro(batch.anomaly_maps, batch.gts, opts.fpr_limit);
  return rep;
}

}  // namespace adps::metrics
