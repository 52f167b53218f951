#include <catch2/catch_amalgamated.hpp>

#include "adps/metrics.hpp"
#include "support/oracles.hpp"

using namespace adps;

namespace {

Tensor map_from(const std::vector<real>& v, int h, int w) {
  Tensor t(1, h, w, 1);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

}  // namespace

TEST_CASE("auroc on known rankings") {
  CHECK(metrics::auroc({0.9, 0.8, 0.3, 0.2}, {1, 1, 0, 0}) == 1.0);
  CHECK(metrics::auroc({0.9, 0.2, 0.8, 0.3}, {1, 0, 0, 1}) == 0.75);
  CHECK(metrics::auroc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
}

TEST_CASE("auroc requires both classes") {
  CHECK_THROWS_AS(metrics::auroc({0.1, 0.2}, {1, 1}), DegenerateLabelsError);
  CHECK_THROWS_AS(metrics::auroc({0.1, 0.2}, {0, 0}), DegenerateLabelsError);
}

TEST_CASE("average precision on known rankings") {
  CHECK(metrics::average_precision_pooled({0.9, 0.8, 0.3}, {1, 0, 1}) ==
        Catch::Approx(0.8333333333333333).margin(1e-12));
  CHECK(metrics::average_precision_pooled({0.9, 0.8, 0.2}, {1, 1, 0}) == 1.0);
  // single positive ranked last among N
  const int n = 6;
  std::vector<real> scores;
  std::vector<int> labels(n, 0);
  for (int i = 0; i < n; ++i) scores.push_back(1.0 - 0.1 * i);
  labels[n - 1] = 1;
  CHECK(metrics::average_precision_pooled(scores, labels) ==
        Catch::Approx(1.0 / n).margin(1e-12));
  CHECK_THROWS_AS(metrics::average_precision_pooled({0.4, 0.2}, {0, 0}),
                  DegenerateLabelsError);
}

TEST_CASE("auroc and ap match brute-force oracles on random draws with ties") {
  Rng rng(99);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 10));
    std::vector<real> scores(n);
    std::vector<int> labels(n);
    bool any_pos = false, any_neg = false;
    for (int i = 0; i < n; ++i) {
      scores[i] = 0.1 * rng.uniform_int(0, 5);  // coarse grid forces ties
      labels[i] = rng.bernoulli(0.5) ? 1 : 0;
      (labels[i] ? any_pos : any_neg) = true;
    }
    if (!any_pos) labels[0] = 1;
    if (!any_neg) labels[n - 1] = 0;
    CHECK(metrics::auroc(scores, labels) == oracle::auroc_pairwise(scores, labels));
    CHECK(metrics::average_precision_pooled(scores, labels) ==
          oracle::ap_threshold_scan(scores, labels));
  }
}

TEST_CASE("metrics are invariant under strictly increasing score transforms") {
  Rng rng(123);
  const int n = 40;
  std::vector<real> scores(n), cubed(n);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    scores[i] = rng.uniform();
    cubed[i] = scores[i] * scores[i] * scores[i];
    labels[i] = rng.bernoulli(0.3) ? 1 : 0;
  }
  labels[0] = 1;
  labels[1] = 0;
  CHECK(std::abs(metrics::auroc(scores, labels) - metrics::auroc(cubed, labels)) < 1e-9);
  CHECK(std::abs(metrics::average_precision_pooled(scores, labels) -
                 metrics::average_precision_pooled(cubed, labels)) < 1e-9);
}

TEST_CASE("connected components with 8-connectivity") {
  Tensor m(1, 4, 4, 1);
  m.at(0, 0, 0, 0) = 1.0;
  m.at(0, 1, 1, 0) = 1.0;  // diagonal touch: same component
  m.at(0, 3, 3, 0) = 1.0;  // isolated
  std::vector<int> labels;
  CHECK(metrics::connected_components(m, labels) == 2);
  CHECK(labels[0] == labels[1 * 4 + 1]);
}

TEST_CASE("pro on a perfect prediction is 1") {
  Tensor gt(1, 6, 6, 1);
  gt.at(0, 2, 2, 0) = gt.at(0, 2, 3, 0) = 1.0;
  Tensor pred(1, 6, 6, 1);
  pred.at(0, 2, 2, 0) = pred.at(0, 2, 3, 0) = 1.0;
  CHECK(metrics::pro({pred}, {gt}, 0.3) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("pro: one region fully hit, one fully missed gives 0.5") {
  Tensor gt(1, 6, 6, 1);
  gt.at(0, 0, 0, 0) = gt.at(0, 0, 1, 0) = 1.0;  // region A
  gt.at(0, 5, 4, 0) = gt.at(0, 5, 5, 0) = 1.0;  // region B
  Tensor pred(1, 6, 6, 1);
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = 0.1;
  pred.at(0, 0, 0, 0) = pred.at(0, 0, 1, 0) = 0.9;
  pred.at(0, 5, 4, 0) = pred.at(0, 5, 5, 0) = 0.0;
  CHECK(metrics::pro({pred}, {gt}, 0.3) == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("pro matches the brute-force sweep oracle on 6x6 fixtures") {
  Rng rng(321);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor gt(1, 6, 6, 1);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = rng.bernoulli(0.25) ? 1.0 : 0.0;
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < gt.size(); ++i) (gt[i] > 0.5 ? has_pos : has_neg) = true;
    if (!has_pos) gt[7] = 1.0;
    if (!has_neg) gt[0] = 0.0;
    Tensor pred(1, 6, 6, 1);
    for (std::size_t i = 0; i < pred.size(); ++i)
      pred[i] = 0.2 * rng.uniform_int(0, 4);  // ties included
    for (real limit : {0.3, 1.0}) {
      CHECK(metrics::pro({pred}, {gt}, limit) ==
            Catch::Approx(oracle::pro_threshold_scan({pred}, {gt}, limit)).margin(1e-9));
    }
    // constant prediction fixture from the same draw
    Tensor flat = Tensor::full(Shape{1, 6, 6, 1}, 0.4);
    CHECK(metrics::pro({flat}, {gt}, 0.3) ==
          Catch::Approx(oracle::pro_threshold_scan({flat}, {gt}, 0.3)).margin(1e-9));
  }
}

TEST_CASE("pro with a single region at limit 1.0 reduces to pixel ROC area") {
  Rng rng(77);
  Tensor gt(1, 6, 6, 1);
  for (int y = 2; y < 4; ++y)
    for (int x = 2; x < 5; ++x) gt.at(0, y, x, 0) = 1.0;  // one 8-connected region
  Tensor pred(1, 6, 6, 1);
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = rng.uniform();
  std::vector<real> scores;
  std::vector<int> labels;
  metrics::pool_pixels({pred}, {gt}, scores, labels);
  CHECK(metrics::pro({pred}, {gt}, 1.0) ==
        Catch::Approx(metrics::auroc(scores, labels)).margin(1e-9));
}

TEST_CASE("pro degenerate inputs") {
  Tensor empty(1, 6, 6, 1);
  Tensor pred(1, 6, 6, 1);
  CHECK_THROWS_AS(metrics::pro({pred}, {empty}, 0.3), DegenerateLabelsError);
  Tensor full = Tensor::full(Shape{1, 6, 6, 1}, 1.0);
  CHECK_THROWS_AS(metrics::pro({pred}, {full}, 0.3), DegenerateLabelsError);
}

TEST_CASE("image score: max of the smoothed abnormal map") {
  Tensor flat = Tensor::full(Shape{1, 8, 8, 1}, 0.3);
  CHECK(metrics::image_score(flat, 0.0) == Catch::Approx(0.3));

  Tensor spike(1, 16, 16, 1);
  spike.at(0, 8, 8, 0) = 0.9;
  CHECK(metrics::image_score(spike, 0.0) == Catch::Approx(0.9));
  const real smoothed = metrics::image_score(spike, 4.0);
  CHECK(smoothed < 0.9);
  CHECK(smoothed > 0.0);
}

TEST_CASE("report on perfect predictions scores 1 everywhere") {
  metrics::EvalBatch batch;
  Rng rng(31);
  for (int i = 0; i < 6; ++i) {
    Tensor gt(1, 8, 8, 1);
    const bool anomalous = i % 2 == 1;
    if (anomalous)
      for (int y = 3; y < 5; ++y)
        for (int x = 3; x < 6; ++x) gt.at(0, y, x, 0) = 1.0;
    Tensor pred = gt;
    batch.anomaly_maps.push_back(pred);
    batch.gts.push_back(gt);
    batch.image_scores.push_back(anomalous ? 1.0 : 0.0);
    batch.image_labels.push_back(anomalous ? 1 : 0);
  }
  auto rep = metrics::compute_report(batch);
  CHECK(rep.auroc_cla == 1.0);
  CHECK(rep.auroc_seg == 1.0);
  CHECK(rep.ap_seg == 1.0);
  CHECK(rep.pro_seg == Catch::Approx(1.0).margin(1e-12));
  CHECK(rep.n_images == 6);
  CHECK(rep.n_anomalous_images == 3);
  auto j = rep.to_json();
  CHECK(j.contains("auroc_cla"));
  CHECK(j.contains("auroc_seg"));
  CHECK(j.contains("pro_seg"));
  CHECK(j.contains("ap_seg"));
}
