#include <catch2/catch_amalgamated.hpp>

#include "adps/losses.hpp"
#include "support/oracles.hpp"

using namespace adps;

TEST_CASE("gt max-pool downsampling") {
  SECTION("all-zero stays zero") {
    Tensor y(1, 8, 8, 1);
    for (int h : {1, 2, 4, 8}) CHECK(losses::downsample_gt(y, h, h).sum() == 0.0);
  }
  SECTION("single anomalous pixel hits exactly one cell") {
    Tensor y(1, 8, 8, 1);
    y.at(0, 5, 6, 0) = 1.0;
    for (int h : {2, 4}) {
      Tensor d = losses::downsample_gt(y, h, h);
      CHECK(d.sum() == 1.0);
    }
  }
  SECTION("2x2 block at top-left of a 4x4 mask") {
    Tensor y(1, 4, 4, 1);
    y.at(0, 0, 0, 0) = y.at(0, 0, 1, 0) = y.at(0, 1, 0, 0) = y.at(0, 1, 1, 0) = 1.0;
    Tensor d = losses::downsample_gt(y, 2, 2);
    CHECK(d.at(0, 0, 0, 0) == 1.0);
    CHECK(d.at(0, 0, 1, 0) == 0.0);
    CHECK(d.at(0, 1, 0, 0) == 0.0);
    CHECK(d.at(0, 1, 1, 0) == 0.0);
  }
  SECTION("non-divisible target is an error") {
    Tensor y(1, 8, 8, 1);
    CHECK_THROWS_AS(losses::downsample_gt(y, 3, 3), DivisibilityError);
  }
}

TEST_CASE("distillation loss identities") {
  Rng rng(21);
  std::vector<Tensor> pyr;
  for (int s : {8, 4, 2}) pyr.push_back(Tensor::normal(Shape{1, s, s, 6}, rng, 0.0, 1.0));
  const int n = static_cast<int>(pyr.size());

  Tensor y0(1, 8, 8, 1);
  CHECK(losses::distillation_loss(pyr, pyr, y0) == Catch::Approx(0.0).margin(1e-6));

  Tensor y1 = Tensor::full(Shape{1, 8, 8, 1}, 1.0);
  CHECK(losses::distillation_loss(pyr, pyr, y1) == Catch::Approx(n).margin(1e-6));
}

TEST_CASE("orthogonal pyramids with normal labels cost one per stage") {
  std::vector<Tensor> t_pyr, s_pyr;
  for (int sz : {4, 2}) {
    Tensor t(1, sz, sz, 2), s(1, sz, sz, 2);
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x) {
        t.at(0, y, x, 0) = 1.0;
        s.at(0, y, x, 1) = 1.0;
      }
    t_pyr.push_back(t);
    s_pyr.push_back(s);
  }
  Tensor y0(1, 4, 4, 1);
  CHECK(losses::distillation_loss(t_pyr, s_pyr, y0) == Catch::Approx(2.0).margin(1e-9));
}

TEST_CASE("distillation loss is invariant to positive rescaling of the student") {
  Rng rng(33);
  std::vector<Tensor> t_pyr{Tensor::normal(Shape{1, 4, 4, 5}, rng)};
  std::vector<Tensor> s_pyr{Tensor::normal(Shape{1, 4, 4, 5}, rng)};
  Tensor y(1, 4, 4, 1);
  y.at(0, 1, 2, 0) = 1.0;
  const real base = losses::distillation_loss(t_pyr, s_pyr, y);
  std::vector<Tensor> scaled{s_pyr[0]};
  scaled[0] *= 41.0;
  CHECK(losses::distillation_loss(t_pyr, scaled, y) == Catch::Approx(base).margin(1e-5));
}

TEST_CASE("focal loss analytic values") {
  Tensor m(1, 1, 1, 2);
  Tensor y1 = Tensor::full(Shape{1, 1, 1, 1}, 1.0);
  Tensor y0(1, 1, 1, 1);

  m[0] = 0.5;
  m[1] = 0.5;
  CHECK(losses::focal_loss(m, y1, 0.0) == Catch::Approx(0.693147).margin(1e-6));

  m[0] = 0.1;
  m[1] = 0.9;
  CHECK(losses::focal_loss(m, y1, 2.0) == Catch::Approx(0.0010536).margin(1e-6));

  m[0] = 0.9;
  m[1] = 0.1;
  CHECK(losses::focal_loss(m, y0, 2.0) == Catch::Approx(0.0010536).margin(1e-6));
}

TEST_CASE("focal loss with tau=0 equals mean binary cross-entropy") {
  Rng rng(40);
  Tensor m(2, 5, 5, 2);
  Tensor y(2, 5, 5, 1);
  real bce = 0.0;
  for (std::size_t p = 0; p < y.size(); ++p) {
    const real prob = 0.05 + 0.9 * rng.uniform();
    m[p * 2] = 1.0 - prob;
    m[p * 2 + 1] = prob;
    y[p] = rng.bernoulli(0.4) ? 1.0 : 0.0;
    bce += y[p] > 0.5 ? -std::log(prob) : -std::log(1.0 - prob);
  }
  bce /= static_cast<real>(y.size());
  CHECK(losses::focal_loss(m, y, 0.0) == Catch::Approx(bce).margin(1e-6));
}

TEST_CASE("focal loss is nonnegative") {
  Rng rng(44);
  Tensor m(1, 6, 6, 2);
  Tensor y(1, 6, 6, 1);
  for (std::size_t p = 0; p < y.size(); ++p) {
    const real prob = rng.uniform();
    m[p * 2] = 1.0 - prob;
    m[p * 2 + 1] = prob;
    y[p] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  CHECK(losses::focal_loss(m, y, 2.0) >= 0.0);
  CHECK(losses::focal_loss(m, y, 0.5) >= 0.0);
}

TEST_CASE("total loss arithmetic") {
  CHECK(losses::total_loss(0.3, 0.2, {1.0, 2.0}) == Catch::Approx(0.5));
  CHECK(losses::total_loss(0.7, 123.0, {0.0, 2.0}) == Catch::Approx(0.7));
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(55);
  SECTION("distillation") {
    auto t = ag::leaf(Tensor::normal(Shape{1, 3, 3, 4}, rng), true);
    auto s = ag::leaf(Tensor::normal(Shape{1, 3, 3, 4}, rng), true);
    Tensor y(1, 3, 3, 1);
    y[0] = y[4] = 1.0;
    oracle::GradCheckSetup gc;
    gc.loss = [&] { return ag::distill_stage_loss(t, s, y); };
    CHECK(oracle::max_rel_grad_err({t, s}, gc) < 1e-3);
  }
  SECTION("focal") {
    Tensor probs(1, 3, 3, 2);
    Tensor y(1, 3, 3, 1);
    for (std::size_t p = 0; p < y.size(); ++p) {
      const real v = 0.1 + 0.8 * rng.uniform();
      probs[p * 2] = 1.0 - v;
      probs[p * 2 + 1] = v;
      y[p] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    auto m = ag::leaf(probs, true);
    oracle::GradCheckSetup gc;
    gc.loss = [&] { return ag::focal_loss_probs(m, y, 2.0); };
    CHECK(oracle::max_rel_grad_err({m}, gc) < 1e-3);
  }
}
