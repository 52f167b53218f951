#include <catch2/catch_amalgamated.hpp>

#include "adps/psm.hpp"
#include "support/oracles.hpp"

using namespace adps;

namespace {

std::vector<Tensor> random_pyramid(Rng& rng, int res, const std::vector<int>& channels,
                                   const std::vector<int>& strides) {
  std::vector<Tensor> pyr;
  for (std::size_t i = 0; i < channels.size(); ++i)
    pyr.push_back(Tensor::normal(Shape{1, res / strides[i], res / strides[i], channels[i]}, rng));
  return pyr;
}

}  // namespace

TEST_CASE("upblock doubles resolution and emits the configured channels") {
  Rng rng(3);
  psm::UpBlock block(64, 32, 24, rng, true);
  auto p = ag::constant(Tensor::normal(Shape{1, 8, 8, 64}, rng));
  auto skip = ag::constant(Tensor::normal(Shape{1, 16, 16, 32}, rng));
  auto out = block.forward(p, skip, false);
  CHECK(out->value.shape() == Shape{1, 16, 16, 24});

  auto bad_skip = ag::constant(Tensor::normal(Shape{1, 32, 32, 32}, rng));
  CHECK_THROWS_AS(block.forward(p, bad_skip, false), ShapeError);
}

TEST_CASE("upblock output is nonnegative (ReLU head)") {
  Rng rng(5);
  psm::UpBlock block(8, 4, 6, rng, true);
  auto p = ag::constant(Tensor::normal(Shape{1, 4, 4, 8}, rng));
  auto skip = ag::constant(Tensor::normal(Shape{1, 8, 8, 4}, rng));
  auto out = block.forward(p, skip, true);
  CHECK(out->value.min() >= 0.0);
}

TEST_CASE("upblock gradients match finite differences on tiny inputs") {
  Rng rng(11);
  psm::UpBlock block(3, 2, 3, rng, true);
  auto p = ag::leaf(Tensor::normal(Shape{1, 2, 2, 3}, rng), true);
  auto skip = ag::leaf(Tensor::normal(Shape{1, 4, 4, 2}, rng), true);

  std::vector<ag::Var> vars = {p, skip};
  block.collect_trainable(vars);

  // snapshot only the normalization buffers; training-mode forwards mutate
  // them between finite-difference evaluations
  nn::NamedState all_state;
  block.collect_state("blk", all_state);
  nn::NamedState bn_state;
  for (auto& [name, t] : all_state)
    if (name.find("running") != std::string::npos) bn_state.emplace_back(name, t);
  std::vector<Tensor> snapshot;
  for (auto& [name, t] : bn_state) snapshot.push_back(*t);

  oracle::GradCheckSetup gc;
  gc.loss = [&] { return ag::mean_all(block.forward(p, skip, true)); };
  gc.reset = [&] {
    std::size_t i = 0;
    for (auto& [name, t] : bn_state) *t = snapshot[i++];
  };
  CHECK(oracle::max_rel_grad_err(vars, gc) < 1e-3);
}

TEST_CASE("decoder output matches the input resolution with softmax rows") {
  Rng rng(21);
  const std::vector<int> channels{16, 32, 64};
  const std::vector<int> strides{2, 4, 8};
  psm::Psm net(channels, strides, 9);
  auto pyr = random_pyramid(rng, 64, channels, strides);
  psm::SegMask mask = psm::segment(net, pyr);
  CHECK(mask.probs.shape() == Shape{1, 64, 64, 2});
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const real p0 = mask.probs.at(0, y, x, 0);
      const real p1 = mask.probs.at(0, y, x, 1);
      CHECK(p0 >= 0.0);
      CHECK(p1 >= 0.0);
      CHECK(p0 + p1 == Catch::Approx(1.0).margin(1e-5));
    }
}

TEST_CASE("zero pyramid gives a spatially constant interior (single stage)") {
  // The first transposed conv sees the zero map directly, so only biases
  // propagate; deeper stacks would re-introduce 2x2 phase patterns.
  psm::Psm net({8}, {2}, 4);
  std::vector<Tensor> pyr{Tensor(1, 8, 8, 8)};
  psm::SegMask mask = psm::segment(net, pyr);
  const real ref = mask.probs.at(0, 4, 4, 1);
  for (int y = 2; y < 14; ++y)
    for (int x = 2; x < 14; ++x)
      CHECK(mask.probs.at(0, y, x, 1) == Catch::Approx(ref).margin(1e-9));
}

TEST_CASE("interior of the mask translates with the pyramid") {
  Rng rng(33);
  const std::vector<int> channels{8, 16, 24};
  const std::vector<int> strides{2, 4, 8};
  const int res = 64;
  psm::Psm net(channels, strides, 5);
  auto pyr = random_pyramid(rng, res, channels, strides);

  // shift every stage by the same full-resolution offset (one deepest cell)
  const int full_shift = strides.back();
  std::vector<Tensor> shifted;
  for (std::size_t i = 0; i < pyr.size(); ++i) {
    const int cell_shift = full_shift / strides[i];
    Tensor s(pyr[i].shape());
    for (int y = 0; y < s.h(); ++y)
      for (int x = 0; x < s.w(); ++x)
        for (int c = 0; c < s.c(); ++c) {
          const int sy = y - cell_shift, sx = x - cell_shift;
          if (sy >= 0 && sx >= 0) s.at(0, y, x, c) = pyr[i].at(0, sy, sx, c);
        }
    shifted.push_back(std::move(s));
  }

  psm::SegMask base = psm::segment(net, pyr);
  psm::SegMask moved = psm::segment(net, shifted);
  const int margin = 24;
  for (int y = margin; y < res - margin; ++y)
    for (int x = margin; x < res - margin; ++x)
      CHECK(moved.probs.at(0, y, x, 1) ==
            Catch::Approx(base.probs.at(0, y - full_shift, x - full_shift, 1)).margin(1e-4));
}

TEST_CASE("decoder rejects inconsistent configurations") {
  CHECK_THROWS_AS(psm::Psm({8, 16}, {2, 8}, 1), ConfigError);   // non-2x stride step
  CHECK_THROWS_AS(psm::Psm({8}, {3}, 1), ConfigError);          // stride not a power of two
  psm::Psm net({8, 16}, {2, 4}, 1);
  std::vector<Tensor> bad{Tensor(1, 8, 8, 8)};
  CHECK_THROWS_AS(net.forward({ag::constant(bad[0])}, false), ShapeError);
}
