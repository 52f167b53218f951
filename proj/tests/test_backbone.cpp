#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "adps/backbone.hpp"
#include "adps/patching.hpp"

using namespace adps;
using backbone::AsymmetryPlan;
using backbone::BackboneConfig;

namespace {

BackboneConfig small_cfg() {
  BackboneConfig cfg;
  cfg.stage_channels = {16, 32, 64};
  cfg.stage_strides = {2, 4, 8};
  return cfg;
}

}  // namespace

TEST_CASE("same seed builds identical parameters") {
  auto a = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 7);
  auto b = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 7);
  CHECK(a.identity_hash() == b.identity_hash());
  auto c = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 8);
  CHECK(a.identity_hash() != c.identity_hash());
}

TEST_CASE("teacher stage shapes follow the configured strides") {
  auto net = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 7);
  Rng rng(1);
  Tensor img = Tensor::uniform(Shape{1, 64, 64, 3}, rng);
  auto pyr = backbone::teacher_forward(net, img);
  REQUIRE(pyr.stages.size() == 3);
  CHECK(pyr.stages[0].shape() == Shape{1, 32, 32, 16});
  CHECK(pyr.stages[1].shape() == Shape{1, 16, 16, 32});
  CHECK(pyr.stages[2].shape() == Shape{1, 8, 8, 64});
}

TEST_CASE("teacher forward is deterministic and frozen") {
  auto net = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 7);
  const auto hash_before = net.identity_hash();
  Rng rng(2);
  Tensor img = Tensor::uniform(Shape{1, 64, 64, 3}, rng);
  auto a = backbone::teacher_forward(net, img);
  auto b = backbone::teacher_forward(net, img);
  for (std::size_t i = 0; i < a.stages.size(); ++i)
    CHECK(a.stages[i].bitwise_equal(b.stages[i]));
  CHECK(net.identity_hash() == hash_before);

  // no parameter requires gradients
  std::vector<ag::Var> params;
  net.collect_trainable(params);
  CHECK(params.empty());
}

TEST_CASE("single-stage config yields a single-stage pyramid") {
  BackboneConfig cfg;
  cfg.stage_channels = {8};
  cfg.stage_strides = {2};
  auto net = backbone::build_teacher(cfg, backbone::WeightsMode::kRandomFrozen, 3);
  Rng rng(4);
  auto pyr = backbone::teacher_forward(net, Tensor::uniform(Shape{1, 16, 16, 3}, rng));
  CHECK(pyr.stages.size() == 1);
  CHECK(pyr.stages[0].shape() == Shape{1, 8, 8, 8});
}

TEST_CASE("checkpoint round trip and channel-mismatch rejection") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "adps_teacher_ck.bin").string();
  auto net = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 7);
  backbone::save_backbone(net, path);

  auto loaded = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kLoadCheckpoint, 0,
                                        path);
  CHECK(loaded.identity_hash() == net.identity_hash());

  BackboneConfig wrong = small_cfg();
  wrong.stage_channels = {16, 32, 48};
  CHECK_THROWS_AS(
      backbone::build_teacher(wrong, backbone::WeightsMode::kLoadCheckpoint, 0, path),
      CheckpointError);
  CHECK_THROWS_AS(backbone::build_teacher(small_cfg(), backbone::WeightsMode::kLoadCheckpoint,
                                          0, "/nonexistent/ck.bin"),
                  CheckpointError);
  fs::remove(path);
}

TEST_CASE("student k=1 with no stage splits equals the whole-image forward") {
  backbone::Backbone student(small_cfg(), 11, /*trainable=*/true);
  Rng rng(5);
  Tensor img = Tensor::uniform(Shape{2, 64, 64, 3}, rng);
  AsymmetryPlan plan;  // k=1, no splits
  auto sym = backbone::student_forward(student, img, plan);
  auto whole = student.forward(ag::constant(img), /*training=*/false);
  REQUIRE(sym.stages.size() == whole.size());
  for (std::size_t i = 0; i < whole.size(); ++i)
    CHECK(sym.stages[i].bitwise_equal(whole[i]->value));
}

TEST_CASE("patch forward pyramids stay shape-aligned with the teacher") {
  auto teacher = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 7);
  backbone::Backbone student(small_cfg(), 13, true);
  Rng rng(6);
  Tensor img = Tensor::uniform(Shape{1, 64, 64, 3}, rng);
  auto t_pyr = backbone::teacher_forward(teacher, img);
  for (int k : {1, 2, 4}) {
    AsymmetryPlan plan;
    plan.input_k = k;
    auto s_pyr = backbone::student_forward(student, img, plan);
    REQUIRE(s_pyr.stages.size() == t_pyr.stages.size());
    for (std::size_t i = 0; i < t_pyr.stages.size(); ++i)
      CHECK(s_pyr.stages[i].shape() == t_pyr.stages[i].shape());
  }
  // stage split after stage 1 keeps alignment too
  AsymmetryPlan plan;
  plan.input_k = 2;
  plan.stage_splits = {{1, 2}};
  auto s_pyr = backbone::student_forward(student, img, plan);
  for (std::size_t i = 0; i < t_pyr.stages.size(); ++i)
    CHECK(s_pyr.stages[i].shape() == t_pyr.stages[i].shape());
}

TEST_CASE("patch forwards are batching-order independent in inference mode") {
  backbone::Backbone student(small_cfg(), 29, true);
  Rng rng(7);
  Tensor img = Tensor::uniform(Shape{1, 32, 32, 3}, rng);
  AsymmetryPlan plan;
  plan.input_k = 2;
  auto joint = backbone::student_forward(student, img, plan);

  // forward every patch alone and reassemble by position
  auto grid = patching::split(img, 2);
  std::vector<patching::PatchGrid> stage_grids(3);
  for (auto& g : stage_grids) g.k = 2;
  for (int p = 3; p >= 0; --p) {  // reversed order on purpose
    auto stages = student.forward(ag::constant(grid.patches[p]), false);
    for (int i = 0; i < 3; ++i) {
      stage_grids[i].patches.resize(4);
      stage_grids[i].patches[p] = stages[i]->value;
    }
  }
  for (int i = 0; i < 3; ++i)
    CHECK(patching::reassemble(stage_grids[i]).bitwise_equal(joint.stages[i]));
}

TEST_CASE("per-pixel network makes splitting a no-op") {
  // receptive field 1 (1x1 convs, no normalization): oracle is the
  // whole-image forward
  BackboneConfig cfg;
  cfg.stage_channels = {6, 12};
  cfg.stage_strides = {1, 2};
  cfg.norm = false;
  cfg.kernel_size = 1;
  backbone::Backbone net(cfg, 17, true);
  Rng rng(8);
  Tensor img = Tensor::uniform(Shape{1, 32, 32, 3}, rng);

  AsymmetryPlan whole;  // k=1
  AsymmetryPlan split4;
  split4.input_k = 4;
  auto a = backbone::student_forward(net, img, whole);
  auto b = backbone::student_forward(net, img, split4);
  REQUIRE(a.stages.size() == b.stages.size());
  for (std::size_t i = 0; i < a.stages.size(); ++i)
    CHECK(a.stages[i].max_abs_diff(b.stages[i]) == 0.0);
}

TEST_CASE("invalid plans are rejected") {
  backbone::Backbone net(small_cfg(), 1, true);
  Rng rng(9);
  Tensor img = Tensor::uniform(Shape{1, 64, 64, 3}, rng);
  AsymmetryPlan bad;
  bad.input_k = 3;  // 64 not divisible
  CHECK_THROWS_AS(backbone::student_forward(net, img, bad), DivisibilityError);

  AsymmetryPlan deep;
  deep.input_k = 16;  // 4x4 patches cannot survive stride 8
  CHECK_THROWS_AS(backbone::student_forward(net, img, deep), DivisibilityError);

  AsymmetryPlan bad_stage;
  bad_stage.input_k = 2;
  bad_stage.stage_splits = {{3, 2}};  // split after the last stage is meaningless
  CHECK_THROWS_AS(backbone::student_forward(net, img, bad_stage), DivisibilityError);
}

TEST_CASE("teacher rejects inputs not divisible by the deepest stride") {
  auto net = backbone::build_teacher(small_cfg(), backbone::WeightsMode::kRandomFrozen, 7);
  Rng rng(10);
  Tensor img = Tensor::uniform(Shape{1, 60, 60, 3}, rng);
  CHECK_THROWS_AS(backbone::teacher_forward(net, img), ShapeError);
}
