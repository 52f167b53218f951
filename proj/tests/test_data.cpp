#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "adps/data.hpp"

using namespace adps;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("adps_data_" + std::to_string(Catch::rngSeed()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Tensor solid(int res, real r, real g, real b) {
  Tensor t(1, res, res, 3);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      t.at(0, y, x, 0) = r;
      t.at(0, y, x, 1) = g;
      t.at(0, y, x, 2) = b;
    }
  return t;
}

}  // namespace

TEST_CASE("mvtec fixture tree loads with expected counts and labels") {
  TempDir tmp;
  const fs::path base = tmp.path / "widget";
  io::save_image((base / "train" / "good" / "000.png").string(), solid(32, 0.5, 0.5, 0.5));
  io::save_image((base / "train" / "good" / "001.png").string(), solid(32, 0.6, 0.5, 0.4));
  io::save_image((base / "test" / "good" / "000.png").string(), solid(32, 0.5, 0.5, 0.5));
  io::save_image((base / "test" / "scratch" / "000.png").string(), solid(32, 0.9, 0.1, 0.1));
  Tensor mask(1, 32, 32, 1);
  for (int y = 8; y < 16; ++y)
    for (int x = 8; x < 16; ++x) mask.at(0, y, x, 0) = 1.0;
  io::save_mask((base / "ground_truth" / "scratch" / "000_mask.png").string(), mask);

  data::DatasetSpec spec;
  spec.root = tmp.path.string();
  spec.layout = data::Layout::kMvtec;
  spec.category = "widget";
  spec.resolution = 32;
  auto [train, test] = data::load(spec);

  REQUIRE(train.size() == 2);
  REQUIRE(test.size() == 2);
  for (const auto& li : train) {
    CHECK(li.label == 0);
    CHECK(li.gt.mask.empty());
  }
  CHECK(test[0].label == 0);  // test/good sorts before test/scratch
  CHECK(test[1].label == 1);
  CHECK(test[1].gt.mask.sum() == 64.0);
}

TEST_CASE("missing ground truth mask raises PairingError") {
  TempDir tmp;
  const fs::path base = tmp.path / "w";
  io::save_image((base / "train" / "good" / "000.png").string(), solid(32, 0.5, 0.5, 0.5));
  io::save_image((base / "test" / "dent" / "000.png").string(), solid(32, 0.9, 0.1, 0.1));
  data::DatasetSpec spec;
  spec.root = tmp.path.string();
  spec.layout = data::Layout::kMvtec;
  spec.category = "w";
  spec.resolution = 32;
  CHECK_THROWS_AS(data::load(spec), PairingError);
}

TEST_CASE("missing directories raise LayoutError") {
  TempDir tmp;
  data::DatasetSpec spec;
  spec.root = tmp.path.string();
  spec.layout = data::Layout::kMvtec;
  spec.category = "nothing";
  CHECK_THROWS_AS(data::load(spec), LayoutError);
}

TEST_CASE("loading is lexicographic by path") {
  TempDir tmp;
  const fs::path good = tmp.path / "c" / "train" / "good";
  io::save_image((good / "b.png").string(), solid(32, 0.2, 0.2, 0.2));
  io::save_image((good / "a.png").string(), solid(32, 0.8, 0.8, 0.8));
  io::save_image((tmp.path / "c" / "test" / "good" / "x.png").string(),
                 solid(32, 0.5, 0.5, 0.5));
  data::DatasetSpec spec;
  spec.root = tmp.path.string();
  spec.layout = data::Layout::kMvtec;
  spec.category = "c";
  spec.resolution = 32;
  auto [train, test] = data::load(spec);
  REQUIRE(train.size() == 2);
  CHECK(train[0].source_path.ends_with("a.png"));
  CHECK(train[1].source_path.ends_with("b.png"));
  CHECK(train[0].image.at(0, 0, 0, 0) == Catch::Approx(0.8).margin(0.01));
}

TEST_CASE("kolektor-style flat pairs load and resize to square") {
  TempDir tmp;
  // non-square source image, as in surface-defect datasets
  Tensor wide(1, 20, 52, 3);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 52; ++x)
      for (int c = 0; c < 3; ++c) wide.at(0, y, x, c) = 0.4;
  io::save_image((tmp.path / "train" / "000.png").string(), wide);
  io::save_image((tmp.path / "test" / "000.png").string(), wide);
  Tensor m(1, 20, 52, 1);
  for (int x = 10; x < 20; ++x) m.at(0, 10, x, 0) = 1.0;
  io::save_mask((tmp.path / "test" / "000_GT.png").string(), m);

  data::DatasetSpec spec;
  spec.root = tmp.path.string();
  spec.layout = data::Layout::kKolektor;
  spec.resolution = 64;
  auto [train, test] = data::load(spec);
  REQUIRE(train.size() == 1);
  REQUIRE(test.size() == 1);
  CHECK(train[0].image.shape() == Shape{1, 64, 64, 3});
  CHECK(test[0].label == 1);
  CHECK(test[0].gt.mask.shape() == Shape{1, 64, 64, 1});
}

TEST_CASE("toy dataset is deterministic and labeled consistently") {
  auto [train_a, test_a] = data::generate_toy(6, 8, 32, 99);
  auto [train_b, test_b] = data::generate_toy(6, 8, 32, 99);
  REQUIRE(train_a.size() == 6);
  REQUIRE(test_a.size() == 8);
  for (std::size_t i = 0; i < train_a.size(); ++i)
    CHECK(train_a[i].image.bitwise_equal(train_b[i].image));
  for (std::size_t i = 0; i < test_a.size(); ++i) {
    CHECK(test_a[i].image.bitwise_equal(test_b[i].image));
    CHECK(test_a[i].label == test_b[i].label);
    if (test_a[i].label == 1) CHECK(test_a[i].gt.mask.sum() > 0.0);
    else CHECK(test_a[i].gt.mask.empty());
  }
  int anomalous = 0;
  for (const auto& li : test_a) anomalous += li.label;
  CHECK(anomalous == 4);  // every other test image by construction
  for (const auto& li : train_a) CHECK(li.label == 0);
}

TEST_CASE("toy tree round-trips through the mvtec loader within quantization") {
  TempDir tmp;
  auto splits = data::generate_toy(3, 4, 32, 5);
  data::write_mvtec_tree(tmp.path.string(), "toycat", splits);

  data::DatasetSpec spec;
  spec.root = tmp.path.string();
  spec.layout = data::Layout::kMvtec;
  spec.category = "toycat";
  spec.resolution = 32;
  auto [train, test] = data::load(spec);
  REQUIRE(train.size() == 3);
  REQUIRE(test.size() == 4);
  for (std::size_t i = 0; i < train.size(); ++i)
    CHECK(train[i].image.max_abs_diff(splits.first[i].image) <= 1.0 / 255.0 + 1e-9);

  // anomalous entries keep their gt pixel-exactly ({0,255} PNG masks)
  int matched = 0;
  for (const auto& reloaded : test) {
    if (reloaded.label == 0) continue;
    for (const auto& orig : splits.second) {
      if (orig.label == 1 &&
          reloaded.image.max_abs_diff(orig.image) <= 1.0 / 255.0 + 1e-9) {
        CHECK(reloaded.gt.mask.bitwise_equal(orig.gt.mask));
        ++matched;
        break;
      }
    }
  }
  CHECK(matched == 2);
}
