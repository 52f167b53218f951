#pragma once

// Dataset ingestion (MVTec-style and KolektorSDD-style trees) and the
// deterministic procedural toy dataset used for desk-scale runs.
//
// MVTec layout, relative to <root>/<category>:
//   train/good/*.png            normal training images
//   test/<defect-or-good>/*     test images
//   ground_truth/<defect>/<stem>_mask*.png
//
// Kolektor layout, relative to <root>: train/ and test/ directories of flat
// image/mask pairs, mask named <stem>_GT.<ext>. An absent or all-black mask
// marks a normal image; defective images found under train/ are skipped
// (training uses normal images only).
//
// Loading is order-deterministic: files are visited in lexicographic path
// order. All images are resized to resolution x resolution (bilinear) and
// scaled to [0,1]; masks resize nearest-neighbour and binarize at 0.5.

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "adps/errors.hpp"
#include "adps/image_io.hpp"
#include "adps/losses.hpp"
#include "adps/rng.hpp"
#include "adps/synth.hpp"
#include "adps/tensor.hpp"

namespace adps::data {

namespace fs = std::filesystem;

enum class Layout { kMvtec, kKolektor, kToy };

inline Layout layout_from_string(const std::string& s) {
  if (s == "mvtec") return Layout::kMvtec;
  if (s == "kolektor") return Layout::kKolektor;
  if (s == "toy") return Layout::kToy;
  throw ConfigError("unknown dataset layout '" + s + "' (expected mvtec|kolektor|toy)");
}

inline std::string to_string(Layout l) {
  switch (l) {
    case Layout::kMvtec: return "mvtec";
    case Layout::kKolektor: return "kolektor";
    case Layout::kToy: return "toy";
  }
  return "toy";
}

struct DatasetSpec {
  std::string root;
  Layout layout = Layout::kToy;
  std::string category;
  int resolution = 256;
  int toy_train = 200;  // toy layout only
  int toy_test = 60;
  std::uint64_t seed = 0;
};

enum class Split { kTrain, kTest };

struct LabeledImage {
  Tensor image;         // [1, res, res, C]
  losses::PixelGT gt;   // empty mask for normal images
  int label = 0;
  Split split = Split::kTrain;
  std::string source_path;
};

using SplitPair = std::pair<std::vector<LabeledImage>, std::vector<LabeledImage>>;

namespace detail {

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png" || ext == ".bmp" || ext == ".jpg" || ext == ".jpeg";
}

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<fs::path> sorted_dirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline bool mask_nonempty(const Tensor& m) {
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i] > 0.5) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MVTec-style loader
// ---------------------------------------------------------------------------

inline SplitPair load_mvtec(const DatasetSpec& spec) {
  const fs::path base =
      spec.category.empty() ? fs::path(spec.root) : fs::path(spec.root) / spec.category;
  const fs::path train_good = base / "train" / "good";
  const fs::path test_dir = base / "test";
  if (!fs::is_directory(train_good))
    throw LayoutError("mvtec layout: missing " + train_good.string());
  if (!fs::is_directory(test_dir)) throw LayoutError("mvtec layout: missing " + test_dir.string());

  std::vector<LabeledImage> train, test;
  for (const fs::path& p : detail::sorted_images(train_good)) {
    LabeledImage li;
    li.image = io::resize_image(io::load_image(p.string()), spec.resolution);
    li.label = 0;
    li.split = Split::kTrain;
    li.source_path = p.string();
    train.push_back(std::move(li));
  }
  if (train.empty()) throw LayoutError("mvtec layout: no training images in " +
                                       train_good.string());

  for (const fs::path& defect_dir : detail::sorted_dirs(test_dir)) {
    const std::string defect = defect_dir.filename().string();
    for (const fs::path& p : detail::sorted_images(defect_dir)) {
      LabeledImage li;
      li.image = io::resize_image(io::load_image(p.string()), spec.resolution);
      li.split = Split::kTest;
      li.source_path = p.string();
      if (defect == "good") {
        li.label = 0;
      } else {
        const fs::path gt_dir = base / "ground_truth" / defect;
        const std::string stem = p.stem().string();
        fs::path mask_path;
        for (const fs::path& m : detail::sorted_images(gt_dir)) {
          if (m.stem().string().rfind(stem + "_mask", 0) == 0) {
            mask_path = m;
            break;
          }
        }
        if (mask_path.empty())
          throw PairingError("mvtec layout: no ground_truth mask for " + p.string());
        li.gt.mask = io::resize_mask(io::load_mask(mask_path.string()), spec.resolution);
        li.label = 1;
      }
      test.push_back(std::move(li));
    }
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Kolektor-style loader
// ---------------------------------------------------------------------------

inline SplitPair load_kolektor(const DatasetSpec& spec) {
  const fs::path base(spec.root);
  const fs::path train_dir = base / "train";
  const fs::path test_dir = base / "test";
  if (!fs::is_directory(train_dir) || !fs::is_directory(test_dir))
    throw LayoutError("kolektor layout: expected train/ and test/ under " + base.string());

  auto load_split = [&](const fs::path& dir, Split split) {
    std::vector<LabeledImage> out;
    for (const fs::path& p : detail::sorted_images(dir)) {
      const std::string stem = p.stem().string();
      if (stem.size() >= 3 && stem.substr(stem.size() - 3) == "_GT") continue;
      fs::path mask_path;
      for (const char* ext : {".png", ".bmp", ".jpg", ".jpeg"}) {
        fs::path cand = dir / (stem + "_GT" + ext);
        if (fs::exists(cand)) {
          mask_path = cand;
          break;
        }
      }
      LabeledImage li;
      li.image = io::resize_image(io::load_image(p.string()), spec.resolution);
      li.split = split;
      li.source_path = p.string();
      if (!mask_path.empty()) {
        Tensor m = io::resize_mask(io::load_mask(mask_path.string()), spec.resolution);
        if (detail::mask_nonempty(m)) {
          li.label = 1;
          li.gt.mask = std::move(m);
        }
      }
      if (split == Split::kTrain && li.label != 0) continue;  // normals-only training
      out.push_back(std::move(li));
    }
    return out;
  };

  auto train = load_split(train_dir, Split::kTrain);
  auto test = load_split(test_dir, Split::kTest);
  if (train.empty()) throw LayoutError("kolektor layout: no normal training images");
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Procedural toy dataset
// ---------------------------------------------------------------------------

namespace detail {

struct ToyStyle {
  int family = 0;  // 0 stripes, 1 checker, 2 blobs
  real color_a[3];
  real color_b[3];
  real frequency = 4.0;
  real angle = 0.0;
  int cell = 8;
};

inline ToyStyle toy_style(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy-style"));
  ToyStyle st;
  st.family = static_cast<int>(seed % 3);  // balanced across seed sweeps
  for (int c = 0; c < 3; ++c) {
    st.color_a[c] = rng.uniform(0.55, 0.95);
    st.color_b[c] = rng.uniform(0.05, 0.45);
  }
  st.frequency = rng.uniform(3.0, 6.0);
  st.angle = static_cast<real>(rng.uniform_int(0, 3)) * 0.7853981633974483;  // multiples of 45 deg
  st.cell = 4 << rng.uniform_int(1, 2);  // 8 or 16
  return st;
}

// Held-out anomaly shapes for the toy test split: compact ellipses and
// rotated bars, deliberately unlike the perlin blobs used by training-time
// synthesis, so test anomalies are out-of-distribution for the student.
inline Tensor toy_test_mask(int res, Rng& rng) {
  Tensor mask(1, res, res, 1);
  const real scale = res / 64.0;
  const bool bar = rng.bernoulli(0.4);
  const real cy = rng.uniform(0.2, 0.8) * res;
  const real cx = rng.uniform(0.2, 0.8) * res;
  const real angle = rng.uniform(0.0, 3.14159265358979);
  const real ca = std::cos(angle), sa = std::sin(angle);
  real ry, rx;
  if (bar) {
    ry = rng.uniform(1.0, 2.0) * scale;
    rx = rng.uniform(5.0, 9.0) * scale;
  } else {
    ry = rng.uniform(2.0, 5.0) * scale;
    rx = rng.uniform(2.0, 5.0) * scale;
  }
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const real dy = y - cy, dx = x - cx;
      const real u = (dx * ca + dy * sa) / rx;
      const real v = (-dx * sa + dy * ca) / ry;
      if (u * u + v * v <= 1.0) mask.at(0, y, x, 0) = 1.0;
    }
  if (mask.sum() == 0.0) mask.at(0, static_cast<int>(cy), static_cast<int>(cx), 0) = 1.0;
  return mask;
}

// Foreign-object textures for the test split: solid saturated colors or
// fine checkerboards, both far from the fractal-noise textures seen in
// training.
inline Tensor toy_test_texture(int res, Rng& rng) {
  Tensor tex(1, res, res, 3);
  if (rng.bernoulli(0.5)) {
    real col[3];
    for (real& c : col) c = rng.bernoulli(0.5) ? rng.uniform(0.85, 1.0) : rng.uniform(0.0, 0.15);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x)
        for (int c = 0; c < 3; ++c) tex.at(0, y, x, c) = col[c];
  } else {
    real a[3], b[3];
    for (int c = 0; c < 3; ++c) {
      a[c] = rng.uniform(0.8, 1.0);
      b[c] = rng.uniform(0.0, 0.2);
    }
    const int cell = 2 + static_cast<int>(rng.uniform_int(0, 1));
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const bool odd = ((y / cell) + (x / cell)) % 2 == 1;
        for (int c = 0; c < 3; ++c) tex.at(0, y, x, c) = odd ? a[c] : b[c];
      }
  }
  return tex;
}

// Structural counterpart of a style: locally plausible texture that is
// globally wrong for the dataset (rotated stripes, phase-swapped checker,
// off-frequency blobs).
inline ToyStyle structural_variant(ToyStyle st) {
  switch (st.family) {
    case 0:
      st.angle += 1.5707963267948966;
      break;
    case 1:
      for (int c = 0; c < 3; ++c) std::swap(st.color_a[c], st.color_b[c]);
      break;
    default:
      st.frequency *= 4.0;  // blob field resolution scales with frequency
      break;
  }
  return st;
}

inline Tensor toy_normal(const ToyStyle& st, int res, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy-image"));
  Tensor img(1, res, res, 3);
  const real gain = rng.uniform(0.92, 1.08);  // per-image exposure jitter
  const real phase = rng.uniform(0.0, 6.283185307179586);
  const int ox = static_cast<int>(rng.uniform_int(0, st.cell - 1));
  const int oy = static_cast<int>(rng.uniform_int(0, st.cell - 1));
  Tensor field;
  if (st.family == 2) {
    const int lattice = std::max(2, static_cast<int>(st.frequency + 0.5));
    field = synth::perlin_field(res, res, lattice, lattice, rng);
  }
  const real ca = std::cos(st.angle), sa = std::sin(st.angle);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      real v = 0.0;
      switch (st.family) {
        case 0: {  // stripes
          const real u = (x * ca + y * sa) / res;
          v = 0.5 + 0.5 * std::sin(6.283185307179586 * st.frequency * u + phase);
          break;
        }
        case 1: {  // checker
          const int gx = (x + ox) / st.cell;
          const int gy = (y + oy) / st.cell;
          v = ((gx + gy) % 2 == 0) ? 1.0 : 0.0;
          break;
        }
        default:  // smooth blobs
          v = field.at(0, y, x, 0);
      }
      for (int c = 0; c < 3; ++c) {
        const real base = (st.color_a[c] * v + st.color_b[c] * (1.0 - v)) * gain;
        const real noisy = base + rng.uniform(-0.05, 0.05);
        img.at(0, y, x, c) = std::min(1.0, std::max(0.0, noisy));
      }
    }
  return img;
}

}  // namespace detail

// Deterministic toy dataset: one texture style per seed, per-image jitter.
// Test anomalies are blended through the synthesizer with pixel-exact
// ground truth, but use held-out shapes and textures that never occur in
// training-time synthesis. Every other test image is anomalous.
inline SplitPair generate_toy(int n_train, int n_test, int resolution, std::uint64_t seed) {
  if (resolution < 32) throw ConfigError("toy dataset: resolution must be >= 32");
  const detail::ToyStyle style = detail::toy_style(seed);

  std::vector<LabeledImage> train, test;
  for (int i = 0; i < n_train; ++i) {
    LabeledImage li;
    li.image = detail::toy_normal(style, resolution, derive_seed(seed, 1000000 + i));
    li.label = 0;
    li.split = Split::kTrain;
    li.source_path = "toy://train/" + std::to_string(i);
    train.push_back(std::move(li));
  }
  for (int i = 0; i < n_test; ++i) {
    Tensor normal = detail::toy_normal(style, resolution, derive_seed(seed, 2000000 + i));
    LabeledImage li;
    li.split = Split::kTest;
    li.source_path = "toy://test/" + std::to_string(i);
    if (i % 2 == 1) {
      Rng rng(derive_seed(seed, 3000000 + i));
      Tensor mask = detail::toy_test_mask(resolution, rng);
      Tensor texture = detail::toy_test_texture(resolution, rng);
      const real beta = rng.uniform(0.5, 0.9);
      auto [image, gt] = synth::blend(normal, texture, mask, beta);
      li.image = std::move(image);
      li.gt = std::move(gt);
      li.label = 1;
    } else {
      li.image = std::move(normal);
      li.label = 0;
    }
    test.push_back(std::move(li));
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Unified entry point and MVTec tree writer
// ---------------------------------------------------------------------------

inline SplitPair load(const DatasetSpec& spec) {
  switch (spec.layout) {
    case Layout::kMvtec: return load_mvtec(spec);
    case Layout::kKolektor: return load_kolektor(spec);
    case Layout::kToy:
      return generate_toy(spec.toy_train, spec.toy_test, spec.resolution, spec.seed);
  }
  throw ConfigError("load: unknown layout");
}

// Writes an MVTec-compatible tree (train/good, test/good, test/synthetic,
// ground_truth/synthetic) so downstream tools exercise the same layout
// fast-path as real data.
inline void write_mvtec_tree(const std::string& root, const std::string& category,
                             const SplitPair& splits) {
  const fs::path base = fs::path(root) / category;
  char name[32];
  int idx = 0;
  for (const LabeledImage& li : splits.first) {
    std::snprintf(name, sizeof(name), "%03d.png", idx++);
    io::save_image((base / "train" / "good" / name).string(), li.image);
  }
  int good_idx = 0, syn_idx = 0;
  for (const LabeledImage& li : splits.second) {
    if (li.label == 0) {
      std::snprintf(name, sizeof(name), "%03d.png", good_idx++);
      io::save_image((base / "test" / "good" / name).string(), li.image);
    } else {
      std::snprintf(name, sizeof(name), "%03d.png", syn_idx);
      io::save_image((base / "test" / "synthetic" / name).string(), li.image);
      std::snprintf(name, sizeof(name), "%03d_mask.png", syn_idx++);
      io::save_mask((base / "ground_truth" / "synthetic" / name).string(), li.gt.mask);
    }
  }
}

// Flat folder of texture images for the synthesizer; loaded once, resized on
// demand.
class TextureFolder {
 public:
  explicit TextureFolder(const std::string& dir) {
    for (const fs::path& p : detail::sorted_images(dir))
      images_.push_back(io::load_image(p.string()));
    if (images_.empty()) throw LayoutError("texture folder has no images: " + dir);
  }

  Tensor operator()(int h, int w, int channels, std::uint64_t seed) const {
    Rng rng(derive_seed(seed, "texture-pick"));
    const Tensor& src = images_[rng.uniform_int(0, static_cast<std::int64_t>(images_.size()) - 1)];
    Tensor resized = io::resize_image(src, h);  // square target
    if (resized.c() == channels) return resized;
    Tensor out(1, h, w, channels);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < channels; ++c)
          out.at(0, y, x, c) = resized.at(0, y, x, c % resized.c());
    return out;
  }

 private:
  std::vector<Tensor> images_;
};

}  // namespace adps::data
