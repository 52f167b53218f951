#pragma once

// Simulated-anomaly synthesis: Perlin-style gradient noise thresholded into
// a binary mask, blended with out-of-distribution texture onto a normal
// image. The corrupted region equals the ground-truth support exactly, and
// the whole pipeline is a pure function of (inputs, seed).

#include <algorithm>
#include <string>
#include <vector>

#include "adps/errors.hpp"
#include "adps/losses.hpp"
#include "adps/rng.hpp"
#include "adps/tensor.hpp"

namespace adps::synth {

struct SynthConfig {
  real anomaly_prob = 0.5;
  int perlin_scale_lo = 1;  // noise lattice resolution is 2^scale cells
  int perlin_scale_hi = 4;
  real threshold = 0.6;  // binarization threshold on the [0,1]-normalized field
  real beta_lo = 0.2;    // blend opacity range
  real beta_hi = 1.0;
  std::string texture_source = "procedural";

  void validate() const {
    if (anomaly_prob < 0.0 || anomaly_prob > 1.0)
      throw ConfigError("synth: anomaly_prob must lie in [0,1]");
    if (perlin_scale_lo < 0 || perlin_scale_hi < perlin_scale_lo)
      throw ConfigError("synth: bad perlin scale range");
    if (threshold <= 0.0 || threshold >= 1.0)
      throw ConfigError("synth: threshold must lie in (0,1)");
    if (beta_lo < 0.0 || beta_hi > 1.0 || beta_hi < beta_lo)
      throw ConfigError("synth: beta range must be ordered within [0,1]");
  }
};

struct TrainSample {
  Tensor image;  // [1, H, W, C]
  Tensor gt;     // [1, H, W, 1] binary
  int label = 0; // 1 iff gt has any anomalous pixel
};

// Classic 2D gradient noise on a (res_x x res_y) lattice, min-max normalized
// to [0, 1]. A flat field maps to all 0.5.
inline Tensor perlin_field(int h, int w, int res_y, int res_x, Rng& rng) {
  res_y = std::max(1, res_y);
  res_x = std::max(1, res_x);
  std::vector<real> gx((res_y + 1) * (res_x + 1)), gy(gx.size());
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const real a = rng.uniform(0.0, 6.283185307179586);
    gx[i] = std::cos(a);
    gy[i] = std::sin(a);
  }
  auto fade = [](real t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); };

  Tensor out(1, h, w, 1);
  for (int y = 0; y < h; ++y) {
    const real fy = static_cast<real>(y) * res_y / h;
    const int cy = std::min(static_cast<int>(fy), res_y - 1);
    const real ty = fade(fy - cy);
    for (int x = 0; x < w; ++x) {
      const real fx = static_cast<real>(x) * res_x / w;
      const int cx = std::min(static_cast<int>(fx), res_x - 1);
      const real tx = fade(fx - cx);
      auto dot = [&](int iy, int ix) {
        const std::size_t g = static_cast<std::size_t>(iy) * (res_x + 1) + ix;
        return gx[g] * (fx - ix) + gy[g] * (fy - iy);
      };
      const real n00 = dot(cy, cx);
      const real n01 = dot(cy, cx + 1);
      const real n10 = dot(cy + 1, cx);
      const real n11 = dot(cy + 1, cx + 1);
      const real top = n00 * (1.0 - tx) + n01 * tx;
      const real bot = n10 * (1.0 - tx) + n11 * tx;
      out.at(0, y, x, 0) = top * (1.0 - ty) + bot * ty;
    }
  }
  const real lo = out.min(), hi = out.max();
  if (hi - lo < 1e-12) {
    out.fill(0.5);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - lo) / (hi - lo);
  }
  return out;
}

// Thresholded noise mask; resampled while empty (up to 10 draws), then a
// random rectangle is forced so the mask is never empty.
inline Tensor perlin_mask(int h, int w, const SynthConfig& cfg, std::uint64_t seed) {
  if (h < 8 || w < 8) throw ShapeError("perlin_mask: dims must be >= 8");
  cfg.validate();
  Rng rng(derive_seed(seed, "perlin-mask"));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const int sy = static_cast<int>(rng.uniform_int(cfg.perlin_scale_lo, cfg.perlin_scale_hi));
    const int sx = static_cast<int>(rng.uniform_int(cfg.perlin_scale_lo, cfg.perlin_scale_hi));
    Tensor field = perlin_field(h, w, 1 << sy, 1 << sx, rng);
    Tensor mask(1, h, w, 1);
    bool any = false;
    for (std::size_t i = 0; i < field.size(); ++i) {
      mask[i] = field[i] > cfg.threshold ? 1.0 : 0.0;
      any = any || mask[i] > 0.5;
    }
    if (any) return mask;
  }
  // Fallback: random rectangle covering 4-25% of the area.
  Tensor mask(1, h, w, 1);
  const int rh = std::max(1, static_cast<int>(h * rng.uniform(0.2, 0.5)));
  const int rw = std::max(1, static_cast<int>(w * rng.uniform(0.2, 0.5)));
  const int oy = static_cast<int>(rng.uniform_int(0, h - rh));
  const int ox = static_cast<int>(rng.uniform_int(0, w - rw));
  for (int y = oy; y < oy + rh; ++y)
    for (int x = ox; x < ox + rw; ++x) mask.at(0, y, x, 0) = 1.0;
  return mask;
}

// out = (1 - mask) * I + mask * (beta * texture + (1 - beta) * I); gt = mask.
inline std::pair<Tensor, losses::PixelGT> blend(const Tensor& image, const Tensor& texture,
                                                const Tensor& mask, real beta) {
  image.require_same_shape(texture, "blend");
  if (mask.n() != image.n() || mask.h() != image.h() || mask.w() != image.w() || mask.c() != 1)
    throw ShapeError("blend: mask shape " + mask.shape().str() + " vs image " +
                     image.shape().str());
  if (beta < 0.0 || beta > 1.0) throw ConfigError("blend: beta must lie in [0,1]");
  Tensor out = image;
  const std::size_t positions = static_cast<std::size_t>(image.n()) * image.h() * image.w();
  for (std::size_t p = 0; p < positions; ++p) {
    if (mask[p] > 0.5) {
      for (int c = 0; c < image.c(); ++c) {
        const real v = beta * texture[p * image.c() + c] +
                       (1.0 - beta) * image[p * image.c() + c];
        out[p * image.c() + c] = std::min(1.0, std::max(0.0, v));
      }
    }
  }
  losses::PixelGT gt;
  gt.mask = mask;
  return {std::move(out), std::move(gt)};
}

// Colored fractal noise texture in [0,1]; the default out-of-distribution
// source when no texture folder is configured.
inline Tensor procedural_texture(int h, int w, int channels, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "texture"));
  Tensor out(1, h, w, channels);
  for (int c = 0; c < channels; ++c) {
    Tensor acc(1, h, w, 1);
    real weight = 1.0, total = 0.0;
    for (int octave = 0; octave < 3; ++octave) {
      const int res = 4 << octave;
      Tensor f = perlin_field(h, w, res, res, rng);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weight * f[i];
      total += weight;
      weight *= 0.5;
    }
    const real gain = rng.uniform(0.6, 1.0);
    const real bias = rng.uniform(0.0, 0.4);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        real v = acc.at(0, y, x, 0) / total * gain + bias * (1.0 - gain);
        out.at(0, y, x, c) = std::min(1.0, std::max(0.0, v));
      }
  }
  return out;
}

// Corrupt one image; the texture provider supplies an out-of-distribution
// image of the same shape for a given seed.
template <typename TextureFn>
TrainSample anomalize(const Tensor& image, const SynthConfig& cfg, std::uint64_t seed,
                      TextureFn&& texture_for) {
  Rng rng(derive_seed(seed, "anomalize"));
  Tensor mask = perlin_mask(image.h(), image.w(), cfg, rng.next_u64());
  const real beta = rng.uniform(cfg.beta_lo, cfg.beta_hi);
  Tensor texture = texture_for(image.h(), image.w(), image.c(), rng.next_u64());
  auto [out, gt] = blend(image, texture, mask, beta);
  TrainSample s;
  s.image = std::move(out);
  s.gt = std::move(gt.mask);
  s.label = 1;
  return s;
}

// Each sample is independently corrupted with probability anomaly_prob;
// per-sample seeds derive from (seed, index), so batches are reproducible
// and parallelizable.
template <typename TextureFn>
std::vector<TrainSample> make_batch(const std::vector<Tensor>& normals, const SynthConfig& cfg,
                                    std::uint64_t seed, TextureFn&& texture_for) {
  if (normals.empty()) throw EmptyDatasetError("make_batch: no normal images supplied");
  cfg.validate();
  std::vector<TrainSample> batch(normals.size());
  for (std::size_t i = 0; i < normals.size(); ++i) {
    const std::uint64_t sample_seed = derive_seed(seed, i);
    Rng rng(sample_seed);
    if (rng.bernoulli(cfg.anomaly_prob)) {
      batch[i] = anomalize(normals[i], cfg, sample_seed, texture_for);
    } else {
      batch[i].image = normals[i];
      batch[i].gt = Tensor(1, normals[i].h(), normals[i].w(), 1);
      batch[i].label = 0;
    }
  }
  return batch;
}

inline std::vector<TrainSample> make_batch(const std::vector<Tensor>& normals,
                                           const SynthConfig& cfg, std::uint64_t seed) {
  return make_batch(normals, cfg, seed, [](int h, int w, int c, std::uint64_t s) {
    return procedural_texture(h, w, c, s);
  });
}

}  // namespace adps::synth
