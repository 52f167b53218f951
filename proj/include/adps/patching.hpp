#pragma once

// Non-overlapping k x k patch grids. split/reassemble form an exact bijection:
// patch index = row * k + col (row-major, top-left first), and pixel (u, v) of
// the source lands in patch (u / (H/k)) * k + (v / (W/k)) at local offset
// (u % (H/k), v % (W/k)). No interpolation anywhere.

#include <vector>

#include "adps/errors.hpp"
#include "adps/tensor.hpp"

namespace adps::patching {

struct PatchGrid {
  int k = 1;
  std::vector<Tensor> patches;  // row-major, k*k entries
  Shape source_shape{};
};

inline void check_divisible(int h, int w, int k, const char* what) {
  if (k < 1) throw DivisibilityError(std::string(what) + ": k must be >= 1");
  if (h % k != 0 || w % k != 0) {
    throw DivisibilityError(std::string(what) + ": spatial dims " + std::to_string(h) + "x" +
                            std::to_string(w) + " not divisible by k=" + std::to_string(k));
  }
}

inline PatchGrid split(const Tensor& x, int k) {
  check_divisible(x.h(), x.w(), k, "split");
  const int ph = x.h() / k;
  const int pw = x.w() / k;
  PatchGrid grid;
  grid.k = k;
  grid.source_shape = x.shape();
  grid.patches.reserve(static_cast<std::size_t>(k) * k);
  for (int gy = 0; gy < k; ++gy)
    for (int gx = 0; gx < k; ++gx) {
      Tensor p(x.n(), ph, pw, x.c());
      for (int n = 0; n < x.n(); ++n)
        for (int y = 0; y < ph; ++y)
          for (int xx = 0; xx < pw; ++xx)
            for (int c = 0; c < x.c(); ++c)
              p.at(n, y, xx, c) = x.at(n, gy * ph + y, gx * pw + xx, c);
      grid.patches.push_back(std::move(p));
    }
  return grid;
}

inline Tensor reassemble(const PatchGrid& grid) {
  const int k = grid.k;
  if (static_cast<int>(grid.patches.size()) != k * k) {
    throw ShapeError("reassemble: expected " + std::to_string(k * k) + " patches, got " +
                     std::to_string(grid.patches.size()));
  }
  const Shape ps = grid.patches.front().shape();
  for (const Tensor& p : grid.patches) {
    if (!(p.shape() == ps)) throw ShapeError("reassemble: patch shapes disagree");
  }
  Tensor out(ps.n, ps.h * k, ps.w * k, ps.c);
  for (int gy = 0; gy < k; ++gy)
    for (int gx = 0; gx < k; ++gx) {
      const Tensor& p = grid.patches[static_cast<std::size_t>(gy) * k + gx];
      for (int n = 0; n < ps.n; ++n)
        for (int y = 0; y < ps.h; ++y)
          for (int xx = 0; xx < ps.w; ++xx)
            for (int c = 0; c < ps.c; ++c)
              out.at(n, gy * ps.h + y, gx * ps.w + xx, c) = p.at(n, y, xx, c);
    }
  return out;
}

// Batched layout used by the student forward pass: the k*k patches of every
// batch element are stacked along n, sample-major then patch row-major.
inline Tensor batch_split(const Tensor& x, int k) {
  check_divisible(x.h(), x.w(), k, "batch_split");
  const int ph = x.h() / k;
  const int pw = x.w() / k;
  Tensor out(x.n() * k * k, ph, pw, x.c());
  for (int n = 0; n < x.n(); ++n)
    for (int gy = 0; gy < k; ++gy)
      for (int gx = 0; gx < k; ++gx) {
        const int bn = (n * k + gy) * k + gx;
        for (int y = 0; y < ph; ++y)
          for (int xx = 0; xx < pw; ++xx)
            for (int c = 0; c < x.c(); ++c)
              out.at(bn, y, xx, c) = x.at(n, gy * ph + y, gx * pw + xx, c);
      }
  return out;
}

inline Tensor batch_reassemble(const Tensor& patches, int k) {
  if (patches.n() % (k * k) != 0)
    throw ShapeError("batch_reassemble: batch dim not a multiple of k*k");
  const int n_out = patches.n() / (k * k);
  Tensor out(n_out, patches.h() * k, patches.w() * k, patches.c());
  for (int n = 0; n < n_out; ++n)
    for (int gy = 0; gy < k; ++gy)
      for (int gx = 0; gx < k; ++gx) {
        const int bn = (n * k + gy) * k + gx;
        for (int y = 0; y < patches.h(); ++y)
          for (int xx = 0; xx < patches.w(); ++xx)
            for (int c = 0; c < patches.c(); ++c)
              out.at(n, gy * patches.h() + y, gx * patches.w() + xx, c) = patches.at(bn, y, xx, c);
      }
  return out;
}

}  // namespace adps::patching
