#pragma once

// Dense rank-4 tensor in NHWC layout backing every feature map, image and
// parameter array in the toolkit. Images use n == 1; convolution weights map
// (kh, kw, c_in, c_out) onto (n, h, w, c).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "adps/errors.hpp"
#include "adps/rng.hpp"

namespace adps {

using real = double;

struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "[" << n << "," << h << "," << w << "," << c << "]";
    return os.str();
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s) : shape_(s), data_(s.numel(), 0.0) {}
  Tensor(int n, int h, int w, int c) : Tensor(Shape{n, h, w, c}) {}

  static Tensor zeros(Shape s) { return Tensor(s); }

  static Tensor full(Shape s, real v) {
    Tensor t(s);
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor uniform(Shape s, Rng& rng, real lo = 0.0, real hi = 1.0) {
    Tensor t(s);
    for (real& v : t.data_) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor normal(Shape s, Rng& rng, real mean = 0.0, real stddev = 1.0) {
    Tensor t(s);
    for (real& v : t.data_) v = rng.normal(mean, stddev);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  int c() const { return shape_.c; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  real& at(int n, int h, int w, int c) {
    return data_[((static_cast<std::size_t>(n) * shape_.h + h) * shape_.w + w) * shape_.c + c];
  }
  real at(int n, int h, int w, int c) const {
    return data_[((static_cast<std::size_t>(n) * shape_.h + h) * shape_.w + w) * shape_.c + c];
  }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(real s) {
    for (real& v : data_) v *= s;
    return *this;
  }

  real max() const {
    real m = data_.empty() ? 0.0 : data_[0];
    for (real v : data_) m = v > m ? v : m;
    return m;
  }

  real min() const {
    real m = data_.empty() ? 0.0 : data_[0];
    for (real v : data_) m = v < m ? v : m;
    return m;
  }

  real sum() const {
    real s = 0.0;
    for (real v : data_) s += v;
    return s;
  }

  real mean() const { return data_.empty() ? 0.0 : sum() / static_cast<real>(data_.size()); }

  bool bitwise_equal(const Tensor& o) const {
    return shape_ == o.shape_ &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(real)) == 0;
  }

  real max_abs_diff(const Tensor& o) const {
    require_same_shape(o, "max_abs_diff");
    real m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) {
      const real d = std::abs(data_[i] - o.data_[i]);
      m = d > m ? d : m;
    }
    return m;
  }

  void require_same_shape(const Tensor& o, const char* op) const {
    if (!(shape_ == o.shape_)) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_.str() + " vs " +
                       o.shape_.str());
    }
  }

 private:
  Shape shape_{};
  std::vector<real> data_;
};

// Nearest-neighbour channel-wise resize; used for masks and coarse maps.
inline Tensor resize_nearest(const Tensor& x, int out_h, int out_w) {
  Tensor y(x.n(), out_h, out_w, x.c());
  for (int n = 0; n < x.n(); ++n)
    for (int oy = 0; oy < out_h; ++oy) {
      const int iy = std::min(static_cast<int>(static_cast<double>(oy) * x.h() / out_h), x.h() - 1);
      for (int ox = 0; ox < out_w; ++ox) {
        const int ix = std::min(static_cast<int>(static_cast<double>(ox) * x.w() / out_w), x.w() - 1);
        for (int c = 0; c < x.c(); ++c) y.at(n, oy, ox, c) = x.at(n, iy, ix, c);
      }
    }
  return y;
}

// Bilinear resize with half-pixel centres; used to upsample coarse masks.
inline Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  Tensor y(x.n(), out_h, out_w, x.c());
  const double sy = static_cast<double>(x.h()) / out_h;
  const double sx = static_cast<double>(x.w()) / out_w;
  for (int n = 0; n < x.n(); ++n)
    for (int oy = 0; oy < out_h; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      fy = std::max(0.0, std::min(fy, static_cast<double>(x.h() - 1)));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, x.h() - 1);
      const double wy = fy - y0;
      for (int ox = 0; ox < out_w; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        fx = std::max(0.0, std::min(fx, static_cast<double>(x.w() - 1)));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, x.w() - 1);
        const double wx = fx - x0;
        for (int c = 0; c < x.c(); ++c) {
          const double top = x.at(n, y0, x0, c) * (1.0 - wx) + x.at(n, y0, x1, c) * wx;
          const double bot = x.at(n, y1, x0, c) * (1.0 - wx) + x.at(n, y1, x1, c) * wx;
          y.at(n, oy, ox, c) = top * (1.0 - wy) + bot * wy;
        }
      }
    }
  return y;
}

// FNV-1a over the raw bytes; identity hash for parameter blobs.
inline std::uint64_t tensor_bytes_hash(std::uint64_t h, const Tensor& t) {
  const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
  const std::size_t bytes = t.size() * sizeof(real);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace adps
