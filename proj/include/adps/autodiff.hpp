#pragma once

// Tape autodiff over NHWC tensors. Graphs are built per step by the op
// functions below; backward() walks the tape in reverse topological order.
// Ops whose inputs carry no gradient collapse to constant nodes, so the same
// forward code serves training and inference.
//
// Convolutions run as im2col + Eigen GEMM, parallelised over batch samples.
// Every reduction that crosses sample boundaries accumulates partials in
// sample order, so results do not depend on how samples were assigned to
// workers.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adps/errors.hpp"
#include "adps/parallel.hpp"
#include "adps/patching.hpp"
#include "adps/tensor.hpp"

namespace adps::ag {

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
  }
};

inline Var leaf(Tensor v, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

inline Var constant(Tensor v) { return leaf(std::move(v), false); }

inline Var make_op(Tensor v, std::vector<Var> parents, std::function<void(Node&)> bp) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || p->requires_grad;
  if (!needs) return leaf(std::move(v), false);
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backprop = std::move(bp);
  return n;
}

// Reverse-mode sweep from a scalar root.
inline void backward(const Var& root) {
  if (root->value.size() != 1) throw ShapeError("backward: root must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  a->value.require_same_shape(b->value, "add");
  Tensor y = a->value;
  y += b->value;
  return make_op(std::move(y), {a, b}, [](Node& n) {
    for (int i = 0; i < 2; ++i) {
      Var& p = n.parents[i];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t j = 0; j < n.grad.size(); ++j) p->grad[j] += n.grad[j];
    }
  });
}

inline Var scale(const Var& a, real s) {
  Tensor y = a->value;
  y *= s;
  return make_op(std::move(y), {a}, [s](Node& n) {
    Var& p = n.parents[0];
    p->ensure_grad();
    for (std::size_t j = 0; j < n.grad.size(); ++j) p->grad[j] += s * n.grad[j];
  });
}

// a + s * b; used for the total loss.
inline Var add_scaled(const Var& a, const Var& b, real s) { return add(a, scale(b, s)); }

inline Var relu(const Var& x) {
  Tensor y = x->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
  return make_op(std::move(y), {x}, [](Node& n) {
    Var& p = n.parents[0];
    p->ensure_grad();
    for (std::size_t j = 0; j < n.grad.size(); ++j)
      if (p->value[j] > 0.0) p->grad[j] += n.grad[j];
  });
}

inline Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

// (1 - m) broadcast-multiplied over the channels of x; m has c == 1.
inline Var weight_by_mask(const Var& x, const Var& m) {
  const Shape xs = x->value.shape();
  const Shape ms = m->value.shape();
  if (ms.n != xs.n || ms.h != xs.h || ms.w != xs.w || ms.c != 1)
    throw ShapeError("weight_by_mask: mask shape " + ms.str() + " vs features " + xs.str());
  Tensor y(xs);
  const std::size_t positions = static_cast<std::size_t>(xs.n) * xs.h * xs.w;
  for (std::size_t p = 0; p < positions; ++p) {
    const real wgt = 1.0 - m->value[p];
    for (int c = 0; c < xs.c; ++c) y[p * xs.c + c] = wgt * x->value[p * xs.c + c];
  }
  return make_op(std::move(y), {x, m}, [positions, cc = xs.c](Node& n) {
    Var& x = n.parents[0];
    Var& m = n.parents[1];
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t p = 0; p < positions; ++p) {
        const real wgt = 1.0 - m->value[p];
        for (int c = 0; c < cc; ++c) x->grad[p * cc + c] += wgt * n.grad[p * cc + c];
      }
    }
    if (m->requires_grad) {
      m->ensure_grad();
      for (std::size_t p = 0; p < positions; ++p) {
        real acc = 0.0;
        for (int c = 0; c < cc; ++c) acc += n.grad[p * cc + c] * x->value[p * cc + c];
        m->grad[p] -= acc;
      }
    }
  });
}

inline Var concat_channels(const Var& a, const Var& b) {
  const Shape as = a->value.shape();
  const Shape bs = b->value.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
    throw ShapeError("concat_channels: spatial mismatch " + as.str() + " vs " + bs.str());
  Tensor y(as.n, as.h, as.w, as.c + bs.c);
  const std::size_t positions = static_cast<std::size_t>(as.n) * as.h * as.w;
  for (std::size_t p = 0; p < positions; ++p) {
    for (int c = 0; c < as.c; ++c) y[p * (as.c + bs.c) + c] = a->value[p * as.c + c];
    for (int c = 0; c < bs.c; ++c) y[p * (as.c + bs.c) + as.c + c] = b->value[p * bs.c + c];
  }
  return make_op(std::move(y), {a, b}, [positions, ca = as.c, cb = bs.c](Node& n) {
    Var& a = n.parents[0];
    Var& b = n.parents[1];
    const int cy = ca + cb;
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t p = 0; p < positions; ++p)
        for (int c = 0; c < ca; ++c) a->grad[p * ca + c] += n.grad[p * cy + c];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t p = 0; p < positions; ++p)
        for (int c = 0; c < cb; ++c) b->grad[p * cb + c] += n.grad[p * cy + ca + c];
    }
  });
}

// Patch <-> batch rearrangements; exact bijections, so each op's backward is
// its inverse applied to the gradient.
inline Var to_patches(const Var& x, int k) {
  if (k == 1) return x;
  Tensor y = patching::batch_split(x->value, k);
  return make_op(std::move(y), {x}, [k](Node& n) {
    Var& p = n.parents[0];
    p->ensure_grad();
    Tensor g = patching::batch_reassemble(n.grad, k);
    p->grad += g;
  });
}

inline Var from_patches(const Var& x, int k) {
  if (k == 1) return x;
  Tensor y = patching::batch_reassemble(x->value, k);
  return make_op(std::move(y), {x}, [k](Node& n) {
    Var& p = n.parents[0];
    p->ensure_grad();
    Tensor g = patching::batch_split(n.grad, k);
    p->grad += g;
  });
}

inline Var softmax_channels(const Var& x) {
  const Shape s = x->value.shape();
  Tensor y(s);
  const std::size_t positions = static_cast<std::size_t>(s.n) * s.h * s.w;
  for (std::size_t p = 0; p < positions; ++p) {
    real mx = x->value[p * s.c];
    for (int c = 1; c < s.c; ++c) mx = std::max(mx, x->value[p * s.c + c]);
    real z = 0.0;
    for (int c = 0; c < s.c; ++c) {
      const real e = std::exp(x->value[p * s.c + c] - mx);
      y[p * s.c + c] = e;
      z += e;
    }
    for (int c = 0; c < s.c; ++c) y[p * s.c + c] /= z;
  }
  return make_op(std::move(y), {x}, [positions, cc = s.c](Node& n) {
    Var& p = n.parents[0];
    p->ensure_grad();
    for (std::size_t pos = 0; pos < positions; ++pos) {
      real dot = 0.0;
      for (int c = 0; c < cc; ++c) dot += n.grad[pos * cc + c] * n.value[pos * cc + c];
      for (int c = 0; c < cc; ++c)
        p->grad[pos * cc + c] += n.value[pos * cc + c] * (n.grad[pos * cc + c] - dot);
    }
  });
}

inline Var mean_all(const Var& x) {
  Tensor y(1, 1, 1, 1);
  y[0] = x->value.mean();
  return make_op(std::move(y), {x}, [](Node& n) {
    Var& p = n.parents[0];
    p->ensure_grad();
    const real g = n.grad[0] / static_cast<real>(p->value.size());
    for (std::size_t j = 0; j < p->grad.size(); ++j) p->grad[j] += g;
  });
}

inline Var sum_all(const Var& x) {
  Tensor y(1, 1, 1, 1);
  y[0] = x->value.sum();
  return make_op(std::move(y), {x}, [](Node& n) {
    Var& p = n.parents[0];
    p->ensure_grad();
    const real g = n.grad[0];
    for (std::size_t j = 0; j < p->grad.size(); ++j) p->grad[j] += g;
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  const int out = (in + 2 * pad - kernel) / stride + 1;
  if (out <= 0)
    throw ShapeError("conv: non-positive output dim for input " + std::to_string(in));
  return out;
}

namespace detail {

// Gather the (kh*kw*cin)-wide rows for one sample into `cols`.
inline void im2col(const Tensor& x, int sample, int kh, int kw, int stride, int pad, int ho,
                   int wo, real* cols) {
  const int cin = x.c();
  const int row_len = kh * kw * cin;
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      real* row = cols + (static_cast<std::size_t>(oy) * wo + ox) * row_len;
      for (int dy = 0; dy < kh; ++dy) {
        const int iy = oy * stride - pad + dy;
        for (int dx = 0; dx < kw; ++dx) {
          const int ix = ox * stride - pad + dx;
          real* dst = row + (dy * kw + dx) * cin;
          if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) {
            std::fill(dst, dst + cin, 0.0);
          } else {
            const real* src = x.data() +
                (((static_cast<std::size_t>(sample) * x.h() + iy) * x.w() + ix) * cin);
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
}

inline void col2im_add(Tensor& dx, int sample, int kh, int kw, int stride, int pad, int ho,
                       int wo, const real* cols) {
  const int cin = dx.c();
  const int row_len = kh * kw * cin;
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      const real* row = cols + (static_cast<std::size_t>(oy) * wo + ox) * row_len;
      for (int dy = 0; dy < kh; ++dy) {
        const int iy = oy * stride - pad + dy;
        if (iy < 0 || iy >= dx.h()) continue;
        for (int dx_ = 0; dx_ < kw; ++dx_) {
          const int ix = ox * stride - pad + dx_;
          if (ix < 0 || ix >= dx.w()) continue;
          real* dst = dx.data() +
              (((static_cast<std::size_t>(sample) * dx.h() + iy) * dx.w() + ix) * cin);
          const real* src = row + (dy * kw + dx_) * cin;
          for (int c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
}

}  // namespace detail

// x: [n, h, w, cin], w: (kh, kw, cin, cout) stored on Shape{kh, kw, cin, cout},
// b: [1,1,1,cout]. Same-padding is the caller's responsibility via `pad`.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Shape xs = x->value.shape();
  const int kh = w->value.n(), kw = w->value.h(), cin = w->value.w(), cout = w->value.c();
  if (xs.c != cin)
    throw ShapeError("conv2d: input channels " + std::to_string(xs.c) + " != weight cin " +
                     std::to_string(cin));
  if (b->value.size() != static_cast<std::size_t>(cout)) throw ShapeError("conv2d: bad bias");
  const int ho = conv_out_dim(xs.h, kh, stride, pad);
  const int wo = conv_out_dim(xs.w, kw, stride, pad);
  Tensor y(xs.n, ho, wo, cout);
  const int row_len = kh * kw * cin;
  const std::size_t rows = static_cast<std::size_t>(ho) * wo;

  parallel_ranges(xs.n, [&](std::size_t begin, std::size_t end, int) {
    std::vector<real> cols(rows * row_len);
    CMapM wm(w->value.data(), row_len, cout);
    for (std::size_t s = begin; s < end; ++s) {
      detail::im2col(x->value, static_cast<int>(s), kh, kw, stride, pad, ho, wo, cols.data());
      CMapM am(cols.data(), rows, row_len);
      MapM ym(y.data() + s * rows * cout, rows, cout);
      ym.noalias() = am * wm;
      for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < cout; ++c) ym(r, c) += b->value[c];
    }
  });

  return make_op(std::move(y), {x, w, b},
                 [kh, kw, cin, cout, stride, pad, ho, wo, row_len, rows](Node& n) {
    Var& x = n.parents[0];
    Var& w = n.parents[1];
    Var& b = n.parents[2];
    const int ns = x->value.n();
    const bool need_dx = x->requires_grad;
    const bool need_dw = w->requires_grad;
    const bool need_db = b->requires_grad;
    if (need_dx) x->ensure_grad();

    // Per-sample weight/bias partials keep the reduction order independent
    // of the worker partition.
    std::vector<Tensor> dw_parts(need_dw ? ns : 0);
    std::vector<Tensor> db_parts(need_db ? ns : 0);

    parallel_ranges(ns, [&](std::size_t begin, std::size_t end, int) {
      std::vector<real> cols(rows * row_len);
      std::vector<real> dcols(need_dx ? rows * row_len : 0);
      CMapM wm(w->value.data(), row_len, cout);
      for (std::size_t s = begin; s < end; ++s) {
        CMapM gm(n.grad.data() + s * rows * cout, rows, cout);
        if (need_dw || need_dx)
          detail::im2col(x->value, static_cast<int>(s), kh, kw, stride, pad, ho, wo, cols.data());
        if (need_dw) {
          dw_parts[s] = Tensor(w->value.shape());
          CMapM am(cols.data(), rows, row_len);
          MapM dwm(dw_parts[s].data(), row_len, cout);
          dwm.noalias() = am.transpose() * gm;
        }
        if (need_db) {
          db_parts[s] = Tensor(b->value.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (int c = 0; c < cout; ++c) db_parts[s][c] += gm(r, c);
        }
        if (need_dx) {
          MapM dcm(dcols.data(), rows, row_len);
          dcm.noalias() = gm * wm.transpose();
          detail::col2im_add(x->grad, static_cast<int>(s), kh, kw, stride, pad, ho, wo,
                             dcols.data());
        }
      }
    });

    if (need_dw) {
      w->ensure_grad();
      for (int s = 0; s < ns; ++s) w->grad += dw_parts[s];
    }
    if (need_db) {
      b->ensure_grad();
      for (int s = 0; s < ns; ++s) b->grad += db_parts[s];
    }
  });
}

// Exact 2x upsampling: 2x2 kernel, stride 2, no overlap. w on Shape{2, 2, cin, cout}.
inline Var conv_transpose2d_2x(const Var& x, const Var& w, const Var& b) {
  const Shape xs = x->value.shape();
  const int cin = w->value.w(), cout = w->value.c();
  if (w->value.n() != 2 || w->value.h() != 2)
    throw ShapeError("conv_transpose2d_2x: kernel must be 2x2");
  if (xs.c != cin) throw ShapeError("conv_transpose2d_2x: channel mismatch");
  Tensor y(xs.n, xs.h * 2, xs.w * 2, cout);
  const std::size_t in_rows = static_cast<std::size_t>(xs.h) * xs.w;

  parallel_ranges(xs.n, [&](std::size_t begin, std::size_t end, int) {
    std::vector<real> sub(in_rows * cout);
    for (std::size_t s = begin; s < end; ++s) {
      CMapM xm(x->value.data() + s * in_rows * cin, in_rows, cin);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          CMapM wm(w->value.data() + static_cast<std::size_t>(dy * 2 + dx) * cin * cout, cin,
                   cout);
          MapM sm(sub.data(), in_rows, cout);
          sm.noalias() = xm * wm;
          for (int iy = 0; iy < xs.h; ++iy)
            for (int ix = 0; ix < xs.w; ++ix) {
              real* dst = y.data() +
                  (((s * y.h() + (2 * iy + dy)) * y.w() + (2 * ix + dx)) * cout);
              const real* src = sub.data() + (static_cast<std::size_t>(iy) * xs.w + ix) * cout;
              for (int c = 0; c < cout; ++c) dst[c] = src[c] + b->value[c];
            }
        }
    }
  });

  return make_op(std::move(y), {x, w, b}, [cin, cout, in_rows](Node& n) {
    Var& x = n.parents[0];
    Var& w = n.parents[1];
    Var& b = n.parents[2];
    const Shape xs = x->value.shape();
    const int ns = xs.n;
    const bool need_dx = x->requires_grad;
    const bool need_dw = w->requires_grad;
    const bool need_db = b->requires_grad;
    if (need_dx) x->ensure_grad();
    std::vector<Tensor> dw_parts(need_dw ? ns : 0);
    std::vector<Tensor> db_parts(need_db ? ns : 0);

    parallel_ranges(ns, [&](std::size_t begin, std::size_t end, int) {
      std::vector<real> gsub(in_rows * cout);
      for (std::size_t s = begin; s < end; ++s) {
        if (need_dw) dw_parts[s] = Tensor(w->value.shape());
        if (need_db) db_parts[s] = Tensor(b->value.shape());
        CMapM xm(x->value.data() + s * in_rows * cin, in_rows, cin);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            for (int iy = 0; iy < xs.h; ++iy)
              for (int ix = 0; ix < xs.w; ++ix) {
                const real* src = n.grad.data() +
                    (((s * n.value.h() + (2 * iy + dy)) * n.value.w() + (2 * ix + dx)) * cout);
                real* dst = gsub.data() + (static_cast<std::size_t>(iy) * xs.w + ix) * cout;
                std::copy(src, src + cout, dst);
              }
            CMapM gm(gsub.data(), in_rows, cout);
            if (need_dx) {
              CMapM wm(w->value.data() + static_cast<std::size_t>(dy * 2 + dx) * cin * cout,
                       cin, cout);
              MapM dxm(x->grad.data() + s * in_rows * cin, in_rows, cin);
              dxm.noalias() += gm * wm.transpose();
            }
            if (need_dw) {
              MapM dwm(dw_parts[s].data() + static_cast<std::size_t>(dy * 2 + dx) * cin * cout,
                       cin, cout);
              dwm.noalias() = xm.transpose() * gm;
            }
            if (need_db) {
              for (std::size_t r = 0; r < in_rows; ++r)
                for (int c = 0; c < cout; ++c) db_parts[s][c] += gm(r, c);
            }
          }
      }
    });

    if (need_dw) {
      w->ensure_grad();
      for (int s = 0; s < ns; ++s) w->grad += dw_parts[s];
    }
    if (need_db) {
      b->ensure_grad();
      for (int s = 0; s < ns; ++s) b->grad += db_parts[s];
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Normalizes over (n, h, w) per channel. In training mode batch statistics
// are used and running stats are updated in place (biased variance
// throughout). In eval mode the stored running stats are used.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                      Tensor& running_var, bool training, real momentum = 0.1,
                      real eps = 1e-5) {
  const Shape xs = x->value.shape();
  const int cc = xs.c;
  if (gamma->value.size() != static_cast<std::size_t>(cc) ||
      beta->value.size() != static_cast<std::size_t>(cc))
    throw ShapeError("batch_norm: parameter size mismatch");
  const std::size_t positions = static_cast<std::size_t>(xs.n) * xs.h * xs.w;
  if (positions == 0) throw ShapeError("batch_norm: empty input");

  std::vector<real> mean(cc, 0.0), var(cc, 0.0);
  if (training) {
    for (std::size_t p = 0; p < positions; ++p)
      for (int c = 0; c < cc; ++c) mean[c] += x->value[p * cc + c];
    for (int c = 0; c < cc; ++c) mean[c] /= static_cast<real>(positions);
    for (std::size_t p = 0; p < positions; ++p)
      for (int c = 0; c < cc; ++c) {
        const real d = x->value[p * cc + c] - mean[c];
        var[c] += d * d;
      }
    for (int c = 0; c < cc; ++c) var[c] /= static_cast<real>(positions);
    for (int c = 0; c < cc; ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
    }
  } else {
    for (int c = 0; c < cc; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }

  std::vector<real> invstd(cc);
  for (int c = 0; c < cc; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);

  Tensor y(xs);
  parallel_ranges(positions, [&](std::size_t b, std::size_t e, int) {
    for (std::size_t p = b; p < e; ++p)
      for (int c = 0; c < cc; ++c)
        y[p * cc + c] =
            gamma->value[c] * (x->value[p * cc + c] - mean[c]) * invstd[c] + beta->value[c];
  });

  return make_op(std::move(y), {x, gamma, beta},
                 [mean, invstd, training, positions, cc](Node& n) {
    Var& x = n.parents[0];
    Var& gamma = n.parents[1];
    Var& beta = n.parents[2];
    const real m = static_cast<real>(positions);

    std::vector<real> sum_dy(cc, 0.0), sum_dy_xhat(cc, 0.0);
    for (std::size_t p = 0; p < positions; ++p)
      for (int c = 0; c < cc; ++c) {
        const real xhat = (x->value[p * cc + c] - mean[c]) * invstd[c];
        sum_dy[c] += n.grad[p * cc + c];
        sum_dy_xhat[c] += n.grad[p * cc + c] * xhat;
      }
    if (gamma->requires_grad) {
      gamma->ensure_grad();
      for (int c = 0; c < cc; ++c) gamma->grad[c] += sum_dy_xhat[c];
    }
    if (beta->requires_grad) {
      beta->ensure_grad();
      for (int c = 0; c < cc; ++c) beta->grad[c] += sum_dy[c];
    }
    if (x->requires_grad) {
      x->ensure_grad();
      if (training) {
        parallel_ranges(positions, [&](std::size_t b, std::size_t e, int) {
          for (std::size_t p = b; p < e; ++p)
            for (int c = 0; c < cc; ++c) {
              const real xhat = (x->value[p * cc + c] - mean[c]) * invstd[c];
              x->grad[p * cc + c] += gamma->value[c] * invstd[c] / m *
                  (m * n.grad[p * cc + c] - sum_dy[c] - xhat * sum_dy_xhat[c]);
            }
        });
      } else {
        parallel_ranges(positions, [&](std::size_t b, std::size_t e, int) {
          for (std::size_t p = b; p < e; ++p)
            for (int c = 0; c < cc; ++c)
              x->grad[p * cc + c] += gamma->value[c] * invstd[c] * n.grad[p * cc + c];
        });
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Similarity / loss ops
// ---------------------------------------------------------------------------

inline constexpr real kNormFloor = 1e-8;

namespace detail {

// cos between the channel vectors at one position, with clamped norms.
inline real cosine_at(const real* t, const real* s, int c, real& nt, real& ns, real& dot) {
  dot = 0.0;
  real t2 = 0.0, s2 = 0.0;
  for (int i = 0; i < c; ++i) {
    dot += t[i] * s[i];
    t2 += t[i] * t[i];
    s2 += s[i] * s[i];
  }
  nt = std::max(std::sqrt(t2), kNormFloor);
  ns = std::max(std::sqrt(s2), kNormFloor);
  return dot / (nt * ns);
}

// d cos / d t and d cos / d s, scaled by `g`, accumulated into gt / gs.
// The clamp contributes zero derivative through a clamped norm.
inline void cosine_backward_at(const real* t, const real* s, int c, real g, real* gt,
                               real* gs) {
  real nt, ns, dot;
  const real cosv = cosine_at(t, s, c, nt, ns, dot);
  real t2 = 0.0, s2 = 0.0;
  for (int i = 0; i < c; ++i) {
    t2 += t[i] * t[i];
    s2 += s[i] * s[i];
  }
  const bool t_clamped = std::sqrt(t2) < kNormFloor;
  const bool s_clamped = std::sqrt(s2) < kNormFloor;
  for (int i = 0; i < c; ++i) {
    if (gt) {
      real d = s[i] / (nt * ns);
      if (!t_clamped) d -= cosv * t[i] / (nt * nt);
      gt[i] += g * d;
    }
    if (gs) {
      real d = t[i] / (nt * ns);
      if (!s_clamped) d -= cosv * s[i] / (ns * ns);
      gs[i] += g * d;
    }
  }
}

}  // namespace detail

// Per-position channel-wise cosine similarity map, [n,h,w,1].
inline Var cosine_map(const Var& t, const Var& s) {
  t->value.require_same_shape(s->value, "cosine_map");
  const Shape xs = t->value.shape();
  Tensor y(xs.n, xs.h, xs.w, 1);
  const std::size_t positions = static_cast<std::size_t>(xs.n) * xs.h * xs.w;
  for (std::size_t p = 0; p < positions; ++p) {
    real nt, ns, dot;
    y[p] = detail::cosine_at(t->value.data() + p * xs.c, s->value.data() + p * xs.c, xs.c, nt,
                             ns, dot);
  }
  return make_op(std::move(y), {t, s}, [positions, cc = xs.c](Node& n) {
    Var& t = n.parents[0];
    Var& s = n.parents[1];
    if (t->requires_grad) t->ensure_grad();
    if (s->requires_grad) s->ensure_grad();
    for (std::size_t p = 0; p < positions; ++p) {
      detail::cosine_backward_at(t->value.data() + p * cc, s->value.data() + p * cc, cc,
                                 n.grad[p], t->requires_grad ? t->grad.data() + p * cc : nullptr,
                                 s->requires_grad ? s->grad.data() + p * cc : nullptr);
    }
  });
}

// One stage of the distillation loss: mean over positions of
// (1-y) * (1-cos) + y * cos, with y a {0,1} map at feature resolution.
inline Var distill_stage_loss(const Var& t, const Var& s, const Tensor& y01) {
  t->value.require_same_shape(s->value, "distill_stage_loss");
  const Shape xs = t->value.shape();
  if (y01.n() != xs.n || y01.h() != xs.h || y01.w() != xs.w || y01.c() != 1)
    throw ShapeError("distill_stage_loss: label map shape mismatch");
  const std::size_t positions = static_cast<std::size_t>(xs.n) * xs.h * xs.w;
  real acc = 0.0;
  for (std::size_t p = 0; p < positions; ++p) {
    real nt, ns, dot;
    const real cosv = detail::cosine_at(t->value.data() + p * xs.c, s->value.data() + p * xs.c,
                                        xs.c, nt, ns, dot);
    acc += y01[p] > 0.5 ? cosv : (1.0 - cosv);
  }
  Tensor out(1, 1, 1, 1);
  out[0] = acc / static_cast<real>(positions);
  return make_op(std::move(out), {t, s, constant(y01)}, [positions, cc = xs.c](Node& n) {
    Var& t = n.parents[0];
    Var& s = n.parents[1];
    const Tensor& y01 = n.parents[2]->value;
    if (t->requires_grad) t->ensure_grad();
    if (s->requires_grad) s->ensure_grad();
    const real scale = n.grad[0] / static_cast<real>(positions);
    for (std::size_t p = 0; p < positions; ++p) {
      const real g = (y01[p] > 0.5 ? 1.0 : -1.0) * scale;  // d/dcos of the position term
      detail::cosine_backward_at(t->value.data() + p * cc, s->value.data() + p * cc, cc, g,
                                 t->requires_grad ? t->grad.data() + p * cc : nullptr,
                                 s->requires_grad ? s->grad.data() + p * cc : nullptr);
    }
  });
}

inline constexpr real kProbClamp = 1e-7;

// Focal loss over a two-channel probability map (channel 1 = abnormal).
// Mean reduction over pixels; probabilities clamped to [1e-7, 1-1e-7].
inline Var focal_loss_probs(const Var& m, const Tensor& y01, real tau) {
  const Shape ms = m->value.shape();
  if (ms.c != 2) throw ShapeError("focal_loss_probs: expected 2 channels");
  if (y01.n() != ms.n || y01.h() != ms.h || y01.w() != ms.w || y01.c() != 1)
    throw ShapeError("focal_loss_probs: label shape mismatch");
  const std::size_t positions = static_cast<std::size_t>(ms.n) * ms.h * ms.w;
  real acc = 0.0;
  for (std::size_t p = 0; p < positions; ++p) {
    real prob = m->value[p * 2 + 1];
    prob = std::min(std::max(prob, kProbClamp), 1.0 - kProbClamp);
    if (y01[p] > 0.5)
      acc += -std::pow(1.0 - prob, tau) * std::log(prob);
    else
      acc += -std::pow(prob, tau) * std::log(1.0 - prob);
  }
  Tensor out(1, 1, 1, 1);
  out[0] = acc / static_cast<real>(positions);
  return make_op(std::move(out), {m, constant(y01)}, [positions, tau](Node& n) {
    Var& m = n.parents[0];
    const Tensor& y01 = n.parents[1]->value;
    m->ensure_grad();
    const real scale = n.grad[0] / static_cast<real>(positions);
    for (std::size_t p = 0; p < positions; ++p) {
      const real raw = m->value[p * 2 + 1];
      if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;  // clamped: zero grad
      const real prob = raw;
      real d;
      if (y01[p] > 0.5) {
        // d/dp [-(1-p)^tau log p]
        d = (tau > 0.0 ? tau * std::pow(1.0 - prob, tau - 1.0) * std::log(prob) : 0.0) -
            std::pow(1.0 - prob, tau) / prob;
      } else {
        // d/dp [-p^tau log(1-p)]
        d = (tau > 0.0 ? -tau * std::pow(prob, tau - 1.0) * std::log(1.0 - prob) : 0.0) +
            std::pow(prob, tau) / (1.0 - prob);
      }
      m->grad[p * 2 + 1] += scale * d;
    }
  });
}

}  // namespace adps::ag
