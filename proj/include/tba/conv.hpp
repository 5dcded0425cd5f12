#pragma once

// Convolution and pooling ops for channels-first [C, H, W] tensors.

#include <limits>

#include "tba/autodiff.hpp"

namespace tba::ad {

namespace detail {

template <typename T>
void im2col(const T* x, int channels, int h, int w, int kh, int kw, T* cols) {
  const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* row = cols + (static_cast<std::size_t>(c * kh + i) * kw + j) * hw;
        const int dy = i - ph, dx = j - pw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          T* dst = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * h + sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          std::fill(dst, dst + x0, T(0));
          std::copy(src + x0 + dx, src + x1 + dx, dst + x0);
          std::fill(dst + x1, dst + w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int channels, int h, int w, int kh, int kw, T* x) {
  const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const T* row = cols + (static_cast<std::size_t>(c * kh + i) * kw + j) * hw;
        const int dy = i - ph, dx = j - pw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* src = row + static_cast<std::size_t>(y) * w;
          T* dst = x + (static_cast<std::size_t>(c) * h + sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int xx = x0; xx < x1; ++xx) dst[xx + dx] += src[xx];
        }
      }
    }
  }
}

}  // namespace detail

// Stride-1 "same" convolution. x: [Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(xv.rank() == 3 && wv.rank() == 4, "conv2d: expected [C,H,W] input and 4-d kernel");
  const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != cin) {
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(wv.dim(1)) +
                                " input channels, got " + std::to_string(cin));
  }
  const int k = cin * kh * kw;
  const int hw = h * wd;

  auto cols = std::make_shared<Tensor<T>>(std::vector<int>{k, hw});
  detail::im2col(xv.data(), cin, h, wd, kh, kw, cols->data());

  Tensor<T> out({cout, h, wd});
  auto om = mat(out, cout, hw);
  om.noalias() = mat(wv, cout, k) * mat(*cols, k, hw);
  om.colwise() += vec(b.value());

  Tape<T>& tape = *x.tape;
  const bool g = any_grad(x, w, b);
  if (!g) cols.reset();
  const int xi = x.id, wi = w.id, bi = b.id;
  return tape.push(std::move(out), g,
                   [xi, wi, bi, cols, cin, h, wd, cout, kh, kw, k, hw](Tape<T>& t, int self) {
                     auto gy = mat(t.grad(self), cout, hw);
                     if (t.needs_grad(wi)) {
                       mat(t.grad(wi), cout, k).noalias() += gy * mat(*cols, k, hw).transpose();
                     }
                     if (t.needs_grad(bi)) vec(t.grad(bi)) += gy.rowwise().sum();
                     if (t.needs_grad(xi)) {
                       Tensor<T> gcols({k, hw});
                       mat(gcols, k, hw).noalias() = mat(t.value(wi), cout, k).transpose() * gy;
                       detail::col2im(gcols.data(), cin, h, wd, kh, kw, t.grad(xi).data());
                     }
                   });
}

// Window of output index i when pooling `in` cells down to `out` cells.
inline std::pair<int, int> adaptive_window(int i, int in, int out) {
  const int start = (i * in) / out;
  const int end = ((i + 1) * in + out - 1) / out;
  return {start, end};
}

template <typename T>
Var<T> adaptive_max_pool(const Var<T>& x, int out_h, int out_w) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "adaptive_max_pool: expected [C,H,W]");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(out_h > 0 && out_w > 0 && out_h <= h && out_w <= w,
          "adaptive_max_pool: output must not exceed input");
  Tensor<T> out({c, out_h, out_w});
  auto argmax = std::make_shared<std::vector<int>>(out.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = adaptive_window(oy, h, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = adaptive_window(ox, w, out_w);
        T best = -std::numeric_limits<T>::infinity();
        int best_i = -1;
        for (int y = y0; y < y1; ++y) {
          for (int xx = x0; xx < x1; ++xx) {
            const int idx = (ch * h + y) * w + xx;
            if (xv[idx] > best) {
              best = xv[idx];
              best_i = idx;
            }
          }
        }
        const int o = (ch * out_h + oy) * out_w + ox;
        out[o] = best;
        (*argmax)[o] = best_i;
      }
    }
  }
  const int xi = x.id;
  return x.tape->push(std::move(out), any_grad(x), [xi, argmax](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
  });
}

// [rows, cols] -> [cols, rows]; used to turn a [S, M*N] feature map into
// per-cell rows.
template <typename T>
Var<T> transpose(const Var<T>& x, int rows, int cols) {
  require(static_cast<int>(x.size()) == rows * cols, "transpose: size mismatch");
  Tensor<T> out({cols, rows});
  mat(out, cols, rows) = mat(x.value(), rows, cols).transpose();
  const int xi = x.id;
  return x.tape->push(std::move(out), any_grad(x), [xi, rows, cols](Tape<T>& t, int self) {
    mat(t.grad(xi), rows, cols) += mat(t.grad(self), cols, rows).transpose();
  });
}

}  // namespace tba::ad
