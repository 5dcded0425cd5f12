#pragma once

// Parameterless renderer: warp each tracker's shape/appearance patch into the
// frame, gate by confidence into K layers, then composite the layers over
// the background from bottom (k = 1) to top (k = K).
//
// Grid convention: pixel (y, x) has its centre at (y + 0.5, x + 0.5). A patch
// of U x V pixels with scale (sx, sy) covers sy*U rows and sx*V columns,
// centred at (H/2 + ty, W/2 + tx). Output pixels are inverse-mapped into the
// patch and bilinearly sampled with zero padding outside it.

#include <cmath>
#include <vector>

#include "tba/config.hpp"
#include "tba/rat.hpp"

namespace tba {

template <typename T>
struct TransformedObject {
  int row0 = 0, row1 = 0, col0 = 0, col1 = 0;  // footprint, half-open
  Tensor<T> shape;       // [H, W]
  Tensor<T> appearance;  // [D, H, W]
};

template <typename T>
struct Reconstruction {
  std::vector<TransformedObject<T>> objects;  // parallel to the output list
  std::vector<Tensor<T>> layer_sums;          // unclamped mask sums, [H, W]
  std::vector<Tensor<T>> layer_masks;         // L^m_k, [H, W]
  std::vector<Tensor<T>> layer_foregrounds;   // L^f_k, [D, H, W]
  std::vector<Tensor<T>> stages;              // X^(0) .. X^(K), [D, H, W]
  Tensor<T> frame;                            // emitted reconstruction
};

template <typename T>
struct OutputGrad {
  T confidence = T(0);
  std::vector<T> layer;
  std::vector<T> pose;
  Tensor<T> shape;
  Tensor<T> appearance;
};

namespace detail {

struct SampleMap {
  double cy, cx, sy, sx;
  double half_u, half_v;
  double py(int y) const { return (y + 0.5 - cy) / sy + half_u - 0.5; }
  double px(int x) const { return (x + 0.5 - cx) / sx + half_v - 0.5; }
};

inline SampleMap sample_map(const Geometry& g, const ModelConfig& cfg) {
  return {0.5 * cfg.height + g.shift_y, 0.5 * cfg.width + g.shift_x, g.scale_y, g.scale_x,
          0.5 * cfg.patch_h, 0.5 * cfg.patch_w};
}

// Rows/cols whose samples can touch the patch.
inline void footprint(const SampleMap& m, const ModelConfig& cfg, int& r0, int& r1, int& c0, int& c1) {
  const double lo_y = m.cy - m.sy * (m.half_u + 0.5) - 0.5;
  const double hi_y = m.cy + m.sy * (m.half_u + 0.5) - 0.5;
  const double lo_x = m.cx - m.sx * (m.half_v + 0.5) - 0.5;
  const double hi_x = m.cx + m.sx * (m.half_v + 0.5) - 0.5;
  r0 = std::clamp(static_cast<int>(std::floor(lo_y)), 0, cfg.height);
  r1 = std::clamp(static_cast<int>(std::ceil(hi_y)) + 1, 0, cfg.height);
  c0 = std::clamp(static_cast<int>(std::floor(lo_x)), 0, cfg.width);
  c1 = std::clamp(static_cast<int>(std::ceil(hi_x)) + 1, 0, cfg.width);
}

struct Bilinear {
  int y0, x0;
  double fy, fx;
};

inline Bilinear bilinear(double py, double px) {
  const double y0 = std::floor(py), x0 = std::floor(px);
  return {static_cast<int>(y0), static_cast<int>(x0), py - y0, px - x0};
}

template <typename T>
T patch_at(const T* p, int u, int v, int y, int x) {
  return (y >= 0 && y < u && x >= 0 && x < v) ? p[y * v + x] : T(0);
}

template <typename T>
T sample(const T* p, int u, int v, const Bilinear& b) {
  const double a00 = patch_at(p, u, v, b.y0, b.x0), a01 = patch_at(p, u, v, b.y0, b.x0 + 1);
  const double a10 = patch_at(p, u, v, b.y0 + 1, b.x0), a11 = patch_at(p, u, v, b.y0 + 1, b.x0 + 1);
  return static_cast<T>((1 - b.fy) * ((1 - b.fx) * a00 + b.fx * a01) +
                        b.fy * ((1 - b.fx) * a10 + b.fx * a11));
}

}  // namespace detail

template <typename T>
TransformedObject<T> spatial_transform(const Tensor<T>& shape, const Tensor<T>& appearance,
                                       const Geometry& g, const ModelConfig& cfg) {
  const int h = cfg.height, w = cfg.width, d = cfg.channels, u = cfg.patch_h, v = cfg.patch_w;
  if (shape.size() != static_cast<std::size_t>(u * v) ||
      appearance.size() != static_cast<std::size_t>(d * u * v)) {
    throw std::invalid_argument("spatial_transform: patch size does not match config");
  }
  if (g.scale_x <= 0 || g.scale_y <= 0) throw std::invalid_argument("spatial_transform: scale <= 0");
  TransformedObject<T> o;
  o.shape = Tensor<T>({h, w});
  o.appearance = Tensor<T>({d, h, w});
  const auto m = detail::sample_map(g, cfg);
  detail::footprint(m, cfg, o.row0, o.row1, o.col0, o.col1);
  for (int y = o.row0; y < o.row1; ++y) {
    const double py = m.py(y);
    for (int x = o.col0; x < o.col1; ++x) {
      const auto b = detail::bilinear(py, m.px(x));
      o.shape.at(y, x) = detail::sample(shape.data(), u, v, b);
      for (int c = 0; c < d; ++c) {
        o.appearance.at(c, y, x) = detail::sample(appearance.data() + c * u * v, u, v, b);
      }
    }
  }
  return o;
}

template <typename T>
Reconstruction<T> render(const std::vector<TrackerOutput<T>>& outputs, const Tensor<T>& background,
                         const ModelConfig& cfg) {
  const int h = cfg.height, w = cfg.width, d = cfg.channels, k_layers = cfg.layers;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  if (background.size() != d * hw) throw std::invalid_argument("render: background size mismatch");

  Reconstruction<T> rec;
  for (const auto& o : outputs) {
    if (static_cast<int>(o.layer.size()) != k_layers) {
      throw std::invalid_argument("render: layer vector must have K entries");
    }
    rec.objects.push_back(spatial_transform(o.shape, o.appearance, pose_to_geometry(o.pose, cfg), cfg));
  }

  rec.layer_sums.assign(k_layers, Tensor<T>({h, w}));
  rec.layer_foregrounds.assign(k_layers, Tensor<T>({d, h, w}));
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    const auto& t = rec.objects[i];
    for (int k = 0; k < k_layers; ++k) {
      const T gate = o.confidence * o.layer[k];
      if (gate == T(0)) continue;
      for (int y = t.row0; y < t.row1; ++y) {
        for (int x = t.col0; x < t.col1; ++x) {
          const T a = gate * t.shape.at(y, x);
          rec.layer_sums[k].at(y, x) += a;
          for (int c = 0; c < d; ++c) rec.layer_foregrounds[k].at(c, y, x) += a * t.appearance.at(c, y, x);
        }
      }
    }
  }
  rec.layer_masks.reserve(k_layers);
  for (int k = 0; k < k_layers; ++k) {
    Tensor<T> m = rec.layer_sums[k];
    for (auto& v : m.values()) v = std::min(T(1), v);
    rec.layer_masks.push_back(std::move(m));
  }

  rec.stages.push_back(background.reshaped({d, h, w}));
  for (int k = 0; k < k_layers; ++k) {
    Tensor<T> next({d, h, w});
    const Tensor<T>& prev = rec.stages.back();
    const Tensor<T>& m = rec.layer_masks[k];
    const Tensor<T>& f = rec.layer_foregrounds[k];
    for (int c = 0; c < d; ++c) {
      for (std::size_t p = 0; p < hw; ++p) {
        next[c * hw + p] = (T(1) - m[p]) * prev[c * hw + p] + f[c * hw + p];
      }
    }
    rec.stages.push_back(std::move(next));
  }
  rec.frame = rec.stages.back();
  if (cfg.clamp_reconstruction) {
    for (auto& v : rec.frame.values()) v = std::clamp(v, T(0), T(1));
  }
  return rec;
}

// Gradient of a scalar loss with respect to each output tuple, given the
// gradient with respect to the emitted frame.
template <typename T>
std::vector<OutputGrad<T>> render_backward(const std::vector<TrackerOutput<T>>& outputs,
                                           const Reconstruction<T>& rec, const Tensor<T>& grad_frame,
                                           const ModelConfig& cfg) {
  const int h = cfg.height, w = cfg.width, d = cfg.channels, k_layers = cfg.layers;
  const int u = cfg.patch_h, v = cfg.patch_w;
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  Tensor<T> g = grad_frame;
  if (cfg.clamp_reconstruction) {
    const Tensor<T>& raw = rec.stages.back();
    for (std::size_t p = 0; p < g.size(); ++p) {
      if (raw[p] < T(0) || raw[p] > T(1)) g[p] = T(0);
    }
  }
  std::vector<Tensor<T>> g_fg(k_layers), g_sum(k_layers);
  for (int k = k_layers - 1; k >= 0; --k) {
    g_fg[k] = g;
    Tensor<T> gm({h, w});
    const Tensor<T>& prev = rec.stages[k];
    const Tensor<T>& m = rec.layer_masks[k];
    for (int c = 0; c < d; ++c) {
      for (std::size_t p = 0; p < hw; ++p) {
        gm[p] -= g[c * hw + p] * prev[c * hw + p];
        g[c * hw + p] *= T(1) - m[p];
      }
    }
    const Tensor<T>& s = rec.layer_sums[k];
    for (std::size_t p = 0; p < hw; ++p) {
      if (!(s[p] < T(1))) gm[p] = T(0);
    }
    g_sum[k] = std::move(gm);
  }

  std::vector<OutputGrad<T>> grads(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    const auto& t = rec.objects[i];
    OutputGrad<T>& og = grads[i];
    og.layer.assign(k_layers, T(0));
    og.pose.assign(o.pose.size(), T(0));
    og.shape = Tensor<T>({u, v});
    og.appearance = Tensor<T>({d, u, v});

    const Geometry geo = pose_to_geometry(o.pose, cfg);
    const auto m = detail::sample_map(geo, cfg);
    double d_cy = 0, d_cx = 0, d_sy = 0, d_sx = 0;
    double d_conf = 0;
    std::vector<double> d_layer(k_layers, 0.0);

    for (int y = t.row0; y < t.row1; ++y) {
      const double py = m.py(y);
      for (int x = t.col0; x < t.col1; ++x) {
        const double ts = t.shape.at(y, x);
        const double a = o.confidence * ts;
        // dL/dA and dL/dT^a at this pixel
        double g_a = 0;
        std::vector<double> g_ta(d, 0.0);
        for (int k = 0; k < k_layers; ++k) {
          double gk = g_sum[k].at(y, x);
          double lk_contrib = gk * a;
          for (int c = 0; c < d; ++c) {
            const double gf = g_fg[k].at(c, y, x);
            gk += gf * t.appearance.at(c, y, x);
            lk_contrib += gf * a * t.appearance.at(c, y, x);
            g_ta[c] += o.layer[k] * gf * a;
          }
          d_layer[k] += lk_contrib;
          g_a += o.layer[k] * gk;
        }
        if (g_a == 0 && std::all_of(g_ta.begin(), g_ta.end(), [](double z) { return z == 0; })) continue;
        d_conf += g_a * ts;
        const double g_ts = g_a * o.confidence;

        // Bilinear backward to patch values and sampling coordinates.
        const double px = m.px(x);
        const auto b = detail::bilinear(py, px);
        const int ny[4] = {b.y0, b.y0, b.y0 + 1, b.y0 + 1};
        const int nx[4] = {b.x0, b.x0 + 1, b.x0, b.x0 + 1};
        const double wgt[4] = {(1 - b.fy) * (1 - b.fx), (1 - b.fy) * b.fx, b.fy * (1 - b.fx), b.fy * b.fx};
        const double dwy[4] = {-(1 - b.fx), -b.fx, (1 - b.fx), b.fx};
        const double dwx[4] = {-(1 - b.fy), (1 - b.fy), -b.fy, b.fy};
        double d_py = 0, d_px = 0;
        for (int n = 0; n < 4; ++n) {
          if (ny[n] < 0 || ny[n] >= u || nx[n] < 0 || nx[n] >= v) continue;
          const int idx = ny[n] * v + nx[n];
          const double ps = o.shape[idx];
          og.shape[idx] += static_cast<T>(g_ts * wgt[n]);
          d_py += g_ts * dwy[n] * ps;
          d_px += g_ts * dwx[n] * ps;
          for (int c = 0; c < d; ++c) {
            const double pa = o.appearance[c * u * v + idx];
            og.appearance[c * u * v + idx] += static_cast<T>(g_ta[c] * wgt[n]);
            d_py += g_ta[c] * dwy[n] * pa;
            d_px += g_ta[c] * dwx[n] * pa;
          }
        }
        d_cy += -d_py / m.sy;
        d_sy += -d_py * (y + 0.5 - m.cy) / (m.sy * m.sy);
        d_cx += -d_px / m.sx;
        d_sx += -d_px * (x + 0.5 - m.cx) / (m.sx * m.sx);
      }
    }
    og.confidence = static_cast<T>(d_conf);
    for (int k = 0; k < k_layers; ++k) og.layer[k] = static_cast<T>(d_layer[k]);
    if (o.pose.size() == 4) {
      og.pose[0] = static_cast<T>(d_sx * cfg.eta_x);
      og.pose[1] = static_cast<T>(d_sy * cfg.eta_y);
      og.pose[2] = static_cast<T>(d_cx * 0.5 * w);
      og.pose[3] = static_cast<T>(d_cy * 0.5 * h);
    } else {
      og.pose[0] = static_cast<T>(d_cx * 0.5 * w);
      og.pose[1] = static_cast<T>(d_cy * 0.5 * h);
    }
  }
  return grads;
}

}  // namespace tba
