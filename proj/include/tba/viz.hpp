#pragma once

// Image strips for inspection: per-frame panels (input, reconstruction,
// one tile per tracker), attention heatmaps and renderer stages.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "tba/image_io.hpp"
#include "tba/rat.hpp"
#include "tba/renderer.hpp"

namespace tba::viz {

// Lays images of equal height side by side with a gap of `gap` white pixels.
// Grey images are broadcast to three channels.
inline Tensor<float> hstack(const std::vector<Tensor<float>>& images, int gap = 2) {
  int h = 0, w = 0;
  for (const auto& im : images) {
    h = std::max(h, im.dim(1));
    w += im.dim(2);
  }
  w += gap * std::max<int>(0, static_cast<int>(images.size()) - 1);
  Tensor<float> out({3, h, w});
  out.fill(1.0f);
  int x0 = 0;
  for (const auto& im : images) {
    const int d = im.dim(0);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < im.dim(2); ++x) {
          out.at(c, y, x0 + x) = y < im.dim(1) ? im.at(d == 3 ? c : 0, y, x) : 1.0f;
        }
      }
    }
    x0 += im.dim(2) + gap;
  }
  return out;
}

inline Tensor<float> upscale(const Tensor<float>& im, int factor) {
  const int d = im.dim(0), h = im.dim(1), w = im.dim(2);
  Tensor<float> out({d, h * factor, w * factor});
  for (int c = 0; c < d; ++c) {
    for (int y = 0; y < h * factor; ++y) {
      for (int x = 0; x < w * factor; ++x) out.at(c, y, x) = im.at(c, y / factor, x / factor);
    }
  }
  return out;
}

// Min-max normalisation to [0, 1]; constant maps become zero.
inline Tensor<float> normalized(const Tensor<float>& t) {
  Tensor<float> out = t;
  if (t.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(t.data(), t.data() + t.size());
  const float span = *hi - *lo;
  for (float& v : out.values()) v = span > 0 ? (v - *lo) / span : 0.0f;
  return out;
}

// y^c * (Y^s . Y^a) as a [D, U, V] tile; absent trackers give a blank tile.
inline Tensor<float> tracker_tile(const TrackerOutput<float>* o, const ModelConfig& cfg) {
  Tensor<float> tile({cfg.channels, cfg.patch_h, cfg.patch_w});
  if (o == nullptr) return tile;
  const int uv = cfg.patch_h * cfg.patch_w;
  for (int c = 0; c < cfg.channels; ++c) {
    for (int p = 0; p < uv; ++p) tile[c * uv + p] = o->confidence * o->shape[p] * o->appearance[c * uv + p];
  }
  return tile;
}

// Input | reconstruction | tracker 1 .. I.
inline Tensor<float> frame_panel(const Tensor<float>& input, const Tensor<float>& reconstruction,
                                 const std::vector<TrackerOutput<float>>& outputs, const ModelConfig& cfg) {
  std::vector<Tensor<float>> parts{input, reconstruction};
  const int factor = std::max(1, cfg.height / std::max(cfg.patch_h, 1) / 2);
  for (int i = 0; i < cfg.trackers; ++i) {
    const TrackerOutput<float>* hit = nullptr;
    for (const auto& o : outputs) {
      if (o.tracker == i) hit = &o;
    }
    parts.push_back(upscale(tracker_tile(hit, cfg), factor));
  }
  return hstack(parts);
}

// M x N heatmaps of the channel-mean memory and the attention weights, each
// normalised to [0, 1].
inline std::pair<Tensor<float>, Tensor<float>> attention_maps(const AttentionTraceEntry<float>& e,
                                                                const ModelConfig& cfg) {
  const int cells = e.memory_before.dim(0), s = e.memory_before.dim(1);
  const int mh = cells == cfg.mem_h * cfg.mem_w ? cfg.mem_h : 1;
  const int mw = cells / mh;
  Tensor<float> mem({1, mh, mw}), w({1, mh, mw});
  for (int c = 0; c < cells; ++c) {
    double sum = 0;
    for (int j = 0; j < s; ++j) sum += e.memory_before.at(c, j);
    mem[c] = static_cast<float>(sum / s);
    w[c] = e.weights[c];
  }
  return {normalized(mem), normalized(w)};
}

// T^s, T^a of every object, then L^m_k, L^f_k and X^(k) per layer.
inline Tensor<float> stage_strip(const Reconstruction<float>& rec) {
  std::vector<Tensor<float>> parts;
  for (const auto& o : rec.objects) {
    parts.push_back(o.shape.reshaped({1, o.shape.dim(0), o.shape.dim(1)}));
    parts.push_back(o.appearance);
  }
  for (std::size_t k = 0; k < rec.layer_masks.size(); ++k) {
    const auto& m = rec.layer_masks[k];
    parts.push_back(m.reshaped({1, m.dim(0), m.dim(1)}));
    parts.push_back(rec.layer_foregrounds[k]);
  }
  for (const auto& x : rec.stages) parts.push_back(x);
  return hstack(parts);
}

}  // namespace tba::viz
