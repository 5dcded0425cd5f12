#pragma once

// Fully convolutional feature extractor: frame [D, H, W] plus two coordinate
// channels -> feature memory [M*N, S] (one row per spatial cell).

#include <array>
#include <random>
#include <string>
#include <vector>

#include "tba/config.hpp"
#include "tba/conv.hpp"
#include "tba/nn.hpp"

namespace tba {

// Channel D holds col / (W - 1), channel D + 1 holds row / (H - 1).
template <typename T>
Tensor<T> coordinate_channels(int h, int w) {
  Tensor<T> c({2, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      c.at(0, y, x) = w > 1 ? static_cast<T>(x) / static_cast<T>(w - 1) : T(0);
      c.at(1, y, x) = h > 1 ? static_cast<T>(y) / static_cast<T>(h - 1) : T(0);
    }
  }
  return c;
}

template <typename T>
Tensor<T> append_coordinates(const Tensor<T>& frame) {
  if (frame.rank() != 3) throw std::invalid_argument("append_coordinates: expected [D,H,W]");
  const int d = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
  Tensor<T> out({d + 2, h, w});
  std::copy(frame.data(), frame.data() + frame.size(), out.data());
  const Tensor<T> coords = coordinate_channels<T>(h, w);
  std::copy(coords.data(), coords.data() + coords.size(), out.data() + frame.size());
  return out;
}

template <typename T>
Var<T> append_coordinates(const Var<T>& frame) {
  if (frame.value().rank() != 3) throw std::invalid_argument("append_coordinates: expected [D,H,W]");
  const int d = frame.value().dim(0), h = frame.value().dim(1), w = frame.value().dim(2);
  Tape<T>& tape = *frame.tape;
  Var<T> coords = tape.constant(coordinate_channels<T>(h, w).reshaped({2 * h * w}));
  Var<T> flat = ad::reshape(frame, {d * h * w});
  return ad::reshape(ad::concat(std::vector<Var<T>>{flat, coords}), {d + 2, h, w});
}

struct LayerShape {
  int channels, height, width;
  bool operator==(const LayerShape&) const = default;
};

// Input shape of every block, followed by the output shape.
inline std::vector<LayerShape> feature_layer_shapes(const ModelConfig& cfg) {
  std::vector<LayerShape> shapes{{cfg.input_channels(), cfg.height, cfg.width}};
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const auto& l = cfg.conv[i];
    LayerShape s = shapes.back();
    s.channels = l.out_channels;
    if (l.pool_h > 0) {
      if (l.pool_h > s.height || l.pool_w > s.width) {
        throw ConfigError("features.conv[" + std::to_string(i) + "]: pool output " +
                          std::to_string(l.pool_h) + "x" + std::to_string(l.pool_w) +
                          " exceeds input " + std::to_string(s.height) + "x" +
                          std::to_string(s.width));
      }
      s.height = l.pool_h;
      s.width = l.pool_w;
    }
    shapes.push_back(s);
  }
  const LayerShape& out = shapes.back();
  if (out.height != cfg.mem_h || out.width != cfg.mem_w || out.channels != cfg.mem_s) {
    throw ConfigError("features.conv: output " + std::to_string(out.height) + "x" +
                      std::to_string(out.width) + "x" + std::to_string(out.channels) +
                      " does not match memory [M, N, S]");
  }
  return shapes;
}

// Receptive field (height, width) in input pixels of one output cell. Pools
// must divide their input evenly for the field to be uniform.
inline std::array<int, 2> receptive_field(const ModelConfig& cfg) {
  const auto shapes = feature_layer_shapes(cfg);
  std::array<int, 2> rf{1, 1}, jump{1, 1};
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const auto& l = cfg.conv[i];
    rf[0] += (l.kernel_h - 1) * jump[0];
    rf[1] += (l.kernel_w - 1) * jump[1];
    if (l.pool_h > 0) {
      const int fy = shapes[i].height / l.pool_h, fx = shapes[i].width / l.pool_w;
      rf[0] += (fy - 1) * jump[0];
      rf[1] += (fx - 1) * jump[1];
      jump[0] *= fy;
      jump[1] *= fx;
    }
  }
  return rf;
}

struct PixelWindow {
  int row0, col0, rows, cols;  // may extend past the frame edge
};

// Input window seen by output cell (m, n).
inline PixelWindow receptive_window(const ModelConfig& cfg, int m, int n) {
  const auto shapes = feature_layer_shapes(cfg);
  const auto rf = receptive_field(cfg);
  int start_y = 0, start_x = 0, jump_y = 1, jump_x = 1;
  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const auto& l = cfg.conv[i];
    start_y -= (l.kernel_h - 1) / 2 * jump_y;
    start_x -= (l.kernel_w - 1) / 2 * jump_x;
    if (l.pool_h > 0) {
      jump_y *= shapes[i].height / l.pool_h;
      jump_x *= shapes[i].width / l.pool_w;
    }
  }
  return {start_y + m * jump_y, start_x + n * jump_x, rf[0], rf[1]};
}

template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    shapes_ = feature_layer_shapes(cfg);
    for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
      const auto& l = cfg.conv[i];
      const int cin = shapes_[i].channels;
      const std::string name = "features.conv" + std::to_string(i);
      weights_.emplace_back(name + ".weight", Tensor<T>({l.out_channels, cin, l.kernel_h, l.kernel_w}));
      biases_.emplace_back(name + ".bias", Tensor<T>({l.out_channels}));
      const int fan_in = cin * l.kernel_h * l.kernel_w;
      init_fan_in(weights_.back(), fan_in, rng);
      init_fan_in(biases_.back(), fan_in, rng);
    }
  }

  // Convolution stack over a frame that already carries coordinate channels.
  // Returns the [S, M, N] map. With bind_params == false the weights enter
  // the tape as constants (no parameter gradients are formed).
  Var<T> feature_map(Tape<T>& tape, const Var<T>& input, bool bind_params = true) {
    const Tensor<T>& x = input.value();
    const LayerShape& in = shapes_.front();
    if (x.rank() != 3 || x.dim(0) != in.channels || x.dim(1) != in.height || x.dim(2) != in.width) {
      throw ConfigError("features.conv[0]: expected input " +
                        shape_string({in.channels, in.height, in.width}) + ", got " +
                        shape_string(x.shape()));
    }
    Var<T> h = input;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      const auto& l = cfg_.conv[i];
      Var<T> w = bind_params ? tape.param(weights_[i]) : tape.constant(weights_[i].value);
      Var<T> b = bind_params ? tape.param(biases_[i]) : tape.constant(biases_[i].value);
      h = ad::conv2d(h, w, b);
      if (l.pool_h > 0 && (l.pool_h != shapes_[i].height || l.pool_w != shapes_[i].width)) {
        h = ad::adaptive_max_pool(h, l.pool_h, l.pool_w);
      }
      if (l.relu) h = ad::relu(h);
    }
    return h;
  }

  // Full extractor: raw frame [D, H, W] -> memory [cells, cell_dim] laid out
  // per the attention flag.
  Var<T> extract(Tape<T>& tape, const Var<T>& frame, bool bind_params = true) {
    Var<T> map = feature_map(tape, append_coordinates(frame), bind_params);
    return to_memory(map);
  }

  Var<T> to_memory(const Var<T>& map) const {
    const int s = cfg_.mem_s, mn = cfg_.mem_h * cfg_.mem_w;
    if (!cfg_.flags.attention) return ad::reshape(map, {1, s * mn});
    return ad::transpose(map, s, mn);
  }

  // Value-only forward pass.
  Tensor<T> operator()(const Tensor<T>& frame) {
    Tape<T> tape;
    return extract(tape, tape.constant(frame), false).value();
  }

  const std::vector<LayerShape>& layer_shapes() const { return shapes_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      ps.push_back(&weights_[i]);
      ps.push_back(&biases_[i]);
    }
    return ps;
  }

 private:
  ModelConfig cfg_;
  std::vector<LayerShape> shapes_;
  std::vector<Parameter<T>> weights_;
  std::vector<Parameter<T>> biases_;
};

}  // namespace tba
