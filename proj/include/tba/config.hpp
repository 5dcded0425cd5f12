#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tba/errors.hpp"

namespace tba {

using json = nlohmann::json;

enum class Task { sprites, mnist, duke };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::sprites: return "sprites";
    case Task::mnist: return "mnist";
    case Task::duke: return "duke";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "sprites") return Task::sprites;
  if (s == "mnist") return Task::mnist;
  if (s == "duke") return Task::duke;
  throw ConfigError("task: unknown value '" + s + "' (expected sprites, mnist, duke)");
}

// One block of the feature extractor: convolution (stride 1, same padding),
// adaptive max-pool to (pool_h, pool_w), then ReLU. pool_h == 0 skips the pool.
struct ConvLayerSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int out_channels = 1;
  int pool_h = 0;
  int pool_w = 0;
  bool relu = true;
};

struct RatFlags {
  bool act = true;
  bool attention = true;
  bool memory_write = true;
  bool reprioritize = true;
};

struct ModelConfig {
  Task task = Task::sprites;
  int height = 128;  // H
  int width = 128;   // W
  int channels = 3;  // D
  int mem_h = 8;     // M
  int mem_w = 8;     // N
  int mem_s = 20;    // S
  int patch_h = 21;  // U
  int patch_w = 21;  // V
  int state_size = 80;  // R
  int trackers = 4;     // I
  int layers = 3;       // K
  double eta_x = 0.2;
  double eta_y = 0.2;
  double temperature = 1.0;
  bool fixed_shape = false;
  bool clamp_reconstruction = false;
  std::vector<ConvLayerSpec> conv;
  std::vector<int> head_hidden;
  RatFlags flags;

  bool scale_fixed() const { return eta_x == 0.0 && eta_y == 0.0; }
  int pose_dims() const { return scale_fixed() ? 2 : 4; }
  int layer_dims() const { return layers > 1 ? layers : 0; }
  int shape_dims() const { return fixed_shape ? 0 : patch_h * patch_w; }
  int appearance_dims() const { return patch_h * patch_w * channels; }
  int head_width() const {
    return 1 + layer_dims() + pose_dims() + shape_dims() + appearance_dims();
  }
  // Without attention the memory collapses to a single cell of M*N*S channels.
  int memory_cells() const { return flags.attention ? mem_h * mem_w : 1; }
  int cell_dim() const { return flags.attention ? mem_s : mem_h * mem_w * mem_s; }
  int input_channels() const { return channels + 2; }
};

inline ModelConfig sprites_config() {
  ModelConfig c;
  c.task = Task::sprites;
  c.conv = {{5, 5, 32, 64, 64, true},
            {3, 3, 64, 32, 32, true},
            {1, 1, 128, 16, 16, true},
            {3, 3, 256, 8, 8, true},
            {1, 1, 20, 0, 0, false}};
  c.head_hidden = {80, 377};
  return c;
}

inline ModelConfig mnist_config() {
  ModelConfig c;
  c.task = Task::mnist;
  c.channels = 1;
  c.mem_s = 50;
  c.patch_h = c.patch_w = 28;
  c.state_size = 200;
  c.layers = 1;
  c.eta_x = c.eta_y = 0.0;
  c.fixed_shape = true;
  c.clamp_reconstruction = true;
  c.conv = {{5, 5, 32, 64, 64, true},
            {3, 3, 64, 32, 32, true},
            {1, 1, 128, 16, 16, true},
            {3, 3, 256, 8, 8, true},
            {1, 1, 50, 0, 0, false}};
  c.head_hidden = {200, 397};
  return c;
}

inline ModelConfig duke_config() {
  ModelConfig c;
  c.task = Task::duke;
  c.height = 108;
  c.width = 192;
  c.mem_h = 9;
  c.mem_w = 16;
  c.mem_s = 200;
  c.patch_h = 9;
  c.patch_w = 23;
  c.state_size = 800;
  c.trackers = 10;
  c.layers = 3;
  c.eta_x = c.eta_y = 0.4;
  c.conv = {{5, 5, 32, 108, 192, true},
            {5, 3, 128, 36, 64, true},
            {5, 3, 256, 18, 32, true},
            {3, 1, 512, 9, 16, true},
            {1, 1, 200, 0, 0, false}};
  c.head_hidden = {800, 818};
  return c;
}

inline ModelConfig preset(Task t) {
  switch (t) {
    case Task::sprites: return sprites_config();
    case Task::mnist: return mnist_config();
    case Task::duke: return duke_config();
  }
  return sprites_config();
}

// Ablation names as used on the command line.
inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"TBA",        "TBAc",       "TBAc-noOcc",
                                                 "TBAc-noAtt", "TBAc-noMem", "TBAc-noRep"};
  return names;
}

inline void configure_ablation(ModelConfig& cfg, const std::string& name) {
  cfg.flags = RatFlags{};
  if (name == "TBA") return;
  bool known = false;
  for (const auto& n : ablation_names()) known = known || n == name;
  if (!known) {
    std::string opts;
    for (const auto& n : ablation_names()) opts += (opts.empty() ? "" : ", ") + n;
    throw ConfigError("ablation: unknown name '" + name + "' (options: " + opts + ")");
  }
  cfg.flags.act = false;
  if (name == "TBAc-noOcc") cfg.layers = 1;
  if (name == "TBAc-noAtt") cfg.flags.attention = false;
  if (name == "TBAc-noMem") cfg.flags.memory_write = false;
  if (name == "TBAc-noRep") cfg.flags.reprioritize = false;
}

inline void to_json(json& j, const ConvLayerSpec& l) {
  j = json{{"kernel", {l.kernel_h, l.kernel_w}},
           {"channels", l.out_channels},
           {"pool", {l.pool_h, l.pool_w}},
           {"relu", l.relu}};
}

inline void from_json(const json& j, ConvLayerSpec& l) {
  l.kernel_h = j.at("kernel").at(0);
  l.kernel_w = j.at("kernel").at(1);
  l.out_channels = j.at("channels");
  l.pool_h = j.at("pool").at(0);
  l.pool_w = j.at("pool").at(1);
  l.relu = j.at("relu");
}

inline void to_json(json& j, const RatFlags& f) {
  j = json{{"act", f.act},
           {"attention", f.attention},
           {"memory_write", f.memory_write},
           {"reprioritize", f.reprioritize}};
}

inline void from_json(const json& j, RatFlags& f) {
  f.act = j.at("act");
  f.attention = j.at("attention");
  f.memory_write = j.at("memory_write");
  f.reprioritize = j.at("reprioritize");
}

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"task", to_string(c.task)},
           {"H", c.height},
           {"W", c.width},
           {"D", c.channels},
           {"M", c.mem_h},
           {"N", c.mem_w},
           {"S", c.mem_s},
           {"U", c.patch_h},
           {"V", c.patch_w},
           {"R", c.state_size},
           {"I", c.trackers},
           {"K", c.layers},
           {"eta_x", c.eta_x},
           {"eta_y", c.eta_y},
           {"temperature", c.temperature},
           {"fixed_shape", c.fixed_shape},
           {"clamp_reconstruction", c.clamp_reconstruction},
           {"conv", c.conv},
           {"head_hidden", c.head_hidden},
           {"flags", c.flags}};
}

inline void from_json(const json& j, ModelConfig& c) {
  c.task = parse_task(j.at("task").get<std::string>());
  c.height = j.at("H");
  c.width = j.at("W");
  c.channels = j.at("D");
  c.mem_h = j.at("M");
  c.mem_w = j.at("N");
  c.mem_s = j.at("S");
  c.patch_h = j.at("U");
  c.patch_w = j.at("V");
  c.state_size = j.at("R");
  c.trackers = j.at("I");
  c.layers = j.at("K");
  c.eta_x = j.at("eta_x");
  c.eta_y = j.at("eta_y");
  c.temperature = j.at("temperature");
  c.fixed_shape = j.at("fixed_shape");
  c.clamp_reconstruction = j.at("clamp_reconstruction");
  c.conv = j.at("conv").get<std::vector<ConvLayerSpec>>();
  c.head_hidden = j.at("head_hidden").get<std::vector<int>>();
  c.flags = j.at("flags").get<RatFlags>();
}

inline void validate(const ModelConfig& c) {
  auto need = [](bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw ConfigError("model." + key + ": " + why);
  };
  need(c.height > 0 && c.width > 0, "H", "frame dims must be positive");
  need(c.channels > 0, "D", "must be positive");
  need(c.trackers > 0, "I", "must be positive");
  need(c.layers > 0, "K", "must be positive");
  need(c.state_size > 0, "R", "must be positive");
  need(c.eta_x >= 0 && c.eta_x < 1, "eta_x", "must lie in [0, 1)");
  need(c.eta_y >= 0 && c.eta_y < 1, "eta_y", "must lie in [0, 1)");
  need(c.temperature > 0, "temperature", "must be positive");
  need(!c.conv.empty(), "conv", "needs at least one layer");
  need(c.conv.back().out_channels == c.mem_s, "conv",
       "last layer channels must equal S");
  need(c.head_hidden.size() == 2, "head_hidden", "expects two hidden layer sizes");
}

// Overwrites keys of `base` from `patch`, rejecting keys `base` does not have.
inline void merge_strict(json& base, const json& patch, const std::string& prefix = "") {
  if (!patch.is_object()) throw ConfigError(prefix + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

// Applies "a.b.c=value"; the value is parsed as JSON when possible, else a string.
inline void apply_override(json& base, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "': expected key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &base;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

}  // namespace tba
