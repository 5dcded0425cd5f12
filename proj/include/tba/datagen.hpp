#pragma once

// Synthetic multi-object video generators (sprites and moving digits) with
// exact ground truth.
//
// Each split is a set of continuous streams; a stream is cut into
// consecutive sequences of seq_len frames, so tracker state can be carried
// from one sequence into the next. Objects spawn fully outside the frame,
// cross it on a straight line at constant velocity and leave, so every
// object appears and disappears once. An object is counted as present while
// its centre lies inside the frame.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tba/config.hpp"
#include "tba/errors.hpp"
#include "tba/image_io.hpp"
#include "tba/renderer.hpp"

namespace tba::datagen {

namespace fs = std::filesystem;

inline constexpr const char* kGeneratorVersion = "tba-datagen-1";

enum class SpriteShape { circle, triangle, rectangle, diamond };
enum class SpriteColor { red, green, blue, yellow, magenta, cyan };

inline const char* name_of(SpriteShape s) {
  static const char* n[] = {"circle", "triangle", "rectangle", "diamond"};
  return n[static_cast<int>(s)];
}
inline const char* name_of(SpriteColor c) {
  static const char* n[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  return n[static_cast<int>(c)];
}

struct DataConfig {
  Task task = Task::sprites;
  int num_frames = 20000;
  std::uint64_t seed = 0;
  int seq_len = 20;
  int chunks_per_stream = 10;
  int max_objects = 3;
  double spawn_prob = 0.05;
  double speed_min = 1.0;
  double speed_max = 4.0;
  double scale_min = 0.8;
  double scale_max = 1.2;
  int warmup = 100;
  std::string digit_source;
};

inline void to_json(json& j, const DataConfig& c) {
  j = json{{"task", to_string(c.task)},         {"num_frames", c.num_frames},
           {"seed", c.seed},                    {"seq_len", c.seq_len},
           {"chunks_per_stream", c.chunks_per_stream}, {"max_objects", c.max_objects},
           {"spawn_prob", c.spawn_prob},        {"speed_min", c.speed_min},
           {"speed_max", c.speed_max},          {"scale_min", c.scale_min},
           {"scale_max", c.scale_max},          {"warmup", c.warmup},
           {"digit_source", c.digit_source}};
}

inline void from_json(const json& j, DataConfig& c) {
  c.task = parse_task(j.at("task").get<std::string>());
  c.num_frames = j.at("num_frames");
  c.seed = j.at("seed");
  c.seq_len = j.at("seq_len");
  c.chunks_per_stream = j.at("chunks_per_stream");
  c.max_objects = j.at("max_objects");
  c.spawn_prob = j.at("spawn_prob");
  c.speed_min = j.at("speed_min");
  c.speed_max = j.at("speed_max");
  c.scale_min = j.at("scale_min");
  c.scale_max = j.at("scale_max");
  c.warmup = j.at("warmup");
  c.digit_source = j.at("digit_source");
}

inline void validate(const DataConfig& c) {
  auto need = [](bool ok, const char* key, const std::string& why) {
    if (!ok) throw ConfigError(std::string("data.") + key + ": " + why);
  };
  need(c.task != Task::duke, "task", "only sprites and mnist can be generated");
  need(c.num_frames > 0, "num_frames", "must be positive");
  need(c.seq_len > 0, "seq_len", "must be positive");
  need(c.num_frames >= c.seq_len, "num_frames", "must hold at least one sequence");
  need(c.chunks_per_stream > 0, "chunks_per_stream", "must be positive");
  need(c.max_objects > 0, "max_objects", "must be positive");
  need(c.spawn_prob > 0 && c.spawn_prob <= 1, "spawn_prob", "must lie in (0, 1]");
  need(c.speed_min > 0 && c.speed_max >= c.speed_min, "speed_min", "need 0 < speed_min <= speed_max");
  need(c.scale_min > 0 && c.scale_max >= c.scale_min, "scale_min", "need 0 < scale_min <= scale_max");
  need(c.warmup >= 0, "warmup", "must be non-negative");
}

struct GroundTruthRecord {
  int frame = 0;  // 1-based within its sequence
  int track_id = 0;
  double left = 0, top = 0, width = 0, height = 0;
};

struct SpriteSpec {
  int track_id = 0;
  SpriteShape shape = SpriteShape::circle;
  SpriteColor color = SpriteColor::red;
  int digit_id = -1;
  double scale = 1.0;
  double vx = 0, vy = 0;              // px / frame
  double spawn_x = 0, spawn_y = 0;    // centre at spawn_frame
  int spawn_frame = 0;
  int exit_frame = 0;                 // first frame fully outside after crossing
  int birth_frame = 0, death_frame = 0;  // presence interval [birth, death), stream frames
  int layer_rank = 0;
  Tensor<float> mask;        // [U, V]
  Tensor<float> appearance;  // [D, U, V]

  double center_x(int f) const { return spawn_x + vx * (f - spawn_frame); }
  double center_y(int f) const { return spawn_y + vy * (f - spawn_frame); }
  bool alive(int f) const { return f >= spawn_frame && f < exit_frame; }
  bool present(int f) const { return f >= birth_frame && f < death_frame; }
};

// 28x28 digit patches in [0, 1], read from an IDX3 (MNIST) image file.
class DigitSource {
 public:
  DigitSource() = default;
  explicit DigitSource(const fs::path& idx_file) {
    std::ifstream in(idx_file, std::ios::binary);
    if (!in) throw IoError("digit source not found: " + idx_file.string());
    auto be32 = [&in]() {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
    };
    const std::uint32_t magic = be32();
    const std::uint32_t n = be32(), rows = be32(), cols = be32();
    if (!in || magic != 0x00000803u) throw IoError("digit source is not an IDX3 image file: " + idx_file.string());
    if (rows != 28 || cols != 28) throw IoError("digit source must hold 28x28 images");
    pixels_.resize(static_cast<std::size_t>(n) * 784);
    in.read(reinterpret_cast<char*>(pixels_.data()), static_cast<std::streamsize>(pixels_.size()));
    if (!in || n == 0) throw IoError("digit source truncated: " + idx_file.string());
    count_ = static_cast<int>(n);
  }

  int size() const { return count_; }

  Tensor<float> digit(int i) const {
    Tensor<float> t({1, 28, 28});
    for (int p = 0; p < 784; ++p) t[p] = pixels_[static_cast<std::size_t>(i) * 784 + p] / 255.0f;
    return t;
  }

  static void write_idx(const fs::path& path, const std::vector<std::vector<std::uint8_t>>& digits) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    auto be32 = [&out](std::uint32_t v) {
      const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
      out.write(reinterpret_cast<const char*>(b), 4);
    };
    be32(0x00000803u);
    be32(static_cast<std::uint32_t>(digits.size()));
    be32(28);
    be32(28);
    for (const auto& d : digits) out.write(reinterpret_cast<const char*>(d.data()), 784);
  }

 private:
  std::vector<std::uint8_t> pixels_;
  int count_ = 0;
};

inline Tensor<float> sprite_mask(SpriteShape s, int size = 21) {
  Tensor<float> m({size, size});
  const double c = (size - 1) / 2.0, r = size / 2.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x - c, dy = y - c;
      bool in = false;
      switch (s) {
        case SpriteShape::circle: in = dx * dx + dy * dy <= r * r; break;
        case SpriteShape::triangle: in = std::abs(dx) <= (y + 0.5) / size * r; break;
        case SpriteShape::rectangle: in = true; break;
        case SpriteShape::diamond: in = std::abs(dx) + std::abs(dy) <= r; break;
      }
      m.at(y, x) = in ? 1.0f : 0.0f;
    }
  }
  return m;
}

inline std::array<float, 3> rgb_of(SpriteColor c) {
  switch (c) {
    case SpriteColor::red: return {1, 0, 0};
    case SpriteColor::green: return {0, 1, 0};
    case SpriteColor::blue: return {0, 0, 1};
    case SpriteColor::yellow: return {1, 1, 0};
    case SpriteColor::magenta: return {1, 0, 1};
    case SpriteColor::cyan: return {0, 1, 1};
  }
  return {1, 1, 1};
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline ModelConfig frame_config(Task task) {
  ModelConfig cfg = preset(task);
  cfg.clamp_reconstruction = false;
  return cfg;
}

struct Stream {
  std::vector<Tensor<float>> frames;  // [D, H, W]
  std::vector<SpriteSpec> objects;    // objects present at least once in the stream
  // Per-frame records, frame field = stream frame index (0-based).
  std::vector<GroundTruthRecord> records;
};

inline bool box_outside(double cx, double cy, double half_w, double half_h, int w, int h) {
  return cx + half_w <= 0 || cx - half_w >= w || cy + half_h <= 0 || cy - half_h >= h;
}

inline GroundTruthRecord box_record(const SpriteSpec& o, int f, int patch, int w, int h) {
  const double size = patch * o.scale;
  const double cx = o.center_x(f), cy = o.center_y(f);
  const double l = std::max(0.0, cx - size / 2), r = std::min<double>(w, cx + size / 2);
  const double t = std::max(0.0, cy - size / 2), b = std::min<double>(h, cy + size / 2);
  return {f, o.track_id, l, t, r - l, b - t};
}

// Composites one warped object into `frame`: over-painting for sprites,
// add-then-clamp for digits.
inline void paint(Tensor<float>& frame, const TransformedObject<float>& t, bool additive) {
  const int d = frame.dim(0);
  for (int y = t.row0; y < t.row1; ++y) {
    for (int x = t.col0; x < t.col1; ++x) {
      const float m = t.shape.at(y, x);
      for (int c = 0; c < d; ++c) {
        float& px = frame.at(c, y, x);
        px = additive ? std::min(1.0f, px + m * t.appearance.at(c, y, x)) : (1.0f - m) * px + m * t.appearance.at(c, y, x);
      }
    }
  }
}

// Simulates one stream of `length` frames. Pure function of its arguments.
inline Stream simulate_stream(const DataConfig& dc, int length, std::uint64_t stream_seed, int first_track_id,
                              const DigitSource* digits = nullptr) {
  const ModelConfig fc = frame_config(dc.task);
  const int w = fc.width, h = fc.height, d = fc.channels, patch = fc.patch_h;
  const bool mnist = dc.task == Task::mnist;
  if (mnist && (digits == nullptr || digits->size() == 0)) throw IoError("mnist generation needs a digit source");

  std::mt19937_64 rng(stream_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<SpriteSpec> all;
  int next_rank = 0, next_id = first_track_id;

  for (int f = -dc.warmup; f < length; ++f) {
    int alive = 0;
    for (const auto& o : all) alive += o.alive(f) ? 1 : 0;
    if (alive >= dc.max_objects || unit(rng) >= dc.spawn_prob) continue;

    SpriteSpec o;
    o.track_id = next_id++;
    o.layer_rank = next_rank++;
    o.scale = mnist ? 1.0 : dc.scale_min + (dc.scale_max - dc.scale_min) * unit(rng);
    const double speed = dc.speed_min + (dc.speed_max - dc.speed_min) * unit(rng);
    const double theta = 2.0 * M_PI * unit(rng);
    o.vx = speed * std::cos(theta);
    o.vy = speed * std::sin(theta);
    // Line through a random point of the central region, traced back until
    // the box is fully outside.
    const double px = w * (0.2 + 0.6 * unit(rng)), py = h * (0.2 + 0.6 * unit(rng));
    const double half = 0.5 * patch * o.scale;
    int back = 0;
    while (!box_outside(px - o.vx * back, py - o.vy * back, half, half, w, h)) ++back;
    o.spawn_frame = f;
    o.spawn_x = px - o.vx * back;
    o.spawn_y = py - o.vy * back;
    int g = f + 1;
    while (box_outside(o.center_x(g), o.center_y(g), half, half, w, h)) ++g;
    while (!box_outside(o.center_x(g), o.center_y(g), half, half, w, h)) ++g;
    o.exit_frame = g;
    int b = f;
    while (b < g) {
      const double cx = o.center_x(b), cy = o.center_y(b);
      if (cx >= 0 && cx < w && cy >= 0 && cy < h) break;
      ++b;
    }
    int e = b;
    while (e < g) {
      const double cx = o.center_x(e), cy = o.center_y(e);
      if (!(cx >= 0 && cx < w && cy >= 0 && cy < h)) break;
      ++e;
    }
    o.birth_frame = b;
    o.death_frame = e;

    if (mnist) {
      o.digit_id = static_cast<int>(rng() % static_cast<std::uint64_t>(digits->size()));
      o.appearance = digits->digit(o.digit_id);
      o.mask = Tensor<float>::ones({patch, patch});
    } else {
      o.shape = static_cast<SpriteShape>(rng() % 4);
      o.color = static_cast<SpriteColor>(rng() % 6);
      o.mask = sprite_mask(o.shape, patch);
      o.appearance = Tensor<float>({3, patch, patch});
      const auto rgb = rgb_of(o.color);
      for (int c = 0; c < 3; ++c) {
        for (int p = 0; p < patch * patch; ++p) o.appearance[c * patch * patch + p] = rgb[c];
      }
    }
    all.push_back(std::move(o));
  }

  Stream s;
  s.frames.reserve(length);
  for (int f = 0; f < length; ++f) {
    Tensor<float> frame({d, h, w});
    for (const auto& o : all) {  // spawn order == depth order, newest last (on top)
      if (!o.alive(f)) continue;
      Geometry g;
      g.scale_x = g.scale_y = o.scale;
      g.shift_x = o.center_x(f) - 0.5 * w;
      g.shift_y = o.center_y(f) - 0.5 * h;
      paint(frame, spatial_transform(o.mask, o.appearance, g, fc), mnist);
    }
    s.frames.push_back(std::move(frame));
    for (const auto& o : all) {
      if (o.present(f)) s.records.push_back(box_record(o, f, patch, w, h));
    }
  }
  for (auto& o : all) {
    if (o.death_frame > 0 && o.birth_frame < length && o.birth_frame < o.death_frame) s.objects.push_back(o);
  }
  return s;
}

struct SplitInfo {
  int sequences = 0;
  int streams = 0;
};

struct DatasetManifest {
  std::string generator_version = kGeneratorVersion;
  DataConfig data;
  int height = 0, width = 0, channels = 0;
  std::map<std::string, SplitInfo> splits;  // train, val, test

  int seq_len() const { return data.seq_len; }
};

inline void to_json(json& j, const DatasetManifest& m) {
  json splits = json::object();
  for (const auto& [name, s] : m.splits) splits[name] = {{"sequences", s.sequences}, {"streams", s.streams}};
  j = json{{"generator_version", m.generator_version},
           {"H", m.height},
           {"W", m.width},
           {"D", m.channels},
           {"seq_len", m.data.seq_len},
           {"seed", m.data.seed},
           {"splits", splits},
           {"data", m.data}};
}

inline void from_json(const json& j, DatasetManifest& m) {
  m.generator_version = j.at("generator_version");
  m.height = j.at("H");
  m.width = j.at("W");
  m.channels = j.at("D");
  m.data = j.at("data").get<DataConfig>();
  for (const auto& [name, s] : j.at("splits").items()) {
    m.splits[name] = SplitInfo{s.at("sequences").get<int>(), s.at("streams").get<int>()};
  }
}

inline std::string seq_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seq_%06d", index);
  return buf;
}
inline std::string frame_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05d.png", index);
  return buf;
}

// MOTChallenge lines: frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z. No header.
inline void write_mot_csv(const fs::path& path, const std::vector<GroundTruthRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof(line), "%d,%d,%.3f,%.3f,%.3f,%.3f,1,-1,-1,-1\n", r.frame, r.track_id, r.left,
                  r.top, r.width, r.height);
    out << line;
  }
}

inline void write_objects_csv(const fs::path& path, const std::vector<SpriteSpec>& objects, int first_frame,
                              int seq_len) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,shape,color,digit,scale,vx,vy,spawn_frame,spawn_x,spawn_y,birth_frame,death_frame,layer_rank\n";
  char line[512];
  for (const auto& o : objects) {
    if (o.death_frame <= first_frame || o.birth_frame >= first_frame + seq_len) continue;
    std::snprintf(line, sizeof(line), "%d,%s,%s,%d,%.17g,%.17g,%.17g,%d,%.17g,%.17g,%d,%d,%d\n", o.track_id,
                  name_of(o.shape), name_of(o.color), o.digit_id, o.scale, o.vx, o.vy, o.spawn_frame - first_frame,
                  o.spawn_x, o.spawn_y, o.birth_frame - first_frame, o.death_frame - first_frame, o.layer_rank);
    out << line;
  }
}

inline std::map<std::string, SplitInfo> split_sizes(int sequences, int chunks_per_stream) {
  int val = static_cast<int>(std::lround(0.05 * sequences));
  int test = val;
  if (sequences >= 3) {
    val = std::max(val, 1);
    test = std::max(test, 1);
  }
  const int train = sequences - val - test;
  auto streams = [chunks_per_stream](int n) { return (n + chunks_per_stream - 1) / chunks_per_stream; };
  return {{"train", {train, streams(train)}}, {"val", {val, streams(val)}}, {"test", {test, streams(test)}}};
}

inline DatasetManifest generate(const DataConfig& dc, const fs::path& out_dir) {
  validate(dc);
  std::unique_ptr<DigitSource> digits;
  if (dc.task == Task::mnist) digits = std::make_unique<DigitSource>(dc.digit_source);

  DatasetManifest m;
  m.data = dc;
  const ModelConfig fc = frame_config(dc.task);
  m.height = fc.height;
  m.width = fc.width;
  m.channels = fc.channels;
  m.splits = split_sizes(dc.num_frames / dc.seq_len, dc.chunks_per_stream);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const std::vector<std::string> order = {"train", "val", "test"};
  for (std::size_t si = 0; si < order.size(); ++si) {
    const std::string& split = order[si];
    const SplitInfo info = m.splits[split];
    fs::create_directories(out_dir / split, ec);
    if (ec) throw IoError("cannot create " + (out_dir / split).string());
    for (int stream = 0; stream < info.streams; ++stream) {
      const int first_seq = stream * dc.chunks_per_stream;
      const int chunks = std::min(dc.chunks_per_stream, info.sequences - first_seq);
      const std::uint64_t sseed = mix_seed(mix_seed(dc.seed, si), static_cast<std::uint64_t>(stream));
      const int id_base = stream * 100000 + 1;
      Stream s = simulate_stream(dc, chunks * dc.seq_len, sseed, id_base, digits.get());
      for (int c = 0; c < chunks; ++c) {
        const fs::path dir = out_dir / split / seq_dir_name(first_seq + c);
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string());
        const int f0 = c * dc.seq_len;
        for (int f = 0; f < dc.seq_len; ++f) write_png(dir / frame_file_name(f), s.frames[f0 + f]);
        std::vector<GroundTruthRecord> recs;
        for (const auto& r : s.records) {
          if (r.frame >= f0 && r.frame < f0 + dc.seq_len) {
            GroundTruthRecord local = r;
            local.frame = r.frame - f0 + 1;
            recs.push_back(local);
          }
        }
        write_mot_csv(dir / "gt.csv", recs);
        write_objects_csv(dir / "objects.csv", s.objects, f0, dc.seq_len);
      }
    }
  }
  std::ofstream mf(out_dir / "manifest.json");
  if (!mf) throw IoError("cannot write manifest in " + out_dir.string());
  mf << json(m).dump(2) << "\n";
  return m;
}

inline DatasetManifest generate_sprites_mot(int num_frames, std::uint64_t seed, const fs::path& out_dir,
                                            DataConfig dc = {}) {
  dc.task = Task::sprites;
  dc.num_frames = num_frames;
  dc.seed = seed;
  return generate(dc, out_dir);
}

inline DatasetManifest generate_mnist_mot(int num_frames, const fs::path& digit_source, std::uint64_t seed,
                                          const fs::path& out_dir, DataConfig dc = {}) {
  dc.task = Task::mnist;
  dc.num_frames = num_frames;
  dc.seed = seed;
  dc.digit_source = digit_source.string();
  if (!fs::exists(digit_source)) throw IoError("digit source not found: " + digit_source.string());
  return generate(dc, out_dir);
}

inline DatasetManifest load_manifest(const fs::path& root) {
  const fs::path p = root / "manifest.json";
  std::ifstream in(p);
  if (!in) throw IoError("no manifest at " + p.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError("manifest is not valid JSON: " + p.string());
  DatasetManifest m;
  try {
    m = j.get<DatasetManifest>();
  } catch (const std::exception& e) {
    throw ValidationError("corrupt manifest " + p.string() + ": " + e.what());
  }
  if (m.data.seq_len <= 0 || m.height <= 0 || m.width <= 0 || (m.channels != 1 && m.channels != 3)) {
    throw ValidationError("corrupt manifest " + p.string() + ": bad dimensions");
  }
  for (const char* s : {"train", "val", "test"}) {
    if (!m.splits.count(s)) throw ValidationError(std::string("corrupt manifest: missing split ") + s);
  }
  return m;
}

inline std::vector<SpriteSpec> read_objects_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<SpriteSpec> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 13) throw ValidationError("malformed objects row in " + path.string());
    SpriteSpec o;
    o.track_id = std::stoi(f[0]);
    o.digit_id = std::stoi(f[3]);
    o.scale = std::stod(f[4]);
    o.vx = std::stod(f[5]);
    o.vy = std::stod(f[6]);
    o.spawn_frame = std::stoi(f[7]);
    o.spawn_x = std::stod(f[8]);
    o.spawn_y = std::stod(f[9]);
    o.birth_frame = std::stoi(f[10]);
    o.death_frame = std::stoi(f[11]);
    o.layer_rank = std::stoi(f[12]);
    out.push_back(o);
  }
  return out;
}

// Regenerates every sequence's gt.csv from its object list.
inline int export_ground_truth(const fs::path& root) {
  const DatasetManifest m = load_manifest(root);
  const ModelConfig fc = frame_config(m.data.task);
  int files = 0;
  for (const auto& [split, info] : m.splits) {
    for (int s = 0; s < info.sequences; ++s) {
      const fs::path dir = root / split / seq_dir_name(s);
      if (!fs::exists(dir / "objects.csv")) throw ValidationError("missing object list for " + dir.string());
      std::vector<GroundTruthRecord> recs;
      const auto objects = read_objects_csv(dir / "objects.csv");
      for (int f = 0; f < m.data.seq_len; ++f) {
        for (const auto& o : objects) {
          if (!o.present(f)) continue;
          GroundTruthRecord r = box_record(o, f, fc.patch_h, fc.width, fc.height);
          r.frame = f + 1;
          recs.push_back(r);
        }
      }
      write_mot_csv(dir / "gt.csv", recs);
      ++files;
    }
  }
  return files;
}

}  // namespace tba::datagen
