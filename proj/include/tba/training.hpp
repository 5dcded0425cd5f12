#pragma once

// Reconstruction loss, the assembled model, Adam, checkpoints and the
// training loop.
//
// A training step processes each batch lane (one subsequence) on its own:
//   1. feature maps C_t of all frames, value only;
//   2. tracker recurrence and rendering on one tape, with C_t as leaves;
//   3. backward through the recurrence, which yields dL/dC_t;
//   4. per frame, the convolution stack is rerun on a short tape seeded with
//      dL/dC_t.
// This keeps at most one frame's convolution activations alive. Tracker
// states flow from one subsequence of a stream into the next as plain
// values, so gradients stop at subsequence boundaries.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tba/config.hpp"
#include "tba/dataset.hpp"
#include "tba/errors.hpp"
#include "tba/features.hpp"
#include "tba/rat.hpp"
#include "tba/renderer.hpp"

namespace tba {

namespace fs = std::filesystem;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossBreakdown {
  double mse = 0;
  double tightness = 0;
  double total = 0;
  double lambda = 1;
};

// scales holds (s^x, s^y) for every tracker; trackers that were not updated
// are passed as (1, 1).
template <typename T>
LossBreakdown loss(const Tensor<T>& reconstruction, const Tensor<T>& target,
                   const std::vector<std::pair<double, double>>& scales, double lambda) {
  if (reconstruction.shape() != target.shape()) {
    throw std::invalid_argument("loss: frame shapes differ: " + shape_string(reconstruction.shape()) + " vs " +
                                shape_string(target.shape()));
  }
  LossBreakdown l;
  l.lambda = lambda;
  double se = 0;
  for (std::size_t p = 0; p < target.size(); ++p) {
    const double d = static_cast<double>(reconstruction[p]) - static_cast<double>(target[p]);
    se += d * d;
  }
  l.mse = target.size() ? se / static_cast<double>(target.size()) : 0.0;
  double tight = 0;
  for (const auto& [sx, sy] : scales) tight += sx * sy;
  l.tightness = scales.empty() ? 0.0 : tight / static_cast<double>(scales.size());
  l.total = l.mse + lambda * l.tightness;
  return l;
}

namespace ad {

template <typename T>
struct RenderedLoss {
  Var<T> total;
  LossBreakdown parts;
  std::shared_ptr<const Reconstruction<T>> reconstruction;
};

// Renders the given outputs over `background` and scores the result against
// `target`. `trackers` is I; absent trackers add identity scale to the
// tightness term.
template <typename T>
RenderedLoss<T> render_loss(Tape<T>& tape, const std::vector<TrackerOutputVars<T>>& outs, int trackers,
                            const Tensor<T>& target, const Tensor<T>& background, const ModelConfig& cfg,
                            double lambda) {
  struct Cache {
    std::vector<TrackerOutput<T>> values;
    Reconstruction<T> rec;
  };
  auto cache = std::make_shared<Cache>();
  std::vector<std::pair<double, double>> scales(trackers, {1.0, 1.0});
  for (std::size_t i = 0; i < outs.size(); ++i) {
    cache->values.push_back(values_of(outs[i], cfg));
    const Geometry g = pose_to_geometry(cache->values.back().pose, cfg);
    scales[i] = {g.scale_x, g.scale_y};
  }
  cache->rec = render(cache->values, background, cfg);

  RenderedLoss<T> out;
  out.parts = loss(cache->rec.frame, target, scales, lambda);
  out.reconstruction = std::shared_ptr<const Reconstruction<T>>(cache, &cache->rec);

  bool needs = false;
  for (const auto& o : outs) {
    needs = needs || tape.needs_grad(o.confidence) || tape.needs_grad(o.layer) || tape.needs_grad(o.pose) ||
            tape.needs_grad(o.shape) || tape.needs_grad(o.appearance);
  }
  out.total = tape.push(Tensor<T>::scalar(static_cast<T>(out.parts.total)), needs,
                        [cache, outs, target, cfg, lambda, trackers](Tape<T>& t, int self) {
    const double g = t.grad(self)[0];
    const Tensor<T>& frame = cache->rec.frame;
    Tensor<T> gf(frame.shape());
    const double k = 2.0 * g / static_cast<double>(frame.size());
    for (std::size_t p = 0; p < frame.size(); ++p) {
      gf[p] = static_cast<T>(k * (static_cast<double>(frame[p]) - static_cast<double>(target[p])));
    }
    const auto grads = render_backward(cache->values, cache->rec, gf, cfg);
    auto add_into = [&t](const Var<T>& v, const T* src, std::size_t n) {
      if (!t.needs_grad(v)) return;
      Tensor<T>& dst = t.grad(v.id);
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    };
    for (std::size_t i = 0; i < outs.size(); ++i) {
      const auto& o = outs[i];
      const auto& og = grads[i];
      const auto& val = cache->values[i];
      add_into(o.confidence, &og.confidence, 1);
      if (cfg.layer_dims() > 0) add_into(o.layer, og.layer.data(), og.layer.size());
      std::vector<T> gp = og.pose;
      if (gp.size() == 4) {
        const Geometry geo = pose_to_geometry(val.pose, cfg);
        const double c = g * lambda / trackers;
        gp[0] += static_cast<T>(c * cfg.eta_x * geo.scale_y);
        gp[1] += static_cast<T>(c * cfg.eta_y * geo.scale_x);
      }
      add_into(o.pose, gp.data(), gp.size());
      if (cfg.shape_dims() > 0) add_into(o.shape, og.shape.data(), og.shape.size());
      add_into(o.appearance, og.appearance.data(), og.appearance.size());
    }
  });
  return out;
}

}  // namespace ad

template <typename T>
class TbaModel {
 public:
  TbaModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg);
    std::mt19937_64 rng(seed);
    features_ = FeatureExtractor<T>(cfg, rng);
    rat_ = RatNetwork<T>(cfg, rng);
  }
  TbaModel(const TbaModel&) = delete;
  TbaModel& operator=(const TbaModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  FeatureExtractor<T>& features() { return features_; }
  RatNetwork<T>& rat() { return rat_; }

  std::vector<Parameter<T>*> parameters() {
    auto ps = features_.parameters();
    for (auto* p : rat_.parameters()) ps.push_back(p);
    return ps;
  }
  std::size_t parameter_count() { return count_scalars(parameters()); }

  Tensor<T> background() const { return Tensor<T>({cfg_.channels, cfg_.height, cfg_.width}); }

 private:
  ModelConfig cfg_;
  FeatureExtractor<T> features_;
  RatNetwork<T> rat_;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        const double m = b1_ * m_[i][j] + (1 - b1_) * g;
        const double v = b2_ * v_[i][j] + (1 - b2_) * g * g;
        m_[i][j] = static_cast<T>(m);
        v_[i][j] = static_cast<T>(v);
        p.value[j] -= static_cast<T>(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    }
  }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }

 private:
  std::vector<Parameter<T>*> params_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

template <typename T>
double global_grad_norm(const std::vector<Parameter<T>*>& params) {
  double s = 0;
  for (const auto* p : params) {
    for (T g : p->grad.values()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

// Rescales all gradients so their global norm is at most max_norm; returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  const double n = global_grad_norm(params);
  if (max_norm > 0 && n > max_norm) {
    const T k = static_cast<T>(max_norm / n);
    for (auto* p : params) {
      for (T& g : p->grad.values()) g *= k;
    }
  }
  return n;
}

struct TrainConfig {
  Task task = Task::sprites;
  std::string ablation = "TBA";
  int batch_size = 64;
  int seq_len = 20;
  double learning_rate = 5e-4;
  double lambda = 1.0;
  int patience = 10;
  int val_every = 1000;
  std::uint64_t seed = 0;
  long max_steps = 0;           // 0: until early stopping
  double time_budget_s = 0;     // 0: unlimited
  double clip_norm = 10.0;
  int val_sequences = 0;        // 0: whole validation split
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"task", to_string(c.task)},
           {"ablation", c.ablation},
           {"batch_size", c.batch_size},
           {"seq_len", c.seq_len},
           {"learning_rate", c.learning_rate},
           {"lambda", c.lambda},
           {"patience", c.patience},
           {"val_every", c.val_every},
           {"seed", c.seed},
           {"max_steps", c.max_steps},
           {"time_budget_s", c.time_budget_s},
           {"clip_norm", c.clip_norm},
           {"val_sequences", c.val_sequences}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c.task = parse_task(j.at("task").get<std::string>());
  c.ablation = j.at("ablation");
  c.batch_size = j.at("batch_size");
  c.seq_len = j.at("seq_len");
  c.learning_rate = j.at("learning_rate");
  c.lambda = j.at("lambda");
  c.patience = j.at("patience");
  c.val_every = j.at("val_every");
  c.seed = j.at("seed");
  c.max_steps = j.at("max_steps");
  c.time_budget_s = j.at("time_budget_s");
  c.clip_norm = j.at("clip_norm");
  c.val_sequences = j.at("val_sequences");
}

inline void validate(const TrainConfig& c) {
  auto need = [](bool ok, const char* key, const char* why) {
    if (!ok) throw ConfigError(std::string("train.") + key + ": " + why);
  };
  need(c.task != Task::duke, "task", "training supports sprites and mnist");
  need(c.batch_size > 0, "batch_size", "must be positive");
  need(c.seq_len > 0, "seq_len", "must be positive");
  need(c.learning_rate > 0, "learning_rate", "must be positive");
  need(c.lambda >= 0, "lambda", "must be non-negative");
  need(c.patience > 0, "patience", "must be positive");
  need(c.val_every > 0, "val_every", "must be positive");
  need(c.max_steps >= 0, "max_steps", "must be non-negative");
  need(c.time_budget_s >= 0, "time_budget_s", "must be non-negative");
  need(c.clip_norm >= 0, "clip_norm", "must be non-negative");
  need(c.val_sequences >= 0, "val_sequences", "must be non-negative");
}

// Model config for a task with an ablation applied.
inline ModelConfig model_config(Task task, const std::string& ablation) {
  ModelConfig cfg = preset(task);
  configure_ablation(cfg, ablation);
  return cfg;
}

// ---------------------------------------------------------------------------
// Inference

template <typename T>
struct FrameInference {
  std::vector<TrackerOutput<T>> outputs;  // trackers reached this frame, in tracker order
  int iterations_used = 0;
  LossBreakdown loss;
  std::vector<AttentionTraceEntry<T>> trace;
  std::shared_ptr<const Reconstruction<T>> reconstruction;
};

// Runs the tracker over consecutive frames, updating `state` in place.
template <typename T>
std::vector<FrameInference<T>> infer_sequence(TbaModel<T>& model, const std::vector<Tensor<T>>& frames,
                                              std::vector<TrackerState<T>>& state, OutputSampler<T>& sampler,
                                              double lambda = 1.0, bool record_trace = false,
                                              bool keep_reconstruction = false) {
  const ModelConfig& cfg = model.config();
  const Tensor<T> bg = model.background();
  std::vector<FrameInference<T>> out;
  out.reserve(frames.size());
  for (const auto& frame : frames) {
    Tape<T> tape;
    Var<T> mem = tape.constant(model.features()(frame));
    std::vector<TrackerSlot<T>> slots;
    for (const auto& s : state) slots.push_back({tape.constant(s.h), s.prev_confidence});
    StepResult<T> st = model.rat().step(tape, slots, mem, sampler, record_trace);
    std::vector<TrackerOutputVars<T>> present;
    for (const auto& o : st.outputs) {
      if (o) present.push_back(*o);
    }
    auto rl = ad::render_loss(tape, present, cfg.trackers, frame, bg, cfg, lambda);
    FrameInference<T> fi;
    for (const auto& o : present) fi.outputs.push_back(values_of(o, cfg));
    fi.iterations_used = st.iterations_used;
    fi.loss = rl.parts;
    fi.trace = std::move(st.trace);
    if (keep_reconstruction) fi.reconstruction = rl.reconstruction;
    for (std::size_t i = 0; i < state.size(); ++i) {
      state[i].h = slots[i].h.value();
      state[i].prev_confidence = slots[i].confidence;
    }
    out.push_back(std::move(fi));
  }
  return out;
}

template <typename T>
std::vector<std::vector<TrackerOutput<T>>> outputs_of(const std::vector<FrameInference<T>>& frames) {
  std::vector<std::vector<TrackerOutput<T>>> out;
  for (const auto& f : frames) out.push_back(f.outputs);
  return out;
}

struct SplitEvaluation {
  MetricsReport report;
  double mean_iterations_used = 0;
  double mean_loss = 0;
  long frames_with_confident_output = 0;
  long frames = 0;
  std::vector<std::pair<int, std::vector<TrackBox>>> predictions;  // per sequence index
};

// Tracks every stream of a split with a deterministic sampler (state reset
// at each stream start) and scores the boxes against ground truth.
template <typename T>
SplitEvaluation evaluate_split(TbaModel<T>& model, Dataset& data, const std::string& split,
                               double threshold = 0.5, int max_sequences = 0) {
  SplitEvaluation ev;
  MotCounts counts;
  double iters = 0, loss_sum = 0;
  int done = 0;
  for (int s = 0; s < data.streams(split); ++s) {
    OutputSampler<T> sampler(0, false);
    auto state = initial_states<T>(model.config());
    for (int seq : data.stream_sequences(split, s)) {
      if (max_sequences > 0 && done >= max_sequences) break;
      const auto frames = data.frames(split, seq);
      std::vector<Tensor<T>> typed;
      for (const auto& f : frames) typed.push_back(f.template cast<T>());
      const auto inf = infer_sequence(model, typed, state, sampler);
      for (const auto& f : inf) {
        iters += f.iterations_used;
        loss_sum += f.loss.total;
        bool any = false;
        for (const auto& o : f.outputs) any = any || static_cast<double>(o.confidence) > threshold;
        ev.frames_with_confident_output += any ? 1 : 0;
        ++ev.frames;
      }
      auto boxes = outputs_to_boxes(outputs_of(inf), model.config(), threshold);
      counts += evaluate_sequence(data.ground_truth(split, seq), boxes, 0.5, static_cast<long>(frames.size()));
      ev.predictions.emplace_back(seq, std::move(boxes));
      ++done;
    }
  }
  ev.report = make_report(counts);
  if (ev.frames > 0) {
    ev.mean_iterations_used = iters / static_cast<double>(ev.frames);
    ev.mean_loss = loss_sum / static_cast<double>(ev.frames);
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, uint64 header length, JSON header, then raw
// float32 blobs (parameters, then Adam first and second moments) in header
// order.

inline constexpr char kCheckpointMagic[8] = {'T', 'B', 'A', 'C', 'K', 'P', 'T', '1'};

struct CheckpointMeta {
  ModelConfig model;
  TrainConfig train;
  long step = 0;
  std::vector<std::pair<long, double>> val_history;
  double best_val = std::numeric_limits<double>::infinity();
  long adam_steps = 0;
  bool has_moments = false;
};

inline void save_checkpoint(const fs::path& path, TbaModel<float>& model, Adam<float>* adam,
                            const CheckpointMeta& meta) {
  auto params = model.parameters();
  json header;
  header["format"] = 1;
  header["model"] = meta.model;
  header["train"] = meta.train;
  header["step"] = meta.step;
  header["best_val"] = std::isfinite(meta.best_val) ? json(meta.best_val) : json(nullptr);
  json hist = json::array();
  for (const auto& [s, v] : meta.val_history) hist.push_back({s, v});
  header["val_history"] = hist;
  header["adam_steps"] = adam ? adam->steps() : 0;
  header["has_moments"] = adam != nullptr;
  json plist = json::array();
  for (const auto* p : params) plist.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  header["params"] = plist;
  const std::string text = header.dump();

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, 8);
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(text.data(), static_cast<std::streamsize>(n));
    auto blob = [&out](const Tensor<float>& t) {
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    };
    for (const auto* p : params) blob(p->value);
    if (adam) {
      for (const auto& m : adam->first_moments()) blob(m);
      for (const auto& v : adam->second_moments()) blob(v);
    }
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Points `dir/name` at `target` (a file name inside dir).
inline void update_symlink(const fs::path& dir, const std::string& name, const fs::path& target) {
  const fs::path link = dir / name;
  std::error_code ec;
  fs::remove(link, ec);
  fs::create_symlink(target.filename(), link, ec);
  if (ec) throw IoError("cannot create symlink " + link.string() + ": " + ec.message());
}

// A directory resolves to its `best` checkpoint, else `latest`.
inline fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::is_directory(p)) {
    for (const char* name : {"best", "latest"}) {
      if (fs::exists(p / name)) return p / name;
    }
    throw IoError("no checkpoint in " + p.string());
  }
  if (!fs::exists(p)) throw IoError("checkpoint not found: " + p.string());
  return p;
}

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::unique_ptr<TbaModel<float>> model;
  std::vector<Tensor<float>> first_moments, second_moments;
};

inline LoadedCheckpoint load_checkpoint(const fs::path& where) {
  const fs::path path = resolve_checkpoint(where);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ValidationError("not a checkpoint: " + path.string());
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n > (1u << 26)) throw ValidationError("corrupt checkpoint header: " + path.string());
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  json header = json::parse(text, nullptr, false);
  if (!in || header.is_discarded()) throw ValidationError("corrupt checkpoint header: " + path.string());

  LoadedCheckpoint ck;
  try {
    ck.meta.model = header.at("model").get<ModelConfig>();
    ck.meta.train = header.at("train").get<TrainConfig>();
    ck.meta.step = header.at("step");
    if (!header.at("best_val").is_null()) ck.meta.best_val = header.at("best_val");
    for (const auto& e : header.at("val_history")) ck.meta.val_history.emplace_back(e.at(0), e.at(1));
    ck.meta.adam_steps = header.at("adam_steps");
    ck.meta.has_moments = header.at("has_moments");
  } catch (const std::exception& e) {
    throw ValidationError("corrupt checkpoint header: " + std::string(e.what()));
  }
  ck.model = std::make_unique<TbaModel<float>>(ck.meta.model, 0);
  auto params = ck.model->parameters();
  const json& plist = header.at("params");
  if (plist.size() != params.size()) throw ValidationError("checkpoint parameter list does not match its config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (plist[i].at("name") != params[i]->name ||
        plist[i].at("shape").get<std::vector<int>>() != params[i]->value.shape()) {
      throw ValidationError("checkpoint parameter " + plist[i].at("name").get<std::string>() + " does not match");
    }
  }
  auto blob = [&in, &path](Tensor<float>& t) {
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw ValidationError("truncated checkpoint " + path.string());
  };
  for (auto* p : params) blob(p->value);
  if (ck.meta.has_moments) {
    for (auto* p : params) {
      ck.first_moments.emplace_back(p->value.shape());
      blob(ck.first_moments.back());
    }
    for (auto* p : params) {
      ck.second_moments.emplace_back(p->value.shape());
      blob(ck.second_moments.back());
    }
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Training

struct StepStats {
  long step = 0;
  LossBreakdown loss;  // mean over frames of the batch
  double mean_iterations_used = 0;
  double grad_norm = 0;
  std::optional<double> val_loss;
};

struct TrainResult {
  long steps = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::string stop_reason;
  fs::path checkpoint_dir;
};

class Trainer {
 public:
  Trainer(const ModelConfig& cfg, const TrainConfig& tc, Dataset& data, const fs::path& out_dir)
      : cfg_(cfg), tc_(tc), data_(data), out_(out_dir), model_(cfg, tc.seed), adam_(model_.parameters(), tc.learning_rate),
        rng_(datagen::mix_seed(tc.seed, 0x7261)) {
    tba::validate(tc);
    const auto& m = data.manifest();
    if (m.height != cfg.height || m.width != cfg.width || m.channels != cfg.channels) {
      throw ConfigError("dataset frames are " + std::to_string(m.height) + "x" + std::to_string(m.width) + "x" +
                        std::to_string(m.channels) + " but the model expects " + std::to_string(cfg.height) + "x" +
                        std::to_string(cfg.width) + "x" + std::to_string(cfg.channels));
    }
    if (data.seq_len() != tc.seq_len) {
      throw ConfigError("train.seq_len: dataset sequences have " + std::to_string(data.seq_len()) + " frames");
    }
    if (data.sequences("train") == 0) throw ValidationError("dataset has no training sequences");
    lanes_.resize(tc.batch_size);
  }

  TbaModel<float>& model() { return model_; }
  Adam<float>& optimizer() { return adam_; }
  long step() const { return step_; }

  void resume(const fs::path& checkpoint) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    auto dst = model_.parameters();
    auto src = ck.model->parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
    if (ck.meta.has_moments) {
      adam_.first_moments() = ck.first_moments;
      adam_.second_moments() = ck.second_moments;
      adam_.set_steps(ck.meta.adam_steps);
    }
    step_ = ck.meta.step;
    val_history_ = ck.meta.val_history;
    best_val_ = ck.meta.best_val;
  }

  // Forward + backward over one lane's subsequence. grad_scale multiplies the
  // mean-over-frames loss before backpropagation.
  struct LaneStats {
    LossBreakdown loss;
    double iterations = 0;
  };

  LaneStats run_lane(const std::vector<Tensor<float>>& frames, std::vector<TrackerState<float>>& state,
                     OutputSampler<float>& sampler, double grad_scale) {
    const int t_len = static_cast<int>(frames.size());
    const Tensor<float> bg = model_.background();
    std::vector<Tensor<float>> mems;
    mems.reserve(t_len);
    for (const auto& f : frames) mems.push_back(model_.features()(f));

    Tape<float> tape;
    std::vector<TrackerSlot<float>> slots;
    for (const auto& s : state) slots.push_back({tape.constant(s.h), s.prev_confidence});
    std::vector<Var<float>> mem_vars, losses;
    LaneStats ls;
    for (int t = 0; t < t_len; ++t) {
      mem_vars.push_back(tape.variable(mems[t]));
      StepResult<float> st = model_.rat().step(tape, slots, mem_vars.back(), sampler);
      std::vector<TrackerOutputVars<float>> present;
      for (const auto& o : st.outputs) {
        if (o) present.push_back(*o);
      }
      auto rl = ad::render_loss(tape, present, cfg_.trackers, frames[t], bg, cfg_, tc_.lambda);
      losses.push_back(rl.total);
      ls.loss.mse += rl.parts.mse / t_len;
      ls.loss.tightness += rl.parts.tightness / t_len;
      ls.loss.total += rl.parts.total / t_len;
      ls.iterations += static_cast<double>(st.iterations_used) / t_len;
    }
    ls.loss.lambda = tc_.lambda;
    for (std::size_t i = 0; i < state.size(); ++i) {
      state[i].h = slots[i].h.value();
      state[i].prev_confidence = slots[i].confidence;
    }
    if (grad_scale == 0.0 || !std::isfinite(ls.loss.total)) return ls;

    const Tensor<float> seed = Tensor<float>::scalar(static_cast<float>(grad_scale / t_len));
    for (const auto& l : losses) tape.seed(l, seed);
    tape.run_backward();
    for (int t = 0; t < t_len; ++t) {
      if (!tape.has_grad(mem_vars[t].id)) continue;
      const Tensor<float> g = tape.gradient(mem_vars[t]);
      Tape<float> ft;
      Var<float> c = model_.features().extract(ft, ft.constant(frames[t]), true);
      ft.seed(c, g);
      ft.run_backward();
    }
    return ls;
  }

  StepStats train_step() {
    auto params = model_.parameters();
    for (auto* p : params) p->zero_grad();
    StepStats ss;
    const int b_size = tc_.batch_size;
    std::vector<int> used_seqs;
    for (int b = 0; b < b_size; ++b) {
      Lane& lane = lanes_[b];
      if (lane.stream < 0 || lane.pos >= static_cast<int>(lane.seqs.size())) {
        std::uniform_int_distribution<int> pick(0, data_.streams("train") - 1);
        lane.stream = pick(rng_);
        lane.seqs = data_.stream_sequences("train", lane.stream);
        lane.pos = 0;
        lane.state = initial_states<float>(cfg_);
      }
      const int seq = lane.seqs[lane.pos++];
      used_seqs.push_back(seq);
      OutputSampler<float> sampler(datagen::mix_seed(tc_.seed, static_cast<std::uint64_t>(step_) * b_size + b));
      const auto ls = run_lane(data_.frames("train", seq), lane.state, sampler, 1.0 / b_size);
      if (!std::isfinite(ls.loss.total)) dump_and_abort(used_seqs, ls.loss);
      ss.loss.mse += ls.loss.mse / b_size;
      ss.loss.tightness += ls.loss.tightness / b_size;
      ss.loss.total += ls.loss.total / b_size;
      ss.mean_iterations_used += ls.iterations / b_size;
    }
    ss.loss.lambda = tc_.lambda;
    ss.grad_norm = clip_grad_norm(params, tc_.clip_norm);
    if (!std::isfinite(ss.grad_norm)) dump_and_abort(used_seqs, ss.loss);
    adam_.step();
    ss.step = ++step_;
    return ss;
  }

  // Mean per-frame validation loss with a deterministic sampler.
  double validate() {
    double sum = 0;
    long n = 0;
    int done = 0;
    for (int s = 0; s < data_.streams("val"); ++s) {
      auto state = initial_states<float>(cfg_);
      OutputSampler<float> sampler(0, false);
      for (int seq : data_.stream_sequences("val", s)) {
        if (tc_.val_sequences > 0 && done >= tc_.val_sequences) break;
        for (const auto& f : infer_sequence(model_, data_.frames("val", seq), state, sampler, tc_.lambda)) {
          sum += f.loss.total;
          ++n;
        }
        ++done;
      }
    }
    return n > 0 ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }

  TrainResult run(const std::function<void(const StepStats&)>& on_step = {}) {
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec) throw IoError("cannot create " + out_.string() + ": " + ec.message());
    const fs::path log_path = out_ / "train_log.csv";
    const bool fresh = step_ == 0 || !fs::exists(log_path);
    std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write " + log_path.string());
    if (fresh) log << "step,train_loss,val_loss,mse,tightness,mean_iterations_used\n";

    const auto start = std::chrono::steady_clock::now();
    int bad = 0;
    TrainResult res;
    res.checkpoint_dir = out_;
    while (true) {
      StepStats ss = train_step();
      const bool last_step = tc_.max_steps > 0 && step_ >= tc_.max_steps;
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const bool out_of_time = tc_.time_budget_s > 0 && elapsed >= tc_.time_budget_s;
      bool stop_early = false;
      if (step_ % tc_.val_every == 0 || last_step || out_of_time) {
        const double v = validate();
        ss.val_loss = v;
        val_history_.emplace_back(step_, v);
        if (v < best_val_) {
          best_val_ = v;
          bad = 0;
          save("best", true);
        } else if (++bad >= tc_.patience) {
          stop_early = true;
        }
        save("latest", false);
      }
      char line[256];
      std::snprintf(line, sizeof(line), "%ld,%.8g,%s,%.8g,%.8g,%.6g\n", ss.step, ss.loss.total,
                    ss.val_loss ? std::to_string(*ss.val_loss).c_str() : "", ss.loss.mse, ss.loss.tightness,
                    ss.mean_iterations_used);
      log << line;
      log.flush();
      if (on_step) on_step(ss);
      if (stop_early || last_step || out_of_time) {
        res.stop_reason = stop_early ? "early_stopping" : last_step ? "max_steps" : "time_budget";
        break;
      }
    }
    res.steps = step_;
    res.best_val = best_val_;
    return res;
  }

  CheckpointMeta meta() const {
    CheckpointMeta m;
    m.model = cfg_;
    m.train = tc_;
    m.step = step_;
    m.val_history = val_history_;
    m.best_val = best_val_;
    return m;
  }

 private:
  struct Lane {
    int stream = -1;
    int pos = 0;
    std::vector<int> seqs;
    std::vector<TrackerState<float>> state;
  };

  void save(const std::string& link, bool keep_name) {
    char name[64];
    std::snprintf(name, sizeof(name), keep_name ? "best_step_%08ld.ckpt" : "step_%08ld.ckpt", step_);
    const fs::path file = out_ / name;
    save_checkpoint(file, model_, &adam_, meta());
    const fs::path link_path = out_ / link;
    if (fs::is_symlink(link_path)) {
      const fs::path old = out_ / fs::read_symlink(link_path);
      update_symlink(out_, link, file);
      std::error_code ec;
      if (old != file && !is_linked(old)) fs::remove(old, ec);
    } else {
      update_symlink(out_, link, file);
    }
  }

  bool is_linked(const fs::path& file) const {
    for (const char* l : {"best", "latest"}) {
      const fs::path p = out_ / l;
      if (fs::is_symlink(p) && out_ / fs::read_symlink(p) == file) return true;
    }
    return false;
  }

  [[noreturn]] void dump_and_abort(const std::vector<int>& seqs, const LossBreakdown& l) {
    json dump = {{"step", step_},
                 {"train_sequences", seqs},
                 {"mse", l.mse},
                 {"tightness", l.tightness},
                 {"total", std::isfinite(l.total) ? json(l.total) : json(nullptr)},
                 {"seed", tc_.seed}};
    std::error_code ec;
    fs::create_directories(out_, ec);
    const fs::path p = out_ / "nan_dump.json";
    std::ofstream(p) << dump.dump(2) << "\n";
    throw NumericalError("non-finite loss or gradient at step " + std::to_string(step_ + 1) + "; batch dumped to " +
                         p.string());
  }

  ModelConfig cfg_;
  TrainConfig tc_;
  Dataset& data_;
  fs::path out_;
  TbaModel<float> model_;
  Adam<float> adam_;
  std::mt19937_64 rng_;
  std::vector<Lane> lanes_;
  long step_ = 0;
  std::vector<std::pair<long, double>> val_history_;
  double best_val_ = std::numeric_limits<double>::infinity();
};

}  // namespace tba
