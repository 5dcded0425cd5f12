// tba {gen,train,eval,viz} [--config FILE] [--set key=value]...
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tba/datagen.hpp"
#include "tba/dataset.hpp"
#include "tba/eval.hpp"
#include "tba/training.hpp"
#include "tba/viz.hpp"

namespace fs = std::filesystem;
using tba::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set train.batch_size=8");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw tba::ConfigError("cannot read config file '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw tba::ConfigError("config file '" + path + "' is not valid JSON");
  return j;
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw tba::IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string data_dir_or_env(const std::string& given, const char* what) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("TBA_DATA_DIR"); env != nullptr && *env) return env;
  throw tba::ConfigError(std::string(what) + ": no dataset directory (pass --data or set TBA_DATA_DIR)");
}

// Splits --set overrides into those under `prefix.` and the rest.
std::vector<std::string> sets_with_prefix(const std::vector<std::string>& sets, const std::string& prefix, bool keep) {
  std::vector<std::string> out;
  for (const auto& s : sets) {
    if ((s.rfind(prefix + ".", 0) == 0) == keep) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  Common common;
  std::string task, out, digits;
  int frames = 20000;
  std::uint64_t seed = 0;
};

int cmd_gen(const GenArgs& a) {
  json eff;
  eff["data"] = tba::datagen::DataConfig{};
  eff["out"] = "";
  if (!a.common.config.empty()) tba::merge_strict(eff, read_json_file(a.common.config));
  eff["data"]["task"] = a.task;
  eff["data"]["num_frames"] = a.frames;
  eff["data"]["seed"] = a.seed;
  if (!a.digits.empty()) eff["data"]["digit_source"] = a.digits;
  if (!a.out.empty()) eff["out"] = a.out;
  for (const auto& s : a.common.sets) tba::apply_override(eff, s);

  tba::datagen::DataConfig dc;
  try {
    dc = eff.at("data").get<tba::datagen::DataConfig>();
  } catch (const json::exception& e) {
    throw tba::ConfigError(std::string("data: ") + e.what());
  }
  tba::datagen::validate(dc);
  std::string out = eff.at("out").get<std::string>();
  if (out.empty()) out = data_dir_or_env("", "gen");
  if (dc.task == tba::Task::mnist && dc.digit_source.empty()) {
    throw tba::ConfigError("data.digit_source: mnist generation needs --digits (IDX3 image file)");
  }
  if (dc.task == tba::Task::mnist && !fs::exists(dc.digit_source)) {
    throw tba::IoError("digit source not found: " + dc.digit_source);
  }
  const auto m = tba::datagen::generate(dc, out);
  write_json_file(fs::path(out) / "gen_config.json", eff);
  std::cout << (fs::path(out) / "manifest.json").string() << "\n";
  std::cerr << "train/val/test sequences: " << m.splits.at("train").sequences << "/" << m.splits.at("val").sequences
            << "/" << m.splits.at("test").sequences << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data, out, ablation, task, resume;
  long seed = -1;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  json eff;
  eff["train"] = tba::TrainConfig{};
  eff["data_dir"] = "";
  eff["out"] = "runs/tba";
  json file;
  if (!a.common.config.empty()) {
    file = read_json_file(a.common.config);
    json no_model = file;
    no_model.erase("model");
    tba::merge_strict(eff, no_model);
  }
  if (!a.task.empty()) eff["train"]["task"] = a.task;
  if (!a.ablation.empty()) eff["train"]["ablation"] = a.ablation;
  if (a.seed >= 0) eff["train"]["seed"] = a.seed;
  if (!a.data.empty()) eff["data_dir"] = a.data;
  if (!a.out.empty()) eff["out"] = a.out;
  for (const auto& s : sets_with_prefix(a.common.sets, "model", false)) tba::apply_override(eff, s);

  tba::TrainConfig tc;
  try {
    tc = eff.at("train").get<tba::TrainConfig>();
  } catch (const json::exception& e) {
    throw tba::ConfigError(std::string("train: ") + e.what());
  }
  tba::validate(tc);
  eff["model"] = tba::model_config(tc.task, tc.ablation);
  if (file.contains("model")) {
    json wrapped = {{"model", file.at("model")}};
    tba::merge_strict(eff, wrapped);
  }
  for (const auto& s : sets_with_prefix(a.common.sets, "model", true)) tba::apply_override(eff, s);
  tba::ModelConfig cfg;
  try {
    cfg = eff.at("model").get<tba::ModelConfig>();
  } catch (const json::exception& e) {
    throw tba::ConfigError(std::string("model: ") + e.what());
  }
  tba::validate(cfg);

  const std::string data_dir = data_dir_or_env(eff.at("data_dir").get<std::string>(), "train");
  eff["data_dir"] = data_dir;
  const fs::path out = eff.at("out").get<std::string>();
  fs::create_directories(out);
  write_json_file(out / "config.json", eff);

  tba::Dataset data(data_dir);
  tba::Trainer trainer(cfg, tc, data, out);
  if (!a.resume.empty()) trainer.resume(a.resume);
  std::cerr << "parameters: " << trainer.model().parameter_count() << "\n";
  const auto res = trainer.run([&a](const tba::StepStats& s) {
    if (a.quiet) return;
    std::fprintf(stderr, "step %ld loss %.6f mse %.6f tight %.4f iters %.2f |g| %.3g%s\n", s.step, s.loss.total,
                 s.loss.mse, s.loss.tightness, s.mean_iterations_used, s.grad_norm,
                 s.val_loss ? (" val " + std::to_string(*s.val_loss)).c_str() : "");
  });
  std::cout << (out / "latest").string() << "\n";
  std::cerr << "stopped after " << res.steps << " steps (" << res.stop_reason << "), best val " << res.best_val
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint, data, split = "test", out = "eval_out", gt, pred;
  double threshold = 0.5;
  int max_sequences = 0;
};

void write_report(const fs::path& out, const tba::MetricsReport& r, json extra) {
  fs::create_directories(out);
  json j = tba::report_json(r);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_json_file(out / "report.json", j);
  std::ofstream csv(out / "report.csv");
  if (!csv) throw tba::IoError("cannot write " + (out / "report.csv").string());
  csv << tba::report_csv_header() << "\n" << tba::report_csv_row(r) << "\n";
  std::cout << tba::report_csv_header() << "\n" << tba::report_csv_row(r) << "\n";
}

int cmd_eval(const EvalArgs& a) {
  json eff = {{"threshold", a.threshold}, {"split", a.split}, {"iou_gate", 0.5}, {"max_sequences", a.max_sequences}};
  if (!a.common.config.empty()) tba::merge_strict(eff, read_json_file(a.common.config));
  for (const auto& s : a.common.sets) tba::apply_override(eff, s);
  const double gate = eff.at("iou_gate");
  const fs::path out = a.out;

  if (!a.gt.empty() || !a.pred.empty()) {
    if (a.gt.empty() || a.pred.empty()) throw tba::ConfigError("eval: --gt and --pred must be given together");
    const auto gt = tba::read_mot_csv(a.gt);
    const auto pred = tba::read_mot_csv(a.pred);
    const auto r = tba::make_report(tba::evaluate_sequence(gt, pred, gate));
    fs::create_directories(out);
    write_json_file(out / "config.json", eff);
    write_report(out, r, {{"gt", a.gt}, {"pred", a.pred}});
    return 0;
  }
  if (a.checkpoint.empty()) throw tba::ConfigError("eval: pass --checkpoint (or --gt and --pred)");
  auto ck = tba::load_checkpoint(a.checkpoint);
  tba::Dataset data(data_dir_or_env(a.data, "eval"));
  const std::string split = eff.at("split");
  auto ev = tba::evaluate_split(*ck.model, data, split, eff.at("threshold").get<double>(),
                                eff.at("max_sequences").get<int>());
  fs::create_directories(out / "pred");
  write_json_file(out / "config.json", eff);
  for (const auto& [seq, boxes] : ev.predictions) {
    tba::write_mot_csv(out / "pred" / (tba::datagen::seq_dir_name(seq) + ".csv"), boxes);
  }
  write_report(out, ev.report,
               {{"split", split},
                {"checkpoint", tba::resolve_checkpoint(a.checkpoint).string()},
                {"ablation", ck.meta.train.ablation},
                {"mean_iterations_used", ev.mean_iterations_used},
                {"mean_loss", ev.mean_loss},
                {"frames", ev.frames},
                {"frames_with_confident_output", ev.frames_with_confident_output}});
  return 0;
}

// ---------------------------------------------------------------------------

struct VizArgs {
  Common common;
  std::string checkpoint, data, split = "test", out = "viz_out";
  int sequence = 0;
  bool attention = false, stages = false;
};

char* frame_name(char* buf, std::size_t n, const char* stem, int t) {
  std::snprintf(buf, n, "%s_%05d.png", stem, t);
  return buf;
}

int cmd_viz(const VizArgs& a) {
  json eff = {{"split", a.split}, {"sequence", a.sequence}, {"attention", a.attention}, {"stages", a.stages}};
  if (!a.common.config.empty()) tba::merge_strict(eff, read_json_file(a.common.config));
  for (const auto& s : a.common.sets) tba::apply_override(eff, s);
  const std::string split = eff.at("split");
  const int seq = eff.at("sequence");

  auto ck = tba::load_checkpoint(a.checkpoint);
  auto& model = *ck.model;
  const auto& cfg = model.config();
  tba::Dataset data(data_dir_or_env(a.data, "viz"));
  if (seq < 0 || seq >= data.sequences(split)) {
    throw tba::IoError("sequence " + std::to_string(seq) + " not found in split " + split);
  }
  // Warm the tracker state on the earlier sequences of the same stream.
  const int stream = seq / data.chunks_per_stream();
  auto state = tba::initial_states<float>(cfg);
  tba::OutputSampler<float> sampler(0, false);
  for (int s : data.stream_sequences(split, stream)) {
    if (s == seq) break;
    tba::infer_sequence(model, data.frames(split, s), state, sampler);
  }
  const auto frames = data.frames(split, seq);
  const auto inf = tba::infer_sequence(model, frames, state, sampler, ck.meta.train.lambda,
                                       eff.at("attention").get<bool>(), true);

  const fs::path out = a.out;
  fs::create_directories(out / "panels");
  write_json_file(out / "config.json", eff);
  char buf[128];
  for (std::size_t t = 0; t < inf.size(); ++t) {
    const int ti = static_cast<int>(t);
    const auto panel = tba::viz::frame_panel(frames[t], inf[t].reconstruction->frame, inf[t].outputs, cfg);
    tba::write_png(out / "panels" / frame_name(buf, sizeof(buf), "panel", ti), panel);
    if (eff.at("stages").get<bool>()) {
      fs::create_directories(out / "stages");
      tba::write_png(out / "stages" / frame_name(buf, sizeof(buf), "stages", ti),
                     tba::viz::stage_strip(*inf[t].reconstruction));
    }
    if (eff.at("attention").get<bool>()) {
      fs::create_directories(out / "attention");
      for (const auto& e : inf[t].trace) {
        const auto [mem, w] = tba::viz::attention_maps(e, cfg);
        char name[128];
        std::snprintf(name, sizeof(name), "frame_%05d_iter_%d_memory.png", ti, e.priority);
        tba::write_png(out / "attention" / name, tba::viz::upscale(mem, 16));
        std::snprintf(name, sizeof(name), "frame_%05d_iter_%d_weights.png", ti, e.priority);
        tba::write_png(out / "attention" / name, tba::viz::upscale(w, 16));
      }
    }
  }
  if (std::system("command -v ffmpeg >/dev/null 2>&1") == 0) {
    const std::string cmd = "ffmpeg -loglevel error -y -framerate 5 -i '" + (out / "panels" / "panel_%05d.png").string() +
                            "' -vf pad=ceil(iw/2)*2:ceil(ih/2)*2 -pix_fmt yuv420p '" + (out / "panels.mp4").string() + "'";
    if (std::system(cmd.c_str()) != 0) std::cerr << "ffmpeg failed; PNG panels only\n";
  } else {
    std::cerr << "ffmpeg not found; PNG panels only\n";
  }
  std::cout << (out / "panels").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tracking by animation: data generation, training, evaluation and visualisation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_common(g, gen.common);
  g->add_option("--task", gen.task, "sprites or mnist")->required();
  g->add_option("--frames", gen.frames, "Total number of frames");
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--out", gen.out, "Output directory (default: $TBA_DATA_DIR)");
  g->add_option("--digits", gen.digits, "IDX3 digit image file for mnist");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a tracker on a dataset");
  add_common(t, train.common);
  t->add_option("--data", train.data, "Dataset directory (default: $TBA_DATA_DIR)");
  t->add_option("--out", train.out, "Checkpoint directory");
  t->add_option("--ablation", train.ablation, "TBA, TBAc, TBAc-noOcc, TBAc-noAtt, TBAc-noMem, TBAc-noRep");
  t->add_option("--task", train.task, "sprites or mnist");
  t->add_option("--seed", train.seed, "Random seed");
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_flag("--quiet", train.quiet, "No per-step progress");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a split, or a prediction file");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file or directory");
  e->add_option("--data", ev.data, "Dataset directory (default: $TBA_DATA_DIR)");
  e->add_option("--split", ev.split, "train, val or test");
  e->add_option("--threshold", ev.threshold, "Confidence threshold for emitting boxes");
  e->add_option("--max-sequences", ev.max_sequences, "Limit the number of sequences (0: all)");
  e->add_option("--out", ev.out, "Report directory");
  e->add_option("--gt", ev.gt, "Ground-truth CSV (MOTChallenge lines)");
  e->add_option("--pred", ev.pred, "Prediction CSV (MOTChallenge lines)");

  VizArgs vz;
  auto* v = app.add_subcommand("viz", "Render tracker panels for one sequence");
  add_common(v, vz.common);
  v->add_option("--checkpoint", vz.checkpoint, "Checkpoint file or directory")->required();
  v->add_option("--data", vz.data, "Dataset directory (default: $TBA_DATA_DIR)");
  v->add_option("--split", vz.split, "train, val or test");
  v->add_option("--sequence", vz.sequence, "Sequence index within the split");
  v->add_option("--out", vz.out, "Output directory");
  v->add_flag("--attention", vz.attention, "Also write memory and attention heatmaps");
  v->add_flag("--stages", vz.stages, "Also write renderer stage strips");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::CallForAllHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& pe) {
    app.exit(pe);
    return 2;
  }

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (t->parsed()) return cmd_train(train);
    if (e->parsed()) return cmd_eval(ev);
    if (v->parsed()) return cmd_viz(vz);
  } catch (const tba::ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 2;
}
