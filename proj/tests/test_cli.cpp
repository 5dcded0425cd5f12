#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "tba/eval.hpp"
#include "tba/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path work_dir() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / ("tba_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TBA_CLI_PATH) + " " + args + " >>" + (work_dir() / "cli.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

int count_files(const fs::path& dir, const std::string& suffix) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    n += name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  }
  return n;
}

class Cli : public ::testing::Test {
 protected:
  // 100 sequences of 20 frames, generated once.
  static void SetUpTestSuite() { ASSERT_EQ(run_cli("gen --task sprites --frames 2000 --seed 1 --out " + data().string()), 0); }
  static fs::path data() { return work_dir() / "data"; }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("gen --frames 100"), 2);  // --task is required
  EXPECT_EQ(run_cli("gen --task sprites --frames 0 --out " + (work_dir() / "x").string()), 2);
  EXPECT_EQ(run_cli("train --data " + data().string() + " --ablation TBA-fast --out " + (work_dir() / "bad").string()), 2);
  EXPECT_EQ(run_cli("train --data " + data().string() + " --set train.no_such_key=1"), 2);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  EXPECT_EQ(run_cli("eval --checkpoint " + (work_dir() / "nope.ckpt").string() + " --data " + data().string()), 1);
  EXPECT_EQ(run_cli("gen --task mnist --digits /nonexistent.idx3 --out " + (work_dir() / "m").string()), 1);
}

TEST_F(Cli, GenerateSplits) {
  const json m = read_json(data() / "manifest.json");
  EXPECT_EQ(m["splits"]["train"]["sequences"], 90);
  EXPECT_EQ(m["splits"]["val"]["sequences"], 5);
  EXPECT_EQ(m["splits"]["test"]["sequences"], 5);
  EXPECT_TRUE(fs::exists(data() / "gen_config.json"));
  EXPECT_EQ(count_files(data() / "test" / "seq_000004", ".png"), 20);
}

TEST_F(Cli, EvalPredictionFile) {
  const fs::path gt = data() / "test" / "seq_000000" / "gt.csv";
  const fs::path out = work_dir() / "eval_perfect";
  ASSERT_EQ(run_cli("eval --gt " + gt.string() + " --pred " + gt.string() + " --out " + out.string()), 0);
  const json r = read_json(out / "report.json");
  if (!tba::read_mot_csv(gt).empty()) {
    EXPECT_DOUBLE_EQ(r["MOTA"].get<double>(), 100.0);
    EXPECT_DOUBLE_EQ(r["IDF1"].get<double>(), 100.0);
  }
  EXPECT_TRUE(fs::exists(out / "report.csv"));
  EXPECT_EQ(run_cli("eval --gt " + gt.string() + " --out " + out.string()), 2);
}

TEST_F(Cli, TrainEvalViz) {
  const fs::path run = work_dir() / "run";
  ASSERT_EQ(run_cli("train --quiet --data " + data().string() + " --out " + run.string() +
                " --set train.batch_size=1 --set train.max_steps=1 --set train.val_sequences=1"),
            0);
  EXPECT_TRUE(fs::is_symlink(run / "latest"));
  const json cfg = read_json(run / "config.json");
  EXPECT_EQ(cfg["train"]["batch_size"], 1);
  EXPECT_EQ(cfg["model"]["I"], 4);

  const fs::path ev = work_dir() / "eval_ck";
  ASSERT_EQ(run_cli("eval --checkpoint " + run.string() + " --data " + data().string() +
                " --split test --max-sequences 1 --out " + ev.string()),
            0);
  const json r = read_json(ev / "report.json");
  EXPECT_TRUE(r.contains("mean_iterations_used"));
  EXPECT_EQ(r["ablation"], "TBA");
  EXPECT_EQ(count_files(ev / "pred", ".csv"), 1);

  const fs::path vz = work_dir() / "viz";
  ASSERT_EQ(run_cli("viz --checkpoint " + (run / "latest").string() + " --data " + data().string() +
                " --split test --sequence 1 --attention --stages --out " + vz.string()),
            0);
  EXPECT_EQ(count_files(vz / "panels", ".png"), 20);
  EXPECT_EQ(count_files(vz / "stages", ".png"), 20);
  ASSERT_GT(count_files(vz / "attention", "_weights.png"), 0);
  for (const auto& e : fs::directory_iterator(vz / "attention")) {
    const auto img = tba::read_png(e.path());
    EXPECT_EQ(img.dim(1), 8 * 16);  // one block per memory cell
    EXPECT_EQ(img.dim(2), 8 * 16);
  }
  EXPECT_EQ(run_cli("viz --checkpoint " + run.string() + " --data " + data().string() + " --sequence 99 --out " +
                vz.string()),
            1);
}
