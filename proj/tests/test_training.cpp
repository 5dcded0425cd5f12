#include <gtest/gtest.h>

#include <fstream>
#include <unistd.h>

#include "oracles.hpp"
#include "tba/training.hpp"

using namespace tba;
namespace fs = std::filesystem;

namespace {

// A small Sprites dataset shared by the tests below: 20 sequences of 3 frames.
class TrainingData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("tba_training_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    datagen::DataConfig dc;
    dc.seq_len = 3;
    dc.chunks_per_stream = 5;
    dc.spawn_prob = 0.3;
    dc.warmup = 40;
    datagen::generate_sprites_mot(60, 5, root_ / "data", dc);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static TrainConfig small_config(const std::string& ablation = "TBA") {
    TrainConfig tc;
    tc.ablation = ablation;
    tc.batch_size = 1;
    tc.seq_len = 3;
    tc.val_every = 1;
    tc.seed = 3;
    return tc;
  }

  static fs::path root_;
};
fs::path TrainingData::root_;

double grad_norm(const Parameter<float>& p) {
  double s = 0;
  for (float g : p.grad.values()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

}  // namespace

TEST(Loss, Examples) {
  Tensor<double> x({3, 4, 4}, 0.3);
  EXPECT_DOUBLE_EQ(loss(x, x, {{1, 1}, {1, 1}}, 1.0).total, 1.0);
  Tensor<double> off = x;
  for (auto& v : off.values()) v += 0.1;
  EXPECT_NEAR(loss(off, x, {{1, 1}}, 0.0).total, 0.01, 1e-12);
  const auto l = loss(x, x, {{1.2, 1.2}, {1, 1}, {1, 1}, {1, 1}}, 1.0);
  EXPECT_NEAR(l.tightness, 1.11, 1e-12);
  EXPECT_EQ(l.total, l.mse + l.lambda * l.tightness);
  EXPECT_THROW(loss(x, Tensor<double>({3, 4, 5}), {}, 1.0), std::invalid_argument);
}

TEST(Loss, TightnessGradient) {
  const auto cfg = oracle::tiny_config();
  std::mt19937_64 rng(2);
  TrackerOutput<double> o;
  o.confidence = 0.6;
  o.layer = {0, 1, 0};
  o.pose = {0.1, -0.2, 0.05, 0.1};
  o.shape = oracle::random_tensor({5, 5}, rng, 0, 1);
  o.appearance = oracle::random_tensor({3, 5, 5}, rng, 0, 1);
  const auto target = oracle::random_tensor({3, 16, 16}, rng, 0, 1);
  auto pose_grad = [&](double lambda) {
    Tape<double> t;
    TrackerOutputVars<double> v;
    v.confidence = t.constant(Tensor<double>::scalar(o.confidence));
    v.layer = t.constant(Tensor<double>::vector(o.layer));
    v.pose = t.variable(Tensor<double>::vector(o.pose));
    v.shape = t.constant(o.shape.reshaped({25}));
    v.appearance = t.constant(o.appearance.reshaped({75}));
    auto rl = ad::render_loss(t, {v}, cfg.trackers, target, Tensor<double>({3, 16, 16}), cfg, lambda);
    t.backward(rl.total);
    return t.gradient(v.pose);
  };
  const auto g0 = pose_grad(0.0), g1 = pose_grad(1.0);
  const auto geo = pose_to_geometry(o.pose, cfg);
  EXPECT_NEAR(g1[0] - g0[0], cfg.eta_x * geo.scale_y / cfg.trackers, 1e-12);
  EXPECT_NEAR(g1[1] - g0[1], cfg.eta_y * geo.scale_x / cfg.trackers, 1e-12);
  EXPECT_NEAR(g1[2], g0[2], 1e-12);
}

TEST(Model, ParameterCounts) {
  // Counted in binary units: 1.02 * 2^20 = 1069548.
  TbaModel<float> sprites(model_config(Task::sprites, "TBA"), 0);
  EXPECT_EQ(sprites.parameter_count(), 1067410u);
  EXPECT_NEAR(static_cast<double>(sprites.parameter_count()) / (1 << 20), 1.02, 0.02 * 1.02);
  TbaModel<float> mnist(model_config(Task::mnist, "TBA"), 0);
  EXPECT_EQ(mnist.parameter_count(), 952040u);
  // Ablations must not change the trainable set except through the layout.
  TbaModel<float> noocc(model_config(Task::sprites, "TBAc-noOcc"), 0);
  EXPECT_LT(noocc.parameter_count(), sprites.parameter_count());
  TbaModel<float> nomem(model_config(Task::sprites, "TBAc-noMem"), 0);
  EXPECT_EQ(nomem.parameter_count(), sprites.parameter_count());
}

TEST(Model, AblationMapping) {
  EXPECT_TRUE(model_config(Task::sprites, "TBA").flags.act);
  const auto c = model_config(Task::sprites, "TBAc");
  EXPECT_FALSE(c.flags.act);
  EXPECT_TRUE(c.flags.attention && c.flags.memory_write && c.flags.reprioritize);
  EXPECT_EQ(c.layers, 3);
  EXPECT_EQ(model_config(Task::sprites, "TBAc-noOcc").layers, 1);
  EXPECT_FALSE(model_config(Task::sprites, "TBAc-noAtt").flags.attention);
  EXPECT_FALSE(model_config(Task::sprites, "TBAc-noMem").flags.memory_write);
  EXPECT_FALSE(model_config(Task::sprites, "TBAc-noRep").flags.reprioritize);
  try {
    model_config(Task::sprites, "TBA-fast");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("TBA-fast"), std::string::npos);
    EXPECT_NE(msg.find("TBAc-noRep"), std::string::npos);
  }
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  Parameter<double> p("p", Tensor<double>::vector({1.0, -2.0}));
  p.grad = Tensor<double>::vector({0.5, -3.0});
  Adam<double> adam({&p}, 0.01);
  adam.step();
  EXPECT_NEAR(p.value[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p.value[1], -2.0 + 0.01, 1e-9);
  p.grad = Tensor<double>::vector({3.0, 4.0});
  EXPECT_NEAR(clip_grad_norm<double>({&p}, 1.0), 5.0, 1e-12);
  EXPECT_NEAR(p.grad[0], 0.6, 1e-12);
}

TEST_F(TrainingData, GradientReachesEveryGroup) {
  Dataset data(root_ / "data");
  const auto tc = small_config("TBAc");
  Trainer trainer(model_config(Task::sprites, "TBAc"), tc, data, root_ / "run_grad");
  trainer.train_step();
  std::map<std::string, double> group;
  for (auto* p : trainer.model().parameters()) {
    const std::string n = p->name;
    const std::string g = n.rfind("features", 0) == 0 ? "features"
                          : n.rfind("rat.key", 0) == 0 ? "key"
                          : n.rfind("rat.write", 0) == 0 ? "write"
                          : n.rfind("rat.gru", 0) == 0 ? "gru"
                                                       : "head";
    group[g] += grad_norm(*p);
    EXPECT_GT(grad_norm(*p), 0.0) << n;
  }
  EXPECT_EQ(group.size(), 5u);
  for (auto [g, n] : group) EXPECT_GT(n, 0.0) << g;
}

TEST_F(TrainingData, StateCarriesAcrossSubsequences) {
  Dataset data(root_ / "data");
  const auto cfg = model_config(Task::sprites, "TBA");
  Trainer trainer(cfg, small_config(), data, root_ / "run_carry");
  const auto seqs = data.stream_sequences("train", 0);
  ASSERT_GE(seqs.size(), 2u);
  const auto a = data.frames("train", seqs[0]), b = data.frames("train", seqs[1]);
  std::vector<Tensor<float>> ab = a;
  ab.insert(ab.end(), b.begin(), b.end());

  auto split = initial_states<float>(cfg);
  OutputSampler<float> s1(0, false);
  trainer.run_lane(a, split, s1, 0.0);
  const auto after_a = split;
  trainer.run_lane(b, split, s1, 0.0);

  auto joined = initial_states<float>(cfg);
  OutputSampler<float> s2(0, false);
  trainer.run_lane(ab, joined, s2, 0.0);

  auto inferred = initial_states<float>(cfg);
  OutputSampler<float> s3(0, false);
  const auto fi = infer_sequence(trainer.model(), a, inferred, s3);
  for (std::size_t i = 0; i < split.size(); ++i) {
    EXPECT_EQ(split[i].h, joined[i].h);
    EXPECT_EQ(split[i].prev_confidence, joined[i].prev_confidence);
    EXPECT_EQ(after_a[i].h, inferred[i].h);
  }
  EXPECT_EQ(fi.size(), 3u);
}

TEST_F(TrainingData, SeededRunsAreIdentical) {
  Dataset data(root_ / "data");
  const auto cfg = model_config(Task::sprites, "TBA");
  std::vector<std::vector<double>> curves;
  std::vector<std::vector<float>> finals;
  for (int run = 0; run < 2; ++run) {
    Trainer t(cfg, small_config(), data, root_ / ("run_seed" + std::to_string(run)));
    std::vector<double> curve;
    for (int s = 0; s < 2; ++s) {
      curve.push_back(t.train_step().loss.total);
      curve.push_back(t.validate());
    }
    curves.push_back(curve);
    finals.push_back(t.model().parameters()[0]->value.values());
  }
  EXPECT_EQ(curves[0], curves[1]);
  EXPECT_EQ(finals[0], finals[1]);
}

TEST_F(TrainingData, RunWritesLogAndCheckpoints) {
  Dataset data(root_ / "data");
  auto tc = small_config();
  tc.max_steps = 2;
  const fs::path out = root_ / "run_full";
  Trainer t(model_config(Task::sprites, "TBA"), tc, data, out);
  const auto res = t.run();
  EXPECT_EQ(res.steps, 2);
  EXPECT_EQ(res.stop_reason, "max_steps");
  EXPECT_TRUE(fs::is_symlink(out / "latest"));
  EXPECT_TRUE(fs::is_symlink(out / "best"));
  std::ifstream log(out / "train_log.csv");
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "step,train_loss,val_loss,mse,tightness,mean_iterations_used");
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 2);

  const auto ck = load_checkpoint(out);  // directory resolves to latest
  EXPECT_EQ(ck.meta.step, 2);
  EXPECT_EQ(ck.meta.val_history.size(), 2u);
  auto a = t.model().parameters(), b = ck.model->parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  ASSERT_TRUE(ck.meta.has_moments);
  EXPECT_EQ(ck.first_moments[3], t.optimizer().first_moments()[3]);
  EXPECT_EQ(ck.meta.adam_steps, 2);

  Trainer resumed(model_config(Task::sprites, "TBA"), tc, data, root_ / "run_resumed");
  resumed.resume(out / "latest");
  EXPECT_EQ(resumed.step(), 2);
  EXPECT_EQ(resumed.model().parameters()[5]->value, a[5]->value);
  EXPECT_THROW(load_checkpoint(root_ / "missing"), IoError);
}

TEST_F(TrainingData, MismatchesAreConfigErrors) {
  Dataset data(root_ / "data");
  auto tc = small_config();
  tc.seq_len = 20;
  EXPECT_THROW(Trainer(model_config(Task::sprites, "TBA"), tc, data, root_ / "x"), ConfigError);
  EXPECT_THROW(Trainer(model_config(Task::mnist, "TBA"), small_config(), data, root_ / "x"), ConfigError);
  tc = small_config();
  tc.batch_size = 0;
  EXPECT_THROW(Trainer(model_config(Task::sprites, "TBA"), tc, data, root_ / "x"), ConfigError);
}

TEST_F(TrainingData, NonFiniteLossAborts) {
  Dataset data(root_ / "data");
  const fs::path out = root_ / "run_nan";
  Trainer t(model_config(Task::sprites, "TBA"), small_config(), data, out);
  for (auto* p : t.model().parameters()) {
    if (p->name == "head.out.bias") p->value.fill(std::numeric_limits<float>::quiet_NaN());
  }
  EXPECT_THROW(t.train_step(), NumericalError);
  EXPECT_TRUE(fs::exists(out / "nan_dump.json"));
}
