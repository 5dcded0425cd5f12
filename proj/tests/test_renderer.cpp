#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tba/renderer.hpp"
#include "tba/training.hpp"

using namespace tba;
using oracle::random_tensor;

namespace {

TrackerOutput<double> object(const ModelConfig& cfg, double conf, int layer, std::vector<double> pose,
                             double shape_value = 1.0, double appearance_value = 1.0) {
  TrackerOutput<double> o;
  o.confidence = conf;
  o.layer.assign(cfg.layers, 0.0);
  o.layer[layer] = 1.0;
  o.pose = std::move(pose);
  o.shape = Tensor<double>({cfg.patch_h, cfg.patch_w}, shape_value);
  o.appearance = Tensor<double>({cfg.channels, cfg.patch_h, cfg.patch_w}, appearance_value);
  return o;
}

TrackerOutput<double> random_object(const ModelConfig& cfg, std::mt19937_64& rng, bool binary_shape) {
  std::uniform_real_distribution<double> u(0, 1), p(-0.9, 0.9);
  TrackerOutput<double> o = object(cfg, u(rng), static_cast<int>(rng() % cfg.layers), {p(rng), p(rng), p(rng), p(rng)});
  for (auto& v : o.shape.values()) v = binary_shape ? (u(rng) < 0.7 ? 1.0 : 0.0) : u(rng);
  for (auto& v : o.appearance.values()) v = u(rng);
  return o;
}

ModelConfig square(int side, int patch, int layers = 3) {
  auto cfg = sprites_config();
  cfg.height = cfg.width = side;
  cfg.patch_h = cfg.patch_w = patch;
  cfg.layers = layers;
  return cfg;
}

}  // namespace

TEST(Transform, IdentityWarp) {
  const auto cfg = square(8, 8);
  std::mt19937_64 rng(1);
  const auto app = random_tensor({3, 8, 8}, rng, 0, 1);
  const auto t = spatial_transform(Tensor<double>::ones({8, 8}), app, Geometry{}, cfg);
  EXPECT_EQ(t.appearance, app);
  EXPECT_EQ(t.shape, Tensor<double>::ones({8, 8}));
}

TEST(Transform, ZeroShape) {
  const auto cfg = sprites_config();
  const auto t = spatial_transform(Tensor<double>({21, 21}), Tensor<double>::ones({3, 21, 21}),
                                   pose_to_geometry(std::vector<double>{0.3, -0.2, 0.1, 0.4}, cfg), cfg);
  for (double v : t.shape.values()) EXPECT_EQ(v, 0.0);
}

TEST(Transform, TranslatedImpulse) {
  const auto cfg = sprites_config();
  Tensor<double> app({3, 21, 21});
  app.at(0, 10, 10) = 1.0;
  auto centroid = [&](double shift_x) {
    Geometry g;
    g.shift_x = shift_x;
    const auto t = spatial_transform(Tensor<double>::ones({21, 21}), app, g, cfg);
    double mass = 0, mx = 0, my = 0;
    for (int y = 0; y < 128; ++y) {
      for (int x = 0; x < 128; ++x) {
        const double v = t.appearance.at(0, y, x);
        mass += v;
        mx += v * (x + 0.5);
        my += v * (y + 0.5);
      }
    }
    return std::array<double, 3>{mass, mx / mass, my / mass};
  };
  const auto c0 = centroid(0), c10 = centroid(10);
  EXPECT_NEAR(c10[0], 1.0, 1e-12);
  EXPECT_NEAR(c10[1], 74.0, 1e-12);
  EXPECT_NEAR(c10[2], 64.0, 1e-12);
  EXPECT_NEAR(c10[1] - c0[1], 10.0, 1e-12);
  // Brute-force bilinear: the impulse lands on four pixels with equal weight.
  Geometry g;
  g.shift_x = 10;
  const auto t = spatial_transform(Tensor<double>::ones({21, 21}), app, g, cfg);
  for (auto [y, x] : std::vector<std::pair<int, int>>{{63, 73}, {63, 74}, {64, 73}, {64, 74}}) {
    EXPECT_NEAR(t.appearance.at(0, y, x), 0.25, 1e-12);
  }
}

TEST(Layers, MinClampAndRouting) {
  const auto cfg = square(16, 5);
  const std::vector<TrackerOutput<double>> two = {object(cfg, 1, 0, {0, 0, 0, 0}), object(cfg, 1, 0, {0, 0, 0, 0})};
  const auto rec = render(two, Tensor<double>({3, 16, 16}), cfg);
  EXPECT_EQ(rec.layer_sums[0].at(8, 8), 2.0);
  EXPECT_EQ(rec.layer_masks[0].at(8, 8), 1.0);

  const auto one = render({object(cfg, 0.8, 1, {0.1, 0.2, 0.3, -0.1})}, Tensor<double>({3, 16, 16}), cfg);
  for (int k : {0, 2}) {
    for (double v : one.layer_masks[k].values()) EXPECT_EQ(v, 0.0);
    for (double v : one.layer_foregrounds[k].values()) EXPECT_EQ(v, 0.0);
  }
  double any = 0;
  for (double v : one.layer_masks[1].values()) any += v;
  EXPECT_GT(any, 0.0);
}

TEST(Layers, ZeroConfidence) {
  const auto cfg = square(16, 5);
  std::mt19937_64 rng(2);
  auto a = random_object(cfg, rng, true), b = random_object(cfg, rng, true);
  a.confidence = b.confidence = 0;
  const auto bg = random_tensor({3, 16, 16}, rng, 0, 1);
  const auto rec = render({a, b}, bg, cfg);
  for (int k = 0; k < 3; ++k) {
    for (double v : rec.layer_masks[k].values()) EXPECT_EQ(v, 0.0);
    for (double v : rec.layer_foregrounds[k].values()) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(rec.frame, bg);
}

TEST(Layers, ConfidenceLinearity) {
  const auto cfg = square(16, 5);
  std::mt19937_64 rng(3);
  auto a = random_object(cfg, rng, false);
  a.confidence = 0.2;
  const auto r1 = render({a}, Tensor<double>({3, 16, 16}), cfg);
  a.confidence = 0.4;
  const auto r2 = render({a}, Tensor<double>({3, 16, 16}), cfg);
  for (int k = 0; k < 3; ++k) {
    for (std::size_t p = 0; p < r1.layer_foregrounds[k].size(); ++p) {
      EXPECT_NEAR(r2.layer_foregrounds[k][p], 2 * r1.layer_foregrounds[k][p], 1e-12);
    }
  }
}

TEST(Compositing, FullMaskOverwrites) {
  auto cfg = square(8, 8, 1);
  std::mt19937_64 rng(4);
  auto o = object(cfg, 1.0, 0, {0, 0, 0, 0});
  o.appearance = random_tensor({3, 8, 8}, rng, 0, 1);
  const auto bg = random_tensor({3, 8, 8}, rng, 0, 1);
  const auto rec = render({o}, bg, cfg);
  EXPECT_EQ(rec.frame, rec.layer_foregrounds[0]);
  EXPECT_EQ(rec.frame, o.appearance);
  EXPECT_EQ(render({}, bg, cfg).frame, bg);
}

TEST(Compositing, TopLayerWinsOverlap) {
  const auto cfg = square(16, 5);
  auto lower = object(cfg, 1, 0, {0, 0, 0, 0}, 1.0, 0.2);
  auto upper = object(cfg, 1, 1, {0, 0, 0, 0}, 1.0, 0.9);
  const auto rec = render({upper, lower}, Tensor<double>({3, 16, 16}), cfg);
  const auto ref = oracle::reference_render({upper, lower}, Tensor<double>({3, 16, 16}), cfg);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(rec.frame.at(c, 8, 8), 0.9);
    EXPECT_EQ(ref.at(c, 8, 8), 0.9);
  }
}

TEST(Render, SingleObjectEqualsMaskedAppearance) {
  const auto cfg = square(16, 5);
  std::mt19937_64 rng(5);
  auto o = random_object(cfg, rng, true);
  const auto rec = render({o}, Tensor<double>({3, 16, 16}), cfg);
  const auto t = spatial_transform(o.shape, o.appearance, pose_to_geometry(o.pose, cfg), cfg);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        const double m = std::min(1.0, o.confidence * t.shape.at(y, x));
        const double expect = (1 - m) * 0.0 + o.confidence * t.shape.at(y, x) * t.appearance.at(c, y, x);
        EXPECT_NEAR(rec.frame.at(c, y, x), expect, 1e-12);
      }
    }
  }
}

TEST(Render, DeterministicAndMatchesOracle) {
  const auto cfg = sprites_config();
  std::mt19937_64 rng(6);
  for (int scene = 0; scene < 20; ++scene) {
    std::vector<TrackerOutput<double>> objs;
    const int n = 1 + static_cast<int>(rng() % 5);
    for (int i = 0; i < n; ++i) objs.push_back(random_object(cfg, rng, scene % 2 == 0));
    const auto bg = random_tensor({3, 128, 128}, rng, 0, 1);
    const auto a = render(objs, bg, cfg), b = render(objs, bg, cfg);
    EXPECT_EQ(a.frame, b.frame);
    EXPECT_LT(max_abs_diff(a.frame, oracle::reference_render(objs, bg, cfg)), 1e-6);
  }
}

TEST(Render, MnistModeClamps) {
  const auto cfg = mnist_config();
  TrackerOutput<double> o;
  o.confidence = 1;
  o.layer = {1.0};
  o.pose = {0, 0};
  o.shape = Tensor<double>::ones({28, 28});
  o.appearance = Tensor<double>({1, 28, 28}, 0.7);
  auto p = o;
  p.appearance.fill(0.6);
  const auto rec = render({o, p}, Tensor<double>({1, 128, 128}), cfg);
  EXPECT_EQ(rec.frame.at(0, 64, 64), 1.0);
  for (double v : rec.frame.values()) EXPECT_TRUE(v >= 0 && v <= 1);
}

TEST(Occlusion, FullyCoveredPixelsIgnoreLowerLayers) {
  const auto cfg = square(16, 5);
  std::mt19937_64 rng(7);
  auto top = object(cfg, 1, 2, {0, 0, 0.1, 0.05}, 1.0, 0.5);
  const auto bg = random_tensor({3, 16, 16}, rng, 0, 1);
  auto low1 = random_object(cfg, rng, true), low2 = random_object(cfg, rng, true);
  low1.layer = low2.layer = {1, 0, 0};
  const auto a = render({top, low1}, bg, cfg);
  const auto b = render({top, low2}, random_tensor({3, 16, 16}, rng, 0, 1), cfg);
  int covered = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      if (a.layer_masks[2].at(y, x) != 1.0) continue;
      ++covered;
      for (int c = 0; c < 3; ++c) EXPECT_EQ(a.frame.at(c, y, x), b.frame.at(c, y, x));
    }
  }
  EXPECT_GT(covered, 0);
}

// Finite-difference checks of the total loss through the renderer.
class RenderGradient : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_ = square(16, 5);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 3; ++i) {
      auto o = random_object(cfg_, rng, false);
      o.confidence = 0.3 + 0.2 * i;
      for (auto& v : o.pose) v *= 0.5;
      objs_.push_back(o);
    }
    target_ = random_tensor({3, 16, 16}, rng, 0, 1);
  }

  // field: 0 confidence, 1 pose, 2 shape, 3 appearance
  double error(int obj, int field) {
    const auto& src = objs_[obj];
    const Tensor<double> x = field == 0   ? Tensor<double>::scalar(src.confidence)
                             : field == 1 ? Tensor<double>::vector(src.pose)
                             : field == 2 ? src.shape.reshaped({25})
                                          : src.appearance.reshaped({75});
    return oracle::gradient_error(x, [&](Tape<double>& t, Var<double> v) {
      std::vector<TrackerOutputVars<double>> outs;
      for (int i = 0; i < 3; ++i) {
        const auto& o = objs_[i];
        TrackerOutputVars<double> ov;
        ov.tracker = i;
        ov.confidence = t.constant(Tensor<double>::scalar(o.confidence));
        ov.layer = t.constant(Tensor<double>::vector(o.layer));
        ov.pose = t.constant(Tensor<double>::vector(o.pose));
        ov.shape = t.constant(o.shape.reshaped({25}));
        ov.appearance = t.constant(o.appearance.reshaped({75}));
        if (i == obj) {
          Var<double>* slots[4] = {&ov.confidence, &ov.pose, &ov.shape, &ov.appearance};
          *slots[field] = v;
        }
        outs.push_back(ov);
      }
      return ad::render_loss(t, outs, 4, target_, Tensor<double>({3, 16, 16}), cfg_, 1.0).total;
    });
  }

  ModelConfig cfg_;
  std::vector<TrackerOutput<double>> objs_;
  Tensor<double> target_;
};

TEST_F(RenderGradient, Confidence) {
  for (int i = 0; i < 3; ++i) EXPECT_LT(error(i, 0), 1e-4) << "object " << i;
}
TEST_F(RenderGradient, Pose) {
  for (int i = 0; i < 3; ++i) EXPECT_LT(error(i, 1), 1e-4) << "object " << i;
}
TEST_F(RenderGradient, ShapeSoftPath) {
  for (int i = 0; i < 3; ++i) EXPECT_LT(error(i, 2), 1e-4) << "object " << i;
}
TEST_F(RenderGradient, Appearance) {
  for (int i = 0; i < 3; ++i) EXPECT_LT(error(i, 3), 1e-4) << "object " << i;
}
