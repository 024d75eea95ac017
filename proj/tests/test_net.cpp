#include <gtest/gtest.h>

#include <cmath>

#include "mareid/net.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mareid;
using namespace mareid::net;
using test::max_abs_diff;
using test::random_const;
using test::attention_oracle;

namespace {

NetConfig small_net(int k = 3) {
  NetConfig c;
  c.backbone_channels = {8, 8, 8};
  c.feature_dim = 16;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.encoder_layers = 1;
  c.num_parts = k;
  return c;
}

std::vector<double> to_vec(const ag::Var& v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

TEST(Net, StrideEightGrid) {
  Rng rng(1);
  Network model(small_net(), rng);
  Var feats = model.extract_features(Var::constant({2, 3, 64, 32}, 0.0));
  EXPECT_EQ(feats.shape(), (ag::Shape{2, 16, 8, 4}));
  for (double v : feats.value()) EXPECT_TRUE(std::isfinite(v));
  Var again = model.extract_features(Var::constant({2, 3, 64, 32}, 0.0));
  EXPECT_EQ(to_vec(feats), to_vec(again));
}

TEST(Net, AttentionSingleTokenIsIdentity) {
  Var t = Var::constant({1, 1, 5}, {0.3, -1.0, 2.0, 0.5, 7.0});
  EXPECT_EQ(to_vec(self_attention(t)), to_vec(t));
}

TEST(Net, AttentionIdenticalTokensReturnToken) {
  Var t = Var::constant({2, 4}, {1, 2, 3, 4, 1, 2, 3, 4});
  Var out = self_attention(t);
  EXPECT_LT(max_abs_diff(out.value(), t.value()), 1e-12);
}

TEST(Net, AttentionMatchesDenseOracle) {
  Rng rng(2);
  for (int l = 2; l <= 4; ++l) {
    const int d = 5;
    Var t = random_const(rng, {l, d});
    auto want = attention_oracle(to_vec(t), to_vec(t), to_vec(t), l, d);
    EXPECT_LT(max_abs_diff(self_attention(t).value(), want), 1e-6) << l;
    Var q = random_const(rng, {l, d}), k = random_const(rng, {l, d}), v = random_const(rng, {l, d});
    auto want2 = attention_oracle(to_vec(q), to_vec(k), to_vec(v), l, d);
    EXPECT_LT(max_abs_diff(scaled_dot_product_attention(q, k, v).value(), want2), 1e-12);
  }
}

TEST(Net, AttentionWeightsAreDistributions) {
  Rng rng(3);
  const int l = 6, d = 4;
  Var q = random_const(rng, {l, d}, 2.0), k = random_const(rng, {l, d}, 2.0);
  std::vector<double> eye(l * l, 0.0);
  for (int i = 0; i < l; ++i) eye[i * l + i] = 1.0;
  Var w = scaled_dot_product_attention(q, k, Var::constant({l, l}, eye));
  for (int i = 0; i < l; ++i) {
    double s = 0.0;
    for (int j = 0; j < l; ++j) {
      EXPECT_GE(w.at({i, j}), 0.0);
      s += w.at({i, j});
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Net, EncoderWithoutLayersIsProjection) {
  NetConfig c = small_net();
  c.encoder_layers = 0;
  Rng rng(4);
  Network model(c, rng);
  Rng data(5);
  Var tokens = random_const(data, {2, 32, 16});
  Var out = model.encode(tokens);
  Var want = ag::linear(tokens, model.params().get("input_proj.weight"), model.params().get("input_proj.bias"));
  EXPECT_EQ(to_vec(out), to_vec(want));
}

TEST(Net, EncoderShapeAndPositionSensitivity) {
  NetConfig c = small_net();
  c.learned_pos = true;
  Rng rng(6);
  Network model(c, rng);
  Rng data(7);
  Var feats = random_const(data, {1, 16, 8, 4});
  Var before = model.encode(model.tokens(feats));
  EXPECT_EQ(before.shape(), (ag::Shape{1, 32, 16}));
  auto pos = model.params().get("pos_embedding");
  std::vector<double> rows(pos.value().begin(), pos.value().end());
  auto mv = model.params().get("pos_embedding");
  auto dst = const_cast<Var&>(mv).mutable_value();
  for (int l = 0; l < 32; ++l)
    for (int t = 0; t < 16; ++t) dst[l * 16 + t] = rows[((l + 5) % 32) * 16 + t];
  Var after = model.encode(model.tokens(feats));
  EXPECT_GT(max_abs_diff(before.value(), after.value()), 1e-6);
}

TEST(Net, ConcatPositionMode) {
  NetConfig c = small_net();
  c.pos_mode = PosMode::kConcat;
  c.pos_dim = 8;
  Rng rng(8);
  Network model(c, rng);
  Var t = model.tokens(Var::constant({2, 16, 8, 4}, 0.5));
  EXPECT_EQ(t.shape(), (ag::Shape{2, 32, 24}));
  EXPECT_EQ(model.encode(t).shape(), (ag::Shape{2, 32, 16}));
}

TEST(Net, QueryCounts) {
  for (int k : {10, 1}) {
    Rng rng(9);
    Network model(small_net(k), rng);
    Rng data(10);
    auto [kp, seg] = model.decode_queries(random_const(data, {2, 32, 16}));
    EXPECT_EQ(kp.shape(), (ag::Shape{2, k, 16}));
    EXPECT_EQ(seg.shape(), (ag::Shape{2, k + 1, 16}));
    for (double v : kp.value()) EXPECT_TRUE(std::isfinite(v));
    for (double v : seg.value()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Net, ConstantMapGivesUniformHeatmap) {
  Rng rng(11);
  Var kp = random_const(rng, {1, 3, 4}), seg = random_const(rng, {1, 4, 4});
  std::vector<double> g;
  for (int l = 0; l < 6; ++l)
    for (double x : {0.2, -0.4, 1.0, 0.3}) g.push_back(x);
  HeadOutputs h = project_maps(kp, seg, Var::constant({1, 6, 4}, g));
  for (double v : h.heatmaps.value()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-8);
}

TEST(Net, HeatmapsAreDistributions) {
  Rng rng(12);
  HeadOutputs h = project_maps(random_const(rng, {3, 4, 5}), random_const(rng, {3, 5, 5}), random_const(rng, {3, 7, 5}));
  for (int n = 0; n < 3; ++n)
    for (int k = 0; k < 4; ++k) {
      double s = 0.0;
      for (int l = 0; l < 7; ++l) {
        double v = h.heatmaps.at({n, k, l});
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  EXPECT_EQ(h.seg_logits.shape(), (ag::Shape{3, 5, 7}));
}

TEST(Net, OrthogonalEmbeddingsHandComputed) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  Var e = Var::constant({1, 2, 2}, {1, 0, 0, 1});
  Var f = Var::constant({1, 2, 2}, {0.5, -1.0, 2.0, 0.25});
  HeadOutputs h = project_maps(e, e, f);
  const double a0 = sig(0.5), a1 = sig(2.0), b0 = sig(-1.0), b1 = sig(0.25);
  EXPECT_NEAR(h.heatmaps.at({0, 0, 0}), a0 / (a0 + a1 + 1e-8), 1e-12);
  EXPECT_NEAR(h.heatmaps.at({0, 0, 1}), a1 / (a0 + a1 + 1e-8), 1e-12);
  EXPECT_NEAR(h.heatmaps.at({0, 1, 0}), b0 / (b0 + b1 + 1e-8), 1e-12);
  EXPECT_NEAR(h.heatmaps.at({0, 1, 1}), b1 / (b0 + b1 + 1e-8), 1e-12);
  EXPECT_DOUBLE_EQ(h.seg_logits.at({0, 0, 1}), 2.0);
  EXPECT_DOUBLE_EQ(h.seg_logits.at({0, 1, 0}), -1.0);
}

TEST(Net, ForwardOutputsFiniteOnRandomInputs) {
  NetConfig c;
  c.num_parts = 10;
  Rng rng(13);
  Network model(c, rng);
  Rng data(14);
  ag::NoGradGuard ng;
  for (int batch = 0; batch < 10; ++batch) {
    Var images = random_const(data, {100, 3, 64, 32}, 1.0 + batch);
    NetOutputs out = model.forward(images);
    for (const Var* v : {&out.global, &out.heads.heatmaps, &out.heads.seg_logits, &out.parts, &out.keypoints.coords,
                         &out.keypoints.jacobians})
      for (double x : v->value()) ASSERT_TRUE(std::isfinite(x));
    for (double x : out.keypoints.coords.value()) {
      EXPECT_GE(x, -1.0 - 1e-12);
      EXPECT_LE(x, 1.0 + 1e-12);
    }
    const int l = 32;
    for (int n = 0; n < 100; ++n)
      for (int z = 0; z < l; ++z) {
        double s = 0.0;
        for (int k = 0; k <= 10; ++k) s += out.parts.at({n, k, z});
        ASSERT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(Net, ParameterGroupsAndDecay) {
  Rng rng(15);
  NetConfig c = small_net();
  c.num_classes = 4;
  Network model(c, rng);
  int keypoint = 0;
  for (const auto& p : model.params().entries()) {
    bool is_norm = p.name.find("norm") != std::string::npos;
    EXPECT_EQ(p.decay, !is_norm) << p.name;
    keypoint += p.group == "keypoint";
  }
  EXPECT_GT(keypoint, 0);
  EXPECT_TRUE(model.params().contains("classifier.global.weight"));
  EXPECT_EQ(model.classify_global(Var::constant({2, 16}, 1.0)).shape(), (ag::Shape{2, 4}));
}

TEST(Net, InvalidConfigRejected) {
  NetConfig c = small_net();
  c.height = 12;
  Rng rng(16);
  EXPECT_ANY_THROW(Network(c, rng));
  c = small_net();
  c.num_parts = 0;
  EXPECT_ANY_THROW(Network(c, rng));
}
