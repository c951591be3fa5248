#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dsc/loss.hpp"
#include "dsc/network.hpp"
#include "support.hpp"

using namespace dsc;
using dsc::test::random_tensor;

namespace {

// Plain scalar grids for the hand-unrolled micro network.
struct Grid {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  Grid(std::size_t h_, std::size_t w_) : h(h_), w(w_), v(h_ * w_, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * w + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * w + j]; }
};

double R(double x) { return x > 0 ? x : 0.0; }
double S(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Grid from_plane(const Tensor<double>& t, std::size_t c) {
  Grid g(t.shape().h, t.shape().w);
  for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = t.plane(0, c)[i];
  return g;
}

// Single-channel 3x3 zero-padded convolution followed by relu.
Grid conv3_relu(const Grid& x, const Tensor<double>& w, double b) {
  Grid out(x.h, x.w);
  for (std::size_t i = 0; i < x.h; ++i)
    for (std::size_t j = 0; j < x.w; ++j) {
      double acc = b;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const long y = static_cast<long>(i) + di, z = static_cast<long>(j) + dj;
          if (y < 0 || z < 0 || y >= static_cast<long>(x.h) || z >= static_cast<long>(x.w)) continue;
          acc += w[static_cast<std::size_t>((di + 1) * 3 + (dj + 1))] * x(y, z);
        }
      out(i, j) = R(acc);
    }
  return out;
}

Grid pool(const Grid& x) {
  Grid out(x.h / 2, x.w / 2);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t j = 0; j < out.w; ++j)
      out(i, j) = std::max({x(2 * i, 2 * j), x(2 * i, 2 * j + 1), x(2 * i + 1, 2 * j), x(2 * i + 1, 2 * j + 1)});
  return out;
}

// 2x2 -> 4x4, corner aligned: source coordinate o * (2 - 1) / (4 - 1).
Grid upsample_2_to_4(const Grid& x) {
  Grid out(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double fy = i / 3.0, fx = j / 3.0;
      out(i, j) = (1 - fy) * ((1 - fx) * x(0, 0) + fx * x(0, 1)) + fy * ((1 - fx) * x(1, 0) + fx * x(1, 1));
    }
  return out;
}

// The four identity-free scans of a 2x2 single-channel grid with scalar alphas
// a[left, down, right, up].
std::array<Grid, 4> scans_2x2(const Grid& x, const double a[4]) {
  std::array<Grid, 4> s{Grid(2, 2), Grid(2, 2), Grid(2, 2), Grid(2, 2)};
  for (std::size_t i = 0; i < 2; ++i) {
    s[0](i, 1) = R(x(i, 1));
    s[0](i, 0) = R(a[0] * s[0](i, 1) + x(i, 0));
    s[2](i, 0) = R(x(i, 0));
    s[2](i, 1) = R(a[2] * s[2](i, 0) + x(i, 1));
  }
  for (std::size_t j = 0; j < 2; ++j) {
    s[1](0, j) = R(x(0, j));
    s[1](1, j) = R(a[1] * s[1](0, j) + x(1, j));
    s[3](1, j) = R(x(1, j));
    s[3](0, j) = R(a[3] * s[3](1, j) + x(0, j));
  }
  return s;
}

NetworkConfig micro_config() {
  NetworkConfig cfg;
  cfg.in_channels = 1;
  cfg.stage_channels = {1, 1};
  cfg.mlif_channels = 1;
  return cfg;
}

NetworkParams<double> micro_params(std::uint64_t seed) {
  auto net = init_network<double>(micro_config(), seed);
  Rng rng(seed + 100);
  for (auto& [name, t] : net.tensors)
    for (auto& v : t.data()) v = rng.uniform(-1, 1);
  return net;
}

struct MicroOut {
  Grid layer{4, 4}, mlif{4, 4}, fusion{4, 4};
};

MicroOut micro_oracle(const Tensor<double>& image, const ParamSet<double>& p) {
  auto W = [&](const std::string& n) -> const Tensor<double>& { return p.at(n); };
  auto B = [&](const std::string& n) { return p.at(n)[0]; };
  Grid f1 = conv3_relu(from_plane(image, 0), W("stage1.conv1.weight"), B("stage1.conv1.bias"));
  f1 = conv3_relu(f1, W("stage1.conv2.weight"), B("stage1.conv2.bias"));
  Grid f2 = conv3_relu(pool(f1), W("stage2.conv1.weight"), B("stage2.conv1.bias"));
  f2 = conv3_relu(f2, W("stage2.conv2.weight"), B("stage2.conv2.bias"));

  Grid att = conv3_relu(f2, W("stage2.dsc.att1.conv1.weight"), B("stage2.dsc.att1.conv1.bias"));
  att = conv3_relu(att, W("stage2.dsc.att1.conv2.weight"), B("stage2.dsc.att1.conv2.bias"));
  std::array<Grid, 4> gate{Grid(2, 2), Grid(2, 2), Grid(2, 2), Grid(2, 2)};
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < 4; ++i)
      gate[k].v[i] = W("stage2.dsc.att1.conv3.weight")[k] * att.v[i] + W("stage2.dsc.att1.conv3.bias")[k];

  const char* dirs[4] = {"left", "down", "right", "up"};
  auto alphas = [&](int r, double* a) {
    for (int k = 0; k < 4; ++k) a[k] = B("stage2.dsc.scan" + std::to_string(r) + ".alpha_" + dirs[k]);
  };
  double a1[4], a2[4];
  alphas(1, a1);
  alphas(2, a2);
  const auto s1 = scans_2x2(f2, a1);
  Grid y(2, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    y.v[i] = B("stage2.dsc.reduce1.bias");
    for (std::size_t k = 0; k < 4; ++k) y.v[i] += W("stage2.dsc.reduce1.weight")[k] * s1[k].v[i] * gate[k].v[i];
  }
  const auto s2 = scans_2x2(y, a2);
  Grid ctx(2, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    double acc = B("stage2.dsc.out.bias");
    for (std::size_t k = 0; k < 4; ++k) acc += W("stage2.dsc.out.weight")[k] * s2[k].v[i] * gate[k].v[i];
    ctx.v[i] = R(acc);
  }

  const Grid u0 = upsample_2_to_4(f2), u1 = upsample_2_to_4(ctx);
  MicroOut out;
  for (std::size_t i = 0; i < 16; ++i) {
    out.layer.v[i] = B("stage2.head.bias") + W("stage2.head.weight")[0] * u0.v[i] + W("stage2.head.weight")[1] * u1.v[i];
    const double m = R(B("mlif.bias") + W("mlif.weight")[0] * u0.v[i] + W("mlif.weight")[1] * u1.v[i]);
    out.mlif.v[i] = B("mlif_head.bias") + W("mlif_head.weight")[0] * m;
    out.fusion.v[i] = B("fusion.bias") + W("fusion.weight")[0] * out.layer.v[i] + W("fusion.weight")[1] * out.mlif.v[i];
  }
  return out;
}

}  // namespace

TEST(Network, ParameterLayout) {
  const NetworkConfig cfg;
  const auto net = init_network<float>(cfg, 1);
  EXPECT_TRUE(net.tensors.contains("stage1.conv1.weight"));
  EXPECT_FALSE(net.tensors.contains("stage1.dsc.out.weight"));
  EXPECT_FALSE(net.tensors.contains("stage1.head.weight"));
  for (int s : {2, 3, 4}) {
    EXPECT_TRUE(net.tensors.contains("stage" + std::to_string(s) + ".dsc.out.weight"));
    EXPECT_TRUE(net.tensors.contains("stage" + std::to_string(s) + ".head.weight"));
  }
  EXPECT_EQ(net.tensors.at("fusion.weight").shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(net.tensors.at("stage3.head.weight").shape(), (Shape{1, 64, 1, 1}));
}

TEST(Network, InitializationIsSeeded) {
  const NetworkConfig cfg;
  EXPECT_EQ(init_network<float>(cfg, 7).tensors, init_network<float>(cfg, 7).tensors);
  EXPECT_FALSE(init_network<float>(cfg, 7).tensors == init_network<float>(cfg, 8).tensors);
}

TEST(Network, ShapeContract) {
  for (bool use_dsc : {true, false}) {
    NetworkConfig cfg;
    cfg.use_dsc = use_dsc;
    const auto net = init_network<float>(cfg, 2);
    Rng rng(2);
    const auto out = forward(random_tensor<float>(rng, {1, 3, 64, 64}, 0, 1), net);
    ASSERT_EQ(out.layer_scores.size(), 3u);
    for (const auto& s : out.layer_scores) EXPECT_EQ(s.shape(), (Shape{1, 1, 64, 64}));
    EXPECT_EQ(out.mlif_score.shape(), (Shape{1, 1, 64, 64}));
    EXPECT_EQ(out.fusion_score.shape(), (Shape{1, 1, 64, 64}));
  }
}

TEST(Network, RejectsBadInputs) {
  const NetworkConfig cfg;
  const auto net = init_network<float>(cfg, 3);
  try {
    forward(Tensor<float>({1, 3, 60, 64}), net);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos) << e.what();
  }
  EXPECT_THROW(forward(Tensor<float>({1, 1, 64, 64}), net), ConfigError);
  EXPECT_THROW(forward(Tensor<float>({1, 3, 8, 8}, 1.5f), net), ConfigError);
}

TEST(Network, ZeroImageGivesHeadBiases) {
  NetworkConfig cfg;
  auto net = init_network<double>(cfg, 4);
  Rng rng(4);
  for (auto& [name, t] : net.tensors)
    if (name.ends_with(".bias")) t.fill(0);
  // Attention gating keeps its unit bias; it only multiplies zero scans.
  for (int s : {2, 3, 4}) net.tensors.at("stage" + std::to_string(s) + ".dsc.att1.conv3.bias").fill(1);
  const char* heads[] = {"stage2.head.bias", "stage3.head.bias", "stage4.head.bias", "mlif_head.bias", "fusion.bias"};
  for (const char* h : heads) net.tensors.at(h)[0] = rng.uniform(-1, 1);

  const auto out = forward(Tensor<double>({1, 3, 16, 16}), net);
  for (std::size_t l = 0; l < 3; ++l)
    for (double v : out.layer_scores[l].data()) EXPECT_EQ(v, net.tensors.at(heads[l])[0]);
  for (double v : out.mlif_score.data()) EXPECT_EQ(v, net.tensors.at("mlif_head.bias")[0]);
  const auto& fw = net.tensors.at("fusion.weight");
  double fusion = net.tensors.at("fusion.bias")[0];
  for (std::size_t k = 0; k < 4; ++k) fusion += fw[k] * net.tensors.at(heads[k])[0];
  for (double v : out.fusion_score.data()) EXPECT_NEAR(v, fusion, 1e-15);
}

TEST(Network, MicroNetworkMatchesHandUnroll) {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const auto net = micro_params(seed);
    Rng rng(seed);
    const auto image = random_tensor(rng, {1, 1, 4, 4}, 0, 1);
    const auto out = forward(image, net);
    const auto ref = micro_oracle(image, net.tensors);
    for (std::size_t i = 0; i < 16; ++i) {
      EXPECT_NEAR(out.layer_scores[0][i], ref.layer.v[i], 1e-12);
      EXPECT_NEAR(out.mlif_score[i], ref.mlif.v[i], 1e-12);
      EXPECT_NEAR(out.fusion_score[i], ref.fusion.v[i], 1e-12);
    }
    const auto p = predict(image, net);
    for (std::size_t i = 0; i < 16; ++i)
      EXPECT_NEAR(p[i], 0.5 * (S(ref.mlif.v[i]) + S(ref.fusion.v[i])), 1e-12);
  }
}

TEST(Network, MicroNetworkLossIsSumOfMapLosses) {
  const auto net = micro_params(9);
  Rng rng(9);
  const auto image = random_tensor(rng, {1, 1, 4, 4}, 0, 1);
  Tensor<double> y({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) y[i] = (i % 3 == 0) ? 1.0 : 0.0;
  const auto ref = micro_oracle(image, net.tensors);

  double expect = 0;
  for (const Grid* g : {&ref.layer, &ref.mlif, &ref.fusion}) {
    Tensor<double> prob({1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) prob[i] = S(g->v[i]);
    const ClassCounts c = count_classes(prob, y);
    expect += loss_l1(prob, y, c) + loss_l2(prob, y, c);
  }
  Tape<double> tape;
  ParamBinding<double> b(tape, net.tensors);
  LossReport report;
  Var total = overall_loss(tape, forward(b, net.config, tape.constant(image)), y, &report);
  EXPECT_NEAR(tape.value(total)[0], expect, 1e-12);
  EXPECT_NEAR(report.total, expect, 1e-12);
  EXPECT_NEAR(report.l1() + report.l2(), expect, 1e-12);
  EXPECT_EQ(report.maps.size(), 3u);
}

TEST(Network, PredictionInUnitIntervalAndPure) {
  NetworkConfig cfg;
  auto net = init_network<float>(cfg, 5);
  Rng rng(5);
  for (auto& [name, t] : net.tensors)
    for (auto& v : t.data()) v += static_cast<float>(rng.uniform(-0.5, 0.5));
  const auto image = random_tensor<float>(rng, {1, 3, 32, 32}, 0, 1);
  const auto p1 = predict(image, net);
  for (float v : p1.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(p1, predict(image, net));
}

TEST(Network, EqualScoresPredictHalf) {
  Tensor<double> z({1, 1, 3, 3});
  const auto p = combine_scores(z, z);
  for (double v : p.data()) EXPECT_EQ(v, 0.5);
}

TEST(Network, BasicNeverInvokesDsc) {
  NetworkConfig cfg;
  cfg.use_dsc = false;
  const auto net = init_network<float>(cfg, 6);
  for (const auto& name : net.tensors.names()) EXPECT_EQ(name.find(".dsc."), std::string::npos) << name;
  Tape<float> tape;
  ParamBinding<float> b(tape, net.tensors, false);
  forward(b, cfg, tape.constant(Tensor<float>({1, 3, 16, 16}, 0.5f)));
  EXPECT_EQ(tape.op_count("dsc_module"), 0u);
  EXPECT_EQ(tape.op_count("irnn_scan"), 0u);

  NetworkConfig full;
  const auto dnet = init_network<float>(full, 6);
  Tape<float> t2;
  ParamBinding<float> b2(t2, dnet.tensors, false);
  forward(b2, full, t2.constant(Tensor<float>({1, 3, 16, 16}, 0.5f)));
  EXPECT_EQ(t2.op_count("dsc_module"), 3u);
}

TEST(Network, EveryParameterReceivesGradient) {
  for (bool use_dsc : {true, false}) {
    NetworkConfig cfg;
    cfg.use_dsc = use_dsc;
    auto net = init_network<double>(cfg, 7);
    Rng rng(7);
    // Move off the neutral attention point so the estimator's inner layers are live.
    for (auto& [name, t] : net.tensors)
      if (name.find("conv3") != std::string::npos)
        for (auto& v : t.data()) v += rng.uniform(-0.2, 0.2);
    const auto image = random_tensor(rng, {1, 3, 32, 32}, 0, 1);
    Tensor<double> y({1, 1, 32, 32});
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
    Tape<double> tape;
    ParamBinding<double> b(tape, net.tensors);
    tape.backward(overall_loss(tape, forward(b, cfg, tape.constant(image)), y));
    const auto grads = b.gradients();
    for (const auto& name : net.tensors.names()) {
      ASSERT_TRUE(grads.contains(name)) << name;
      double mag = 0;
      for (double g : grads.at(name).data()) mag = std::max(mag, std::abs(g));
      EXPECT_GT(mag, 0.0) << name;
    }
  }
}
