#include "fcp/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fcp/rng.hpp"

namespace fcp {
namespace {

MlpParams single_layer(const Matrix& w, const Vector& b) {
  MlpParams p;
  p.layers.push_back({w, b});
  return p;
}

// Straight-line re-implementation of the affine/ReLU chain, kept independent
// of run_layers on purpose.
Vector naive_forward(const MlpParams& params, const Vector& x) {
  Vector cur = x;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const Matrix& w = params.layers[l].weight;
    Vector next(w.rows, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
      next[i] = params.layers[l].bias[i];
      for (std::size_t j = 0; j < w.cols; ++j) next[i] += w(i, j) * cur[j];
    }
    if (l + 1 < params.layers.size())
      for (double& v : next) v = std::max(v, 0.0);
    cur = next;
  }
  return cur;
}

SplitModel random_model(const std::vector<std::size_t>& widths, std::size_t split,
                        std::uint64_t seed) {
  MlpSpec spec{widths};
  return SplitModel(spec, init_params(spec, seed), split);
}

TEST(MlpForward, AffineIdentityCase) {
  Matrix w(2, 2);
  w(0, 0) = 2.0;
  w(1, 1) = 3.0;
  const Vector out = mlp_forward(single_layer(w, {1.0, 1.0}), Vector{1.0, 1.0});
  EXPECT_DOUBLE_EQ(out[0], 3.0);
  EXPECT_DOUBLE_EQ(out[1], 4.0);
}

TEST(MlpForward, ReluKillsNegativePreactivation) {
  Matrix w1(1, 2);
  w1(0, 0) = 1.0;
  w1(0, 1) = -1.0;
  Matrix w2(1, 1);
  w2(0, 0) = 2.0;
  MlpParams p;
  p.layers.push_back({w1, {0.0}});
  p.layers.push_back({w2, {0.0}});
  const Vector out = mlp_forward(p, Vector{0.0, 1.0});
  EXPECT_DOUBLE_EQ(out[0], 0.0);
}

TEST(MlpForward, MatchesNaiveChainOnRandomNets) {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const SplitModel m = random_model({3, 5, 4, 2}, 1, 100 + rep);
    Vector x(3);
    for (double& v : x) v = rng.uniform(-2.0, 2.0);
    const Vector got = m.forward(x);
    const Vector want = naive_forward(m.params(), x);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t j = 0; j < got.size(); ++j) EXPECT_DOUBLE_EQ(got[j], want[j]);
  }
}

TEST(MlpForward, DimensionMismatchThrows) {
  const SplitModel m = random_model({3, 4, 2}, 1, 5);
  EXPECT_THROW(m.forward(Vector{1.0, 2.0}), std::invalid_argument);
  EXPECT_THROW(m.feature_forward(Vector{1.0}), std::invalid_argument);
  EXPECT_THROW(m.head_forward(Vector{1.0}), std::invalid_argument);
}

TEST(SplitModel, FeatureForwardIsFirstLayerOutput) {
  // Two-layer net split before the last layer: the feature is the first
  // affine+ReLU output.
  const SplitModel m = random_model({3, 4, 2}, 1, 11);
  const Vector x{0.5, -1.0, 2.0};
  const Vector feat = m.feature_forward(x);
  MlpParams first_only;
  first_only.layers.push_back(m.layer(0));
  Vector expect(m.layer(0).weight.rows);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    expect[i] = m.layer(0).bias[i];
    for (std::size_t j = 0; j < x.size(); ++j) expect[i] += m.layer(0).weight(i, j) * x[j];
    expect[i] = std::max(expect[i], 0.0);
  }
  ASSERT_EQ(feat.size(), expect.size());
  for (std::size_t j = 0; j < feat.size(); ++j) EXPECT_DOUBLE_EQ(feat[j], expect[j]);
}

TEST(SplitModel, IdentityFirstLayerPassesNonnegativeInputThrough) {
  Matrix w1(3, 3);
  for (std::size_t i = 0; i < 3; ++i) w1(i, i) = 1.0;
  Matrix w2(2, 3, 0.25);
  MlpParams p;
  p.layers.push_back({w1, Vector(3, 0.0)});
  p.layers.push_back({w2, Vector(2, 0.0)});
  const SplitModel m(MlpSpec{{3, 3, 2}}, p, 1);
  const Vector x{0.0, 1.5, 2.0};
  const Vector feat = m.feature_forward(x);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(feat[j], x[j]);
}

TEST(SplitModel, CompositionIdentityIsBitwise) {
  Rng rng(3);
  const SplitModel m = random_model({4, 8, 8, 8, 3}, 2, 42);
  for (int rep = 0; rep < 100; ++rep) {
    Vector x(4);
    for (double& v : x) v = rng.uniform(-3.0, 3.0);
    const Vector direct = m.forward(x);
    const Vector composed = m.head_forward(m.feature_forward(x));
    ASSERT_EQ(direct.size(), composed.size());
    for (std::size_t j = 0; j < direct.size(); ++j)
      EXPECT_EQ(direct[j], composed[j]);  // exact, not approximate
  }
}

TEST(SplitModel, SplitIndexMustLeaveLayersOnBothSides) {
  MlpSpec spec{{3, 4, 2}};
  MlpParams p = init_params(spec, 1);
  EXPECT_THROW(SplitModel(spec, p, 0), std::invalid_argument);
  EXPECT_THROW(SplitModel(spec, p, 2), std::invalid_argument);
  EXPECT_NO_THROW(SplitModel(spec, p, 1));
}

TEST(HeadGradient, IdentityHeadMseGradientIsTwoV) {
  // head = identity affine layer; loss ||v - y||^2 with y = 0 gives 2v.
  Matrix w1(2, 2);
  w1(0, 0) = w1(1, 1) = 1.0;
  Matrix w2(2, 2);
  w2(0, 0) = w2(1, 1) = 1.0;
  MlpParams p;
  p.layers.push_back({w1, Vector(2, 0.0)});
  p.layers.push_back({w2, Vector(2, 0.0)});
  const SplitModel m(MlpSpec{{2, 2, 2}}, p, 1);
  const Vector g = m.head_input_gradient(Vector{1.0, 2.0}, Vector{0.0, 0.0}, LossKind::mse());
  EXPECT_DOUBLE_EQ(g[0], 2.0);
  EXPECT_DOUBLE_EQ(g[1], 4.0);
}

TEST(HeadGradient, ScalarLinearHeadChainRule) {
  // g(v) = 3v, y = 0: d(3v)^2/dv = 2*3*(3v) = 18 at v = 1.
  Matrix w1(1, 1);
  w1(0, 0) = 1.0;
  Matrix w2(1, 1);
  w2(0, 0) = 3.0;
  MlpParams p;
  p.layers.push_back({w1, {0.0}});
  p.layers.push_back({w2, {0.0}});
  const SplitModel m(MlpSpec{{1, 1, 1}}, p, 1);
  const Vector g = m.head_input_gradient(Vector{1.0}, Vector{0.0}, LossKind::mse());
  EXPECT_DOUBLE_EQ(g[0], 18.0);
}

TEST(HeadGradient, PinballRejected) {
  const SplitModel m = random_model({2, 3, 1}, 1, 9);
  EXPECT_THROW(m.head_input_gradient(Vector{1.0, 2.0, 3.0}, Vector{0.0}, LossKind::pinball(0.9)),
               std::invalid_argument);
}

// Central finite differences against the analytic gradient, away from ReLU
// kinks.  Also the gradient-correctness property: 50 random (net, v, y) pairs.
TEST(HeadGradient, MatchesCentralFiniteDifferences) {
  Rng rng(21);
  int checked = 0;
  for (int rep = 0; rep < 200 && checked < 50; ++rep) {
    const SplitModel m = random_model({3, 6, 5, 2}, 1, 500 + rep);
    Vector v(6), y(2);
    for (double& t : v) t = rng.uniform(-1.5, 1.5);
    for (double& t : y) t = rng.uniform(-1.5, 1.5);

    // keep away from kinks: all hidden pre-activations >= 1e-3 in magnitude
    bool safe = true;
    Vector cur = v;
    for (std::size_t l = m.split_index(); l < m.num_layers(); ++l) {
      Vector z(m.layer(l).weight.rows);
      for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = m.layer(l).bias[i] + dot(m.layer(l).weight.row(i), cur);
        if (m.relu_after(l) && std::abs(z[i]) < 1e-3) safe = false;
      }
      if (m.relu_after(l))
        for (double& t : z) t = std::max(t, 0.0);
      cur = z;
    }
    if (!safe) continue;
    ++checked;

    const Vector g = m.head_input_gradient(v, y, LossKind::mse());
    const double h = 1e-5;
    for (std::size_t j = 0; j < v.size(); ++j) {
      Vector vp = v, vm = v;
      vp[j] += h;
      vm[j] -= h;
      auto loss_at = [&](const Vector& u) {
        const Vector out = m.head_forward(u);
        double s = 0.0;
        for (std::size_t k = 0; k < out.size(); ++k) s += (out[k] - y[k]) * (out[k] - y[k]);
        return s;
      };
      const double fd = (loss_at(vp) - loss_at(vm)) / (2.0 * h);
      const double scale = std::max({std::abs(fd), std::abs(g[j]), 1e-8});
      EXPECT_NEAR(g[j], fd, 1e-4 * scale) << "rep " << rep << " dim " << j;
    }
  }
  EXPECT_GE(checked, 50);
}

TEST(HeadGradient, SoftmaxCrossEntropyMatchesFiniteDifferences) {
  Rng rng(31);
  const SplitModel m = random_model({3, 5, 4, 3}, 2, 77);
  for (int rep = 0; rep < 10; ++rep) {
    Vector v(4), y(3, 0.0);
    for (double& t : v) t = rng.uniform(0.05, 1.5);  // keep hidden units active
    y[static_cast<std::size_t>(rng.below(3))] = 1.0;
    const Vector g = m.head_input_gradient(v, y, LossKind::softmax_cross_entropy());
    const double h = 1e-6;
    for (std::size_t j = 0; j < v.size(); ++j) {
      Vector vp = v, vm = v;
      vp[j] += h;
      vm[j] -= h;
      auto loss_at = [&](const Vector& u) {
        const Vector p = softmax(m.head_forward(u));
        double s = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k)
          if (y[k] > 0.0) s -= y[k] * std::log(p[k]);
        return s;
      };
      const double fd = (loss_at(vp) - loss_at(vm)) / (2.0 * h);
      EXPECT_NEAR(g[j], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Train, LinearTargetRecoversSlope) {
  // y = 2x fitted by a single affine layer; least-squares oracle on the same
  // data gives the slope to compare against.
  Rng rng(13);
  const std::size_t n = 256;
  Matrix X(n, 1), Y(n, 1);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    X(i, 0) = x;
    Y(i, 0) = 2.0 * x;
    sxy += x * Y(i, 0);
    sxx += x * x;
  }
  const double oracle = sxy / sxx;  // == 2 exactly for noise-free data
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  cfg.seed = 3;
  const MlpParams p = train_params(MlpSpec{{1, 1}}, X, Y, LossKind::mse(), cfg);
  EXPECT_NEAR(p.layers[0].weight(0, 0), oracle, 0.05 * std::abs(oracle));
}

TEST(Train, ZeroEpochsReturnsInitializationUnchanged) {
  Rng rng(17);
  Matrix X(8, 2), Y(8, 1);
  for (double& v : X.data) v = rng.normal();
  for (double& v : Y.data) v = rng.normal();
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 99;
  const MlpSpec spec{{2, 4, 1}};
  const MlpParams trained = train_params(spec, X, Y, LossKind::mse(), cfg);
  const MlpParams init = init_params(spec, 99);
  for (std::size_t l = 0; l < trained.layers.size(); ++l) {
    EXPECT_EQ(trained.layers[l].weight.data, init.layers[l].weight.data);
    EXPECT_EQ(trained.layers[l].bias, init.layers[l].bias);
  }
}

TEST(Train, PinballLearnsNoiseQuantile) {
  // Constant feature, standard-normal targets: tau = 0.9 pulls the single
  // weight toward the empirical 0.9-quantile of the sampled noise.
  Rng rng(29);
  const std::size_t n = 4000;
  Matrix X(n, 1, 1.0), Y(n, 1);
  std::vector<double> noise(n);
  for (std::size_t i = 0; i < n; ++i) {
    noise[i] = rng.normal();
    Y(i, 0) = noise[i];
  }
  std::sort(noise.begin(), noise.end());
  const double target = noise[static_cast<std::size_t>(std::ceil(0.9 * n)) - 1];
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 64;
  cfg.learning_rate = 0.05;
  cfg.seed = 8;
  const MlpParams p = train_params(MlpSpec{{1, 1}}, X, Y, LossKind::pinball(0.9), cfg);
  // the learned constant is weight * 1 + bias
  EXPECT_NEAR(p.layers[0].weight(0, 0) + p.layers[0].bias[0], target, 0.08);
  EXPECT_NEAR(target, 1.28, 0.1);  // sanity on the sampled quantile itself
}

TEST(Train, DeterministicGivenSeed) {
  Rng rng(41);
  Matrix X(64, 3), Y(64, 2);
  for (double& v : X.data) v = rng.normal();
  for (double& v : Y.data) v = rng.normal();
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 1234;
  const MlpSpec spec{{3, 8, 2}};
  const MlpParams a = train_params(spec, X, Y, LossKind::mse(), cfg);
  const MlpParams b = train_params(spec, X, Y, LossKind::mse(), cfg);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].weight.data, b.layers[l].weight.data);
    EXPECT_EQ(a.layers[l].bias, b.layers[l].bias);
  }
}

TEST(Train, LossDecreasesOverTraining) {
  Rng rng(55);
  const std::size_t n = 512;
  Matrix X(n, 4), Y(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 4; ++j) X(i, j) = rng.uniform(-1.0, 1.0);
    Y(i, 0) = X(i, 0) + 0.5 * X(i, 1);
    Y(i, 1) = X(i, 2) * 0.25 - X(i, 3);
  }
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.learning_rate = 0.02;
  cfg.seed = 6;
  TrainTrace trace;
  train_params(MlpSpec{{4, 16, 2}}, X, Y, LossKind::mse(), cfg, &trace);
  EXPECT_LT(trace.final_loss, trace.initial_loss);
}

TEST(Train, NonFiniteLossAborts) {
  Rng rng(61);
  Matrix X(32, 2), Y(32, 1);
  for (double& v : X.data) v = rng.normal() * 10.0;
  for (double& v : Y.data) v = rng.normal() * 10.0;
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 1e6;  // guaranteed blow-up
  cfg.seed = 2;
  EXPECT_THROW(train_params(MlpSpec{{2, 8, 1}}, X, Y, LossKind::mse(), cfg),
               std::runtime_error);
}

TEST(Train, ShapeMismatchThrows) {
  Matrix X(4, 2), Y(3, 1);
  TrainConfig cfg;
  EXPECT_THROW(train_params(MlpSpec{{2, 4, 1}}, X, Y, LossKind::mse(), cfg),
               std::invalid_argument);
  Matrix Y2(4, 2);
  EXPECT_THROW(train_params(MlpSpec{{2, 4, 1}}, X, Y2, LossKind::mse(), cfg),
               std::invalid_argument);
}

TEST(ReluNets, PiecewiseLinearForFixedActivationPattern) {
  Rng rng(71);
  int checked = 0;
  for (int rep = 0; rep < 100 && checked < 10; ++rep) {
    const SplitModel m = random_model({3, 6, 6, 2}, 1, 900 + rep);
    Vector x(3);
    for (double& v : x) v = rng.uniform(-1.0, 1.0);

    // require a margin at every hidden pre-activation
    bool safe = true;
    Vector cur = x;
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      Vector z(m.layer(l).weight.rows);
      for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = m.layer(l).bias[i] + dot(m.layer(l).weight.row(i), cur);
        if (m.relu_after(l) && std::abs(z[i]) < 1e-2) safe = false;
      }
      if (m.relu_after(l))
        for (double& t : z) t = std::max(t, 0.0);
      cur = z;
    }
    if (!safe) continue;
    ++checked;

    Vector d1(3), d2(3);
    for (double& v : d1) v = rng.uniform(-1e-4, 1e-4);
    for (double& v : d2) v = rng.uniform(-1e-4, 1e-4);
    const Vector f0 = m.forward(x);
    auto delta_f = [&](const Vector& d) {
      Vector xp = x;
      for (std::size_t j = 0; j < 3; ++j) xp[j] += d[j];
      Vector f = m.forward(xp);
      for (std::size_t j = 0; j < f.size(); ++j) f[j] -= f0[j];
      return f;
    };
    Vector d12(3);
    for (std::size_t j = 0; j < 3; ++j) d12[j] = d1[j] + d2[j];
    const Vector a = delta_f(d1), b = delta_f(d2), ab = delta_f(d12);
    for (std::size_t j = 0; j < a.size(); ++j)
      EXPECT_NEAR(ab[j], a[j] + b[j], 1e-9);  // additivity on the linear piece
    Vector twice(3);
    for (std::size_t j = 0; j < 3; ++j) twice[j] = 2.0 * d1[j];
    const Vector t = delta_f(twice);
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(t[j], 2.0 * a[j], 1e-9);
  }
  EXPECT_GE(checked, 10);
}

TEST(Serialization, ModelRoundTripsBitwise) {
  const SplitModel m = random_model({5, 7, 6, 3}, 2, 321);
  const std::string path =
      (std::filesystem::temp_directory_path() / "fcp_model_roundtrip.bin").string();
  save_model(m, path);
  const SplitModel loaded = load_model(path);
  std::filesystem::remove(path);
  EXPECT_EQ(loaded.split_index(), m.split_index());
  EXPECT_EQ(loaded.spec().layer_widths, m.spec().layer_widths);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    EXPECT_EQ(loaded.layer(l).weight.data, m.layer(l).weight.data);
    EXPECT_EQ(loaded.layer(l).bias, m.layer(l).bias);
  }
}

}  // namespace
}  // namespace fcp
