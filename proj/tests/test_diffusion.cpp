#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "topoguide/diffusion.hpp"

using namespace topoguide;

namespace {

DenoiserConfig small_cfg(int D = 5) {
  DenoiserConfig c;
  c.latent_dim = D;
  c.width = 16;
  c.blocks = 2;
  c.time_dim = 8;
  return c;
}

// Initialized weights plus a random output layer and layer-norm affine terms
// so every path carries signal.
DenoiserWeights<double> random_denoiser(const DenoiserConfig& c, std::uint64_t seed) {
  auto w = init_denoiser(c, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  for (Eigen::Index i = 0; i < w.out.w.size(); ++i) w.out.w.data()[i] = n(rng);
  for (auto& b : w.blocks) {
    for (Eigen::Index i = 0; i < b.ln.gamma.size(); ++i) b.ln.gamma[i] += n(rng);
    for (Eigen::Index i = 0; i < b.ln.beta.size(); ++i) b.ln.beta[i] = n(rng);
  }
  for (Eigen::Index i = 0; i < w.out_ln.beta.size(); ++i) w.out_ln.beta[i] = n(rng);
  return w;
}

Eigen::VectorXd randn(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  return standard_normal(rng, n);
}

}  // namespace

TEST(Schedule, Examples) {
  const auto s = make_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(s.abar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.abar(2), 0.72, 1e-15);

  const auto d = make_schedule();
  EXPECT_EQ(d.T, 1000);
  for (int t = 2; t <= d.T; ++t) {
    EXPECT_LT(d.abar(t), d.abar(t - 1));
    EXPECT_GE(d.b(t), d.b(t - 1));
    EXPECT_DOUBLE_EQ(d.sig(t), std::sqrt(d.b(t)));
  }
  // Oracle: sum of logs rather than a running product.
  double log_abar = 0;
  for (int i = 0; i < 1000; ++i) log_abar += std::log1p(-(1e-4 + (0.02 - 1e-4) * i / 999.0));
  EXPECT_NEAR(d.abar(1000), std::exp(log_abar), 1e-15);
  EXPECT_NEAR(d.abar(1000), 4.04e-5, 0.01e-5);

  EXPECT_THROW(make_schedule(1, 0.1, 0.2), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.2, 0.1), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.0, 0.1), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), std::invalid_argument);
}

TEST(ForwardNoise, Examples) {
  const auto s = make_schedule(2, 0.5, 0.5);  // abar = (0.5, 0.25)
  const auto z = forward_noise(Eigen::Vector2d(1, 0), 2, Eigen::Vector2d(0, 1), s);
  EXPECT_NEAR(z[0], 0.5, 1e-15);
  EXPECT_NEAR(z[1], std::sqrt(0.75), 1e-15);
  const auto z2 = forward_noise(Eigen::Vector2d(2, -4), 1, Eigen::Vector2d::Zero().eval(), s);
  EXPECT_NEAR(z2[0], std::sqrt(0.5) * 2, 1e-15);
  EXPECT_THROW(forward_noise(Eigen::Vector2d(1, 0), 3, Eigen::Vector2d(0, 1), s), std::out_of_range);
  EXPECT_THROW(forward_noise(Eigen::Vector2d(1, 0), 0, Eigen::Vector2d(0, 1), s), std::out_of_range);
}

TEST(ForwardNoise, MarginalMomentsAtT) {
  const auto s = make_schedule();
  Eigen::VectorXd z0(3);
  z0 << 2.0, -1.0, 0.5;
  Rng rng(12);
  const int n = 10000;
  Eigen::MatrixXd draws(n, 3);
  for (int i = 0; i < n; ++i) draws.row(i) = forward_noise(z0, s.T, standard_normal(rng, 3), s).transpose();
  const Eigen::VectorXd mean = draws.colwise().mean();
  const double var_expect = 1 - s.abar(s.T);
  for (int d = 0; d < 3; ++d) {
    const double se = std::sqrt(var_expect / n);
    EXPECT_NEAR(mean[d], std::sqrt(s.abar(s.T)) * z0[d], 3 * se);
    const double var = (draws.col(d).array() - mean[d]).square().sum() / n;
    EXPECT_NEAR(var, var_expect, 3 * var_expect * std::sqrt(2.0 / n));
  }
}

TEST(PredictClean, InvertsForwardNoise) {
  const auto s = make_schedule();
  for (int t : {1, 10, 500, 999, 1000}) {
    const auto z0 = randn(8, static_cast<std::uint64_t>(t));
    const auto eps = randn(8, static_cast<std::uint64_t>(t) + 100);
    const auto back = predict_clean(forward_noise(z0, t, eps, s), t, eps, s);
    EXPECT_LE((back - z0).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, 1.0 / std::sqrt(s.abar(t)) * 1e-4)) << t;
  }
  const auto zt = randn(4, 3);
  EXPECT_TRUE(predict_clean(zt, 7, Eigen::VectorXd::Zero(4), s).isApprox(zt / std::sqrt(s.abar(7))));
  // Independent arithmetic on one case.
  const auto e = randn(4, 4);
  const double ab = s.abar(321);
  for (int i = 0; i < 4; ++i)
    EXPECT_NEAR(predict_clean(zt, 321, e, s)[i], (zt[i] - std::sqrt(1 - ab) * e[i]) / std::sqrt(ab), 1e-14);
}

TEST(DdpmStep, Examples) {
  const auto s = make_schedule();
  const auto z = randn(4, 1);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(4);
  EXPECT_TRUE(ddpm_step(z, 300, zero, zero, s).isApprox(z / std::sqrt(s.a(300))));

  // Telescoping: T steps with no noise and no prediction.
  Eigen::VectorXd x = z;
  for (int t = s.T; t >= 1; --t) x = ddpm_step(x, t, zero, zero, s);
  EXPECT_LE((x - z / std::sqrt(s.abar(s.T))).norm(), 1e-9 * x.norm());

  // Single step with the true noise equals the posterior-mean formula.
  const auto s2 = make_schedule(2, 0.1, 0.2);
  const auto z0 = randn(4, 7), eps = randn(4, 8);
  const auto z1 = forward_noise(z0, 1, eps, s2);
  const auto back = ddpm_step(z1, 1, eps, zero, s2);
  const double c = 0.1 / std::sqrt(1 - 0.9);
  EXPECT_LE((back - (z1 - c * eps) / std::sqrt(0.9)).norm(), 1e-15);
  EXPECT_LE((back - z0).norm(), 1e-12);

  const auto n = randn(4, 9);
  EXPECT_THROW(ddpm_step(z, 1, zero, n, s), std::invalid_argument);
  EXPECT_THROW(ddpm_step(z, 1001, zero, zero, s), std::out_of_range);
  EXPECT_TRUE(ddpm_step(z, 2, zero, n, s).isApprox(z / std::sqrt(s.a(2)) + s.sig(2) * n));
}

TEST(Denoiser, ZeroWeightsAndDeterminism) {
  const auto c = small_cfg();
  const auto zw = DenoiserWeights<double>::zeros(c);
  EXPECT_TRUE(denoiser_apply(zw, randn(5, 1), 10).isZero(0));
  // Fresh initialization also predicts zero (zero output layer).
  EXPECT_TRUE(denoiser_apply(init_denoiser(c, 3), randn(5, 1), 10).isZero(0));

  const auto w = random_denoiser(c, 4);
  const auto z = randn(5, 2);
  const auto a = denoiser_apply(w, z, 37), b = denoiser_apply(w, z, 37);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a.isZero());
  EXPECT_NE(a, denoiser_apply(w, z, 38));
  EXPECT_THROW(denoiser_apply(w, randn(4, 1), 1), std::invalid_argument);
}

TEST(Denoiser, BatchMatchesSingle) {
  const auto c = small_cfg();
  const auto w = random_denoiser(c, 5);
  MatX<double> z(5, 3);
  z << randn(5, 1), randn(5, 2), randn(5, 3);
  const auto out = denoiser_forward(w, z, {1, 500, 1000});
  EXPECT_LE((out.col(1) - denoiser_apply(w, z.col(1), 500)).norm(), 1e-13);
  EXPECT_LE((out.col(2) - denoiser_apply(w, z.col(2), 1000)).norm(), 1e-13);
}

TEST(Denoiser, VjpMatchesFiniteDifferences) {
  const auto c = small_cfg(6);
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto w = random_denoiser(c, 10 + k);
    const auto z = randn(6, 20 + k);
    const auto ct = randn(6, 40 + k);
    const int t = 1 + static_cast<int>(k * 47 % 1000);
    const auto [eps, g] = denoiser_vjp(w, z, t, ct);
    EXPECT_EQ(eps, denoiser_apply(w, z, t));
    const auto fd = finite_diff_gradient([&](const Eigen::VectorXd& x) { return ct.dot(denoiser_apply(w, x, t)); },
                                         z, 1e-5);
    EXPECT_LE((g - fd).norm(), 1e-4 * std::max(1.0, fd.norm())) << k;
  }
}

TEST(Denoiser, ParameterGradientsMatchFiniteDifferences) {
  const auto c = small_cfg(4);
  auto w = random_denoiser(c, 77);
  MatX<double> z(4, 3);
  z << randn(4, 1), randn(4, 2), randn(4, 3);
  const std::vector<int> ts{3, 400, 999};
  const MatX<double> target = MatX<double>::Random(4, 3);
  auto loss = [&](const DenoiserWeights<double>& wp) {
    return (denoiser_forward(wp, z, ts) - target).squaredNorm();
  };
  DenoiserTape<double> tape;
  const MatX<double> out = denoiser_forward(w, z, ts, &tape);
  auto g = DenoiserWeights<double>::zeros(c);
  denoiser_backward(w, tape, MatX<double>(2 * (out - target)), &g);

  auto ps = tensor_spans<double>(w);
  auto gs = tensor_spans<double>(g);
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(0, ps[i].size - 1);
    for (int r = 0; r < 3; ++r) {
      const auto k = pick(rng);
      const double orig = ps[i].data[k];
      ps[i].data[k] = orig + 1e-6;
      const double lp = loss(w);
      ps[i].data[k] = orig - 1e-6;
      const double lm = loss(w);
      ps[i].data[k] = orig;
      const double fd = (lp - lm) / 2e-6;
      EXPECT_NEAR(gs[i].data[k], fd, 1e-6 + 1e-4 * std::abs(fd)) << "tensor " << i;
    }
  }
}

TEST(Sampling, ReproducibleAndZeroDenoiserMoments) {
  const auto s = make_schedule(50, 1e-3, 0.2);
  const auto w0 = DenoiserWeights<double>::zeros(small_cfg(3));
  const auto a = sample_unguided(w0, s, 4, 99);
  EXPECT_EQ(a, sample_unguided(w0, s, 4, 99));
  EXPECT_NE(a, sample_unguided(w0, s, 4, 100));

  // eps_hat = 0: z_{t-1} = z_t / sqrt(a_t) + sigma_t n, so var_{t-1} = var_t / a_t + beta_t
  // for t > 1 and var_0 = var_1 / a_1.
  double var = 1;
  for (int t = s.T; t >= 1; --t) var = var / s.a(t) + (t > 1 ? s.b(t) : 0.0);
  const int n = 4000;
  const auto draws = sample_unguided(w0, s, n, 5);
  for (int d = 0; d < 3; ++d) {
    const double m = draws.col(d).mean();
    const double v = (draws.col(d).array() - m).square().sum() / n;
    EXPECT_NEAR(m, 0.0, 3.5 * std::sqrt(var / n));
    EXPECT_NEAR(v, var, 3.5 * var * std::sqrt(2.0 / n));
  }
}

TEST(Sampling, PerfectDenoiserContractsToPointMass) {
  const auto s = make_schedule();
  const auto w0 = DenoiserWeights<double>::zeros(small_cfg(4));
  const auto zstar = randn(4, 31);
  // Exact noise prediction for a point-mass data distribution.
  const EpsModifier oracle = [&](const Eigen::VectorXd& z, int t, const Eigen::VectorXd&) {
    return Eigen::VectorXd((z - std::sqrt(s.abar(t)) * zstar) / std::sqrt(1 - s.abar(t)));
  };
  int decreased = 0;
  const int runs = 40;
  for (int r = 0; r < runs; ++r) {
    std::vector<double> dist;
    auto rng = derive_rng(r, 0, 0x5A3E);
    Eigen::VectorXd z = standard_normal(rng, 4);
    for (int t = s.T; t >= 1; --t) {
      const auto eps = oracle(z, t, Eigen::VectorXd());
      const Eigen::VectorXd noise = t > 1 ? standard_normal(rng, 4) : Eigen::VectorXd::Zero(4).eval();
      z = ddpm_step(z, t, eps, noise, s);
      if (t <= 101) dist.push_back((z - zstar).norm());
    }
    decreased += dist.back() < dist.front();
    EXPECT_LT(dist.back(), 1e-6);
  }
  EXPECT_GE(decreased, static_cast<int>(0.95 * runs));
  const auto final = reverse_process(w0, s, 3, 0, oracle);
  EXPECT_LT((final - zstar).norm(), 1e-6);
}

TEST(Training, SingleLatentCollapses) {
  const auto s = make_schedule(100, 1e-3, 0.1);
  auto c = small_cfg(3);
  c.width = 32;
  Eigen::MatrixXd Z(16, 3);
  for (int i = 0; i < 16; ++i) Z.row(i) << 1.0, -0.5, 0.25;
  DiffusionTrainConfig tc;
  tc.iterations = 1500;
  tc.batch_size = 64;
  tc.lr = 2e-3;
  std::vector<double> losses;
  const auto w = train_denoiser(Z, s, c, tc, [&](const DiffusionProgress& p) { losses.push_back(p.loss); });
  double head = 0, tail = 0;
  for (int i = 0; i < 50; ++i) head += losses[static_cast<std::size_t>(i)];
  for (int i = 1450; i < 1500; ++i) tail += losses[static_cast<std::size_t>(i)];
  EXPECT_LT(tail, 0.5 * head);
  const auto samples = sample_unguided(w, s, 20, 1);
  const Eigen::RowVector3d target(1.0, -0.5, 0.25);
  double mean_dist = 0;
  for (int i = 0; i < 20; ++i) mean_dist += (samples.row(i) - target).norm() / 20;
  const auto w_short = train_denoiser(Z, s, c, DiffusionTrainConfig{100, 64, 2e-3, 1.0, 0});
  const auto early = sample_unguided(w_short, s, 20, 1);
  double early_dist = 0;
  for (int i = 0; i < 20; ++i) early_dist += (early.row(i) - target).norm() / 20;
  EXPECT_LT(mean_dist, early_dist);
  EXPECT_LT(mean_dist, 0.5);
}

TEST(Training, ReproducibleAndValidated) {
  const auto s = make_schedule(20, 1e-3, 0.1);
  const auto c = small_cfg(3);
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Random(10, 3);
  const DiffusionTrainConfig tc{20, 8, 1e-3, 1.0, 4};
  const auto a = train_denoiser(Z, s, c, tc);
  const auto b = train_denoiser(Z, s, c, tc);
  EXPECT_EQ(a.blocks[1].fc2.w, b.blocks[1].fc2.w);
  EXPECT_EQ(a.out.b, b.out.b);
  EXPECT_THROW(train_denoiser(Eigen::MatrixXd::Zero(10, 4), s, c, tc), std::invalid_argument);
  Eigen::MatrixXd bad = Z;
  bad(0, 0) = NAN;
  EXPECT_THROW(train_denoiser(bad, s, c, tc), std::invalid_argument);
}

TEST(Persistence, DiffusionCheckpointRoundTrip) {
  DiffusionModel m;
  m.schedule = make_schedule(30, 1e-3, 0.05);
  m.denoiser = random_denoiser(small_cfg(3), 8).cast<float>().cast<double>();
  m.stats.mean = Eigen::Vector3d(0.1, 0.2, 0.3);
  m.stats.std = Eigen::Vector3d(1.0, 2.0, 0.5);
  const auto dir = std::filesystem::temp_directory_path() / "topoguide_test_diffusion_io";
  std::filesystem::remove_all(dir);
  save_diffusion(dir / "ddpm", m);
  const auto back = load_diffusion(dir / "ddpm");
  EXPECT_EQ(back.schedule.T, 30);
  EXPECT_EQ(back.schedule.alpha_bar, m.schedule.alpha_bar);
  EXPECT_EQ(back.stats.fingerprint(), m.stats.fingerprint());
  const auto z = randn(3, 1);
  EXPECT_EQ(denoiser_apply(back.denoiser, z, 17), denoiser_apply(m.denoiser, z, 17));
}
