#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "topoguide/dataset.hpp"
#include "topoguide/latent_fit.hpp"

using namespace topoguide;

namespace {

SirenConfig tiny() {
  SirenConfig c;
  c.hidden_width = 12;
  c.hidden_layers = 2;
  c.latent_dim = 4;
  c.omega0 = 3;
  return c;
}

SirenWeights<double> random_weights(const SirenConfig& c, std::uint64_t seed) {
  auto w = init_siren(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& l : w.hidden) {
    for (Eigen::Index i = 0; i < l.modulation.size(); ++i) l.modulation.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = n(rng);
  }
  return w;
}

MatX<double> random_coords(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  MatX<double> c(2, n);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = u(rng);
  return c;
}

VectorFieldGrid constant_grid(int n, float u, float v) {
  VectorFieldGrid g(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      g.u(r, c) = u;
      g.v(r, c) = v;
    }
  return g;
}

}  // namespace

class MetaGradient : public ::testing::TestWithParam<bool> {};

TEST_P(MetaGradient, MatchesFiniteDifferences) {
  const bool first_order = GetParam();
  const auto cfg = tiny();
  const auto w = random_weights(cfg, 3);
  const auto coords = random_coords(40, 4);
  const MatX<double> target = evaluate_points(random_weights(cfg, 9), Eigen::VectorXd::Ones(4).eval(), coords);
  const double lr = 0.5;
  const int K = 3;

  auto g = SirenWeights<double>::zeros(cfg);
  maml_field_loss(w, coords, target, K, lr, first_order, &g);

  // Oracle for first-order: gradient of the outer loss with z_K held fixed.
  Eigen::VectorXd zK;
  maml_field_loss(w, coords, target, K, lr, false, static_cast<SirenWeights<double>*>(nullptr), &zK);

  auto loss_at = [&](const SirenWeights<double>& wp) {
    if (!first_order) return maml_field_loss(wp, coords, target, K, lr, false, static_cast<SirenWeights<double>*>(nullptr));
    BatchTape<double> tape;
    batch_forward(wp, modulation_shifts(wp, zK), coords, tape);
    return mse_loss(tape.out, target, static_cast<MatX<double>*>(nullptr));
  };

  std::mt19937_64 rng(5);
  int checked = 0;
  auto wp = w;
  auto gs = tensor_spans<double>(g);
  auto ps = tensor_spans<double>(wp);
  for (std::size_t t = 0; t < ps.size(); ++t) {
    std::uniform_int_distribution<Eigen::Index> pick(0, ps[t].size - 1);
    for (int s = 0; s < 4; ++s) {
      const auto i = pick(rng);
      const double orig = ps[t].data[i];
      const double h = 1e-5;
      ps[t].data[i] = orig + h;
      const double lp = loss_at(wp);
      ps[t].data[i] = orig - h;
      const double lm = loss_at(wp);
      ps[t].data[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_NEAR(gs[t].data[i], fd, 1e-6 + 1e-4 * std::abs(fd)) << "tensor " << t << " index " << i;
      ++checked;
    }
  }
  EXPECT_EQ(checked, 4 * static_cast<int>(ps.size()));
}

INSTANTIATE_TEST_SUITE_P(LatentFit, MetaGradient, ::testing::Values(false, true));

TEST(MetaTrain, InnerStepsReduceLossAndTrainingLossDecreases) {
  SynthConfig sc;
  sc.n_fields = 32;
  sc.resolution = 24;
  sc.gt_resolution = 0;
  std::vector<VectorFieldGrid> data;
  for (auto& r : synth_generate(sc)) data.push_back(r.grid);

  SirenConfig cfg;
  cfg.hidden_width = 32;
  cfg.hidden_layers = 2;
  cfg.latent_dim = 16;
  cfg.omega0 = 10;
  MetaConfig mc;
  mc.outer_iterations = 200;
  mc.fields_per_batch = 4;
  mc.points_per_field = 256;
  mc.outer_lr = 1e-3;
  std::vector<double> losses;
  const auto w = meta_train(data, mc, cfg, [&](const MetaProgress& p) { losses.push_back(p.loss); });
  ASSERT_EQ(losses.size(), 200u);
  for (double l : losses) EXPECT_TRUE(std::isfinite(l));
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) head += losses[static_cast<std::size_t>(i)];
  for (int i = 180; i < 200; ++i) tail += losses[static_cast<std::size_t>(i)];
  EXPECT_LT(tail, 0.8 * head);

  // K inner steps from zero beat z = 0 on every field.
  const auto wf = w.cast<float>();
  for (int i = 0; i < 8; ++i) {
    const auto z = fit_latent(wf, data[static_cast<std::size_t>(i)], FitOptions{mc.inner_steps, mc.inner_lr});
    const double before = mse(evaluate_grid(w, Eigen::VectorXd::Zero(16).eval(), 24, 24), data[static_cast<std::size_t>(i)]);
    const double after = mse(evaluate_grid(w, z, 24, 24), data[static_cast<std::size_t>(i)]);
    EXPECT_LT(after, before);
  }
}

TEST(MetaTrain, ConstantFieldsAreRepresentedAfterAdaptation) {
  std::vector<VectorFieldGrid> data(4, constant_grid(16, 0.7f, -0.3f));
  SirenConfig cfg;
  cfg.hidden_width = 16;
  cfg.hidden_layers = 1;
  cfg.latent_dim = 4;
  MetaConfig mc;
  mc.outer_iterations = 600;
  mc.fields_per_batch = 2;
  mc.points_per_field = 64;
  mc.outer_lr = 1e-2;
  const auto w = meta_train(data, mc, cfg);
  const auto z = fit_latent(w.cast<float>(), data[0], FitOptions{mc.inner_steps, mc.inner_lr});
  EXPECT_LE(mse(evaluate_grid(w, z, 16, 16), data[0]), 1e-4);
}

TEST(MetaTrain, BitwiseReproducible) {
  SynthConfig sc;
  sc.n_fields = 6;
  sc.resolution = 16;
  sc.gt_resolution = 0;
  std::vector<VectorFieldGrid> data;
  for (auto& r : synth_generate(sc)) data.push_back(r.grid);
  SirenConfig cfg = tiny();
  MetaConfig mc;
  mc.outer_iterations = 10;
  mc.fields_per_batch = 3;
  mc.points_per_field = 50;
  mc.seed = 17;
  const auto a = meta_train(data, mc, cfg);
  const auto b = meta_train(data, mc, cfg);
  auto sa = tensor_spans<double>(const_cast<SirenWeights<double>&>(a));
  auto sb = tensor_spans<double>(const_cast<SirenWeights<double>&>(b));
  for (std::size_t t = 0; t < sa.size(); ++t)
    EXPECT_EQ(std::memcmp(sa[t].data, sb[t].data, static_cast<std::size_t>(sa[t].size) * sizeof(double)), 0);
  mc.seed = 18;
  const auto c = meta_train(data, mc, cfg);
  EXPECT_NE(a.out_bias, c.out_bias);
}

TEST(MetaTrain, Preconditions) {
  MetaConfig mc;
  EXPECT_THROW(meta_train({}, mc, tiny()), std::invalid_argument);
  EXPECT_THROW(meta_train({VectorFieldGrid(8, 8), VectorFieldGrid(9, 8)}, mc, tiny()), std::invalid_argument);
  mc.inner_steps = 0;
  EXPECT_THROW(mc.validate(), std::invalid_argument);
}

TEST(MetaTrain, DivergenceAborts) {
  std::vector<VectorFieldGrid> data(2, constant_grid(16, 1e30f, 1e30f));
  MetaConfig mc;
  mc.outer_iterations = 5;
  mc.fields_per_batch = 1;
  mc.points_per_field = 16;
  EXPECT_THROW(meta_train(data, mc, tiny()), TrainingDiverged);
}

TEST(FitLatent, ReachesKnownOptimum) {
  const auto cfg = tiny();
  const auto w = random_weights(cfg, 21);
  Eigen::VectorXd zstar(4);
  zstar << 0.05, -0.03, 0.02, 0.04;
  const auto field = evaluate_grid(w, zstar, 16, 16);
  const double at_star = mse(evaluate_grid(w, zstar, 16, 16), field);
  const auto z = fit_latent(w.cast<float>(), field, FitOptions{400, 0.5});
  EXPECT_LE(mse(evaluate_grid(w, z, 16, 16), field), at_star + 1e-6);
}

TEST(FitLatent, NeverWorseThanZeroAndRejectsZeroSteps) {
  const auto cfg = tiny();
  const auto w = random_weights(cfg, 22);
  const auto target = evaluate_grid(random_weights(cfg, 23), Eigen::VectorXd::Ones(4).eval(), 16, 16);
  // A huge learning rate makes every step overshoot.
  const auto z = fit_latent(w.cast<float>(), target, FitOptions{5, 1e4});
  EXPECT_LE(mse(evaluate_grid(w, z, 16, 16), target),
            mse(evaluate_grid(w, Eigen::VectorXd::Zero(4).eval(), 16, 16), target) + 1e-12);
  EXPECT_THROW(fit_latent(w, target, 0, 0.1), std::invalid_argument);
}

TEST(Psnr, Examples) {
  VectorFieldGrid a(4, 4), b(4, 4);
  EXPECT_EQ(psnr(a, b, 2.0), std::numeric_limits<double>::infinity());
  for (auto& v : b.values()) v = 2.0f;  // MSE = 4 = range^2
  EXPECT_NEAR(psnr(a, b, 2.0), 0.0, 1e-12);
  for (auto& v : b.values()) v = static_cast<float>(std::sqrt(0.0002));
  EXPECT_NEAR(psnr(a, b, 2.0), 43.0103, 1e-3);
  EXPECT_THROW(psnr(a, b, 0.0), std::invalid_argument);
  EXPECT_THROW(psnr(a, VectorFieldGrid(4, 5), 1.0), std::invalid_argument);
}

TEST(LatentStats, Examples) {
  Eigen::MatrixXd z(2, 3);
  z << 0, 0, 0, 2, 2, 2;
  const auto s = latent_stats(z);
  EXPECT_TRUE(s.mean.isApprox(Eigen::VectorXd::Ones(3)));
  EXPECT_TRUE(s.std.isApprox(Eigen::VectorXd::Ones(3)));

  Eigen::MatrixXd same = Eigen::MatrixXd::Constant(5, 2, 3.0);
  EXPECT_EQ(latent_stats(same).std, Eigen::VectorXd::Constant(2, kStdFloor));
  EXPECT_THROW(latent_stats(Eigen::MatrixXd(1, 3)), std::invalid_argument);
}

TEST(LatentStats, MatchesTwoPassOracleAndRoundTrips) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(2.0, 3.0);
  Eigen::MatrixXd z(50, 6);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
  const auto s = latent_stats(z);
  for (Eigen::Index d = 0; d < 6; ++d) {
    double m = 0;
    for (Eigen::Index i = 0; i < 50; ++i) m += z(i, d);
    m /= 50;
    double v = 0;
    for (Eigen::Index i = 0; i < 50; ++i) v += (z(i, d) - m) * (z(i, d) - m);
    EXPECT_NEAR(s.mean[d], m, 1e-12);
    EXPECT_NEAR(s.std[d], std::sqrt(v / 50), 1e-12);
  }
  for (Eigen::Index i = 0; i < 50; ++i) {
    const Eigen::VectorXd x = z.row(i).transpose();
    const auto back = denormalize(s, normalize(s, x));
    EXPECT_LE((back - x).norm(), 1e-6 * x.norm());
  }
  const auto s2 = latent_stats_from_json(to_json(s));
  EXPECT_EQ(s2.fingerprint(), s.fingerprint());
}

TEST(Persistence, SirenAndLatentStoresRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "topoguide_test_latent_io";
  std::filesystem::remove_all(dir);
  const auto w = random_weights(tiny(), 4).cast<float>().cast<double>();
  save_siren(dir / "inr", w, {{"note", "x"}});
  const auto back = load_siren(dir / "inr");
  EXPECT_EQ(back.config, w.config);
  EXPECT_EQ(back.hidden[1].modulation, w.hidden[1].modulation);
  EXPECT_EQ(back.first, w.first);
  EXPECT_THROW(load_latents(dir / "inr"), FormatError);

  LatentSet ls;
  ls.field_ids = {"a", "b", "c"};
  ls.latents = Eigen::MatrixXd::Random(3, 4).cast<float>().cast<double>();
  ls.stats = latent_stats(ls.latents);
  save_latents(dir / "lat", ls);
  const auto lb = load_latents(dir / "lat");
  EXPECT_EQ(lb.latents, ls.latents);
  EXPECT_EQ(lb.field_ids, ls.field_ids);
  EXPECT_EQ(lb.stats.fingerprint(), ls.stats.fingerprint());

  // Truncated blob is detected.
  std::filesystem::resize_file(dir / "lat.bin", 8);
  EXPECT_THROW(load_latents(dir / "lat"), FormatError);
}
