#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "topoguide/dataset.hpp"
#include "topoguide/evaluation.hpp"

using namespace topoguide;

namespace {

Eigen::MatrixXd random_spd(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

GaussianSummary summary(Eigen::VectorXd mu, Eigen::MatrixXd cov) { return {std::move(mu), std::move(cov), {}}; }

CriticalPoint cp_at(double x, double y, Kind k, Stability s) {
  CriticalPoint c;
  c.location = {x, y};
  c.cls = {k, s};
  return c;
}

CriticalPointSpec spec_at(double x, double y, std::optional<Kind> k = {}, std::optional<Stability> s = {}) {
  return {{x, y}, k, s};
}

}  // namespace

TEST(GaussianSummary, Examples) {
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(2, 4);
  z(1, 0) = 2;
  const auto g = gaussian_summary(z);
  EXPECT_DOUBLE_EQ(g.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(g.mean.tail(3).norm(), 0.0);
  EXPECT_NEAR(g.cov(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(g.cov.norm() - g.cov(0, 0), 0.0, 1e-12);

  const Eigen::MatrixXd same = Eigen::VectorXd::LinSpaced(3, 1, 3).transpose().replicate(5, 1);
  EXPECT_NEAR(gaussian_summary(same).cov.norm(), 0.0, 1e-12);
  EXPECT_THROW(gaussian_summary(Eigen::MatrixXd::Zero(1, 3)), std::invalid_argument);
}

TEST(GaussianSummary, MatchesTwoPassOracle) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(2.0, 3.0);
  const int N = 200, D = 6;
  Eigen::MatrixXd z(N, D);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
  const auto g = gaussian_summary(z);
  for (int a = 0; a < D; ++a) {
    double m = 0;
    for (int i = 0; i < N; ++i) m += z(i, a);
    m /= N;
    EXPECT_NEAR(g.mean[a], m, 1e-12);
    for (int b = 0; b < D; ++b) {
      double mb = 0, c = 0;
      for (int i = 0; i < N; ++i) mb += z(i, b);
      mb /= N;
      for (int i = 0; i < N; ++i) c += (z(i, a) - m) * (z(i, b) - mb);
      EXPECT_NEAR(g.cov(a, b), c / N, 1e-9);
    }
  }
  EXPECT_EQ((g.cov - g.cov.transpose()).norm(), 0.0);
}

TEST(FrechetDistance, ClosedFormCases) {
  std::mt19937_64 rng(5);
  const int D = 7;
  const auto cov = random_spd(D, rng);
  Eigen::VectorXd mu = Eigen::VectorXd::Random(D);
  EXPECT_NEAR(frechet_distance(summary(mu, cov), summary(mu, cov)), 0.0, 1e-9);

  Eigen::VectorXd shift = Eigen::VectorXd::Zero(D);
  shift.head(2) << 3, 4;
  EXPECT_NEAR(frechet_distance(summary(mu, cov), summary(mu + shift, cov)), 25.0, 1e-8);

  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(D, D);
  EXPECT_NEAR(frechet_distance(summary(mu, 4 * I), summary(mu, I)), D, 1e-12);

  const auto c2 = random_spd(D, rng);
  const Eigen::VectorXd mu2 = Eigen::VectorXd::Random(D);
  EXPECT_NEAR(frechet_distance(summary(mu, cov), summary(mu2, c2)), frechet_distance(summary(mu2, c2), summary(mu, cov)),
              1e-8);

  EXPECT_THROW(frechet_distance(summary(mu, cov), summary(mu.head(3), cov.topLeftCorner(3, 3))),
               std::invalid_argument);
  auto a = summary(mu, cov), b = summary(mu, cov);
  a.stats_id = 1;
  b.stats_id = 2;
  EXPECT_THROW(frechet_distance(a, b), std::invalid_argument);
}

TEST(FrechetDistance, SingularCovarianceIsClamped) {
  const int D = 4;
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(D, D);
  c(0, 0) = 1;
  const double fd = frechet_distance(summary(Eigen::VectorXd::Zero(D), c),
                                     summary(Eigen::VectorXd::Zero(D), Eigen::MatrixXd::Identity(D, D)));
  // Tr(C + I) - 2 Tr(sqrt(C)) = 1 + 4 - 2
  EXPECT_NEAR(fd, 3.0, 1e-10);
}

TEST(FrechetDistance, MatchesMonteCarloOptimalTransport) {
  // W2^2 estimated as E|x - T(x)|^2 under the Gaussian optimal map
  // T(x) = mu2 + A (x - mu1), A = S1^-1/2 (S1^1/2 S2 S1^1/2)^1/2 S1^-1/2,
  // with matrix roots from Eigen's general sqrtm.
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  const int D = 8, N = 200000;
  for (int trial = 0; trial < 3; ++trial) {
    const auto s1 = random_spd(D, rng), s2 = random_spd(D, rng);
    Eigen::VectorXd m1(D), m2(D);
    for (int i = 0; i < D; ++i) {
      m1[i] = n(rng);
      m2[i] = 0.5 * n(rng);
    }
    const Eigen::MatrixXd r1 = s1.sqrt();
    const Eigen::MatrixXd r1i = r1.inverse();
    const Eigen::MatrixXd mid = r1 * s2 * r1;
    const Eigen::MatrixXd A = r1i * mid.sqrt() * r1i;
    const Eigen::LLT<Eigen::MatrixXd> llt(s1);
    const Eigen::MatrixXd L = llt.matrixL();
    double acc = 0;
    Eigen::VectorXd e(D);
    for (int k = 0; k < N; ++k) {
      for (int i = 0; i < D; ++i) e[i] = n(rng);
      const Eigen::VectorXd dx = L * e;  // x - m1
      acc += (m1 + dx - m2 - A * dx).squaredNorm();
    }
    const double mc = acc / N;
    const double fd = frechet_distance(summary(m1, s1), summary(m2, s2));
    EXPECT_NEAR(fd, mc, 0.05 * mc) << "trial " << trial;
  }
}

TEST(Alignment, Counting) {
  const TopologySpec s{{spec_at(0.0, 0.0, Kind::Sink)}};
  std::vector<SampleResult> r = {
      {s, {cp_at(0.01, 0.0, Kind::Sink, Stability::Stable)}},
      {s, {cp_at(0.5, 0.5, Kind::Source, Stability::Stable), cp_at(0.0, -0.03, Kind::Sink, Stability::Unstable)}},
      {s, {cp_at(0.0, 0.02, Kind::Sink, Stability::Stable)}},
      {s, {cp_at(0.0, 0.0, Kind::Source, Stability::Stable), cp_at(0.1, 0.0, Kind::Sink, Stability::Stable)}},
  };
  const auto a = alignment(r, 0.04);
  EXPECT_EQ(a.n_samples, 4);
  EXPECT_EQ(a.aligned_count, 3);
  EXPECT_DOUBLE_EQ(a.aligned_fraction, 0.75);
  // hits 0.01, 0.03, 0.02 over side length 2
  EXPECT_NEAR(a.hit_distance_avg, 0.01, 1e-12);
  EXPECT_NEAR(a.hit_distance_std, std::sqrt(2.0 / 3.0) * 0.005, 1e-12);

  EXPECT_THROW(alignment({}, 0.04), std::invalid_argument);
  EXPECT_THROW(alignment(r, 0.0), std::invalid_argument);
}

TEST(Alignment, ExactReproductionAndStrictConjunction) {
  const TopologySpec two{{spec_at(-0.3, 0.1, Kind::Saddle), spec_at(0.4, 0.2, std::nullopt, Stability::Unstable)}};
  std::vector<SampleResult> r = {{two,
                                  {cp_at(-0.3, 0.1, Kind::Saddle, Stability::Stable),
                                   cp_at(0.4, 0.2, Kind::Source, Stability::Unstable)}}};
  EXPECT_DOUBLE_EQ(alignment(r).aligned_fraction, 1.0);
  EXPECT_DOUBLE_EQ(alignment(r).hit_distance_avg, 0.0);
  r[0].extracted.pop_back();
  EXPECT_DOUBLE_EQ(alignment(r).aligned_fraction, 0.0);
}

TEST(Alignment, MonotoneInRadius) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.8, 0.8), d(-0.1, 0.1);
  std::vector<SampleResult> r;
  for (int i = 0; i < 200; ++i) {
    const double x = u(rng), y = u(rng);
    r.push_back({{{spec_at(x, y, Kind::Sink)}}, {cp_at(x + d(rng), y + d(rng), Kind::Sink, Stability::Stable)}});
  }
  double prev = 2;
  for (double rad : {0.2, 0.1, 0.08, 0.05, 0.03, 0.01, 0.001}) {
    const double a = alignment(r, rad).aligned_fraction;
    EXPECT_LE(a, prev);
    prev = a;
  }
}

TEST(TopologyHistogram, Examples) {
  auto h = topology_histogram({{cp_at(0, 0, Kind::Sink, Stability::Stable)}});
  EXPECT_EQ(h.by_class.at("sink/stable"), 1);
  EXPECT_EQ(h.by_class.size(), 1u);
  EXPECT_EQ(h.totals.at(1), 1);
  h = topology_histogram({{}, {}, {}});
  EXPECT_EQ(h.totals.at(0), 3);
  EXPECT_TRUE(h.by_class.empty());
  EXPECT_EQ(to_json(h)["totals"]["0"], 3);
}

TEST(TopologyHistogram, MatchesSyntheticGroundTruth) {
  SynthConfig sc;
  sc.n_fields = 12;
  sc.resolution = 32;
  sc.gt_resolution = 512;
  sc.seed = 99;
  ExtractConfig ec;
  ec.grid_res = 256;
  ec.samples_per_cell = 256;
  const double cell = 2.0 / 256;
  int compared = 0;
  for (const auto& rec : synth_generate(sc)) {
    // Skip fields with a zero near the excluded boundary ring, where the
    // comparison depends on cell placement rather than extraction quality.
    bool near_edge = false;
    for (const auto& g : *rec.ground_truth) near_edge |= !g.location.in_domain(4 * cell);
    if (near_edge) continue;
    ++compared;
    const auto got = topology_histogram({extract(*rec.analytic, ec)});
    const auto want = topology_histogram({*rec.ground_truth});
    EXPECT_EQ(got.by_class, want.by_class) << rec.id;
    EXPECT_EQ(got.totals, want.totals) << rec.id;
  }
  EXPECT_GE(compared, 4);
}

TEST(Protocol, PlacementKeepsMarginAndSeparation) {
  ProtocolConfig cfg;
  cfg.kind = ProtocolKind::MultipointDistance;
  const auto rows = standard_rows(cfg);
  ASSERT_EQ(rows.size(), 21u);
  for (const auto& row : rows)
    for (int l = 0; l < 20; ++l) {
      const auto spec = place_row(row, 4, l, 0.1);
      ASSERT_EQ(spec.points.size(), 2u);
      EXPECT_NO_THROW(spec.validate());
      const double want = 2 * std::abs(row.points[0].offset);
      EXPECT_NEAR(distance(spec.points[0].p, spec.points[1].p), want, 1e-12);
    }
  cfg.kind = ProtocolKind::Combined;
  EXPECT_EQ(standard_rows(cfg).size(), 5u);
  const auto a = place_row(standard_rows(cfg)[0], 4, 3, 0.2), b = place_row(standard_rows(cfg)[1], 4, 3, 0.2);
  EXPECT_EQ(a.points[0].p, b.points[0].p);  // rows share locations
  EXPECT_THROW(place_row({"wide", {{{}, {}, -1.5}, {{}, {}, 1.5}}}, 0, 0, 0.1), std::invalid_argument);
}

TEST(Protocol, ConfigRoundTrip) {
  ProtocolConfig c;
  c.kind = ProtocolKind::Combined;
  c.n_locations = 3;
  c.rows = {{"pair", {{Kind::Saddle, std::nullopt, -0.2}, {Kind::Sink, Stability::Unstable, 0.2}}}};
  c.guidance.omega = 5;
  c.extract.grid_res = 64;
  const auto j = to_json(c);
  const auto d = protocol_config_from_json(j);
  EXPECT_EQ(to_json(d), j);
  EXPECT_THROW(protocol_config_from_json({{"kind", "bogus"}}), std::invalid_argument);
  EXPECT_THROW(protocol_config_from_json({{"n_seeds", 0}}), std::invalid_argument);
}

TEST(Protocol, RunsEndToEndOnTinyModels) {
  const int D = 4;
  SirenConfig sc;
  sc.hidden_width = 16;
  sc.hidden_layers = 2;
  sc.latent_dim = D;
  sc.omega0 = 3;
  const auto siren = init_siren(sc, 1);
  DenoiserConfig dc;
  dc.latent_dim = D;
  dc.width = 8;
  dc.blocks = 1;
  dc.time_dim = 8;
  DiffusionModel m;
  m.schedule = make_schedule(20, 1e-3, 0.2);
  m.denoiser = init_denoiser(dc, 2);
  m.stats.mean = Eigen::VectorXd::Zero(D);
  m.stats.std = Eigen::VectorXd::Ones(D);
  Rng rng(3);
  Eigen::MatrixXd data(30, D);
  for (int i = 0; i < 30; ++i) data.row(i) = standard_normal(rng, D).transpose();

  ProtocolConfig cfg;
  cfg.n_locations = 2;
  cfg.n_seeds = 3;
  cfg.guidance.t_start = 15;
  cfg.extract.grid_res = 32;
  cfg.extract.samples_per_cell = 16;
  int calls = 0;
  const auto rep = run_protocol(cfg, siren, m, data, [&](const ProtocolProgress&) { ++calls; });
  ASSERT_EQ(rep.rows.size(), 5u);
  EXPECT_EQ(calls, 30);
  EXPECT_EQ(rep.baseline_samples, 6);  // matches a row
  for (const auto& row : rep.rows) {
    EXPECT_EQ(row.guided.n_samples, 6);
    EXPECT_EQ(row.latents.rows(), 6);
    EXPECT_GE(row.fd, 0);
  }
  const auto table = format_table(rep);
  EXPECT_NE(table.find("Baseline"), std::string::npos);
  EXPECT_NE(table.find("Unstable"), std::string::npos);
  EXPECT_EQ(to_json(rep)["rows"].size(), 5u);

  // same inputs, same report
  EXPECT_EQ(to_json(run_protocol(cfg, siren, m, data)), to_json(rep));

  cfg.kind = ProtocolKind::FixedNoiseVariedLocations;
  cfg.rows = {single_row("Presence", std::nullopt, std::nullopt)};
  const auto fixed = run_protocol(cfg, siren, m, data);
  EXPECT_EQ(fixed.rows[0].guided.n_samples, 2);
  EXPECT_EQ(fixed.baseline_samples, 2);
}
