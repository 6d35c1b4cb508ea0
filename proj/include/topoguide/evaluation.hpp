#pragma once

// Alignment, hit distance, Frechet distance on latent Gaussians, topology
// histograms, and the protocol runners that combine them.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "topoguide/diffusion.hpp"
#include "topoguide/guidance.hpp"
#include "topoguide/topo_extract.hpp"

namespace topoguide {

inline constexpr double kDefaultHitRadius = 0.04;
inline constexpr double kDomainSide = 2.0;

// ---------------------------------------------------------------------------
// Frechet distance.

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::optional<std::uint64_t> stats_id;  // LatentStats fingerprint of the space
};

namespace detail {

/// Symmetrizes and clamps negative eigenvalues at zero.
inline Eigen::MatrixXd clamp_psd(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd s = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd r = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (r + r.transpose());
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Mean and covariance (denominator N) of the rows of Z.
inline GaussianSummary gaussian_summary(const Eigen::MatrixXd& Z, std::optional<std::uint64_t> stats_id = {}) {
  if (Z.rows() < 2) throw std::invalid_argument("gaussian_summary: need at least 2 rows");
  GaussianSummary g;
  g.mean = Z.colwise().mean().transpose();
  const Eigen::MatrixXd c = Z.rowwise() - g.mean.transpose();
  g.cov = detail::clamp_psd(c.transpose() * c / static_cast<double>(Z.rows()));
  g.stats_id = stats_id;
  return g;
}

inline double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows())
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  if (a.stats_id && b.stats_id && *a.stats_id != *b.stats_id)
    throw std::invalid_argument("frechet_distance: summaries come from different latent normalizations");
  const Eigen::MatrixXd r1 = detail::psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = r1 * b.cov * r1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

// ---------------------------------------------------------------------------
// Alignment.

struct SampleResult {
  TopologySpec spec;
  std::vector<CriticalPoint> extracted;
};

struct AlignmentReport {
  int n_samples = 0;
  int aligned_count = 0;
  double aligned_fraction = 0;
  double hit_distance_avg = 0;  // fraction of the domain side, over aligned points
  double hit_distance_std = 0;
};

inline bool class_matches(const CriticalPointSpec& s, const CriticalPoint& cp) {
  if (s.kind && cp.cls.kind != *s.kind) return false;
  if (s.stability && cp.cls.stability != *s.stability) return false;
  return true;
}

/// Distance to the nearest extracted point whose class matches the spec point.
inline std::optional<double> nearest_match(const CriticalPointSpec& s, const std::vector<CriticalPoint>& pts) {
  std::optional<double> best;
  for (const auto& cp : pts) {
    if (!class_matches(s, cp)) continue;
    const double d = distance(s.p, cp.location);
    if (!best || d < *best) best = d;
  }
  return best;
}

/// A sample is aligned when every spec point has a class-matching extracted
/// point within hit_radius.
inline AlignmentReport alignment(const std::vector<SampleResult>& results, double hit_radius = kDefaultHitRadius) {
  if (results.empty()) throw std::invalid_argument("alignment: no results");
  if (!(hit_radius > 0)) throw std::invalid_argument("alignment: hit_radius must be positive");
  AlignmentReport r;
  r.n_samples = static_cast<int>(results.size());
  std::vector<double> hits;
  for (const auto& res : results) {
    std::vector<double> d;
    bool ok = true;
    for (const auto& s : res.spec.points) {
      const auto m = nearest_match(s, res.extracted);
      if (!m || *m > hit_radius) {
        ok = false;
        break;
      }
      d.push_back(*m / kDomainSide);
    }
    if (!ok) continue;
    ++r.aligned_count;
    hits.insert(hits.end(), d.begin(), d.end());
  }
  r.aligned_fraction = static_cast<double>(r.aligned_count) / r.n_samples;
  if (!hits.empty()) {
    double sum = 0, sq = 0;
    for (double h : hits) sum += h;
    r.hit_distance_avg = sum / static_cast<double>(hits.size());
    for (double h : hits) sq += (h - r.hit_distance_avg) * (h - r.hit_distance_avg);
    r.hit_distance_std = std::sqrt(sq / static_cast<double>(hits.size()));
  }
  return r;
}

inline nlohmann::json to_json(const AlignmentReport& r) {
  return {{"n_samples", r.n_samples},
          {"aligned_count", r.aligned_count},
          {"aligned_fraction", r.aligned_fraction},
          {"hit_distance_avg", r.hit_distance_avg},
          {"hit_distance_std", r.hit_distance_std}};
}

// ---------------------------------------------------------------------------
// Histograms.

struct TopologyHistogram {
  std::map<std::string, int> by_class;  // "kind/stability"
  std::map<int, int> totals;            // points per field -> number of fields
};

inline std::string class_label(const CriticalClass& c) {
  return std::string(to_string(c.kind)) + "/" + std::string(to_string(c.stability));
}

inline TopologyHistogram topology_histogram(const std::vector<std::vector<CriticalPoint>>& fields) {
  TopologyHistogram h;
  for (const auto& f : fields) {
    ++h.totals[static_cast<int>(f.size())];
    for (const auto& cp : f) ++h.by_class[class_label(cp.cls)];
  }
  return h;
}

inline nlohmann::json to_json(const TopologyHistogram& h) {
  nlohmann::json totals = nlohmann::json::object();
  for (const auto& [k, v] : h.totals) totals[std::to_string(k)] = v;
  return {{"by_class", h.by_class}, {"totals", totals}};
}

// ---------------------------------------------------------------------------
// Protocols.

enum class ProtocolKind { VariedNoiseFixedSpecs, FixedNoiseVariedLocations, Combined, MultipointDistance };

inline std::string_view to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::VariedNoiseFixedSpecs: return "varied_noise_fixed_specs";
    case ProtocolKind::FixedNoiseVariedLocations: return "fixed_noise_varied_locations";
    case ProtocolKind::Combined: return "combined";
    case ProtocolKind::MultipointDistance: return "multipoint_distance";
  }
  return "";
}

inline ProtocolKind protocol_from_string(std::string_view s) {
  for (auto k : {ProtocolKind::VariedNoiseFixedSpecs, ProtocolKind::FixedNoiseVariedLocations, ProtocolKind::Combined,
                 ProtocolKind::MultipointDistance})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown protocol '" + std::string(s) + "'");
}

/// One spec point relative to the row's anchor location.
struct PointTemplate {
  std::optional<Kind> kind;
  std::optional<Stability> stability;
  double offset = 0;  // signed distance along the row's random direction
};

struct RowTemplate {
  std::string label;
  std::vector<PointTemplate> points;
};

struct ProtocolConfig {
  ProtocolKind kind = ProtocolKind::VariedNoiseFixedSpecs;
  int n_locations = 10;
  int n_seeds = 20;
  std::uint64_t seed = 0;
  double hit_radius = kDefaultHitRadius;
  double location_margin = 0.2;
  std::vector<double> distances = {1.17, 0.78, 0.39};
  std::vector<RowTemplate> rows;  // empty selects the protocol's standard rows
  GuidanceConfig guidance;
  ExtractConfig extract;
};

inline nlohmann::json to_json(const ProtocolConfig& c) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : c.rows) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& t : r.points) {
      CriticalPointSpec s{{0, 0}, t.kind, t.stability};
      auto j = to_json(s);
      pts.push_back({{"type", j["type"]}, {"stability", j["stability"]}, {"offset", t.offset}});
    }
    rows.push_back({{"label", r.label}, {"points", pts}});
  }
  return {{"kind", std::string(to_string(c.kind))},
          {"n_locations", c.n_locations},
          {"n_seeds", c.n_seeds},
          {"seed", c.seed},
          {"hit_radius", c.hit_radius},
          {"location_margin", c.location_margin},
          {"distances", c.distances},
          {"rows", rows},
          {"guidance", to_json(c.guidance)},
          {"extract", to_json(c.extract)}};
}

inline ProtocolConfig protocol_config_from_json(const nlohmann::json& j, ProtocolConfig c = {}) {
  if (j.contains("kind")) c.kind = protocol_from_string(j["kind"].get<std::string>());
  c.n_locations = j.value("n_locations", c.n_locations);
  c.n_seeds = j.value("n_seeds", c.n_seeds);
  c.seed = j.value("seed", c.seed);
  c.hit_radius = j.value("hit_radius", c.hit_radius);
  c.location_margin = j.value("location_margin", c.location_margin);
  if (j.contains("distances")) c.distances = j["distances"].get<std::vector<double>>();
  if (j.contains("rows")) {
    c.rows.clear();
    for (const auto& r : j["rows"]) {
      RowTemplate row{r.at("label").get<std::string>(), {}};
      for (const auto& p : r.at("points")) {
        nlohmann::json q = p;
        q["x"] = 0.0;
        q["y"] = 0.0;
        const auto s = critical_point_spec_from_json(q);
        row.points.push_back({s.kind, s.stability, p.value("offset", 0.0)});
      }
      c.rows.push_back(std::move(row));
    }
  }
  if (j.contains("guidance")) c.guidance = guidance_config_from_json(j["guidance"], c.guidance);
  if (j.contains("extract")) c.extract = extract_config_from_json(j["extract"], c.extract);
  if (c.n_locations < 1 || c.n_seeds < 1) throw std::invalid_argument("protocol: counts must be >= 1");
  if (!(c.hit_radius > 0)) throw std::invalid_argument("protocol: hit_radius must be positive");
  return c;
}

inline RowTemplate single_row(std::string label, std::optional<Kind> k, std::optional<Stability> s) {
  return {std::move(label), {{k, s, 0.0}}};
}

inline std::vector<RowTemplate> standard_rows(const ProtocolConfig& cfg) {
  using K = Kind;
  using S = Stability;
  switch (cfg.kind) {
    case ProtocolKind::VariedNoiseFixedSpecs:
    case ProtocolKind::FixedNoiseVariedLocations:
      return {single_row("Sink", K::Sink, {}), single_row("Source", K::Source, {}),
              single_row("Saddle", K::Saddle, {}), single_row("Stable", {}, S::Stable),
              single_row("Unstable", {}, S::Unstable)};
    case ProtocolKind::Combined:
      return {single_row("Stable Sink", K::Sink, S::Stable), single_row("Stable Source", K::Source, S::Stable),
              single_row("Stable Saddle", K::Saddle, S::Stable), single_row("Unstable Sink", K::Sink, S::Unstable),
              single_row("Unstable Source", K::Source, S::Unstable)};
    case ProtocolKind::MultipointDistance: {
      struct Pair {
        const char* name;
        K a, b;
        std::optional<S> s;
      };
      const Pair pairs[] = {{"A+A Focus", K::Sink, K::Sink, S::Unstable},
                            {"R+R Focus", K::Source, K::Source, S::Unstable},
                            {"A+R Focus", K::Sink, K::Source, S::Unstable},
                            {"A+A Node", K::Sink, K::Sink, S::Stable},
                            {"R+R Node", K::Source, K::Source, S::Stable},
                            {"A+R Node", K::Sink, K::Source, S::Stable},
                            {"Saddle Saddle", K::Saddle, K::Saddle, std::nullopt}};
      std::vector<RowTemplate> rows;
      for (double d : cfg.distances)
        for (const auto& p : pairs) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "d=%.2f ", d);
          rows.push_back({buf + std::string(p.name), {{p.a, p.s, -0.5 * d}, {p.b, p.s, 0.5 * d}}});
        }
      return rows;
    }
  }
  return {};
}

/// Places a row template at location index l: a uniform anchor and direction
/// drawn until every point keeps the margin.
inline TopologySpec place_row(const RowTemplate& row, std::uint64_t seed, int l, double margin) {
  auto rng = derive_rng(seed, static_cast<std::uint64_t>(l), 0x10CA);
  std::uniform_real_distribution<double> pos(-1.0 + margin, 1.0 - margin), ang(0.0, 2.0 * std::numbers::pi);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const DomainPoint c{pos(rng), pos(rng)};
    const double a = ang(rng);
    TopologySpec spec;
    bool ok = true;
    for (const auto& t : row.points) {
      const DomainPoint p{c.x + t.offset * std::cos(a), c.y + t.offset * std::sin(a)};
      if (!p.in_domain(margin)) {
        ok = false;
        break;
      }
      spec.points.push_back({p, t.kind, t.stability});
    }
    if (ok) return spec;
  }
  throw std::invalid_argument("protocol: row '" + row.label + "' does not fit inside the margin");
}

struct ProtocolRow {
  std::string label;
  double fd = 0;
  AlignmentReport guided;
  AlignmentReport unguided;  // same specs evaluated on the paired unguided samples
  TopologyHistogram histogram;
  Eigen::MatrixXd latents;  // normalized guided z_0, one row per sample
};

struct ProtocolReport {
  ProtocolKind kind{};
  double baseline_fd = 0;
  int baseline_samples = 0;
  std::vector<ProtocolRow> rows;
};

struct ProtocolProgress {
  std::string row;
  int done = 0;
  int total = 0;
};

/// Guided samples for every (location, seed) pair of every row. Noise stream
/// j is shared across locations and with the unguided baseline, so each
/// guided sample has an unguided twin. Varied-noise protocols use n_seeds
/// streams; the fixed-noise protocol uses stream 0 only.
inline ProtocolReport run_protocol(const ProtocolConfig& cfg, const SirenWeights<double>& siren,
                                   const DiffusionModel& model, const Eigen::MatrixXd& data_normalized,
                                   const std::function<void(const ProtocolProgress&)>& progress = {}) {
  if (cfg.n_locations < 1 || cfg.n_seeds < 1) throw std::invalid_argument("protocol: counts must be >= 1");
  const auto rows = cfg.rows.empty() ? standard_rows(cfg) : cfg.rows;
  const int n_streams = cfg.kind == ProtocolKind::FixedNoiseVariedLocations ? 1 : cfg.n_seeds;
  const std::uint64_t sid = model.stats.fingerprint();
  const auto data = gaussian_summary(data_normalized, sid);

  ProtocolReport rep;
  rep.kind = cfg.kind;
  // Baseline rows mirror a guided row: the unguided twin of every guided
  // sample, so both FD estimates see the same streams and sample count.
  const Eigen::MatrixXd twins = sample_unguided(model.denoiser, model.schedule, n_streams, cfg.seed);
  std::vector<std::vector<CriticalPoint>> base_cps;
  for (int j = 0; j < n_streams; ++j)
    base_cps.push_back(extract(siren, denormalize(model.stats, twins.row(j).transpose()), cfg.extract));
  const Eigen::MatrixXd base = twins.replicate(cfg.n_locations, 1);
  rep.baseline_samples = static_cast<int>(base.rows());
  if (base.rows() >= 2) rep.baseline_fd = frechet_distance(gaussian_summary(base, sid), data);

  for (const auto& row : rows) {
    ProtocolRow out;
    out.label = row.label;
    std::vector<SampleResult> guided, plain;
    std::vector<std::vector<CriticalPoint>> all;
    const int total = cfg.n_locations * n_streams;
    out.latents.resize(total, model.denoiser.config.latent_dim);
    int k = 0;
    for (int l = 0; l < cfg.n_locations; ++l) {
      const auto spec = place_row(row, cfg.seed, l, std::max(cfg.location_margin, kSpecMargin));
      for (int j = 0; j < n_streams; ++j, ++k) {
        const auto z0 = guided_sample(spec, siren, model, cfg.guidance, cfg.seed, static_cast<std::uint64_t>(j));
        out.latents.row(k) = normalize(model.stats, z0).transpose();
        auto cps = extract(siren, z0, cfg.extract);
        guided.push_back({spec, cps});
        all.push_back(std::move(cps));
        plain.push_back({spec, base_cps[static_cast<std::size_t>(j)]});
        if (progress) progress({row.label, k + 1, total});
      }
    }
    out.guided = alignment(guided, cfg.hit_radius);
    out.unguided = alignment(plain, cfg.hit_radius);
    out.histogram = topology_histogram(all);
    if (total >= 2) out.fd = frechet_distance(gaussian_summary(out.latents, sid), data);
    rep.rows.push_back(std::move(out));
  }
  return rep;
}

inline nlohmann::json to_json(const ProtocolReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"specification", row.label},
                    {"fd", row.fd},
                    {"alignment", to_json(row.guided)},
                    {"unguided_alignment", to_json(row.unguided)},
                    {"histogram", to_json(row.histogram)}});
  return {{"protocol", std::string(to_string(r.kind))},
          {"baseline", {{"fd", r.baseline_fd}, {"n_samples", r.baseline_samples}}},
          {"rows", rows}};
}

/// Specification | FD | Alignment | Hit Distance Avg | Hit Distance Std.
inline std::string format_table(const ProtocolReport& r) {
  std::size_t w = 13;
  for (const auto& row : r.rows) w = std::max(w, row.label.size());
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %10s  %16s  %16s\n", static_cast<int>(w), "Specification", "FD",
                "Alignment", "Hit Distance Avg", "Hit Distance Std");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-*s  %8.3f  %10s  %16s  %16s\n", static_cast<int>(w), "Baseline", r.baseline_fd,
                "NA", "NA", "NA");
  os << buf;
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %8.3f  %9.2f%%  %15.3f%%  %15.3f%%\n", static_cast<int>(w),
                  row.label.c_str(), row.fd, 100.0 * row.guided.aligned_fraction,
                  100.0 * row.guided.hit_distance_avg, 100.0 * row.guided.hit_distance_std);
    os << buf;
  }
  return os.str();
}

}  // namespace topoguide
