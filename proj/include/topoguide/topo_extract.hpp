#pragma once

// Grid-and-sampling critical point extraction.
//
// The field is sampled on a regular grid; every cell spanned by four adjacent
// samples whose u values and v values both change sign is a candidate. Each
// candidate is refined by evaluating the continuous field at N random points
// inside the cell and keeping the one with the smallest norm.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "topoguide/diffmath.hpp"
#include "topoguide/field.hpp"
#include "topoguide/rng.hpp"
#include "topoguide/siren.hpp"

namespace topoguide {

struct CriticalPoint {
  DomainPoint location;
  double norm_at_point = 0;
  Jacobian2 jacobian;
  JacobianAnalysis analysis;
  CriticalClass cls;
};

struct ExtractConfig {
  int grid_res = 128;
  int samples_per_cell = 128;
  double norm_accept_tau = 0.02;  // fraction of the grid RMS norm
  double eps_class = kDefaultEpsClass;
  std::uint64_t seed = 0;
  // Also require the linearized zero (one Newton step from the refined point)
  // to lie in the same cell. Rejects low-norm cells along near-tangent
  // nullclines and the neighbours of a zero that sits near a cell edge.
  bool require_local_zero = true;

  void validate() const {
    if (grid_res < 16) throw std::invalid_argument("ExtractConfig: grid_res must be >= 16");
    if (samples_per_cell < 1) throw std::invalid_argument("ExtractConfig: samples_per_cell must be >= 1");
    if (!(norm_accept_tau > 0)) throw std::invalid_argument("ExtractConfig: norm_accept_tau must be positive");
    if (!(eps_class > 0)) throw std::invalid_argument("ExtractConfig: eps_class must be positive");
  }
};

/// Cell (row, col) spans grid samples (row..row+1, col..col+1).
struct CellIndex {
  int row = 0;
  int col = 0;
  bool operator==(const CellIndex&) const = default;
};

/// Axis-aligned extent of a cell in domain coordinates.
struct CellBox {
  double x0, x1, y0, y1;
};

inline CellBox cell_box(const VectorFieldGrid& g, CellIndex c) {
  const auto lo = g.center(c.row, c.col);
  const auto hi = g.center(c.row + 1, c.col + 1);
  return {lo.x, hi.x, lo.y, hi.y};
}

/// True when the four values are not all of one strict sign; zero counts as both.
inline bool mixed_sign(float a, float b, float c, float d) {
  const bool any_nonneg = a >= 0 || b >= 0 || c >= 0 || d >= 0;
  const bool any_nonpos = a <= 0 || b <= 0 || c <= 0 || d <= 0;
  return any_nonneg && any_nonpos;
}

inline std::vector<CellIndex> candidate_cells(const VectorFieldGrid& g, bool exclude_boundary = false) {
  std::vector<CellIndex> out;
  const int rows = g.height() - 1;
  const int cols = g.width() - 1;
  const int lo = exclude_boundary ? 1 : 0;
  for (int r = lo; r < rows - lo; ++r)
    for (int c = lo; c < cols - lo; ++c) {
      if (mixed_sign(g.u(r, c), g.u(r, c + 1), g.u(r + 1, c), g.u(r + 1, c + 1)) &&
          mixed_sign(g.v(r, c), g.v(r, c + 1), g.v(r + 1, c), g.v(r + 1, c + 1)))
        out.push_back({r, c});
    }
  return out;
}

/// Continuous field backed by a latent-modulated network.
struct SirenField {
  const SirenWeights<double>& weights;
  Eigen::VectorXd latent;

  VectorFieldGrid sample_grid(int width, int height) const { return evaluate_grid(weights, latent, width, height); }
  MatX<double> evaluate_points(const MatX<double>& coords) const {
    return topoguide::evaluate_points(weights, latent, coords);
  }
  PointEvaluation evaluate_with_jacobian(const DomainPoint& p) const {
    return topoguide::evaluate_with_jacobian(weights, latent, p);
  }
};

/// Bilinear interpolant of a sampled grid, for fields that arrive as raw
/// samples rather than latents. Clamped to the outermost cell centers.
struct GridField {
  const VectorFieldGrid& grid;

  struct Local {
    int r0, c0;
    double fr, fc;
  };

  Local locate(const DomainPoint& p) const {
    const int W = grid.width(), H = grid.height();
    const double c = std::clamp((p.x + 1.0) * 0.5 * W - 0.5, 0.0, W - 1.0);
    const double r = std::clamp((p.y + 1.0) * 0.5 * H - 0.5, 0.0, H - 1.0);
    const int c0 = std::min(static_cast<int>(c), W - 2), r0 = std::min(static_cast<int>(r), H - 2);
    return {r0, c0, r - r0, c - c0};
  }

  PointEvaluation evaluate_with_jacobian(const DomainPoint& p) const {
    const auto l = locate(p);
    const double sx = 0.5 * grid.width(), sy = 0.5 * grid.height();
    auto comp = [&](bool vcomp, double& val, double& dx, double& dy) {
      auto at = [&](int r, int c) { return static_cast<double>(vcomp ? grid.v(r, c) : grid.u(r, c)); };
      const double f00 = at(l.r0, l.c0), f01 = at(l.r0, l.c0 + 1), f10 = at(l.r0 + 1, l.c0),
                   f11 = at(l.r0 + 1, l.c0 + 1);
      const double top = f00 + l.fc * (f01 - f00), bot = f10 + l.fc * (f11 - f10);
      val = top + l.fr * (bot - top);
      dx = sx * ((1 - l.fr) * (f01 - f00) + l.fr * (f11 - f10));
      dy = sy * (bot - top);
    };
    PointEvaluation e;
    comp(false, e.value.u, e.jacobian.a11, e.jacobian.a12);
    comp(true, e.value.v, e.jacobian.a21, e.jacobian.a22);
    return e;
  }

  MatX<double> evaluate_points(const MatX<double>& coords) const {
    MatX<double> out(2, coords.cols());
    for (Eigen::Index k = 0; k < coords.cols(); ++k) {
      const auto e = evaluate_with_jacobian({coords(0, k), coords(1, k)});
      out(0, k) = e.value.u;
      out(1, k) = e.value.v;
    }
    return out;
  }

  VectorFieldGrid sample_grid(int width, int height) const {
    if (width == grid.width() && height == grid.height()) return grid;
    const MatX<double> v = evaluate_points(grid_coords(width, height));
    VectorFieldGrid g(width, height);
    for (Eigen::Index k = 0; k < v.cols(); ++k) {
      g.values()[2 * k] = static_cast<float>(v(0, k));
      g.values()[2 * k + 1] = static_cast<float>(v(1, k));
    }
    return g;
  }
};

struct RefinedPoint {
  DomainPoint point;
  double norm = 0;
};

/// Minimum-norm point among N uniform samples in the cell interior.
template <typename Field>
RefinedPoint refine_cell(const Field& field, const VectorFieldGrid& grid, CellIndex cell, int samples, Rng& rng) {
  if (cell.row < 0 || cell.col < 0 || cell.row >= grid.height() - 1 || cell.col >= grid.width() - 1)
    throw std::out_of_range("refine_cell: cell outside grid");
  const auto box = cell_box(grid, cell);
  std::uniform_real_distribution<double> ux(box.x0, box.x1), uy(box.y0, box.y1);
  MatX<double> coords(2, samples);
  for (int k = 0; k < samples; ++k) {
    coords(0, k) = ux(rng);
    coords(1, k) = uy(rng);
  }
  const MatX<double> vals = field.evaluate_points(coords);
  Eigen::Index best = 0;
  (vals.colwise().squaredNorm()).minCoeff(&best);
  return {{coords(0, best), coords(1, best)}, vals.col(best).norm()};
}

/// True when p - J^-1 v(p) falls inside the box.
inline bool newton_target_in_cell(const PointEvaluation& ev, const CellBox& box, const DomainPoint& p) {
  const auto& j = ev.jacobian;
  const double det = j.a11 * j.a22 - j.a12 * j.a21;
  if (!(std::abs(det) > 0)) return false;
  const double dx = (j.a22 * ev.value.u - j.a12 * ev.value.v) / det;
  const double dy = (-j.a21 * ev.value.u + j.a11 * ev.value.v) / det;
  const double x = p.x - dx, y = p.y - dy;
  return x >= box.x0 && x <= box.x1 && y >= box.y0 && y <= box.y1;
}

template <typename Field>
std::vector<CriticalPoint> extract(const Field& field, const ExtractConfig& cfg) {
  cfg.validate();
  const auto grid = field.sample_grid(cfg.grid_res, cfg.grid_res);
  const double threshold = cfg.norm_accept_tau * rms_norm(grid);
  std::vector<CriticalPoint> out;
  for (const auto& cell : candidate_cells(grid, true)) {
    // One stream per cell keeps results independent of visiting order.
    auto rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(cell.row) * static_cast<std::uint64_t>(grid.width()) +
                                        static_cast<std::uint64_t>(cell.col));
    const auto refined = refine_cell(field, grid, cell, cfg.samples_per_cell, rng);
    if (!(refined.norm <= threshold)) continue;
    CriticalPoint cp;
    cp.location = refined.point;
    cp.norm_at_point = refined.norm;
    const auto ev = field.evaluate_with_jacobian(refined.point);
    if (cfg.require_local_zero && !newton_target_in_cell(ev, cell_box(grid, cell), refined.point)) continue;
    cp.jacobian = ev.jacobian;
    cp.analysis = analyze_jacobian(cp.jacobian);
    cp.cls = classify(cp.analysis, cfg.eps_class);
    out.push_back(cp);
  }
  return out;
}

template <typename S>
std::vector<CriticalPoint> extract(const SirenWeights<S>& w, const Eigen::VectorXd& z, const ExtractConfig& cfg) {
  return extract(SirenField{w, z}, cfg);
}

// ---------------------------------------------------------------------------
// Report serialization.

inline nlohmann::json to_json(const ExtractConfig& c) {
  return {{"grid_res", c.grid_res},
          {"samples_per_cell", c.samples_per_cell},
          {"norm_accept_tau", c.norm_accept_tau},
          {"eps_class", c.eps_class},
          {"seed", c.seed},
          {"require_local_zero", c.require_local_zero}};
}

inline ExtractConfig extract_config_from_json(const nlohmann::json& j, ExtractConfig c = {}) {
  c.grid_res = j.value("grid_res", c.grid_res);
  c.samples_per_cell = j.value("samples_per_cell", c.samples_per_cell);
  c.norm_accept_tau = j.value("norm_accept_tau", c.norm_accept_tau);
  c.eps_class = j.value("eps_class", c.eps_class);
  c.seed = j.value("seed", c.seed);
  c.require_local_zero = j.value("require_local_zero", c.require_local_zero);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const CriticalPoint& p) {
  return {{"x", p.location.x},
          {"y", p.location.y},
          {"norm", p.norm_at_point},
          {"trace", p.analysis.trace},
          {"det", p.analysis.det},
          {"delta", p.analysis.delta},
          {"lam1_re", p.analysis.lam1_re},
          {"lam2_re", p.analysis.lam2_re},
          {"kind", std::string(to_string(p.cls.kind))},
          {"stability", std::string(to_string(p.cls.stability))}};
}

inline nlohmann::json extraction_report(const std::vector<CriticalPoint>& points) {
  auto arr = nlohmann::json::array();
  for (const auto& p : points) arr.push_back(to_json(p));
  return arr;
}

/// Parses a report entry. The Jacobian itself is not serialized; analysis
/// values and class labels are taken as recorded.
inline CriticalPoint critical_point_from_json(const nlohmann::json& j) {
  CriticalPoint p;
  p.location = {j.at("x").get<double>(), j.at("y").get<double>()};
  p.norm_at_point = j.value("norm", 0.0);
  p.analysis.trace = j.value("trace", 0.0);
  p.analysis.det = j.value("det", 0.0);
  p.analysis.delta = j.value("delta", 0.0);
  p.analysis.lam1_re = j.value("lam1_re", 0.0);
  p.analysis.lam2_re = j.value("lam2_re", 0.0);
  p.analysis.is_complex = p.analysis.delta < 0;
  p.cls.kind = kind_from_string(j.at("kind").get<std::string>());
  p.cls.stability = stability_from_string(j.at("stability").get<std::string>());
  return p;
}

inline std::vector<CriticalPoint> critical_points_from_json(const nlohmann::json& arr) {
  std::vector<CriticalPoint> out;
  for (const auto& j : arr) out.push_back(critical_point_from_json(j));
  return out;
}

}  // namespace topoguide
