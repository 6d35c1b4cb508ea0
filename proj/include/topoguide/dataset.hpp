#pragma once

// Synthetic band-limited vector fields with exact critical point ground truth,
// VF2D grid files and crop sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>
#include <json.hpp>

#include "topoguide/checkpoint.hpp"
#include "topoguide/diffmath.hpp"
#include "topoguide/field.hpp"
#include "topoguide/rng.hpp"
#include "topoguide/topo_extract.hpp"

namespace topoguide {

struct SynthConfig {
  int n_fields = 100;
  int resolution = 64;
  int n_modes = 4;                 // K: modes per component, mode k has |omega| = k * freq_unit
  double amplitude_decay = 0.7;    // amplitude of mode k scales as decay^(k-1)
  double freq_unit = std::numbers::pi / 2;
  int n_linear_anchors = 0;
  double anchor_radius = 0.35;     // Gaussian window width of each anchor
  int gt_resolution = 1024;        // 0 disables ground truth search
  std::uint64_t seed = 0;

  void validate() const {
    if (n_fields < 1) throw std::invalid_argument("SynthConfig: n_fields must be positive");
    if (resolution < 16) throw std::invalid_argument("SynthConfig: resolution must be >= 16");
    if (n_modes < 0 || n_linear_anchors < 0) throw std::invalid_argument("SynthConfig: counts must be non-negative");
    if (n_modes == 0 && n_linear_anchors == 0) throw std::invalid_argument("SynthConfig: field has no components");
    if (!(amplitude_decay > 0) || !(freq_unit > 0) || !(anchor_radius > 0))
      throw std::invalid_argument("SynthConfig: decay, frequency unit and anchor radius must be positive");
    if (gt_resolution != 0 && gt_resolution < 16) throw std::invalid_argument("SynthConfig: gt_resolution must be 0 or >= 16");
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"n_fields", c.n_fields},        {"resolution", c.resolution},   {"n_modes", c.n_modes},
          {"amplitude_decay", c.amplitude_decay}, {"freq_unit", c.freq_unit}, {"n_linear_anchors", c.n_linear_anchors},
          {"anchor_radius", c.anchor_radius}, {"gt_resolution", c.gt_resolution}, {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.n_fields = j.value("n_fields", c.n_fields);
  c.resolution = j.value("resolution", c.resolution);
  c.n_modes = j.value("n_modes", c.n_modes);
  c.amplitude_decay = j.value("amplitude_decay", c.amplitude_decay);
  c.freq_unit = j.value("freq_unit", c.freq_unit);
  c.n_linear_anchors = j.value("n_linear_anchors", c.n_linear_anchors);
  c.anchor_radius = j.value("anchor_radius", c.anchor_radius);
  c.gt_resolution = j.value("gt_resolution", c.gt_resolution);
  c.seed = j.value("seed", c.seed);
  return c;
}

/// Closed-form field: per component a sum of plane waves a sin(w.p + phi),
/// plus Gaussian-windowed linear anchors A (p - c) exp(-|p - c|^2 / r^2).
class FourierField {
 public:
  struct Wave {
    double wx, wy, phase, amp;
  };
  struct Anchor {
    Eigen::Matrix2d A;
    Eigen::Vector2d center;
    double radius;
  };

  std::array<std::vector<Wave>, 2> waves;
  std::vector<Anchor> anchors;

  Vec2 value(const DomainPoint& p) const {
    double f[2] = {0, 0};
    for (int c = 0; c < 2; ++c)
      for (const auto& w : waves[c]) f[c] += w.amp * std::sin(w.wx * p.x + w.wy * p.y + w.phase);
    for (const auto& a : anchors) {
      const Eigen::Vector2d d(p.x - a.center.x(), p.y - a.center.y());
      const double win = std::exp(-d.squaredNorm() / (a.radius * a.radius));
      const Eigen::Vector2d v = win * (a.A * d);
      f[0] += v.x();
      f[1] += v.y();
    }
    return {f[0], f[1]};
  }

  Jacobian2 jacobian(const DomainPoint& p) const {
    Eigen::Matrix2d j = Eigen::Matrix2d::Zero();
    for (int c = 0; c < 2; ++c)
      for (const auto& w : waves[c]) {
        const double k = w.amp * std::cos(w.wx * p.x + w.wy * p.y + w.phase);
        j(c, 0) += k * w.wx;
        j(c, 1) += k * w.wy;
      }
    for (const auto& a : anchors) {
      const Eigen::Vector2d d(p.x - a.center.x(), p.y - a.center.y());
      const double r2 = a.radius * a.radius;
      const double win = std::exp(-d.squaredNorm() / r2);
      const Eigen::Vector2d grad_win = (-2.0 / r2) * win * d;
      j += win * a.A + (a.A * d) * grad_win.transpose();
    }
    return {j(0, 0), j(0, 1), j(1, 0), j(1, 1)};
  }

  PointEvaluation evaluate_with_jacobian(const DomainPoint& p) const { return {value(p), jacobian(p)}; }

  MatX<double> evaluate_points(const MatX<double>& coords) const {
    MatX<double> out(2, coords.cols());
    for (Eigen::Index k = 0; k < coords.cols(); ++k) {
      const auto f = value({coords(0, k), coords(1, k)});
      out(0, k) = f.u;
      out(1, k) = f.v;
    }
    return out;
  }

  /// Cell-centered samples. Plane waves are separated into per-row and
  /// per-column factors, so the cost per cell is a few multiply-adds per wave.
  VectorFieldGrid sample_grid(int width, int height) const {
    VectorFieldGrid g(width, height);
    std::vector<double> acc(static_cast<std::size_t>(width) * height * 2, 0.0);
    std::vector<double> sx(width), cx(width), sy(height), cy(height);
    for (int c = 0; c < 2; ++c)
      for (const auto& w : waves[c]) {
        for (int i = 0; i < width; ++i) {
          const double x = -1.0 + (2.0 * i + 1.0) / width;
          sx[i] = std::sin(w.wx * x + w.phase);
          cx[i] = std::cos(w.wx * x + w.phase);
        }
        for (int r = 0; r < height; ++r) {
          const double y = -1.0 + (2.0 * r + 1.0) / height;
          sy[r] = std::sin(w.wy * y);
          cy[r] = std::cos(w.wy * y);
        }
        for (int r = 0; r < height; ++r) {
          double* row = acc.data() + static_cast<std::size_t>(r) * width * 2;
          const double a = w.amp * cy[r], b = w.amp * sy[r];
          for (int i = 0; i < width; ++i) row[2 * i + c] += a * sx[i] + b * cx[i];
        }
      }
    if (!anchors.empty())
      for (int r = 0; r < height; ++r)
        for (int i = 0; i < width; ++i) {
          const auto p = g.center(r, i);
          for (const auto& a : anchors) {
            const Eigen::Vector2d d(p.x - a.center.x(), p.y - a.center.y());
            const Eigen::Vector2d v = std::exp(-d.squaredNorm() / (a.radius * a.radius)) * (a.A * d);
            acc[(static_cast<std::size_t>(r) * width + i) * 2] += v.x();
            acc[(static_cast<std::size_t>(r) * width + i) * 2 + 1] += v.y();
          }
        }
    auto& vals = g.values();
    for (std::size_t i = 0; i < acc.size(); ++i) vals[i] = static_cast<float>(acc[i]);
    return g;
  }
};

/// Draws one analytic field. Each wave has a uniformly random direction and
/// phase; amplitude of mode k is decay^(k-1) * U(0.5, 1.5).
inline FourierField random_fourier_field(const SynthConfig& cfg, Rng& rng) {
  FourierField f;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.5, 1.5);
  for (int c = 0; c < 2; ++c)
    for (int k = 1; k <= cfg.n_modes; ++k) {
      const double th = angle(rng);
      const double mag = k * cfg.freq_unit;
      f.waves[c].push_back({mag * std::cos(th), mag * std::sin(th), angle(rng),
                            std::pow(cfg.amplitude_decay, k - 1) * amp(rng)});
    }
  std::uniform_real_distribution<double> pos(-0.7, 0.7);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < cfg.n_linear_anchors; ++i) {
    FourierField::Anchor a;
    do {
      a.A << n(rng), n(rng), n(rng), n(rng);
    } while (std::abs(a.A.determinant()) < 0.2);
    a.A *= 2.0;
    a.center = {pos(rng), pos(rng)};
    a.radius = cfg.anchor_radius;
    f.anchors.push_back(a);
  }
  return f;
}

/// Zeros of an analytic field: sign-change cells at the given resolution,
/// then Newton iterations on the closed form, kept only if they converge
/// inside (a slightly padded copy of) their cell. Duplicates are merged.
inline std::vector<CriticalPoint> analytic_critical_points(const FourierField& f, int resolution,
                                                           double eps_class = kDefaultEpsClass) {
  const auto grid = f.sample_grid(resolution, resolution);
  std::vector<CriticalPoint> out;
  for (const auto& cell : candidate_cells(grid)) {
    const auto box = cell_box(grid, cell);
    const double pad = 0.5 * (box.x1 - box.x0);
    Eigen::Vector2d p(0.5 * (box.x0 + box.x1), 0.5 * (box.y0 + box.y1));
    bool converged = false;
    for (int it = 0; it < 40; ++it) {
      const auto v = f.value({p.x(), p.y()});
      if (std::hypot(v.u, v.v) < 1e-13) {
        converged = true;
        break;
      }
      const auto j = f.jacobian({p.x(), p.y()});
      Eigen::Matrix2d m;
      m << j.a11, j.a12, j.a21, j.a22;
      if (std::abs(m.determinant()) < 1e-14) break;
      p -= m.inverse() * Eigen::Vector2d(v.u, v.v);
      if (p.x() < box.x0 - pad || p.x() > box.x1 + pad || p.y() < box.y0 - pad || p.y() > box.y1 + pad) break;
    }
    if (!converged) continue;
    const DomainPoint dp{p.x(), p.y()};
    if (!dp.in_domain() || std::abs(dp.x) >= 1.0 || std::abs(dp.y) >= 1.0) continue;
    const bool dup = std::any_of(out.begin(), out.end(),
                                 [&](const CriticalPoint& q) { return distance(q.location, dp) < 1e-7; });
    if (dup) continue;
    CriticalPoint cp;
    cp.location = dp;
    cp.norm_at_point = f.value(dp).norm();
    cp.jacobian = f.jacobian(dp);
    cp.analysis = analyze_jacobian(cp.jacobian);
    cp.cls = classify(cp.analysis, eps_class);
    out.push_back(cp);
  }
  return out;
}

struct FieldRecord {
  std::string id;
  VectorFieldGrid grid;
  std::optional<std::vector<CriticalPoint>> ground_truth;
  std::optional<FourierField> analytic;  // present for generated fields
};

inline std::vector<FieldRecord> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<FieldRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.n_fields));
  for (int i = 0; i < cfg.n_fields; ++i) {
    auto rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(i), 0x5157);
    FieldRecord r;
    char id[32];
    std::snprintf(id, sizeof(id), "field_%06d", i);
    r.id = id;
    r.analytic = random_fourier_field(cfg, rng);
    r.grid = r.analytic->sample_grid(cfg.resolution, cfg.resolution);
    if (cfg.gt_resolution > 0) r.ground_truth = analytic_critical_points(*r.analytic, cfg.gt_resolution);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// VF2D: "VF2D", u32 version, u32 width, u32 height, H*W*2 float32 LE,
// row-major with (u, v) interleaved.

inline constexpr std::uint32_t kVf2dVersion = 1;

class Vf2dError : public FormatError {
 public:
  enum class Kind { Header, Version, Payload };
  Vf2dError(Kind kind, const std::string& what) : FormatError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void write_vf2d(const VectorFieldGrid& g, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("VF2D", 4);
  detail::put_u32(os, kVf2dVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(g.width()));
  detail::put_u32(os, static_cast<std::uint32_t>(g.height()));
  detail::write_le_floats(os, g.values().data(), g.values().size());
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline VectorFieldGrid parse_vf2d(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < 16) throw Vf2dError(Vf2dError::Kind::Header, origin + ": file shorter than VF2D header");
  if (std::memcmp(bytes.data(), "VF2D", 4) != 0) throw Vf2dError(Vf2dError::Kind::Header, origin + ": bad magic");
  const auto version = detail::get_u32(bytes.data() + 4);
  if (version != kVf2dVersion)
    throw Vf2dError(Vf2dError::Kind::Version, origin + ": unsupported VF2D version " + std::to_string(version));
  const auto w = detail::get_u32(bytes.data() + 8);
  const auto h = detail::get_u32(bytes.data() + 12);
  if (w < 2 || h < 2 || w > 65536 || h > 65536)
    throw Vf2dError(Vf2dError::Kind::Header, origin + ": invalid dimensions");
  const std::size_t count = static_cast<std::size_t>(w) * h * 2;
  if (bytes.size() != 16 + count * sizeof(float))
    throw Vf2dError(Vf2dError::Kind::Payload, origin + ": payload length " + std::to_string(bytes.size() - 16) +
                                                  " bytes, expected " + std::to_string(count * sizeof(float)));
  VectorFieldGrid g(static_cast<int>(w), static_cast<int>(h));
  detail::read_le_floats(reinterpret_cast<const char*>(bytes.data() + 16), g.values().data(), count);
  return g;
}

inline VectorFieldGrid read_vf2d(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_vf2d(bytes, path.string());
}

/// Record id is the file stem; imported fields carry no ground truth.
inline FieldRecord import_grid(const std::filesystem::path& path) {
  FieldRecord r;
  r.id = path.stem().string();
  r.grid = read_vf2d(path);
  return r;
}

inline void export_grid(const FieldRecord& r, const std::filesystem::path& path) { write_vf2d(r.grid, path); }

// ---------------------------------------------------------------------------

/// Sub-grid of `size` x `size` cells starting at column x0, row y0. The crop
/// is remapped to its own [-1, 1]^2 domain; ground truth is filtered to the
/// crop extent and its Jacobians rescaled to the new coordinates.
inline FieldRecord crop(const FieldRecord& rec, int x0, int y0, int size) {
  const auto& g = rec.grid;
  if (size < 2 || x0 < 0 || y0 < 0 || x0 + size > g.width() || y0 + size > g.height())
    throw std::out_of_range("crop: window outside grid");
  FieldRecord out;
  out.id = rec.id + "_crop_" + std::to_string(x0) + "_" + std::to_string(y0) + "_" + std::to_string(size);
  out.grid = VectorFieldGrid(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      out.grid.u(r, c) = g.u(y0 + r, x0 + c);
      out.grid.v(r, c) = g.v(y0 + r, x0 + c);
    }
  const double xmin = -1.0 + 2.0 * x0 / g.width(), xmax = -1.0 + 2.0 * (x0 + size) / g.width();
  const double ymin = -1.0 + 2.0 * y0 / g.height(), ymax = -1.0 + 2.0 * (y0 + size) / g.height();
  const double sx = 0.5 * (xmax - xmin), sy = 0.5 * (ymax - ymin);
  if (rec.ground_truth) {
    std::vector<CriticalPoint> gt;
    for (const auto& p : *rec.ground_truth) {
      if (!(p.location.x > xmin && p.location.x < xmax && p.location.y > ymin && p.location.y < ymax)) continue;
      CriticalPoint q = p;
      q.location = {-1.0 + (p.location.x - xmin) / sx, -1.0 + (p.location.y - ymin) / sy};
      q.jacobian = {p.jacobian.a11 * sx, p.jacobian.a12 * sy, p.jacobian.a21 * sx, p.jacobian.a22 * sy};
      q.analysis = analyze_jacobian(q.jacobian);
      q.cls = classify(q.analysis);
      gt.push_back(q);
    }
    out.ground_truth = std::move(gt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json + one VF2D file and optional ground-truth
// report per field.

inline void save_dataset(const std::filesystem::path& dir, const std::vector<FieldRecord>& records,
                         const nlohmann::json& generator) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "topoguide.dataset";
  manifest["version"] = 1;
  manifest["generator"] = generator;
  manifest["fields"] = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json e{{"id", r.id}, {"file", r.id + ".vf2d"}};
    write_vf2d(r.grid, dir / (r.id + ".vf2d"));
    if (r.ground_truth) {
      const std::string gt = r.id + ".gt.json";
      std::ofstream os(dir / gt);
      os << extraction_report(*r.ground_truth).dump() << '\n';
      e["ground_truth"] = gt;
    }
    manifest["fields"].push_back(e);
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

inline std::vector<FieldRecord> load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  is >> manifest;
  std::vector<FieldRecord> out;
  for (const auto& e : manifest.at("fields")) {
    FieldRecord r;
    r.id = e.at("id").get<std::string>();
    r.grid = read_vf2d(dir / e.at("file").get<std::string>());
    if (e.contains("ground_truth")) {
      std::ifstream gs(dir / e.at("ground_truth").get<std::string>());
      nlohmann::json gj;
      gs >> gj;
      r.ground_truth = critical_points_from_json(gj);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace topoguide
