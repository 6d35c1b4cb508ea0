#pragma once

// Topology energies on the predicted clean latent and the guided reverse loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "topoguide/diffmath.hpp"
#include "topoguide/diffusion.hpp"
#include "topoguide/field.hpp"
#include "topoguide/latent_fit.hpp"
#include "topoguide/siren.hpp"

namespace topoguide {

inline constexpr double kSpecMargin = 0.1;

struct CriticalPointSpec {
  DomainPoint p;
  std::optional<Kind> kind;
  std::optional<Stability> stability;

  void validate() const {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw std::invalid_argument("spec point: non-finite location");
    const double lim = 1.0 - kSpecMargin;
    for (const auto& [name, v] : {std::pair{"x", p.x}, std::pair{"y", p.y}})
      if (std::abs(v) > lim)
        throw std::invalid_argument(std::string("spec point: ") + name + " = " + std::to_string(v) +
                                    " is outside [-0.9, 0.9]");
    if (kind == Kind::Degenerate) throw std::invalid_argument("spec point: degenerate is not a guidance target");
    if (stability == Stability::Indeterminate)
      throw std::invalid_argument("spec point: indeterminate is not a guidance target");
    if (kind == Kind::Saddle && stability == Stability::Unstable)
      throw std::invalid_argument("spec point: a saddle cannot be unstable");
  }
};

struct TopologySpec {
  std::vector<CriticalPointSpec> points;

  void validate() const {
    if (points.empty()) throw std::invalid_argument("topology spec: no points");
    for (std::size_t i = 0; i < points.size(); ++i) {
      try {
        points[i].validate();
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("points[" + std::to_string(i) + "]: " + e.what());
      }
      for (std::size_t j = 0; j < i; ++j)
        if (points[i].p.x == points[j].p.x && points[i].p.y == points[j].p.y)
          throw std::invalid_argument("topology spec: duplicate location");
    }
  }
};

struct BetaTargets {
  std::optional<double> beta1, beta2, beta_s;
};

/// Sink (1, 1), source (-1, -1), saddle (1, -1) for ascending eigenvalue
/// order; paper_saddle selects the printed (-1, 1) alternative.
inline BetaTargets spec_to_betas(std::optional<Kind> kind, std::optional<Stability> stability,
                                 bool paper_saddle = false) {
  BetaTargets b;
  if (kind) {
    switch (*kind) {
      case Kind::Sink: b.beta1 = 1.0; b.beta2 = 1.0; break;
      case Kind::Source: b.beta1 = -1.0; b.beta2 = -1.0; break;
      case Kind::Saddle:
        b.beta1 = paper_saddle ? -1.0 : 1.0;
        b.beta2 = paper_saddle ? 1.0 : -1.0;
        break;
      case Kind::Degenerate: break;
    }
  }
  if (stability == Stability::Stable) b.beta_s = -1.0;
  if (stability == Stability::Unstable) b.beta_s = 1.0;
  return b;
}

// ---------------------------------------------------------------------------
// Energies. Each returns the value and, when asked, the cotangents on the
// network output and its spatial Jacobian at p.

struct EnergyTerm {
  double value = 0;
  HeadGradients head;
};

inline EnergyTerm presence_term(const PointEvaluation& ev) {
  EnergyTerm e;
  const double n = std::hypot(ev.value.u, ev.value.v);
  e.value = n;
  if (n > 0) e.head.d_value = {ev.value.u / n, ev.value.v / n};
  return e;
}

inline EnergyTerm type_term(const PointEvaluation& ev, double beta1, double beta2) {
  const auto a = analyze_jacobian(ev.jacobian);
  const auto g = analysis_gradients(ev.jacobian);
  EnergyTerm e;
  e.value = sigmoid(beta1 * a.lam1_re) + sigmoid(beta2 * a.lam2_re);
  e.head.d_jacobian = (beta1 * sigmoid_derivative(beta1 * a.lam1_re)) * g.d_lam1;
  e.head.d_jacobian += (beta2 * sigmoid_derivative(beta2 * a.lam2_re)) * g.d_lam2;
  return e;
}

inline EnergyTerm stability_term(const PointEvaluation& ev, double beta_s) {
  const auto a = analyze_jacobian(ev.jacobian);
  EnergyTerm e;
  e.value = sigmoid(beta_s * a.delta);
  e.head.d_jacobian = (beta_s * sigmoid_derivative(beta_s * a.delta)) * analysis_gradients(ev.jacobian).d_delta;
  return e;
}

inline double energy_presence(const SirenWeights<double>& w, const Eigen::VectorXd& z, const DomainPoint& p) {
  return presence_term(evaluate_with_jacobian(w, z, p)).value;
}

inline double energy_type(const SirenWeights<double>& w, const Eigen::VectorXd& z, const DomainPoint& p, double beta1,
                          double beta2) {
  return type_term(evaluate_with_jacobian(w, z, p), beta1, beta2).value;
}

inline double energy_stability(const SirenWeights<double>& w, const Eigen::VectorXd& z, const DomainPoint& p,
                               double beta_s) {
  return stability_term(evaluate_with_jacobian(w, z, p), beta_s).value;
}

/// Summed energy of one spec point and its head cotangents.
inline EnergyTerm point_energy(const PointEvaluation& ev, const BetaTargets& b) {
  EnergyTerm total = presence_term(ev);
  auto add = [&](const EnergyTerm& t) {
    total.value += t.value;
    total.head.d_value.u += t.head.d_value.u;
    total.head.d_value.v += t.head.d_value.v;
    total.head.d_jacobian += t.head.d_jacobian;
  };
  if (b.beta1 && b.beta2) add(type_term(ev, *b.beta1, *b.beta2));
  if (b.beta_s) add(stability_term(ev, *b.beta_s));
  return total;
}

/// Total energy over the spec; optionally its gradient with respect to z.
inline double energy_total(const SirenWeights<double>& w, const Eigen::VectorXd& z, const TopologySpec& spec,
                           Eigen::VectorXd* grad = nullptr, bool paper_saddle = false) {
  double e = 0;
  if (grad) grad->setZero(z.size());
  for (const auto& sp : spec.points) {
    const auto t = point_energy(evaluate_with_jacobian(w, z, sp.p), spec_to_betas(sp.kind, sp.stability, paper_saddle));
    e += t.value;
    if (grad) *grad += pullback_to_latent(w, z, sp.p, t.head);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Guided sampling.

struct GuidanceConfig {
  double omega = 2.0;
  int t_start = 600;
  int t_end = 0;
  bool full_chain = true;
  bool paper_saddle = false;

  void validate(int T) const {
    if (!(omega >= 0) || !std::isfinite(omega)) throw std::invalid_argument("guidance: omega must be finite and >= 0");
    if (t_end < 0) throw std::invalid_argument("guidance: t_end must be >= 0");
    if (!(t_start > t_end)) throw std::invalid_argument("guidance: t_start must exceed t_end");
    if (t_start > T) throw std::invalid_argument("guidance: t_start exceeds T");
  }
  bool active(int t) const { return omega != 0 && t <= t_start && t > t_end; }
};

/// Gradient of the spec energy at the denormalized clean prediction with
/// respect to the normalized noisy latent z_t.
inline Eigen::VectorXd guidance_gradient(const Eigen::VectorXd& z_t, int t, const TopologySpec& spec,
                                         const SirenWeights<double>& siren, const DiffusionModel& model,
                                         const GuidanceConfig& cfg, double* energy = nullptr) {
  const auto& s = model.schedule;
  const double ab = s.abar(t);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const Eigen::VectorXd eps = denoiser_apply(model.denoiser, z_t, t);
  const Eigen::VectorXd z_hat = predict_clean(z_t, t, eps, s);
  Eigen::VectorXd gz;
  const double e = energy_total(siren, denormalize(model.stats, z_hat), spec, &gz, cfg.paper_saddle);
  if (energy) *energy = e;
  const Eigen::VectorXd g = model.stats.std.cwiseProduct(gz);  // d E / d z_hat
  if (!cfg.full_chain) return g / sa;
  const auto [eps2, jt_g] = denoiser_vjp(model.denoiser, z_t, t, g);
  return (g - sb * jt_g) / sa;
}

/// Per-step hook: t, the normalized state before the step, and the guided
/// noise estimate used for it.
using GuidanceObserver = std::function<void(int, const Eigen::VectorXd&, const Eigen::VectorXd&)>;

/// One reverse step with the guided noise estimate.
inline Eigen::VectorXd guided_step(const Eigen::VectorXd& z_t, int t, const TopologySpec& spec,
                                   const SirenWeights<double>& siren, const DiffusionModel& model,
                                   const GuidanceConfig& cfg, const Eigen::VectorXd& noise) {
  Eigen::VectorXd eps = denoiser_apply(model.denoiser, z_t, t);
  if (cfg.active(t)) eps += cfg.omega * guidance_gradient(z_t, t, spec, siren, model, cfg);
  return ddpm_step(z_t, t, eps, noise, model.schedule);
}

/// Full guided chain; returns the denormalized z_0. Uses the same noise
/// stream as unguided sampling for (seed, sample_index).
inline Eigen::VectorXd guided_sample(const TopologySpec& spec, const SirenWeights<double>& siren,
                                     const DiffusionModel& model, const GuidanceConfig& cfg, std::uint64_t seed,
                                     std::uint64_t sample_index = 0, const GuidanceObserver& observe = {}) {
  spec.validate();
  cfg.validate(model.schedule.T);
  EpsModifier modify = [&](const Eigen::VectorXd& z, int t, const Eigen::VectorXd& eps) -> Eigen::VectorXd {
    Eigen::VectorXd out = eps;
    if (cfg.active(t)) out += cfg.omega * guidance_gradient(z, t, spec, siren, model, cfg);
    if (observe) observe(t, z, out);
    return out;
  };
  const Eigen::VectorXd z0 = reverse_process(model.denoiser, model.schedule, seed, sample_index, modify);
  return denormalize(model.stats, z0);
}

// ---------------------------------------------------------------------------
// JSON document: {"points":[{"x","y","type","stability"}],"omega","t_start","t_end","seed"}.

struct GuidanceRequest {
  TopologySpec spec;
  GuidanceConfig config;
  std::optional<std::uint64_t> seed;
};

inline CriticalPointSpec critical_point_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("spec point: expected an object");
  CriticalPointSpec c;
  c.p = {j.at("x").get<double>(), j.at("y").get<double>()};
  if (j.contains("type") && !j["type"].is_null()) {
    const auto s = j["type"].get<std::string>();
    if (s == "sink") c.kind = Kind::Sink;
    else if (s == "source") c.kind = Kind::Source;
    else if (s == "saddle") c.kind = Kind::Saddle;
    else throw std::invalid_argument("spec point: unknown type '" + s + "'");
  }
  if (j.contains("stability") && !j["stability"].is_null()) {
    const auto s = j["stability"].get<std::string>();
    if (s == "stable") c.stability = Stability::Stable;
    else if (s == "unstable") c.stability = Stability::Unstable;
    else throw std::invalid_argument("spec point: unknown stability '" + s + "'");
  }
  return c;
}

inline nlohmann::json to_json(const CriticalPointSpec& c) {
  nlohmann::json j = {{"x", c.p.x}, {"y", c.p.y}, {"type", nullptr}, {"stability", nullptr}};
  if (c.kind) j["type"] = std::string(to_string(*c.kind));
  if (c.stability) j["stability"] = std::string(to_string(*c.stability));
  return j;
}

inline nlohmann::json to_json(const TopologySpec& s) {
  auto pts = nlohmann::json::array();
  for (const auto& p : s.points) pts.push_back(to_json(p));
  return {{"points", pts}};
}

/// Parses and validates a spec document. Keys absent from the document keep
/// the values in defaults.
inline GuidanceRequest guidance_request_from_json(const nlohmann::json& j, const GuidanceConfig& defaults, int T) {
  if (!j.is_object()) throw std::invalid_argument("topology spec: expected an object");
  if (!j.contains("points") || !j["points"].is_array()) throw std::invalid_argument("topology spec: missing points");
  GuidanceRequest r;
  try {
    for (std::size_t i = 0; i < j["points"].size(); ++i) {
      try {
        r.spec.points.push_back(critical_point_spec_from_json(j["points"][i]));
      } catch (const std::exception& e) {
        throw std::invalid_argument("points[" + std::to_string(i) + "]: " + e.what());
      }
    }
    r.config = defaults;
    if (j.contains("omega") && !j["omega"].is_null()) r.config.omega = j["omega"].get<double>();
    if (j.contains("t_start") && !j["t_start"].is_null()) r.config.t_start = j["t_start"].get<int>();
    if (j.contains("t_end") && !j["t_end"].is_null()) r.config.t_end = j["t_end"].get<int>();
    if (j.contains("seed") && !j["seed"].is_null()) r.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("topology spec: ") + e.what());
  }
  r.spec.validate();
  r.config.validate(T);
  return r;
}

inline nlohmann::json to_json(const GuidanceConfig& c) {
  return {{"omega", c.omega},
          {"t_start", c.t_start},
          {"t_end", c.t_end},
          {"full_chain", c.full_chain},
          {"paper_saddle", c.paper_saddle}};
}

inline GuidanceConfig guidance_config_from_json(const nlohmann::json& j, GuidanceConfig c = {}) {
  c.omega = j.value("omega", c.omega);
  c.t_start = j.value("t_start", c.t_start);
  c.t_end = j.value("t_end", c.t_end);
  c.full_chain = j.value("full_chain", c.full_chain);
  c.paper_saddle = j.value("paper_saddle", c.paper_saddle);
  return c;
}

}  // namespace topoguide
