#pragma once

// Small differentiable kernels: 2x2 Jacobian analysis, critical point
// classification, the logistic sigmoid and a central-difference gradient.

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace topoguide {

/// Default classification margin, in normalized field units.
inline constexpr double kDefaultEpsClass = 1e-6;
/// Floor applied under the square root of the discriminant when differentiating.
inline constexpr double kEpsSqrt = 1e-12;

/// Row-major 2x2 matrix of spatial partials: a11 = du/dx, a12 = du/dy,
/// a21 = dv/dx, a22 = dv/dy.
struct Jacobian2 {
  double a11 = 0, a12 = 0, a21 = 0, a22 = 0;

  bool finite() const {
    return std::isfinite(a11) && std::isfinite(a12) && std::isfinite(a21) && std::isfinite(a22);
  }
  Jacobian2& operator+=(const Jacobian2& o) {
    a11 += o.a11; a12 += o.a12; a21 += o.a21; a22 += o.a22;
    return *this;
  }
  friend Jacobian2 operator*(double s, const Jacobian2& j) {
    return {s * j.a11, s * j.a12, s * j.a21, s * j.a22};
  }
};

struct JacobianAnalysis {
  double trace = 0;
  double det = 0;
  double delta = 0;  // trace^2 - 4 det
  double lam1_re = 0;
  double lam2_re = 0;  // lam1_re <= lam2_re
  bool is_complex = false;
};

enum class Kind { Sink, Source, Saddle, Degenerate };
enum class Stability { Stable, Unstable, Indeterminate };

struct CriticalClass {
  Kind kind = Kind::Degenerate;
  Stability stability = Stability::Indeterminate;
  bool operator==(const CriticalClass&) const = default;
};

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Sink: return "sink";
    case Kind::Source: return "source";
    case Kind::Saddle: return "saddle";
    case Kind::Degenerate: return "degenerate";
  }
  return "degenerate";
}

inline std::string_view to_string(Stability s) {
  switch (s) {
    case Stability::Stable: return "stable";
    case Stability::Unstable: return "unstable";
    case Stability::Indeterminate: return "indeterminate";
  }
  return "indeterminate";
}

inline Kind kind_from_string(std::string_view s) {
  if (s == "sink") return Kind::Sink;
  if (s == "source") return Kind::Source;
  if (s == "saddle") return Kind::Saddle;
  if (s == "degenerate") return Kind::Degenerate;
  throw std::invalid_argument("unknown critical point kind '" + std::string(s) + "'");
}

inline Stability stability_from_string(std::string_view s) {
  if (s == "stable") return Stability::Stable;
  if (s == "unstable") return Stability::Unstable;
  if (s == "indeterminate") return Stability::Indeterminate;
  throw std::invalid_argument("unknown stability '" + std::string(s) + "'");
}

inline JacobianAnalysis analyze_jacobian(const Jacobian2& j) {
  if (!j.finite()) throw std::invalid_argument("analyze_jacobian: non-finite Jacobian entry");
  JacobianAnalysis a;
  a.trace = j.a11 + j.a22;
  a.det = j.a11 * j.a22 - j.a12 * j.a21;
  a.delta = a.trace * a.trace - 4.0 * a.det;
  if (a.delta >= 0) {
    const double s = std::sqrt(a.delta);
    a.lam1_re = 0.5 * (a.trace - s);
    a.lam2_re = 0.5 * (a.trace + s);
    a.is_complex = false;
  } else {
    a.lam1_re = a.lam2_re = 0.5 * a.trace;
    a.is_complex = true;
  }
  return a;
}

/// Sign-table classification with a dead zone of width eps_class around zero.
/// Saddles always report Stable: their discriminant is strictly positive.
inline CriticalClass classify(const JacobianAnalysis& a, double eps_class = kDefaultEpsClass) {
  if (!(eps_class > 0)) throw std::invalid_argument("classify: eps_class must be positive");
  CriticalClass c;
  if (a.lam2_re < -eps_class)
    c.kind = Kind::Sink;
  else if (a.lam1_re > eps_class)
    c.kind = Kind::Source;
  else if (a.lam1_re < -eps_class && a.lam2_re > eps_class)
    c.kind = Kind::Saddle;
  else
    c.kind = Kind::Degenerate;

  if (c.kind == Kind::Saddle || a.delta > eps_class)
    c.stability = Stability::Stable;
  else if (a.delta < -eps_class)
    c.stability = Stability::Unstable;
  else
    c.stability = Stability::Indeterminate;
  return c;
}

inline double sigmoid(double x) {
  // Branch keeps exp() from overflowing for large |x|.
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double sigmoid_derivative(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

/// Partial derivatives of the analysis quantities with respect to the four
/// Jacobian entries. Eigenvalue real parts use the clamped square root so the
/// gradient stays finite at delta = 0.
struct AnalysisGradients {
  Jacobian2 d_lam1;
  Jacobian2 d_lam2;
  Jacobian2 d_delta;
};

inline AnalysisGradients analysis_gradients(const Jacobian2& j) {
  const double tr = j.a11 + j.a22;
  const double det = j.a11 * j.a22 - j.a12 * j.a21;
  const double delta = tr * tr - 4.0 * det;

  AnalysisGradients g;
  g.d_delta = {2.0 * tr - 4.0 * j.a22, 4.0 * j.a21, 4.0 * j.a12, 2.0 * tr - 4.0 * j.a11};
  const Jacobian2 d_trace{1.0, 0.0, 0.0, 1.0};

  if (delta >= 0) {
    // d sqrt(delta) / d delta with the argument floored at kEpsSqrt.
    const double ds = 0.5 / std::sqrt(std::max(delta, kEpsSqrt));
    g.d_lam1 = 0.5 * d_trace;
    g.d_lam1 += (-0.5 * ds) * g.d_delta;
    g.d_lam2 = 0.5 * d_trace;
    g.d_lam2 += (0.5 * ds) * g.d_delta;
  } else {
    g.d_lam1 = 0.5 * d_trace;
    g.d_lam2 = 0.5 * d_trace;
  }
  return g;
}

/// Central differences, one coordinate at a time.
template <typename F>
Eigen::VectorXd finite_diff_gradient(F&& f, const Eigen::VectorXd& x, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_gradient: h must be positive");
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace topoguide
