#pragma once

// Latent-modulated sinusoidal coordinate network.
//
//   x0 = sin(omega0 * W0 p)
//   xl = sin(Wl x(l-1) + bl + Ml z)      l = 1..L
//   f  = Wout xL + bout
//
// The latent code enters only through per-layer shift modulations, so every
// derivative with respect to z factors through the shift vectors sl = bl + Ml z.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "topoguide/diffmath.hpp"
#include "topoguide/field.hpp"

namespace topoguide {

struct SirenConfig {
  int hidden_width = 128;
  int hidden_layers = 3;
  int latent_dim = 64;
  double omega0 = 10.0;

  void validate() const {
    if (hidden_width < 1 || hidden_layers < 1 || latent_dim < 1)
      throw std::invalid_argument("SirenConfig: widths, layer count and latent_dim must be >= 1");
    if (!(omega0 > 0)) throw std::invalid_argument("SirenConfig: omega0 must be positive");
  }
  bool operator==(const SirenConfig&) const = default;
};

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct SirenLayer {
  MatX<S> weight;      // D' x D'
  VecX<S> bias;        // D'
  MatX<S> modulation;  // D' x D
};

/// Network parameters. The same type doubles as a gradient accumulator.
template <typename S>
struct SirenWeights {
  SirenConfig config;
  MatX<S> first;  // D' x 2, scaled by omega0 in the forward pass
  std::vector<SirenLayer<S>> hidden;
  MatX<S> out_weight;  // 2 x D'
  VecX<S> out_bias;    // 2

  static SirenWeights zeros(const SirenConfig& cfg) {
    cfg.validate();
    SirenWeights w;
    w.config = cfg;
    const int h = cfg.hidden_width;
    w.first = MatX<S>::Zero(h, 2);
    w.hidden.resize(static_cast<std::size_t>(cfg.hidden_layers));
    for (auto& l : w.hidden) {
      l.weight = MatX<S>::Zero(h, h);
      l.bias = VecX<S>::Zero(h);
      l.modulation = MatX<S>::Zero(h, cfg.latent_dim);
    }
    w.out_weight = MatX<S>::Zero(2, h);
    w.out_bias = VecX<S>::Zero(2);
    return w;
  }

  /// Visits every tensor as (name, Eigen object&) in a fixed order.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn(std::string("first"), first);
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      const std::string p = "hidden." + std::to_string(l) + ".";
      fn(p + "weight", hidden[l].weight);
      fn(p + "bias", hidden[l].bias);
      fn(p + "modulation", hidden[l].modulation);
    }
    fn(std::string("out_weight"), out_weight);
    fn(std::string("out_bias"), out_bias);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<SirenWeights*>(this)->for_each_tensor(
        [&](const std::string& name, const auto& t) { fn(name, t); });
  }

  template <typename T>
  SirenWeights<T> cast() const {
    SirenWeights<T> o;
    o.config = config;
    o.first = first.template cast<T>();
    o.hidden.resize(hidden.size());
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      o.hidden[l].weight = hidden[l].weight.template cast<T>();
      o.hidden[l].bias = hidden[l].bias.template cast<T>();
      o.hidden[l].modulation = hidden[l].modulation.template cast<T>();
    }
    o.out_weight = out_weight.template cast<T>();
    o.out_bias = out_bias.template cast<T>();
    return o;
  }

  void validate() const {
    config.validate();
    const Eigen::Index h = config.hidden_width;
    bool ok = first.rows() == h && first.cols() == 2 &&
              hidden.size() == static_cast<std::size_t>(config.hidden_layers) && out_weight.rows() == 2 &&
              out_weight.cols() == h && out_bias.size() == 2;
    for (const auto& l : hidden)
      ok = ok && l.weight.rows() == h && l.weight.cols() == h && l.bias.size() == h && l.modulation.rows() == h &&
           l.modulation.cols() == config.latent_dim;
    if (!ok) throw std::invalid_argument("SirenWeights: tensor shapes do not match config");
    bool finite = true;
    for_each_tensor([&](const std::string&, const auto& t) { finite = finite && t.allFinite(); });
    if (!finite) throw std::invalid_argument("SirenWeights: non-finite parameter");
  }

  void set_zero() {
    for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
  }
};

/// SIREN initialization: first layer U(-1/2, 1/2) before omega0 scaling,
/// hidden and output layers U(-sqrt(6/D'), sqrt(6/D')), zero biases.
/// Modulation maps get U(-m, m) with m = modulation_init / sqrt(D); a zero map
/// would be a stationary point of meta-learning (dL/dz = M^T(...) vanishes).
/// z = 0 is the unmodulated network either way.
inline SirenWeights<double> init_siren(const SirenConfig& cfg, std::uint64_t seed, double modulation_init = 1.0) {
  auto w = SirenWeights<double>::zeros(cfg);
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / cfg.hidden_width);
  std::uniform_real_distribution<double> first(-0.5, 0.5);
  std::uniform_real_distribution<double> hid(-bound, bound);
  for (Eigen::Index i = 0; i < w.first.size(); ++i) w.first.data()[i] = first(rng);
  for (auto& l : w.hidden)
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = hid(rng);
  for (Eigen::Index i = 0; i < w.out_weight.size(); ++i) w.out_weight.data()[i] = hid(rng);
  const double mb = modulation_init / std::sqrt(static_cast<double>(cfg.latent_dim));
  std::uniform_real_distribution<double> mod(-mb, mb);
  if (mb > 0)
    for (auto& l : w.hidden)
      for (Eigen::Index i = 0; i < l.modulation.size(); ++i) l.modulation.data()[i] = mod(rng);
  return w;
}

template <typename S>
void check_latent(const SirenWeights<S>& w, Eigen::Index latent_size) {
  if (latent_size != w.config.latent_dim)
    throw std::invalid_argument("latent code has dimension " + std::to_string(latent_size) + ", network expects " +
                                std::to_string(w.config.latent_dim));
}

/// Per-layer shift vectors b_l + M_l z.
template <typename S>
std::vector<VecX<S>> modulation_shifts(const SirenWeights<S>& w, const VecX<S>& z) {
  check_latent(w, z.size());
  std::vector<VecX<S>> s(w.hidden.size());
  for (std::size_t l = 0; l < w.hidden.size(); ++l) s[l] = w.hidden[l].bias + w.hidden[l].modulation * z;
  return s;
}

// ---------------------------------------------------------------------------
// Single point: value, spatial Jacobian and reverse-mode pullback to z.

struct PointEvaluation {
  Vec2 value;
  Jacobian2 jacobian;
};

/// Cotangents of a scalar objective with respect to the network output and
/// its spatial Jacobian at one point.
struct HeadGradients {
  Vec2 d_value;
  Jacobian2 d_jacobian;
};

namespace detail {

// Forward pass carrying two spatial tangent channels (d/dx, d/dy).
template <typename S>
struct PointTape {
  std::vector<VecX<S>> pre;                      // a_l, l = 0..L
  std::vector<VecX<S>> act;                      // x_l
  std::vector<Eigen::Matrix<S, Eigen::Dynamic, 2>> pre_tan;  // da_l/dp
  std::vector<Eigen::Matrix<S, Eigen::Dynamic, 2>> act_tan;  // dx_l/dp
  Eigen::Matrix<S, 2, 1> value;
  Eigen::Matrix<S, 2, 2> jac;
};

template <typename S>
PointTape<S> point_forward(const SirenWeights<S>& w, const VecX<S>& z, const DomainPoint& p, bool tangents) {
  check_latent(w, z.size());
  const std::size_t L = w.hidden.size();
  PointTape<S> t;
  t.pre.resize(L + 1);
  t.act.resize(L + 1);
  if (tangents) {
    t.pre_tan.resize(L + 1);
    t.act_tan.resize(L + 1);
  }
  const S om = static_cast<S>(w.config.omega0);
  Eigen::Matrix<S, 2, 1> pv(static_cast<S>(p.x), static_cast<S>(p.y));
  t.pre[0] = om * (w.first * pv);
  t.act[0] = t.pre[0].array().sin();
  if (tangents) {
    t.pre_tan[0] = om * w.first;
    t.act_tan[0] = t.pre_tan[0].array().colwise() * t.pre[0].array().cos();
  }
  for (std::size_t l = 1; l <= L; ++l) {
    const auto& layer = w.hidden[l - 1];
    t.pre[l] = layer.weight * t.act[l - 1] + layer.bias + layer.modulation * z;
    t.act[l] = t.pre[l].array().sin();
    if (tangents) {
      t.pre_tan[l] = layer.weight * t.act_tan[l - 1];
      t.act_tan[l] = t.pre_tan[l].array().colwise() * t.pre[l].array().cos();
    }
  }
  t.value = w.out_weight * t.act[L] + w.out_bias;
  if (tangents) t.jac = w.out_weight * t.act_tan[L];
  return t;
}

}  // namespace detail

template <typename S>
Vec2 evaluate(const SirenWeights<S>& w, const VecX<S>& z, const DomainPoint& p) {
  const auto t = detail::point_forward(w, z, p, false);
  return {static_cast<double>(t.value[0]), static_cast<double>(t.value[1])};
}

template <typename S>
PointEvaluation evaluate_with_jacobian(const SirenWeights<S>& w, const VecX<S>& z, const DomainPoint& p) {
  const auto t = detail::point_forward(w, z, p, true);
  PointEvaluation e;
  e.value = {static_cast<double>(t.value[0]), static_cast<double>(t.value[1])};
  e.jacobian = {static_cast<double>(t.jac(0, 0)), static_cast<double>(t.jac(0, 1)), static_cast<double>(t.jac(1, 0)),
                static_cast<double>(t.jac(1, 1))};
  return e;
}

/// Exact d(u, v)/d(x, y) by forward-mode propagation through the sine layers.
template <typename S>
Jacobian2 spatial_jacobian(const SirenWeights<S>& w, const VecX<S>& z, const DomainPoint& p) {
  return evaluate_with_jacobian(w, z, p).jacobian;
}

/// Reverse-mode derivative of a scalar objective with respect to z, given the
/// objective's cotangents on the output value and on the spatial Jacobian.
template <typename S>
VecX<S> pullback_to_latent(const SirenWeights<S>& w, const VecX<S>& z, const DomainPoint& p,
                           const HeadGradients& head) {
  const auto t = detail::point_forward(w, z, p, true);
  const std::size_t L = w.hidden.size();

  Eigen::Matrix<S, 2, 1> fbar(static_cast<S>(head.d_value.u), static_cast<S>(head.d_value.v));
  Eigen::Matrix<S, 2, 2> jbar;
  jbar << static_cast<S>(head.d_jacobian.a11), static_cast<S>(head.d_jacobian.a12),
      static_cast<S>(head.d_jacobian.a21), static_cast<S>(head.d_jacobian.a22);

  VecX<S> xbar = w.out_weight.transpose() * fbar;
  Eigen::Matrix<S, Eigen::Dynamic, 2> tbar = w.out_weight.transpose() * jbar;
  VecX<S> zbar = VecX<S>::Zero(z.size());

  for (std::size_t l = L; l >= 1; --l) {
    const auto& layer = w.hidden[l - 1];
    const auto c = t.pre[l].array().cos();
    const auto s = t.pre[l].array().sin();
    // act_tan = cos(a) * pre_tan ; act = sin(a)
    Eigen::Matrix<S, Eigen::Dynamic, 2> pre_tan_bar = tbar.array().colwise() * c;
    VecX<S> abar = (c * xbar.array()).matrix();
    abar.array() -= s * (t.pre_tan[l].array() * tbar.array()).rowwise().sum();
    zbar.noalias() += layer.modulation.transpose() * abar;
    xbar = layer.weight.transpose() * abar;
    tbar = layer.weight.transpose() * pre_tan_bar;
  }
  return zbar;
}

// ---------------------------------------------------------------------------
// Batched evaluation over many points with one latent (training path).

template <typename S>
struct BatchTape {
  MatX<S> coords;            // 2 x P
  std::vector<MatX<S>> pre;  // D' x P, l = 0..L
  std::vector<MatX<S>> act;
  MatX<S> out;  // 2 x P
};

template <typename S>
void batch_forward(const SirenWeights<S>& w, const std::vector<VecX<S>>& shifts, const MatX<S>& coords,
                   BatchTape<S>& tape) {
  const std::size_t L = w.hidden.size();
  tape.coords = coords;
  tape.pre.resize(L + 1);
  tape.act.resize(L + 1);
  tape.pre[0].noalias() = static_cast<S>(w.config.omega0) * (w.first * coords);
  tape.act[0] = tape.pre[0].array().sin();
  for (std::size_t l = 1; l <= L; ++l) {
    tape.pre[l].noalias() = w.hidden[l - 1].weight * tape.act[l - 1];
    tape.pre[l].colwise() += shifts[l - 1];
    tape.act[l] = tape.pre[l].array().sin();
  }
  tape.out.noalias() = w.out_weight * tape.act[L];
  tape.out.colwise() += w.out_bias;
}

template <typename S>
MatX<S> evaluate_points(const SirenWeights<S>& w, const VecX<S>& z, const MatX<S>& coords) {
  BatchTape<S> tape;
  batch_forward(w, modulation_shifts(w, z), coords, tape);
  return std::move(tape.out);
}

/// Backpropagates out_grad (2 x P) through a recorded batch. Accumulates
/// parameter gradients into grad (if non-null) given the latent z that
/// produced the shifts, and returns the gradient with respect to z.
template <typename S>
VecX<S> batch_backward(const SirenWeights<S>& w, const VecX<S>& z, const BatchTape<S>& tape, const MatX<S>& out_grad,
                       SirenWeights<S>* grad) {
  const std::size_t L = w.hidden.size();
  VecX<S> zbar = VecX<S>::Zero(z.size());
  if (grad) {
    grad->out_weight.noalias() += out_grad * tape.act[L].transpose();
    grad->out_bias += out_grad.rowwise().sum();
  }
  MatX<S> xbar = w.out_weight.transpose() * out_grad;
  MatX<S> abar;
  for (std::size_t l = L; l >= 1; --l) {
    const auto& layer = w.hidden[l - 1];
    abar = xbar.array() * tape.pre[l].array().cos();
    const VecX<S> sbar = abar.rowwise().sum();
    zbar.noalias() += layer.modulation.transpose() * sbar;
    if (grad) {
      auto& g = grad->hidden[l - 1];
      g.weight.noalias() += abar * tape.act[l - 1].transpose();
      g.bias += sbar;
      g.modulation.noalias() += sbar * z.transpose();
    }
    if (l > 1 || grad) xbar.noalias() = layer.weight.transpose() * abar;
  }
  if (grad) {
    abar = xbar.array() * tape.pre[0].array().cos();
    grad->first.noalias() += static_cast<S>(w.config.omega0) * (abar * tape.coords.transpose());
  }
  return zbar;
}

/// Mean squared error over all 2P scalars and its gradient on the output.
template <typename S>
S mse_loss(const MatX<S>& out, const MatX<S>& target, MatX<S>* out_grad) {
  const MatX<S> diff = out - target;
  const S n = static_cast<S>(diff.size());
  if (out_grad) *out_grad = (static_cast<S>(2) / n) * diff;
  return diff.squaredNorm() / n;
}

/// Product of the mixed second derivatives of the batch MSE loss with a latent
/// direction v:  accumulates (d/dtheta)(v . grad_z loss) into grad and returns
/// (d/dz)(v . grad_z loss) = H_zz v. Used to backpropagate through latent
/// gradient steps.
template <typename S>
VecX<S> latent_hessian_product(const SirenWeights<S>& w, const VecX<S>& z, const VecX<S>& v, const BatchTape<S>& tape,
                               const MatX<S>& target, SirenWeights<S>* grad) {
  const std::size_t L = w.hidden.size();
  const S n = static_cast<S>(tape.out.size());

  // Tangent of the forward pass along z-direction v.
  std::vector<MatX<S>> pre_t(L + 1);
  std::vector<MatX<S>> act_t(L + 1);
  for (std::size_t l = 1; l <= L; ++l) {
    const auto& layer = w.hidden[l - 1];
    const VecX<S> st = layer.modulation * v;
    if (l == 1)
      pre_t[l] = MatX<S>::Zero(tape.pre[l].rows(), tape.pre[l].cols());
    else
      pre_t[l].noalias() = layer.weight * act_t[l - 1];
    pre_t[l].colwise() += st;
    act_t[l] = pre_t[l].array() * tape.pre[l].array().cos();
  }
  const MatX<S> out_t = w.out_weight * act_t[L];

  // Reverse of  Lv = (2/n) sum (out - target) * out_t.
  const MatX<S> fbar = (static_cast<S>(2) / n) * out_t;
  const MatX<S> ftbar = (static_cast<S>(2) / n) * (tape.out - target);
  if (grad) {
    grad->out_weight.noalias() += fbar * tape.act[L].transpose();
    grad->out_weight.noalias() += ftbar * act_t[L].transpose();
    grad->out_bias += fbar.rowwise().sum();
  }
  MatX<S> xbar = w.out_weight.transpose() * fbar;
  MatX<S> xtbar = w.out_weight.transpose() * ftbar;
  VecX<S> zbar = VecX<S>::Zero(z.size());
  MatX<S> abar, atbar;
  for (std::size_t l = L; l >= 1; --l) {
    const auto& layer = w.hidden[l - 1];
    const auto c = tape.pre[l].array().cos();
    const auto s = tape.pre[l].array().sin();
    atbar = xtbar.array() * c;
    abar = xbar.array() * c - s * pre_t[l].array() * xtbar.array();
    const VecX<S> sbar = abar.rowwise().sum();
    const VecX<S> stbar = atbar.rowwise().sum();
    zbar.noalias() += layer.modulation.transpose() * sbar;
    if (grad) {
      auto& g = grad->hidden[l - 1];
      g.weight.noalias() += abar * tape.act[l - 1].transpose();
      if (l > 1) g.weight.noalias() += atbar * act_t[l - 1].transpose();
      g.bias += sbar;
      g.modulation.noalias() += sbar * z.transpose();
      g.modulation.noalias() += stbar * v.transpose();
    }
    if (l > 1 || grad) xbar.noalias() = layer.weight.transpose() * abar;
    if (l > 1) xtbar.noalias() = layer.weight.transpose() * atbar;
  }
  if (grad) {
    abar = xbar.array() * tape.pre[0].array().cos();
    grad->first.noalias() += static_cast<S>(w.config.omega0) * (abar * tape.coords.transpose());
  }
  return zbar;
}

// ---------------------------------------------------------------------------

/// Coordinates (2 x W*H) of all cell centers, row-major by cell.
inline MatX<double> grid_coords(int width, int height) {
  MatX<double> c(2, static_cast<Eigen::Index>(width) * height);
  Eigen::Index k = 0;
  for (int r = 0; r < height; ++r)
    for (int col = 0; col < width; ++col, ++k) {
      c(0, k) = -1.0 + (2.0 * col + 1.0) / width;
      c(1, k) = -1.0 + (2.0 * r + 1.0) / height;
    }
  return c;
}

template <typename S>
VectorFieldGrid evaluate_grid(const SirenWeights<S>& w, const VecX<S>& z, int width, int height) {
  VectorFieldGrid g(width, height);
  const MatX<S> coords = grid_coords(width, height).template cast<S>();
  const auto shifts = modulation_shifts(w, z);
  constexpr Eigen::Index chunk = 4096;
  BatchTape<S> tape;
  auto& vals = g.values();
  for (Eigen::Index start = 0; start < coords.cols(); start += chunk) {
    const Eigen::Index n = std::min(chunk, coords.cols() - start);
    batch_forward(w, shifts, MatX<S>(coords.middleCols(start, n)), tape);
    for (Eigen::Index k = 0; k < n; ++k) {
      vals[static_cast<std::size_t>(2 * (start + k))] = static_cast<float>(tape.out(0, k));
      vals[static_cast<std::size_t>(2 * (start + k) + 1)] = static_cast<float>(tape.out(1, k));
    }
  }
  return g;
}

}  // namespace topoguide
