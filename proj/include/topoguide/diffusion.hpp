#pragma once

// DDPM over normalized latent codes.
//
// Forward:  z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
// Reverse:  z_{t-1} = (z_t - (1 - a_t) / sqrt(1 - abar_t) eps_hat) / sqrt(a_t) + sigma_t n
//
// The noise predictor is an MLP: sinusoidal time embedding through a two-layer
// head, added to a linear projection of z_t, then pre-norm residual blocks
//   h += W2 dropout(silu(W1 silu(LN(h))))
// and an output head LN -> silu -> linear.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "topoguide/adam.hpp"
#include "topoguide/checkpoint.hpp"
#include "topoguide/latent_fit.hpp"
#include "topoguide/rng.hpp"

namespace topoguide {

// ---------------------------------------------------------------------------
// Schedule.

struct NoiseSchedule {
  int T = 0;
  double beta_start = 0;
  double beta_end = 0;
  Eigen::VectorXd beta;       // index t - 1
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_bar;
  Eigen::VectorXd sigma;

  double b(int t) const { return beta[t - 1]; }
  double a(int t) const { return alpha[t - 1]; }
  double abar(int t) const { return alpha_bar[t - 1]; }
  double sig(int t) const { return sigma[t - 1]; }

  void check_t(int t) const {
    if (t < 1 || t > T) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
};

inline NoiseSchedule make_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  double prod = 1;
  for (int i = 0; i < T; ++i) {
    s.beta[i] = beta_start + (beta_end - beta_start) * i / (T - 1);
    s.alpha[i] = 1 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
    s.sigma[i] = std::sqrt(s.beta[i]);
  }
  return s;
}

inline json to_json(const NoiseSchedule& s) {
  return {{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline NoiseSchedule schedule_from_json(const json& j) {
  return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

template <typename Derived>
Eigen::VectorXd forward_noise(const Eigen::MatrixBase<Derived>& z0, int t, const Eigen::VectorXd& eps,
                              const NoiseSchedule& s) {
  s.check_t(t);
  if (z0.size() != eps.size()) throw std::invalid_argument("forward_noise: dimension mismatch");
  return std::sqrt(s.abar(t)) * z0 + std::sqrt(1 - s.abar(t)) * eps;
}

/// Clean-latent estimate from z_t and predicted noise.
inline Eigen::VectorXd predict_clean(const Eigen::VectorXd& z_t, int t, const Eigen::VectorXd& eps_hat,
                                     const NoiseSchedule& s) {
  s.check_t(t);
  return (z_t - std::sqrt(1 - s.abar(t)) * eps_hat) / std::sqrt(s.abar(t));
}

inline Eigen::VectorXd ddpm_step(const Eigen::VectorXd& z_t, int t, const Eigen::VectorXd& eps_hat,
                                 const Eigen::VectorXd& noise, const NoiseSchedule& s) {
  s.check_t(t);
  if (t == 1 && !noise.isZero(0)) throw std::invalid_argument("ddpm_step: noise must be zero at t = 1");
  const double c = (1 - s.a(t)) / std::sqrt(1 - s.abar(t));
  return (z_t - c * eps_hat) / std::sqrt(s.a(t)) + s.sig(t) * noise;
}

// ---------------------------------------------------------------------------
// Denoiser.

struct DenoiserConfig {
  int latent_dim = 64;
  int width = 256;
  int blocks = 4;
  int time_dim = 128;
  double dropout = 0.1;

  void validate() const {
    if (latent_dim < 1 || width < 1 || blocks < 1 || time_dim < 2 || time_dim % 2)
      throw std::invalid_argument("DenoiserConfig: dimensions must be positive and time_dim even");
    if (!(dropout >= 0 && dropout < 1)) throw std::invalid_argument("DenoiserConfig: dropout must be in [0, 1)");
  }
  bool operator==(const DenoiserConfig&) const = default;
};

inline json to_json(const DenoiserConfig& c) {
  return {{"latent_dim", c.latent_dim}, {"width", c.width}, {"blocks", c.blocks}, {"time_dim", c.time_dim},
          {"dropout", c.dropout}};
}

inline DenoiserConfig denoiser_config_from_json(const json& j) {
  DenoiserConfig c;
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.width = j.value("width", c.width);
  c.blocks = j.value("blocks", c.blocks);
  c.time_dim = j.value("time_dim", c.time_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.validate();
  return c;
}

template <typename S>
struct Linear {
  MatX<S> w;
  VecX<S> b;
};

template <typename S>
struct LayerNormParams {
  VecX<S> gamma;
  VecX<S> beta;
};

template <typename S>
struct ResBlock {
  LayerNormParams<S> ln;
  Linear<S> fc1;
  Linear<S> fc2;
};

template <typename S>
struct DenoiserWeights {
  DenoiserConfig config;
  Linear<S> time1;  // width x time_dim
  Linear<S> time2;  // width x width
  Linear<S> input;  // width x D
  std::vector<ResBlock<S>> blocks;
  LayerNormParams<S> out_ln;
  Linear<S> out;  // D x width

  static DenoiserWeights zeros(const DenoiserConfig& c) {
    c.validate();
    DenoiserWeights w;
    w.config = c;
    auto lin = [](int o, int i) { return Linear<S>{MatX<S>::Zero(o, i), VecX<S>::Zero(o)}; };
    auto ln = [](int n) { return LayerNormParams<S>{VecX<S>::Zero(n), VecX<S>::Zero(n)}; };
    w.time1 = lin(c.width, c.time_dim);
    w.time2 = lin(c.width, c.width);
    w.input = lin(c.width, c.latent_dim);
    w.blocks.resize(static_cast<std::size_t>(c.blocks));
    for (auto& b : w.blocks) b = {ln(c.width), lin(c.width, c.width), lin(c.width, c.width)};
    w.out_ln = ln(c.width);
    w.out = lin(c.latent_dim, c.width);
    return w;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    auto lin = [&](const std::string& p, Linear<S>& l) {
      fn(p + ".w", l.w);
      fn(p + ".b", l.b);
    };
    auto ln = [&](const std::string& p, LayerNormParams<S>& l) {
      fn(p + ".gamma", l.gamma);
      fn(p + ".beta", l.beta);
    };
    lin("time1", time1);
    lin("time2", time2);
    lin("input", input);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "block." + std::to_string(i);
      ln(p + ".ln", blocks[i].ln);
      lin(p + ".fc1", blocks[i].fc1);
      lin(p + ".fc2", blocks[i].fc2);
    }
    ln("out_ln", out_ln);
    lin("out", out);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<DenoiserWeights*>(this)->for_each_tensor([&](const std::string& n, const auto& t) { fn(n, t); });
  }

  void set_zero() {
    for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
  }

  template <typename T>
  DenoiserWeights<T> cast() const {
    auto o = DenoiserWeights<T>::zeros(config);
    auto src = tensor_spans<S>(const_cast<DenoiserWeights&>(*this));
    auto dst = tensor_spans<T>(o);
    for (std::size_t i = 0; i < src.size(); ++i)
      for (Eigen::Index k = 0; k < src[i].size; ++k) dst[i].data[k] = static_cast<T>(src[i].data[k]);
    return o;
  }

  void validate() const {
    config.validate();
    bool finite = true;
    for_each_tensor([&](const std::string&, const auto& t) { finite = finite && t.allFinite(); });
    if (!finite) throw std::invalid_argument("DenoiserWeights: non-finite parameter");
  }
};

/// Linear layers U(-1/sqrt(fan_in), 1/sqrt(fan_in)), unit layer-norm gains,
/// zero output layer so the initial prediction is zero.
inline DenoiserWeights<double> init_denoiser(const DenoiserConfig& c, std::uint64_t seed) {
  auto w = DenoiserWeights<double>::zeros(c);
  Rng rng(seed ^ 0xD3A0153ULL);
  auto fill = [&](Linear<double>& l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.data()[i] = u(rng);
    for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b.data()[i] = u(rng);
  };
  fill(w.time1);
  fill(w.time2);
  fill(w.input);
  for (auto& b : w.blocks) {
    b.ln.gamma.setOnes();
    fill(b.fc1);
    fill(b.fc2);
  }
  w.out_ln.gamma.setOnes();
  return w;
}

/// Sinusoidal embedding of integer timesteps: [sin(t f_i), cos(t f_i)],
/// f_i = 10000^(-i / half).
template <typename S>
MatX<S> time_embedding(const std::vector<int>& ts, int dim) {
  const int half = dim / 2;
  MatX<S> e(dim, static_cast<Eigen::Index>(ts.size()));
  for (std::size_t k = 0; k < ts.size(); ++k)
    for (int i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * i / half);
      const double a = ts[k] * f;
      e(i, static_cast<Eigen::Index>(k)) = static_cast<S>(std::sin(a));
      e(half + i, static_cast<Eigen::Index>(k)) = static_cast<S>(std::cos(a));
    }
  return e;
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
MatX<S> silu(const MatX<S>& x) {
  return x.array() / (S(1) + (-x.array()).exp());
}

template <typename S>
MatX<S> silu_grad(const MatX<S>& x, const MatX<S>& gy) {
  const auto sg = (S(1) / (S(1) + (-x.array()).exp()));
  return gy.array() * sg * (S(1) + x.array() * (S(1) - sg));
}

template <typename S>
struct LayerNormTape {
  MatX<S> xhat;
  VecX<S> rstd;  // one per column
};

template <typename S>
MatX<S> layer_norm(const MatX<S>& x, const LayerNormParams<S>& p, LayerNormTape<S>& tape) {
  const S n = static_cast<S>(x.rows());
  const Eigen::Matrix<S, 1, Eigen::Dynamic> mu = x.colwise().sum() / n;
  tape.xhat = x.rowwise() - mu;
  const Eigen::Matrix<S, 1, Eigen::Dynamic> var = tape.xhat.colwise().squaredNorm() / n;
  tape.rstd = (var.array() + static_cast<S>(kLayerNormEps)).rsqrt().transpose();
  tape.xhat = tape.xhat * tape.rstd.asDiagonal();
  MatX<S> y = p.gamma.asDiagonal() * tape.xhat;
  y.colwise() += p.beta;
  return y;
}

template <typename S>
MatX<S> layer_norm_backward(const MatX<S>& gy, const LayerNormParams<S>& p, const LayerNormTape<S>& tape,
                            LayerNormParams<S>* g) {
  if (g) {
    g->gamma += (gy.array() * tape.xhat.array()).rowwise().sum().matrix();
    g->beta += gy.rowwise().sum();
  }
  const S n = static_cast<S>(gy.rows());
  const MatX<S> gx = p.gamma.asDiagonal() * gy;
  const Eigen::Matrix<S, 1, Eigen::Dynamic> m1 = gx.colwise().sum() / n;
  const Eigen::Matrix<S, 1, Eigen::Dynamic> m2 = (gx.array() * tape.xhat.array()).colwise().sum().matrix() / n;
  MatX<S> out = gx.rowwise() - m1;
  out -= tape.xhat * m2.asDiagonal();
  return out * tape.rstd.asDiagonal();
}

template <typename S>
MatX<S> linear(const Linear<S>& l, const MatX<S>& x) {
  MatX<S> y = l.w * x;
  y.colwise() += l.b;
  return y;
}

template <typename S>
MatX<S> linear_backward(const Linear<S>& l, const MatX<S>& x, const MatX<S>& gy, Linear<S>* g, bool need_input) {
  if (g) {
    g->w.noalias() += gy * x.transpose();
    g->b += gy.rowwise().sum();
  }
  if (!need_input) return {};
  return l.w.transpose() * gy;
}

}  // namespace detail

template <typename S>
struct DenoiserTape {
  MatX<S> z, temb, t1;
  struct Block {
    MatX<S> h_in;
    detail::LayerNormTape<S> ln;
    MatX<S> a0, p1, a1, mask, p2in;
  };
  std::vector<Block> blocks;
  MatX<S> h_out;
  detail::LayerNormTape<S> out_ln;
  MatX<S> a_out;
};

/// Predicted noise for each column of z (D x B). A non-null rng enables
/// dropout (training mode).
template <typename S>
MatX<S> denoiser_forward(const DenoiserWeights<S>& w, const MatX<S>& z, const std::vector<int>& ts,
                         DenoiserTape<S>* tape = nullptr, Rng* dropout_rng = nullptr) {
  const auto& c = w.config;
  if (z.rows() != c.latent_dim || z.cols() != static_cast<Eigen::Index>(ts.size()))
    throw std::invalid_argument("denoiser: input shape mismatch");
  DenoiserTape<S> local;
  DenoiserTape<S>& tp = tape ? *tape : local;
  tp.z = z;
  tp.temb = time_embedding<S>(ts, c.time_dim);
  tp.t1 = detail::linear(w.time1, tp.temb);
  MatX<S> h = detail::linear(w.time2, detail::silu(tp.t1)) + detail::linear(w.input, z);
  tp.blocks.resize(w.blocks.size());
  const bool train = dropout_rng && c.dropout > 0;
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const auto& bw = w.blocks[i];
    auto& bt = tp.blocks[i];
    bt.h_in = h;
    bt.a0 = detail::silu(detail::layer_norm(h, bw.ln, bt.ln));
    bt.p1 = detail::linear(bw.fc1, bt.a0);
    bt.a1 = detail::silu(bt.p1);
    if (train) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const S keep = static_cast<S>(1.0 / (1.0 - c.dropout));
      bt.mask.resize(bt.a1.rows(), bt.a1.cols());
      for (Eigen::Index k = 0; k < bt.mask.size(); ++k) bt.mask.data()[k] = u(*dropout_rng) < c.dropout ? S(0) : keep;
      bt.p2in = bt.a1.cwiseProduct(bt.mask);
    } else {
      bt.mask.resize(0, 0);
      bt.p2in = bt.a1;
    }
    h += detail::linear(bw.fc2, bt.p2in);
  }
  tp.h_out = h;
  tp.a_out = detail::silu(detail::layer_norm(h, w.out_ln, tp.out_ln));
  return detail::linear(w.out, tp.a_out);
}

/// Backpropagates gout (D x B) through a recorded forward pass. Accumulates
/// parameter gradients into g when non-null; returns the gradient on z.
template <typename S>
MatX<S> denoiser_backward(const DenoiserWeights<S>& w, const DenoiserTape<S>& tp, const MatX<S>& gout,
                          DenoiserWeights<S>* g) {
  MatX<S> ga = detail::linear_backward(w.out, tp.a_out, gout, g ? &g->out : nullptr, true);
  {
    MatX<S> ln_y = w.out_ln.gamma.asDiagonal() * tp.out_ln.xhat;
    ln_y.colwise() += w.out_ln.beta;
    ga = detail::silu_grad(ln_y, ga);
  }
  MatX<S> gh = detail::layer_norm_backward(ga, w.out_ln, tp.out_ln, g ? &g->out_ln : nullptr);
  for (std::size_t i = w.blocks.size(); i-- > 0;) {
    const auto& bw = w.blocks[i];
    const auto& bt = tp.blocks[i];
    auto* gb = g ? &g->blocks[i] : nullptr;
    MatX<S> gp2 = detail::linear_backward(bw.fc2, bt.p2in, gh, gb ? &gb->fc2 : nullptr, true);
    if (bt.mask.size()) gp2 = gp2.cwiseProduct(bt.mask);
    gp2 = detail::silu_grad(bt.p1, gp2);
    MatX<S> ga0 = detail::linear_backward(bw.fc1, bt.a0, gp2, gb ? &gb->fc1 : nullptr, true);
    MatX<S> ln_y = bw.ln.gamma.asDiagonal() * bt.ln.xhat;
    ln_y.colwise() += bw.ln.beta;
    ga0 = detail::silu_grad(ln_y, ga0);
    gh += detail::layer_norm_backward(ga0, bw.ln, bt.ln, gb ? &gb->ln : nullptr);
  }
  if (g) {
    const MatX<S> st1 = detail::silu(tp.t1);
    MatX<S> gt1 = detail::linear_backward(w.time2, st1, gh, &g->time2, true);
    gt1 = detail::silu_grad(tp.t1, gt1);
    detail::linear_backward(w.time1, tp.temb, gt1, &g->time1, false);
  }
  return detail::linear_backward(w.input, tp.z, gh, g ? &g->input : nullptr, true);
}

/// Inference-mode prediction for one latent.
inline Eigen::VectorXd denoiser_apply(const DenoiserWeights<double>& w, const Eigen::VectorXd& z_t, int t) {
  return denoiser_forward<double>(w, MatX<double>(z_t), {t});
}

/// eps_hat(z_t, t) and the vector-Jacobian product cotangent^T d eps_hat / d z_t.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> denoiser_vjp(const DenoiserWeights<double>& w,
                                                                const Eigen::VectorXd& z_t, int t,
                                                                const Eigen::VectorXd& cotangent) {
  DenoiserTape<double> tape;
  Eigen::VectorXd eps = denoiser_forward<double>(w, MatX<double>(z_t), {t}, &tape);
  Eigen::VectorXd gz = denoiser_backward<double>(w, tape, MatX<double>(cotangent), nullptr);
  return {eps, gz};
}

// ---------------------------------------------------------------------------
// Training.

struct DiffusionTrainConfig {
  int iterations = 10000;
  int batch_size = 256;
  double lr = 1e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations < 1 || batch_size < 1) throw std::invalid_argument("DiffusionTrainConfig: counts must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("DiffusionTrainConfig: lr must be positive");
  }
};

inline json to_json(const DiffusionTrainConfig& c) {
  return {{"iterations", c.iterations}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"clip_norm", c.clip_norm},
          {"seed", c.seed}};
}

inline DiffusionTrainConfig diffusion_train_config_from_json(const json& j) {
  DiffusionTrainConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  return c;
}

struct DiffusionProgress {
  int iteration;
  double loss;
};

/// Trains on normalized latents (rows of Z, N x D) with the epsilon objective.
inline DenoiserWeights<double> train_denoiser(const Eigen::MatrixXd& Z, const NoiseSchedule& s,
                                              const DenoiserConfig& dcfg, const DiffusionTrainConfig& cfg,
                                              const std::function<void(const DiffusionProgress&)>& on_progress = {},
                                              const DenoiserWeights<double>* init = nullptr) {
  cfg.validate();
  dcfg.validate();
  if (Z.rows() < 1 || Z.cols() != dcfg.latent_dim) throw std::invalid_argument("train_denoiser: latent shape mismatch");
  if (!Z.allFinite()) throw std::invalid_argument("train_denoiser: non-finite latents");
  using S = float;
  auto w = (init ? *init : init_denoiser(dcfg, cfg.seed)).cast<S>();
  auto grad = DenoiserWeights<S>::zeros(dcfg);
  Adam<S> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm});
  const auto D = static_cast<Eigen::Index>(dcfg.latent_dim);
  const int B = cfg.batch_size;
  MatX<S> zt(D, B), eps(D, B);
  std::vector<int> ts(static_cast<std::size_t>(B));
  DenoiserTape<S> tape;
  for (int it = 0; it < cfg.iterations; ++it) {
    auto rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(it), 0xD1FF);
    std::uniform_int_distribution<Eigen::Index> pick(0, Z.rows() - 1);
    std::uniform_int_distribution<int> pick_t(1, s.T);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int k = 0; k < B; ++k) {
      const auto row = pick(rng);
      const int t = pick_t(rng);
      ts[static_cast<std::size_t>(k)] = t;
      const double ca = std::sqrt(s.abar(t)), cb = std::sqrt(1 - s.abar(t));
      for (Eigen::Index d = 0; d < D; ++d) {
        const double e = normal(rng);
        eps(d, k) = static_cast<S>(e);
        zt(d, k) = static_cast<S>(ca * Z(row, d) + cb * e);
      }
    }
    const MatX<S> pred = denoiser_forward(w, zt, ts, &tape, &rng);
    const MatX<S> diff = pred - eps;
    const double loss = static_cast<double>(diff.squaredNorm()) / static_cast<double>(diff.size());
    if (!std::isfinite(loss))
      throw TrainingDiverged("train_denoiser: non-finite loss at iteration " + std::to_string(it));
    grad.set_zero();
    denoiser_backward(w, tape, MatX<S>((S(2) / static_cast<S>(diff.size())) * diff), &grad);
    adam.step(w, grad);
    if (on_progress) on_progress({it, loss});
  }
  return w.cast<double>();
}

// ---------------------------------------------------------------------------
// Sampling.

/// Everything needed to sample and decode: schedule, denoiser, SIREN and the
/// latent normalization.
struct DiffusionModel {
  NoiseSchedule schedule;
  DenoiserWeights<double> denoiser;
  LatentStats stats;
};

/// Per-step hook that may replace the predicted noise: (z_t, t, eps_hat) -> eps_tilde.
using EpsModifier = std::function<Eigen::VectorXd(const Eigen::VectorXd&, int, const Eigen::VectorXd&)>;

/// Full reverse chain for one sample. The RNG stream is derived from
/// (seed, sample_index): first D normals for z_T, then D per step for t > 1.
/// Reverse chain produced a non-finite state at step t.
class SamplingDiverged : public std::runtime_error {
 public:
  explicit SamplingDiverged(int t) : std::runtime_error("sampling: non-finite state at t = " + std::to_string(t)), step(t) {}
  int step;
};

inline Eigen::VectorXd reverse_process(const DenoiserWeights<double>& w, const NoiseSchedule& s, std::uint64_t seed,
                                       std::uint64_t sample_index, const EpsModifier& modify = {}) {
  const auto D = static_cast<Eigen::Index>(w.config.latent_dim);
  auto rng = derive_rng(seed, sample_index, 0x5A3E);
  Eigen::VectorXd z = standard_normal(rng, D);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(D);
  for (int t = s.T; t >= 1; --t) {
    Eigen::VectorXd eps = denoiser_apply(w, z, t);
    if (modify) eps = modify(z, t, eps);
    const Eigen::VectorXd noise = t > 1 ? standard_normal(rng, D) : zero;
    z = ddpm_step(z, t, eps, noise, s);
    if (!z.allFinite()) throw SamplingDiverged(t);
  }
  return z;
}

/// count normalized latents (rows), sample i using stream (seed, i).
inline Eigen::MatrixXd sample_unguided(const DenoiserWeights<double>& w, const NoiseSchedule& s, int count,
                                       std::uint64_t seed) {
  Eigen::MatrixXd out(count, w.config.latent_dim);
  for (int i = 0; i < count; ++i) out.row(i) = reverse_process(w, s, seed, static_cast<std::uint64_t>(i)).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Persistence.

inline void save_diffusion(const std::filesystem::path& stem, const DiffusionModel& m, const json& extra = {}) {
  TensorStore store;
  store.meta["denoiser"] = to_json(m.denoiser.config);
  store.meta["schedule"] = to_json(m.schedule);
  store.meta["stats"] = to_json(m.stats);
  if (!extra.is_null()) store.meta["training"] = extra;
  m.denoiser.for_each_tensor(
      [&](const std::string& name, const auto& t) { store.tensors.push_back(to_tensor(name, t)); });
  save_tensor_store(stem, "denoiser", store);
}

inline DiffusionModel load_diffusion(const std::filesystem::path& stem) {
  const auto store = load_tensor_store(stem, "denoiser");
  DiffusionModel m;
  m.denoiser = DenoiserWeights<double>::zeros(denoiser_config_from_json(store.meta.at("denoiser")));
  m.denoiser.for_each_tensor([&](const std::string& name, auto& t) { from_tensor(store.get(name), t); });
  m.denoiser.validate();
  m.schedule = schedule_from_json(store.meta.at("schedule"));
  m.stats = latent_stats_from_json(store.meta.at("stats"));
  if (m.stats.mean.size() != m.denoiser.config.latent_dim)
    throw FormatError("denoiser checkpoint: stats dimension does not match latent_dim");
  return m;
}

}  // namespace topoguide
