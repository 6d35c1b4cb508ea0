#pragma once

// Meta-learned shared weights and per-field latent codes.
//
// Inner loop: K gradient steps on a zero-initialized latent, weights fixed.
// Outer loop: Adam on the weights, differentiating the post-inner-loop MSE
// through the inner steps (exactly, or first-order when requested).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "topoguide/adam.hpp"
#include "topoguide/checkpoint.hpp"
#include "topoguide/field.hpp"
#include "topoguide/rng.hpp"
#include "topoguide/siren.hpp"

namespace topoguide {

struct MetaConfig {
  int outer_iterations = 2000;
  int fields_per_batch = 8;
  int points_per_field = 1024;
  int inner_steps = 3;
  double inner_lr = 3.0;
  double outer_lr = 3e-4;
  bool first_order = false;
  double modulation_init = 1.0;  // see init_siren
  std::uint64_t seed = 0;

  void validate() const {
    if (!(modulation_init >= 0)) throw std::invalid_argument("MetaConfig: modulation_init must be >= 0");
    if (outer_iterations < 1 || fields_per_batch < 1 || points_per_field < 1 || inner_steps < 1)
      throw std::invalid_argument("MetaConfig: iteration, batch, point and step counts must be >= 1");
    if (!(inner_lr > 0) || !(outer_lr > 0)) throw std::invalid_argument("MetaConfig: learning rates must be positive");
  }
};

inline json to_json(const MetaConfig& c) {
  return {{"outer_iterations", c.outer_iterations}, {"fields_per_batch", c.fields_per_batch},
          {"points_per_field", c.points_per_field}, {"inner_steps", c.inner_steps},
          {"inner_lr", c.inner_lr},                 {"outer_lr", c.outer_lr},
          {"first_order", c.first_order},           {"modulation_init", c.modulation_init},
          {"seed", c.seed}};
}

inline MetaConfig meta_config_from_json(const json& j) {
  MetaConfig c;
  c.outer_iterations = j.value("outer_iterations", c.outer_iterations);
  c.fields_per_batch = j.value("fields_per_batch", c.fields_per_batch);
  c.points_per_field = j.value("points_per_field", c.points_per_field);
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  c.inner_lr = j.value("inner_lr", c.inner_lr);
  c.outer_lr = j.value("outer_lr", c.outer_lr);
  c.first_order = j.value("first_order", c.first_order);
  c.modulation_init = j.value("modulation_init", c.modulation_init);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json to_json(const SirenConfig& c) {
  return {{"hidden_width", c.hidden_width},
          {"hidden_layers", c.hidden_layers},
          {"latent_dim", c.latent_dim},
          {"omega0", c.omega0}};
}

inline SirenConfig siren_config_from_json(const json& j) {
  SirenConfig c;
  c.hidden_width = j.value("hidden_width", c.hidden_width);
  c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.omega0 = j.value("omega0", c.omega0);
  c.validate();
  return c;
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// Columns of the grid's (u, v) values at the given cell indices.
template <typename S>
void gather_points(const VectorFieldGrid& g, const std::vector<Eigen::Index>& idx, const MatX<S>& all_coords,
                   MatX<S>& coords, MatX<S>& target) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  coords.resize(2, n);
  target.resize(2, n);
  const auto& v = g.values();
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto i = idx[static_cast<std::size_t>(k)];
    coords.col(k) = all_coords.col(i);
    target(0, k) = static_cast<S>(v[static_cast<std::size_t>(2 * i)]);
    target(1, k) = static_cast<S>(v[static_cast<std::size_t>(2 * i + 1)]);
  }
}

/// First n entries of a uniform random permutation of 0..total-1.
inline std::vector<Eigen::Index> sample_without_replacement(Eigen::Index total, Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(total));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  n = std::min(n, total);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::uniform_int_distribution<Eigen::Index> d(i, total - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(d(rng))]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

template <typename S>
void add_scaled(SirenWeights<S>& dst, const SirenWeights<S>& src, S scale) {
  auto d = tensor_spans<S>(dst);
  auto s = tensor_spans<S>(const_cast<SirenWeights<S>&>(src));
  for (std::size_t i = 0; i < d.size(); ++i)
    Eigen::Map<VecX<S>>(d[i].data, d[i].size) += scale * Eigen::Map<const VecX<S>>(s[i].data, s[i].size);
}

}  // namespace detail

/// Post-inner-loop loss for one field and, if grad is non-null, its gradient
/// with respect to the weights accumulated into grad.
template <typename S>
S maml_field_loss(const SirenWeights<S>& w, const MatX<S>& coords, const MatX<S>& target, int inner_steps,
                  S inner_lr, bool first_order, SirenWeights<S>* grad, VecX<S>* final_latent = nullptr) {
  const auto D = w.config.latent_dim;
  std::vector<VecX<S>> zs(static_cast<std::size_t>(inner_steps) + 1);
  std::vector<BatchTape<S>> tapes(static_cast<std::size_t>(inner_steps) + 1);
  zs[0] = VecX<S>::Zero(D);
  MatX<S> out_grad;
  for (int k = 0; k < inner_steps; ++k) {
    auto& tape = tapes[static_cast<std::size_t>(k)];
    batch_forward(w, modulation_shifts(w, zs[static_cast<std::size_t>(k)]), coords, tape);
    mse_loss(tape.out, target, &out_grad);
    const VecX<S> g = batch_backward(w, zs[static_cast<std::size_t>(k)], tape, out_grad, static_cast<SirenWeights<S>*>(nullptr));
    zs[static_cast<std::size_t>(k) + 1] = zs[static_cast<std::size_t>(k)] - inner_lr * g;
  }
  auto& last = tapes.back();
  const auto& zK = zs.back();
  batch_forward(w, modulation_shifts(w, zK), coords, last);
  const S loss = mse_loss(last.out, target, &out_grad);
  if (final_latent) *final_latent = zK;
  if (!grad) return loss;

  VecX<S> zbar = batch_backward(w, zK, last, out_grad, grad);
  if (first_order) return loss;
  // z_{k+1} = z_k - lr * grad_z L(theta, z_k): propagate zbar backwards and
  // collect the weight dependence of each inner gradient.
  SirenWeights<S> tmp = SirenWeights<S>::zeros(w.config);
  for (int k = inner_steps - 1; k >= 0; --k) {
    tmp.set_zero();
    const VecX<S> hv = latent_hessian_product(w, zs[static_cast<std::size_t>(k)], zbar,
                                              tapes[static_cast<std::size_t>(k)], target, &tmp);
    detail::add_scaled(*grad, tmp, -inner_lr);
    zbar -= inner_lr * hv;
  }
  return loss;
}

struct MetaProgress {
  int iteration;
  double loss;  // mean post-inner-loop MSE over the batch
};

/// Meta-learns shared weights. Fields are visited in per-epoch shuffled order;
/// each visit subsamples points_per_field cell centers without replacement.
inline SirenWeights<double> meta_train(const std::vector<VectorFieldGrid>& dataset, const MetaConfig& cfg,
                                       const SirenConfig& scfg,
                                       const std::function<void(const MetaProgress&)>& on_progress = {},
                                       const SirenWeights<double>* init = nullptr) {
  cfg.validate();
  scfg.validate();
  if (dataset.empty()) throw std::invalid_argument("meta_train: empty dataset");
  const int W = dataset[0].width(), H = dataset[0].height();
  for (const auto& g : dataset)
    if (g.width() != W || g.height() != H) throw std::invalid_argument("meta_train: grids differ in resolution");

  using S = float;
  SirenWeights<S> w = (init ? *init : init_siren(scfg, cfg.seed, cfg.modulation_init)).cast<S>();
  if (init && !(init->config == scfg)) throw std::invalid_argument("meta_train: init weights do not match config");
  SirenWeights<S> grad = SirenWeights<S>::zeros(scfg);
  Adam<S> adam(AdamConfig{cfg.outer_lr});
  const MatX<S> all_coords = grid_coords(W, H).cast<S>();
  const auto n_points = static_cast<Eigen::Index>(W) * H;

  std::vector<std::size_t> order(dataset.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  MatX<S> coords, target;
  for (int it = 0; it < cfg.outer_iterations; ++it) {
    grad.set_zero();
    double batch_loss = 0;
    for (int b = 0; b < cfg.fields_per_batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto rng = derive_rng(cfg.seed, epoch++, 0xE70C);
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto fi = order[cursor++];
      auto rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(it) * static_cast<std::uint64_t>(cfg.fields_per_batch) +
                                          static_cast<std::uint64_t>(b),
                            0x9A3B);
      const auto idx = detail::sample_without_replacement(n_points, cfg.points_per_field, rng);
      detail::gather_points(dataset[fi], idx, all_coords, coords, target);
      batch_loss += maml_field_loss<S>(w, coords, target, cfg.inner_steps, static_cast<S>(cfg.inner_lr),
                                       cfg.first_order, &grad);
    }
    batch_loss /= cfg.fields_per_batch;
    if (!std::isfinite(batch_loss))
      throw TrainingDiverged("meta_train: non-finite loss at iteration " + std::to_string(it) +
                             " (try a smaller outer_lr or inner_lr)");
    grad.for_each_tensor([&](const std::string&, auto& t) { t /= static_cast<S>(cfg.fields_per_batch); });
    adam.step(w, grad);
    if (on_progress) on_progress({it, batch_loss});
  }
  return w.cast<double>();
}

struct FitOptions {
  int steps = 30;
  double lr = 3.0;
  int points = 0;  // 0 uses every cell center; otherwise a fixed subsample
  std::uint64_t seed = 0;
};

/// Gradient descent on the latent from zero. Returns the iterate with the
/// lowest loss seen, so the result never scores worse than z = 0.
inline Eigen::VectorXd fit_latent(const SirenWeights<float>& w, const VectorFieldGrid& field, const FitOptions& opt) {
  if (opt.steps < 1) throw std::invalid_argument("fit_latent: steps must be >= 1");
  if (!(opt.lr > 0)) throw std::invalid_argument("fit_latent: lr must be positive");
  using S = float;
  const MatX<S> all_coords = grid_coords(field.width(), field.height()).cast<S>();
  const auto n_points = static_cast<Eigen::Index>(field.width()) * field.height();
  std::vector<Eigen::Index> idx;
  if (opt.points > 0 && opt.points < n_points) {
    auto rng = derive_rng(opt.seed, 0, 0xF17);
    idx = detail::sample_without_replacement(n_points, opt.points, rng);
    std::sort(idx.begin(), idx.end());
  } else {
    idx.resize(static_cast<std::size_t>(n_points));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  }
  MatX<S> coords, target, out_grad;
  detail::gather_points(field, idx, all_coords, coords, target);

  VecX<S> z = VecX<S>::Zero(w.config.latent_dim);
  VecX<S> best = z;
  S best_loss = std::numeric_limits<S>::infinity();
  BatchTape<S> tape;
  for (int k = 0; k <= opt.steps; ++k) {
    batch_forward(w, modulation_shifts(w, z), coords, tape);
    const S loss = mse_loss(tape.out, target, &out_grad);
    if (!std::isfinite(loss)) throw TrainingDiverged("fit_latent: non-finite loss at step " + std::to_string(k));
    if (loss < best_loss) {
      best_loss = loss;
      best = z;
    }
    if (k == opt.steps) break;
    z -= static_cast<S>(opt.lr) * batch_backward(w, z, tape, out_grad, static_cast<SirenWeights<S>*>(nullptr));
  }
  return best.cast<double>();
}

inline Eigen::VectorXd fit_latent(const SirenWeights<double>& w, const VectorFieldGrid& field, int steps, double lr) {
  return fit_latent(w.cast<float>(), field, FitOptions{steps, lr, 0, 0});
}

/// Peak signal-to-noise ratio over all 2WH scalars; +inf when identical.
inline double psnr(const VectorFieldGrid& a, const VectorFieldGrid& b, double data_range) {
  if (!(data_range > 0)) throw std::invalid_argument("psnr: data_range must be positive");
  const double m = mse(a, b);
  if (m == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / m);
}

/// Max minus min over every scalar component of every field.
inline double data_range(const std::vector<VectorFieldGrid>& fields) {
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (const auto& g : fields)
    for (float v : g.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  return static_cast<double>(hi) - static_cast<double>(lo);
}

// ---------------------------------------------------------------------------

inline constexpr double kStdFloor = 1e-8;

struct LatentStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  /// Content hash used to check that two latent sets share a normalization.
  std::uint64_t fingerprint() const {
    std::uint64_t h = splitmix64(static_cast<std::uint64_t>(mean.size()));
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
      h = splitmix64(h ^ std::bit_cast<std::uint64_t>(mean[i]));
      h = splitmix64(h ^ std::bit_cast<std::uint64_t>(std[i]));
    }
    return h;
  }
};

/// Elementwise mean and population standard deviation of the rows of Z (N x D).
inline LatentStats latent_stats(const Eigen::MatrixXd& Z) {
  if (Z.rows() < 2) throw std::invalid_argument("latent_stats: need at least 2 latents");
  LatentStats s;
  s.mean = Z.colwise().mean().transpose();
  const Eigen::MatrixXd c = Z.rowwise() - s.mean.transpose();
  s.std = (c.colwise().squaredNorm().transpose() / static_cast<double>(Z.rows())).cwiseSqrt().cwiseMax(kStdFloor);
  return s;
}

inline Eigen::VectorXd normalize(const LatentStats& s, const Eigen::VectorXd& z) {
  return (z - s.mean).cwiseQuotient(s.std);
}

inline Eigen::VectorXd denormalize(const LatentStats& s, const Eigen::VectorXd& zn) {
  return s.mean + s.std.cwiseProduct(zn);
}

inline json to_json(const LatentStats& s) {
  return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"std", std::vector<double>(s.std.data(), s.std.data() + s.std.size())}};
}

inline LatentStats latent_stats_from_json(const json& j) {
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("std").get<std::vector<double>>();
  if (m.size() != s.size()) throw FormatError("latent stats: mean and std differ in length");
  LatentStats out;
  out.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
  out.std = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Persistence.

inline void save_siren(const std::filesystem::path& stem, const SirenWeights<double>& w, const json& extra = {}) {
  TensorStore store;
  store.meta["siren"] = to_json(w.config);
  if (!extra.is_null()) store.meta["training"] = extra;
  w.for_each_tensor([&](const std::string& name, const auto& t) { store.tensors.push_back(to_tensor(name, t)); });
  save_tensor_store(stem, "siren", store);
}

inline SirenWeights<double> load_siren(const std::filesystem::path& stem) {
  const auto store = load_tensor_store(stem, "siren");
  auto w = SirenWeights<double>::zeros(siren_config_from_json(store.meta.at("siren")));
  w.for_each_tensor([&](const std::string& name, auto& t) { from_tensor(store.get(name), t); });
  w.validate();
  return w;
}

struct LatentSet {
  std::vector<std::string> field_ids;
  Eigen::MatrixXd latents;  // N x D, unnormalized
  LatentStats stats;
  json meta = json::object();
};

inline void save_latents(const std::filesystem::path& stem, const LatentSet& s) {
  TensorStore store;
  store.meta = s.meta;
  store.meta["count"] = s.latents.rows();
  store.meta["dim"] = s.latents.cols();
  store.meta["stats"] = to_json(s.stats);
  store.meta["field_ids"] = s.field_ids;
  store.tensors.push_back(to_tensor("latents", s.latents));
  save_tensor_store(stem, "latents", store);
}

inline LatentSet load_latents(const std::filesystem::path& stem) {
  const auto store = load_tensor_store(stem, "latents");
  LatentSet s;
  const auto n = store.meta.at("count").get<Eigen::Index>();
  const auto d = store.meta.at("dim").get<Eigen::Index>();
  s.latents.resize(n, d);
  from_tensor(store.get("latents"), s.latents);
  s.stats = latent_stats_from_json(store.meta.at("stats"));
  s.field_ids = store.meta.value("field_ids", std::vector<std::string>{});
  s.meta = store.meta;
  return s;
}

}  // namespace topoguide
