#pragma once

// Adam over any parameter set exposing for_each_tensor(name, Eigen&).

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace topoguide {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0;  // global gradient norm clip, 0 disables
};

template <typename S>
struct TensorSpan {
  S* data;
  Eigen::Index size;
};

template <typename S, typename Params>
std::vector<TensorSpan<S>> tensor_spans(Params& p) {
  std::vector<TensorSpan<S>> out;
  p.for_each_tensor([&](const std::string&, auto& t) { out.push_back({t.data(), t.size()}); });
  return out;
}

template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  /// Applies one update; returns the gradient norm before clipping.
  template <typename Params>
  double step(Params& params, Params& grads) {
    auto ps = tensor_spans<S>(params);
    auto gs = tensor_spans<S>(grads);
    if (m_.empty()) {
      for (const auto& p : ps) {
        m_.push_back(Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(p.size));
        v_.push_back(Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(p.size));
      }
    }
    double sq = 0;
    for (const auto& g : gs) sq += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(g.data, g.size)
                                       .template cast<double>()
                                       .squaredNorm();
    const double norm = std::sqrt(sq);
    const S scale = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? static_cast<S>(cfg_.clip_norm / norm) : S(1);

    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const S lr = static_cast<S>(cfg_.lr), eps = static_cast<S>(cfg_.eps);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> p(ps[i].data, ps[i].size);
      const auto g = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(gs[i].data, gs[i].size) * scale;
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseProduct(g);
      p.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
    return norm;
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> m_, v_;
};

}  // namespace topoguide
