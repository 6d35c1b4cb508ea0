#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace topoguide {

/// A position in the normalized domain [-1, 1]^2.
struct DomainPoint {
  double x = 0;
  double y = 0;

  bool in_domain(double margin = 0.0) const {
    return x >= -1.0 + margin && x <= 1.0 - margin && y >= -1.0 + margin && y <= 1.0 - margin;
  }
  friend double distance(const DomainPoint& a, const DomainPoint& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
  }
  bool operator==(const DomainPoint&) const = default;
};

struct Vec2 {
  double u = 0;
  double v = 0;
  double norm() const { return std::hypot(u, v); }
};

/// Cell-centered sampling of a 2D vector field. Values are float32, stored
/// row-major with (u, v) interleaved, matching the VF2D file payload.
class VectorFieldGrid {
 public:
  VectorFieldGrid() = default;
  VectorFieldGrid(int width, int height)
      : width_(width), height_(height),
        values_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 2, 0.0f) {
    if (width < 2 || height < 2) throw std::invalid_argument("VectorFieldGrid: width and height must be >= 2");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t cell_count() const { return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_); }

  float& u(int r, int c) { return values_[index(r, c)]; }
  float& v(int r, int c) { return values_[index(r, c) + 1]; }
  float u(int r, int c) const { return values_[index(r, c)]; }
  float v(int r, int c) const { return values_[index(r, c) + 1]; }

  std::vector<float>& values() { return values_; }
  const std::vector<float>& values() const { return values_; }

  /// Center of cell (r, c) in normalized coordinates.
  DomainPoint center(int r, int c) const {
    return {-1.0 + (2.0 * c + 1.0) / width_, -1.0 + (2.0 * r + 1.0) / height_};
  }

  bool operator==(const VectorFieldGrid&) const = default;

 private:
  std::size_t index(int r, int c) const {
    return (static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(c)) * 2;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<float> values_;
};

inline double mse(const VectorFieldGrid& a, const VectorFieldGrid& b) {
  if (a.width() != b.width() || a.height() != b.height()) throw std::invalid_argument("mse: grid shape mismatch");
  const auto& va = a.values();
  const auto& vb = b.values();
  double acc = 0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double d = static_cast<double>(va[i]) - static_cast<double>(vb[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(va.size());
}

/// Root-mean-square of the per-cell vector norm.
inline double rms_norm(const VectorFieldGrid& g) {
  double acc = 0;
  for (float x : g.values()) acc += static_cast<double>(x) * x;
  return std::sqrt(acc / static_cast<double>(g.cell_count()));
}

}  // namespace topoguide
