#pragma once

#include <algorithm>
#include <utility>

#include "mfg/common.hpp"

namespace mfg {

/// A probability vector eta on the state space [d]. Weights are nonnegative
/// and sum to one within simplex_tol. Construction clips stray negatives and
/// renormalizes once; any larger violation throws. Solvers never renormalize
/// internally, so drift beyond the tolerance surfaces loudly here.
class SimplexPoint {
 public:
  explicit SimplexPoint(Vec weights) : w_(std::move(weights)) {
    if (w_.empty()) throw error("SimplexPoint: empty weight vector");
    double s = 0.0;
    for (double v : w_) {
      if (!std::isfinite(v)) throw error("SimplexPoint: non-finite weight");
      if (v < -simplex_tol)
        throw error("SimplexPoint: negative weight " + std::to_string(v));
      s += v;
    }
    if (std::abs(s - 1.0) > simplex_tol)
      throw error("SimplexPoint: weights sum to " + std::to_string(s) +
                  ", expected 1");
    for (double& v : w_) v = std::max(v, 0.0) / s;
  }

  static SimplexPoint uniform(int d) {
    return SimplexPoint(Vec(static_cast<std::size_t>(d), 1.0 / d));
  }

  /// Point mass on state x.
  static SimplexPoint vertex(int d, int x) {
    Vec w(static_cast<std::size_t>(d), 0.0);
    w.at(static_cast<std::size_t>(x)) = 1.0;
    return SimplexPoint(std::move(w));
  }

  int dim() const { return static_cast<int>(w_.size()); }
  double operator[](int x) const { return w_[static_cast<std::size_t>(x)]; }
  const Vec& weights() const { return w_; }

  /// Moves mass h from state y to state z (the tangent direction e_{yz}).
  /// Throws if eta_y < h.
  SimplexPoint shifted(int y, int z, double h) const {
    Vec w = w_;
    w[static_cast<std::size_t>(y)] -= h;
    w[static_cast<std::size_t>(z)] += h;
    return SimplexPoint(std::move(w));
  }

 private:
  Vec w_;
};

/// A tangent direction m to the simplex: components sum to zero within
/// simplex_tol. Houses measure perturbations and linearized forward states.
class TangentVector {
 public:
  explicit TangentVector(Vec components) : c_(std::move(components)) {
    if (c_.empty()) throw error("TangentVector: empty component vector");
    for (double v : c_)
      if (!std::isfinite(v)) throw error("TangentVector: non-finite component");
    const double s = component_sum(c_);
    if (std::abs(s) > simplex_tol)
      throw error("TangentVector: components sum to " + std::to_string(s) +
                  ", expected 0");
  }

  /// e_{yz} = e_z - e_y; the zero vector when y == z.
  static TangentVector pair_direction(int d, int y, int z) {
    Vec c(static_cast<std::size_t>(d), 0.0);
    c.at(static_cast<std::size_t>(y)) -= 1.0;
    c.at(static_cast<std::size_t>(z)) += 1.0;
    return TangentVector(std::move(c));
  }

  static TangentVector zero(int d) {
    return TangentVector(Vec(static_cast<std::size_t>(d), 0.0));
  }

  int dim() const { return static_cast<int>(c_.size()); }
  double operator[](int x) const { return c_[static_cast<std::size_t>(x)]; }
  const Vec& components() const { return c_; }

 private:
  Vec c_;
};

/// Difference vector anchored at state x: (p_y - p_x)_{y in [d]}. Component x
/// is exactly zero.
inline ValueVector delta(int x, const ValueVector& p) {
  if (x < 0 || static_cast<std::size_t>(x) >= p.size())
    throw error("delta: state index out of range");
  ValueVector out(p.size());
  const double px = p[static_cast<std::size_t>(x)];
  for (std::size_t y = 0; y < p.size(); ++y) out[y] = p[y] - px;
  out[static_cast<std::size_t>(x)] = 0.0;
  return out;
}

/// Norm of the full difference tensor: |Dp| = sqrt(sum_y |delta(y,p)|^2).
inline double delta_norm(const ValueVector& p) {
  double s = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y)
    for (std::size_t z = 0; z < p.size(); ++z) {
      const double q = p[z] - p[y];
      s += q * q;
    }
  return std::sqrt(s);
}

/// Constant vector holding the mean of b; b - center(b) has zero
/// component sum, and center(b) is orthogonal to every tangent vector.
inline ValueVector center(const ValueVector& b) {
  const double m = b.empty() ? 0.0 : component_sum(b) / static_cast<double>(b.size());
  return ValueVector(b.size(), m);
}

/// b minus its mean: the zero-sum representative of b's contrast class.
inline ValueVector zero_mean(const ValueVector& b) {
  const double m = b.empty() ? 0.0 : component_sum(b) / static_cast<double>(b.size());
  ValueVector out = b;
  for (auto& v : out) v -= m;
  return out;
}

/// The uniform grid on the simplex with step h = 1/n: all points whose
/// coordinates are multiples of h. Points are enumerated once, in ascending
/// lexicographic order of their integer coordinates, so indices are stable
/// across runs.
class SimplexLattice {
 public:
  SimplexLattice(int d, int n) : d_(d), n_(n) {
    if (d < 2) throw error("SimplexLattice: need d >= 2");
    if (n < 1) throw error("SimplexLattice: need n >= 1");
    std::vector<int> k(static_cast<std::size_t>(d), 0);
    enumerate(0, n, k);
  }

  int dim() const { return d_; }
  int subdivisions() const { return n_; }
  double step() const { return 1.0 / n_; }
  std::size_t size() const { return points_.size(); }
  const SimplexPoint& operator[](std::size_t i) const { return points_[i]; }
  const std::vector<SimplexPoint>& points() const { return points_; }

  /// Integer coordinates (summing to n) of lattice point i.
  const std::vector<int>& coords(std::size_t i) const { return coords_[i]; }

  /// True when every coordinate is strictly positive, i.e. the point does not
  /// sit on the simplex boundary.
  bool is_interior(std::size_t i) const {
    for (int c : coords_[i])
      if (c == 0) return false;
    return true;
  }

 private:
  void enumerate(int pos, int remaining, std::vector<int>& k) {
    if (pos == d_ - 1) {
      k[static_cast<std::size_t>(pos)] = remaining;
      Vec w(static_cast<std::size_t>(d_));
      for (int i = 0; i < d_; ++i)
        w[static_cast<std::size_t>(i)] =
            static_cast<double>(k[static_cast<std::size_t>(i)]) / n_;
      coords_.push_back(k);
      points_.emplace_back(std::move(w));
      return;
    }
    for (int v = 0; v <= remaining; ++v) {
      k[static_cast<std::size_t>(pos)] = v;
      enumerate(pos + 1, remaining - v, k);
    }
  }

  int d_;
  int n_;
  std::vector<SimplexPoint> points_;
  std::vector<std::vector<int>> coords_;
};

inline SimplexLattice lattice(int d, int n) { return SimplexLattice(d, n); }

/// One-sided simplex derivative of a scalar field K at eta in direction
/// e_{yz}, approximated by finite differences of step h. Uses the central
/// quotient when both eta + h e_{yz} and eta - h e_{yz} are feasible, the
/// matching one-sided quotient when only one is, and throws a boundary error
/// when neither is.
template <class Field>
double directional_derivative_fd(Field&& K, const SimplexPoint& eta, int y,
                                 int z, double h) {
  if (h <= 0.0) throw error("directional_derivative_fd: step must be positive");
  const int d = eta.dim();
  if (y < 0 || y >= d || z < 0 || z >= d)
    throw error("directional_derivative_fd: state index out of range");
  if (y == z) return 0.0;
  const bool fwd_ok = eta[y] >= h - simplex_tol;  // eta + h e_{yz} feasible
  const bool bwd_ok = eta[z] >= h - simplex_tol;  // eta - h e_{yz} feasible
  if (fwd_ok && bwd_ok)
    return (K(eta.shifted(y, z, h)) - K(eta.shifted(z, y, h))) / (2.0 * h);
  if (fwd_ok) return (K(eta.shifted(y, z, h)) - K(eta)) / h;
  if (bwd_ok) return (K(eta) - K(eta.shifted(z, y, h))) / h;
  throw error("directional_derivative_fd: boundary, neither direction feasible");
}

}  // namespace mfg
