#pragma once

#include <algorithm>
#include <functional>

#include "mfg/simplex.hpp"

namespace mfg {

/// Model parameters for the quadratic-cost family.
///
/// A player in state x picks off-diagonal jump rates a_y in [a_l, a_u] and
/// pays the running control cost
///     f(x, a) = sum_{y != x} (c/2) (a_y - kappa)^2
/// plus the crowd cost F(x, eta) = beta * eta_x + g_x. kappa is the free
/// reference rate: steering at kappa costs nothing.
struct ModelSpec {
  int d = 2;
  double a_l = 0.1;   // lower rate bound, must be > 0
  double a_u = 2.0;   // upper rate bound
  double kappa = 1.0; // reference rate in (a_l, a_u)
  double c = 1.0;     // control cost weight, > 0
  double beta = 1.0;  // mean-field coupling, >= 0
  Vec g;              // per-state base cost; empty means all zero

  void validate() const {
    if (d < 2) throw error("ModelSpec: need d >= 2");
    if (!(a_l > 0.0)) throw error("ModelSpec: a_l must be positive");
    if (!(a_l < kappa && kappa < a_u))
      throw error("ModelSpec: need a_l < kappa < a_u");
    if (!(c > 0.0)) throw error("ModelSpec: c must be positive");
    if (beta < 0.0) throw error("ModelSpec: beta must be nonnegative");
    if (!g.empty() && g.size() != static_cast<std::size_t>(d))
      throw error("ModelSpec: g must have one entry per state");
    for (double v : g)
      if (!std::isfinite(v)) throw error("ModelSpec: non-finite g entry");
  }

  double g_at(int x) const {
    return g.empty() ? 0.0 : g[static_cast<std::size_t>(x)];
  }
};

/// Controlled jump rates out of one state: a_y in [a_l, a_u] for y != anchor
/// and a_anchor = -sum of the others, so the vector is a generator row.
struct RateVector {
  int anchor = 0;
  Vec a;

  void validate(double a_l, double a_u, double tol = 1e-12) const {
    double s = 0.0;
    for (int y = 0; y < static_cast<int>(a.size()); ++y) {
      if (y == anchor) continue;
      const double v = a[static_cast<std::size_t>(y)];
      if (v < a_l - tol || v > a_u + tol)
        throw error("RateVector: off-anchor rate outside the box");
      s += v;
    }
    if (std::abs(a[static_cast<std::size_t>(anchor)] + s) > tol)
      throw error("RateVector: anchor component is not minus the sum");
  }
};

/// A d x d transition-rate matrix: nonnegative off-diagonal entries, each row
/// summing to zero. The diagonal is always recomputed from the off-diagonal
/// entries, so row sums hold exactly.
class RateMatrix {
 public:
  explicit RateMatrix(int d) : d_(d), q_(static_cast<std::size_t>(d) * d, 0.0) {
    if (d < 2) throw error("RateMatrix: need d >= 2");
  }

  template <class Fn>
  static RateMatrix from_offdiagonal(int d, Fn&& rate) {
    RateMatrix q(d);
    for (int x = 0; x < d; ++x)
      for (int y = 0; y < d; ++y)
        if (x != y) q.set_offdiagonal(x, y, rate(x, y));
    return q;
  }

  int dim() const { return d_; }
  double operator()(int x, int y) const { return q_[idx(x, y)]; }

  void set_offdiagonal(int x, int y, double rate) {
    if (x == y) throw error("RateMatrix: diagonal is derived, not set");
    if (!(rate >= 0.0)) throw error("RateMatrix: negative rate");
    q_[idx(x, y)] = rate;
    double s = 0.0;
    for (int z = 0; z < d_; ++z)
      if (z != x) s += q_[idx(x, z)];
    q_[idx(x, x)] = -s;
  }

  void set_row(const RateVector& row) {
    for (int y = 0; y < d_; ++y)
      if (y != row.anchor)
        set_offdiagonal(row.anchor, y, row.a[static_cast<std::size_t>(y)]);
  }

  double max_exit_rate() const {
    double m = 0.0;
    for (int x = 0; x < d_; ++x) m = std::max(m, -(*this)(x, x));
    return m;
  }

  double min_offdiagonal() const {
    double m = std::numeric_limits<double>::infinity();
    for (int x = 0; x < d_; ++x)
      for (int y = 0; y < d_; ++y)
        if (x != y) m = std::min(m, (*this)(x, y));
    return m;
  }

  void validate_box(double a_l, double a_u, double tol = 1e-12) const {
    for (int x = 0; x < d_; ++x)
      for (int y = 0; y < d_; ++y)
        if (x != y) {
          const double v = (*this)(x, y);
          if (v < a_l - tol || v > a_u + tol)
            throw error("RateMatrix: rate outside the box");
        }
  }

 private:
  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(x) * d_ + y;
  }
  int d_;
  Vec q_;
};

namespace detail {

/// Minimizer of a*q + (c/2)(a - kappa)^2 over [a_l, a_u].
inline double clamped_rate(const ModelSpec& s, double q) {
  return std::clamp(s.kappa - q / s.c, s.a_l, s.a_u);
}

}  // namespace detail

/// H(x, p) = inf over rate vectors of { f(x, a) + a . p }. Only the contrasts
/// q_y = p_y - p_x enter, making H invariant under constant shifts of p.
/// Closed form: each coordinate minimizes independently at
/// a*_y = clamp(kappa - q_y / c, a_l, a_u).
inline double hamiltonian(const ModelSpec& s, int x, const ValueVector& p) {
  const double px = p[static_cast<std::size_t>(x)];
  double h = 0.0;
  for (int y = 0; y < s.d; ++y) {
    if (y == x) continue;
    const double q = p[static_cast<std::size_t>(y)] - px;
    const double a = detail::clamped_rate(s, q);
    const double dev = a - s.kappa;
    h += a * q + 0.5 * s.c * dev * dev;
  }
  return h;
}

/// The unique minimizing rate vector gamma*(x, p); equals the p-gradient of
/// the Hamiltonian wherever no coordinate clamps.
inline RateVector selector(const ModelSpec& s, int x, const ValueVector& p) {
  RateVector out;
  out.anchor = x;
  out.a.assign(static_cast<std::size_t>(s.d), 0.0);
  const double px = p[static_cast<std::size_t>(x)];
  double sum = 0.0;
  for (int y = 0; y < s.d; ++y) {
    if (y == x) continue;
    const double a =
        detail::clamped_rate(s, p[static_cast<std::size_t>(y)] - px);
    out.a[static_cast<std::size_t>(y)] = a;
    sum += a;
  }
  out.a[static_cast<std::size_t>(x)] = -sum;
  return out;
}

/// Number of coordinates of gamma*(x, p) sitting on the box boundary. The
/// curvature constant 1/c is only valid where this is zero, so solvers tally
/// it as a diagnostic.
inline int clamp_count(const ModelSpec& s, int x, const ValueVector& p) {
  const double px = p[static_cast<std::size_t>(x)];
  int n = 0;
  for (int y = 0; y < s.d; ++y) {
    if (y == x) continue;
    const double raw = s.kappa - (p[static_cast<std::size_t>(y)] - px) / s.c;
    if (raw <= s.a_l || raw >= s.a_u) ++n;
  }
  return n;
}

/// Jacobian J[y][z] = d gamma*_y(x, p) / d p_z. Unclamped coordinates give
/// -1/c at z = y and +1/c at z = x; clamped coordinates are locally constant.
/// Row x carries minus the column sums of the other rows, since
/// gamma*_x = -sum_{y != x} gamma*_y.
inline std::vector<Vec> selector_jacobian(const ModelSpec& s, int x,
                                          const ValueVector& p) {
  std::vector<Vec> j(static_cast<std::size_t>(s.d),
                     Vec(static_cast<std::size_t>(s.d), 0.0));
  const double px = p[static_cast<std::size_t>(x)];
  for (int y = 0; y < s.d; ++y) {
    if (y == x) continue;
    const double raw = s.kappa - (p[static_cast<std::size_t>(y)] - px) / s.c;
    if (raw <= s.a_l || raw >= s.a_u) continue;  // clamped, locally constant
    j[static_cast<std::size_t>(y)][static_cast<std::size_t>(y)] = -1.0 / s.c;
    j[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] = 1.0 / s.c;
  }
  for (int z = 0; z < s.d; ++z) {
    double colsum = 0.0;
    for (int y = 0; y < s.d; ++y)
      if (y != x) colsum += j[static_cast<std::size_t>(y)][static_cast<std::size_t>(z)];
    j[static_cast<std::size_t>(x)][static_cast<std::size_t>(z)] = -colsum;
  }
  return j;
}

/// Running control cost f(x, a) for a rate vector anchored at x.
inline double running_cost(const ModelSpec& s, const RateVector& rates) {
  double f = 0.0;
  for (int y = 0; y < s.d; ++y) {
    if (y == rates.anchor) continue;
    const double dev = rates.a[static_cast<std::size_t>(y)] - s.kappa;
    f += 0.5 * s.c * dev * dev;
  }
  return f;
}

/// Crowd cost F(x, eta) = beta * eta_x + g_x.
inline double mean_field_cost(const ModelSpec& s, int x,
                              const SimplexPoint& eta) {
  return s.beta * eta[x] + s.g_at(x);
}

/// Simplex gradient row of F(x, .) against base state 0:
/// component z is the derivative in direction e_{0z}. Constant in eta for
/// this model: beta * (1_{z==x} - 1_{0==x}).
inline Vec mean_field_cost_grad(const ModelSpec& s, int x) {
  Vec grad(static_cast<std::size_t>(s.d), 0.0);
  for (int z = 0; z < s.d; ++z)
    grad[static_cast<std::size_t>(z)] =
        s.beta * ((z == x ? 1.0 : 0.0) - (x == 0 ? 1.0 : 0.0));
  return grad;
}

/// Uniform bound C on |f| + |F|: the constant behind the 1/r value bounds.
inline double cost_bound(const ModelSpec& s) {
  double gmax = 0.0;
  for (int x = 0; x < s.d; ++x) gmax = std::max(gmax, std::abs(s.g_at(x)));
  const double dev = std::max((s.kappa - s.a_l) * (s.kappa - s.a_l),
                              (s.a_u - s.kappa) * (s.a_u - s.kappa));
  return gmax + s.beta + 0.5 * s.c * dev * (s.d - 1);
}

/// Concavity constant of the Hamiltonian on the unclamped region.
inline double curvature_bound(const ModelSpec& s) { return 1.0 / s.c; }

}  // namespace mfg
