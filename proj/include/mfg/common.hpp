#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfg {

/// Dense real vector over the state space. All state counts in this library
/// are tiny (d <= 6 in practice), so everything stays on std::vector.
using Vec = std::vector<double>;

/// Value function over states, in units of cost. No constraint beyond
/// finiteness.
using ValueVector = Vec;

/// Library-wide error type. Thrown on precondition violations, invariant
/// breaches and solver failures; the CLI maps these to exit codes.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Membership tolerance for the probability simplex and its tangent space.
inline constexpr double simplex_tol = 1e-12;

inline double sup_norm(const Vec& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline double l2_norm(const Vec& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double component_sum(const Vec& a) {
  double s = 0.0;
  for (double v : a) s += v;
  return s;
}

inline Vec sub(const Vec& a, const Vec& b) {
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline Vec add(const Vec& a, const Vec& b) {
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Vec scaled(const Vec& a, double s) {
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a[i];
  return out;
}

/// y += s * x
inline void axpy(Vec& y, double s, const Vec& x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

/// Ordinary least squares y ~ intercept + slope * x.
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};

inline LinearFit fit_linear(const Vec& x, const Vec& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw error("fit_linear: need at least two paired samples");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx <= 0.0) throw error("fit_linear: degenerate abscissae");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = (syy > 0.0) ? (sxy * sxy) / (sxx * syy) : 1.0;
  f.n = x.size();
  return f;
}

}  // namespace mfg
