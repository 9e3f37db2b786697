#pragma once

// Linearization of the discounted system around a solved center. The backward
// equation transports a value perturbation v against the center's selector
// plus the crowd-cost gradient applied to the measure perturbation m; the
// forward equation transports m through the center's selector and through the
// selector's sensitivity to v, weighted by the center measure. Both equations
// accept time-dependent sources. Coefficients are sampled from the center at
// grid nodes (midpoints by averaging) and held fixed per RK4 stage, matching
// the accuracy order of the center solve itself.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <utility>
#include <vector>

#include "mfg/solver.hpp"

namespace mfg {

/// Time-indexed source term, one entry per grid node. Empty means zero.
using SourceFlow = std::vector<Vec>;

struct LinearOptions {
  double tol = 1e-13;
  int max_iter = 4000;
  double omega = 0.5;
  double omega_min = 1.0 / 64.0;
};

/// Coupled perturbation pair (v, m) on a uniform grid, together with the
/// center samples and sources that produced it. m(t) stays in the zero-sum
/// tangent space; v solves the terminal problem v(T) = 0.
struct LinearizedSolution {
  ModelSpec model;
  double r = 0.0;
  double dt = 0.0;
  Vec t;
  std::vector<Vec> v;
  std::vector<Vec> m;

  std::vector<Vec> center_u;
  std::vector<Vec> center_mu;
  SourceFlow a_source;  // backward (value) source per node
  SourceFlow b_source;  // forward (measure) source per node
  bool stationary_center = false;

  double picard_tol = 0.0;
  int picard_iterations = 0;
  double picard_residual = 0.0;
  double backward_residual = 0.0;
  double forward_residual = 0.0;
  double m_sum_drift = 0.0;  // worst |sum_x m_x(t)| over the grid
  int clamp_events = 0;      // center selector coordinates on the box boundary

  std::size_t size() const { return t.size(); }
  double horizon() const { return t.back(); }
};

namespace detail {

// Center data frozen at one sample time: selector rows, their derivative in
// the value argument, the measure weights, and the two source samples.
struct LinCoeff {
  std::vector<RateVector> rows;
  std::vector<std::vector<Vec>> jac;
  Vec mu;
  Vec src_a;
  Vec src_b;
};

inline LinCoeff lin_coeff(const ModelSpec& s, const Vec& u, Vec mu, Vec a,
                          Vec b) {
  LinCoeff c;
  c.rows.reserve(static_cast<std::size_t>(s.d));
  c.jac.reserve(static_cast<std::size_t>(s.d));
  for (int y = 0; y < s.d; ++y) {
    c.rows.push_back(selector(s, y, u));
    c.jac.push_back(selector_jacobian(s, y, u));
  }
  c.mu = std::move(mu);
  c.src_a = std::move(a);
  c.src_b = std::move(b);
  return c;
}

// dv_x/dt = r v_x - gamma*(x)·v - dF(x)·m - A_x. The selector row sums to
// zero, so the contraction with v equals the contraction with the contrast
// of v and the result is insensitive to constant shifts of v.
inline Vec lin_backward_rhs(double r, const LinCoeff& c,
                            const std::vector<Vec>& grads, const Vec& v,
                            const Vec& m) {
  const std::size_t d = v.size();
  Vec out(d);
  for (std::size_t x = 0; x < d; ++x)
    out[x] = r * v[x] - dot(c.rows[x].a, v) - dot(grads[x], m) - c.src_a[x];
  return out;
}

// dm_x/dt = sum_y m_y gamma*_x(y) + sum_y mu_y (J_y v)_x + B_x, written as
// pairwise fluxes so every stage increment sums to zero exactly.
inline Vec lin_forward_rhs(const LinCoeff& c, const Vec& m, const Vec& v) {
  const std::size_t d = m.size();
  Vec k = c.src_b;
  for (std::size_t y = 0; y < d; ++y) {
    const Vec& row = c.rows[y].a;
    const auto& jac = c.jac[y];
    for (std::size_t x = 0; x < d; ++x) {
      if (x == y) continue;
      const double w = dot(jac[x], v);
      const double flux = m[y] * row[x] + c.mu[y] * w;
      k[x] += flux;
      k[y] -= flux;
    }
  }
  return k;
}

inline void lin_backward_sweep(double r, double dt,
                               const std::vector<LinCoeff>& node,
                               const std::vector<LinCoeff>& mid,
                               const std::vector<Vec>& grads,
                               const std::vector<Vec>& m,
                               std::vector<Vec>& v) {
  const std::size_t n = node.size() - 1;
  const std::size_t d = grads.size();
  v.assign(n + 1, Vec(d, 0.0));
  Vec mm(d), y2(d), y3(d), y4(d);
  for (std::size_t k = n; k-- > 0;) {
    const Vec& m1 = m[k + 1];
    const Vec& m0 = m[k];
    for (std::size_t i = 0; i < d; ++i) mm[i] = 0.5 * (m0[i] + m1[i]);
    const Vec& v1 = v[k + 1];
    const Vec k1 = lin_backward_rhs(r, node[k + 1], grads, v1, m1);
    for (std::size_t i = 0; i < d; ++i) y2[i] = v1[i] - 0.5 * dt * k1[i];
    const Vec k2 = lin_backward_rhs(r, mid[k], grads, y2, mm);
    for (std::size_t i = 0; i < d; ++i) y3[i] = v1[i] - 0.5 * dt * k2[i];
    const Vec k3 = lin_backward_rhs(r, mid[k], grads, y3, mm);
    for (std::size_t i = 0; i < d; ++i) y4[i] = v1[i] - dt * k3[i];
    const Vec k4 = lin_backward_rhs(r, node[k], grads, y4, m0);
    Vec& vk = v[k];
    for (std::size_t i = 0; i < d; ++i)
      vk[i] = v1[i] - dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
}

inline void lin_forward_sweep(double dt, const std::vector<LinCoeff>& node,
                              const std::vector<LinCoeff>& mid, const Vec& m0,
                              const std::vector<Vec>& v, std::vector<Vec>& m) {
  const std::size_t n = node.size() - 1;
  const std::size_t d = m0.size();
  m.assign(n + 1, Vec(d, 0.0));
  m[0] = m0;
  Vec vm(d), y2(d), y3(d), y4(d);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec& v0 = v[k];
    const Vec& v1 = v[k + 1];
    for (std::size_t i = 0; i < d; ++i) vm[i] = 0.5 * (v0[i] + v1[i]);
    const Vec& mk = m[k];
    const Vec k1 = lin_forward_rhs(node[k], mk, v0);
    for (std::size_t i = 0; i < d; ++i) y2[i] = mk[i] + 0.5 * dt * k1[i];
    const Vec k2 = lin_forward_rhs(mid[k], y2, vm);
    for (std::size_t i = 0; i < d; ++i) y3[i] = mk[i] + 0.5 * dt * k2[i];
    const Vec k3 = lin_forward_rhs(mid[k], y3, vm);
    for (std::size_t i = 0; i < d; ++i) y4[i] = mk[i] + dt * k3[i];
    const Vec k4 = lin_forward_rhs(node[k + 1], y4, v1);
    Vec& mk1 = m[k + 1];
    for (std::size_t i = 0; i < d; ++i)
      mk1[i] = mk[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
}

// Shared driver. cu/cmu are center samples at the n+1 grid nodes; a/b are
// source grids of the same length (empty means zero). Inputs are scaled to
// unit sup norm before iterating and the solution scaled back, so scaling an
// input by a power of two or flipping its sign reproduces the output exactly.
inline LinearizedSolution lin_solve_core(
    const ModelSpec& spec, double r, std::vector<Vec> cu, std::vector<Vec> cmu,
    bool stationary, const TangentVector& m0, SourceFlow a, SourceFlow b,
    Vec t, double dt, const LinearOptions& opt) {
  spec.validate();
  const auto d = static_cast<std::size_t>(spec.d);
  const std::size_t n = t.size() - 1;
  if (m0.dim() != spec.d) throw error("solve_linearized: m0 dimension");
  if (!(opt.tol > 0.0) || opt.max_iter < 1)
    throw error("solve_linearized: bad options");
  if (r < 0.0) throw error("solve_linearized: negative discount");
  if (a.empty()) a.assign(n + 1, Vec(d, 0.0));
  if (b.empty()) b.assign(n + 1, Vec(d, 0.0));
  if (a.size() != n + 1 || b.size() != n + 1)
    throw error("solve_linearized: source grids need one entry per node");
  for (std::size_t k = 0; k <= n; ++k) {
    if (a[k].size() != d || b[k].size() != d)
      throw error("solve_linearized: source entry dimension");
    for (std::size_t i = 0; i < d; ++i)
      if (!std::isfinite(a[k][i]) || !std::isfinite(b[k][i]))
        throw error("solve_linearized: non-finite source");
    if (std::abs(component_sum(b[k])) > simplex_tol)
      throw error("solve_linearized: forward source leaves the tangent space");
  }

  LinearizedSolution out;
  out.model = spec;
  out.r = r;
  out.dt = dt;
  out.t = std::move(t);
  out.stationary_center = stationary;
  out.picard_tol = opt.tol;
  for (std::size_t k = 0; k <= n; ++k)
    for (int x = 0; x < spec.d; ++x)
      out.clamp_events += clamp_count(spec, x, cu[k]);

  double scale = sup_norm(m0.components());
  for (std::size_t k = 0; k <= n; ++k)
    scale = std::max({scale, sup_norm(a[k]), sup_norm(b[k])});

  if (scale == 0.0) {
    out.v.assign(n + 1, Vec(d, 0.0));
    out.m.assign(n + 1, Vec(d, 0.0));
    out.center_u = std::move(cu);
    out.center_mu = std::move(cmu);
    out.a_source = std::move(a);
    out.b_source = std::move(b);
    return out;
  }

  Vec m0s = m0.components();
  for (double& x : m0s) x /= scale;
  std::vector<LinCoeff> node, mid;
  node.reserve(n + 1);
  mid.reserve(n);
  for (std::size_t k = 0; k <= n; ++k)
    node.push_back(lin_coeff(spec, cu[k], cmu[k], scaled(a[k], 1.0 / scale),
                             scaled(b[k], 1.0 / scale)));
  for (std::size_t k = 0; k < n; ++k) {
    Vec um(d), mm(d), am(d), bm(d);
    for (std::size_t i = 0; i < d; ++i) {
      um[i] = 0.5 * (cu[k][i] + cu[k + 1][i]);
      mm[i] = 0.5 * (cmu[k][i] + cmu[k + 1][i]);
      am[i] = 0.5 * (node[k].src_a[i] + node[k + 1].src_a[i]);
      bm[i] = 0.5 * (node[k].src_b[i] + node[k + 1].src_b[i]);
    }
    mid.push_back(
        lin_coeff(spec, um, std::move(mm), std::move(am), std::move(bm)));
  }
  std::vector<Vec> grads;
  grads.reserve(d);
  for (int x = 0; x < spec.d; ++x)
    grads.push_back(mean_field_cost_grad(spec, x));

  std::vector<Vec> v(n + 1, Vec(d, 0.0)), m;
  lin_forward_sweep(dt, node, mid, m0s, v, m);

  double omega = opt.omega;
  double prev_gap = std::numeric_limits<double>::infinity();
  int good_streak = 0;
  double gap = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    lin_backward_sweep(r, dt, node, mid, grads, m, v);
    std::vector<Vec> m_new;
    lin_forward_sweep(dt, node, mid, m0s, v, m_new);
    gap = grid_gap(m_new, m);
    if (!std::isfinite(gap)) throw error("solve_linearized: diverged");
    if (gap <= opt.tol) {
      m = std::move(m_new);
      break;
    }
    if (gap > prev_gap * (1.0 + 1e-12)) {
      omega = std::max(0.5 * omega, opt.omega_min);
      good_streak = 0;
    } else if (++good_streak >= 4) {
      omega = std::min(1.2 * omega, 0.9);
      good_streak = 0;
    }
    prev_gap = gap;
    for (std::size_t k = 0; k <= n; ++k)
      for (std::size_t i = 0; i < d; ++i)
        m[k][i] += omega * (m_new[k][i] - m[k][i]);
  }
  if (gap > opt.tol) {
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "solve_linearized: Picard stalled at residual %.3e after %d "
                  "iterations (tol %.3e)",
                  gap, opt.max_iter, opt.tol);
    throw error(msg);
  }
  out.picard_iterations = it + 1;
  out.picard_residual = gap;

  // Value consistent with the converged m, then m re-run undamped from that
  // value; the forward defect is zero by construction, the backward measured.
  lin_backward_sweep(r, dt, node, mid, grads, m, v);
  lin_forward_sweep(dt, node, mid, m0s, v, m);
  std::vector<Vec> v_check;
  lin_backward_sweep(r, dt, node, mid, grads, m, v_check);
  out.backward_residual = grid_gap(v_check, v);
  std::vector<Vec> m_check;
  lin_forward_sweep(dt, node, mid, m0s, v, m_check);
  out.forward_residual = grid_gap(m_check, m);

  for (std::size_t k = 0; k <= n; ++k) {
    for (std::size_t i = 0; i < d; ++i) {
      v[k][i] *= scale;
      m[k][i] *= scale;
    }
    out.m_sum_drift =
        std::max(out.m_sum_drift, std::abs(component_sum(m[k])));
  }
  out.v = std::move(v);
  out.m = std::move(m);
  out.center_u = std::move(cu);
  out.center_mu = std::move(cmu);
  out.a_source = std::move(a);
  out.b_source = std::move(b);
  return out;
}

}  // namespace detail

/// Linearization around a stationary center: coefficients are constant in
/// time, the grid is built from the requested horizon and step.
inline LinearizedSolution solve_linearized(const ModelSpec& spec, double r,
                                           const StationarySolution& center,
                                           const TangentVector& m0,
                                           const SourceFlow& a,
                                           const SourceFlow& b, double T,
                                           double dt_req,
                                           const LinearOptions& opt = {}) {
  if (std::abs(center.r - r) > 1e-12)
    throw error("solve_linearized: center solves a different discount rate");
  if (!(T > 0.0) || !(dt_req > 0.0))
    throw error("solve_linearized: need positive horizon and step");
  std::size_t n = 0;
  const double dt = detail::effective_step(spec, T, dt_req, &n);
  Vec t(n + 1);
  for (std::size_t k = 0; k <= n; ++k) t[k] = static_cast<double>(k) * dt;
  t[n] = T;
  std::vector<Vec> cu(n + 1, center.value);
  std::vector<Vec> cmu(n + 1, center.measure.weights());
  return detail::lin_solve_core(spec, r, std::move(cu), std::move(cmu), true,
                                m0, a, b, std::move(t), dt, opt);
}

/// Linearization around a time-dependent center. The grid is the center's own
/// grid truncated at T, which must sit on a node; dt_req must match the
/// center's step.
inline LinearizedSolution solve_linearized(const ModelSpec& spec, double r,
                                           const FlowPair& center,
                                           const TangentVector& m0,
                                           const SourceFlow& a,
                                           const SourceFlow& b, double T,
                                           double dt_req,
                                           const LinearOptions& opt = {}) {
  if (std::abs(center.r - r) > 1e-12)
    throw error("solve_linearized: center solves a different discount rate");
  if (center.size() < 2) throw error("solve_linearized: center grid too short");
  if (std::abs(dt_req - center.dt) > 1e-9 * center.dt)
    throw error("solve_linearized: step mismatch with the center grid");
  const auto n = static_cast<std::size_t>(std::llround(T / center.dt));
  if (n < 1 || n >= center.size() ||
      std::abs(static_cast<double>(n) * center.dt - T) >
          1e-9 * std::max(1.0, T))
    throw error("solve_linearized: horizon is not a node of the center grid");
  Vec t(center.t.begin(), center.t.begin() + static_cast<std::ptrdiff_t>(n + 1));
  std::vector<Vec> cu(center.u.begin(),
                      center.u.begin() + static_cast<std::ptrdiff_t>(n + 1));
  std::vector<Vec> cmu;
  cmu.reserve(n + 1);
  for (std::size_t k = 0; k <= n; ++k) cmu.push_back(center.mu[k].weights());
  return detail::lin_solve_core(spec, r, std::move(cu), std::move(cmu), false,
                                m0, a, b, std::move(t), center.dt, opt);
}

/// Constant in the linearized energy estimate. min_mu is a lower bound on the
/// center measure's smallest weight; the estimate controls the discounted
/// contrast energy of v by the boundary pairing m·v plus the forward source.
inline double duality_constant(const ModelSpec& spec, double min_mu) {
  if (!(min_mu > 0.0))
    throw error("duality_constant: center measure must be strictly positive");
  const double k0 = curvature_bound(spec) * min_mu;
  return std::max(2.0 / k0, 1.0 / (2.0 * spec.d * k0 * k0));
}

/// Certified slack of the linearized energy estimate on [t1, t2]:
///   C1 * (e^{-r t1} m·v(t1) - e^{-r t2} m·v(t2)) + C1 * int e^{-rs}|B|^2 ds
///   - int e^{-rs} |contrast of v|^2 ds,
/// integrals by the trapezoid rule on the solution grid. Requires the
/// backward source to vanish on the window; t1 and t2 must be grid nodes.
inline double duality_gap(const LinearizedSolution& sol, double t1,
                          double t2) {
  if (sol.size() < 2) throw error("duality_gap: empty solution");
  const auto locate = [&](double tau) {
    const auto k = std::llround(tau / sol.dt);
    if (k < 0 || k >= static_cast<long long>(sol.size()) ||
        std::abs(sol.t[static_cast<std::size_t>(k)] - tau) >
            1e-9 * std::max(1.0, std::abs(tau)))
      throw error("duality_gap: time is not a grid node");
    return static_cast<std::size_t>(k);
  };
  const std::size_t k1 = locate(t1), k2 = locate(t2);
  if (k1 >= k2) throw error("duality_gap: need t1 < t2");
  double min_mu = std::numeric_limits<double>::infinity();
  for (std::size_t k = k1; k <= k2; ++k) {
    if (sup_norm(sol.a_source[k]) > 1e-14)
      throw error("duality_gap: backward source active on the window");
    for (double w : sol.center_mu[k]) min_mu = std::min(min_mu, w);
  }
  const double c1 = duality_constant(sol.model, min_mu);
  double energy = 0.0, source = 0.0;
  double f_prev = 0.0, g_prev = 0.0;
  for (std::size_t k = k1; k <= k2; ++k) {
    const double w = std::exp(-sol.r * sol.t[k]);
    const double dn = delta_norm(sol.v[k]);
    const double f = w * dn * dn;
    double b2 = 0.0;
    for (double x : sol.b_source[k]) b2 += x * x;
    const double g = w * b2;
    if (k > k1) {
      energy += 0.5 * sol.dt * (f_prev + f);
      source += 0.5 * sol.dt * (g_prev + g);
    }
    f_prev = f;
    g_prev = g;
  }
  const double bracket =
      std::exp(-sol.r * sol.t[k1]) * dot(sol.m[k1], sol.v[k1]) -
      std::exp(-sol.r * sol.t[k2]) * dot(sol.m[k2], sol.v[k2]);
  return c1 * bracket + c1 * source - energy;
}

/// Sensitivity of the discounted equilibrium value at time zero to the start
/// measure, moved along the pair directions out of the base state. Entry
/// (x, z) is the derivative of u_x(0) along e_z - e_0; the base column is
/// zero by construction.
inline std::vector<Vec> derivative_field(const ModelSpec& spec, double r,
                                         const SimplexPoint& eta,
                                         double tol = 1e-9,
                                         const PicardOptions& picard = {}) {
  spec.validate();
  const auto flow = solve_discounted(spec, r, eta, tol, 0.5, 0.02, picard);
  const auto d = static_cast<std::size_t>(spec.d);
  std::vector<Vec> field(d, Vec(d, 0.0));
  LinearOptions lo;
  lo.tol = std::min(1e-13, 0.1 * tol);
  for (int z = 1; z < spec.d; ++z) {
    const auto lin = solve_linearized(
        spec, r, flow, TangentVector::pair_direction(spec.d, 0, z), {}, {},
        flow.horizon(), flow.dt, lo);
    for (std::size_t x = 0; x < d; ++x)
      field[x][static_cast<std::size_t>(z)] = lin.v.front()[x];
  }
  return field;
}

}  // namespace mfg
