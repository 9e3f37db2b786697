#pragma once

#include <cstdio>
#include <optional>

#include "mfg/chain.hpp"

namespace mfg {

/// Coupled value/measure flow on a uniform time grid. u runs backward from
/// its terminal condition, mu forward from mu(0); both live on the same
/// nodes. Residuals are those of the discrete scheme after the final sweeps.
struct FlowPair {
  double r = 0.0;
  double dt = 0.0;
  Vec t;
  std::vector<ValueVector> u;
  std::vector<SimplexPoint> mu;

  double picard_tol = 0.0;
  int picard_iterations = 0;
  double picard_residual = 0.0;   // last undamped update size
  double backward_residual = 0.0; // sup defect of the backward recursion
  double forward_residual = 0.0;  // sup defect of the forward recursion
  double mass_drift = 0.0;        // worst |sum mu - 1| before normalization
  int clamp_events = 0;           // selector coordinates on the box boundary
  double gamma_hat = 0.0;         // fitted decay rate (discounted solves)
  double gamma_r2 = 0.0;          // fit quality of gamma_hat

  std::size_t size() const { return t.size(); }
  double horizon() const { return t.back(); }
};

/// Fixed point of one of the stationary systems. For r > 0 the pair
/// (value, measure) solves the discounted stationary system; for r = 0 the
/// value is zero-mean and ergodic_value carries the constant.
struct StationarySolution {
  double r = 0.0;
  ValueVector value;
  SimplexPoint measure;
  std::optional<double> ergodic_value;

  double residual = 0.0;            // certified sup-residual of the system
  double bellman_defect = 0.0;      // |S(u) - u| certification (r > 0)
  double measure_consistency = 0.0; // gap to stationary_distribution re-solve
  int iterations = 0;
  bool polished = true;             // ergodic only: Newton succeeded
  Vec ladder_r;                     // ergodic only: visited discounts
  Vec ladder_gap;                   // successive triple differences
};

struct PicardOptions {
  double tol = 1e-13;
  int max_iter = 4000;
  double omega = 0.5;
  double omega_min = 1.0 / 64.0;
  ValueVector terminal;        // empty means u(T) = 0
  std::vector<Vec> initial_mu; // warm start for the measure grid (optional)
};

namespace detail {

inline double crowd(const ModelSpec& s, int x, const Vec& eta) {
  return s.beta * eta[static_cast<std::size_t>(x)] + s.g_at(x);
}

/// Backward equation in du/dt form: du_x/dt = r u_x - H(x, u) - F(x, eta).
inline Vec hjb_rhs(const ModelSpec& s, double r, const Vec& u,
                   const Vec& eta) {
  Vec g(static_cast<std::size_t>(s.d));
  for (int x = 0; x < s.d; ++x)
    g[static_cast<std::size_t>(x)] =
        r * u[static_cast<std::size_t>(x)] - hamiltonian(s, x, u) -
        crowd(s, x, eta);
  return g;
}

/// Forward equation in flux form: every unit of mass leaving y for x is
/// added to x and subtracted from y with the same double, so the total mass
/// moves only by rounding.
inline Vec kolmogorov_rhs(const ModelSpec& s, const Vec& mu, const Vec& u) {
  Vec k(static_cast<std::size_t>(s.d), 0.0);
  for (int y = 0; y < s.d; ++y) {
    const auto row = selector(s, y, u);
    const double my = mu[static_cast<std::size_t>(y)];
    for (int x = 0; x < s.d; ++x) {
      if (x == y) continue;
      const double flux = my * row.a[static_cast<std::size_t>(x)];
      k[static_cast<std::size_t>(x)] += flux;
      k[static_cast<std::size_t>(y)] -= flux;
    }
  }
  return k;
}

/// One classical Runge-Kutta step of the backward sweep, from the node k+1
/// value to node k. The measure flow enters at the three stage times.
inline Vec backward_rk4_step(const ModelSpec& s, double r, const Vec& u_next,
                             const Vec& mu_k, const Vec& mu_mid,
                             const Vec& mu_next, double dt) {
  const auto g1 = hjb_rhs(s, r, u_next, mu_next);
  Vec y = u_next;
  axpy(y, -0.5 * dt, g1);
  const auto g2 = hjb_rhs(s, r, y, mu_mid);
  y = u_next;
  axpy(y, -0.5 * dt, g2);
  const auto g3 = hjb_rhs(s, r, y, mu_mid);
  y = u_next;
  axpy(y, -dt, g3);
  const auto g4 = hjb_rhs(s, r, y, mu_k);
  Vec out = u_next;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] -= dt / 6.0 * (g1[i] + 2.0 * g2[i] + 2.0 * g3[i] + g4[i]);
  return out;
}

inline Vec forward_rk4_step(const ModelSpec& s, const Vec& mu_k,
                            const Vec& u_k, const Vec& u_mid,
                            const Vec& u_next, double dt) {
  const auto k1 = kolmogorov_rhs(s, mu_k, u_k);
  Vec y = mu_k;
  axpy(y, 0.5 * dt, k1);
  const auto k2 = kolmogorov_rhs(s, y, u_mid);
  y = mu_k;
  axpy(y, 0.5 * dt, k2);
  const auto k3 = kolmogorov_rhs(s, y, u_mid);
  y = mu_k;
  axpy(y, dt, k3);
  const auto k4 = kolmogorov_rhs(s, y, u_next);
  Vec out = mu_k;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

inline std::vector<Vec> backward_sweep(const ModelSpec& s, double r,
                                       const std::vector<Vec>& mu,
                                       const Vec& terminal, double dt) {
  const std::size_t n = mu.size();
  std::vector<Vec> u(n);
  u[n - 1] = terminal;
  for (std::size_t k = n - 1; k > 0; --k) {
    Vec mid = mu[k - 1];
    for (std::size_t i = 0; i < mid.size(); ++i)
      mid[i] = 0.5 * (mid[i] + mu[k][i]);
    u[k - 1] = backward_rk4_step(s, r, u[k], mu[k - 1], mid, mu[k], dt);
  }
  return u;
}

inline std::vector<Vec> forward_sweep(const ModelSpec& s, const Vec& mu0,
                                      const std::vector<Vec>& u, double dt) {
  const std::size_t n = u.size();
  std::vector<Vec> mu(n);
  mu[0] = mu0;
  for (std::size_t k = 0; k + 1 < n; ++k) {
    Vec mid = u[k];
    for (std::size_t i = 0; i < mid.size(); ++i)
      mid[i] = 0.5 * (mid[i] + u[k + 1][i]);
    mu[k + 1] = forward_rk4_step(s, mu[k], u[k], mid, u[k + 1], dt);
  }
  return mu;
}

inline double grid_gap(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  double gap = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i)
      gap = std::max(gap, std::abs(a[k][i] - b[k][i]));
  return gap;
}

/// Largest step at which the bounded generator cannot outrun the grid.
inline double step_cap(const ModelSpec& s) {
  return 0.1 / ((s.d - 1) * s.a_u);
}

/// Step small enough that the bounded generator cannot outrun the grid.
inline double effective_step(const ModelSpec& s, double T, double dt_req,
                             std::size_t* n_out) {
  const double dt = std::min(dt_req, step_cap(s));
  const auto n = static_cast<std::size_t>(std::ceil(T / dt - 1e-9));
  *n_out = std::max<std::size_t>(n, 1);
  return T / static_cast<double>(*n_out);
}

}  // namespace detail

/// Finite-horizon system: backward value equation with terminal data, forward
/// measure equation from mu0, coupled by damped Picard iteration on the
/// measure flow. Throws if the iteration fails to settle.
inline FlowPair solve_finite_horizon(const ModelSpec& spec, double r,
                                     const SimplexPoint& mu0, double T,
                                     double dt_req,
                                     const PicardOptions& opt = {}) {
  spec.validate();
  if (mu0.dim() != spec.d) throw error("solve_finite_horizon: mu0 dimension");
  if (!(T > 0.0) || !(dt_req > 0.0))
    throw error("solve_finite_horizon: need positive horizon and step");
  if (r < 0.0) throw error("solve_finite_horizon: negative discount");

  std::size_t n = 0;
  const double dt = detail::effective_step(spec, T, dt_req, &n);
  const auto d = static_cast<std::size_t>(spec.d);
  Vec terminal = opt.terminal.empty() ? Vec(d, 0.0) : opt.terminal;
  if (terminal.size() != d) throw error("solve_finite_horizon: terminal size");

  // Value contrasts carry rounding noise proportional to the value scale, so
  // deep-discount solves (terminal ~ 1/r) cannot push the measure gap below
  // scale * eps; clamp the target to that floor.
  const double noise_floor = 4.0 * std::numeric_limits<double>::epsilon() *
                             (1.0 + sup_norm(terminal));
  const double tol = std::max(opt.tol, noise_floor);

  std::vector<Vec> mu(n + 1, mu0.weights());
  if (!opt.initial_mu.empty()) {
    if (opt.initial_mu.size() != n + 1 || opt.initial_mu[0] != mu0.weights())
      throw error("solve_finite_horizon: warm-start grid mismatch");
    mu = opt.initial_mu;
  }

  double omega = opt.omega;
  double prev_gap = std::numeric_limits<double>::infinity();
  int good_streak = 0;
  std::vector<Vec> u;
  double gap = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    u = detail::backward_sweep(spec, r, mu, terminal, dt);
    auto mu_new = detail::forward_sweep(spec, mu[0], u, dt);
    gap = detail::grid_gap(mu_new, mu);
    if (!std::isfinite(gap))
      throw error("solve_finite_horizon: iteration diverged");
    if (gap <= tol) {
      mu = std::move(mu_new);
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
        mu[k][i] += omega * (mu_new[k][i] - mu[k][i]);
  }
  if (gap > tol) {
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "solve_finite_horizon: Picard stalled at residual %.3e "
                  "after %d iterations (tol %.3e)",
                  gap, opt.max_iter, tol);
    throw error(msg);
  }

  // Final sweeps: value consistent with the converged measure flow, measure
  // re-run undamped from that value, then measure both discrete defects.
  u = detail::backward_sweep(spec, r, mu, terminal, dt);
  mu = detail::forward_sweep(spec, mu[0], u, dt);

  FlowPair out;
  out.r = r;
  out.dt = dt;
  out.picard_tol = tol;
  out.picard_iterations = it + 1;
  out.picard_residual = gap;
  out.t.resize(n + 1);
  for (std::size_t k = 0; k <= n; ++k)
    out.t[k] = static_cast<double>(k) * dt;
  out.t[n] = T;
  out.u = u;
  out.mu.reserve(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    out.mass_drift =
        std::max(out.mass_drift, std::abs(component_sum(mu[k]) - 1.0));
    out.mu.emplace_back(Vec(mu[k]));
    for (int x = 0; x < spec.d; ++x)
      out.clamp_events += clamp_count(spec, x, u[k]);
  }
  out.backward_residual =
      detail::grid_gap(detail::backward_sweep(spec, r, mu, terminal, dt), u);
  out.forward_residual =
      detail::grid_gap(detail::forward_sweep(spec, mu[0], u, dt), mu);
  return out;
}

/// One application of the discounted Bellman operator
/// S(u)(x) = inf_a (sum a + r)^{-1} (sum a_y u_y + f + F). Dinkelbach's
/// trick: the value v is the unique root of the increasing function
/// psi(v) = r v - H_x(u with u_x replaced by v) - F.
inline Vec bellman_apply(const ModelSpec& spec, double r, const Vec& eta,
                         const Vec& u) {
  if (!(r > 0.0)) throw error("bellman_apply: needs r > 0");
  const auto d = static_cast<std::size_t>(spec.d);
  Vec out(d);
  for (int x = 0; x < spec.d; ++x) {
    const double fx = detail::crowd(spec, x, eta);
    Vec p = u;
    const auto psi = [&](double v) {
      p[static_cast<std::size_t>(x)] = v;
      return r * v - hamiltonian(spec, x, p) - fx;
    };
    // Expand a sign-changing bracket around the current value.
    double lo = u[static_cast<std::size_t>(x)], hi = lo;
    double step = 1.0 + std::abs(lo);
    while (psi(lo) > 0.0) {
      lo -= step;
      step *= 2.0;
      if (!std::isfinite(lo)) throw error("bellman_apply: no lower bracket");
    }
    step = 1.0 + std::abs(hi);
    while (psi(hi) < 0.0) {
      hi += step;
      step *= 2.0;
      if (!std::isfinite(hi)) throw error("bellman_apply: no upper bracket");
    }
    double v = 0.5 * (lo + hi);
    for (int iter = 0; iter < 100; ++iter) {
      const double val = psi(v);
      if (val > 0.0)
        hi = v;
      else
        lo = v;
      p[static_cast<std::size_t>(x)] = v;
      const auto row = selector(spec, x, p);
      double slope = r;
      for (int y = 0; y < spec.d; ++y)
        if (y != x) slope += row.a[static_cast<std::size_t>(y)];
      double next = v - val / slope;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - v) <= 1e-15 * (1.0 + std::abs(v))) {
        v = next;
        break;
      }
      v = next;
    }
    out[static_cast<std::size_t>(x)] = v;
  }
  return out;
}

namespace detail {

/// Value of the stationary discounted HJB at a frozen measure, by policy
/// iteration: alternate the selector policy with the exact linear value of
/// that policy. One refinement pass keeps the solve honest at tiny r, where
/// the system is ill-conditioned along constants.
inline Vec stationary_value(const ModelSpec& s, double r, const Vec& eta,
                            Vec u) {
  const int d = s.d;
  if (u.empty()) u.assign(static_cast<std::size_t>(d), 0.0);
  Eigen::MatrixXd a(d, d);
  Eigen::VectorXd ell(d);
  for (int iter = 0; iter < 80; ++iter) {
    for (int x = 0; x < d; ++x) {
      const auto row = selector(s, x, u);
      for (int y = 0; y < d; ++y)
        a(x, y) = (x == y ? r : 0.0) - row.a[static_cast<std::size_t>(y)];
      ell(x) = running_cost(s, row) + crowd(s, x, eta);
    }
    const auto lu = a.partialPivLu();
    Eigen::VectorXd v = lu.solve(ell);
    v += lu.solve(ell - a * v);
    double gap = 0.0;
    for (int x = 0; x < d; ++x)
      gap = std::max(gap, std::abs(v(x) - u[static_cast<std::size_t>(x)]));
    for (int x = 0; x < d; ++x) u[static_cast<std::size_t>(x)] = v(x);
    if (gap <= 1e-13 * (1.0 + sup_norm(u))) break;
  }
  return u;
}

inline RateMatrix selector_rates(const ModelSpec& s, const Vec& u) {
  RateMatrix q(s.d);
  for (int x = 0; x < s.d; ++x) q.set_row(selector(s, x, u));
  return q;
}

}  // namespace detail

/// Stationary discounted equilibrium: damped fixed point on the measure of
/// (value of frozen measure) followed by (stationary law of the selector
/// rates). The returned pair carries a certified algebraic residual.
inline StationarySolution solve_stationary_discounted(const ModelSpec& spec,
                                                      double r, double tol,
                                                      int max_iter = 600) {
  spec.validate();
  if (!(r > 0.0)) throw error("solve_stationary_discounted: needs r > 0");
  if (!(tol > 0.0)) throw error("solve_stationary_discounted: needs tol > 0");
  const auto d = static_cast<std::size_t>(spec.d);

  Vec eta(d, 1.0 / spec.d);
  Vec u;
  double omega = 0.5;
  double prev_gap = std::numeric_limits<double>::infinity();
  int good_streak = 0;
  double gap = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < max_iter; ++it) {
    u = detail::stationary_value(spec, r, eta, std::move(u));
    const auto pi = stationary_distribution(detail::selector_rates(spec, u));
    gap = 0.0;
    for (int x = 0; x < spec.d; ++x)
      gap = std::max(gap, std::abs(pi[x] - eta[static_cast<std::size_t>(x)]));
    if (gap <= tol) {
      eta = pi.weights();
      break;
    }
    if (gap > prev_gap * (1.0 + 1e-12)) {
      omega = std::max(0.5 * omega, 1.0 / 64.0);
      good_streak = 0;
    } else if (++good_streak >= 4) {
      omega = std::min(1.2 * omega, 0.9);
      good_streak = 0;
    }
    prev_gap = gap;
    for (int x = 0; x < spec.d; ++x)
      eta[static_cast<std::size_t>(x)] +=
          omega * (pi[x] - eta[static_cast<std::size_t>(x)]);
  }
  if (gap > tol) {
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "solve_stationary_discounted: fixed point stalled at "
                  "defect %.3e after %d iterations (tol %.3e)",
                  gap, max_iter, tol);
    throw error(msg);
  }

  u = detail::stationary_value(spec, r, eta, std::move(u));
  const auto pi = stationary_distribution(detail::selector_rates(spec, u));

  StationarySolution out{r, u, pi, std::nullopt};
  out.iterations = it + 1;
  for (int x = 0; x < spec.d; ++x) {
    const double hjb = r * u[static_cast<std::size_t>(x)] -
                       hamiltonian(spec, x, u) -
                       detail::crowd(spec, x, pi.weights());
    out.residual = std::max(out.residual, std::abs(hjb));
  }
  const auto q = detail::selector_rates(spec, u);
  for (int y = 0; y < spec.d; ++y) {
    double bal = 0.0;
    for (int x = 0; x < spec.d; ++x) bal += pi[x] * q(x, y);
    out.residual = std::max(out.residual, std::abs(bal));
  }
  const auto su = bellman_apply(spec, r, eta, u);
  for (int x = 0; x < spec.d; ++x)
    out.bellman_defect = std::max(
        out.bellman_defect,
        std::abs(su[static_cast<std::size_t>(x)] -
                 u[static_cast<std::size_t>(x)]));
  return out;
}

/// Infinite-horizon discounted equilibrium, approached through finite
/// horizons: anchor the terminal value at the stationary solution, double
/// the horizon until two consecutive solves agree on the front half, and
/// return the certified front window with a fitted decay rate.
inline FlowPair solve_discounted(const ModelSpec& spec, double r,
                                 const SimplexPoint& mu0, double tol,
                                 double r_probe = 0.5, double dt_req = 0.02,
                                 const PicardOptions& picard = {}) {
  spec.validate();
  if (!(r > 0.0) || r > r_probe)
    throw error("solve_discounted: discount outside (0, r_probe]");
  if (!(tol > 0.0)) throw error("solve_discounted: needs tol > 0");

  const auto stat =
      solve_stationary_discounted(spec, r, std::min(1e-11, 0.1 * tol));

  // Seed the horizon from the mixing speed of the stationary selector chain.
  const auto diag = decay_diagnostic(detail::selector_rates(spec, stat.value));
  double T = 20.0;
  if (diag.rate > 1e-6) {
    const double span =
        std::log(std::max(diag.prefactor, 1.0) * 100.0 / tol) / diag.rate;
    T = std::clamp(4.0 * span, 10.0, 80.0);
  }
  // Snap the horizon to a whole number of steps so every doubled run shares
  // the exact same dt; otherwise the front-window comparison picks up an
  // O(dt^2/T) grid-misalignment floor instead of the truncation decay.
  const double dt0 = std::min(dt_req, detail::step_cap(spec));
  T = std::ceil(T / dt0 - 1e-9) * dt0;

  PicardOptions opt = picard;
  opt.tol = std::min(picard.tol, std::max(0.01 * tol, 5e-14));
  opt.terminal = stat.value;

  FlowPair prev = solve_finite_horizon(spec, r, mu0, T, dt_req, opt);
  const double t_cap = 640.0;
  while (true) {
    const double T2 = 2.0 * prev.horizon();
    if (T2 > t_cap) {
      char msg[160];
      std::snprintf(msg, sizeof msg,
                    "solve_discounted: horizon cap %.0f exceeded before the "
                    "front window settled (tol %.3e)",
                    t_cap, tol);
      throw error(msg);
    }
    // Warm start: old grid on the front half, stationary tail behind it.
    std::size_t n2 = 0;
    const double dt = detail::effective_step(spec, T2, dt_req, &n2);
    std::vector<Vec> warm(n2 + 1, stat.measure.weights());
    for (std::size_t k = 0; k < prev.size(); ++k) {
      const auto idx = static_cast<std::size_t>(
          std::llround(prev.t[k] / dt));
      if (idx <= n2) warm[idx] = prev.mu[k].weights();
    }
    warm[0] = mu0.weights();
    opt.initial_mu = std::move(warm);
    FlowPair next = solve_finite_horizon(spec, r, mu0, T2, dt_req, opt);
    opt.initial_mu.clear();

    // Compare on the certified front window [0, T_prev / 2].
    double gap = 0.0;
    const double window = 0.5 * prev.horizon();
    for (std::size_t k = 0; k < prev.size() && prev.t[k] <= window; ++k) {
      for (int x = 0; x < spec.d; ++x)
        gap = std::max(gap, std::abs(prev.mu[k][x] - next.mu[k][x]));
      for (std::size_t i = 0; i < prev.u[k].size(); ++i)
        gap = std::max(gap, std::abs(prev.u[k][i] - next.u[k][i]));
    }
    if (gap <= tol) {
      // Trim the certified window off the longer run.
      FlowPair out;
      out.r = r;
      out.dt = next.dt;
      out.picard_tol = next.picard_tol;
      out.picard_iterations = next.picard_iterations;
      out.picard_residual = next.picard_residual;
      out.backward_residual = next.backward_residual;
      out.forward_residual = next.forward_residual;
      out.mass_drift = next.mass_drift;
      out.clamp_events = next.clamp_events;
      std::size_t keep = 0;
      while (keep + 1 < next.size() && next.t[keep] < window) ++keep;
      out.t.assign(next.t.begin(), next.t.begin() + keep + 1);
      out.u.assign(next.u.begin(), next.u.begin() + keep + 1);
      out.mu.assign(next.mu.begin(), next.mu.begin() + keep + 1);

      // Fitted decay of the measure toward its stationary point.
      Vec ts, logs;
      const double floor = std::max(10.0 * tol, 1e-13);
      for (std::size_t k = 0; k < out.size(); ++k) {
        double dev = 0.0;
        for (int x = 0; x < spec.d; ++x)
          dev = std::max(dev, std::abs(out.mu[k][x] - stat.measure[x]));
        if (out.t[k] < 0.25 || dev < floor) continue;
        ts.push_back(out.t[k]);
        logs.push_back(std::log(dev));
      }
      if (ts.size() >= 5) {
        const auto fit = fit_linear(ts, logs);
        out.gamma_hat = -fit.slope;
        out.gamma_r2 = fit.r2;
      }
      return out;
    }
    prev = std::move(next);
  }
}

namespace detail {

struct ErgodicTriple {
  Vec ru;       // r * value, componentwise
  Vec centered; // value minus its mean
  Vec measure;
};

inline ErgodicTriple make_triple(const StationarySolution& s) {
  ErgodicTriple t;
  t.ru = s.value;
  for (auto& v : t.ru) v *= s.r;
  t.centered = zero_mean(s.value);
  t.measure = s.measure.weights();
  return t;
}

inline double triple_gap(const ErgodicTriple& a, const ErgodicTriple& b) {
  double g = 0.0;
  for (std::size_t i = 0; i < a.ru.size(); ++i) {
    g = std::max(g, std::abs(a.ru[i] - b.ru[i]));
    g = std::max(g, std::abs(a.centered[i] - b.centered[i]));
    g = std::max(g, std::abs(a.measure[i] - b.measure[i]));
  }
  return g;
}

/// Residual of the ergodic system stacked with the two normalizations, in
/// the unknowns z = (rho, u, mu).
inline Eigen::VectorXd ergodic_residual(const ModelSpec& s,
                                        const Eigen::VectorXd& z) {
  const int d = s.d;
  Eigen::VectorXd g(2 * d + 1);
  const double rho = z(0);
  Vec u(static_cast<std::size_t>(d)), mu(static_cast<std::size_t>(d));
  for (int x = 0; x < d; ++x) {
    u[static_cast<std::size_t>(x)] = z(1 + x);
    mu[static_cast<std::size_t>(x)] = z(1 + d + x);
  }
  for (int x = 0; x < d; ++x)
    g(x) = -rho + hamiltonian(s, x, u) + crowd(s, x, mu);
  for (int w = 1; w < d; ++w) {
    double bal = 0.0;
    for (int y = 0; y < d; ++y)
      bal += mu[static_cast<std::size_t>(y)] *
             selector(s, y, u).a[static_cast<std::size_t>(w)];
    g(d - 1 + w) = bal;
  }
  g(2 * d - 1) = component_sum(u);
  g(2 * d) = component_sum(mu) - 1.0;
  return g;
}

inline Eigen::MatrixXd ergodic_jacobian(const ModelSpec& s,
                                        const Eigen::VectorXd& z) {
  const int d = s.d;
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(2 * d + 1, 2 * d + 1);
  Vec u(static_cast<std::size_t>(d)), mu(static_cast<std::size_t>(d));
  for (int x = 0; x < d; ++x) {
    u[static_cast<std::size_t>(x)] = z(1 + x);
    mu[static_cast<std::size_t>(x)] = z(1 + d + x);
  }
  for (int x = 0; x < d; ++x) {
    j(x, 0) = -1.0;
    const auto row = selector(s, x, u);  // dH/du is the selector row
    for (int y = 0; y < d; ++y)
      j(x, 1 + y) = row.a[static_cast<std::size_t>(y)];
    j(x, 1 + d + x) += s.beta;
  }
  std::vector<std::vector<Vec>> jac(static_cast<std::size_t>(d));
  std::vector<RateVector> rows(static_cast<std::size_t>(d));
  for (int y = 0; y < d; ++y) {
    jac[static_cast<std::size_t>(y)] = selector_jacobian(s, y, u);
    rows[static_cast<std::size_t>(y)] = selector(s, y, u);
  }
  for (int w = 1; w < d; ++w) {
    for (int y = 0; y < d; ++y) {
      j(d - 1 + w, 1 + d + y) =
          rows[static_cast<std::size_t>(y)].a[static_cast<std::size_t>(w)];
      for (int zc = 0; zc < d; ++zc)
        j(d - 1 + w, 1 + zc) +=
            mu[static_cast<std::size_t>(y)] *
            jac[static_cast<std::size_t>(y)][static_cast<std::size_t>(w)]
               [static_cast<std::size_t>(zc)];
    }
  }
  for (int x = 0; x < d; ++x) {
    j(2 * d - 1, 1 + x) = 1.0;
    j(2 * d, 1 + d + x) = 1.0;
  }
  return j;
}

}  // namespace detail

/// Ergodic equilibrium by vanishing discount: walk the geometric ladder
/// r_n = 0.1 * 2^{-n}, extrapolate the triples (r u, centered u, measure)
/// in sqrt(r), then polish with a damped Newton solve of the algebraic
/// system. Falls back to the extrapolated point (flagged) if Newton fails.
inline StationarySolution solve_ergodic(const ModelSpec& spec, double tol,
                                        int max_rungs = 15) {
  spec.validate();
  if (!(tol > 0.0)) throw error("solve_ergodic: needs tol > 0");
  const auto d = static_cast<std::size_t>(spec.d);
  const double stat_tol = std::min(1e-11, tol);

  std::vector<detail::ErgodicTriple> triples;
  Vec ladder_r, ladder_gap;
  for (int n = 0; n < max_rungs; ++n) {
    const double rn = 0.1 * std::pow(2.0, -n);
    const auto sol = solve_stationary_discounted(spec, rn, stat_tol);
    triples.push_back(detail::make_triple(sol));
    ladder_r.push_back(rn);
    if (triples.size() >= 2) {
      const double gap =
          detail::triple_gap(triples.back(), triples[triples.size() - 2]);
      ladder_gap.push_back(gap);
      if (gap <= tol) break;
    }
  }

  // Fit each component against sqrt(r) over the last three rungs and read
  // off the intercept.
  const std::size_t m = triples.size();
  const std::size_t lo = m >= 3 ? m - 3 : 0;
  Vec sq;
  for (std::size_t k = lo; k < m; ++k) sq.push_back(std::sqrt(ladder_r[k]));
  const auto extrapolate = [&](auto pick) {
    Vec out(d);
    for (std::size_t x = 0; x < d; ++x) {
      Vec ys;
      for (std::size_t k = lo; k < m; ++k) ys.push_back(pick(triples[k], x));
      out[x] = sq.size() >= 2 ? fit_linear(sq, ys).intercept : ys.back();
    }
    return out;
  };
  const Vec rho_v = extrapolate(
      [](const detail::ErgodicTriple& t, std::size_t x) { return t.ru[x]; });
  Vec u0 = extrapolate([](const detail::ErgodicTriple& t, std::size_t x) {
    return t.centered[x];
  });
  Vec mu0 = extrapolate([](const detail::ErgodicTriple& t, std::size_t x) {
    return t.measure[x];
  });
  double rho0 = 0.0;
  for (double v : rho_v) rho0 += v / static_cast<double>(d);
  u0 = zero_mean(u0);
  const double mass = component_sum(mu0);
  for (auto& v : mu0) v /= mass;

  Eigen::VectorXd z(2 * spec.d + 1);
  z(0) = rho0;
  for (int x = 0; x < spec.d; ++x) {
    z(1 + x) = u0[static_cast<std::size_t>(x)];
    z(1 + spec.d + x) = mu0[static_cast<std::size_t>(x)];
  }

  bool polished = false;
  Eigen::VectorXd g = detail::ergodic_residual(spec, z);
  double gnorm = g.lpNorm<Eigen::Infinity>();
  const double target = std::min(tol, 1e-12);
  for (int iter = 0; iter < 40 && std::isfinite(gnorm); ++iter) {
    if (gnorm <= target) {
      polished = true;
      break;
    }
    const Eigen::MatrixXd jac = detail::ergodic_jacobian(spec, z);
    const Eigen::VectorXd dz = jac.partialPivLu().solve(-g);
    if (!dz.allFinite()) break;
    double step = 1.0;
    bool moved = false;
    for (int half = 0; half < 10; ++half) {
      Eigen::VectorXd z_try = z + step * dz;
      bool feasible = true;
      for (int x = 0; x < spec.d; ++x)
        if (z_try(1 + spec.d + x) <= 0.0) feasible = false;
      if (feasible) {
        const Eigen::VectorXd g_try = detail::ergodic_residual(spec, z_try);
        const double n_try = g_try.lpNorm<Eigen::Infinity>();
        if (n_try < gnorm * (1.0 - 0.25 * step) || n_try <= target) {
          z = z_try;
          g = g_try;
          gnorm = n_try;
          moved = true;
          break;
        }
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  if (gnorm <= target) polished = true;

  Vec value(d), weights(d);
  for (int x = 0; x < spec.d; ++x) {
    value[static_cast<std::size_t>(x)] = z(1 + x);
    weights[static_cast<std::size_t>(x)] = z(1 + spec.d + x);
  }
  if (!polished) {
    // Keep the extrapolated ladder point; the flag tells the caller.
    value = u0;
    weights = mu0;
    z(0) = rho0;
  }
  value = zero_mean(value);

  StationarySolution out{0.0, value, SimplexPoint(Vec(weights)), z(0)};
  out.iterations = static_cast<int>(m);
  out.polished = polished;
  out.ladder_r = ladder_r;
  out.ladder_gap = ladder_gap;
  for (int x = 0; x < spec.d; ++x) {
    const double hjb = -z(0) + hamiltonian(spec, x, value) +
                       detail::crowd(spec, x, out.measure.weights());
    out.residual = std::max(out.residual, std::abs(hjb));
  }
  const auto q = detail::selector_rates(spec, value);
  for (int y = 0; y < spec.d; ++y) {
    double bal = 0.0;
    for (int x = 0; x < spec.d; ++x) bal += out.measure[x] * q(x, y);
    out.residual = std::max(out.residual, std::abs(bal));
  }
  const auto pi = stationary_distribution(q);
  for (int x = 0; x < spec.d; ++x)
    out.measure_consistency =
        std::max(out.measure_consistency, std::abs(pi[x] - out.measure[x]));
  return out;
}

/// Simulation-facing view of a solved flow: selector rates held constant on
/// each grid cell at the midpoint value, which keeps the policy second-order
/// consistent with the flow it came from.
inline PolicyFlow policy_from_flow(const ModelSpec& spec,
                                   const FlowPair& flow) {
  std::vector<RateMatrix> cells;
  cells.reserve(flow.size() - 1);
  for (std::size_t k = 0; k + 1 < flow.size(); ++k) {
    Vec mid = flow.u[k];
    for (std::size_t i = 0; i < mid.size(); ++i)
      mid[i] = 0.5 * (mid[i] + flow.u[k + 1][i]);
    RateMatrix q(spec.d);
    for (int x = 0; x < spec.d; ++x) q.set_row(selector(spec, x, mid));
    cells.push_back(std::move(q));
  }
  return PolicyFlow(flow.t, std::move(cells),
                    (spec.d - 1) * spec.a_u);
}

inline DistributionFlow measure_flow(const FlowPair& flow) {
  return DistributionFlow(flow.t, flow.mu);
}

}  // namespace mfg
