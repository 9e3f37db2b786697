#pragma once

// The master field assembles the equilibrium value as a function on the
// probability simplex: U(x, eta) is the time-zero value of the discounted
// equilibrium started from eta, and its simplex gradient rows come from the
// linearized solver. The ergodic field is reached by walking the discount
// down a halving ladder of normalized fields until they stop moving. Lattice
// points are independent work items and are solved in parallel.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mfg/linearized.hpp"

namespace mfg {

/// Values and simplex-gradient rows of the equilibrium value on a lattice.
/// gradients[p][x][z] is the derivative of U(x, ·) at lattice point p along
/// e_z - e_0; the base column z = 0 is identically zero. rho is present
/// exactly when r = 0 and carries the ergodic value.
struct MasterField {
  ModelSpec model;
  SimplexLattice lattice;
  double r = 0.0;
  std::optional<double> rho;
  std::vector<Vec> values;
  std::vector<std::vector<Vec>> gradients;

  double residual_tol = 0.0;           // declared certification budget
  double max_interior_residual = 0.0;  // measured over interior points
  Vec ladder_r;                        // discount rungs walked (ergodic)
  Vec ladder_diff;                     // successive normalized-field gaps
  double rho_cross_check = 0.0;        // |rho - independently solved value|
};

struct MasterOptions {
  double inner_tol = 1e-9;  // per-point solver tolerance
  double r0 = 0.1;          // first rung of the discount ladder
  int max_rungs = 16;
  unsigned threads = 0;  // 0 = hardware concurrency
};

/// Equilibrium value at time zero of the discounted system started from eta.
inline ValueVector evaluate_Ur(const ModelSpec& spec, double r,
                               const SimplexPoint& eta, double tol = 1e-9) {
  return solve_discounted(spec, r, eta, tol).u.front();
}

/// Simplex gradient of evaluate_Ur along the pair directions out of the base
/// state; row x, column z holds the derivative along e_z - e_0.
inline std::vector<Vec> grad_Ur(const ModelSpec& spec, double r,
                                const SimplexPoint& eta, double tol = 1e-9) {
  return derivative_field(spec, r, eta, tol);
}

namespace detail {

struct MasterPoint {
  Vec u;
  std::vector<Vec> grad;
};

// One lattice point: a discounted solve plus one linearized solve per pair
// direction, sharing the solved flow as the center.
inline MasterPoint master_point(const ModelSpec& spec, double r,
                                const SimplexPoint& eta, double tol) {
  const auto flow = solve_discounted(spec, r, eta, tol);
  const auto d = static_cast<std::size_t>(spec.d);
  MasterPoint out;
  out.u = flow.u.front();
  out.grad.assign(d, Vec(d, 0.0));
  LinearOptions lo;
  lo.tol = std::min(1e-13, 0.1 * tol);
  for (int z = 1; z < spec.d; ++z) {
    const auto lin = solve_linearized(
        spec, r, flow, TangentVector::pair_direction(spec.d, 0, z), {}, {},
        flow.horizon(), flow.dt, lo);
    for (std::size_t x = 0; x < d; ++x)
      out.grad[x][static_cast<std::size_t>(z)] = lin.v.front()[x];
  }
  return out;
}

template <typename Body>
inline void parallel_for(std::size_t n, unsigned threads, Body&& body) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(
      std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

/// Defect of the master equation at lattice point p and state x: the
/// discounted form compares r U against the Hamiltonian, the measure drift
/// paired with the simplex gradient, and the crowd cost; the ergodic form
/// puts rho on the left instead. Pair derivatives are reconstructed from the
/// base row as D_{yz} = D_{1z} - D_{1y}.
inline double residual(const ModelSpec& spec, const MasterField& field,
                       std::size_t p, int x) {
  if (p >= field.lattice.size() || p >= field.values.size() ||
      p >= field.gradients.size())
    throw error("residual: lattice point not populated");
  if (x < 0 || x >= spec.d) throw error("residual: state out of range");
  if (field.r == 0.0 && !field.rho)
    throw error("residual: ergodic field lacks its value");
  const auto& eta = field.lattice[p];
  const Vec& u = field.values[p];
  const auto& grad = field.gradients[p];
  const auto xi = static_cast<std::size_t>(x);

  double drift = 0.0;
  for (int y = 0; y < spec.d; ++y) {
    if (eta[y] == 0.0) continue;
    const auto row = selector(spec, y, u);
    double inner = 0.0;
    for (int z = 0; z < spec.d; ++z) {
      if (z == y) continue;
      inner += (grad[xi][static_cast<std::size_t>(z)] -
                grad[xi][static_cast<std::size_t>(y)]) *
               row.a[static_cast<std::size_t>(z)];
    }
    drift += eta[y] * inner;
  }
  const double lhs = field.r > 0.0 ? field.r * u[xi] : *field.rho;
  return lhs - hamiltonian(spec, x, u) - drift - mean_field_cost(spec, x, eta);
}

namespace detail {

inline double certify_interior(const ModelSpec& spec, const MasterField& f) {
  double worst = 0.0;
  for (std::size_t p = 0; p < f.lattice.size(); ++p) {
    if (!f.lattice.is_interior(p)) continue;
    for (int x = 0; x < spec.d; ++x)
      worst = std::max(worst, std::abs(residual(spec, f, p, x)));
  }
  return worst;
}

}  // namespace detail

/// Populate the discounted master field on a lattice. The declared residual
/// budget combines the solver tolerance with the gradient accuracy target.
inline MasterField build_master_field(const ModelSpec& spec, double r,
                                      SimplexLattice lat,
                                      const MasterOptions& opt = {}) {
  spec.validate();
  if (lat.dim() != spec.d) throw error("build_master_field: lattice dimension");
  MasterField f{spec, std::move(lat)};
  f.r = r;
  f.residual_tol = 10.0 * (opt.inner_tol + 5e-3);
  const std::size_t np = f.lattice.size();
  f.values.assign(np, Vec());
  f.gradients.assign(np, std::vector<Vec>());
  detail::parallel_for(np, opt.threads, [&](std::size_t p) {
    auto mp = detail::master_point(spec, r, f.lattice[p], opt.inner_tol);
    f.values[p] = std::move(mp.u);
    f.gradients[p] = std::move(mp.grad);
  });
  f.max_interior_residual = detail::certify_interior(spec, f);
  return f;
}

/// Walk the discount ladder r0, r0/2, ... computing normalized fields
/// U_r - U_r(base state, stationary measure of r) and their gradients until
/// two successive rungs agree within tol in the sup norm. The ergodic value
/// is the intercept of a square-root-rate fit through the last rungs and is
/// cross-checked against the algebraic ergodic solve.
inline MasterField solve_ergodic_master(const ModelSpec& spec,
                                        SimplexLattice lat, double tol,
                                        const MasterOptions& opt = {}) {
  spec.validate();
  if (lat.dim() != spec.d)
    throw error("solve_ergodic_master: lattice dimension");
  if (lat.subdivisions() < 4)
    throw error("solve_ergodic_master: lattice too coarse (need n >= 4)");
  if (!(tol > 0.0)) throw error("solve_ergodic_master: needs tol > 0");

  MasterField f{spec, std::move(lat)};
  f.r = 0.0;
  f.residual_tol = 10.0 * tol;
  const std::size_t np = f.lattice.size();
  const double inner = std::min(opt.inner_tol, 1e-2 * tol);

  std::vector<Vec> prev_vals;
  std::vector<std::vector<Vec>> prev_grads;
  Vec anchors;  // r_k * U_{r_k}(base state, stationary measure)
  bool settled = false;
  for (int k = 0; k <= opt.max_rungs; ++k) {
    const double rk = opt.r0 * std::pow(2.0, -k);
    const auto stat = solve_stationary_discounted(spec, rk, 1e-11);
    const double ck = stat.value.front();
    anchors.push_back(rk * ck);
    f.ladder_r.push_back(rk);

    std::vector<Vec> vals(np);
    std::vector<std::vector<Vec>> grads(np);
    detail::parallel_for(np, opt.threads, [&](std::size_t p) {
      auto mp = detail::master_point(spec, rk, f.lattice[p], inner);
      for (double& v : mp.u) v -= ck;
      vals[p] = std::move(mp.u);
      grads[p] = std::move(mp.grad);
    });

    if (k > 0) {
      double diff = 0.0;
      for (std::size_t p = 0; p < np; ++p) {
        for (int x = 0; x < spec.d; ++x) {
          const auto xi = static_cast<std::size_t>(x);
          diff = std::max(diff,
                          std::abs(vals[p][xi] - prev_vals[p][xi]));
          for (int z = 0; z < spec.d; ++z)
            diff = std::max(
                diff, std::abs(grads[p][xi][static_cast<std::size_t>(z)] -
                               prev_grads[p][xi][static_cast<std::size_t>(z)]));
        }
      }
      f.ladder_diff.push_back(diff);
      if (diff <= tol) {
        prev_vals = std::move(vals);
        prev_grads = std::move(grads);
        settled = true;
        break;
      }
    }
    prev_vals = std::move(vals);
    prev_grads = std::move(grads);
  }
  if (!settled) {
    std::string msg =
        "solve_ergodic_master: ladder exhausted without settling; diffs:";
    char buf[32];
    for (double g : f.ladder_diff) {
      std::snprintf(buf, sizeof buf, " %.3e", g);
      msg += buf;
    }
    throw error(msg);
  }
  f.values = std::move(prev_vals);
  f.gradients = std::move(prev_grads);

  // Square-root-rate extrapolation of the anchor sequence to r = 0.
  const std::size_t nr = f.ladder_r.size();
  const std::size_t tail = std::min<std::size_t>(3, nr);
  Vec xs, ys;
  for (std::size_t i = nr - tail; i < nr; ++i) {
    xs.push_back(std::sqrt(f.ladder_r[i]));
    ys.push_back(anchors[i]);
  }
  double rho;
  if (tail >= 2) {
    rho = fit_linear(xs, ys).intercept;
  } else {
    rho = anchors.back();
  }
  f.rho = rho;

  const auto erg = solve_ergodic(spec, std::min(tol, 1e-10));
  f.rho_cross_check = std::abs(rho - erg.ergodic_value.value());
  f.max_interior_residual = detail::certify_interior(spec, f);
  return f;
}

/// Worst pairing sum_x (U(x,eta) - U(x,eta')) (eta_x - eta'_x) over random
/// lattice pairs; nonnegative when the field is monotone.
inline double monotonicity_check(const MasterField& field, int trials,
                                 std::uint64_t seed = 0x6d6f6e6f) {
  if (field.values.size() != field.lattice.size())
    throw error("monotonicity_check: field not populated");
  if (trials <= 0) return 0.0;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, field.lattice.size() - 1);
  const int d = field.lattice.dim();
  double worst = std::numeric_limits<double>::infinity();
  for (int t = 0; t < trials; ++t) {
    const std::size_t i = pick(rng), j = pick(rng);
    const auto& ei = field.lattice[i];
    const auto& ej = field.lattice[j];
    double pairing = 0.0;
    for (int x = 0; x < d; ++x) {
      const auto xi = static_cast<std::size_t>(x);
      pairing += (field.values[i][xi] - field.values[j][xi]) * (ei[x] - ej[x]);
    }
    worst = std::min(worst, pairing);
  }
  return worst;
}

/// Steepest gradient variation between neighboring lattice points, measured
/// as the worst over states of |grad row difference|_2 / |eta - eta'|_2.
/// Neighbors differ by a single mass transfer of one lattice step.
inline double gradient_lipschitz(const MasterField& field) {
  if (field.gradients.size() != field.lattice.size())
    throw error("gradient_lipschitz: field not populated");
  const auto& lat = field.lattice;
  const int d = lat.dim();
  double worst = 0.0;
  for (std::size_t i = 0; i < lat.size(); ++i) {
    for (std::size_t j = i + 1; j < lat.size(); ++j) {
      int moved = 0;
      for (int c = 0; c < d; ++c)
        moved += std::abs(lat.coords(i)[static_cast<std::size_t>(c)] -
                          lat.coords(j)[static_cast<std::size_t>(c)]);
      if (moved != 2) continue;
      const double sep = std::sqrt(2.0) * lat.step();
      for (int x = 0; x < d; ++x) {
        const auto xi = static_cast<std::size_t>(x);
        double acc = 0.0;
        for (int z = 0; z < d; ++z) {
          const auto zi = static_cast<std::size_t>(z);
          const double g = field.gradients[i][xi][zi] -
                           field.gradients[j][xi][zi];
          acc += g * g;
        }
        worst = std::max(worst, std::sqrt(acc) / sep);
      }
    }
  }
  return worst;
}

struct MasterSummary {
  double r = 0.0;
  std::optional<double> rho;
  double max_interior_residual = 0.0;
  double monotonicity_worst = 0.0;
  double gradient_lipschitz = 0.0;
  double sup_value = 0.0;
  double sup_gradient = 0.0;
};

inline MasterSummary master_summary(const MasterField& field, int trials = 200,
                                    std::uint64_t seed = 0x6d6f6e6f) {
  MasterSummary s;
  s.r = field.r;
  s.rho = field.rho;
  s.max_interior_residual = field.max_interior_residual;
  s.monotonicity_worst = monotonicity_check(field, trials, seed);
  s.gradient_lipschitz = gradient_lipschitz(field);
  for (const auto& u : field.values) s.sup_value = std::max(s.sup_value, sup_norm(u));
  for (const auto& g : field.gradients)
    for (const auto& row : g)
      s.sup_gradient = std::max(s.sup_gradient, sup_norm(row));
  return s;
}

/// One row per (lattice point, state): eta coordinates, the 1-based state,
/// the value, the gradient row, and the pointwise equation defect.
inline void write_master_csv(const MasterField& field, std::ostream& os) {
  const int d = field.lattice.dim();
  for (int i = 1; i <= d; ++i) os << "eta_" << i << ",";
  os << "x,U";
  for (int i = 1; i <= d; ++i) os << ",dU_" << i;
  os << ",residual\n";
  char buf[32];
  const auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf;
  };
  for (std::size_t p = 0; p < field.lattice.size(); ++p) {
    const auto& eta = field.lattice[p];
    for (int x = 0; x < d; ++x) {
      const auto xi = static_cast<std::size_t>(x);
      for (int i = 0; i < d; ++i) {
        put(eta[i]);
        os << ",";
      }
      os << (x + 1) << ",";
      put(field.values[p][xi]);
      for (int z = 0; z < d; ++z) {
        os << ",";
        put(field.gradients[p][xi][static_cast<std::size_t>(z)]);
      }
      os << ",";
      put(residual(field.model, field, p, x));
      os << "\n";
    }
  }
}

}  // namespace mfg
