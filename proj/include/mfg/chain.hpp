#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

#include "mfg/model.hpp"

namespace mfg {

/// One realized trajectory of the jump process on [0, horizon]. Entry k says
/// the chain sits in states[k] from times[k] until times[k+1] (or horizon).
/// times[0] == 0 and times are strictly increasing.
struct JumpPath {
  Vec times;
  std::vector<int> states;
  double horizon = 0.0;

  int state_at(double t) const {
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    const auto k = static_cast<std::size_t>(it - times.begin());
    return states[k == 0 ? 0 : k - 1];
  }
  std::size_t jump_count() const { return times.size() - 1; }
};

/// Time-dependent transition rates: piecewise constant on a grid, or a single
/// stationary matrix. Evaluation clamps to the first/last cell outside the
/// grid, so stationary policies are the one-cell special case.
class PolicyFlow {
 public:
  explicit PolicyFlow(RateMatrix stationary, double rate_floor = 0.0)
      : cells_{std::move(stationary)} {
    lambda_ = std::max(cells_[0].max_exit_rate(), rate_floor);
  }

  PolicyFlow(Vec grid, std::vector<RateMatrix> cells, double rate_floor = 0.0)
      : grid_(std::move(grid)), cells_(std::move(cells)) {
    if (cells_.empty() || grid_.size() != cells_.size() + 1)
      throw error("PolicyFlow: need one cell per grid interval");
    for (std::size_t k = 0; k + 1 < grid_.size(); ++k)
      if (!(grid_[k] < grid_[k + 1]))
        throw error("PolicyFlow: grid must increase strictly");
    lambda_ = rate_floor;
    for (const auto& q : cells_)
      lambda_ = std::max(lambda_, q.max_exit_rate());
  }

  const RateMatrix& at(double t) const { return cells_[cell_index(t)]; }

  /// Breakpoints where the rates may change (empty for stationary flows).
  const Vec& grid() const { return grid_; }

  /// Upper bound on every exit rate, used as the uniformization intensity.
  double uniformization_rate() const { return lambda_; }

  int dim() const { return cells_[0].dim(); }

 private:
  std::size_t cell_index(double t) const {
    if (grid_.empty()) return 0;
    const auto it = std::upper_bound(grid_.begin(), grid_.end(), t);
    const auto k = static_cast<std::size_t>(it - grid_.begin());
    if (k == 0) return 0;
    return std::min(k - 1, cells_.size() - 1);
  }

  Vec grid_;
  std::vector<RateMatrix> cells_;
  double lambda_ = 0.0;
};

/// Piecewise-linear flow of distributions t -> mu(t), clamped outside its
/// grid. A single node makes it constant.
class DistributionFlow {
 public:
  explicit DistributionFlow(SimplexPoint constant)
      : grid_{0.0}, nodes_{std::move(constant)} {}

  DistributionFlow(Vec grid, std::vector<SimplexPoint> nodes)
      : grid_(std::move(grid)), nodes_(std::move(nodes)) {
    if (nodes_.empty() || grid_.size() != nodes_.size())
      throw error("DistributionFlow: need one node per grid time");
    for (std::size_t k = 0; k + 1 < grid_.size(); ++k)
      if (!(grid_[k] < grid_[k + 1]))
        throw error("DistributionFlow: grid must increase strictly");
  }

  double component(double t, int x) const {
    if (nodes_.size() == 1 || t <= grid_.front()) return nodes_.front()[x];
    if (t >= grid_.back()) return nodes_.back()[x];
    const auto it = std::upper_bound(grid_.begin(), grid_.end(), t);
    const auto k = static_cast<std::size_t>(it - grid_.begin());
    const double w = (t - grid_[k - 1]) / (grid_[k] - grid_[k - 1]);
    return (1.0 - w) * nodes_[k - 1][x] + w * nodes_[k][x];
  }

  const Vec& grid() const { return grid_; }
  int dim() const { return nodes_[0].dim(); }

 private:
  Vec grid_;
  std::vector<SimplexPoint> nodes_;
};

/// Unique invariant distribution of an irreducible rate matrix, from a dense
/// solve of pi Q = 0 with one balance row replaced by the normalization.
inline SimplexPoint stationary_distribution(const RateMatrix& q) {
  const int d = q.dim();
  if (!(q.min_offdiagonal() > 0.0))
    throw error("stationary_distribution: rates must be strictly positive");
  Eigen::MatrixXd a(d, d);
  for (int y = 0; y < d; ++y)
    for (int x = 0; x < d; ++x) a(y, x) = q(x, y);  // transpose: rows of Q^T
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d);
  a.row(d - 1).setOnes();
  rhs(d - 1) = 1.0;
  Eigen::VectorXd pi = a.colPivHouseholderQr().solve(rhs);
  Vec w(static_cast<std::size_t>(d));
  for (int x = 0; x < d; ++x) w[static_cast<std::size_t>(x)] = pi(x);
  // Certify the balance residual before handing the point out.
  for (int y = 0; y < d; ++y) {
    double r = 0.0;
    for (int x = 0; x < d; ++x) r += w[static_cast<std::size_t>(x)] * q(x, y);
    if (std::abs(r) > 1e-12)
      throw error("stationary_distribution: balance residual too large");
  }
  return SimplexPoint(std::move(w));
}

/// Spectral estimate of how fast marginals forget the initial state:
/// `rate` is the negated real part of the subdominant eigenvalue of Q and
/// `prefactor` the conditioning of its eigenbasis. A horizon heuristic only.
struct DecayDiagnostic {
  double rate = 0.0;
  double prefactor = 1.0;
};

inline DecayDiagnostic decay_diagnostic(const RateMatrix& q) {
  const int d = q.dim();
  Eigen::MatrixXd a(d, d);
  for (int x = 0; x < d; ++x)
    for (int y = 0; y < d; ++y) a(x, y) = q(x, y);
  Eigen::EigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success)
    throw error("decay_diagnostic: eigensolver failed");
  const auto& lam = es.eigenvalues();
  int zero_idx = 0;
  for (int i = 1; i < d; ++i)
    if (std::abs(lam(i)) < std::abs(lam(zero_idx))) zero_idx = i;
  DecayDiagnostic out;
  double worst = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < d; ++i) {
    if (i == zero_idx) continue;
    worst = std::max(worst, lam(i).real());
  }
  out.rate = -worst;
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(es.eigenvectors());
  const double smin = svd.singularValues()(d - 1);
  const double smax = svd.singularValues()(0);
  out.prefactor = smin > 0.0 ? std::min(smax / smin, 1e9) : 1e9;
  return out;
}

namespace detail {

/// Stateless stream split: one well-mixed 64-bit seed per path index, so path
/// k is the same no matter how many paths were requested.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Draw n independent trajectories started at x0 by uniformization: Poisson
/// events at the policy's rate bound, each a real jump with probability
/// q(x,y)/Lambda. Exact for piecewise-constant rates; deterministic per seed.
inline std::vector<JumpPath> simulate_paths(const PolicyFlow& policy, int x0,
                                            double T, int n,
                                            std::uint64_t seed) {
  if (!(T > 0.0)) throw error("simulate_paths: horizon must be positive");
  if (n < 1) throw error("simulate_paths: need at least one path");
  if (x0 < 0 || x0 >= policy.dim())
    throw error("simulate_paths: start state out of range");
  const double lambda = policy.uniformization_rate();
  std::vector<JumpPath> paths(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& path = paths[static_cast<std::size_t>(i)];
    path.horizon = T;
    path.times = {0.0};
    path.states = {x0};
    if (lambda <= 0.0) continue;  // no motion possible
    std::mt19937_64 rng(detail::split_seed(seed, static_cast<std::uint64_t>(i)));
    std::exponential_distribution<double> holding(lambda);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double t = 0.0;
    int x = x0;
    while (true) {
      t += holding(rng);
      if (t >= T) break;
      const RateMatrix& q = policy.at(t);
      const double u = unif(rng) * lambda;
      double acc = 0.0;
      int next = x;
      for (int y = 0; y < policy.dim(); ++y) {
        if (y == x) continue;
        acc += q(x, y);
        if (u < acc) {
          next = y;
          break;
        }
      }
      if (next != x) {  // otherwise a virtual event: state unchanged
        x = next;
        path.times.push_back(t);
        path.states.push_back(x);
      }
    }
  }
  return paths;
}

struct CostEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  int paths = 0;
};

namespace detail {

/// Exact integral of e^{-rt} (A + B (t - t1)) over [t1, t2].
inline double discounted_cell(double r, double t1, double t2, double a,
                              double b) {
  const double h = t2 - t1;
  if (r == 0.0) return a * h + 0.5 * b * h * h;
  const double e1 = std::exp(-r * t1);
  const double e2 = std::exp(-r * t2);
  const double i0 = (e1 - e2) / r;
  const double i1 = (-h * e2) / r + i0 / r;
  return a * i0 + b * i1;
}

}  // namespace detail

/// Monte Carlo cost along simulated paths: discounted total for r > 0, time
/// average over [0, T] for r = 0. The integrand is piecewise linear in t
/// between breakpoints (jumps, policy cells, flow nodes), so each cell is
/// integrated in closed form rather than quadratured.
inline CostEstimate estimate_cost(const ModelSpec& spec,
                                  const PolicyFlow& policy,
                                  const DistributionFlow& mu, double r,
                                  const std::vector<JumpPath>& paths) {
  spec.validate();
  if (r < 0.0) throw error("estimate_cost: discount must be nonnegative");
  if (paths.empty()) throw error("estimate_cost: no paths given");
  Vec totals;
  totals.reserve(paths.size());
  for (const auto& path : paths) {
    const double T = path.horizon;
    Vec cuts = path.times;
    for (double t : policy.grid())
      if (t > 0.0 && t < T) cuts.push_back(t);
    for (double t : mu.grid())
      if (t > 0.0 && t < T) cuts.push_back(t);
    cuts.push_back(T);
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    double total = 0.0;
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
      const double t1 = cuts[k], t2 = cuts[k + 1];
      const double tm = 0.5 * (t1 + t2);
      const int x = path.state_at(tm);
      const RateMatrix& q = policy.at(tm);
      RateVector row{x, Vec(static_cast<std::size_t>(spec.d))};
      for (int y = 0; y < spec.d; ++y)
        row.a[static_cast<std::size_t>(y)] = q(x, y);
      const double f = running_cost(spec, row);
      const double m1 = mu.component(t1, x);
      const double m2 = mu.component(t2, x);
      const double a = f + spec.beta * m1 + spec.g_at(x);
      const double b = spec.beta * (m2 - m1) / (t2 - t1);
      total += detail::discounted_cell(r, t1, t2, a, b);
    }
    if (r == 0.0) total /= T;
    totals.push_back(total);
  }
  CostEstimate out;
  out.paths = static_cast<int>(paths.size());
  double sum = 0.0;
  for (double t : totals) sum += t;
  out.value = sum / out.paths;
  // Two-pass variance: the centered form survives when all totals agree to
  // rounding, where sumsq - sum^2/n would manufacture noise.
  double ss = 0.0;
  for (double t : totals) ss += (t - out.value) * (t - out.value);
  const double var = out.paths > 1 ? ss / (out.paths - 1) : 0.0;
  out.standard_error = std::sqrt(var / out.paths);
  return out;
}

}  // namespace mfg
