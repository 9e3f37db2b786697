#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <random>

#include "mfg/chain.hpp"

using namespace mfg;

namespace {

ModelSpec base_spec(int d = 2) {
  ModelSpec s;
  s.d = d;
  s.a_l = 0.1;
  s.a_u = 2.0;
  s.kappa = 1.0;
  s.c = 1.0;
  s.beta = 1.0;
  return s;
}

RateMatrix two_state(double q01, double q10) {
  auto q = RateMatrix(2);
  q.set_offdiagonal(0, 1, q01);
  q.set_offdiagonal(1, 0, q10);
  return q;
}

}  // namespace

TEST_CASE("stationary distribution of pinned generators") {
  // Two-state balance: pi_0 q01 = pi_1 q10 gives (2/3, 1/3).
  auto pi = stationary_distribution(two_state(1.0, 2.0));
  CHECK(pi[0] == Catch::Approx(2.0 / 3.0).margin(1e-13));
  CHECK(pi[1] == Catch::Approx(1.0 / 3.0).margin(1e-13));

  pi = stationary_distribution(two_state(0.7, 0.7));
  CHECK(pi[0] == Catch::Approx(0.5).margin(1e-13));

  // Cyclic equal rates: doubly stochastic generator, uniform law.
  auto cyc = RateMatrix(3);
  cyc.set_offdiagonal(0, 1, 0.9);
  cyc.set_offdiagonal(1, 2, 0.9);
  cyc.set_offdiagonal(2, 0, 0.9);
  CHECK_THROWS_AS(stationary_distribution(cyc), error);  // zero rates present
  auto cyc_full = RateMatrix::from_offdiagonal(3, [](int x, int y) {
    return (y - x + 3) % 3 == 1 ? 0.9 : 1e-9;
  });
  pi = stationary_distribution(cyc_full);
  CHECK(pi[0] == Catch::Approx(1.0 / 3.0).margin(1e-6));
  CHECK(pi[1] == Catch::Approx(1.0 / 3.0).margin(1e-6));
}

TEST_CASE("stationary mass never drops below the flow-balance floor") {
  std::mt19937_64 rng(901);
  const double a_l = 0.1, a_u = 2.0;
  std::uniform_real_distribution<double> rate(a_l, a_u);
  for (int d : {2, 3, 5}) {
    const double floor = a_l / ((d - 1) * a_u + a_l);
    for (int trial = 0; trial < 30; ++trial) {
      auto q = RateMatrix::from_offdiagonal(
          d, [&](int, int) { return rate(rng); });
      const auto pi = stationary_distribution(q);
      for (int x = 0; x < d; ++x) CHECK(pi[x] >= floor - 1e-12);
    }
  }
}

TEST_CASE("decay diagnostic recovers known spectral gaps") {
  auto sym = decay_diagnostic(two_state(0.7, 0.7));
  CHECK(sym.rate == Catch::Approx(1.4).margin(1e-10));
  CHECK(sym.prefactor >= 1.0);

  // Cyclic d=3: subdominant eigenvalue q(exp(2 pi i/3) - 1), real part -3q/2.
  auto cyc = RateMatrix(3);
  cyc.set_offdiagonal(0, 1, 0.9);
  cyc.set_offdiagonal(1, 2, 0.9);
  cyc.set_offdiagonal(2, 0, 0.9);
  CHECK(decay_diagnostic(cyc).rate == Catch::Approx(1.35).margin(1e-10));

  // Eigenvalue homogeneity: doubling every rate doubles the decay rate.
  auto q = two_state(0.4, 1.1);
  auto q2 = two_state(0.8, 2.2);
  CHECK(decay_diagnostic(q2).rate ==
        Catch::Approx(2.0 * decay_diagnostic(q).rate).margin(1e-10));
}

TEST_CASE("simulated paths are well formed and seed-stable") {
  PolicyFlow policy(two_state(1.0, 1.0));
  const auto paths = simulate_paths(policy, 0, 5.0, 50, 42);
  REQUIRE(paths.size() == 50);
  for (const auto& p : paths) {
    REQUIRE(!p.times.empty());
    CHECK(p.times.front() == 0.0);
    CHECK(p.states.front() == 0);
    CHECK(p.horizon == 5.0);
    for (std::size_t k = 0; k + 1 < p.times.size(); ++k) {
      CHECK(p.times[k] < p.times[k + 1]);
      CHECK(p.states[k] != p.states[k + 1]);
    }
    CHECK(p.times.back() < 5.0);
    for (int s : p.states) {
      CHECK(s >= 0);
      CHECK(s < 2);
    }
  }

  // Same seed reproduces bitwise; a different seed does not.
  const auto again = simulate_paths(policy, 0, 5.0, 50, 42);
  bool identical = true;
  for (std::size_t i = 0; i < paths.size(); ++i)
    if (paths[i].times != again[i].times ||
        paths[i].states != again[i].states)
      identical = false;
  CHECK(identical);
  const auto other = simulate_paths(policy, 0, 5.0, 50, 43);
  bool all_same = true;
  for (std::size_t i = 0; i < paths.size(); ++i)
    if (paths[i].times != other[i].times) all_same = false;
  CHECK_FALSE(all_same);

  // Path i depends on (seed, i) only, not on how many paths were asked for.
  const auto wide = simulate_paths(policy, 0, 5.0, 100, 42);
  CHECK(wide[17].times == paths[17].times);
  CHECK(wide[17].states == paths[17].states);

  CHECK_THROWS_AS(simulate_paths(policy, 0, -1.0, 10, 1), error);
  CHECK_THROWS_AS(simulate_paths(policy, 0, 1.0, 0, 1), error);
  CHECK_THROWS_AS(simulate_paths(policy, 5, 1.0, 10, 1), error);
}

TEST_CASE("long-run marginals match stationarity within binomial error") {
  PolicyFlow policy(two_state(1.0, 1.0));
  const int n = 10000;
  const auto paths = simulate_paths(policy, 0, 20.0, n, 7001);
  int at_zero = 0;
  double jumps = 0.0;
  for (const auto& p : paths) {
    if (p.state_at(20.0 - 1e-9) == 0) ++at_zero;
    jumps += static_cast<double>(p.jump_count());
  }
  const double freq = static_cast<double>(at_zero) / n;
  CHECK(std::abs(freq - 0.5) < 0.02);

  // Symmetric unit rates jump as a Poisson(T) clock: mean count T = 20.
  const double mean_jumps = jumps / n;
  CHECK(std::abs(mean_jumps - 20.0) < 3.0 * std::sqrt(20.0 / n));
}

TEST_CASE("empirical marginals solve the forward equation") {
  // Asymmetric rates 1 and 2 from the vertex: p_0(t) = 2/3 + (1/3) e^{-3t}.
  PolicyFlow policy(two_state(1.0, 2.0));
  const int n = 20000;
  const auto paths = simulate_paths(policy, 0, 3.0, n, 5150);
  for (double t : {0.3, 1.0, 2.5}) {
    const double p_exact = 2.0 / 3.0 + std::exp(-3.0 * t) / 3.0;
    int hits = 0;
    for (const auto& p : paths)
      if (p.state_at(t) == 0) ++hits;
    const double freq = static_cast<double>(hits) / n;
    const double se = std::sqrt(p_exact * (1.0 - p_exact) / n);
    CHECK(std::abs(freq - p_exact) < 3.0 * se);
  }
}

TEST_CASE("time-dependent policies switch cells mid-flight") {
  // Pull toward state 1 on [0,1), then toward state 0 on [1,2].
  std::vector<RateMatrix> cells = {two_state(2.0, 0.1), two_state(0.1, 2.0)};
  PolicyFlow policy(Vec{0.0, 1.0, 2.0}, std::move(cells));
  CHECK(policy.uniformization_rate() == 2.0);
  CHECK(policy.at(0.5)(0, 1) == 2.0);
  CHECK(policy.at(1.5)(0, 1) == 0.1);
  CHECK(policy.at(5.0)(0, 1) == 0.1);  // clamped past the grid

  const int n = 20000;
  const auto paths = simulate_paths(policy, 0, 2.0, n, 31337);
  // Stage closed forms: relax to pi_0 = 0.1/2.1 at unit rate 2.1, then to
  // pi_0 = 2.0/2.1 over the second leg.
  const double pi1 = 0.1 / 2.1, pi2 = 2.0 / 2.1, e = std::exp(-2.1);
  const double p_mid = pi1 + (1.0 - pi1) * e;
  const double p_end = pi2 + (p_mid - pi2) * e;
  for (auto [t, p_exact] : {std::pair{1.0, p_mid}, std::pair{2.0, p_end}}) {
    int hits = 0;
    for (const auto& p : paths)
      if (p.state_at(t - 1e-9) == 0) ++hits;
    const double freq = static_cast<double>(hits) / n;
    const double se = std::sqrt(p_exact * (1.0 - p_exact) / n);
    CHECK(std::abs(freq - p_exact) < 3.0 * se);
  }
}

TEST_CASE("cost estimate handles degenerate integrands exactly") {
  auto s = base_spec();
  s.beta = 0.0;
  // Rates pinned at kappa make the control cost vanish identically.
  PolicyFlow policy(two_state(1.0, 1.0));
  DistributionFlow mu(SimplexPoint::uniform(2));
  const auto paths = simulate_paths(policy, 0, 40.0, 50, 99);

  auto zero = estimate_cost(s, policy, mu, 0.5, paths);
  CHECK(zero.value == Catch::Approx(0.0).margin(1e-15));
  CHECK(zero.standard_error == Catch::Approx(0.0).margin(1e-15));

  // Constant total cost l: discounted integral l/r, ergodic average l.
  const double ell = 0.8;
  s.g = {ell, ell};
  auto disc = estimate_cost(s, policy, mu, 1.0, paths);
  CHECK(disc.value == Catch::Approx(ell / 1.0).margin(1e-12));
  CHECK(disc.standard_error < 1e-12);
  auto erg = estimate_cost(s, policy, mu, 0.0, paths);
  CHECK(erg.value == Catch::Approx(ell).margin(1e-12));
  CHECK(erg.standard_error < 1e-12);

  CHECK_THROWS_AS(estimate_cost(s, policy, mu, -0.1, paths), error);
  CHECK_THROWS_AS(estimate_cost(s, policy, mu, 0.5, {}), error);
}

TEST_CASE("discounted cost matches the resolvent identity") {
  // Stationary policy from the selector at a fixed value vector; the exact
  // expected cost solves (rI - Q) u = running + crowd cost, a plain linear
  // system that is independent of the simulator.
  auto s = base_spec(3);
  s.beta = 0.8;
  s.g = {0.3, 0.0, -0.2};
  const ValueVector p = {0.0, 0.35, -0.25};
  RateMatrix q(3);
  for (int x = 0; x < 3; ++x) q.set_row(selector(s, x, p));
  const auto pi = stationary_distribution(q);
  PolicyFlow policy(q);
  DistributionFlow mu(pi);

  const double r = 0.5;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, 3);
  Eigen::VectorXd ell(3);
  for (int x = 0; x < 3; ++x) {
    RateVector row{x, Vec(3)};
    for (int y = 0; y < 3; ++y) {
      row.a[static_cast<std::size_t>(y)] = q(x, y);
      a(x, y) = (x == y ? r : 0.0) - q(x, y);
    }
    ell(x) = running_cost(s, row) + s.beta * pi[x] + s.g_at(x);
  }
  const Eigen::VectorXd u = a.colPivHouseholderQr().solve(ell);

  for (int x0 = 0; x0 < 3; ++x0) {
    const auto paths =
        simulate_paths(policy, x0, 40.0, 3000, 777 + static_cast<unsigned>(x0));
    const auto est = estimate_cost(s, policy, mu, r, paths);
    CHECK(std::abs(est.value - u(x0)) < 3.5 * est.standard_error);
  }

  // Ergodic estimator: the time average tends to the stationary mean cost.
  double mean_ell = 0.0;
  for (int x = 0; x < 3; ++x) mean_ell += pi[x] * ell(x);
  const auto paths = simulate_paths(policy, 0, 200.0, 500, 2024);
  const auto erg = estimate_cost(s, policy, mu, 0.0, paths);
  CHECK(std::abs(erg.value - mean_ell) < 3.5 * erg.standard_error);
}
