#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mfg/model.hpp"

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

ValueVector random_values(std::mt19937_64& rng, int d, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  ValueVector p(static_cast<std::size_t>(d));
  for (auto& v : p) v = dist(rng);
  return p;
}

// True when every coordinate of the minimizer stays at least margin away
// from the rate box boundary, so local formulas are safe to differentiate.
bool well_inside_box(const ModelSpec& s, int x, const ValueVector& p,
                     double margin) {
  for (int y = 0; y < s.d; ++y) {
    if (y == x) continue;
    const double raw = s.kappa - (p[static_cast<std::size_t>(y)] -
                                  p[static_cast<std::size_t>(x)]) /
                                     s.c;
    if (raw < s.a_l + margin || raw > s.a_u - margin) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("spec validation rejects bad parameters") {
  CHECK_NOTHROW(base_spec().validate());
  auto bad = base_spec();
  bad.d = 1;
  CHECK_THROWS_AS(bad.validate(), error);
  bad = base_spec();
  bad.a_l = 0.0;
  CHECK_THROWS_AS(bad.validate(), error);
  bad = base_spec();
  bad.kappa = 0.05;  // below a_l
  CHECK_THROWS_AS(bad.validate(), error);
  bad = base_spec();
  bad.kappa = 2.0;  // not strictly below a_u
  CHECK_THROWS_AS(bad.validate(), error);
  bad = base_spec();
  bad.c = 0.0;
  CHECK_THROWS_AS(bad.validate(), error);
  bad = base_spec();
  bad.beta = -0.5;
  CHECK_THROWS_AS(bad.validate(), error);
  bad = base_spec();
  bad.g = {1.0, 2.0, 3.0};  // wrong length for d = 2
  CHECK_THROWS_AS(bad.validate(), error);
}

TEST_CASE("hamiltonian closed form at pinned points") {
  const auto s = base_spec();
  // Zero contrast: the minimizer is the free rate kappa, total cost zero.
  CHECK(hamiltonian(s, 0, {0.0, 0.0}) == Catch::Approx(0.0).margin(1e-15));
  // Contrast 0.5: a* = 0.5, H = 0.5*0.5 + 0.5*0.25 = 0.375.
  CHECK(hamiltonian(s, 0, {0.0, 0.5}) ==
        Catch::Approx(0.375).margin(1e-15));
  // Contrast 2 drives the rate to the floor: H = 0.1*2 + 0.5*0.81 = 0.605.
  CHECK(hamiltonian(s, 0, {0.0, 2.0}) ==
        Catch::Approx(0.605).margin(1e-15));
}

TEST_CASE("selector closed form at pinned points") {
  const auto s = base_spec();
  auto r = selector(s, 0, {0.0, 0.0});
  CHECK(r.anchor == 0);
  CHECK(r.a[1] == Catch::Approx(1.0));
  CHECK(r.a[0] == Catch::Approx(-1.0));
  r = selector(s, 0, {0.0, 0.5});
  CHECK(r.a[1] == Catch::Approx(0.5));
  CHECK(r.a[0] == Catch::Approx(-0.5));
  r = selector(s, 0, {0.0, 2.0});
  CHECK(r.a[1] == Catch::Approx(0.1));
  CHECK(r.a[0] == Catch::Approx(-0.1));
  CHECK(clamp_count(s, 0, {0.0, 2.0}) == 1);
  CHECK(clamp_count(s, 0, {0.0, 0.5}) == 0);
}

TEST_CASE("hamiltonian and selector ignore constant shifts") {
  auto s = base_spec(4);
  s.c = 0.7;
  std::mt19937_64 rng(811);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_values(rng, s.d, -2.0, 2.0);
    std::uniform_real_distribution<double> shift_dist(-5.0, 5.0);
    const double shift = shift_dist(rng);
    ValueVector q = p;
    for (auto& v : q) v += shift;
    for (int x = 0; x < s.d; ++x) {
      CHECK(hamiltonian(s, x, p) ==
            Catch::Approx(hamiltonian(s, x, q)).margin(1e-12));
      const auto a = selector(s, x, p);
      const auto b = selector(s, x, q);
      for (int y = 0; y < s.d; ++y)
        CHECK(a.a[static_cast<std::size_t>(y)] ==
              Catch::Approx(b.a[static_cast<std::size_t>(y)]).margin(1e-12));
    }
  }
}

TEST_CASE("selector always returns an admissible generator row") {
  auto s = base_spec(5);
  s.c = 0.4;
  std::mt19937_64 rng(812);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_values(rng, s.d, -3.0, 3.0);
    for (int x = 0; x < s.d; ++x) {
      const auto r = selector(s, x, p);
      CHECK_NOTHROW(r.validate(s.a_l, s.a_u));
    }
  }
}

TEST_CASE("selector is the value gradient of the hamiltonian") {
  auto s = base_spec(4);
  s.c = 0.9;
  std::mt19937_64 rng(813);
  const double h = 1e-5;
  int tested = 0;
  for (int trial = 0; trial < 200 && tested < 60; ++trial) {
    const auto p = random_values(rng, s.d, -1.5, 1.5);
    for (int x = 0; x < s.d; ++x) {
      if (!well_inside_box(s, x, p, 1e-3)) continue;
      const auto r = selector(s, x, p);
      for (int z = 0; z < s.d; ++z) {
        ValueVector up = p, dn = p;
        up[static_cast<std::size_t>(z)] += h;
        dn[static_cast<std::size_t>(z)] -= h;
        const double fd =
            (hamiltonian(s, x, up) - hamiltonian(s, x, dn)) / (2.0 * h);
        CHECK(fd ==
              Catch::Approx(r.a[static_cast<std::size_t>(z)]).margin(1e-9));
      }
      ++tested;
    }
  }
  CHECK(tested >= 40);
}

TEST_CASE("selector jacobian entries at pinned points") {
  const auto s = base_spec();
  auto j = selector_jacobian(s, 0, {0.0, 0.5});
  CHECK(j[1][1] == Catch::Approx(-1.0));
  CHECK(j[1][0] == Catch::Approx(1.0));
  CHECK(j[0][0] == Catch::Approx(-1.0));
  CHECK(j[0][1] == Catch::Approx(1.0));
  // Clamped coordinate: locally constant selector, zero derivative.
  j = selector_jacobian(s, 0, {0.0, 2.0});
  for (int y = 0; y < 2; ++y)
    for (int z = 0; z < 2; ++z) CHECK(j[y][z] == 0.0);
}

TEST_CASE("selector jacobian matches finite differences") {
  auto s = base_spec(4);
  s.c = 1.3;
  std::mt19937_64 rng(814);
  const double h = 1e-5;
  int tested = 0;
  for (int trial = 0; trial < 300 && tested < 50; ++trial) {
    const auto p = random_values(rng, s.d, -2.0, 2.0);
    for (int x = 0; x < s.d; ++x) {
      // Keep a margin so no coordinate crosses its kink inside the stencil.
      if (!well_inside_box(s, x, p, 1e-3)) continue;
      const auto j = selector_jacobian(s, x, p);
      for (int z = 0; z < s.d; ++z) {
        ValueVector up = p, dn = p;
        up[static_cast<std::size_t>(z)] += h;
        dn[static_cast<std::size_t>(z)] -= h;
        const auto ru = selector(s, x, up);
        const auto rd = selector(s, x, dn);
        for (int y = 0; y < s.d; ++y) {
          const double fd = (ru.a[static_cast<std::size_t>(y)] -
                             rd.a[static_cast<std::size_t>(y)]) /
                            (2.0 * h);
          CHECK(fd == Catch::Approx(j[static_cast<std::size_t>(y)]
                                     [static_cast<std::size_t>(z)])
                          .margin(1e-6));
        }
      }
      ++tested;
    }
  }
  CHECK(tested >= 30);
}

TEST_CASE("jacobian quadratic form equals the concavity bound when unclamped") {
  auto s = base_spec(4);
  s.c = 0.8;
  std::mt19937_64 rng(815);
  std::uniform_real_distribution<double> dir(-1.0, 1.0);
  int tested = 0;
  while (tested < 100) {
    // Small contrasts keep every coordinate strictly inside the box.
    const auto p = random_values(rng, s.d, -0.2, 0.2);
    const int x = static_cast<int>(rng() % static_cast<unsigned>(s.d));
    if (!well_inside_box(s, x, p, 1e-3)) continue;
    ValueVector xi(static_cast<std::size_t>(s.d));
    for (auto& v : xi) v = dir(rng);
    const auto j = selector_jacobian(s, x, p);
    double quad = 0.0;
    for (int y = 0; y < s.d; ++y)
      for (int z = 0; z < s.d; ++z)
        quad += xi[static_cast<std::size_t>(y)] *
                j[static_cast<std::size_t>(y)][static_cast<std::size_t>(z)] *
                xi[static_cast<std::size_t>(z)];
    const auto dx = delta(x, xi);
    double contrast2 = 0.0;
    for (double v : dx) contrast2 += v * v;
    CHECK(quad == Catch::Approx(-contrast2 / s.c).margin(1e-12));
    ++tested;
  }
}

TEST_CASE("jacobian quadratic form stays between the clamped extremes") {
  auto s = base_spec(4);
  std::mt19937_64 rng(816);
  std::uniform_real_distribution<double> dir(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_values(rng, s.d, -4.0, 4.0);
    const int x = static_cast<int>(rng() % static_cast<unsigned>(s.d));
    ValueVector xi(static_cast<std::size_t>(s.d));
    for (auto& v : xi) v = dir(rng);
    const auto j = selector_jacobian(s, x, p);
    double quad = 0.0;
    for (int y = 0; y < s.d; ++y)
      for (int z = 0; z < s.d; ++z)
        quad += xi[static_cast<std::size_t>(y)] *
                j[static_cast<std::size_t>(y)][static_cast<std::size_t>(z)] *
                xi[static_cast<std::size_t>(z)];
    const auto dx = delta(x, xi);
    double contrast2 = 0.0;
    for (double v : dx) contrast2 += v * v;
    CHECK(quad <= 1e-12);
    CHECK(quad >= -contrast2 / s.c - 1e-12);
  }
}

TEST_CASE("running cost of pinned rate vectors") {
  const auto s = base_spec();
  RateVector free_rate{0, {-1.0, 1.0}};
  CHECK(running_cost(s, free_rate) == Catch::Approx(0.0).margin(1e-15));
  RateVector floor_rate{0, {-0.1, 0.1}};
  CHECK(running_cost(s, floor_rate) == Catch::Approx(0.405).margin(1e-15));
}

TEST_CASE("crowd cost and its monotone structure") {
  auto s = base_spec();
  s.beta = 0.7;
  s.g = {0.2, -0.3};
  const auto eta = SimplexPoint::uniform(2);
  CHECK(mean_field_cost(s, 0, eta) == Catch::Approx(0.7 * 0.5 + 0.2));
  CHECK(mean_field_cost(s, 1, eta) == Catch::Approx(0.7 * 0.5 - 0.3));

  // The coupling satisfies sum_x (F(x,eta) - F(x,nu)) (eta_x - nu_x)
  // = beta |eta - nu|^2 exactly, for every pair of distributions.
  std::mt19937_64 rng(817);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vec w1 = {u(rng), u(rng)}, w2 = {u(rng), u(rng)};
    const double s1 = w1[0] + w1[1], s2 = w2[0] + w2[1];
    for (auto& v : w1) v /= s1;
    for (auto& v : w2) v /= s2;
    const SimplexPoint e1(w1), e2(w2);
    double pairing = 0.0, dist2 = 0.0;
    for (int x = 0; x < 2; ++x) {
      const double df = mean_field_cost(s, x, e1) - mean_field_cost(s, x, e2);
      const double dm = e1[x] - e2[x];
      pairing += df * dm;
      dist2 += dm * dm;
    }
    CHECK(pairing == Catch::Approx(s.beta * dist2).margin(1e-14));
  }

  // Opposite vertices realize the extreme value 2 beta.
  const auto v0 = SimplexPoint::vertex(2, 0);
  const auto v1 = SimplexPoint::vertex(2, 1);
  double pairing = 0.0;
  for (int x = 0; x < 2; ++x)
    pairing += (mean_field_cost(s, x, v0) - mean_field_cost(s, x, v1)) *
               (v0[x] - v1[x]);
  CHECK(pairing == Catch::Approx(2.0 * s.beta).margin(1e-14));
}

TEST_CASE("crowd cost gradient matches directional quotients") {
  auto s = base_spec(3);
  s.beta = 1.4;
  s.g = {0.1, 0.0, -0.2};
  // Base-state convention: component z differentiates along e_z - e_0.
  const auto g0 = mean_field_cost_grad(s, 0);
  CHECK(g0[0] == 0.0);
  CHECK(g0[1] == Catch::Approx(-1.4));
  CHECK(g0[2] == Catch::Approx(-1.4));
  const auto g1 = mean_field_cost_grad(s, 1);
  CHECK(g1[0] == 0.0);
  CHECK(g1[1] == Catch::Approx(1.4));
  CHECK(g1[2] == 0.0);

  const SimplexPoint eta({0.3, 0.4, 0.3});
  for (int x = 0; x < 3; ++x) {
    const auto grad = mean_field_cost_grad(s, x);
    for (int z = 1; z < 3; ++z) {
      const double fd = directional_derivative_fd(
          [&](const SimplexPoint& m) { return mean_field_cost(s, x, m); },
          eta, 0, z, 1e-4);
      CHECK(fd == Catch::Approx(grad[static_cast<std::size_t>(z)])
                      .margin(1e-9));
    }
  }
}

TEST_CASE("cost bound formula") {
  auto s = base_spec();
  // dev^2 = max(0.81, 1.0) = 1, so bound = 0 + 1 + 0.5 * 1 * 1 * 1 = 1.5.
  CHECK(cost_bound(s) == Catch::Approx(1.5));
  s.g = {0.2, -0.3};
  CHECK(cost_bound(s) == Catch::Approx(1.8));
  s.d = 3;
  s.g = {0.2, -0.3, 0.0};
  CHECK(cost_bound(s) == Catch::Approx(2.3));
  CHECK(curvature_bound(s) == Catch::Approx(1.0));
  s.c = 4.0;
  CHECK(curvature_bound(s) == Catch::Approx(0.25));
}

TEST_CASE("rate matrix keeps rows balanced") {
  auto q = RateMatrix::from_offdiagonal(
      2, [](int x, int y) { return x == 0 && y == 1 ? 1.0 : 2.0; });
  CHECK(q(0, 1) == 1.0);
  CHECK(q(1, 0) == 2.0);
  CHECK(q(0, 0) == -1.0);
  CHECK(q(1, 1) == -2.0);
  CHECK(q.max_exit_rate() == 2.0);
  CHECK(q.min_offdiagonal() == 1.0);
  CHECK_NOTHROW(q.validate_box(0.1, 2.0));
  CHECK_THROWS_AS(q.validate_box(0.1, 0.5), error);
  CHECK_THROWS_AS(q.set_offdiagonal(0, 0, 1.0), error);
  CHECK_THROWS_AS(q.set_offdiagonal(0, 1, -1.0), error);

  // Rows assembled from selector output stay balanced exactly.
  const auto s = base_spec(3);
  RateMatrix qs(3);
  const ValueVector p = {0.0, 0.4, -0.3};
  for (int x = 0; x < 3; ++x) qs.set_row(selector(s, x, p));
  for (int x = 0; x < 3; ++x) {
    double row = 0.0;
    for (int y = 0; y < 3; ++y) row += qs(x, y);
    CHECK(std::abs(row) < 1e-14);
  }
  CHECK_NOTHROW(qs.validate_box(s.a_l, s.a_u));
}
