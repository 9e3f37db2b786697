#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "mfg/simplex.hpp"

using namespace mfg;

namespace {

// Independent count oracle: binomial(n + d - 1, d - 1).
long long binomial(int n, int k) {
  long long out = 1;
  for (int i = 1; i <= k; ++i) out = out * (n - k + i) / i;
  return out;
}

Vec random_vec(std::mt19937_64& rng, int d, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(static_cast<std::size_t>(d));
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("delta anchors the difference vector at x") {
  ValueVector p{1.0, 3.0};
  REQUIRE(delta(0, p) == ValueVector{0.0, 2.0});
  REQUIRE(delta(1, p) == ValueVector{-2.0, 0.0});
  REQUIRE_THROWS_AS(delta(2, p), error);
  REQUIRE_THROWS_AS(delta(-1, p), error);
}

TEST_CASE("difference norm matches the centered-projection identity") {
  ValueVector p{1.0, 3.0};
  REQUIRE(delta_norm(p) == Catch::Approx(std::sqrt(8.0)));
  REQUIRE(delta_norm(p) ==
          Catch::Approx(std::sqrt(4.0) * l2_norm(sub(p, center(p)))));

  std::mt19937_64 rng(20240817);
  for (int d = 2; d <= 6; ++d) {
    for (int trial = 0; trial < 50; ++trial) {
      Vec b = random_vec(rng, d, -5.0, 5.0);
      const double lhs = delta_norm(b);
      const double rhs = std::sqrt(2.0 * d) * l2_norm(sub(b, center(b)));
      REQUIRE(lhs == Catch::Approx(rhs).margin(1e-10));
    }
  }
}

TEST_CASE("delta is invariant under constant shifts") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    Vec b = random_vec(rng, 4, -2.0, 2.0);
    Vec shiftedb = b;
    const double c = 0.37 * (trial + 1);
    for (auto& v : shiftedb) v += c;
    for (int x = 0; x < 4; ++x) {
      Vec a = delta(x, b), s = delta(x, shiftedb);
      for (int y = 0; y < 4; ++y)
        REQUIRE(a[static_cast<std::size_t>(y)] ==
                Catch::Approx(s[static_cast<std::size_t>(y)]).margin(1e-14));
    }
  }
}

TEST_CASE("center is the constant mean and kills tangent pairings") {
  REQUIRE(center({1.0, 3.0}) == ValueVector{2.0, 2.0});
  REQUIRE(center({0.0, 0.0, 0.0}) == ValueVector{0.0, 0.0, 0.0});
  ValueVector b{1.0, 3.0};
  TangentVector m(Vec{1.0, -1.0});
  REQUIRE(dot(center(b), m.components()) == Catch::Approx(0.0).margin(1e-15));
  // b - center(b) always lands in the tangent space.
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    Vec v = random_vec(rng, 5, -3.0, 3.0);
    REQUIRE(component_sum(sub(v, center(v))) ==
            Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("simplex points validate, clip and renormalize at construction") {
  REQUIRE_NOTHROW(SimplexPoint(Vec{0.5, 0.5}));
  REQUIRE_THROWS_AS(SimplexPoint(Vec{0.6, 0.6}), error);
  REQUIRE_THROWS_AS(SimplexPoint(Vec{0.5, -0.5}), error);
  REQUIRE_THROWS_AS(SimplexPoint(Vec{}), error);

  // A stray negative inside the tolerance is clipped, never kept.
  SimplexPoint p(Vec{1.0 + 0.5e-12, -0.5e-12});
  REQUIRE(p[1] == 0.0);
  REQUIRE(p[0] == Catch::Approx(1.0).margin(1e-12));

  SimplexPoint v = SimplexPoint::vertex(3, 1);
  REQUIRE(v[0] == 0.0);
  REQUIRE(v[1] == 1.0);
  REQUIRE(SimplexPoint::uniform(4)[2] == Catch::Approx(0.25));
}

TEST_CASE("tangent vectors must sum to zero") {
  REQUIRE_NOTHROW(TangentVector(Vec{0.25, -0.75, 0.5}));
  REQUIRE_THROWS_AS(TangentVector(Vec{0.1, 0.1}), error);
  TangentVector e = TangentVector::pair_direction(3, 0, 2);
  REQUIRE(e[0] == -1.0);
  REQUIRE(e[1] == 0.0);
  REQUIRE(e[2] == 1.0);
}

TEST_CASE("lattice enumerates every grid point exactly once") {
  SimplexLattice l21 = lattice(2, 1);
  REQUIRE(l21.size() == 2);
  REQUIRE(l21[0].weights() == Vec{0.0, 1.0});
  REQUIRE(l21[1].weights() == Vec{1.0, 0.0});

  SimplexLattice l22 = lattice(2, 2);
  REQUIRE(l22.size() == 3);
  REQUIRE(l22[0].weights() == Vec{0.0, 1.0});
  REQUIRE(l22[1].weights() == Vec{0.5, 0.5});
  REQUIRE(l22[2].weights() == Vec{1.0, 0.0});

  REQUIRE(lattice(3, 2).size() == 6);

  for (int d = 2; d <= 6; ++d)
    for (int n = 1; n <= 10; ++n)
      REQUIRE(lattice(d, n).size() ==
              static_cast<std::size_t>(binomial(n + d - 1, d - 1)));

  REQUIRE_THROWS_AS(lattice(1, 4), error);
  REQUIRE_THROWS_AS(lattice(3, 0), error);
}

TEST_CASE("lattice interior flag marks strictly positive points") {
  SimplexLattice l = lattice(3, 3);
  std::size_t interior = 0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    bool expect = true;
    for (int x = 0; x < 3; ++x) expect = expect && l[i][x] > 0.0;
    REQUIRE(l.is_interior(i) == expect);
    interior += l.is_interior(i) ? 1u : 0u;
  }
  REQUIRE(interior == 1);  // only (1/3,1/3,1/3)
}

TEST_CASE("simplex derivative of a coordinate field moves mass as expected") {
  SimplexPoint eta(Vec{0.5, 0.5});
  auto K0 = [](const SimplexPoint& e) { return e[0]; };
  // Mass moving from state 1 into state 0 raises the first coordinate.
  REQUIRE(directional_derivative_fd(K0, eta, 1, 0, 1e-3) ==
          Catch::Approx(1.0).margin(1e-12));
  REQUIRE(directional_derivative_fd(K0, eta, 0, 1, 1e-3) ==
          Catch::Approx(-1.0).margin(1e-12));

  auto Kc = [](const SimplexPoint&) { return 4.2; };
  for (int y = 0; y < 2; ++y)
    for (int z = 0; z < 2; ++z)
      REQUIRE(directional_derivative_fd(Kc, eta, y, z, 1e-3) == 0.0);
}

TEST_CASE("simplex derivative of a linear field equals its coefficient contrast") {
  const double beta = 0.7;
  std::mt19937_64 rng(31);
  SimplexLattice l = lattice(3, 4);
  for (std::size_t i = 0; i < l.size(); ++i) {
    for (int x = 0; x < 3; ++x) {
      auto K = [&, x](const SimplexPoint& e) { return beta * e[x]; };
      for (int y = 0; y < 3; ++y)
        for (int z = 0; z < 3; ++z) {
          if (y == z) continue;
          const double h = 1e-3;
          if (l[i][y] < h && l[i][z] < h) continue;  // infeasible direction
          const double want =
              beta * ((z == x ? 1.0 : 0.0) - (y == x ? 1.0 : 0.0));
          REQUIRE(directional_derivative_fd(K, l[i], y, z, h) ==
                  Catch::Approx(want).margin(1e-12));
        }
    }
  }
  (void)rng;
}

TEST_CASE("simplex derivative falls back to one-sided quotients at the boundary") {
  auto K = [](const SimplexPoint& e) { return e[0] * e[0]; };
  SimplexPoint edge(Vec{0.0, 1.0});
  // Only eta - h e_{01} = eta + h e_{10} is feasible from the edge.
  const double h = 1e-4;
  const double bwd = directional_derivative_fd(K, edge, 0, 1, h);
  const double fwd = directional_derivative_fd(K, edge, 1, 0, h);
  REQUIRE(bwd == Catch::Approx(-h).margin(1e-15));  // (0 - h^2)/h
  REQUIRE(fwd == Catch::Approx(h).margin(1e-15));

  SimplexPoint vtx(Vec{0.0, 0.0, 1.0});
  REQUIRE_THROWS_AS(directional_derivative_fd(K, vtx, 0, 1, h), error);
  REQUIRE_THROWS_AS(directional_derivative_fd(K, vtx, 0, 1, -h), error);
}

TEST_CASE("shifted moves mass between coordinates") {
  SimplexPoint eta(Vec{0.25, 0.75});
  SimplexPoint moved = eta.shifted(1, 0, 0.25);
  REQUIRE(moved[0] == Catch::Approx(0.5));
  REQUIRE(moved[1] == Catch::Approx(0.5));
  REQUIRE_THROWS_AS(eta.shifted(0, 1, 0.5), error);
}
