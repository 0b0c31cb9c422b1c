#include <doctest.h>

#include <cmath>
#include <random>

#include "epinf/oracle.hpp"
#include "epinf/tilted.hpp"

using namespace epinf;

TEST_CASE("flat site: tilted equals the cavity Gaussian") {
  const auto m = tilted_moments(2.0, 1.0, SitePotential::flat(), 1.0);
  CHECK(m.mean == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(m.second_moment == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(m.log_zhat ==
        doctest::Approx(0.5 * std::log(M_PI) + 0.25).epsilon(1e-14));
}

TEST_CASE("symmetric laplace site: frozen oracle values") {
  // tau=1, eta=1, cavity (1, 0); quadrature oracle, rel tol 1e-13
  const auto m = tilted_moments(1.0, 0.0, SitePotential::laplace(1.0), 1.0);
  CHECK(m.mean == doctest::Approx(0.0).epsilon(1e-13));
  CHECK(m.log_zhat == doctest::Approx(0.271064068755351).epsilon(1e-12));
  CHECK(m.variance() == doctest::Approx(0.474864723839019).epsilon(1e-12));
}

TEST_CASE("asymmetric fractional laplace site: frozen oracle values") {
  // tau=2, eta=0.7, cavity (0.5, 1.3)
  const auto m = tilted_moments(0.5, 1.3, SitePotential::laplace(2.0), 0.7);
  CHECK(m.log_zhat == doctest::Approx(0.66159404064546).epsilon(1e-12));
  CHECK(m.mean == doctest::Approx(0.808381729648662).epsilon(1e-12));
  CHECK(m.second_moment == doctest::Approx(1.50407017607434).epsilon(1e-12));
}

TEST_CASE("gaussian site closed form") {
  const auto site = SitePotential::gaussian(0.4, 2.0);
  const auto m = tilted_moments(1.5, -0.3, site, 0.8);
  const auto q = oracle::quad_tilted(1.5, -0.3, site, 0.8, 1e-12);
  CHECK(m.log_zhat == doctest::Approx(q.log_zhat).epsilon(1e-10));
  CHECK(m.mean == doctest::Approx(q.mean).epsilon(1e-10));
  CHECK(m.second_moment == doctest::Approx(q.second_moment).epsilon(1e-10));
}

TEST_CASE("batch equals the scalar map and reports the failing index") {
  CavityParams cav{Vec::Ones(3), Vec::Zero(3)};
  std::vector<SitePotential> sites{SitePotential::flat(),
                                   SitePotential::laplace(2.0),
                                   SitePotential::gaussian(0.0, 1.0)};
  const auto batch = tilted_moments_batch(cav, sites, 0.9);
  REQUIRE(batch.size() == 3);
  for (int i = 0; i < 3; ++i) {
    const auto one = tilted_moments(1.0, 0.0, sites[size_t(i)], 0.9);
    CHECK(batch[size_t(i)].log_zhat == doctest::Approx(one.log_zhat));
    CHECK(batch[size_t(i)].second_moment ==
          doctest::Approx(one.second_moment));
  }
  CHECK(tilted_moments_batch({Vec(0), Vec(0)}, {}, 1.0).empty());

  cav.pi_minus[1] = -1.0;
  try {
    tilted_moments_batch(cav, sites, 0.9);
    CHECK(false);
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("site 1") != std::string::npos);
  }
}

TEST_CASE("log-partition derivative identities by finite differences") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> un(0.0, 1.0);
  for (int t = 0; t < 40; ++t) {
    const double pm = std::pow(10.0, -1.5 + 3.0 * un(rng));
    const double bm = 6.0 * un(rng) - 3.0;
    const double tau = std::pow(10.0, -1.0 + 2.0 * un(rng));
    const double eta = 0.3 + 0.7 * un(rng);
    const auto site = SitePotential::laplace(tau);
    const auto m = tilted_moments(pm, bm, site, eta);
    const double hb = 1e-6 * (1.0 + std::fabs(bm));
    const double hp = 1e-6 * (1.0 + pm);
    const double dldb = (tilted_moments(pm, bm + hb, site, eta).log_zhat -
                         tilted_moments(pm, bm - hb, site, eta).log_zhat) /
                        (2.0 * hb);
    const double dldp = (tilted_moments(pm + hp, bm, site, eta).log_zhat -
                         tilted_moments(pm - hp, bm, site, eta).log_zhat) /
                        (2.0 * hp);
    CHECK(dldb == doctest::Approx(m.mean).epsilon(1e-6));
    CHECK(dldp ==
          doctest::Approx(-0.5 * m.second_moment).epsilon(1e-6));
  }
}

TEST_CASE("eta -> 0 recovers cavity moments") {
  const auto site = SitePotential::laplace(5.0);
  const auto m = tilted_moments(2.0, 1.0, site, 1e-9);
  CHECK(m.mean == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(m.variance() == doctest::Approx(0.5).epsilon(1e-7));
}

TEST_CASE("quadrature equivalence on a random sweep") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> un(0.0, 1.0);
  for (int t = 0; t < 60; ++t) {
    const double pm = std::pow(10.0, -3.0 + 6.0 * un(rng));
    const double bm = -30.0 + 60.0 * un(rng);
    const double tau = std::pow(10.0, -2.0 + 4.0 * un(rng));
    const double eta = t % 3 == 0 ? 0.3 : (t % 3 == 1 ? 0.7 : 1.0);
    const auto site = SitePotential::laplace(tau);
    const auto a = tilted_moments(pm, bm, site, eta);
    const auto b = oracle::quad_tilted(pm, bm, site, eta, 1e-12);
    const double sig = std::sqrt(b.variance());
    CHECK(std::fabs(a.log_zhat - b.log_zhat) <=
          1e-8 * std::max(1.0, std::fabs(b.log_zhat)));
    CHECK(std::fabs(a.mean - b.mean) <=
          1e-8 * std::max(std::fabs(b.mean), sig));
    CHECK(std::fabs(a.second_moment - b.second_moment) <=
          1e-8 * b.second_moment);
  }
}

TEST_CASE("error paths: bad cavity and variance collapse") {
  CHECK_THROWS(tilted_moments(0.0, 0.0, SitePotential::flat(), 1.0));
  CHECK_THROWS(tilted_moments(-1.0, 0.0, SitePotential::laplace(1.0), 1.0));
  // ratio of tilted to cavity variance ~ (tau'/sqrt(p))^-2 = 1e-14 here
  CHECK_THROWS(tilted_moments(1e-10, 0.0, SitePotential::laplace(100.0), 1.0));
}
