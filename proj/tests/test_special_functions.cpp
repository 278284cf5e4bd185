#include "edvae/special_functions.hpp"

#include <cmath>
#include <numbers>

#include "doctest.h"
#include "edvae/errors.hpp"
#include "oracles.hpp"

using namespace edvae;

namespace {

// Absolute tolerance floored at a few ulp of the magnitude: for large x the
// result itself cannot be represented to 1e-10.
double tol_for(double value) { return std::max(1e-10, 8.0 * std::fabs(value) * 1e-16); }

}  // namespace

TEST_CASE("log_gamma known values") {
  CHECK(log_gamma(1.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(log_gamma(2.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(log_gamma(5.0) == doctest::Approx(std::log(24.0)).epsilon(1e-12));
  // Gamma(1/2) = sqrt(pi)
  CHECK(log_gamma(0.5) ==
        doctest::Approx(0.5 * std::log(std::numbers::pi)).epsilon(1e-12));
  CHECK(log_gamma(0.5) == doctest::Approx(oracle::lgamma_series(0.5)).epsilon(1e-13));
}

TEST_CASE("log_gamma matches the series oracle over [1e-3, 1e6]") {
  for (double x : {1e-3, 7e-3, 0.04, 0.2, 0.5, 0.9, 1.0, 1.5, 2.7, 3.14159, 6.0, 9.99,
                   10.0, 25.0, 123.456, 1e3, 3.7e4, 1e6}) {
    double got = log_gamma(x);
    double want = oracle::lgamma_series(x);
    CHECK_MESSAGE(std::fabs(got - want) < tol_for(want), "x=", x, " got=", got, " want=", want);
  }
}

TEST_CASE("log_gamma rejects non-positive arguments") {
  CHECK_THROWS_AS(log_gamma(0.0), DomainError);
  CHECK_THROWS_AS(log_gamma(-3.0), DomainError);
}

TEST_CASE("digamma known values") {
  // psi(1) = -EulerGamma
  CHECK(digamma(1.0) == doctest::Approx(-oracle::kEulerGamma).epsilon(1e-12));
  // recurrence psi(2) - psi(1) = 1
  CHECK(digamma(2.0) - digamma(1.0) == doctest::Approx(1.0).epsilon(1e-12));
  // psi(3) = 1.5 - EulerGamma
  CHECK(digamma(3.0) == doctest::Approx(1.5 - oracle::kEulerGamma).epsilon(1e-12));
  CHECK(digamma(3.0) == doctest::Approx(0.9227843350984671).epsilon(1e-12));
}

TEST_CASE("digamma matches the series oracle") {
  for (double x : {1e-3, 0.02, 0.3, 0.77, 1.0, 1.9, 2.0, 4.5, 5.999, 6.0, 8.2, 30.0,
                   500.0, 1e4, 1e6}) {
    double got = digamma(x);
    double want = oracle::digamma_series(x);
    CHECK_MESSAGE(std::fabs(got - want) < tol_for(want), "x=", x, " got=", got, " want=", want);
  }
  CHECK_THROWS_AS(digamma(0.0), DomainError);
  CHECK_THROWS_AS(digamma(-1.0), DomainError);
}

TEST_CASE("trigamma matches the series oracle") {
  // psi'(1) = pi^2/6
  CHECK(trigamma(1.0) ==
        doctest::Approx(std::numbers::pi * std::numbers::pi / 6.0).epsilon(1e-12));
  // recurrence psi'(x) - psi'(x+1) = 1/x^2
  CHECK(trigamma(1.5) - trigamma(2.5) == doctest::Approx(1.0 / 2.25).epsilon(1e-12));
  for (double x : {1e-3, 0.1, 0.6, 1.0, 2.3, 5.0, 6.0, 11.0, 250.0, 1e5}) {
    double got = trigamma(x);
    double want = oracle::trigamma_series(x);
    CHECK_MESSAGE(std::fabs(got - want) < tol_for(want), "x=", x, " got=", got, " want=", want);
  }
  CHECK_THROWS_AS(trigamma(-0.5), DomainError);
}
