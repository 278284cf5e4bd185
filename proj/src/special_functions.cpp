#include "edvae/special_functions.hpp"

#include <cmath>
#include <numbers>

#include "edvae/errors.hpp"

namespace edvae {
namespace {

void require_positive(double x, const char* fn) {
  if (!(x > 0.0)) {
    throw DomainError(std::string(fn) + ": argument must be positive, got " + std::to_string(x));
  }
}

// Stirling-series coefficients B_{2n} / (2n (2n-1)) for log Gamma.
constexpr double kLgammaAsym[] = {
    1.0 / 12.0,       -1.0 / 360.0,        1.0 / 1260.0, -1.0 / 1680.0,
    1.0 / 1188.0,     -691.0 / 360360.0,   1.0 / 156.0,  -3617.0 / 122400.0,
};

// B_{2n} / (2n) for digamma.
constexpr double kDigammaAsym[] = {
    1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0,
    1.0 / 132.0, -691.0 / 32760.0, 1.0 / 12.0,
};

// B_{2n} for trigamma.
constexpr double kTrigammaAsym[] = {
    1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0,
    5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0,
};

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

double log_gamma(double x) {
  require_positive(x, "log_gamma");
  // Shift into x >= 10 where the Stirling tail is below 1e-17.
  double shift = 0.0;
  while (x < 10.0) {
    shift -= std::log(x);
    x += 1.0;
  }
  double inv = 1.0 / x;
  double inv2 = inv * inv;
  double series = 0.0;
  double p = inv;
  for (double c : kLgammaAsym) {
    series += c * p;
    p *= inv2;
  }
  return shift + (x - 0.5) * std::log(x) - x + kHalfLog2Pi + series;
}

double digamma(double x) {
  require_positive(x, "digamma");
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  double inv = 1.0 / x;
  double inv2 = inv * inv;
  double series = 0.0;
  double p = inv2;
  for (double c : kDigammaAsym) {
    series += c * p;
    p *= inv2;
  }
  return acc + std::log(x) - 0.5 * inv - series;
}

double trigamma(double x) {
  require_positive(x, "trigamma");
  double acc = 0.0;
  while (x < 6.0) {
    acc += 1.0 / (x * x);
    x += 1.0;
  }
  double inv = 1.0 / x;
  double inv2 = inv * inv;
  double series = 0.0;
  double p = inv * inv2;
  for (double c : kTrigammaAsym) {
    series += c * p;
    p *= inv2;
  }
  return acc + inv + 0.5 * inv2 + series;
}

}  // namespace edvae
