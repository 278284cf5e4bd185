#include "edvae/stats.hpp"

#include <cmath>

#include "edvae/errors.hpp"
#include "edvae/special_functions.hpp"

namespace edvae {

namespace {

void validate_simplex_rows(const Tensor& probs, const char* fn) {
  if (probs.rank() < 1) throw ParamError(std::string(fn) + ": expected at least rank 1");
  int64_t lane = probs.extent(probs.rank() - 1);
  const double* p = probs.data().data();
  int64_t rows = probs.numel() / lane;
  for (int64_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (int64_t i = 0; i < lane; ++i) {
      double v = p[r * lane + i];
      if (!(v >= 0.0)) {
        throw ParamError(std::string(fn) + ": negative or NaN probability " + std::to_string(v));
      }
      total += v;
    }
    if (std::fabs(total - 1.0) > 1e-9) {
      throw ParamError(std::string(fn) + ": row sums to " + std::to_string(total) +
                       ", not a simplex");
    }
  }
}

}  // namespace

DirichletParams DirichletParams::from_alpha(Tensor alpha) {
  if (alpha.rank() < 1) throw ParamError("DirichletParams: alpha must have at least rank 1");
  for (double v : alpha.data()) {
    if (!(v >= 1.0)) {
      throw ParamError("DirichletParams: every concentration must be >= 1, got " +
                       std::to_string(v));
    }
  }
  DirichletParams params;
  params.total = sum(alpha, alpha.rank() - 1, /*keepdim=*/true);
  params.alpha = std::move(alpha);
  return params;
}

Tensor sample_gumbel(Rng& rng, Shape shape) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (double& v : data) v = -std::log(-std::log(rng.next_open_double()));
  return Tensor::from_data(std::move(shape), std::move(data), false);
}

Tensor gumbel_softmax_sample(const Tensor& logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) {
    throw ParamError("gumbel_softmax_sample: tau must be positive, got " + std::to_string(tau));
  }
  Tensor noise = sample_gumbel(rng, logits.shape());
  return softmax(add(logits, noise), logits.rank() - 1, tau);
}

double sample_gamma(Rng& rng, double alpha) {
  if (!(alpha >= 1.0)) {
    throw ParamError("sample_gamma: alpha must be >= 1, got " + std::to_string(alpha));
  }
  double d = alpha - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.next_gaussian();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    double u = rng.next_open_double();
    double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

Tensor sample_dirichlet(Rng& rng, const DirichletParams& params) {
  int64_t lane = params.k();
  int64_t rows = params.alpha.numel() / lane;
  const double* a = params.alpha.data().data();
  std::vector<double> out(static_cast<size_t>(params.alpha.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (int64_t i = 0; i < lane; ++i) {
      double g = sample_gamma(rng, a[r * lane + i]);
      out[static_cast<size_t>(r * lane + i)] = g;
      total += g;
    }
    double inv = 1.0 / total;
    for (int64_t i = 0; i < lane; ++i) out[static_cast<size_t>(r * lane + i)] *= inv;
  }
  return Tensor::from_data(params.alpha.shape(), std::move(out), false);
}

std::vector<int64_t> sample_categorical(Rng& rng, const Tensor& probs) {
  validate_simplex_rows(probs, "sample_categorical");
  int64_t lane = probs.extent(probs.rank() - 1);
  int64_t rows = probs.numel() / lane;
  const double* p = probs.data().data();
  std::vector<int64_t> indices(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double u = rng.next_double();
    double cum = 0.0;
    int64_t pick = lane - 1;
    for (int64_t i = 0; i < lane; ++i) {
      cum += p[r * lane + i];
      if (u < cum) {
        pick = i;
        break;
      }
    }
    indices[static_cast<size_t>(r)] = pick;
  }
  return indices;
}

Tensor dirichlet_kl_to_uniform(const DirichletParams& params) {
  const Tensor& alpha = params.alpha;
  int64_t lane = params.k();
  int64_t rows = alpha.numel() / lane;
  const double* a = alpha.data().data();
  double lgamma_k = log_gamma(static_cast<double>(lane));
  std::vector<double> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = a + r * lane;
    double s = 0.0;
    for (int64_t i = 0; i < lane; ++i) s += row[i];
    double psi_s = digamma(s);
    double kl = log_gamma(s) - lgamma_k;
    for (int64_t i = 0; i < lane; ++i) {
      kl -= log_gamma(row[i]);
      kl += (row[i] - 1.0) * (digamma(row[i]) - psi_s);
    }
    out[static_cast<size_t>(r)] = kl;
  }
  Shape out_shape(alpha.shape().begin(), alpha.shape().end() - 1);
  Tensor result = make_tensor(std::move(out_shape), std::move(out), false);
  if (ops::recording({&alpha})) {
    auto na = alpha.node();
    auto no = result.node();
    ops::record_custom({&alpha}, result, [na, no, lane]() {
      const double* g = no->grad.data();
      const double* a = na->data.data();
      double* ga = detail::ensure_grad(na).data();
      int64_t rows = static_cast<int64_t>(no->data.size());
      double k = static_cast<double>(lane);
      for (int64_t r = 0; r < rows; ++r) {
        const double* row = a + r * lane;
        double s = 0.0;
        for (int64_t i = 0; i < lane; ++i) s += row[i];
        double common = (s - k) * trigamma(s);
        for (int64_t i = 0; i < lane; ++i) {
          ga[r * lane + i] += g[r] * ((row[i] - 1.0) * trigamma(row[i]) - common);
        }
      }
    });
  }
  return result;
}

Tensor categorical_entropy(const Tensor& probs) {
  validate_simplex_rows(probs, "categorical_entropy");
  return mul_scalar(sum(xlogx(probs), probs.rank() - 1), -1.0);
}

Tensor categorical_kl_to_uniform(const Tensor& probs) {
  validate_simplex_rows(probs, "categorical_kl_to_uniform");
  double log_k = std::log(static_cast<double>(probs.extent(probs.rank() - 1)));
  return add_scalar(sum(xlogx(probs), probs.rank() - 1), log_k);
}

}  // namespace edvae
