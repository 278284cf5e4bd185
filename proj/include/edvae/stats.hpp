#pragma once

#include <cstdint>
#include <vector>

#include "edvae/rng.hpp"
#include "edvae/tensor.hpp"

namespace edvae {

// Dirichlet concentration parameters over the trailing axis. Construction
// validates the alpha >= 1 invariant guaranteed by the exp(.) + 1 evidence
// map; total carries S = sum_k alpha_k per position (kept in the graph so
// pi = alpha / S stays differentiable).
struct DirichletParams {
  Tensor alpha;  // (..., K)
  Tensor total;  // (..., 1)

  int64_t k() const { return alpha.extent(alpha.rank() - 1); }
  static DirichletParams from_alpha(Tensor alpha);
};

// g = -log(-log(u)), u ~ Uniform(0,1) with endpoints excluded.
Tensor sample_gumbel(Rng& rng, Shape shape);

// softmax((logits + g) / tau) along the last axis; differentiable wrt logits.
Tensor gumbel_softmax_sample(const Tensor& logits, double tau, Rng& rng);

// Marsaglia-Tsang draw from Gamma(alpha, 1); restricted to alpha >= 1, which
// is the entire reachable domain under the evidence map.
double sample_gamma(Rng& rng, double alpha);

// Per position: K gamma draws normalized by their sum. Plain values.
Tensor sample_dirichlet(Rng& rng, const DirichletParams& params);

// Inverse-CDF draw per position over the trailing axis. Inference only.
std::vector<int64_t> sample_categorical(Rng& rng, const Tensor& probs);

// KL(Dir(alpha) || Dir(1,...,1)) per position, collapsing the trailing axis.
// Differentiable wrt alpha with the analytic adjoint
//   d/d alpha_k = (alpha_k - 1) psi'(alpha_k) - (S - K) psi'(S).
Tensor dirichlet_kl_to_uniform(const DirichletParams& params);

// -sum p log p over the trailing axis, 0 log 0 := 0. Range [0, log K].
Tensor categorical_entropy(const Tensor& probs);

// log K - H(p) over the trailing axis.
Tensor categorical_kl_to_uniform(const Tensor& probs);

}  // namespace edvae
