#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "edvae/rng.hpp"
#include "edvae/stats.hpp"
#include "edvae/tensor.hpp"

namespace edvae {

// Below this temperature the Gumbel-Softmax is numerically singular; the
// relaxation is evaluated at the floor and wrapped in a hard straight-through
// sample instead.
inline constexpr double kTauFloor = 1.0 / 16.0;

// Learnable K x D embedding table with usage diagnostics and optional EMA
// re-estimation state.
struct Codebook {
  Tensor embeddings;                  // (K, D)
  std::vector<int64_t> usage_counts;  // running assignment tallies, length K

  struct EmaState {
    Tensor cluster_size;  // (K)
    Tensor embed_sums;    // (K, D)
  };
  std::optional<EmaState> ema;

  int64_t size() const { return embeddings.extent(0); }
  int64_t dim() const { return embeddings.extent(1); }

  // Standard-normal init (dVAE / EdVAE convention).
  static Codebook gaussian_init(int64_t k, int64_t d, Rng& rng, bool trainable);
  // Uniform(-1/K, 1/K) init (VQ convention).
  static Codebook uniform_init(int64_t k, int64_t d, Rng& rng, bool trainable);

  void enable_ema();
  void note_usage(std::span<const int64_t> indices);
};

enum class Phase { kTrain, kInfer };
enum class PiMode { kMean, kSampled };

// Output of one quantization pass. Leading axes of the input are preserved;
// the trailing axis becomes D for z_q. hard_indices are always filled (the
// argmax of the relaxed sample during training, the drawn index at
// inference); soft_assign only exists in the train phase.
struct QuantizeResult {
  Tensor z_q;                         // (..., D)
  Tensor soft_assign;                 // (..., K), train phase only
  std::vector<int64_t> hard_indices;  // one per position
  Tensor kl_term;                     // scalar; mean over positions
  std::vector<double> position_entropy;
  std::optional<double> mean_uncertainty;  // EdVAE only: mean of K/S
  Tensor codebook_term;    // VQ only: ||sg(z_e) - z_q||^2
  Tensor commitment_term;  // VQ only: ||z_e - sg(z_q)||^2
};

// alpha = exp(min(z_e, clamp_bound)) + 1, elementwise and differentiable.
DirichletParams evidence_to_alpha(const Tensor& z_e, double clamp_bound);

// pi = alpha / S per position.
Tensor alpha_to_pi_mean(const DirichletParams& params);

QuantizeResult edvae_quantize(const Tensor& z_e, Codebook& codebook, double tau,
                              double clamp_bound, PiMode pi_mode, Phase phase, Rng& rng);

QuantizeResult dvae_quantize(const Tensor& z_e, Codebook& codebook, double tau, Phase phase,
                             Rng& rng);

// Hard nearest-neighbor assignment with straight-through gradients and the
// two auxiliary MSE terms of the VQ loss. Phase-independent.
QuantizeResult vq_quantize(const Tensor& z_e, Codebook& codebook);

// Exponential-moving-average codebook re-estimation from one batch of
// encoder outputs and their assignments.
void ema_update(Codebook& codebook, const Tensor& z_e_values,
                std::span<const int64_t> assignments, double decay);

// Categorical over negated squared distances to the codebook rows.
QuantizeResult gsvq_quantize(const Tensor& z_e, Codebook& codebook, double tau, Phase phase,
                             Rng& rng);

// Soft assignment (..., K) against the codebook, or hard index gather.
Tensor embed(const Tensor& soft_assign, const Codebook& codebook);
Tensor embed(std::span<const int64_t> indices, const Codebook& codebook);

}  // namespace edvae
