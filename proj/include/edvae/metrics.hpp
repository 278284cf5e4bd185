#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "edvae/stats.hpp"
#include "edvae/tensor.hpp"

namespace edvae {

// Codebook usage tally over hard-quantized indices.
struct UsageHistogram {
  std::vector<int64_t> counts;
  int64_t total = 0;

  explicit UsageHistogram(int64_t k) : counts(static_cast<size_t>(k), 0) {}
  void add(std::span<const int64_t> indices);
};

UsageHistogram usage_histogram(const std::vector<std::vector<int64_t>>& index_grids, int64_t k);

// exp of the entropy of the empirical usage distribution; in [1, K].
double perplexity(const UsageHistogram& h);

struct EntropySummary {
  double mean = 0.0;
  double stddev = 0.0;
};

// Entropy per position over the trailing axis; mean and population standard
// deviation across all positions.
EntropySummary mean_position_entropy(const Tensor& soft_or_pi);

// Per-position entropy grid for one sample, flattened row-major.
std::vector<double> entropy_heatmap(const Tensor& pi);

// Mean over positions of u = K / S.
double mean_uncertainty(const DirichletParams& params);

}  // namespace edvae
