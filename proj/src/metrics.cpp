#include "edvae/metrics.hpp"

#include <cmath>

#include "edvae/errors.hpp"

namespace edvae {

void UsageHistogram::add(std::span<const int64_t> indices) {
  int64_t k = static_cast<int64_t>(counts.size());
  for (int64_t i : indices) {
    if (i < 0 || i >= k) {
      throw ParamError("usage histogram: index " + std::to_string(i) + " out of range [0, " +
                       std::to_string(k) + ")");
    }
    ++counts[static_cast<size_t>(i)];
    ++total;
  }
}

UsageHistogram usage_histogram(const std::vector<std::vector<int64_t>>& index_grids, int64_t k) {
  UsageHistogram h(k);
  for (const auto& grid : index_grids) h.add(grid);
  return h;
}

double perplexity(const UsageHistogram& h) {
  if (h.total <= 0) throw ParamError("perplexity: empty histogram");
  double entropy = 0.0;
  double total = static_cast<double>(h.total);
  for (int64_t c : h.counts) {
    if (c > 0) {
      double p = static_cast<double>(c) / total;
      entropy -= p * std::log(p);
    }
  }
  return std::exp(entropy);
}

EntropySummary mean_position_entropy(const Tensor& soft_or_pi) {
  Tensor entropies = categorical_entropy(soft_or_pi);
  int64_t n = entropies.numel();
  double mean = 0.0;
  for (double v : entropies.data()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : entropies.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  return {mean, std::sqrt(var)};
}

std::vector<double> entropy_heatmap(const Tensor& pi) {
  Tensor entropies = categorical_entropy(pi);
  return std::vector<double>(entropies.data().begin(), entropies.data().end());
}

double mean_uncertainty(const DirichletParams& params) {
  double k = static_cast<double>(params.k());
  const double* s = params.total.data().data();
  int64_t positions = params.total.numel();
  double acc = 0.0;
  for (int64_t p = 0; p < positions; ++p) acc += k / s[p];
  return acc / static_cast<double>(positions);
}

}  // namespace edvae
