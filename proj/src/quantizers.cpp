#include "edvae/quantizers.hpp"

#include <cmath>

#include "edvae/errors.hpp"

namespace edvae {

namespace {

Tensor init_embeddings(int64_t k, int64_t d, Rng& rng, bool trainable, bool gaussian) {
  if (k <= 0 || d <= 0) throw ParamError("codebook: K and D must be positive");
  std::vector<double> data(static_cast<size_t>(k * d));
  if (gaussian) {
    for (double& v : data) v = rng.next_gaussian();
  } else {
    double limit = 1.0 / static_cast<double>(k);
    for (double& v : data) v = (2.0 * rng.next_double() - 1.0) * limit;
  }
  return Tensor::from_data({k, d}, std::move(data), trainable);
}

// (..., lane) -> (P, lane); remembers the leading shape for reshaping back.
Tensor flatten_positions(const Tensor& x, Shape* leading) {
  if (x.rank() < 1) throw ShapeError("quantize: input must have at least rank 1");
  int64_t lane = x.extent(x.rank() - 1);
  leading->assign(x.shape().begin(), x.shape().end() - 1);
  return reshape(x, {x.numel() / lane, lane});
}

Shape with_trailing(const Shape& leading, int64_t lane) {
  Shape s = leading;
  s.push_back(lane);
  return s;
}

std::vector<int64_t> argmax_rows(const Tensor& rows) {
  int64_t lane = rows.extent(rows.rank() - 1);
  int64_t count = rows.numel() / lane;
  const double* p = rows.data().data();
  std::vector<int64_t> out(static_cast<size_t>(count));
  for (int64_t r = 0; r < count; ++r) {
    int64_t best = 0;
    for (int64_t i = 1; i < lane; ++i) {
      if (p[r * lane + i] > p[r * lane + best]) best = i;
    }
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

std::vector<double> entropy_rows(const Tensor& probs) {
  int64_t lane = probs.extent(probs.rank() - 1);
  int64_t count = probs.numel() / lane;
  const double* p = probs.data().data();
  std::vector<double> out(static_cast<size_t>(count));
  for (int64_t r = 0; r < count; ++r) {
    double h = 0.0;
    for (int64_t i = 0; i < lane; ++i) {
      double v = p[r * lane + i];
      if (v > 0.0) h -= v * std::log(v);
    }
    out[static_cast<size_t>(r)] = h;
  }
  return out;
}

// Gumbel-Softmax sample with the tau floor: below the floor the relaxation is
// evaluated at the floor and the forward value is the hard one-hot of its
// argmax (straight-through).
Tensor relaxed_sample(const Tensor& logits, double tau, Rng& rng,
                      std::vector<int64_t>* hard_indices) {
  if (!(tau > 0.0)) throw ParamError("quantize: tau must be positive, got " + std::to_string(tau));
  Tensor soft = gumbel_softmax_sample(logits, std::max(tau, kTauFloor), rng);
  *hard_indices = argmax_rows(soft);
  if (tau >= kTauFloor) return soft;
  int64_t lane = soft.extent(soft.rank() - 1);
  std::vector<double> onehot(static_cast<size_t>(soft.numel()), 0.0);
  for (size_t r = 0; r < hard_indices->size(); ++r) {
    onehot[r * static_cast<size_t>(lane) + static_cast<size_t>((*hard_indices)[r])] = 1.0;
  }
  Tensor hard = Tensor::from_data(soft.shape(), std::move(onehot), false);
  return straight_through(soft, hard);
}

void check_finite(const Tensor& z_e, const char* where) {
  for (double v : z_e.data()) {
    if (!std::isfinite(v)) {
      throw DivergenceError(-1, where, std::string(where) + ": non-finite encoder output");
    }
  }
}

}  // namespace

Codebook Codebook::gaussian_init(int64_t k, int64_t d, Rng& rng, bool trainable) {
  Codebook cb;
  cb.embeddings = init_embeddings(k, d, rng, trainable, /*gaussian=*/true);
  cb.usage_counts.assign(static_cast<size_t>(k), 0);
  return cb;
}

Codebook Codebook::uniform_init(int64_t k, int64_t d, Rng& rng, bool trainable) {
  Codebook cb;
  cb.embeddings = init_embeddings(k, d, rng, trainable, /*gaussian=*/false);
  cb.usage_counts.assign(static_cast<size_t>(k), 0);
  return cb;
}

void Codebook::enable_ema() {
  EmaState state;
  state.cluster_size = Tensor::full({size()}, 1.0);
  state.embed_sums = Tensor::from_data(
      {size(), dim()}, std::vector<double>(embeddings.data().begin(), embeddings.data().end()),
      false);
  ema = std::move(state);
}

void Codebook::note_usage(std::span<const int64_t> indices) {
  for (int64_t i : indices) {
    if (i < 0 || i >= size()) throw Error("codebook usage: index out of range");
    ++usage_counts[static_cast<size_t>(i)];
  }
}

DirichletParams evidence_to_alpha(const Tensor& z_e, double clamp_bound) {
  if (!(clamp_bound > 0.0)) {
    throw ParamError("evidence_to_alpha: clamp bound must be positive");
  }
  check_finite(z_e, "evidence_to_alpha");
  Tensor alpha = add_scalar(exp(clamp_max(z_e, clamp_bound)), 1.0);
  return DirichletParams::from_alpha(std::move(alpha));
}

Tensor alpha_to_pi_mean(const DirichletParams& params) { return div(params.alpha, params.total); }

QuantizeResult edvae_quantize(const Tensor& z_e, Codebook& codebook, double tau,
                              double clamp_bound, PiMode pi_mode, Phase phase, Rng& rng) {
  if (z_e.extent(z_e.rank() - 1) != codebook.size()) {
    throw ShapeError("edvae_quantize: z_e trailing axis " + shape_str(z_e.shape()) +
                     " must equal codebook size " + std::to_string(codebook.size()));
  }
  Shape leading;
  Tensor flat = flatten_positions(z_e, &leading);
  DirichletParams params = evidence_to_alpha(flat, clamp_bound);

  QuantizeResult result;
  result.kl_term = mean(dirichlet_kl_to_uniform(params));
  {
    // u = K / S per position
    const double* s = params.total.data().data();
    int64_t positions = params.total.numel();
    double acc = 0.0;
    for (int64_t p = 0; p < positions; ++p) acc += static_cast<double>(codebook.size()) / s[p];
    result.mean_uncertainty = acc / static_cast<double>(positions);
  }

  Tensor pi_mean = alpha_to_pi_mean(params);
  Tensor pi = pi_mean;
  if (pi_mode == PiMode::kSampled) {
    Tensor sampled = sample_dirichlet(rng, params);
    // forward uses the draw; gradients flow through the mean path
    pi = straight_through(pi_mean, sampled);
  }
  result.position_entropy = entropy_rows(pi);

  if (phase == Phase::kTrain) {
    result.soft_assign = relaxed_sample(log(pi), tau, rng, &result.hard_indices);
    result.z_q = matmul(result.soft_assign, codebook.embeddings);
    result.soft_assign = reshape(result.soft_assign, with_trailing(leading, codebook.size()));
  } else {
    result.hard_indices = sample_categorical(rng, pi);
    result.z_q = gather_rows(codebook.embeddings, result.hard_indices);
  }
  result.z_q = reshape(result.z_q, with_trailing(leading, codebook.dim()));
  codebook.note_usage(result.hard_indices);
  return result;
}

QuantizeResult dvae_quantize(const Tensor& z_e, Codebook& codebook, double tau, Phase phase,
                             Rng& rng) {
  if (z_e.extent(z_e.rank() - 1) != codebook.size()) {
    throw ShapeError("dvae_quantize: z_e trailing axis " + shape_str(z_e.shape()) +
                     " must equal codebook size " + std::to_string(codebook.size()));
  }
  check_finite(z_e, "dvae_quantize");
  Shape leading;
  Tensor flat = flatten_positions(z_e, &leading);
  Tensor pi = softmax(flat, 1, 1.0);

  QuantizeResult result;
  result.kl_term = mean(categorical_kl_to_uniform(pi));
  result.position_entropy = entropy_rows(pi);

  if (phase == Phase::kTrain) {
    result.soft_assign = relaxed_sample(flat, tau, rng, &result.hard_indices);
    result.z_q = matmul(result.soft_assign, codebook.embeddings);
    result.soft_assign = reshape(result.soft_assign, with_trailing(leading, codebook.size()));
  } else {
    result.hard_indices = sample_categorical(rng, pi);
    result.z_q = gather_rows(codebook.embeddings, result.hard_indices);
  }
  result.z_q = reshape(result.z_q, with_trailing(leading, codebook.dim()));
  codebook.note_usage(result.hard_indices);
  return result;
}

QuantizeResult vq_quantize(const Tensor& z_e, Codebook& codebook) {
  if (z_e.extent(z_e.rank() - 1) != codebook.dim()) {
    throw ShapeError("vq_quantize: z_e trailing axis " + shape_str(z_e.shape()) +
                     " must equal codebook dim " + std::to_string(codebook.dim()));
  }
  check_finite(z_e, "vq_quantize");
  Shape leading;
  Tensor flat = flatten_positions(z_e, &leading);
  int64_t positions = flat.extent(0);
  int64_t d = codebook.dim();
  int64_t k = codebook.size();
  const double* z = flat.data().data();
  const double* e = codebook.embeddings.data().data();

  QuantizeResult result;
  result.hard_indices.resize(static_cast<size_t>(positions));
  for (int64_t p = 0; p < positions; ++p) {
    const double* row = z + p * d;
    double best = 0.0;
    int64_t best_j = 0;
    for (int64_t j = 0; j < k; ++j) {
      double dist = 0.0;
      const double* emb = e + j * d;
      for (int64_t i = 0; i < d; ++i) {
        double diff = row[i] - emb[i];
        dist += diff * diff;
      }
      if (j == 0 || dist < best) {
        best = dist;
        best_j = j;
      }
    }
    result.hard_indices[static_cast<size_t>(p)] = best_j;
  }

  Tensor gathered = gather_rows(codebook.embeddings, result.hard_indices);
  result.z_q = reshape(straight_through(flat, gathered), with_trailing(leading, d));
  Tensor cb_diff = sub(detach(flat), gathered);
  result.codebook_term = mean(mul(cb_diff, cb_diff));
  Tensor commit_diff = sub(flat, detach(gathered));
  result.commitment_term = mean(mul(commit_diff, commit_diff));
  result.kl_term = Tensor::scalar(0.0);
  result.position_entropy.assign(static_cast<size_t>(positions), 0.0);
  codebook.note_usage(result.hard_indices);
  return result;
}

void ema_update(Codebook& codebook, const Tensor& z_e_values,
                std::span<const int64_t> assignments, double decay) {
  if (!(decay > 0.0 && decay < 1.0)) {
    throw ParamError("ema_update: decay must lie in (0, 1), got " + std::to_string(decay));
  }
  if (!codebook.ema) throw ParamError("ema_update: codebook has no EMA state");
  int64_t d = codebook.dim();
  int64_t k = codebook.size();
  int64_t positions = z_e_values.numel() / d;
  if (static_cast<size_t>(positions) != assignments.size()) {
    throw ShapeError("ema_update: assignment count does not match positions");
  }
  std::vector<double> counts(static_cast<size_t>(k), 0.0);
  std::vector<double> sums(static_cast<size_t>(k * d), 0.0);
  const double* z = z_e_values.data().data();
  for (int64_t p = 0; p < positions; ++p) {
    int64_t j = assignments[static_cast<size_t>(p)];
    if (j < 0 || j >= k) throw Error("ema_update: assignment out of range");
    counts[static_cast<size_t>(j)] += 1.0;
    double* dst = sums.data() + j * d;
    const double* src = z + p * d;
    for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
  }
  auto& ema = *codebook.ema;
  auto cluster = ema.cluster_size.raw_data();
  auto table = codebook.embeddings.raw_data();
  auto sums_state = ema.embed_sums.raw_data();
  constexpr double kEps = 1e-5;
  for (int64_t j = 0; j < k; ++j) {
    cluster[static_cast<size_t>(j)] =
        decay * cluster[static_cast<size_t>(j)] + (1.0 - decay) * counts[static_cast<size_t>(j)];
    double* m = sums_state.data() + j * d;
    const double* s = sums.data() + j * d;
    double denom = cluster[static_cast<size_t>(j)] + kEps;
    for (int64_t i = 0; i < d; ++i) {
      m[i] = decay * m[i] + (1.0 - decay) * s[i];
      table[static_cast<size_t>(j * d + i)] = m[i] / denom;
    }
  }
}

QuantizeResult gsvq_quantize(const Tensor& z_e, Codebook& codebook, double tau, Phase phase,
                             Rng& rng) {
  if (z_e.extent(z_e.rank() - 1) != codebook.dim()) {
    throw ShapeError("gsvq_quantize: z_e trailing axis " + shape_str(z_e.shape()) +
                     " must equal codebook dim " + std::to_string(codebook.dim()));
  }
  check_finite(z_e, "gsvq_quantize");
  Shape leading;
  Tensor flat = flatten_positions(z_e, &leading);
  int64_t positions = flat.extent(0);
  // logits_j = -||z_e - e_j||^2
  Tensor expanded = reshape(flat, {positions, 1, codebook.dim()});
  Tensor diff = sub(expanded, codebook.embeddings);
  Tensor logits = mul_scalar(sum(mul(diff, diff), 2), -1.0);
  Tensor pi = softmax(logits, 1, 1.0);

  QuantizeResult result;
  result.kl_term = mean(categorical_kl_to_uniform(pi));
  result.position_entropy = entropy_rows(pi);

  if (phase == Phase::kTrain) {
    result.soft_assign = relaxed_sample(logits, tau, rng, &result.hard_indices);
    result.z_q = matmul(result.soft_assign, codebook.embeddings);
    result.soft_assign = reshape(result.soft_assign, with_trailing(leading, codebook.size()));
  } else {
    result.hard_indices = sample_categorical(rng, pi);
    result.z_q = gather_rows(codebook.embeddings, result.hard_indices);
  }
  result.z_q = reshape(result.z_q, with_trailing(leading, codebook.dim()));
  codebook.note_usage(result.hard_indices);
  return result;
}

Tensor embed(const Tensor& soft_assign, const Codebook& codebook) {
  if (soft_assign.extent(soft_assign.rank() - 1) != codebook.size()) {
    throw ShapeError("embed: assignment trailing axis must equal codebook size");
  }
  int64_t lane = codebook.size();
  const double* p = soft_assign.data().data();
  int64_t rows = soft_assign.numel() / lane;
  for (int64_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (int64_t i = 0; i < lane; ++i) {
      double v = p[r * lane + i];
      if (!(v >= 0.0)) throw ParamError("embed: negative assignment weight");
      total += v;
    }
    if (std::fabs(total - 1.0) > 1e-6) {
      throw ParamError("embed: assignment row sums to " + std::to_string(total));
    }
  }
  Shape leading;
  Tensor flat = flatten_positions(soft_assign, &leading);
  Tensor z_q = matmul(flat, codebook.embeddings);
  return reshape(z_q, with_trailing(leading, codebook.dim()));
}

Tensor embed(std::span<const int64_t> indices, const Codebook& codebook) {
  return gather_rows(codebook.embeddings, indices);
}

}  // namespace edvae
