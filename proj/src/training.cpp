#include "edvae/training.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

#include "edvae/errors.hpp"

namespace edvae {

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kEdvae: return "edvae";
    case ModelKind::kDvae: return "dvae";
    case ModelKind::kVqEma: return "vq_ema";
    case ModelKind::kGsVq: return "gs_vq";
  }
  throw Error("unreachable model kind");
}

ModelKind model_kind_from(const std::string& name) {
  if (name == "edvae") return ModelKind::kEdvae;
  if (name == "dvae") return ModelKind::kDvae;
  if (name == "vq_ema") return ModelKind::kVqEma;
  if (name == "gs_vq") return ModelKind::kGsVq;
  throw ConfigError("unknown model kind: " + name +
                    " (expected edvae, dvae, vq_ema, or gs_vq)");
}

int64_t TrainConfig::lr_anneal_iters() const {
  return std::max<int64_t>(1, std::llround(static_cast<double>(lr_anneal_reference) * schedule_scale()));
}

int64_t TrainConfig::beta_warmup_iters() const {
  return std::max<int64_t>(1, std::llround(static_cast<double>(beta_warmup_reference) * schedule_scale()));
}

void TrainConfig::validate() const {
  if (iterations <= 0) throw ConfigError("config: iterations must be positive");
  if (batch_size <= 0) throw ConfigError("config: batch_size must be positive");
  if (codebook_size <= 0 || codebook_dim <= 0) {
    throw ConfigError("config: codebook size and dim must be positive");
  }
  if (!(lr_start > 0.0) || !(lr_end > 0.0)) {
    throw ConfigError("config: learning-rate endpoints must be positive");
  }
  if (!(beta_max >= 0.0)) throw ConfigError("config: beta_max must be nonnegative");
  if (!(clamp_max > 0.0)) throw ConfigError("config: clamp_max must be positive");
  if (!(tau_floor > 0.0)) throw ConfigError("config: tau_floor must be positive");
  if (tau_fixed && !(*tau_fixed > 0.0)) throw ConfigError("config: fixed tau must be positive");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("config: ema_decay must be in (0,1)");
  if (iterations <= beta_warmup_iters() && iterations > 30) {
    throw ConfigError("config: iterations must exceed the beta warmup length");
  }
  if (input_extent <= 0 || input_extent % 4 != 0) {
    throw ConfigError("config: input extent must be a positive multiple of 4");
  }
}

double cosine_anneal(double v_start, double v_end, int64_t t, int64_t t_anneal) {
  if (t_anneal <= 0) throw ParamError("cosine_anneal: horizon must be positive");
  if (t < 0) throw ParamError("cosine_anneal: negative step");
  double clamped = static_cast<double>(std::min(t, t_anneal));
  double phase = std::numbers::pi * clamped / static_cast<double>(t_anneal);
  return v_end + 0.5 * (v_start - v_end) * (1.0 + std::cos(phase));
}

double lr_at(const TrainConfig& cfg, int64_t t) {
  return cosine_anneal(cfg.lr_start, cfg.lr_end, t, cfg.lr_anneal_iters());
}

double beta_at(const TrainConfig& cfg, int64_t t) {
  return cosine_anneal(0.0, cfg.beta_max, t, cfg.beta_warmup_iters());
}

double tau_at(const TrainConfig& cfg, int64_t t) {
  if (cfg.tau_fixed) return *cfg.tau_fixed;
  if (cfg.tau_schedule == TauSchedule::kCosine) {
    return cosine_anneal(1.0, cfg.tau_floor, t, cfg.iterations);
  }
  // Appendix-style exponential decay, rescaled to the desk horizon.
  return std::exp(-cfg.tau_exp_rate * static_cast<double>(t) / cfg.schedule_scale());
}

// ---- losses -----------------------------------------------------------------

namespace {

Tensor mse_of(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("loss: shape mismatch between input " + shape_str(x.shape()) +
                     " and reconstruction " + shape_str(x_hat.shape()));
  }
  Tensor diff = sub(x, x_hat);
  return mean(mul(diff, diff));
}

void check_scalar(const Tensor& t, const char* what) {
  if (!t.defined() || t.numel() != 1) throw ShapeError(std::string(what) + " must be a scalar");
}

}  // namespace

LossParts loss_edvae(const Tensor& x, const Tensor& x_hat, const Tensor& kl_term, double beta) {
  check_scalar(kl_term, "kl_term");
  Tensor mse = mse_of(x, x_hat);
  return {add(mse, mul_scalar(kl_term, beta)), mse};
}

LossParts loss_dvae(const Tensor& x, const Tensor& x_hat, const Tensor& kl_term, double beta) {
  return loss_edvae(x, x_hat, kl_term, beta);
}

LossParts loss_vq(const Tensor& x, const Tensor& x_hat, const Tensor& codebook_term,
                  const Tensor& commitment_term, double beta_commit, bool ema_mode) {
  check_scalar(codebook_term, "codebook_term");
  check_scalar(commitment_term, "commitment_term");
  Tensor mse = mse_of(x, x_hat);
  Tensor total = add(mse, mul_scalar(commitment_term, beta_commit));
  if (!ema_mode) total = add(total, codebook_term);
  return {total, mse};
}

// ---- optimizer ----------------------------------------------------------------

Adam::Adam(const std::vector<NamedParam>& params) {
  first_.reserve(params.size());
  second_.reserve(params.size());
  for (const auto& p : params) {
    first_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
    second_.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
  }
}

void Adam::step(std::vector<NamedParam>& params, double lr) {
  if (params.size() != first_.size()) throw ParamError("adam: parameter list changed");
  ++step_count_;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.has_grad()) continue;  // parameter untouched this step
    auto grad = p.tensor.grad();
    auto value = p.tensor.raw_data();
    auto& m = first_[i];
    auto& v = second_[i];
    for (size_t j = 0; j < value.size(); ++j) {
      double g = grad[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      value[j] -= lr * mhat / (std::sqrt(vhat) + epsilon);
    }
  }
}

// ---- metric CSV -----------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string metric_csv_header() {
  return "iter,loss,mse,kl,beta,tau,lr,perplexity,mean_entropy,mean_uncertainty";
}

std::string metric_csv_row(const MetricRecord& r) {
  std::string out = std::to_string(r.iter);
  for (double v : {r.loss, r.mse, r.kl, r.beta, r.tau, r.lr, r.perplexity, r.mean_entropy,
                   r.mean_uncertainty}) {
    out += ',';
    out += fmt_double(v);
  }
  return out;
}

// ---- model ----------------------------------------------------------------------

Model Model::build(const TrainConfig& cfg) {
  cfg.validate();
  Model model;
  model.kind = cfg.model;
  model.arch.base_channels = cfg.base_channels;
  model.arch.input_extent = cfg.input_extent;
  model.arch.first_kernel = cfg.first_kernel;
  model.arch.res_blocks_per_stage = cfg.res_blocks_per_stage;
  bool distribution_over_codebook =
      cfg.model == ModelKind::kEdvae || cfg.model == ModelKind::kDvae;
  model.arch.latent_channels =
      static_cast<int>(distribution_over_codebook ? cfg.codebook_size : cfg.codebook_dim);

  Rng seed_rng(cfg.seed);
  Rng enc_rng = seed_rng.stream("init-encoder");
  Rng dec_rng = seed_rng.stream("init-decoder");
  Rng cb_rng = seed_rng.stream("init-codebook");
  model.encoder = Encoder(model.arch, enc_rng);
  model.decoder = Decoder(model.arch, cfg.codebook_dim, dec_rng);
  if (distribution_over_codebook) {
    model.codebook = Codebook::gaussian_init(cfg.codebook_size, cfg.codebook_dim, cb_rng, true);
  } else if (cfg.model == ModelKind::kGsVq) {
    model.codebook = Codebook::uniform_init(cfg.codebook_size, cfg.codebook_dim, cb_rng, true);
  } else {
    model.codebook = Codebook::uniform_init(cfg.codebook_size, cfg.codebook_dim, cb_rng, false);
    model.codebook.enable_ema();
  }
  return model;
}

std::vector<NamedParam> Model::trainable_params() {
  std::vector<NamedParam> params;
  encoder.collect(params);
  decoder.collect(params);
  if (codebook.embeddings.requires_grad()) {
    params.push_back({"codebook.embeddings", codebook.embeddings});
  }
  return params;
}

std::vector<NamedParam> Model::state_params() {
  std::vector<NamedParam> params;
  encoder.collect(params);
  decoder.collect(params);
  params.push_back({"codebook.embeddings", codebook.embeddings});
  if (codebook.ema) {
    params.push_back({"codebook.ema_cluster_size", codebook.ema->cluster_size});
    params.push_back({"codebook.ema_sums", codebook.ema->embed_sums});
  }
  return params;
}

// ---- session ---------------------------------------------------------------------

namespace {

void throw_divergence(int64_t iter, const std::string& quantity, const std::string& detail) {
  throw DivergenceError(iter, quantity,
                        "divergence at iteration " + std::to_string(iter) + ": " + quantity +
                            " " + detail);
}

void guard_tensor(const Tensor& t, double bound, int64_t iter, const std::string& quantity) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw_divergence(iter, quantity, "is non-finite");
    if (std::fabs(v) > bound) {
      throw_divergence(iter, quantity,
                       "magnitude " + std::to_string(std::fabs(v)) + " exceeds guard " +
                           std::to_string(bound));
    }
  }
}

double batch_perplexity(std::span<const int64_t> indices, int64_t k) {
  UsageHistogram h(k);
  h.add(indices);
  return perplexity(h);
}

double mean_of(std::span<const double> values) {
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc / static_cast<double>(values.size());
}

}  // namespace

Tensor assignment_distribution(Model& model, const Tensor& pixels, double clamp_max) {
  Tensor z_e = nchw_to_nhwc(model.encoder.forward(pixels));
  const Shape& s = z_e.shape();
  int64_t k = model.codebook.size();
  switch (model.kind) {
    case ModelKind::kEdvae:
      return alpha_to_pi_mean(evidence_to_alpha(z_e, clamp_max));
    case ModelKind::kDvae:
      return softmax(z_e, z_e.rank() - 1, 1.0);
    case ModelKind::kGsVq: {
      int64_t positions = z_e.numel() / model.codebook.dim();
      Tensor expanded = reshape(z_e, {positions, 1, model.codebook.dim()});
      Tensor diff = sub(expanded, model.codebook.embeddings);
      Tensor logits = mul_scalar(sum(mul(diff, diff), 2), -1.0);
      Tensor pi = softmax(logits, 1, 1.0);
      return reshape(pi, {s[0], s[1], s[2], k});
    }
    case ModelKind::kVqEma: {
      QuantizeResult q = vq_quantize(z_e, model.codebook);
      std::vector<double> onehot(static_cast<size_t>(s[0] * s[1] * s[2] * k), 0.0);
      for (size_t p = 0; p < q.hard_indices.size(); ++p) {
        onehot[p * static_cast<size_t>(k) + static_cast<size_t>(q.hard_indices[p])] = 1.0;
      }
      return Tensor::from_data({s[0], s[1], s[2], k}, std::move(onehot), false);
    }
  }
  throw Error("unreachable model kind");
}

Session::Session(TrainConfig cfg, std::shared_ptr<const Dataset> data)
    : cfg_(std::move(cfg)), data_(std::move(data)), model_(Model::build(cfg_)), root_(cfg_.seed) {
  if (!data_) throw ParamError("session: null dataset");
  if (data_->extent() != cfg_.input_extent) {
    throw ConfigError("session: dataset extent " + std::to_string(data_->extent()) +
                      " does not match configured input extent " +
                      std::to_string(cfg_.input_extent));
  }
  sampler_.emplace(data_->size(), cfg_.batch_size, root_.stream("batch-sampler"));
  optimizer_ = Adam(model_.trainable_params());
}

Session::ForwardOut Session::forward(const Tensor& pixels, double tau, Phase phase, Rng& rng) {
  ForwardOut out;
  Tensor z_e_grid = model_.encoder.forward(pixels);
  out.z_e = nchw_to_nhwc(z_e_grid);
  switch (model_.kind) {
    case ModelKind::kEdvae:
      out.quant = edvae_quantize(out.z_e, model_.codebook, tau, cfg_.clamp_max, cfg_.pi_mode,
                                 phase, rng);
      break;
    case ModelKind::kDvae:
      out.quant = dvae_quantize(out.z_e, model_.codebook, tau, phase, rng);
      break;
    case ModelKind::kVqEma:
      out.quant = vq_quantize(out.z_e, model_.codebook);
      break;
    case ModelKind::kGsVq:
      out.quant = gsvq_quantize(out.z_e, model_.codebook, tau, phase, rng);
      break;
  }
  out.x_hat = model_.decoder.forward(nhwc_to_nchw(out.quant.z_q));
  return out;
}

MetricRecord Session::step() {
  int64_t iter = t_;
  double lr = lr_at(cfg_, iter);
  double beta = beta_at(cfg_, iter);
  double tau = tau_at(cfg_, iter);

  ImageBatch batch = fetch_batch(*data_, sampler_->next());
  Rng step_rng = root_.stream("step", static_cast<uint64_t>(iter));

  Tape tape;
  MetricRecord record;
  record.iter = iter;
  record.beta = beta;
  record.tau = tau;
  record.lr = lr;
  try {
    Tape::Scope scope(tape);
    ForwardOut fwd = forward(batch.pixels, tau, Phase::kTrain, step_rng);
    guard_tensor(fwd.z_e, cfg_.guards.max_abs_logit, iter, "encoder_logits");

    LossParts parts;
    double kl_value = 0.0;
    switch (model_.kind) {
      case ModelKind::kEdvae:
        parts = loss_edvae(batch.pixels, fwd.x_hat, fwd.quant.kl_term, beta);
        kl_value = fwd.quant.kl_term.item();
        break;
      case ModelKind::kDvae:
        parts = loss_dvae(batch.pixels, fwd.x_hat, fwd.quant.kl_term, beta);
        kl_value = fwd.quant.kl_term.item();
        break;
      case ModelKind::kGsVq:
        parts = loss_dvae(batch.pixels, fwd.x_hat, fwd.quant.kl_term, beta);
        kl_value = fwd.quant.kl_term.item();
        break;
      case ModelKind::kVqEma:
        parts = loss_vq(batch.pixels, fwd.x_hat, fwd.quant.codebook_term,
                        fwd.quant.commitment_term, cfg_.beta_commit, /*ema_mode=*/true);
        // the commitment term plays the regularizer column in the CSV
        kl_value = fwd.quant.commitment_term.item();
        record.beta = cfg_.beta_commit;
        break;
    }
    guard_tensor(parts.total, cfg_.guards.max_abs_loss, iter, "loss");

    tape.backward(parts.total);
    auto params = model_.trainable_params();
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double g : p.tensor.grad()) {
        if (!std::isfinite(g)) throw_divergence(iter, "gradient(" + p.name + ")", "is non-finite");
        if (std::fabs(g) > cfg_.guards.max_abs_grad) {
          throw_divergence(iter, "gradient(" + p.name + ")",
                           "magnitude " + std::to_string(std::fabs(g)) + " exceeds guard " +
                               std::to_string(cfg_.guards.max_abs_grad));
        }
      }
    }
    optimizer_.step(params, lr);
    if (model_.kind == ModelKind::kVqEma) {
      ema_update(model_.codebook, detach(fwd.z_e), fwd.quant.hard_indices, cfg_.ema_decay);
    }

    record.loss = parts.total.item();
    record.mse = parts.mse.item();
    record.kl = kl_value;
    record.perplexity = batch_perplexity(fwd.quant.hard_indices, model_.codebook.size());
    record.mean_entropy = mean_of(fwd.quant.position_entropy);
    record.mean_uncertainty =
        fwd.quant.mean_uncertainty ? *fwd.quant.mean_uncertainty : std::nan("");
  } catch (DivergenceError& e) {
    if (e.iteration() < 0) {
      throw DivergenceError(iter, e.quantity(),
                            "divergence at iteration " + std::to_string(iter) + ": " + e.what());
    }
    throw;
  } catch (const DomainError& e) {
    // log/exp domain violations inside the graph mean the run left the
    // trainable regime
    throw DivergenceError(iter, "math_domain",
                          "divergence at iteration " + std::to_string(iter) + ": " + e.what());
  }
  ++t_;
  return record;
}

InferResult Session::infer_batch(const ImageBatch& batch, Rng& rng) {
  ForwardOut fwd = forward(batch.pixels, 1.0, Phase::kInfer, rng);
  return {fwd.x_hat, fwd.quant.hard_indices};
}

EvalSummary Session::evaluate(const Dataset& eval_data, uint64_t eval_seed) {
  if (eval_data.extent() != cfg_.input_extent) {
    throw ConfigError("evaluate: dataset extent mismatch");
  }
  Rng rng(eval_seed);
  UsageHistogram histogram(model_.codebook.size());
  double sq_sum = 0.0;
  int64_t pixel_count = 0;
  double entropy_sum = 0.0;
  int64_t position_count = 0;

  int64_t n = eval_data.size();
  int64_t step = std::min<int64_t>(cfg_.batch_size, n);
  for (int64_t begin = 0; begin < n; begin += step) {
    int64_t count = std::min(step, n - begin);
    std::vector<int64_t> indices(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) indices[static_cast<size_t>(i)] = begin + i;
    ImageBatch batch = fetch_batch(eval_data, indices);
    Rng batch_rng = rng.stream("eval-batch", static_cast<uint64_t>(begin));
    ForwardOut fwd = forward(batch.pixels, 1.0, Phase::kInfer, batch_rng);
    histogram.add(fwd.quant.hard_indices);
    auto want = batch.pixels.data();
    auto got = fwd.x_hat.data();
    for (size_t i = 0; i < want.size(); ++i) {
      double diff = want[i] - got[i];
      sq_sum += diff * diff;
    }
    pixel_count += batch.pixels.numel();
    for (double h : fwd.quant.position_entropy) entropy_sum += h;
    position_count += static_cast<int64_t>(fwd.quant.position_entropy.size());
  }

  EvalSummary summary;
  summary.perplexity = perplexity(histogram);
  summary.mse_x1000 = 1000.0 * sq_sum / static_cast<double>(pixel_count);
  summary.mean_entropy = entropy_sum / static_cast<double>(position_count);
  summary.usage_counts = histogram.counts;
  summary.positions = histogram.total;
  return summary;
}

}  // namespace edvae
