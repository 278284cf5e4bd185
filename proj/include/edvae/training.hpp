#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "edvae/data_io.hpp"
#include "edvae/metrics.hpp"
#include "edvae/nets.hpp"
#include "edvae/quantizers.hpp"

namespace edvae {

enum class ModelKind { kEdvae, kDvae, kVqEma, kGsVq };
enum class TauSchedule { kExponential, kCosine };

std::string model_kind_name(ModelKind kind);
ModelKind model_kind_from(const std::string& name);

// Explicit range checks backing divergence detection; 64-bit floats do not
// saturate where 32-bit training would, so leaving the trainable regime is
// declared by bound instead.
struct GuardConfig {
  // Raw encoder logits are harmless to the clamped evidence map at any
  // magnitude a double can square; this bound only catches runaway weights.
  double max_abs_logit = 1e8;
  double max_abs_loss = 1e9;
  double max_abs_grad = 1e9;
};

struct TrainConfig {
  ModelKind model = ModelKind::kEdvae;
  int64_t iterations = 5000;
  int64_t batch_size = 32;
  uint64_t seed = 42;
  int64_t codebook_size = 64;  // K
  int64_t codebook_dim = 8;    // D
  int base_channels = 16;      // n
  int input_extent = 32;
  int first_kernel = 3;
  int res_blocks_per_stage = 2;

  // Paper schedule constants; horizons rescale by iterations / reference so
  // desk-scale runs keep the schedule shape (paper values at T = 150000).
  double lr_start = 1e-3;
  double lr_end = 1.25e-6;
  double beta_max = 0.0;
  TauSchedule tau_schedule = TauSchedule::kExponential;
  std::optional<double> tau_fixed;  // constant-temperature ablation
  double tau_floor = kTauFloor;
  double tau_exp_rate = 1e-5;
  int64_t schedule_reference = 150000;
  int64_t lr_anneal_reference = 50000;
  int64_t beta_warmup_reference = 5000;

  double clamp_max = 20.0;  // EdVAE evidence clamp
  PiMode pi_mode = PiMode::kMean;
  double ema_decay = 0.99;
  double beta_commit = 0.25;
  GuardConfig guards;

  double schedule_scale() const {
    return static_cast<double>(iterations) / static_cast<double>(schedule_reference);
  }
  int64_t lr_anneal_iters() const;
  int64_t beta_warmup_iters() const;
  void validate() const;
};

// v_end + (v_start - v_end) (1 + cos(pi min(t, T)/T)) / 2
double cosine_anneal(double v_start, double v_end, int64_t t, int64_t t_anneal);

double lr_at(const TrainConfig& cfg, int64_t t);
double beta_at(const TrainConfig& cfg, int64_t t);
double tau_at(const TrainConfig& cfg, int64_t t);

// ---- losses ------------------------------------------------------------

struct LossParts {
  Tensor total;
  Tensor mse;
};

// mean squared error + beta * KL(Dir(alpha) || Dir(1,...,1))
LossParts loss_edvae(const Tensor& x, const Tensor& x_hat, const Tensor& kl_term, double beta);
// mean squared error + beta * KL(Cat(pi) || uniform)
LossParts loss_dvae(const Tensor& x, const Tensor& x_hat, const Tensor& kl_term, double beta);
// mean squared error + codebook term (dropped under EMA) + beta_commit * commitment
LossParts loss_vq(const Tensor& x, const Tensor& x_hat, const Tensor& codebook_term,
                  const Tensor& commitment_term, double beta_commit, bool ema_mode);

// ---- optimizer -----------------------------------------------------------

class Adam {
 public:
  Adam() = default;
  explicit Adam(const std::vector<NamedParam>& params);
  void step(std::vector<NamedParam>& params, double lr);
  int64_t steps_taken() const { return step_count_; }

  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

 private:
  int64_t step_count_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

// ---- training session ------------------------------------------------------

struct MetricRecord {
  int64_t iter = 0;
  double loss = 0, mse = 0, kl = 0, beta = 0, tau = 0, lr = 0;
  double perplexity = 0, mean_entropy = 0;
  double mean_uncertainty = 0;  // NaN for models without an evidential head
};

std::string metric_csv_header();
std::string metric_csv_row(const MetricRecord& r);

struct Model {
  ModelKind kind = ModelKind::kEdvae;
  ArchConfig arch;
  Encoder encoder;
  Decoder decoder;
  Codebook codebook;

  static Model build(const TrainConfig& cfg);
  // Gradient-trained parameters (includes the codebook unless EMA-managed).
  std::vector<NamedParam> trainable_params();
  // Everything a checkpoint persists (codebook and EMA state included).
  std::vector<NamedParam> state_params();
};

struct InferResult {
  Tensor reconstructions;  // (B, 3, w, w)
  std::vector<int64_t> indices;
};

struct EvalSummary {
  double perplexity = 0;
  double mse_x1000 = 0;
  double mean_entropy = 0;
  std::vector<int64_t> usage_counts;
  int64_t positions = 0;
};

// Distribution over the codebook per spatial position, shaped (B, N, N, K).
// This is what the entropy heatmaps visualize: alpha/S for EdVAE, softmax
// logits for dVAE, softmax of negated distances for GS-VQ, and one-hot
// nearest-neighbor rows for VQ-EMA.
Tensor assignment_distribution(Model& model, const Tensor& pixels, double clamp_max);

class Session {
 public:
  Session(TrainConfig cfg, std::shared_ptr<const Dataset> data);

  // One training iteration (Alg. 1 body); throws DivergenceError when the
  // run leaves the trainable regime.
  MetricRecord step();

  int64_t iteration() const { return t_; }
  const TrainConfig& config() const { return cfg_; }
  Model& model() { return model_; }

  // Frozen-parameter reconstruction with hard quantization (Alg. 2).
  InferResult infer_batch(const ImageBatch& batch, Rng& rng);

  // Full sequential pass: eval perplexity from hard indices, MSE x 1e3,
  // mean position entropy.
  EvalSummary evaluate(const Dataset& eval_data, uint64_t eval_seed);

 private:
  struct ForwardOut {
    Tensor x_hat;
    QuantizeResult quant;
    Tensor z_e;  // channel-last
  };
  ForwardOut forward(const Tensor& pixels, double tau, Phase phase, Rng& rng);

  TrainConfig cfg_;
  std::shared_ptr<const Dataset> data_;
  Model model_;
  Adam optimizer_;
  std::optional<BatchSampler> sampler_;
  Rng root_;
  int64_t t_ = 0;
};

}  // namespace edvae
