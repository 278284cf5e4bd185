#include "edvae/nets.hpp"

#include <cmath>

#include "edvae/errors.hpp"

namespace edvae {

Conv2dLayer::Conv2dLayer(int64_t in_ch, int64_t out_ch, int kernel, int padding, Rng& rng)
    : stride(1), padding(padding) {
  // He-uniform fan-in scale. The residual chains carry no normalization, so
  // initial encoder logits already span the clamp range like the trained
  // models do.
  int64_t fan_in = in_ch * kernel * kernel;
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> w(static_cast<size_t>(out_ch * in_ch * kernel * kernel));
  for (double& v : w) v = (2.0 * rng.next_double() - 1.0) * limit;
  weight = Tensor::from_data({out_ch, in_ch, kernel, kernel}, std::move(w), true);
  bias = Tensor::zeros({out_ch, 1, 1}, true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return add(conv2d(x, weight, stride, padding), bias);
}

void Conv2dLayer::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

int64_t Conv2dLayer::param_count() const { return weight.numel() + bias.extent(0); }

EncResBlock::EncResBlock(int64_t in_ch, int64_t n, Rng& rng)
    : c1_(in_ch, n, 3, 1, rng),
      c2_(n, n, 3, 1, rng),
      c3_(n, n, 3, 1, rng),
      c4_(n, n, 1, 0, rng) {
  if (in_ch != n) shortcut_.emplace(in_ch, n, 1, 0, rng);
}

Tensor EncResBlock::forward(const Tensor& x) const {
  Tensor h = c1_.forward(relu(x));
  h = c2_.forward(relu(h));
  h = c3_.forward(relu(h));
  h = c4_.forward(relu(h));
  return add(h, shortcut_ ? shortcut_->forward(x) : x);
}

void EncResBlock::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  c1_.collect(prefix + ".c1", out);
  c2_.collect(prefix + ".c2", out);
  c3_.collect(prefix + ".c3", out);
  c4_.collect(prefix + ".c4", out);
  if (shortcut_) shortcut_->collect(prefix + ".shortcut", out);
}

DecResBlock::DecResBlock(int64_t in_ch, int64_t n, Rng& rng)
    : c1_(in_ch, n, 1, 0, rng),
      c2_(n, n, 3, 1, rng),
      c3_(n, n, 3, 1, rng),
      c4_(n, n, 3, 1, rng) {
  if (in_ch != n) shortcut_.emplace(in_ch, n, 1, 0, rng);
}

Tensor DecResBlock::forward(const Tensor& x) const {
  Tensor h = c1_.forward(relu(x));
  h = c2_.forward(relu(h));
  h = c3_.forward(relu(h));
  h = c4_.forward(relu(h));
  return add(h, shortcut_ ? shortcut_->forward(x) : x);
}

void DecResBlock::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  c1_.collect(prefix + ".c1", out);
  c2_.collect(prefix + ".c2", out);
  c3_.collect(prefix + ".c3", out);
  c4_.collect(prefix + ".c4", out);
  if (shortcut_) shortcut_->collect(prefix + ".shortcut", out);
}

namespace {

void validate_arch(const ArchConfig& cfg) {
  if (cfg.input_extent <= 0 || cfg.input_extent % 4 != 0) {
    throw ConfigError("arch: input extent must be a positive multiple of 4, got " +
                      std::to_string(cfg.input_extent));
  }
  if (cfg.first_kernel != 3 && cfg.first_kernel != 7) {
    throw ConfigError("arch: first kernel must be 3 or 7, got " +
                      std::to_string(cfg.first_kernel));
  }
  if (cfg.base_channels <= 0 || cfg.latent_channels <= 0 || cfg.res_blocks_per_stage <= 0) {
    throw ConfigError("arch: channels and block counts must be positive");
  }
}

}  // namespace

Encoder::Encoder(const ArchConfig& cfg, Rng& rng) {
  validate_arch(cfg);
  int64_t n = cfg.base_channels;
  stem_ = Conv2dLayer(3, n, cfg.first_kernel, cfg.first_kernel / 2, rng);
  for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
    stage1_.emplace_back(n, n, rng);
  }
  for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
    stage2_.emplace_back(b == 0 ? n : 2 * n, 2 * n, rng);
  }
  for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
    stage3_.emplace_back(b == 0 ? 2 * n : 4 * n, 4 * n, rng);
  }
  head_ = Conv2dLayer(4 * n, cfg.latent_channels, 1, 0, rng);
}

Tensor Encoder::forward(const Tensor& x) const {
  Tensor h = stem_.forward(x);
  for (const auto& block : stage1_) h = block.forward(h);
  h = maxpool2(h);
  for (const auto& block : stage2_) h = block.forward(h);
  h = maxpool2(h);
  for (const auto& block : stage3_) h = block.forward(h);
  return head_.forward(h);
}

void Encoder::collect(std::vector<NamedParam>& out) {
  stem_.collect("encoder.stem", out);
  for (size_t b = 0; b < stage1_.size(); ++b) {
    stage1_[b].collect("encoder.stage1.block" + std::to_string(b), out);
  }
  for (size_t b = 0; b < stage2_.size(); ++b) {
    stage2_[b].collect("encoder.stage2.block" + std::to_string(b), out);
  }
  for (size_t b = 0; b < stage3_.size(); ++b) {
    stage3_[b].collect("encoder.stage3.block" + std::to_string(b), out);
  }
  head_.collect("encoder.head", out);
}

Decoder::Decoder(const ArchConfig& cfg, int64_t in_channels, Rng& rng) {
  validate_arch(cfg);
  if (in_channels <= 0) throw ConfigError("decoder: input channels must be positive");
  int64_t n = cfg.base_channels;
  for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
    stage1_.emplace_back(b == 0 ? in_channels : 4 * n, 4 * n, rng);
  }
  for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
    stage2_.emplace_back(b == 0 ? 4 * n : 2 * n, 2 * n, rng);
  }
  for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
    stage3_.emplace_back(b == 0 ? 2 * n : n, n, rng);
  }
  head_ = Conv2dLayer(n, 3, 1, 0, rng);
}

Tensor Decoder::forward(const Tensor& z_q) const {
  Tensor h = z_q;
  for (const auto& block : stage1_) h = block.forward(h);
  h = upsample_nearest2(h);
  for (const auto& block : stage2_) h = block.forward(h);
  h = upsample_nearest2(h);
  for (const auto& block : stage3_) h = block.forward(h);
  return head_.forward(relu(h));
}

void Decoder::collect(std::vector<NamedParam>& out) {
  for (size_t b = 0; b < stage1_.size(); ++b) {
    stage1_[b].collect("decoder.stage1.block" + std::to_string(b), out);
  }
  for (size_t b = 0; b < stage2_.size(); ++b) {
    stage2_[b].collect("decoder.stage2.block" + std::to_string(b), out);
  }
  for (size_t b = 0; b < stage3_.size(); ++b) {
    stage3_[b].collect("decoder.stage3.block" + std::to_string(b), out);
  }
  head_.collect("decoder.head", out);
}

namespace {

int64_t conv_params(int64_t in_ch, int64_t out_ch, int64_t k) {
  return out_ch * in_ch * k * k + out_ch;
}

int64_t enc_block_params(int64_t in_ch, int64_t n) {
  int64_t total = conv_params(in_ch, n, 3) + 2 * conv_params(n, n, 3) + conv_params(n, n, 1);
  if (in_ch != n) total += conv_params(in_ch, n, 1);
  return total;
}

int64_t dec_block_params(int64_t in_ch, int64_t n) {
  int64_t total = conv_params(in_ch, n, 1) + 3 * conv_params(n, n, 3);
  if (in_ch != n) total += conv_params(in_ch, n, 1);
  return total;
}

}  // namespace

int64_t encoder_param_count(const ArchConfig& cfg) {
  int64_t n = cfg.base_channels;
  int64_t r = cfg.res_blocks_per_stage;
  int64_t total = conv_params(3, n, cfg.first_kernel);
  total += enc_block_params(n, n) * r;
  total += enc_block_params(n, 2 * n) + enc_block_params(2 * n, 2 * n) * (r - 1);
  total += enc_block_params(2 * n, 4 * n) + enc_block_params(4 * n, 4 * n) * (r - 1);
  total += conv_params(4 * n, cfg.latent_channels, 1);
  return total;
}

int64_t decoder_param_count(const ArchConfig& cfg, int64_t in_channels) {
  int64_t n = cfg.base_channels;
  int64_t r = cfg.res_blocks_per_stage;
  int64_t total = dec_block_params(in_channels, 4 * n) + dec_block_params(4 * n, 4 * n) * (r - 1);
  total += dec_block_params(4 * n, 2 * n) + dec_block_params(2 * n, 2 * n) * (r - 1);
  total += dec_block_params(2 * n, n) + dec_block_params(n, n) * (r - 1);
  total += conv_params(n, 3, 1);
  return total;
}

}  // namespace edvae
