#pragma once

#include <optional>
#include <string>
#include <vector>

#include "edvae/rng.hpp"
#include "edvae/tensor.hpp"

namespace edvae {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Architecture knobs. base_channels is the paper's n; the encoder emits
// latent_channels (the codebook size for dVAE/EdVAE, the embedding dim for
// the VQ family) at a quarter of the input extent.
struct ArchConfig {
  int base_channels = 16;
  int input_extent = 32;
  int first_kernel = 3;  // 3 for 32x32/64x64 inputs, 7 for 128x128
  int latent_channels = 64;
  int res_blocks_per_stage = 2;
};

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  // He-uniform fan-in weights, zero bias.
  Conv2dLayer(int64_t in_ch, int64_t out_ch, int kernel, int padding, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  int64_t param_count() const;

  Tensor weight;  // (out, in, k, k)
  Tensor bias;    // (out, 1, 1), broadcast over batch and space
  int stride = 1;
  int padding = 0;
};

// 3 x (ReLU -> Conv3x3_n) -> ReLU -> Conv1x1_n, plus identity. The first
// block of a stage projects channels with a 1x1 shortcut.
class EncResBlock {
 public:
  EncResBlock() = default;
  EncResBlock(int64_t in_ch, int64_t n, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

 private:
  Conv2dLayer c1_, c2_, c3_, c4_;
  std::optional<Conv2dLayer> shortcut_;
};

// ReLU -> Conv1x1_n -> 3 x (ReLU -> Conv3x3_n), plus identity.
class DecResBlock {
 public:
  DecResBlock() = default;
  DecResBlock(int64_t in_ch, int64_t n, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

 private:
  Conv2dLayer c1_, c2_, c3_, c4_;
  std::optional<Conv2dLayer> shortcut_;
};

// Conv_kw -> [EncResBlock_n]xr -> MaxPool -> [EncResBlock_2n]xr -> MaxPool
// -> [EncResBlock_4n]xr -> Conv1x1 -> (B, latent, w/4, w/4)
class Encoder {
 public:
  Encoder() = default;
  Encoder(const ArchConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(std::vector<NamedParam>& out);

 private:
  Conv2dLayer stem_;
  std::vector<EncResBlock> stage1_, stage2_, stage3_;
  Conv2dLayer head_;
};

// [DecResBlock_4n]xr -> Upsample -> [DecResBlock_2n]xr -> Upsample ->
// [DecResBlock_n]xr -> ReLU -> Conv1x1_3 -> (B, 3, w, w)
class Decoder {
 public:
  Decoder() = default;
  Decoder(const ArchConfig& cfg, int64_t in_channels, Rng& rng);
  Tensor forward(const Tensor& z_q) const;
  void collect(std::vector<NamedParam>& out);

 private:
  std::vector<DecResBlock> stage1_, stage2_, stage3_;
  Conv2dLayer head_;
};

// Closed-form parameter counts for the chains above.
int64_t encoder_param_count(const ArchConfig& cfg);
int64_t decoder_param_count(const ArchConfig& cfg, int64_t in_channels);

}  // namespace edvae
