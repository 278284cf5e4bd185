#include "edvae/nets.hpp"

#include <cmath>

#include "doctest.h"
#include "edvae/errors.hpp"
#include "oracles.hpp"

using namespace edvae;

namespace {

int64_t count_params(std::vector<NamedParam>& params) {
  int64_t total = 0;
  for (auto& p : params) total += p.tensor.numel();
  return total;
}

void zero_params(std::vector<NamedParam>& params) {
  for (auto& p : params) {
    for (double& v : p.tensor.raw_data()) v = 0.0;
  }
}

// Zero-initialized biases put ReLU pre-activations exactly on the kink at
// dead pixels, where finite differences straddle the documented relu'(0) = 0
// convention. Gradient checks run at a generic point instead.
void jitter_params(std::vector<NamedParam>& params, Rng& rng) {
  for (auto& p : params) {
    for (double& v : p.tensor.raw_data()) v += 0.05 * rng.next_gaussian();
  }
}

}  // namespace

TEST_CASE("res blocks with zeroed convolutions are the identity") {
  Rng rng(3);
  {
    EncResBlock block(8, 8, rng);
    std::vector<NamedParam> params;
    block.collect("b", params);
    zero_params(params);
    Tensor x = oracle::random_tensor({2, 8, 4, 4}, rng, 1.0, false);
    Tensor y = block.forward(x);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }
  {
    DecResBlock block(8, 8, rng);
    std::vector<NamedParam> params;
    block.collect("b", params);
    zero_params(params);
    Tensor x = oracle::random_tensor({1, 8, 6, 6}, rng, 1.0, false);
    Tensor y = block.forward(x);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }
}

TEST_CASE("res blocks preserve spatial shape and emit n channels") {
  Rng rng(5);
  EncResBlock enc(4, 12, rng);
  CHECK(enc.forward(Tensor::zeros({2, 4, 8, 8})).shape() == Shape{2, 12, 8, 8});
  DecResBlock dec(16, 6, rng);
  CHECK(dec.forward(Tensor::zeros({2, 16, 8, 8})).shape() == Shape{2, 6, 8, 8});
}

TEST_CASE("res block gradients match finite differences") {
  Rng rng(7);
  EncResBlock block(3, 5, rng);
  std::vector<NamedParam> params;
  block.collect("b", params);
  jitter_params(params, rng);
  Tensor x = oracle::random_tensor({1, 3, 4, 4}, rng);
  std::vector<Tensor> leaves = {x};
  for (auto& p : params) leaves.push_back(p.tensor);
  auto res = oracle::check_gradients([&]() { return mean(mul(block.forward(x), block.forward(x))); },
                                     leaves);
  CHECK(res.max_rel_err < 1e-4);

  DecResBlock dblock(5, 4, rng);
  std::vector<NamedParam> dparams;
  dblock.collect("b", dparams);
  jitter_params(dparams, rng);
  Tensor z = oracle::random_tensor({1, 5, 4, 4}, rng);
  std::vector<Tensor> dleaves = {z};
  for (auto& p : dparams) dleaves.push_back(p.tensor);
  auto dres = oracle::check_gradients(
      [&]() { return mean(mul(dblock.forward(z), dblock.forward(z))); }, dleaves);
  CHECK(dres.max_rel_err < 1e-4);
}

TEST_CASE("encoder shape contract") {
  Rng rng(11);
  ArchConfig cfg;
  cfg.base_channels = 16;
  cfg.input_extent = 32;
  cfg.latent_channels = 64;
  Encoder enc(cfg, rng);
  Tensor x = oracle::random_tensor({2, 3, 32, 32}, rng, 0.5, false);
  Tensor z = enc.forward(x);
  CHECK(z.shape() == Shape{2, 64, 8, 8});
  for (double v : z.data()) CHECK(std::isfinite(v));
}

TEST_CASE("encoder at paper scale emits 4n = K = 512 channels") {
  Rng rng(12);
  ArchConfig cfg;
  cfg.base_channels = 128;
  cfg.input_extent = 32;
  cfg.latent_channels = 4 * 128;
  Encoder enc(cfg, rng);
  Tensor x = oracle::random_tensor({1, 3, 32, 32}, rng, 0.5, false);
  CHECK(enc.forward(x).shape() == Shape{1, 512, 8, 8});
  std::vector<NamedParam> params;
  enc.collect(params);
  CHECK(count_params(params) == encoder_param_count(cfg));
}

TEST_CASE("encoder parameter count matches the closed form") {
  Rng rng(13);
  for (int n : {4, 8}) {
    ArchConfig cfg;
    cfg.base_channels = n;
    cfg.input_extent = 16;
    cfg.latent_channels = 4 * n;
    Encoder enc(cfg, rng);
    std::vector<NamedParam> params;
    enc.collect(params);
    CHECK(count_params(params) == encoder_param_count(cfg));
  }
}

TEST_CASE("decoder shape contract and round trip") {
  Rng rng(17);
  ArchConfig cfg;
  cfg.base_channels = 16;
  cfg.input_extent = 32;
  cfg.latent_channels = 64;
  Decoder dec(cfg, 16, rng);
  Tensor z_q = oracle::random_tensor({2, 16, 8, 8}, rng, 0.5, false);
  Tensor xhat = dec.forward(z_q);
  CHECK(xhat.shape() == Shape{2, 3, 32, 32});

  std::vector<NamedParam> params;
  dec.collect(params);
  CHECK(count_params(params) == decoder_param_count(cfg, 16));

  // encoder -> decoder round trip preserves batch and spatial shape
  Encoder enc(cfg, rng);
  Tensor x = oracle::random_tensor({2, 3, 32, 32}, rng, 0.5, false);
  Tensor z = enc.forward(x);
  Decoder dec2(cfg, 64, rng);
  CHECK(dec2.forward(z).shape() == x.shape());
}

TEST_CASE("encoder-decoder gradient check on a toy extent") {
  Rng rng(19);
  ArchConfig cfg;
  cfg.base_channels = 2;
  cfg.input_extent = 4;
  cfg.latent_channels = 4;
  cfg.res_blocks_per_stage = 1;
  Encoder enc(cfg, rng);
  Decoder dec(cfg, 4, rng);
  Tensor x = oracle::random_tensor({1, 3, 4, 4}, rng, 0.5);
  std::vector<NamedParam> params;
  enc.collect(params);
  dec.collect(params);
  jitter_params(params, rng);
  std::vector<Tensor> leaves = {x};
  for (auto& p : params) leaves.push_back(p.tensor);
  auto res = oracle::check_gradients(
      [&]() {
        Tensor recon = dec.forward(enc.forward(x));
        Tensor diff = sub(recon, x);
        return mean(mul(diff, diff));
      },
      leaves, 1e-5, 8);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("arch validation") {
  Rng rng(23);
  ArchConfig bad;
  bad.input_extent = 30;  // not divisible by 4
  CHECK_THROWS_AS(Encoder(bad, rng), ConfigError);
  ArchConfig badk;
  badk.first_kernel = 5;
  CHECK_THROWS_AS(Encoder(badk, rng), ConfigError);
}
