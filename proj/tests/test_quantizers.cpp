#include "edvae/quantizers.hpp"

#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "edvae/errors.hpp"
#include "edvae/special_functions.hpp"
#include "oracles.hpp"

using namespace edvae;

namespace {

double direct_dirichlet_kl(const std::vector<double>& alpha) {
  double s = 0.0;
  for (double a : alpha) s += a;
  double kl = log_gamma(s) - log_gamma(static_cast<double>(alpha.size()));
  for (double a : alpha) kl += -log_gamma(a) + (a - 1.0) * (digamma(a) - digamma(s));
  return kl;
}

}  // namespace

TEST_CASE("evidence_to_alpha values and clamped gradient") {
  Tensor zero = Tensor::zeros({2, 3});
  DirichletParams p = evidence_to_alpha(zero, 20.0);
  for (double a : p.alpha.data()) CHECK(a == 2.0);

  Tensor ln3 = Tensor::full({4}, std::log(3.0));
  CHECK(evidence_to_alpha(ln3, 20.0).alpha.data()[0] == doctest::Approx(4.0).epsilon(1e-12));

  Tensor hot = Tensor::from_data({2}, {25.0, 1.0}, true);
  Tape tape;
  Tape::Scope scope(tape);
  DirichletParams clamped = evidence_to_alpha(hot, 20.0);
  CHECK(clamped.alpha.data()[0] == doctest::Approx(std::exp(20.0) + 1.0));
  tape.backward(sum(clamped.alpha));
  CHECK(hot.grad()[0] == 0.0);
  CHECK(hot.grad()[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-12));

  Tensor bad = Tensor::from_data({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(evidence_to_alpha(bad, 20.0), DivergenceError);
  CHECK_THROWS_AS(evidence_to_alpha(zero, 0.0), ParamError);
}

TEST_CASE("alpha_to_pi_mean values and gradient") {
  DirichletParams p22 = DirichletParams::from_alpha(Tensor::from_data({2}, {2.0, 2.0}));
  Tensor pi = alpha_to_pi_mean(p22);
  CHECK(pi.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

  DirichletParams p422 = DirichletParams::from_alpha(Tensor::from_data({3}, {4.0, 2.0, 2.0}));
  Tensor pi3 = alpha_to_pi_mean(p422);
  CHECK(pi3.data()[0] == doctest::Approx(0.50).epsilon(1e-15));
  CHECK(pi3.data()[1] == doctest::Approx(0.25).epsilon(1e-15));

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> av(8);
    for (double& v : av) v = 1.1 + 5.0 * rng.next_double();
    Tensor alpha = Tensor::from_data({2, 4}, std::move(av), true);
    Tensor probe = oracle::random_tensor({2, 4}, rng, 1.0, false);
    auto res = oracle::check_gradients(
        [&]() {
          return sum(mul(alpha_to_pi_mean(DirichletParams::from_alpha(alpha)), probe));
        },
        {alpha});
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("edvae_quantize on all-zero logits") {
  Rng rng(5);
  Codebook cb = Codebook::gaussian_init(8, 4, rng, true);
  Tensor z_e = Tensor::zeros({3, 3, 8});
  Rng qrng(11);
  QuantizeResult q = edvae_quantize(z_e, cb, 1e9, 20.0, PiMode::kMean, Phase::kTrain, qrng);

  // kl equals the direct formula at alpha = (2,...,2)
  CHECK(q.kl_term.item() ==
        doctest::Approx(direct_dirichlet_kl(std::vector<double>(8, 2.0))).epsilon(1e-12));
  CHECK(q.kl_term.item() > 0.0);
  // u = K/S = 8/16
  CHECK(q.mean_uncertainty.has_value());
  CHECK(*q.mean_uncertainty == doctest::Approx(0.5).epsilon(1e-12));
  // tau -> inf: z_q approaches the codebook column mean
  for (int64_t dim = 0; dim < 4; ++dim) {
    double col = 0.0;
    for (int64_t j = 0; j < 8; ++j) col += cb.embeddings.at({j, dim});
    col /= 8.0;
    CHECK(q.z_q.at({0, 0, dim}) == doctest::Approx(col).epsilon(1e-6));
  }
  // uniform pi means maximum entropy at every position
  for (double h : q.position_entropy) CHECK(h == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  CHECK(q.z_q.shape() == Shape{3, 3, 4});
  CHECK(q.soft_assign.shape() == Shape{3, 3, 8});
}

TEST_CASE("edvae_quantize concentrates on the strong-evidence index at inference") {
  Rng rng(7);
  const int64_t k = 4;
  Codebook cb = Codebook::gaussian_init(k, 2, rng, true);
  double bound = 3.0;
  std::vector<double> logits = {bound, -3.0, -3.0, -3.0};
  Tensor z_e = Tensor::from_data({1, k}, logits);

  // pi computed independently
  double a0 = std::exp(bound) + 1.0, rest = std::exp(-3.0) + 1.0;
  double s = a0 + 3.0 * rest;
  double pi_max = a0 / s;

  Rng infer_rng(13);
  const int trials = 20000;
  int hits = 0;
  for (int t = 0; t < trials; ++t) {
    QuantizeResult q = edvae_quantize(z_e, cb, 1.0, bound, PiMode::kMean, Phase::kInfer, infer_rng);
    if (q.hard_indices[0] == 0) ++hits;
  }
  double freq = static_cast<double>(hits) / trials;
  double se = std::sqrt(pi_max * (1.0 - pi_max) / trials);
  CHECK(std::fabs(freq - pi_max) < 4.0 * se + 1e-4);
}

TEST_CASE("edvae_quantize sampled pi mode routes gradients through the mean path") {
  Rng rng(17);
  Codebook cb = Codebook::gaussian_init(6, 3, rng, true);
  Tensor z_e = oracle::random_tensor({2, 2, 6}, rng, 0.5);
  Tape tape;
  Tape::Scope scope(tape);
  Rng qrng(19);
  QuantizeResult q = edvae_quantize(z_e, cb, 0.8, 20.0, PiMode::kSampled, Phase::kTrain, qrng);
  Tensor loss = add(mean(mul(q.z_q, q.z_q)), q.kl_term);
  tape.backward(loss);
  bool any = false;
  for (double g : z_e.grad()) {
    CHECK(std::isfinite(g));
    if (g != 0.0) any = true;
  }
  CHECK(any);
}

TEST_CASE("edvae alpha floor keeps kl strictly positive on finite logits") {
  Rng rng(23);
  Codebook cb = Codebook::gaussian_init(8, 4, rng, true);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor z_e = oracle::random_tensor({4, 8}, rng, 4.0, false);
    Rng qrng(static_cast<uint64_t>(trial));
    QuantizeResult q = edvae_quantize(z_e, cb, 0.9, 20.0, PiMode::kMean, Phase::kTrain, qrng);
    CHECK(q.kl_term.item() > 0.0);
    CHECK(*q.mean_uncertainty > 0.0);
    CHECK(*q.mean_uncertainty <= 1.0);
  }
}

TEST_CASE("dvae_quantize uniform and spiky logits") {
  Rng rng(29);
  const int64_t k = 8;
  Codebook cb = Codebook::gaussian_init(k, 4, rng, true);
  {
    Tensor z_e = Tensor::zeros({2, 2, k});
    Rng qrng(1);
    QuantizeResult q = dvae_quantize(z_e, cb, 1.0, Phase::kTrain, qrng);
    CHECK(std::fabs(q.kl_term.item()) < 1e-12);
    for (double h : q.position_entropy) CHECK(h == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  }
  {
    std::vector<double> logits(k, 0.0);
    logits[2] = 10.0;
    Tensor z_e = Tensor::from_data({1, k}, std::move(logits));
    Rng qrng(2);
    QuantizeResult q = dvae_quantize(z_e, cb, 1.0, Phase::kTrain, qrng);
    CHECK(q.kl_term.item() == doctest::Approx(std::log(8.0)).epsilon(0.01));
  }
}

TEST_CASE("dvae_quantize at tau below the floor is hard straight-through") {
  Rng rng(31);
  const int64_t k = 5;
  Codebook cb = Codebook::gaussian_init(k, 3, rng, true);
  Tensor z_e = oracle::random_tensor({4, k}, rng, 1.0, false);

  Rng qrng(77);
  QuantizeResult q = dvae_quantize(z_e, cb, 1e-9, Phase::kTrain, qrng);
  // replicate the noise stream: the draw happens on the flattened logits
  Rng replay(77);
  Tensor noise = sample_gumbel(replay, {4, k});
  for (int64_t p = 0; p < 4; ++p) {
    int64_t arg = 0;
    for (int64_t i = 1; i < k; ++i) {
      if (z_e.at({p, i}) + noise.at({p, i}) > z_e.at({p, arg}) + noise.at({p, arg})) arg = i;
    }
    for (int64_t i = 0; i < k; ++i) {
      CHECK(q.soft_assign.at({p, i}) == (i == arg ? 1.0 : 0.0));
    }
    CHECK(q.hard_indices[static_cast<size_t>(p)] == arg);
  }
}

TEST_CASE("vq_quantize exact-row, tie-break, and brute-force oracle") {
  Rng rng(37);
  Codebook cb = Codebook::gaussian_init(6, 3, rng, true);
  {
    std::vector<double> row3(cb.embeddings.data().begin() + 3 * 3,
                             cb.embeddings.data().begin() + 4 * 3);
    Tensor z_e = Tensor::from_data({1, 3}, row3);
    QuantizeResult q = vq_quantize(z_e, cb);
    CHECK(q.hard_indices[0] == 3);
    CHECK(q.codebook_term.item() == 0.0);
    CHECK(q.commitment_term.item() == 0.0);
    CHECK(q.kl_term.item() == 0.0);
  }
  {
    Codebook line = Codebook::uniform_init(5, 1, rng, true);
    auto table = line.embeddings.raw_data();
    table[0] = 0.0;
    table[1] = 1.0;
    table[2] = 5.0;
    table[3] = 9.0;
    table[4] = 3.0;
    Tensor z_e = Tensor::from_data({1, 1}, {2.0});  // equidistant to rows 1 and 4
    QuantizeResult q = vq_quantize(z_e, line);
    CHECK(q.hard_indices[0] == 1);
  }
  {
    Tensor z_e = oracle::random_tensor({50, 40, 3}, rng, 1.5, false);
    QuantizeResult q = vq_quantize(z_e, cb);
    // independent scan
    const double* z = z_e.data().data();
    for (int64_t p = 0; p < 2000; ++p) {
      double best = 1e300;
      int64_t arg = -1;
      for (int64_t j = 0; j < 6; ++j) {
        double dist = 0.0;
        for (int64_t i = 0; i < 3; ++i) {
          double diff = z[p * 3 + i] - cb.embeddings.at({j, i});
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          arg = j;
        }
      }
      CHECK(q.hard_indices[static_cast<size_t>(p)] == arg);
    }
  }
}

TEST_CASE("vq straight-through gradient is bitwise identical") {
  Rng rng(41);
  Codebook cb = Codebook::gaussian_init(7, 4, rng, true);
  Tensor z_e = oracle::random_tensor({3, 5, 4}, rng);
  Tensor probe = oracle::random_tensor({3, 5, 4}, rng, 1.0, false);
  Tape tape;
  Tape::Scope scope(tape);
  QuantizeResult q = vq_quantize(z_e, cb);
  tape.backward(sum(mul(q.z_q, probe)));
  // dL/dz_q is exactly probe; straight-through must copy it onto z_e bitwise
  for (int64_t i = 0; i < z_e.numel(); ++i) CHECK(z_e.grad()[i] == probe.data()[i]);
}

TEST_CASE("vq auxiliary terms route gradients to one side each") {
  Rng rng(43);
  Codebook cb = Codebook::gaussian_init(4, 2, rng, true);
  Tensor z_e = oracle::random_tensor({6, 2}, rng);
  {
    Tape tape;
    Tape::Scope scope(tape);
    QuantizeResult q = vq_quantize(z_e, cb);
    tape.backward(q.codebook_term);
    bool cb_touched = false;
    for (double g : cb.embeddings.grad()) cb_touched |= g != 0.0;
    CHECK(cb_touched);
    for (double g : z_e.grad()) CHECK(g == 0.0);
  }
  {
    Tape tape;
    Tape::Scope scope(tape);
    QuantizeResult q = vq_quantize(z_e, cb);
    tape.backward(q.commitment_term);
    bool ze_touched = false;
    for (double g : z_e.grad()) ze_touched |= g != 0.0;
    CHECK(ze_touched);
    for (double g : cb.embeddings.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("vq index choice is invariant to joint translation") {
  Rng rng(47);
  Codebook cb = Codebook::gaussian_init(9, 3, rng, true);
  Tensor z_e = oracle::random_tensor({30, 3}, rng, 1.0, false);
  QuantizeResult base = vq_quantize(z_e, cb);

  std::vector<double> offset = {0.7, -1.3, 0.4};
  Codebook shifted = Codebook::gaussian_init(9, 3, rng, true);
  for (int64_t j = 0; j < 9; ++j) {
    for (int64_t i = 0; i < 3; ++i) {
      shifted.embeddings.raw_data()[j * 3 + i] = cb.embeddings.at({j, i}) + offset[static_cast<size_t>(i)];
    }
  }
  std::vector<double> moved(z_e.data().begin(), z_e.data().end());
  for (int64_t p = 0; p < 30; ++p) {
    for (int64_t i = 0; i < 3; ++i) moved[static_cast<size_t>(p * 3 + i)] += offset[static_cast<size_t>(i)];
  }
  QuantizeResult after = vq_quantize(Tensor::from_data({30, 3}, std::move(moved)), shifted);
  CHECK(base.hard_indices == after.hard_indices);
}

TEST_CASE("ema_update moves assigned rows and freezes unassigned ones") {
  Rng rng(53);
  Codebook cb = Codebook::uniform_init(4, 2, rng, false);
  cb.enable_ema();
  std::vector<double> before(cb.embeddings.data().begin(), cb.embeddings.data().end());

  // every position assigned to row 0 with constant z_e = v
  std::vector<double> v = {2.0, -1.0};
  std::vector<double> batch;
  std::vector<int64_t> assign;
  for (int p = 0; p < 16; ++p) {
    batch.insert(batch.end(), v.begin(), v.end());
    assign.push_back(0);
  }
  ema_update(cb, Tensor::from_data({16, 2}, batch), assign, 0.99);

  for (int64_t i = 0; i < 2; ++i) {
    double old_dist = std::fabs(before[static_cast<size_t>(i)] - v[static_cast<size_t>(i)]);
    double new_dist = std::fabs(cb.embeddings.at({0, i}) - v[static_cast<size_t>(i)]);
    CHECK(new_dist < old_dist);
  }
  // rows with count 0 only renormalize; value essentially unchanged
  for (int64_t j = 1; j < 4; ++j) {
    for (int64_t i = 0; i < 2; ++i) {
      CHECK(cb.embeddings.at({j, i}) ==
            doctest::Approx(before[static_cast<size_t>(j * 2 + i)]).epsilon(1e-4));
    }
  }

  CHECK_THROWS_AS(ema_update(cb, Tensor::from_data({1, 2}, {0.0, 0.0}),
                             std::vector<int64_t>{0}, 1.5),
                  ParamError);
}

TEST_CASE("ema_update converges to cluster means under stationary assignments") {
  Rng rng(59);
  Codebook cb = Codebook::uniform_init(3, 2, rng, false);
  cb.enable_ema();
  // two clusters with fixed means; row 2 never assigned
  std::vector<double> batch;
  std::vector<int64_t> assign;
  for (int p = 0; p < 8; ++p) {
    batch.push_back(1.0);
    batch.push_back(2.0);
    assign.push_back(0);
  }
  for (int p = 0; p < 4; ++p) {
    batch.push_back(-3.0);
    batch.push_back(0.5);
    assign.push_back(1);
  }
  Tensor z = Tensor::from_data({12, 2}, batch);
  for (int step = 0; step < 1000; ++step) ema_update(cb, z, assign, 0.99);
  CHECK(cb.embeddings.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(cb.embeddings.at({0, 1}) == doctest::Approx(2.0).epsilon(1e-3));
  CHECK(cb.embeddings.at({1, 0}) == doctest::Approx(-3.0).epsilon(1e-3));
  CHECK(cb.embeddings.at({1, 1}) == doctest::Approx(0.5).epsilon(1e-3));
}

TEST_CASE("gsvq_quantize distance logits") {
  Rng rng(61);
  Codebook cb = Codebook::gaussian_init(5, 2, rng, true);
  {
    // exactly on row 3, push the others far away
    auto table = cb.embeddings.raw_data();
    for (int64_t j = 0; j < 5; ++j) {
      if (j == 3) continue;
      table[j * 2] += 20.0 * (j + 1.0);
    }
    std::vector<double> row3 = {cb.embeddings.at({3, 0}), cb.embeddings.at({3, 1})};
    Tensor z_e = Tensor::from_data({1, 2}, row3);
    Rng qrng(1);
    QuantizeResult q = gsvq_quantize(z_e, cb, 1.0, Phase::kTrain, qrng);
    // pi from softmax over negated distances: row 3 dominates
    CHECK(q.position_entropy[0] < 1e-6);
    CHECK(q.kl_term.item() == doctest::Approx(std::log(5.0)).epsilon(1e-4));
  }
  {
    // all rows equidistant -> uniform pi, zero KL
    Codebook sym = Codebook::uniform_init(4, 2, rng, true);
    auto table = sym.embeddings.raw_data();
    double rows[4][2] = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
    for (int j = 0; j < 4; ++j) {
      table[j * 2] = rows[j][0];
      table[j * 2 + 1] = rows[j][1];
    }
    Tensor z_e = Tensor::from_data({1, 2}, {0.0, 0.0});
    Rng qrng(2);
    QuantizeResult q = gsvq_quantize(z_e, sym, 1.0, Phase::kTrain, qrng);
    CHECK(std::fabs(q.kl_term.item()) < 1e-12);
    CHECK(q.position_entropy[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  {
    // argmax of pi equals the vq choice
    Codebook cb2 = Codebook::gaussian_init(8, 3, rng, true);
    Tensor z_e = oracle::random_tensor({40, 3}, rng, 1.2, false);
    Rng qrng(3);
    QuantizeResult soft = gsvq_quantize(z_e, cb2, 1.0, Phase::kTrain, qrng);
    QuantizeResult hard = vq_quantize(z_e, cb2);
    // recompute pi argmax from logits = -dist^2 per position
    for (int64_t p = 0; p < 40; ++p) {
      double best = -1e300;
      int64_t arg = -1;
      for (int64_t j = 0; j < 8; ++j) {
        double dist = 0.0;
        for (int64_t i = 0; i < 3; ++i) {
          double diff = z_e.at({p, i}) - cb2.embeddings.at({j, i});
          dist += diff * diff;
        }
        if (-dist > best) {
          best = -dist;
          arg = j;
        }
      }
      CHECK(arg == hard.hard_indices[static_cast<size_t>(p)]);
    }
  }
}

TEST_CASE("gsvq gradients reach both the encoder output and the codebook") {
  Rng rng(67);
  Codebook cb = Codebook::gaussian_init(6, 3, rng, true);
  Tensor z_e = oracle::random_tensor({4, 3}, rng);
  Tape tape;
  Tape::Scope scope(tape);
  Rng qrng(5);
  QuantizeResult q = gsvq_quantize(z_e, cb, 0.7, Phase::kTrain, qrng);
  tape.backward(add(mean(mul(q.z_q, q.z_q)), q.kl_term));
  bool ze_any = false, cb_any = false;
  for (double g : z_e.grad()) ze_any |= g != 0.0;
  for (double g : cb.embeddings.grad()) cb_any |= g != 0.0;
  CHECK(ze_any);
  CHECK(cb_any);
}

TEST_CASE("embed soft and hard assignments") {
  Rng rng(71);
  Codebook cb = Codebook::gaussian_init(5, 3, rng, true);
  {
    std::vector<double> onehot(5, 0.0);
    onehot[2] = 1.0;
    Tensor z_q = embed(Tensor::from_data({1, 5}, std::move(onehot)), cb);
    for (int64_t i = 0; i < 3; ++i) CHECK(z_q.at({0, i}) == cb.embeddings.at({2, i}));
  }
  {
    Tensor uniform = Tensor::full({1, 5}, 0.2);
    Tensor z_q = embed(uniform, cb);
    for (int64_t i = 0; i < 3; ++i) {
      double colmean = 0.0;
      for (int64_t j = 0; j < 5; ++j) colmean += cb.embeddings.at({j, i});
      colmean /= 5.0;
      CHECK(z_q.at({0, i}) == doctest::Approx(colmean).epsilon(1e-12));
    }
  }
  {
    // soft assignment in the tau -> 0 limit equals the hard gather
    Tensor logits = oracle::random_tensor({6, 5}, rng, 2.0, false);
    Rng qrng(7);
    std::vector<int64_t> hard;
    Codebook cb2 = Codebook::gaussian_init(5, 3, rng, true);
    QuantizeResult q = dvae_quantize(logits, cb2, 1e-9, Phase::kTrain, qrng);
    Tensor gathered = embed(q.hard_indices, cb2);
    for (int64_t i = 0; i < q.z_q.numel(); ++i) CHECK(q.z_q.data()[i] == gathered.data()[i]);
  }
  std::vector<int64_t> bad = {9};
  CHECK_THROWS_AS(embed(bad, cb), Error);
  CHECK_THROWS_AS(embed(Tensor::full({1, 5}, 0.5), cb), ParamError);
}

TEST_CASE("train-phase soft assignments are simplex rows for every quantizer") {
  Rng rng(79);
  Codebook cb_k = Codebook::gaussian_init(10, 4, rng, true);
  Codebook cb_d = Codebook::gaussian_init(10, 4, rng, true);
  Tensor z_k = oracle::random_tensor({3, 2, 10}, rng, 2.0, false);
  Tensor z_d = oracle::random_tensor({3, 2, 4}, rng, 2.0, false);
  Rng q1(1), q2(2), q3(3);
  QuantizeResult results[] = {
      edvae_quantize(z_k, cb_k, 0.7, 20.0, PiMode::kMean, Phase::kTrain, q1),
      dvae_quantize(z_k, cb_k, 0.7, Phase::kTrain, q2),
      gsvq_quantize(z_d, cb_d, 0.7, Phase::kTrain, q3),
  };
  for (const auto& q : results) {
    REQUIRE(q.soft_assign.defined());
    int64_t lane = q.soft_assign.extent(q.soft_assign.rank() - 1);
    int64_t rows = q.soft_assign.numel() / lane;
    for (int64_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (int64_t i = 0; i < lane; ++i) {
        double v = q.soft_assign.data()[r * lane + i];
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(std::fabs(total - 1.0) < 1e-9);
    }
    for (int64_t idx : q.hard_indices) {
      CHECK(idx >= 0);
      CHECK(idx < 10);
    }
  }
}

TEST_CASE("evidential pi is never spikier than softmax on the same logits") {
  // mixture-with-uniform smoothing: H(alpha/S) >= H(softmax(z)) pointwise
  Rng rng(73);
  const int64_t k = 16;
  int pass = 0, total = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> logits(static_cast<size_t>(k));
    for (double& v : logits) v = 3.0 * rng.next_gaussian();
    Tensor z = Tensor::from_data({k}, logits);
    double h_softmax = categorical_entropy(softmax(z, 0, 1.0)).item();
    DirichletParams params = evidence_to_alpha(z, 20.0);
    double h_evidential = categorical_entropy(alpha_to_pi_mean(params)).item();
    ++total;
    if (h_evidential >= h_softmax - 1e-12) ++pass;
  }
  double rate = static_cast<double>(pass) / total;
  std::printf("[quantizers] evidential-entropy dominance pass rate: %.4f (%d/%d)\n", rate, pass,
              total);
  CHECK(rate == 1.0);
}
