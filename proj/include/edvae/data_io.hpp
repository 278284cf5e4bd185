#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "edvae/nets.hpp"
#include "edvae/rng.hpp"
#include "edvae/tensor.hpp"

namespace edvae {

struct ImageBatch {
  Tensor pixels;  // (B, 3, w, w), values in [0, 1]
  std::vector<int64_t> source_ids;
};

// Random-access image source. Implementations stream from disk or generate
// on the fly; no implementation materializes the whole dataset.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual int64_t size() const = 0;
  virtual int extent() const = 0;
  // Fills 3 * extent * extent doubles, CHW row-major, in [0, 1].
  virtual void read_image(int64_t index, std::span<double> out) const = 0;
};

ImageBatch fetch_batch(const Dataset& data, std::span<const int64_t> indices);

// Shuffled-epoch index stream; the permutation is a pure function of the
// sampler's rng and the epoch counter. Drops the ragged tail of each epoch.
class BatchSampler {
 public:
  BatchSampler(int64_t dataset_size, int64_t batch_size, Rng rng);
  std::vector<int64_t> next();

 private:
  void reshuffle();
  int64_t size_;
  int64_t batch_;
  Rng rng_;
  std::vector<int64_t> order_;
  int64_t cursor_ = 0;
  uint64_t epoch_ = 0;
};

// CIFAR-10 binary layout: records of 3073 bytes, one label byte followed by
// 1024 R + 1024 G + 1024 B bytes, row-major. Labels are discarded. `path`
// may be a single .bin file or the directory holding the standard batches.
class Cifar10Dataset : public Dataset {
 public:
  Cifar10Dataset(const std::filesystem::path& path, const std::string& split);
  int64_t size() const override { return total_records_; }
  int extent() const override { return 32; }
  void read_image(int64_t index, std::span<double> out) const override;

 private:
  struct Shard {
    std::filesystem::path file;
    int64_t records;
  };
  std::vector<Shard> shards_;
  int64_t total_records_ = 0;
  // At most one shard is open at a time.
  mutable std::ifstream stream_;
  mutable int open_shard_ = -1;
};

struct SynthSpec {
  enum class Kind { kBlobs, kStripes, kChecker };
  Kind kind = Kind::kBlobs;
  int extent = 32;
  int clusters = 4;
  double noise_sigma = 0.02;
  int64_t count = 512;
  uint64_t seed = 1;
};

// Deterministic synthetic images: per-cluster archetypes with seeded jitter.
// Stands in for the structured datasets at desk scale.
class SynthDataset : public Dataset {
 public:
  explicit SynthDataset(const SynthSpec& spec);
  int64_t size() const override { return spec_.count; }
  int extent() const override { return spec_.extent; }
  void read_image(int64_t index, std::span<double> out) const override;

 private:
  SynthSpec spec_;
  Rng base_;
};

// ---- checkpoints -------------------------------------------------------

// A checkpoint is a directory: manifest.json (embedded resolved config, its
// hash, iteration, named parameter index) plus params.edvt (concatenated
// EDVT blobs in manifest order).
void save_checkpoint(const std::filesystem::path& dir, const std::string& config_json,
                     const std::vector<NamedParam>& params, int64_t iteration);

struct Checkpoint {
  std::string config_json;  // canonical dump of the embedded config
  int64_t iteration = 0;
  std::vector<NamedParam> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Copies checkpoint values into an existing model's parameters; name or
// shape mismatches (wrong K, different architecture) are config errors.
void restore_params(const Checkpoint& ckpt, std::vector<NamedParam>& target);

}  // namespace edvae
