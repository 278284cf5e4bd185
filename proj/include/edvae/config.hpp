#pragma once

#include <memory>
#include <string>
#include <vector>

#include "edvae/data_io.hpp"
#include "edvae/training.hpp"

namespace edvae {

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | cifar10
  SynthSpec synth;
  int64_t eval_count = 128;      // synthetic eval-set size
  std::string path;              // cifar10 root or .bin file
  std::string split = "train";   // cifar10 training split
  std::string eval_split = "test";
};

struct OutputConfig {
  std::string dir;
  int64_t eval_cadence = 0;        // 0: evaluate only at the end
  int64_t checkpoint_cadence = 0;  // 0: checkpoint only at the end
  std::vector<int64_t> heatmap_iterations;
};

// Full experiment description: training hyperparameters, data source, and
// artifact emission. JSON is the source of truth; flags only override the
// seed and output directory.
struct ExperimentConfig {
  TrainConfig train;
  DatasetConfig dataset;
  OutputConfig output;

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_json_file(const std::string& path);

  // Canonical JSON with every default materialized.
  std::string resolved_json() const;

  std::shared_ptr<Dataset> make_train_dataset() const;
  std::shared_ptr<Dataset> make_eval_dataset() const;
};

}  // namespace edvae
