#include "edvae/cli_runner.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "edvae/config.hpp"
#include "edvae/data_io.hpp"
#include "edvae/errors.hpp"
#include "edvae/metrics.hpp"
#include "edvae/training.hpp"

using namespace edvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("edvae_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string tiny_config_json(const std::string& model, const std::string& out_dir,
                             int64_t iterations = 40) {
  std::ostringstream s;
  s << R"({
  "model": ")" << model << R"(",
  "iterations": )" << iterations << R"(,
  "batch_size": 8,
  "seed": 21,
  "codebook": {"size": 16, "dim": 4},
  "arch": {"base_channels": 4, "input_extent": 16, "res_blocks_per_stage": 1},
  "schedules": {"beta_max": 1e-4},
  "dataset": {"kind": "synthetic", "synth_kind": "blobs", "extent": 16,
              "clusters": 3, "count": 64, "eval_count": 32, "seed": 5},
  "output": {"dir": ")" << out_dir << R"(", "checkpoint_cadence": 20}
})";
  return s.str();
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  fs::path file = dir / "config.json";
  std::ofstream out(file);
  out << text;
  return file;
}

int run(const std::vector<std::string>& args, std::string* stdout_text = nullptr,
        std::string* stderr_text = nullptr) {
  std::ostringstream out, err;
  int code = run_cli(args, out, err);
  if (stdout_text) *stdout_text = out.str();
  if (stderr_text) *stderr_text = err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

int count_lines(const std::string& text) {
  int lines = 0;
  for (char c : text) lines += c == '\n';
  return lines;
}

}  // namespace

TEST_CASE("train command writes the documented artifacts") {
  fs::path dir = temp_dir("train");
  fs::path cfg = write_config(dir, tiny_config_json("edvae", (dir / "run").string()));
  std::string out_text, err_text;
  int code = run({"train", "--config", cfg.string()}, &out_text, &err_text);
  CHECK(code == 0);

  std::string metrics = slurp(dir / "run" / "metrics.csv");
  CHECK(metrics.rfind("iter,loss,mse,kl,beta,tau,lr,perplexity,mean_entropy,mean_uncertainty\n",
                      0) == 0);
  CHECK(count_lines(metrics) == 41);  // header + one row per iteration
  CHECK(fs::exists(dir / "run" / "resolved_config.json"));
  CHECK(fs::exists(dir / "run" / "summary.json"));
  CHECK(fs::exists(dir / "run" / "ckpt_final" / "manifest.json"));
  CHECK(fs::exists(dir / "run" / "ckpt_20" / "manifest.json"));
  CHECK(fs::exists(dir / "run" / "ckpt_40" / "manifest.json"));
  CHECK(fs::exists(dir / "run" / "usage_histogram.csv"));
}

TEST_CASE("missing beta_max is a schema error naming the key") {
  fs::path dir = temp_dir("schema");
  std::string text = tiny_config_json("dvae", (dir / "run").string());
  auto pos = text.find("\"beta_max\": 1e-4");
  text.replace(pos, 16, "\"lr_start\": 1e-3");
  fs::path cfg = write_config(dir, text);
  std::string out_text, err_text;
  int code = run({"train", "--config", cfg.string()}, &out_text, &err_text);
  CHECK(code == 2);
  CHECK(err_text.find("beta_max") != std::string::npos);
}

TEST_CASE("two runs with the same config and seed are byte-identical") {
  fs::path dir = temp_dir("determinism");
  fs::path cfg = write_config(dir, tiny_config_json("edvae", (dir / "a").string()));
  CHECK(run({"train", "--config", cfg.string()}) == 0);
  CHECK(run({"train", "--config", cfg.string(), "--out", (dir / "b").string()}) == 0);
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));
}

TEST_CASE("eval command is idempotent and self-consistent") {
  fs::path dir = temp_dir("eval");
  fs::path cfg = write_config(dir, tiny_config_json("gs_vq", (dir / "run").string()));
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);

  std::string first, second;
  int code = run({"eval", "--checkpoint", (dir / "run" / "ckpt_final").string(), "--out",
                  (dir / "evalout").string()},
                 &first);
  CHECK(code == 0);
  CHECK(run({"eval", "--checkpoint", (dir / "run" / "ckpt_final").string()}, &second) == 0);
  // the second stdout is a prefix-equal JSON (same content, no artifacts line)
  CHECK(first == second);

  // perplexity in [1, K]; histogram sums to the eval position count
  std::istringstream parse(first);
  std::string line;
  double perplexity = -1;
  while (std::getline(parse, line)) {
    auto pos = line.find("\"perplexity\":");
    if (pos != std::string::npos) perplexity = std::stod(line.substr(pos + 13));
  }
  CHECK(perplexity >= 1.0);
  CHECK(perplexity <= 16.0);

  std::string hist = slurp(dir / "evalout" / "usage_histogram.csv");
  std::istringstream hist_in(hist);
  std::getline(hist_in, line);  // header
  int64_t total = 0;
  while (std::getline(hist_in, line)) {
    total += std::stoll(line.substr(line.find(',') + 1));
  }
  CHECK(total == 32 * 4 * 4);  // eval_count * N * N

  CHECK(run({"eval", "--checkpoint", (dir / "nope").string()}) == 4);
}

TEST_CASE("ablate produces one row per grid point and keeps sweeping past divergence") {
  fs::path dir = temp_dir("ablate");
  fs::path cfg = write_config(dir, tiny_config_json("dvae", "", 30));
  std::string out_text;
  int code = run({"ablate", "--kind", "tau", "--grid", "2,5", "--config", cfg.string(), "--out",
                  (dir / "sweep").string()},
                 &out_text);
  CHECK(code == 0);
  std::string table = slurp(dir / "sweep" / "ablation.csv");
  CHECK(count_lines(table) == 3);  // header + 2 grid points
  CHECK(table.find("tau,2") != std::string::npos);
  CHECK(table.find("tau,5") != std::string::npos);
  CHECK(fs::exists(dir / "sweep" / "tau_2" / "metrics.csv"));

  std::string bad_kind_err;
  CHECK(run({"ablate", "--kind", "dropout", "--grid", "1", "--config", cfg.string(), "--out",
             (dir / "x").string()},
            nullptr, &bad_kind_err) == 2);
}

TEST_CASE("export-entropy emits grids matching a recomputation") {
  fs::path dir = temp_dir("entropy");
  std::string text = tiny_config_json("edvae", (dir / "run").string());
  // ask for heatmap checkpoints at 10 and 40
  auto pos = text.find("\"checkpoint_cadence\": 20");
  text.replace(pos, 24, "\"checkpoint_cadence\": 0, \"heatmap_iterations\": [10, 40]");
  fs::path cfg = write_config(dir, text);
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);

  int code = run({"export-entropy", "--run", (dir / "run").string(), "--sample", "3",
                  "--iterations", "10,40"});
  CHECK(code == 0);

  for (int64_t iter : {10, 40}) {
    std::string grid_text =
        slurp(dir / "run" / "entropy" / ("entropy_" + std::to_string(iter) + ".csv"));
    CHECK(count_lines(grid_text) == 4);  // N = 16/4 rows

    // recompute from the checkpoint through the library path
    Checkpoint ckpt = load_checkpoint(dir / "run" / ("ckpt_" + std::to_string(iter)));
    ExperimentConfig ecfg = ExperimentConfig::from_json_text(ckpt.config_json);
    Model model = Model::build(ecfg.train);
    auto params = model.state_params();
    restore_params(ckpt, params);
    auto eval_ds = ecfg.make_eval_dataset();
    std::vector<int64_t> idx = {3};
    ImageBatch batch = fetch_batch(*eval_ds, idx);
    Tensor pi = assignment_distribution(model, batch.pixels, ecfg.train.clamp_max);
    std::vector<double> want = entropy_heatmap(pi);

    std::istringstream grid_in(grid_text);
    std::string line;
    size_t cell = 0;
    while (std::getline(grid_in, line)) {
      std::istringstream row(line);
      std::string field;
      while (std::getline(row, field, ',')) {
        double value = std::stod(field);
        CHECK(value == doctest::Approx(want[cell]).epsilon(1e-12));
        CHECK(value >= 0.0);
        CHECK(value <= std::log(16.0) + 1e-12);
        ++cell;
      }
    }
    CHECK(cell == want.size());
  }
  CHECK(fs::exists(dir / "run" / "entropy" / "entropy_range.json"));

  // requesting a checkpoint that does not exist is an I/O error
  CHECK(run({"export-entropy", "--run", (dir / "run").string(), "--iterations", "999"}) == 4);
}

TEST_CASE("divergent training exits with code 3 and writes a report") {
  fs::path dir = temp_dir("diverge");
  std::string text = tiny_config_json("edvae", (dir / "run").string());
  // a guard this tight trips on the very first forward pass
  text.insert(text.rfind('}'), R"(, "guards": {"max_abs_logit": 1e-6})");
  fs::path cfg = write_config(dir, text);
  std::string err_text;
  CHECK(run({"train", "--config", cfg.string()}, nullptr, &err_text) == 3);
  CHECK(fs::exists(dir / "run" / "divergence.json"));
  std::string report = slurp(dir / "run" / "divergence.json");
  CHECK(report.find("encoder_logits") != std::string::npos);
  CHECK(fs::exists(dir / "run" / "metrics.csv"));
}

TEST_CASE("ablate records divergence and keeps sweeping") {
  fs::path dir = temp_dir("ablate_div");
  fs::path cfg = write_config(dir, tiny_config_json("edvae", "", 30));
  // a huge beta blows the loss guard; the other grid point still completes
  std::string out_text;
  int code = run({"ablate", "--kind", "beta", "--grid", "1e-4,1e18", "--config", cfg.string(),
                  "--out", (dir / "sweep").string()},
                 &out_text);
  CHECK(code == 0);
  std::string table = slurp(dir / "sweep" / "ablation.csv");
  CHECK(count_lines(table) == 3);
  CHECK(table.find(",nan,nan,1") != std::string::npos);  // the diverged point
  CHECK(table.find(",0\n") != std::string::npos);        // the completed point
  bool found_report = false;
  for (const auto& entry : fs::directory_iterator(dir / "sweep")) {
    if (entry.is_directory() && fs::exists(entry.path() / "divergence.json")) found_report = true;
  }
  CHECK(found_report);
}

TEST_CASE("cli rejects unknown arguments with a config error code") {
  std::string err_text;
  CHECK(run({"train"}, nullptr, &err_text) == 2);
  CHECK(run({"frobnicate", "--config", "x"}, nullptr, &err_text) == 2);
}
