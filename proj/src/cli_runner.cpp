#include "edvae/cli_runner.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "edvae/config.hpp"
#include "edvae/errors.hpp"
#include "edvae/metrics.hpp"
#include "edvae/training.hpp"
#include "json.hpp"

namespace edvae {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kEvalSeedOffset = 999331;

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

json eval_to_json(const EvalSummary& s) {
  json j;
  j["perplexity"] = s.perplexity;
  j["mse_x1000"] = s.mse_x1000;
  j["mean_entropy"] = s.mean_entropy;
  j["positions"] = s.positions;
  return j;
}

void write_usage_csv(const fs::path& path, const std::vector<int64_t>& counts) {
  std::string text = "index,count\n";
  for (size_t i = 0; i < counts.size(); ++i) {
    text += std::to_string(i) + "," + std::to_string(counts[i]) + "\n";
  }
  write_text(path, text);
}

struct RunResult {
  bool diverged = false;
  int64_t diverged_iteration = -1;
  std::string diverged_quantity;
  std::optional<EvalSummary> final_eval;
};

// One full training run: metrics.csv, cadenced checkpoints and evals, final
// checkpoint + summary.json. Divergence is recorded, not rethrown.
RunResult run_training(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  fs::create_directories(out_dir);
  write_text(out_dir / "resolved_config.json", cfg.resolved_json());

  auto train_ds = cfg.make_train_dataset();
  auto eval_ds = cfg.make_eval_dataset();
  Session session(cfg.train, train_ds);

  std::ofstream metrics(out_dir / "metrics.csv", std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
  metrics << metric_csv_header() << "\n";

  std::ofstream eval_csv;
  if (cfg.output.eval_cadence > 0) {
    eval_csv.open(out_dir / "eval_trajectory.csv", std::ios::trunc);
    eval_csv << "iter,perplexity,mse_x1000,mean_entropy\n";
  }

  auto save_at = [&](int64_t iter, const std::string& name) {
    save_checkpoint(out_dir / name, cfg.resolved_json(), session.model().state_params(), iter);
  };
  auto wants_checkpoint = [&](int64_t iter) {
    if (cfg.output.checkpoint_cadence > 0 && iter % cfg.output.checkpoint_cadence == 0) return true;
    for (int64_t h : cfg.output.heatmap_iterations) {
      if (h == iter) return true;
    }
    return false;
  };

  RunResult result;
  uint64_t eval_seed = cfg.train.seed + kEvalSeedOffset;
  try {
    for (int64_t t = 0; t < cfg.train.iterations; ++t) {
      MetricRecord record = session.step();
      metrics << metric_csv_row(record) << "\n";
      int64_t done = t + 1;
      if (wants_checkpoint(done)) save_at(done, "ckpt_" + std::to_string(done));
      if (cfg.output.eval_cadence > 0 && done % cfg.output.eval_cadence == 0) {
        EvalSummary s = session.evaluate(*eval_ds, eval_seed);
        eval_csv << done << "," << fmt(s.perplexity) << "," << fmt(s.mse_x1000) << ","
                 << fmt(s.mean_entropy) << "\n";
      }
    }
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.diverged_iteration = e.iteration();
    result.diverged_quantity = e.quantity();
    json report;
    report["iteration"] = e.iteration();
    report["quantity"] = e.quantity();
    report["message"] = e.what();
    write_text(out_dir / "divergence.json", report.dump(2));
    log << "run diverged at iteration " << e.iteration() << " (" << e.quantity() << ")\n";
  }
  metrics.close();

  json summary;
  summary["model"] = model_kind_name(cfg.train.model);
  summary["iterations_completed"] = session.iteration();
  summary["diverged"] = result.diverged;
  if (!result.diverged) {
    save_at(session.iteration(), "ckpt_final");
    EvalSummary s = session.evaluate(*eval_ds, eval_seed);
    result.final_eval = s;
    summary["final"] = eval_to_json(s);
    write_usage_csv(out_dir / "usage_histogram.csv", s.usage_counts);
  }
  write_text(out_dir / "summary.json", summary.dump(2));
  return result;
}

int cmd_train(const std::string& config_path, std::optional<uint64_t> seed,
              const std::string& out_override, std::ostream& out, std::ostream& log) {
  ExperimentConfig cfg = ExperimentConfig::from_json_file(config_path);
  if (seed) cfg.train.seed = *seed;
  if (!out_override.empty()) cfg.output.dir = out_override;
  if (cfg.output.dir.empty()) {
    throw ConfigError("config: output.dir (or --out) is required for train");
  }
  RunResult result = run_training(cfg, cfg.output.dir, log);
  if (result.diverged) return 3;
  out << "final perplexity " << fmt(result.final_eval->perplexity) << ", mse_x1000 "
      << fmt(result.final_eval->mse_x1000) << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& split, const std::string& out_dir,
             std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(ckpt_dir);
  ExperimentConfig cfg = ExperimentConfig::from_json_text(ckpt.config_json);
  auto eval_ds = split == "train" ? cfg.make_train_dataset() : cfg.make_eval_dataset();
  Session session(cfg.train, eval_ds);
  auto params = session.model().state_params();
  restore_params(ckpt, params);

  EvalSummary s = session.evaluate(*eval_ds, cfg.train.seed + kEvalSeedOffset);
  json j = eval_to_json(s);
  j["checkpoint_iteration"] = ckpt.iteration;
  j["split"] = split;
  out << j.dump(2) << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "eval_summary.json", j.dump(2));
    write_usage_csv(fs::path(out_dir) / "usage_histogram.csv", s.usage_counts);
  }
  return 0;
}

// Sweeps run sequentially by default; EDVAE_THREADS > 1 runs grid points
// concurrently (runs share nothing, outputs are identical either way).
unsigned sweep_threads() {
  const char* env = std::getenv("EDVAE_THREADS");
  if (!env) return 1;
  long v = std::strtol(env, nullptr, 10);
  if (v < 1) return 1;
  return static_cast<unsigned>(std::min<long>(v, 16));
}

int cmd_ablate(const std::string& kind, const std::vector<double>& grid,
               const std::string& config_path, const std::string& out_dir, std::ostream& out,
               std::ostream& log) {
  if (grid.empty()) throw ConfigError("ablate: grid must not be empty");
  if (kind != "clamp" && kind != "beta" && kind != "tau") {
    throw ConfigError("ablate: kind must be clamp, beta, or tau, got " + kind);
  }
  ExperimentConfig base = ExperimentConfig::from_json_file(config_path);
  fs::path root = out_dir.empty() ? fs::path(base.output.dir) : fs::path(out_dir);
  if (root.empty()) throw ConfigError("ablate: output directory required");
  fs::create_directories(root);

  std::vector<RunResult> results(grid.size());
  std::vector<std::string> errors(grid.size());
  std::mutex log_mutex;
  auto run_point = [&](size_t i) {
    double value = grid[i];
    ExperimentConfig cfg = base;
    if (kind == "clamp") {
      cfg.train.clamp_max = value;
    } else if (kind == "beta") {
      cfg.train.beta_max = value;
    } else {
      cfg.train.tau_fixed = value;
    }
    fs::path run_dir = root / (kind + "_" + fmt(value));
    {
      std::lock_guard<std::mutex> lock(log_mutex);
      log << "[ablate] " << kind << " = " << fmt(value) << "\n";
    }
    std::ostringstream sink;
    try {
      results[i] = run_training(cfg, run_dir, sink);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };

  unsigned workers = std::min<size_t>(sweep_threads(), grid.size());
  if (workers <= 1) {
    for (size_t i = 0; i < grid.size(); ++i) run_point(i);
  } else {
    std::atomic<size_t> next{0};
    auto worker = [&] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= grid.size()) return;
        run_point(i);
      }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
  }

  for (size_t i = 0; i < grid.size(); ++i) {
    if (!errors[i].empty()) throw Error("ablate: run failed: " + errors[i]);
  }
  std::string table = "kind,value,perplexity,mse_x1000,diverged\n";
  for (size_t i = 0; i < grid.size(); ++i) {
    table += kind + "," + fmt(grid[i]) + ",";
    if (results[i].diverged) {
      table += "nan,nan,1\n";
    } else {
      table += fmt(results[i].final_eval->perplexity) + "," +
               fmt(results[i].final_eval->mse_x1000) + ",0\n";
    }
  }
  write_text(root / "ablation.csv", table);
  out << table;
  return 0;
}

int cmd_export_entropy(const std::string& run_dir, int64_t sample,
                       const std::vector<int64_t>& iterations, const std::string& out_override,
                       std::ostream& out) {
  if (iterations.empty()) throw ConfigError("export-entropy: no iterations requested");
  fs::path run(run_dir);
  fs::path dest = out_override.empty() ? run / "entropy" : fs::path(out_override);
  fs::create_directories(dest);

  double log_k = 0.0;
  for (int64_t iter : iterations) {
    fs::path ckpt_dir = run / ("ckpt_" + std::to_string(iter));
    if (!fs::exists(ckpt_dir / "manifest.json")) {
      throw IoError("export-entropy: no checkpoint at iteration " + std::to_string(iter) +
                    " under " + run.string());
    }
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    ExperimentConfig cfg = ExperimentConfig::from_json_text(ckpt.config_json);
    Model model = Model::build(cfg.train);
    auto params = model.state_params();
    restore_params(ckpt, params);
    log_k = std::log(static_cast<double>(cfg.train.codebook_size));

    auto eval_ds = cfg.make_eval_dataset();
    if (sample < 0 || sample >= eval_ds->size()) {
      throw ConfigError("export-entropy: sample index out of range");
    }
    std::vector<int64_t> indices = {sample};
    ImageBatch batch = fetch_batch(*eval_ds, indices);
    Tensor pi = assignment_distribution(model, batch.pixels, cfg.train.clamp_max);
    std::vector<double> grid = entropy_heatmap(pi);
    int64_t n = pi.extent(1);
    std::string csv;
    for (int64_t y = 0; y < n; ++y) {
      for (int64_t x = 0; x < n; ++x) {
        if (x) csv += ",";
        csv += fmt(grid[static_cast<size_t>(y * n + x)]);
      }
      csv += "\n";
    }
    write_text(dest / ("entropy_" + std::to_string(iter) + ".csv"), csv);
  }

  json sidecar;
  sidecar["sample"] = sample;
  sidecar["iterations"] = iterations;
  sidecar["value_min"] = 0.0;
  sidecar["value_max"] = log_k;  // shared color range across iterations
  write_text(dest / "entropy_range.json", sidecar.dump(2));
  out << "wrote " << iterations.size() << " heatmaps to " << dest.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"evidential discrete VAE experiment driver"};
  app.name("edvae");
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_dir, split = "test", run_dir, kind;
  std::optional<uint64_t> seed;
  std::vector<double> grid;
  std::vector<int64_t> iterations;
  int64_t sample = 0;

  CLI::App* train = app.add_subcommand("train", "run a training experiment");
  train->add_option("--config", config_path, "experiment JSON")->required();
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--out", out_dir, "override the output directory");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
  eval->add_option("--split", split, "train or test split");
  eval->add_option("--out", out_dir, "directory for summary artifacts");

  CLI::App* ablate = app.add_subcommand("ablate", "sweep one knob over a grid");
  ablate->add_option("--kind", kind, "clamp, beta, or tau")->required();
  ablate->add_option("--grid", grid, "comma-separated values")->required()->delimiter(',');
  ablate->add_option("--config", config_path, "base experiment JSON")->required();
  ablate->add_option("--out", out_dir, "sweep output directory");

  CLI::App* exp = app.add_subcommand("export-entropy", "entropy heatmaps from checkpoints");
  exp->add_option("--run", run_dir, "training output directory")->required();
  exp->add_option("--sample", sample, "evaluation sample index");
  exp->add_option("--iterations", iterations, "checkpoint iterations")->required()->delimiter(',');
  exp->add_option("--out", out_dir, "heatmap output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return 2;
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(config_path, seed, out_dir, out, err);
    if (app.got_subcommand(eval)) return cmd_eval(checkpoint_dir, split, out_dir, out);
    if (app.got_subcommand(ablate)) return cmd_ablate(kind, grid, config_path, out_dir, out, err);
    return cmd_export_entropy(run_dir, sample, iterations, out_dir, out);
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    err << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    return 1;
  }
}

}  // namespace edvae
