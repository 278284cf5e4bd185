#include "edvae/config.hpp"

#include <fstream>
#include <sstream>

#include "edvae/errors.hpp"
#include "json.hpp"

namespace edvae {

using nlohmann::json;

namespace {

[[noreturn]] void missing_key(const std::string& path) {
  throw ConfigError("config: missing required key \"" + path + "\"");
}

[[noreturn]] void bad_type(const std::string& path, const char* expected) {
  throw ConfigError("config: key \"" + path + "\" must be " + expected);
}

const json* find(const json& j, const std::string& key) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? nullptr : &*it;
}

double require_number(const json& j, const std::string& path, const std::string& key) {
  const json* v = find(j, key);
  if (!v) missing_key(path + key);
  if (!v->is_number()) bad_type(path + key, "a number");
  return v->get<double>();
}

std::string require_string(const json& j, const std::string& path, const std::string& key) {
  const json* v = find(j, key);
  if (!v) missing_key(path + key);
  if (!v->is_string()) bad_type(path + key, "a string");
  return v->get<std::string>();
}

double number_or(const json& j, const std::string& path, const std::string& key, double fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number()) bad_type(path + key, "a number");
  return v->get<double>();
}

int64_t integer_or(const json& j, const std::string& path, const std::string& key,
                   int64_t fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) bad_type(path + key, "an integer");
  return v->get<int64_t>();
}

std::string string_or(const json& j, const std::string& path, const std::string& key,
                      const std::string& fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_string()) bad_type(path + key, "a string");
  return v->get<std::string>();
}

SynthSpec::Kind synth_kind_from(const std::string& name) {
  if (name == "blobs") return SynthSpec::Kind::kBlobs;
  if (name == "stripes") return SynthSpec::Kind::kStripes;
  if (name == "checker") return SynthSpec::Kind::kChecker;
  throw ConfigError("config: dataset.synth_kind must be blobs, stripes, or checker, got " + name);
}

std::string synth_kind_name(SynthSpec::Kind kind) {
  switch (kind) {
    case SynthSpec::Kind::kBlobs: return "blobs";
    case SynthSpec::Kind::kStripes: return "stripes";
    case SynthSpec::Kind::kChecker: return "checker";
  }
  throw Error("unreachable synth kind");
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json root = json::parse(text, nullptr, false);
  if (root.is_discarded() || !root.is_object()) {
    throw ConfigError("config: not a valid JSON object");
  }

  ExperimentConfig cfg;
  TrainConfig& t = cfg.train;
  t.model = model_kind_from(require_string(root, "", "model"));
  {
    const json* v = find(root, "iterations");
    if (!v) missing_key("iterations");
    if (!v->is_number_integer()) bad_type("iterations", "an integer");
    t.iterations = v->get<int64_t>();
  }
  t.batch_size = integer_or(root, "", "batch_size", t.batch_size);
  t.seed = static_cast<uint64_t>(integer_or(root, "", "seed", static_cast<int64_t>(t.seed)));

  if (const json* cb = find(root, "codebook")) {
    t.codebook_size = integer_or(*cb, "codebook.", "size", t.codebook_size);
    t.codebook_dim = integer_or(*cb, "codebook.", "dim", t.codebook_dim);
  }
  if (const json* arch = find(root, "arch")) {
    t.base_channels = static_cast<int>(integer_or(*arch, "arch.", "base_channels", t.base_channels));
    t.input_extent = static_cast<int>(integer_or(*arch, "arch.", "input_extent", t.input_extent));
    t.first_kernel = static_cast<int>(integer_or(*arch, "arch.", "first_kernel", t.first_kernel));
    t.res_blocks_per_stage = static_cast<int>(
        integer_or(*arch, "arch.", "res_blocks_per_stage", t.res_blocks_per_stage));
  }

  const json* sched = find(root, "schedules");
  if (!sched) missing_key("schedules");
  t.beta_max = require_number(*sched, "schedules.", "beta_max");
  t.lr_start = number_or(*sched, "schedules.", "lr_start", t.lr_start);
  t.lr_end = number_or(*sched, "schedules.", "lr_end", t.lr_end);
  {
    std::string ts = string_or(*sched, "schedules.", "tau_schedule", "exponential");
    if (ts == "exponential") {
      t.tau_schedule = TauSchedule::kExponential;
    } else if (ts == "cosine") {
      t.tau_schedule = TauSchedule::kCosine;
    } else {
      throw ConfigError("config: schedules.tau_schedule must be exponential or cosine, got " + ts);
    }
  }
  if (const json* v = find(*sched, "tau_fixed")) {
    if (!v->is_number()) bad_type("schedules.tau_fixed", "a number");
    t.tau_fixed = v->get<double>();
  }
  t.tau_floor = number_or(*sched, "schedules.", "tau_floor", t.tau_floor);
  t.tau_exp_rate = number_or(*sched, "schedules.", "tau_exp_rate", t.tau_exp_rate);
  t.schedule_reference = integer_or(*sched, "schedules.", "reference_iterations", t.schedule_reference);
  t.lr_anneal_reference = integer_or(*sched, "schedules.", "lr_anneal_reference", t.lr_anneal_reference);
  t.beta_warmup_reference =
      integer_or(*sched, "schedules.", "beta_warmup_reference", t.beta_warmup_reference);

  t.clamp_max = number_or(root, "", "clamp_max", t.clamp_max);
  {
    std::string pm = string_or(root, "", "pi_mode", "mean");
    if (pm == "mean") {
      t.pi_mode = PiMode::kMean;
    } else if (pm == "sampled") {
      t.pi_mode = PiMode::kSampled;
    } else {
      throw ConfigError("config: pi_mode must be mean or sampled, got " + pm);
    }
  }
  t.ema_decay = number_or(root, "", "ema_decay", t.ema_decay);
  t.beta_commit = number_or(root, "", "beta_commit", t.beta_commit);
  if (const json* guards = find(root, "guards")) {
    t.guards.max_abs_logit = number_or(*guards, "guards.", "max_abs_logit", t.guards.max_abs_logit);
    t.guards.max_abs_loss = number_or(*guards, "guards.", "max_abs_loss", t.guards.max_abs_loss);
    t.guards.max_abs_grad = number_or(*guards, "guards.", "max_abs_grad", t.guards.max_abs_grad);
  }

  const json* ds = find(root, "dataset");
  if (!ds) missing_key("dataset");
  cfg.dataset.kind = require_string(*ds, "dataset.", "kind");
  if (cfg.dataset.kind == "synthetic") {
    cfg.dataset.synth.kind = synth_kind_from(string_or(*ds, "dataset.", "synth_kind", "blobs"));
    cfg.dataset.synth.extent = static_cast<int>(integer_or(*ds, "dataset.", "extent", t.input_extent));
    cfg.dataset.synth.clusters = static_cast<int>(integer_or(*ds, "dataset.", "clusters", 4));
    cfg.dataset.synth.noise_sigma = number_or(*ds, "dataset.", "noise_sigma", 0.02);
    cfg.dataset.synth.count = integer_or(*ds, "dataset.", "count", 512);
    cfg.dataset.synth.seed = static_cast<uint64_t>(integer_or(*ds, "dataset.", "seed", 7));
    cfg.dataset.eval_count = integer_or(*ds, "dataset.", "eval_count", 128);
  } else if (cfg.dataset.kind == "cifar10") {
    cfg.dataset.path = require_string(*ds, "dataset.", "path");
    cfg.dataset.split = string_or(*ds, "dataset.", "split", "train");
    cfg.dataset.eval_split = string_or(*ds, "dataset.", "eval_split", "test");
  } else {
    throw ConfigError("config: dataset.kind must be synthetic or cifar10, got " + cfg.dataset.kind);
  }

  if (const json* out = find(root, "output")) {
    cfg.output.dir = string_or(*out, "output.", "dir", "");
    cfg.output.eval_cadence = integer_or(*out, "output.", "eval_cadence", 0);
    cfg.output.checkpoint_cadence = integer_or(*out, "output.", "checkpoint_cadence", 0);
    if (const json* hm = find(*out, "heatmap_iterations")) {
      if (!hm->is_array()) bad_type("output.heatmap_iterations", "an array of integers");
      for (const auto& v : *hm) {
        if (!v.is_number_integer()) bad_type("output.heatmap_iterations", "an array of integers");
        cfg.output.heatmap_iterations.push_back(v.get<int64_t>());
      }
    }
  }

  t.validate();
  if (cfg.dataset.kind == "synthetic" && cfg.dataset.synth.extent != t.input_extent) {
    throw ConfigError("config: dataset extent does not match arch.input_extent");
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

std::string ExperimentConfig::resolved_json() const {
  json root;
  root["model"] = model_kind_name(train.model);
  root["iterations"] = train.iterations;
  root["batch_size"] = train.batch_size;
  root["seed"] = train.seed;
  root["codebook"] = {{"size", train.codebook_size}, {"dim", train.codebook_dim}};
  root["arch"] = {{"base_channels", train.base_channels},
                  {"input_extent", train.input_extent},
                  {"first_kernel", train.first_kernel},
                  {"res_blocks_per_stage", train.res_blocks_per_stage}};
  json sched = {{"beta_max", train.beta_max},
                {"lr_start", train.lr_start},
                {"lr_end", train.lr_end},
                {"tau_schedule",
                 train.tau_schedule == TauSchedule::kExponential ? "exponential" : "cosine"},
                {"tau_floor", train.tau_floor},
                {"tau_exp_rate", train.tau_exp_rate},
                {"reference_iterations", train.schedule_reference},
                {"lr_anneal_reference", train.lr_anneal_reference},
                {"beta_warmup_reference", train.beta_warmup_reference},
                {"lr_anneal_iterations", train.lr_anneal_iters()},
                {"beta_warmup_iterations", train.beta_warmup_iters()}};
  if (train.tau_fixed) sched["tau_fixed"] = *train.tau_fixed;
  root["schedules"] = sched;
  root["clamp_max"] = train.clamp_max;
  root["pi_mode"] = train.pi_mode == PiMode::kMean ? "mean" : "sampled";
  root["ema_decay"] = train.ema_decay;
  root["beta_commit"] = train.beta_commit;
  root["guards"] = {{"max_abs_logit", train.guards.max_abs_logit},
                    {"max_abs_loss", train.guards.max_abs_loss},
                    {"max_abs_grad", train.guards.max_abs_grad}};
  json ds;
  ds["kind"] = dataset.kind;
  if (dataset.kind == "synthetic") {
    ds["synth_kind"] = synth_kind_name(dataset.synth.kind);
    ds["extent"] = dataset.synth.extent;
    ds["clusters"] = dataset.synth.clusters;
    ds["noise_sigma"] = dataset.synth.noise_sigma;
    ds["count"] = dataset.synth.count;
    ds["seed"] = dataset.synth.seed;
    ds["eval_count"] = dataset.eval_count;
  } else {
    ds["path"] = dataset.path;
    ds["split"] = dataset.split;
    ds["eval_split"] = dataset.eval_split;
  }
  root["dataset"] = ds;
  root["output"] = {{"dir", output.dir},
                    {"eval_cadence", output.eval_cadence},
                    {"checkpoint_cadence", output.checkpoint_cadence},
                    {"heatmap_iterations", output.heatmap_iterations}};
  return root.dump(2);
}

std::shared_ptr<Dataset> ExperimentConfig::make_train_dataset() const {
  if (dataset.kind == "synthetic") {
    return std::make_shared<SynthDataset>(dataset.synth);
  }
  return std::make_shared<Cifar10Dataset>(dataset.path, dataset.split);
}

std::shared_ptr<Dataset> ExperimentConfig::make_eval_dataset() const {
  if (dataset.kind == "synthetic") {
    SynthSpec eval_spec = dataset.synth;
    eval_spec.count = dataset.eval_count;
    eval_spec.seed = dataset.synth.seed + 1000003;  // disjoint deterministic stream
    return std::make_shared<SynthDataset>(eval_spec);
  }
  return std::make_shared<Cifar10Dataset>(dataset.path, dataset.eval_split);
}

}  // namespace edvae
