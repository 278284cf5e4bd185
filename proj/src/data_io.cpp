#include "edvae/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "edvae/errors.hpp"
#include "json.hpp"

namespace edvae {

namespace fs = std::filesystem;
using nlohmann::json;

ImageBatch fetch_batch(const Dataset& data, std::span<const int64_t> indices) {
  int w = data.extent();
  int64_t pixels_per_image = 3LL * w * w;
  std::vector<double> pixels(indices.size() * static_cast<size_t>(pixels_per_image));
  for (size_t b = 0; b < indices.size(); ++b) {
    data.read_image(indices[b],
                    std::span<double>(pixels.data() + b * static_cast<size_t>(pixels_per_image),
                                      static_cast<size_t>(pixels_per_image)));
  }
  ImageBatch batch;
  batch.pixels = Tensor::from_data({static_cast<int64_t>(indices.size()), 3, w, w},
                                   std::move(pixels), false);
  batch.source_ids.assign(indices.begin(), indices.end());
  return batch;
}

BatchSampler::BatchSampler(int64_t dataset_size, int64_t batch_size, Rng rng)
    : size_(dataset_size), batch_(batch_size), rng_(rng) {
  if (dataset_size <= 0 || batch_size <= 0 || batch_size > dataset_size) {
    throw ParamError("BatchSampler: need 0 < batch_size <= dataset_size");
  }
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(static_cast<size_t>(size_));
  for (int64_t i = 0; i < size_; ++i) order_[static_cast<size_t>(i)] = i;
  Rng shuffle_rng = rng_.stream("epoch", epoch_);
  for (int64_t i = size_ - 1; i > 0; --i) {
    int64_t j = static_cast<int64_t>(shuffle_rng.next_below(static_cast<uint64_t>(i + 1)));
    std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
  }
  cursor_ = 0;
  ++epoch_;
}

std::vector<int64_t> BatchSampler::next() {
  if (cursor_ + batch_ > size_) reshuffle();
  std::vector<int64_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
  cursor_ += batch_;
  return out;
}

// ---- CIFAR-10 -------------------------------------------------------------

namespace {

constexpr int64_t kCifarRecordBytes = 3073;
constexpr int64_t kCifarImageBytes = 3072;

int64_t cifar_records_in(const fs::path& file) {
  std::error_code ec;
  auto bytes = fs::file_size(file, ec);
  if (ec) throw IoError("cifar10: cannot stat " + file.string());
  if (bytes == 0 || bytes % kCifarRecordBytes != 0) {
    throw IoError("cifar10: " + file.string() + " has " + std::to_string(bytes) +
                  " bytes, not a multiple of 3073");
  }
  return static_cast<int64_t>(bytes / kCifarRecordBytes);
}

}  // namespace

Cifar10Dataset::Cifar10Dataset(const fs::path& path, const std::string& split) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    if (split == "train") {
      for (int i = 1; i <= 5; ++i) {
        files.push_back(path / ("data_batch_" + std::to_string(i) + ".bin"));
      }
    } else if (split == "test") {
      files.push_back(path / "test_batch.bin");
    } else {
      throw ConfigError("cifar10: split must be train or test, got " + split);
    }
  } else {
    files.push_back(path);
  }
  for (const auto& file : files) {
    if (!fs::exists(file)) throw IoError("cifar10: missing file " + file.string());
    shards_.push_back({file, cifar_records_in(file)});
    total_records_ += shards_.back().records;
  }
}

void Cifar10Dataset::read_image(int64_t index, std::span<double> out) const {
  if (index < 0 || index >= total_records_) throw IoError("cifar10: record index out of range");
  size_t shard = 0;
  while (index >= shards_[shard].records) {
    index -= shards_[shard].records;
    ++shard;
  }
  if (open_shard_ != static_cast<int>(shard)) {
    stream_.close();
    stream_.clear();
    stream_.open(shards_[shard].file, std::ios::binary);
    if (!stream_) throw IoError("cifar10: cannot open " + shards_[shard].file.string());
    open_shard_ = static_cast<int>(shard);
  }
  // skip the label byte; it never enters pixel data
  stream_.seekg(index * kCifarRecordBytes + 1);
  unsigned char raw[kCifarImageBytes];
  stream_.read(reinterpret_cast<char*>(raw), kCifarImageBytes);
  if (!stream_) throw IoError("cifar10: short read in " + shards_[shard].file.string());
  for (int64_t i = 0; i < kCifarImageBytes; ++i) {
    out[static_cast<size_t>(i)] = static_cast<double>(raw[i]) / 255.0;
  }
}

// ---- synthetic generators ---------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c;
    g = x;
  } else if (hp < 2) {
    r = x;
    g = c;
  } else if (hp < 3) {
    g = c;
    b = x;
  } else if (hp < 4) {
    g = x;
    b = c;
  } else if (hp < 5) {
    r = x;
    b = c;
  } else {
    r = c;
    g = x;
  }
  double m = v - c;
  return {r + m, g + m, b + m};
}

double fract(double v) { return v - std::floor(v); }

}  // namespace

SynthDataset::SynthDataset(const SynthSpec& spec) : spec_(spec), base_(spec.seed) {
  if (spec.extent <= 0 || spec.extent % 4 != 0) {
    throw ConfigError("synth: extent must be a positive multiple of 4");
  }
  if (spec.clusters < 1) throw ConfigError("synth: cluster count must be >= 1");
  if (spec.count <= 0) throw ConfigError("synth: count must be positive");
}

void SynthDataset::read_image(int64_t index, std::span<double> out) const {
  if (index < 0 || index >= spec_.count) throw IoError("synth: index out of range");
  int w = spec_.extent;
  int64_t plane = static_cast<int64_t>(w) * w;
  int cluster = static_cast<int>(index % spec_.clusters);
  Rng rng = base_.stream("synth-image", static_cast<uint64_t>(index));

  double hue = fract(0.13 + 0.61803398875 * cluster);
  Rgb bg = hsv(hue, 0.35, 0.45);
  Rgb fg = hsv(fract(hue + 0.5), 0.6, 0.8);

  auto write_pixel = [&](int64_t y, int64_t x, const Rgb& color) {
    out[static_cast<size_t>(0 * plane + y * w + x)] = color.r;
    out[static_cast<size_t>(1 * plane + y * w + x)] = color.g;
    out[static_cast<size_t>(2 * plane + y * w + x)] = color.b;
  };

  // All intra-cluster variation scales with noise_sigma, so sigma = 0 makes
  // every image of a cluster bit-identical.
  double jitter = spec_.noise_sigma;
  switch (spec_.kind) {
    case SynthSpec::Kind::kBlobs: {
      double cx = (0.28 + 0.44 * fract(0.37 * cluster + 0.21)) * w +
                  (rng.next_double() - 0.5) * 8.0 * jitter * w;
      double cy = (0.28 + 0.44 * fract(0.71 * cluster + 0.43)) * w +
                  (rng.next_double() - 0.5) * 8.0 * jitter * w;
      double radius = (0.16 + 3.0 * jitter * rng.next_double()) * w;
      for (int64_t y = 0; y < w; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          double dx = (static_cast<double>(x) - cx) / radius;
          double dy = (static_cast<double>(y) - cy) / radius;
          double a = std::exp(-0.5 * (dx * dx + dy * dy));
          Rgb c = {bg.r + (fg.r - bg.r) * a, bg.g + (fg.g - bg.g) * a, bg.b + (fg.b - bg.b) * a};
          write_pixel(y, x, c);
        }
      }
      break;
    }
    case SynthSpec::Kind::kStripes: {
      double angle = 3.14159265358979 * cluster / spec_.clusters;
      double period = w / (3.0 + cluster % 3);
      double phase = rng.next_double() * period * 20.0 * jitter;
      double ca = std::cos(angle), sa = std::sin(angle);
      for (int64_t y = 0; y < w; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          double t = (ca * x + sa * y + phase) / period;
          double a = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979 * t);
          Rgb c = {bg.r + (fg.r - bg.r) * a, bg.g + (fg.g - bg.g) * a, bg.b + (fg.b - bg.b) * a};
          write_pixel(y, x, c);
        }
      }
      break;
    }
    case SynthSpec::Kind::kChecker: {
      int cell = std::max(2, w / (4 + cluster % 3));
      int64_t ox = 0, oy = 0;
      if (jitter > 0.0) {
        ox = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(cell)));
        oy = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(cell)));
      }
      for (int64_t y = 0; y < w; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          bool odd = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 1;
          write_pixel(y, x, odd ? fg : bg);
        }
      }
      break;
    }
  }

  if (spec_.noise_sigma > 0.0) {
    for (size_t i = 0; i < out.size(); ++i) {
      out[i] = std::clamp(out[i] + spec_.noise_sigma * rng.next_gaussian(), 0.0, 1.0);
    }
  }
}

// ---- checkpoints -------------------------------------------------------------

namespace {

std::string canonical_config(const std::string& config_json) {
  json parsed = json::parse(config_json, nullptr, false);
  if (parsed.is_discarded()) throw ConfigError("checkpoint: config is not valid JSON");
  return parsed.dump();
}

std::string hash_hex(const std::string& s) {
  uint64_t h = Rng::fnv1a(s);
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const std::string& config_json,
                     const std::vector<NamedParam>& params, int64_t iteration) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("checkpoint: cannot create " + dir.string());

  std::string canonical = canonical_config(config_json);
  json manifest;
  manifest["format"] = "edvae-checkpoint";
  manifest["version"] = 1;
  manifest["iteration"] = iteration;
  manifest["config"] = json::parse(canonical);
  manifest["config_hash"] = hash_hex(canonical);

  std::ofstream blob(dir / "params.edvt", std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("checkpoint: cannot write " + (dir / "params.edvt").string());
  json index = json::array();
  for (const auto& p : params) {
    json entry;
    entry["name"] = p.name;
    entry["offset"] = static_cast<int64_t>(blob.tellp());
    index.push_back(entry);
    write_edvt(blob, p.tensor);
  }
  manifest["params"] = index;
  blob.close();

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw IoError("checkpoint: cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("checkpoint: missing manifest in " + dir.string());
  json manifest = json::parse(mf, nullptr, false);
  if (manifest.is_discarded() || manifest.value("format", "") != "edvae-checkpoint") {
    throw IoError("checkpoint: bad manifest in " + dir.string());
  }
  std::string canonical = manifest["config"].dump();
  if (manifest.value("config_hash", "") != hash_hex(canonical)) {
    throw ConfigError("checkpoint: config hash mismatch in " + dir.string());
  }

  Checkpoint ckpt;
  ckpt.config_json = canonical;
  ckpt.iteration = manifest.value("iteration", 0);
  std::ifstream blob(dir / "params.edvt", std::ios::binary);
  if (!blob) throw IoError("checkpoint: missing params.edvt in " + dir.string());
  for (const auto& entry : manifest["params"]) {
    blob.seekg(entry["offset"].get<int64_t>());
    NamedParam p;
    p.name = entry["name"].get<std::string>();
    p.tensor = read_edvt(blob);
    ckpt.params.push_back(std::move(p));
  }
  return ckpt;
}

void restore_params(const Checkpoint& ckpt, std::vector<NamedParam>& target) {
  if (ckpt.params.size() != target.size()) {
    throw ConfigError("checkpoint: parameter count mismatch (" +
                      std::to_string(ckpt.params.size()) + " stored vs " +
                      std::to_string(target.size()) + " expected)");
  }
  for (size_t i = 0; i < target.size(); ++i) {
    const auto& src = ckpt.params[i];
    auto& dst = target[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw ConfigError("checkpoint: parameter mismatch at " + dst.name + " (stored " + src.name +
                        " " + shape_str(src.tensor.shape()) + ", expected " +
                        shape_str(dst.tensor.shape()) + ")");
    }
    auto out = dst.tensor.raw_data();
    auto in = src.tensor.data();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

}  // namespace edvae
