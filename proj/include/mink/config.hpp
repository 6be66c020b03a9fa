#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mink/augment.hpp"
#include "mink/crf.hpp"
#include "mink/kernel.hpp"
#include "mink/synth.hpp"

// Run configuration for the command-line driver: an INI file with sections,
// every key optional, plus "section.key=value" overrides.
namespace mink::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { d3, d4 };

inline const char* to_string(Mode m) { return m == Mode::d3 ? "3d" : "4d"; }

struct DataConfig {
  std::string dir = "data";
  double voxel_size = 0.2;
  std::size_t window = 3;         // frames per 4D tensor
  std::size_t window_stride = 1;  // frames between consecutive training windows
  double point_noise = 0.0;       // Gaussian position noise injected into every loaded frame
};

struct NetworkSection {
  std::string arch = "minkunet";  // minkunet | minknet
  std::size_t width = 8;
  std::vector<std::size_t> blocks{1, 1};
  std::string kernel = "auto";    // auto | hypercube | hypercross | hybrid
  int kernel_size = 3;
  int stem_size = 5;
};

struct OptimConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double power = 0.9;
  std::size_t iterations = 200;
};

struct CrfConfig {
  bool enabled = false;
  std::size_t iterations = 3;
  crf::TrilateralSteps steps;
};

struct BenchConfig {
  std::vector<double> voxel_sizes{0.4, 0.2, 0.1};
  std::vector<std::size_t> windows{1, 3, 5};
  std::size_t repetitions = 5;
};

struct RunSection {
  std::uint64_t seed = 1;
  Mode mode = Mode::d4;
  std::string log = "train_log.csv";
  std::string checkpoint = "model.ckpt";
  std::string report = "";  // empty: print to stdout
};

struct RunConfig {
  DataConfig data;
  NetworkSection network;
  OptimConfig optim;
  augment::AugmentConfig augment;
  bool augment_enabled = true;
  CrfConfig crf;
  synth::SynthSpec synth;
  BenchConfig bench;
  RunSection run;
};

namespace detail {

using boost::property_tree::ptree;

template <class T>
T parse_scalar(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("config: cannot parse '" + text + "' for " + key);
  return v;
}

template <>
inline bool parse_scalar<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config: '" + text + "' is not a boolean for " + key);
}

template <>
inline std::string parse_scalar<std::string>(const std::string&, const std::string& text) {
  return text;
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("config: empty list item in " + key);
    out.push_back(parse_scalar<T>(key, item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

class Reader {
 public:
  explicit Reader(const ptree& tree) : tree_(tree) {}

  template <class T>
  void get(const std::string& key, T& out) const {
    if (auto v = tree_.get_optional<std::string>(key)) out = parse_scalar<T>(key, *v);
  }
  template <class T>
  void get_list(const std::string& key, std::vector<T>& out) const {
    if (auto v = tree_.get_optional<std::string>(key)) out = parse_list<T>(key, *v);
  }

 private:
  const ptree& tree_;
};

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys{
      "data.dir", "data.voxel_size", "data.window", "data.window_stride", "data.point_noise",
      "network.arch", "network.width", "network.blocks", "network.kernel", "network.kernel_size",
      "network.stem_size", "optim.lr", "optim.momentum", "optim.power", "optim.iterations",
      "augment.enabled", "augment.scale", "augment.rotate", "augment.translate", "augment.elastic_magnitude",
      "augment.elastic_pitch", "augment.noise_sigma", "augment.chroma_translate", "augment.chroma_jitter",
      "crf.enabled", "crf.iterations", "crf.space_step", "crf.time_step", "crf.chroma_step",
      "synth.frames", "synth.objects", "synth.classes", "synth.ground_points", "synth.object_points",
      "synth.extent", "synth.object_size", "synth.speed", "synth.color_noise", "synth.color_separation",
      "bench.voxel_sizes", "bench.windows", "bench.repetitions",
      "run.seed", "run.mode", "run.log", "run.checkpoint", "run.report"};
  return keys;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  auto positive = [](double v, const char* key) {
    if (!(v > 0)) throw ConfigError(std::string("config: ") + key + " must be positive");
  };
  auto non_negative = [](double v, const char* key) {
    if (!(v >= 0)) throw ConfigError(std::string("config: ") + key + " must be non-negative");
  };
  positive(c.data.voxel_size, "data.voxel_size");
  positive(static_cast<double>(c.data.window), "data.window");
  positive(static_cast<double>(c.data.window_stride), "data.window_stride");
  non_negative(c.data.point_noise, "data.point_noise");
  if (c.network.arch != "minkunet" && c.network.arch != "minknet") {
    throw ConfigError("config: network.arch must be minkunet or minknet");
  }
  if (c.network.kernel != "auto") {
    try {
      parse_kernel_shape(c.network.kernel);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: network.kernel: ") + e.what());
    }
  }
  positive(static_cast<double>(c.network.width), "network.width");
  for (auto b : c.network.blocks) positive(static_cast<double>(b), "network.blocks");
  if (c.network.kernel_size < 1 || c.network.kernel_size % 2 == 0) throw ConfigError("config: network.kernel_size must be odd");
  if (c.network.stem_size < 1 || c.network.stem_size % 2 == 0) throw ConfigError("config: network.stem_size must be odd");
  positive(c.optim.lr, "optim.lr");
  non_negative(c.optim.momentum, "optim.momentum");
  positive(c.optim.power, "optim.power");
  positive(static_cast<double>(c.optim.iterations), "optim.iterations");
  const auto& a = c.augment;
  for (auto [v, key] : {std::pair{a.scale, "augment.scale"}, {a.rotate, "augment.rotate"}, {a.translate, "augment.translate"},
                        {a.elastic_magnitude, "augment.elastic_magnitude"}, {a.noise_sigma, "augment.noise_sigma"},
                        {a.chroma_translate, "augment.chroma_translate"}, {a.chroma_jitter, "augment.chroma_jitter"}}) {
    non_negative(v, key);
  }
  if (a.scale >= 1.0) throw ConfigError("config: augment.scale must be below 1");
  positive(a.elastic_pitch, "augment.elastic_pitch");
  positive(c.crf.steps.space, "crf.space_step");
  positive(c.crf.steps.time, "crf.time_step");
  positive(c.crf.steps.chroma, "crf.chroma_step");
  positive(static_cast<double>(c.synth.frames), "synth.frames");
  if (c.synth.classes < 2) throw ConfigError("config: synth.classes must be at least 2");
  positive(c.synth.extent, "synth.extent");
  positive(c.synth.object_size, "synth.object_size");
  non_negative(c.synth.color_noise, "synth.color_noise");
  for (double v : c.bench.voxel_sizes) positive(v, "bench.voxel_sizes");
  for (auto w : c.bench.windows) positive(static_cast<double>(w), "bench.windows");
  if (c.bench.repetitions < 1) throw ConfigError("config: bench.repetitions must be at least 1");
}

inline RunConfig from_tree(const boost::property_tree::ptree& tree) {
  for (const auto& [section, body] : tree) {
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto& known = detail::known_keys();
      if (std::find(known.begin(), known.end(), full) == known.end()) throw ConfigError("config: unknown key " + full);
    }
  }
  RunConfig c;
  detail::Reader r(tree);
  r.get("data.dir", c.data.dir);
  r.get("data.voxel_size", c.data.voxel_size);
  r.get("data.window", c.data.window);
  r.get("data.window_stride", c.data.window_stride);
  r.get("data.point_noise", c.data.point_noise);
  r.get("network.arch", c.network.arch);
  r.get("network.width", c.network.width);
  r.get_list("network.blocks", c.network.blocks);
  r.get("network.kernel", c.network.kernel);
  r.get("network.kernel_size", c.network.kernel_size);
  r.get("network.stem_size", c.network.stem_size);
  r.get("optim.lr", c.optim.lr);
  r.get("optim.momentum", c.optim.momentum);
  r.get("optim.power", c.optim.power);
  r.get("optim.iterations", c.optim.iterations);
  r.get("augment.enabled", c.augment_enabled);
  r.get("augment.scale", c.augment.scale);
  r.get("augment.rotate", c.augment.rotate);
  r.get("augment.translate", c.augment.translate);
  r.get("augment.elastic_magnitude", c.augment.elastic_magnitude);
  r.get("augment.elastic_pitch", c.augment.elastic_pitch);
  r.get("augment.noise_sigma", c.augment.noise_sigma);
  r.get("augment.chroma_translate", c.augment.chroma_translate);
  r.get("augment.chroma_jitter", c.augment.chroma_jitter);
  r.get("crf.enabled", c.crf.enabled);
  r.get("crf.iterations", c.crf.iterations);
  r.get("crf.space_step", c.crf.steps.space);
  r.get("crf.time_step", c.crf.steps.time);
  r.get("crf.chroma_step", c.crf.steps.chroma);
  r.get("synth.frames", c.synth.frames);
  r.get("synth.objects", c.synth.objects);
  r.get("synth.classes", c.synth.classes);
  r.get("synth.ground_points", c.synth.ground_points);
  r.get("synth.object_points", c.synth.object_points);
  r.get("synth.extent", c.synth.extent);
  r.get("synth.object_size", c.synth.object_size);
  r.get("synth.speed", c.synth.speed);
  r.get("synth.color_noise", c.synth.color_noise);
  r.get("synth.color_separation", c.synth.color_separation);
  r.get_list("bench.voxel_sizes", c.bench.voxel_sizes);
  r.get_list("bench.windows", c.bench.windows);
  r.get("bench.repetitions", c.bench.repetitions);
  r.get("run.seed", c.run.seed);
  std::string mode = to_string(c.run.mode);
  r.get("run.mode", mode);
  if (mode == "3d") {
    c.run.mode = Mode::d3;
  } else if (mode == "4d") {
    c.run.mode = Mode::d4;
  } else {
    throw ConfigError("config: run.mode must be 3d or 4d, got '" + mode + "'");
  }
  r.get("run.log", c.run.log);
  r.get("run.checkpoint", c.run.checkpoint);
  r.get("run.report", c.run.report);
  c.synth.seed = c.run.seed;
  validate(c);
  return c;
}

// Applies "section.key=value" overrides on top of an INI file (or defaults
// when `path` is empty).
inline RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {}) {
  boost::property_tree::ptree tree;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    try {
      boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("config: " + path + ": " + e.message() + " at line " + std::to_string(e.line()));
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("config: override '" + o + "' must be section.key=value");
    const std::string key = o.substr(0, eq);
    if (key.find('.') == std::string::npos) throw ConfigError("config: override key '" + key + "' needs a section");
    tree.put(key, o.substr(eq + 1));
  }
  return from_tree(tree);
}

inline KernelShape level_kernel(const RunConfig& c, int dim) {
  if (c.network.kernel == "auto") return dim == 4 ? KernelShape::hybrid : KernelShape::hypercube;
  return parse_kernel_shape(c.network.kernel);
}

}  // namespace mink::config
