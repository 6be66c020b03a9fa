#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mink/coords.hpp"
#include "mink/io.hpp"
#include "mink/matrix.hpp"

// Synthetic labeled 3D videos: a static ground plane plus rigid shapes moving
// with constant velocity, sampled fresh every frame like a range sensor.
namespace mink::synth {

struct Frame {
  Matrix<double> points;              // N x 3
  Matrix<double> colors;              // N x 3, 0..255
  std::vector<std::int32_t> labels;   // N
  std::int64_t time = 0;

  std::size_t size() const { return points.rows(); }
};

struct SceneSequence {
  std::vector<Frame> frames;
  std::size_t classes = 0;
  std::vector<std::array<double, 3>> velocities;  // per object, units per frame
};

struct SynthSpec {
  std::size_t frames = 8;
  std::size_t objects = 3;
  std::size_t classes = 3;            // ground + (classes - 1) shape kinds
  std::size_t ground_points = 3000;
  std::size_t object_points = 800;
  double extent = 6.0;                // ground is [0, extent]^2
  double object_size = 1.0;
  double speed = 0.15;                // per frame
  double color_noise = 20.0;          // std-dev in 8-bit units
  double color_separation = 1.0;      // 0: every class shares one mean color
  std::uint64_t seed = 1;
};

namespace detail {

inline std::array<double, 3> class_color(std::size_t cls, double separation) {
  static const std::array<std::array<double, 3>, 6> palette{{{120, 120, 120},
                                                             {210, 70, 60},
                                                             {60, 90, 210},
                                                             {70, 190, 80},
                                                             {220, 200, 60},
                                                             {170, 70, 190}}};
  const auto& base = palette[cls % palette.size()];
  std::array<double, 3> c{};
  for (int i = 0; i < 3; ++i) c[i] = 128.0 + separation * (base[i] - 128.0);
  return c;
}

struct Shape {
  enum Kind { box, sphere } kind;
  std::array<double, 3> center;    // at frame 0; boxes rest on the ground
  std::array<double, 3> velocity;
  double size;
  std::int32_t label;
};

// Uniform sample on the visible surface (no bottom face) of a shape.
inline std::array<double, 3> sample_surface(const Shape& s, const std::array<double, 3>& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double h = s.size / 2;
  if (s.kind == Shape::sphere) {
    std::normal_distribution<double> n(0.0, 1.0);
    double x = n(rng), y = n(rng), z = n(rng);
    double len = std::sqrt(x * x + y * y + z * z);
    if (len < 1e-12) len = 1.0, x = 1.0;
    return {c[0] + h * x / len, c[1] + h * y / len, c[2] + h * z / len};
  }
  // Five faces of equal area.
  const int face = static_cast<int>(u(rng) * 5) % 5;
  const double a = (u(rng) * 2 - 1) * h, b = (u(rng) * 2 - 1) * h;
  switch (face) {
    case 0: return {c[0] + a, c[1] + b, c[2] + h};
    case 1: return {c[0] + h, c[1] + a, c[2] + b};
    case 2: return {c[0] - h, c[1] + a, c[2] + b};
    case 3: return {c[0] + a, c[1] + h, c[2] + b};
    default: return {c[0] + a, c[1] - h, c[2] + b};
  }
}

}  // namespace detail

inline SceneSequence synth_generate(const SynthSpec& spec) {
  if (spec.classes < 2 && spec.objects > 0) throw std::invalid_argument("synth: objects need at least 2 classes");
  if (spec.frames == 0) throw std::invalid_argument("synth: frame count must be positive");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<detail::Shape> shapes;
  SceneSequence seq;
  seq.classes = std::max<std::size_t>(spec.classes, 1);
  for (std::size_t k = 0; k < spec.objects; ++k) {
    detail::Shape s;
    s.label = static_cast<std::int32_t>(1 + k % (spec.classes - 1));
    s.kind = (s.label % 2 == 1) ? detail::Shape::box : detail::Shape::sphere;
    s.size = spec.object_size;
    const double margin = spec.object_size;
    s.center = {margin + u(rng) * (spec.extent - 2 * margin), margin + u(rng) * (spec.extent - 2 * margin),
                spec.object_size / 2};
    const double angle = u(rng) * 2 * std::numbers::pi;
    s.velocity = {spec.speed * std::cos(angle), spec.speed * std::sin(angle), 0.0};
    shapes.push_back(s);
    seq.velocities.push_back(s.velocity);
  }

  for (std::size_t f = 0; f < spec.frames; ++f) {
    std::mt19937_64 frng(spec.seed * 0x9e3779b97f4a7c15ULL + 7919 * (f + 1));
    std::normal_distribution<double> cn(0.0, spec.color_noise);
    const std::size_t n = spec.ground_points + spec.object_points * shapes.size();
    Frame fr;
    fr.time = static_cast<std::int64_t>(f);
    fr.points = Matrix<double>(n, 3);
    fr.colors = Matrix<double>(n, 3);
    fr.labels.resize(n);
    std::size_t row = 0;
    auto put = [&](const std::array<double, 3>& p, std::int32_t label) {
      const auto base = detail::class_color(static_cast<std::size_t>(label), spec.color_separation);
      for (int d = 0; d < 3; ++d) {
        fr.points(row, d) = p[d];
        fr.colors(row, d) = std::clamp(base[d] + cn(frng), 0.0, 255.0);
      }
      fr.labels[row] = label;
      ++row;
    };
    for (std::size_t i = 0; i < spec.ground_points; ++i) {
      put({u(frng) * spec.extent, u(frng) * spec.extent, 0.0}, 0);
    }
    for (const auto& s : shapes) {
      std::array<double, 3> c = s.center;
      for (int d = 0; d < 3; ++d) c[d] += s.velocity[d] * static_cast<double>(f);
      for (std::size_t i = 0; i < spec.object_points; ++i) put(detail::sample_surface(s, c, frng), s.label);
    }
    seq.frames.push_back(std::move(fr));
  }
  return seq;
}

inline io::PointCloud to_point_cloud(const Frame& f) {
  io::PointCloud pc;
  pc.positions = f.points;
  pc.features = f.colors;
  pc.labels = f.labels;
  pc.labeled = true;
  return pc;
}

inline Frame from_point_cloud(const io::PointCloud& pc, std::int64_t time) {
  if (pc.positions.cols() != 3 || pc.features.cols() != 3) {
    throw io::FormatError("scene frames need 3D positions and 3 color channels");
  }
  Frame f;
  f.points = pc.positions;
  f.colors = pc.features;
  f.labels = pc.has_labels() ? pc.labels : std::vector<std::int32_t>(pc.size(), kIgnoreLabel);
  f.time = time;
  return f;
}

// Writes frame_NNNN.spg files plus manifest.txt into `dir`.
inline void write_sequence(const std::filesystem::path& dir, const SceneSequence& seq) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw io::FormatError("cannot write " + (dir / "manifest.txt").string());
  m << "SPGM 1\nclasses " << seq.classes << "\nframes " << seq.frames.size() << "\n";
  m.precision(17);
  for (std::size_t k = 0; k < seq.velocities.size(); ++k) {
    m << "velocity " << k << ' ' << seq.velocities[k][0] << ' ' << seq.velocities[k][1] << ' ' << seq.velocities[k][2]
      << "\n";
  }
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.spg", f);
    io::save_point_cloud((dir / name).string(), to_point_cloud(seq.frames[f]));
    m << "frame " << seq.frames[f].time << ' ' << name << "\n";
  }
  if (!m) throw io::FormatError("write failed for manifest");
}

inline SceneSequence read_sequence(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw io::FormatError("cannot open " + (dir / "manifest.txt").string());
  std::string line, tag;
  SceneSequence seq;
  if (!std::getline(m, line) || line.rfind("SPGM", 0) != 0) throw io::FormatError("manifest: bad header");
  std::int64_t last_time = -1;
  bool first = true;
  while (std::getline(m, line)) {
    std::istringstream ls(line);
    if (!(ls >> tag)) continue;
    if (tag == "classes") {
      ls >> seq.classes;
    } else if (tag == "velocity") {
      std::size_t k;
      std::array<double, 3> v{};
      ls >> k >> v[0] >> v[1] >> v[2];
      seq.velocities.push_back(v);
    } else if (tag == "frame") {
      std::int64_t t;
      std::string file;
      if (!(ls >> t >> file)) throw io::FormatError("manifest: malformed frame line");
      if (!first && t <= last_time) throw io::FormatError("manifest: timestamps must strictly increase");
      first = false;
      last_time = t;
      seq.frames.push_back(from_point_cloud(io::load_point_cloud((dir / file).string()), t));
    }
  }
  if (seq.classes == 0) throw io::FormatError("manifest: missing class count");
  return seq;
}

}  // namespace mink::synth
