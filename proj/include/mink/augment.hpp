#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "mink/matrix.hpp"
#include "mink/synth.hpp"

// Training-time augmentations on 3D frames. Gravity is the z axis.
namespace mink::augment {

struct AugmentConfig {
  double scale = 0.0;              // scale drawn from [1 - scale, 1 + scale]
  double rotate = 0.0;             // angle drawn from [-rotate, rotate] radians
  double translate = 0.0;          // per-axis shift drawn from [-translate, translate]
  double elastic_magnitude = 0.0;  // displacement scale
  double elastic_pitch = 1.0;      // control-grid spacing
  double noise_sigma = 0.0;        // per-point Gaussian position noise
  double chroma_translate = 0.0;   // per-frame color shift drawn from [-x, x]
  double chroma_jitter = 0.0;      // per-point color std-dev
};

inline void scale_points(Matrix<double>& p, double s) {
  for (auto& v : p.storage()) v *= s;
}

inline void rotate_about_gravity(Matrix<double>& p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const double x = p(i, 0), y = p(i, 1);
    p(i, 0) = c * x - s * y;
    p(i, 1) = s * x + c * y;
  }
}

inline void translate_points(Matrix<double>& p, const std::array<double, 3>& t) {
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t d = 0; d < 3; ++d) p(i, d) += t[d];
}

// Smooth random displacement: N(0,1) noise on a control grid with spacing
// `pitch`, blurred with a separable [1 2 1]/4 filter, trilinearly sampled at
// every point and scaled by `magnitude`.
inline void elastic_distort(Matrix<double>& p, double magnitude, double pitch, std::mt19937_64& rng) {
  if (magnitude == 0.0 || p.rows() == 0) return;
  std::array<double, 3> lo{}, hi{};
  lo.fill(std::numeric_limits<double>::max());
  hi.fill(std::numeric_limits<double>::lowest());
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (int d = 0; d < 3; ++d) {
      lo[d] = std::min(lo[d], p(i, d));
      hi[d] = std::max(hi[d], p(i, d));
    }
  std::array<std::size_t, 3> n{};
  for (int d = 0; d < 3; ++d) n[d] = static_cast<std::size_t>(std::floor((hi[d] - lo[d]) / pitch)) + 2;
  const std::size_t cells = n[0] * n[1] * n[2];
  auto idx = [&](std::size_t x, std::size_t y, std::size_t z) { return (x * n[1] + y) * n[2] + z; };
  std::normal_distribution<double> g(0.0, 1.0);
  std::array<std::vector<double>, 3> field;
  for (auto& f : field) {
    f.resize(cells);
    for (auto& v : f) v = g(rng);
  }
  for (auto& f : field) {
    for (int axis = 0; axis < 3; ++axis) {
      std::vector<double> out(cells);
      for (std::size_t x = 0; x < n[0]; ++x)
        for (std::size_t y = 0; y < n[1]; ++y)
          for (std::size_t z = 0; z < n[2]; ++z) {
            std::array<std::size_t, 3> c{x, y, z};
            auto at = [&](std::ptrdiff_t delta) {
              auto q = c;
              std::ptrdiff_t v = static_cast<std::ptrdiff_t>(q[axis]) + delta;
              v = std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n[axis]) - 1);
              q[axis] = static_cast<std::size_t>(v);
              return f[idx(q[0], q[1], q[2])];
            };
            out[idx(x, y, z)] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
          }
      f = std::move(out);
    }
  }
  for (std::size_t i = 0; i < p.rows(); ++i) {
    std::array<std::size_t, 3> c0{};
    std::array<double, 3> w{};
    for (int d = 0; d < 3; ++d) {
      double u = (p(i, d) - lo[d]) / pitch;
      c0[d] = std::min(static_cast<std::size_t>(u), n[d] - 2);
      w[d] = u - static_cast<double>(c0[d]);
    }
    std::array<double, 3> disp{};
    for (int corner = 0; corner < 8; ++corner) {
      double wt = 1.0;
      std::array<std::size_t, 3> c = c0;
      for (int d = 0; d < 3; ++d) {
        const bool up = (corner >> d) & 1;
        wt *= up ? w[d] : 1.0 - w[d];
        c[d] += up;
      }
      for (int d = 0; d < 3; ++d) disp[d] += wt * field[d][idx(c[0], c[1], c[2])];
    }
    for (int d = 0; d < 3; ++d) p(i, d) += magnitude * disp[d];
  }
}

inline void gaussian_noise(Matrix<double>& p, double sigma, std::mt19937_64& rng) {
  if (sigma == 0.0) return;
  std::normal_distribution<double> g(0.0, sigma);
  for (auto& v : p.storage()) v += g(rng);
}

inline void chroma_shift(Matrix<double>& colors, double translate, double jitter, std::mt19937_64& rng) {
  if (translate == 0.0 && jitter == 0.0) return;
  std::array<double, 3> shift{};
  if (translate > 0.0) {
    std::uniform_real_distribution<double> u(-translate, translate);
    for (auto& s : shift) s = u(rng);
  }
  std::normal_distribution<double> g(0.0, jitter > 0.0 ? jitter : 1.0);
  for (std::size_t i = 0; i < colors.rows(); ++i)
    for (std::size_t c = 0; c < colors.cols() && c < 3; ++c) {
      double v = colors(i, c) + shift[c] + (jitter > 0.0 ? g(rng) : 0.0);
      colors(i, c) = std::clamp(v, 0.0, 255.0);
    }
}

// Fixed order: scale, rotate about gravity, translate, elastic distortion,
// point noise, chromatic translation and jitter. Labels are untouched.
inline synth::Frame augment(synth::Frame f, const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  if (cfg.scale > 0.0) scale_points(f.points, 1.0 + cfg.scale * u(rng));
  if (cfg.rotate > 0.0) rotate_about_gravity(f.points, cfg.rotate * u(rng));
  if (cfg.translate > 0.0) {
    translate_points(f.points, {cfg.translate * u(rng), cfg.translate * u(rng), cfg.translate * u(rng)});
  }
  if (cfg.elastic_magnitude > 0.0) elastic_distort(f.points, cfg.elastic_magnitude, cfg.elastic_pitch, rng);
  gaussian_noise(f.points, cfg.noise_sigma, rng);
  chroma_shift(f.colors, cfg.chroma_translate, cfg.chroma_jitter, rng);
  return f;
}

}  // namespace mink::augment
