#pragma once

// Independent oracles and random-instance generators shared by the unit and
// acceptance tests. Nothing here uses kernel maps or hash lookups, so they
// check the library rather than restate it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "mink/autograd.hpp"
#include "mink/coords.hpp"
#include "mink/kernel.hpp"
#include "mink/matrix.hpp"
#include "mink/sparse_ops.hpp"

namespace testutil {

using namespace mink;

inline Matrix<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(r, c);
  for (auto& v : m.storage()) v = u(rng);
  return m;
}

inline ConvWeights<double> random_weights(std::size_t vol, std::size_t out, std::size_t in, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ConvWeights<double> w(vol, out, in);
  for (auto& v : w.storage()) v = u(rng);
  return w;
}

inline Coordinate coord(std::int32_t batch, std::initializer_list<std::int32_t> xs) {
  Coordinate c{};
  c.batch = batch;
  int d = 0;
  for (auto x : xs) c.spatial[d++] = x;
  return c;
}

// `count` distinct random coordinates in [0, extent)^dim over `batches` batches,
// in the given tensor stride.
inline std::shared_ptr<CoordinateMap> random_coords(int dim, std::size_t count, int extent, std::mt19937_64& rng,
                                                    int batches = 1, std::int32_t stride = 1) {
  std::uniform_int_distribution<int> ux(0, extent - 1), ub(0, batches - 1);
  std::set<std::vector<std::int32_t>> seen;
  std::vector<Coordinate> out;
  const std::size_t cap = static_cast<std::size_t>(std::pow(extent, dim)) * batches;
  count = std::min(count, cap);
  while (out.size() < count) {
    Coordinate c{};
    c.batch = ub(rng);
    std::vector<std::int32_t> key{c.batch};
    for (int d = 0; d < dim; ++d) {
      c.spatial[d] = ux(rng) * stride;
      key.push_back(c.spatial[d]);
    }
    if (seen.insert(key).second) out.push_back(c);
  }
  return make_sorted_map(std::move(out), dim, std::vector<std::int32_t>(dim, stride));
}

// ---------------------------------------------------------------------------
// Dense 3D convolution on an n^3 grid with zero padding:
// y[u] = sum_i W_i x[u + i] for u on the stride lattice {0, s, 2s, ...}.
// Returns a map from output grid position to feature vector.
struct DenseGrid {
  int n = 0;
  std::size_t channels = 0;
  std::vector<double> data;  // (x * n + y) * n + z, then channel

  double& at(int x, int y, int z, std::size_t c) { return data[((x * n + y) * n + z) * channels + c]; }
  double at(int x, int y, int z, std::size_t c) const {
    if (x < 0 || y < 0 || z < 0 || x >= n || y >= n || z >= n) return 0.0;
    return data[((x * n + y) * n + z) * channels + c];
  }
};

inline std::map<std::array<int, 3>, std::vector<double>> dense_conv3d(const DenseGrid& x, int stride,
                                                                     const std::vector<std::array<int, 3>>& offsets,
                                                                     const ConvWeights<double>& w) {
  std::map<std::array<int, 3>, std::vector<double>> out;
  for (int ux = 0; ux < x.n; ux += stride)
    for (int uy = 0; uy < x.n; uy += stride)
      for (int uz = 0; uz < x.n; uz += stride) {
        std::vector<double> y(w.out_channels(), 0.0);
        for (std::size_t k = 0; k < offsets.size(); ++k) {
          const auto& o = offsets[k];
          for (std::size_t oc = 0; oc < w.out_channels(); ++oc)
            for (std::size_t ic = 0; ic < w.in_channels(); ++ic)
              y[oc] += w.at(k, oc, ic) * x.at(ux + o[0], uy + o[1], uz + o[2], ic);
        }
        out[{ux, uy, uz}] = std::move(y);
      }
  return out;
}

// Centered K^3 offsets in lexicographic order, enumerated without the library.
inline std::vector<std::array<int, 3>> cube_offsets(int kernel) {
  std::vector<std::array<int, 3>> o;
  const int r = kernel / 2;
  for (int a = -r; a <= r; ++a)
    for (int b = -r; b <= r; ++b)
      for (int c = -r; c <= r; ++c) o.push_back({a, b, c});
  return o;
}

// ---------------------------------------------------------------------------
// Central finite differences.

// Norm-wise relative error ||a - b|| / max(||a|| + ||b||, floor).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-10) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), floor);
}

// Numerical gradient of f with respect to every entry of `x` (modified in
// place and restored).
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// Same, restricted to `indices`.
inline std::vector<double> numeric_gradient_at(std::vector<double>& x, const std::vector<std::size_t>& indices,
                                               const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> g;
  for (std::size_t i : indices) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    g.push_back((fp - fm) / (2 * h));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Direct mean-field update on an explicit node list: no kernel maps, no
// hashing, no sparse convolution. neighbors[i] lists (j, k) with node j at
// offset k from node i.
struct DirectCrfGraph {
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> neighbors;
};

inline DirectCrfGraph direct_graph(const std::vector<std::array<std::int32_t, 8>>& nodes,
                                   const std::vector<std::array<std::int32_t, 7>>& offsets) {
  DirectCrfGraph g;
  g.neighbors.resize(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (std::size_t k = 0; k < offsets.size(); ++k)
      for (std::size_t j = 0; j < nodes.size(); ++j) {
        bool match = nodes[j][0] == nodes[i][0];
        for (int d = 0; d < 7 && match; ++d) match = nodes[j][d + 1] == nodes[i][d + 1] + offsets[k][d];
        if (match) g.neighbors[i].push_back({j, k});
      }
  return g;
}

inline std::vector<double> softmax_vec(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) s += (e[c] = std::exp(z[c] - m));
  for (auto& v : e) v /= s;
  return e;
}

// Q^0 = softmax(phi_u); Q^n_i = softmax(phi_u,i + sum_{(j,k)} phi_p,k Q^{n-1}_j).
inline std::vector<std::vector<double>> direct_mean_field(const std::vector<std::vector<double>>& unary,
                                                          const DirectCrfGraph& g,
                                                          const std::vector<std::vector<std::vector<double>>>& phi_p,
                                                          std::size_t iterations) {
  const std::size_t n = unary.size();
  std::vector<std::vector<double>> q(n);
  for (std::size_t i = 0; i < n; ++i) q[i] = softmax_vec(unary[i]);
  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<std::vector<double>> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z = unary[i];
      for (const auto& [j, k] : g.neighbors[i])
        for (std::size_t a = 0; a < z.size(); ++a)
          for (std::size_t b = 0; b < z.size(); ++b) z[a] += phi_p[k][a][b] * q[j][b];
      next[i] = softmax_vec(z);
    }
    q = std::move(next);
  }
  return q;
}

}  // namespace testutil
