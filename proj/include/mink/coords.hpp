#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mink/matrix.hpp"

namespace mink {

inline constexpr int kMaxDim = 7;
inline constexpr std::int32_t kIgnoreLabel = -1;

// Floor division rounding toward negative infinity.
constexpr std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

constexpr bool fits_int32(std::int64_t v) {
  return v >= std::numeric_limits<std::int32_t>::min() &&
         v <= std::numeric_limits<std::int32_t>::max();
}

// Batch-augmented integer coordinate. Only the first `dim` spatial entries are
// meaningful; the owning map knows the dimension.
struct Coordinate {
  std::int32_t batch = 0;
  std::array<std::int32_t, kMaxDim> spatial{};

  friend bool operator==(const Coordinate&, const Coordinate&) = default;
};

// 64-bit mixing hash over (batch, spatial[0..dim)).
inline std::uint64_t hash_coordinate(const Coordinate& c, int dim) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  std::uint64_t h = mix(static_cast<std::uint32_t>(c.batch) ^ (std::uint64_t(dim) << 32));
  for (int d = 0; d < dim; ++d) {
    h = mix(h ^ static_cast<std::uint32_t>(c.spatial[d]));
  }
  return h;
}

struct CoordinateHash {
  std::uint64_t operator()(const Coordinate& c, int dim) const { return hash_coordinate(c, dim); }
};

// Open-addressing map from Coordinate to a dense row index. Probes compare the
// full key, so lookups are exact whatever the hash quality. Build with insert,
// then share as `std::shared_ptr<const ...>`; const access is thread-safe.
template <class Hasher = CoordinateHash>
class BasicCoordinateMap {
 public:
  BasicCoordinateMap(int dim, std::vector<std::int32_t> tensor_stride, Hasher hasher = {})
      : dim_(dim), tensor_stride_(std::move(tensor_stride)), hasher_(hasher) {
    if (dim < 1 || dim > kMaxDim) {
      throw std::invalid_argument("CoordinateMap: dimension " + std::to_string(dim) +
                                  " outside 1..7");
    }
    if (tensor_stride_.empty()) tensor_stride_.assign(dim, 1);
    if (static_cast<int>(tensor_stride_.size()) != dim) {
      throw std::invalid_argument("CoordinateMap: tensor_stride length must equal dimension");
    }
    for (auto s : tensor_stride_) {
      if (s < 1) throw std::invalid_argument("CoordinateMap: tensor_stride must be positive");
    }
    rehash(16);
  }
  explicit BasicCoordinateMap(int dim) : BasicCoordinateMap(dim, std::vector<std::int32_t>(dim, 1)) {}

  int dimension() const { return dim_; }
  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }
  const std::vector<std::int32_t>& tensor_stride() const { return tensor_stride_; }

  const Coordinate& key(std::size_t row) const { return keys_[row]; }
  const std::vector<Coordinate>& keys() const { return keys_; }

  void reserve(std::size_t n) {
    std::size_t want = std::bit_ceil(std::max<std::size_t>(16, 2 * n));
    if (want > slots_.size()) rehash(want);
  }

  // Returns (row, inserted). Existing coordinates keep their row.
  std::pair<std::size_t, bool> insert(const Coordinate& c) {
    for (int d = 0; d < dim_; ++d) {
      if (c.spatial[d] % tensor_stride_[d] != 0) {
        throw std::invalid_argument("CoordinateMap: coordinate component " + std::to_string(c.spatial[d]) +
                                    " is not a multiple of tensor stride " +
                                    std::to_string(tensor_stride_[d]));
      }
    }
    if (c.batch < 0) throw std::invalid_argument("CoordinateMap: negative batch index");
    if (2 * (keys_.size() + 1) > slots_.size()) rehash(slots_.size() * 2);
    std::size_t slot = probe(c);
    if (slots_[slot] != kEmpty) return {static_cast<std::size_t>(slots_[slot]), false};
    slots_[slot] = static_cast<std::int64_t>(keys_.size());
    Coordinate stored = c;
    for (int d = dim_; d < kMaxDim; ++d) stored.spatial[d] = 0;
    keys_.push_back(stored);
    return {keys_.size() - 1, true};
  }

  std::optional<std::size_t> find(const Coordinate& c) const {
    std::size_t slot = probe(c);
    if (slots_[slot] == kEmpty) return std::nullopt;
    return static_cast<std::size_t>(slots_[slot]);
  }

  // Batch indices present, ascending.
  std::vector<std::int32_t> batches() const {
    std::vector<std::int32_t> b;
    for (const auto& k : keys_) b.push_back(k.batch);
    std::sort(b.begin(), b.end());
    b.erase(std::unique(b.begin(), b.end()), b.end());
    return b;
  }

 private:
  static constexpr std::int64_t kEmpty = -1;

  bool same(const Coordinate& a, const Coordinate& b) const {
    if (a.batch != b.batch) return false;
    for (int d = 0; d < dim_; ++d) {
      if (a.spatial[d] != b.spatial[d]) return false;
    }
    return true;
  }

  std::size_t probe(const Coordinate& c) const {
    const std::size_t mask = slots_.size() - 1;
    std::size_t slot = hasher_(c, dim_) & mask;
    while (slots_[slot] != kEmpty && !same(keys_[slots_[slot]], c)) slot = (slot + 1) & mask;
    return slot;
  }

  void rehash(std::size_t capacity) {
    slots_.assign(capacity, kEmpty);
    for (std::size_t r = 0; r < keys_.size(); ++r) slots_[probe(keys_[r])] = static_cast<std::int64_t>(r);
  }

  int dim_;
  std::vector<std::int32_t> tensor_stride_;
  Hasher hasher_;
  std::vector<Coordinate> keys_;
  std::vector<std::int64_t> slots_;
};

using CoordinateMap = BasicCoordinateMap<>;
using CoordinateMapPtr = std::shared_ptr<const CoordinateMap>;

inline std::optional<std::size_t> lookup(const CoordinateMap& map, const Coordinate& c) { return map.find(c); }

inline bool coordinate_less(const Coordinate& a, const Coordinate& b, int dim) {
  if (a.batch != b.batch) return a.batch < b.batch;
  for (int d = 0; d < dim; ++d) {
    if (a.spatial[d] != b.spatial[d]) return a.spatial[d] < b.spatial[d];
  }
  return false;
}

// Builds a map whose rows follow lexicographic (batch, spatial) order.
inline std::shared_ptr<CoordinateMap> make_sorted_map(std::vector<Coordinate> coords, int dim,
                                                      std::vector<std::int32_t> tensor_stride = {}) {
  if (tensor_stride.empty()) tensor_stride.assign(dim, 1);
  std::sort(coords.begin(), coords.end(),
            [dim](const Coordinate& a, const Coordinate& b) { return coordinate_less(a, b, dim); });
  auto map = std::make_shared<CoordinateMap>(dim, std::move(tensor_stride));
  map->reserve(coords.size());
  for (const auto& c : coords) map->insert(c);
  return map;
}

// Parallel coordinate map and feature matrix.
template <class T>
struct SparseTensor {
  CoordinateMapPtr coords;
  Matrix<T> features;

  SparseTensor() = default;
  SparseTensor(CoordinateMapPtr c, Matrix<T> f) : coords(std::move(c)), features(std::move(f)) {
    if (!coords) throw std::invalid_argument("SparseTensor: null coordinate map");
    if (features.rows() != coords->size()) {
      throw std::invalid_argument("SparseTensor: feature rows " + std::to_string(features.rows()) +
                                  " != coordinate count " + std::to_string(coords->size()));
    }
  }

  std::size_t size() const { return features.rows(); }
  std::size_t channels() const { return features.cols(); }
  int dimension() const { return coords->dimension(); }
};

enum class FeatureReduction { first, mean };

template <class T>
struct QuantizeResult {
  SparseTensor<T> tensor;
  std::vector<std::int32_t> labels;        // empty when no labels were supplied
  std::vector<std::size_t> point_to_row;   // one entry per input point
};

// Voxelizes a point cloud with per-axis voxel sizes. Rows come out in
// lexicographic (batch, spatial) order; ties among points sharing a voxel keep
// input order, so the FIRST policy takes the earliest point. A voxel whose
// points carry two or more distinct labels is labeled kIgnoreLabel.
template <class T>
QuantizeResult<T> quantize(const Matrix<double>& points, const Matrix<T>& features,
                           std::span<const std::int32_t> labels, std::span<const double> voxel_size,
                           std::span<const std::int32_t> batches = {},
                           FeatureReduction reduction = FeatureReduction::first) {
  const std::size_t n = points.rows();
  const int dim = static_cast<int>(points.cols());
  if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("quantize: point dimension outside 1..7");
  if (voxel_size.size() != static_cast<std::size_t>(dim)) {
    throw std::invalid_argument("quantize: voxel_size needs one entry per axis");
  }
  for (double v : voxel_size) {
    if (!(v > 0) || !std::isfinite(v)) throw std::invalid_argument("quantize: voxel_size must be positive");
  }
  if (features.rows() != n) throw std::invalid_argument("quantize: features/points row mismatch");
  if (!labels.empty() && labels.size() != n) throw std::invalid_argument("quantize: labels/points row mismatch");
  if (!batches.empty() && batches.size() != n) throw std::invalid_argument("quantize: batches/points row mismatch");

  std::vector<Coordinate> voxel(n);
  for (std::size_t i = 0; i < n; ++i) {
    voxel[i].batch = batches.empty() ? 0 : batches[i];
    if (voxel[i].batch < 0) throw std::invalid_argument("quantize: negative batch index at row " + std::to_string(i));
    for (int d = 0; d < dim; ++d) {
      double p = points(i, d);
      if (!std::isfinite(p)) {
        throw std::invalid_argument("quantize: non-finite coordinate at row " + std::to_string(i));
      }
      double q = std::floor(p / voxel_size[d]);
      if (q < std::numeric_limits<std::int32_t>::min() || q > std::numeric_limits<std::int32_t>::max()) {
        throw std::invalid_argument("quantize: coordinate overflows 32-bit range at row " + std::to_string(i));
      }
      voxel[i].spatial[d] = static_cast<std::int32_t>(q);
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return coordinate_less(voxel[a], voxel[b], dim);
  });

  auto map = std::make_shared<CoordinateMap>(dim, std::vector<std::int32_t>(dim, 1));
  map->reserve(n);
  QuantizeResult<T> result;
  result.point_to_row.assign(n, 0);
  std::vector<std::size_t> first_point;
  std::vector<std::size_t> counts;
  for (std::size_t i : order) {
    auto [row, inserted] = map->insert(voxel[i]);
    result.point_to_row[i] = row;
    if (inserted) {
      first_point.push_back(i);
      counts.push_back(1);
      if (!labels.empty()) result.labels.push_back(labels[i]);
    } else {
      ++counts[row];
      if (!labels.empty() && result.labels[row] != labels[i]) result.labels[row] = kIgnoreLabel;
    }
  }

  Matrix<T> f(map->size(), features.cols());
  if (reduction == FeatureReduction::first) {
    for (std::size_t r = 0; r < map->size(); ++r) {
      auto src = features.row(first_point[r]);
      std::copy(src.begin(), src.end(), f.row(r).begin());
    }
  } else {
    Matrix<double> acc(map->size(), features.cols());
    for (std::size_t i = 0; i < n; ++i) {
      auto src = features.row(i);
      auto dst = acc.row(result.point_to_row[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
    for (std::size_t r = 0; r < map->size(); ++r) {
      for (std::size_t c = 0; c < f.cols(); ++c) f(r, c) = static_cast<T>(acc(r, c) / counts[r]);
    }
  }
  result.tensor = SparseTensor<T>(std::move(map), std::move(f));
  return result;
}

template <class T>
QuantizeResult<T> quantize(const Matrix<double>& points, const Matrix<T>& features,
                           std::span<const std::int32_t> labels, double voxel_size,
                           std::span<const std::int32_t> batches = {},
                           FeatureReduction reduction = FeatureReduction::first) {
  std::vector<double> sizes(points.cols(), voxel_size);
  return quantize(points, features, labels, std::span<const double>(sizes), batches, reduction);
}

// Output coordinate set of a strided convolution or pooling.
inline std::shared_ptr<CoordinateMap> stride_coordinates(const CoordinateMap& in,
                                                         std::span<const std::int32_t> conv_stride) {
  const int dim = in.dimension();
  if (conv_stride.size() != static_cast<std::size_t>(dim)) {
    throw std::invalid_argument("stride_coordinates: stride needs one entry per axis");
  }
  std::vector<std::int32_t> new_stride(dim);
  bool identity = true;
  for (int d = 0; d < dim; ++d) {
    if (conv_stride[d] < 1) throw std::invalid_argument("stride_coordinates: stride must be >= 1");
    std::int64_t s = std::int64_t(in.tensor_stride()[d]) * conv_stride[d];
    if (!fits_int32(s)) throw std::invalid_argument("stride_coordinates: tensor stride overflow");
    new_stride[d] = static_cast<std::int32_t>(s);
    identity = identity && conv_stride[d] == 1;
  }
  std::vector<Coordinate> out;
  out.reserve(in.size());
  if (identity) {
    out = in.keys();
  } else {
    CoordinateMap seen(dim, new_stride);
    seen.reserve(in.size());
    for (const auto& c : in.keys()) {
      Coordinate s = c;
      for (int d = 0; d < dim; ++d) {
        s.spatial[d] = static_cast<std::int32_t>(floor_div(c.spatial[d], new_stride[d]) * new_stride[d]);
      }
      if (seen.insert(s).second) out.push_back(s);
    }
  }
  return make_sorted_map(std::move(out), dim, std::move(new_stride));
}

inline std::shared_ptr<CoordinateMap> stride_coordinates(const CoordinateMap& in, std::int32_t conv_stride) {
  std::vector<std::int32_t> s(in.dimension(), conv_stride);
  return stride_coordinates(in, std::span<const std::int32_t>(s));
}

}  // namespace mink
