#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mink/coords.hpp"

namespace mink {

using Offset = std::array<std::int32_t, kMaxDim>;

enum class KernelShape { hypercube, hypercross, hybrid, custom };

inline const char* to_string(KernelShape s) {
  switch (s) {
    case KernelShape::hypercube: return "hypercube";
    case KernelShape::hypercross: return "hypercross";
    case KernelShape::hybrid: return "hybrid";
    case KernelShape::custom: return "custom";
  }
  return "?";
}

inline KernelShape parse_kernel_shape(const std::string& s) {
  if (s == "hypercube" || s == "cube") return KernelShape::hypercube;
  if (s == "hypercross" || s == "cross") return KernelShape::hypercross;
  if (s == "hybrid") return KernelShape::hybrid;
  if (s == "custom") return KernelShape::custom;
  throw std::invalid_argument("unknown kernel shape '" + s + "'");
}

// Ordered offset set defining a kernel's support. Offsets are stored already
// scaled by dilation; the kernel map multiplies them by the input tensor stride.
class KernelRegion {
 public:
  static KernelRegion enumerate(KernelShape shape, std::vector<int> size, int dim, std::vector<int> dilation = {}) {
    if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("KernelRegion: dimension outside 1..7");
    if (shape == KernelShape::custom) {
      throw std::invalid_argument("KernelRegion: custom shapes take explicit offsets");
    }
    if (size.size() == 1 && dim > 1) size.assign(dim, size[0]);
    if (dilation.empty()) dilation.assign(dim, 1);
    if (dilation.size() == 1 && dim > 1) dilation.assign(dim, dilation[0]);
    if (size.size() != static_cast<std::size_t>(dim) || dilation.size() != static_cast<std::size_t>(dim)) {
      throw std::invalid_argument("KernelRegion: size/dilation need one entry per axis");
    }
    for (int d = 0; d < dim; ++d) {
      if (size[d] < 1 || size[d] % 2 == 0) {
        throw std::invalid_argument("KernelRegion: built-in shapes need odd positive sizes, got " +
                                    std::to_string(size[d]));
      }
      if (dilation[d] < 1) throw std::invalid_argument("KernelRegion: dilation must be positive");
    }
    if (shape == KernelShape::hybrid && dim < 2) {
      throw std::invalid_argument("KernelRegion: hybrid needs at least one spatial and one temporal axis");
    }

    std::set<Offset> offsets;
    auto radius = [&](int d) { return (size[d] - 1) / 2; };
    auto cube = [&](int axes, Offset fixed) {
      // Odometer over the first `axes` axes.
      Offset o = fixed;
      for (int d = 0; d < axes; ++d) o[d] = -radius(d);
      while (true) {
        Offset scaled = o;
        for (int d = 0; d < axes; ++d) scaled[d] *= dilation[d];
        offsets.insert(scaled);
        int d = axes - 1;
        while (d >= 0 && o[d] == radius(d)) {
          o[d] = -radius(d);
          --d;
        }
        if (d < 0) break;
        ++o[d];
      }
    };
    auto cross = [&](int first_axis) {
      offsets.insert(Offset{});
      for (int d = first_axis; d < dim; ++d) {
        for (int k = -radius(d); k <= radius(d); ++k) {
          Offset o{};
          o[d] = k * dilation[d];
          offsets.insert(o);
        }
      }
    };
    switch (shape) {
      case KernelShape::hypercube: cube(dim, Offset{}); break;
      case KernelShape::hypercross: cross(0); break;
      case KernelShape::hybrid:
        cube(dim - 1, Offset{});
        cross(dim - 1);
        break;
      case KernelShape::custom: break;
    }
    KernelRegion r;
    r.dim_ = dim;
    r.shape_ = shape;
    r.size_ = std::move(size);
    r.dilation_ = std::move(dilation);
    r.offsets_.assign(offsets.begin(), offsets.end());
    return r;
  }

  static KernelRegion hypercube(int dim, int size, int dilation = 1) {
    return enumerate(KernelShape::hypercube, {size}, dim, {dilation});
  }
  static KernelRegion hypercross(int dim, int size, int dilation = 1) {
    return enumerate(KernelShape::hypercross, {size}, dim, {dilation});
  }
  // Spatial cube on the first dim-1 axes plus a cross along the last (temporal) axis.
  static KernelRegion hybrid(int dim, int spatial_size, int temporal_size) {
    std::vector<int> size(dim, spatial_size);
    size.back() = temporal_size;
    return enumerate(KernelShape::hybrid, size, dim);
  }

  // Explicit offsets, kept in the given order. Rejects duplicates.
  static KernelRegion custom(int dim, std::vector<Offset> offsets) {
    if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("KernelRegion: dimension outside 1..7");
    std::set<Offset> seen;
    for (auto& o : offsets) {
      for (int d = dim; d < kMaxDim; ++d) o[d] = 0;
      if (!seen.insert(o).second) throw std::invalid_argument("KernelRegion: duplicate offset");
    }
    KernelRegion r;
    r.dim_ = dim;
    r.shape_ = KernelShape::custom;
    r.offsets_ = std::move(offsets);
    return r;
  }

  // Offsets {0..extent[d]-1} per axis: the cell covered by one output of a
  // stride-`extent` downsampling. Used for 2^D-style pooling and down/up convs.
  static KernelRegion cell(int dim, std::span<const std::int32_t> extent) {
    std::vector<Offset> offs{Offset{}};
    for (int d = 0; d < dim; ++d) {
      std::vector<Offset> next;
      for (const auto& o : offs) {
        for (int k = 0; k < extent[d]; ++k) {
          Offset n = o;
          n[d] = k;
          next.push_back(n);
        }
      }
      offs = std::move(next);
    }
    std::sort(offs.begin(), offs.end());
    return custom(dim, std::move(offs));
  }

  // Negated offsets, index-aligned with this region.
  KernelRegion mirrored() const {
    std::vector<Offset> m = offsets_;
    for (auto& o : m) {
      for (int d = 0; d < dim_; ++d) o[d] = -o[d];
    }
    return custom(dim_, std::move(m));
  }

  KernelRegion without_origin() const {
    std::vector<Offset> m;
    for (const auto& o : offsets_) {
      if (o != Offset{}) m.push_back(o);
    }
    return custom(dim_, std::move(m));
  }

  int dimension() const { return dim_; }
  KernelShape shape() const { return shape_; }
  const std::vector<int>& size() const { return size_; }
  const std::vector<int>& dilation() const { return dilation_; }
  const std::vector<Offset>& offsets() const { return offsets_; }
  std::size_t volume() const { return offsets_.size(); }

  friend bool operator==(const KernelRegion& a, const KernelRegion& b) {
    return a.dim_ == b.dim_ && a.offsets_ == b.offsets_;
  }

 private:
  KernelRegion() = default;

  int dim_ = 0;
  KernelShape shape_ = KernelShape::custom;
  std::vector<int> size_;
  std::vector<int> dilation_;
  std::vector<Offset> offsets_;
};

// Per-offset (input row, output row) lists. Entry k corresponds to offset k
// of the region the map was built from, including offsets with no pairs.
struct KernelMapEntry {
  Offset offset{};
  std::vector<std::size_t> in;
  std::vector<std::size_t> out;
};

struct KernelMap {
  int dim = 0;
  std::vector<KernelMapEntry> entries;

  std::size_t volume() const { return entries.size(); }
  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.in.size();
    return n;
  }
  // Same pairs with input and output roles exchanged.
  KernelMap swapped() const {
    KernelMap m = *this;
    for (auto& e : m.entries) std::swap(e.in, e.out);
    return m;
  }
};

using KernelMapPtr = std::shared_ptr<const KernelMap>;

// For every output coordinate u and offset i, pairs u with the input row at
// u + i * tensor_stride(c_in) when that coordinate exists.
inline KernelMap build_kernel_map(const CoordinateMap& c_in, const CoordinateMap& c_out, const KernelRegion& region) {
  const int dim = c_in.dimension();
  if (c_out.dimension() != dim || region.dimension() != dim) {
    throw std::invalid_argument("build_kernel_map: dimension mismatch (in " + std::to_string(dim) + ", out " +
                                std::to_string(c_out.dimension()) + ", region " +
                                std::to_string(region.dimension()) + ")");
  }
  const auto& stride = c_in.tensor_stride();
  KernelMap map;
  map.dim = dim;
  map.entries.resize(region.volume());
  for (std::size_t k = 0; k < region.volume(); ++k) map.entries[k].offset = region.offsets()[k];

  for (std::size_t row = 0; row < c_out.size(); ++row) {
    const Coordinate& u = c_out.key(row);
    for (std::size_t k = 0; k < region.volume(); ++k) {
      const Offset& off = region.offsets()[k];
      Coordinate q = u;
      bool valid = true;
      for (int d = 0; d < dim; ++d) {
        std::int64_t v = std::int64_t(u.spatial[d]) + std::int64_t(off[d]) * stride[d];
        if (!fits_int32(v)) {
          valid = false;
          break;
        }
        q.spatial[d] = static_cast<std::int32_t>(v);
      }
      if (!valid) continue;
      if (auto in_row = c_in.find(q)) {
        map.entries[k].in.push_back(*in_row);
        map.entries[k].out.push_back(row);
      }
    }
  }
  return map;
}

// Kernel map of a transposed convolution from c_in (coarse) to c_out (fine):
// the forward map from c_out to c_in with roles exchanged, offsets unchanged.
inline KernelMap transposed_kernel_map(const CoordinateMap& c_in, const CoordinateMap& c_out,
                                       const KernelRegion& region) {
  return build_kernel_map(c_out, c_in, region).swapped();
}

struct GlobalPoolMap {
  KernelMap map;
  std::vector<std::int32_t> batches;  // batch index of each output row
};

// Sends every row of a batch to that batch's single output row.
inline GlobalPoolMap global_kernel_map(std::span<const std::int32_t> batch_of_row) {
  GlobalPoolMap g;
  g.batches.assign(batch_of_row.begin(), batch_of_row.end());
  std::sort(g.batches.begin(), g.batches.end());
  g.batches.erase(std::unique(g.batches.begin(), g.batches.end()), g.batches.end());
  g.map.dim = 0;
  g.map.entries.resize(1);
  auto& e = g.map.entries[0];
  e.in.reserve(batch_of_row.size());
  e.out.reserve(batch_of_row.size());
  for (std::size_t r = 0; r < batch_of_row.size(); ++r) {
    auto it = std::lower_bound(g.batches.begin(), g.batches.end(), batch_of_row[r]);
    e.in.push_back(r);
    e.out.push_back(static_cast<std::size_t>(it - g.batches.begin()));
  }
  return g;
}

inline std::vector<std::int32_t> batch_indices(const CoordinateMap& map) {
  std::vector<std::int32_t> b(map.size());
  for (std::size_t r = 0; r < map.size(); ++r) b[r] = map.key(r).batch;
  return b;
}

// Diagnostic text dump: one "offset" line per entry followed by "in out" pairs.
inline void write_kernel_map_text(std::ostream& os, const KernelMap& map) {
  os << "kernel_map dim " << map.dim << " offsets " << map.entries.size() << "\n";
  for (const auto& e : map.entries) {
    os << "offset";
    for (int d = 0; d < map.dim; ++d) os << ' ' << e.offset[d];
    os << " pairs " << e.in.size() << "\n";
    for (std::size_t k = 0; k < e.in.size(); ++k) os << e.in[k] << ' ' << e.out[k] << "\n";
  }
}

}  // namespace mink
