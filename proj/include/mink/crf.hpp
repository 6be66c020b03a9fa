#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mink/autograd.hpp"
#include "mink/coords.hpp"
#include "mink/kernel.hpp"
#include "mink/sparse_ops.hpp"

// Trilateral stationary CRF over (space, time, chroma) nodes. Axis layout of
// the 7D coordinates: x, y, z, t, r, g, b.
namespace mink::crf {

inline constexpr int kTrilateralDim = 7;

struct TrilateralSteps {
  double space = 1.0;   // in voxel units of the input tensor
  double time = 1.0;    // in frames
  double chroma = 25.0; // in 8-bit color units
};

struct TrilateralLift {
  CoordinateMapPtr coords;               // 7D node set, lexicographic rows
  std::vector<std::size_t> row_to_node;  // input row -> node row
  Matrix<double> unary;                  // averaged logits per node
  KernelMapPtr merge_map;                // single-offset map rows -> nodes
};

// Lifts a 3D or 4D logits tensor into trilateral space. For 3D input the
// frame index of each row comes from `times`; 4D input uses its last axis.
inline TrilateralLift lift_to_trilateral(const SparseTensor<double>& logits, const Matrix<double>& colors,
                                         std::span<const double> times, const TrilateralSteps& steps) {
  const int dim = logits.dimension();
  const std::size_t n = logits.size();
  if (dim != 3 && dim != 4) throw std::invalid_argument("lift_to_trilateral: expects a 3D or 4D tensor");
  if (!(steps.space > 0) || !(steps.time > 0) || !(steps.chroma > 0)) {
    throw std::invalid_argument("lift_to_trilateral: steps must be positive");
  }
  if (colors.rows() != n || colors.cols() != 3) throw std::invalid_argument("lift_to_trilateral: colors must be N x 3");
  if (dim == 3 && !times.empty() && times.size() != n) throw std::invalid_argument("lift_to_trilateral: times/rows mismatch");

  Matrix<double> pts(n, kTrilateralDim);
  std::vector<std::int32_t> batch(n);
  std::vector<double> sizes{steps.space, steps.space, steps.space, steps.time, steps.chroma, steps.chroma, steps.chroma};
  for (std::size_t r = 0; r < n; ++r) {
    const Coordinate& c = logits.coords->key(r);
    batch[r] = c.batch;
    for (int d = 0; d < 3; ++d) pts(r, d) = c.spatial[d];
    pts(r, 3) = dim == 4 ? c.spatial[3] : (times.empty() ? 0.0 : times[r]);
    for (int d = 0; d < 3; ++d) {
      double v = colors(r, d);
      if (!std::isfinite(v)) throw std::invalid_argument("lift_to_trilateral: non-finite color at row " + std::to_string(r));
      pts(r, 4 + d) = v;
    }
  }
  auto q = quantize<double>(pts, logits.features, {}, std::span<const double>(sizes), batch, FeatureReduction::mean);
  TrilateralLift lift;
  lift.coords = q.tensor.coords;
  lift.row_to_node = q.point_to_row;
  lift.unary = std::move(q.tensor.features);
  auto m = std::make_shared<KernelMap>();
  m->dim = kTrilateralDim;
  m->entries.resize(1);
  for (std::size_t r = 0; r < n; ++r) {
    m->entries[0].in.push_back(r);
    m->entries[0].out.push_back(lift.row_to_node[r]);
  }
  lift.merge_map = std::move(m);
  return lift;
}

// Stationary pairwise compatibilities: one C x C matrix per 7D offset, the
// origin excluded. Row index is the receiving node's class.
struct CompatibilityKernel {
  KernelRegion region;
  ConvWeights<double> weights;

  // Default neighborhood: 7D hypercross of size 3 without its center (14 offsets).
  static CompatibilityKernel zeros(std::size_t classes, const KernelRegion& region = KernelRegion::hypercross(kTrilateralDim, 3)) {
    KernelRegion r = region.without_origin();
    return CompatibilityKernel{r, ConvWeights<double>(r.volume(), classes, classes)};
  }
};

inline void check_kernel(const KernelRegion& region) {
  if (region.dimension() != kTrilateralDim) throw std::invalid_argument("crf: kernel region must be 7D");
  for (const auto& o : region.offsets()) {
    if (o == Offset{}) throw std::invalid_argument("crf: kernel region must exclude the origin");
  }
}

struct InferenceTrace {
  std::vector<Matrix<double>> q;  // Q^0 .. Q^N
};

// Mean-field inference: Q^0 = softmax(unary), then
// Q^n = softmax(unary + conv(Q^{n-1}; phi_p)) for n = 1..N.
inline InferenceTrace ts_crf_trace(const Matrix<double>& unary, const CoordinateMap& coords7,
                                   const CompatibilityKernel& kernel, std::size_t iterations) {
  check_kernel(kernel.region);
  if (unary.rows() != coords7.size()) throw std::invalid_argument("ts_crf_infer: unary rows != node count");
  if (kernel.weights.in_channels() != unary.cols() || kernel.weights.out_channels() != unary.cols()) {
    throw std::invalid_argument("ts_crf_infer: compatibility matrices must be C x C");
  }
  InferenceTrace trace;
  trace.q.push_back(softmax_rows(unary));
  if (iterations == 0) return trace;
  KernelMap map = build_kernel_map(coords7, coords7, kernel.region);
  for (std::size_t it = 0; it < iterations; ++it) {
    Matrix<double> z = sparse_conv_forward(trace.q.back(), kernel.weights, map, coords7.size());
    z += unary;
    trace.q.push_back(softmax_rows(z));
  }
  return trace;
}

inline Matrix<double> ts_crf_infer(const Matrix<double>& unary, const CoordinateMap& coords7,
                                   const CompatibilityKernel& kernel, std::size_t iterations) {
  return std::move(ts_crf_trace(unary, coords7, kernel, iterations).q.back());
}

struct CrfGradients {
  Matrix<double> unary;
  ConvWeights<double> pairwise;
};

// Backpropagation through the unrolled recurrence given dL/dQ^N. Every
// iteration contributes to both gradients; the unary also receives the
// Q^0 softmax path.
inline CrfGradients crf_backward(const InferenceTrace& trace, const CoordinateMap& coords7,
                                 const CompatibilityKernel& kernel, const Matrix<double>& grad_q) {
  const std::size_t iterations = trace.q.size() - 1;
  CrfGradients g{Matrix<double>(grad_q.rows(), grad_q.cols()),
                 ConvWeights<double>(kernel.weights.volume(), kernel.weights.out_channels(), kernel.weights.in_channels())};
  KernelMap map = build_kernel_map(coords7, coords7, kernel.region);
  Matrix<double> upstream = grad_q;
  for (std::size_t n = iterations; n >= 1; --n) {
    Matrix<double> dz = softmax_backward(trace.q[n], upstream);
    g.unary += dz;
    auto cg = sparse_conv_backward(dz, trace.q[n - 1], kernel.weights, map);
    for (std::size_t i = 0; i < cg.weights.storage().size(); ++i) g.pairwise.storage()[i] += cg.weights.storage()[i];
    upstream = std::move(cg.input);
  }
  g.unary += softmax_backward(trace.q[0], upstream);
  return g;
}

// Tape version. Returns the final pre-softmax logits unary + conv(Q^{N-1}),
// so softmax of the result is Q^N and cross_entropy applies directly. With
// zero iterations the unary itself is returned.
inline ag::Var ts_crf(ag::Tape& t, ag::Var unary, ag::Parameter& pairwise, KernelMapPtr map, std::size_t iterations) {
  ag::Var z = unary;
  for (std::size_t it = 0; it < iterations; ++it) {
    ag::Var q = ag::softmax(t, z);
    ag::Var msg = ag::conv(t, q, pairwise, map, t.coords(unary));
    z = ag::add(t, unary, msg);
  }
  return z;
}

}  // namespace mink::crf
