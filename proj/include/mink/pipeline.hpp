#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mink/augment.hpp"
#include "mink/autograd.hpp"
#include "mink/config.hpp"
#include "mink/coords.hpp"
#include "mink/crf.hpp"
#include "mink/io.hpp"
#include "mink/metrics.hpp"
#include "mink/net.hpp"
#include "mink/synth.hpp"

// Training, evaluation and timing loops over synthetic scene sequences.
namespace mink::pipeline {

using config::Mode;
using config::RunConfig;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One network input built from a window of frames. In 3D mode every frame is
// its own batch entry; in 4D mode the frames share batch 0 and the frame time
// becomes the fourth coordinate.
struct Sample {
  SparseTensor<double> input;              // features: color / 255 - 0.5
  std::vector<std::int32_t> labels;        // per voxel
  std::vector<std::size_t> point_to_row;   // per point, frames concatenated
  std::vector<std::int32_t> point_labels;
  std::vector<std::size_t> frame_begin;    // point offsets, one past the end last
  Matrix<double> colors;                   // per voxel, 0..255
  std::vector<double> times;               // per voxel
};

inline Sample build_input(std::span<const synth::Frame> window, Mode mode, double voxel_size) {
  if (window.empty()) throw std::invalid_argument("build_input: empty window");
  const int dim = mode == Mode::d4 ? 4 : 3;
  std::size_t n = 0;
  for (const auto& f : window) n += f.size();
  Matrix<double> pts(n, dim), feat(n, 3);
  std::vector<std::int32_t> batch(n, 0);
  Sample s;
  s.point_labels.reserve(n);
  s.frame_begin.push_back(0);
  std::size_t row = 0;
  for (std::size_t w = 0; w < window.size(); ++w) {
    const auto& f = window[w];
    for (std::size_t i = 0; i < f.size(); ++i, ++row) {
      for (int d = 0; d < 3; ++d) {
        pts(row, d) = f.points(i, d);
        feat(row, d) = f.colors(i, d) / 255.0 - 0.5;
      }
      if (dim == 4) pts(row, 3) = static_cast<double>(f.time);
      if (mode == Mode::d3) batch[row] = static_cast<std::int32_t>(w);
      s.point_labels.push_back(f.labels[i]);
    }
    s.frame_begin.push_back(row);
  }
  std::vector<double> sizes(dim, voxel_size);
  if (dim == 4) sizes[3] = 1.0;
  auto q = quantize<double>(pts, feat, s.point_labels, std::span<const double>(sizes), batch);
  s.input = std::move(q.tensor);
  s.labels = std::move(q.labels);
  s.point_to_row = std::move(q.point_to_row);
  const std::size_t nv = s.input.size();
  s.colors = Matrix<double>(nv, 3);
  s.times.resize(nv);
  for (std::size_t r = 0; r < nv; ++r) {
    for (int c = 0; c < 3; ++c) s.colors(r, c) = (s.input.features(r, c) + 0.5) * 255.0;
    const Coordinate& key = s.input.coords->key(r);
    s.times[r] = dim == 4 ? key.spatial[3] : static_cast<double>(window[key.batch].time);
  }
  return s;
}

// Gaussian position noise on every frame, seeded independently of training.
inline void inject_point_noise(synth::SceneSequence& seq, double sigma, std::uint64_t seed) {
  if (sigma <= 0.0) return;
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  for (auto& f : seq.frames) augment::gaussian_noise(f.points, sigma, rng);
}

// Applies one augmentation draw to a whole window so frames stay consistent.
inline void augment_window(std::vector<synth::Frame>& window, const augment::AugmentConfig& cfg, std::mt19937_64& rng) {
  synth::Frame merged;
  std::size_t n = 0;
  for (const auto& f : window) n += f.size();
  merged.points = Matrix<double>(n, 3);
  merged.colors = Matrix<double>(n, 3);
  std::size_t row = 0;
  for (const auto& f : window)
    for (std::size_t i = 0; i < f.size(); ++i, ++row)
      for (int d = 0; d < 3; ++d) {
        merged.points(row, d) = f.points(i, d);
        merged.colors(row, d) = f.colors(i, d);
      }
  merged = augment::augment(std::move(merged), cfg, rng);
  row = 0;
  for (auto& f : window)
    for (std::size_t i = 0; i < f.size(); ++i, ++row)
      for (int d = 0; d < 3; ++d) {
        f.points(i, d) = merged.points(row, d);
        f.colors(i, d) = merged.colors(row, d);
      }
}

// ---------------------------------------------------------------------------

struct Model {
  net::Network net;
  Mode mode = Mode::d4;
  config::CrfConfig crf;
  KernelRegion crf_region;
  std::optional<ag::Parameter> crf_pairwise;

  std::vector<ag::Parameter*> parameters() {
    auto p = net.parameters();
    if (crf_pairwise) p.push_back(&*crf_pairwise);
    return p;
  }
  int dimension() const { return net.config().dimension; }
  std::size_t classes() const { return net.config().classes; }
};

inline net::NetworkConfig network_config(const RunConfig& cfg, Mode mode, std::size_t classes) {
  net::NetworkConfig nc;
  nc.dimension = mode == Mode::d4 ? 4 : 3;
  nc.in_channels = 3;
  nc.classes = classes;
  nc.blocks = cfg.network.blocks;
  nc.width = cfg.network.width;
  nc.level_kernels.assign(nc.blocks.size(), config::level_kernel(cfg, nc.dimension));
  nc.kernel_size = cfg.network.kernel_size;
  nc.stem_size = cfg.network.stem_size;
  nc.temporal = mode == Mode::d4;
  nc.seed = cfg.run.seed;
  return nc;
}

inline Model make_model(const RunConfig& cfg, Mode mode, std::size_t classes) {
  auto nc = network_config(cfg, mode, classes);
  Model m{cfg.network.arch == "minknet" ? net::Network::minknet(nc) : net::Network::minkunet(nc), mode, cfg.crf,
          KernelRegion::hypercross(crf::kTrilateralDim, 3).without_origin(), std::nullopt};
  if (cfg.crf.enabled) {
    const std::size_t vol = m.crf_region.volume();
    m.crf_pairwise.emplace("crf.pairwise", vol * classes, classes, std::vector<std::size_t>{vol, classes, classes});
  }
  return m;
}

// Per-voxel logits for a sample. With the CRF attached, the network logits
// are averaged into trilateral nodes, refined, and gathered back per voxel.
inline ag::Var forward(Model& m, ag::Tape& t, const Sample& s, net::Context& ctx) {
  ag::Var x = t.input(s.input.features, s.input.coords);
  ag::Var z = m.net.forward(t, x, ctx);
  if (!m.crf_pairwise || s.input.size() == 0) return z;
  auto lift = crf::lift_to_trilateral(SparseTensor<double>(s.input.coords, t.value(z)), s.colors, s.times, m.crf.steps);
  ag::Var unary = ag::avg_pool(t, z, lift.merge_map, lift.coords, lift.coords->size());
  auto map = std::make_shared<const KernelMap>(build_kernel_map(*lift.coords, *lift.coords, m.crf_region));
  ag::Var z7 = crf::ts_crf(t, unary, *m.crf_pairwise, std::move(map), m.crf.iterations);
  return ag::gather_rows(t, z7, lift.row_to_node, s.input.coords);
}

inline Matrix<double> predict_logits(Model& m, const Sample& s) {
  ag::Tape t;
  net::Context ctx(false);
  return t.value(forward(m, t, s, ctx));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline io::Checkpoint save_state(Model& m) {
  io::Checkpoint c;
  for (ag::Parameter* p : m.parameters()) {
    io::Blob b;
    b.dims.assign(p->shape.begin(), p->shape.end());
    b.data = p->value.storage();
    c[p->name] = std::move(b);
  }
  for (const auto& buf : m.net.buffers()) c[buf.name] = io::Blob{{buf.data->size()}, *buf.data};
  c["meta.dimension"] = io::Blob{{1}, {static_cast<double>(m.dimension())}};
  return c;
}

inline void load_state(Model& m, const io::Checkpoint& c) {
  auto check = [&](const std::string& name, const std::vector<std::uint64_t>& want) -> const io::Blob& {
    auto it = c.find(name);
    if (it == c.end()) {
      throw ShapeError("checkpoint has no entry '" + name + "' (network shape " + io::shape_string(want) + ")");
    }
    if (it->second.dims != want) {
      throw ShapeError("shape mismatch for '" + name + "': checkpoint " + io::shape_string(it->second.dims) +
                       " vs network " + io::shape_string(want));
    }
    return it->second;
  };
  check("meta.dimension", {1});
  const double d = c.at("meta.dimension").data.at(0);
  if (d != m.dimension()) {
    throw ShapeError("checkpoint was trained for D=" + std::to_string(static_cast<int>(d)) + ", network has D=" +
                     std::to_string(m.dimension()));
  }
  for (ag::Parameter* p : m.parameters()) {
    const auto& b = check(p->name, std::vector<std::uint64_t>(p->shape.begin(), p->shape.end()));
    p->value.storage() = b.data;
  }
  for (const auto& buf : m.net.buffers()) *buf.data = check(buf.name, {buf.data->size()}).data;
}

// ---------------------------------------------------------------------------
// Training

inline std::vector<std::size_t> window_starts(std::size_t frames, std::size_t length, std::size_t stride) {
  std::vector<std::size_t> s;
  if (frames <= length) return {0};
  for (std::size_t i = 0; i + length <= frames; i += stride) s.push_back(i);
  return s;
}

inline std::vector<synth::Frame> slice(const synth::SceneSequence& seq, std::size_t start, std::size_t length) {
  const std::size_t end = std::min(seq.frames.size(), start + length);
  return std::vector<synth::Frame>(seq.frames.begin() + static_cast<std::ptrdiff_t>(start),
                                   seq.frames.begin() + static_cast<std::ptrdiff_t>(end));
}

struct TrainResult {
  Model model;
  std::vector<double> losses;
};

// Logs "iter,loss,lr" rows to `log` when given.
inline TrainResult train(const RunConfig& cfg, const synth::SceneSequence& seq, std::ostream* log = nullptr) {
  if (seq.frames.empty()) throw std::invalid_argument("train: empty sequence");
  TrainResult r{make_model(cfg, cfg.run.mode, seq.classes), {}};
  auto params = r.model.parameters();
  const auto starts = window_starts(seq.frames.size(), cfg.data.window, cfg.data.window_stride);
  ag::PolySchedule sched{cfg.optim.lr, cfg.optim.power, cfg.optim.iterations};
  std::mt19937_64 rng(cfg.run.seed * 0x2545F4914F6CDD1DULL + 17);
  if (log) *log << "iter,loss,lr\n";
  for (std::size_t it = 0; it < cfg.optim.iterations; ++it) {
    auto window = slice(seq, starts[it % starts.size()], cfg.data.window);
    if (cfg.augment_enabled) augment_window(window, cfg.augment, rng);
    Sample s = build_input(window, cfg.run.mode, cfg.data.voxel_size);
    ag::Tape t;
    net::Context ctx(true);
    ag::Var z = forward(r.model, t, s, ctx);
    ag::Var loss = ag::cross_entropy(t, z, s.labels);
    ag::zero_grad(params);
    t.backward(loss);
    const double lr = sched.lr(it);
    ag::sgd_step(params, lr, cfg.optim.momentum);
    const double l = t.value(loss)(0, 0);
    r.losses.push_back(l);
    if (log) *log << it << ',' << l << ',' << lr << '\n';
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ReportRow {
  std::string mode;
  metrics::SegmentationScores scores;
};

struct EvalReport {
  std::size_t classes = 0;
  std::vector<ReportRow> rows;
};

inline std::string mode_name(const Model& m) {
  std::string n = m.mode == Mode::d4 ? "4D" : "3D";
  return m.crf_pairwise ? n + "-CRF" : n;
}

// Per-point predictions for every frame. 4D models see non-overlapping
// windows (the last one clipped to the end of the sequence) so each frame is
// predicted once; 3D models see single frames.
inline std::vector<std::vector<std::int32_t>> frame_predictions(const RunConfig& cfg, Model& m,
                                                               const synth::SceneSequence& seq) {
  const std::size_t n = seq.frames.size();
  const std::size_t len = m.mode == Mode::d4 ? cfg.data.window : 1;
  std::vector<std::vector<std::int32_t>> out(n);
  for (std::size_t s0 = 0; s0 < n; s0 += len) {
    const std::size_t start = n >= len ? std::min(s0, n - len) : 0;
    Sample s = build_input(slice(seq, start, len), m.mode, cfg.data.voxel_size);
    auto pred = metrics::argmax_rows(predict_logits(m, s));
    auto points = metrics::propagate_to_points(pred, s.point_to_row);
    for (std::size_t f = s0; f < std::min(n, s0 + len); ++f) {
      const std::size_t w = f - start;
      out[f].assign(points.begin() + static_cast<std::ptrdiff_t>(s.frame_begin[w]),
                    points.begin() + static_cast<std::ptrdiff_t>(s.frame_begin[w + 1]));
    }
  }
  return out;
}

// Temporal averaging over single-frame predictions: each voxel's logits are
// averaged with the logits of the same voxel in the neighboring frames of a
// centered window.
inline std::vector<std::vector<std::int32_t>> temporal_average_predictions(const RunConfig& cfg, Model& m,
                                                                          const synth::SceneSequence& seq) {
  const std::size_t n = seq.frames.size();
  std::vector<Sample> samples;
  std::vector<Matrix<double>> logits;
  for (std::size_t f = 0; f < n; ++f) {
    samples.push_back(build_input(slice(seq, f, 1), Mode::d3, cfg.data.voxel_size));
    logits.push_back(predict_logits(m, samples.back()));
  }
  std::vector<std::vector<std::int32_t>> out(n);
  const std::size_t half = cfg.data.window / 2;
  for (std::size_t f = 0; f < n; ++f) {
    Matrix<double> avg = logits[f];
    std::vector<double> count(avg.rows(), 1.0);
    const std::size_t lo = f >= half ? f - half : 0, hi = std::min(n - 1, f + half);
    for (std::size_t g = lo; g <= hi; ++g) {
      if (g == f) continue;
      for (std::size_t r = 0; r < avg.rows(); ++r) {
        auto other = samples[g].input.coords->find(samples[f].input.coords->key(r));
        if (!other) continue;
        for (std::size_t c = 0; c < avg.cols(); ++c) avg(r, c) += logits[g](*other, c);
        count[r] += 1.0;
      }
    }
    for (std::size_t r = 0; r < avg.rows(); ++r)
      for (std::size_t c = 0; c < avg.cols(); ++c) avg(r, c) /= count[r];
    out[f] = metrics::propagate_to_points(metrics::argmax_rows(avg), samples[f].point_to_row);
  }
  return out;
}

inline metrics::SegmentationScores score_sequence(const synth::SceneSequence& seq, std::size_t classes,
                                                  const std::vector<std::vector<std::int32_t>>& pred) {
  metrics::ConfusionMatrix cm(classes);
  for (std::size_t f = 0; f < seq.frames.size(); ++f) cm.add(seq.frames[f].labels, pred[f]);
  return metrics::score(cm);
}

// One row for the model's own mode; 3D models add a temporal-averaging row.
inline EvalReport evaluate(const RunConfig& cfg, Model& m, const synth::SceneSequence& seq) {
  EvalReport rep;
  rep.classes = m.classes();
  rep.rows.push_back({mode_name(m), score_sequence(seq, rep.classes, frame_predictions(cfg, m, seq))});
  if (m.mode == Mode::d3) {
    rep.rows.push_back(
        {mode_name(m) + "-TA", score_sequence(seq, rep.classes, temporal_average_predictions(cfg, m, seq))});
  }
  return rep;
}

inline void write_report(std::ostream& os, const EvalReport& rep) {
  os << "mode,miou,macc";
  for (std::size_t k = 0; k < rep.classes; ++k) os << ",iou_" << k;
  os << '\n';
  for (const auto& row : rep.rows) {
    os << row.mode << ',' << row.scores.miou << ',' << row.scores.macc;
    for (double v : row.scores.iou) os << ',' << v;
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Timing

struct BenchRow {
  double voxel_size = 0;
  std::size_t window = 0;
  double seconds_3d = 0, seconds_4d = 0, seconds_4d_crf = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

// Wall-clock medians of quantize + inference over a window, for every
// voxel size and window length.
inline std::vector<BenchRow> bench(const RunConfig& cfg, const synth::SceneSequence& seq) {
  const std::size_t max_window = *std::max_element(cfg.bench.windows.begin(), cfg.bench.windows.end());
  if (seq.frames.size() < max_window) {
    throw std::invalid_argument("bench: sequence has " + std::to_string(seq.frames.size()) +
                                " frames, longest window needs " + std::to_string(max_window));
  }
  RunConfig plain = cfg;
  plain.crf.enabled = false;
  RunConfig with_crf = cfg;
  with_crf.crf.enabled = true;
  Model m3 = make_model(plain, Mode::d3, seq.classes);
  Model m4 = make_model(plain, Mode::d4, seq.classes);
  Model m4c = make_model(with_crf, Mode::d4, seq.classes);
  std::mt19937_64 rng(cfg.run.seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& v : m4c.crf_pairwise->value.storage()) v = u(rng);

  auto time_one = [&](Model& m, const std::vector<synth::Frame>& window, double voxel) {
    std::vector<double> samples;
    for (std::size_t rep = 0; rep < cfg.bench.repetitions; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      Sample s = build_input(window, m.mode, voxel);
      auto z = predict_logits(m, s);
      const auto t1 = std::chrono::steady_clock::now();
      if (z.rows() != s.input.size()) throw std::logic_error("bench: logits/voxel mismatch");
      samples.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    return median(std::move(samples));
  };

  std::vector<BenchRow> rows;
  for (double voxel : cfg.bench.voxel_sizes) {
    for (std::size_t len : cfg.bench.windows) {
      auto window = slice(seq, 0, len);
      rows.push_back({voxel, len, time_one(m3, window, voxel), time_one(m4, window, voxel), time_one(m4c, window, voxel)});
    }
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "voxel_size,window,3d,4d,4d_crf\n";
  for (const auto& r : rows) {
    os << r.voxel_size << ',' << r.window << ',' << r.seconds_3d << ',' << r.seconds_4d << ',' << r.seconds_4d_crf << '\n';
  }
}

inline synth::SceneSequence load_sequence(const RunConfig& cfg) {
  auto seq = synth::read_sequence(cfg.data.dir);
  inject_point_noise(seq, cfg.data.point_noise, cfg.run.seed);
  return seq;
}

}  // namespace mink::pipeline
