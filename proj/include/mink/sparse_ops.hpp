#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mink/coords.hpp"
#include "mink/kernel.hpp"
#include "mink/matrix.hpp"

namespace mink {

// Per-offset weight matrices W_k (out_channels x in_channels), stored
// contiguously in region offset order.
template <class T>
class ConvWeights {
 public:
  ConvWeights() = default;
  ConvWeights(std::size_t volume, std::size_t out_channels, std::size_t in_channels, T fill = T{})
      : volume_(volume), out_(out_channels), in_(in_channels), data_(volume * out_channels * in_channels, fill) {}
  ConvWeights(std::size_t volume, std::size_t out_channels, std::size_t in_channels, std::vector<T> data)
      : volume_(volume), out_(out_channels), in_(in_channels), data_(std::move(data)) {
    if (data_.size() != volume_ * out_ * in_) throw std::invalid_argument("ConvWeights: data size mismatch");
  }

  std::size_t volume() const { return volume_; }
  std::size_t out_channels() const { return out_; }
  std::size_t in_channels() const { return in_; }

  T& at(std::size_t k, std::size_t o, std::size_t i) { return data_[(k * out_ + o) * in_ + i]; }
  const T& at(std::size_t k, std::size_t o, std::size_t i) const { return data_[(k * out_ + o) * in_ + i]; }
  std::span<T> offset(std::size_t k) { return {data_.data() + k * out_ * in_, out_ * in_}; }
  std::span<const T> offset(std::size_t k) const { return {data_.data() + k * out_ * in_, out_ * in_}; }

  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  // Per-offset transpose (in x out), used to run the adjoint of a convolution.
  ConvWeights transposed() const {
    ConvWeights t(volume_, in_, out_);
    for (std::size_t k = 0; k < volume_; ++k)
      for (std::size_t o = 0; o < out_; ++o)
        for (std::size_t i = 0; i < in_; ++i) t.at(k, i, o) = at(k, o, i);
    return t;
  }

 private:
  std::size_t volume_ = 0;
  std::size_t out_ = 0;
  std::size_t in_ = 0;
  std::vector<T> data_;
};

namespace detail {

inline void check_map(const KernelMap& m, std::size_t n_in, std::size_t n_out, const char* who) {
  for (const auto& e : m.entries) {
    if (e.in.size() != e.out.size()) throw std::invalid_argument(std::string(who) + ": ragged kernel map entry");
    for (std::size_t p = 0; p < e.in.size(); ++p) {
      if (e.in[p] >= n_in || e.out[p] >= n_out) {
        throw std::out_of_range(std::string(who) + ": kernel map index out of range (in " + std::to_string(e.in[p]) +
                                "/" + std::to_string(n_in) + ", out " + std::to_string(e.out[p]) + "/" +
                                std::to_string(n_out) + ")");
      }
    }
  }
}

template <class T>
Matrix<T> narrow(Matrix<double>&& acc) {
  if constexpr (std::is_same_v<T, double>) {
    return std::move(acc);
  } else {
    return acc.template cast<T>();
  }
}

}  // namespace detail

// Generalized sparse convolution: for every offset, gather the mapped input
// rows, multiply the block by W_k, scatter-add into the mapped output rows.
// Accumulation runs in double regardless of T.
template <class T>
Matrix<T> sparse_conv_forward(const Matrix<T>& f_in, const ConvWeights<T>& w, const KernelMap& m,
                              std::size_t n_out_rows) {
  if (f_in.cols() != w.in_channels()) {
    throw std::invalid_argument("sparse_conv_forward: input has " + std::to_string(f_in.cols()) +
                                " channels, weights expect " + std::to_string(w.in_channels()));
  }
  if (m.volume() != w.volume()) {
    throw std::invalid_argument("sparse_conv_forward: kernel map has " + std::to_string(m.volume()) +
                                " offsets, weights have " + std::to_string(w.volume()));
  }
  detail::check_map(m, f_in.rows(), n_out_rows, "sparse_conv_forward");
  const std::size_t cin = w.in_channels(), cout = w.out_channels();
  Matrix<double> out(n_out_rows, cout);
  std::vector<double> gathered, block;
  for (std::size_t k = 0; k < m.volume(); ++k) {
    const auto& e = m.entries[k];
    const std::size_t n = e.in.size();
    if (n == 0) continue;
    gathered.assign(n * cin, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      auto src = f_in.row(e.in[p]);
      std::copy(src.begin(), src.end(), gathered.begin() + p * cin);
    }
    auto wk = w.offset(k);
    block.assign(n * cout, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      const double* g = gathered.data() + p * cin;
      double* b = block.data() + p * cout;
      for (std::size_t o = 0; o < cout; ++o) {
        const T* wr = wk.data() + o * cin;
        double s = 0.0;
        for (std::size_t i = 0; i < cin; ++i) s += static_cast<double>(wr[i]) * g[i];
        b[o] = s;
      }
    }
    for (std::size_t p = 0; p < n; ++p) {
      auto dst = out.row(e.out[p]);
      const double* b = block.data() + p * cout;
      for (std::size_t o = 0; o < cout; ++o) dst[o] += b[o];
    }
  }
  return detail::narrow<T>(std::move(out));
}

template <class T>
struct ConvGradients {
  Matrix<T> input;
  ConvWeights<T> weights;
};

template <class T>
ConvGradients<T> sparse_conv_backward(const Matrix<T>& grad_out, const Matrix<T>& f_in, const ConvWeights<T>& w,
                                      const KernelMap& m) {
  if (f_in.cols() != w.in_channels() || grad_out.cols() != w.out_channels()) {
    throw std::invalid_argument("sparse_conv_backward: channel mismatch");
  }
  if (m.volume() != w.volume()) throw std::invalid_argument("sparse_conv_backward: offset count mismatch");
  detail::check_map(m, f_in.rows(), grad_out.rows(), "sparse_conv_backward");
  const std::size_t cin = w.in_channels(), cout = w.out_channels();
  Matrix<double> gin(f_in.rows(), cin);
  std::vector<double> gw(w.storage().size(), 0.0);
  std::vector<double> g_out_block;
  for (std::size_t k = 0; k < m.volume(); ++k) {
    const auto& e = m.entries[k];
    const std::size_t n = e.in.size();
    if (n == 0) continue;
    g_out_block.assign(n * cout, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      auto src = grad_out.row(e.out[p]);
      std::copy(src.begin(), src.end(), g_out_block.begin() + p * cout);
    }
    auto wk = w.offset(k);
    double* gwk = gw.data() + k * cout * cin;
    for (std::size_t p = 0; p < n; ++p) {
      const double* go = g_out_block.data() + p * cout;
      auto x = f_in.row(e.in[p]);
      auto gi = gin.row(e.in[p]);
      for (std::size_t o = 0; o < cout; ++o) {
        const double g = go[o];
        if (g == 0.0) continue;
        const T* wr = wk.data() + o * cin;
        double* gwr = gwk + o * cin;
        for (std::size_t i = 0; i < cin; ++i) {
          gi[i] += g * static_cast<double>(wr[i]);
          gwr[i] += g * static_cast<double>(x[i]);
        }
      }
    }
  }
  ConvGradients<T> g;
  g.input = detail::narrow<T>(std::move(gin));
  std::vector<T> gw_t(gw.begin(), gw.end());
  g.weights = ConvWeights<T>(w.volume(), cout, cin, std::move(gw_t));
  return g;
}

// Transposed convolution from c_in to c_out (typically a finer set retained
// from the downsampling path). W_k here is (out x in) of this layer.
template <class T>
Matrix<T> transposed_conv_forward(const Matrix<T>& f_in, const ConvWeights<T>& w, const KernelRegion& region,
                                  const CoordinateMap& c_in, const CoordinateMap& c_out) {
  KernelMap m = transposed_kernel_map(c_in, c_out, region);
  return sparse_conv_forward(f_in, w, m, c_out.size());
}

// ---------------------------------------------------------------------------
// Pooling

// Number of inputs mapped to each output row; rejects empty outputs.
inline std::vector<std::size_t> pool_counts(const KernelMap& m, std::size_t n_out_rows, const char* who) {
  std::vector<std::size_t> counts(n_out_rows, 0);
  for (const auto& e : m.entries)
    for (auto o : e.out) {
      if (o >= n_out_rows) throw std::out_of_range(std::string(who) + ": output index out of range");
      ++counts[o];
    }
  for (std::size_t o = 0; o < n_out_rows; ++o) {
    if (counts[o] == 0) throw std::invalid_argument(std::string(who) + ": output row " + std::to_string(o) + " has no inputs");
  }
  return counts;
}

template <class T>
struct MaxPoolResult {
  Matrix<T> features;
  std::vector<std::size_t> argmax;  // input row per (output row, channel), row-major
};

// Per-output maximum over all mapped inputs, offsets concatenated in map
// order. Ties keep the lowest concatenated index.
template <class T>
MaxPoolResult<T> max_pool(const Matrix<T>& f_in, const KernelMap& m, std::size_t n_out_rows) {
  detail::check_map(m, f_in.rows(), n_out_rows, "max_pool");
  pool_counts(m, n_out_rows, "max_pool");
  const std::size_t c = f_in.cols();
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  MaxPoolResult<T> r;
  r.features = Matrix<T>(n_out_rows, c);
  r.argmax.assign(n_out_rows * c, kNone);
  for (const auto& e : m.entries) {
    for (std::size_t p = 0; p < e.in.size(); ++p) {
      auto src = f_in.row(e.in[p]);
      auto dst = r.features.row(e.out[p]);
      std::size_t* arg = r.argmax.data() + e.out[p] * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        if (arg[ch] == kNone || src[ch] > dst[ch]) {
          dst[ch] = src[ch];
          arg[ch] = e.in[p];
        }
      }
    }
  }
  return r;
}

template <class T>
Matrix<T> max_pool_backward(const Matrix<T>& grad_out, const std::vector<std::size_t>& argmax, std::size_t n_in_rows) {
  Matrix<T> g(n_in_rows, grad_out.cols());
  const std::size_t c = grad_out.cols();
  for (std::size_t o = 0; o < grad_out.rows(); ++o)
    for (std::size_t ch = 0; ch < c; ++ch) g(argmax[o * c + ch], ch) += grad_out(o, ch);
  return g;
}

template <class T>
Matrix<T> sum_pool(const Matrix<T>& f_in, const KernelMap& m, std::size_t n_out_rows) {
  detail::check_map(m, f_in.rows(), n_out_rows, "sum_pool");
  pool_counts(m, n_out_rows, "sum_pool");
  Matrix<double> acc(n_out_rows, f_in.cols());
  for (const auto& e : m.entries)
    for (std::size_t p = 0; p < e.in.size(); ++p) {
      auto src = f_in.row(e.in[p]);
      auto dst = acc.row(e.out[p]);
      for (std::size_t ch = 0; ch < src.size(); ++ch) dst[ch] += src[ch];
    }
  return detail::narrow<T>(std::move(acc));
}

template <class T>
Matrix<T> avg_pool(const Matrix<T>& f_in, const KernelMap& m, std::size_t n_out_rows) {
  detail::check_map(m, f_in.rows(), n_out_rows, "avg_pool");
  auto counts = pool_counts(m, n_out_rows, "avg_pool");
  Matrix<double> acc(n_out_rows, f_in.cols());
  for (const auto& e : m.entries)
    for (std::size_t p = 0; p < e.in.size(); ++p) {
      auto src = f_in.row(e.in[p]);
      auto dst = acc.row(e.out[p]);
      for (std::size_t ch = 0; ch < src.size(); ++ch) dst[ch] += src[ch];
    }
  for (std::size_t o = 0; o < n_out_rows; ++o)
    for (auto& v : acc.row(o)) v /= static_cast<double>(counts[o]);
  return detail::narrow<T>(std::move(acc));
}

// Shared by sum and average pooling: grad_in[I] += scale(O) * grad_out[O].
template <class T>
Matrix<T> pool_scatter_backward(const Matrix<T>& grad_out, const KernelMap& m, std::size_t n_in_rows, bool average) {
  std::vector<std::size_t> counts;
  if (average) counts = pool_counts(m, grad_out.rows(), "avg_pool_backward");
  Matrix<T> g(n_in_rows, grad_out.cols());
  for (const auto& e : m.entries)
    for (std::size_t p = 0; p < e.in.size(); ++p) {
      auto src = grad_out.row(e.out[p]);
      auto dst = g.row(e.in[p]);
      const T scale = average ? T(1) / static_cast<T>(counts[e.out[p]]) : T(1);
      for (std::size_t ch = 0; ch < src.size(); ++ch) dst[ch] += scale * src[ch];
    }
  return g;
}

enum class PoolMode { max, avg, sum };

template <class T>
struct GlobalPoolResult {
  Matrix<T> features;                // one row per batch present
  std::vector<std::int32_t> batches;
  std::vector<std::size_t> argmax;   // max mode only
};

template <class T>
GlobalPoolResult<T> global_pool(const Matrix<T>& f_in, std::span<const std::int32_t> batch_of_row, PoolMode mode) {
  if (batch_of_row.size() != f_in.rows()) throw std::invalid_argument("global_pool: batch/row count mismatch");
  auto g = global_kernel_map(batch_of_row);
  GlobalPoolResult<T> r;
  r.batches = g.batches;
  switch (mode) {
    case PoolMode::max: {
      auto mp = max_pool(f_in, g.map, g.batches.size());
      r.features = std::move(mp.features);
      r.argmax = std::move(mp.argmax);
      break;
    }
    case PoolMode::avg: r.features = avg_pool(f_in, g.map, g.batches.size()); break;
    case PoolMode::sum: r.features = sum_pool(f_in, g.map, g.batches.size()); break;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Non-spatial functions on F

template <class T>
Matrix<T> relu(Matrix<T> f) {
  for (auto& v : f.storage()) v = v > T(0) ? v : T(0);
  return f;
}

template <class T>
Matrix<T> relu_backward(const Matrix<T>& grad_out, const Matrix<T>& f_in) {
  Matrix<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(f_in.data()[i] > T(0))) g.data()[i] = T(0);
  return g;
}

// Row-wise softmax with max subtraction.
template <class T>
Matrix<T> softmax_rows(const Matrix<T>& z) {
  Matrix<T> q(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto in = z.row(r);
    auto out = q.row(r);
    if (in.empty()) continue;
    T mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = static_cast<T>(std::exp(static_cast<double>(in[c] - mx)));
      s += out[c];
    }
    for (auto& v : out) v = static_cast<T>(v / s);
  }
  return q;
}

// dL/dz from dL/dq for q = softmax(z): q * (g - <g, q>) per row.
template <class T>
Matrix<T> softmax_backward(const Matrix<T>& q, const Matrix<T>& grad_q) {
  Matrix<T> g(q.rows(), q.cols());
  for (std::size_t r = 0; r < q.rows(); ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < q.cols(); ++c) dot += static_cast<double>(q(r, c)) * grad_q(r, c);
    for (std::size_t c = 0; c < q.cols(); ++c) g(r, c) = static_cast<T>(q(r, c) * (grad_q(r, c) - dot));
  }
  return g;
}

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BatchNormStats(std::size_t channels = 0) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

template <class T>
struct BatchNormCache {
  Matrix<T> normalized;         // x_hat
  std::vector<double> inv_std;  // per channel
  bool training = true;
};

// Per-channel normalization over all N rows. Training mode uses batch
// statistics and updates the running stats; eval mode uses running stats.
template <class T>
Matrix<T> batch_norm(const Matrix<T>& x, BatchNormStats& stats, std::span<const T> gamma, std::span<const T> beta,
                     bool training, BatchNormCache<T>* cache = nullptr, double eps = kBatchNormEpsilon,
                     double momentum = kBatchNormMomentum) {
  const std::size_t n = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c || stats.running_mean.size() != c) {
    throw std::invalid_argument("batch_norm: channel mismatch");
  }
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (training && n > 0) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += x(r, ch);
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double d = x(r, ch) - mean[ch];
        var[ch] += d * d;
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double unbiased = n > 1 ? var[ch] / static_cast<double>(n - 1) : var[ch];
      var[ch] /= static_cast<double>(n);
      stats.running_mean[ch] = (1 - momentum) * stats.running_mean[ch] + momentum * mean[ch];
      stats.running_var[ch] = (1 - momentum) * stats.running_var[ch] + momentum * unbiased;
    }
  } else {
    mean = stats.running_mean;
    var = stats.running_var;
  }
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
  Matrix<T> xhat(n, c), y(n, c);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double h = (x(r, ch) - mean[ch]) * inv_std[ch];
      xhat(r, ch) = static_cast<T>(h);
      y(r, ch) = static_cast<T>(gamma[ch] * h + beta[ch]);
    }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->training = training;
  }
  return y;
}

template <class T>
struct BatchNormGradients {
  Matrix<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <class T>
BatchNormGradients<T> batch_norm_backward(const Matrix<T>& grad_out, const BatchNormCache<T>& cache,
                                          std::span<const T> gamma) {
  const std::size_t n = grad_out.rows(), c = grad_out.cols();
  BatchNormGradients<T> g;
  g.input = Matrix<T>(n, c);
  g.gamma.assign(c, T(0));
  g.beta.assign(c, T(0));
  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      sum_g[ch] += grad_out(r, ch);
      sum_gx[ch] += static_cast<double>(grad_out(r, ch)) * cache.normalized(r, ch);
    }
  for (std::size_t ch = 0; ch < c; ++ch) {
    g.gamma[ch] = static_cast<T>(sum_gx[ch]);
    g.beta[ch] = static_cast<T>(sum_g[ch]);
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double scale = gamma[ch] * cache.inv_std[ch];
      double v;
      if (cache.training) {
        v = scale * (grad_out(r, ch) - sum_g[ch] / n - cache.normalized(r, ch) * sum_gx[ch] / n);
      } else {
        v = scale * grad_out(r, ch);
      }
      g.input(r, ch) = static_cast<T>(v);
    }
  return g;
}

}  // namespace mink
