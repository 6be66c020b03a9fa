#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mink/matrix.hpp"

namespace mink::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <class T>
void put(std::ostream& os, T v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(std::string("truncated input reading ") + what);
  return byteswap_if_big(v);
}

inline void expect_magic(std::istream& is, const char* magic) {
  char m[4];
  if (!is.read(m, 4) || std::memcmp(m, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SPG1 point clouds: "SPG1", u32 D, u32 Nf, u32 has_labels, u64 N, then N
// records of D x f32 position, Nf x f32 features, optional i32 label.

struct PointCloud {
  Matrix<double> positions;           // N x D
  Matrix<double> features;            // N x Nf
  std::vector<std::int32_t> labels;   // N entries when `labeled`
  bool labeled = false;

  std::size_t size() const { return positions.rows(); }
  bool has_labels() const { return labeled; }
};

inline void write_spg1(std::ostream& os, const PointCloud& pc) {
  const std::size_t n = pc.positions.rows();
  if (pc.features.rows() != n) throw std::invalid_argument("write_spg1: features/positions row mismatch");
  const bool labeled = pc.has_labels();
  if (labeled && pc.labels.size() != n) throw std::invalid_argument("write_spg1: labels/positions row mismatch");
  os.write("SPG1", 4);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(pc.positions.cols()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(pc.features.cols()));
  detail::put<std::uint32_t>(os, labeled ? 1u : 0u);
  detail::put<std::uint64_t>(os, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (double v : pc.positions.row(i)) detail::put<float>(os, static_cast<float>(v));
    for (double v : pc.features.row(i)) detail::put<float>(os, static_cast<float>(v));
    if (labeled) detail::put<std::int32_t>(os, pc.labels[i]);
  }
}

inline PointCloud read_spg1(std::istream& is) {
  detail::expect_magic(is, "SPG1");
  const auto dim = detail::get<std::uint32_t>(is, "D");
  const auto nf = detail::get<std::uint32_t>(is, "Nf");
  const auto has_labels = detail::get<std::uint32_t>(is, "has_labels");
  const auto n = detail::get<std::uint64_t>(is, "N_points");
  if (dim < 1 || dim > 7) throw FormatError("SPG1: dimension " + std::to_string(dim) + " outside 1..7");
  if (has_labels > 1) throw FormatError("SPG1: has_labels must be 0 or 1");
  PointCloud pc;
  pc.positions = Matrix<double>(n, dim);
  pc.features = Matrix<double>(n, nf);
  if (has_labels) pc.labels.resize(n);
  pc.labeled = has_labels == 1;
  for (std::uint64_t i = 0; i < n; ++i) {
    for (std::uint32_t d = 0; d < dim; ++d) pc.positions(i, d) = detail::get<float>(is, "position");
    for (std::uint32_t c = 0; c < nf; ++c) pc.features(i, c) = detail::get<float>(is, "feature");
    if (has_labels) pc.labels[i] = detail::get<std::int32_t>(is, "label");
  }
  return pc;
}

// Plain-text fixture variant. First line "# spg1 D Nf has_labels", then one
// point per line: D positions, Nf features, optional label.
inline PointCloud read_spg1_text(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("SPG1 text: missing header");
  std::istringstream hs(line);
  std::string hash, tag;
  std::size_t dim = 0, nf = 0, labeled = 0;
  if (!(hs >> hash >> tag >> dim >> nf >> labeled) || hash != "#" || tag != "spg1") {
    throw FormatError("SPG1 text: header must be '# spg1 D Nf has_labels'");
  }
  if (dim < 1 || dim > 7) throw FormatError("SPG1 text: dimension outside 1..7");
  std::vector<double> pos, feat;
  std::vector<std::int32_t> labels;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    for (std::size_t d = 0; d < dim; ++d) {
      double v;
      if (!(ls >> v)) throw FormatError("SPG1 text: short row at line " + std::to_string(lineno));
      pos.push_back(v);
    }
    for (std::size_t c = 0; c < nf; ++c) {
      double v;
      if (!(ls >> v)) throw FormatError("SPG1 text: short row at line " + std::to_string(lineno));
      feat.push_back(v);
    }
    if (labeled) {
      std::int32_t l;
      if (!(ls >> l)) throw FormatError("SPG1 text: missing label at line " + std::to_string(lineno));
      labels.push_back(l);
    }
  }
  const std::size_t n = pos.size() / dim;
  PointCloud pc;
  pc.positions = Matrix<double>(n, dim, std::move(pos));
  pc.features = Matrix<double>(n, nf, std::move(feat));
  pc.labels = std::move(labels);
  pc.labeled = labeled != 0;
  return pc;
}

inline void write_spg1_text(std::ostream& os, const PointCloud& pc) {
  os << "# spg1 " << pc.positions.cols() << ' ' << pc.features.cols() << ' ' << (pc.has_labels() ? 1 : 0) << "\n";
  os << std::setprecision(9);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const char* sep = "";
    for (double v : pc.positions.row(i)) {
      os << sep << v;
      sep = " ";
    }
    for (double v : pc.features.row(i)) os << ' ' << v;
    if (pc.has_labels()) os << ' ' << pc.labels[i];
    os << "\n";
  }
}

// Dispatches on extension: ".txt" is the text variant, anything else binary.
inline PointCloud load_point_cloud(const std::string& path) {
  const bool text = path.size() >= 4 && path.compare(path.size() - 4, 4, ".txt") == 0;
  std::ifstream in(path, text ? std::ios::in : std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return text ? read_spg1_text(in) : read_spg1(in);
}

inline void save_point_cloud(const std::string& path, const PointCloud& pc) {
  const bool text = path.size() >= 4 && path.compare(path.size() - 4, 4, ".txt") == 0;
  std::ofstream out(path, text ? std::ios::out : std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  if (text) {
    write_spg1_text(out, pc);
  } else {
    write_spg1(out, pc);
  }
  if (!out) throw FormatError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Checkpoints: "SPGW", u32 version, u32 count, then per blob: u32 name length,
// name bytes, u32 ndims, ndims x u64 dims, prod(dims) x f64.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Blob {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

using Checkpoint = std::map<std::string, Blob>;

inline std::string shape_string(const std::vector<std::uint64_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s + "]";
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write("SPGW", 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, blob] : ckpt) {
    std::uint64_t count = 1;
    for (auto d : blob.dims) count *= d;
    if (count != blob.data.size()) throw std::invalid_argument("write_checkpoint: blob '" + name + "' dims/data mismatch");
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(blob.dims.size()));
    for (auto d : blob.dims) detail::put<std::uint64_t>(os, d);
    for (double v : blob.data) detail::put<double>(os, v);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  detail::expect_magic(is, "SPGW");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw FormatError("checkpoint version " + std::to_string(version) + " unsupported");
  const auto count = detail::get<std::uint32_t>(is, "count");
  Checkpoint ckpt;
  for (std::uint32_t b = 0; b < count; ++b) {
    const auto len = detail::get<std::uint32_t>(is, "name length");
    if (len > (1u << 16)) throw FormatError("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated input reading name");
    Blob blob;
    const auto nd = detail::get<std::uint32_t>(is, "ndims");
    if (nd > 8) throw FormatError("checkpoint: too many dims for '" + name + "'");
    std::uint64_t total = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      blob.dims.push_back(detail::get<std::uint64_t>(is, "dim"));
      total *= blob.dims.back();
    }
    if (total > (std::uint64_t(1) << 32)) throw FormatError("checkpoint: blob '" + name + "' too large");
    blob.data.resize(total);
    for (auto& v : blob.data) v = detail::get<double>(is, "data");
    ckpt.emplace(std::move(name), std::move(blob));
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  write_checkpoint(out, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_checkpoint(in);
}

// Diagnostic dump of a feature matrix, one row per line.
template <class T>
void write_matrix_text(std::ostream& os, const Matrix<T>& m) {
  os << "# matrix " << m.rows() << ' ' << m.cols() << "\n" << std::setprecision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const char* sep = "";
    for (T v : m.row(r)) {
      os << sep << v;
      sep = " ";
    }
    os << "\n";
  }
}

}  // namespace mink::io
