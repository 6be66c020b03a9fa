#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mink/autograd.hpp"
#include "mink/coords.hpp"
#include "mink/kernel.hpp"

// Residual sparse networks (MinkNet) and their U-shaped variant (MinkUNet)
// for any dimension 1..7.
namespace mink::net {

enum class LayerKind { conv, transposed_conv, pool, bn, relu, residual_block, skip_concat, global_pool, linear };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::transposed_conv: return "transposed_conv";
    case LayerKind::pool: return "pool";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::skip_concat: return "skip_concat";
    case LayerKind::global_pool: return "global_pool";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;
  KernelShape shape = KernelShape::custom;
  std::size_t region_volume = 0;
  std::vector<std::int32_t> stride;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t parameters = 0;
};

enum class Architecture { minknet, minkunet };
enum class Head { segmentation, classification };

struct NetworkConfig {
  int dimension = 3;
  std::size_t in_channels = 3;
  std::size_t classes = 2;
  // One entry per resolution level; level l runs at tensor stride 2^l.
  std::vector<std::size_t> blocks{1, 1};
  std::size_t width = 8;
  // Optional explicit per-level widths; defaults to width * 2^l.
  std::vector<std::size_t> widths;
  // Per-level kernel shape; empty means hypercube everywhere, or hybrid for
  // 4D when `temporal` is set.
  std::vector<KernelShape> level_kernels;
  int kernel_size = 3;
  int stem_size = 5;
  // Treat the last axis as time: stem has extent 1 along it and strided
  // layers never downsample it.
  bool temporal = false;
  Head head = Head::segmentation;
  std::uint64_t seed = 1;
};

// Per-forward state: training flag plus caches so layers that share
// coordinate sets reuse kernel maps and strided coordinates.
class Context {
 public:
  explicit Context(bool training) : training_(training) {}
  bool training() const { return training_; }

  CoordinateMapPtr strided(const CoordinateMapPtr& in, const std::vector<std::int32_t>& stride) {
    auto key = std::make_pair(in.get(), stride);
    auto it = strided_.find(key);
    if (it != strided_.end()) return it->second;
    CoordinateMapPtr out = stride_coordinates(*in, stride);
    keep_.push_back(in);
    strided_.emplace(key, out);
    return out;
  }

  KernelMapPtr kernel_map(const CoordinateMapPtr& in, const CoordinateMapPtr& out, const KernelRegion& region,
                          bool transposed) {
    auto key = std::make_tuple(in.get(), out.get(), region.offsets(), transposed);
    auto it = maps_.find(key);
    if (it != maps_.end()) return it->second;
    auto m = std::make_shared<const KernelMap>(transposed ? transposed_kernel_map(*in, *out, region)
                                                          : build_kernel_map(*in, *out, region));
    keep_.push_back(in);
    keep_.push_back(out);
    maps_.emplace(std::move(key), m);
    return m;
  }

 private:
  bool training_;
  std::map<std::pair<const CoordinateMap*, std::vector<std::int32_t>>, CoordinateMapPtr> strided_;
  std::map<std::tuple<const CoordinateMap*, const CoordinateMap*, std::vector<Offset>, bool>, KernelMapPtr> maps_;
  std::vector<CoordinateMapPtr> keep_;
};

struct ConvLayer {
  KernelRegion region;
  std::vector<std::int32_t> stride;  // all ones for submanifold convs
  bool transposed = false;
  ag::Parameter weight;
  std::optional<ag::Parameter> bias;

  ConvLayer(const std::string& name, KernelRegion r, std::size_t in, std::size_t out, std::vector<std::int32_t> s,
            bool transposed_conv, bool with_bias, std::mt19937_64& rng)
      : region(std::move(r)), stride(std::move(s)), transposed(transposed_conv),
        weight(name + ".weight", region.volume() * out, in, {region.volume(), out, in}) {
    if (stride.empty()) stride.assign(region.dimension(), 1);
    ag::init_uniform(weight, static_cast<double>(in * region.volume()), rng);
    if (with_bias) bias.emplace(name + ".bias", 1, out, std::vector<std::size_t>{out});
  }

  std::size_t in_channels() const { return weight.shape[2]; }
  std::size_t out_channels() const { return weight.shape[1]; }
  std::size_t parameter_count() const { return weight.value.size() + (bias ? bias->value.size() : 0); }
  bool strided() const {
    for (auto s : stride)
      if (s != 1) return true;
    return false;
  }

  // `target` is the output coordinate set for transposed convs.
  ag::Var forward(ag::Tape& t, ag::Var x, Context& ctx, CoordinateMapPtr target = nullptr) {
    const CoordinateMapPtr& in = t.coords(x);
    if (!in) throw std::invalid_argument("ConvLayer: input carries no coordinates");
    if (t.value(x).cols() != in_channels()) {
      throw std::invalid_argument("ConvLayer '" + weight.name + "': input has " + std::to_string(t.value(x).cols()) +
                                  " channels, expected " + std::to_string(in_channels()));
    }
    CoordinateMapPtr out;
    if (transposed) {
      if (!target) throw std::invalid_argument("ConvLayer: transposed conv needs a target coordinate set");
      out = std::move(target);
    } else {
      out = strided() ? ctx.strided(in, stride) : in;
    }
    auto map = ctx.kernel_map(in, out, region, transposed);
    return ag::conv(t, x, weight, std::move(map), std::move(out), bias ? &*bias : nullptr);
  }

  void collect(std::vector<ag::Parameter*>& out) {
    out.push_back(&weight);
    if (bias) out.push_back(&*bias);
  }
};

struct ResidualBlock {
  ConvLayer conv1;
  ag::BatchNorm bn1;
  ConvLayer conv2;
  ag::BatchNorm bn2;
  std::optional<ConvLayer> projection;
  std::optional<ag::BatchNorm> projection_bn;

  ResidualBlock(const std::string& name, const KernelRegion& region, std::size_t in, std::size_t out,
                std::mt19937_64& rng)
      : conv1(name + ".conv1", region, in, out, {}, false, false, rng),
        bn1(name + ".bn1", out),
        conv2(name + ".conv2", region, out, out, {}, false, false, rng),
        bn2(name + ".bn2", out) {
    if (in != out) {
      projection.emplace(name + ".proj", KernelRegion::custom(region.dimension(), {Offset{}}), in, out,
                         std::vector<std::int32_t>{}, false, false, rng);
      projection_bn.emplace(name + ".proj_bn", out);
    }
  }

  ag::Var forward(ag::Tape& t, ag::Var x, Context& ctx) {
    ag::Var h = ag::relu(t, ag::batch_norm(t, conv1.forward(t, x, ctx), bn1, ctx.training()));
    h = ag::batch_norm(t, conv2.forward(t, h, ctx), bn2, ctx.training());
    ag::Var skip = x;
    if (projection) skip = ag::batch_norm(t, projection->forward(t, x, ctx), *projection_bn, ctx.training());
    return ag::relu(t, ag::add(t, h, skip));
  }

  void collect(std::vector<ag::Parameter*>& out) {
    conv1.collect(out);
    out.push_back(&bn1.gamma);
    out.push_back(&bn1.beta);
    conv2.collect(out);
    out.push_back(&bn2.gamma);
    out.push_back(&bn2.beta);
    if (projection) {
      projection->collect(out);
      out.push_back(&projection_bn->gamma);
      out.push_back(&projection_bn->beta);
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = conv1.parameter_count() + conv2.parameter_count() + 2 * bn1.channels() + 2 * bn2.channels();
    if (projection) n += projection->parameter_count() + 2 * projection_bn->channels();
    return n;
  }
};

// Non-trainable state that still belongs in a checkpoint.
struct NamedBuffer {
  std::string name;
  std::vector<double>* data;
};

class Network {
 public:
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  static Network build(Architecture arch, const NetworkConfig& cfg) { return Network(arch, cfg); }
  static Network minknet(const NetworkConfig& cfg) { return Network(Architecture::minknet, cfg); }
  static Network minkunet(const NetworkConfig& cfg) { return Network(Architecture::minkunet, cfg); }

  const NetworkConfig& config() const { return cfg_; }
  Architecture architecture() const { return arch_; }
  const std::vector<LayerSpec>& layers() const { return specs_; }

  // Segmentation: logits row-aligned with the input coordinates.
  // Classification: one row per batch.
  ag::Var forward(ag::Tape& t, ag::Var x, Context& ctx) {
    if (!t.coords(x)) throw std::invalid_argument("Network: input carries no coordinates");
    if (t.coords(x)->dimension() != cfg_.dimension) {
      throw std::invalid_argument("Network: input dimension " + std::to_string(t.coords(x)->dimension()) +
                                  " != network dimension " + std::to_string(cfg_.dimension));
    }
    if (t.value(x).cols() != cfg_.in_channels) {
      throw std::invalid_argument("Network: input has " + std::to_string(t.value(x).cols()) + " channels, expected " +
                                  std::to_string(cfg_.in_channels));
    }
    const bool train = ctx.training();
    ag::Var h = ag::relu(t, ag::batch_norm(t, stem_->forward(t, x, ctx), stem_bn_, train));
    std::vector<ag::Var> skips;
    for (std::size_t l = 0; l < levels_.size(); ++l) {
      auto& level = levels_[l];
      if (level.down) h = ag::relu(t, ag::batch_norm(t, level.down->forward(t, h, ctx), *level.down_bn, train));
      for (auto& b : level.blocks) h = b.forward(t, h, ctx);
      skips.push_back(h);
    }
    if (cfg_.head == Head::classification) {
      ag::Var g = ag::global_pool(t, h, PoolMode::avg);
      return linear(t, g);
    }
    if (arch_ == Architecture::minkunet) {
      for (std::size_t i = 0; i < decoder_.size(); ++i) {
        auto& dec = decoder_[i];
        const std::size_t target_level = levels_.size() - 2 - i;
        ag::Var target = skips[target_level];
        h = ag::relu(t, ag::batch_norm(t, dec.up.forward(t, h, ctx, t.coords(target)), dec.up_bn, train));
        h = ag::concat(t, h, target);
        for (auto& b : dec.blocks) h = b.forward(t, h, ctx);
      }
    } else if (upsample_) {
      h = ag::relu(t, ag::batch_norm(t, upsample_->forward(t, h, ctx, t.coords(x)), *upsample_bn_, train));
    }
    return head_->forward(t, h, ctx);
  }

  std::vector<ag::Parameter*> parameters() {
    std::vector<ag::Parameter*> p;
    stem_->collect(p);
    p.push_back(&stem_bn_.gamma);
    p.push_back(&stem_bn_.beta);
    for (auto& level : levels_) {
      if (level.down) {
        level.down->collect(p);
        p.push_back(&level.down_bn->gamma);
        p.push_back(&level.down_bn->beta);
      }
      for (auto& b : level.blocks) b.collect(p);
    }
    for (auto& dec : decoder_) {
      dec.up.collect(p);
      p.push_back(&dec.up_bn.gamma);
      p.push_back(&dec.up_bn.beta);
      for (auto& b : dec.blocks) b.collect(p);
    }
    if (upsample_) {
      upsample_->collect(p);
      p.push_back(&upsample_bn_->gamma);
      p.push_back(&upsample_bn_->beta);
    }
    head_->collect(p);
    return p;
  }

  std::vector<NamedBuffer> buffers() {
    std::vector<NamedBuffer> b;
    auto add = [&b](ag::BatchNorm& bn) {
      const std::string base = bn.gamma.name.substr(0, bn.gamma.name.size() - std::string(".gamma").size());
      b.push_back({base + ".running_mean", &bn.stats.running_mean});
      b.push_back({base + ".running_var", &bn.stats.running_var});
    };
    add(stem_bn_);
    for (auto& level : levels_) {
      if (level.down_bn) add(*level.down_bn);
      for (auto& blk : level.blocks) add_block(blk, add);
    }
    for (auto& dec : decoder_) {
      add(dec.up_bn);
      for (auto& blk : dec.blocks) add_block(blk, add);
    }
    if (upsample_bn_) add(*upsample_bn_);
    return b;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : specs_) n += s.parameters;
    return n;
  }

  std::string summary() const {
    std::ostringstream os;
    os << (arch_ == Architecture::minkunet ? "MinkUNet" : "MinkNet") << " D=" << cfg_.dimension
       << " in=" << cfg_.in_channels << " classes=" << cfg_.classes << "\n";
    for (const auto& s : specs_) {
      os << "  " << s.name << "  " << to_string(s.kind);
      if (s.region_volume) os << "  region=" << to_string(s.shape) << "/" << s.region_volume;
      if (!s.stride.empty()) {
        os << "  stride=";
        for (std::size_t d = 0; d < s.stride.size(); ++d) os << (d ? "x" : "") << s.stride[d];
      }
      os << "  " << s.in_channels << "->" << s.out_channels << "  params=" << s.parameters << "\n";
    }
    os << "total parameters: " << parameter_count() << "\n";
    return os.str();
  }

 private:
  struct Level {
    std::optional<ConvLayer> down;
    std::optional<ag::BatchNorm> down_bn;
    std::vector<ResidualBlock> blocks;
  };
  struct DecoderLevel {
    ConvLayer up;
    ag::BatchNorm up_bn;
    std::vector<ResidualBlock> blocks;
  };

  template <class F>
  static void add_block(ResidualBlock& blk, F& add) {
    add(blk.bn1);
    add(blk.bn2);
    if (blk.projection_bn) add(*blk.projection_bn);
  }

  Network(Architecture arch, const NetworkConfig& cfg) : cfg_(cfg), arch_(arch) {
    validate();
    std::mt19937_64 rng(cfg_.seed);
    const int dim = cfg_.dimension;
    const std::size_t n_levels = cfg_.blocks.size();
    if (cfg_.widths.empty()) {
      for (std::size_t l = 0; l < n_levels; ++l) cfg_.widths.push_back(cfg_.width << l);
    }
    if (cfg_.level_kernels.empty()) {
      cfg_.level_kernels.assign(n_levels, cfg_.temporal && dim >= 2 ? KernelShape::hybrid : KernelShape::hypercube);
    }
    if (cfg_.level_kernels.size() != n_levels) {
      throw std::invalid_argument("NetworkConfig: level_kernels has " + std::to_string(cfg_.level_kernels.size()) +
                                  " entries for " + std::to_string(n_levels) + " levels");
    }

    std::vector<int> stem_size(dim, cfg_.stem_size);
    if (cfg_.temporal) stem_size.back() = 1;
    auto stem_region = KernelRegion::enumerate(KernelShape::hypercube, stem_size, dim);
    stem_ = std::make_unique<ConvLayer>("stem", stem_region, cfg_.in_channels, cfg_.widths[0],
                                        std::vector<std::int32_t>{}, false, false, rng);
    stem_bn_ = ag::BatchNorm("stem_bn", cfg_.widths[0]);
    add_conv_spec("stem", *stem_, LayerKind::conv);
    add_bn_spec("stem_bn", cfg_.widths[0]);

    std::vector<std::int32_t> down_stride(dim, 2);
    if (cfg_.temporal) down_stride.back() = 1;
    auto cell = KernelRegion::cell(dim, down_stride);

    levels_.resize(n_levels);
    std::size_t channels = cfg_.widths[0];
    for (std::size_t l = 0; l < n_levels; ++l) {
      const std::string lname = "level" + std::to_string(l);
      auto& level = levels_[l];
      if (l > 0) {
        level.down.emplace(lname + ".down", cell, channels, cfg_.widths[l], down_stride, false, false, rng);
        level.down_bn.emplace(lname + ".down_bn", cfg_.widths[l]);
        add_conv_spec(lname + ".down", *level.down, LayerKind::conv);
        add_bn_spec(lname + ".down_bn", cfg_.widths[l]);
        channels = cfg_.widths[l];
      }
      auto region = level_region(l);
      for (std::size_t b = 0; b < cfg_.blocks[l]; ++b) {
        const std::string bname = lname + ".block" + std::to_string(b);
        level.blocks.emplace_back(bname, region, channels, cfg_.widths[l], rng);
        add_block_spec(bname, level.blocks.back());
      }
    }

    if (cfg_.head == Head::classification) {
      specs_.push_back(LayerSpec{LayerKind::global_pool, "global_pool", KernelShape::custom, 0, {}, channels, channels, 0});
    } else if (arch_ == Architecture::minkunet) {
      for (std::size_t l = n_levels; l-- > 1;) {
        const std::string dname = "decoder" + std::to_string(l);
        const std::size_t out = cfg_.widths[l - 1];
        ConvLayer up(dname + ".up", cell, channels, out, down_stride, true, false, rng);
        ag::BatchNorm up_bn(dname + ".up_bn", out);
        add_conv_spec(dname + ".up", up, LayerKind::transposed_conv);
        add_bn_spec(dname + ".up_bn", out);
        specs_.push_back(LayerSpec{LayerKind::skip_concat, dname + ".concat", KernelShape::custom, 0, {}, out, 2 * out, 0});
        decoder_.push_back(DecoderLevel{std::move(up), std::move(up_bn), {}});
        auto region = level_region(l - 1);
        std::size_t in = 2 * out;
        for (std::size_t b = 0; b < std::max<std::size_t>(1, cfg_.blocks[l - 1]); ++b) {
          const std::string bname = dname + ".block" + std::to_string(b);
          decoder_.back().blocks.emplace_back(bname, region, in, out, rng);
          add_block_spec(bname, decoder_.back().blocks.back());
          in = out;
        }
        channels = out;
      }
    } else if (n_levels > 1) {
      std::vector<std::int32_t> total(dim, 1);
      for (int d = 0; d < dim; ++d) total[d] = down_stride[d] == 1 ? 1 : std::int32_t(1) << (n_levels - 1);
      auto up_cell = KernelRegion::cell(dim, total);
      upsample_ = std::make_unique<ConvLayer>("upsample", up_cell, channels, cfg_.widths[0], total, true, false, rng);
      upsample_bn_ = std::make_unique<ag::BatchNorm>("upsample_bn", cfg_.widths[0]);
      add_conv_spec("upsample", *upsample_, LayerKind::transposed_conv);
      add_bn_spec("upsample_bn", cfg_.widths[0]);
      channels = cfg_.widths[0];
    }

    head_ = std::make_unique<ConvLayer>("head", KernelRegion::custom(dim, {Offset{}}), channels, cfg_.classes,
                                        std::vector<std::int32_t>{}, false, true, rng);
    add_conv_spec("head", *head_, cfg_.head == Head::classification ? LayerKind::linear : LayerKind::conv);
    check_chain();
  }

  void validate() const {
    if (cfg_.dimension < 1 || cfg_.dimension > kMaxDim) throw std::invalid_argument("NetworkConfig: dimension outside 1..7");
    if (cfg_.in_channels == 0 || cfg_.classes == 0) throw std::invalid_argument("NetworkConfig: channels must be positive");
    if (cfg_.blocks.empty()) throw std::invalid_argument("NetworkConfig: at least one level is required");
    if (!cfg_.widths.empty() && cfg_.widths.size() != cfg_.blocks.size()) {
      throw std::invalid_argument("NetworkConfig: channel mismatch, " + std::to_string(cfg_.widths.size()) +
                                  " widths for " + std::to_string(cfg_.blocks.size()) + " levels");
    }
    if (cfg_.widths.empty() && cfg_.width == 0) throw std::invalid_argument("NetworkConfig: width must be positive");
    for (auto w : cfg_.widths)
      if (w == 0) throw std::invalid_argument("NetworkConfig: widths must be positive");
    if (cfg_.temporal && cfg_.dimension < 2) throw std::invalid_argument("NetworkConfig: temporal needs D >= 2");
  }

  KernelRegion level_region(std::size_t l) const {
    const int dim = cfg_.dimension;
    switch (cfg_.level_kernels[l]) {
      case KernelShape::hybrid: return KernelRegion::hybrid(dim, cfg_.kernel_size, cfg_.kernel_size);
      case KernelShape::hypercross: return KernelRegion::hypercross(dim, cfg_.kernel_size);
      case KernelShape::hypercube: return KernelRegion::hypercube(dim, cfg_.kernel_size);
      case KernelShape::custom: break;
    }
    throw std::invalid_argument("NetworkConfig: level kernels must be built-in shapes");
  }

  ag::Var linear(ag::Tape& t, ag::Var x) {
    // Pooled rows have no coordinates; apply the head as a per-row map.
    const std::size_t n = t.value(x).rows();
    auto m = std::make_shared<KernelMap>();
    m->dim = cfg_.dimension;
    m->entries.resize(1);
    for (std::size_t r = 0; r < n; ++r) {
      m->entries[0].in.push_back(r);
      m->entries[0].out.push_back(r);
    }
    return ag::conv(t, x, head_->weight, std::move(m), nullptr, &*head_->bias);
  }

  void add_conv_spec(const std::string& name, const ConvLayer& c, LayerKind kind) {
    specs_.push_back(LayerSpec{kind, name, c.region.shape(), c.region.volume(), c.stride, c.in_channels(),
                               c.out_channels(), c.parameter_count()});
  }
  void add_bn_spec(const std::string& name, std::size_t channels) {
    specs_.push_back(LayerSpec{LayerKind::bn, name, KernelShape::custom, 0, {}, channels, channels, 2 * channels});
  }
  void add_block_spec(const std::string& name, const ResidualBlock& b) {
    specs_.push_back(LayerSpec{LayerKind::residual_block, name, b.conv1.region.shape(), b.conv1.region.volume(),
                               b.conv1.stride, b.conv1.in_channels(), b.conv2.out_channels(), b.parameter_count()});
  }

  // Sequential layers must agree on channels; a skip concat doubles them.
  void check_chain() const {
    for (std::size_t i = 1; i < specs_.size(); ++i) {
      if (specs_[i].in_channels != specs_[i - 1].out_channels) {
        throw std::invalid_argument("Network: channel mismatch between '" + specs_[i - 1].name + "' (" +
                                    std::to_string(specs_[i - 1].out_channels) + ") and '" + specs_[i].name + "' (" +
                                    std::to_string(specs_[i].in_channels) + ")");
      }
    }
  }

  NetworkConfig cfg_;
  Architecture arch_;
  std::unique_ptr<ConvLayer> stem_;
  ag::BatchNorm stem_bn_;
  std::vector<Level> levels_;
  std::vector<DecoderLevel> decoder_;
  std::unique_ptr<ConvLayer> upsample_;
  std::unique_ptr<ag::BatchNorm> upsample_bn_;
  std::unique_ptr<ConvLayer> head_;
  std::vector<LayerSpec> specs_;
};

// Segmentation forward in evaluation mode on a fresh tape.
inline Matrix<double> predict(Network& net, const SparseTensor<double>& x) {
  ag::Tape t;
  Context ctx(false);
  ag::Var in = t.input(x.features, x.coords);
  return t.value(net.forward(t, in, ctx));
}

}  // namespace mink::net
