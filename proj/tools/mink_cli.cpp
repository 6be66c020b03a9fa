#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mink/config.hpp"
#include "mink/io.hpp"
#include "mink/kernel.hpp"
#include "mink/pipeline.hpp"
#include "mink/synth.hpp"

namespace fs = std::filesystem;
using namespace mink;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

// Thrown for missing or malformed inputs that are not format errors.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "INI run configuration");
    cmd->add_option("--set", overrides, "Override a config key, e.g. --set optim.lr=0.05")->take_all();
  }
  config::RunConfig load() const { return config::load(config_path, overrides); }
};

std::ofstream open_out(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

synth::SceneSequence load_data(const config::RunConfig& cfg) {
  if (!fs::exists(fs::path(cfg.data.dir) / "manifest.txt")) {
    throw DataError("no scene sequence at " + cfg.data.dir + " (run 'mink synth' first)");
  }
  return pipeline::load_sequence(cfg);
}

int cmd_synth(const config::RunConfig& cfg) {
  auto seq = synth::synth_generate(cfg.synth);
  synth::write_sequence(cfg.data.dir, seq);
  std::size_t points = 0;
  for (const auto& f : seq.frames) points += f.size();
  std::cout << "wrote " << seq.frames.size() << " frames (" << points << " points, " << seq.classes << " classes) to "
            << cfg.data.dir << "\n";
  return 0;
}

int cmd_train(const config::RunConfig& cfg) {
  auto seq = load_data(cfg);
  auto log = open_out(cfg.run.log);
  auto result = pipeline::train(cfg, seq, &log);
  io::save_checkpoint(cfg.run.checkpoint, pipeline::save_state(result.model));
  std::cout << result.model.net.summary();
  std::cout << "mode " << pipeline::mode_name(result.model) << ", " << cfg.optim.iterations << " iterations, final loss "
            << result.losses.back() << "\n";
  std::cout << "log: " << cfg.run.log << "\ncheckpoint: " << cfg.run.checkpoint << "\n";
  return 0;
}

int cmd_eval(const config::RunConfig& cfg, const std::string& predictions_dir) {
  auto seq = load_data(cfg);
  auto model = pipeline::make_model(cfg, cfg.run.mode, seq.classes);
  pipeline::load_state(model, io::load_checkpoint(cfg.run.checkpoint));
  auto report = pipeline::evaluate(cfg, model, seq);
  if (cfg.run.report.empty()) {
    pipeline::write_report(std::cout, report);
  } else {
    auto out = open_out(cfg.run.report);
    pipeline::write_report(out, report);
    std::cout << "report: " << cfg.run.report << "\n";
  }
  if (!predictions_dir.empty()) {
    fs::create_directories(predictions_dir);
    auto pred = pipeline::frame_predictions(cfg, model, seq);
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      auto pc = synth::to_point_cloud(seq.frames[f]);
      pc.labels = pred[f];
      char name[32];
      std::snprintf(name, sizeof(name), "pred_%04zu.spg", f);
      io::save_point_cloud((fs::path(predictions_dir) / name).string(), pc);
    }
    std::cout << "predictions: " << predictions_dir << "\n";
  }
  return 0;
}

int cmd_bench(const config::RunConfig& cfg, const std::string& out_path) {
  const bool have_data = fs::exists(fs::path(cfg.data.dir) / "manifest.txt");
  auto seq = have_data ? load_data(cfg) : synth::synth_generate(cfg.synth);
  auto rows = pipeline::bench(cfg, seq);
  if (out_path.empty()) {
    pipeline::write_bench_csv(std::cout, rows);
  } else {
    auto out = open_out(out_path);
    pipeline::write_bench_csv(out, rows);
    std::cout << "bench: " << out_path << "\n";
  }
  return 0;
}

void describe(const io::PointCloud& pc, double voxel_size, std::ostream& os) {
  const std::size_t dim = pc.positions.cols();
  os << "points " << pc.size() << ", dimension " << dim << ", feature channels " << pc.features.cols()
     << (pc.has_labels() ? ", labeled" : ", unlabeled") << "\n";
  for (std::size_t d = 0; d < dim && pc.size() > 0; ++d) {
    double lo = pc.positions(0, d), hi = lo;
    for (std::size_t i = 1; i < pc.size(); ++i) {
      lo = std::min(lo, pc.positions(i, d));
      hi = std::max(hi, pc.positions(i, d));
    }
    os << "  axis " << d << ": [" << lo << ", " << hi << "]\n";
  }
  if (pc.has_labels()) {
    std::map<std::int32_t, std::size_t> hist;
    for (auto l : pc.labels) ++hist[l];
    os << "  labels:";
    for (const auto& [l, n] : hist) os << ' ' << l << ':' << n;
    os << "\n";
  }
  auto q = quantize<double>(pc.positions, pc.features, pc.labels, voxel_size);
  const auto& map = *q.tensor.coords;
  std::size_t ignored = 0;
  for (auto l : q.labels) ignored += l == kIgnoreLabel;
  os << "  voxels at size " << voxel_size << ": " << map.size();
  if (pc.has_labels()) os << " (" << ignored << " with mixed labels)";
  os << "\n";
  const int d = static_cast<int>(dim);
  auto km = build_kernel_map(map, map, KernelRegion::hypercube(d, 3));
  os << "  submanifold 3^" << d << " kernel map: " << km.pair_count() << " pairs, "
     << static_cast<double>(km.pair_count()) / std::max<std::size_t>(1, map.size()) << " per voxel\n";
  auto strided = stride_coordinates(map, 2);
  os << "  stride-2 coordinates: " << strided->size() << "\n";
}

int cmd_inspect(const std::string& path, double voxel_size) {
  if (fs::is_directory(path)) {
    auto seq = synth::read_sequence(path);
    std::cout << "sequence " << path << ": " << seq.frames.size() << " frames, " << seq.classes << " classes\n";
    for (std::size_t k = 0; k < seq.velocities.size(); ++k) {
      const auto& v = seq.velocities[k];
      std::cout << "  object " << k << " velocity (" << v[0] << ", " << v[1] << ", " << v[2] << ")\n";
    }
    for (const auto& f : seq.frames) {
      std::cout << "frame t=" << f.time << ": ";
      describe(synth::to_point_cloud(f), voxel_size, std::cout);
    }
    return 0;
  }
  if (!fs::exists(path)) throw DataError("no such file: " + path);
  describe(io::load_point_cloud(path), voxel_size, std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse tensor networks on synthetic point-cloud videos"};
  app.require_subcommand(1);

  Common common;
  std::string out_dir, data_dir, log_path, ckpt_path, report_path, pred_dir, bench_out, inspect_path;
  double inspect_voxel = 0.2;

  auto* synth_cmd = app.add_subcommand("synth", "Generate a labeled synthetic scene sequence");
  common.attach(synth_cmd);
  synth_cmd->add_option("-o,--out", out_dir, "Output directory (data.dir)");

  auto* train_cmd = app.add_subcommand("train", "Train a segmentation network");
  common.attach(train_cmd);
  train_cmd->add_option("-d,--data", data_dir, "Scene sequence directory (data.dir)");
  train_cmd->add_option("--log", log_path, "CSV training log (run.log)");
  train_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint to write (run.checkpoint)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint: per-class IoU, mIoU, mAcc");
  common.attach(eval_cmd);
  eval_cmd->add_option("-d,--data", data_dir, "Scene sequence directory (data.dir)");
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint to read (run.checkpoint)");
  eval_cmd->add_option("--report", report_path, "CSV report path (run.report)");
  eval_cmd->add_option("--predictions", pred_dir, "Directory for per-frame SPG1 prediction dumps");

  auto* bench_cmd = app.add_subcommand("bench", "Time 3D, 4D and 4D+CRF inference");
  common.attach(bench_cmd);
  bench_cmd->add_option("-d,--data", data_dir, "Scene sequence directory; synthesized in memory when absent");
  bench_cmd->add_option("-o,--out", bench_out, "CSV output path");

  auto* inspect_cmd = app.add_subcommand("inspect", "Print point-cloud and coordinate statistics");
  inspect_cmd->add_option("path", inspect_path, "SPG1 file or scene sequence directory")->required();
  inspect_cmd->add_option("--voxel-size", inspect_voxel, "Voxel size for coordinate statistics")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (inspect_cmd->parsed()) return cmd_inspect(inspect_path, inspect_voxel);
    auto cfg = common.load();
    if (!out_dir.empty()) cfg.data.dir = out_dir;
    if (!data_dir.empty()) cfg.data.dir = data_dir;
    if (!log_path.empty()) cfg.run.log = log_path;
    if (!ckpt_path.empty()) cfg.run.checkpoint = ckpt_path;
    if (!report_path.empty()) cfg.run.report = report_path;
    if (synth_cmd->parsed()) return cmd_synth(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval_cmd->parsed()) return cmd_eval(cfg, pred_dir);
    if (bench_cmd->parsed()) return cmd_bench(cfg, bench_out);
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const io::FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const pipeline::ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
