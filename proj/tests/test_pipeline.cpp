#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mink/pipeline.hpp"

using namespace mink;
namespace fs = std::filesystem;

namespace {

config::RunConfig tiny(std::vector<std::string> extra = {}) {
  std::vector<std::string> o{"synth.frames=4",     "synth.ground_points=200", "synth.object_points=60",
                             "synth.extent=3",     "network.width=4",         "optim.iterations=6",
                             "data.voxel_size=0.3", "data.window=2"};
  o.insert(o.end(), extra.begin(), extra.end());
  return config::load("", o);
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mink_pipeline_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MINK_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(BuildInput, ThreeDimensionalModeBatchesFrames) {
  auto cfg = tiny();
  auto seq = synth::synth_generate(cfg.synth);
  auto s = pipeline::build_input(std::span(seq.frames).subspan(0, 2), config::Mode::d3, 0.3);
  EXPECT_EQ(s.input.dimension(), 3);
  EXPECT_EQ(s.input.coords->batches(), (std::vector<std::int32_t>{0, 1}));
  EXPECT_EQ(s.frame_begin.size(), 3u);
  EXPECT_EQ(s.point_to_row.size(), seq.frames[0].size() + seq.frames[1].size());
  for (std::size_t r = 0; r < s.input.size(); ++r) EXPECT_EQ(s.times[r], s.input.coords->key(r).batch);
  for (double v : s.input.features.storage()) {
    EXPECT_GE(v, -0.5);
    EXPECT_LE(v, 0.5);
  }
}

TEST(BuildInput, FourDimensionalModeUsesTimeAxis) {
  auto cfg = tiny();
  auto seq = synth::synth_generate(cfg.synth);
  auto s = pipeline::build_input(std::span(seq.frames).subspan(1, 2), config::Mode::d4, 0.3);
  EXPECT_EQ(s.input.dimension(), 4);
  EXPECT_EQ(s.input.coords->batches(), (std::vector<std::int32_t>{0}));
  std::set<std::int32_t> times;
  for (const auto& k : s.input.coords->keys()) times.insert(k.spatial[3]);
  EXPECT_EQ(times, (std::set<std::int32_t>{1, 2}));
  EXPECT_EQ(s.labels.size(), s.input.size());
}

TEST(Windows, StartsAndSlices) {
  EXPECT_EQ(pipeline::window_starts(5, 3, 1), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(pipeline::window_starts(6, 2, 2), (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(pipeline::window_starts(2, 3, 1), (std::vector<std::size_t>{0}));
}

TEST(Model, CrfAddsPairwiseParameter) {
  auto cfg = tiny({"crf.enabled=true"});
  auto m = pipeline::make_model(cfg, config::Mode::d4, 3);
  ASSERT_TRUE(m.crf_pairwise.has_value());
  EXPECT_EQ(m.crf_pairwise->shape, (std::vector<std::size_t>{14, 3, 3}));
  EXPECT_EQ(pipeline::mode_name(m), "4D-CRF");
  EXPECT_EQ(m.dimension(), 4);
}

TEST(Model, StateRoundTripAndShapeErrors) {
  auto cfg = tiny();
  auto seq = synth::synth_generate(cfg.synth);
  auto trained = pipeline::train(cfg, seq);
  auto s = pipeline::build_input(std::span(seq.frames).subspan(0, 2), config::Mode::d4, 0.3);
  auto want = pipeline::predict_logits(trained.model, s);

  auto fresh = pipeline::make_model(cfg, config::Mode::d4, seq.classes);
  pipeline::load_state(fresh, pipeline::save_state(trained.model));
  EXPECT_EQ(pipeline::predict_logits(fresh, s), want);

  auto wider = pipeline::make_model(tiny({"network.width=6"}), config::Mode::d4, seq.classes);
  try {
    pipeline::load_state(wider, pipeline::save_state(trained.model));
    FAIL() << "expected ShapeError";
  } catch (const pipeline::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("checkpoint ["), std::string::npos) << msg;
    EXPECT_NE(msg.find("network ["), std::string::npos) << msg;
  }
  auto three_d = pipeline::make_model(cfg, config::Mode::d3, seq.classes);
  EXPECT_THROW(pipeline::load_state(three_d, pipeline::save_state(trained.model)), pipeline::ShapeError);
}

TEST(Train, LogsOneRowPerIterationAndLossDrops) {
  auto cfg = tiny({"optim.iterations=40", "augment.enabled=false"});
  auto seq = synth::synth_generate(cfg.synth);
  std::ostringstream log;
  auto r = pipeline::train(cfg, seq, &log);
  ASSERT_EQ(r.losses.size(), 40u);
  std::istringstream is(log.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "iter,loss,lr");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 40u);
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) head += r.losses[i], tail += r.losses[35 + i];
  EXPECT_LT(tail, head);
}

TEST(Evaluate, ThreeDimensionalAddsTemporalAverageRow) {
  auto cfg = tiny({"run.mode=3d"});
  auto seq = synth::synth_generate(cfg.synth);
  auto r = pipeline::train(cfg, seq);
  auto rep = pipeline::evaluate(cfg, r.model, seq);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0].mode, "3D");
  EXPECT_EQ(rep.rows[1].mode, "3D-TA");
  std::ostringstream os;
  pipeline::write_report(os, rep);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "mode,miou,macc,iou_0,iou_1,iou_2");
  auto preds = pipeline::frame_predictions(cfg, r.model, seq);
  ASSERT_EQ(preds.size(), seq.frames.size());
  for (std::size_t f = 0; f < preds.size(); ++f) EXPECT_EQ(preds[f].size(), seq.frames[f].size());
}

TEST(Evaluate, FourDimensionalCoversEveryFrameOnce) {
  auto cfg = tiny({"data.window=3", "synth.frames=5"});
  auto seq = synth::synth_generate(cfg.synth);
  auto m = pipeline::make_model(cfg, config::Mode::d4, seq.classes);
  auto preds = pipeline::frame_predictions(cfg, m, seq);
  for (std::size_t f = 0; f < preds.size(); ++f) EXPECT_EQ(preds[f].size(), seq.frames[f].size());
  EXPECT_EQ(pipeline::evaluate(cfg, m, seq).rows.size(), 1u);
}

TEST(Bench, ShapeAndErrors) {
  auto cfg = tiny({"bench.voxel_sizes=0.6,0.3", "bench.windows=1,2", "bench.repetitions=1"});
  auto seq = synth::synth_generate(cfg.synth);
  auto rows = pipeline::bench(cfg, seq);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].voxel_size, 0.6);
  EXPECT_EQ(rows[1].window, 2u);
  for (const auto& r : rows) EXPECT_GT(r.seconds_4d_crf, 0.0);
  auto too_long = tiny({"bench.windows=9", "bench.repetitions=1"});
  EXPECT_THROW(pipeline::bench(too_long, seq), std::invalid_argument);
  EXPECT_EQ(pipeline::median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(pipeline::median({4.0, 1.0}), 2.5);
}

TEST(Cli, EndToEndAndExitCodes) {
  const auto dir = scratch("cli");
  const std::string d = dir.string();
  const std::string small =
      " --set synth.frames=3 synth.ground_points=150 synth.object_points=40 synth.extent=3 network.width=4"
      " optim.iterations=3 data.window=2";
  EXPECT_EQ(run_cli("synth -o " + d + "/data" + small), 0);
  EXPECT_TRUE(fs::exists(dir / "data" / "manifest.txt"));
  EXPECT_EQ(run_cli("train -d " + d + "/data --log " + d + "/log.csv --checkpoint " + d + "/m.ckpt" + small), 0);
  EXPECT_TRUE(fs::exists(dir / "m.ckpt"));
  EXPECT_EQ(run_cli("eval -d " + d + "/data --checkpoint " + d + "/m.ckpt --report " + d + "/r.csv --predictions " + d +
                    "/pred" + small),
            0);
  EXPECT_TRUE(fs::exists(dir / "r.csv"));
  EXPECT_TRUE(fs::exists(dir / "pred" / "pred_0002.spg"));
  EXPECT_EQ(run_cli("inspect " + d + "/data/frame_0000.spg --voxel-size 0.5"), 0);
  EXPECT_EQ(run_cli("inspect " + d + "/data"), 0);

  // Usage and configuration errors.
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train --bogus"), 2);
  EXPECT_EQ(run_cli("train --set network.depth=3"), 2);
  EXPECT_EQ(run_cli("train --set optim.lr=-1"), 2);
  EXPECT_EQ(run_cli("train -c " + d + "/missing.ini"), 2);

  // Data and shape errors.
  EXPECT_EQ(run_cli("train -d " + d + "/nowhere"), 3);
  std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
  EXPECT_EQ(run_cli("eval -d " + d + "/data --checkpoint " + d + "/bad.ckpt" + small), 3);
  EXPECT_EQ(run_cli("eval -d " + d + "/data --checkpoint " + d + "/m.ckpt" + small + " network.width=6"), 3);
  EXPECT_EQ(run_cli("inspect " + d + "/nothing.spg"), 3);
  fs::remove_all(dir);
}
