#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ptdr/harness.hpp"
#include "ptdr/unet.hpp"

using namespace ptdr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

UnetConfig tiny16() {
  UnetConfig cfg;
  cfg.in_channels = 1;
  cfg.base_width = 8;
  cfg.channel_mults = {1, 2};
  cfg.num_res_blocks = 1;
  cfg.attention_levels = {1};
  cfg.time_embed_dim = 16;
  cfg.out_channels_noise = 1;
  cfg.num_classes = 6;
  return cfg;
}

// dataset dir + pretrained-checkpoint path, shared across the suite
struct Fixture {
  TempDir dir{"ptdr_harness_fixture"};
  std::string data_dir;
  std::string ckpt;

  Fixture() {
    data_dir = (dir.path / "data").string();
    Dataset ds = make_synthetic_dataset(20, 16, SyntheticKind::bitewing, 31);
    save_dataset(data_dir, ds);
    Rng rng(17);
    UnetModel model = build_unet<float>(tiny16(), rng);
    ckpt = (dir.path / "ckpt_pre.bin").string();
    save_checkpoint(model, ckpt);
  }

  SweepConfig base_config() const {
    SweepConfig c;
    c.train.T = 50;
    c.train.finetune_epochs = 1;
    c.train.finetune_timestep = 1;
    c.train.lr = 1e-3;
    c.data_dir = data_dir;
    c.checkpoint = ckpt;
    c.seeds = {0, 1};
    c.shots = {1, 2};
    return c;
  }
};

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("report csv and summary round trip") {
  ExperimentReport report;
  report.kind = "labels";
  report.config_hash = 42;
  report.rows = {{"labels/ptdr", 1, 0, 0.5, 1.25},
                 {"labels/ptdr", 1, 1, 0.6, 1.5},
                 {"labels/ptdr", 2, 0, 0.7, 2.0}};
  const std::string path = "report_roundtrip.csv";
  write_report_csv(report, path);

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "experiment,axis,seed,miou,wallclock_s");

  ExperimentReport back = read_report_csv(path);
  REQUIRE(back.rows.size() == 3);
  CHECK(back.rows[1].miou == 0.6);
  CHECK(back.rows[1].seed == 1);
  CHECK(back.seed_mean("labels/ptdr", 1) == doctest::Approx(0.55));

  write_report_summary_json(report, path + ".summary.json");
  std::ifstream js(path + ".summary.json");
  std::string text((std::istreambuf_iterator<char>(js)), std::istreambuf_iterator<char>());
  CHECK(text.find("\"miou_mean\"") != std::string::npos);
  CHECK(text.find("labels/ptdr") != std::string::npos);
  std::remove(path.c_str());
  std::remove((path + ".summary.json").c_str());
}

TEST_CASE("label sweep emits one row per point and seed") {
  Fixture fx;
  SweepConfig cfg = fx.base_config();
  cfg.out_csv = (fx.dir.path / "labels.csv").string();
  ExperimentReport report = label_efficiency_sweep(cfg);
  // 2 shots x 2 seeds + scratch arm at shot 2 x 2 seeds
  CHECK(report.rows.size() == 6);
  CHECK(report.computed_cells == 6);
  int scratch_rows = 0;
  for (const auto& r : report.rows)
    if (r.experiment == "labels/scratch") ++scratch_rows;
  CHECK(scratch_rows == 2);
  CHECK(fs::exists(cfg.out_csv));
  CHECK(fs::exists(cfg.out_csv + ".summary.json"));

  SUBCASE("rerun recomputes nothing and reproduces the report") {
    ExperimentReport again = label_efficiency_sweep(cfg);
    CHECK(again.computed_cells == 0);
    CHECK(reports_equivalent(report, again));
  }

  SUBCASE("partial report recomputes only the missing cells") {
    ExperimentReport partial = report;
    partial.rows.erase(partial.rows.begin() + 1);  // drop one cell
    partial.rows.pop_back();                       // and another
    write_report_csv(partial, cfg.out_csv);
    ExperimentReport resumed = label_efficiency_sweep(cfg);
    CHECK(resumed.computed_cells == 2);
    CHECK(reports_equivalent(report, resumed));
  }
}

TEST_CASE("degenerate timestep sweep reduces to a single fine-tune") {
  Fixture fx;
  SweepConfig cfg = fx.base_config();
  cfg.timesteps = {1};
  cfg.seeds = {0};
  ExperimentReport report = timestep_sweep(cfg);
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].axis == 1.0);

  // replicate the cell by hand
  Dataset ds = load_dataset(fx.data_dir);
  std::vector<SegSample> train_set, val_set, test_set;
  for (std::size_t i : ds.indices_of(Split::train)) train_set.push_back(ds.samples[i]);
  for (std::size_t i : ds.indices_of(Split::val)) val_set.push_back(ds.samples[i]);
  for (std::size_t i : ds.indices_of(Split::test)) test_set.push_back(ds.samples[i]);
  TrainConfig tc = cfg.train;
  tc.seed = 0;
  FinetuneResult fit = finetune(tc, load_checkpoint(fx.ckpt), train_set, val_set);
  const double direct = evaluate_miou(fit.model, test_set, tc.finetune_timestep);
  CHECK(report.rows[0].miou == direct);
}

TEST_CASE("timestep sweep echoes the requested axis values") {
  Fixture fx;
  SweepConfig cfg = fx.base_config();
  cfg.timesteps = {1, 25, 50};
  cfg.seeds = {0};
  ExperimentReport report = timestep_sweep(cfg);
  std::vector<double> axes;
  for (const auto& r : report.rows) axes.push_back(r.axis);
  CHECK(axes == std::vector<double>{1.0, 25.0, 50.0});
}

TEST_CASE("sweeps validate their configuration") {
  Fixture fx;
  SweepConfig cfg = fx.base_config();
  cfg.checkpoint = "no_such_file.bin";
  CHECK_THROWS_AS(label_efficiency_sweep(cfg), ConfigError);
  SweepConfig cfg2 = fx.base_config();
  cfg2.timesteps = {0};
  CHECK_THROWS_AS(timestep_sweep(cfg2), ConfigError);
  SweepConfig cfg3 = fx.base_config();
  cfg3.timesteps = {51};
  CHECK_THROWS_AS(timestep_sweep(cfg3), ConfigError);
  SweepConfig cfg4 = fx.base_config();
  cfg4.checkpoint_dir = fx.dir.path.string();
  cfg4.checkpoint_iters = {123};
  CHECK_THROWS_AS(saturation_sweep(cfg4), ConfigError);
}

TEST_CASE("saturation sweep runs from checkpoints plus the zero point") {
  Fixture fx;
  // fabricate two "pretraining" checkpoints
  Rng r1(100), r2(101);
  UnetModel m1 = build_unet<float>(tiny16(), r1);
  UnetModel m2 = build_unet<float>(tiny16(), r2);
  save_checkpoint(m1, (fx.dir.path / "ckpt_10.bin").string());
  save_checkpoint(m2, (fx.dir.path / "ckpt_20.bin").string());

  SweepConfig cfg = fx.base_config();
  cfg.checkpoint_dir = fx.dir.path.string();
  cfg.checkpoint_iters = {10, 20};
  cfg.seeds = {0};
  ExperimentReport report = saturation_sweep(cfg);
  std::vector<double> axes;
  for (const auto& r : report.rows) axes.push_back(r.axis);
  CHECK(axes == std::vector<double>{0.0, 10.0, 20.0});
}

TEST_CASE("sweep configs hash their content") {
  SweepConfig a, b;
  CHECK(a.hash() == b.hash());
  b.shots = {1};
  CHECK(a.hash() != b.hash());
  SweepConfig c = SweepConfig::from_json(a.to_json());
  CHECK(c.hash() == a.hash());
}

TEST_CASE("generated dataset round-trips with provenance") {
  Fixture fx;
  Rng rng(7);
  UnetModel noise_model = build_unet<float>(tiny16(), rng);
  UnetModel seg_model = noise_model.clone();
  set_head(seg_model, HeadMode::segmentation);
  const std::string noise_path = (fx.dir.path / "noise.bin").string();
  const std::string seg_path = (fx.dir.path / "seg.bin").string();
  save_checkpoint(noise_model, noise_path);
  save_checkpoint(seg_model, seg_path);

  const std::string out = (fx.dir.path / "generated").string();
  Dataset ds = generate_dataset(noise_path, seg_path, 3, 16, 50, 1, out, 99);
  CHECK(ds.samples.size() == 3);

  Dataset back = load_dataset(out);
  REQUIRE(back.samples.size() == 3);
  for (std::size_t i = 0; i < back.samples.size(); ++i) {
    CHECK(back.provenance[i] == "generated");
    CHECK(back.samples[i].mask == ds.samples[i].mask);
    for (std::int32_t v : back.samples[i].mask.data) {
      CHECK(v >= 0);
      CHECK(v < 6);
    }
  }

  // head-mode mismatch: both checkpoints in the same mode
  CHECK_THROWS_AS(generate_dataset(noise_path, noise_path, 1, 16, 50, 1, out, 1), ModeError);
  CHECK_THROWS_AS(generate_dataset("missing.bin", seg_path, 1, 16, 50, 1, out, 1), ConfigError);
}

}  // TEST_SUITE
