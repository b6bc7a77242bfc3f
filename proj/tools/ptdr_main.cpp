#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ptdr/baseline.hpp"
#include "ptdr/harness.hpp"
#include "ptdr/train.hpp"

using namespace ptdr;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

TrainConfig load_train_config(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  return TrainConfig::from_json(read_file(path));
}

std::vector<SegSample> split_samples(const Dataset& ds, Split split) {
  std::vector<SegSample> out;
  for (std::size_t i : ds.indices_of(split)) out.push_back(ds.samples[i]);
  return out;
}

int run_make_data(const std::string& kind, int n, int size, std::uint64_t seed,
                  const std::string& out) {
  const SyntheticKind k = kind == "lunglike" ? SyntheticKind::lunglike : SyntheticKind::bitewing;
  Dataset ds = make_synthetic_dataset(n, size, k, seed);
  save_dataset(out, ds);
  std::printf("wrote %zu samples (%zu pretrain / %zu train / %zu val / %zu test) to %s\n",
              ds.samples.size(), ds.indices_of(Split::pretrain).size(),
              ds.indices_of(Split::train).size(), ds.indices_of(Split::val).size(),
              ds.indices_of(Split::test).size(), out.c_str());
  return 0;
}

int run_pretrain(const std::string& config_path, const std::string& data_dir,
                 const std::string& out_dir, int resume_iter) {
  TrainConfig cfg = load_train_config(config_path);
  Dataset ds = load_dataset(data_dir);
  std::vector<SegSample> pool = split_samples(ds, Split::pretrain);
  if (pool.empty()) pool = split_samples(ds, Split::train);

  UnetModel model;
  PretrainResult res;
  if (resume_iter > 0) {
    res = resume_pretrain(cfg, pool, out_dir, resume_iter, model);
  } else {
    Rng rng(mix_seed(cfg.seed, 0x1417));
    model = build_unet<float>(UnetConfig{}, rng);
    res = pretrain(cfg, pool, model, out_dir);
  }
  std::printf("pretrained %d iters, final loss %.4f\n", cfg.pretrain_iters, res.final_loss);
  for (const auto& p : res.checkpoint_paths) std::printf("checkpoint: %s\n", p.c_str());
  return 0;
}

int run_finetune(const std::string& ckpt, int shots, const std::string& config_path,
                 const std::string& data_dir, const std::string& out_dir, std::uint64_t seed,
                 int timestep) {
  TrainConfig cfg = load_train_config(config_path);
  if (seed != static_cast<std::uint64_t>(-1)) cfg.seed = seed;
  if (timestep > 0) cfg.finetune_timestep = timestep;

  Dataset ds = load_dataset(data_dir);
  std::vector<SegSample> train_set = split_samples(ds, Split::train);
  std::vector<SegSample> val_set = split_samples(ds, Split::val);
  if (shots > 0 && shots < static_cast<int>(train_set.size()))
    train_set.resize(static_cast<std::size_t>(shots));

  UnetModel model = load_checkpoint(ckpt);
  FinetuneResult fit = finetune(cfg, std::move(model), train_set, val_set);
  std::printf("fine-tuned on %zu samples: best val mIoU %.4f (final %.4f)\n", train_set.size(),
              fit.best_val_miou, fit.final_val_miou);

  fs::create_directories(out_dir);
  const std::string out_path = (fs::path(out_dir) / "finetuned.bin").string();
  save_checkpoint(fit.model, out_path);
  std::printf("saved %s\n", out_path.c_str());

  std::vector<SegSample> test_set = split_samples(ds, Split::test);
  if (!test_set.empty()) {
    const double test = evaluate_miou(fit.model, test_set, cfg.finetune_timestep);
    std::printf("test mIoU %.4f\n", test);
  }
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& split, const std::string& data_dir,
             int timestep, const std::string& report) {
  Dataset ds = load_dataset(data_dir);
  std::vector<SegSample> samples = split_samples(ds, split_from_name(split));
  if (samples.empty()) throw ConfigError("eval: split '" + split + "' is empty");
  UnetModel model = load_checkpoint(ckpt);
  if (model.head_mode != HeadMode::segmentation)
    throw ModeError("eval: checkpoint is not a segmentation model");
  ConfusionMatrix cm = evaluate_confusion(model, samples, timestep);
  std::printf("%s mIoU %.4f over %zu samples\n", split.c_str(), miou(cm), samples.size());
  if (!report.empty()) {
    write_iou_csv(cm, report);
    std::printf("per-class report: %s\n", report.c_str());
  }
  return 0;
}

int run_sweep(const std::string& which, const std::string& config_path, const std::string& out) {
  SweepConfig cfg = SweepConfig::from_json(read_file(config_path));
  if (!out.empty()) cfg.out_csv = out;
  ExperimentReport report;
  if (which == "labels")
    report = label_efficiency_sweep(cfg);
  else if (which == "timestep")
    report = timestep_sweep(cfg);
  else if (which == "saturation")
    report = saturation_sweep(cfg);
  else
    throw ConfigError("unknown sweep '" + which + "'");
  for (const auto& r : report.rows)
    std::printf("%s axis=%g seed=%llu mIoU=%.4f (%.1fs)\n", r.experiment.c_str(), r.axis,
                static_cast<unsigned long long>(r.seed), r.miou, r.wallclock_s);
  std::printf("report: %s (%d cells computed)\n", cfg.out_csv.c_str(), report.computed_cells);
  return 0;
}

int run_generate(const std::string& noise_ckpt, const std::string& seg_ckpt, int n, int size,
                 int T, int timestep, std::uint64_t seed, const std::string& out) {
  Dataset ds = generate_dataset(noise_ckpt, seg_ckpt, n, size, T, timestep, out, seed);
  std::printf("generated %zu labeled samples into %s\n", ds.samples.size(), out.c_str());
  return 0;
}

int run_schedule(int T, const std::string& kind, const std::string& out) {
  DiffusionSchedule sched =
      make_schedule(T, kind == "cosine" ? ScheduleKind::cosine : ScheduleKind::linear);
  dump_schedule_csv(sched, out);
  std::printf("wrote %d-step %s schedule to %s\n", T, kind.c_str(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DDPM pre-training and segmentation fine-tuning workbench"};
  app.require_subcommand(1);

  // make-data
  std::string md_kind = "bitewing", md_out;
  int md_n = 2600, md_size = 32;
  std::uint64_t md_seed = 0;
  auto* md = app.add_subcommand("make-data", "generate a synthetic dataset");
  md->add_option("--kind", md_kind)->check(CLI::IsMember({"bitewing", "lunglike"}));
  md->add_option("-n", md_n, "total samples (pool + labeled)");
  md->add_option("--size", md_size);
  md->add_option("--seed", md_seed);
  md->add_option("--out", md_out)->required();

  // pretrain
  std::string pt_config, pt_data, pt_out;
  int pt_resume = 0;
  auto* pt = app.add_subcommand("pretrain", "denoising pre-training");
  pt->add_option("--config", pt_config, "train config JSON");
  pt->add_option("--data", pt_data)->required();
  pt->add_option("--out", pt_out)->required();
  pt->add_option("--resume", pt_resume, "resume from this checkpoint iteration");

  // finetune
  std::string ft_ckpt, ft_config, ft_data, ft_out = ".";
  int ft_shots = 0, ft_timestep = 0;
  std::uint64_t ft_seed = static_cast<std::uint64_t>(-1);
  auto* ft = app.add_subcommand("finetune", "segmentation fine-tuning");
  ft->add_option("--ckpt", ft_ckpt)->required();
  ft->add_option("--shots", ft_shots, "labeled training samples (0 = all)");
  ft->add_option("--config", ft_config);
  ft->add_option("--data", ft_data)->required();
  ft->add_option("--out", ft_out);
  ft->add_option("--seed", ft_seed);
  ft->add_option("--timestep", ft_timestep);

  // eval
  std::string ev_ckpt, ev_split = "test", ev_data, ev_report;
  int ev_timestep = 1;
  auto* ev = app.add_subcommand("eval", "evaluate a segmentation checkpoint");
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--timestep", ev_timestep);
  ev->add_option("--report", ev_report, "per-class IoU CSV path");

  // sweep
  std::string sw_which, sw_config, sw_out;
  auto* sw = app.add_subcommand("sweep", "run an experiment sweep");
  sw->add_option("which", sw_which)->required()->check(
      CLI::IsMember({"labels", "timestep", "saturation"}));
  sw->add_option("--config", sw_config)->required();
  sw->add_option("--out", sw_out, "report CSV (overrides config out_csv)");

  // generate
  std::string gn_noise, gn_seg, gn_out;
  int gn_n = 50, gn_size = 32, gn_T = 100, gn_timestep = 1;
  std::uint64_t gn_seed = 0;
  auto* gn = app.add_subcommand("generate", "sample an artificial labeled dataset");
  gn->add_option("--noise-ckpt", gn_noise)->required();
  gn->add_option("--seg-ckpt", gn_seg)->required();
  gn->add_option("-n", gn_n);
  gn->add_option("--size", gn_size);
  gn->add_option("--T", gn_T);
  gn->add_option("--timestep", gn_timestep);
  gn->add_option("--seed", gn_seed);
  gn->add_option("--out", gn_out)->required();

  // schedule
  std::string sc_kind = "linear", sc_out = "schedule.csv";
  int sc_T = 100;
  auto* sc = app.add_subcommand("schedule", "dump noise-schedule tables");
  sc->add_option("--T", sc_T);
  sc->add_option("--kind", sc_kind)->check(CLI::IsMember({"linear", "cosine"}));
  sc->add_option("--out", sc_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (md->parsed()) return run_make_data(md_kind, md_n, md_size, md_seed, md_out);
    if (pt->parsed()) return run_pretrain(pt_config, pt_data, pt_out, pt_resume);
    if (ft->parsed())
      return run_finetune(ft_ckpt, ft_shots, ft_config, ft_data, ft_out, ft_seed, ft_timestep);
    if (ev->parsed()) return run_eval(ev_ckpt, ev_split, ev_data, ev_timestep, ev_report);
    if (sw->parsed()) return run_sweep(sw_which, sw_config, sw_out);
    if (gn->parsed())
      return run_generate(gn_noise, gn_seg, gn_n, gn_size, gn_T, gn_timestep, gn_seed, gn_out);
    if (sc->parsed()) return run_schedule(sc_T, sc_kind, sc_out);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
