#include "ptdr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "ptdr/errors.hpp"

namespace fs = std::filesystem;

namespace ptdr {

namespace {

constexpr double kAxisTol = 1e-9;

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

bool ExperimentReport::has(const std::string& experiment, double axis, std::uint64_t seed) const {
  return find(experiment, axis, seed) != nullptr;
}

const ReportRow* ExperimentReport::find(const std::string& experiment, double axis,
                                        std::uint64_t seed) const {
  for (const ReportRow& r : rows)
    if (r.experiment == experiment && std::fabs(r.axis - axis) < kAxisTol && r.seed == seed)
      return &r;
  return nullptr;
}

double ExperimentReport::seed_mean(const std::string& experiment, double axis) const {
  double total = 0.0;
  int n = 0;
  for (const ReportRow& r : rows)
    if (r.experiment == experiment && std::fabs(r.axis - axis) < kAxisTol) {
      total += r.miou;
      ++n;
    }
  if (n == 0) throw ContractError("report: no rows for " + experiment);
  return total / n;
}

void write_report_csv(const ExperimentReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "experiment,axis,seed,miou,wallclock_s\n";
  char line[256];
  for (const ReportRow& r : report.rows) {
    std::snprintf(line, sizeof(line), "%s,%.17g,%llu,%.17g,%.3f\n", r.experiment.c_str(), r.axis,
                  static_cast<unsigned long long>(r.seed), r.miou, r.wallclock_s);
    out << line;
  }
}

ExperimentReport read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open report " + path);
  std::string line;
  if (!std::getline(in, line) || line != "experiment,axis,seed,miou,wallclock_s")
    throw FormatError(path + ": unexpected report header");
  ExperimentReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) throw FormatError(path + ": malformed report row");
    ReportRow row;
    row.experiment = line.substr(0, comma);
    unsigned long long seed = 0;
    if (std::sscanf(line.c_str() + comma + 1, "%lg,%llu,%lg,%lg", &row.axis, &seed, &row.miou,
                    &row.wallclock_s) != 4)
      throw FormatError(path + ": malformed report row");
    row.seed = seed;
    report.rows.push_back(std::move(row));
  }
  return report;
}

void write_report_summary_json(const ExperimentReport& report, const std::string& path) {
  // group rows by (experiment, axis)
  nlohmann::json points = nlohmann::json::array();
  std::vector<std::pair<std::string, double>> seen;
  for (const ReportRow& r : report.rows) {
    bool exists = false;
    for (const auto& [e, a] : seen)
      if (e == r.experiment && std::fabs(a - r.axis) < kAxisTol) exists = true;
    if (exists) continue;
    seen.emplace_back(r.experiment, r.axis);
    double total = 0.0, total2 = 0.0;
    int n = 0;
    std::vector<std::uint64_t> seeds;
    for (const ReportRow& q : report.rows)
      if (q.experiment == r.experiment && std::fabs(q.axis - r.axis) < kAxisTol) {
        total += q.miou;
        total2 += q.miou * q.miou;
        seeds.push_back(q.seed);
        ++n;
      }
    const double mean = total / n;
    const double var = std::max(0.0, total2 / n - mean * mean);
    nlohmann::json p;
    p["experiment"] = r.experiment;
    p["axis"] = r.axis;
    p["seeds"] = seeds;
    p["n"] = n;
    p["miou_mean"] = mean;
    p["miou_std"] = std::sqrt(var);
    points.push_back(std::move(p));
  }
  nlohmann::json j;
  j["kind"] = report.kind;
  j["config_hash"] = report.config_hash;
  j["points"] = std::move(points);
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

bool reports_equivalent(const ExperimentReport& a, const ExperimentReport& b) {
  if (a.kind != b.kind || a.config_hash != b.config_hash || a.rows.size() != b.rows.size())
    return false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const ReportRow& x = a.rows[i];
    const ReportRow& y = b.rows[i];
    if (x.experiment != y.experiment || std::fabs(x.axis - y.axis) > kAxisTol ||
        x.seed != y.seed || x.miou != y.miou)
      return false;
  }
  return true;
}

std::string SweepConfig::to_json() const {
  nlohmann::json j;
  j["train"] = nlohmann::json::parse(train.to_json());
  j["data_dir"] = data_dir;
  j["checkpoint"] = checkpoint;
  j["checkpoint_dir"] = checkpoint_dir;
  j["shots"] = shots;
  j["timesteps"] = timesteps;
  j["checkpoint_iters"] = checkpoint_iters;
  j["seeds"] = seeds;
  j["include_scratch_arm"] = include_scratch_arm;
  j["include_zero_point"] = include_zero_point;
  j["out_csv"] = out_csv;
  return j.dump(2);
}

SweepConfig SweepConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("sweep config: invalid JSON");
  SweepConfig c;
  try {
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train").dump());
    c.data_dir = j.value("data_dir", c.data_dir);
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.shots = j.value("shots", c.shots);
    c.timesteps = j.value("timesteps", c.timesteps);
    c.checkpoint_iters = j.value("checkpoint_iters", c.checkpoint_iters);
    c.seeds = j.value("seeds", c.seeds);
    c.include_scratch_arm = j.value("include_scratch_arm", c.include_scratch_arm);
    c.include_zero_point = j.value("include_zero_point", c.include_zero_point);
    c.out_csv = j.value("out_csv", c.out_csv);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("sweep config: ") + ex.what());
  }
  return c;
}

std::uint64_t SweepConfig::hash() const { return fnv1a(to_json()); }

namespace {

struct SweepData {
  std::vector<SegSample> train_set;
  std::vector<SegSample> val_set;
  std::vector<SegSample> test_set;
};

SweepData load_sweep_data(const SweepConfig& config) {
  Dataset ds = load_dataset(config.data_dir);
  SweepData d;
  for (std::size_t i : ds.indices_of(Split::train)) d.train_set.push_back(ds.samples[i]);
  for (std::size_t i : ds.indices_of(Split::val)) d.val_set.push_back(ds.samples[i]);
  for (std::size_t i : ds.indices_of(Split::test)) d.test_set.push_back(ds.samples[i]);
  if (d.train_set.empty() || d.val_set.empty() || d.test_set.empty())
    throw ConfigError("sweep: dataset in " + config.data_dir + " is missing a split");
  return d;
}

// Shared cell runner: either continues from a checkpointed model or from a
// fresh random initialization built with the checkpoint's topology.
double run_cell(const SweepConfig& config, const SweepData& data, const UnetModel* init,
                const UnetConfig& topology, int shots, int timestep, std::uint64_t seed) {
  TrainConfig cfg = config.train;
  cfg.seed = seed;
  cfg.finetune_timestep = timestep;
  if (shots > static_cast<int>(data.train_set.size()))
    throw ConfigError("sweep: " + std::to_string(shots) + " shots exceed the train split");
  std::vector<SegSample> subset(data.train_set.begin(), data.train_set.begin() + shots);

  UnetModel model;
  if (init) {
    model = init->clone();
  } else {
    Rng rng(mix_seed(seed, 0x5c7a7c8));
    model = build_unet<float>(topology, rng);
  }
  FinetuneResult fit = finetune(cfg, std::move(model), subset, data.val_set);
  return evaluate_miou(fit.model, data.test_set, cfg.finetune_timestep);
}

using CellFn = std::function<double(const std::string& experiment, double axis,
                                    std::uint64_t seed)>;

ExperimentReport run_sweep(const SweepConfig& config, const std::string& kind,
                           const std::vector<std::pair<std::string, double>>& points,
                           const CellFn& cell) {
  ExperimentReport report;
  report.kind = kind;
  report.config_hash = config.hash();

  ExperimentReport existing;
  if (!config.out_csv.empty() && fs::exists(config.out_csv))
    existing = read_report_csv(config.out_csv);

  for (const auto& [experiment, axis] : points) {
    for (std::uint64_t seed : config.seeds) {
      if (const ReportRow* prev = existing.find(experiment, axis, seed)) {
        report.rows.push_back(*prev);
        continue;
      }
      const double t0 = now_seconds();
      ReportRow row;
      row.experiment = experiment;
      row.axis = axis;
      row.seed = seed;
      row.miou = cell(experiment, axis, seed);
      row.wallclock_s = now_seconds() - t0;
      report.rows.push_back(row);
      ++report.computed_cells;
      if (!config.out_csv.empty()) write_report_csv(report, config.out_csv);
    }
  }
  if (!config.out_csv.empty()) {
    write_report_csv(report, config.out_csv);
    write_report_summary_json(report, config.out_csv + ".summary.json");
  }
  return report;
}

}  // namespace

ExperimentReport label_efficiency_sweep(const SweepConfig& config) {
  if (!fs::exists(config.checkpoint))
    throw ConfigError("label sweep: missing checkpoint " + config.checkpoint);
  const SweepData data = load_sweep_data(config);
  UnetModel pretrained = load_checkpoint(config.checkpoint);

  std::vector<std::pair<std::string, double>> points;
  for (int k : config.shots) points.emplace_back("labels/ptdr", static_cast<double>(k));
  if (config.include_scratch_arm && !config.shots.empty()) {
    const int top = *std::max_element(config.shots.begin(), config.shots.end());
    points.emplace_back("labels/scratch", static_cast<double>(top));
  }

  return run_sweep(config, "labels", points,
                   [&](const std::string& experiment, double axis, std::uint64_t seed) {
                     const int shots = static_cast<int>(axis);
                     const bool scratch = experiment == "labels/scratch";
                     return run_cell(config, data, scratch ? nullptr : &pretrained,
                                     pretrained.config, shots, config.train.finetune_timestep,
                                     seed);
                   });
}

ExperimentReport timestep_sweep(const SweepConfig& config) {
  if (!fs::exists(config.checkpoint))
    throw ConfigError("timestep sweep: missing checkpoint " + config.checkpoint);
  for (int t : config.timesteps)
    if (t < 1 || t > config.train.T)
      throw ConfigError("timestep sweep: t=" + std::to_string(t) + " outside the schedule");
  const SweepData data = load_sweep_data(config);
  UnetModel pretrained = load_checkpoint(config.checkpoint);

  std::vector<std::pair<std::string, double>> points;
  for (int t : config.timesteps) points.emplace_back("timestep", static_cast<double>(t));

  const int shots = static_cast<int>(data.train_set.size());
  return run_sweep(config, "timestep", points,
                   [&](const std::string&, double axis, std::uint64_t seed) {
                     return run_cell(config, data, &pretrained, pretrained.config, shots,
                                     static_cast<int>(axis), seed);
                   });
}

ExperimentReport saturation_sweep(const SweepConfig& config) {
  std::vector<int> iters =
      config.checkpoint_iters.empty() ? config.train.checkpoint_iters : config.checkpoint_iters;
  if (iters.empty()) throw ConfigError("saturation sweep: no checkpoint iterations given");
  const SweepData data = load_sweep_data(config);

  std::vector<std::pair<int, UnetModel>> models;
  for (int it : iters) {
    const std::string path =
        (fs::path(config.checkpoint_dir) / ("ckpt_" + std::to_string(it) + ".bin")).string();
    if (!fs::exists(path)) throw ConfigError("saturation sweep: missing checkpoint " + path);
    models.emplace_back(it, load_checkpoint(path));
  }

  std::vector<std::pair<std::string, double>> points;
  if (config.include_zero_point) points.emplace_back("saturation", 0.0);
  for (int it : iters) points.emplace_back("saturation", static_cast<double>(it));

  const int shots = static_cast<int>(data.train_set.size());
  return run_sweep(config, "saturation", points,
                   [&](const std::string&, double axis, std::uint64_t seed) {
                     const int it = static_cast<int>(axis);
                     const UnetModel* init = nullptr;
                     for (const auto& [i, m] : models)
                       if (i == it) init = &m;
                     return run_cell(config, data, init, models.front().second.config, shots,
                                     config.train.finetune_timestep, seed);
                   });
}

Dataset generate_dataset(const std::string& noise_ckpt, const std::string& seg_ckpt, int n,
                         int image_size, int T, int label_timestep, const std::string& out_dir,
                         std::uint64_t seed) {
  if (!fs::exists(noise_ckpt)) throw ConfigError("generate: missing checkpoint " + noise_ckpt);
  if (!fs::exists(seg_ckpt)) throw ConfigError("generate: missing checkpoint " + seg_ckpt);
  UnetModel noise_model = load_checkpoint(noise_ckpt);
  UnetModel seg_model = load_checkpoint(seg_ckpt);
  if (noise_model.head_mode != HeadMode::noise)
    throw ModeError("generate: first checkpoint must be a noise-prediction model");
  if (seg_model.head_mode != HeadMode::segmentation)
    throw ModeError("generate: second checkpoint must be a segmentation model");

  DiffusionSchedule sched = make_schedule(T);
  NoiseFn<float> eps = noise_predictor(noise_model);

  Dataset ds;
  ds.num_classes = seg_model.config.num_classes;
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    Tensor img = generate(eps, sched, {1, 1, image_size, image_size}, rng);
    Tensor logits = segment_logits(seg_model, img, label_timestep);
    IntTensor pred = argmax_channel(logits);
    SegSample s;
    s.id = "gen_" + std::to_string(i);
    s.image = reshape(img, {1, image_size, image_size});
    s.mask = IntTensor(Shape{image_size, image_size},
                       std::vector<std::int32_t>(pred.data.begin(), pred.data.end()));
    ds.samples.push_back(std::move(s));
    ds.splits.push_back(Split::train);
    ds.provenance.emplace_back("generated");
  }
  save_dataset(out_dir, ds);
  return ds;
}

}  // namespace ptdr
