#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptdr/segdata.hpp"
#include "ptdr/train.hpp"

namespace ptdr {

struct ReportRow {
  std::string experiment;
  double axis = 0.0;
  std::uint64_t seed = 0;
  double miou = 0.0;
  double wallclock_s = 0.0;
};

struct ExperimentReport {
  std::string kind;
  std::uint64_t config_hash = 0;
  std::vector<ReportRow> rows;
  int computed_cells = 0;  // cells actually run (rest loaded from a partial report)

  bool has(const std::string& experiment, double axis, std::uint64_t seed) const;
  const ReportRow* find(const std::string& experiment, double axis, std::uint64_t seed) const;
  /// Mean over seeds for one (experiment, axis) point.
  double seed_mean(const std::string& experiment, double axis) const;
};

/// Rows `experiment,axis,seed,miou,wallclock_s` preceded by that header.
void write_report_csv(const ExperimentReport& report, const std::string& path);
ExperimentReport read_report_csv(const std::string& path);
/// Per-point mean/std aggregates keyed by experiment and axis.
void write_report_summary_json(const ExperimentReport& report, const std::string& path);
/// Equality on everything except wallclock.
bool reports_equivalent(const ExperimentReport& a, const ExperimentReport& b);

struct SweepConfig {
  TrainConfig train;
  std::string data_dir;             // labeled dataset directory
  std::string checkpoint;           // pretrained checkpoint (labels/timestep sweeps)
  std::string checkpoint_dir;       // directory holding ckpt_<iter>.bin (saturation sweep)
  std::vector<int> shots = {1, 2, 5, 10};
  std::vector<int> timesteps = {1, 100};
  std::vector<int> checkpoint_iters;         // defaults to train.checkpoint_iters
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  bool include_scratch_arm = true;  // label sweep: random-init arm at the largest shot
  bool include_zero_point = true;   // saturation sweep: random-init as iteration 0
  std::string out_csv;

  std::string to_json() const;
  static SweepConfig from_json(const std::string& text);
  std::uint64_t hash() const;
};

/// Fine-tunes per (shot, seed) on nested training subsets from the
/// pretrained checkpoint and reports test mIoU. Arm names: "labels/ptdr"
/// and (optionally, at the largest shot) "labels/scratch".
///
/// All sweeps are resumable: when out_csv already holds rows for this
/// config, only missing (point, seed) cells are recomputed, and the merged
/// report is identical to a fresh full run (wallclock aside).
ExperimentReport label_efficiency_sweep(const SweepConfig& config);

/// Fine-tunes with each fixed conditioning timestep; axis = timestep.
ExperimentReport timestep_sweep(const SweepConfig& config);

/// Fine-tunes from each pretraining checkpoint; axis = pretraining
/// iterations (0 = random initialization when enabled).
ExperimentReport saturation_sweep(const SweepConfig& config);

/// Samples n images from the denoising checkpoint, labels each with the
/// fine-tuned segmenter's argmax, and writes a dataset (provenance
/// "generated") under out_dir.
Dataset generate_dataset(const std::string& noise_ckpt, const std::string& seg_ckpt, int n,
                         int image_size, int T, int label_timestep, const std::string& out_dir,
                         std::uint64_t seed);

}  // namespace ptdr
