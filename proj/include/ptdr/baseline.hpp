#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ptdr/diffusion.hpp"
#include "ptdr/rng.hpp"
#include "ptdr/tensor.hpp"
#include "ptdr/unet.hpp"

namespace ptdr {

/// Which activations to harvest from the frozen denoiser, and at which
/// noise levels.
struct FeatureSpec {
  std::vector<int> timesteps;
  std::vector<std::string> blocks;
  std::int64_t target_h = 32;
  std::int64_t target_w = 32;

  /// Middle block plus the two deepest decoder levels, at noise levels
  /// spread over the first quarter of the schedule.
  static FeatureSpec defaults(const UnetConfig& config, int T);
};

/// Feature channel count produced by a spec for a given topology.
std::int64_t feature_width(const FeatureSpec& spec, const UnetConfig& config);

/// Per-pixel feature rows [target_h * target_w, D] for one [1,H,W] image.
/// The image is noised to each requested timestep with q_sample before the
/// pass; activations are nearest-upsampled to the target resolution and
/// concatenated. Model parameters are read, never written.
Tensor extract_features(const UnetModel& frozen, const Tensor& image, const FeatureSpec& spec,
                        const DiffusionSchedule& sched, Rng& rng);

/// Small per-pixel MLP over feature rows: standardized inputs, SiLU hidden
/// layers, class logits out.
struct PixelClassifier {
  int in_dim = 0;
  int num_classes = 0;
  std::vector<int> hidden_dims;
  Tensor feat_mean;  // [D] input standardization
  Tensor feat_scale;
  std::map<std::string, Tensor> params;
};

struct PixelClassifierConfig {
  std::vector<int> hidden_dims = {128, 128};
  int epochs = 40;
  int batch_rows = 2048;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Trains with Adam on pixel rows; features [R,D], labels [R].
PixelClassifier train_pixel_classifier(const Tensor& features, const IntTensor& labels,
                                       int num_classes, const PixelClassifierConfig& config = {});

/// Class logits [R, C] for feature rows.
Tensor classifier_logits(const PixelClassifier& clf, const Tensor& features);

/// Argmax prediction reshaped to [H, W]; features must hold H*W rows.
IntTensor predict(const PixelClassifier& clf, const Tensor& features, std::int64_t height,
                  std::int64_t width);

}  // namespace ptdr
