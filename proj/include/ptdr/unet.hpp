#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ptdr/diffusion.hpp"
#include "ptdr/rng.hpp"
#include "ptdr/tensor.hpp"

namespace ptdr {

enum class HeadMode : std::uint8_t { noise = 0, segmentation = 1 };

/// Topology description for the timestep-conditioned Unet. Defaults are the
/// desk-scale setup: 32x32 inputs, three resolution levels, attention at the
/// lowest (8x8) level.
struct UnetConfig {
  int in_channels = 1;
  int base_width = 32;
  std::vector<int> channel_mults = {1, 2, 4};
  int num_res_blocks = 2;
  std::vector<int> attention_levels = {2};
  int time_embed_dim = 128;  // 4 * base_width
  int out_channels_noise = 1;
  int num_classes = 6;

  int levels() const { return static_cast<int>(channel_mults.size()); }
  int width(int level) const { return base_width * channel_mults[static_cast<std::size_t>(level)]; }
  bool attention_at(int level) const;
  /// Input spatial size must be divisible by this.
  int downsample_factor() const { return 1 << (levels() - 1); }

  std::string to_json() const;
  static UnetConfig from_json(const std::string& text);
  bool operator==(const UnetConfig&) const = default;
};

/// Unet parameters plus the active output head. The trunk is shared verbatim
/// between the noise-prediction and segmentation heads; switching heads never
/// rewrites trunk tensors.
template <typename S>
struct UnetModelT {
  UnetConfig config;
  HeadMode head_mode = HeadMode::noise;
  std::map<std::string, TensorT<S>> params;

  bool has_seg_head() const { return params.contains("head.seg.weight"); }
  /// Deep copy (parameter buffers are cloned, not shared).
  UnetModelT clone() const;
};

using UnetModel = UnetModelT<float>;

/// Sinusoidal embedding [sin(t w_k), cos(t w_k)] with w_k = 10000^(-2k/dim),
/// k = 0..dim/2-1.
template <typename S>
TensorT<S> timestep_embedding(int t, int dim, int T);

/// Fresh model in noise mode. The noise head is randomly initialized; the
/// segmentation head is created zero-initialized on the first switch.
template <typename S>
UnetModelT<S> build_unet(const UnetConfig& config, Rng& rng);

/// Runs the network. Noise mode returns [N, out_channels_noise, H, W];
/// segmentation mode returns class logits [N, num_classes, H, W].
template <typename S>
TensorT<S> forward(const UnetModelT<S>& model, const TensorT<S>& x, int t);

/// Valid activation capture points: "mid", "enc<l>" (after the level's
/// blocks), "dec<l>" (after the level's blocks, before upsampling).
std::vector<std::string> capture_block_ids(const UnetConfig& config);

/// Like forward(), additionally filling `captured` with the activation of
/// each requested block id, in the order requested. Unknown ids raise
/// ConfigError.
template <typename S>
TensorT<S> forward_with_captures(const UnetModelT<S>& model, const TensorT<S>& x, int t,
                                 const std::vector<std::string>& block_ids,
                                 std::vector<TensorT<S>>& captured);

/// Switches the active head. The segmentation head is zero-initialized the
/// first time only; the trunk is preserved bit-exactly.
template <typename S>
void set_head(UnetModelT<S>& model, HeadMode mode);

/// FNV-1a over every non-head parameter (names and payload bytes).
template <typename S>
std::uint64_t trunk_checksum(const UnetModelT<S>& model);

/// Adapter for the diffusion operations. Throws ModeError when the model is
/// not in noise mode. The model reference must outlive the returned functor.
template <typename S>
NoiseFn<S> noise_predictor(const UnetModelT<S>& model);

/// Denoising objective through the model (noise mode only).
template <typename S>
TensorT<S> ddpm_loss(const UnetModelT<S>& model, const TensorT<S>& x0,
                     const DiffusionSchedule& sched, Rng& rng);

/// Class logits for one batch (segmentation mode only).
template <typename S>
TensorT<S> segment_logits(const UnetModelT<S>& model, const TensorT<S>& x, int t);

// Checkpoint container, bit-exact:
//   magic "PTDR", version u32=1, head_mode u8,
//   config JSON (u32 byte length + UTF-8),
//   tensor count u32, then per tensor (sorted by name):
//   name (u16 length + UTF-8), dtype u8 (0 = f32), rank u8,
//   dims (u32 each), little-endian row-major f32 payload.
void save_checkpoint(const UnetModel& model, const std::string& path);
UnetModel load_checkpoint(const std::string& path);

}  // namespace ptdr
