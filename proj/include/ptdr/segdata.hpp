#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptdr/rng.hpp"
#include "ptdr/tensor.hpp"

namespace ptdr {

/// One image/mask pair. Images are [1,H,W] in [-1,1]; masks are [H,W] class
/// indices. An empty mask marks an unlabeled sample.
struct SegSample {
  Tensor image;
  IntTensor mask;
  std::string id;

  bool has_mask() const { return !mask.data.empty(); }
};

enum class Split { pretrain, train, val, test };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

/// A full dataset with per-sample split assignment and optional provenance
/// tag ("generated" for sampled data).
struct Dataset {
  int num_classes = 6;
  std::vector<SegSample> samples;
  std::vector<Split> splits;
  std::vector<std::string> provenance;

  std::vector<std::size_t> indices_of(Split split) const;
  std::vector<std::string> ids_of(Split split) const;
};

enum class SyntheticKind { bitewing, lunglike };

/// Procedural samples with exact labels: the mask is rasterized from the
/// same geometry that shades the image.
///
/// bitewing: nested tooth blobs (enamel ring / dentine body / pulp core),
/// a textured bone band, sparse bright artifacts, six classes total.
/// lunglike: a body ellipse with two dark lobes and internal opacities,
/// four classes total.
std::vector<SegSample> generate_synthetic(int n, int size, int num_classes, std::uint64_t seed,
                                          SyntheticKind kind = SyntheticKind::bitewing);

/// Pretraining pool plus a labeled set with a deterministic train/val/test
/// split (10/5/85 at the default 100 labeled samples). Ids of the pool and
/// of the labeled set never intersect.
Dataset make_synthetic_dataset(int n_total, int size, SyntheticKind kind, std::uint64_t seed);

struct AffineParams {
  double rotate_deg = 0.0;
  double shear_deg = 0.0;
  double scale = 1.0;
  double translate_x = 0.0;  // fraction of width
  double translate_y = 0.0;  // fraction of height
};

/// Applies one affine transform to image (bilinear, fill -1) and mask
/// (nearest, fill background 0) with the same matrix.
SegSample affine_apply(const SegSample& s, const AffineParams& params);

/// Random affine augmentation: rotation U[-180,180] deg, shear U[-5,5] deg,
/// scale U[0.9,1.1], translation U[-0.05,0.05] of the image size per axis.
SegSample random_affine(const SegSample& s, Rng& rng);

/// Maps 8-bit-range values [0,255] to [-1,1] (x/127.5 - 1).
Tensor normalize_u8(const Tensor& raw);

/// Quantizes a [-1,1] image back to 8-bit for storage.
std::vector<std::uint8_t> quantize_u8(const Tensor& image);

/// Binary PGM (P5, maxval 255).
void write_pgm(const std::string& path, std::int64_t width, std::int64_t height,
               const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_pgm(const std::string& path, std::int64_t& width,
                                   std::int64_t& height);

/// Directory layout: images/<id>.pgm, masks/<id>.pgm, and an index.json
/// manifest {"num_classes": N, "samples": [{"id","image","mask","split"}]}.
/// Loading after saving reproduces masks exactly and images up to the 8-bit
/// quantization applied on save.
void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

}  // namespace ptdr
