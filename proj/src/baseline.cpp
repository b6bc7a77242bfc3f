#include "ptdr/baseline.hpp"

#include <algorithm>
#include <cmath>

#include "ptdr/errors.hpp"
#include "ptdr/train.hpp"

namespace ptdr {

FeatureSpec FeatureSpec::defaults(const UnetConfig& config, int T) {
  FeatureSpec spec;
  // noise levels 5%, 15%, 25% of the schedule (the reference method's
  // {50,150,250} of T=1000, rescaled)
  spec.timesteps = {std::max(1, T / 20), std::max(1, 3 * T / 20), std::max(1, T / 4)};
  spec.blocks.push_back("mid");
  const int L = config.levels();
  spec.blocks.push_back("dec" + std::to_string(L - 1));
  if (L >= 2) spec.blocks.push_back("dec" + std::to_string(L - 2));
  return spec;
}

std::int64_t feature_width(const FeatureSpec& spec, const UnetConfig& config) {
  std::int64_t per_pass = 0;
  for (const auto& id : spec.blocks) {
    if (id == "mid") {
      per_pass += config.width(config.levels() - 1);
    } else if (id.starts_with("dec") || id.starts_with("enc")) {
      const int level = std::stoi(id.substr(3));
      per_pass += config.width(level);
    } else {
      throw ConfigError("unknown activation block '" + id + "'");
    }
  }
  return per_pass * static_cast<std::int64_t>(spec.timesteps.size());
}

Tensor extract_features(const UnetModel& frozen, const Tensor& image, const FeatureSpec& spec,
                        const DiffusionSchedule& sched, Rng& rng) {
  if (frozen.head_mode != HeadMode::noise)
    throw ModeError("feature extraction requires the noise head");
  if (spec.timesteps.empty() || spec.blocks.empty())
    throw ConfigError("feature spec needs at least one timestep and one block");
  if (image.rank() != 3) throw DimensionError("extract_features: image must be [C,H,W]");

  const std::int64_t H = spec.target_h, W = spec.target_w;
  const std::int64_t rows = H * W;
  const std::int64_t D = feature_width(spec, frozen.config);
  Tensor features = Tensor::zeros({rows, D});
  float* out = features.mutable_data().data();

  Tensor x = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  std::int64_t col = 0;
  for (int t : spec.timesteps) {
    Tensor eps = Tensor::randn(x.shape(), rng);
    Tensor xt = q_sample(x, t, eps, sched);
    std::vector<Tensor> captured;
    forward_with_captures(frozen, xt, t, spec.blocks, captured);
    for (const Tensor& act : captured) {
      Tensor up = act;
      while (up.dim(2) < H && up.dim(3) < W) up = nearest_upsample2x(up);
      if (up.dim(2) != H || up.dim(3) != W)
        throw ConfigError("activation cannot be upsampled to the target resolution");
      const std::int64_t C = up.dim(1);
      const float* src = up.data().data();
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t p = 0; p < rows; ++p) out[p * D + col + c] = src[c * rows + p];
      col += C;
    }
  }
  return features;
}

namespace {

Tensor mlp_logits(const PixelClassifier& clf, const Tensor& rows) {
  Tensor h = rows;
  for (std::size_t layer = 0; layer < clf.hidden_dims.size(); ++layer) {
    const std::string p = "l" + std::to_string(layer);
    h = silu(linear(h, clf.params.at(p + ".weight"), clf.params.at(p + ".bias")));
  }
  return linear(h, clf.params.at("out.weight"), clf.params.at("out.bias"));
}

Tensor standardize(const PixelClassifier& clf, const Tensor& features) {
  const std::int64_t R = features.dim(0), D = features.dim(1);
  Tensor out = Tensor::zeros(features.shape());
  const float* src = features.data().data();
  const float* mean = clf.feat_mean.data().data();
  const float* scale = clf.feat_scale.data().data();
  float* dst = out.mutable_data().data();
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t d = 0; d < D; ++d) dst[r * D + d] = (src[r * D + d] - mean[d]) * scale[d];
  return out;
}

}  // namespace

PixelClassifier train_pixel_classifier(const Tensor& features, const IntTensor& labels,
                                       int num_classes, const PixelClassifierConfig& config) {
  if (features.rank() != 2) throw DimensionError("classifier: features must be [R,D]");
  const std::int64_t R = features.dim(0), D = features.dim(1);
  if (labels.shape.size() != 1 || labels.shape[0] != R)
    throw ContractError("classifier: " + std::to_string(labels.data.size()) + " labels for " +
                        std::to_string(R) + " feature rows");
  for (std::int32_t v : labels.data)
    if (v < 0 || v >= num_classes)
      throw ContractError("classifier: label outside [0, " + std::to_string(num_classes) + ")");

  PixelClassifier clf;
  clf.in_dim = static_cast<int>(D);
  clf.num_classes = num_classes;
  clf.hidden_dims = config.hidden_dims;

  // per-dimension standardization from the training rows
  clf.feat_mean = Tensor::zeros({D});
  clf.feat_scale = Tensor::zeros({D});
  {
    float* mean = clf.feat_mean.mutable_data().data();
    float* scale = clf.feat_scale.mutable_data().data();
    const float* src = features.data().data();
    for (std::int64_t d = 0; d < D; ++d) {
      double m = 0.0;
      for (std::int64_t r = 0; r < R; ++r) m += src[r * D + d];
      m /= static_cast<double>(R);
      double var = 0.0;
      for (std::int64_t r = 0; r < R; ++r) {
        const double dv = src[r * D + d] - m;
        var += dv * dv;
      }
      var /= static_cast<double>(R);
      mean[d] = static_cast<float>(m);
      scale[d] = static_cast<float>(1.0 / std::sqrt(var + 1e-6));
    }
  }

  Rng init_rng(mix_seed(config.seed, 0x11f));
  int fan_in = clf.in_dim;
  for (std::size_t layer = 0; layer < clf.hidden_dims.size(); ++layer) {
    const int width = clf.hidden_dims[layer];
    const float bound = static_cast<float>(1.0 / std::sqrt(fan_in));
    const std::string p = "l" + std::to_string(layer);
    clf.params.emplace(p + ".weight",
                       Tensor::uniform({width, fan_in}, -bound, bound, init_rng).set_param());
    clf.params.emplace(p + ".bias", Tensor::uniform({width}, -bound, bound, init_rng).set_param());
    fan_in = width;
  }
  const float bound = static_cast<float>(1.0 / std::sqrt(fan_in));
  clf.params.emplace("out.weight",
                     Tensor::uniform({num_classes, fan_in}, -bound, bound, init_rng).set_param());
  clf.params.emplace("out.bias",
                     Tensor::uniform({num_classes}, -bound, bound, init_rng).set_param());

  std::vector<std::string> names;
  for (const auto& [name, p] : clf.params) names.push_back(name);

  Tensor rows = standardize(clf, features);
  OptimState state;
  state.hyper.lr = config.lr;

  const std::int64_t batch = std::min<std::int64_t>(config.batch_rows, R);
  const std::int64_t steps_per_epoch = (R + batch - 1) / batch;
  const std::int64_t total_steps = steps_per_epoch * config.epochs;
  std::int64_t global_step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // deterministic shuffle per epoch
    Rng shuffle_rng(mix_seed(config.seed, 0x5000 + static_cast<std::uint64_t>(epoch)));
    std::vector<std::int64_t> order(static_cast<std::size_t>(R));
    for (std::int64_t i = 0; i < R; ++i) order[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = R - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(i + 1))]);

    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::int64_t lo = s * batch;
      const std::int64_t hi = std::min(R, lo + batch);
      const std::int64_t n = hi - lo;
      Tensor xb = Tensor::zeros({n, D});
      IntTensor yb = IntTensor::zeros({n, 1, 1});
      float* xd = xb.mutable_data().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t r = order[static_cast<std::size_t>(lo + i)];
        std::copy_n(rows.data().data() + r * D, D, xd + i * D);
        yb.data[static_cast<std::size_t>(i)] = labels.data[static_cast<std::size_t>(r)];
      }
      const double lr = cosine_lr(global_step, total_steps, config.lr);
      for (const auto& name : names) clf.params.at(name).zero_grad();
      {
        Tape tape;
        Tensor logits = mlp_logits(clf, xb);
        Tensor shaped = reshape(logits, {n, static_cast<std::int64_t>(num_classes), 1, 1});
        backward(cross_entropy(shaped, yb));
      }
      adam_step(clf.params, names, state, lr);
      ++global_step;
    }
  }
  return clf;
}

Tensor classifier_logits(const PixelClassifier& clf, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != clf.in_dim)
    throw DimensionError("classifier: feature width mismatch");
  return mlp_logits(clf, standardize(clf, features));
}

IntTensor predict(const PixelClassifier& clf, const Tensor& features, std::int64_t height,
                  std::int64_t width) {
  if (features.dim(0) != height * width)
    throw ContractError("predict: row count does not match the target resolution");
  Tensor logits = classifier_logits(clf, features);
  const std::int64_t R = logits.dim(0), C = logits.dim(1);
  IntTensor mask = IntTensor::zeros({height, width});
  const float* p = logits.data().data();
  for (std::int64_t r = 0; r < R; ++r) {
    float best = p[r * C];
    std::int32_t arg = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (p[r * C + c] > best) {
        best = p[r * C + c];
        arg = static_cast<std::int32_t>(c);
      }
    mask.data[static_cast<std::size_t>(r)] = arg;
  }
  return mask;
}

}  // namespace ptdr
