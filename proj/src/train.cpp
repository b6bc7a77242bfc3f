#include "ptdr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "ptdr/errors.hpp"
#include "ptdr/metrics.hpp"

namespace fs = std::filesystem;

namespace ptdr {

void adam_step(std::map<std::string, Tensor>& params, const std::vector<std::string>& names,
               OptimState& state, double lr) {
  ++state.step;
  const double b1 = state.hyper.beta1, b2 = state.hyper.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const std::string& name : names) {
    auto pit = params.find(name);
    if (pit == params.end()) throw ContractError("adam: unknown parameter " + name);
    Tensor& p = pit->second;
    if (!p.has_grad()) continue;  // parameter untouched by this loss
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor::zeros(p.shape())).first;
      state.v.emplace(name, Tensor::zeros(p.shape()));
    }
    Tensor& m = mit->second;
    Tensor& v = state.v.at(name);
    if (m.shape() != p.shape())
      throw ContractError("adam: moment shape mismatch for " + name);

    auto g = p.grad();
    auto pm = m.mutable_data();
    auto pv = v.mutable_data();
    auto pp = p.mutable_data();
    const float wd_scale = static_cast<float>(lr * state.hyper.weight_decay);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float gi = g[i];
      if (checked_mode() && !std::isfinite(gi))
        throw NumericError("adam: non-finite gradient in " + name);
      pm[i] = static_cast<float>(b1) * pm[i] + static_cast<float>(1.0 - b1) * gi;
      pv[i] = static_cast<float>(b2) * pv[i] + static_cast<float>(1.0 - b2) * gi * gi;
      const double mhat = pm[i] / bias1;
      const double vhat = pv[i] / bias2;
      pp[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + state.hyper.eps));
      pp[i] -= wd_scale * pp[i];
    }
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (step < 0 || step > total_steps)
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + "]");
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const IntTensor& mask) {
  if (logits.rank() != 4) throw DimensionError("cross_entropy: logits must be [N,C,H,W]");
  return nll_mean(log_softmax(logits, 1), mask);
}

template TensorT<float> cross_entropy<float>(const TensorT<float>&, const IntTensor&);
template TensorT<double> cross_entropy<double>(const TensorT<double>&, const IntTensor&);

void TrainConfig::validate() const {
  if (batch_size < 1 || pretrain_iters < 0 || finetune_epochs < 1 || lr < 0.0 ||
      weight_decay < 0.0 || T < 1)
    throw ConfigError("train config: all sizes must be positive");
  if (finetune_timestep < 1 || finetune_timestep > T)
    throw ConfigError("train config: finetune_timestep outside [1, T]");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["batch_size"] = batch_size;
  j["pretrain_iters"] = pretrain_iters;
  j["finetune_epochs"] = finetune_epochs;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["T"] = T;
  j["finetune_timestep"] = finetune_timestep;
  j["seed"] = seed;
  j["checkpoint_iters"] = checkpoint_iters;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("train config: invalid JSON");
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.pretrain_iters = j.value("pretrain_iters", c.pretrain_iters);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.T = j.value("T", c.T);
    c.finetune_timestep = j.value("finetune_timestep", c.finetune_timestep);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_iters = j.value("checkpoint_iters", c.checkpoint_iters);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("train config: ") + ex.what());
  }
  c.validate();
  return c;
}

namespace {

std::vector<std::string> trainable_names(const UnetModel& model) {
  const std::string inactive =
      model.head_mode == HeadMode::noise ? "head.seg." : "head.noise.";
  std::vector<std::string> names;
  for (const auto& [name, p] : model.params)
    if (!name.starts_with(inactive)) names.push_back(name);
  return names;
}

void zero_grads(UnetModel& model, const std::vector<std::string>& names) {
  for (const auto& name : names) model.params.at(name).zero_grad();
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
  const Shape& s0 = images.front()->shape();
  Tensor batch = Tensor::zeros({static_cast<std::int64_t>(images.size()), s0[0], s0[1], s0[2]});
  float* dst = batch.mutable_data().data();
  const std::int64_t stride = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s0) throw DimensionError("batch: image shapes differ");
    std::memcpy(dst + static_cast<std::int64_t>(i) * stride, images[i]->data().data(),
                static_cast<std::size_t>(stride) * sizeof(float));
  }
  return batch;
}

IntTensor stack_masks(const std::vector<const IntTensor*>& masks) {
  const Shape& s0 = masks.front()->shape;
  IntTensor batch = IntTensor::zeros({static_cast<std::int64_t>(masks.size()), s0[0], s0[1]});
  const std::size_t stride = masks.front()->data.size();
  for (std::size_t i = 0; i < masks.size(); ++i)
    std::copy(masks[i]->data.begin(), masks[i]->data.end(), batch.data.begin() + i * stride);
  return batch;
}

std::string ckpt_path(const std::string& dir, int iter) {
  return (fs::path(dir) / ("ckpt_" + std::to_string(iter) + ".bin")).string();
}
std::string opt_path(const std::string& dir, int iter) {
  return (fs::path(dir) / ("ckpt_" + std::to_string(iter) + ".opt")).string();
}

}  // namespace

PretrainResult pretrain(const TrainConfig& config, const std::vector<SegSample>& pool,
                        UnetModel& model, const std::string& out_dir, int start_iter,
                        OptimState* state_in) {
  config.validate();
  if (pool.empty()) throw ConfigError("pretrain: empty unlabeled pool");
  if (model.head_mode != HeadMode::noise)
    throw ModeError("pretrain: model must be in noise mode");
  fs::create_directories(out_dir);

  DiffusionSchedule sched = make_schedule(config.T);
  if (start_iter == 0) dump_schedule_csv(sched, (fs::path(out_dir) / "schedule.csv").string());

  OptimState local_state;
  OptimState& state = state_in ? *state_in : local_state;
  state.hyper.lr = config.lr;
  state.hyper.weight_decay = config.weight_decay;

  const std::vector<std::string> names = trainable_names(model);
  std::ofstream log((fs::path(out_dir) / "pretrain_log.csv").string(),
                    start_iter == 0 ? std::ios::trunc : std::ios::app);
  if (start_iter == 0) log << "iter,loss,lr\n";

  PretrainResult result;
  for (int iter = start_iter + 1; iter <= config.pretrain_iters; ++iter) {
    Rng step_rng(mix_seed(config.seed, static_cast<std::uint64_t>(iter)));
    std::vector<const Tensor*> images;
    for (int b = 0; b < config.batch_size; ++b)
      images.push_back(&pool[static_cast<std::size_t>(
                                 step_rng.uniform_int(static_cast<std::int64_t>(pool.size())))]
                            .image);
    Tensor batch = stack_images(images);
    const double lr = cosine_lr(iter - 1, config.pretrain_iters, config.lr);

    zero_grads(model, names);
    float loss_value;
    {
      Tape tape;
      Tensor loss = ddpm_loss(model, batch, sched, step_rng);
      loss_value = loss.item();
      backward(loss);
    }
    adam_step(model.params, names, state, lr);
    log << iter << ',' << loss_value << ',' << lr << '\n';
    result.final_loss = loss_value;

    if (std::find(config.checkpoint_iters.begin(), config.checkpoint_iters.end(), iter) !=
        config.checkpoint_iters.end()) {
      const std::string path = ckpt_path(out_dir, iter);
      save_checkpoint(model, path);
      save_optim_state(state, opt_path(out_dir, iter));
      result.checkpoint_paths.push_back(path);
    }
  }
  return result;
}

PretrainResult resume_pretrain(const TrainConfig& config, const std::vector<SegSample>& pool,
                               const std::string& out_dir, int from_iter, UnetModel& model) {
  model = load_checkpoint(ckpt_path(out_dir, from_iter));
  OptimState state = load_optim_state(opt_path(out_dir, from_iter));
  return pretrain(config, pool, model, out_dir, from_iter, &state);
}

ConfusionMatrix evaluate_confusion(const UnetModel& model, const std::vector<SegSample>& samples,
                                   int t) {
  if (samples.empty()) throw ConfigError("evaluate: no samples");
  ConfusionMatrix cm(model.config.num_classes);
  for (const SegSample& s : samples) {
    if (!s.has_mask()) throw ContractError("evaluate: sample " + s.id + " has no mask");
    Tensor x = reshape(s.image, {1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
    Tensor logits = segment_logits(model, x, t);
    IntTensor pred = argmax_channel(logits);
    IntTensor flat_pred(Shape{pred.shape[1], pred.shape[2]},
                        std::vector<std::int32_t>(pred.data.begin(), pred.data.end()));
    accumulate(cm, flat_pred, s.mask);
  }
  return cm;
}

double evaluate_miou(const UnetModel& model, const std::vector<SegSample>& samples, int t) {
  return miou(evaluate_confusion(model, samples, t));
}

FinetuneResult finetune(const TrainConfig& config, UnetModel model,
                        const std::vector<SegSample>& train_set,
                        const std::vector<SegSample>& val_set) {
  config.validate();
  if (train_set.empty()) throw ConfigError("finetune: empty training set");
  if (val_set.empty()) throw ConfigError("finetune: empty validation set");
  for (const auto& s : train_set)
    if (!s.has_mask()) throw ContractError("finetune: unlabeled sample in training set");

  set_head(model, HeadMode::segmentation);
  const std::vector<std::string> names = trainable_names(model);

  OptimState state;
  state.hyper.lr = config.lr;
  state.hyper.weight_decay = config.weight_decay;

  const std::int64_t steps_per_epoch =
      std::max<std::int64_t>(static_cast<std::int64_t>(train_set.size()), 16);
  const std::int64_t total_steps = steps_per_epoch * config.finetune_epochs;

  FinetuneResult result;
  result.best_val_miou = -1.0;

  std::int64_t global_step = 0;
  for (int epoch = 0; epoch < config.finetune_epochs; ++epoch) {
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      Rng step_rng(mix_seed(config.seed ^ 0xf17e, static_cast<std::uint64_t>(global_step) + 1));
      // batch: without replacement when the pool is large enough
      std::vector<std::size_t> idx;
      if (static_cast<int>(train_set.size()) >= config.batch_size) {
        while (static_cast<int>(idx.size()) < config.batch_size) {
          const std::size_t cand = static_cast<std::size_t>(
              step_rng.uniform_int(static_cast<std::int64_t>(train_set.size())));
          if (std::find(idx.begin(), idx.end(), cand) == idx.end()) idx.push_back(cand);
        }
      } else {
        for (int b = 0; b < config.batch_size; ++b)
          idx.push_back(static_cast<std::size_t>(
              step_rng.uniform_int(static_cast<std::int64_t>(train_set.size()))));
      }

      std::vector<SegSample> augmented;
      augmented.reserve(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) {
        Rng aug_rng = step_rng.split(b);
        augmented.push_back(random_affine(train_set[idx[b]], aug_rng));
      }
      std::vector<const Tensor*> images;
      std::vector<const IntTensor*> masks;
      for (const auto& s2 : augmented) {
        images.push_back(&s2.image);
        masks.push_back(&s2.mask);
      }
      Tensor batch = stack_images(images);
      IntTensor mask_batch = stack_masks(masks);

      const double lr = cosine_lr(global_step, total_steps, config.lr);
      zero_grads(model, names);
      {
        Tape tape;
        Tensor loss = cross_entropy(forward(model, batch, config.finetune_timestep), mask_batch);
        backward(loss);
      }
      adam_step(model.params, names, state, lr);
      ++global_step;
    }

    const double val = evaluate_miou(model, val_set, config.finetune_timestep);
    result.val_curve.push_back(val);
    result.final_val_miou = val;
    if (val > result.best_val_miou) {
      result.best_val_miou = val;
      result.model = model.clone();
    }
  }
  return result;
}

// ---- optimizer state io -----------------------------------------------------

namespace {

void put_u32o(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32o(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("optim state: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_tensor_map(std::ostream& out, const std::map<std::string, Tensor>& m) {
  put_u32o(out, static_cast<std::uint32_t>(m.size()));
  for (const auto& [name, t] : m) {
    put_u32o(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(static_cast<char>(t.rank()));
    for (std::int64_t d : t.shape()) put_u32o(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.data().size_bytes()));
  }
}

std::map<std::string, Tensor> read_tensor_map(std::istream& in) {
  std::map<std::string, Tensor> m;
  const std::uint32_t count = get_u32o(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32o(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("optim state: truncated name");
    const int rank = in.get();
    if (rank < 0 || rank > 8) throw FormatError("optim state: bad rank");
    Shape shape(static_cast<std::size_t>(rank));
    for (int r = 0; r < rank; ++r) shape[static_cast<std::size_t>(r)] = get_u32o(in);
    std::vector<float> values(static_cast<std::size_t>(numel(shape)));
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(float))))
      throw FormatError("optim state: truncated payload");
    m.emplace(name, Tensor::from_data(std::move(shape), std::move(values)));
  }
  return m;
}

}  // namespace

void save_optim_state(const OptimState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write("PTDO", 4);
  put_u32o(out, 1);
  put_u32o(out, static_cast<std::uint32_t>(state.step));
  write_tensor_map(out, state.m);
  write_tensor_map(out, state.v);
}

OptimState load_optim_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open optimizer state " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PTDO", 4) != 0)
    throw FormatError("optim state: bad magic");
  if (get_u32o(in) != 1) throw FormatError("optim state: unsupported version");
  OptimState state;
  state.step = get_u32o(in);
  state.m = read_tensor_map(in);
  state.v = read_tensor_map(in);
  return state;
}

}  // namespace ptdr
