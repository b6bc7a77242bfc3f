#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ptdr/diffusion.hpp"
#include "ptdr/metrics.hpp"
#include "ptdr/segdata.hpp"
#include "ptdr/tensor.hpp"
#include "ptdr/unet.hpp"

namespace ptdr {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// First/second moment estimates per parameter, keyed by parameter name.
struct OptimState {
  AdamConfig hyper;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::int64_t step = 0;
};

/// One AdamW update over the named parameters, reading gradients accumulated
/// by the latest backward pass. `lr` overrides hyper.lr for this step (the
/// cosine schedule feeds it). Decoupled weight decay: p -= lr * wd * p.
void adam_step(std::map<std::string, Tensor>& params, const std::vector<std::string>& names,
               OptimState& state, double lr);

/// base_lr * 0.5 * (1 + cos(pi * step / total)).
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr);

/// Mean pixel cross-entropy between class logits [N,C,H,W] and an integer
/// mask [N,H,W].
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const IntTensor& mask);

struct TrainConfig {
  int batch_size = 2;
  int pretrain_iters = 5000;
  int finetune_epochs = 200;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int T = 100;
  int finetune_timestep = 1;
  std::uint64_t seed = 0;
  std::vector<int> checkpoint_iters = {250, 1000, 2500, 5000};

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct PretrainResult {
  std::vector<std::string> checkpoint_paths;
  float final_loss = 0.0f;
};

/// Denoising pre-training over the unlabeled pool. Emits model checkpoints
/// (plus optimizer state alongside, for resuming) at the configured
/// iterations under out_dir, a `schedule.csv` audit dump, and a
/// `pretrain_log.csv` loss curve with rows iter,loss,lr.
///
/// Every training step draws its randomness from a generator seeded by
/// (config.seed, iteration), so a resumed run walks the same stream as an
/// uninterrupted one.
PretrainResult pretrain(const TrainConfig& config, const std::vector<SegSample>& pool,
                        UnetModel& model, const std::string& out_dir, int start_iter = 0,
                        OptimState* state = nullptr);

/// Loads the checkpoint and optimizer state emitted at `from_iter` and
/// continues to config.pretrain_iters.
PretrainResult resume_pretrain(const TrainConfig& config, const std::vector<SegSample>& pool,
                               const std::string& out_dir, int from_iter, UnetModel& model);

struct FinetuneResult {
  UnetModel model;           // parameters with the best validation mIoU
  double best_val_miou = 0.0;
  double final_val_miou = 0.0;
  std::vector<double> val_curve;
};

/// Segmentation fine-tuning: switches to the segmentation head, then runs
/// `finetune_epochs` epochs of max(|train|, 16) augmented batches with Adam
/// and a cosine schedule, evaluating validation mIoU each epoch and keeping
/// the best parameters. The forward pass is conditioned on
/// config.finetune_timestep; images are not noised.
FinetuneResult finetune(const TrainConfig& config, UnetModel model,
                        const std::vector<SegSample>& train_set,
                        const std::vector<SegSample>& val_set);

/// Confusion counts of the model's argmax predictions over labeled samples
/// at timestep t.
ConfusionMatrix evaluate_confusion(const UnetModel& model, const std::vector<SegSample>& samples,
                                   int t);

/// Mean IoU of the model over labeled samples at timestep t.
double evaluate_miou(const UnetModel& model, const std::vector<SegSample>& samples, int t);

/// Optimizer state container for resumable training (magic "PTDO").
void save_optim_state(const OptimState& state, const std::string& path);
OptimState load_optim_state(const std::string& path);

}  // namespace ptdr
