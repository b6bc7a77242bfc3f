#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fd_check.hpp"
#include "ptdr/segdata.hpp"
#include "ptdr/train.hpp"
#include "ptdr/unet.hpp"

using namespace ptdr;
namespace fs = std::filesystem;
using DTensor = TensorT<double>;

namespace {

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

std::map<std::string, Tensor> single_param(float value) {
  std::map<std::string, Tensor> params;
  params.emplace("p", Tensor::full({1}, value).set_param());
  return params;
}

void give_grad(std::map<std::string, Tensor>& params, const std::string& name, float g) {
  Tensor& p = params.at(name);
  Tensor w = Tensor::full(p.shape(), g);
  Tape tape;
  backward(sum(mul(p, w)));
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<float> flatten_params(const UnetModel& m) {
  std::vector<float> out;
  for (const auto& [name, p] : m.params)
    out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("adam leaves parameters alone under zero gradient") {
  auto params = single_param(1.25f);
  give_grad(params, "p", 0.0f);
  OptimState state;
  state.hyper.weight_decay = 0.0;
  adam_step(params, {"p"}, state, 1e-3);
  CHECK(params.at("p").data()[0] == 1.25f);
}

TEST_CASE("first adam step moves by the learning rate") {
  auto params = single_param(1.0f);
  give_grad(params, "p", 1.0f);
  OptimState state;
  state.hyper.weight_decay = 0.0;
  const double lr = 0.01;
  adam_step(params, {"p"}, state, lr);
  const double delta = 1.0 - params.at("p").data()[0];
  CHECK(std::fabs(delta - lr) < 1e-6);
}

TEST_CASE("second-moment damping shrinks the step after a sign flip") {
  auto params = single_param(0.0f);
  OptimState state;
  state.hyper.weight_decay = 0.0;

  give_grad(params, "p", 1.0f);
  adam_step(params, {"p"}, state, 0.01);
  const float after1 = params.at("p").data()[0];
  const float update1 = std::fabs(after1 - 0.0f);

  params.at("p").zero_grad();
  give_grad(params, "p", -1.0f);
  adam_step(params, {"p"}, state, 0.01);
  const float update2 = std::fabs(params.at("p").data()[0] - after1);
  CHECK(update2 < update1);
}

TEST_CASE("vanishing learning rate changes parameters only through decay") {
  auto params = single_param(2.0f);
  give_grad(params, "p", 0.7f);
  OptimState state;
  state.hyper.weight_decay = 0.0;
  adam_step(params, {"p"}, state, 1e-12);
  CHECK(std::fabs(params.at("p").data()[0] - 2.0f) / 2.0f < 1e-8);
}

TEST_CASE("adam flags non-finite gradients in checked mode") {
  auto params = single_param(1.0f);
  give_grad(params, "p", std::numeric_limits<float>::infinity());
  OptimState state;
  set_checked_mode(true);
  CHECK_THROWS_AS(adam_step(params, {"p"}, state, 1e-3), NumericError);
  set_checked_mode(false);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 3e-4) == doctest::Approx(3e-4));
  CHECK(cosine_lr(100, 100, 3e-4) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 3e-4) == doctest::Approx(1.5e-4));
  CHECK_THROWS_AS(cosine_lr(-1, 100, 1.0), ContractError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1.0), ContractError);
}

TEST_CASE("cross entropy of uniform logits is log C") {
  Tensor logits = Tensor::zeros({1, 6, 4, 4});
  IntTensor mask = IntTensor::zeros({1, 4, 4});
  Rng rng(4);
  for (auto& v : mask.data) v = static_cast<std::int32_t>(rng.uniform_int(6));
  Tensor loss = cross_entropy(logits, mask);
  CHECK(loss.item() == doctest::Approx(std::log(6.0)).epsilon(1e-4));
}

TEST_CASE("cross entropy of confident correct logits vanishes") {
  Rng rng(5);
  IntTensor mask = IntTensor::zeros({1, 3, 3});
  for (auto& v : mask.data) v = static_cast<std::int32_t>(rng.uniform_int(4));
  Tensor logits = Tensor::zeros({1, 4, 3, 3});
  float* p = logits.mutable_data().data();
  for (std::int64_t y = 0; y < 3; ++y)
    for (std::int64_t x = 0; x < 3; ++x) {
      const std::int32_t cls = mask.data[static_cast<std::size_t>(y * 3 + x)];
      p[(cls * 3 + y) * 3 + x] = 20.0f;
    }
  CHECK(cross_entropy(logits, mask).item() < 1e-6f);
}

TEST_CASE("cross entropy rejects class overflow") {
  Tensor logits = Tensor::zeros({1, 3, 2, 2});
  IntTensor mask = IntTensor::zeros({1, 2, 2});
  mask.data[0] = 3;
  CHECK_THROWS_AS(cross_entropy(logits, mask), ContractError);
}

TEST_CASE("fd: cross entropy gradient") {
  Rng rng(6);
  DTensor logits = DTensor::randn({1, 3, 2, 2}, rng);
  IntTensor mask = IntTensor::zeros({1, 2, 2});
  for (auto& v : mask.data) v = static_cast<std::int32_t>(rng.uniform_int(3));
  std::vector<DTensor> params{logits};
  CHECK(fd::max_rel_err(params, [&] { return cross_entropy(logits, mask); }) < 1e-4);
}

TEST_CASE("train config json round trip and validation") {
  TrainConfig c;
  c.pretrain_iters = 123;
  c.seed = 99;
  c.checkpoint_iters = {10, 50};
  TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.pretrain_iters == 123);
  CHECK(back.seed == 99);
  CHECK(back.checkpoint_iters == std::vector<int>{10, 50});
  CHECK_THROWS_AS(TrainConfig::from_json("{\"finetune_timestep\": 0}"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json("not json"), FormatError);
}

TEST_CASE("pretraining learns a constant image and resumes bit-exactly") {
  TempDir dir("ptdr_train_pretrain");
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.pretrain_iters = 2000;
  cfg.T = 50;
  cfg.lr = 3e-4;
  cfg.weight_decay = 0.0;
  cfg.seed = 11;
  cfg.checkpoint_iters = {1000, 2000};

  std::vector<SegSample> pool(1);
  pool[0].image = Tensor::full({1, 16, 16}, 0.3f);
  pool[0].id = "const";

  Rng mrng(1);
  UnetModel model = build_unet<float>(tiny16(), mrng);
  PretrainResult res = pretrain(cfg, pool, model, dir.path.string());
  REQUIRE(res.checkpoint_paths.size() == 2);
  CHECK(fs::exists(dir.path / "schedule.csv"));

  // parse the loss log
  std::ifstream log(dir.path / "pretrain_log.csv");
  std::string line;
  std::getline(log, line);
  REQUIRE(line == "iter,loss,lr");
  std::vector<float> losses;
  while (std::getline(log, line)) {
    int iter;
    float loss, lr;
    REQUIRE(std::sscanf(line.c_str(), "%d,%g,%g", &iter, &loss, &lr) == 3);
    losses.push_back(loss);
  }
  REQUIRE(losses.size() == 2000);

  auto window_mean = [&](std::size_t end) {  // mean of (end-100, end]
    double total = 0.0;
    for (std::size_t i = end - 100; i < end; ++i) total += losses[i];
    return total / 100.0;
  };
  CHECK(window_mean(2000) < window_mean(100));
  CHECK(window_mean(2000) < 0.9);

  // smoothed curve never rises above its iteration-100 level by more than
  // the 10% band (per-step losses mix timesteps, so adjacent windows are
  // far noisier than the overall trend)
  for (std::size_t end = 200; end <= 2000; end += 100)
    CHECK(window_mean(end) < window_mean(100) * 1.10);

  // resume from the midpoint checkpoint and land on identical parameters
  UnetModel resumed;
  resume_pretrain(cfg, pool, dir.path.string(), 1000, resumed);
  const auto a = flatten_params(model);
  const auto b = flatten_params(resumed);
  REQUIRE(a.size() == b.size());
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) ++mismatches;
  CHECK(mismatches == 0);
}

TEST_CASE("pretraining is deterministic end to end") {
  TempDir d1("ptdr_train_det1"), d2("ptdr_train_det2");
  TrainConfig cfg;
  cfg.pretrain_iters = 30;
  cfg.T = 50;
  cfg.seed = 7;
  cfg.checkpoint_iters = {30};
  auto pool = generate_synthetic(8, 16, 6, 3);
  std::vector<SegSample> pool_v(pool.begin(), pool.end());

  Rng r1(5), r2(5);
  UnetModel m1 = build_unet<float>(tiny16(), r1);
  UnetModel m2 = build_unet<float>(tiny16(), r2);
  pretrain(cfg, pool_v, m1, d1.path.string());
  pretrain(cfg, pool_v, m2, d2.path.string());
  CHECK(flatten_params(m1) == flatten_params(m2));

  // emitted checkpoints byte-identical
  std::ifstream f1(d1.path / "ckpt_30.bin", std::ios::binary);
  std::ifstream f2(d2.path / "ckpt_30.bin", std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
}

TEST_CASE("pretrain rejects bad inputs") {
  TrainConfig cfg;
  cfg.T = 50;
  Rng rng(1);
  UnetModel model = build_unet<float>(tiny16(), rng);
  std::vector<SegSample> empty;
  TempDir dir("ptdr_train_bad");
  CHECK_THROWS_AS(pretrain(cfg, empty, model, dir.path.string()), ConfigError);
  set_head(model, HeadMode::segmentation);
  auto pool = generate_synthetic(2, 16, 6, 3);
  CHECK_THROWS_AS(pretrain(cfg, pool, model, dir.path.string()), ModeError);
}

TEST_CASE("finetune respects the best-validation selection rule") {
  TrainConfig cfg;
  cfg.finetune_epochs = 3;
  cfg.T = 50;
  cfg.lr = 3e-4;
  cfg.seed = 21;
  auto labeled = generate_synthetic(6, 16, 6, 77);
  std::vector<SegSample> train_set(labeled.begin(), labeled.begin() + 4);
  std::vector<SegSample> val_set(labeled.begin() + 4, labeled.end());

  Rng rng(2);
  UnetModel model = build_unet<float>(tiny16(), rng);
  FinetuneResult res = finetune(cfg, std::move(model), train_set, val_set);
  REQUIRE(res.val_curve.size() == 3);
  CHECK(res.best_val_miou >= res.final_val_miou);
  CHECK(res.best_val_miou == *std::max_element(res.val_curve.begin(), res.val_curve.end()));
  // returned parameters are in segmentation mode with a usable head
  CHECK(res.model.head_mode == HeadMode::segmentation);
  CHECK(res.model.has_seg_head());
}

TEST_CASE("finetune with zero learning rate leaves the trunk unchanged") {
  TrainConfig cfg;
  cfg.finetune_epochs = 1;
  cfg.T = 50;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  auto labeled = generate_synthetic(3, 16, 6, 78);
  std::vector<SegSample> train_set(labeled.begin(), labeled.begin() + 2);
  std::vector<SegSample> val_set(labeled.begin() + 2, labeled.end());

  Rng rng(3);
  UnetModel model = build_unet<float>(tiny16(), rng);
  const std::uint64_t before = trunk_checksum(model);
  FinetuneResult res = finetune(cfg, std::move(model), train_set, val_set);
  CHECK(trunk_checksum(res.model) == before);
}

TEST_CASE("finetune requires a non-empty training set") {
  TrainConfig cfg;
  cfg.T = 50;
  Rng rng(4);
  UnetModel model = build_unet<float>(tiny16(), rng);
  auto labeled = generate_synthetic(2, 16, 6, 79);
  std::vector<SegSample> empty;
  std::vector<SegSample> val_set(labeled.begin(), labeled.end());
  CHECK_THROWS_AS(finetune(cfg, std::move(model), empty, val_set), ConfigError);
}

TEST_CASE("optimizer state round trip") {
  OptimState state;
  state.step = 42;
  Rng rng(9);
  state.m.emplace("a", Tensor::randn({3, 2}, rng));
  state.v.emplace("a", Tensor::randn({3, 2}, rng));
  const std::string path = "optim_state_test.bin";
  save_optim_state(state, path);
  OptimState back = load_optim_state(path);
  CHECK(back.step == 42);
  REQUIRE(back.m.contains("a"));
  for (std::int64_t i = 0; i < 6; ++i) {
    CHECK(back.m.at("a").data()[i] == state.m.at("a").data()[i]);
    CHECK(back.v.at("a").data()[i] == state.v.at("a").data()[i]);
  }
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_optim_state("missing.opt"), FormatError);
}

}  // TEST_SUITE
