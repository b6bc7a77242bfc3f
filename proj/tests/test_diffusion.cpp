#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "ptdr/diffusion.hpp"
#include "ptdr/tensor.hpp"

using namespace ptdr;
using DTensor = TensorT<double>;

namespace {

void check_schedule_invariants(const DiffusionSchedule& s) {
  double prev_bar = 1.0;
  double prev_snr = std::numeric_limits<double>::infinity();
  for (int t = 1; t <= s.T; ++t) {
    const double b = s.beta_at(t);
    CHECK(b > 0.0);
    CHECK(b < 1.0);
    CHECK(s.alpha_at(t) == doctest::Approx(1.0 - b).epsilon(1e-12));
    // abar[t] = abar[t-1] * alpha[t]
    CHECK(s.alpha_bar_at(t) == doctest::Approx(prev_bar * s.alpha_at(t)).epsilon(1e-6));
    CHECK(s.alpha_bar_at(t) < prev_bar);  // strictly decreasing
    // posterior variance per the fixed-variance reverse process
    if (t == 1) {
      CHECK(s.posterior_var_at(t) == 0.0);
    } else {
      const double expect = (1.0 - prev_bar) / (1.0 - s.alpha_bar_at(t)) * b;
      CHECK(s.posterior_var_at(t) == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK(s.posterior_var_at(t) <= b);
    const double snr = s.alpha_bar_at(t) / (1.0 - s.alpha_bar_at(t));
    CHECK(snr < prev_snr);
    prev_snr = snr;
    prev_bar = s.alpha_bar_at(t);
  }
}

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("single-step schedule") {
  DiffusionSchedule s = make_schedule(1, ScheduleKind::linear, 0.5, 0.5);
  CHECK(s.alpha_bar_at(1) == doctest::Approx(0.5));
  CHECK(s.posterior_var_at(1) == 0.0);
}

TEST_CASE("default schedule at T=4000 matches product oracle") {
  DiffusionSchedule s = make_schedule(4000);
  long double prod = 1.0L;
  for (int t = 1; t <= 4000; ++t) prod *= 1.0L - static_cast<long double>(s.beta_at(t));
  const double expect = static_cast<double>(prod);
  CHECK(std::fabs(s.alpha_bar_at(4000) - expect) / expect < 1e-6);
}

TEST_CASE("alpha_bar ratio identity at random steps") {
  DiffusionSchedule s = make_schedule(500);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const int t = static_cast<int>(rng.uniform_int(499)) + 2;
    CHECK(s.alpha_bar_at(t) / s.alpha_bar_at(t - 1) ==
          doctest::Approx(s.alpha_at(t)).epsilon(1e-9));
  }
}

TEST_CASE("schedule invariants across sizes and kinds") {
  check_schedule_invariants(make_schedule(1, ScheduleKind::linear, 0.5, 0.5));
  check_schedule_invariants(make_schedule(10, ScheduleKind::linear, 0.01, 0.3));
  check_schedule_invariants(make_schedule(100));
  check_schedule_invariants(make_schedule(4000));
  check_schedule_invariants(make_schedule(10, ScheduleKind::cosine));
  check_schedule_invariants(make_schedule(100, ScheduleKind::cosine));
  check_schedule_invariants(make_schedule(4000, ScheduleKind::cosine));
}

TEST_CASE("schedule rejects invalid configuration") {
  CHECK_THROWS_AS(make_schedule(0), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, ScheduleKind::linear, 0.0, 0.5), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, ScheduleKind::linear, 0.5, 0.2), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, ScheduleKind::linear, 0.1, 1.0), ConfigError);
  // defaults become invalid for very small T (beta_end scales past 1)
  CHECK_THROWS_AS(make_schedule(10), ConfigError);
}

TEST_CASE("schedule csv dump round-trips") {
  DiffusionSchedule s = make_schedule(25, ScheduleKind::linear, 0.01, 0.2);
  const std::string path = "schedule_test.csv";
  dump_schedule_csv(s, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header == "t,beta,alpha,alpha_bar,posterior_var");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    int t;
    double beta, alpha, abar, pv;
    REQUIRE(std::sscanf(line.c_str(), "%d,%lg,%lg,%lg,%lg", &t, &beta, &alpha, &abar, &pv) == 5);
    ++rows;
    CHECK(beta == doctest::Approx(s.beta_at(t)).epsilon(1e-15));
    CHECK(abar == doctest::Approx(s.alpha_bar_at(t)).epsilon(1e-15));
  }
  CHECK(rows == 25);
  std::remove(path.c_str());
}

TEST_CASE("q_sample with zero noise scales the image") {
  DiffusionSchedule s = make_schedule(100);
  Rng rng(9);
  Tensor x0 = Tensor::randn({1, 1, 4, 4}, rng);
  Tensor eps = Tensor::zeros({1, 1, 4, 4});
  const int t = 37;
  Tensor xt = q_sample(x0, t, eps, s);
  const float scalef = static_cast<float>(std::sqrt(s.alpha_bar_at(t)));
  for (std::int64_t i = 0; i < x0.size(); ++i)
    CHECK(xt.data()[i] == doctest::Approx(scalef * x0.data()[i]).epsilon(1e-6));
}

TEST_CASE("q_sample near the identity limit") {
  DiffusionSchedule s = make_schedule(10, ScheduleKind::linear, 1e-9, 1e-8);
  Rng rng(10);
  Tensor x0 = Tensor::randn({2, 2}, rng);
  Tensor eps = Tensor::randn({2, 2}, rng);
  Tensor xt = q_sample(x0, 10, eps, s);
  for (std::int64_t i = 0; i < x0.size(); ++i)
    CHECK(std::fabs(xt.data()[i] - x0.data()[i]) < 1e-3f);
}

TEST_CASE("q_sample errors") {
  DiffusionSchedule s = make_schedule(100);
  Tensor x0 = Tensor::zeros({2, 2});
  Tensor eps = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(q_sample(x0, 0, eps, s), IndexError);
  CHECK_THROWS_AS(q_sample(x0, 101, eps, s), IndexError);
  Tensor bad = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(q_sample(x0, 5, bad, s), DimensionError);
}

TEST_CASE("q_sample Monte-Carlo statistics match the closed form") {
  DiffusionSchedule s = make_schedule(100);
  const int t = 40;
  const int draws = 10000;
  Tensor x0 = Tensor::from_data({2, 2}, {0.8f, -0.5f, 0.1f, -1.0f});
  const double abar = s.alpha_bar_at(t);
  std::vector<double> sum1(4, 0.0), sum2(4, 0.0);
  Rng rng(123);
  for (int d = 0; d < draws; ++d) {
    Tensor eps = Tensor::randn({2, 2}, rng);
    Tensor xt = q_sample(x0, t, eps, s);
    for (int i = 0; i < 4; ++i) {
      sum1[i] += xt.data()[i];
      sum2[i] += static_cast<double>(xt.data()[i]) * xt.data()[i];
    }
  }
  const double var_expect = 1.0 - abar;
  const double se_mean = std::sqrt(var_expect / draws);
  const double se_var = var_expect * std::sqrt(2.0 / (draws - 1));
  for (int i = 0; i < 4; ++i) {
    const double m = sum1[i] / draws;
    const double v = sum2[i] / draws - m * m;
    CHECK(std::fabs(m - std::sqrt(abar) * x0.data()[i]) < 3.0 * se_mean);
    CHECK(std::fabs(v - var_expect) < 3.0 * se_var);
  }
}

TEST_CASE("iterated forward at t=1 equals the closed form for the same draw") {
  DiffusionSchedule s = make_schedule(100);
  Rng rng(77);
  Tensor x0 = Tensor::randn({3, 3}, rng);
  Rng ra(55), rb(55);
  Tensor it = iterated_forward(x0, 1, s, ra);
  Tensor eps = Tensor::randn({3, 3}, rb);
  Tensor cf = q_sample(x0, 1, eps, s);
  for (std::int64_t i = 0; i < x0.size(); ++i)
    CHECK(it.data()[i] == doctest::Approx(cf.data()[i]).epsilon(1e-6));
}

TEST_CASE("iterated forward matches closed-form statistics at t=50") {
  DiffusionSchedule s = make_schedule(100);
  const int t = 50;
  const int draws = 10000;
  Tensor x0 = Tensor::from_data({2, 2}, {0.6f, -0.2f, 0.9f, -0.7f});
  const double abar = s.alpha_bar_at(t);
  std::vector<double> sum1(4, 0.0), sum2(4, 0.0);
  Rng rng(321);
  for (int d = 0; d < draws; ++d) {
    Rng step_rng = rng.split(static_cast<std::uint64_t>(d));
    Tensor xt = iterated_forward(x0, t, s, step_rng);
    for (int i = 0; i < 4; ++i) {
      sum1[i] += xt.data()[i];
      sum2[i] += static_cast<double>(xt.data()[i]) * xt.data()[i];
    }
  }
  const double var_expect = 1.0 - abar;
  const double se_mean = std::sqrt(var_expect / draws);
  const double se_var = var_expect * std::sqrt(2.0 / (draws - 1));
  for (int i = 0; i < 4; ++i) {
    const double m = sum1[i] / draws;
    const double v = sum2[i] / draws - m * m;
    CHECK(std::fabs(m - std::sqrt(abar) * x0.data()[i]) < 3.0 * se_mean);
    CHECK(std::fabs(v - var_expect) < 3.0 * se_var);
  }
}

TEST_CASE("iterated forward variance from zero image") {
  DiffusionSchedule s = make_schedule(100);
  const int t = 25;
  const int draws = 10000;
  Tensor x0 = Tensor::zeros({2, 2});
  std::vector<double> sum2(4, 0.0);
  Rng rng(99);
  for (int d = 0; d < draws; ++d) {
    Rng step_rng = rng.split(static_cast<std::uint64_t>(d));
    Tensor xt = iterated_forward(x0, t, s, step_rng);
    for (int i = 0; i < 4; ++i) sum2[i] += static_cast<double>(xt.data()[i]) * xt.data()[i];
  }
  const double var_expect = 1.0 - s.alpha_bar_at(t);
  const double se_var = var_expect * std::sqrt(2.0 / (draws - 1));
  for (int i = 0; i < 4; ++i)
    CHECK(std::fabs(sum2[i] / draws - var_expect) < 3.0 * se_var);
}

TEST_CASE("ddpm loss of a perfect mock denoiser is exactly zero") {
  DiffusionSchedule s = make_schedule(100);
  Rng rng(7);
  Tensor x0 = Tensor::randn({1, 1, 8, 8}, rng);
  Tensor eps = Tensor::randn({1, 1, 8, 8}, rng);
  NoiseFn<float> perfect = [&](const Tensor&, int) { return eps; };
  Tensor loss = ddpm_loss_at(perfect, x0, 50, eps, s);
  CHECK(loss.item() == 0.0f);
}

TEST_CASE("ddpm loss of a zero denoiser is the noise energy") {
  DiffusionSchedule s = make_schedule(100);
  Rng rng(8);
  Tensor x0 = Tensor::randn({1, 1, 128, 128}, rng);
  NoiseFn<float> zero = [](const Tensor& xt, int) { return Tensor::zeros(xt.shape()); };
  Tensor loss = ddpm_loss(zero, x0, s, rng);
  CHECK(loss.item() == doctest::Approx(1.0f).epsilon(0.05));
}

TEST_CASE("ddpm loss rejects mismatched predictor output") {
  DiffusionSchedule s = make_schedule(100);
  Tensor x0 = Tensor::zeros({1, 1, 4, 4});
  NoiseFn<float> bad = [](const Tensor&, int) { return Tensor::zeros({1, 1, 2, 2}); };
  Rng rng(1);
  CHECK_THROWS_AS(ddpm_loss(bad, x0, s, rng), DimensionError);
}

TEST_CASE("fd: ddpm loss is differentiable through the predictor") {
  DiffusionSchedule s = make_schedule(100);
  Rng rng(4242);
  DTensor x0 = DTensor::randn({1, 2, 4, 4}, rng);
  DTensor eps = DTensor::randn({1, 2, 4, 4}, rng);
  DTensor k = DTensor::randn({2, 2, 3, 3}, rng);
  DTensor b = DTensor::randn({2}, rng);
  NoiseFn<double> model = [&](const DTensor& xt, int) { return conv2d(xt, k, b, 1, 1); };
  std::vector<DTensor> params{k, b};
  CHECK(fd::max_rel_err(params, [&] { return ddpm_loss_at(model, x0, 30, eps, s); }) < 1e-4);
}

TEST_CASE("p_sample_step is deterministic at t=1") {
  DiffusionSchedule s = make_schedule(100);
  Rng rng(12);
  Tensor xt = Tensor::randn({1, 1, 4, 4}, rng);
  NoiseFn<float> zero = [](const Tensor& x, int) { return Tensor::zeros(x.shape()); };
  Rng r1(1), r2(2);  // different rngs must not matter at t=1
  Tensor a = p_sample_step(zero, xt, 1, s, r1);
  Tensor bb = p_sample_step(zero, xt, 1, s, r2);
  const float inv = 1.0f / static_cast<float>(std::sqrt(s.alpha_at(1)));
  for (std::int64_t i = 0; i < xt.size(); ++i) {
    CHECK(a.data()[i] == bb.data()[i]);
    CHECK(a.data()[i] == doctest::Approx(inv * xt.data()[i]).epsilon(1e-6));
  }
}

TEST_CASE("p_sample_step mean with zero predicted noise") {
  DiffusionSchedule s = make_schedule(100);
  Rng rng(13);
  Tensor xt = Tensor::randn({1, 1, 4, 4}, rng);
  const int t = 60;
  Tensor mu = posterior_mean_from_eps(xt, Tensor::zeros(xt.shape()), t, s);
  const float inv = 1.0f / static_cast<float>(std::sqrt(s.alpha_at(t)));
  for (std::int64_t i = 0; i < xt.size(); ++i)
    CHECK(mu.data()[i] == doctest::Approx(inv * xt.data()[i]).epsilon(1e-6));
}

TEST_CASE("posterior mean agrees with the algebraic two-route oracle") {
  // Route A: mean from the predicted noise. Route B: direct posterior mean
  // of the forward chain given (x0, xt). With eps_hat equal to the true eps
  // the two coincide.
  DiffusionSchedule s = make_schedule(100);
  Rng rng(14);
  DTensor x0 = DTensor::randn({2, 3}, rng);
  for (int t : {2, 17, 55, 100}) {
    DTensor eps = DTensor::randn({2, 3}, rng);
    DTensor xt = q_sample(x0, t, eps, s);
    DTensor route_a = posterior_mean_from_eps(xt, eps, t, s);
    const double abar = s.alpha_bar_at(t);
    const double abar_prev = t >= 2 ? s.alpha_bar_at(t - 1) : 1.0;
    const double beta = s.beta_at(t);
    const double alpha = s.alpha_at(t);
    const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
    const double ct = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
    for (std::int64_t i = 0; i < x0.size(); ++i) {
      const double route_b = c0 * x0.data()[i] + ct * xt.data()[i];
      CHECK(std::fabs(route_a.data()[i] - route_b) < 1e-5);
    }
  }
}

TEST_CASE("p_sample_step rejects out-of-range timestep") {
  DiffusionSchedule s = make_schedule(100);
  Tensor xt = Tensor::zeros({1, 1, 2, 2});
  NoiseFn<float> zero = [](const Tensor& x, int) { return Tensor::zeros(x.shape()); };
  Rng rng(1);
  CHECK_THROWS_AS(p_sample_step(zero, xt, 0, s, rng), IndexError);
  CHECK_THROWS_AS(p_sample_step(zero, xt, 101, s, rng), IndexError);
}

TEST_CASE("generate matches a hand-unrolled two-step chain") {
  DiffusionSchedule s = make_schedule(2, ScheduleKind::linear, 0.02, 0.05);
  NoiseFn<float> zero = [](const Tensor& x, int) { return Tensor::zeros(x.shape()); };
  const Shape shape{1, 1, 2, 2};

  Rng rng(2024);
  Tensor out = generate(zero, s, shape, rng);

  // replay the exact same draws
  Rng replay(2024);
  Tensor x2 = Tensor::randn(shape, replay);
  std::vector<float> z2(4);
  for (auto& z : z2) z = static_cast<float>(replay.normal());
  const double a2 = s.alpha_at(2), a1 = s.alpha_at(1);
  const double sigma2 = std::sqrt(s.posterior_var_at(2));
  for (int i = 0; i < 4; ++i) {
    double x1 = x2.data()[i] / std::sqrt(a2) + sigma2 * z2[i];
    double x0 = x1 / std::sqrt(a1);
    x0 = std::clamp(x0, -1.0, 1.0);
    CHECK(std::fabs(out.data()[i] - x0) < 1e-5);
  }
}

TEST_CASE("generate returns the requested shape in range") {
  DiffusionSchedule s = make_schedule(8, ScheduleKind::linear, 0.01, 0.2);
  NoiseFn<float> zero = [](const Tensor& x, int) { return Tensor::zeros(x.shape()); };
  Rng rng(3);
  Tensor out = generate(zero, s, {2, 1, 4, 6}, rng);
  CHECK(out.shape() == Shape{2, 1, 4, 6});
  for (float v : out.data()) {
    CHECK(v <= 1.0f);
    CHECK(v >= -1.0f);
  }
}

}  // TEST_SUITE
