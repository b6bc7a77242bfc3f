#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ptdr/rng.hpp"
#include "ptdr/tensor.hpp"

namespace ptdr {

enum class ScheduleKind { linear, cosine };

/// Precomputed noise-schedule tables for a T-step diffusion process.
/// Values for step t (1-based) live at index t-1.
struct DiffusionSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::linear;
  std::vector<double> beta;
  std::vector<double> alpha;          // 1 - beta
  std::vector<double> alpha_bar;      // running product of alpha
  std::vector<double> posterior_var;  // sigma_t^2; defined as 0 at t = 1

  double beta_at(int t) const { return beta[index(t)]; }
  double alpha_at(int t) const { return alpha[index(t)]; }
  double alpha_bar_at(int t) const { return alpha_bar[index(t)]; }
  double posterior_var_at(int t) const { return posterior_var[index(t)]; }

 private:
  std::size_t index(int t) const;
};

DiffusionSchedule make_schedule(int T, ScheduleKind kind, double beta_start, double beta_end);

/// Linear schedule with the 1000-step reference range [1e-4, 0.02] rescaled
/// by 1000/T, which keeps the total accumulated noise at step T roughly
/// independent of T.
DiffusionSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::linear);

/// Audit dump: one row per step with columns t,beta,alpha,alpha_bar,posterior_var.
void dump_schedule_csv(const DiffusionSchedule& sched, const std::string& path);

/// A noise predictor eps(x_t, t). Adapters exist for UnetModel; tests pass
/// plain lambdas.
template <typename S>
using NoiseFn = std::function<TensorT<S>(const TensorT<S>&, int)>;

/// Closed-form forward sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
/// Pure data computation, never recorded on a tape.
template <typename S>
TensorT<S> q_sample(const TensorT<S>& x0, int t, const TensorT<S>& eps,
                    const DiffusionSchedule& sched);

/// Step-by-step forward chain x_s = sqrt(1-beta_s) x_{s-1} + sqrt(beta_s) eps_s.
/// Slow path kept as an independent reference for q_sample.
template <typename S>
TensorT<S> iterated_forward(const TensorT<S>& x0, int t, const DiffusionSchedule& sched,
                            Rng& rng);

/// Denoising objective at a fixed (t, eps): mean over elements of
/// (eps_fn(q_sample(x0,t,eps), t) - eps)^2. Differentiable through eps_fn.
template <typename S>
TensorT<S> ddpm_loss_at(const NoiseFn<S>& eps_fn, const TensorT<S>& x0, int t,
                        const TensorT<S>& eps, const DiffusionSchedule& sched);

/// Draws t ~ U{1..T} and eps ~ N(0,I), then evaluates ddpm_loss_at.
template <typename S>
TensorT<S> ddpm_loss(const NoiseFn<S>& eps_fn, const TensorT<S>& x0,
                     const DiffusionSchedule& sched, Rng& rng);

/// Posterior mean given the predicted noise:
/// (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t).
template <typename S>
TensorT<S> posterior_mean_from_eps(const TensorT<S>& xt, const TensorT<S>& eps_hat, int t,
                                   const DiffusionSchedule& sched);

/// One ancestral step x_t -> x_{t-1}. Adds sigma_t * z for t > 1 and is
/// deterministic at t = 1.
template <typename S>
TensorT<S> p_sample_step(const NoiseFn<S>& eps_fn, const TensorT<S>& xt, int t,
                         const DiffusionSchedule& sched, Rng& rng);

/// Full reverse chain from pure noise; output clipped to [-1, 1].
/// Draw order: the initial x_T first, then one z per step from t = T down
/// to t = 2.
template <typename S>
TensorT<S> generate(const NoiseFn<S>& eps_fn, const DiffusionSchedule& sched, Shape shape,
                    Rng& rng);

}  // namespace ptdr
