#include "ptdr/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ptdr/errors.hpp"

namespace ptdr {

std::size_t DiffusionSchedule::index(int t) const {
  if (t < 1 || t > T)
    throw IndexError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  return static_cast<std::size_t>(t - 1);
}

namespace {

DiffusionSchedule finish_schedule(int T, ScheduleKind kind, std::vector<double> beta) {
  DiffusionSchedule s;
  s.T = T;
  s.kind = kind;
  s.beta = std::move(beta);
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  s.posterior_var.resize(s.beta.size());
  double running = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = s.beta[static_cast<std::size_t>(i)];
    if (!(b > 0.0 && b < 1.0))
      throw ConfigError("beta[" + std::to_string(i + 1) + "] = " + std::to_string(b) +
                        " outside (0, 1)");
    const double prev_bar = running;
    s.alpha[static_cast<std::size_t>(i)] = 1.0 - b;
    running *= 1.0 - b;
    s.alpha_bar[static_cast<std::size_t>(i)] = running;
    // sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, with abar_0 = 1
    s.posterior_var[static_cast<std::size_t>(i)] =
        i == 0 ? 0.0 : (1.0 - prev_bar) / (1.0 - running) * b;
  }
  return s;
}

}  // namespace

DiffusionSchedule make_schedule(int T, ScheduleKind kind, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1, got " + std::to_string(T));
  std::vector<double> beta(static_cast<std::size_t>(T));
  switch (kind) {
    case ScheduleKind::linear: {
      if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("linear schedule requires 0 < beta_start <= beta_end < 1");
      for (int i = 0; i < T; ++i)
        beta[static_cast<std::size_t>(i)] =
            T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1.0);
      break;
    }
    case ScheduleKind::cosine: {
      // abar(t) follows cos^2((t/T + s)/(1 + s) * pi/2); betas are the
      // step-to-step ratios, clipped away from 1.
      const double s = 0.008;
      auto f = [&](double t) {
        const double v = std::cos((t / T + s) / (1.0 + s) * M_PI / 2.0);
        return v * v;
      };
      const double f0 = f(0.0);
      double prev = 1.0;
      for (int i = 1; i <= T; ++i) {
        const double cur = f(static_cast<double>(i)) / f0;
        double b = 1.0 - cur / prev;
        b = std::min(b, 0.999);
        beta[static_cast<std::size_t>(i - 1)] = b;
        prev *= 1.0 - b;
      }
      break;
    }
  }
  return finish_schedule(T, kind, std::move(beta));
}

DiffusionSchedule make_schedule(int T, ScheduleKind kind) {
  if (kind == ScheduleKind::cosine) return make_schedule(T, kind, 0.0, 0.0);
  const double rescale = 1000.0 / T;
  return make_schedule(T, kind, 1e-4 * rescale, 0.02 * rescale);
}

void dump_schedule_csv(const DiffusionSchedule& sched, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "t,beta,alpha,alpha_bar,posterior_var\n";
  char line[256];
  for (int t = 1; t <= sched.T; ++t) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g\n", t, sched.beta_at(t),
                  sched.alpha_at(t), sched.alpha_bar_at(t), sched.posterior_var_at(t));
    out << line;
  }
}

template <typename S>
TensorT<S> q_sample(const TensorT<S>& x0, int t, const TensorT<S>& eps,
                    const DiffusionSchedule& sched) {
  if (x0.shape() != eps.shape())
    throw DimensionError("q_sample: eps shape " + shape_str(eps.shape()) +
                         " does not match x0 " + shape_str(x0.shape()));
  const double abar = sched.alpha_bar_at(t);
  const S signal = static_cast<S>(std::sqrt(abar));
  const S noise = static_cast<S>(std::sqrt(1.0 - abar));
  TensorT<S> out = TensorT<S>::zeros(x0.shape());
  const S* p0 = x0.data().data();
  const S* pe = eps.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < x0.size(); ++i) po[i] = signal * p0[i] + noise * pe[i];
  return out;
}

template <typename S>
TensorT<S> iterated_forward(const TensorT<S>& x0, int t, const DiffusionSchedule& sched,
                            Rng& rng) {
  if (t < 1 || t > sched.T)
    throw IndexError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) +
                     "]");
  TensorT<S> x = x0.clone();
  S* px = x.mutable_data().data();
  for (int s = 1; s <= t; ++s) {
    const S keep = static_cast<S>(std::sqrt(1.0 - sched.beta_at(s)));
    const S add = static_cast<S>(std::sqrt(sched.beta_at(s)));
    for (std::int64_t i = 0; i < x.size(); ++i)
      px[i] = keep * px[i] + add * static_cast<S>(rng.normal());
  }
  return x;
}

template <typename S>
TensorT<S> ddpm_loss_at(const NoiseFn<S>& eps_fn, const TensorT<S>& x0, int t,
                        const TensorT<S>& eps, const DiffusionSchedule& sched) {
  TensorT<S> xt = q_sample(x0, t, eps, sched);
  TensorT<S> pred = eps_fn(xt, t);
  if (pred.shape() != eps.shape())
    throw DimensionError("ddpm_loss: predicted noise shape " + shape_str(pred.shape()) +
                         " does not match eps " + shape_str(eps.shape()));
  TensorT<S> diff = sub(pred, eps);
  return mean(mul(diff, diff));
}

template <typename S>
TensorT<S> ddpm_loss(const NoiseFn<S>& eps_fn, const TensorT<S>& x0,
                     const DiffusionSchedule& sched, Rng& rng) {
  const int t = static_cast<int>(rng.uniform_int(sched.T)) + 1;
  TensorT<S> eps = TensorT<S>::randn(x0.shape(), rng);
  return ddpm_loss_at(eps_fn, x0, t, eps, sched);
}

template <typename S>
TensorT<S> posterior_mean_from_eps(const TensorT<S>& xt, const TensorT<S>& eps_hat, int t,
                                   const DiffusionSchedule& sched) {
  if (xt.shape() != eps_hat.shape())
    throw DimensionError("posterior_mean_from_eps: shape mismatch");
  const double alpha = sched.alpha_at(t);
  const double abar = sched.alpha_bar_at(t);
  const S coef = static_cast<S>((1.0 - alpha) / std::sqrt(1.0 - abar));
  const S inv_sqrt_alpha = static_cast<S>(1.0 / std::sqrt(alpha));
  TensorT<S> out = TensorT<S>::zeros(xt.shape());
  const S* px = xt.data().data();
  const S* pe = eps_hat.data().data();
  S* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < xt.size(); ++i)
    po[i] = inv_sqrt_alpha * (px[i] - coef * pe[i]);
  return out;
}

template <typename S>
TensorT<S> p_sample_step(const NoiseFn<S>& eps_fn, const TensorT<S>& xt, int t,
                         const DiffusionSchedule& sched, Rng& rng) {
  TensorT<S> eps_hat = eps_fn(xt, t);
  TensorT<S> mu = posterior_mean_from_eps(xt, eps_hat, t, sched);
  if (t == 1) return mu;
  const S sigma = static_cast<S>(std::sqrt(sched.posterior_var_at(t)));
  S* pm = mu.mutable_data().data();
  for (std::int64_t i = 0; i < mu.size(); ++i)
    pm[i] += sigma * static_cast<S>(rng.normal());
  return mu;
}

template <typename S>
TensorT<S> generate(const NoiseFn<S>& eps_fn, const DiffusionSchedule& sched, Shape shape,
                    Rng& rng) {
  TensorT<S> x = TensorT<S>::randn(std::move(shape), rng);
  for (int t = sched.T; t >= 1; --t) x = p_sample_step(eps_fn, x, t, sched, rng);
  S* px = x.mutable_data().data();
  for (std::int64_t i = 0; i < x.size(); ++i) px[i] = std::clamp(px[i], S(-1), S(1));
  return x;
}

#define PTDR_INSTANTIATE_DIFFUSION(S)                                                          \
  template TensorT<S> q_sample<S>(const TensorT<S>&, int, const TensorT<S>&,                   \
                                  const DiffusionSchedule&);                                   \
  template TensorT<S> iterated_forward<S>(const TensorT<S>&, int, const DiffusionSchedule&,    \
                                          Rng&);                                              \
  template TensorT<S> ddpm_loss_at<S>(const NoiseFn<S>&, const TensorT<S>&, int,               \
                                      const TensorT<S>&, const DiffusionSchedule&);            \
  template TensorT<S> ddpm_loss<S>(const NoiseFn<S>&, const TensorT<S>&,                       \
                                   const DiffusionSchedule&, Rng&);                            \
  template TensorT<S> posterior_mean_from_eps<S>(const TensorT<S>&, const TensorT<S>&, int,    \
                                                 const DiffusionSchedule&);                    \
  template TensorT<S> p_sample_step<S>(const NoiseFn<S>&, const TensorT<S>&, int,              \
                                       const DiffusionSchedule&, Rng&);                        \
  template TensorT<S> generate<S>(const NoiseFn<S>&, const DiffusionSchedule&, Shape, Rng&);

PTDR_INSTANTIATE_DIFFUSION(float)
PTDR_INSTANTIATE_DIFFUSION(double)

#undef PTDR_INSTANTIATE_DIFFUSION

}  // namespace ptdr
