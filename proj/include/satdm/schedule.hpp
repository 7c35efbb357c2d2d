#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "satdm/common.hpp"

namespace satdm {

/// Cosine-curve cumulative noise levels: alphabar[t] = f(t)/f(0) with
/// f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2). alphabar[0] is exactly 1.
inline std::vector<double> cosine_alphabar(int T, double s) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (s <= 0.0) throw ConfigError("schedule: offset s must be > 0");
  constexpr double kPi = 3.14159265358979323846;
  auto f = [&](double t) {
    const double c = std::cos((t / T + s) / (1.0 + s) * kPi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> ab(static_cast<std::size_t>(T) + 1);
  for (int t = 0; t <= T; ++t) ab[t] = f(static_cast<double>(t)) / f0;
  return ab;
}

/// Per-timestep schedule constants for a fixed T. Arrays are indexed by
/// timestep t in [1, T]; index 0 is either alphabar[0] == 1 or unused.
/// Immutable after construction.
struct ScheduleTable {
  int T = 0;
  double s = 0.008;
  double beta_max_clip = 0.999;
  std::vector<double> beta;               // beta[1..T]
  std::vector<double> alpha;              // alpha[1..T] = 1 - beta
  std::vector<double> alphabar;           // alphabar[0..T], recomputed from clipped betas
  std::vector<double> tilde_beta;         // posterior variance, tilde_beta[1] == 0
  std::vector<double> posterior_coef_x0;  // sqrt(alphabar[t-1]) * beta / (1 - alphabar[t])
  std::vector<double> posterior_coef_xt;  // sqrt(alpha) * (1 - alphabar[t-1]) / (1 - alphabar[t])

  double sqrt_alphabar(int t) const { return std::sqrt(alphabar[t]); }
  double sqrt_one_minus_alphabar(int t) const { return std::sqrt(1.0 - alphabar[t]); }

  /// Lower bound used for the log-variance interpolation; tilde_beta[1] is 0,
  /// whose log is singular, so t == 1 borrows tilde_beta[2].
  double tilde_beta_logsafe(int t) const {
    if (t == 1) return T >= 2 ? tilde_beta[2] : beta[1];
    return tilde_beta[t];
  }

  void check_t(int t) const {
    if (t < 1 || t > T) {
      throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
  }
};

/// Builds the full table: cosine alphabar -> betas -> clip -> recompute
/// alphabar from the clipped betas so every identity holds exactly.
inline ScheduleTable build_schedule(int T, double s = 0.008, double beta_max_clip = 0.999) {
  if (beta_max_clip <= 0.0 || beta_max_clip >= 1.0) {
    throw ConfigError("schedule: beta_max_clip must be in (0, 1)");
  }
  ScheduleTable sched;
  sched.T = T;
  sched.s = s;
  sched.beta_max_clip = beta_max_clip;

  const auto ab_raw = cosine_alphabar(T, s);
  const std::size_t n = static_cast<std::size_t>(T) + 1;
  sched.beta.assign(n, 0.0);
  sched.alpha.assign(n, 0.0);
  sched.alphabar.assign(n, 0.0);
  sched.tilde_beta.assign(n, 0.0);
  sched.posterior_coef_x0.assign(n, 0.0);
  sched.posterior_coef_xt.assign(n, 0.0);

  sched.alphabar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = std::min(1.0 - ab_raw[t] / ab_raw[t - 1], beta_max_clip);
    sched.beta[t] = beta;
    sched.alpha[t] = 1.0 - beta;
    sched.alphabar[t] = sched.alphabar[t - 1] * sched.alpha[t];
  }
  for (int t = 1; t <= T; ++t) {
    const double om_ab = 1.0 - sched.alphabar[t];
    const double om_ab_prev = 1.0 - sched.alphabar[t - 1];
    sched.tilde_beta[t] = om_ab_prev / om_ab * sched.beta[t];
    sched.posterior_coef_x0[t] = std::sqrt(sched.alphabar[t - 1]) * sched.beta[t] / om_ab;
    sched.posterior_coef_xt[t] = std::sqrt(sched.alpha[t]) * om_ab_prev / om_ab;
  }
  return sched;
}

}  // namespace satdm
