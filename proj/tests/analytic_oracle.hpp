#pragma once

#include <cmath>
#include <span>

#include "satdm/diffusion.hpp"
#include "satdm/schedule.hpp"
#include "satdm/tensor.hpp"

namespace satdm::test {

/// Closed-form optimal denoiser for scalar data x0 ~ N(m, s^2).
///
/// With x_t = sqrt(ab) x0 + sqrt(1-ab) eps, conditioning on x_t gives
///   E[x0 | x_t] = (m/s^2 + sqrt(ab) x_t/(1-ab)) / (1/s^2 + ab/(1-ab))
///   Var[x0 | x_t] = 1 / (1/s^2 + ab/(1-ab))
/// so the optimal noise estimate is E[eps | x_t] = (x_t - sqrt(ab) E[x0|x_t])
/// / sqrt(1-ab), and the exact one-step reverse variance is
/// tilde_beta_t + c0_t^2 Var[x0 | x_t] with c0 the posterior x0-coefficient.
/// v_raw encodes that variance through the log-interpolation the sampler uses.
template <typename S>
struct AnalyticDenoiser {
  double m = 0.0;
  double s2 = 1.0;
  const ScheduleTable* sched = nullptr;

  struct Moments {
    double x0_mean_coef_x, x0_mean_const, x0_var;
  };

  Moments posterior_x0(int t) const {
    const double ab = sched->alphabar[t];
    const double prec = 1.0 / s2 + ab / (1.0 - ab);
    return {std::sqrt(ab) / (1.0 - ab) / prec, (m / s2) / prec, 1.0 / prec};
  }

  double optimal_variance(int t) const {
    const auto mo = posterior_x0(t);
    const double c0 = sched->posterior_coef_x0[t];
    return sched->tilde_beta[t] + c0 * c0 * mo.x0_var;
  }

  double v_raw_for(int t) const {
    const double log_hi = std::log(sched->beta[t]);
    const double log_lo = std::log(sched->tilde_beta_logsafe(t));
    const double target = std::log(std::max(optimal_variance(t), 1e-300));
    double v = (target - log_lo) / (log_hi - log_lo);
    v = std::min(1.0, std::max(0.0, v));
    return 2.0 * v - 1.0;
  }

  DenoiserOutput<S> forward(const Tensor<S>& x_t, std::span<const int> ts,
                            const Tensor<S>* /*segmap*/) const {
    const std::size_t n = x_t.dim(0);
    const std::size_t inner = x_t.size() / n;
    auto eps = Tensor<S>::zeros(x_t.shape());
    auto vr = Tensor<S>::zeros(x_t.shape());
    auto ed = eps.mutable_data();
    auto vd = vr.mutable_data();
    auto xd = x_t.data();
    for (std::size_t i = 0; i < n; ++i) {
      const int t = ts[i];
      const auto mo = posterior_x0(t);
      const double ab = sched->alphabar[t];
      const double vraw = v_raw_for(t);
      for (std::size_t j = 0; j < inner; ++j) {
        const double x = static_cast<double>(xd[i * inner + j]);
        const double x0_mean = mo.x0_mean_coef_x * x + mo.x0_mean_const;
        ed[i * inner + j] = static_cast<S>((x - std::sqrt(ab) * x0_mean) / std::sqrt(1.0 - ab));
        vd[i * inner + j] = static_cast<S>(vraw);
      }
    }
    return {std::move(eps), std::move(vr)};
  }
};

/// Analytic denoiser for spatially-coupled data: every pixel of an item
/// shares one latent value c ~ N(m, s^2) (plus independent forward noise),
/// so the optimal predictor pools all pixels — a minimal stand-in with real
/// conditioning context, used for inpainting-behavior tests.
template <typename S>
struct CoupledAnalyticDenoiser {
  double m = 0.0;
  double s2 = 1.0;
  const ScheduleTable* sched = nullptr;

  DenoiserOutput<S> forward(const Tensor<S>& x_t, std::span<const int> ts,
                            const Tensor<S>* /*segmap*/) const {
    const std::size_t n = x_t.dim(0);
    const std::size_t d = x_t.size() / n;
    auto eps = Tensor<S>::zeros(x_t.shape());
    auto vr = Tensor<S>::zeros(x_t.shape());
    auto ed = eps.mutable_data();
    auto vd = vr.mutable_data();
    auto xd = x_t.data();
    for (std::size_t i = 0; i < n; ++i) {
      const int t = ts[i];
      const double ab = sched->alphabar[t];
      const double prec = 1.0 / s2 + static_cast<double>(d) * ab / (1.0 - ab);
      double sum = 0;
      for (std::size_t j = 0; j < d; ++j) sum += static_cast<double>(xd[i * d + j]);
      const double c_mean = (m / s2 + std::sqrt(ab) * sum / (1.0 - ab)) / prec;
      const double c_var = 1.0 / prec;
      const double c0 = sched->posterior_coef_x0[t];
      const double sig2 = sched->tilde_beta[t] + c0 * c0 * c_var;
      const double log_hi = std::log(sched->beta[t]);
      const double log_lo = std::log(sched->tilde_beta_logsafe(t));
      double v = (std::log(std::max(sig2, 1e-300)) - log_lo) / (log_hi - log_lo);
      v = std::min(1.0, std::max(0.0, v));
      for (std::size_t j = 0; j < d; ++j) {
        const double x = static_cast<double>(xd[i * d + j]);
        ed[i * d + j] = static_cast<S>((x - std::sqrt(ab) * c_mean) / std::sqrt(1.0 - ab));
        vd[i * d + j] = static_cast<S>(2.0 * v - 1.0);
      }
    }
    return {std::move(eps), std::move(vr)};
  }
};

/// Grid quadrature of q(x_{t-1} | x_t, x0) ~ q(x_t | x_{t-1}) q(x_{t-1} | x0)
/// for scalar values; returns (mean, variance). Independent of the
/// closed-form posterior it checks.
inline std::pair<double, double> bayes_grid_oracle(double x0, double xt, int t,
                                                   const ScheduleTable& s) {
  const double beta = s.beta[t];
  const double ab_prev = s.alphabar[t - 1];
  auto log_gauss = [](double x, double mu, double var) {
    return -0.5 * (x - mu) * (x - mu) / var - 0.5 * std::log(var);
  };
  const double centre = (xt / std::sqrt(1.0 - beta) + std::sqrt(ab_prev) * x0) / 2.0;
  const double width = 12.0 * (std::sqrt(beta) + std::sqrt(1.0 - ab_prev) + 1.0);
  const int n = 400000;
  const double h = 2.0 * width / n;
  double w_sum = 0, m_sum = 0, m2_sum = 0;
  for (int i = 0; i <= n; ++i) {
    const double x = centre - width + i * h;
    const double lp = log_gauss(xt, std::sqrt(1.0 - beta) * x, beta) +
                      log_gauss(x, std::sqrt(ab_prev) * x0, 1.0 - ab_prev);
    const double w = std::exp(lp);
    w_sum += w;
    m_sum += w * x;
    m2_sum += w * x * x;
  }
  const double mean = m_sum / w_sum;
  const double var = m2_sum / w_sum - mean * mean;
  return {mean, var};
}

/// Exact NLL of a 256-level-quantized N(m, s^2) sample, in nats.
inline double quantized_gaussian_nll(double x, double m, double s) {
  const double half = 1.0 / 255.0;
  double mass;
  if (x > 1.0 - half) {
    mass = 1.0 - normal_cdf((x - half - m) / s);
  } else if (x < -1.0 + half) {
    mass = normal_cdf((x + half - m) / s);
  } else {
    mass = normal_cdf((x + half - m) / s) - normal_cdf((x - half - m) / s);
  }
  return -std::log(std::max(mass, 1e-300));
}

inline double snap_to_grid(double x) {
  const double k = std::round((std::min(1.0, std::max(-1.0, x)) + 1.0) * 127.5);
  return k / 127.5 - 1.0;
}

}  // namespace satdm::test
