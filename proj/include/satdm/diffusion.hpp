#pragma once

#include <cmath>
#include <memory>
#include <type_traits>
#include <span>
#include <utility>
#include <vector>

#include "satdm/schedule.hpp"
#include "satdm/tensor.hpp"

namespace satdm {

/// What the denoiser emits: predicted noise and the raw variance signal.
/// v = clamp((v_raw + 1)/2, 0, 1) interpolates between the log-variance
/// bounds log(beta_t) (v = 1) and log(tilde_beta_t) (v = 0).
template <typename S>
struct DenoiserOutput {
  Tensor<S> eps_hat;
  Tensor<S> v_raw;
};

template <typename S>
struct LossBreakdown {
  Tensor<S> l_simple;
  Tensor<S> l_vlb;
  Tensor<S> l_hybrid;
  Tensor<S> l_T_diag;  // prior KL; diagnostic only, no parameters involved
};

/// Per-element nats to bits-per-dim, for diagnostics.
inline double bits_per_dim(double nats_per_element) { return nats_per_element / std::log(2.0); }

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.14159265358979323846);
}

// ---------------------------------------------------------------------------
// Forward process
// ---------------------------------------------------------------------------

/// x_t = sqrt(alphabar_t) x0 + sqrt(1 - alphabar_t) eps, per-item timesteps.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, std::span<const int> ts, const Tensor<S>& eps,
                   const ScheduleTable& sched) {
  detail::check_same_shape("q_sample", x0, eps);
  if (x0.rank() < 1 || x0.dim(0) != ts.size()) {
    throw ContractError("q_sample: need one timestep per leading-axis item");
  }
  const std::size_t n = ts.size();
  const std::size_t inner = x0.size() / std::max<std::size_t>(n, 1);
  auto coefs = std::make_shared<std::vector<S>>(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    sched.check_t(ts[i]);
    (*coefs)[2 * i] = static_cast<S>(sched.sqrt_alphabar(ts[i]));
    (*coefs)[2 * i + 1] = static_cast<S>(sched.sqrt_one_minus_alphabar(ts[i]));
  }
  std::vector<S> out(x0.size());
  auto xd = x0.data(), ed = eps.data();
  for (std::size_t i = 0; i < n; ++i) {
    const S a = (*coefs)[2 * i], b = (*coefs)[2 * i + 1];
    for (std::size_t j = 0; j < inner; ++j) {
      out[i * inner + j] = a * xd[i * inner + j] + b * ed[i * inner + j];
    }
  }
  auto xn = x0.node(), en = eps.node();
  return detail::make_op<S>("q_sample", x0.shape(), std::move(out), {&x0, &eps},
                            [xn, en, coefs, n, inner](auto& self) {
                              for (std::size_t i = 0; i < n; ++i) {
                                const S a = (*coefs)[2 * i], b = (*coefs)[2 * i + 1];
                                if (xn->needs_grad) {
                                  auto g = xn->ensure_grad();
                                  for (std::size_t j = 0; j < inner; ++j)
                                    g[i * inner + j] += a * self.grad[i * inner + j];
                                }
                                if (en->needs_grad) {
                                  auto g = en->ensure_grad();
                                  for (std::size_t j = 0; j < inner; ++j)
                                    g[i * inner + j] += b * self.grad[i * inner + j];
                                }
                              }
                            });
}

/// Same timestep for every item.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps, const ScheduleTable& sched) {
  std::vector<int> ts(x0.rank() ? x0.dim(0) : 1, t);
  return q_sample(x0, std::span<const int>(ts), eps, sched);
}

// ---------------------------------------------------------------------------
// Posterior q(x_{t-1} | x_t, x0)
// ---------------------------------------------------------------------------

/// Returns (mean, variance): mean = c0 * x0 + ct * x_t with the table's
/// posterior coefficients, variance = tilde_beta_t.
template <typename S>
std::pair<Tensor<S>, double> posterior_mean_variance(const Tensor<S>& x0, const Tensor<S>& x_t,
                                                     int t, const ScheduleTable& sched) {
  sched.check_t(t);
  detail::check_same_shape("posterior_mean_variance", x0, x_t);
  auto mean = add(mul_scalar(x0, static_cast<S>(sched.posterior_coef_x0[t])),
                  mul_scalar(x_t, static_cast<S>(sched.posterior_coef_xt[t])));
  return {std::move(mean), sched.tilde_beta[t]};
}

/// Inverts the noise parameterization: x0_hat = (x_t - sqrt(1-ab) eps)/sqrt(ab).
template <typename S>
Tensor<S> predict_x0_from_eps(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat,
                              const ScheduleTable& sched) {
  sched.check_t(t);
  return mul_scalar(
      sub(x_t, mul_scalar(eps_hat, static_cast<S>(sched.sqrt_one_minus_alphabar(t)))),
      static_cast<S>(1.0 / sched.sqrt_alphabar(t)));
}

/// Reverse-process mean from the predicted noise:
/// mu = (x_t - beta_t/sqrt(1-alphabar_t) * eps_hat) / sqrt(alpha_t).
template <typename S>
Tensor<S> reverse_mean_from_eps(const Tensor<S>& x_t, int t, const Tensor<S>& eps_hat,
                                const ScheduleTable& sched) {
  sched.check_t(t);
  const double coef = sched.beta[t] / sched.sqrt_one_minus_alphabar(t);
  return mul_scalar(sub(x_t, mul_scalar(eps_hat, static_cast<S>(coef))),
                    static_cast<S>(1.0 / std::sqrt(sched.alpha[t])));
}

/// Interpolation variable of the learned variance, mapped into [0, 1].
template <typename S>
Tensor<S> v_from_raw(const Tensor<S>& v_raw) {
  return clamp(mul_scalar(add_scalar(v_raw, S(1)), S(0.5)), S(0), S(1));
}

/// Elementwise learned variance: exp(v log beta_t + (1-v) log tilde_beta_t).
/// tilde_beta_1 = 0 makes the lower log singular; t = 1 borrows tilde_beta_2.
template <typename S>
Tensor<S> learned_variance(const Tensor<S>& v_raw, int t, const ScheduleTable& sched) {
  sched.check_t(t);
  const S log_beta = static_cast<S>(std::log(sched.beta[t]));
  const S log_tilde = static_cast<S>(std::log(sched.tilde_beta_logsafe(t)));
  auto v = v_from_raw(v_raw);
  auto log_var = add(mul_scalar(v, log_beta), mul_scalar(add_scalar(neg(v), S(1)), log_tilde));
  return exp(log_var);
}

template <typename S>
struct ReverseMoments {
  Tensor<S> mu;
  Tensor<S> sigma2;
};

/// Model mean and learned elementwise variance of p(x_{t-1} | x_t).
template <typename S>
ReverseMoments<S> p_mean_variance(const DenoiserOutput<S>& out, const Tensor<S>& x_t, int t,
                                  const ScheduleTable& sched) {
  return {reverse_mean_from_eps(x_t, t, out.eps_hat, sched),
          learned_variance(out.v_raw, t, sched)};
}

// ---------------------------------------------------------------------------
// KL divergence between diagonal Gaussians, in nats per element
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> kl_gauss_diag(const Tensor<S>& mean1, const Tensor<S>& var1, const Tensor<S>& mean2,
                        const Tensor<S>& var2) {
  for (const auto* v : {&var1, &var2}) {
    for (S x : v->data()) {
      if (!(x > S(0))) throw ContractError("kl_gauss_diag: variances must be positive");
    }
  }
  auto log_ratio = sub(log(var2), log(var1));
  auto quad = div(add(var1, square(sub(mean1, mean2))), var2);
  return mul_scalar(add(log_ratio, add_scalar(quad, S(-1))), S(0.5));
}

template <typename S>
Tensor<S> kl_gauss_diag(const Tensor<S>& mean1, double var1, const Tensor<S>& mean2,
                        const Tensor<S>& var2) {
  if (!(var1 > 0.0)) throw ContractError("kl_gauss_diag: variances must be positive");
  return kl_gauss_diag(mean1, Tensor<S>::full(mean1.shape(), static_cast<S>(var1)), mean2, var2);
}

// ---------------------------------------------------------------------------
// Discretized Gaussian decoder likelihood
// ---------------------------------------------------------------------------

/// -log of the Gaussian probability mass of the 256-level bin centered at
/// each x0 value (bin half-width 1/255), with open-ended bins at +-1.
/// Differentiable w.r.t. mu and sigma; x0 is data on the pixel grid.
template <typename S>
Tensor<S> decoder_nll(const Tensor<S>& x0, const Tensor<S>& mu, const Tensor<S>& sigma) {
  detail::check_same_shape("decoder_nll", x0, mu);
  detail::check_same_shape("decoder_nll", x0, sigma);
  for (S s : sigma.data()) {
    if (!(s > S(0))) throw ContractError("decoder_nll: sigma must be positive");
  }
  constexpr double kHalfBin = 1.0 / 255.0;
  constexpr double kMinMass = 1e-12;
  for (S v : x0.data()) {
    const double lv = static_cast<double>(v);
    const double knots = (lv + 1.0) * 127.5;
    if (lv < -1.0 - 1e-6 || lv > 1.0 + 1e-6 || std::abs(knots - std::round(knots)) > 1e-3) {
      throw ContractError("decoder_nll: x0 must lie on the 256-level grid in [-1, 1]");
    }
  }

  const std::size_t n = x0.size();
  std::vector<S> out(n);
  // saved per-element intermediates for backward: zp, zm, mass, edge code
  auto saved = std::make_shared<std::vector<double>>(4 * n);
  auto xd = x0.data();
  auto md = mu.data();
  auto sd = sigma.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = xd[i], m = md[i], s = sd[i];
    const double zp = (x + kHalfBin - m) / s;
    const double zm = (x - kHalfBin - m) / s;
    double mass;
    double edge = 0.0;  // -1: bottom bin, +1: top bin
    if (x > 1.0 - kHalfBin) {
      mass = 1.0 - normal_cdf(zm);
      edge = 1.0;
    } else if (x < -1.0 + kHalfBin) {
      mass = normal_cdf(zp);
      edge = -1.0;
    } else {
      mass = normal_cdf(zp) - normal_cdf(zm);
    }
    const double clamped = std::max(mass, kMinMass);
    out[i] = static_cast<S>(-std::log(clamped));
    (*saved)[4 * i] = zp;
    (*saved)[4 * i + 1] = zm;
    (*saved)[4 * i + 2] = mass;
    (*saved)[4 * i + 3] = edge;
  }

  auto mn = mu.node(), sn = sigma.node();
  return detail::make_op<S>(
      "decoder_nll", x0.shape(), std::move(out), {&mu, &sigma}, [mn, sn, saved, n](auto& self) {
        for (std::size_t i = 0; i < n; ++i) {
          const double zp = (*saved)[4 * i], zm = (*saved)[4 * i + 1];
          const double mass = (*saved)[4 * i + 2], edge = (*saved)[4 * i + 3];
          if (mass < kMinMass) continue;  // clamped region is constant
          const double s = static_cast<double>(sn->data[i]);
          double dmass_dmu, dmass_dsigma;
          if (edge > 0.5) {
            dmass_dmu = normal_pdf(zm) / s;
            dmass_dsigma = zm * normal_pdf(zm) / s;
          } else if (edge < -0.5) {
            dmass_dmu = -normal_pdf(zp) / s;
            dmass_dsigma = -zp * normal_pdf(zp) / s;
          } else {
            dmass_dmu = (normal_pdf(zm) - normal_pdf(zp)) / s;
            dmass_dsigma = (zm * normal_pdf(zm) - zp * normal_pdf(zp)) / s;
          }
          const double dnll = -1.0 / mass;
          if (mn->needs_grad) mn->ensure_grad()[i] += self.grad[i] * static_cast<S>(dnll * dmass_dmu);
          if (sn->needs_grad)
            sn->ensure_grad()[i] += self.grad[i] * static_cast<S>(dnll * dmass_dsigma);
        }
      });
}

// ---------------------------------------------------------------------------
// Variational-bound terms
// ---------------------------------------------------------------------------

/// One L_{t-1} term in nats per element (scalar mean over elements).
/// t == 1 is the decoder NLL; t >= 2 is KL(posterior || p_theta). The mean
/// path enters through a detached eps_hat so only the variance learns here.
template <typename S>
Tensor<S> vlb_term(const Tensor<S>& x0, const Tensor<S>& x_t, int t, const DenoiserOutput<S>& out,
                   const ScheduleTable& sched) {
  sched.check_t(t);
  auto eps_frozen = out.eps_hat.detach();
  auto mu = reverse_mean_from_eps(x_t, t, eps_frozen, sched);
  auto sigma2 = learned_variance(out.v_raw, t, sched);
  if (t == 1) {
    return mean(decoder_nll(x0, mu, sqrt(sigma2)));
  }
  auto [post_mean, post_var] = posterior_mean_variance(x0, x_t, t, sched);
  return mean(kl_gauss_diag(post_mean, post_var, mu, sigma2));
}

/// KL(q(x_T | x0) || N(0, I)) in nats per element; closed form, no graph.
template <typename S>
Tensor<S> prior_kl(const Tensor<S>& x0, const ScheduleTable& sched) {
  const double ab = sched.alphabar[sched.T];
  double acc = 0.0;
  for (S v : x0.data()) {
    const double x = static_cast<double>(v);
    acc += 0.5 * (ab * (x * x - 1.0) - std::log1p(-ab));
  }
  return Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(x0.size())));
}

// ---------------------------------------------------------------------------
// Hybrid training objective
// ---------------------------------------------------------------------------

/// forward: callable (x_t, ts, segmap*) -> DenoiserOutput.
/// l_simple is the MSE between injected and predicted noise; l_vlb averages
/// the per-item variational terms at the same (x0, x_t, t); l_hybrid adds
/// them with weight lambda.
template <typename S, typename Fwd>
LossBreakdown<S> loss_hybrid(const Tensor<S>& x0, std::type_identity_t<const Tensor<S>*> segmap,
                             std::span<const int> ts, const Tensor<S>& eps, Fwd&& forward,
                             const ScheduleTable& sched, double lambda) {
  auto x_t = q_sample(x0, ts, eps, sched);
  DenoiserOutput<S> out = forward(x_t, ts, segmap);
  detail::check_same_shape("loss_hybrid", out.eps_hat, x_t);
  detail::check_same_shape("loss_hybrid", out.v_raw, x_t);

  auto l_simple = mse(eps, out.eps_hat);

  const std::size_t n = ts.size();
  Tensor<S> vlb_sum;
  for (std::size_t i = 0; i < n; ++i) {
    DenoiserOutput<S> item{slice_item(out.eps_hat, i), slice_item(out.v_raw, i)};
    auto term = vlb_term(slice_item(x0, i), slice_item(x_t, i), ts[i], item, sched);
    vlb_sum = vlb_sum.defined() ? add(vlb_sum, term) : term;
  }
  auto l_vlb = mul_scalar(vlb_sum, static_cast<S>(1.0 / static_cast<double>(n)));
  auto l_hybrid = add(l_simple, mul_scalar(l_vlb, static_cast<S>(lambda)));

  Tensor<S> l_T;
  {
    NoGradGuard ng;
    l_T = prior_kl(x0, sched);
  }
  return LossBreakdown<S>{std::move(l_simple), std::move(l_vlb), std::move(l_hybrid), std::move(l_T)};
}

/// Single shared timestep across the batch.
template <typename S, typename Fwd>
LossBreakdown<S> loss_hybrid(const Tensor<S>& x0, std::type_identity_t<const Tensor<S>*> segmap, int t,
                             const Tensor<S>& eps, Fwd&& forward, const ScheduleTable& sched,
                             double lambda) {
  std::vector<int> ts(x0.dim(0), t);
  return loss_hybrid(x0, segmap, std::span<const int>(ts), eps, std::forward<Fwd>(forward), sched,
                     lambda);
}

}  // namespace satdm
