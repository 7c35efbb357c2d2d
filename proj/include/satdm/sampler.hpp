#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "satdm/diffusion.hpp"
#include "satdm/rng.hpp"
#include "satdm/tensor.hpp"

namespace satdm {

enum class VarianceMode { learned, fixed_beta, fixed_tilde_beta };

inline VarianceMode variance_mode_from_string(const std::string& s) {
  if (s == "learned") return VarianceMode::learned;
  if (s == "fixed_beta") return VarianceMode::fixed_beta;
  if (s == "fixed_tilde_beta") return VarianceMode::fixed_tilde_beta;
  throw ConfigError("unknown variance mode '" + s + "'");
}

inline const char* to_string(VarianceMode m) {
  switch (m) {
    case VarianceMode::learned: return "learned";
    case VarianceMode::fixed_beta: return "fixed_beta";
    default: return "fixed_tilde_beta";
  }
}

template <typename S>
struct SampleJob {
  Tensor<S> segmap;  // N x K x S x S one-hot conditioning; N = chain count
  double guidance_w = 1.5;
  std::uint64_t seed = 0;
  std::vector<int> snapshot_steps;
  VarianceMode variance_mode = VarianceMode::learned;
  bool clamp_x0 = false;          // optional in-loop clamp; off preserves the plain update
  std::size_t image_channels = 3;
  std::size_t chain_offset = 0;   // global index of the first chain, for chunked runs

  void validate(int T) const {
    if (guidance_w < 0.0) throw ContractError("sample job: guidance_w must be >= 0");
    for (int t : snapshot_steps) {
      if (t < 0 || t > T) throw ContractError("sample job: snapshot step outside [0, T]");
    }
  }
};

/// Ordered (t, x_t) snapshots; t strictly decreasing, final entry t == 0.
template <typename S>
struct Trajectory {
  std::vector<std::pair<int, Tensor<S>>> snapshots;
};

namespace detail {

// Distinct substream label spaces per noise role, so chains are reproducible
// regardless of batch chunking.
constexpr std::uint64_t kStreamInit = 0x1000'0000ULL;
constexpr std::uint64_t kStreamStep = 0x2000'0000ULL;
constexpr std::uint64_t kStreamKnown = 0x3000'0000ULL;
constexpr std::uint64_t kStreamMix = 0x4000'0000ULL;

/// Standard normal tensor with one substream per chain.
template <typename S>
Tensor<S> chain_noise(std::uint64_t seed, std::uint64_t stream, std::size_t chain_offset,
                      Shape shape) {
  auto out = Tensor<S>::zeros(std::move(shape));
  const std::size_t n = out.dim(0);
  const std::size_t inner = out.size() / n;
  auto d = out.mutable_data();
  Rng base(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = base.fork(stream).fork(chain_offset + i);
    rng.template fill_normal<S>(d.subspan(i * inner, inner));
  }
  return out;
}

}  // namespace detail

template <typename S>
struct GuidedEps {
  Tensor<S> eps;     // guided noise estimate
  Tensor<S> v_raw;   // variance signal from the conditional pass
};

/// eps~ = eps(null) + w * (eps(c) - eps(null)); exactly two forward passes.
/// w == 0 and w == 1 return the respective pass bit-identically.
template <typename S, typename Model>
GuidedEps<S> guided_eps(const Model& model, const Tensor<S>& x_t, std::span<const int> ts,
                        const Tensor<S>& segmap, double w) {
  if (w < 0.0) throw ContractError("guided_eps: w must be >= 0");
  DenoiserOutput<S> cond = model.forward(x_t, ts, &segmap);
  DenoiserOutput<S> uncond = model.forward(x_t, ts, nullptr);
  if (w == 1.0) return {cond.eps_hat, cond.v_raw};
  if (w == 0.0) return {uncond.eps_hat, cond.v_raw};
  auto guided = add(uncond.eps_hat,
                    mul_scalar(sub(cond.eps_hat, uncond.eps_hat), static_cast<S>(w)));
  return {std::move(guided), cond.v_raw};
}

/// One reverse transition x_t -> x_{t-1} given pre-drawn unit noise z
/// (ignored at t <= 1, where the mean is emitted noiselessly).
template <typename S, typename Model>
Tensor<S> p_sample_step_with_noise(const Model& model, const Tensor<S>& x_t, int t,
                                   const Tensor<S>& segmap, double w, VarianceMode mode,
                                   const ScheduleTable& sched, const Tensor<S>& z,
                                   bool clamp_x0 = false) {
  sched.check_t(t);
  NoGradGuard ng;
  std::vector<int> ts(x_t.dim(0), t);
  auto guided = guided_eps(model, x_t, std::span<const int>(ts), segmap, w);

  Tensor<S> mu;
  if (clamp_x0) {
    auto x0_hat = clamp(predict_x0_from_eps(x_t, t, guided.eps, sched), S(-1), S(1));
    mu = add(mul_scalar(x0_hat, static_cast<S>(sched.posterior_coef_x0[t])),
             mul_scalar(x_t, static_cast<S>(sched.posterior_coef_xt[t])));
  } else {
    mu = reverse_mean_from_eps(x_t, t, guided.eps, sched);
  }
  if (t <= 1) return mu;

  Tensor<S> noise_term;
  switch (mode) {
    case VarianceMode::learned:
      noise_term = mul(sqrt(learned_variance(guided.v_raw, t, sched)), z);
      break;
    case VarianceMode::fixed_beta:
      noise_term = mul_scalar(z, static_cast<S>(std::sqrt(sched.beta[t])));
      break;
    case VarianceMode::fixed_tilde_beta:
      noise_term = mul_scalar(z, static_cast<S>(std::sqrt(sched.tilde_beta[t])));
      break;
  }
  return add(mu, noise_term);
}

/// Spec-shaped step: draws z from the supplied stream (whole batch).
template <typename S, typename Model>
Tensor<S> p_sample_step(const Model& model, const Tensor<S>& x_t, int t, const Tensor<S>& segmap,
                        double w, VarianceMode mode, const ScheduleTable& sched, Rng& rng) {
  Tensor<S> z = Tensor<S>::zeros(x_t.shape());
  if (t > 1) rng.template fill_normal<S>(z.mutable_data());
  return p_sample_step_with_noise(model, x_t, t, segmap, w, mode, sched, z);
}

/// Full ancestral sampling loop from x_T ~ N(0, I) down to x_0. Snapshots are
/// captured at the requested steps; the final display image (clamped to
/// [-1, 1]) is always recorded at t = 0.
template <typename S, typename Model>
std::pair<Tensor<S>, Trajectory<S>> sample(const Model& model, const SampleJob<S>& job,
                                           const ScheduleTable& sched) {
  job.validate(sched.T);
  NoGradGuard ng;
  const std::size_t n = job.segmap.dim(0);
  const std::size_t res = job.segmap.dim(2);
  Shape shape{n, job.image_channels, res, job.segmap.dim(3)};

  auto want = [&](int t) {
    for (int s : job.snapshot_steps)
      if (s == t) return true;
    return false;
  };

  Tensor<S> x = detail::chain_noise<S>(job.seed, detail::kStreamInit, job.chain_offset, shape);
  Trajectory<S> traj;
  for (int t = sched.T; t >= 1; --t) {
    if (want(t)) traj.snapshots.emplace_back(t, x.clone());
    Tensor<S> z;
    if (t > 1) {
      z = detail::chain_noise<S>(job.seed, detail::kStreamStep + static_cast<std::uint64_t>(t),
                                 job.chain_offset, shape);
    } else {
      z = Tensor<S>::zeros(shape);
    }
    x = p_sample_step_with_noise(model, x, t, job.segmap, job.guidance_w, job.variance_mode, sched,
                                 z, job.clamp_x0);
  }
  x = clamp(x, S(-1), S(1));
  traj.snapshots.emplace_back(0, x);
  return {std::move(x), std::move(traj)};
}

/// Regenerates the masked region (region_mask == 1) of `image`, keeping the
/// rest. The hole is filled with noise, the composite diffused to t_start,
/// then denoised; at every step the known region is overwritten with
/// q_sample(original, t) so only the hole is synthesized.
template <typename S, typename Model>
Tensor<S> inpaint(const Model& model, const Tensor<S>& image, const Tensor<S>& region_mask,
                  const Tensor<S>& segmap, int t_start, const SampleJob<S>& job,
                  const ScheduleTable& sched) {
  sched.check_t(t_start);
  job.validate(sched.T);
  if (region_mask.dim(2) != image.dim(2) || region_mask.dim(3) != image.dim(3) ||
      region_mask.dim(0) != image.dim(0)) {
    throw ContractError("inpaint: region mask spatial size must match the image");
  }
  bool any = false;
  for (S v : region_mask.data()) {
    if (v != S(0) && v != S(1)) throw ContractError("inpaint: region mask must be binary");
    any |= v != S(0);
  }
  if (!any) return image;  // degenerate: nothing to synthesize

  NoGradGuard ng;
  const std::size_t n = image.dim(0), c = image.dim(1), hw = image.dim(2) * image.dim(3);
  auto apply_mask = [&](const Tensor<S>& hole_val, const Tensor<S>& known_val) {
    auto out = Tensor<S>::zeros(image.shape());
    auto od = out.mutable_data();
    auto hd = hole_val.data(), kd = known_val.data(), md = region_mask.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < hw; ++j) {
          const std::size_t idx = (i * c + ch) * hw + j;
          od[idx] = md[i * hw + j] != S(0) ? hd[idx] : kd[idx];
        }
    return out;
  };

  auto hole_noise =
      detail::chain_noise<S>(job.seed, detail::kStreamInit, job.chain_offset, image.shape());
  auto composite = apply_mask(hole_noise, image);
  auto eps0 = detail::chain_noise<S>(job.seed, detail::kStreamMix, job.chain_offset, image.shape());
  Tensor<S> x = q_sample(composite, t_start, eps0, sched);

  for (int t = t_start; t >= 1; --t) {
    auto eps_known = detail::chain_noise<S>(
        job.seed, detail::kStreamKnown + static_cast<std::uint64_t>(t), job.chain_offset,
        image.shape());
    x = apply_mask(x, q_sample(image, t, eps_known, sched));
    Tensor<S> z;
    if (t > 1) {
      z = detail::chain_noise<S>(job.seed, detail::kStreamStep + static_cast<std::uint64_t>(t),
                                 job.chain_offset, image.shape());
    } else {
      z = Tensor<S>::zeros(image.shape());
    }
    x = p_sample_step_with_noise(model, x, t, segmap, job.guidance_w, job.variance_mode, sched, z,
                                 job.clamp_x0);
  }
  return apply_mask(clamp(x, S(-1), S(1)), image);
}

/// The corrupted-latents mix of two images at t_mix: independent noise on
/// each side, then x = (1-eta) xA + eta xB.
template <typename S>
Tensor<S> interpolate_mix(const Tensor<S>& img_a, const Tensor<S>& img_b, double eta, int t_mix,
                          const SampleJob<S>& job, const ScheduleTable& sched) {
  if (eta < 0.0 || eta > 1.0) throw ContractError("interpolate: eta must be in [0, 1]");
  sched.check_t(t_mix);
  auto eps_a =
      detail::chain_noise<S>(job.seed, detail::kStreamMix + 1, job.chain_offset, img_a.shape());
  auto eps_b =
      detail::chain_noise<S>(job.seed, detail::kStreamMix + 2, job.chain_offset, img_b.shape());
  auto xa = q_sample(img_a, t_mix, eps_a, sched);
  auto xb = q_sample(img_b, t_mix, eps_b, sched);
  return add(mul_scalar(xa, static_cast<S>(1.0 - eta)), mul_scalar(xb, static_cast<S>(eta)));
}

/// Latent interpolation: corrupt A and B to t_mix, blend by eta, then denoise
/// conditioned on B's segmap.
template <typename S, typename Model>
Tensor<S> interpolate(const Model& model, const Tensor<S>& img_a, const Tensor<S>& img_b,
                      const Tensor<S>& segmap_b, double eta, int t_mix, const SampleJob<S>& job,
                      const ScheduleTable& sched) {
  detail::check_same_shape("interpolate", img_a, img_b);
  job.validate(sched.T);
  NoGradGuard ng;
  Tensor<S> x = interpolate_mix(img_a, img_b, eta, t_mix, job, sched);
  for (int t = t_mix; t >= 1; --t) {
    Tensor<S> z;
    if (t > 1) {
      z = detail::chain_noise<S>(job.seed, detail::kStreamStep + static_cast<std::uint64_t>(t),
                                 job.chain_offset, img_a.shape());
    } else {
      z = Tensor<S>::zeros(img_a.shape());
    }
    x = p_sample_step_with_noise(model, x, t, segmap_b, job.guidance_w, job.variance_mode, sched, z,
                                 job.clamp_x0);
  }
  return clamp(x, S(-1), S(1));
}

}  // namespace satdm
