#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "satdm/unet.hpp"

namespace satdm {

/// Cosine decay from lr0 to 0 over the whole run, no restarts.
inline double lr_at(std::int64_t iter, std::int64_t total, double lr0) {
  if (iter < 0) throw ContractError("lr_at: iter must be >= 0");
  if (total <= 0) throw ContractError("lr_at: total must be > 0");
  if (iter > total) return 0.0;
  constexpr double kPi = 3.14159265358979323846;
  return lr0 * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(iter) / static_cast<double>(total)));
}

template <typename S>
double global_grad_norm(const ParamStore<S>& params) {
  double acc = 0.0;
  for (const auto& [_, t] : params.items()) {
    for (S g : t.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

/// Scales gradients so the global L2 norm is at most max_norm; returns the
/// pre-clip norm. max_norm <= 0 disables clipping.
template <typename S>
double clip_grad_norm(ParamStore<S>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& [_, t] : params.items()) {
      for (auto& g : t.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

/// Adaptive moment estimation with decoupled weight decay: the decay
/// multiplies parameters directly and never enters the moment estimates.
template <typename S>
class AdamW {
 public:
  AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void init_like(const ParamStore<S>& params) {
    if (!m_.empty()) return;
    for (const auto& [_, t] : params.items()) {
      m_.emplace_back(t.size(), S(0));
      v_.emplace_back(t.size(), S(0));
    }
  }

  void step(ParamStore<S>& params, double lr) {
    init_like(params);
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.items().size(); ++i) {
      auto& t = params.items()[i].second;
      auto p = t.mutable_data();
      auto g = t.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const S decay_mult = static_cast<S>(1.0 - lr * weight_decay_);
      for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] *= decay_mult;
        m[j] = static_cast<S>(beta1_) * m[j] + static_cast<S>(1.0 - beta1_) * g[j];
        v[j] = static_cast<S>(beta2_) * v[j] + static_cast<S>(1.0 - beta2_) * g[j] * g[j];
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        p[j] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::int64_t steps() const { return steps_; }

  // moment state, exposed for checkpointing
  std::vector<std::vector<S>>& moments_m() { return m_; }
  std::vector<std::vector<S>>& moments_v() { return v_; }
  void set_steps(std::int64_t s) { steps_ = s; }

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t steps_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

/// iter < delay copies params into ema; afterwards
/// ema = decay * ema + (1 - decay) * params.
template <typename S>
void ema_update(ParamStore<S>& ema, const ParamStore<S>& params, double decay, std::int64_t iter,
                std::int64_t delay) {
  if (ema.items().size() != params.items().size()) {
    throw ContractError("ema_update: parameter trees differ");
  }
  for (std::size_t i = 0; i < params.items().size(); ++i) {
    const auto& src = params.items()[i].second;
    auto& dst = ema.items()[i].second;
    if (dst.size() != src.size() || ema.items()[i].first != params.items()[i].first) {
      throw ContractError("ema_update: parameter trees differ at '" + params.items()[i].first + "'");
    }
    auto d = dst.mutable_data();
    auto s = src.data();
    if (iter < delay) {
      std::copy(s.begin(), s.end(), d.begin());
    } else {
      const S a = static_cast<S>(decay), b = static_cast<S>(1.0 - decay);
      for (std::size_t j = 0; j < d.size(); ++j) d[j] = a * d[j] + b * s[j];
    }
  }
}

}  // namespace satdm
