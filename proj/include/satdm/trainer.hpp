#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "satdm/checkpoint.hpp"
#include "satdm/datakit.hpp"
#include "satdm/diffusion.hpp"
#include "satdm/optim.hpp"
#include "satdm/schedule.hpp"
#include "satdm/unet.hpp"

namespace satdm {

struct TrainConfig {
  std::int64_t iterations = 20000;
  std::size_t batch_size = 16;
  double lr0 = 2e-5;
  double weight_decay = 0.05;
  double grad_clip = 1.0;
  double ema_decay = 0.9999;
  std::int64_t ema_delay = 500;
  double p_uncond = 0.2;
  double lambda_vlb = 0.001;
  int T = 1000;
  double schedule_s = 0.008;
  double beta_max_clip = 0.999;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 2000;
  std::int64_t log_every = 10;
  DenoiserConfig model;

  void validate() const {
    if (p_uncond < 0.0 || p_uncond > 1.0) throw ConfigError("train: p_uncond must be in [0, 1]");
    if (lr0 <= 0.0) throw ConfigError("train: lr0 must be > 0");
    if (ema_decay <= 0.0 || ema_decay >= 1.0) throw ConfigError("train: ema_decay must be in (0, 1)");
    if (iterations <= 0 || batch_size == 0) throw ConfigError("train: empty run");
    if (T < 1) throw ConfigError("train: T must be >= 1");
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"image_size", c.image_size},
       {"in_channels", c.in_channels},
       {"model_channels", c.model_channels},
       {"channel_mult", c.channel_mult},
       {"num_res_blocks", c.num_res_blocks},
       {"attention_resolutions", c.attention_resolutions},
       {"head_channels", c.head_channels},
       {"dropout", c.dropout},
       {"num_classes", c.num_classes},
       {"time_embed_dim", c.time_embed_dim},
       {"spade_hidden", c.spade_hidden}};
}

inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.model_channels = j.value("model_channels", c.model_channels);
  c.channel_mult = j.value("channel_mult", c.channel_mult);
  c.num_res_blocks = j.value("num_res_blocks", c.num_res_blocks);
  c.attention_resolutions = j.value("attention_resolutions", c.attention_resolutions);
  c.head_channels = j.value("head_channels", c.head_channels);
  c.dropout = j.value("dropout", c.dropout);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  c.spade_hidden = j.value("spade_hidden", c.spade_hidden);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"iterations", c.iterations},
       {"batch_size", c.batch_size},
       {"lr0", c.lr0},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"ema_decay", c.ema_decay},
       {"ema_delay", c.ema_delay},
       {"p_uncond", c.p_uncond},
       {"lambda_vlb", c.lambda_vlb},
       {"T", c.T},
       {"schedule_s", c.schedule_s},
       {"beta_max_clip", c.beta_max_clip},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr0 = j.value("lr0", c.lr0);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.ema_delay = j.value("ema_delay", c.ema_delay);
  c.p_uncond = j.value("p_uncond", c.p_uncond);
  c.lambda_vlb = j.value("lambda_vlb", c.lambda_vlb);
  c.T = j.value("T", c.T);
  c.schedule_s = j.value("schedule_s", c.schedule_s);
  c.beta_max_clip = j.value("beta_max_clip", c.beta_max_clip);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  if (j.contains("model")) j.at("model").get_to(c.model);
}

// Stream labels: every random draw in a run is a pure function of
// (seed, role, iteration), so a resumed run replays identically.
namespace detail {
constexpr std::uint64_t kStreamTimestep = 0x74696D65ULL;
constexpr std::uint64_t kStreamEps = 0x65707320ULL;
constexpr std::uint64_t kStreamDrop = 0x64726F70ULL;
constexpr std::uint64_t kStreamDropout = 0x646F7574ULL;
constexpr std::uint64_t kStreamBatch = 0x62617463ULL;
}  // namespace detail

/// Per-item conditioning dropout: with probability p_uncond a row's segmap is
/// replaced by the null (all-zero) map. Returns the new batch and the flags.
template <typename S>
std::pair<Tensor<S>, std::vector<std::uint8_t>> drop_condition(const Tensor<S>& segmap,
                                                               double p_uncond, Rng& rng) {
  if (p_uncond < 0.0 || p_uncond > 1.0) throw ContractError("drop_condition: p_uncond in [0, 1]");
  const std::size_t n = segmap.dim(0);
  const std::size_t inner = segmap.size() / n;
  auto out = segmap.clone();
  auto d = out.mutable_data();
  std::vector<std::uint8_t> dropped(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.bernoulli(p_uncond)) {
      dropped[i] = 1;
      std::fill(d.begin() + i * inner, d.begin() + (i + 1) * inner, S(0));
    }
  }
  return {std::move(out), std::move(dropped)};
}

template <typename S>
struct TrainStepResult {
  LossBreakdown<S> loss;
  double grad_norm = 0;  // pre-clip global L2 norm
  double mean_v = 0;     // mean of the post-map interpolation variable
  double lr = 0;
};

/// One optimization step: uniform per-item timesteps, Gaussian noise,
/// conditioning dropout, hybrid loss, backward, global-norm clipping,
/// decoupled-weight-decay update at the cosine learning rate, EMA update.
template <typename S>
TrainStepResult<S> train_step(DenoiserModel<S>& model, ParamStore<S>& ema,
                              const Tensor<S>& images, const Tensor<S>& segmaps,
                              const TrainConfig& cfg, const ScheduleTable& sched, AdamW<S>& opt,
                              std::int64_t iter) {
  const std::size_t n = images.dim(0);
  Rng base(cfg.seed);
  Rng ts_rng = base.fork(detail::kStreamTimestep).fork(static_cast<std::uint64_t>(iter));
  Rng eps_rng = base.fork(detail::kStreamEps).fork(static_cast<std::uint64_t>(iter));
  Rng drop_rng = base.fork(detail::kStreamDrop).fork(static_cast<std::uint64_t>(iter));
  Rng dropout_rng = base.fork(detail::kStreamDropout).fork(static_cast<std::uint64_t>(iter));

  std::vector<int> ts(n);
  for (auto& t : ts) t = static_cast<int>(ts_rng.uniform_int(1, cfg.T));
  auto eps = Tensor<S>::randn(eps_rng, images.shape());
  auto [seg, dropped] = drop_condition(segmaps, cfg.p_uncond, drop_rng);

  DenoiserOutput<S> captured;
  auto fwd = [&](const Tensor<S>& x_t, std::span<const int> tsv, const Tensor<S>* s) {
    captured = model.forward(x_t, tsv, s, /*train=*/true, &dropout_rng);
    return captured;
  };
  auto breakdown = loss_hybrid<S>(images, &seg, std::span<const int>(ts), eps, fwd, sched,
                                  cfg.lambda_vlb);

  const double ls = static_cast<double>(breakdown.l_simple.item());
  const double lv = static_cast<double>(breakdown.l_vlb.item());
  if (!std::isfinite(ls) || !std::isfinite(lv)) {
    std::string tlist;
    for (int t : ts) tlist += std::to_string(t) + " ";
    throw NumericalError(std::string("train_step: non-finite loss at iter ") +
                         std::to_string(iter) + " (" + (!std::isfinite(ls) ? "l_simple" : "l_vlb") +
                         "), t = [ " + tlist + "]");
  }

  model.params().zero_grad();
  backward(breakdown.l_hybrid);
  const double grad_norm = clip_grad_norm(model.params(), cfg.grad_clip);
  opt.step(model.params(), lr_at(iter, cfg.iterations, cfg.lr0));
  ema_update(ema, model.params(), cfg.ema_decay, iter, cfg.ema_delay);

  double mean_v;
  {
    NoGradGuard ng;
    mean_v = static_cast<double>(mean(v_from_raw(captured.v_raw.detach())).item());
  }
  return {std::move(breakdown), grad_norm, mean_v, lr_at(iter, cfg.iterations, cfg.lr0)};
}

template <typename S>
double param_l2_norm(const ParamStore<S>& params) {
  double acc = 0;
  for (const auto& [_, t] : params.items()) {
    for (S v : t.data()) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(acc);
}

struct TrainHooks {
  std::function<void(std::int64_t, const nlohmann::json&)> on_log;  // optional observer
};

/// Full training run. Emits newline-delimited JSON metrics (the six tracked
/// series) and rolling checkpoints (last 3 kept) under out_dir; returns the
/// final checkpoint path.
template <typename S>
std::filesystem::path train(const TrainConfig& cfg_in, const std::filesystem::path& dataset_dir,
                            const std::filesystem::path& out_dir,
                            const std::filesystem::path& resume_from = {},
                            const TrainHooks& hooks = {}, std::int64_t stop_after_iter = -1) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  Dataset dataset = load_dataset(dataset_dir);
  auto train_split = dataset.split("train");
  if (train_split.empty()) throw DataError("train: dataset has no train split");
  if (dataset.manifest.tile_size != cfg.model.image_size) {
    throw DataError("train: dataset tile size does not match model image size");
  }

  const auto sched = build_schedule(cfg.T, cfg.schedule_s, cfg.beta_max_clip);
  DenoiserModel<S> model(cfg.model, cfg.seed);
  ParamStore<S> ema;
  for (const auto& [name, t] : model.params().items()) {
    auto copy = t.clone();
    ema.items().emplace_back(name, copy);
  }
  AdamW<S> opt(cfg.weight_decay);
  opt.init_like(model.params());
  std::int64_t start_iter = 0;
  if (!resume_from.empty()) {
    const auto info = read_checkpoint_info(resume_from);
    load_checkpoint_weights(resume_from, model.params(), ema);
    load_optimizer_state(resume_from, opt.moments_m(), opt.moments_v());
    start_iter = info.iteration;
    opt.set_steps(start_iter);
  }

  std::ofstream metrics(out_dir / "metrics.ndjson", std::ios::app);
  std::vector<fs::path> kept;
  Rng base(cfg.seed);

  auto save = [&](std::int64_t iter, const std::string& name) {
    const auto dir = out_dir / "checkpoints" / name;
    save_checkpoint(dir, nlohmann::json(cfg), iter, model.params(), ema,
                    base.fork(detail::kStreamBatch).fork(static_cast<std::uint64_t>(iter)));
    save_optimizer_state(dir, opt.moments_m(), opt.moments_v());
    return dir;
  };

  const std::int64_t end_iter =
      stop_after_iter > 0 ? std::min(stop_after_iter, cfg.iterations) : cfg.iterations;
  for (std::int64_t iter = start_iter; iter < end_iter; ++iter) {
    Rng batch_rng = base.fork(detail::kStreamBatch).fork(static_cast<std::uint64_t>(iter));
    std::vector<const TileRecord*> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(train_split[batch_rng.uniform_int(0, train_split.size() - 1)]);
    }
    auto [images, segmaps] = encode_batch<S>(batch);
    auto result = train_step(model, ema, images, segmaps, cfg, sched, opt, iter);

    if (iter % cfg.log_every == 0 || iter + 1 == cfg.iterations) {
      nlohmann::json rec = {{"iter", iter},
                            {"l_simple", static_cast<double>(result.loss.l_simple.item())},
                            {"l_vlb", static_cast<double>(result.loss.l_vlb.item())},
                            {"mean_v", result.mean_v},
                            {"grad_norm", result.grad_norm},
                            {"param_norm", param_l2_norm(model.params())},
                            {"lr", result.lr}};
      metrics << rec.dump() << "\n";
      metrics.flush();
      if (hooks.on_log) hooks.on_log(iter, rec);
    }
    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 &&
        iter + 1 < end_iter) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "iter_%07lld", static_cast<long long>(iter + 1));
      kept.push_back(save(iter + 1, buf));
      while (kept.size() > 3) {
        fs::remove_all(kept.front());
        kept.erase(kept.begin());
      }
    }
  }
  if (end_iter < cfg.iterations) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "iter_%07lld", static_cast<long long>(end_iter));
    return save(end_iter, buf);
  }
  return save(cfg.iterations, "final");
}

}  // namespace satdm
