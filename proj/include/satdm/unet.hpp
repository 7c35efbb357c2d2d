#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "satdm/diffusion.hpp"
#include "satdm/nn.hpp"
#include "satdm/rng.hpp"
#include "satdm/tensor.hpp"

namespace satdm {

/// Identity op with a named node; marks graph positions for structural tests.
template <typename S>
Tensor<S> tag(const Tensor<S>& x, const char* name) {
  std::vector<S> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return detail::make_op<S>(name, x.shape(), std::move(out), {&x}, [xn](auto& self) {
    if (xn->needs_grad) detail::accumulate(*xn, std::span<const S>(self.grad));
  });
}

/// Nearest-neighbor resize on NCHW (used to bring the SegMap down to a
/// feature map's resolution).
template <typename S>
Tensor<S> nearest_resize(const Tensor<S>& x, std::size_t oh, std::size_t ow) {
  if (x.rank() != 4) throw DimensionError("nearest_resize: input must be NCHW");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (oh == h && ow == w) return x;
  auto map = std::make_shared<std::vector<std::size_t>>(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t iy = std::min(h - 1, y * h / oh);
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const std::size_t ix = std::min(w - 1, xx * w / ow);
      (*map)[y * ow + xx] = iy * w + ix;
    }
  }
  std::vector<S> out(nc * oh * ow);
  auto xd = x.data();
  for (std::size_t i = 0; i < nc; ++i) {
    const S* src = xd.data() + i * h * w;
    S* dst = out.data() + i * oh * ow;
    for (std::size_t j = 0; j < oh * ow; ++j) dst[j] = src[(*map)[j]];
  }
  auto xn = x.node();
  return detail::make_op<S>("nearest_resize", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out),
                            {&x}, [xn, map, nc, h, w, oh, ow](auto& self) {
                              if (!xn->needs_grad) return;
                              auto g = xn->ensure_grad();
                              for (std::size_t i = 0; i < nc; ++i) {
                                S* gx = g.data() + i * h * w;
                                const S* dy = self.grad.data() + i * oh * ow;
                                for (std::size_t j = 0; j < oh * ow; ++j) gx[(*map)[j]] += dy[j];
                              }
                            });
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

template <typename S>
class ParamStore {
 public:
  Tensor<S> add(std::string name, Tensor<S> t) {
    t.set_requires_grad(true);
    items_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<S>>>& items() { return items_; }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) {
      t.mutable_grad();
      t.zero_grad();
    }
  }

  /// Copies values (not structure) from a matching store.
  void copy_values_from(const ParamStore& other) {
    if (other.items_.size() != items_.size()) throw ContractError("parameter trees differ in size");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (other.items_[i].first != items_[i].first ||
          other.items_[i].second.size() != items_[i].second.size()) {
        throw ContractError("parameter trees differ at '" + items_[i].first + "'");
      }
      auto dst = items_[i].second.mutable_data();
      auto src = other.items_[i].second.data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> items_;
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  std::size_t model_channels = 32;
  std::vector<std::size_t> channel_mult{1, 2, 4};
  std::size_t num_res_blocks = 2;
  std::vector<std::size_t> attention_resolutions{16, 8};
  std::size_t head_channels = 32;
  double dropout = 0.1;
  std::size_t num_classes = 2;   // one-hot SegMap channels
  std::size_t time_embed_dim = 128;
  std::size_t spade_hidden = 32;

  std::size_t levels() const { return channel_mult.size(); }
  std::size_t channels_at(std::size_t level) const { return model_channels * channel_mult[level]; }
  std::size_t resolution_at(std::size_t level) const { return image_size >> level; }

  bool attention_at(std::size_t level) const {
    const std::size_t res = resolution_at(level);
    for (auto r : attention_resolutions)
      if (r == res) return true;
    return false;
  }

  void validate() const {
    if (channel_mult.empty()) throw ConfigError("denoiser: channel_mult must be non-empty");
    if (model_channels == 0 || in_channels == 0 || num_classes == 0) {
      throw ConfigError("denoiser: zero-sized channel configuration");
    }
    if (model_channels % 2 != 0) {
      throw ConfigError("denoiser: model_channels must be even (sinusoidal embedding width)");
    }
    const std::size_t down_factor = std::size_t(1) << (levels() - 1);
    if (image_size % down_factor != 0 || image_size / down_factor == 0) {
      throw ConfigError("denoiser: image_size must be divisible by 2^(levels-1)");
    }
    for (auto r : attention_resolutions) {
      bool reachable = false;
      for (std::size_t l = 0; l < levels(); ++l) reachable |= resolution_at(l) == r;
      if (!reachable) {
        throw ConfigError("denoiser: attention resolution " + std::to_string(r) +
                          " is not a reachable feature size");
      }
    }
    for (std::size_t l = 0; l < levels(); ++l) {
      if (attention_at(l) && channels_at(l) % head_channels != 0) {
        throw ConfigError("denoiser: channels at level " + std::to_string(l) +
                          " not divisible by head_channels");
      }
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("denoiser: dropout must be in [0, 1)");
  }
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
struct Init {
  ParamStore<S>* store;
  Rng rng;

  Tensor<S> conv_w(const std::string& name, std::size_t co, std::size_t ci, std::size_t k,
                   bool zero = false) {
    auto t = Tensor<S>::zeros({co, ci, k, k});
    if (!zero) {
      rng.fill_normal(t.mutable_data());
      const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(ci * k * k)));
      for (auto& v : t.mutable_data()) v *= scale;
    }
    return store->add(name, std::move(t));
  }

  Tensor<S> linear_w(const std::string& name, std::size_t o, std::size_t i) {
    auto t = Tensor<S>::zeros({o, i});
    rng.fill_normal(t.mutable_data());
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(i)));
    for (auto& v : t.mutable_data()) v *= scale;
    return store->add(name, std::move(t));
  }

  Tensor<S> zeros(const std::string& name, Shape shape) {
    return store->add(name, Tensor<S>::zeros(std::move(shape)));
  }
  Tensor<S> ones(const std::string& name, Shape shape) {
    return store->add(name, Tensor<S>::ones(std::move(shape)));
  }
};

template <typename S>
struct GnAffine {
  Tensor<S> gamma, beta;
  std::size_t groups;
  Tensor<S> operator()(const Tensor<S>& h) const { return group_norm(h, groups, gamma, beta); }
};

template <typename S>
struct Conv {
  Tensor<S> w, b;
  std::size_t stride = 1, pad = 1;
  Tensor<S> operator()(const Tensor<S>& h) const { return conv2d(h, w, b, stride, pad); }
};

/// Spatially-adaptive normalization: parameter-free group norm modulated by
/// per-pixel (1 + gamma(seg)) and beta(seg) computed from the resized SegMap.
template <typename S>
struct Spade {
  Tensor<S> gn_ones, gn_zeros;  // parameter-free norm affine constants
  std::size_t groups;
  Conv<S> shared, gamma_head, beta_head;

  Tensor<S> operator()(const Tensor<S>& h, const Tensor<S>& segmap) const {
    if (segmap.dim(2) < h.dim(2) || segmap.dim(3) < h.dim(3)) {
      throw ContractError("spade: segmap spatial size must be >= feature size");
    }
    auto seg = nearest_resize(segmap, h.dim(2), h.dim(3));
    auto normed = group_norm(h, groups, gn_ones, gn_zeros);
    auto hidden = silu(shared(seg));
    auto gamma_map = gamma_head(hidden);
    auto beta_map = beta_head(hidden);
    auto out = add(mul(normed, add_scalar(gamma_map, S(1))), beta_map);
    return tag(out, "spade_out");
  }
};

/// Residual block. Timestep conditioning is scale-shift applied after the
/// second norm site; the decoder variant swaps both norm sites for SPADE.
template <typename S>
struct ResBlock {
  std::size_t cin, cout;
  bool use_spade = false;
  GnAffine<S> norm1, norm2;        // encoder path
  Spade<S> spade1, spade2;         // decoder path
  Conv<S> conv1, conv2;            // conv2 zero-initialized
  Tensor<S> emb_w, emb_b;          // time_embed_dim -> 2*cout
  std::optional<Conv<S>> skip;     // 1x1 when cin != cout
  double dropout = 0.0;

  template <typename RngT>
  Tensor<S> forward(const Tensor<S>& h_in, const Tensor<S>& t_emb, const Tensor<S>* segmap,
                    bool train, RngT* rng) const {
    if (use_spade && segmap == nullptr) throw ContractError("decoder block needs a segmap");
    auto h = use_spade ? spade1(h_in, *segmap) : norm1(h_in);
    h = conv1(silu(h));

    auto emb = linear(silu(t_emb), emb_w, emb_b);  // (N, 2*cout)
    auto scale = slice_axis1(emb, 0, cout);
    auto shift = slice_axis1(emb, cout, 2 * cout);

    h = use_spade ? spade2(h, *segmap) : norm2(h);
    h = scale_shift_channels(h, scale, shift);
    h = silu(h);
    if (train && dropout > 0.0) h = satdm::dropout(h, dropout, *rng, true);
    h = conv2(h);

    auto sk = skip ? (*skip)(h_in) : h_in;
    return add(sk, h);
  }
};

template <typename S>
struct AttnBlock {
  GnAffine<S> norm;
  AttentionWeights<S> wts;
  std::size_t head_channels;

  Tensor<S> operator()(const Tensor<S>& h) const {
    return add(h, attention_core(norm(h), head_channels, wts));
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Denoiser model
// ---------------------------------------------------------------------------

/// Captures intermediate tensors of one forward pass for structural tests.
template <typename S>
struct ForwardTrace {
  std::vector<Tensor<S>> skips;        // one per encoder level
  Tensor<S> segmap_leaf;               // the segmap tensor fed to the decoder
};

/// Conditional U-Net: encoder ResNet ladder with timestep modulation,
/// attention at configured resolutions, bottleneck, decoder ladder with
/// SPADE SegMap modulation and one skip concatenation per level. Outputs
/// 2*in_channels maps split into (eps_hat, v_raw); the output conv starts
/// at zero so both are zero at initialization.
template <typename S>
class DenoiserModel {
 public:
  DenoiserModel(DenoiserConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    detail::Init<S> init{&store_, Rng(seed).fork(0x6d6f64656cULL)};
    build(init);
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  DenoiserOutput<S> forward(const Tensor<S>& x, std::span<const int> ts,
                            const Tensor<S>* segmap) const {
    return forward(x, ts, segmap, false, static_cast<Rng*>(nullptr), nullptr);
  }

  template <typename RngT>
  DenoiserOutput<S> forward(const Tensor<S>& x, std::span<const int> ts, const Tensor<S>* segmap,
                            bool train, RngT* dropout_rng, ForwardTrace<S>* trace = nullptr) const {
    const std::size_t n = x.dim(0);
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.image_size ||
        x.dim(3) != cfg_.image_size) {
      throw ContractError("denoiser: input must be N x " + std::to_string(cfg_.in_channels) +
                          " x " + std::to_string(cfg_.image_size) + " x " +
                          std::to_string(cfg_.image_size) + ", got " + shape_str(x.shape()));
    }
    if (ts.size() != n) throw ContractError("denoiser: one timestep per batch item");
    Tensor<S> seg;
    if (segmap != nullptr) {
      if (segmap->rank() != 4 || segmap->dim(0) != n || segmap->dim(1) != cfg_.num_classes) {
        throw ContractError("denoiser: segmap must be N x " + std::to_string(cfg_.num_classes) +
                            " x S x S");
      }
      seg = *segmap;
    } else {
      // the null conditioning map: no valid one-hot row is all-zero
      seg = Tensor<S>::zeros({n, cfg_.num_classes, cfg_.image_size, cfg_.image_size});
    }
    if (trace) trace->segmap_leaf = seg;

    auto t_emb = timestep_embedding<S>(ts, cfg_.model_channels);
    t_emb = linear(t_emb, temb_w0_, temb_b0_);
    t_emb = linear(silu(t_emb), temb_w1_, temb_b1_);

    auto h = stem_(x);
    std::vector<Tensor<S>> skips;
    std::size_t enc_block = 0;
    for (std::size_t l = 0; l < cfg_.levels(); ++l) {
      for (std::size_t b = 0; b < cfg_.num_res_blocks; ++b) {
        h = enc_blocks_[enc_block].forward(h, t_emb, nullptr, train, dropout_rng);
        if (cfg_.attention_at(l)) h = enc_attn_.at(enc_block)(h);
        ++enc_block;
      }
      skips.push_back(h);
      if (l + 1 < cfg_.levels()) h = downs_[l](h);
    }
    if (trace) trace->skips = skips;

    h = mid_block1_.forward(h, t_emb, nullptr, train, dropout_rng);
    if (mid_attn_) h = (*mid_attn_)(h);
    h = mid_block2_.forward(h, t_emb, nullptr, train, dropout_rng);

    std::size_t dec_block = 0;
    for (std::size_t li = cfg_.levels(); li-- > 0;) {
      h = concat_axis1(h, skips[li]);
      for (std::size_t b = 0; b < cfg_.num_res_blocks; ++b) {
        h = dec_blocks_[dec_block].forward(h, t_emb, &seg, train, dropout_rng);
        if (cfg_.attention_at(li)) h = dec_attn_.at(dec_block)(h);
        ++dec_block;
      }
      if (li > 0) {
        const auto& up = ups_[cfg_.levels() - 1 - li];
        h = upsample_nearest2x_conv(h, up.w, up.b);
      }
    }

    h = out_conv_(silu(out_norm_(h)));
    return DenoiserOutput<S>{slice_axis1(h, 0, cfg_.in_channels),
                             slice_axis1(h, cfg_.in_channels, 2 * cfg_.in_channels)};
  }

 private:
  void build(detail::Init<S>& init) {
    const std::size_t mc = cfg_.model_channels;
    const std::size_t ted = cfg_.time_embed_dim;

    temb_w0_ = init.linear_w("temb.0.w", ted, mc);
    temb_b0_ = init.zeros("temb.0.b", {ted});
    temb_w1_ = init.linear_w("temb.1.w", ted, ted);
    temb_b1_ = init.zeros("temb.1.b", {ted});

    stem_ = make_conv(init, "stem", cfg_.in_channels, mc, 3, 1, 1, false);

    std::size_t ch = mc;
    for (std::size_t l = 0; l < cfg_.levels(); ++l) {
      const std::size_t co = cfg_.channels_at(l);
      for (std::size_t b = 0; b < cfg_.num_res_blocks; ++b) {
        const std::string base = "enc.l" + std::to_string(l) + ".b" + std::to_string(b);
        enc_blocks_.push_back(make_resblock(init, base, ch, co, false));
        if (cfg_.attention_at(l)) {
          enc_attn_[enc_blocks_.size() - 1] = make_attn(init, base + ".attn", co);
        }
        ch = co;
      }
      if (l + 1 < cfg_.levels()) {
        auto down = make_conv(init, "down.l" + std::to_string(l), ch, ch, 3, 2, 1, false);
        downs_.push_back(std::move(down));
      }
    }

    mid_block1_ = make_resblock(init, "mid.b0", ch, ch, false);
    if (cfg_.attention_at(cfg_.levels() - 1)) mid_attn_ = make_attn(init, "mid.attn", ch);
    mid_block2_ = make_resblock(init, "mid.b1", ch, ch, false);

    for (std::size_t li = cfg_.levels(); li-- > 0;) {
      const std::size_t co = cfg_.channels_at(li);
      for (std::size_t b = 0; b < cfg_.num_res_blocks; ++b) {
        const std::string base = "dec.l" + std::to_string(li) + ".b" + std::to_string(b);
        const std::size_t cin = (b == 0) ? ch + co : co;
        dec_blocks_.push_back(make_resblock(init, base, cin, co, true));
        if (cfg_.attention_at(li)) {
          dec_attn_[dec_blocks_.size() - 1] = make_attn(init, base + ".attn", co);
        }
        ch = co;
      }
      if (li > 0) {
        const std::size_t cnext = cfg_.channels_at(li - 1);
        ups_.push_back(
            make_conv(init, "up.l" + std::to_string(li), ch, cnext, 3, 1, 1, false));
        ch = cnext;
      }
    }

    out_norm_ = detail::GnAffine<S>{init.ones("out.norm.gamma", {ch}),
                                    init.zeros("out.norm.beta", {ch}), default_groups(ch)};
    out_conv_ = make_conv(init, "out.conv", ch, 2 * cfg_.in_channels, 3, 1, 1, true);
  }

  detail::Conv<S> make_conv(detail::Init<S>& init, const std::string& name, std::size_t ci,
                            std::size_t co, std::size_t k, std::size_t stride, std::size_t pad,
                            bool zero) {
    detail::Conv<S> c;
    c.w = init.conv_w(name + ".w", co, ci, k, zero);
    c.b = init.zeros(name + ".b", {co});
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  detail::GnAffine<S> make_gn(detail::Init<S>& init, const std::string& name, std::size_t c) {
    return {init.ones(name + ".gamma", {c}), init.zeros(name + ".beta", {c}), default_groups(c)};
  }

  detail::Spade<S> make_spade(detail::Init<S>& init, const std::string& name, std::size_t c) {
    detail::Spade<S> s;
    s.gn_ones = Tensor<S>::ones({c});
    s.gn_zeros = Tensor<S>::zeros({c});
    s.groups = default_groups(c);
    s.shared = make_conv(init, name + ".shared", cfg_.num_classes, cfg_.spade_hidden, 3, 1, 1, false);
    s.gamma_head = make_conv(init, name + ".gamma", cfg_.spade_hidden, c, 3, 1, 1, true);
    s.beta_head = make_conv(init, name + ".beta", cfg_.spade_hidden, c, 3, 1, 1, true);
    return s;
  }

  detail::ResBlock<S> make_resblock(detail::Init<S>& init, const std::string& base, std::size_t ci,
                                    std::size_t co, bool spade) {
    detail::ResBlock<S> rb;
    rb.cin = ci;
    rb.cout = co;
    rb.use_spade = spade;
    rb.dropout = cfg_.dropout;
    if (spade) {
      rb.spade1 = make_spade(init, base + ".spade1", ci);
      rb.spade2 = make_spade(init, base + ".spade2", co);
    } else {
      rb.norm1 = make_gn(init, base + ".norm1", ci);
      rb.norm2 = make_gn(init, base + ".norm2", co);
    }
    rb.conv1 = make_conv(init, base + ".conv1", ci, co, 3, 1, 1, false);
    rb.conv2 = make_conv(init, base + ".conv2", co, co, 3, 1, 1, true);
    rb.emb_w = init.linear_w(base + ".emb.w", 2 * co, cfg_.time_embed_dim);
    rb.emb_b = init.zeros(base + ".emb.b", {2 * co});
    if (ci != co) rb.skip = make_conv(init, base + ".skip", ci, co, 1, 1, 0, false);
    return rb;
  }

  detail::AttnBlock<S> make_attn(detail::Init<S>& init, const std::string& base, std::size_t c) {
    detail::AttnBlock<S> a;
    a.norm = make_gn(init, base + ".norm", c);
    a.wts.w_qkv = init.conv_w(base + ".qkv.w", 3 * c, c, 1, false);
    a.wts.b_qkv = init.zeros(base + ".qkv.b", {3 * c});
    a.wts.w_proj = init.conv_w(base + ".proj.w", c, c, 1, true);
    a.wts.b_proj = init.zeros(base + ".proj.b", {c});
    a.head_channels = cfg_.head_channels;
    return a;
  }

  DenoiserConfig cfg_;
  ParamStore<S> store_;

  Tensor<S> temb_w0_, temb_b0_, temb_w1_, temb_b1_;
  detail::Conv<S> stem_;
  std::vector<detail::ResBlock<S>> enc_blocks_;
  std::unordered_map<std::size_t, detail::AttnBlock<S>> enc_attn_;
  std::vector<detail::Conv<S>> downs_;
  detail::ResBlock<S> mid_block1_, mid_block2_;
  std::optional<detail::AttnBlock<S>> mid_attn_;
  std::vector<detail::ResBlock<S>> dec_blocks_;
  std::unordered_map<std::size_t, detail::AttnBlock<S>> dec_attn_;
  std::vector<detail::Conv<S>> ups_;  // ups_[levels-1-li] lifts level li -> li-1
  detail::GnAffine<S> out_norm_;
  detail::Conv<S> out_conv_;
};

}  // namespace satdm
