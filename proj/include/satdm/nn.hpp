#pragma once

#include <Eigen/Core>
#include <cstring>
#include <memory>
#include <vector>

#include "satdm/tensor.hpp"

namespace satdm {

namespace detail {

template <typename S>
using RowMajorMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Reusable per-thread scratch for the conv lowering buffers; avoids
/// re-faulting multi-megabyte allocations on every call.
enum class Scratch { cols, ymat, dcols };

template <typename S>
S* scratch_buffer(Scratch which, std::size_t n) {
  thread_local std::vector<S> bufs[3];
  auto& b = bufs[static_cast<int>(which)];
  if (b.size() < n) b.resize(n);
  return b.data();
}

/// C (MxN) = A (MxK) * B (KxN), row-major buffers. accumulate adds into C.
template <typename S>
void gemm(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate = false) {
  Eigen::Map<const RowMajorMat<S>> A(a, m, k);
  Eigen::Map<const RowMajorMat<S>> B(b, k, n);
  Eigen::Map<RowMajorMat<S>> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  // C (MxN) = A^T (MxK) * B (KxN) where A is stored (KxM)
  Eigen::Map<const RowMajorMat<S>> A(a, k, m);
  Eigen::Map<const RowMajorMat<S>> B(b, k, n);
  Eigen::Map<RowMajorMat<S>> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  // C (MxN) = A (MxK) * B^T (KxN) where B is stored (NxK)
  Eigen::Map<const RowMajorMat<S>> A(a, m, k);
  Eigen::Map<const RowMajorMat<S>> B(b, n, k);
  Eigen::Map<RowMajorMat<S>> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

struct ConvDims {
  std::size_t n, ci, h, w, co, k;
  std::size_t stride, pad;
  std::size_t oh, ow;
  std::size_t patch() const { return ci * k * k; }
  std::size_t ocols() const { return n * oh * ow; }
};

template <typename S>
ConvDims conv_dims(const Tensor<S>& x, const Tensor<S>& w, std::size_t stride, std::size_t pad) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  if (w.rank() != 4) throw DimensionError("conv2d: weight must be OIkk, got " + shape_str(w.shape()));
  ConvDims d;
  d.n = x.dim(0);
  d.ci = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = w.dim(0);
  d.k = w.dim(2);
  d.stride = stride;
  d.pad = pad;
  if (w.dim(3) != d.k) throw DimensionError("conv2d: kernel must be square");
  if (d.k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(d.k));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (w.dim(1) != d.ci) {
    throw DimensionError("conv2d: input channels " + std::to_string(d.ci) +
                         " do not match kernel channels " + std::to_string(w.dim(1)));
  }
  if (d.h + 2 * pad < d.k || d.w + 2 * pad < d.k) {
    throw DimensionError("conv2d: spatial extent too small for kernel");
  }
  d.oh = (d.h + 2 * pad - d.k) / stride + 1;
  d.ow = (d.w + 2 * pad - d.k) / stride + 1;
  return d;
}

/// Unfolds x into a (ci*k*k) x (n*oh*ow) row-major patch matrix.
template <typename S>
void im2col(const S* x, const ConvDims& d, S* cols) {
  const std::size_t ohw = d.oh * d.ow;
  const std::size_t ncols = d.ocols();
  const std::size_t rows = d.patch();
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < static_cast<long long>(rows); ++r) {
    const std::size_t ci = r / (d.k * d.k);
    const std::size_t kh = (r / d.k) % d.k;
    const std::size_t kw = r % d.k;
    S* dst = cols + r * ncols;
    for (std::size_t n = 0; n < d.n; ++n) {
      const S* src = x + (n * d.ci + ci) * d.h * d.w;
      for (std::size_t oh = 0; oh < d.oh; ++oh) {
        const long long ih = static_cast<long long>(oh * d.stride + kh) - static_cast<long long>(d.pad);
        S* row = dst + n * ohw + oh * d.ow;
        if (ih < 0 || ih >= static_cast<long long>(d.h)) {
          std::fill(row, row + d.ow, S(0));
          continue;
        }
        for (std::size_t ow = 0; ow < d.ow; ++ow) {
          const long long iw = static_cast<long long>(ow * d.stride + kw) - static_cast<long long>(d.pad);
          row[ow] = (iw < 0 || iw >= static_cast<long long>(d.w)) ? S(0) : src[ih * d.w + iw];
        }
      }
    }
  }
}

/// Folds a (ci*k*k) x (n*oh*ow) patch-gradient matrix back onto dx (additive).
template <typename S>
void col2im_accum(const S* cols, const ConvDims& d, S* dx) {
  const std::size_t ohw = d.oh * d.ow;
  const std::size_t ncols = d.ocols();
  const std::size_t rows = d.patch();
#pragma omp parallel for schedule(static)
  for (long long n = 0; n < static_cast<long long>(d.n); ++n) {
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t ci = r / (d.k * d.k);
      const std::size_t kh = (r / d.k) % d.k;
      const std::size_t kw = r % d.k;
      const S* src = cols + r * ncols + n * ohw;
      S* dst = dx + (n * d.ci + ci) * d.h * d.w;
      for (std::size_t oh = 0; oh < d.oh; ++oh) {
        const long long ih = static_cast<long long>(oh * d.stride + kh) - static_cast<long long>(d.pad);
        if (ih < 0 || ih >= static_cast<long long>(d.h)) continue;
        for (std::size_t ow = 0; ow < d.ow; ++ow) {
          const long long iw = static_cast<long long>(ow * d.stride + kw) - static_cast<long long>(d.pad);
          if (iw < 0 || iw >= static_cast<long long>(d.w)) continue;
          dst[ih * d.w + iw] += src[oh * d.ow + ow];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, std::size_t stride,
                 std::size_t pad) {
  const auto d = detail::conv_dims(x, w, stride, pad);
  if (b.size() != d.co) {
    throw DimensionError("conv2d: bias length " + std::to_string(b.size()) +
                         " does not match output channels " + std::to_string(d.co));
  }
  const std::size_t ohw = d.oh * d.ow;
  const std::size_t ncols = d.ocols();

  S* cols = detail::scratch_buffer<S>(detail::Scratch::cols, d.patch() * ncols);
  detail::im2col(x.data().data(), d, cols);

  // y_mat (co x n*ohw) = w_mat (co x patch) * cols, then scatter to NCHW.
  S* ymat = detail::scratch_buffer<S>(detail::Scratch::ymat, d.co * ncols);
  detail::gemm(w.data().data(), cols, ymat, d.co, d.patch(), ncols);

  std::vector<S> out(d.n * d.co * ohw);
  const S* bias = b.data().data();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.co; ++o) {
      const S* src = ymat + o * ncols + n * ohw;
      S* dst = out.data() + (n * d.co + o) * ohw;
      const S bo = bias[o];
      for (std::size_t i = 0; i < ohw; ++i) dst[i] = src[i] + bo;
    }
  }

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return detail::make_op<S>(
      "conv2d", Shape{d.n, d.co, d.oh, d.ow}, std::move(out), {&x, &w, &b},
      [xn, wn, bn, d](auto& self) {
        const std::size_t ohw = d.oh * d.ow;
        const std::size_t ncols = d.ocols();
        // gather dY into (co x n*ohw)
        S* dy = detail::scratch_buffer<S>(detail::Scratch::ymat, d.co * ncols);
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t o = 0; o < d.co; ++o)
            std::memcpy(dy + o * ncols + n * ohw, self.grad.data() + (n * d.co + o) * ohw,
                        ohw * sizeof(S));
        if (bn->needs_grad) {
          auto g = bn->ensure_grad();
          for (std::size_t o = 0; o < d.co; ++o) {
            S acc(0);
            const S* row = dy + o * ncols;
            for (std::size_t i = 0; i < ncols; ++i) acc += row[i];
            g[o] += acc;
          }
        }
        if (wn->needs_grad) {
          S* cols = detail::scratch_buffer<S>(detail::Scratch::cols, d.patch() * ncols);
          detail::im2col(xn->data.data(), d, cols);
          // dW (co x patch) = dY (co x ncols) * cols^T (ncols x patch)
          detail::gemm_nt(dy, cols, wn->ensure_grad().data(), d.co, ncols, d.patch(),
                          /*accumulate=*/true);
        }
        if (xn->needs_grad) {
          // dCols (patch x ncols) = W^T (patch x co) * dY (co x ncols)
          S* dcols = detail::scratch_buffer<S>(detail::Scratch::dcols, d.patch() * ncols);
          detail::gemm_tn(wn->data.data(), dy, dcols, d.patch(), d.co, ncols);
          detail::col2im_accum(dcols, d, xn->ensure_grad().data());
        }
      });
}

// ---------------------------------------------------------------------------
// group_norm
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, std::size_t groups, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-5)) {
  if (x.rank() != 4) throw DimensionError("group_norm: input must be NCHW");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                      std::to_string(groups));
  }
  if (gamma.size() != c || beta.size() != c) {
    throw DimensionError("group_norm: gamma/beta must have C elements");
  }
  const std::size_t cpg = c / groups;
  const std::size_t m = cpg * hw;  // elements per (sample, group)

  auto stats = std::make_shared<std::vector<S>>(2 * n * groups);  // mean, invstd interleaved
  std::vector<S> out(x.size());
  const S* xd = x.data().data();
  const S* gd = gamma.data().data();
  const S* bd = beta.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < groups; ++g) {
      const S* base = xd + (i * c + g * cpg) * hw;
      S mu(0);
      for (std::size_t j = 0; j < m; ++j) mu += base[j];
      mu /= static_cast<S>(m);
      S var(0);
      for (std::size_t j = 0; j < m; ++j) {
        const S dxx = base[j] - mu;
        var += dxx * dxx;
      }
      var /= static_cast<S>(m);
      const S istd = S(1) / std::sqrt(var + eps);
      (*stats)[2 * (i * groups + g)] = mu;
      (*stats)[2 * (i * groups + g) + 1] = istd;
      S* ob = out.data() + (i * c + g * cpg) * hw;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const S ga = gd[g * cpg + cc], be = bd[g * cpg + cc];
        const S* xp = base + cc * hw;
        S* op = ob + cc * hw;
        for (std::size_t j = 0; j < hw; ++j) op[j] = (xp[j] - mu) * istd * ga + be;
      }
    }
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_op<S>(
      "group_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, stats, n, c, hw, groups, cpg, m](auto& self) {
        const S* xd = xn->data.data();
        const S* gd = gn->data.data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t g = 0; g < groups; ++g) {
            const S mu = (*stats)[2 * (i * groups + g)];
            const S istd = (*stats)[2 * (i * groups + g) + 1];
            const S* xb = xd + (i * c + g * cpg) * hw;
            const S* dyb = self.grad.data() + (i * c + g * cpg) * hw;
            // accumulate group statistics of dxhat
            S sum_dxh(0), sum_dxh_xh(0);
            for (std::size_t cc = 0; cc < cpg; ++cc) {
              const S ga = gd[g * cpg + cc];
              for (std::size_t j = 0; j < hw; ++j) {
                const S xh = (xb[cc * hw + j] - mu) * istd;
                const S dxh = dyb[cc * hw + j] * ga;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
              }
            }
            const S mean_dxh = sum_dxh / static_cast<S>(m);
            const S mean_dxh_xh = sum_dxh_xh / static_cast<S>(m);
            if (xn->needs_grad) {
              auto gx = xn->ensure_grad();
              S* gxb = gx.data() + (i * c + g * cpg) * hw;
              for (std::size_t cc = 0; cc < cpg; ++cc) {
                const S ga = gd[g * cpg + cc];
                for (std::size_t j = 0; j < hw; ++j) {
                  const S xh = (xb[cc * hw + j] - mu) * istd;
                  const S dxh = dyb[cc * hw + j] * ga;
                  gxb[cc * hw + j] += istd * (dxh - mean_dxh - xh * mean_dxh_xh);
                }
              }
            }
            if (gn->needs_grad || bn->needs_grad) {
              for (std::size_t cc = 0; cc < cpg; ++cc) {
                S dg(0), db(0);
                for (std::size_t j = 0; j < hw; ++j) {
                  const S xh = (xb[cc * hw + j] - mu) * istd;
                  dg += dyb[cc * hw + j] * xh;
                  db += dyb[cc * hw + j];
                }
                if (gn->needs_grad) gn->ensure_grad()[g * cpg + cc] += dg;
                if (bn->needs_grad) bn->ensure_grad()[g * cpg + cc] += db;
              }
            }
          }
        }
      });
}

/// Largest divisor of c that is <= 32; the network's default grouping.
inline std::size_t default_groups(std::size_t c) {
  std::size_t g = std::min<std::size_t>(32, c);
  while (c % g != 0) --g;
  return g;
}

// ---------------------------------------------------------------------------
// Batched matmul (rank-3)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: inputs must be rank-3 with matching batch");
  }
  const std::size_t bs = a.dim(0);
  const std::size_t m = trans_a ? a.dim(2) : a.dim(1);
  const std::size_t k = trans_a ? a.dim(1) : a.dim(2);
  const std::size_t kb = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  if (k != kb) throw DimensionError("bmm: inner extents disagree");

  std::vector<S> out(bs * m * n);
  const S* ad = a.data().data();
  const S* bd = b.data().data();
  const std::size_t asz = a.dim(1) * a.dim(2), bsz = b.dim(1) * b.dim(2);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(bs); ++i) {
    const S* ap = ad + i * asz;
    const S* bp = bd + i * bsz;
    S* cp = out.data() + i * m * n;
    if (!trans_a && !trans_b)
      detail::gemm(ap, bp, cp, m, k, n);
    else if (trans_a && !trans_b)
      detail::gemm_tn(ap, bp, cp, m, k, n);
    else if (!trans_a && trans_b)
      detail::gemm_nt(ap, bp, cp, m, k, n);
    else {
      // A^T * B^T = (B*A)^T, rare; compute directly via Eigen
      Eigen::Map<const detail::RowMajorMat<S>> A(ap, k, m);
      Eigen::Map<const detail::RowMajorMat<S>> B(bp, n, k);
      Eigen::Map<detail::RowMajorMat<S>> C(cp, m, n);
      C.noalias() = A.transpose() * B.transpose();
    }
  }

  auto an = a.node(), bn = b.node();
  return detail::make_op<S>(
      "bmm", Shape{bs, m, n}, std::move(out), {&a, &b},
      [an, bn, bs, m, k, n, asz, bsz, trans_a, trans_b](auto& self) {
        for (std::size_t i = 0; i < bs; ++i) {
          const S* dy = self.grad.data() + i * m * n;
          const S* ap = an->data.data() + i * asz;
          const S* bp = bn->data.data() + i * bsz;
          if (an->needs_grad) {
            S* da = an->ensure_grad().data() + i * asz;
            // dA_eff = dY * B_eff^T ; map back through trans_a
            if (!trans_a) {
              if (!trans_b)
                detail::gemm_nt(dy, bp, da, m, n, k, true);
              else
                detail::gemm(dy, bp, da, m, n, k, true);
            } else {
              // dA_stored = (dA_eff)^T = B_eff * dY^T
              if (!trans_b) {
                // B_eff = B (k x n): dA_stored (k x m) = B * dY^T
                detail::gemm_nt(bp, dy, da, k, n, m, true);
              } else {
                // B_eff = B^T with B stored (n x k): dA_stored = B^T * dY^T
                Eigen::Map<const detail::RowMajorMat<S>> B(bp, n, k);
                Eigen::Map<const detail::RowMajorMat<S>> DY(dy, m, n);
                Eigen::Map<detail::RowMajorMat<S>> DA(da, k, m);
                DA.noalias() += B.transpose() * DY.transpose();
              }
            }
          }
          if (bn->needs_grad) {
            S* db = bn->ensure_grad().data() + i * bsz;
            // dB_eff = A_eff^T * dY ; map back through trans_b
            if (!trans_b) {
              if (!trans_a)
                detail::gemm_tn(ap, dy, db, k, m, n, true);
              else
                detail::gemm(ap, dy, db, k, m, n, true);
            } else {
              // dB_stored = (dB_eff)^T = dY^T * A_eff
              if (!trans_a) {
                // A_eff = A (m x k): dB_stored (n x k) = dY^T * A
                detail::gemm_tn(dy, ap, db, n, m, k, true);
              } else {
                Eigen::Map<const detail::RowMajorMat<S>> A(ap, k, m);
                Eigen::Map<const detail::RowMajorMat<S>> DY(dy, m, n);
                Eigen::Map<detail::RowMajorMat<S>> DB(db, n, k);
                DB.noalias() += DY.transpose() * A.transpose();
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y (N x O) = x (N x F) * w^T (F x O) + b (O)
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 2 || w.rank() != 2) throw DimensionError("linear: x and w must be rank-2");
  const std::size_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
  if (w.dim(1) != f) throw DimensionError("linear: feature extents disagree");
  if (b.size() != o) throw DimensionError("linear: bias length mismatch");
  std::vector<S> out(n * o);
  detail::gemm_nt(x.data().data(), w.data().data(), out.data(), n, f, o);
  const S* bd = b.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) out[i * o + j] += bd[j];
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return detail::make_op<S>("linear", Shape{n, o}, std::move(out), {&x, &w, &b},
                            [xn, wn, bn, n, f, o](auto& self) {
                              const S* dy = self.grad.data();
                              if (xn->needs_grad)
                                detail::gemm(dy, wn->data.data(), xn->ensure_grad().data(), n, o, f,
                                             true);
                              if (wn->needs_grad)
                                detail::gemm_tn(dy, xn->data.data(), wn->ensure_grad().data(), o, n,
                                                f, true);
                              if (bn->needs_grad) {
                                auto g = bn->ensure_grad();
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < o; ++j) g[j] += dy[i * o + j];
                              }
                            });
}

// ---------------------------------------------------------------------------
// FiLM-style per-channel modulation: out = h * (1 + scale) + shift
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> scale_shift_channels(const Tensor<S>& h, const Tensor<S>& scale, const Tensor<S>& shift) {
  if (h.rank() != 4) throw DimensionError("scale_shift_channels: h must be NCHW");
  const std::size_t n = h.dim(0), c = h.dim(1), hw = h.dim(2) * h.dim(3);
  if (scale.rank() != 2 || scale.dim(0) != n || scale.dim(1) != c || shift.shape() != scale.shape()) {
    throw DimensionError("scale_shift_channels: scale/shift must be (N,C)");
  }
  std::vector<S> out(h.size());
  const S* hd = h.data().data();
  const S* sd = scale.data().data();
  const S* td = shift.data().data();
  for (std::size_t i = 0; i < n * c; ++i) {
    const S s1 = S(1) + sd[i], t = td[i];
    const S* hp = hd + i * hw;
    S* op = out.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) op[j] = hp[j] * s1 + t;
  }
  auto hn = h.node(), sn = scale.node(), tn = shift.node();
  return detail::make_op<S>("scale_shift", h.shape(), std::move(out), {&h, &scale, &shift},
                            [hn, sn, tn, n, c, hw](auto& self) {
                              for (std::size_t i = 0; i < n * c; ++i) {
                                const S* dy = self.grad.data() + i * hw;
                                if (hn->needs_grad) {
                                  const S s1 = S(1) + sn->data[i];
                                  S* gh = hn->ensure_grad().data() + i * hw;
                                  for (std::size_t j = 0; j < hw; ++j) gh[j] += dy[j] * s1;
                                }
                                if (sn->needs_grad) {
                                  const S* hp = hn->data.data() + i * hw;
                                  S acc(0);
                                  for (std::size_t j = 0; j < hw; ++j) acc += dy[j] * hp[j];
                                  sn->ensure_grad()[i] += acc;
                                }
                                if (tn->needs_grad) {
                                  S acc(0);
                                  for (std::size_t j = 0; j < hw; ++j) acc += dy[j];
                                  tn->ensure_grad()[i] += acc;
                                }
                              }
                            });
}

// ---------------------------------------------------------------------------
// Spatial resampling
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> upsample_nearest2x(const Tensor<S>& x) {
  if (x.rank() != 4) throw DimensionError("upsample_nearest2x: input must be NCHW");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<S> out(x.size() * 4);
  const S* xd = x.data().data();
  for (std::size_t i = 0; i < nc; ++i) {
    const S* src = xd + i * h * w;
    S* dst = out.data() + i * 4 * h * w;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t cc = 0; cc < w; ++cc) {
        const S v = src[r * w + cc];
        S* p = dst + (2 * r) * (2 * w) + 2 * cc;
        p[0] = v;
        p[1] = v;
        p[2 * w] = v;
        p[2 * w + 1] = v;
      }
    }
  }
  auto xn = x.node();
  return detail::make_op<S>("upsample_nearest2x", Shape{x.dim(0), x.dim(1), 2 * h, 2 * w},
                            std::move(out), {&x}, [xn, nc, h, w](auto& self) {
                              if (!xn->needs_grad) return;
                              auto g = xn->ensure_grad();
                              for (std::size_t i = 0; i < nc; ++i) {
                                const S* dy = self.grad.data() + i * 4 * h * w;
                                S* gx = g.data() + i * h * w;
                                for (std::size_t r = 0; r < h; ++r)
                                  for (std::size_t cc = 0; cc < w; ++cc) {
                                    const S* p = dy + (2 * r) * (2 * w) + 2 * cc;
                                    gx[r * w + cc] += p[0] + p[1] + p[2 * w] + p[2 * w + 1];
                                  }
                              }
                            });
}

/// 2x2 average pooling (even extents required).
template <typename S>
Tensor<S> avgpool2x2(const Tensor<S>& x) {
  if (x.rank() != 4) throw DimensionError("avgpool2x2: input must be NCHW");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw DimensionError("avgpool2x2: extents must be even");
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<S> out(nc * oh * ow);
  const S* xd = x.data().data();
  for (std::size_t i = 0; i < nc; ++i) {
    const S* src = xd + i * h * w;
    S* dst = out.data() + i * oh * ow;
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        const S* p = src + (2 * r) * w + 2 * c;
        dst[r * ow + c] = static_cast<S>(0.25) * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  }
  auto xn = x.node();
  return detail::make_op<S>("avgpool2x2", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                            [xn, nc, h, w, oh, ow](auto& self) {
                              if (!xn->needs_grad) return;
                              auto g = xn->ensure_grad();
                              for (std::size_t i = 0; i < nc; ++i) {
                                const S* dy = self.grad.data() + i * oh * ow;
                                S* gx = g.data() + i * h * w;
                                for (std::size_t r = 0; r < oh; ++r)
                                  for (std::size_t c = 0; c < ow; ++c) {
                                    const S v = static_cast<S>(0.25) * dy[r * ow + c];
                                    S* p = gx + (2 * r) * w + 2 * c;
                                    p[0] += v;
                                    p[1] += v;
                                    p[w] += v;
                                    p[w + 1] += v;
                                  }
                              }
                            });
}

/// Nearest-neighbor 2x upscale followed by a 3x3 stride-1 convolution.
template <typename S>
Tensor<S> upsample_nearest2x_conv(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return conv2d(upsample_nearest2x(x), w, b, 1, 1);
}

/// 3x3 convolution with stride 2, halving spatial extents.
template <typename S>
Tensor<S> downsample_stride2_conv(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (w.dim(2) != 3) throw ConfigError("downsample_stride2_conv expects a 3x3 kernel");
  return conv2d(x, w, b, 2, 1);
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over flattened spatial positions
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionWeights {
  Tensor<S> w_qkv, b_qkv;  // (3C x C x 1 x 1), (3C)
  Tensor<S> w_proj, b_proj;  // (C x C x 1 x 1), (C)
};

/// QKV attention without the residual; input is the (already normalized)
/// feature map. Softmax over flattened spatial positions per head, scaled
/// by 1/sqrt(head_channels).
template <typename S>
Tensor<S> attention_core(const Tensor<S>& x, std::size_t head_channels,
                         const AttentionWeights<S>& wts) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (head_channels == 0 || c % head_channels != 0) {
    throw ConfigError("attention: channels " + std::to_string(c) +
                      " not divisible by head_channels " + std::to_string(head_channels));
  }
  const std::size_t heads = c / head_channels;
  const std::size_t hw = h * w;
  auto qkv = conv2d(x, wts.w_qkv, wts.b_qkv, 1, 0);  // N x 3C x H x W
  auto q = reshape(slice_axis1(qkv, 0, c), {n * heads, head_channels, hw});
  auto k = reshape(slice_axis1(qkv, c, 2 * c), {n * heads, head_channels, hw});
  auto v = reshape(slice_axis1(qkv, 2 * c, 3 * c), {n * heads, head_channels, hw});
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_channels)));
  auto scores = mul_scalar(bmm(q, k, true, false), scale);  // (NH, hw, hw)
  auto attn = softmax_lastdim(scores);
  auto mixed = bmm(v, attn, false, true);  // (NH, d, hw)
  auto merged = reshape(mixed, {n, c, h, w});
  return conv2d(merged, wts.w_proj, wts.b_proj, 1, 0);
}

/// Residual self-attention: out = x + proj(attend(x)).
template <typename S>
Tensor<S> self_attention(const Tensor<S>& x, std::size_t head_channels,
                         const AttentionWeights<S>& wts) {
  return add(x, attention_core(x, head_channels, wts));
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep embedding
// ---------------------------------------------------------------------------

/// (N x dim) embedding: first half sin, second half cos, frequencies
/// 10000^(-i/half). Constant w.r.t. the graph.
template <typename S>
Tensor<S> timestep_embedding(std::span<const int> ts, std::size_t dim) {
  if (dim % 2 != 0) throw ConfigError("timestep_embedding: dim must be even");
  const std::size_t half = dim / 2;
  std::vector<S> out(ts.size() * dim);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                   static_cast<double>(half));
      const double arg = static_cast<double>(ts[i]) * freq;
      out[i * dim + j] = static_cast<S>(std::sin(arg));
      out[i * dim + half + j] = static_cast<S>(std::cos(arg));
    }
  }
  return Tensor<S>::from(std::move(out), {ts.size(), dim});
}

}  // namespace satdm
