#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "satdm/datakit.hpp"
#include "satdm/nn.hpp"
#include "satdm/rng.hpp"

namespace satdm {

/// Fixed-seed random convolutional embedder: three conv-pool stages and a
/// global average pool to a D-dimensional vector. Never trained; the weights
/// are a pure function of the seed.
template <typename S>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed = 0xfea7ULL, std::size_t dim = 64)
      : seed_(seed), dim_(dim) {
    build();
  }

  std::uint64_t seed() const { return seed_; }
  std::size_t dim() const { return dim_; }

  /// images in [-1, 1], N x 3 x S x S with S divisible by 8.
  Eigen::MatrixXd extract(const Tensor<S>& images) const {
    NoGradGuard ng;
    if (images.rank() != 4 || images.dim(1) != 3) {
      throw ContractError("feature extractor: input must be N x 3 x S x S");
    }
    if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0) {
      throw ContractError("feature extractor: spatial extents must be divisible by 8");
    }
    Tensor<S> h = images;
    for (const auto& stage : stages_) {
      h = avgpool2x2(silu(conv2d(h, stage.w, stage.b, 1, 1)));
    }
    // global average pool
    const std::size_t n = h.dim(0), c = h.dim(1), hw = h.dim(2) * h.dim(3);
    Eigen::MatrixXd feats(n, c);
    auto d = h.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += static_cast<double>(d[(i * c + ch) * hw + p]);
        feats(i, ch) = acc / static_cast<double>(hw);
      }
    return feats;
  }

 private:
  struct Stage {
    Tensor<S> w, b;
  };

  void build() {
    Rng rng = Rng(seed_).fork(0x66656174ULL);
    const std::size_t widths[3] = {16, 32, dim_};
    std::size_t ci = 3;
    for (std::size_t s = 0; s < 3; ++s) {
      Stage st;
      st.w = Tensor<S>::zeros({widths[s], ci, 3, 3});
      rng.fill_normal(st.w.mutable_data());
      const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(ci * 9)));
      for (auto& v : st.w.mutable_data()) v *= scale;
      st.b = Tensor<S>::zeros({widths[s]});
      stages_.push_back(std::move(st));
      ci = widths[s];
    }
  }

  std::uint64_t seed_;
  std::size_t dim_;
  std::vector<Stage> stages_;
};

template <typename S>
Eigen::MatrixXd extract_features(const Tensor<S>& images, const FeatureExtractor<S>& extractor) {
  return extractor.extract(images);
}

namespace detail {

inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& feats, const Eigen::VectorXd& mu) {
  const auto n = feats.rows();
  Eigen::MatrixXd centered = feats.rowwise() - mu.transpose();
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  return centered.transpose() * centered / denom;
}

/// Symmetric PSD square root via eigendecomposition; tiny negative
/// eigenvalues are clamped, genuinely negative ones are an error.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) {
    throw NumericalError(std::string("frechet: eigendecomposition failed for ") + what);
  }
  Eigen::VectorXd vals = eig.eigenvalues();
  const double tol = 1e-8 * std::max(1.0, std::abs(vals.maxCoeff()));
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    if (vals[i] < -tol) {
      throw NumericalError(std::string("frechet: matrix not PSD after regularization (") + what +
                           ", min eigenvalue " + std::to_string(vals[i]) + ")");
    }
    vals[i] = std::sqrt(std::max(0.0, vals[i]));
  }
  return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

/// Frechet distance between Gaussian fits of two feature sets:
/// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the cross sqrt
/// computed as (Sa^{1/2} Sb Sa^{1/2})^{1/2} and 1e-6 I regularization.
inline double frechet_distance(const Eigen::MatrixXd& feats_a, const Eigen::MatrixXd& feats_b) {
  if (feats_a.cols() != feats_b.cols()) throw ContractError("frechet: feature dims differ");
  if (feats_a.rows() < 2 || feats_b.rows() < 2) throw ContractError("frechet: need >= 2 samples");
  const Eigen::VectorXd mu_a = feats_a.colwise().mean();
  const Eigen::VectorXd mu_b = feats_b.colwise().mean();
  const auto d = feats_a.cols();
  const Eigen::MatrixXd reg = 1e-6 * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd cov_a = detail::covariance(feats_a, mu_a) + reg;
  const Eigen::MatrixXd cov_b = detail::covariance(feats_b, mu_b) + reg;

  const Eigen::MatrixXd root_a = detail::psd_sqrt(cov_a, "cov_a");
  const Eigen::MatrixXd inner = root_a * cov_b * root_a;
  const Eigen::MatrixXd cross = detail::psd_sqrt(inner, "cross");

  const double mean_term = (mu_a - mu_b).squaredNorm();
  const double trace_term = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
  return mean_term + trace_term;
}

/// Gaussian-fit Frechet distance from population statistics directly.
inline double frechet_from_moments(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                                   const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
  const Eigen::MatrixXd root_a = detail::psd_sqrt(cov_a, "cov_a");
  const Eigen::MatrixXd cross = detail::psd_sqrt(root_a * cov_b * root_a, "cross");
  return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
}

// ---------------------------------------------------------------------------
// Classical color-statistics segmenter
// ---------------------------------------------------------------------------

/// Nearest-class pixel classification against the toy generator's roof and
/// terrain color statistics (shadowed terrain included), then 3x3 majority
/// smoothing. Deterministic.
inline std::vector<std::uint8_t> segment_classical(const ImageU8& image) {
  const std::size_t w = image.width, h = image.height;
  std::vector<std::uint8_t> raw(w * h, 0);
  std::vector<std::array<double, 3>> terrain_refs, roof_refs;
  for (const auto& t : ToyPalette::terrain) {
    // nominal, shaded variants of the generator's terrain field, and shadowed
    for (double f : {1.0, 0.8, 1.2, ToyPalette::shadow_factor, 0.8 * ToyPalette::shadow_factor}) {
      terrain_refs.push_back({t[0] * f, t[1] * f, t[2] * f});
    }
  }
  for (const auto& r : ToyPalette::roofs) roof_refs.push_back({double(r[0]), double(r[1]), double(r[2])});

  auto dist2 = [](const std::array<double, 3>& a, double r, double g, double b) {
    return (a[0] - r) * (a[0] - r) + (a[1] - g) * (a[1] - g) + (a[2] - b) * (a[2] - b);
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double r = image.at(y, x, 0);
      const double g = image.channels == 3 ? image.at(y, x, 1) : r;
      const double b = image.channels == 3 ? image.at(y, x, 2) : r;
      double dt = 1e300, dr = 1e300;
      for (const auto& ref : terrain_refs) dt = std::min(dt, dist2(ref, r, g, b));
      for (const auto& ref : roof_refs) dr = std::min(dr, dist2(ref, r, g, b));
      raw[y * w + x] = dr < dt ? 1 : 0;
    }
  }
  // 3x3 majority smoothing
  std::vector<std::uint8_t> out(w * h, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      int votes = 0, cells = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
          ++cells;
          votes += raw[yy * w + xx];
        }
      out[y * w + x] = 2 * votes > cells ? 1 : 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// IoU
// ---------------------------------------------------------------------------

inline double iou_positive(const std::vector<std::uint8_t>& pred,
                           const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size()) throw ContractError("iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean IoU of the positive class over paired masks.
inline double miou(const std::vector<std::vector<std::uint8_t>>& preds,
                   const std::vector<std::vector<std::uint8_t>>& truths,
                   std::vector<double>* per_image = nullptr) {
  if (preds.size() != truths.size() || preds.empty()) throw ContractError("miou: size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double v = iou_positive(preds[i], truths[i]);
    if (per_image) per_image->push_back(v);
    acc += v;
  }
  return acc / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Nearest-training-sample search
// ---------------------------------------------------------------------------

struct NeighborMatch {
  std::string id;
  double cosine = 0;
};

/// Top-k training rows by cosine similarity for each query row.
inline std::vector<std::vector<NeighborMatch>> nearest_training_sample(
    const Eigen::MatrixXd& query_feats, const Eigen::MatrixXd& train_feats,
    const std::vector<std::string>& train_ids, std::size_t k) {
  if (train_feats.rows() != static_cast<Eigen::Index>(train_ids.size())) {
    throw ContractError("nearest: ids do not match feature rows");
  }
  if (query_feats.cols() != train_feats.cols()) throw ContractError("nearest: feature dims differ");
  k = std::min<std::size_t>(k, train_ids.size());
  std::vector<std::vector<NeighborMatch>> out(query_feats.rows());
  for (Eigen::Index q = 0; q < query_feats.rows(); ++q) {
    const Eigen::VectorXd qv = query_feats.row(q);
    const double qn = qv.norm();
    std::vector<NeighborMatch> all(train_ids.size());
    for (Eigen::Index i = 0; i < train_feats.rows(); ++i) {
      const Eigen::VectorXd tv = train_feats.row(i);
      const double denom = qn * tv.norm();
      all[i] = {train_ids[i], denom > 0 ? qv.dot(tv) / denom : 0.0};
    }
    std::partial_sort(all.begin(), all.begin() + k, all.end(),
                      [](const NeighborMatch& a, const NeighborMatch& b) {
                        return a.cosine > b.cosine || (a.cosine == b.cosine && a.id < b.id);
                      });
    out[q].assign(all.begin(), all.begin() + k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalReport {
  double proxy_fid = 0;
  double miou = 0;
  std::vector<double> per_image_iou;
  std::vector<std::vector<NeighborMatch>> nearest;
  nlohmann::json config;
};

inline void to_json(nlohmann::json& j, const NeighborMatch& m) {
  j = {{"id", m.id}, {"cosine", m.cosine}};
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"proxy_fid", r.proxy_fid},
       {"miou", r.miou},
       {"per_image_iou", r.per_image_iou},
       {"nearest", r.nearest},
       {"config", r.config}};
}

}  // namespace satdm
