#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "satdm/evalkit.hpp"
#include "testutil.hpp"

using namespace satdm;

TEST(FeatureExtractor, DeterministicAndShaped) {
  FeatureExtractor<float> fa(123), fb(123), fc(124);
  Rng rng(1);
  auto imgs = Tensor<float>::randn(rng, {3, 3, 32, 32});
  auto A = fa.extract(imgs);
  auto B = fb.extract(imgs);
  EXPECT_EQ(A.rows(), 3);
  EXPECT_EQ(A.cols(), 64);
  EXPECT_TRUE(A.isApprox(B));
  EXPECT_FALSE(A.isApprox(fc.extract(imgs)));

  // identical images -> identical rows
  auto one = Tensor<float>::zeros({2, 3, 32, 32});
  Rng r2(2);
  auto vals = Tensor<float>::randn(r2, {1, 3, 32, 32});
  auto d = one.mutable_data();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    d[i] = vals.at(i);
    d[vals.size() + i] = vals.at(i);
  }
  auto F = fa.extract(one);
  EXPECT_TRUE(F.row(0).isApprox(F.row(1)));
}

TEST(Frechet, ZeroOnIdenticalAndAnalytic1D) {
  Rng rng(3);
  Eigen::MatrixXd feats(80, 4);
  for (int i = 0; i < feats.size(); ++i) feats.data()[i] = rng.normal();
  EXPECT_NEAR(frechet_distance(feats, feats), 0.0, 1e-8);

  // population statistics fed directly: N(0,1) vs N(1,1) in 1-D -> 1.0
  Eigen::VectorXd mu_a(1), mu_b(1);
  Eigen::MatrixXd cov(1, 1);
  mu_a << 0.0;
  mu_b << 1.0;
  cov << 1.0;
  EXPECT_NEAR(frechet_from_moments(mu_a, cov, mu_b, cov), 1.0, 1e-12);
}

TEST(Frechet, SymmetricAndNonnegative) {
  Rng rng(4);
  Eigen::MatrixXd a(60, 5), b(70, 5);
  for (int i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (int i = 0; i < b.size(); ++i) b.data()[i] = 0.4 * rng.normal() + 0.3;
  const double ab = frechet_distance(a, b);
  const double ba = frechet_distance(b, a);
  EXPECT_NEAR(ab, ba, 1e-7 * std::max(1.0, ab));
  EXPECT_GE(ab, -1e-9);
}

TEST(Frechet, MatchesIndependentEigenSolverOracle) {
  // random 3-D moments; oracle computes tr sqrt(Sa Sb) by diagonalizing the
  // (nonsymmetric) product directly
  Rng rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::MatrixXd R1(3, 3), R2(3, 3);
    for (int i = 0; i < 9; ++i) {
      R1.data()[i] = rng.normal();
      R2.data()[i] = rng.normal();
    }
    Eigen::MatrixXd Sa = R1 * R1.transpose() + 0.1 * Eigen::MatrixXd::Identity(3, 3);
    Eigen::MatrixXd Sb = R2 * R2.transpose() + 0.1 * Eigen::MatrixXd::Identity(3, 3);
    Eigen::VectorXd mu_a = Eigen::VectorXd::Zero(3), mu_b = Eigen::VectorXd::Ones(3);

    Eigen::EigenSolver<Eigen::MatrixXd> es(Sa * Sb);
    double tr_sqrt = 0;
    for (int i = 0; i < 3; ++i) tr_sqrt += std::sqrt(std::abs(es.eigenvalues()[i].real()));
    const double oracle = (mu_a - mu_b).squaredNorm() + Sa.trace() + Sb.trace() - 2.0 * tr_sqrt;

    EXPECT_NEAR(frechet_from_moments(mu_a, Sa, mu_b, Sb), oracle, 1e-6);
  }
}

TEST(Frechet, SanityOrdering) {
  // resampled real set scores far below pure noise
  auto dir = satdm::test::make_temp_dir("eval_order");
  generate_toy_dataset(96, 32, 21, dir);
  auto ds = load_dataset(dir);
  std::vector<const TileRecord*> all;
  for (const auto& r : ds.records) all.push_back(&r);
  std::vector<const TileRecord*> half_a(all.begin(), all.begin() + 48);
  std::vector<const TileRecord*> half_b(all.begin() + 48, all.end());
  auto [imgs_a, segs_a] = encode_batch<float>(half_a);
  auto [imgs_b, segs_b] = encode_batch<float>(half_b);
  FeatureExtractor<float> fx(7);
  auto fa = fx.extract(imgs_a);
  auto fb = fx.extract(imgs_b);
  Rng rng(8);
  auto noise = clamp(Tensor<float>::randn(rng, {48, 3, 32, 32}), -1.0f, 1.0f);
  auto fn = fx.extract(noise);
  const double real_vs_real = frechet_distance(fa, fb);
  const double real_vs_noise = frechet_distance(fa, fn);
  EXPECT_LT(real_vs_real, real_vs_noise * 0.5);
}

TEST(SegmentClassical, RecoversToyMasks) {
  // fresh generator tiles: IoU against ground truth must be high
  double worst = 1.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    auto rec = generate_toy_tile(Rng(1000).fork(i), 32);
    auto pred = segment_classical(rec.image);
    worst = std::min(worst, iou_positive(pred, rec.mask));
  }
  EXPECT_GE(worst, 0.8);

  // all-terrain tile: paint from the terrain palette only
  ImageU8 terrain = ImageU8::make(32, 32, 3);
  for (std::size_t p = 0; p < 32 * 32; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      terrain.pixels[p * 3 + c] = static_cast<std::uint8_t>(ToyPalette::terrain[p % 4][c]);
  auto pred = segment_classical(terrain);
  for (auto v : pred) EXPECT_EQ(v, 0);

  // deterministic
  auto rec = generate_toy_tile(Rng(55), 32);
  EXPECT_EQ(segment_classical(rec.image), segment_classical(rec.image));
}

TEST(MIoU, ClosedFormCases) {
  std::vector<std::uint8_t> a(16, 0), b(16, 0);
  for (int i = 0; i < 4; ++i) a[i] = 1;
  EXPECT_DOUBLE_EQ(iou_positive(a, a), 1.0);
  for (int i = 4; i < 8; ++i) b[i] = 1;
  EXPECT_DOUBLE_EQ(iou_positive(a, b), 0.0);  // disjoint, equal area
  // half-overlapping equal squares: |I| = 2, |U| = 6 -> 1/3
  std::vector<std::uint8_t> c(16, 0), d(16, 0);
  for (int i = 0; i < 4; ++i) c[i] = 1;
  for (int i = 2; i < 6; ++i) d[i] = 1;
  EXPECT_DOUBLE_EQ(iou_positive(c, d), 1.0 / 3.0);
  // both empty counts as 1
  std::vector<std::uint8_t> e(16, 0);
  EXPECT_DOUBLE_EQ(iou_positive(e, e), 1.0);

  std::vector<std::vector<std::uint8_t>> preds{a, c}, truths{a, d};
  std::vector<double> per;
  const double m = miou(preds, truths, &per);
  EXPECT_DOUBLE_EQ(m, (1.0 + 1.0 / 3.0) / 2.0);
  ASSERT_EQ(per.size(), 2u);

  std::vector<std::uint8_t> shorter(8, 0);
  EXPECT_THROW(iou_positive(a, shorter), ContractError);
}

TEST(MIoU, InvariantUnderSimultaneousTransforms) {
  auto rec = generate_toy_tile(Rng(77), 32);
  auto pred = segment_classical(rec.image);
  TileRecord pred_rec = rec;
  pred_rec.mask = pred;
  const double base = iou_positive(pred, rec.mask);
  for (int k = 0; k < 4; ++k) {
    for (bool f : {false, true}) {
      auto tp = transform_tile(pred_rec, k, f);
      auto tt = transform_tile(rec, k, f);
      EXPECT_DOUBLE_EQ(iou_positive(tp.mask, tt.mask), base);
    }
  }
}

TEST(Nearest, ExactMatchAndBruteForceAgreement) {
  FeatureExtractor<float> fx(9);
  auto dir = satdm::test::make_temp_dir("eval_nn");
  generate_toy_dataset(20, 32, 31, dir);
  auto ds = load_dataset(dir);
  std::vector<const TileRecord*> all;
  std::vector<std::string> ids;
  for (const auto& r : ds.records) {
    all.push_back(&r);
    ids.push_back(r.id);
  }
  auto [imgs, segs] = encode_batch<float>(all);
  auto feats = fx.extract(imgs);

  // query = training image -> rank 1 with similarity ~1
  Eigen::MatrixXd query = feats.row(3);
  auto matches = nearest_training_sample(query, feats, ids, 5);
  ASSERT_EQ(matches.size(), 1u);
  EXPECT_EQ(matches[0][0].id, ids[3]);
  EXPECT_NEAR(matches[0][0].cosine, 1.0, 1e-9);

  // exhaustive-scan oracle agreement on a random query
  Rng rng(10);
  Eigen::MatrixXd q(1, feats.cols());
  for (int i = 0; i < q.cols(); ++i) q(0, i) = rng.normal();
  auto top = nearest_training_sample(q, feats, ids, 4)[0];
  std::vector<std::pair<double, std::string>> brute;
  for (Eigen::Index i = 0; i < feats.rows(); ++i) {
    const double c = q.row(0).dot(feats.row(i)) / (q.row(0).norm() * feats.row(i).norm());
    brute.push_back({c, ids[i]});
  }
  std::sort(brute.begin(), brute.end(), [](auto& a, auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(top[i].id, brute[i].second);
    EXPECT_NEAR(top[i].cosine, brute[i].first, 1e-12);
  }

  // orthogonal vectors -> similarity 0
  Eigen::MatrixXd e1 = Eigen::MatrixXd::Zero(1, 2), train2 = Eigen::MatrixXd::Zero(1, 2);
  e1(0, 0) = 1.0;
  train2(0, 1) = 1.0;
  auto orth = nearest_training_sample(e1, train2, {"t"}, 1);
  EXPECT_NEAR(orth[0][0].cosine, 0.0, 1e-15);
}

TEST(EvalReport, SerializesToJson) {
  EvalReport r;
  r.proxy_fid = 12.5;
  r.miou = 0.7;
  r.per_image_iou = {0.6, 0.8};
  r.nearest = {{{"tile_000001", 0.9}}};
  r.config = {{"n", 2}};
  nlohmann::json j = r;
  EXPECT_DOUBLE_EQ(j["proxy_fid"].get<double>(), 12.5);
  EXPECT_EQ(j["nearest"][0][0]["id"], "tile_000001");
}
