#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "ssd/metrics.hpp"
#include "test_support.hpp"

using namespace ssd;
using testing_support::TempDir;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0,
                     double shift = 0.0) {
  Matrix m(rows, cols);
  Rng rng(seed);
  std::vector<double> z(std::size_t(rows * cols));
  fill_standard_normal(std::span<double>(z), rng);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = shift + scale * z[std::size_t(i * cols + j)];
  return m;
}

oracle::Mat to_mat(const Matrix& m) {
  oracle::Mat out = oracle::zeros(std::size_t(m.rows()), std::size_t(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[std::size_t(i)][std::size_t(j)] = m(i, j);
  return out;
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

double relative_frobenius(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

Matrix random_psd(Eigen::Index n, std::uint64_t seed) {
  const Matrix a = random_matrix(n, n, seed);
  return a.transpose() * a;
}

std::vector<RealImage> blob_images(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<RealImage> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(to_real(testing_support::blob_image(size, seed * 7919 + i)));
  return out;
}

RealImage with_checkerboard(RealImage img, std::size_t cell, double amplitude) {
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double sign = ((y / cell + x / cell) % 2) ? 1.0 : -1.0;
        img.at(y, x, c) = std::clamp(img.at(y, x, c) + sign * amplitude, 0.0, 255.0);
      }
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// Feature extraction

TEST(PatchStats, ConstantImageHasClosedFormRow) {
  PatchStatsExtractor ex;
  RealImage img(32, 32);
  for (std::size_t i = 0; i < 32 * 32; ++i) {
    img.pixels[i * 3] = 51.0;
    img.pixels[i * 3 + 1] = 102.0;
    img.pixels[i * 3 + 2] = 255.0;
  }
  std::vector<double> row(ex.dim());
  ex.extract(img, row.data());
  const double level[3] = {0.2, 0.4, 1.0};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t q = 0; q < 4; ++q) {
      EXPECT_NEAR(row[c * 8 + q * 2], level[c], 1e-12);
      EXPECT_NEAR(row[c * 8 + q * 2 + 1], 0.0, 1e-12);
    }
    EXPECT_NEAR(row[24 + c * 4], level[c], 1e-12);
    for (std::size_t k = 1; k < 4; ++k) EXPECT_NEAR(row[24 + c * 4 + k], 0.0, 1e-12);
  }
}

TEST(PatchStats, TwoToneImageMoments) {
  // Left half 0, right half 255 in every channel.
  PatchStatsExtractor ex;
  RealImage img(32, 32);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 16; x < 32; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = 255.0;
  std::vector<double> row(ex.dim());
  ex.extract(img, row.data());
  EXPECT_EQ(row[0], 0.0);  // top-left quadrant mean
  EXPECT_EQ(row[2], 1.0);  // top-right quadrant mean
  EXPECT_NEAR(row[24], 0.5, 1e-15);
  EXPECT_NEAR(row[25], 0.25, 1e-15);
  EXPECT_NEAR(row[26], 0.0, 1e-15);
  EXPECT_NEAR(row[27], 0.0625, 1e-15);
}

TEST(ExtractFeatures, RowsFollowInputOrder) {
  PatchStatsExtractor ex;
  auto images = blob_images(6, 32, 1);
  const Matrix f = extract_features(images, ex);
  ASSERT_EQ(f.rows(), 6);
  ASSERT_EQ(f.cols(), 36);
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<RealImage> shuffled;
  for (auto i : perm) shuffled.push_back(images[i]);
  const Matrix g = extract_features(shuffled, ex);
  for (std::size_t k = 0; k < perm.size(); ++k) EXPECT_EQ(g.row(Eigen::Index(k)), f.row(Eigen::Index(perm[k])));
  images.push_back(images[0]);
  const Matrix h = extract_features(images, ex);
  EXPECT_EQ(h.row(6), h.row(0));
  images.push_back(RealImage(31, 32));
  EXPECT_THROW(extract_features(images, ex), ArgumentError);
}

TEST(Extractor, FactoryNamesAndErrors) {
  EXPECT_EQ(make_extractor("toy")->name(), "patch-stats");
  EXPECT_EQ(make_extractor("patch-stats")->dim(), 36u);
  EXPECT_THROW(make_extractor("inception"), ArgumentError);
  EXPECT_THROW(make_extractor("plugin:"), ArgumentError);
  EXPECT_THROW(make_extractor("plugin:/nonexistent/lib.so"), IoError);
}

TEST(Extractor, PluginIsLoadedThroughTheCAbi) {
  const auto ex = make_extractor(std::string("plugin:") + SSD_TEST_PLUGIN);
  EXPECT_EQ(ex->name(), "test-mean");
  EXPECT_EQ(ex->dim(), 3u);
  EXPECT_EQ(ex->input_size(), 8u);
  std::vector<RealImage> images{RealImage(8, 8, 51.0), RealImage(8, 8, 255.0)};
  const Matrix f = extract_features(images, *ex);
  EXPECT_NEAR(f(0, 1), 0.2, 1e-15);
  EXPECT_NEAR(f(1, 2), 1.0, 1e-15);
  const auto scaled = make_extractor(std::string("plugin:") + SSD_TEST_PLUGIN + ",4");
  EXPECT_NEAR(extract_features(images, *scaled)(0, 0), 0.8, 1e-15);
  EXPECT_THROW(make_extractor(std::string("plugin:") + SSD_TEST_PLUGIN + ",-1"), ArgumentError);
  // Larger inputs are resized to the plugin's declared size.
  const auto m = features_at(blob_images(2, 40, 2), *ex, ResizeMode::clean_antialiased);
  EXPECT_EQ(m.rows(), 2);
}

// ---------------------------------------------------------------------------
// Gaussian statistics and the PSD square root

TEST(GaussianStats, HandArithmetic) {
  Matrix two(2, 1);
  two << 0.0, 2.0;
  const auto s = gaussian_stats(two);
  EXPECT_DOUBLE_EQ(s.mu(0), 1.0);
  EXPECT_DOUBLE_EQ(s.sigma(0, 0), 2.0);
  Matrix same(5, 3);
  for (Eigen::Index i = 0; i < 5; ++i) same.row(i) << 1.0, -2.0, 3.5;
  EXPECT_EQ(gaussian_stats(same).sigma, Matrix::Zero(3, 3));
  EXPECT_THROW(gaussian_stats(Matrix(1, 3)), ArgumentError);
}

TEST(GaussianStats, StandardNormalSampleIsNearIdentity) {
  const auto s = gaussian_stats(random_matrix(10000, 4, 3));
  EXPECT_LT((s.sigma - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 0.1);
  EXPECT_LT(s.mu.cwiseAbs().maxCoeff(), 0.1);
  EXPECT_LT((s.sigma - s.sigma.transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(MatrixSqrt, DiagonalAndIdentity) {
  EXPECT_LT((matrix_sqrt_psd(Matrix::Identity(5, 5)) - Matrix::Identity(5, 5)).norm(), 1e-14);
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 4.0;
  d(1, 1) = 9.0;
  const Matrix r = matrix_sqrt_psd(d);
  EXPECT_NEAR(r(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(r(1, 1), 3.0, 1e-14);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-14);
}

TEST(MatrixSqrt, ReconstructsRandomPsdAndMatchesJacobiOracle) {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    const Matrix a = random_psd(6, seed);
    const Matrix b = matrix_sqrt_psd(a);
    EXPECT_LT(relative_frobenius(b * b, a), 1e-6);
    EXPECT_LT((b - b.transpose()).norm(), 1e-12);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(b).eigenvalues().minCoeff(), -1e-12);
    const auto o = oracle::sqrt_psd(to_mat(a));
    for (Eigen::Index i = 0; i < 6; ++i)
      for (Eigen::Index j = 0; j < 6; ++j) EXPECT_NEAR(b(i, j), o[std::size_t(i)][std::size_t(j)], 1e-9);
  }
}

TEST(MatrixSqrt, IllConditionedReconstruction) {
  // Random rotation of diag(1, ..., 1e-6): condition number 1e6.
  const Eigen::HouseholderQR<Matrix> qr(random_matrix(8, 8, 20));
  const Matrix q = qr.householderQ();
  Vector ev(8);
  for (Eigen::Index i = 0; i < 8; ++i) ev(i) = std::pow(10.0, -6.0 * double(i) / 7.0);
  const Matrix a = q * ev.asDiagonal() * q.transpose();
  const Matrix sym = 0.5 * (a + a.transpose());
  const Matrix b = matrix_sqrt_psd(sym);
  EXPECT_LT(relative_frobenius(b * b, sym), 1e-6);
}

TEST(MatrixSqrt, AsymmetryIsRejectedAndIndefinitenessWarned) {
  Matrix a = Matrix::Identity(3, 3);
  a(0, 1) = 1e-3;
  EXPECT_THROW(matrix_sqrt_psd(a), ArgumentError);
  Matrix tiny = Matrix::Identity(3, 3);
  tiny(2, 2) = -1e-12;
  std::vector<std::string> warnings;
  const Matrix r = matrix_sqrt_psd(tiny, &warnings);
  EXPECT_TRUE(warnings.empty());
  EXPECT_EQ(r(2, 2), 0.0);
  Matrix neg = Matrix::Identity(3, 3);
  neg(2, 2) = -0.1;
  matrix_sqrt_psd(neg, &warnings);
  EXPECT_EQ(warnings.size(), 1u);
}

// ---------------------------------------------------------------------------
// Frechet distance

TEST(Frechet, OneDimensionalClosedForm) {
  GaussianStats a{Vector::Constant(1, 0.0), Matrix::Constant(1, 1, 1.0)};
  GaussianStats b{Vector::Constant(1, 1.0), Matrix::Constant(1, 1, 1.0)};
  EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-12);
  GaussianStats c{Vector::Constant(1, 3.0), Matrix::Constant(1, 1, 4.0)};
  EXPECT_NEAR(frechet_distance(a, c), 9.0 + 1.0, 1e-12);  // (3)^2 + (2 - 1)^2
  EXPECT_EQ(frechet_distance(a, a), 0.0);
}

TEST(Frechet, MatchesEigenOracleAndIsSymmetric) {
  for (std::uint64_t seed = 30; seed < 35; ++seed) {
    const auto x = gaussian_stats(random_matrix(50, 4, seed));
    const auto y = gaussian_stats(random_matrix(60, 4, seed + 100, 1.7, 0.4));
    const double d = frechet_distance(x, y);
    const double o = oracle::frechet(to_vec(x.mu), to_mat(x.sigma), to_vec(y.mu), to_mat(y.sigma));
    EXPECT_NEAR(d, o, 1e-6);
    EXPECT_NEAR(d, frechet_distance(y, x), 1e-9);
    EXPECT_GE(d, 0.0);
  }
}

TEST(Frechet, IdenticalStatsAndDimensionMismatch) {
  const auto x = gaussian_stats(random_matrix(40, 6, 40));
  std::vector<std::string> warnings;
  EXPECT_NEAR(frechet_distance(x, x, &warnings), 0.0, 1e-9);
  const auto y = gaussian_stats(random_matrix(40, 5, 41));
  EXPECT_THROW(frechet_distance(x, y), ArgumentError);
}

// ---------------------------------------------------------------------------
// KID

TEST(Kid, MatchesBruteForce) {
  const Matrix x = random_matrix(17, 5, 50), y = random_matrix(13, 5, 51, 1.3, 0.2);
  for (const auto& [a, b] : {std::pair{x, y}, std::pair{x, x}}) {
    const double ref = oracle::kid(to_mat(a), to_mat(b));
    EXPECT_NEAR(kid_mmd(a, b), ref, 1e-12 * std::max(1.0, std::abs(ref)));
  }
}

TEST(Kid, SeparatedCloudsAndPermutationInvariance) {
  const Matrix x = random_matrix(30, 4, 52), y = random_matrix(30, 4, 53, 1.0, 10.0);
  const double v = kid_mmd(x, y);
  EXPECT_GT(v, 100.0);
  EXPECT_NEAR(v, oracle::kid(to_mat(x), to_mat(y)), 1e-10 * std::abs(v));
  std::vector<Eigen::Index> perm(30);
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 7, perm.end());
  Matrix xp(30, 4), yp(30, 4);
  for (Eigen::Index i = 0; i < 30; ++i) {
    xp.row(i) = x.row(perm[std::size_t(i)]);
    yp.row(i) = y.row(perm[std::size_t((i + 3) % 30)]);
  }
  EXPECT_NEAR(kid_mmd(xp, yp), v, 1e-12 * std::abs(v));
  EXPECT_NEAR(kid_mmd(y, x), v, 1e-12 * std::abs(v));
}

TEST(Kid, NeverBelowTheEstimatorFloor) {
  for (std::uint64_t seed = 60; seed < 80; ++seed) {
    const Matrix x = random_matrix(6, 3, seed), y = random_matrix(5, 3, seed + 1000);
    const double v = kid_mmd(x, y);
    EXPECT_GE(v, kid_floor(x, y));
    EXPECT_LT(kid_floor(x, y), 0.0);
  }
  EXPECT_THROW(kid_mmd(Matrix(1, 3), Matrix(4, 3)), ArgumentError);
  EXPECT_THROW(kid_mmd(Matrix(4, 3), Matrix(4, 2)), ArgumentError);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, RealAgainstItself) {
  TempDir dir("self");
  testing_support::write_blob_dir(dir / "real", 12, 48, 3);
  PatchStatsExtractor ex;
  const auto r = evaluate(dir / "real", FakeSource{dir / "real", {}, 0, 0}, ex);
  ASSERT_TRUE(r.fid && r.clean_fid && r.kid && r.kid_floor);
  EXPECT_NEAR(*r.fid, 0.0, 1e-6);
  EXPECT_NEAR(*r.clean_fid, 0.0, 1e-6);
  const auto feats = features_at(load_image_dir(dir / "real"), ex, ResizeMode::clean_antialiased);
  EXPECT_EQ(*r.kid, oracle::kid(to_mat(feats), to_mat(feats)));
  EXPECT_EQ(r.n_real, 12u);
  EXPECT_EQ(r.n_fake, 12u);
  EXPECT_EQ(r.extractor_name, "patch-stats");
  EXPECT_EQ(r.resize_mode, "fid:naive_bilinear;clean_fid:clean_antialiased;kid:clean_antialiased");
  const std::string line = format_report(r);
  EXPECT_NE(line.find("fid="), std::string::npos);
  EXPECT_NE(line.find(" n_fake=12"), std::string::npos);
}

TEST(Evaluate, ResizeModesDisagreeOnTheAliasingFixture) {
  const auto real = blob_images(16, 256, 4);
  std::vector<RealImage> fake;
  for (const auto& img : real) fake.push_back(with_checkerboard(img, 3, 60.0));
  PatchStatsExtractor ex;
  const auto naive = evaluate_images(real, fake, ex, ResizeMode::naive_bilinear);
  const auto clean = evaluate_images(real, fake, ex, ResizeMode::clean_antialiased);
  EXPECT_EQ(naive.resize_mode, "naive_bilinear");
  EXPECT_GT(std::abs(*naive.fid - *clean.fid), 0.0);
  EXPECT_GT(*naive.fid, *clean.fid);
  const auto both = evaluate_images(real, fake, ex);
  EXPECT_EQ(*both.fid, *naive.fid);
  EXPECT_EQ(*both.clean_fid, *clean.fid);
  EXPECT_EQ(*both.kid, *clean.kid);
}

TEST(Evaluate, MetricSelectionAndErrors) {
  const auto sel = parse_metric_selection("kid");
  EXPECT_FALSE(sel.fid);
  EXPECT_FALSE(sel.clean_fid);
  EXPECT_TRUE(sel.kid);
  EXPECT_THROW(parse_metric_selection("fid,is"), ArgumentError);
  PatchStatsExtractor ex;
  const auto imgs = blob_images(3, 32, 5);
  const auto r = evaluate_images(imgs, imgs, ex, sel);
  EXPECT_FALSE(r.fid.has_value());
  EXPECT_TRUE(r.kid.has_value());
  EXPECT_EQ(r.resize_mode, "kid:clean_antialiased");
  EXPECT_THROW(evaluate_images({imgs[0]}, imgs, ex), ArgumentError);
  EXPECT_THROW(load_fake_images(FakeSource{}), ArgumentError);
}

TEST(Evaluate, CheckpointSourceCountsSamples) {
  TempDir dir("ckpt");
  testing_support::write_blob_dir(dir / "real", 4, 16, 6);
  const auto data = testing_support::blob_set(8, 16, 6);
  Trainer<float> t(testing_support::tiny_config(), data);
  t.run(1);
  save_checkpoint(t.snapshot(), dir / "g.ckpt");
  PatchStatsExtractor ex;
  const auto r = evaluate(dir / "real", FakeSource{{}, dir / "g.ckpt", 64, 9}, ex);
  EXPECT_EQ(r.n_fake, 64u);
  EXPECT_EQ(r.n_real, 4u);
  const auto again = evaluate(dir / "real", FakeSource{{}, dir / "g.ckpt", 64, 9}, ex);
  EXPECT_EQ(*again.fid, *r.fid);
}

TEST(Evaluate, ReportCsvAppendsUnderOneHeader) {
  TempDir dir("csv");
  MetricReport r;
  r.fid = 1.5;
  r.kid = -0.25;
  r.extractor_name = "patch-stats";
  r.resize_mode = "naive_bilinear";
  r.n_real = 3;
  r.n_fake = 4;
  append_report_csv(r, dir / "m.csv");
  append_report_csv(r, dir / "m.csv");
  std::ifstream in(dir / "m.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], kReportCsvHeader);
  EXPECT_EQ(lines[1], lines[2]);
  EXPECT_TRUE(lines[1].ends_with(",patch-stats,naive_bilinear,3,4")) << lines[1];
}
