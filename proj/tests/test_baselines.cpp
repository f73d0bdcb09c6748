#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "support.hpp"
#include "tfr/baselines.hpp"
#include "tfr/error.hpp"
#include "tfr/log.hpp"
#include "tfr/stats.hpp"

using namespace tfr;
using namespace tfr::baselines;

namespace {

Matrix two_blobs(Rng& rng, const Labels& y, double sep, double spread, Eigen::Index d = 2) {
  Matrix x(static_cast<Eigen::Index>(y.size()), d);
  for (std::size_t i = 0; i < y.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = spread * test::random_matrix(rng, 1, d);
    x(static_cast<Eigen::Index>(i), 0) += y[i] * sep;
  }
  return x;
}

template <typename F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no tfr::Error thrown";
  return Errc::MetricPrecondition;
}

}  // namespace

// ---------------------------------------------------------------- LEEP

TEST(Leep, MatchesBruteForceAndIsNonPositive) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 2 + static_cast<Eigen::Index>(rng.index(10));
    const auto z = 1 + static_cast<Eigen::Index>(rng.index(5));
    const int c = 2 + static_cast<int>(rng.index(3));
    const Matrix theta = test::random_probs(rng, n, z);
    Labels y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng.index(static_cast<std::uint64_t>(c)));
    const double got = leep(theta, y, c);
    EXPECT_NEAR(got, oracle::leep(theta, y, c), 1e-12);
    EXPECT_LE(got, 0.0);
  }
}

TEST(Leep, PerfectAndUniformPredictors) {
  const Labels y{0, 1, 2, 0, 1, 2};
  Matrix onehot = Matrix::Zero(6, 3);
  for (int i = 0; i < 6; ++i) onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;
  EXPECT_EQ(leep(onehot, y, 3), 0.0);
  EXPECT_NEAR(leep(Matrix::Constant(4, 2, 0.5), {0, 1, 0, 1}, 2), std::log(0.5), 1e-15);
}

TEST(Leep, ZeroMassColumnsAreDroppedAndColumnOrderIsIrrelevant) {
  Rng rng(2);
  const Labels y{0, 1, 1, 0, 1};
  Matrix theta = test::random_probs(rng, 5, 3);
  Matrix padded = Matrix::Zero(5, 4);
  padded.leftCols(3) = theta;
  EXPECT_NEAR(leep(padded, y, 2), leep(theta, y, 2), 1e-14);
  Matrix permuted(5, 3);
  permuted << theta.col(2), theta.col(0), theta.col(1);
  EXPECT_NEAR(leep(permuted, y, 2), leep(theta, y, 2), 1e-14);
}

TEST(Leep, RejectsUnnormalizedRows) {
  Matrix theta = Matrix::Constant(3, 2, 0.5);
  theta(1, 1) = 0.4;
  EXPECT_EQ(code_of([&] { leep(theta, {0, 1, 0}, 2); }), Errc::RowNotNormalized);
}

// ---------------------------------------------------------------- PCA / GMM / NLEEP

TEST(Pca, FullVarianceReconstructs) {
  Rng rng(3);
  const Matrix x = test::random_matrix(rng, 30, 5);
  const auto p = pca(x, 1.0);
  EXPECT_EQ(p.basis.rows(), 5);
  const Matrix rec = (p.projected * p.basis).rowwise() + p.mean.transpose();
  EXPECT_LT((rec - x).cwiseAbs().maxCoeff(), 1e-9);
  for (Eigen::Index k = 0; k < p.basis.rows(); ++k) {
    Eigen::Index arg = 0;
    p.basis.row(k).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(p.basis(k, arg), 0.0);
  }
  for (Eigen::Index k = 1; k < p.eigenvalues.size(); ++k) EXPECT_GE(p.eigenvalues(k - 1), p.eigenvalues(k));
}

TEST(Pca, KeepsOnlyPositiveVarianceDirections) {
  Rng rng(4);
  Matrix x = test::random_matrix(rng, 20, 4);
  x.col(3) = x.col(0) + x.col(1);  // rank 3
  const auto p = pca(x, 1.0);
  EXPECT_EQ(p.basis.rows(), 3);
}

TEST(Gmm, TraceMonotoneOnEveryFit) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = 20 + static_cast<Eigen::Index>(rng.index(40));
    const auto d = 1 + static_cast<Eigen::Index>(rng.index(4));
    const int k = 1 + static_cast<int>(rng.index(4));
    Matrix x = test::random_matrix(rng, n, d);
    if (trial % 2) x.topRows(n / 2).array() += 4.0;
    const auto g = fit_gmm(x, k, rng());
    for (std::size_t t = 1; t < g.log_likelihood_trace.size(); ++t) {
      EXPECT_GE(g.log_likelihood_trace[t], g.log_likelihood_trace[t - 1]) << "trial " << trial << " step " << t;
    }
    EXPECT_NEAR(g.weights.sum(), 1.0, 1e-9);
    const Matrix r = g.responsibilities(x);
    for (Eigen::Index i = 0; i < n; ++i) EXPECT_NEAR(r.row(i).sum(), 1.0, 1e-12);
    for (const auto& cov : g.covariances) {
      Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
      EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
    }
  }
}

TEST(Gmm, RecoversSeparatedBlobMeans) {
  Rng rng(6);
  const Labels y = test::cyclic_labels(400, 2);
  Matrix x = two_blobs(rng, y, 10.0, 0.5);
  const auto g = fit_gmm(x, 2, 7);
  std::vector<double> m0{g.means(0, 0), g.means(1, 0)};
  std::sort(m0.begin(), m0.end());
  EXPECT_NEAR(m0[0], 0.0, 0.1);
  EXPECT_NEAR(m0[1], 10.0, 0.1);
  for (int k = 0; k < 2; ++k) EXPECT_NEAR(g.means(k, 1), 0.0, 0.1);
}

TEST(Nleep, SeparatedBlobsAlignedWithClasses) {
  Rng rng(7);
  const Labels y = test::cyclic_labels(100, 2);
  const Matrix x = two_blobs(rng, y, 12.0, 0.5, 3);
  EXPECT_GE(nleep(x, y, 2, {0.8, 2, 1}), -0.1);
}

TEST(Nleep, SingleComponentIsLabelFrequencyLogLikelihood) {
  Rng rng(8);
  const Labels y{0, 0, 0, 1, 1, 2, 0, 1, 0, 2};
  const Matrix x = test::random_matrix(rng, 10, 3);
  double expected = 0.0;
  std::map<int, int> count;
  for (int v : y) ++count[v];
  for (int v : y) expected += std::log(count[v] / 10.0) / 10.0;
  EXPECT_NEAR(nleep(x, y, 3, {0.8, 1, 3}), expected, 1e-12);
}

TEST(Nleep, FullVarianceResponsibilitiesAreDistributions) {
  Rng rng(9);
  const Labels y = test::cyclic_labels(40, 2);
  const Matrix x = two_blobs(rng, y, 3.0, 1.0, 3);
  const auto p = pca(x, 1.0);
  const auto g = fit_gmm(p.projected, 2, 3);
  const Matrix r = g.responsibilities(p.projected);
  for (Eigen::Index i = 0; i < r.rows(); ++i) EXPECT_NEAR(r.row(i).sum(), 1.0, 1e-9);
  EXPECT_LE(nleep(x, y, 2, {1.0, 2, 3}), 0.0);
}

// ---------------------------------------------------------------- LogME

TEST(LogMe, EvidenceMatchesGaussianDensity) {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = 3 + static_cast<Eigen::Index>(rng.index(8));
    const auto d = 1 + static_cast<Eigen::Index>(rng.index(6));  // both D < n and D > n
    const Matrix f = test::random_matrix(rng, n, d);
    const Vector t = test::random_matrix(rng, n, 1).col(0);
    const double a = std::exp(rng.normal());
    const double b = std::exp(rng.normal());
    EXPECT_NEAR(log_evidence(f, t, a, b), oracle::log_evidence(f, t, a, b), 1e-10) << "trial " << trial;
  }
}

TEST(LogMe, FixedPointReachesGridOptimum) {
  Rng rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    // Orthonormal columns, n = 4, D = 2.
    Eigen::HouseholderQR<Matrix> qr(test::random_matrix(rng, 4, 2));
    const Matrix f = qr.householderQ() * Matrix::Identity(4, 2);
    Vector t = f * Vector::Constant(2, 1.0 + rng.uniform()) + 0.5 * test::random_matrix(rng, 4, 1).col(0);
    const auto fit = logme_evidence(f, t);
    EXPECT_NEAR(fit.evidence, oracle::grid_max_evidence(f, t), 1e-3) << "trial " << trial;
  }
}

TEST(LogMe, EvidenceTraceIncreasesOnPredictableTarget) {
  Rng rng(12);
  const Matrix f = test::random_matrix(rng, 40, 5);
  const Vector t = f * test::random_matrix(rng, 5, 1).col(0) + 1e-3 * test::random_matrix(rng, 40, 1).col(0);
  const auto fit = logme_evidence(f, t);
  for (std::size_t i = 1; i < fit.evidence_trace.size(); ++i) {
    EXPECT_GE(fit.evidence_trace[i], fit.evidence_trace[i - 1] - 1e-12);
  }
}

TEST(LogMe, DuplicatedFeatureBlockLeavesScoreUnchanged) {
  Rng rng(13);
  const Labels y = test::cyclic_labels(30, 3);
  const Matrix f = test::random_matrix(rng, 30, 4);
  Matrix doubled(30, 8);
  doubled << f, f;
  EXPECT_NEAR(logme(doubled, y, 3), logme(f, y, 3), 1e-6);
}

TEST(LogMe, RotationInvariant) {
  Rng rng(14);
  const Labels y = test::cyclic_labels(25, 2);
  const Matrix f = test::random_matrix(rng, 25, 6);
  Eigen::HouseholderQR<Matrix> qr(test::random_matrix(rng, 6, 6));
  const Matrix q = qr.householderQ();
  EXPECT_NEAR(logme(f * q, y, 2), logme(f, y, 2), 1e-6);
}

TEST(LogMe, AbsentClassesAreSkipped) {
  Rng rng(15);
  const Labels y = test::cyclic_labels(20, 2);
  const Matrix f = test::random_matrix(rng, 20, 3);
  EXPECT_NEAR(logme(f, y, 3), logme(f, y, 2), 1e-12);
}

// ---------------------------------------------------------------- PARC

TEST(Parc, MatchesRankThenPearsonOracle) {
  Rng rng(16);
  for (int trial = 0; trial < 40; ++trial) {
    const int c = 2 + static_cast<int>(rng.index(3));
    const auto n = c + 1 + static_cast<Eigen::Index>(rng.index(12));  // at least one same-class pair
    Labels y = test::cyclic_labels(static_cast<std::size_t>(n), c);
    // D >= 3: with two columns every centered pair correlates at exactly +-1
    // and the comparison degenerates into rounding-order tie breaking.
    Matrix x = test::random_matrix(rng, n, 3 + static_cast<Eigen::Index>(rng.index(5)));
    EXPECT_NEAR(parc(x, y, c), oracle::parc(x, y, c), 1e-12) << "trial " << trial;
  }
}

TEST(Parc, HandcraftedFourPoints) {
  Matrix x(4, 3);
  x << 1, 2, 3, 1, 2, 4, 3, 1, 0, 4, 0, 1;
  const Labels y{0, 0, 1, 1};
  EXPECT_NEAR(parc(x, y, 2), oracle::parc(x, y, 2), 1e-12);
}

TEST(Parc, PerfectBlockStructureGivesOne) {
  Matrix x(6, 3);
  x << 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1;
  EXPECT_NEAR(parc(x, {0, 0, 1, 1, 2, 2}, 3), 1.0, 1e-12);
}

TEST(Parc, AffineRowRescalingInvariance) {
  Rng rng(17);
  const Labels y = test::cyclic_labels(12, 3);
  const Matrix x = test::random_matrix(rng, 12, 5);
  Matrix scaled = x;
  for (Eigen::Index i = 0; i < 12; ++i) {
    // Powers of two keep the centered rows exactly proportional.
    const double a = std::ldexp(1.0, static_cast<int>(rng.index(5)));
    scaled.row(i) = (a * x.row(i).array()).matrix();
  }
  EXPECT_EQ(parc(scaled, y, 3), parc(x, y, 3));
  Matrix shifted = x;
  for (Eigen::Index i = 0; i < 12; ++i) shifted.row(i).array() += 0.5 * static_cast<double>(i);
  EXPECT_NEAR(parc(shifted, y, 3), parc(x, y, 3), 1e-12);
}

TEST(Parc, ShuffledLabelsAreNearZero) {
  Rng rng(18);
  const Labels base = test::cyclic_labels(60, 3);
  Matrix x(60, 6);
  for (Eigen::Index i = 0; i < 60; ++i) {
    x.row(i) = 0.3 * test::random_matrix(rng, 1, 6);
    x(i, i % 3) += 2.0;
  }
  std::vector<double> vals;
  for (int seed = 0; seed < 50; ++seed) {
    Labels y = base;
    Rng s(static_cast<std::uint64_t>(seed));
    shuffle(y.begin(), y.end(), s);
    vals.push_back(std::abs(parc(x, y, 3)));
  }
  std::nth_element(vals.begin(), vals.begin() + 25, vals.end());
  EXPECT_LT(vals[25], 0.2);
}

TEST(Parc, ConstantRowUsesUnitDistanceWithWarning) {
  Rng rng(19);
  Matrix x = test::random_matrix(rng, 8, 4);
  x.row(2).setConstant(3.0);
  int warnings = 0;
  ScopedWarningHandler capture([&](std::string_view) { ++warnings; });
  const double v = parc(x, test::cyclic_labels(8, 2), 2);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(warnings, 1);
}

TEST(Stats, SpearmanAndRankdataAgreeWithOracles) {
  Rng rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(15), b(15);
    for (auto& v : a) v = std::round(3 * rng.normal());
    for (auto& v : b) v = rng.normal();
    EXPECT_EQ(stats::rankdata(a), oracle::average_ranks(a));
    EXPECT_NEAR(stats::spearman(a, b), oracle::pearson(oracle::average_ranks(a), oracle::average_ranks(b)), 1e-12);
  }
  EXPECT_NEAR(stats::chi2_sf(20.766, 6), 0.00201, 2e-5);
  EXPECT_NEAR(stats::chi2_sf(3.841458820694124, 1), 0.05, 1e-9);
}
