#pragma once

#include <cstdint>
#include <vector>

#include "tfr/data_model.hpp"

// Reference transferability metrics: LEEP, NLEEP, LogME and PARC, plus the
// PCA and Gaussian-mixture machinery NLEEP is built on.
namespace tfr::baselines {

// ---------------------------------------------------------------- LEEP

/// Log expected empirical prediction from source-head probabilities `probs`
/// (n x Z, rows on the simplex) to target labels in [0, num_classes).
/// Source classes with zero total mass are dropped before conditioning.
double leep(const Matrix& probs, const Labels& y, int num_classes);

// ---------------------------------------------------------------- PCA

struct PcaResult {
  Vector mean;           // D
  Matrix basis;          // d x D, rows orthonormal, descending variance
  Vector eigenvalues;    // d retained eigenvalues of the covariance
  Matrix projected;      // n x d
};

/// Keeps the smallest d whose cumulative explained variance reaches
/// `variance_keep`; only positive-eigenvalue directions are ever kept.
/// Each direction's largest-magnitude loading is positive.
PcaResult pca(const Matrix& x, double variance_keep);

// ---------------------------------------------------------------- GMM

struct GmmModel {
  Vector weights;                    // K
  Matrix means;                      // K x d
  std::vector<Matrix> covariances;   // K of d x d
  std::vector<double> log_likelihood_trace;
  double ridge = 0.0;                // covariance regularizer (see fit_gmm)
  int restarts = 0;

  int components() const { return static_cast<int>(weights.size()); }
  /// Posterior component probabilities, n x K; rows sum to 1.
  Matrix responsibilities(const Matrix& x) const;
  /// Mean per-sample log density.
  double log_likelihood(const Matrix& x) const;
};

/// Full-covariance EM with k-means++ seeding. Stops when the per-fit
/// objective gain is below 1e-6 or after 200 iterations. A component whose
/// weight falls below 1e-8 triggers a reseeded restart (at most 3).
GmmModel fit_gmm(const Matrix& x, int components, std::uint64_t seed);

// ---------------------------------------------------------------- NLEEP

struct NleepConfig {
  double variance_keep = 0.8;
  int components = 0;  // 0: one component per target class
  std::uint64_t seed = 0;
};

double nleep(const Matrix& embeddings, const Labels& y, int num_classes, const NleepConfig& cfg = {});

// ---------------------------------------------------------------- LogME

struct EvidenceFit {
  double alpha = 1.0;
  double beta = 1.0;
  double evidence = 0.0;               // log evidence / n at the final (alpha, beta)
  std::vector<double> evidence_trace;  // per fixed-point iteration, including the start
  int iterations = 0;
};

/// Maximizes the evidence of a Bayesian linear model `target ~ F m` by the
/// MacKay fixed point, starting from alpha = beta = 1.
EvidenceFit logme_evidence(const Matrix& features, const Vector& target);

/// Log evidence per sample of the Bayesian linear model for hyperparameters
/// (alpha, beta), computed from the SVD of `features`.
double log_evidence(const Matrix& features, const Vector& target, double alpha, double beta);

/// Mean over classes of the per-sample maximum log evidence for one-hot targets.
double logme(const Matrix& features, const Labels& y, int num_classes);

// ---------------------------------------------------------------- PARC

/// Spearman correlation of the strict lower triangles of the feature distance
/// (1 - row Pearson) and one-hot label distance matrices.
double parc(const Matrix& embeddings, const Labels& y, int num_classes);

}  // namespace tfr::baselines
