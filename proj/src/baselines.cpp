#include "tfr/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tfr/error.hpp"
#include "tfr/log.hpp"
#include "tfr/rng.hpp"
#include "tfr/stats.hpp"

namespace tfr::baselines {

namespace {

void check_labels(const Labels& y, Eigen::Index rows, int num_classes, const char* who) {
  if (static_cast<Eigen::Index>(y.size()) != rows) {
    throw Error(Errc::ShapeMismatch, std::string(who) + ": " + std::to_string(rows) + " rows but " +
                                         std::to_string(y.size()) + " labels");
  }
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= num_classes) {
      throw Error(Errc::LabelOutOfRange, std::string(who) + ": label " + std::to_string(y[i]) + " at index " +
                                             std::to_string(i));
    }
  }
}

double log_sum_exp(const Eigen::Ref<const Vector>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

// ---------------------------------------------------------------- LEEP

double leep(const Matrix& probs, const Labels& y, int num_classes) {
  const Eigen::Index n = probs.rows();
  const Eigen::Index z = probs.cols();
  if (n < 1) throw Error(Errc::ShapeMismatch, "leep: empty input");
  if (num_classes < 1) throw Error(Errc::InvariantViolation, "leep: num_classes must be >= 1");
  check_labels(y, n, num_classes, "leep");
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = probs.row(i).sum();
    if (!probs.row(i).allFinite() || (probs.row(i).array() < 0.0).any() || std::abs(s - 1.0) > 1e-6) {
      throw Error(Errc::RowNotNormalized, "leep: source probability row " + std::to_string(i) + " is not a distribution");
    }
  }

  Matrix joint = Matrix::Zero(num_classes, z);
  for (Eigen::Index i = 0; i < n; ++i) joint.row(y[static_cast<std::size_t>(i)]) += probs.row(i);
  joint /= static_cast<double>(n);

  const Vector marginal = joint.colwise().sum().transpose();
  Matrix conditional = Matrix::Zero(num_classes, z);
  int dropped = 0;
  for (Eigen::Index k = 0; k < z; ++k) {
    if (marginal(k) > 0.0) {
      conditional.col(k) = joint.col(k) / marginal(k);
    } else {
      ++dropped;
    }
  }
  if (dropped > 0) warn("leep: dropped " + std::to_string(dropped) + " source classes with zero mass");

  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double expected = conditional.row(y[static_cast<std::size_t>(i)]).dot(probs.row(i));
    total += std::log(std::min(expected, 1.0));
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------- PCA

PcaResult pca(const Matrix& x, double variance_keep) {
  if (!(variance_keep > 0.0 && variance_keep <= 1.0)) {
    throw Error(Errc::InvariantViolation, "pca: variance_keep must be in (0, 1]");
  }
  if (x.rows() < 2 || x.cols() < 1) throw Error(Errc::ShapeMismatch, "pca: need at least 2 samples");
  PcaResult out;
  out.mean = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - out.mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw Error(Errc::NonFinite, "pca: eigendecomposition failed");

  const Eigen::Index dim = x.cols();
  const double top = std::max(eig.eigenvalues()(dim - 1), 0.0);
  const double floor = top * static_cast<double>(dim) * std::numeric_limits<double>::epsilon();
  std::vector<Eigen::Index> positive;
  double total = 0.0;
  for (Eigen::Index k = dim - 1; k >= 0; --k) {
    if (eig.eigenvalues()(k) > floor) {
      positive.push_back(k);
      total += eig.eigenvalues()(k);
    }
  }
  if (positive.empty()) throw Error(Errc::RankDeficiency, "pca: data has zero variance");

  std::size_t keep = positive.size();
  if (variance_keep < 1.0) {
    double cumulative = 0.0;
    for (std::size_t k = 0; k < positive.size(); ++k) {
      cumulative += eig.eigenvalues()(positive[k]);
      if (cumulative >= variance_keep * total) {
        keep = k + 1;
        break;
      }
    }
  }

  out.basis.resize(static_cast<Eigen::Index>(keep), dim);
  out.eigenvalues.resize(static_cast<Eigen::Index>(keep));
  for (std::size_t k = 0; k < keep; ++k) {
    Vector v = eig.eigenvectors().col(positive[k]);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.basis.row(static_cast<Eigen::Index>(k)) = v.transpose();
    out.eigenvalues(static_cast<Eigen::Index>(k)) = eig.eigenvalues()(positive[k]);
  }
  out.projected = centered * out.basis.transpose();
  return out;
}

// ---------------------------------------------------------------- GMM

namespace {

struct ComponentCache {
  Eigen::LLT<Matrix> chol;
  double log_norm = 0.0;  // -0.5 * (d log 2pi + log det)
};

std::vector<ComponentCache> factorize(const GmmModel& m) {
  std::vector<ComponentCache> out(static_cast<std::size_t>(m.components()));
  const auto d = static_cast<double>(m.means.cols());
  for (int k = 0; k < m.components(); ++k) {
    auto& c = out[static_cast<std::size_t>(k)];
    c.chol.compute(m.covariances[static_cast<std::size_t>(k)]);
    if (c.chol.info() != Eigen::Success) throw Error(Errc::EmCollapse, "covariance lost positive definiteness");
    const double log_det = 2.0 * c.chol.matrixL().toDenseMatrix().diagonal().array().log().sum();
    c.log_norm = -0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det);
  }
  return out;
}

// n x K matrix of log(w_k N(x_i | mu_k, Sigma_k)).
Matrix weighted_log_densities(const GmmModel& m, const Matrix& x) {
  const auto caches = factorize(m);
  Matrix out(x.rows(), m.components());
  for (int k = 0; k < m.components(); ++k) {
    const auto& c = caches[static_cast<std::size_t>(k)];
    const Matrix diff = (x.rowwise() - m.means.row(k)).transpose();
    const Matrix solved = c.chol.matrixL().solve(diff);
    const Vector maha = solved.colwise().squaredNorm().transpose();
    out.col(k) = (c.log_norm + std::log(m.weights(k))) - 0.5 * maha.array();
  }
  return out;
}

Matrix normalize_rows(const Matrix& log_joint, Vector* row_log_norm) {
  Matrix r(log_joint.rows(), log_joint.cols());
  if (row_log_norm) row_log_norm->resize(log_joint.rows());
  for (Eigen::Index i = 0; i < log_joint.rows(); ++i) {
    const double lse = log_sum_exp(log_joint.row(i).transpose());
    r.row(i) = (log_joint.row(i).array() - lse).exp();
    r.row(i) /= r.row(i).sum();
    if (row_log_norm) (*row_log_norm)(i) = lse;
  }
  return r;
}

std::vector<Eigen::Index> kmeanspp(const Matrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  std::vector<Eigen::Index> centers{static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)))};
  Vector best = (x.rowwise() - x.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < k) {
    const double total = best.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= best(pick);
        if (u < 0.0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)));
    }
    centers.push_back(pick);
    best = best.cwiseMin((x.rowwise() - x.row(pick)).rowwise().squaredNorm());
  }
  return centers;
}

struct CollapseSignal {};

// One EM run. The M-step maximizes the log-likelihood plus the covariance
// penalty -0.5 * c * sum_k tr(Sigma_k^-1), which gives Sigma_k = (S_k + c I) / N_k
// and keeps the tracked objective monotone.
GmmModel run_em(const Matrix& x, int components, double penalty, Rng& rng) {
  constexpr int kMaxIters = 200;
  constexpr double kTol = 1e-6;
  constexpr double kMinWeight = 1e-8;
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();

  GmmModel m;
  m.weights = Vector::Constant(components, 1.0 / components);
  m.means.resize(components, d);
  const auto centers = kmeanspp(x, components, rng);
  for (int k = 0; k < components; ++k) m.means.row(k) = x.row(centers[static_cast<std::size_t>(k)]);
  const Matrix centered = x.rowwise() - x.colwise().mean();
  Matrix global = centered.transpose() * centered / static_cast<double>(n);
  global.diagonal().array() += penalty * components / static_cast<double>(n);
  m.covariances.assign(static_cast<std::size_t>(components), global);

  auto penalized = [&](const GmmModel& model, double mean_ll) {
    double tr = 0.0;
    for (const auto& s : model.covariances) tr += s.llt().solve(Matrix::Identity(d, d)).trace();
    return mean_ll - 0.5 * penalty * tr / static_cast<double>(n);
  };

  Vector row_norm;
  Matrix resp = normalize_rows(weighted_log_densities(m, x), &row_norm);
  double current = penalized(m, row_norm.mean());
  m.log_likelihood_trace.push_back(current);

  for (int iter = 0; iter < kMaxIters; ++iter) {
    const Vector mass = resp.colwise().sum().transpose();
    for (int k = 0; k < components; ++k) {
      if (mass(k) / static_cast<double>(n) < kMinWeight) throw CollapseSignal{};
    }
    m.weights = mass / static_cast<double>(n);
    for (int k = 0; k < components; ++k) {
      m.means.row(k) = (resp.col(k).transpose() * x) / mass(k);
      const Matrix diff = x.rowwise() - m.means.row(k);
      Matrix scatter = diff.transpose() * resp.col(k).asDiagonal() * diff;
      scatter.diagonal().array() += penalty;
      m.covariances[static_cast<std::size_t>(k)] = scatter / mass(k);
    }
    resp = normalize_rows(weighted_log_densities(m, x), &row_norm);
    const double next = penalized(m, row_norm.mean());
    if (!std::isfinite(next)) throw Error(Errc::NonFinite, "EM objective became non-finite");
    const double gain = next - current;
    if (next >= current) m.log_likelihood_trace.push_back(next);
    current = std::max(current, next);
    if (gain < kTol) break;
  }
  return m;
}

}  // namespace

Matrix GmmModel::responsibilities(const Matrix& x) const {
  return normalize_rows(weighted_log_densities(*this, x), nullptr);
}

double GmmModel::log_likelihood(const Matrix& x) const {
  Vector row_norm;
  normalize_rows(weighted_log_densities(*this, x), &row_norm);
  return row_norm.mean();
}

GmmModel fit_gmm(const Matrix& x, int components, std::uint64_t seed) {
  if (components < 1) throw Error(Errc::InvariantViolation, "fit_gmm: need at least one component");
  if (x.rows() <= components) {
    throw Error(Errc::TooFewSamples, "fit_gmm: n = " + std::to_string(x.rows()) + " must exceed K = " +
                                         std::to_string(components));
  }
  if (!x.allFinite()) throw Error(Errc::NonFinite, "fit_gmm: non-finite input");
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  const Matrix centered = x.rowwise() - x.colwise().mean();
  const double trace = centered.squaredNorm() / static_cast<double>(n);
  // Ridge of 1e-6 * tr(cov) / d on a component holding n / K samples.
  const double ridge = std::max(1e-6 * trace / static_cast<double>(d), 1e-12);
  const double penalty = ridge * static_cast<double>(n) / components;

  constexpr int kMaxRestarts = 3;
  for (int attempt = 0; attempt <= kMaxRestarts; ++attempt) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
    try {
      auto model = run_em(x, components, penalty, rng);
      model.ridge = ridge;
      model.restarts = attempt;
      return model;
    } catch (const CollapseSignal&) {
      warn("fit_gmm: component collapsed; restarting with a new seed");
    }
  }
  throw Error(Errc::EmCollapse, "fit_gmm: a component collapsed in every restart");
}

// ---------------------------------------------------------------- NLEEP

double nleep(const Matrix& embeddings, const Labels& y, int num_classes, const NleepConfig& cfg) {
  check_labels(y, embeddings.rows(), num_classes, "nleep");
  const int k = cfg.components > 0 ? cfg.components : num_classes;
  if (embeddings.rows() <= k) {
    throw Error(Errc::TooFewSamples, "nleep: n must exceed the number of mixture components");
  }
  const auto reduced = pca(embeddings, cfg.variance_keep);
  const auto gmm = fit_gmm(reduced.projected, k, cfg.seed);
  return leep(gmm.responsibilities(reduced.projected), y, num_classes);
}

// ---------------------------------------------------------------- LogME

namespace {

struct SpectralFeatures {
  Matrix v;          // D x rank
  Vector sigma;      // rank
  Vector projected;  // U^T t, rank
  Eigen::Index dim = 0;
  Eigen::Index n = 0;
};

SpectralFeatures decompose(const Matrix& f, const Vector& t) {
  if (f.rows() != t.size()) throw Error(Errc::ShapeMismatch, "logme: target length differs from feature rows");
  if (f.rows() < 2) throw Error(Errc::TooFewSamples, "logme: need at least 2 samples");
  Eigen::BDCSVD<Matrix> svd(f, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success || !svd.singularValues().allFinite()) {
    throw Error(Errc::SvdFailure, "logme: SVD did not converge");
  }
  const Vector& s = svd.singularValues();
  const double cutoff = (s.size() ? s(0) : 0.0) * static_cast<double>(std::max(f.rows(), f.cols())) *
                        std::numeric_limits<double>::epsilon();
  Eigen::Index rank = 0;
  while (rank < s.size() && s(rank) > cutoff) ++rank;
  SpectralFeatures out;
  out.v = svd.matrixV().leftCols(rank);
  out.sigma = s.head(rank);
  out.projected = svd.matrixU().leftCols(rank).transpose() * t;
  out.dim = f.cols();
  out.n = f.rows();
  return out;
}

struct Posterior {
  Vector m;
  double mm = 0.0;
  double residual = 0.0;
  double gamma = 0.0;
};

Posterior posterior(const SpectralFeatures& sp, const Matrix& f, const Vector& t, double alpha, double beta) {
  Posterior p;
  const Vector s2 = sp.sigma.array().square();
  const Vector coeff = (beta * sp.sigma.array() * sp.projected.array()) / (alpha + beta * s2.array());
  p.m = sp.v * coeff;
  p.mm = coeff.squaredNorm();
  p.residual = (f * p.m - t).squaredNorm();
  p.gamma = (beta * s2.array() / (alpha + beta * s2.array())).sum();
  return p;
}

// Eigenvalues of F^T F beyond the rank are zero and contribute log(alpha) each.
double evidence_at(const SpectralFeatures& sp, const Posterior& p, double alpha, double beta) {
  const auto n = static_cast<double>(sp.n);
  const auto d = static_cast<double>(sp.dim);
  const Vector s2 = sp.sigma.array().square();
  const double log_det = (alpha + beta * s2.array()).log().sum() +
                         static_cast<double>(sp.dim - sp.sigma.size()) * std::log(alpha);
  const double ev = 0.5 * d * std::log(alpha) + 0.5 * n * std::log(beta) - 0.5 * beta * p.residual -
                    0.5 * alpha * p.mm - 0.5 * log_det - 0.5 * n * std::log(2.0 * std::numbers::pi);
  return ev / n;
}

}  // namespace

double log_evidence(const Matrix& features, const Vector& target, double alpha, double beta) {
  const auto sp = decompose(features, target);
  return evidence_at(sp, posterior(sp, features, target, alpha, beta), alpha, beta);
}

EvidenceFit logme_evidence(const Matrix& features, const Vector& target) {
  constexpr int kMaxIters = 100;
  constexpr double kTol = 1e-6;
  constexpr double kLo = 1e-12;
  constexpr double kHi = 1e12;
  const auto sp = decompose(features, target);
  const auto n = static_cast<double>(sp.n);

  EvidenceFit fit;
  double alpha = 1.0;
  double beta = 1.0;
  Posterior p = posterior(sp, features, target, alpha, beta);
  fit.evidence_trace.push_back(evidence_at(sp, p, alpha, beta));
  for (int iter = 0; iter < kMaxIters; ++iter) {
    const double next_alpha = std::clamp(p.gamma / std::max(p.mm, 1e-300), kLo, kHi);
    const double next_beta = std::clamp((n - p.gamma) / std::max(p.residual, 1e-300), kLo, kHi);
    const double change = std::max(std::abs(next_alpha - alpha) / alpha, std::abs(next_beta - beta) / beta);
    alpha = next_alpha;
    beta = next_beta;
    p = posterior(sp, features, target, alpha, beta);
    fit.evidence_trace.push_back(evidence_at(sp, p, alpha, beta));
    fit.iterations = iter + 1;
    if (change < kTol) break;
  }
  fit.alpha = alpha;
  fit.beta = beta;
  fit.evidence = fit.evidence_trace.back();
  return fit;
}

double logme(const Matrix& features, const Labels& y, int num_classes) {
  check_labels(y, features.rows(), num_classes, "logme");
  if (!features.allFinite()) throw Error(Errc::NonFinite, "logme: non-finite features");
  double total = 0.0;
  int used = 0;
  for (int c = 0; c < num_classes; ++c) {
    Vector t(features.rows());
    for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = y[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
    if (t.sum() == 0.0) continue;  // class absent from the target sample
    total += logme_evidence(features, t).evidence;
    ++used;
  }
  if (used == 0) throw Error(Errc::DegenerateInput, "logme: no class present");
  return total / used;
}

// ---------------------------------------------------------------- PARC

double parc(const Matrix& embeddings, const Labels& y, int num_classes) {
  const Eigen::Index n = embeddings.rows();
  if (n < 3) throw Error(Errc::TooFewSamples, "parc: need at least 3 samples");
  if (num_classes < 2) throw Error(Errc::InvariantViolation, "parc: need at least 2 classes");
  check_labels(y, n, num_classes, "parc");

  Matrix z = embeddings.colwise() - embeddings.rowwise().mean();
  std::vector<bool> constant(static_cast<std::size_t>(n), false);
  int constant_rows = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = z.row(i).norm();
    if (norm == 0.0) {
      constant[static_cast<std::size_t>(i)] = true;
      ++constant_rows;
    } else {
      z.row(i) /= norm;
    }
  }
  if (constant_rows > 0) {
    warn("parc: " + std::to_string(constant_rows) + " constant feature rows; using distance 1 for their pairs");
  }

  const double cross = 1.0 + 1.0 / static_cast<double>(num_classes - 1);
  std::vector<double> feature_dist;
  std::vector<double> label_dist;
  feature_dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  label_dist.reserve(feature_dist.capacity());
  for (Eigen::Index i = 1; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      const bool degenerate = constant[static_cast<std::size_t>(i)] || constant[static_cast<std::size_t>(j)];
      feature_dist.push_back(degenerate ? 1.0 : 1.0 - z.row(i).dot(z.row(j)));
      label_dist.push_back(y[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(j)] ? 0.0 : cross);
    }
  }
  const double rho = stats::spearman(feature_dist, label_dist);
  if (!std::isfinite(rho)) throw Error(Errc::ZeroVariance, "parc: distance ranks have zero variance");
  return rho;
}

}  // namespace tfr::baselines
