#include "tfr/nca.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "tfr/error.hpp"

namespace tfr::nca {

namespace {

void check_shapes(const Matrix& a, const Matrix& x, const Labels& y) {
  if (a.cols() != x.cols()) {
    throw Error(Errc::ShapeMismatch, "projection has " + std::to_string(a.cols()) + " columns but X has " +
                                         std::to_string(x.cols()));
  }
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw Error(Errc::ShapeMismatch, "X has " + std::to_string(x.rows()) + " rows but " + std::to_string(y.size()) +
                                         " labels");
  }
  if (x.rows() < 2) throw Error(Errc::ShapeMismatch, "NCA needs at least 2 samples");
}

// Projected points as columns (d x n) so each z_i is contiguous.
Matrix projected_columns(const Matrix& a, const Matrix& x) { return a * x.transpose(); }

// Soft-neighbor probabilities with per-row max subtraction; diagonal stays 0.
Matrix softmax_rows(const Matrix& zt) {
  const Eigen::Index n = zt.cols();
  Matrix p = Matrix::Zero(n, n);
  Vector d2(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double nearest = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      d2(j) = (zt.col(i) - zt.col(j)).squaredNorm();
      nearest = std::min(nearest, d2(j));
    }
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double e = std::exp(nearest - d2(j));
      p(i, j) = e;
      total += e;
    }
    p.row(i) /= total;
  }
  return p;
}

double same_class_mass(const Matrix& p, const Labels& y, std::vector<double>* per_row = nullptr) {
  const auto n = static_cast<Eigen::Index>(y.size());
  double f = 0.0;
  if (per_row) per_row->assign(y.size(), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double pi = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i && y[static_cast<std::size_t>(j)] == y[static_cast<std::size_t>(i)]) pi += p(i, j);
    }
    if (per_row) (*per_row)[static_cast<std::size_t>(i)] = pi;
    f += pi;
  }
  return f;
}

int distinct_labels(const Labels& y) { return static_cast<int>(std::set<int>(y.begin(), y.end()).size()); }

}  // namespace

NcaConfig NcaConfig::defaults_for(std::size_t n, std::size_t dim, int num_classes) {
  NcaConfig cfg;
  cfg.out_dim = static_cast<int>(std::min<std::size_t>(dim, std::max<std::size_t>(2 * num_classes, 32)));
  cfg.l2_penalty = 1e-3 * static_cast<double>(n) / static_cast<double>(dim);
  return cfg;
}

Matrix neighbor_probabilities(const Matrix& projection, const Matrix& x) {
  if (projection.cols() != x.cols()) throw Error(Errc::ShapeMismatch, "projection/X column mismatch");
  if (x.rows() < 2) throw Error(Errc::ShapeMismatch, "need at least 2 samples");
  return softmax_rows(projected_columns(projection, x));
}

double objective(const Matrix& projection, const Matrix& x, const Labels& y, double l2_penalty) {
  check_shapes(projection, x, y);
  const Matrix p = softmax_rows(projected_columns(projection, x));
  return same_class_mass(p, y) - l2_penalty * projection.squaredNorm();
}

Matrix gradient(const Matrix& projection, const Matrix& x, const Labels& y, double l2_penalty) {
  check_shapes(projection, x, y);
  const Matrix zt = projected_columns(projection, x);
  const Matrix p = softmax_rows(zt);
  std::vector<double> pi;
  same_class_mass(p, y, &pi);

  // sum_ij w_ij (x_i - x_j)(x_i - x_j)^T = X^T L X with
  // w_ij = p_i p_ij - [y_i = y_j] p_ij and L = diag(rowsum + colsum) - W - W^T.
  const Eigen::Index n = x.rows();
  Matrix w(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool same = y[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(j)];
      w(i, j) = p(i, j) * (pi[static_cast<std::size_t>(i)] - (same ? 1.0 : 0.0));
    }
  }
  Matrix lap = -(w + w.transpose());
  lap.diagonal() += w.rowwise().sum() + w.colwise().sum().transpose();
  return 2.0 * (zt * lap) * x - 2.0 * l2_penalty * projection;
}

Matrix initial_projection(const Matrix& x, int out_dim) {
  const Eigen::Index dim = x.cols();
  if (out_dim < 1 || out_dim > dim) {
    throw Error(Errc::ShapeMismatch, "out_dim " + std::to_string(out_dim) + " not in [1, " + std::to_string(dim) + "]");
  }
  const Matrix centered = x.rowwise() - x.colwise().mean();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(x.rows() - 1, 1));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw Error(Errc::NonFinite, "covariance eigendecomposition failed");

  Matrix basis(out_dim, dim);
  for (int k = 0; k < out_dim; ++k) {
    Vector v = eig.eigenvectors().col(dim - 1 - k);  // ascending order from Eigen
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.row(k) = v.transpose();
  }

  const Matrix zt = basis * centered.transpose();
  const Eigen::Index n = x.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) total += (zt.col(i) - zt.col(j)).norm();
  }
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  const double mean_dist = pairs > 0 ? total / pairs : 0.0;
  if (!(mean_dist > 0.0) || !std::isfinite(mean_dist)) {
    throw Error(Errc::DegenerateInput, "all points coincide in the leading principal directions");
  }
  return basis * (std::sqrt(static_cast<double>(out_dim)) / mean_dist);
}

NcaModel fit(const Matrix& x, const Labels& y, const NcaConfig& cfg) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw Error(Errc::ShapeMismatch, "X rows differ from label count");
  if (x.rows() < 2) throw Error(Errc::DegenerateInput, "NCA needs at least 2 samples");
  if (!x.allFinite()) throw Error(Errc::NonFinite, "input embeddings contain non-finite values");
  if (distinct_labels(y) < 2) throw Error(Errc::DegenerateInput, "only one class present; nothing to separate");
  if (!(cfg.tol > 0.0)) throw Error(Errc::InvariantViolation, "NcaConfig.tol must be > 0");
  if (!(cfg.step_size > 0.0)) throw Error(Errc::InvariantViolation, "NcaConfig.step_size must be > 0");
  if (cfg.l2_penalty < 0.0) throw Error(Errc::InvariantViolation, "NcaConfig.l2_penalty must be >= 0");
  if (cfg.max_iters < 0) throw Error(Errc::InvariantViolation, "NcaConfig.max_iters must be >= 0");
  if (cfg.out_dim < 1 || cfg.out_dim > x.cols()) {
    throw Error(Errc::InvariantViolation, "NcaConfig.out_dim must be in [1, D]");
  }

  NcaModel model;
  model.projection = initial_projection(x, cfg.out_dim);
  double f = objective(model.projection, x, y, cfg.l2_penalty);
  model.objective_trace.push_back(f);

  constexpr int kMaxHalvings = 40;
  double step = cfg.step_size;
  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    const Matrix g = gradient(model.projection, x, y, cfg.l2_penalty);
    if (!g.allFinite()) throw Error(Errc::NonFinite, "NCA gradient became non-finite at iteration " + std::to_string(iter));
    if (g.squaredNorm() == 0.0) break;

    bool accepted = false;
    Matrix candidate;
    double f_new = f;
    for (int h = 0; h < kMaxHalvings; ++h) {
      candidate = model.projection + step * g;
      f_new = objective(candidate, x, y, cfg.l2_penalty);
      if (std::isfinite(f_new) && f_new > f) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    const double gain = (f_new - f) / std::max(std::abs(f), 1e-12);
    model.projection = std::move(candidate);
    f = f_new;
    model.objective_trace.push_back(f);
    if (gain < cfg.tol) break;
  }
  return model;
}

Matrix project(const NcaModel& model, const Matrix& x) {
  if (model.projection.cols() != x.cols()) {
    throw Error(Errc::ShapeMismatch, "projection expects D = " + std::to_string(model.projection.cols()) + ", got " +
                                         std::to_string(x.cols()));
  }
  return x * model.projection.transpose();
}

}  // namespace tfr::nca
