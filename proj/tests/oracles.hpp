#pragma once

// Reference implementations written straight from the definitions, shared by
// the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "tfr/data_model.hpp"

namespace tfr::oracle {

inline double leep(const Matrix& theta, const Labels& y, int c) {
  const auto n = theta.rows();
  const auto z = theta.cols();
  std::vector<std::vector<double>> joint(static_cast<std::size_t>(c), std::vector<double>(static_cast<std::size_t>(z), 0.0));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < z; ++k) joint[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])][static_cast<std::size_t>(k)] += theta(i, k) / static_cast<double>(n);
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < z; ++k) {
      double marginal = 0.0;
      for (int yy = 0; yy < c; ++yy) marginal += joint[static_cast<std::size_t>(yy)][static_cast<std::size_t>(k)];
      if (marginal == 0.0) continue;
      s += joint[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])][static_cast<std::size_t>(k)] / marginal * theta(i, k);
    }
    total += std::log(s);
  }
  return total / static_cast<double>(n);
}

// log N(t; 0, I/beta + F F^T / alpha) / n, straight from the n x n covariance.
inline double log_evidence(const Matrix& f, const Vector& t, double alpha, double beta) {
  const auto n = f.rows();
  const Matrix cov = Matrix::Identity(n, n) / beta + f * f.transpose() / alpha;
  Eigen::LLT<Matrix> llt(cov);
  const Vector sol = llt.solve(t);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (static_cast<double>(n) * std::log(2 * std::numbers::pi) + logdet + t.dot(sol)) / static_cast<double>(n);
}

inline double grid_max_evidence(const Matrix& f, const Vector& t) {
  double best = -INFINITY;
  double ba = 0, bb = 0;
  for (int i = 0; i <= 600; ++i) {
    for (int j = 0; j <= 600; ++j) {
      const double a = std::pow(10.0, -3.0 + i * 0.01);
      const double b = std::pow(10.0, -3.0 + j * 0.01);
      const double e = log_evidence(f, t, a, b);
      if (e > best) {
        best = e;
        ba = a;
        bb = b;
      }
    }
  }
  // Local refinement around the grid cell.
  for (int i = -50; i <= 50; ++i) {
    for (int j = -50; j <= 50; ++j) {
      const double a = ba * std::pow(10.0, i * 0.0004);
      const double b = bb * std::pow(10.0, j * 0.0004);
      best = std::max(best, log_evidence(f, t, a, b));
    }
  }
  return best;
}

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      less += w < v[i];
      equal += w == v[i];
    }
    r[i] = less + (equal + 1) / 2.0;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double parc(const Matrix& x, const Labels& y, int c) {
  const auto n = x.rows();
  Matrix onehot = Matrix::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;
  auto vec = [](const Matrix& m, Eigen::Index i) {
    std::vector<double> v(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.cols(); ++k) v[static_cast<std::size_t>(k)] = m(i, k);
    return v;
  };
  std::vector<double> df, dy;
  for (Eigen::Index i = 1; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      df.push_back(1.0 - pearson(vec(x, i), vec(x, j)));
      dy.push_back(1.0 - pearson(vec(onehot, i), vec(onehot, j)));
    }
  }
  return pearson(average_ranks(df), average_ranks(dy));
}

// Position of i in truth order: count items strictly better, plus equal ones
// with a smaller index. Weighted sign agreement over unordered pairs.
inline double weighted_tau(const std::vector<double>& pred, const std::vector<double>& truth) {
  const std::size_t k = pred.size();
  auto pos = [&](std::size_t i) {
    double p = 0;
    for (std::size_t j = 0; j < k; ++j) p += truth[j] > truth[i] || (truth[j] == truth[i] && j < i);
    return p;
  };
  auto sgn = [](double v) { return static_cast<double>((v > 0) - (v < 0)); };
  double num = 0, den = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      const double w = 1 / (1 + pos(i)) + 1 / (1 + pos(j));
      num += w * sgn(pred[i] - pred[j]) * sgn(truth[i] - truth[j]);
      den += w;
    }
  }
  return num / den;
}

}  // namespace tfr::oracle
