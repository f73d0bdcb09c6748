#pragma once

#include <cstdint>
#include <vector>

#include "tfr/data_model.hpp"

namespace tfr::nca {

struct NcaConfig {
  int out_dim = 32;          // rows of the projection
  int max_iters = 200;
  double step_size = 1e-1;
  double l2_penalty = 0.0;   // lambda in f(A) - lambda * ||A||_F^2
  double tol = 1e-5;         // stop when relative objective gain drops below this
  std::uint64_t seed = 0;

  /// d = min(D, max(2C, 32)), lambda = 1e-3 * n / D.
  static NcaConfig defaults_for(std::size_t n, std::size_t dim, int num_classes);
};

struct NcaModel {
  Matrix projection;                    // d x D
  std::vector<double> objective_trace;  // initial value, then one entry per accepted step
};

/// Soft leave-one-out neighbor probabilities p_ij under projection A, with
/// p_ii = 0. Row i sums to 1 over j != i.
Matrix neighbor_probabilities(const Matrix& projection, const Matrix& x);

/// f(A) = sum_i sum_{j != i, y_j = y_i} p_ij - l2_penalty * ||A||_F^2.
double objective(const Matrix& projection, const Matrix& x, const Labels& y, double l2_penalty);

/// Gradient of objective() with respect to A.
Matrix gradient(const Matrix& projection, const Matrix& x, const Labels& y, double l2_penalty);

/// Top-d principal directions of x, scaled so the mean pairwise distance of
/// the projected points is sqrt(d). Throws DegenerateInput if all rows coincide.
Matrix initial_projection(const Matrix& x, int out_dim);

/// Gradient ascent with backtracking line search from initial_projection().
NcaModel fit(const Matrix& x, const Labels& y, const NcaConfig& cfg);

/// Row i of the result is A * x_i.
Matrix project(const NcaModel& model, const Matrix& x);

}  // namespace tfr::nca
