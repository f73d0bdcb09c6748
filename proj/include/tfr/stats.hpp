#pragma once

#include <span>
#include <vector>

namespace tfr::stats {

/// 1-based ranks, ties receive the mean of the positions they span.
std::vector<double> rankdata(std::span<const double> values);

/// Pearson correlation; NaN when either input has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

/// Pearson correlation of rankdata(a) and rankdata(b).
double spearman(std::span<const double> a, std::span<const double> b);

/// Upper tail P(X > x) of a chi-square variable with `dof` degrees of freedom.
double chi2_sf(double x, double dof);

}  // namespace tfr::stats
