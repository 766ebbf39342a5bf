#pragma once

// Finite-difference gradient oracle. Lives in test code only; it never calls
// the backward path it is checking.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "ctlesion/tensor.hpp"

namespace oracle {

// Shuffled offset grid on [-scale, scale]: values -s + (2k+1)/M * s for a
// random permutation of k. Guarantees pairwise gap 2s/M and min |v| = s/M, so
// finite differences never cross a relu/max kink for h << s/M.
inline ctlesion::Tensor<double> grid_tensor(const std::vector<int>& shape, std::mt19937_64& rng,
                                            double scale = 1.0) {
  ctlesion::Tensor<double> t(shape);
  const std::int64_t m = t.size();
  std::vector<std::int64_t> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::int64_t i = 0; i < m; ++i) {
    t[i] = scale * (-1.0 + (2.0 * perm[static_cast<std::size_t>(i)] + 1.0) / static_cast<double>(m));
  }
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline double dot_loss(const ctlesion::Tensor<double>& cot, const ctlesion::Tensor<double>& y) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < y.size(); ++i) acc += cot[i] * y[i];
  return acc;
}

// Central differences of loss(cot, eval()) w.r.t. entries of `param`,
// compared against `analytic`. Checks all coordinates, or a seeded random
// subset when max_coords > 0.
template <typename EvalFn>
double max_fd_rel_err(EvalFn&& eval, ctlesion::Tensor<double>& param,
                      const ctlesion::Tensor<double>& analytic,
                      const ctlesion::Tensor<double>& cot, double h, std::mt19937_64& rng,
                      int max_coords = 0) {
  std::vector<std::int64_t> coords(static_cast<std::size_t>(param.size()));
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && static_cast<std::int64_t>(max_coords) < param.size()) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(max_coords));
  }
  double worst = 0.0;
  for (std::int64_t i : coords) {
    const double saved = param[i];
    param[i] = saved + h;
    const double lp = dot_loss(cot, eval());
    param[i] = saved - h;
    const double lm = dot_loss(cot, eval());
    param[i] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    worst = std::max(worst, rel_err(fd, analytic[i]));
  }
  return worst;
}

}  // namespace oracle
