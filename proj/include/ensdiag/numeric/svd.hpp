// Copyright 2026 The ensdiag Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ensdiag/numeric/tensor.hpp"

namespace ensdiag {

struct SvdResult {
  Tensor u;   // [d, d], orthogonal
  Tensor s;   // [d], nonincreasing, nonnegative
  Tensor vt;  // [d, d], orthogonal
  int sweeps = 0;
};

class SvdNotConverged : public std::runtime_error {
 public:
  explicit SvdNotConverged(int sweeps)
      : std::runtime_error("svd_small: no convergence after " + std::to_string(sweeps) + " sweeps") {}
};

namespace detail {

// Orthonormalizes `cols[j]` against cols[0..j) (two Gram-Schmidt passes), seeding
// it from unit vectors when it carries no usable direction.
inline void complete_basis(std::vector<std::vector<double>>& cols, std::size_t j) {
  const std::size_t d = cols[j].size();
  for (std::size_t e = 0; e < d; ++e) {
    std::vector<double> v(d, 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += cols[k][i] * v[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= dot * cols[k][i];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.5) {
      for (double& x : v) x /= norm;
      cols[j] = std::move(v);
      return;
    }
  }
  throw std::logic_error("complete_basis: no independent direction left");
}

}  // namespace detail

/// Singular value decomposition of a square matrix by one-sided (Hestenes)
/// Jacobi rotations: columns of a working copy are pairwise orthogonalized
/// while the rotations accumulate into V. Throws SvdNotConverged after
/// 100*d sweeps.
inline SvdResult svd_small(const Tensor& m) {
  if (m.rank() != 2 || m.rows() != m.cols()) throw std::invalid_argument("svd_small: square matrix required");
  const std::size_t d = m.rows();
  if (d == 0 || d > 1024) throw std::invalid_argument("svd_small: dimension out of range");
  if (!m.all_finite()) throw std::invalid_argument("svd_small: non-finite entry");

  // Column-major working storage.
  std::vector<std::vector<double>> w(d, std::vector<double>(d));
  std::vector<std::vector<double>> v(d, std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < d; ++i) w[j][i] = m(i, j);
    v[j][j] = 1.0;
  }

  const double tol = std::numeric_limits<double>::epsilon() * static_cast<double>(d);
  const int max_sweeps = static_cast<int>(100 * d);
  int sweep = 0;
  bool converged = (d == 1);
  while (!converged && sweep < max_sweeps) {
    ++sweep;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          alpha += w[p][i] * w[p][i];
          beta += w[q][i] * w[q][i];
          gamma += w[p][i] * w[q][i];
        }
        if (gamma == 0.0 || alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < d; ++i) {
          const double wp = w[p][i];
          w[p][i] = c * wp - s * w[q][i];
          w[q][i] = s * wp + c * w[q][i];
          const double vp = v[p][i];
          v[p][i] = c * vp - s * v[q][i];
          v[q][i] = s * vp + c * v[q][i];
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) throw SvdNotConverged(sweep);

  std::vector<double> sigma(d);
  for (std::size_t j = 0; j < d; ++j) {
    double n2 = 0.0;
    for (double x : w[j]) n2 += x * x;
    sigma[j] = std::sqrt(n2);
  }
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  const double sigma_max = sigma[order[0]];
  const double zero_tol = sigma_max * std::numeric_limits<double>::epsilon() * static_cast<double>(d);
  std::vector<std::vector<double>> ucols(d, std::vector<double>(d, 0.0));
  SvdResult r;
  r.s = Tensor({d});
  r.vt = Tensor({d, d});
  r.sweeps = sweep;
  for (std::size_t k = 0; k < d; ++k) {
    const std::size_t j = order[k];
    const bool usable = sigma[j] > zero_tol && sigma[j] > 0.0;
    r.s.values[k] = usable ? sigma[j] : 0.0;
    for (std::size_t i = 0; i < d; ++i) r.vt(k, i) = v[j][i];
    if (usable) {
      for (std::size_t i = 0; i < d; ++i) ucols[k][i] = w[j][i] / sigma[j];
    } else {
      detail::complete_basis(ucols, k);
    }
  }
  r.u = Tensor({d, d});
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t i = 0; i < d; ++i) r.u(i, k) = ucols[k][i];
  return r;
}

}  // namespace ensdiag
