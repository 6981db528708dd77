#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "noisesearch/errors.hpp"

namespace noisesearch {

/// Full SVD of one square matrix, A = U diag(sigma) V^T.
/// U and V are row-major n x n with singular vector k stored in column k.
struct SquareSvd {
  std::size_t n = 0;
  std::vector<double> u;
  std::vector<double> sigma;
  std::vector<double> v;

  double u_at(std::size_t row, std::size_t col) const { return u[row * n + col]; }
  double v_at(std::size_t row, std::size_t col) const { return v[row * n + col]; }
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void rotate(double* a, double* b, std::size_t n, double c, double s) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a[i];
    const double y = b[i];
    a[i] = c * x - s * y;
    b[i] = s * x + c * y;
  }
}

// Orthonormal completion: fills columns [rank, n) of a column-major basis
// with unit vectors orthogonal to all earlier ones.
inline void complete_basis(std::vector<double>& cols, std::size_t n, std::size_t rank) {
  std::size_t filled = rank;
  for (std::size_t e = 0; e < n && filled < n; ++e) {
    std::vector<double> cand(n, 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < filled; ++k) {
        const double proj = dot(cand.data(), &cols[k * n], n);
        for (std::size_t i = 0; i < n; ++i) cand[i] -= proj * cols[k * n + i];
      }
    }
    const double norm = std::sqrt(dot(cand.data(), cand.data(), n));
    if (norm < 1e-8) continue;
    for (std::size_t i = 0; i < n; ++i) cols[filled * n + i] = cand[i] / norm;
    ++filled;
  }
}

}  // namespace detail

/// One-sided (Hestenes) Jacobi SVD of a row-major n x n matrix.
///
/// Singular values come back sorted descending. Sign convention: the
/// largest-magnitude entry of each U column (first one on ties) is made
/// non-negative and the matching V column flipped with it, so the result
/// is a deterministic function of the input.
inline SquareSvd jacobi_svd(std::span<const double> a, std::size_t n) {
  if (a.size() != n * n) throw ShapeError("jacobi_svd: expected " + std::to_string(n * n) + " entries");
  for (double x : a) {
    if (!std::isfinite(x)) throw NumericError("jacobi_svd: non-finite input");
  }

  // Column-major working copies: w holds A*V, vc accumulates V.
  std::vector<double> w(n * n);
  std::vector<double> vc(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) w[j * n + i] = a[i * n + j];
    vc[i * n + i] = 1.0;
  }

  constexpr double kTol = 1e-15;
  constexpr int kMaxSweeps = 80;
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      double* wp = &w[p * n];
      for (std::size_t q = p + 1; q < n; ++q) {
        double* wq = &w[q * n];
        const double alpha = detail::dot(wp, wp, n);
        const double beta = detail::dot(wq, wq, n);
        const double gamma = detail::dot(wp, wq, n);
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        detail::rotate(wp, wq, n, c, s);
        detail::rotate(&vc[p * n], &vc[q * n], n, c, s);
      }
    }
  }
  if (!converged) throw NumericError("jacobi_svd: no convergence");

  std::vector<double> norms(n);
  for (std::size_t k = 0; k < n; ++k) norms[k] = std::sqrt(detail::dot(&w[k * n], &w[k * n], n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const double sigma_max = n > 0 ? norms[order[0]] : 0.0;
  const double zero_cut = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * sigma_max;

  std::vector<double> uc(n * n, 0.0);
  std::vector<double> vs(n * n, 0.0);
  SquareSvd out;
  out.n = n;
  out.sigma.resize(n);
  std::size_t rank = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    out.sigma[k] = norms[src];
    std::copy_n(&vc[src * n], n, &vs[k * n]);
    if (norms[src] > zero_cut && norms[src] > 0.0) {
      for (std::size_t i = 0; i < n; ++i) uc[k * n + i] = w[src * n + i] / norms[src];
      rank = k + 1;
    }
  }
  if (rank < n) {
    for (std::size_t k = rank; k < n; ++k) out.sigma[k] = 0.0;
    detail::complete_basis(uc, n, rank);
  }

  for (std::size_t k = 0; k < n; ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (std::abs(uc[k * n + i]) > std::abs(uc[k * n + arg])) arg = i;
    }
    if (uc[k * n + arg] < 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        uc[k * n + i] = -uc[k * n + i];
        vs[k * n + i] = -vs[k * n + i];
      }
    }
  }

  out.u.resize(n * n);
  out.v.resize(n * n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      out.u[i * n + k] = uc[k * n + i];
      out.v[i * n + k] = vs[k * n + i];
    }
  }
  return out;
}

}  // namespace noisesearch
