#pragma once

#include <cstddef>
#include <span>

namespace roadenkf::linalg {

// Plain dense kernels on row-major buffers. No tape involvement.

/// In-place lower Cholesky factor of an n x n SPD matrix (upper triangle is
/// zeroed). Throws NotSpdError carrying the failing pivot index.
void cholesky_lower(std::span<double> a, std::size_t n);

/// Solves L L^T X = B in place, B is n x m.
void cholesky_solve(std::span<const double> l, std::size_t n, std::span<double> b, std::size_t m);

/// 2 * sum(log(diag(L))).
double cholesky_logdet(std::span<const double> l, std::size_t n);

/// C = A * B for row-major A (m x k) and B (k x n).
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n);

}  // namespace roadenkf::linalg
