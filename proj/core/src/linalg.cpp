#include "roadenkf/linalg.hpp"

#include <cmath>

#include "eigen_maps.hpp"
#include "roadenkf/error.hpp"

namespace roadenkf::linalg {

void cholesky_lower(std::span<double> a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double* row_j = a.data() + j * n;
    double d = row_j[j];
    for (std::size_t k = 0; k < j; ++k) d -= row_j[k] * row_j[k];
    if (!(d > 0.0)) throw NotSpdError(j);
    const double ljj = std::sqrt(d);
    row_j[j] = ljj;
    const double inv = 1.0 / ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double* row_i = a.data() + i * n;
      double s = row_i[j];
      for (std::size_t k = 0; k < j; ++k) s -= row_i[k] * row_j[k];
      row_i[j] = s * inv;
    }
    for (std::size_t k = j + 1; k < n; ++k) row_j[k] = 0.0;
  }
}

void cholesky_solve(std::span<const double> l, std::size_t n, std::span<double> b, std::size_t m) {
  // forward: L Y = B
  for (std::size_t i = 0; i < n; ++i) {
    double* bi = b.data() + i * m;
    const double* li = l.data() + i * n;
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = li[k];
      const double* bk = b.data() + k * m;
      for (std::size_t c = 0; c < m; ++c) bi[c] -= lik * bk[c];
    }
    const double inv = 1.0 / li[i];
    for (std::size_t c = 0; c < m; ++c) bi[c] *= inv;
  }
  // backward: L^T X = Y
  for (std::size_t i = n; i-- > 0;) {
    double* bi = b.data() + i * m;
    for (std::size_t k = i + 1; k < n; ++k) {
      const double lki = l[k * n + i];
      const double* bk = b.data() + k * m;
      for (std::size_t c = 0; c < m; ++c) bi[c] -= lki * bk[c];
    }
    const double inv = 1.0 / l[i * n + i];
    for (std::size_t c = 0; c < m; ++c) bi[c] *= inv;
  }
}

double cholesky_logdet(std::span<const double> l, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::log(l[i * n + i]);
  return 2.0 * s;
}

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n) {
  detail::map(c.data(), m, n).noalias() = detail::cmap(a.data(), m, k) * detail::cmap(b.data(), k, n);
}

}  // namespace roadenkf::linalg
