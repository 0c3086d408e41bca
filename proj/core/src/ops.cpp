#include "roadenkf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>

#include "eigen_maps.hpp"
#include "roadenkf/error.hpp"
#include "roadenkf/linalg.hpp"

namespace roadenkf::ad {

namespace {

using detail::cmap;
using detail::map;
using TensorPtr = std::shared_ptr<const Tensor>;

void require_real(const Var& v, const char* op) {
  if (v.kind() != Kind::real) throw DimensionError(std::string(op) + ": expects a real tensor");
}

void require_rank(const Var& v, std::size_t r, const char* op) {
  if (v.shape().size() != r) {
    throw DimensionError(std::string(op) + ": expects rank " + std::to_string(r) + ", got " +
                         shape_str(v.shape()));
  }
}

// Period (in doubles) at which `b` repeats when broadcast against `a`.
std::size_t broadcast_period(const Var& a, const Var& b, const char* op) {
  if (a.kind() != b.kind()) throw DimensionError(std::string(op) + ": real/complex operand mismatch");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (b.value().numel() == 1) return b.value().size();
  if (sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) return b.value().size();
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
}

void accumulate(Tensor& g, const double* src) {
  double* dst = g.raw();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

// Adds `src` (length n * period) into g (length period), folding the repeats.
void accumulate_folded(Tensor& g, const double* src, std::size_t n) {
  const std::size_t p = g.size();
  double* dst = g.raw();
  for (std::size_t r = 0; r < n / p; ++r) {
    const double* s = src + r * p;
    for (std::size_t i = 0; i < p; ++i) dst[i] += s[i];
  }
}

// df(x, y) is the derivative given input x and output y; the output is only
// retained when `uses_output` is set.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df, bool uses_output = false) {
  require_real(a, "elementwise op");
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], i);
  auto xs = a.value_ptr();
  std::shared_ptr<const Tensor> ys = uses_output && a.requires_grad() ? std::make_shared<Tensor>(out) : nullptr;
  return make_result(std::move(out), {&a}, [xs, ys, df](const Tensor& g, GradRefs gr) {
    Tensor& ga = *gr[0];
    const double* xv = xs->raw();
    const double* yv = ys ? ys->raw() : xv;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

// out[r * p + i] = op(x[r * p + i], y[i]) without a per-element modulo.
template <typename Op>
void broadcast_apply(const Tensor& x, const Tensor& y, std::size_t p, Tensor& out, Op op) {
  const double* xv = x.raw();
  const double* yv = y.raw();
  double* o = out.raw();
  if (p == 1) {
    const double c = yv[0];
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = op(xv[i], c);
    return;
  }
  for (std::size_t base = 0; base < out.size(); base += p)
    for (std::size_t i = 0; i < p; ++i) o[base + i] = op(xv[base + i], yv[i]);
}

}  // namespace

Var detach(const Var& v) { return Var(v.value()); }

Var add(const Var& a, const Var& b) {
  const std::size_t p = broadcast_period(a, b, "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape(), x.kind());
  broadcast_apply(x, y, p, out, [](double u, double v) { return u + v; });
  return make_result(std::move(out), {&a, &b}, [](const Tensor& g, GradRefs gr) {
    if (gr[0]) accumulate(*gr[0], g.raw());
    if (gr[1]) accumulate_folded(*gr[1], g.raw(), g.size());
  });
}

Var sub(const Var& a, const Var& b) {
  const std::size_t p = broadcast_period(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape(), x.kind());
  broadcast_apply(x, y, p, out, [](double u, double v) { return u - v; });
  return make_result(std::move(out), {&a, &b}, [](const Tensor& g, GradRefs gr) {
    if (gr[0]) accumulate(*gr[0], g.raw());
    if (gr[1]) {
      Tensor& gb = *gr[1];
      const std::size_t q = gb.size();
      for (std::size_t base = 0; base < g.size(); base += q)
        for (std::size_t i = 0; i < q; ++i) gb[i] -= g[base + i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_real(a, "mul");
  const std::size_t p = broadcast_period(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  broadcast_apply(x, y, p, out, [](double u, double v) { return u * v; });
  auto xs = a.value_ptr();
  auto ys = b.value_ptr();
  return make_result(std::move(out), {&a, &b}, [xs, ys, p](const Tensor& g, GradRefs gr) {
    const double* xv = xs->raw();
    const double* yv = ys->raw();
    if (gr[0]) {
      double* ga = gr[0]->raw();
      for (std::size_t base = 0; base < g.size(); base += p)
        for (std::size_t i = 0; i < p; ++i) ga[base + i] += g[base + i] * yv[i];
    }
    if (gr[1]) {
      double* gb = gr[1]->raw();
      for (std::size_t base = 0; base < g.size(); base += p)
        for (std::size_t i = 0; i < p; ++i) gb[i] += g[base + i] * xv[base + i];
    }
  });
}

Var scale(const Var& a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape(), x.kind());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  return make_result(std::move(out), {&a}, [s](const Tensor& g, GradRefs gr) {
    Tensor& ga = *gr[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
  require_real(a, "relu");
  const Tensor& x = a.value();
  Tensor out(x.shape());
  const double* __restrict xv = x.raw();
  double* __restrict o = out.raw();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto xs = a.value_ptr();
  return make_result(std::move(out), {&a}, [xs](const Tensor& g, GradRefs gr) {
    const double* __restrict xv = xs->raw();
    const double* __restrict gv = g.raw();
    double* __restrict ga = gr[0]->raw();
    const std::size_t n = g.size();
    // branch-free select so the loop vectorizes
    for (std::size_t i = 0; i < n; ++i) ga[i] += xv[i] > 0.0 ? gv[i] : 0.0;
  });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x, std::size_t) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var exp(const Var& a) {
  return unary(
      a,
      [](double x, std::size_t i) {
        const double y = std::exp(x);
        if (!std::isfinite(y)) throw DomainError("exp: overflow or NaN input", i);
        return y;
      },
      [](double, double y) { return y; }, true);
}

Var log(const Var& a) {
  return unary(
      a,
      [](double x, std::size_t i) {
        if (!(x > 0.0)) throw DomainError("log: argument must be positive", i);
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

Var sum(const Var& a) {
  require_real(a, "sum");
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return make_result(Tensor::scalar(s), {&a}, [](const Tensor& g, GradRefs gr) {
    Tensor& ga = *gr[0];
    const double v = g[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += v;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(const Var& a) {
  require_real(a, "sum_rows");
  require_rank(a, 2, "sum_rows");
  const std::size_t r = a.shape()[0];
  const std::size_t c = a.shape()[1];
  Tensor out({c});
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
  return make_result(std::move(out), {&a}, [r, c](const Tensor& g, GradRefs gr) {
    Tensor& ga = *gr[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j];
  });
}

Var mean_rows(const Var& a) {
  require_rank(a, 2, "mean_rows");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.shape()[0]));
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.kind() != b.kind()) throw DimensionError("matmul: both operands must be real or both complex");
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  TensorPtr as = a.value_ptr();
  TensorPtr bs = b.value_ptr();
  Tensor out({m, n}, a.kind());
  if (a.kind() == Kind::real) {
    map(out.raw(), m, n).noalias() = cmap(as->raw(), m, k) * cmap(bs->raw(), k, n);
    return make_result(std::move(out), {&a, &b}, [as, bs, m, k, n](const Tensor& g, GradRefs gr) {
      auto G = cmap(g.raw(), m, n);
      if (gr[0]) map(gr[0]->raw(), m, k).noalias() += G * cmap(bs->raw(), k, n).transpose();
      if (gr[1]) map(gr[1]->raw(), k, n).noalias() += cmap(as->raw(), m, k).transpose() * G;
    });
  }
  map(out.craw(), m, n).noalias() = cmap(as->craw(), m, k) * cmap(bs->craw(), k, n);
  return make_result(std::move(out), {&a, &b}, [as, bs, m, k, n](const Tensor& g, GradRefs gr) {
    auto G = cmap(g.craw(), m, n);
    if (gr[0]) map(gr[0]->craw(), m, k).noalias() += G * cmap(bs->craw(), k, n).adjoint();
    if (gr[1]) map(gr[1]->craw(), k, n).noalias() += cmap(as->craw(), m, k).adjoint() * G;
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0];
  const std::size_t c = a.shape()[1];
  const std::size_t w = a.kind() == Kind::complex ? 2 : 1;
  const Tensor& x = a.value();
  Tensor out({c, r}, a.kind());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t q = 0; q < w; ++q) out[(j * r + i) * w + q] = x[(i * c + j) * w + q];
  return make_result(std::move(out), {&a}, [r, c, w](const Tensor& g, GradRefs gr) {
    Tensor& ga = *gr[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t q = 0; q < w; ++q) ga[(i * c + j) * w + q] += g[(j * r + i) * w + q];
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_real(x, "linear");
  require_rank(w, 2, "linear");
  if (x.shape().size() < 2) throw DimensionError("linear: x must have rank >= 2");
  const std::size_t in = x.shape().back();
  const std::size_t nb = x.value().numel() / in;
  const std::size_t out_dim = w.shape()[0];
  if (w.shape()[1] != in || b.value().numel() != out_dim) {
    throw DimensionError("linear: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) + ", b " +
                         shape_str(b.shape()));
  }
  TensorPtr xs = x.value_ptr();
  TensorPtr ws = w.value_ptr();
  Shape shape = x.shape();
  shape.back() = out_dim;
  Tensor out(shape);
  auto Y = map(out.raw(), nb, out_dim);
  Y.noalias() = cmap(xs->raw(), nb, in) * cmap(ws->raw(), out_dim, in).transpose();
  Y.rowwise() += cmap(b.value().raw(), 1, out_dim).row(0);
  return make_result(std::move(out), {&x, &w, &b}, [xs, ws, nb, in, out_dim](const Tensor& g, GradRefs gr) {
    auto G = cmap(g.raw(), nb, out_dim);
    if (gr[0]) map(gr[0]->raw(), nb, in).noalias() += G * cmap(ws->raw(), out_dim, in);
    if (gr[1]) map(gr[1]->raw(), out_dim, in).noalias() += G.transpose() * cmap(xs->raw(), nb, in);
    if (gr[2]) map(gr[2]->raw(), 1, out_dim) += G.colwise().sum();
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {&a}, [](const Tensor& g, GradRefs gr) { accumulate(*gr[0], g.raw()); });
}

Var segment(const Var& flat, std::size_t offset, Shape shape, Kind kind) {
  require_real(flat, "segment");
  require_rank(flat, 1, "segment");
  const std::size_t len = shape_numel(shape) * (kind == Kind::complex ? 2 : 1);
  if (offset + len > flat.value().size()) {
    throw DimensionError("segment: [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                         ") exceeds flat length " + std::to_string(flat.value().size()));
  }
  const double* src = flat.value().raw() + offset;
  Tensor out(std::move(shape), std::vector<double>(src, src + len), kind);
  return make_result(std::move(out), {&flat}, [offset](const Tensor& g, GradRefs gr) {
    double* dst = gr[0]->raw() + offset;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var gather_cols(const Var& a, std::span<const std::int64_t> cols) {
  require_real(a, "gather_cols");
  require_rank(a, 2, "gather_cols");
  const std::size_t r = a.shape()[0];
  const std::size_t c = a.shape()[1];
  std::vector<std::size_t> idx(cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] < 0 || static_cast<std::size_t>(cols[j]) >= c) {
      throw DimensionError("gather_cols: column " + std::to_string(cols[j]) + " out of range " + std::to_string(c));
    }
    idx[j] = static_cast<std::size_t>(cols[j]);
  }
  const std::size_t k = idx.size();
  const Tensor& x = a.value();
  Tensor out({r, k});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[i * c + idx[j]];
  return make_result(std::move(out), {&a}, [idx = std::move(idx), r, c, k](const Tensor& g, GradRefs gr) {
    Tensor& ga = *gr[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < k; ++j) ga[i * c + idx[j]] += g[i * k + j];
  });
}

Var concat_cols(const Var& a, const Var& b) {
  require_real(a, "concat_cols");
  require_real(b, "concat_cols");
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  const std::size_t r = a.shape()[0];
  if (b.shape()[0] != r) throw DimensionError("concat_cols: row counts differ");
  const std::size_t c1 = a.shape()[1];
  const std::size_t c2 = b.shape()[1];
  const std::size_t c = c1 + c2;
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.value().raw() + i * c1, c1, out.raw() + i * c);
    std::copy_n(b.value().raw() + i * c2, c2, out.raw() + i * c + c1);
  }
  return make_result(std::move(out), {&a, &b}, [r, c1, c2, c](const Tensor& g, GradRefs gr) {
    for (std::size_t i = 0; i < r; ++i) {
      if (gr[0])
        for (std::size_t j = 0; j < c1; ++j) (*gr[0])[i * c1 + j] += g[i * c + j];
      if (gr[1])
        for (std::size_t j = 0; j < c2; ++j) (*gr[1])[i * c2 + j] += g[i * c + c1 + j];
    }
  });
}

Var to_complex(const Var& a) {
  require_real(a, "to_complex");
  const Tensor& x = a.value();
  Tensor out(x.shape(), Kind::complex);
  for (std::size_t i = 0; i < x.size(); ++i) out[2 * i] = x[i];
  return make_result(std::move(out), {&a}, [](const Tensor& g, GradRefs gr) {
    Tensor& ga = *gr[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[2 * i];
  });
}

Var as_real(const Var& a) {
  if (a.kind() != Kind::complex) throw DimensionError("as_real: expects a complex tensor");
  Shape shape = a.shape();
  shape.push_back(2);
  Tensor out(shape, std::vector<double>(a.value().data().begin(), a.value().data().end()));
  return make_result(std::move(out), {&a}, [](const Tensor& g, GradRefs gr) { accumulate(*gr[0], g.raw()); });
}

Var as_complex(const Var& a) {
  require_real(a, "as_complex");
  if (a.shape().empty() || a.shape().back() != 2) throw DimensionError("as_complex: last extent must be 2");
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out(shape, std::vector<double>(a.value().data().begin(), a.value().data().end()), Kind::complex);
  return make_result(std::move(out), {&a}, [](const Tensor& g, GradRefs gr) { accumulate(*gr[0], g.raw()); });
}

namespace {

// Lower Cholesky factor of the symmetric part of a square real matrix.
std::shared_ptr<Tensor> symmetric_factor(const Var& a, const char* op) {
  require_real(a, op);
  require_rank(a, 2, op);
  const std::size_t n = a.shape()[0];
  if (a.shape()[1] != n) throw DimensionError(std::string(op) + ": matrix must be square");
  auto l = std::make_shared<Tensor>(Shape{n, n});
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) l->at(i, j) = 0.5 * (x.at(i, j) + x.at(j, i));
  linalg::cholesky_lower(l->data(), n);
  return l;
}

// ga += (M + M^T) / 2 * s
void add_symmetrized(Tensor& ga, const Tensor& m, std::size_t n, double s) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += 0.5 * s * (m[i * n + j] + m[j * n + i]);
}

}  // namespace

Var solve_spd(const Var& a, const Var& b) {
  auto l = symmetric_factor(a, "solve_spd");
  require_real(b, "solve_spd");
  const std::size_t n = a.shape()[0];
  const auto& sb = b.shape();
  if (sb.empty() || sb.size() > 2 || sb[0] != n) {
    throw DimensionError("solve_spd: rhs " + shape_str(sb) + " incompatible with " + shape_str(a.shape()));
  }
  const std::size_t m = sb.size() == 2 ? sb[1] : 1;
  auto x = std::make_shared<Tensor>(b.value());
  linalg::cholesky_solve(l->data(), n, x->data(), m);
  Tensor out = *x;
  return make_result(std::move(out), {&a, &b}, [l, x, n, m](const Tensor& g, GradRefs gr) {
    Tensor gb = g;
    linalg::cholesky_solve(l->data(), n, gb.data(), m);
    if (gr[1]) accumulate(*gr[1], gb.raw());
    if (gr[0]) {
      Tensor outer({n, n});
      map(outer.raw(), n, n).noalias() = cmap(gb.raw(), n, m) * cmap(x->raw(), n, m).transpose();
      add_symmetrized(*gr[0], outer, n, -1.0);
    }
  });
}

Var logdet_spd(const Var& a) {
  auto l = symmetric_factor(a, "logdet_spd");
  const std::size_t n = a.shape()[0];
  const double v = linalg::cholesky_logdet(l->data(), n);
  return make_result(Tensor::scalar(v), {&a}, [l, n](const Tensor& g, GradRefs gr) {
    Tensor inv = Tensor::identity(n);
    linalg::cholesky_solve(l->data(), n, inv.data(), n);
    add_symmetrized(*gr[0], inv, n, g[0]);
  });
}

namespace {

// Real matrices of the one-sided DFT pair for length d with m = d/2 + 1 modes.
//   forward [d x 2m]: (v * F) gives interleaved (re, im) coefficients
//   inverse [2m x d]: (lam * B) gives the real signal
struct DftBasis {
  std::size_t d = 0;
  std::size_t m = 0;
  Buffer forward;
  Buffer inverse;
};

std::shared_ptr<const DftBasis> make_basis(std::size_t d) {
  auto basis = std::make_shared<DftBasis>();
  const std::size_t m = d / 2 + 1;
  basis->d = d;
  basis->m = m;
  basis->forward.assign(d * 2 * m, 0.0);
  basis->inverse.assign(2 * m * d, 0.0);
  const double dd = static_cast<double>(d);
  for (std::size_t x = 0; x < d; ++x) {
    for (std::size_t k = 0; k < m; ++k) {
      // reduce k*x mod d before scaling to keep the angle exact-ish
      const double angle = 2.0 * std::numbers::pi * static_cast<double>((k * x) % d) / dd;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      basis->forward[x * 2 * m + 2 * k] = c;
      basis->forward[x * 2 * m + 2 * k + 1] = -s;
      const bool self_conjugate = k == 0 || (d % 2 == 0 && k == d / 2);
      const double weight = (self_conjugate ? 1.0 : 2.0) / dd;
      basis->inverse[(2 * k) * d + x] = weight * c;
      basis->inverse[(2 * k + 1) * d + x] = self_conjugate ? 0.0 : -weight * s;
    }
  }
  return basis;
}

std::shared_ptr<const DftBasis> dft_basis(std::size_t d) {
  thread_local std::map<std::size_t, std::shared_ptr<const DftBasis>> cache;
  auto it = cache.find(d);
  if (it != cache.end()) return it->second;
  auto basis = make_basis(d);
  cache.emplace(d, basis);
  return basis;
}

}  // namespace

Var rdft(const Var& v) {
  require_real(v, "rdft");
  if (v.shape().empty() || v.shape().back() == 0) throw DimensionError("rdft: need a non-empty last axis");
  const std::size_t d = v.shape().back();
  const std::size_t rows = v.value().numel() / d;
  auto basis = dft_basis(d);
  const std::size_t m = basis->m;
  Shape shape = v.shape();
  shape.back() = m;
  Tensor out(shape, Kind::complex);
  map(out.raw(), rows, 2 * m).noalias() = cmap(v.value().raw(), rows, d) * cmap(basis->forward.data(), d, 2 * m);
  return make_result(std::move(out), {&v}, [basis, rows, d, m](const Tensor& g, GradRefs gr) {
    map(gr[0]->raw(), rows, d).noalias() +=
        cmap(g.raw(), rows, 2 * m) * cmap(basis->forward.data(), d, 2 * m).transpose();
  });
}

Var irdft(const Var& spectrum, std::size_t d) {
  if (spectrum.kind() != Kind::complex) throw DimensionError("irdft: expects a complex tensor");
  if (spectrum.shape().empty() || spectrum.shape().back() == 0) throw DimensionError("irdft: need h >= 1 modes");
  if (d == 0) throw DimensionError("irdft: output length must be positive");
  const std::size_t h = spectrum.shape().back();
  const std::size_t rows = spectrum.value().numel() / h;
  auto basis = dft_basis(d);
  const std::size_t m = basis->m;
  const std::size_t keep = std::min(h, m);

  const double* src = spectrum.value().raw();
  Buffer fitted;
  if (h != m) {
    fitted.assign(rows * 2 * m, 0.0);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * 2 * h, 2 * keep, fitted.data() + r * 2 * m);
    src = fitted.data();
  }
  Shape shape = spectrum.shape();
  shape.back() = d;
  Tensor out(shape);
  map(out.raw(), rows, d).noalias() = cmap(src, rows, 2 * m) * cmap(basis->inverse.data(), 2 * m, d);
  return make_result(std::move(out), {&spectrum}, [basis, rows, d, m, h, keep](const Tensor& g, GradRefs gr) {
    Tensor& gs = *gr[0];
    if (h == m) {
      map(gs.raw(), rows, 2 * m).noalias() +=
          cmap(g.raw(), rows, d) * cmap(basis->inverse.data(), 2 * m, d).transpose();
      return;
    }
    Buffer tmp(rows * 2 * m);
    map(tmp.data(), rows, 2 * m).noalias() =
        cmap(g.raw(), rows, d) * cmap(basis->inverse.data(), 2 * m, d).transpose();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t q = 0; q < 2 * keep; ++q) gs[r * 2 * h + q] += tmp[r * 2 * m + q];
  });
}

Var spectral_mix(const Var& lam, const Var& w) {
  if (lam.kind() != Kind::complex || w.kind() != Kind::complex) {
    throw DimensionError("spectral_mix: expects complex operands");
  }
  require_rank(lam, 3, "spectral_mix");
  require_rank(w, 3, "spectral_mix");
  const std::size_t nb = lam.shape()[0];
  const std::size_t cin = lam.shape()[1];
  const std::size_t m = lam.shape()[2];
  const std::size_t cout = w.shape()[0];
  if (w.shape()[1] != cin || w.shape()[2] != m) {
    throw DimensionError("spectral_mix: weights " + shape_str(w.shape()) + " vs input " + shape_str(lam.shape()));
  }
  TensorPtr ls = lam.value_ptr();
  TensorPtr ws = w.value_ptr();
  Tensor out({nb, cout, m}, Kind::complex);
  {
    const double* L = ls->raw();
    const double* W = ws->raw();
    double* O = out.raw();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < cout; ++i) {
        double* o = O + 2 * (b * cout + i) * m;
        for (std::size_t j = 0; j < cin; ++j) {
          const double* wij = W + 2 * (i * cin + j) * m;
          const double* lj = L + 2 * (b * cin + j) * m;
          for (std::size_t k = 0; k < m; ++k) {
            const double wr = wij[2 * k], wi = wij[2 * k + 1];
            const double lr = lj[2 * k], li = lj[2 * k + 1];
            o[2 * k] += wr * lr - wi * li;
            o[2 * k + 1] += wr * li + wi * lr;
          }
        }
      }
  }
  return make_result(std::move(out), {&lam, &w}, [ls, ws, nb, cin, cout, m](const Tensor& g, GradRefs gr) {
    const double* L = ls->raw();
    const double* W = ws->raw();
    const double* G = g.raw();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < cout; ++i) {
        const double* gi = G + 2 * (b * cout + i) * m;
        for (std::size_t j = 0; j < cin; ++j) {
          const double* wij = W + 2 * (i * cin + j) * m;
          const double* lj = L + 2 * (b * cin + j) * m;
          if (gr[0]) {
            double* gl = gr[0]->raw() + 2 * (b * cin + j) * m;
            for (std::size_t k = 0; k < m; ++k) {  // conj(w) * g
              const double wr = wij[2 * k], wi = wij[2 * k + 1];
              const double xr = gi[2 * k], xi = gi[2 * k + 1];
              gl[2 * k] += wr * xr + wi * xi;
              gl[2 * k + 1] += wr * xi - wi * xr;
            }
          }
          if (gr[1]) {
            double* gw = gr[1]->raw() + 2 * (i * cin + j) * m;
            for (std::size_t k = 0; k < m; ++k) {  // g * conj(lam)
              const double lr = lj[2 * k], li = lj[2 * k + 1];
              const double xr = gi[2 * k], xi = gi[2 * k + 1];
              gw[2 * k] += xr * lr + xi * li;
              gw[2 * k + 1] += xi * lr - xr * li;
            }
          }
        }
      }
  });
}

Var channel_mix(const Var& v, const Var& m, const Var& bias) {
  require_real(v, "channel_mix");
  require_rank(v, 3, "channel_mix");
  require_rank(m, 2, "channel_mix");
  const std::size_t nb = v.shape()[0];
  const std::size_t cin = v.shape()[1];
  const std::size_t x = v.shape()[2];
  const std::size_t cout = m.shape()[0];
  if (m.shape()[1] != cin || bias.value().numel() != cout) {
    throw DimensionError("channel_mix: v " + shape_str(v.shape()) + ", m " + shape_str(m.shape()) + ", bias " +
                         shape_str(bias.shape()));
  }
  TensorPtr vs = v.value_ptr();
  TensorPtr ms = m.value_ptr();
  Tensor out({nb, cout, x});
  auto M = cmap(ms->raw(), cout, cin);
  const double* bv = bias.value().raw();
  for (std::size_t b = 0; b < nb; ++b) {
    auto O = map(out.raw() + b * cout * x, cout, x);
    O.noalias() = M * cmap(vs->raw() + b * cin * x, cin, x);
    for (std::size_t i = 0; i < cout; ++i) O.row(static_cast<Eigen::Index>(i)).array() += bv[i];
  }
  return make_result(std::move(out), {&v, &m, &bias}, [vs, ms, nb, cin, cout, x](const Tensor& g, GradRefs gr) {
    auto M = cmap(ms->raw(), cout, cin);
    for (std::size_t b = 0; b < nb; ++b) {
      auto G = cmap(g.raw() + b * cout * x, cout, x);
      if (gr[0]) map(gr[0]->raw() + b * cin * x, cin, x).noalias() += M.transpose() * G;
      if (gr[1]) map(gr[1]->raw(), cout, cin).noalias() += G * cmap(vs->raw() + b * cin * x, cin, x).transpose();
      if (gr[2]) map(gr[2]->raw(), cout, 1) += G.rowwise().sum();
    }
  });
}

Var layer_norm_channels(const Var& v, const Var& gain, const Var& bias, double eps) {
  require_real(v, "layer_norm_channels");
  require_rank(v, 3, "layer_norm_channels");
  const std::size_t nb = v.shape()[0];
  const std::size_t c = v.shape()[1];
  const std::size_t x = v.shape()[2];
  if (gain.value().numel() != c || bias.value().numel() != c) {
    throw DimensionError("layer_norm_channels: gain/bias must have " + std::to_string(c) + " entries");
  }
  const Tensor& in = v.value();
  auto xhat = std::make_shared<Tensor>(Shape{nb, c, x});
  auto inv_std = std::make_shared<std::vector<double>>(nb * x);
  std::vector<double> mu(x), var(x);
  const double cc = static_cast<double>(c);
  for (std::size_t b = 0; b < nb; ++b) {
    const double* vb = in.raw() + b * c * x;
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < x; ++p) mu[p] += vb[ch * x + p];
    for (std::size_t p = 0; p < x; ++p) mu[p] /= cc;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < x; ++p) {
        const double dv = vb[ch * x + p] - mu[p];
        var[p] += dv * dv;
      }
    double* is = inv_std->data() + b * x;
    for (std::size_t p = 0; p < x; ++p) is[p] = 1.0 / std::sqrt(var[p] / cc + eps);
    double* xb = xhat->raw() + b * c * x;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < x; ++p) xb[ch * x + p] = (vb[ch * x + p] - mu[p]) * is[p];
  }
  TensorPtr gs = gain.value_ptr();
  Tensor out({nb, c, x});
  const double* gv = gs->raw();
  const double* bv = bias.value().raw();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < x; ++p) {
        const std::size_t idx = (b * c + ch) * x + p;
        out[idx] = (*xhat)[idx] * gv[ch] + bv[ch];
      }
  return make_result(std::move(out), {&v, &gain, &bias}, [xhat, inv_std, gs, nb, c, x](const Tensor& g, GradRefs gr) {
    const double cc = static_cast<double>(c);
    const double* gv = gs->raw();
    std::vector<double> mean_d(x), mean_dx(x);
    for (std::size_t b = 0; b < nb; ++b) {
      const double* gb = g.raw() + b * c * x;
      const double* xb = xhat->raw() + b * c * x;
      if (gr[1] || gr[2]) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t p = 0; p < x; ++p) {
            sg += gb[ch * x + p];
            sgx += gb[ch * x + p] * xb[ch * x + p];
          }
          if (gr[1]) (*gr[1])[ch] += sgx;
          if (gr[2]) (*gr[2])[ch] += sg;
        }
      }
      if (!gr[0]) continue;
      std::fill(mean_d.begin(), mean_d.end(), 0.0);
      std::fill(mean_dx.begin(), mean_dx.end(), 0.0);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < x; ++p) {
          const double dxh = gb[ch * x + p] * gv[ch];
          mean_d[p] += dxh;
          mean_dx[p] += dxh * xb[ch * x + p];
        }
      for (std::size_t p = 0; p < x; ++p) {
        mean_d[p] /= cc;
        mean_dx[p] /= cc;
      }
      const double* is = inv_std->data() + b * x;
      double* gvb = gr[0]->raw() + b * c * x;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < x; ++p) {
          const double dxh = gb[ch * x + p] * gv[ch];
          gvb[ch * x + p] += is[p] * (dxh - mean_d[p] - xb[ch * x + p] * mean_dx[p]);
        }
    }
  });
}

Var rdft_cols(const Var& v) {
  require_real(v, "rdft_cols");
  if (v.shape().empty() || v.shape()[0] == 0) throw DimensionError("rdft_cols: need a non-empty first axis");
  const std::size_t d = v.shape()[0];
  const std::size_t r = v.value().numel() / d;
  auto basis = dft_basis(d);
  const std::size_t m = basis->m;
  Tensor out({m, 2, r});
  map(out.raw(), 2 * m, r).noalias() = cmap(basis->forward.data(), d, 2 * m).transpose() * cmap(v.value().raw(), d, r);
  return make_result(std::move(out), {&v}, [basis, d, m, r](const Tensor& g, GradRefs gr) {
    map(gr[0]->raw(), d, r).noalias() += cmap(basis->forward.data(), d, 2 * m) * cmap(g.raw(), 2 * m, r);
  });
}

Var irdft_cols(const Var& spectrum, std::size_t d, const Shape& tail) {
  require_real(spectrum, "irdft_cols");
  require_rank(spectrum, 3, "irdft_cols");
  if (spectrum.shape()[1] != 2 || spectrum.shape()[0] == 0) {
    throw DimensionError("irdft_cols: spectrum must be [h, 2, R], got " + shape_str(spectrum.shape()));
  }
  if (d == 0) throw DimensionError("irdft_cols: output length must be positive");
  const std::size_t h = spectrum.shape()[0];
  const std::size_t r = spectrum.shape()[2];
  if (shape_numel(tail) != r) throw DimensionError("irdft_cols: tail " + shape_str(tail) + " does not match R");
  auto basis = dft_basis(d);
  const std::size_t m = basis->m;
  const std::size_t keep = std::min(h, m);
  Shape shape{d};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out(shape);
  auto inv = cmap(basis->inverse.data(), 2 * m, d);
  map(out.raw(), d, r).noalias() =
      inv.topRows(static_cast<Eigen::Index>(2 * keep)).transpose() * cmap(spectrum.value().raw(), 2 * keep, r);
  return make_result(std::move(out), {&spectrum}, [basis, d, m, r, keep](const Tensor& g, GradRefs gr) {
    auto inv = cmap(basis->inverse.data(), 2 * m, d);
    map(gr[0]->raw(), 2 * keep, r).noalias() += inv.topRows(static_cast<Eigen::Index>(2 * keep)) * cmap(g.raw(), d, r);
  });
}

Var spectral_mix_cols(const Var& spectrum, const Var& w) {
  require_real(spectrum, "spectral_mix_cols");
  require_rank(spectrum, 3, "spectral_mix_cols");
  require_rank(w, 3, "spectral_mix_cols");
  if (w.kind() != Kind::complex) throw DimensionError("spectral_mix_cols: weights must be complex");
  const std::size_t m = spectrum.shape()[0];
  const std::size_t cout = w.shape()[0];
  const std::size_t cin = w.shape()[1];
  const std::size_t r_in = spectrum.shape()[2];
  if (spectrum.shape()[1] != 2 || w.shape()[2] != m || cin == 0 || r_in % cin != 0) {
    throw DimensionError("spectral_mix_cols: spectrum " + shape_str(spectrum.shape()) + " vs weights " +
                         shape_str(w.shape()));
  }
  const std::size_t nb = r_in / cin;
  // per-mode real and imaginary weight matrices [m][cout x cin]
  auto planes = std::make_shared<Buffer>(2 * m * cout * cin);
  {
    const double* wv = w.value().raw();
    for (std::size_t i = 0; i < cout; ++i)
      for (std::size_t j = 0; j < cin; ++j)
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t src = 2 * ((i * cin + j) * m + k);
          (*planes)[(2 * k) * cout * cin + i * cin + j] = wv[src];
          (*planes)[(2 * k + 1) * cout * cin + i * cin + j] = wv[src + 1];
        }
  }
  TensorPtr ss = spectrum.value_ptr();
  Tensor out({m, 2, nb * cout});
  {
    detail::RowMat a(2 * nb, cout), b(2 * nb, cout);
    for (std::size_t k = 0; k < m; ++k) {
      auto x = cmap(ss->raw() + 2 * k * r_in, 2 * nb, cin);  // [re; im] stacked
      auto wre = cmap(planes->data() + 2 * k * cout * cin, cout, cin);
      auto wim = cmap(planes->data() + (2 * k + 1) * cout * cin, cout, cin);
      a.noalias() = x * wre.transpose();
      b.noalias() = x * wim.transpose();
      const auto n = static_cast<Eigen::Index>(nb);
      map(out.raw() + 2 * k * nb * cout, nb, cout) = a.topRows(n) - b.bottomRows(n);
      map(out.raw() + (2 * k + 1) * nb * cout, nb, cout) = b.topRows(n) + a.bottomRows(n);
    }
  }
  return make_result(std::move(out), {&spectrum, &w}, [ss, planes, m, nb, cin, cout](const Tensor& g, GradRefs gr) {
    const auto n = static_cast<Eigen::Index>(nb);
    detail::RowMat p(2 * nb, cin), q(2 * nb, cin), swapped(2 * nb, cout);
    detail::RowMat gwre(cout, cin), gwim(cout, cin);
    for (std::size_t k = 0; k < m; ++k) {
      auto gs = cmap(g.raw() + 2 * k * nb * cout, 2 * nb, cout);  // [g_re; g_im]
      auto wre = cmap(planes->data() + 2 * k * cout * cin, cout, cin);
      auto wim = cmap(planes->data() + (2 * k + 1) * cout * cin, cout, cin);
      if (gr[0]) {
        p.noalias() = gs * wre;
        q.noalias() = gs * wim;
        map(gr[0]->raw() + 2 * k * nb * cin, nb, cin) += p.topRows(n) + q.bottomRows(n);
        map(gr[0]->raw() + (2 * k + 1) * nb * cin, nb, cin) += p.bottomRows(n) - q.topRows(n);
      }
      if (gr[1]) {
        auto x = cmap(ss->raw() + 2 * k * nb * cin, 2 * nb, cin);
        swapped.topRows(n) = gs.bottomRows(n);
        swapped.bottomRows(n) = -gs.topRows(n);
        gwre.noalias() = gs.transpose() * x;
        gwim.noalias() = swapped.transpose() * x;
        double* gw = gr[1]->raw();
        for (std::size_t i = 0; i < cout; ++i)
          for (std::size_t j = 0; j < cin; ++j) {
            const std::size_t dst = 2 * ((i * cin + j) * m + k);
            gw[dst] += gwre(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            gw[dst + 1] += gwim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
          }
      }
    }
  });
}

Var layer_norm_last(const Var& v, const Var& gain, const Var& bias, double eps) {
  require_real(v, "layer_norm_last");
  if (v.shape().empty()) throw DimensionError("layer_norm_last: need rank >= 1");
  const std::size_t c = v.shape().back();
  const std::size_t rows = v.value().numel() / c;
  if (gain.value().numel() != c || bias.value().numel() != c) {
    throw DimensionError("layer_norm_last: gain/bias must have " + std::to_string(c) + " entries");
  }
  // Eigen reductions use several accumulators; a plain loop is latency-bound here
  auto x = cmap(v.value().raw(), rows, c).array();
  auto xhat = std::make_shared<Tensor>(v.shape());
  auto inv_std = std::make_shared<Eigen::ArrayXd>(static_cast<Eigen::Index>(rows));
  auto xh = map(xhat->raw(), rows, c).array();
  xh = x.colwise() - x.rowwise().mean();
  *inv_std = (xh.square().rowwise().mean() + eps).rsqrt();
  xh.colwise() *= *inv_std;
  TensorPtr gs = gain.value_ptr();
  auto gain_row = cmap(gs->raw(), 1, c).array();
  auto bias_row = cmap(bias.value().raw(), 1, c).array();
  Tensor out(v.shape());
  map(out.raw(), rows, c).array() = (xh.rowwise() * gain_row.row(0)).rowwise() + bias_row.row(0);
  return make_result(std::move(out), {&v, &gain, &bias}, [xhat, inv_std, gs, rows, c](const Tensor& g, GradRefs gr) {
    auto G = cmap(g.raw(), rows, c).array();
    auto xh = cmap(xhat->raw(), rows, c).array();
    if (gr[1]) map(gr[1]->raw(), 1, c).array() += (G * xh).colwise().sum();
    if (gr[2]) map(gr[2]->raw(), 1, c).array() += G.colwise().sum();
    if (!gr[0]) return;
    detail::RowMat dxh = (G.rowwise() * cmap(gs->raw(), 1, c).array().row(0)).matrix();
    const Eigen::ArrayXd mean_d = dxh.array().rowwise().mean();
    const Eigen::ArrayXd mean_dx = (dxh.array() * xh).rowwise().mean();
    auto gx = map(gr[0]->raw(), rows, c).array();
    gx += ((dxh.array().colwise() - mean_d) - xh.colwise() * mean_dx).colwise() * (*inv_std);
  });
}

Var gaussian_reparam(const Var& mean, const Var& scale_factor, RngStream& stream) {
  require_real(mean, "gaussian_reparam");
  require_real(scale_factor, "gaussian_reparam");
  if (mean.shape().empty()) throw DimensionError("gaussian_reparam: mean must have rank >= 1");
  const std::size_t d = mean.shape().back();
  const Tensor& s = scale_factor.value();
  Tensor xi(mean.shape());
  if (s.rank() == 1 && s.numel() == d) {
    for (std::size_t i = 0; i < d; ++i) {
      if (s[i] < 0.0) throw ParameterizationError("gaussian_reparam: negative diagonal scale at " + std::to_string(i));
    }
    stream.fill_normal(xi.data());
    return add(mean, mul(Var(std::move(xi)), scale_factor));
  }
  if (s.rank() == 2 && s.shape()[0] == d && s.shape()[1] == d) {
    for (std::size_t i = 0; i < d; ++i) {
      if (s.at(i, i) < 0.0) {
        throw ParameterizationError("gaussian_reparam: negative factor diagonal at " + std::to_string(i));
      }
    }
    stream.fill_normal(xi.data());
    const std::size_t rows = xi.numel() / d;
    Var noise = matmul(Var(xi.reshaped({rows, d})), transpose(scale_factor));
    return add(mean, reshape(noise, mean.shape()));
  }
  throw DimensionError("gaussian_reparam: scale " + shape_str(s.shape()) + " is neither [d] nor [d x d]");
}

}  // namespace roadenkf::ad
