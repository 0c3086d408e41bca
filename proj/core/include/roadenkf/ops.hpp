#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "roadenkf/rng.hpp"
#include "roadenkf/tape.hpp"

namespace roadenkf::ad {

// Differentiable ops. Each op records itself on the tape of its inputs when
// any input requires grad; on constants it only computes the value.
//
// Binary elementwise ops broadcast the right operand when its shape is a
// trailing suffix of the left operand's shape, or when it has one element.

Var detach(const Var& v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var neg(const Var& a);

Var relu(const Var& a);
Var softplus(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
/// [R x C] -> [C]
Var sum_rows(const Var& a);
Var mean_rows(const Var& a);

/// Real or complex [m x k] * [k x n].
Var matmul(const Var& a, const Var& b);
/// Plain (non-conjugating) transpose of a 2-D tensor.
Var transpose(const Var& a);
/// x * w^T + b for x [... x in], w [out x in], b [out]; leading axes are kept.
Var linear(const Var& x, const Var& w, const Var& b);

Var reshape(const Var& a, Shape shape);
/// Slice of a real rank-1 `flat` starting at double offset `offset`, read as a
/// tensor of `shape`/`kind` (complex entries take two doubles each).
Var segment(const Var& flat, std::size_t offset, Shape shape, Kind kind = Kind::real);
/// Selects columns of a 2-D real tensor.
Var gather_cols(const Var& a, std::span<const std::int64_t> cols);
/// [R x C1] ++ [R x C2] -> [R x (C1 + C2)]
Var concat_cols(const Var& a, const Var& b);
/// Real tensor promoted to complex with zero imaginary part.
Var to_complex(const Var& a);
/// Complex [...] reinterpreted as real [..., 2] (re, im) and back.
Var as_real(const Var& a);
Var as_complex(const Var& a);

/// X with A X = B via Cholesky of (A + A^T) / 2. B is [n] or [n x m].
Var solve_spd(const Var& a, const Var& b);
/// log det A via Cholesky of (A + A^T) / 2.
Var logdet_spd(const Var& a);

/// One-sided DFT along the last axis, unnormalized:
/// out_k = sum_x v_x exp(-2 pi i k x / d), k = 0 .. floor(d/2).
Var rdft(const Var& v);
/// Real inverse of a one-sided Hermitian spectrum with 1/d normalization.
/// The input is truncated or zero-padded to floor(d/2)+1 modes; imaginary
/// parts at mode 0 (and at the Nyquist mode for even d) are ignored.
Var irdft(const Var& spectrum, std::size_t d);

/// Per-mode channel mixing: out[b,i,k] = sum_j w[i,j,k] * lam[b,j,k] (complex).
Var spectral_mix(const Var& lam, const Var& w);
/// Per-position channel mixing: out[b,i,x] = sum_j m[i,j] * v[b,j,x] + bias[i].
Var channel_mix(const Var& v, const Var& m, const Var& bias);
/// Normalizes v[b,:,x] over the channel axis, then applies gain/bias per channel.
Var layer_norm_channels(const Var& v, const Var& gain, const Var& bias, double eps = 1e-5);

// Node-major variants. Fields are stored [d, ...] with the spatial axis first,
// so one GEMM transforms every batch row and channel at once. Spectra use a
// split layout [modes, 2, R]: slice [k, 0, :] holds real parts, [k, 1, :]
// imaginary parts, with the same column order as the input.

/// One-sided DFT along axis 0: [d, ...] -> [d/2 + 1, 2, R], R = product of the rest.
Var rdft_cols(const Var& v);
/// Inverse of rdft_cols. The spectrum [h, 2, R] is truncated or zero-padded
/// to d/2 + 1 modes; output shape is [d] ++ tail with product(tail) = R.
Var irdft_cols(const Var& spectrum, std::size_t d, const Shape& tail);
/// Per-mode channel mixing on split spectra whose columns are (batch, channel)
/// pairs with channels fastest: [m, 2, B*n_in] -> [m, 2, B*n_out], with
/// w complex [n_out x n_in x m].
Var spectral_mix_cols(const Var& spectrum, const Var& w);
/// Normalizes over the last axis, then applies gain/bias along it.
Var layer_norm_last(const Var& v, const Var& gain, const Var& bias, double eps = 1e-5);

/// mean + scale * xi with xi ~ N(0, I) drawn from `stream` in row-major order.
/// `scale` is either a vector matching the trailing extent (diagonal factor)
/// or a lower-triangular d x d factor L (covariance L L^T).
Var gaussian_reparam(const Var& mean, const Var& scale, RngStream& stream);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace roadenkf::ad
