#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "roadenkf/ops.hpp"
#include "roadenkf/rng.hpp"

namespace roadenkf::enkf {

using ad::Tensor;
using ad::Var;

/// y_t = H_t u_t + noise, with H_t either the identity or a row selection of
/// the state that may change with t, and R_t = diag(r). Optionally carries the
/// pseudo-observation block 0 = z_t + eps, eps ~ N(0, sigma^2 I) used in training.
class ObservationOp {
 public:
  ObservationOp() = default;
  /// Full observation of a d_u state with R = r I.
  static ObservationOp identity(std::size_t d_u, double r);
  /// Observes rows[t-1] of the state at time t (t = 1 .. rows.size()); every
  /// entry must have the same length and hold distinct indices.
  static ObservationOp selection(std::size_t d_u, std::vector<std::vector<std::int64_t>> rows, double r);
  /// Same as above with one variance per observed coordinate.
  static ObservationOp selection(std::size_t d_u, std::vector<std::vector<std::int64_t>> rows,
                                 std::vector<double> r_diag);

  std::size_t state_dim() const noexcept { return d_u_; }
  /// Dimension of the original observation y_t.
  std::size_t obs_dim() const noexcept { return d_y_; }
  /// Dimension including the pseudo-observation block.
  std::size_t dim() const noexcept { return d_y_ + aug_dim_; }
  bool augmented() const noexcept { return aug_dim_ > 0; }
  std::size_t aug_dim() const noexcept { return aug_dim_; }
  double aug_sigma() const noexcept { return aug_sigma_; }
  bool is_identity() const noexcept { return rows_.empty(); }
  /// Number of time steps with explicit selections (0 for identity).
  std::size_t horizon() const noexcept { return rows_.size(); }
  const std::vector<std::int64_t>& rows(std::size_t t) const;

  /// Observation of decoded particles: [N x d_u] (+ latent [N x d_z] when
  /// augmented) -> [N x dim()].
  Var apply(std::size_t t, const Var& u, const Var& z) const;
  /// Noise-free observation of a single state vector [d_u] -> [d_y].
  Tensor observe(std::size_t t, const Tensor& u) const;
  /// [y_t; 0] when augmented, y_t otherwise.
  Tensor target(const Tensor& y_t) const;

  /// Diagonal of R_t^{-1}, length dim().
  const std::vector<double>& r_inv() const noexcept { return r_inv_; }
  /// Diagonal of R_t, length dim().
  const std::vector<double>& r_diag() const noexcept { return r_diag_; }
  double logdet_r() const noexcept { return logdet_r_; }

  friend ObservationOp augment_observations(const ObservationOp& obs, double sigma, std::size_t d_z);

 private:
  void set_noise(std::vector<double> r_diag);

  std::size_t d_u_ = 0;
  std::size_t d_y_ = 0;
  std::size_t aug_dim_ = 0;
  double aug_sigma_ = 0.0;
  std::vector<std::vector<std::int64_t>> rows_;
  std::vector<double> r_diag_;
  std::vector<double> r_inv_;
  double logdet_r_ = 0.0;
};

/// Appends the pseudo-observation block with R = sigma^2 I_{d_z}.
ObservationOp augment_observations(const ObservationOp& obs, double sigma, std::size_t d_z);

/// Sample moments of a forecast ensemble.
struct Moments {
  Var mean_z;  // [d_z]
  Var mean_h;  // [d_y]
  Var c_zy;    // [d_z x d_y], 1/(N-1) normalization
  Var y;       // [d_y x N], (Hz^n - mean_h) / sqrt(N-1) as columns; C_yy = Y Y^T
};

/// hz [N x d_y], z_pred [N x d_z]. Throws DegenerateEnsembleError if N < 2.
Moments ensemble_moments(const Var& hz, const Var& z_pred);

/// Perturbations eta^n ~ N(0, R) as an [N x dim] tensor, row-major draws.
Tensor draw_obs_noise(const ObservationOp& obs, std::size_t n, RngStream& stream);

/// Perturbed-observation update through the N x N system
/// (I + Y^T R^-1 Y) w = Y^T R^-1 b, z += C_zy R^-1 (b - Y w), b = y + eta - Hz.
Var analysis_update(const Var& z_pred, const Var& hz, const Tensor& y_t, const Tensor& eta,
                    const std::vector<double>& r_inv);
/// Same update through the d_y x d_y gain C_zy (Y Y^T + R)^-1.
Var analysis_update_naive(const Var& z_pred, const Var& hz, const Tensor& y_t, const Tensor& eta,
                          const std::vector<double>& r_diag);

/// analysis_update with eta drawn from `stream`. y_t must already include the
/// pseudo-observation block when `obs` is augmented.
Var analysis_step(const Var& z_pred, const Var& hz, const Tensor& y_t, const ObservationOp& obs, RngStream& stream);
Var analysis_step_naive(const Var& z_pred, const Var& hz, const Tensor& y_t, const ObservationOp& obs,
                        RngStream& stream);

/// log N(y_t; mean_h, Y Y^T + R) via the N x N Woodbury form.
Var loglik_increment(const Var& mean_h, const Var& y, const Tensor& y_t, const ObservationOp& obs);
/// Dense d_y x d_y evaluation of the same density.
Var loglik_increment_naive(const Var& mean_h, const Var& y, const Tensor& y_t, const ObservationOp& obs);

/// State-space model seen by the filter.
struct FilterModel {
  std::size_t d_z = 0;
  /// z_{t-1} [N x d_z] -> forecast particles [N x d_z].
  std::function<Var(const Var&, RngStream&)> transition;
  /// z [N x d_z] -> states [N x d_u].
  std::function<Var(const Var&)> decode;
  /// Initial ensemble [N x d_z].
  std::function<Tensor(std::size_t, RngStream&)> initial;
};

enum class Mode { train, test };

struct FilterOptions {
  /// Absolute time of the first observation row, so segments of a longer
  /// sequence pick the right H_t.
  std::size_t t_begin = 1;
  /// Entry ensemble; drawn from model.initial when empty.
  std::optional<Tensor> initial;
  /// Keep the latent ensemble of every step (z_0 .. z_T).
  bool keep_particles = true;
  /// Decode and keep the analysis ensemble of every step (test mode).
  bool decode_states = false;
};

struct FilterResult {
  std::vector<Var> particles;    // z_0 .. z_T, each [N x d_z]; only the last when not kept
  std::vector<Tensor> states;    // decoded u_0 .. u_T, each [N x d_u], when requested
  std::vector<Var> increments;   // one scalar per step
  Var loglik;                    // sum of increments in step order
};

/// Runs the EnKF over the rows of y [T x d_y] and accumulates the data
/// log-likelihood estimate. In train mode `obs` must be augmented. Particles at
/// entry are treated as constants. Failures carry the absolute time index.
FilterResult run_filter(const FilterModel& model, const ObservationOp& obs, const Tensor& y, std::size_t n,
                        RngStream& stream, Mode mode, const FilterOptions& opts = {});

}  // namespace roadenkf::enkf
