#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roadenkf/enkf.hpp"
#include "roadenkf/tensor.hpp"

namespace roadenkf::truth {

using ad::Tensor;

// Lorenz-63 with the classic (10, 28, 8/3) parameters.
Tensor l63_field(const Tensor& z);

/// Columns P_0..P_5 (P_i(1) = 1) on d_u equally spaced points of [-1, 1].
Tensor legendre_decoder_matrix(std::size_t d_u);

/// u = D [z/40, (z/40)^3] with the cube taken per coordinate.
Tensor embed_l63_state(const Tensor& z, const Tensor& d);

// Finite-difference right-hand sides on M nodes with u_1 = u_M = 0. Boundary
// derivatives are returned as 0 so fixed-step integrators keep the ends at 0.
Tensor burgers_rhs(const Tensor& u, double nu, double dx);
Tensor ks_rhs(const Tensor& u, double nu, double dx);

void burgers_rhs(std::span<const double> u, double nu, double dx, std::span<double> out);
void ks_rhs(std::span<const double> u, double nu, double dx, std::span<double> out);

using OdeRhs = std::function<void(std::span<const double>, std::span<double>)>;

struct Rkf45Options {
  double atol = 1e-9;
  double rtol = 1e-9;
  double h0 = 1e-3;
  std::size_t max_steps = 10'000'000;
};

/// Adaptive Runge-Kutta-Fehlberg 4(5), advancing the fifth-order solution.
/// Integrates x from s to s + span in place. Throws DivergenceError on a
/// non-finite state or step-size underflow.
void rkf45(const OdeRhs& f, std::vector<double>& x, double span, const Rkf45Options& opt = {});

/// `steps` classic RK4 steps of size h in place. Throws DivergenceError with
/// the failing step when the state leaves `bound` or stops being finite.
void rk4_fixed(const OdeRhs& f, std::vector<double>& x, double h, std::size_t steps, double bound = 1e8);

enum class Kind { l63, burgers, ks };

std::string kind_name(Kind k);
Kind parse_kind(const std::string& s);

struct GeneratorParams {
  Kind kind = Kind::l63;
  std::size_t d_u = 128;
  double c = 1.0;  // observed fraction of coordinates
  std::size_t n_train = 1024;
  std::size_t n_test = 20;
  std::size_t T = 250;
  std::size_t Tf = 10;
  double dt_obs = 0.1;
  double r = 0.01;
  std::uint64_t seed = 0;

  // l63
  double z0_scale = 2.0;
  double rkf_tol = 1e-9;

  // burgers / ks
  double nu = 0.0;
  double length = 2.0;
  std::size_t fine_substeps = 0;  // RK4 steps per observation interval

  // burgers initial amplitude U ~ Uniform(amp_lo, amp_hi)
  double amp_lo = 0.5;
  double amp_hi = 1.5;

  // ks initial conditions sampled from one long run
  double burn_in = 200.0;
  double ic_spacing = 10.0;
  double ic_noise = 0.01;
  std::size_t max_halvings = 3;

  /// Published experiment settings for each family. KS uses a smaller d_u
  /// so the default fine step lies inside RK4's stability region.
  static GeneratorParams defaults(Kind k);

  std::size_t d_y() const;
  std::size_t instances() const { return n_train + n_test; }
};

struct Dataset {
  GeneratorParams params;
  Tensor u_true;       // [I x (T+Tf+1) x d_u], index 0 is the initial state
  Tensor y;            // [I x T x d_y], y[:, t-1] observes u_true[:, t]
  Tensor obs_indices;  // [I x T x d_y], row indices or -1 under full observation
  std::optional<Tensor> latent;  // l63 only: [I x (T+Tf+1) x 3]
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::size_t fine_substeps_used = 0;  // after any step-halving retries

  std::size_t instances() const { return u_true.extent(0); }
  bool full_observation() const;
  /// Observation operator of instance i (identity or per-t row selection).
  enkf::ObservationOp observation(std::size_t i) const;
  /// [T x d_y] observations of instance i.
  Tensor observations(std::size_t i) const;
  /// [steps x d_u] truth of instance i starting at time index `from`.
  Tensor truth(std::size_t i, std::size_t from, std::size_t steps) const;
};

Dataset generate_dataset(const GeneratorParams& params);

/// Writes meta.json, u_true.tns, y.tns, obs_indices.tns (and z_true.tns for l63).
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace roadenkf::truth
