#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "roadenkf/ops.hpp"
#include "roadenkf/rng.hpp"

namespace roadenkf::dyn {

using ad::Tensor;
using ad::Var;

/// x -> W2 relu(W1 x + b1) + b2, applied row-wise to a [batch x d_in] input.
struct FcNet2 {
  Var W1;  // [h x d_in]
  Var b1;  // [h]
  Var W2;  // [d_out x h]
  Var b2;  // [d_out]

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "W1", W1);
    f(prefix + "b1", b1);
    f(prefix + "W2", W2);
    f(prefix + "b2", b2);
  }
};

/// Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases.
FcNet2 init_fcnet2(std::size_t d_in, std::size_t hidden, std::size_t d_out, RngStream& stream);
Var fc2_apply(const FcNet2& net, const Var& x);

/// Diagonal Gaussian noise with standard deviations exp(log_scales).
struct DiagNoise {
  Var log_scales;  // [d]

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "log_scales", log_scales);
  }
};

DiagNoise init_diag_noise(std::size_t d, double scale = 0.1);

enum class Scheme { euler, rk4 };

struct FlowConfig {
  double dt_obs = 0.1;
  double dt_int = 0.05;
  Scheme scheme = Scheme::rk4;

  /// dt_obs / dt_int; throws ConfigError unless it is a positive integer.
  std::size_t substeps() const;
};

std::string scheme_name(Scheme s);
Scheme parse_scheme(const std::string& s);

using VectorField = std::function<Var(const Var&)>;

/// Flow map over dt_obs built from fixed substeps of the chosen scheme.
/// Differentiable through every substep. A non-finite state throws
/// DivergenceError carrying the 1-based substep index.
Var integrate(const VectorField& field, const Var& x0, const FlowConfig& cfg);

/// Flow-map image of each particle row plus diagonal Gaussian noise, drawn
/// once per observation interval from `stream`.
Var stochastic_transition(const VectorField& field, const DiagNoise& noise, const Var& prev, const FlowConfig& cfg,
                          RngStream& stream);

/// stochastic_transition with the latent vector field given by `net`.
Var latent_transition(const FcNet2& net, const DiagNoise& noise, const Var& z_prev, const FlowConfig& cfg,
                      RngStream& stream);

/// N i.i.d. draws from N(0, sigma0^2 I_{d_z}), as an [N x d_z] tensor.
Tensor sample_initial_latent(std::size_t d_z, std::size_t n, double sigma0, RngStream& stream);

}  // namespace roadenkf::dyn
