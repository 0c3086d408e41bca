#include "roadenkf/dynamics.hpp"

#include <cmath>

#include "roadenkf/error.hpp"

namespace roadenkf::dyn {

using namespace roadenkf::ad;

FcNet2 init_fcnet2(std::size_t d_in, std::size_t hidden, std::size_t d_out, RngStream& stream) {
  auto uniform = [&stream](std::size_t rows, std::size_t cols) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Tensor w({rows, cols});
    for (double& v : w.data()) v = a * (2.0 * stream.uniform() - 1.0);
    return w;
  };
  FcNet2 net;
  net.W1 = Var(uniform(hidden, d_in));
  net.b1 = Var(Tensor({hidden}));
  net.W2 = Var(uniform(d_out, hidden));
  net.b2 = Var(Tensor({d_out}));
  return net;
}

Var fc2_apply(const FcNet2& net, const Var& x) {
  return linear(relu(linear(x, net.W1, net.b1)), net.W2, net.b2);
}

DiagNoise init_diag_noise(std::size_t d, double scale) {
  return DiagNoise{Var(Tensor::full({d}, std::log(scale)))};
}

std::size_t FlowConfig::substeps() const {
  if (!(dt_obs > 0.0) || !(dt_int > 0.0)) throw ConfigError("flow config: time steps must be positive");
  const double ratio = dt_obs / dt_int;
  const double n = std::round(ratio);
  if (n < 1.0 || std::abs(ratio - n) > 1e-9 * ratio) {
    throw ConfigError("flow config: dt_obs / dt_int = " + std::to_string(ratio) + " is not a positive integer");
  }
  return static_cast<std::size_t>(n);
}

std::string scheme_name(Scheme s) { return s == Scheme::rk4 ? "rk4" : "euler"; }

Scheme parse_scheme(const std::string& s) {
  if (s == "rk4") return Scheme::rk4;
  if (s == "euler") return Scheme::euler;
  throw ConfigError("unknown integration scheme '" + s + "' (expected rk4 or euler)");
}

Var integrate(const VectorField& field, const Var& x0, const FlowConfig& cfg) {
  const std::size_t n = cfg.substeps();
  const double h = cfg.dt_obs / static_cast<double>(n);
  Var x = x0;
  for (std::size_t s = 0; s < n; ++s) {
    if (cfg.scheme == Scheme::euler) {
      x = x + scale(field(x), h);
    } else {
      Var k1 = field(x);
      Var k2 = field(x + scale(k1, 0.5 * h));
      Var k3 = field(x + scale(k2, 0.5 * h));
      Var k4 = field(x + scale(k3, h));
      x = x + scale(k1 + scale(k2, 2.0) + scale(k3, 2.0) + k4, h / 6.0);
    }
    if (!x.value().all_finite()) throw DivergenceError("integrate: non-finite state", s + 1);
  }
  return x;
}

Var stochastic_transition(const VectorField& field, const DiagNoise& noise, const Var& prev, const FlowConfig& cfg,
                          RngStream& stream) {
  if (!prev.value().all_finite()) throw DivergenceError("transition: non-finite particles on entry", 0);
  Var mean = integrate(field, prev, cfg);
  return gaussian_reparam(mean, ad::exp(noise.log_scales), stream);
}

Var latent_transition(const FcNet2& net, const DiagNoise& noise, const Var& z_prev, const FlowConfig& cfg,
                      RngStream& stream) {
  return stochastic_transition([&net](const Var& z) { return fc2_apply(net, z); }, noise, z_prev, cfg, stream);
}

Tensor sample_initial_latent(std::size_t d_z, std::size_t n, double sigma0, RngStream& stream) {
  if (!(sigma0 >= 0.0)) throw ParameterizationError("initial latent scale must be non-negative");
  Tensor z({n, d_z});
  stream.fill_normal(z.data());
  for (double& v : z.data()) v *= sigma0;
  return z;
}

}  // namespace roadenkf::dyn
