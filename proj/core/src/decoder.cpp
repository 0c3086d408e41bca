#include "roadenkf/decoder.hpp"

#include <cmath>

#include "roadenkf/error.hpp"

namespace roadenkf::dec {

using namespace roadenkf::ad;

namespace {

Tensor uniform_tensor(Shape shape, double lo, double hi, RngStream& stream, Kind kind = Kind::real) {
  Tensor t(std::move(shape), kind);
  for (double& v : t.data()) v = lo + (hi - lo) * stream.uniform();
  return t;
}

}  // namespace

SpectralStack init_spectral_stack(const StackConfig& cfg, RngStream& stream) {
  if (cfg.channels.size() < 2) throw ConfigError("decoder needs at least one Fourier layer");
  if (cfg.d_u < 2) throw ConfigError("decoder needs d_u >= 2");
  const std::size_t m = cfg.d_u / 2 + 1;
  SpectralStack s;
  s.d_u = cfg.d_u;
  for (std::size_t l = 1; l < cfg.channels.size(); ++l) {
    const std::size_t n_in = cfg.channels[l - 1];
    const std::size_t n_out = cfg.channels[l];
    const double spec_scale = 1.0 / static_cast<double>(n_in * n_out);
    const double conv_bound = 1.0 / std::sqrt(static_cast<double>(n_in));
    FourierLayerParams p;
    p.spec_w = Var(uniform_tensor({n_out, n_in, m}, 0.0, spec_scale, stream, Kind::complex));
    p.conv_w = Var(uniform_tensor({n_out, n_in}, -conv_bound, conv_bound, stream));
    p.conv_b = Var(uniform_tensor({n_out}, -conv_bound, conv_bound, stream));
    p.norm_gain = Var(Tensor::full({n_out}, 1.0));
    p.norm_bias = Var(Tensor({n_out}));
    s.layers.push_back(std::move(p));
  }
  const std::size_t n_last = cfg.channels.back();
  const std::size_t hidden = cfg.head_hidden == 0 ? 2 * n_last : cfg.head_hidden;
  s.head = dyn::init_fcnet2(n_last, hidden, 1, stream);
  return s;
}

FndParams init_fnd(const FndConfig& cfg, RngStream& stream) {
  if (cfg.stack.channels.empty() || cfg.stack.channels.front() != 1) {
    throw ConfigError("decoder channel chain must start with 1");
  }
  if (cfg.h == 0 || cfg.d_z == 0) throw ConfigError("decoder needs h >= 1 and d_z >= 1");
  FndParams p;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_z));
  p.W0 = Var(uniform_tensor({cfg.h, cfg.d_z}, -bound, bound, stream, Kind::complex));
  p.b0 = Var(uniform_tensor({cfg.h}, -bound, bound, stream, Kind::complex));
  p.stack = init_spectral_stack(cfg.stack, stream);
  return p;
}

Var complex_linear(const FndParams& p, const Var& z) {
  if (z.kind() != Kind::real || z.shape().size() != 2) throw DimensionError("complex_linear: z must be real 2-D");
  return add(matmul(to_complex(z), transpose(p.W0)), p.b0);
}

Var hermitian_lift(const Var& z0, std::size_t d_u) {
  if (d_u < 2) throw DimensionError("hermitian_lift: d_u must be >= 2");
  return irdft(z0, d_u);
}

Var spec_conv(const Var& w, const Var& v) {
  if (v.shape().size() != 3) throw DimensionError("spec_conv: v must be [batch x n_in x d_u]");
  const std::size_t d = v.shape()[2];
  if (w.shape().size() != 3 || w.shape()[2] != d / 2 + 1) {
    throw DimensionError("spec_conv: weights " + shape_str(w.shape()) + " do not match d_u = " + std::to_string(d));
  }
  return irdft(spectral_mix(rdft(v), w), d);
}

Var fourier_layer(const FourierLayerParams& p, const Var& v) {
  Var mixed = spec_conv(p.spec_w, v) + channel_mix(v, p.conv_w, p.conv_b);
  return relu(layer_norm_channels(mixed, p.norm_gain, p.norm_bias));
}

Var channel_head(const dyn::FcNet2& head, const Var& v) {
  if (v.shape().size() != 3) throw DimensionError("channel_head: v must be [batch x n_L x d_u]");
  Var hidden = relu(channel_mix(v, head.W1, head.b1));
  Var out = channel_mix(hidden, head.W2, head.b2);
  return reshape(out, {v.shape()[0], v.shape()[2]});
}

Var apply_stack_reference(const SpectralStack& s, const Var& v0) {
  Var v = v0;
  for (const auto& layer : s.layers) v = fourier_layer(layer, v);
  return channel_head(s.head, v);
}

Var fnd_decode_reference(const FndParams& p, const Var& z) {
  const std::size_t d = p.stack.d_u;
  Var v0 = hermitian_lift(complex_linear(p, z), d);
  return apply_stack_reference(p.stack, reshape(v0, {z.shape()[0], 1, d}));
}

Var fourier_layer_nodes(const FourierLayerParams& p, const Var& v) {
  if (v.shape().size() != 3) throw DimensionError("fourier_layer_nodes: v must be [d_u, batch, n_in]");
  const std::size_t d = v.shape()[0];
  const std::size_t nb = v.shape()[1];
  const std::size_t n_out = p.conv_w.shape()[0];
  Var spectral = irdft_cols(spectral_mix_cols(rdft_cols(v), p.spec_w), d, {nb, n_out});
  Var mixed = spectral + linear(v, p.conv_w, p.conv_b);
  return relu(layer_norm_last(mixed, p.norm_gain, p.norm_bias));
}

Var channel_head_nodes(const dyn::FcNet2& head, const Var& v) {
  if (v.shape().size() != 3) throw DimensionError("channel_head_nodes: v must be [d_u, batch, n_L]");
  Var out = dyn::fc2_apply(head, v);  // [d_u, batch, 1]
  return transpose(reshape(out, {v.shape()[0], v.shape()[1]}));
}

Var apply_stack(const SpectralStack& s, const Var& u) {
  if (u.shape().size() != 2) throw DimensionError("apply_stack: u must be [batch x d_u]");
  Var v = reshape(transpose(u), {u.shape()[1], u.shape()[0], 1});
  for (const auto& layer : s.layers) v = fourier_layer_nodes(layer, v);
  return channel_head_nodes(s.head, v);
}

Var fnd_decode(const FndParams& p, const Var& z) {
  if (p.stack.layers.empty()) throw ConfigError("fnd_decode: no Fourier layers");
  return apply_stack(p.stack, hermitian_lift(complex_linear(p, z), p.stack.d_u));
}

Var spectral_surrogate_step(const SpectralStack& s, const Var& u) { return apply_stack(s, u); }

}  // namespace roadenkf::dec
