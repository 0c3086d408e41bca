#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "roadenkf/dynamics.hpp"

namespace roadenkf::dec {

using ad::Tensor;
using ad::Var;

/// One Fourier layer: relu(LayerNorm(SpecConv(v) + 1x1Conv(v))).
struct FourierLayerParams {
  Var spec_w;     // complex [n_out x n_in x (d_u/2 + 1)], one-sided storage
  Var conv_w;     // [n_out x n_in]
  Var conv_b;     // [n_out]
  Var norm_gain;  // [n_out]
  Var norm_bias;  // [n_out]

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "spec_w", spec_w);
    f(prefix + "conv_w", conv_w);
    f(prefix + "conv_b", conv_b);
    f(prefix + "norm_gain", norm_gain);
    f(prefix + "norm_bias", norm_bias);
  }
};

/// Stack of Fourier layers followed by a two-layer head over channels that
/// acts independently at each spatial node.
struct SpectralStack {
  std::size_t d_u = 0;  // grid size; the one-sided mode count alone cannot tell odd from even
  std::vector<FourierLayerParams> layers;
  dyn::FcNet2 head;  // W1 [hidden x n_L], W2 [1 x hidden]

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit(prefix + "layers." + std::to_string(l) + ".", f);
    head.visit(prefix + "head.", f);
  }
};

/// Fourier neural decoder: complex linear lift -> Hermitian inverse DFT ->
/// Fourier layers -> channel head.
struct FndParams {
  Var W0;  // complex [h x d_z]
  Var b0;  // complex [h]
  SpectralStack stack;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "W0", W0);
    f(prefix + "b0", b0);
    stack.visit(prefix, f);
  }
};

struct StackConfig {
  std::size_t d_u = 32;
  std::vector<std::size_t> channels{1, 20, 20, 20, 20};  // n_0 .. n_L, n_0 = 1
  std::size_t head_hidden = 0;                            // 0 means 2 * n_L
};

struct FndConfig {
  std::size_t d_z = 3;
  std::size_t h = 6;
  StackConfig stack;
};

SpectralStack init_spectral_stack(const StackConfig& cfg, RngStream& stream);
FndParams init_fnd(const FndConfig& cfg, RngStream& stream);

/// W0 z + b0 with z promoted to complex: [batch x d_z] -> complex [batch x h].
Var complex_linear(const FndParams& p, const Var& z);
/// Inverse DFT of a one-sided spectrum [batch x h] to a real [batch x d_u] field.
Var hermitian_lift(const Var& z0, std::size_t d_u);

// Batch-major layer API on [batch x channels x d_u] fields. This is the
// straightforward composition of the spectral ops and serves as the
// reference route for the node-major fast path below.

/// rdft -> per-mode channel mixing -> irdft on [batch x n_in x d_u].
Var spec_conv(const Var& w, const Var& v);
Var fourier_layer(const FourierLayerParams& p, const Var& v);
/// Two-layer network over channels at each node: [batch x n_L x d_u] -> [batch x d_u].
Var channel_head(const dyn::FcNet2& head, const Var& v);
/// Fourier layers then head, from a [batch x n_0 x d_u] input.
Var apply_stack_reference(const SpectralStack& s, const Var& v0);
Var fnd_decode_reference(const FndParams& p, const Var& z);

// Node-major fast path on [d_u, batch, channels] fields: every transform,
// channel mix and normalization becomes one GEMM or one contiguous sweep.

Var fourier_layer_nodes(const FourierLayerParams& p, const Var& v);
/// [d_u, batch, n_L] -> [batch x d_u]
Var channel_head_nodes(const dyn::FcNet2& head, const Var& v);
/// [batch x d_u] single-channel input -> [batch x d_u].
Var apply_stack(const SpectralStack& s, const Var& u);

/// Decoder D(z): [batch x d_z] -> [batch x d_u].
Var fnd_decode(const FndParams& p, const Var& z);

/// Full-order surrogate: the stack applied to a single-channel state
/// [batch x d_u] -> [batch x d_u].
Var spectral_surrogate_step(const SpectralStack& s, const Var& u);

}  // namespace roadenkf::dec
