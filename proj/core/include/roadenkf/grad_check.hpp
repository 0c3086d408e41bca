#pragma once

#include <cstddef>
#include <functional>

#include "roadenkf/tape.hpp"

namespace roadenkf::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor ad_grad;
  Tensor fd_grad;
};

/// Builds the scalar on the given tape from the leaf `x`.
using ScalarFn = std::function<Var(Tape& tape, const Var& x)>;

/// Compares the reverse-mode gradient of f at x with central differences of
/// step eps, per double of x's buffer (complex entries give two coordinates).
/// Error per coordinate: |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
/// f must be deterministic; pin any RNG stream inside it.
GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace roadenkf::ad
