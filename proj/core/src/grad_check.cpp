#include "roadenkf/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace roadenkf::ad {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var leaf = tape.leaf(x);
  return f(tape, leaf).value().item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  GradCheckResult result;
  {
    Tape tape;
    Var leaf = tape.leaf(x);
    Var out = f(tape, leaf);
    tape.backward(out);
    result.ad_grad = tape.grad_or_zeros(leaf);
  }
  result.fd_grad = Tensor(x.shape(), x.kind());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double fp = evaluate(f, probe);
    probe[i] = x[i] - eps;
    const double fm = evaluate(f, probe);
    probe[i] = x[i];
    result.fd_grad[i] = (fp - fm) / (2.0 * eps);

    const double a = result.ad_grad[i];
    const double b = result.fd_grad[i];
    const double err = std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
    if (i == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace roadenkf::ad
