#include "roadenkf/enkf.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "roadenkf/error.hpp"

namespace roadenkf::enkf {

using namespace roadenkf::ad;

namespace {

Tensor vec(const std::vector<double>& v) { return Tensor({v.size()}, v); }

Tensor row_of(const Tensor& m, std::size_t k) {
  const std::size_t c = m.shape()[1];
  return Tensor({c}, std::vector<double>(m.raw() + k * c, m.raw() + (k + 1) * c));
}

void check_rows(const std::vector<std::int64_t>& rows, std::size_t d_u) {
  std::vector<std::int64_t> sorted = rows;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("observation rows must be distinct within a time step");
  }
  if (!sorted.empty() && (sorted.front() < 0 || sorted.back() >= static_cast<std::int64_t>(d_u))) {
    throw ConfigError("observation row outside the state");
  }
}

// Innovation matrix rows b^n = y + eta^n, before subtracting Hz.
Tensor perturbed_targets(const Tensor& y_t, const Tensor& eta) {
  Tensor out = eta;
  const std::size_t d = y_t.numel();
  if (eta.rank() != 2 || eta.shape()[1] != d) {
    throw DimensionError("noise " + shape_str(eta.shape()) + " does not match observation " + shape_str(y_t.shape()));
  }
  for (std::size_t n = 0; n < eta.shape()[0]; ++n) {
    for (std::size_t i = 0; i < d; ++i) out[n * d + i] += y_t[i];
  }
  return out;
}

Var woodbury_system(const Var& yt_scaled, const Var& y) {
  const std::size_t n = y.shape()[1];
  return add(matmul(yt_scaled, y), Var(Tensor::identity(n)));
}

Var update_from_moments(const Var& z_pred, const Var& hz, const Moments& m, const Tensor& y_t, const Tensor& eta,
                        const std::vector<double>& r_inv) {
  const Tensor rinv = vec(r_inv);
  const Var yt = transpose(m.y);          // [N x d_y]
  const Var yt_s = mul(yt, Var(rinv));    // rows scaled by R^-1
  const Var a = woodbury_system(yt_s, m.y);
  const Var b = sub(Var(perturbed_targets(y_t, eta)), hz);  // [N x d_y]
  const Var w = solve_spd(a, matmul(yt_s, transpose(b)));   // column n solves for w^n
  const Var resid = sub(b, matmul(transpose(w), yt));
  return add(z_pred, matmul(mul(resid, Var(rinv)), transpose(m.c_zy)));
}

Tensor diag(const std::vector<double>& v) {
  const std::size_t d = v.size();
  Tensor r({d, d});
  for (std::size_t i = 0; i < d; ++i) r[i * d + i] = v[i];
  return r;
}

Var dense_update_from_moments(const Var& z_pred, const Var& hz, const Moments& m, const Tensor& y_t,
                              const Tensor& eta, const std::vector<double>& r_diag) {
  const Var c_yy = add(matmul(m.y, transpose(m.y)), Var(diag(r_diag)));
  const Var b = sub(Var(perturbed_targets(y_t, eta)), hz);
  // rows b^T C_yy^-1 C_zy^T = (K b)^T
  return add(z_pred, matmul(b, solve_spd(c_yy, transpose(m.c_zy))));
}

void check_ensemble(const Var& z_pred, const Var& hz) {
  if (z_pred.shape().size() != 2 || hz.shape().size() != 2 || z_pred.shape()[0] != hz.shape()[0]) {
    throw DimensionError("ensemble shapes " + shape_str(z_pred.shape()) + " and " + shape_str(hz.shape()) +
                         " disagree");
  }
}

}  // namespace

ObservationOp ObservationOp::identity(std::size_t d_u, double r) {
  ObservationOp op;
  op.d_u_ = d_u;
  op.d_y_ = d_u;
  op.set_noise(std::vector<double>(d_u, r));
  return op;
}

ObservationOp ObservationOp::selection(std::size_t d_u, std::vector<std::vector<std::int64_t>> rows, double r) {
  const std::size_t d_y = rows.empty() ? 0 : rows.front().size();
  return selection(d_u, std::move(rows), std::vector<double>(d_y, r));
}

ObservationOp ObservationOp::selection(std::size_t d_u, std::vector<std::vector<std::int64_t>> rows,
                                       std::vector<double> r_diag) {
  if (rows.empty()) throw ConfigError("selection operator needs at least one time step");
  ObservationOp op;
  op.d_u_ = d_u;
  op.d_y_ = rows.front().size();
  if (op.d_y_ == 0) throw ConfigError("selection operator observes no coordinates");
  for (const auto& r : rows) {
    if (r.size() != op.d_y_) throw ConfigError("observation count varies across time steps");
    check_rows(r, d_u);
  }
  if (r_diag.size() != op.d_y_) throw ConfigError("noise diagonal does not match observation dimension");
  op.rows_ = std::move(rows);
  op.set_noise(std::move(r_diag));
  return op;
}

void ObservationOp::set_noise(std::vector<double> r_diag) {
  r_inv_.resize(r_diag.size());
  logdet_r_ = 0.0;
  for (std::size_t i = 0; i < r_diag.size(); ++i) {
    if (!(r_diag[i] > 0.0) || !std::isfinite(r_diag[i])) throw ConfigError("observation noise variance must be > 0");
    r_inv_[i] = 1.0 / r_diag[i];
    logdet_r_ += std::log(r_diag[i]);
  }
  r_diag_ = std::move(r_diag);
}

const std::vector<std::int64_t>& ObservationOp::rows(std::size_t t) const {
  if (t == 0 || t > rows_.size()) {
    throw RangeError("no observation rows for t = " + std::to_string(t) + " (horizon " +
                     std::to_string(rows_.size()) + ")");
  }
  return rows_[t - 1];
}

Var ObservationOp::apply(std::size_t t, const Var& u, const Var& z) const {
  if (u.shape().size() != 2 || u.shape()[1] != d_u_) {
    throw DimensionError("observed states must be [N x " + std::to_string(d_u_) + "], got " + shape_str(u.shape()));
  }
  Var hu = is_identity() ? u : gather_cols(u, rows(t));
  if (!augmented()) return hu;
  if (z.shape().size() != 2 || z.shape()[1] != aug_dim_) {
    throw DimensionError("latent block must be [N x " + std::to_string(aug_dim_) + "], got " + shape_str(z.shape()));
  }
  return concat_cols(hu, z);
}

Tensor ObservationOp::observe(std::size_t t, const Tensor& u) const {
  if (u.numel() != d_u_) throw DimensionError("state has " + std::to_string(u.numel()) + " entries");
  if (is_identity()) return Tensor({d_u_}, std::vector<double>(u.data().begin(), u.data().end()));
  const auto& r = rows(t);
  Tensor out({r.size()});
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = u[static_cast<std::size_t>(r[i])];
  return out;
}

Tensor ObservationOp::target(const Tensor& y_t) const {
  if (y_t.numel() != d_y_) {
    throw DimensionError("observation has " + std::to_string(y_t.numel()) + " entries, expected " +
                         std::to_string(d_y_));
  }
  Tensor out({dim()});
  std::copy(y_t.data().begin(), y_t.data().end(), out.raw());
  return out;
}

ObservationOp augment_observations(const ObservationOp& obs, double sigma, std::size_t d_z) {
  if (!(sigma > 0.0)) throw ConfigError("latent regularization scale must be > 0");
  if (obs.augmented()) throw ContractError("observation operator is already augmented");
  ObservationOp out = obs;
  out.aug_dim_ = d_z;
  out.aug_sigma_ = sigma;
  std::vector<double> r = obs.r_diag_;
  r.insert(r.end(), d_z, sigma * sigma);
  out.set_noise(std::move(r));
  return out;
}

Moments ensemble_moments(const Var& hz, const Var& z_pred) {
  check_ensemble(z_pred, hz);
  const std::size_t n = z_pred.shape()[0];
  if (n < 2) throw DegenerateEnsembleError("ensemble moments need N >= 2, got " + std::to_string(n));
  const double inv = 1.0 / static_cast<double>(n - 1);
  Moments m;
  m.mean_z = mean_rows(z_pred);
  m.mean_h = mean_rows(hz);
  const Var zc = sub(z_pred, m.mean_z);
  const Var hc = sub(hz, m.mean_h);
  m.c_zy = scale(matmul(transpose(zc), hc), inv);
  m.y = scale(transpose(hc), std::sqrt(inv));
  return m;
}

Tensor draw_obs_noise(const ObservationOp& obs, std::size_t n, RngStream& stream) {
  const std::size_t d = obs.dim();
  Tensor eta({n, d});
  stream.fill_normal(eta.data());
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < d; ++i) eta[k * d + i] *= std::sqrt(obs.r_diag()[i]);
  }
  return eta;
}

Var analysis_update(const Var& z_pred, const Var& hz, const Tensor& y_t, const Tensor& eta,
                    const std::vector<double>& r_inv) {
  return update_from_moments(z_pred, hz, ensemble_moments(hz, z_pred), y_t, eta, r_inv);
}

Var analysis_update_naive(const Var& z_pred, const Var& hz, const Tensor& y_t, const Tensor& eta,
                          const std::vector<double>& r_diag) {
  return dense_update_from_moments(z_pred, hz, ensemble_moments(hz, z_pred), y_t, eta, r_diag);
}

Var analysis_step(const Var& z_pred, const Var& hz, const Tensor& y_t, const ObservationOp& obs, RngStream& stream) {
  check_ensemble(z_pred, hz);
  const Tensor eta = draw_obs_noise(obs, z_pred.shape()[0], stream);
  return analysis_update(z_pred, hz, y_t, eta, obs.r_inv());
}

Var analysis_step_naive(const Var& z_pred, const Var& hz, const Tensor& y_t, const ObservationOp& obs,
                        RngStream& stream) {
  check_ensemble(z_pred, hz);
  const Tensor eta = draw_obs_noise(obs, z_pred.shape()[0], stream);
  return analysis_update_naive(z_pred, hz, y_t, eta, obs.r_diag());
}

Var loglik_increment(const Var& mean_h, const Var& y, const Tensor& y_t, const ObservationOp& obs) {
  const std::size_t d = obs.dim();
  if (mean_h.value().numel() != d || y_t.numel() != d || y.shape().size() != 2 || y.shape()[0] != d) {
    throw DimensionError("loglik_increment: moments do not match observation dimension " + std::to_string(d));
  }
  const Tensor rinv = vec(obs.r_inv());
  const Var dev = sub(Var(y_t), mean_h);
  const Var yt_s = mul(transpose(y), Var(rinv));
  const Var a = woodbury_system(yt_s, y);
  const Var q = matmul(yt_s, reshape(dev, {d, 1}));
  const Var quad = sub(sum(mul(mul(dev, dev), Var(rinv))), sum(mul(q, solve_spd(a, q))));
  const double c = static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + obs.logdet_r();
  return scale(add(add(logdet_spd(a), quad), Var(Tensor::scalar(c))), -0.5);
}

Var loglik_increment_naive(const Var& mean_h, const Var& y, const Tensor& y_t, const ObservationOp& obs) {
  const std::size_t d = obs.dim();
  if (mean_h.value().numel() != d || y_t.numel() != d || y.shape().size() != 2 || y.shape()[0] != d) {
    throw DimensionError("loglik_increment: moments do not match observation dimension " + std::to_string(d));
  }
  const Var c = add(matmul(y, transpose(y)), Var(diag(obs.r_diag())));
  const Var dev = sub(Var(y_t), mean_h);
  const Var quad = sum(mul(dev, reshape(solve_spd(c, reshape(dev, {d, 1})), {d})));
  const double k = static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
  return scale(add(add(logdet_spd(c), quad), Var(Tensor::scalar(k))), -0.5);
}

FilterResult run_filter(const FilterModel& model, const ObservationOp& obs, const Tensor& y, std::size_t n,
                        RngStream& stream, Mode mode, const FilterOptions& opts) {
  if (mode == Mode::train && !obs.augmented()) throw ContractError("train mode needs augmented observations");
  if (mode == Mode::test && obs.augmented()) throw ContractError("test mode uses the original observations");
  if (obs.augmented() && obs.aug_dim() != model.d_z) {
    throw DimensionError("pseudo-observation block does not match latent dimension");
  }
  const std::size_t steps = y.rank() == 2 ? y.shape()[0] : 0;
  if (steps > 0 && y.shape()[1] != obs.obs_dim()) {
    throw DimensionError("observations " + shape_str(y.shape()) + " do not match d_y = " +
                         std::to_string(obs.obs_dim()));
  }
  if (n < 2) throw DegenerateEnsembleError("filter needs N >= 2 particles");

  Tensor z0 = opts.initial ? *opts.initial : model.initial(n, stream);
  if (z0.rank() != 2 || z0.shape()[0] != n || z0.shape()[1] != model.d_z) {
    throw DimensionError("initial ensemble " + shape_str(z0.shape()) + " is not [N x d_z]");
  }
  FilterResult res;
  Var z(std::move(z0));
  if (opts.keep_particles) res.particles.push_back(z);
  if (opts.decode_states) res.states.push_back(model.decode(z).value());

  res.loglik = Var(Tensor::scalar(0.0));
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = opts.t_begin + k;
    Var z_pred;
    try {
      z_pred = model.transition(z, stream);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("transition diverged: ") + e.what(), t);
    }
    try {
      const Var hz = obs.apply(t, model.decode(z_pred), z_pred);
      const Moments m = ensemble_moments(hz, z_pred);
      const Tensor y_t = obs.target(row_of(y, k));
      // both forms are exact; solve in whichever space is smaller
      const bool woodbury = n <= obs.dim();
      const Var inc = woodbury ? loglik_increment(m.mean_h, m.y, y_t, obs)
                               : loglik_increment_naive(m.mean_h, m.y, y_t, obs);
      if (!std::isfinite(inc.value().item())) throw DivergenceError("non-finite log-likelihood increment", t);
      const Tensor eta = draw_obs_noise(obs, n, stream);
      z = woodbury ? update_from_moments(z_pred, hz, m, y_t, eta, obs.r_inv())
                   : dense_update_from_moments(z_pred, hz, m, y_t, eta, obs.r_diag());
      if (!z.value().all_finite()) throw DivergenceError("non-finite analysis ensemble", t);
      res.loglik = k == 0 ? inc : add(res.loglik, inc);
      res.increments.push_back(inc);
    } catch (const NotSpdError& e) {
      throw DivergenceError(std::string("filter covariance lost definiteness: ") + e.what(), t);
    }
    if (opts.keep_particles) res.particles.push_back(z);
    if (opts.decode_states) res.states.push_back(model.decode(detach(z)).value());
  }
  if (!opts.keep_particles) res.particles.push_back(z);
  return res;
}

}  // namespace roadenkf::enkf
