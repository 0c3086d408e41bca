#include "roadenkf/truth_models.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <nlohmann/json.hpp>

#include "roadenkf/error.hpp"
#include "roadenkf/rng.hpp"
#include "roadenkf/tensor_io.hpp"

namespace roadenkf::truth {

namespace {

using nlohmann::json;

void l63(std::span<const double> z, std::span<double> out) {
  out[0] = 10.0 * (z[1] - z[0]);
  out[1] = z[0] * (28.0 - z[2]) - z[1];
  out[2] = z[0] * z[1] - (8.0 / 3.0) * z[2];
}

void check_vector(const Tensor& t, std::size_t min_len, const char* what) {
  if (t.rank() != 1 || t.is_complex() || t.numel() < min_len) {
    throw DimensionError(std::string(what) + ": expected a real vector with at least " + std::to_string(min_len) +
                         " entries, got " + ad::shape_str(t.shape()));
  }
}

// Draws k distinct indices of [0, n) and returns them sorted.
std::vector<std::int64_t> random_rows(std::size_t n, std::size_t k, RngStream& stream) {
  std::vector<std::int64_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = static_cast<std::int64_t>(i);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + stream.uniform_index(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

struct Trajectories {
  std::vector<std::vector<double>> u;  // per instance, (T+Tf+1) * d_u
  std::vector<std::vector<double>> z;  // l63 latent, (T+Tf+1) * 3
};

Trajectories simulate_l63(const GeneratorParams& p, const RngStream& root) {
  const std::size_t steps = p.T + p.Tf + 1;
  const Tensor d = legendre_decoder_matrix(p.d_u);
  Rkf45Options opt;
  opt.atol = opt.rtol = p.rkf_tol;
  Trajectories out;
  for (std::size_t i = 0; i < p.instances(); ++i) {
    RngStream ic = root.split(i + 1).split(0);
    std::vector<double> z(3);
    ic.fill_normal(z);
    for (double& v : z) v *= p.z0_scale;
    std::vector<double> zs(steps * 3), us(steps * p.d_u);
    for (std::size_t t = 0; t < steps; ++t) {
      if (t > 0) rkf45(l63, z, p.dt_obs, opt);
      std::copy(z.begin(), z.end(), zs.begin() + t * 3);
      const Tensor u = embed_l63_state(Tensor({3}, z), d);
      std::copy(u.data().begin(), u.data().end(), us.begin() + t * p.d_u);
    }
    out.z.push_back(std::move(zs));
    out.u.push_back(std::move(us));
  }
  return out;
}

std::vector<double> burgers_initial(const GeneratorParams& p, RngStream& stream) {
  const double amp = p.amp_lo + (p.amp_hi - p.amp_lo) * stream.uniform();
  const double dx = p.length / static_cast<double>(p.d_u - 1);
  std::vector<double> u(p.d_u, 0.0);
  // Node i sits at x = i*dx (0-based), so the sine vanishes at both walls.
  for (std::size_t i = 1; i + 1 < p.d_u; ++i) {
    u[i] = amp * std::sin(2.0 * std::numbers::pi * static_cast<double>(i) * dx / p.length);
  }
  return u;
}

Trajectories simulate_pde(const GeneratorParams& p, const RngStream& root, std::size_t substeps) {
  const std::size_t steps = p.T + p.Tf + 1;
  const double dx = p.length / static_cast<double>(p.d_u - 1);
  const double h = p.dt_obs / static_cast<double>(substeps);
  OdeRhs rhs;
  if (p.kind == Kind::burgers) {
    rhs = [&](std::span<const double> u, std::span<double> out) { burgers_rhs(u, p.nu, dx, out); };
  } else {
    rhs = [&](std::span<const double> u, std::span<double> out) { ks_rhs(u, p.nu, dx, out); };
  }

  std::vector<std::vector<double>> initial;
  if (p.kind == Kind::burgers) {
    for (std::size_t i = 0; i < p.instances(); ++i) {
      RngStream ic = root.split(i + 1).split(0);
      initial.push_back(burgers_initial(p, ic));
    }
  } else {
    // Burn in from small noise, then take snapshots of one long run.
    RngStream noise = root.split(0);
    std::vector<double> u(p.d_u, 0.0);
    for (std::size_t i = 1; i + 1 < p.d_u; ++i) u[i] = p.ic_noise * noise.normal();
    const auto intervals = [&](double span) {
      return static_cast<std::size_t>(std::llround(span / p.dt_obs)) * substeps;
    };
    rk4_fixed(rhs, u, h, intervals(p.burn_in));
    const std::size_t gap = std::max<std::size_t>(intervals(p.ic_spacing), 1);
    for (std::size_t i = 0; i < p.instances(); ++i) {
      if (i > 0) rk4_fixed(rhs, u, h, gap);
      initial.push_back(u);
    }
  }

  Trajectories out;
  for (auto& u : initial) {
    std::vector<double> us(steps * p.d_u);
    for (std::size_t t = 0; t < steps; ++t) {
      if (t > 0) rk4_fixed(rhs, u, h, substeps);
      std::copy(u.begin(), u.end(), us.begin() + t * p.d_u);
    }
    out.u.push_back(std::move(us));
  }
  return out;
}

void validate(const GeneratorParams& p) {
  if (p.instances() == 0) throw ConfigError("dataset needs at least one instance");
  if (p.T == 0) throw ConfigError("T must be positive");
  if (!(p.dt_obs > 0.0)) throw ConfigError("time between observations must be > 0");
  if (!(p.r >= 0.0) || !std::isfinite(p.r)) throw ConfigError("observation noise variance must be >= 0");
  if (!(p.c > 0.0 && p.c <= 1.0)) throw ConfigError("observed fraction c must lie in (0, 1]");
  switch (p.kind) {
    case Kind::l63:
      if (p.d_u < 6) throw ConfigError("l63 embedding needs d_u >= 6");
      break;
    case Kind::burgers:
      if (p.d_u < 3) throw ConfigError("burgers needs d_u >= 3");
      break;
    case Kind::ks:
      if (p.d_u < 5) throw ConfigError("ks needs d_u >= 5");
      break;
  }
  if (p.kind != Kind::l63) {
    if (p.fine_substeps == 0) throw ConfigError("fine_substeps must be positive");
    if (!(p.nu >= 0.0) || !(p.length > 0.0)) throw ConfigError("invalid viscosity or domain length");
  }
}

json params_json(const GeneratorParams& p) {
  json j = {{"kind", kind_name(p.kind)}, {"d_u", p.d_u},       {"c", p.c},       {"d_y", p.d_y()},
            {"n_train", p.n_train},     {"n_test", p.n_test}, {"T", p.T},       {"Tf", p.Tf},
            {"dt_obs", p.dt_obs},       {"r", p.r},           {"seed", p.seed}};
  if (p.kind == Kind::l63) {
    j["z0_scale"] = p.z0_scale;
    j["rkf_tol"] = p.rkf_tol;
  } else {
    j["nu"] = p.nu;
    j["length"] = p.length;
    j["fine_substeps"] = p.fine_substeps;
    j["max_halvings"] = p.max_halvings;
  }
  if (p.kind == Kind::burgers) {
    j["amp_lo"] = p.amp_lo;
    j["amp_hi"] = p.amp_hi;
  }
  if (p.kind == Kind::ks) {
    j["burn_in"] = p.burn_in;
    j["ic_spacing"] = p.ic_spacing;
    j["ic_noise"] = p.ic_noise;
  }
  return j;
}

GeneratorParams params_from_json(const json& j) {
  GeneratorParams p = GeneratorParams::defaults(parse_kind(j.at("kind").get<std::string>()));
  p.d_u = j.at("d_u");
  p.c = j.at("c");
  p.n_train = j.at("n_train");
  p.n_test = j.at("n_test");
  p.T = j.at("T");
  p.Tf = j.at("Tf");
  p.dt_obs = j.at("dt_obs");
  p.r = j.at("r");
  p.seed = j.at("seed");
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  opt("z0_scale", p.z0_scale);
  opt("rkf_tol", p.rkf_tol);
  opt("nu", p.nu);
  opt("length", p.length);
  opt("fine_substeps", p.fine_substeps);
  opt("max_halvings", p.max_halvings);
  opt("amp_lo", p.amp_lo);
  opt("amp_hi", p.amp_hi);
  opt("burn_in", p.burn_in);
  opt("ic_spacing", p.ic_spacing);
  opt("ic_noise", p.ic_noise);
  return p;
}

}  // namespace

Tensor l63_field(const Tensor& z) {
  if (z.rank() != 1 || z.numel() != 3 || z.is_complex()) {
    throw DimensionError("l63_field expects a real [3] vector, got " + ad::shape_str(z.shape()));
  }
  Tensor out({3});
  l63(z.data(), out.data());
  return out;
}

Tensor legendre_decoder_matrix(std::size_t d_u) {
  if (d_u < 6) throw DimensionError("legendre_decoder_matrix needs d_u >= 6");
  Tensor d({d_u, 6});
  for (std::size_t j = 0; j < d_u; ++j) {
    const double x = -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(d_u - 1);
    const double x2 = x * x;
    d.at(j, 0) = 1.0;
    d.at(j, 1) = x;
    d.at(j, 2) = (3.0 * x2 - 1.0) / 2.0;
    d.at(j, 3) = x * (5.0 * x2 - 3.0) / 2.0;
    d.at(j, 4) = (35.0 * x2 * x2 - 30.0 * x2 + 3.0) / 8.0;
    d.at(j, 5) = x * (63.0 * x2 * x2 - 70.0 * x2 + 15.0) / 8.0;
  }
  return d;
}

Tensor embed_l63_state(const Tensor& z, const Tensor& d) {
  if (z.rank() != 1 || z.numel() != 3) throw DimensionError("embed_l63_state expects z of shape [3]");
  if (d.rank() != 2 || d.extent(1) != 6) throw DimensionError("embed_l63_state expects D of shape [d_u x 6]");
  double coef[6];
  for (std::size_t k = 0; k < 3; ++k) {
    const double s = z[k] / 40.0;
    coef[k] = s;
    coef[k + 3] = s * s * s;
  }
  const std::size_t d_u = d.extent(0);
  Tensor u({d_u});
  for (std::size_t j = 0; j < d_u; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < 6; ++k) acc += d.at(j, k) * coef[k];
    u[j] = acc;
  }
  return u;
}

void burgers_rhs(std::span<const double> u, double nu, double dx, std::span<double> out) {
  const std::size_t m = u.size();
  if (m < 3 || out.size() != m) throw DimensionError("burgers_rhs needs at least 3 nodes");
  const double adv = 1.0 / (4.0 * dx);
  const double dif = nu / (dx * dx);
  out[0] = 0.0;
  out[m - 1] = 0.0;
  for (std::size_t i = 1; i + 1 < m; ++i) {
    const double l = u[i - 1], c = u[i], r = u[i + 1];
    out[i] = -(r * r - l * l) * adv + dif * (r - 2.0 * c + l);
  }
}

void ks_rhs(std::span<const double> u, double nu, double dx, std::span<double> out) {
  const std::size_t m = u.size();
  if (m < 5 || out.size() != m) throw DimensionError("ks_rhs needs at least 5 nodes");
  const double dx2 = dx * dx;
  const double c4 = nu / (dx2 * dx2);
  const double c2 = 1.0 / dx2;
  const double adv = 1.0 / (4.0 * dx);
  // Ghost nodes mirror the first interior node: u(-1) = u(1), u(m) = u(m-2).
  const auto at = [&](std::ptrdiff_t k) {
    if (k < 0) return u[static_cast<std::size_t>(-k)];
    if (k >= static_cast<std::ptrdiff_t>(m)) return u[2 * (m - 1) - static_cast<std::size_t>(k)];
    return u[static_cast<std::size_t>(k)];
  };
  out[0] = 0.0;
  out[m - 1] = 0.0;
  for (std::size_t i = 1; i + 1 < m; ++i) {
    const auto k = static_cast<std::ptrdiff_t>(i);
    const double ll = at(k - 2), l = u[i - 1], c = u[i], r = u[i + 1], rr = at(k + 2);
    out[i] = -c4 * (ll - 4.0 * l + 6.0 * c - 4.0 * r + rr) - c2 * (r - 2.0 * c + l) - (r * r - l * l) * adv;
  }
}

Tensor burgers_rhs(const Tensor& u, double nu, double dx) {
  check_vector(u, 3, "burgers_rhs");
  Tensor out(u.shape());
  burgers_rhs(u.data(), nu, dx, out.data());
  return out;
}

Tensor ks_rhs(const Tensor& u, double nu, double dx) {
  check_vector(u, 5, "ks_rhs");
  Tensor out(u.shape());
  ks_rhs(u.data(), nu, dx, out.data());
  return out;
}

void rkf45(const OdeRhs& f, std::vector<double>& x, double span, const Rkf45Options& opt) {
  // Fehlberg tableau.
  static constexpr double a21 = 1.0 / 4.0;
  static constexpr double a31 = 3.0 / 32.0, a32 = 9.0 / 32.0;
  static constexpr double a41 = 1932.0 / 2197.0, a42 = -7200.0 / 2197.0, a43 = 7296.0 / 2197.0;
  static constexpr double a51 = 439.0 / 216.0, a52 = -8.0, a53 = 3680.0 / 513.0, a54 = -845.0 / 4104.0;
  static constexpr double a61 = -8.0 / 27.0, a62 = 2.0, a63 = -3544.0 / 2565.0, a64 = 1859.0 / 4104.0,
                          a65 = -11.0 / 40.0;
  static constexpr double b1 = 16.0 / 135.0, b3 = 6656.0 / 12825.0, b4 = 28561.0 / 56430.0, b5 = -9.0 / 50.0,
                          b6 = 2.0 / 55.0;
  static constexpr double c1 = 25.0 / 216.0, c3 = 1408.0 / 2565.0, c4 = 2197.0 / 4104.0, c5 = -1.0 / 5.0;

  const std::size_t n = x.size();
  std::vector<double> k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), tmp(n), x5(n);
  double done = 0.0;
  double h = std::min(opt.h0, span);
  std::size_t steps = 0;
  while (done < span) {
    if (++steps > opt.max_steps) throw DivergenceError("rkf45 exceeded its step budget", steps);
    const bool last = done + h >= span;
    if (last) h = span - done;

    f(x, k1);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + h * a21 * k1[i];
    f(tmp, k2);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + h * (a31 * k1[i] + a32 * k2[i]);
    f(tmp, k3);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    f(tmp, k4);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    f(tmp, k5);
    for (std::size_t i = 0; i < n; ++i) {
      tmp[i] = x[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    }
    f(tmp, k6);

    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      x5[i] = x[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
      const double x4 = x[i] + h * (c1 * k1[i] + c3 * k3[i] + c4 * k4[i] + c5 * k5[i]);
      const double scale = opt.atol + opt.rtol * std::max(std::abs(x[i]), std::abs(x5[i]));
      err = std::max(err, std::abs(x5[i] - x4) / scale);
    }
    if (!std::isfinite(err)) throw DivergenceError("rkf45 produced a non-finite state", steps);

    if (err <= 1.0) {
      x.swap(x5);
      done = last ? span : done + h;
    }
    const double factor = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
    h *= factor;
    if (h < 1e-14 * std::max(1.0, span)) throw DivergenceError("rkf45 step size underflow", steps);
  }
}

void rk4_fixed(const OdeRhs& f, std::vector<double>& x, double h, std::size_t steps, double bound) {
  const std::size_t n = x.size();
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  for (std::size_t s = 0; s < steps; ++s) {
    f(x, k1);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * h * k1[i];
    f(tmp, k2);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * h * k2[i];
    f(tmp, k3);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] + h * k3[i];
    f(tmp, k4);
    double peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      peak = std::max(peak, std::abs(x[i]));
    }
    if (!(peak <= bound)) throw DivergenceError("rk4 state left the admissible range", s + 1);
  }
}

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::l63: return "l63";
    case Kind::burgers: return "burgers";
    case Kind::ks: return "ks";
  }
  return "?";
}

Kind parse_kind(const std::string& s) {
  if (s == "l63") return Kind::l63;
  if (s == "burgers") return Kind::burgers;
  if (s == "ks") return Kind::ks;
  throw ConfigError("unknown dataset kind '" + s + "' (expected l63, burgers or ks)");
}

GeneratorParams GeneratorParams::defaults(Kind k) {
  GeneratorParams p;
  p.kind = k;
  switch (k) {
    case Kind::l63:
      break;
    case Kind::burgers:
      p.d_u = 256;
      p.T = 300;
      p.Tf = 300;
      p.dt_obs = 0.001;
      p.r = 0.01;
      p.nu = 1.0 / 150.0;
      p.fine_substeps = 20;
      break;
    case Kind::ks:
      p.d_u = 32;
      p.n_train = 512;
      p.T = 450;
      p.Tf = 50;
      p.dt_obs = 0.1;
      p.r = 1.0;
      p.nu = 0.05;
      p.fine_substeps = 1000;
      break;
  }
  return p;
}

std::size_t GeneratorParams::d_y() const {
  if (c >= 1.0) return d_u;
  const auto k = static_cast<std::size_t>(std::llround(c * static_cast<double>(d_u)));
  if (k == 0) throw ConfigError("observed fraction c leaves no observed coordinate");
  return k;
}

bool Dataset::full_observation() const { return obs_indices.size() == 0 || obs_indices[0] < 0.0; }

enkf::ObservationOp Dataset::observation(std::size_t i) const {
  if (i >= instances()) throw RangeError("instance " + std::to_string(i) + " out of range");
  if (full_observation()) return enkf::ObservationOp::identity(params.d_u, params.r);
  const std::size_t t_len = obs_indices.extent(1), d_y = obs_indices.extent(2);
  std::vector<std::vector<std::int64_t>> rows(t_len, std::vector<std::int64_t>(d_y));
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t k = 0; k < d_y; ++k) {
      rows[t][k] = static_cast<std::int64_t>(obs_indices[(i * t_len + t) * d_y + k]);
    }
  }
  return enkf::ObservationOp::selection(params.d_u, std::move(rows), params.r);
}

Tensor Dataset::observations(std::size_t i) const {
  if (i >= instances()) throw RangeError("instance " + std::to_string(i) + " out of range");
  const std::size_t t_len = y.extent(1), d_y = y.extent(2);
  Tensor out({t_len, d_y});
  std::copy_n(y.raw() + i * t_len * d_y, t_len * d_y, out.raw());
  return out;
}

Tensor Dataset::truth(std::size_t i, std::size_t from, std::size_t steps) const {
  const std::size_t t_len = u_true.extent(1), d_u = u_true.extent(2);
  if (i >= instances() || from + steps > t_len) throw RangeError("truth window out of range");
  Tensor out({steps, d_u});
  std::copy_n(u_true.raw() + (i * t_len + from) * d_u, steps * d_u, out.raw());
  return out;
}

Dataset generate_dataset(const GeneratorParams& params) {
  validate(params);
  const GeneratorParams& p = params;
  const std::size_t n_inst = p.instances();
  const std::size_t steps = p.T + p.Tf + 1;
  const std::size_t d_y = p.d_y();
  const bool full = d_y == p.d_u;
  const RngStream root(p.seed);

  Dataset ds;
  ds.params = p;
  Trajectories traj;
  if (p.kind == Kind::l63) {
    traj = simulate_l63(p, root);
  } else {
    bool ok = false;
    for (std::size_t attempt = 0; attempt <= p.max_halvings && !ok; ++attempt) {
      const std::size_t substeps = p.fine_substeps << attempt;
      try {
        traj = simulate_pde(p, root, substeps);
        ds.fine_substeps_used = substeps;
        ok = true;
      } catch (const DivergenceError&) {
      }
    }
    if (!ok) {
      throw DivergenceError(kind_name(p.kind) + " truth integration diverged after " +
                                std::to_string(p.max_halvings) + " step halvings; reduce d_u or raise fine_substeps",
                            p.fine_substeps << p.max_halvings);
    }
  }

  ds.u_true = Tensor({n_inst, steps, p.d_u});
  ds.y = Tensor({n_inst, p.T, d_y});
  ds.obs_indices = Tensor::full({n_inst, p.T, d_y}, -1.0);
  if (p.kind == Kind::l63) ds.latent = Tensor({n_inst, steps, 3});
  const double noise_sd = std::sqrt(p.r);

  for (std::size_t i = 0; i < n_inst; ++i) {
    std::copy(traj.u[i].begin(), traj.u[i].end(), ds.u_true.raw() + i * steps * p.d_u);
    if (ds.latent) std::copy(traj.z[i].begin(), traj.z[i].end(), ds.latent->raw() + i * steps * 3);

    RngStream inst = root.split(i + 1);
    RngStream row_stream = inst.split(1);
    RngStream noise_stream = inst.split(2);
    std::vector<double> noise(p.T * d_y);
    noise_stream.fill_normal(noise);
    for (std::size_t t = 1; t <= p.T; ++t) {
      const double* u = traj.u[i].data() + t * p.d_u;
      double* y = ds.y.raw() + (i * p.T + t - 1) * d_y;
      const double* eta = noise.data() + (t - 1) * d_y;
      if (full) {
        for (std::size_t k = 0; k < d_y; ++k) y[k] = u[k] + noise_sd * eta[k];
      } else {
        const auto rows = random_rows(p.d_u, d_y, row_stream);
        double* idx = ds.obs_indices.raw() + (i * p.T + t - 1) * d_y;
        for (std::size_t k = 0; k < d_y; ++k) {
          idx[k] = static_cast<double>(rows[k]);
          y[k] = u[rows[k]] + noise_sd * eta[k];
        }
      }
    }
  }
  for (std::size_t i = 0; i < p.n_train; ++i) ds.train.push_back(i);
  for (std::size_t i = p.n_train; i < n_inst; ++i) ds.test.push_back(i);
  if (p.kind == Kind::l63) ds.fine_substeps_used = 0;
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["format"] = "roadenkf-dataset-1";
  meta["generator"] = kind_name(ds.params.kind);
  meta["params"] = params_json(ds.params);
  meta["seed"] = ds.params.seed;
  meta["splits"] = {{"train", ds.train}, {"test", ds.test}};
  json prov;
  switch (ds.params.kind) {
    case Kind::l63:
      prov["integrator"] = "rkf45";
      prov["latent_initial"] = "z0 ~ N(0, z0_scale^2 I)";
      prov["decoder"] = "legendre P0..P5, P(1)=1, uniform grid on [-1,1]";
      break;
    case Kind::burgers:
      prov["integrator"] = "rk4";
      prov["fine_substeps_used"] = ds.fine_substeps_used;
      prov["initial"] = "U sin(2 pi x / L), U ~ Uniform(amp_lo, amp_hi), nodes x = (i-1) dx";
      break;
    case Kind::ks:
      prov["integrator"] = "rk4";
      prov["fine_substeps_used"] = ds.fine_substeps_used;
      prov["stencil"] = "fourth difference (1,-4,6,-4,1) with mirrored ghost nodes";
      prov["initial"] = "snapshots of one run after burn_in, every ic_spacing time units";
      break;
  }
  prov["observation_rows"] = ds.full_observation() ? "identity" : "drawn per instance and time step";
  meta["provenance"] = prov;

  io::write_tensor(dir / "u_true.tns", ds.u_true);
  io::write_tensor(dir / "y.tns", ds.y);
  io::write_tensor(dir / "obs_indices.tns", ds.obs_indices);
  if (ds.latent) io::write_tensor(dir / "z_true.tns", *ds.latent);
  io::write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  json meta;
  try {
    meta = json::parse(io::read_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + (dir / "meta.json").string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.params = params_from_json(meta.at("params"));
    ds.train = meta.at("splits").at("train").get<std::vector<std::size_t>>();
    ds.test = meta.at("splits").at("test").get<std::vector<std::size_t>>();
    const auto& prov = meta.at("provenance");
    if (prov.contains("fine_substeps_used")) ds.fine_substeps_used = prov.at("fine_substeps_used");
  } catch (const json::exception& e) {
    throw ConfigError("malformed dataset metadata: " + std::string(e.what()));
  }
  ds.u_true = io::read_tensor(dir / "u_true.tns");
  ds.y = io::read_tensor(dir / "y.tns");
  ds.obs_indices = io::read_tensor(dir / "obs_indices.tns");
  if (std::filesystem::exists(dir / "z_true.tns")) ds.latent = io::read_tensor(dir / "z_true.tns");

  const auto& p = ds.params;
  const std::size_t n_inst = p.instances();
  if (ds.u_true.shape() != ad::Shape{n_inst, p.T + p.Tf + 1, p.d_u} ||
      ds.y.shape() != ad::Shape{n_inst, p.T, p.d_y()} || ds.obs_indices.shape() != ds.y.shape()) {
    throw DimensionError("dataset tensors in " + dir.string() + " do not match meta.json");
  }
  return ds;
}

}  // namespace roadenkf::truth
