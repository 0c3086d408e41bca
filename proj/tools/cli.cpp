#include "cli.hpp"

#include <chrono>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "roadenkf/error.hpp"
#include "roadenkf/grad_check.hpp"
#include "roadenkf/metrics.hpp"
#include "roadenkf/params.hpp"
#include "roadenkf/tensor_io.hpp"
#include "roadenkf/train.hpp"
#include "roadenkf/truth_models.hpp"

namespace roadenkf::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using ad::Tensor;

json read_json(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  if (train::reproducible()) return 0.0;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct DatagenArgs {
  std::string kind = "l63";
  std::string out;
  std::size_t d_u = 0, n_train = 0, n_test = 0, T = 0, Tf = 0;
  double c = 1.0, r = 0.0;
  std::uint64_t seed = 0;
};

int datagen(CLI::App& app, const DatagenArgs& a, std::ostream& out) {
  auto p = truth::GeneratorParams::defaults(truth::parse_kind(a.kind));
  if (app.count("--d-u")) p.d_u = a.d_u;
  if (app.count("--c")) p.c = a.c;
  if (app.count("--r")) p.r = a.r;
  if (app.count("--n-train")) p.n_train = a.n_train;
  if (app.count("--n-test")) p.n_test = a.n_test;
  if (app.count("--T")) p.T = a.T;
  if (app.count("--Tf")) p.Tf = a.Tf;
  if (app.count("--seed")) p.seed = a.seed;
  const auto ds = truth::generate_dataset(p);
  truth::write_dataset(ds, a.out);
  out << "wrote " << ds.instances() << " " << truth::kind_name(p.kind) << " instances to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, config, out;
};

int run_training(const TrainArgs& a, bool baseline, std::ostream& out) {
  const auto ds = truth::read_dataset(a.data);
  const json j = read_json(a.config);
  train::ModelConfig mc;
  train::TrainConfig tc;
  train::parse_config(j, mc, tc);
  if (baseline) mc.kind = train::ModelKind::adenkf;
  if (j.contains("d_u") && mc.d_u != ds.params.d_u) {
    throw ConfigError("config d_u " + std::to_string(mc.d_u) + " does not match the dataset (" +
                      std::to_string(ds.params.d_u) + ")");
  }
  mc.d_u = ds.params.d_u;
  if (!j.contains("dt_obs")) mc.flow.dt_obs = ds.params.dt_obs;
  // Observation intervals shorter than the default substep are integrated in one step.
  if (!j.contains("dt_int") && mc.flow.dt_int > mc.flow.dt_obs) mc.flow.dt_int = mc.flow.dt_obs;

  fs::create_directories(a.out);
  io::write_file_atomic(fs::path(a.out) / "config.json", train::config_json(mc, tc).dump(2) + "\n");
  train::tune_allocator();
  RngStream init = RngStream(tc.seed).split(0);
  auto model = train::make_model(mc, init);
  train::FitOptions opts;
  opts.out_dir = fs::path(a.out);
  const auto res = train::fit(*model, ds, tc, opts);
  out << "trained " << train::model_kind_name(mc.kind) << " for " << res.epochs_run << " epochs, final loglik "
      << (res.epoch_loglik.empty() ? 0.0 : res.epoch_loglik.back()) << ", checkpoint "
      << (fs::path(a.out) / "final" / "manifest.json").string() << "\n";
  return 0;
}

struct FilterArgs {
  std::string data, ckpt, out;
  std::size_t Tf = 0, ensemble = 0;
  std::uint64_t seed = 0;
  bool particles = false;
};

int run_filter_cmd(CLI::App& app, const FilterArgs& a, bool forecast, std::ostream& out) {
  const auto ds = truth::read_dataset(a.data);
  const auto model = train::load_checkpoint(a.ckpt);
  const json info = train::checkpoint_info(a.ckpt);
  if (model->state_dim() != ds.params.d_u) throw ConfigError("checkpoint d_u does not match the dataset");
  if (ds.test.empty()) throw ConfigError("dataset has no test instances");
  const std::size_t tf = forecast ? (app.count("--Tf") ? a.Tf : ds.params.Tf) : 0;
  if (tf > ds.params.Tf) throw ConfigError("--Tf exceeds the dataset forecast horizon " + std::to_string(ds.params.Tf));
  const std::size_t n = a.ensemble > 0 ? a.ensemble : info.value("ensemble_size", std::size_t{100});
  const double sigma = info.value("sigma", 2.0);
  const std::size_t T = ds.params.T, steps = T + tf + 1, d = ds.params.d_u, I = ds.test.size();

  fs::create_directories(a.out);
  if (a.particles) fs::create_directories(fs::path(a.out) / "particles");
  Tensor mean({I, steps, d}), loglik({I});
  const RngStream root(a.seed);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t k = 0; k < I; ++k) {
    const std::size_t i = ds.test[k];
    RngStream s = root.split(i);
    const auto rec = train::reconstruct_forecast(*model, ds.observation(i), ds.observations(i), tf, n, sigma, s);
    const Tensor m = metrics::particle_mean(
        Tensor({1, steps, n, d}, {rec.particles.data().begin(), rec.particles.data().end()}));
    std::copy(m.data().begin(), m.data().end(), mean.raw() + k * steps * d);
    loglik[k] = rec.loglik;
    if (a.particles) io::write_tensor(fs::path(a.out) / "particles" / ("instance_" + std::to_string(i) + ".tns"),
                                      rec.particles);
  }
  const double test_s = seconds_since(t0);
  io::write_tensor(fs::path(a.out) / "mean.tns", mean);
  io::write_tensor(fs::path(a.out) / "loglik.tns", loglik);
  const json meta = {{"format", "roadenkf-prediction-1"},
                     {"instances", ds.test},
                     {"T", T},
                     {"Tf", tf},
                     {"ensemble_size", n},
                     {"seed", a.seed},
                     {"test_s", test_s},
                     {"train_s_per_epoch", info.value("train_s_per_epoch", 0.0)},
                     {"config", train::model_config_json(model->config())}};
  io::write_file_atomic(fs::path(a.out) / "meta.json", meta.dump(2) + "\n");
  out << (forecast ? "forecast " : "filtered ") << I << " test instances into " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string data, pred, out;
};

int eval(const EvalArgs& a, std::ostream& out) {
  const auto ds = truth::read_dataset(a.data);
  const json meta = read_json(fs::path(a.pred) / "meta.json");
  const auto ids = meta.at("instances").get<std::vector<std::size_t>>();
  const std::size_t T = meta.at("T").get<std::size_t>(), tf = meta.at("Tf").get<std::size_t>();
  if (T != ds.params.T || tf > ds.params.Tf) throw ConfigError("prediction horizon does not match the dataset");
  const Tensor mean = io::read_tensor(fs::path(a.pred) / "mean.tns");
  const std::size_t steps = T + tf + 1, d = ds.params.d_u;
  Tensor truth({ids.size(), steps, d});
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= ds.instances()) throw ConfigError("prediction refers to a missing instance");
    const Tensor u = ds.truth(ids[k], 0, steps);
    std::copy(u.data().begin(), u.data().end(), truth.raw() + k * steps * d);
  }
  auto rep = metrics::evaluate(mean, truth, T, tf);
  const fs::path ll_path = fs::path(a.pred) / "loglik.tns";
  if (fs::exists(ll_path)) {
    const Tensor ll = io::read_tensor(ll_path);
    double s = 0.0;
    for (double v : ll.data()) s += v;
    rep.test_loglik = ll.size() ? s / static_cast<double>(ll.size()) : 0.0;
  }
  rep.test_s = meta.value("test_s", 0.0);
  rep.train_s_per_epoch = meta.value("train_s_per_epoch", 0.0);
  rep.config = meta.value("config", json::object());

  const fs::path dest(a.out);
  if (dest.extension() == ".csv") {
    io::write_file_atomic(dest, rep.to_csv());
  } else if (dest.extension() == ".json") {
    io::write_file_atomic(dest, rep.to_json().dump(2) + "\n");
  } else {
    throw ConfigError("--out must end in .csv or .json");
  }
  out << "rmse_r " << rep.rmse_r;
  for (std::size_t l = 0; l < rep.rmse_f.size(); ++l) out << " rmse_f(" << l + 1 << ") " << rep.rmse_f[l];
  out << "\n";
  return 0;
}

struct GradcheckArgs {
  std::string config;
  std::size_t T = 5;
  double eps = 1e-5, tol = 1e-4;
};

int gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const json j = read_json(a.config);
  train::ModelConfig mc;
  train::TrainConfig tc;
  train::parse_config(j, mc, tc);
  RngStream root(tc.seed);
  RngStream init = root.split(0);
  const auto model = train::make_model(mc, init);
  Tensor y({a.T, mc.d_u});
  RngStream ys = root.split(1);
  ys.fill_normal(y.data());
  for (double& v : y.data()) v *= 0.5;
  auto obs = enkf::ObservationOp::identity(mc.d_u, 0.05);
  if (model->regularized()) obs = enkf::augment_observations(obs, tc.sigma, model->latent_dim());
  const auto mode = model->regularized() ? enkf::Mode::train : enkf::Mode::test;
  const RngStream filter_stream = root.split(2);
  const auto f = [&](ad::Tape&, const ad::Var& x) {
    auto local = model->clone();
    bind_params(*local, x);
    RngStream s = filter_stream;  // common random numbers across evaluations
    return enkf::run_filter(local->filter_model(tc.sigma), obs, y, tc.ensemble_size, s, mode).loglik;
  };
  const auto r = ad::grad_check(f, flatten_params(*model), a.eps);
  out << json{{"parameters", r.ad_grad.size()},
              {"max_rel_error", r.max_rel_error},
              {"worst_index", r.worst_index},
              {"tolerance", a.tol},
              {"pass", r.max_rel_error < a.tol}}
             .dump()
      << "\n";
  return r.max_rel_error < a.tol ? 0 : 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reduced-order autodifferentiable ensemble Kalman filter toolkit", "roadenkf"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* c_datagen = app.add_subcommand("datagen", "Generate a synthetic dataset");
  c_datagen->add_option("--kind", dg.kind, "l63, burgers or ks")->required()->check(CLI::IsMember({"l63", "burgers", "ks"}));
  c_datagen->add_option("--out", dg.out, "Output directory")->required();
  c_datagen->add_option("--d-u", dg.d_u, "State dimension");
  c_datagen->add_option("--c", dg.c, "Observed fraction of coordinates");
  c_datagen->add_option("--r", dg.r, "Observation noise variance");
  c_datagen->add_option("--n-train", dg.n_train, "Training instances");
  c_datagen->add_option("--n-test", dg.n_test, "Test instances");
  c_datagen->add_option("--T", dg.T, "Observation horizon");
  c_datagen->add_option("--Tf", dg.Tf, "Forecast horizon");
  c_datagen->add_option("--seed", dg.seed, "Random seed");

  TrainArgs tr, base;
  auto* c_train = app.add_subcommand("train", "Fit a reduced-order model");
  auto* c_base = app.add_subcommand("baseline-adenkf", "Fit the full-order surrogate baseline");
  for (auto [cmd, args] : {std::pair{c_train, &tr}, std::pair{c_base, &base}}) {
    cmd->add_option("--data", args->data, "Dataset directory")->required();
    cmd->add_option("--config", args->config, "JSON configuration file")->required();
    cmd->add_option("--out", args->out, "Output directory")->required();
  }

  FilterArgs fa, fc;
  auto* c_filter = app.add_subcommand("filter", "Reconstruct the test instances");
  auto* c_forecast = app.add_subcommand("forecast", "Reconstruct and forecast the test instances");
  for (auto [cmd, args] : {std::pair{c_filter, &fa}, std::pair{c_forecast, &fc}}) {
    cmd->add_option("--data", args->data, "Dataset directory")->required();
    cmd->add_option("--ckpt", args->ckpt, "Checkpoint manifest or directory")->required();
    cmd->add_option("--out", args->out, "Output directory")->required();
    cmd->add_option("--ensemble", args->ensemble, "Ensemble size (default: the training value)");
    cmd->add_option("--seed", args->seed, "Random seed");
    cmd->add_flag("--particles", args->particles, "Also write every particle trajectory");
  }
  c_forecast->add_option("--Tf", fc.Tf, "Forecast steps (default: the dataset horizon)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score predictions against the truth");
  c_eval->add_option("--data", ev.data, "Dataset directory")->required();
  c_eval->add_option("--pred", ev.pred, "Prediction directory")->required();
  c_eval->add_option("--out", ev.out, "Report path ending in .csv or .json")->required();

  GradcheckArgs gc;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of the log-likelihood gradient");
  c_grad->add_option("--config", gc.config, "JSON configuration file")->required();
  c_grad->add_option("--T", gc.T, "Observation steps");
  c_grad->add_option("--eps", gc.eps, "Central difference step");
  c_grad->add_option("--tol", gc.tol, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return 2;
  }

  try {
    if (c_datagen->parsed()) return datagen(*c_datagen, dg, out);
    if (c_train->parsed()) return run_training(tr, false, out);
    if (c_base->parsed()) return run_training(base, true, out);
    if (c_filter->parsed()) return run_filter_cmd(*c_filter, fa, false, out);
    if (c_forecast->parsed()) return run_filter_cmd(*c_forecast, fc, true, out);
    if (c_eval->parsed()) return eval(ev, out);
    if (c_grad->parsed()) return gradcheck(gc, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace roadenkf::cli
