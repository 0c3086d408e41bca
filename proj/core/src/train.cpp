#include "roadenkf/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <sstream>
#include <string_view>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "roadenkf/error.hpp"
#include "roadenkf/metrics.hpp"
#include "roadenkf/params.hpp"
#include "roadenkf/tensor_io.hpp"

namespace roadenkf::train {

namespace {

using nlohmann::json;

// Runs fn(i) for i in [0, count) on up to `workers` threads. Exceptions are
// rethrown in index order once every task finished.
void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(count);
  const auto run = [&](std::size_t w, std::size_t stride) {
    for (std::size_t i = w; i < count; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

Tensor slice_rows(const Tensor& y, std::size_t begin, std::size_t len) {
  const std::size_t d = y.shape()[1];
  Tensor out({len, d});
  std::copy_n(y.raw() + begin * d, len * d, out.raw());
  return out;
}

double norm2(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

std::vector<std::size_t> channel_list(const json& j) {
  auto c = j.get<std::vector<std::size_t>>();
  if (c.empty() || c.front() != 1) throw ConfigError("channels must start with 1");
  return c;
}

// Flat-vector mask that zeroes the gradient of frozen parameters.
std::vector<char> frozen_mask(Model& model, const std::vector<std::string>& prefixes) {
  std::vector<char> mask;
  model.visit("", [&](const std::string& name, Var& v) {
    const bool frozen = std::any_of(prefixes.begin(), prefixes.end(),
                                    [&](const std::string& p) { return name.rfind(p, 0) == 0; });
    mask.insert(mask.end(), v.value().size(), frozen ? 1 : 0);
  });
  return mask;
}

}  // namespace

std::string model_kind_name(ModelKind k) { return k == ModelKind::road ? "road" : "adenkf"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "road") return ModelKind::road;
  if (s == "adenkf") return ModelKind::adenkf;
  throw ConfigError("unknown model '" + s + "' (expected road or adenkf)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (tbptt_len == 0) throw ConfigError("tbptt_len must be >= 1");
  if (ensemble_size < 2) throw ConfigError("ensemble_size must be >= 2");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
}

json model_config_json(const ModelConfig& m) {
  return {{"model", model_kind_name(m.kind)},
          {"d_u", m.d_u},
          {"d_z", m.d_z},
          {"hidden", m.hidden},
          {"dt_obs", m.flow.dt_obs},
          {"dt_int", m.flow.dt_int},
          {"scheme", dyn::scheme_name(m.flow.scheme)},
          {"h", m.h},
          {"channels", m.channels},
          {"head_hidden", m.head_hidden},
          {"noise_init", m.noise_init}};
}

json config_json(const ModelConfig& m, const TrainConfig& t) {
  json j = model_config_json(m);
  j["learning_rate"] = t.learning_rate;
  j["batch_size"] = t.batch_size;
  j["tbptt_len"] = t.tbptt_len;
  j["epochs"] = t.epochs;
  j["ensemble_size"] = t.ensemble_size;
  j["sigma"] = t.sigma;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["eps"] = t.eps;
  j["seed"] = t.seed;
  j["checkpoint_every"] = t.checkpoint_every;
  j["patience"] = t.patience;
  j["validation_count"] = t.validation_count;
  j["threads"] = t.threads;
  return j;
}

void parse_config(const json& j, ModelConfig& m, TrainConfig& t) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "model") m.kind = parse_model_kind(v.get<std::string>());
      else if (k == "d_u") m.d_u = v.get<std::size_t>();
      else if (k == "d_z") m.d_z = v.get<std::size_t>();
      else if (k == "hidden") m.hidden = v.get<std::size_t>();
      else if (k == "dt_obs") m.flow.dt_obs = v.get<double>();
      else if (k == "dt_int") m.flow.dt_int = v.get<double>();
      else if (k == "scheme") m.flow.scheme = dyn::parse_scheme(v.get<std::string>());
      else if (k == "h") m.h = v.get<std::size_t>();
      else if (k == "channels") m.channels = channel_list(v);
      else if (k == "head_hidden") m.head_hidden = v.get<std::size_t>();
      else if (k == "noise_init") m.noise_init = v.get<double>();
      else if (k == "learning_rate") t.learning_rate = v.get<double>();
      else if (k == "batch_size") t.batch_size = v.get<std::size_t>();
      else if (k == "tbptt_len") t.tbptt_len = v.get<std::size_t>();
      else if (k == "epochs") t.epochs = v.get<std::size_t>();
      else if (k == "ensemble_size") t.ensemble_size = v.get<std::size_t>();
      else if (k == "sigma") t.sigma = v.get<double>();
      else if (k == "beta1") t.beta1 = v.get<double>();
      else if (k == "beta2") t.beta2 = v.get<double>();
      else if (k == "eps") t.eps = v.get<double>();
      else if (k == "seed") t.seed = v.get<std::uint64_t>();
      else if (k == "checkpoint_every") t.checkpoint_every = v.get<std::size_t>();
      else if (k == "patience") t.patience = v.get<std::size_t>();
      else if (k == "validation_count") t.validation_count = v.get<std::size_t>();
      else if (k == "threads") t.threads = v.get<std::size_t>();
      else throw ConfigError("unknown config key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (!(m.noise_init > 0.0)) throw ConfigError("noise_init must be > 0");
  t.validate();
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  TrainConfig unused;
  json model_only = json::object();
  for (const char* k : {"model", "d_u", "d_z", "hidden", "dt_obs", "dt_int", "scheme", "h", "channels", "head_hidden",
                        "noise_init"}) {
    if (j.contains(k)) model_only[k] = j.at(k);
  }
  parse_config(model_only, m, unused);
  return m;
}

ThetaParams init_theta(const ModelConfig& cfg, RngStream& stream) {
  ThetaParams th;
  RngStream a = stream.split(0), g = stream.split(1);
  th.alpha = dyn::init_fcnet2(cfg.d_z, cfg.hidden, cfg.d_z, a);
  th.beta = dyn::init_diag_noise(cfg.d_z, cfg.noise_init);
  dec::FndConfig fc;
  fc.d_z = cfg.d_z;
  fc.h = cfg.h;
  fc.stack = {cfg.d_u, cfg.channels, cfg.head_hidden};
  th.gamma = dec::init_fnd(fc, g);
  return th;
}

RoadModel::RoadModel(ModelConfig cfg, ThetaParams theta) : cfg_(std::move(cfg)), theta_(std::move(theta)) {}

enkf::FilterModel RoadModel::filter_model(double sigma0) const {
  enkf::FilterModel fm;
  fm.d_z = cfg_.d_z;
  const ThetaParams th = theta_;
  const dyn::FlowConfig flow = cfg_.flow;
  fm.transition = [th, flow](const Var& z, RngStream& s) {
    return dyn::latent_transition(th.alpha, th.beta, z, flow, s);
  };
  fm.decode = [th](const Var& z) { return dec::fnd_decode(th.gamma, z); };
  const std::size_t d_z = cfg_.d_z;
  fm.initial = [d_z, sigma0](std::size_t n, RngStream& s) { return dyn::sample_initial_latent(d_z, n, sigma0, s); };
  return fm;
}

AdEnkfModel::AdEnkfModel(ModelConfig cfg, dec::SpectralStack alpha, dyn::DiagNoise beta)
    : cfg_(std::move(cfg)), alpha_(std::move(alpha)), beta_(std::move(beta)) {}

void AdEnkfModel::visit(const std::string& prefix, const ParamVisitor& f) {
  alpha_.visit(prefix + "alpha.", f);
  beta_.visit(prefix + "beta.", f);
}

enkf::FilterModel AdEnkfModel::filter_model(double sigma0) const {
  enkf::FilterModel fm;
  fm.d_z = cfg_.d_u;
  const dec::SpectralStack stack = alpha_;
  const dyn::DiagNoise noise = beta_;
  const dyn::FlowConfig flow = cfg_.flow;
  fm.transition = [stack, noise, flow](const Var& u, RngStream& s) {
    const dyn::VectorField field = [&stack](const Var& x) { return dec::spectral_surrogate_step(stack, x); };
    return dyn::stochastic_transition(field, noise, u, flow, s);
  };
  fm.decode = [](const Var& u) { return u; };
  const std::size_t d_u = cfg_.d_u;
  fm.initial = [d_u, sigma0](std::size_t n, RngStream& s) { return dyn::sample_initial_latent(d_u, n, sigma0, s); };
  return fm;
}

std::unique_ptr<Model> make_model(const ModelConfig& cfg, RngStream& stream) {
  if (cfg.kind == ModelKind::road) return std::make_unique<RoadModel>(cfg, init_theta(cfg, stream));
  RngStream a = stream.split(0);
  auto stack = dec::init_spectral_stack({cfg.d_u, cfg.channels, cfg.head_hidden}, a);
  return std::make_unique<AdEnkfModel>(cfg, std::move(stack), dyn::init_diag_noise(cfg.d_u, cfg.noise_init));
}

std::vector<Segment> tbptt_split(std::size_t horizon, std::size_t seg) {
  if (seg == 0) throw ConfigError("TBPTT segment length must be >= 1");
  std::vector<Segment> out;
  for (std::size_t b = 1; b <= horizon; b += seg) out.push_back({b, std::min(seg, horizon - b + 1)});
  return out;
}

void adam_update(Tensor& theta, const Tensor& grad, AdamState& st, const TrainConfig& cfg) {
  if (grad.shape() != theta.shape()) throw DimensionError("gradient does not match the parameter vector");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) throw DivergenceError("non-finite gradient entry " + std::to_string(i), st.step + 1);
  }
  if (st.m.shape() != theta.shape()) {
    st.m = Tensor(theta.shape());
    st.v = Tensor(theta.shape());
    st.step = 0;
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mh = st.m[i] / c1;
    const double vh = st.v[i] / c2;
    theta[i] += cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps);
  }
}

SegmentResult segment_gradient(const Model& model, const std::vector<const Instance*>& batch,
                               const std::vector<std::optional<Tensor>>& carry, std::vector<RngStream>& streams,
                               const Segment& seg, const TrainConfig& cfg) {
  const std::size_t b = batch.size();
  if (carry.size() != b || streams.size() != b) throw DimensionError("batch, carry and streams differ in length");
  if (b == 0) throw ConfigError("empty batch");
  std::unique_ptr<Model> base = model.clone();
  const Tensor flat = flatten_params(*base);

  std::vector<double> ll(b);
  std::vector<Tensor> grads(b), out_carry(b);
  parallel_for(b, worker_count(cfg.threads), [&](std::size_t i) {
    const Instance& inst = *batch[i];
    std::unique_ptr<Model> local = model.clone();
    ad::Tape tape;
    const Var leaf = tape.leaf(flat);
    bind_params(*local, leaf);
    const auto fm = local->filter_model(cfg.sigma);
    enkf::FilterOptions opts;
    opts.t_begin = seg.begin;
    opts.initial = carry[i];
    opts.keep_particles = false;
    const auto mode = inst.obs.augmented() ? enkf::Mode::train : enkf::Mode::test;
    const auto res = enkf::run_filter(fm, inst.obs, slice_rows(inst.y, seg.begin - 1, seg.length),
                                      cfg.ensemble_size, streams[i], mode, opts);
    tape.backward(res.loglik);
    ll[i] = res.loglik.value().item();
    grads[i] = tape.grad_or_zeros(leaf);
    out_carry[i] = res.particles.back().value();
  });

  SegmentResult out;
  out.grad = Tensor(flat.shape());
  const double w = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    out.loglik += ll[i];
    for (std::size_t k = 0; k < flat.size(); ++k) out.grad[k] += grads[i][k];
  }
  out.loglik *= w;
  for (double& g : out.grad.data()) g *= w;
  out.carry = std::move(out_carry);
  return out;
}

std::vector<SegmentResult> tbptt_gradients(const Model& model, const std::vector<const Instance*>& batch,
                                           std::vector<RngStream> streams, const TrainConfig& cfg) {
  if (batch.empty()) return {};
  const std::size_t horizon = batch.front()->y.shape()[0];
  std::vector<std::optional<Tensor>> carry(batch.size());
  std::vector<SegmentResult> out;
  for (const Segment& s : tbptt_split(horizon, cfg.tbptt_len)) {
    out.push_back(segment_gradient(model, batch, carry, streams, s, cfg));
    for (std::size_t i = 0; i < batch.size(); ++i) carry[i] = out.back().carry[i];
  }
  return out;
}

RngStream batch_stream(std::uint64_t seed, std::size_t epoch, std::size_t batch, std::size_t instance) {
  return RngStream(seed).split(2).split(epoch).split(batch).split(instance);
}

std::string log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,epoch,batch_loglik,grad_norm,wall_ms\n";
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.epoch << ',';
    if (r.diverged) os << "nan";
    else os << r.batch_loglik;
    os << ',' << r.grad_norm << ',' << r.wall_ms << '\n';
  }
  return os.str();
}

FitResult fit(Model& model, const truth::Dataset& data, const TrainConfig& cfg, const FitOptions& opts) {
  cfg.validate();
  if (model.state_dim() != data.params.d_u) throw ConfigError("model d_u does not match the dataset");
  std::vector<std::size_t> train_ids = data.train;
  std::vector<std::size_t> val_ids;
  if (cfg.validation_count > 0) {
    if (cfg.validation_count >= train_ids.size()) throw ConfigError("validation_count leaves no training data");
    val_ids.assign(train_ids.end() - static_cast<std::ptrdiff_t>(cfg.validation_count), train_ids.end());
    train_ids.resize(train_ids.size() - cfg.validation_count);
  }
  if (train_ids.size() < cfg.batch_size) throw ConfigError("fewer training instances than batch_size");
  if (cfg.tbptt_len > data.params.T) throw ConfigError("tbptt_len exceeds T");

  std::vector<Instance> instances(data.instances());
  for (std::size_t i : train_ids) {
    auto obs = data.observation(i);
    if (model.regularized()) obs = enkf::augment_observations(obs, cfg.sigma, model.latent_dim());
    instances[i] = {std::move(obs), data.observations(i)};
  }

  const RngStream root(cfg.seed);
  const RngStream order_root = root.split(1);
  const auto segments = tbptt_split(data.params.T, cfg.tbptt_len);
  const auto mask = frozen_mask(model, opts.frozen);
  Tensor theta = flatten_params(model);
  AdamState adam;
  FitResult res;
  std::size_t iteration = 0, consecutive_div = 0, stale = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  const auto t_start = std::chrono::steady_clock::now();

  const auto write_log = [&] {
    if (opts.out_dir) io::write_file_atomic(*opts.out_dir / "log.csv", log_csv(res.log));
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_ids;
    RngStream shuffle = order_root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_index(i)]);

    double epoch_sum = 0.0;
    std::size_t epoch_count = 0;
    const auto epoch_start = std::chrono::steady_clock::now();
    for (std::size_t start = 0, bidx = 0; start < order.size(); start += cfg.batch_size, ++bidx) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Instance*> batch;
      std::vector<RngStream> streams;
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(&instances[order[k]]);
        streams.push_back(batch_stream(cfg.seed, epoch, bidx, order[k]));
      }
      std::vector<std::optional<Tensor>> carry(batch.size());
      bool diverged = false;
      for (const Segment& s : segments) {
        LogRow row;
        row.iteration = ++iteration;
        row.epoch = epoch;
        try {
          SegmentResult sr = segment_gradient(model, batch, carry, streams, s, cfg);
          for (std::size_t k = 0; k < mask.size(); ++k) {
            if (mask[k]) sr.grad[k] = 0.0;
          }
          adam_update(theta, sr.grad, adam, cfg);
          assign_params(model, theta);
          for (std::size_t i = 0; i < batch.size(); ++i) carry[i] = std::move(sr.carry[i]);
          row.batch_loglik = sr.loglik;
          row.grad_norm = norm2(sr.grad);
          epoch_sum += sr.loglik;
          ++epoch_count;
        } catch (const DivergenceError&) {
          diverged = true;
          row.diverged = true;
          row.batch_loglik = std::numeric_limits<double>::quiet_NaN();
        }
        row.wall_ms = reproducible() ? 0.0
                                     : std::chrono::duration<double, std::milli>(
                                           std::chrono::steady_clock::now() - t_start)
                                           .count();
        res.log.push_back(row);
        if (opts.on_iteration) opts.on_iteration(row);
        if (diverged) break;
      }
      if (diverged) {
        ++res.diverged_batches;
        if (++consecutive_div >= 3) {
          write_log();
          throw DivergenceError("training aborted after 3 consecutive diverged batches", iteration);
        }
      } else {
        consecutive_div = 0;
      }
    }
    res.epoch_loglik.push_back(epoch_count ? epoch_sum / static_cast<double>(epoch_count)
                                           : std::numeric_limits<double>::quiet_NaN());
    res.epochs_run = epoch;
    res.epoch_seconds.push_back(
        reproducible() ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count());
    write_log();

    if (opts.out_dir && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      save_checkpoint(model, *opts.out_dir / ("epoch_" + std::to_string(epoch)), {{"epoch", epoch}});
    }
    if (!val_ids.empty()) {
      const double v = mean_loglik(model, data, val_ids, cfg.ensemble_size, cfg.sigma, cfg.seed);
      res.val_loglik.push_back(v);
      if (v > best_val) {
        best_val = v;
        stale = 0;
        if (opts.out_dir) save_checkpoint(model, *opts.out_dir / "best", {{"epoch", epoch}, {"val_loglik", v}});
      } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
        break;
      }
    }
  }
  if (opts.out_dir) {
    save_checkpoint(model, *opts.out_dir / "final",
                    {{"epoch", res.epochs_run},
                     {"train_s_per_epoch", metrics::median(res.epoch_seconds)},
                     {"ensemble_size", cfg.ensemble_size},
                     {"sigma", cfg.sigma}});
  }
  return res;
}

Reconstruction reconstruct_forecast(const Model& model, const enkf::ObservationOp& obs, const Tensor& y,
                                    std::size_t tf, std::size_t n, double sigma0, RngStream& stream) {
  const auto fm = model.filter_model(sigma0);
  enkf::FilterOptions opts;
  opts.keep_particles = false;
  opts.decode_states = true;
  auto res = enkf::run_filter(fm, obs, y, n, stream, enkf::Mode::test, opts);
  Var z = ad::detach(res.particles.back());
  for (std::size_t k = 0; k < tf; ++k) {
    try {
      z = fm.transition(z, stream);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("forecast diverged: ") + e.what(), y.shape()[0] + k + 1);
    }
    res.states.push_back(fm.decode(z).value());
  }
  const std::size_t steps = res.states.size(), d_u = model.state_dim();
  Reconstruction out;
  out.particles = Tensor({steps, n, d_u});
  for (std::size_t t = 0; t < steps; ++t) std::copy_n(res.states[t].raw(), n * d_u, out.particles.raw() + t * n * d_u);
  out.loglik = res.loglik.value().item();
  return out;
}

double mean_loglik(const Model& model, const truth::Dataset& data, const std::vector<std::size_t>& ids,
                   std::size_t n, double sigma0, std::uint64_t seed) {
  if (ids.empty()) return 0.0;
  const auto fm = model.filter_model(sigma0);
  const RngStream root = RngStream(seed).split(3);
  std::vector<double> ll(ids.size());
  parallel_for(ids.size(), worker_count(), [&](std::size_t k) {
    RngStream s = root.split(ids[k]);
    enkf::FilterOptions opts;
    opts.keep_particles = false;
    ll[k] = enkf::run_filter(fm, data.observation(ids[k]), data.observations(ids[k]), n, s, enkf::Mode::test, opts)
                .loglik.value()
                .item();
  });
  double s = 0.0;
  for (double v : ll) s += v;
  return s / static_cast<double>(ids.size());
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir, const json& extra) {
  std::filesystem::create_directories(dir / "params");
  std::unique_ptr<Model> m = model.clone();
  json params = json::array();
  m->visit("", [&](const std::string& name, Var& v) {
    const std::string file = "params/" + name + ".tns";
    io::write_tensor(dir / file, v.value());
    params.push_back({{"name", name},
                      {"file", file},
                      {"shape", v.shape()},
                      {"kind", v.kind() == ad::Kind::complex ? "complex" : "real"}});
  });
  json manifest = {{"format", "roadenkf-checkpoint-1"}, {"config", model_config_json(model.config())}, {"params", params}};
  if (!extra.is_null()) manifest["info"] = extra;
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

namespace {

std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::is_directory(path) ? path / "manifest.json" : path;
}

json read_manifest(const std::filesystem::path& path) {
  json manifest;
  try {
    manifest = json::parse(io::read_file(manifest_path(path)));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "roadenkf-checkpoint-1") throw ConfigError("not a checkpoint manifest");
  return manifest;
}

}  // namespace

json checkpoint_info(const std::filesystem::path& path) {
  return read_manifest(path).value("info", json::object());
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path) {
  const auto dir = manifest_path(path).parent_path();
  const json manifest = read_manifest(path);
  const ModelConfig cfg = model_config_from_json(manifest.at("config"));
  RngStream dummy(0);
  std::unique_ptr<Model> model = make_model(cfg, dummy);
  const auto& entries = manifest.at("params");
  std::size_t k = 0;
  model->visit("", [&](const std::string& name, Var& v) {
    if (k >= entries.size() || entries[k].at("name").get<std::string>() != name) {
      throw ConfigError("checkpoint parameter list does not match the model (at " + name + ")");
    }
    Tensor t = io::read_tensor(dir / entries[k].at("file").get<std::string>());
    if (t.shape() != v.shape() || t.kind() != v.kind()) throw DimensionError("checkpoint tensor " + name + " has the wrong shape");
    v = Var(std::move(t));
    ++k;
  });
  if (k != entries.size()) throw ConfigError("checkpoint has extra parameters");
  return model;
}

std::size_t worker_count(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("ROADENKF_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

bool reproducible() {
  const char* env = std::getenv("ROADENKF_REPRODUCIBLE");
  return env && *env && std::string_view(env) != "0";
}

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
#endif
}

}  // namespace roadenkf::train
