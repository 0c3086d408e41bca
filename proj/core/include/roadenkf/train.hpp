#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadenkf/decoder.hpp"
#include "roadenkf/dynamics.hpp"
#include "roadenkf/enkf.hpp"
#include "roadenkf/truth_models.hpp"

namespace roadenkf::train {

using ad::Tensor;
using ad::Var;

using ParamVisitor = std::function<void(const std::string&, Var&)>;

enum class ModelKind { road, adenkf };

std::string model_kind_name(ModelKind k);
ModelKind parse_model_kind(const std::string& s);

/// Architecture hyperparameters. d_u and dt_obs normally come from the dataset.
struct ModelConfig {
  ModelKind kind = ModelKind::road;
  std::size_t d_u = 32;
  std::size_t d_z = 3;
  std::size_t hidden = 64;  // latent vector field width
  dyn::FlowConfig flow;
  std::size_t h = 6;  // retained Fourier modes of the lift
  std::vector<std::size_t> channels{1, 20, 20, 20, 20};
  std::size_t head_hidden = 0;  // 0 means 2 * n_L
  double noise_init = 0.1;      // initial model-noise standard deviation
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t tbptt_len = 10;
  std::size_t epochs = 20;
  std::size_t ensemble_size = 100;
  double sigma = 2.0;  // latent prior scale and pseudo-observation noise
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  std::size_t patience = 10;         // early stop on validation plateau, when validating
  std::size_t validation_count = 0;  // trailing training instances held out for validation
  std::size_t threads = 0;           // 0: ROADENKF_THREADS or hardware concurrency

  void validate() const;
};

/// Parses one flat JSON object holding both model and training fields.
/// Unknown keys raise ConfigError.
void parse_config(const nlohmann::json& j, ModelConfig& model, TrainConfig& train);
nlohmann::json config_json(const ModelConfig& model, const TrainConfig& train);
nlohmann::json model_config_json(const ModelConfig& model);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// theta = (alpha, beta, gamma): latent vector field, model noise, decoder.
struct ThetaParams {
  dyn::FcNet2 alpha;
  dyn::DiagNoise beta;
  dec::FndParams gamma;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    alpha.visit(prefix + "alpha.", f);
    beta.visit(prefix + "beta.", f);
    gamma.visit(prefix + "gamma.", f);
  }
};

ThetaParams init_theta(const ModelConfig& cfg, RngStream& stream);

/// A trainable state-space model seen through the filter.
class Model {
 public:
  virtual ~Model() = default;
  virtual void visit(const std::string& prefix, const ParamVisitor& f) = 0;
  virtual std::unique_ptr<Model> clone() const = 0;
  /// Filter view with the initial ensemble drawn from N(0, sigma0^2 I).
  virtual enkf::FilterModel filter_model(double sigma0) const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t state_dim() const = 0;
  /// Whether training appends the latent pseudo-observation block.
  virtual bool regularized() const = 0;
  virtual const ModelConfig& config() const = 0;
};

/// Reduced-order model: latent FcNet2 vector field, diagonal noise, Fourier decoder.
class RoadModel final : public Model {
 public:
  RoadModel(ModelConfig cfg, ThetaParams theta);
  void visit(const std::string& prefix, const ParamVisitor& f) override { theta_.visit(prefix, f); }
  std::unique_ptr<Model> clone() const override { return std::make_unique<RoadModel>(*this); }
  enkf::FilterModel filter_model(double sigma0) const override;
  std::size_t latent_dim() const override { return cfg_.d_z; }
  std::size_t state_dim() const override { return cfg_.d_u; }
  bool regularized() const override { return true; }
  const ModelConfig& config() const override { return cfg_; }
  const ThetaParams& theta() const { return theta_; }
  ThetaParams& theta() { return theta_; }

 private:
  ModelConfig cfg_;
  ThetaParams theta_;
};

/// Full-order baseline: the spectral stack as the state vector field,
/// diagonal noise over every coordinate, identity decoder.
class AdEnkfModel final : public Model {
 public:
  AdEnkfModel(ModelConfig cfg, dec::SpectralStack alpha, dyn::DiagNoise beta);
  void visit(const std::string& prefix, const ParamVisitor& f) override;
  std::unique_ptr<Model> clone() const override { return std::make_unique<AdEnkfModel>(*this); }
  enkf::FilterModel filter_model(double sigma0) const override;
  std::size_t latent_dim() const override { return cfg_.d_u; }
  std::size_t state_dim() const override { return cfg_.d_u; }
  bool regularized() const override { return false; }
  const ModelConfig& config() const override { return cfg_; }

 private:
  ModelConfig cfg_;
  dec::SpectralStack alpha_;
  dyn::DiagNoise beta_;
};

std::unique_ptr<Model> make_model(const ModelConfig& cfg, RngStream& stream);

struct Segment {
  std::size_t begin = 1;  // first observation index (1-based)
  std::size_t length = 0;
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Contiguous segments [1..seg], [seg+1..2seg], ...; the last may be shorter.
std::vector<Segment> tbptt_split(std::size_t horizon, std::size_t seg);

struct AdamState {
  Tensor m;
  Tensor v;
  std::size_t step = 0;
};

/// One Adam step in the ascent direction. Throws DivergenceError naming the
/// first non-finite gradient entry.
void adam_update(Tensor& theta, const Tensor& grad, AdamState& state, const TrainConfig& cfg);

/// One filtering problem: observation operator (augmented when training a
/// regularized model) and its observations [T x d_y].
struct Instance {
  enkf::ObservationOp obs;
  Tensor y;
};

struct SegmentResult {
  double loglik = 0.0;         // batch mean of the segment log-likelihood
  Tensor grad;                 // gradient of that mean w.r.t. the flat parameters
  std::vector<Tensor> carry;   // final analysis ensembles, detached
};

/// Filters every instance over `seg` starting from its carried ensemble (or a
/// fresh draw when empty) and differentiates the batch-mean log-likelihood.
/// Instances run concurrently; the reduction follows instance order.
SegmentResult segment_gradient(const Model& model, const std::vector<const Instance*>& batch,
                               const std::vector<std::optional<Tensor>>& carry, std::vector<RngStream>& streams,
                               const Segment& seg, const TrainConfig& cfg);

/// Per-segment gradients at fixed parameters, carrying the ensemble through.
std::vector<SegmentResult> tbptt_gradients(const Model& model, const std::vector<const Instance*>& batch,
                                           std::vector<RngStream> streams, const TrainConfig& cfg);

/// Filter stream of one training instance within one batch. Fit derives every
/// per-instance stream this way, so a run is reproducible from the seed alone.
RngStream batch_stream(std::uint64_t seed, std::size_t epoch, std::size_t batch, std::size_t instance);

struct LogRow {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  double batch_loglik = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  bool diverged = false;
};

struct FitOptions {
  /// Receives log.csv and checkpoints when set.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const LogRow&)> on_iteration;
  /// Freezes parameters whose name starts with any of these prefixes.
  std::vector<std::string> frozen;
};

struct FitResult {
  std::vector<LogRow> log;
  std::vector<double> epoch_loglik;  // mean batch log-likelihood per epoch
  std::vector<double> val_loglik;
  std::vector<double> epoch_seconds;  // wall clock, 0 in reproducible mode
  std::size_t epochs_run = 0;
  std::size_t diverged_batches = 0;
};

FitResult fit(Model& model, const truth::Dataset& data, const TrainConfig& cfg, const FitOptions& opts = {});

std::string log_csv(const std::vector<LogRow>& rows);

struct Reconstruction {
  Tensor particles;  // [(T + Tf + 1) x N x d_u]
  double loglik = 0.0;
};

/// Test phase: unaugmented filtering over y [T x d_y], then Tf prediction
/// steps without analysis, every particle decoded.
Reconstruction reconstruct_forecast(const Model& model, const enkf::ObservationOp& obs, const Tensor& y,
                                    std::size_t tf, std::size_t n, double sigma0, RngStream& stream);

/// Mean test-mode log-likelihood over the listed dataset instances.
double mean_loglik(const Model& model, const truth::Dataset& data, const std::vector<std::size_t>& instances,
                   std::size_t n, double sigma0, std::uint64_t seed);

/// Checkpoint: manifest.json plus one TNS1 file per parameter tensor.
void save_checkpoint(const Model& model, const std::filesystem::path& dir, const nlohmann::json& extra = {});
/// Accepts either the checkpoint directory or its manifest.json.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path);
/// The free-form "info" object stored with a checkpoint (empty when absent).
nlohmann::json checkpoint_info(const std::filesystem::path& path);

/// Worker count: ROADENKF_THREADS if set, else the hardware concurrency.
std::size_t worker_count(std::size_t requested = 0);

/// True when ROADENKF_REPRODUCIBLE is set to anything but "" or "0". Wall-clock
/// fields are then written as 0 so reruns produce identical artifacts.
bool reproducible();

/// Keeps freed tape buffers in the heap instead of returning them to the OS
/// (glibc only; no-op elsewhere).
void tune_allocator();

}  // namespace roadenkf::train
