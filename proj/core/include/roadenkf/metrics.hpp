#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roadenkf/tensor.hpp"

namespace roadenkf::metrics {

using ad::Tensor;

/// Burn-in length floor(T / 5) excluded from the reconstruction error.
std::size_t burn_in(std::size_t horizon);

/// Mean over the particle axis: [I x S x N x d] -> [I x S x d].
Tensor particle_mean(const Tensor& particles);

/// particles [I x (T+1) x N x d], truth [I x (T+1) x d]. Root mean square of the
/// particle-mean error over t in [T_b, T] (both ends), instances and coordinates.
double rmse_reconstruction(const Tensor& particles, const Tensor& truth);
/// Same with the particle mean already taken: mean [I x (T+1) x d].
double rmse_reconstruction_mean(const Tensor& mean, const Tensor& truth);

/// particles [I x N x d] at time T + lead, truth [I x d]. Throws RangeError
/// unless 1 <= lead <= tf.
double rmse_forecast(const Tensor& particles, const Tensor& truth, std::size_t lead, std::size_t tf);
double rmse_forecast_mean(const Tensor& mean, const Tensor& truth, std::size_t lead, std::size_t tf);

struct EvalReport {
  double rmse_r = 0.0;
  std::vector<double> rmse_f;  // leads 1 .. Tf
  double test_loglik = 0.0;
  double train_s_per_epoch = 0.0;  // median over epochs
  double test_s = 0.0;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// Two columns, field and value; values are JSON literals, quoted as CSV
  /// fields when needed. Doubles keep 17 significant digits.
  std::string to_csv() const;
  static EvalReport from_csv(const std::string& text);
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// mean [I x (T+Tf+1) x d] of predicted trajectories against truth of the same
/// shape: reconstruction error over the first T+1 rows, forecast error per lead.
EvalReport evaluate(const Tensor& mean, const Tensor& truth, std::size_t horizon, std::size_t tf);

double median(std::vector<double> values);

}  // namespace roadenkf::metrics
