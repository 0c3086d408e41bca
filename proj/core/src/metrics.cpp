#include "roadenkf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "roadenkf/error.hpp"

namespace roadenkf::metrics {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

// Sum of squared differences of rows [from, to) of mean and truth, both [I x S x d].
double squared_error(const Tensor& mean, const Tensor& truth, std::size_t from, std::size_t to) {
  const std::size_t inst = mean.shape()[0], steps = mean.shape()[1], d = mean.shape()[2];
  double s = 0.0;
  for (std::size_t i = 0; i < inst; ++i) {
    for (std::size_t t = from; t < to; ++t) {
      const double* m = mean.raw() + (i * steps + t) * d;
      const double* u = truth.raw() + (i * steps + t) * d;
      for (std::size_t k = 0; k < d; ++k) s += (m[k] - u[k]) * (m[k] - u[k]);
    }
  }
  return s;
}

double json_number(const nlohmann::json& v) {
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_unquote(const std::string& s) {
  if (s.size() < 2 || s.front() != '"' || s.back() != '"') return s;
  std::string out;
  for (std::size_t k = 1; k + 1 < s.size(); ++k) {
    out += s[k];
    if (s[k] == '"') ++k;
  }
  return out;
}

}  // namespace

std::size_t burn_in(std::size_t horizon) { return horizon / 5; }

Tensor particle_mean(const Tensor& particles) {
  require(particles.shape().size() == 4, "particles must be [I x S x N x d], got " + ad::shape_str(particles.shape()));
  const std::size_t inst = particles.shape()[0], steps = particles.shape()[1], n = particles.shape()[2],
                    d = particles.shape()[3];
  require(n > 0, "particle axis is empty");
  Tensor out({inst, steps, d});
  for (std::size_t r = 0; r < inst * steps; ++r) {
    double* o = out.raw() + r * d;
    for (std::size_t p = 0; p < n; ++p) {
      const double* x = particles.raw() + (r * n + p) * d;
      for (std::size_t k = 0; k < d; ++k) o[k] += x[k];
    }
    for (std::size_t k = 0; k < d; ++k) o[k] /= static_cast<double>(n);
  }
  return out;
}

double rmse_reconstruction_mean(const Tensor& mean, const Tensor& truth) {
  require(mean.shape().size() == 3 && mean.shape() == truth.shape(),
          "reconstruction mean " + ad::shape_str(mean.shape()) + " vs truth " + ad::shape_str(truth.shape()));
  require(mean.shape()[1] >= 2, "reconstruction needs T >= 1");
  const std::size_t horizon = mean.shape()[1] - 1, tb = burn_in(horizon);
  const double count = static_cast<double>(mean.shape()[0] * (horizon - tb + 1) * mean.shape()[2]);
  return std::sqrt(squared_error(mean, truth, tb, horizon + 1) / count);
}

double rmse_reconstruction(const Tensor& particles, const Tensor& truth) {
  require(particles.shape().size() == 4, "particles must be [I x (T+1) x N x d]");
  return rmse_reconstruction_mean(particle_mean(particles), truth);
}

double rmse_forecast_mean(const Tensor& mean, const Tensor& truth, std::size_t lead, std::size_t tf) {
  if (lead < 1 || lead > tf)
    throw RangeError("forecast lead " + std::to_string(lead) + " outside [1, " + std::to_string(tf) + "]");
  require(mean.shape().size() == 2 && mean.shape() == truth.shape(),
          "forecast mean " + ad::shape_str(mean.shape()) + " vs truth " + ad::shape_str(truth.shape()));
  const std::size_t inst = mean.shape()[0], d = mean.shape()[1];
  const Tensor m3({inst, 1, d}, {mean.data().begin(), mean.data().end()});
  const Tensor u3({inst, 1, d}, {truth.data().begin(), truth.data().end()});
  return std::sqrt(squared_error(m3, u3, 0, 1) / static_cast<double>(inst * d));
}

double rmse_forecast(const Tensor& particles, const Tensor& truth, std::size_t lead, std::size_t tf) {
  require(particles.shape().size() == 3, "forecast particles must be [I x N x d]");
  const auto& s = particles.shape();
  const Tensor p4({s[0], 1, s[1], s[2]}, {particles.data().begin(), particles.data().end()});
  const Tensor m = particle_mean(p4);
  return rmse_forecast_mean(Tensor({s[0], s[2]}, {m.data().begin(), m.data().end()}), truth, lead, tf);
}

EvalReport evaluate(const Tensor& mean, const Tensor& truth, std::size_t horizon, std::size_t tf) {
  require(mean.shape().size() == 3 && mean.shape() == truth.shape(), "prediction " + ad::shape_str(mean.shape()) +
                                                                         " vs truth " + ad::shape_str(truth.shape()));
  require(mean.shape()[1] == horizon + tf + 1, "prediction has " + std::to_string(mean.shape()[1]) +
                                                   " steps, expected T + Tf + 1 = " +
                                                   std::to_string(horizon + tf + 1));
  const std::size_t inst = mean.shape()[0], steps = mean.shape()[1], d = mean.shape()[2];
  const auto rows = [&](const Tensor& src, std::size_t from, std::size_t count) {
    Tensor out({inst, count, d});
    for (std::size_t i = 0; i < inst; ++i)
      std::copy_n(src.raw() + (i * steps + from) * d, count * d, out.raw() + i * count * d);
    return out;
  };
  EvalReport rep;
  rep.rmse_r = rmse_reconstruction_mean(rows(mean, 0, horizon + 1), rows(truth, 0, horizon + 1));
  for (std::size_t lead = 1; lead <= tf; ++lead) {
    const Tensor m = rows(mean, horizon + lead, 1), u = rows(truth, horizon + lead, 1);
    rep.rmse_f.push_back(rmse_forecast_mean(Tensor({inst, d}, {m.data().begin(), m.data().end()}),
                                            Tensor({inst, d}, {u.data().begin(), u.data().end()}), lead, tf));
  }
  return rep;
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

nlohmann::json EvalReport::to_json() const {
  return {{"rmse_r", rmse_r},
          {"rmse_f", rmse_f},
          {"test_loglik", test_loglik},
          {"train_s_per_epoch", train_s_per_epoch},
          {"test_s", test_s},
          {"config", config}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.rmse_r = json_number(j.at("rmse_r"));
    for (const auto& v : j.at("rmse_f")) r.rmse_f.push_back(json_number(v));
    r.test_loglik = json_number(j.at("test_loglik"));
    r.train_s_per_epoch = json_number(j.at("train_s_per_epoch"));
    r.test_s = json_number(j.at("test_s"));
    r.config = j.value("config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "field,value\n";
  const auto row = [&](const std::string& k, const nlohmann::json& v) { os << k << ',' << csv_field(v.dump()) << '\n'; };
  row("rmse_r", rmse_r);
  for (std::size_t l = 0; l < rmse_f.size(); ++l) row("rmse_f." + std::to_string(l + 1), rmse_f[l]);
  row("test_loglik", test_loglik);
  row("train_s_per_epoch", train_s_per_epoch);
  row("test_s", test_s);
  for (const auto& [k, v] : config.items()) row("config." + k, v);
  return os.str();
}

EvalReport EvalReport::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "field,value") throw ConfigError("report CSV lacks the field,value header");
  nlohmann::json j{{"rmse_f", nlohmann::json::array()}, {"config", nlohmann::json::object()}};
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError("report CSV row without a value: " + line);
    const std::string key = line.substr(0, comma);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(csv_unquote(line.substr(comma + 1)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("report CSV value for " + key + ": " + e.what());
    }
    if (key.rfind("rmse_f.", 0) == 0) {
      const std::size_t lead = std::stoul(key.substr(7));
      if (lead != j["rmse_f"].size() + 1) throw ConfigError("report CSV forecast leads out of order");
      j["rmse_f"].push_back(value);
    } else if (key.rfind("config.", 0) == 0) {
      j["config"][key.substr(7)] = value;
    } else {
      j[key] = value;
    }
  }
  return from_json(j);
}

}  // namespace roadenkf::metrics
