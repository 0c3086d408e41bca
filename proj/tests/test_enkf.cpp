#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "linear_model.hpp"
#include "oracles/dense_linalg.hpp"
#include "oracles/kalman.hpp"
#include "roadenkf/enkf.hpp"
#include "roadenkf/error.hpp"
#include "test_support.hpp"

using namespace roadenkf;
using namespace roadenkf::ad;
using namespace roadenkf::enkf;
using testing_support::random_tensor;

namespace {

double max_rel(const Tensor& a, const Tensor& b) {
  return max_abs_diff(a, b) / std::max(1e-300, max_abs(b));
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  const std::size_t c = t.shape()[1];
  Tensor out(t.shape());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = t[perm[i] * c + j];
  return out;
}

}  // namespace

// ---------------------------------------------------------------- observation operator

TEST(ObservationOp, SelectionPicksRowsPerTime) {
  auto obs = ObservationOp::selection(4, {{0, 2}, {3, 1}}, 0.5);
  EXPECT_EQ(obs.obs_dim(), 2u);
  Tensor u = Tensor::vector({10, 11, 12, 13});
  EXPECT_EQ(obs.observe(1, u)[1], 12.0);
  EXPECT_EQ(obs.observe(2, u)[0], 13.0);
  Var hz = obs.apply(2, Var(Tensor::matrix(1, 4, {10, 11, 12, 13})), Var());
  EXPECT_EQ(hz.value()[0], 13.0);
  EXPECT_EQ(hz.value()[1], 11.0);
  EXPECT_NEAR(obs.logdet_r(), 2.0 * std::log(0.5), 1e-15);
  EXPECT_THROW(obs.rows(3), RangeError);
}

TEST(ObservationOp, RejectsRepeatedRowsAndBadNoise) {
  EXPECT_THROW(ObservationOp::selection(4, {{1, 1}}, 0.1), ConfigError);
  EXPECT_THROW(ObservationOp::selection(4, {{0, 4}}, 0.1), ConfigError);
  EXPECT_THROW(ObservationOp::identity(3, 0.0), ConfigError);
  EXPECT_THROW(ObservationOp::selection(4, {{0, 1}, {2}}, 0.1), ConfigError);
}

TEST(ObservationOp, AugmentationAppendsLatentBlock) {
  auto obs = augment_observations(ObservationOp::identity(5, 0.01), 2.0, 3);
  EXPECT_EQ(obs.dim(), 8u);
  EXPECT_EQ(obs.obs_dim(), 5u);
  EXPECT_DOUBLE_EQ(obs.r_diag()[7], 4.0);
  EXPECT_DOUBLE_EQ(obs.r_inv()[0], 100.0);
  Tensor y = obs.target(Tensor::vector({1, 2, 3, 4, 5}));
  EXPECT_EQ(y.numel(), 8u);
  EXPECT_EQ(y[7], 0.0);
  Var hz = obs.apply(1, Var(Tensor({2, 5})), Var(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6})));
  EXPECT_EQ(hz.shape(), (Shape{2, 8}));
  EXPECT_EQ(hz.value().at(1, 7), 6.0);
  EXPECT_THROW(augment_observations(ObservationOp::identity(2, 1.0), 0.0, 1), ConfigError);
}

// ---------------------------------------------------------------- moments

TEST(Moments, ZeroSpreadGivesZeroCovariances) {
  Tensor z = Tensor::matrix(3, 2, {1, 2, 1, 2, 1, 2});
  Tensor h = Tensor::matrix(3, 1, {5, 5, 5});
  Moments m = ensemble_moments(Var(h), Var(z));
  EXPECT_EQ(max_abs(m.c_zy.value()), 0.0);
  EXPECT_EQ(max_abs(m.y.value()), 0.0);
  EXPECT_EQ(m.mean_z.value()[1], 2.0);
}

TEST(Moments, TwoPointFormula) {
  Moments m = ensemble_moments(Var(Tensor::matrix(2, 1, {0, 4})), Var(Tensor::matrix(2, 1, {0, 2})));
  EXPECT_NEAR(m.c_zy.value()[0], 4.0, 1e-15);
  const double y0 = m.y.value()[0], y1 = m.y.value()[1];
  EXPECT_NEAR(y0 * y0 + y1 * y1, 8.0, 1e-14);
}

TEST(Moments, ScaledDeviationsReproduceSampleCovariance) {
  std::mt19937_64 gen(3);
  const std::size_t n = 7, dz = 3, dy = 5;
  Tensor z = random_tensor({n, dz}, gen), h = random_tensor({n, dy}, gen);
  Moments m = ensemble_moments(Var(h), Var(z));
  // direct sample covariances
  std::vector<double> hb(dy, 0.0), zb(dz, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < dy; ++i) hb[i] += h.at(k, i) / n;
    for (std::size_t i = 0; i < dz; ++i) zb[i] += z.at(k, i) / n;
  }
  const Tensor& y = m.y.value();
  for (std::size_t i = 0; i < dy; ++i) {
    for (std::size_t j = 0; j < dy; ++j) {
      double c = 0.0, yy = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        c += (h.at(k, i) - hb[i]) * (h.at(k, j) - hb[j]) / (n - 1);
        yy += y.at(i, k) * y.at(j, k);
      }
      EXPECT_NEAR(yy, c, 1e-12);
    }
    for (std::size_t a = 0; a < dz; ++a) {
      double c = 0.0;
      for (std::size_t k = 0; k < n; ++k) c += (z.at(k, a) - zb[a]) * (h.at(k, i) - hb[i]) / (n - 1);
      EXPECT_NEAR(m.c_zy.value().at(a, i), c, 1e-12);
    }
  }
}

TEST(Moments, SingleParticleIsDegenerate) {
  EXPECT_THROW(ensemble_moments(Var(Tensor({1, 2})), Var(Tensor({1, 2}))), DegenerateEnsembleError);
}

// ---------------------------------------------------------------- analysis

TEST(Analysis, ZeroSpreadLeavesParticles) {
  Tensor z = Tensor::matrix(3, 2, {1, 2, 1, 2, 1, 2});
  Tensor h = Tensor::matrix(3, 2, {5, 6, 5, 6, 5, 6});
  auto obs = ObservationOp::identity(2, 0.3);
  RngStream s1(4), s2(4);
  EXPECT_TRUE(bit_equal(analysis_step(Var(z), Var(h), Tensor::vector({0, 0}), obs, s1).value(), z));
  EXPECT_TRUE(bit_equal(analysis_step_naive(Var(z), Var(h), Tensor::vector({0, 0}), obs, s2).value(), z));
}

TEST(Analysis, HugeNoiseLeavesParticles) {
  std::mt19937_64 gen(5);
  Tensor z = random_tensor({6, 2}, gen), h = random_tensor({6, 3}, gen);
  auto obs = ObservationOp::identity(3, 1e16);
  RngStream s(6);
  Tensor out = analysis_step(Var(z), Var(h), Tensor::vector({1, 2, 3}), obs, s).value();
  EXPECT_LT(max_rel(out, z), 1e-6);
}

TEST(Analysis, ScalarCaseMatchesDirectGain) {
  const std::vector<double> z{0.3, -1.2, 2.0}, hz{1.0, -0.5, 3.5}, eta{0.1, -0.2, 0.05};
  const double r = 0.4, y = 1.7;
  double zb = 0, hb = 0;
  for (int k = 0; k < 3; ++k) zb += z[k] / 3, hb += hz[k] / 3;
  double czy = 0, cyy = 0;
  for (int k = 0; k < 3; ++k) {
    czy += (z[k] - zb) * (hz[k] - hb) / 2;
    cyy += (hz[k] - hb) * (hz[k] - hb) / 2;
  }
  const double gain = czy / (cyy + r);
  Tensor out = analysis_update(Var(Tensor({3, 1}, z)), Var(Tensor({3, 1}, hz)), Tensor::vector({y}),
                               Tensor({3, 1}, eta), {1.0 / r})
                   .value();
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(out[k], z[k] + gain * (y + eta[k] - hz[k]), 1e-12);
}

TEST(Analysis, WoodburyMatchesDenseGain) {
  std::mt19937_64 gen(7);
  for (std::size_t dy : {8, 64})
    for (std::size_t n : {4, 32})
      for (double r : {0.01, 1.0}) {
        Tensor z = random_tensor({n, 3}, gen), h = random_tensor({n, dy}, gen);
        Tensor y = random_tensor({dy}, gen);
        auto obs = ObservationOp::identity(dy, r);
        RngStream s1(dy * 100 + n), s2(dy * 100 + n);
        Tensor a = analysis_step(Var(z), Var(h), y, obs, s1).value();
        Tensor b = analysis_step_naive(Var(z), Var(h), y, obs, s2).value();
        EXPECT_LT(max_rel(a, b), 1e-8) << "dy=" << dy << " n=" << n << " r=" << r;
      }
}

TEST(Analysis, EquivariantUnderParticlePermutation) {
  std::mt19937_64 gen(8);
  const std::size_t n = 9, dy = 4;
  Tensor z = random_tensor({n, 2}, gen), h = random_tensor({n, dy}, gen), eta = random_tensor({n, dy}, gen);
  Tensor y = random_tensor({dy}, gen);
  std::vector<double> rinv(dy, 2.0);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  Tensor a = analysis_update(Var(z), Var(h), y, eta, rinv).value();
  Tensor b = analysis_update(Var(permute_rows(z, perm)), Var(permute_rows(h, perm)), y, permute_rows(eta, perm), rinv)
                 .value();
  EXPECT_LT(max_abs_diff(b, permute_rows(a, perm)), 1e-12);
}

// ---------------------------------------------------------------- log-likelihood

TEST(Loglik, StandardNormalAtMode) {
  auto obs = ObservationOp::identity(3, 1.0);
  Var hbar(Tensor::vector({0.5, -1, 2}));
  Var inc = loglik_increment(hbar, Var(Tensor({3, 4})), hbar.value(), obs);
  EXPECT_NEAR(inc.value().item(), -1.5 * std::log(2 * std::numbers::pi), 1e-14);
}

TEST(Loglik, ScalarDensity) {
  const double r = 0.3, y = 0.9;
  auto obs = ObservationOp::identity(1, r);
  Moments m = ensemble_moments(Var(Tensor::matrix(2, 1, {1, -1})), Var(Tensor::matrix(2, 1, {0, 1})));
  Var inc = loglik_increment(m.mean_h, m.y, Tensor::vector({y}), obs);
  const double var = 2.0 + r;
  EXPECT_NEAR(inc.value().item(), -0.5 * std::log(2 * std::numbers::pi * var) - y * y / (2 * var), 1e-12);
}

TEST(Loglik, WoodburyMatchesDenseDensity) {
  std::mt19937_64 gen(9);
  for (std::size_t dy : {8, 64})
    for (std::size_t n : {4, 32})
      for (double r : {0.01, 1.0}) {
        Tensor h = random_tensor({n, dy}, gen);
        Tensor y = random_tensor({dy}, gen);
        auto obs = ObservationOp::identity(dy, r);
        Moments m = ensemble_moments(Var(h), Var(random_tensor({n, 2}, gen)));
        const double a = loglik_increment(m.mean_h, m.y, y, obs).value().item();
        const double b = loglik_increment_naive(m.mean_h, m.y, y, obs).value().item();
        EXPECT_NEAR(a, b, 1e-10 * std::max(1.0, std::abs(b)));
        // independent dense evaluation
        oracle::Matrix c = oracle::multiply(oracle::from_flat(m.y.value().raw(), dy, n),
                                            oracle::transpose(oracle::from_flat(m.y.value().raw(), dy, n)));
        for (std::size_t i = 0; i < dy; ++i) c[i][i] += r;
        const oracle::Matrix ci = oracle::inverse(c);
        double quad = 0;
        for (std::size_t i = 0; i < dy; ++i)
          for (std::size_t j = 0; j < dy; ++j)
            quad += (y[i] - m.mean_h.value()[i]) * ci[i][j] * (y[j] - m.mean_h.value()[j]);
        const double ref = -0.5 * (dy * std::log(2 * std::numbers::pi) + oracle::log_abs_det(c) + quad);
        EXPECT_NEAR(a, ref, 1e-10 * std::max(1.0, std::abs(ref)));
      }
}

TEST(Loglik, InvariantUnderParticlePermutation) {
  std::mt19937_64 gen(10);
  const std::size_t n = 11, dy = 6;
  Tensor h = random_tensor({n, dy}, gen), z = random_tensor({n, 2}, gen), y = random_tensor({dy}, gen);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  auto obs = ObservationOp::identity(dy, 0.2);
  Moments a = ensemble_moments(Var(h), Var(z));
  Moments b = ensemble_moments(Var(permute_rows(h, perm)), Var(permute_rows(z, perm)));
  EXPECT_NEAR(loglik_increment(a.mean_h, a.y, y, obs).value().item(),
              loglik_increment(b.mean_h, b.y, y, obs).value().item(), 1e-12);
}

// ---------------------------------------------------------------- augmentation limits

TEST(Augmentation, WideLatentPriorRecoversPlainUpdate) {
  std::mt19937_64 gen(11);
  const std::size_t n = 8, dz = 2, dy = 4;
  Tensor z = random_tensor({n, dz}, gen), h = random_tensor({n, dy}, gen), y = random_tensor({dy}, gen);
  Tensor eta = random_tensor({n, dy}, gen, Kind::real, -0.1, 0.1);
  Tensor xi = random_tensor({n, dz}, gen);
  const double sigma = 1e6;
  auto plain = ObservationOp::identity(dy, 0.1);
  auto aug = augment_observations(plain, sigma, dz);
  Tensor eta_aug({n, dy + dz});
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < dy; ++i) eta_aug.at(k, i) = eta.at(k, i);
    for (std::size_t i = 0; i < dz; ++i) eta_aug.at(k, dy + i) = sigma * xi.at(k, i);
  }
  Tensor a = analysis_update(Var(z), Var(h), y, eta, plain.r_inv()).value();
  Var hz_aug = aug.apply(1, Var(h), Var(z));
  Tensor b = analysis_update(Var(z), hz_aug, aug.target(y), eta_aug, aug.r_inv()).value();
  EXPECT_LT(max_abs_diff(a, b), 1e-5);
}

TEST(Augmentation, TightLatentPriorPullsMeanToOrigin) {
  // linear decoder u = M z observed fully
  const std::size_t n = 20, dz = 2, du = 3;
  RngStream s(12);
  Tensor z({n, dz});
  for (std::size_t k = 0; k < n; ++k) {
    z.at(k, 0) = 3.0 + 0.5 * s.normal();
    z.at(k, 1) = -2.0 + 0.5 * s.normal();
  }
  Tensor mt = Tensor::matrix(dz, du, {1, 0.5, -1, 0.2, 1, 0.3});
  Var u = matmul(Var(z), Var(mt));
  auto aug = augment_observations(ObservationOp::identity(du, 0.1), 1e-4, dz);
  Var hz = aug.apply(1, u, Var(z));
  Tensor out = analysis_step(Var(z), hz, aug.target(Tensor::vector({2.0, 1.0, -3.0})), aug, s).value();
  auto mean_norm = [&](const Tensor& t) {
    double a = 0, b = 0;
    for (std::size_t k = 0; k < n; ++k) a += t.at(k, 0) / n, b += t.at(k, 1) / n;
    return std::hypot(a, b);
  };
  EXPECT_LE(mean_norm(out), 1e-2 * mean_norm(z));
}

// ---------------------------------------------------------------- filter

TEST(Filter, EmptyHorizon) {
  auto ssm = testing_support::rotation_ssm();
  RngStream s(13);
  auto res = run_filter(ssm.as_filter_model(), ObservationOp::identity(2, ssm.r), Tensor(), 10, s, Mode::test);
  EXPECT_EQ(res.loglik.value().item(), 0.0);
  ASSERT_EQ(res.particles.size(), 1u);
  RngStream s2(13);
  EXPECT_TRUE(bit_equal(res.particles[0].value(), ssm.as_filter_model().initial(10, s2)));
}

TEST(Filter, LoglikIsSumOfIncrements) {
  auto ssm = testing_support::rotation_ssm();
  RngStream data(14), s(15);
  Tensor y = testing_support::simulate(ssm, 12, data);
  auto res = run_filter(ssm.as_filter_model(), ObservationOp::identity(2, ssm.r), y, 30, s, Mode::test);
  ASSERT_EQ(res.increments.size(), 12u);
  double total = res.increments[0].value().item();
  for (std::size_t t = 1; t < res.increments.size(); ++t) total += res.increments[t].value().item();
  EXPECT_EQ(total, res.loglik.value().item());
  EXPECT_EQ(res.particles.size(), 13u);
}

TEST(Filter, LargeEnsembleMatchesExactKalmanLikelihood) {
  auto ssm = testing_support::rotation_ssm();
  double rel = 0.0;
  const int seeds = 10;
  for (int k = 0; k < seeds; ++k) {
    RngStream data(100 + k), s(200 + k);
    Tensor y = testing_support::simulate(ssm, 20, data);
    const double exact = oracle::kalman_filter(ssm.as_oracle(), testing_support::rows(y)).loglik;
    auto res = run_filter(ssm.as_filter_model(), ObservationOp::identity(2, ssm.r), y, 5000, s, Mode::test,
                          {.keep_particles = false});
    rel += std::abs(res.loglik.value().item() - exact) / std::abs(exact);
  }
  EXPECT_LT(rel / seeds, 0.02);
}

TEST(Filter, FilteredMeanApproachesKalmanMean) {
  auto ssm = testing_support::rotation_ssm();
  RngStream data(16);
  Tensor y = testing_support::simulate(ssm, 20, data);
  const auto exact = oracle::kalman_filter(ssm.as_oracle(), testing_support::rows(y));
  // average error over steps and seeds at two ensemble sizes
  auto mean_error = [&](std::size_t n) {
    double err = 0.0;
    for (int k = 0; k < 8; ++k) {
      RngStream s(300 + k);
      auto res = run_filter(ssm.as_filter_model(), ObservationOp::identity(2, ssm.r), y, n, s, Mode::test);
      for (std::size_t t = 1; t <= 20; ++t) {
        const Tensor& z = res.particles[t].value();
        for (std::size_t i = 0; i < 2; ++i) {
          double m = 0.0;
          for (std::size_t p = 0; p < n; ++p) m += z.at(p, i) / n;
          err += std::pow(m - exact.means[t - 1][i], 2);
        }
      }
    }
    return std::sqrt(err / (8 * 20 * 2));
  };
  const double e1 = mean_error(250), e4 = mean_error(1000);
  EXPECT_LT(e4, 0.05);
  // Monte-Carlo rate: quadrupling N roughly halves the error
  EXPECT_GT(e1 / e4, 1.4);
  EXPECT_LT(e1 / e4, 2.9);
}

TEST(Filter, LoglikInvariantUnderInitialPermutation) {
  auto ssm = testing_support::rotation_ssm();
  RngStream data(17);
  Tensor y = testing_support::simulate(ssm, 1, data);
  auto model = ssm.as_filter_model();
  // a noise-free transition keeps the step's moments symmetric in particle order
  model.transition = [](const Var& z, RngStream&) { return z; };
  RngStream s0(18);
  Tensor z0 = model.initial(12, s0);
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(19);
  std::shuffle(perm.begin(), perm.end(), gen);
  auto obs = ObservationOp::identity(2, ssm.r);
  RngStream s1(20), s2(20);
  auto a = run_filter(model, obs, y, 12, s1, Mode::test, {.initial = z0});
  auto b = run_filter(model, obs, y, 12, s2, Mode::test, {.initial = permute_rows(z0, perm)});
  EXPECT_NEAR(a.loglik.value().item(), b.loglik.value().item(), 1e-12);
}

TEST(Filter, ModeChecksObservationAugmentation) {
  auto ssm = testing_support::rotation_ssm();
  auto obs = ObservationOp::identity(2, ssm.r);
  RngStream s(21);
  Tensor y({1, 2});
  EXPECT_THROW(run_filter(ssm.as_filter_model(), obs, y, 5, s, Mode::train), ContractError);
  EXPECT_THROW(run_filter(ssm.as_filter_model(), augment_observations(obs, 1.0, 2), y, 5, s, Mode::test),
               ContractError);
}

TEST(Filter, DivergenceCarriesTimeIndex) {
  auto ssm = testing_support::rotation_ssm();
  auto model = ssm.as_filter_model();
  model.transition = [](const Var& z, RngStream&) {
    return z.value()[0] > 1e300 ? z : scale(z, 1e200);
  };
  RngStream data(22), s(23);
  Tensor y = testing_support::simulate(ssm, 6, data);
  try {
    run_filter(model, ObservationOp::identity(2, ssm.r), y, 8, s, Mode::test, {.t_begin = 4});
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 4u);
    EXPECT_LE(e.step(), 9u);
  }
}
