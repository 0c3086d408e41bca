#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oracles/dense_dft.hpp"
#include "oracles/dense_linalg.hpp"
#include "roadenkf/error.hpp"
#include "roadenkf/grad_check.hpp"
#include "roadenkf/ops.hpp"
#include "roadenkf/rng.hpp"
#include "test_support.hpp"

using namespace roadenkf;
using namespace roadenkf::ad;
using testing_support::dot;
using testing_support::random_spd;
using testing_support::random_tensor;

namespace {

// Fixed random weighting turns any tensor output into a scalar test loss.
Var weighted_sum(const Var& y, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Var real = y.kind() == Kind::complex ? as_real(y) : y;
  return sum(mul(real, Var(random_tensor(real.shape(), gen))));
}

// <J u, v> = <u, J^T v> for an op linear in its argument.
void expect_adjoint_consistent(const std::function<Var(const Var&)>& f, const Tensor& u, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Var ju = f(Var(u));
  Tensor v = random_tensor(ju.shape(), gen, ju.kind());
  Tape tape;
  Var x = tape.leaf(Tensor(u.shape(), u.kind()));
  Var y = f(x);
  Var yr = y.kind() == Kind::complex ? as_real(y) : y;
  Tensor vr(yr.shape(), std::vector<double>(v.data().begin(), v.data().end()));
  tape.backward(sum(mul(yr, Var(vr))));
  const Tensor jtv = tape.grad_or_zeros(x);
  const double lhs = dot(ju.value(), v);
  const double rhs = dot(u, jtv);
  EXPECT_NEAR(lhs, rhs, 1e-8 * std::max(1.0, std::abs(lhs)));
}

}  // namespace

// ---------------------------------------------------------------- tensors

TEST(Tensor, ComplexBufferHoldsTwoDoublesPerEntry) {
  Tensor t({2, 3}, Kind::complex);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.size(), 12u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), DimensionError);
}

TEST(Tensor, ReshapeKeepsBuffer) {
  Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.at(2, 1), 6.0);
  EXPECT_THROW(t.reshaped({4}), DimensionError);
}

// ---------------------------------------------------------------- rng

TEST(Rng, PhiloxKnownAnswers) {
  // Reference vectors published with the Random123 library.
  auto a = philox4x32({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(a[0], 0x6627e8d5u);
  EXPECT_EQ(a[1], 0xe169c58du);
  EXPECT_EQ(a[2], 0xbc57ac4cu);
  EXPECT_EQ(a[3], 0x9b00dbd8u);
  auto b = philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(b[0], 0x408f276du);
  EXPECT_EQ(b[1], 0x41c83b0eu);
  EXPECT_EQ(b[2], 0xa20bc7c6u);
  EXPECT_EQ(b[3], 0x6d5451fdu);
  auto c = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(c[0], 0xd16cfe09u);
  EXPECT_EQ(c[1], 0x94fdccebu);
  EXPECT_EQ(c[2], 0x5001e420u);
  EXPECT_EQ(c[3], 0x24126ea1u);
}

TEST(Rng, SameKeyAndCounterGiveSameDraws) {
  RngStream a(42, {7, 0});
  RngStream b(42, {7, 0});
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(a.counter(), b.counter());
}

TEST(Rng, CounterAdvancesOncePerBlock) {
  RngStream s(1);
  std::vector<double> v(5);
  s.fill_normal(v);
  EXPECT_EQ(s.counter().lo, 3u);
}

TEST(Rng, ChildStreamsDifferFromParentAndEachOther) {
  RngStream parent(9);
  RngStream c0 = parent.split(0);
  RngStream c1 = parent.split(1);
  EXPECT_NE(c0.key(), parent.key());
  EXPECT_NE(c0.key(), c1.key());
  EXPECT_NE(c0.next_u64(), c1.next_u64());
}

TEST(Rng, UniformIndexStaysInRange) {
  RngStream s(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto k = s.uniform_index(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_GT(c, 800);
}

// ---------------------------------------------------------------- matmul

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor x = Tensor::matrix(2, 2, {1.5, -2, 3, 0.25});
  Var y = matmul(Var(Tensor::identity(2)), Var(x));
  EXPECT_TRUE(bit_equal(y.value(), x));
}

TEST(Matmul, DirectEvaluation) {
  Var y = matmul(Var(Tensor::matrix(2, 2, {1, 2, 3, 4})), Var(Tensor::matrix(2, 1, {1, 1})));
  EXPECT_EQ(y.value()[0], 3.0);
  EXPECT_EQ(y.value()[1], 7.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Var(Tensor({2, 3})), Var(Tensor({2, 3}))), DimensionError);
  EXPECT_THROW(matmul(Var(Tensor({2, 2})), Var(Tensor({2, 2}, Kind::complex))), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(1);
  Tensor b = random_tensor({3, 3}, gen);
  auto r = grad_check([&](Tape&, const Var& a) { return sum(matmul(a, Var(b))); }, random_tensor({3, 3}, gen));
  EXPECT_LT(r.max_rel_error, 1e-6);
  auto r2 = grad_check([&](Tape&, const Var& x) { return weighted_sum(matmul(Var(b), x), 5); },
                       random_tensor({3, 3}, gen));
  EXPECT_LT(r2.max_rel_error, 1e-6);
}

TEST(Matmul, ComplexGradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(2);
  Tensor a = random_tensor({2, 3}, gen, Kind::complex);
  Tensor b = random_tensor({3, 2}, gen, Kind::complex);
  auto left = grad_check(
      [&](Tape&, const Var& x) { return weighted_sum(matmul(as_complex(x), Var(b)), 11); },
      Tensor({2, 3, 2}, std::vector<double>(a.data().begin(), a.data().end())));
  EXPECT_LT(left.max_rel_error, 1e-6);
  auto right = grad_check([&](Tape&, const Var& x) { return weighted_sum(matmul(Var(a), as_complex(x)), 12); },
                          Tensor({3, 2, 2}, std::vector<double>(b.data().begin(), b.data().end())));
  EXPECT_LT(right.max_rel_error, 1e-6);
}

TEST(Matmul, AdjointConsistency) {
  std::mt19937_64 gen(3);
  Tensor b = random_tensor({4, 5}, gen);
  expect_adjoint_consistent([&](const Var& x) { return matmul(x, Var(b)); }, random_tensor({3, 4}, gen), 31);
  expect_adjoint_consistent([&](const Var& x) { return transpose(x); }, random_tensor({3, 4}, gen), 32);
  Tensor cb = random_tensor({4, 2}, gen, Kind::complex);
  expect_adjoint_consistent([&](const Var& x) { return matmul(x, Var(cb)); },
                            random_tensor({3, 4}, gen, Kind::complex), 33);
}

// ---------------------------------------------------------------- elementwise

TEST(Elementwise, ReluDefinition) {
  Var y = relu(Var(Tensor::vector({-1, 0, 2})));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 0.0);
  EXPECT_EQ(y.value()[2], 2.0);
}

TEST(Elementwise, ReluGradientAtZeroIsZero) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({-1, 0, 2}));
  tape.backward(sum(relu(x)));
  const Tensor& g = *tape.grad(x);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 1.0);
}

TEST(Elementwise, SoftplusAtZeroIsLn2) {
  EXPECT_DOUBLE_EQ(softplus(Var(Tensor::scalar(0.0))).value().item(), std::numbers::ln2);
  // large arguments must not overflow
  EXPECT_DOUBLE_EQ(softplus(Var(Tensor::scalar(800.0))).value().item(), 800.0);
}

TEST(Elementwise, MeanMatchesBruteForceSum) {
  std::mt19937_64 gen(4);
  Tensor x = random_tensor({100}, gen);
  long double s = 0.0L;
  for (std::size_t i = 0; i < 100; ++i) s += x[i];
  EXPECT_NEAR(mean(Var(x)).value().item(), static_cast<double>(s / 100.0L), 1e-12);
}

TEST(Elementwise, DomainErrorsCarryIndex) {
  try {
    (void)log(Var(Tensor::vector({1.0, 2.0, -3.0})));
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  try {
    (void)ad::exp(Var(Tensor::vector({1.0, 1000.0})));
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(Elementwise, BroadcastRules) {
  Var a(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var row(Tensor::vector({10, 20, 30}));
  Var y = add(a, row);
  EXPECT_EQ(y.value().at(1, 2), 36.0);
  EXPECT_EQ(mul(a, Var(Tensor::scalar(2.0))).value().at(1, 0), 8.0);
  EXPECT_THROW(add(a, Var(Tensor::vector({1, 2}))), DimensionError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 gen(5);
  Tensor row = random_tensor({4}, gen);
  auto r = grad_check(
      [&](Tape&, const Var& x) {
        Var y = softplus(sub(mul(x, Var(row)), Var(row)));
        Var z = ad::exp(scale(y, 0.3)) + ad::log(add(y, Var(Tensor::scalar(1.0))));
        return mean(z) + sum(neg(x));
      },
      random_tensor({3, 4}, gen));
  EXPECT_LT(r.max_rel_error, 1e-7);
  // gradient to the broadcast operand
  Tensor x0 = random_tensor({3, 4}, gen);
  auto rb = grad_check([&](Tape&, const Var& b) { return weighted_sum(mul(Var(x0), b) - b + Var(x0), 6); }, row);
  EXPECT_LT(rb.max_rel_error, 1e-7);
}

TEST(Elementwise, RowReductions) {
  Var a(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var s = sum_rows(a);
  EXPECT_EQ(s.value()[2], 9.0);
  EXPECT_EQ(mean_rows(a).value()[0], 2.5);
  std::mt19937_64 gen(6);
  auto r = grad_check([&](Tape&, const Var& x) { return weighted_sum(mean_rows(x), 7); }, random_tensor({4, 3}, gen));
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(Elementwise, SliceAndConcatGradients) {
  std::mt19937_64 gen(7);
  const std::vector<std::int64_t> cols{2, 0};
  auto r = grad_check(
      [&](Tape&, const Var& x) {
        Var a = reshape(segment(x, 2, {2, 3}), {2, 3});
        Var c = as_real(segment(x, 8, {2, 1}, Kind::complex));
        Var joined = concat_cols(gather_cols(a, cols), reshape(c, {2, 2}));
        return weighted_sum(relu(joined) + joined, 8) + weighted_sum(to_complex(a), 9);
      },
      random_tensor({14}, gen));
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_THROW(segment(Var(Tensor({4})), 2, {3}), DimensionError);
}

TEST(Elementwise, LinearLayer) {
  std::mt19937_64 gen(8);
  Tensor w = random_tensor({3, 4}, gen);
  Tensor b = random_tensor({3}, gen);
  Tensor x = random_tensor({2, 4}, gen);
  Var y = linear(Var(x), Var(w), Var(b));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < 4; ++k) s += x.at(i, k) * w.at(o, k);
      EXPECT_NEAR(y.value().at(i, o), s, 1e-14);
    }
  auto rw = grad_check([&](Tape&, const Var& p) { return weighted_sum(linear(Var(x), p, Var(b)), 1); }, w);
  auto rx = grad_check([&](Tape&, const Var& p) { return weighted_sum(linear(p, Var(w), Var(b)), 2); }, x);
  auto rb = grad_check([&](Tape&, const Var& p) { return weighted_sum(linear(Var(x), Var(w), p), 3); }, b);
  EXPECT_LT(std::max({rw.max_rel_error, rx.max_rel_error, rb.max_rel_error}), 1e-8);
}

// ---------------------------------------------------------------- SPD

TEST(SolveSpd, IdentityAndDiagonal) {
  Tensor b = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  EXPECT_TRUE(bit_equal(solve_spd(Var(Tensor::identity(3)), Var(b)).value(), b));
  Var x = solve_spd(Var(Tensor::matrix(2, 2, {2, 0, 0, 5})), Var(Tensor::vector({4, 10})));
  EXPECT_DOUBLE_EQ(x.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.value()[1], 2.0);
}

TEST(SolveSpd, MatchesExplicitInverseOracle) {
  std::mt19937_64 gen(9);
  for (std::size_t n : {2u, 5u, 16u}) {
    Tensor a = random_spd(n, gen);
    Tensor b = random_tensor({n, 3}, gen);
    Var x = solve_spd(Var(a), Var(b));
    auto inv = oracle::inverse(oracle::from_flat(a.raw(), n, n));
    auto ref = oracle::multiply(inv, oracle::from_flat(b.raw(), n, 3));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_NEAR(x.value().at(i, j), ref[i][j], 1e-9 * std::max(1.0, std::abs(ref[i][j])));
      }
  }
}

TEST(SolveSpd, ResidualAtLargeSize) {
  std::mt19937_64 gen(10);
  const std::size_t n = 512;
  Tensor a = random_spd(n, gen, 1.0);
  Tensor b = random_tensor({n}, gen);
  Var x = solve_spd(Var(a), Var(b));
  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = -b[i];
    for (std::size_t j = 0; j < n; ++j) s += a.at(i, j) * x.value()[j];
    res = std::max(res, std::abs(s));
  }
  EXPECT_LE(res, 1e-9 * max_abs(b));
}

TEST(SolveSpd, NotSpdReportsPivot) {
  Tensor a = Tensor::matrix(3, 3, {4, 0, 0, 0, 1, 2, 0, 2, 1});
  try {
    (void)solve_spd(Var(a), Var(Tensor::vector({1, 1, 1})));
    FAIL() << "expected NotSpdError";
  } catch (const NotSpdError& e) {
    EXPECT_EQ(e.pivot(), 2u);
  }
}

TEST(SolveSpd, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(11);
  Tensor a0 = random_spd(4, gen);
  Tensor b0 = random_tensor({4, 2}, gen);
  auto ra = grad_check([&](Tape&, const Var& a) { return weighted_sum(solve_spd(a, Var(b0)), 1); }, a0);
  auto rb = grad_check([&](Tape&, const Var& b) { return weighted_sum(solve_spd(Var(a0), b), 2); }, b0);
  EXPECT_LT(ra.max_rel_error, 1e-6);
  EXPECT_LT(rb.max_rel_error, 1e-7);
}

TEST(LogdetSpd, ClosedForms) {
  EXPECT_DOUBLE_EQ(logdet_spd(Var(Tensor::identity(4))).value().item(), 0.0);
  EXPECT_NEAR(logdet_spd(Var(Tensor::matrix(2, 2, {2, 0, 0, 3}))).value().item(), std::log(6.0), 1e-15);
}

TEST(LogdetSpd, MatchesEliminationOracle) {
  std::mt19937_64 gen(12);
  for (std::size_t n : {3u, 8u, 16u}) {
    Tensor a = random_spd(n, gen);
    const double ref = oracle::log_abs_det(oracle::from_flat(a.raw(), n, n));
    EXPECT_NEAR(logdet_spd(Var(a)).value().item(), ref, 1e-9 * std::abs(ref));
  }
}

TEST(LogdetSpd, GradientIsInverse) {
  std::mt19937_64 gen(13);
  Tensor a = random_spd(4, gen);
  auto r = grad_check([](Tape&, const Var& x) { return logdet_spd(x); }, a);
  EXPECT_LT(r.max_rel_error, 1e-5);
  auto inv = oracle::inverse(oracle::from_flat(a.raw(), 4, 4));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.ad_grad.at(i, j), inv[i][j], 1e-10);
}

// ---------------------------------------------------------------- DFT

TEST(Dft, ConstantSignalIsDcOnly) {
  Var y = rdft(Var(Tensor::full({8}, 1.5)));
  ASSERT_EQ(y.shape(), Shape{5});
  EXPECT_NEAR(y.value()[0], 12.0, 1e-14);
  for (std::size_t i = 1; i < y.value().size(); ++i) EXPECT_NEAR(y.value()[i], 0.0, 1e-14);
}

TEST(Dft, SingleModeCosine) {
  Tensor v({8});
  for (std::size_t x = 0; x < 8; ++x) v[x] = std::cos(2.0 * std::numbers::pi * static_cast<double>(x) / 8.0);
  Var y = rdft(Var(v));
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_NEAR(y.value()[2 * k], k == 1 ? 4.0 : 0.0, 1e-13);
    EXPECT_NEAR(y.value()[2 * k + 1], 0.0, 1e-13);
  }
}

TEST(Dft, InverseOfDcAndZero) {
  Tensor s({5}, Kind::complex);
  s[0] = 8.0;
  Var u = irdft(Var(s), 8);
  for (double x : u.value().data()) EXPECT_NEAR(x, 1.0, 1e-15);
  Var zero = irdft(Var(Tensor({5}, Kind::complex)), 8);
  for (double x : zero.value().data()) EXPECT_EQ(x, 0.0);
}

TEST(Dft, RoundTrips) {
  std::mt19937_64 gen(14);
  for (std::size_t d : {1u, 2u, 7u, 8u, 32u, 33u}) {
    Tensor v = random_tensor({3, d}, gen);
    Var back = irdft(rdft(Var(v)), d);
    EXPECT_LT(max_abs_diff(back.value(), v), 1e-12) << "d=" << d;

    const std::size_t m = d / 2 + 1;
    Tensor lam = random_tensor({2, m}, gen, Kind::complex);
    for (std::size_t r = 0; r < 2; ++r) {
      lam[r * 2 * m + 1] = 0.0;
      if (d % 2 == 0) lam[r * 2 * m + 2 * (m - 1) + 1] = 0.0;
    }
    Var again = rdft(irdft(Var(lam), d));
    EXPECT_LT(max_abs_diff(again.value(), lam), 1e-12) << "d=" << d;
  }
}

TEST(Dft, MatchesDenseComplexDft) {
  std::mt19937_64 gen(15);
  for (std::size_t d : {6u, 9u}) {
    Tensor v = random_tensor({d}, gen);
    oracle::cvec x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = v[i];
    auto full = oracle::dft(x);
    Var y = rdft(Var(v));
    for (std::size_t k = 0; k <= d / 2; ++k) {
      EXPECT_NEAR(y.value()[2 * k], full[k].real(), 1e-12);
      EXPECT_NEAR(y.value()[2 * k + 1], full[k].imag(), 1e-12);
    }
    // inverse against the Hermitian-extended full inverse
    Tensor lam = random_tensor({d / 2 + 1}, gen, Kind::complex);
    oracle::cvec half(d / 2 + 1);
    for (std::size_t k = 0; k < half.size(); ++k) half[k] = lam.cat(k);
    auto ref = oracle::idft(oracle::hermitian_extend(half, d));
    Var u = irdft(Var(lam), d);
    for (std::size_t i = 0; i < d; ++i) {
      EXPECT_NEAR(u.value()[i], ref[i].real(), 1e-12);
      EXPECT_NEAR(ref[i].imag(), 0.0, 1e-12);
    }
  }
}

TEST(Dft, TruncatesAndPadsSpectrum) {
  std::mt19937_64 gen(16);
  Tensor longer = random_tensor({7}, gen, Kind::complex);
  Tensor trimmed({5}, std::vector<double>(longer.raw(), longer.raw() + 10), Kind::complex);
  EXPECT_LT(max_abs_diff(irdft(Var(longer), 8).value(), irdft(Var(trimmed), 8).value()), 1e-15);
  Tensor shorter = random_tensor({2}, gen, Kind::complex);
  Tensor padded({5}, Kind::complex);
  std::copy_n(shorter.raw(), 4, padded.raw());
  EXPECT_LT(max_abs_diff(irdft(Var(shorter), 8).value(), irdft(Var(padded), 8).value()), 1e-15);
}

TEST(Dft, AdjointConsistencyAndGradients) {
  std::mt19937_64 gen(17);
  for (std::size_t d : {8u, 9u}) {
    expect_adjoint_consistent([](const Var& x) { return rdft(x); }, random_tensor({2, d}, gen), 40 + d);
    expect_adjoint_consistent([d](const Var& x) { return irdft(x, d); }, random_tensor({2, 3}, gen, Kind::complex),
                              50 + d);
    expect_adjoint_consistent([d](const Var& x) { return irdft(x, d); }, random_tensor({2, 7}, gen, Kind::complex),
                              60 + d);
  }
  auto r = grad_check([](Tape&, const Var& x) { return weighted_sum(rdft(irdft(as_complex(x), 8)), 3); },
                      random_tensor({2, 5, 2}, gen));
  EXPECT_LT(r.max_rel_error, 1e-7);
}

// ---------------------------------------------------------------- channel ops

TEST(ChannelOps, SpectralMixIsPerModeMatrixProduct) {
  std::mt19937_64 gen(18);
  Tensor lam = random_tensor({2, 3, 4}, gen, Kind::complex);
  Tensor w = random_tensor({2, 3, 4}, gen, Kind::complex);
  Var out = spectral_mix(Var(lam), Var(w));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        std::complex<double> s = 0.0;
        for (std::size_t j = 0; j < 3; ++j) s += w.cat((i * 3 + j) * 4 + k) * lam.cat((b * 3 + j) * 4 + k);
        EXPECT_NEAR(std::abs(out.value().cat((b * 2 + i) * 4 + k) - s), 0.0, 1e-14);
      }
  expect_adjoint_consistent([&](const Var& x) { return spectral_mix(x, Var(w)); }, lam, 70);
  expect_adjoint_consistent([&](const Var& x) { return spectral_mix(Var(lam), x); }, w, 71);
}

TEST(ChannelOps, ChannelMixGradients) {
  std::mt19937_64 gen(19);
  Tensor v = random_tensor({2, 3, 5}, gen);
  Tensor m = random_tensor({4, 3}, gen);
  Tensor bias = random_tensor({4}, gen);
  auto rv = grad_check([&](Tape&, const Var& x) { return weighted_sum(channel_mix(x, Var(m), Var(bias)), 1); }, v);
  auto rm = grad_check([&](Tape&, const Var& x) { return weighted_sum(channel_mix(Var(v), x, Var(bias)), 2); }, m);
  auto rb = grad_check([&](Tape&, const Var& x) { return weighted_sum(channel_mix(Var(v), Var(m), x), 3); }, bias);
  EXPECT_LT(std::max({rv.max_rel_error, rm.max_rel_error, rb.max_rel_error}), 1e-8);
}

TEST(ChannelOps, LayerNormNormalizesChannels) {
  std::mt19937_64 gen(20);
  Tensor v = random_tensor({2, 5, 3}, gen);
  Var y = layer_norm_channels(Var(v), Var(Tensor::full({5}, 1.0)), Var(Tensor({5})));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 3; ++p) {
      double mu = 0.0, sq = 0.0;
      for (std::size_t c = 0; c < 5; ++c) mu += y.value()[(b * 5 + c) * 3 + p];
      for (std::size_t c = 0; c < 5; ++c) sq += std::pow(y.value()[(b * 5 + c) * 3 + p] - mu / 5, 2);
      EXPECT_NEAR(mu / 5, 0.0, 1e-12);
      EXPECT_NEAR(sq / 5, 1.0, 1e-3);
    }
  Tensor gain = random_tensor({5}, gen);
  Tensor bias = random_tensor({5}, gen);
  auto rv = grad_check(
      [&](Tape&, const Var& x) { return weighted_sum(layer_norm_channels(x, Var(gain), Var(bias)), 4); }, v);
  auto rg = grad_check(
      [&](Tape&, const Var& x) { return weighted_sum(layer_norm_channels(Var(v), x, Var(bias)), 5); }, gain);
  auto rb = grad_check(
      [&](Tape&, const Var& x) { return weighted_sum(layer_norm_channels(Var(v), Var(gain), x), 6); }, bias);
  EXPECT_LT(std::max({rv.max_rel_error, rg.max_rel_error, rb.max_rel_error}), 1e-6);
}

// ---------------------------------------------------------------- reparam

TEST(Reparam, ZeroScaleReturnsMean) {
  RngStream s(1);
  Tensor mu = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_TRUE(bit_equal(gaussian_reparam(Var(mu), Var(Tensor({2})), s).value(), mu));
}

TEST(Reparam, FixedStreamIsBitIdentical) {
  Tensor mu({4, 3});
  RngStream a(77, {5, 0});
  RngStream b(77, {5, 0});
  Var x = gaussian_reparam(Var(mu), Var(Tensor::full({3}, 1.0)), a);
  Var y = gaussian_reparam(Var(mu), Var(Tensor::full({3}, 1.0)), b);
  EXPECT_TRUE(bit_equal(x.value(), y.value()));
}

TEST(Reparam, MonteCarloMoments) {
  RngStream s(2024);
  Var x = gaussian_reparam(Var(Tensor({100000, 1})), Var(Tensor::full({1}, 1.0)), s);
  double m = 0.0, v = 0.0;
  for (double z : x.value().data()) m += z;
  m /= 1e5;
  for (double z : x.value().data()) v += (z - m) * (z - m);
  v /= 1e5 - 1;
  EXPECT_LT(std::abs(m), 0.02);
  EXPECT_LT(std::abs(v - 1.0), 0.02);
}

TEST(Reparam, NegativeScaleRejected) {
  RngStream s(1);
  EXPECT_THROW(gaussian_reparam(Var(Tensor({2})), Var(Tensor::vector({1.0, -0.1})), s), ParameterizationError);
  EXPECT_THROW(gaussian_reparam(Var(Tensor({2})), Var(Tensor::matrix(2, 2, {-1, 0, 0, 1})), s),
               ParameterizationError);
}

TEST(Reparam, LowerTriangularFactor) {
  // same draws through a diagonal vs an equal diagonal matrix factor
  RngStream a(5), b(5);
  Tensor mu = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  Var x = gaussian_reparam(Var(mu), Var(Tensor::vector({0.5, 2.0})), a);
  Var y = gaussian_reparam(Var(mu), Var(Tensor::matrix(2, 2, {0.5, 0, 0, 2.0})), b);
  EXPECT_LT(max_abs_diff(x.value(), y.value()), 1e-15);
}

TEST(Reparam, GradientsFlowToMeanAndScaleOnly) {
  auto f = [](Tape&, const Var& p) {
    RngStream s(99);
    Var mean = segment(p, 0, {2, 3});
    Var scale_vec = segment(p, 6, {3});
    return weighted_sum(gaussian_reparam(mean, scale_vec, s), 1);
  };
  std::mt19937_64 gen(21);
  Tensor p = random_tensor({9}, gen, Kind::real, 0.1, 1.0);
  EXPECT_LT(grad_check(f, p).max_rel_error, 1e-8);
  auto chol = [](Tape&, const Var& p) {
    RngStream s(98);
    return weighted_sum(gaussian_reparam(Var(Tensor({4, 2})), reshape(p, {2, 2}), s), 2);
  };
  EXPECT_LT(grad_check(chol, Tensor::matrix(2, 2, {1.0, 0.0, 0.3, 0.7})).max_rel_error, 1e-8);
}

// ---------------------------------------------------------------- backward

TEST(Backward, IdentityHasUnitGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  tape.backward(x);
  EXPECT_EQ(tape.grad(x)->item(), 1.0);
}

TEST(Backward, QuadraticFormGradientIs2Ax) {
  std::mt19937_64 gen(22);
  Tensor a = random_spd(4, gen);
  Tensor x0 = random_tensor({4, 1}, gen);
  Tape tape;
  Var x = tape.leaf(x0);
  tape.backward(sum(mul(x, matmul(Var(a), x))));
  const Tensor& g = *tape.grad(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double ref = 0.0;
    for (std::size_t j = 0; j < 4; ++j) ref += 2.0 * a.at(i, j) * x0[j];
    EXPECT_NEAR(g[i], ref, 1e-12);
  }
}

TEST(Backward, NonScalarOutputIsContractError) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(relu(x)), ContractError);
}

TEST(Backward, RepeatedSweepsAreIdentical) {
  std::mt19937_64 gen(23);
  Tape tape;
  Var x = tape.leaf(random_tensor({3, 3}, gen));
  Var loss = logdet_spd(add(matmul(x, transpose(x)), Var(Tensor::identity(3))));
  tape.backward(loss);
  Tensor g1 = *tape.grad(x);
  tape.backward(loss);
  EXPECT_TRUE(bit_equal(g1, *tape.grad(x)));
}

TEST(Backward, EveryLeafGetsGradientOfItsShape) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({1, 2}));
  Var unused = tape.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  tape.backward(sum(a));
  EXPECT_EQ(tape.grad_or_zeros(unused).shape(), (Shape{2, 2}));
  EXPECT_EQ(tape.grad(a)->shape(), Shape{2});
}

TEST(Backward, MixingTapesIsRejected) {
  Tape t1, t2;
  Var a = t1.leaf(Tensor::scalar(1.0));
  Var b = t2.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(add(a, b), ContractError);
}

TEST(Backward, ConstantsRecordNothing) {
  Tape tape;
  Var c(Tensor::scalar(2.0));
  Var y = relu(c);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(tape.size(), 0u);
}

// ---------------------------------------------------------------- grad_check

TEST(GradCheck, QuadraticIsExactUpToRoundoff) {
  std::mt19937_64 gen(24);
  Tensor a = random_spd(3, gen);
  auto r = grad_check([&](Tape&, const Var& x) { return sum(mul(x, matmul(Var(a), x))); },
                      random_tensor({3, 1}, gen), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, LogdetAtRandomSpdPoint) {
  std::mt19937_64 gen(25);
  auto r = grad_check([](Tape&, const Var& x) { return logdet_spd(x); }, random_spd(5, gen), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(GradCheck, UnpinnedRandomnessFailsTheCheck) {
  // a stream that keeps advancing between evaluations breaks common random numbers
  auto stream = std::make_shared<RngStream>(5);
  auto r = grad_check(
      [stream](Tape&, const Var& x) { return sum(gaussian_reparam(x, Var(Tensor::full({3}, 1.0)), *stream)); },
      Tensor::vector({0.1, 0.2, 0.3}), 1e-5);
  EXPECT_GT(r.max_rel_error, 1e-2);
}
