#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "softfem/damplab.hpp"

using namespace softfem;
using std::numbers::pi;

namespace {

std::vector<double> real_part(const std::vector<std::complex<double>>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i].real();
  return r;
}

double amplitude_window(const std::vector<Eigen::Vector2d>& x, std::size_t from, std::size_t to) {
  double a = 0.0;
  for (std::size_t i = from; i < to; ++i) a = std::max(a, std::abs(x[i][0]));
  return a;
}

}  // namespace

TEST(ImplicitOscillator, StartsAtOne) {
  const auto x = implicit_oscillator({2 * pi, 0.01, 10});
  EXPECT_EQ(x[0], std::complex<double>(1.0, 0.0));
}

TEST(ImplicitOscillator, ConstantModulusRatio) {
  const double w = 3.0, h = 0.02;
  const auto x = implicit_oscillator({w, h, 200});
  const double expected = 1.0 / std::sqrt(1.0 + w * w * h * h);
  for (std::size_t j = 0; j + 1 < x.size(); ++j) EXPECT_NEAR(std::abs(x[j + 1]) / std::abs(x[j]), expected, 1e-13);
}

TEST(ImplicitOscillator, ClosedFormModulus) {
  const auto x = implicit_oscillator({2 * pi, 0.01, 100});
  const double closed = std::pow(1.0 + std::pow(2 * pi * 0.01, 2), -50.0);
  EXPECT_NEAR(std::abs(x[100]), closed, 1e-12);
}

TEST(ImplicitOscillator, RejectsGain) {
  EXPECT_THROW(implicit_oscillator({1.0, 0.01, 10, 0.5}), InvalidArgument);
  EXPECT_THROW(implicit_oscillator({-1.0, 0.01, 10}), InvalidArgument);
  EXPECT_THROW(implicit_oscillator({1.0, 0.0, 10}), InvalidArgument);
}

TEST(SecondOrder, MatchesComplexOscillatorWithoutGain) {
  // Without gain the radius equals the modulus of the complex recurrence factor.
  const OscillatorConfig c{2 * pi, 0.01, 400};
  const Eigen::Matrix2d a = oscillator_matrix(c.omega, c.h, 0.0);
  EXPECT_NEAR(spectral_radius(a), 1.0 / std::sqrt(1.0 + std::pow(c.omega * c.h, 2)), 1e-14);
  const auto x = second_order_oscillator(c);
  EXPECT_LT(amplitude_window(x, 300, 400), amplitude_window(x, 0, 100));
}

TEST(SecondOrder, SingularDenominator) {
  const double w = 2.0, h = 0.1;
  const double lam = (1.0 + h * h * w * w) / h;
  EXPECT_THROW(second_order_oscillator({w, h, 10, lam}), InvalidArgument);
}

TEST(SecondOrder, CriticalGainKeepsAmplitude) {
  const double w = 2 * pi, h = 0.01;
  const double lc = lambda_crit(w, h);
  EXPECT_NEAR(spectral_radius(oscillator_matrix(w, h, lc)), 1.0, 1e-9);
  EXPECT_GT(spectral_radius(oscillator_matrix(w, h, 1.1 * lc)), 1.0);
}

TEST(Peaks, PureCosine) {
  const double dt = 0.01, w = 2 * pi;
  std::vector<double> s(1001);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::cos(w * dt * static_cast<double>(i) + 0.3);
  const PeakSeries p = extract_peaks(s);
  ASSERT_GE(p.size(), 9u);
  for (std::size_t k = 0; k < p.size(); ++k) {
    EXPECT_NEAR(p.amplitudes[k], 1.0, 1e-6);
    if (k > 0) EXPECT_NEAR((p.positions[k] - p.positions[k - 1]) * dt, 1.0, 1e-6);
  }
}

TEST(Peaks, MonotoneDecayHasNoPeaks) {
  std::vector<double> s(100);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(-0.05 * static_cast<double>(i));
  EXPECT_THROW(extract_peaks(s), InsufficientData);
  EXPECT_THROW(extract_peaks({1.0, 2.0}), InsufficientData);
}

TEST(Peaks, ImplicitOscillatorPeakRatio) {
  const double w = 2 * pi, h = 0.01;
  const PeakSeries p = extract_peaks(real_part(implicit_oscillator({w, h, 1000})));
  const double expected = std::pow(1.0 + w * w * h * h, -pi / std::atan(w * h));
  for (std::size_t k = 0; k + 1 < p.size(); ++k)
    EXPECT_NEAR(p.amplitudes[k + 1] / p.amplitudes[k], expected, 0.01 * expected);
}

TEST(Decrement, DirectSubstitution) {
  EXPECT_NEAR(log_decrement(std::vector<double>{1.0, 0.5}, 1), std::log(2.0), 1e-15);
  EXPECT_EQ(log_decrement(std::vector<double>{2.0, 2.0, 2.0}, 1), 0.0);
  EXPECT_THROW(log_decrement(std::vector<double>{1.0, -0.5}, 1), InvalidArgument);
  EXPECT_THROW(log_decrement(std::vector<double>{1.0, 0.5}, 2), InsufficientData);
}

TEST(Decrement, IndependentOfSpacingForExponentialEnvelope) {
  std::vector<double> x;
  for (int k = 0; k < 8; ++k) x.push_back(3.0 * std::exp(-0.37 * k));
  for (int m = 1; m <= 4; ++m) EXPECT_NEAR(log_decrement(x, m), 0.37, 1e-13);
}

TEST(DampingRatio, Values) {
  EXPECT_EQ(damping_ratio(0.0), 0.0);
  EXPECT_NEAR(damping_ratio(1e12), 1.0, 1e-12);
  EXPECT_NEAR(damping_ratio(0.6931), 0.6931 / std::sqrt(4 * pi * pi + 0.6931 * 0.6931), 1e-15);
  EXPECT_NEAR(damping_ratio(0.6931), 0.109645, 1e-6);
}

TEST(ZetaAnalytic, SmallStepLimit) {
  const double w = 2 * pi;
  for (double h : {1e-4, 1e-5, 1e-6}) EXPECT_NEAR(zeta_analytic(w, h) / (w * h / 2.0), 1.0, 2.0 * w * h);
}

TEST(ZetaAnalytic, MonotoneInStep) {
  double prev = 0.0;
  for (double h = 1e-4; h <= 0.1; h *= 1.1) {
    const double z = zeta_analytic(2 * pi, h);
    EXPECT_GT(z, prev);
    prev = z;
  }
}

TEST(ZetaAnalytic, AgreesWithMeasuredPeaks) {
  const double w = 2 * pi, h = 0.01;
  const double z = measured_zeta(real_part(implicit_oscillator({w, h, 1000})), 0.0);
  EXPECT_NEAR(z, zeta_analytic(w, h), 1e-3);
}

TEST(ZetaAnalytic, EstimatorChainWithinOnePercent) {
  for (double w : {pi, 2 * pi, 4 * pi})
    for (double h : {0.005, 0.01, 0.02, 0.04}) {
      const int n = static_cast<int>(12 * 2 * pi / std::atan(w * h));
      const double z = measured_zeta(real_part(implicit_oscillator({w, h, n})), 0.0);
      const double za = zeta_analytic(w, h);
      EXPECT_NEAR(z, za, 0.01 * za) << "w=" << w << " h=" << h;
    }
}

TEST(LambdaCrit, MatchesClosedForm) {
  EXPECT_NEAR(lambda_crit(2 * pi, 0.01), 0.01 * 4 * pi * pi, 1e-9);
  for (double w : {pi, 2 * pi, 4 * pi, 56.0})
    for (double h : {0.001, 0.005, 0.01, 0.02, 0.04}) {
      if (w * h >= 2.0) continue;  // real eigenvalues: the product rule no longer fixes the radius
      EXPECT_NEAR(lambda_crit(w, h), h * w * w, 1e-9 * h * w * w);
    }
}

TEST(LambdaCrit, StabilityDichotomy) {
  for (double w : {pi, 2 * pi, 4 * pi})
    for (double h : {0.005, 0.01, 0.02}) {
      const double lc = lambda_crit(w, h);
      const int n = 2000;
      const auto stable = second_order_oscillator({w, h, n, 0.9 * lc});
      const auto unstable = second_order_oscillator({w, h, n, 1.1 * lc});
      const auto zero = second_order_oscillator({w, h, n, 0.0});
      EXPECT_LT(amplitude_window(stable, 1500, 2001), amplitude_window(stable, 0, 500));
      EXPECT_GT(amplitude_window(unstable, 1500, 2001), amplitude_window(unstable, 0, 500));
      EXPECT_LT(amplitude_window(zero, 1500, 2001), amplitude_window(zero, 0, 500));
    }
}

TEST(LambdaCrit, LinearInStep) {
  const double w = 3.0;
  const double slope = lambda_crit(w, 0.01) / 0.01;
  for (double h : {0.002, 0.02, 0.05}) EXPECT_NEAR(lambda_crit(w, h), slope * h, 1e-9 * slope * h);
}

TEST(Estimators, ScaleInvariant) {
  auto s = real_part(implicit_oscillator({2 * pi, 0.02, 600}));
  const double z1 = measured_zeta(s, 0.0);
  for (double& v : s) v *= 37.5;
  EXPECT_NEAR(measured_zeta(s, 0.0), z1, 1e-12);
}

TEST(Sweep, CsvAndFlags) {
  std::vector<SweepRow> rows;
  rows.push_back(oscillator_sweep_point(2 * pi, 0.01, 0.0));
  rows.push_back(oscillator_sweep_point(2 * pi, 0.01, lambda_crit(2 * pi, 0.01)));
  EXPECT_GT(rows[0].zeta_measured, 0.0);
  EXPECT_NEAR(rows[0].zeta_measured, rows[0].zeta_analytic, 0.01 * rows[0].zeta_analytic);
  EXPECT_TRUE(rows[1].constant_amplitude);
  std::ostringstream os;
  write_sweep_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "omega,h,lambda,zeta_measured,zeta_analytic,lambda_crit");
}

TEST(Sweep, DominantFrequency) {
  std::vector<double> s(2000);
  const double dt = 0.001, w = 17.0;
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 0.2 + std::exp(-0.5 * i * dt) * std::sin(w * i * dt);
  EXPECT_NEAR(dominant_frequency(s, dt, 0.2), w, 1e-3 * w);
}

TEST(Sweep, ContinuousFrequencyInvertsDiscreteRotation) {
  const double w = 40.0, h = 0.01;
  const auto x = real_part(implicit_oscillator({w, h, 600}));
  const double wd = dominant_frequency(x, h, 0.0);
  EXPECT_NEAR(wd, std::atan(w * h) / h, 1e-6 * w);
  EXPECT_NEAR(continuous_frequency(wd, h), w, 1e-5 * w);  // crossing interpolation error
}

TEST(Sweep, TrimDropsDecayedTail) {
  std::vector<double> s{2.0, 0.0, 1.5, 1.0 + 1e-6, 1.0 - 1e-7, 1.0};
  EXPECT_EQ(trim_decayed(s, 1.0, 1e-4).size(), 3u);
  EXPECT_EQ(trim_decayed(s, 1.0, 0.0).size(), 6u);
  EXPECT_TRUE(trim_decayed({}, 0.0).empty());
}
