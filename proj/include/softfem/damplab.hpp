#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "softfem/errors.hpp"

namespace softfem {

/// Single-DOF test system x'' = -w^2 x + lambda x' integrated with implicit Euler.
struct OscillatorConfig {
  double omega = 2.0 * std::numbers::pi;
  double h = 0.01;
  int n_steps = 1000;
  double lambda = 0.0;

  void validate() const {
    if (!(omega > 0.0) || !std::isfinite(omega)) throw InvalidArgument("oscillator frequency must be positive");
    if (!(h > 0.0) || !std::isfinite(h)) throw InvalidArgument("oscillator time step must be positive");
    if (n_steps < 0) throw InvalidArgument("oscillator step count must be nonnegative");
    if (!std::isfinite(lambda)) throw InvalidArgument("oscillator damping gain must be finite");
  }
};

/// x_{j+1} = x_j / (1 - i h w), x_0 = 1.
inline std::vector<std::complex<double>> implicit_oscillator(const OscillatorConfig& c) {
  c.validate();
  if (c.lambda != 0.0) throw InvalidArgument("the complex oscillator has no damping gain");
  const std::complex<double> factor = 1.0 / std::complex<double>(1.0, -c.h * c.omega);
  std::vector<std::complex<double>> x(c.n_steps + 1);
  x[0] = 1.0;
  for (int j = 0; j < c.n_steps; ++j) x[j + 1] = x[j] * factor;
  return x;
}

/// One implicit Euler step of the (x, v) system as a 2x2 map.
inline Eigen::Matrix2d oscillator_matrix(double omega, double h, double lambda) {
  const double den = 1.0 - h * lambda + h * h * omega * omega;
  if (std::abs(den) < 1e-14) throw InvalidArgument("implicit Euler oscillator matrix is singular");
  Eigen::Matrix2d a;
  a << 1.0 - h * lambda, h, -h * omega * omega, 1.0;
  return a / den;
}

inline double spectral_radius(const Eigen::Matrix2d& a) {
  // Closed-form eigenvalues keep the radius accurate near 1.
  const double tr = a.trace();
  const double det = a.determinant();
  const double disc = tr * tr / 4.0 - det;
  if (disc < 0.0) return std::sqrt(det);
  const double s = std::sqrt(disc);
  return std::max(std::abs(tr / 2.0 + s), std::abs(tr / 2.0 - s));
}

inline std::vector<Eigen::Vector2d> second_order_oscillator(const OscillatorConfig& c) {
  c.validate();
  const Eigen::Matrix2d a = oscillator_matrix(c.omega, c.h, c.lambda);
  std::vector<Eigen::Vector2d> x(c.n_steps + 1);
  x[0] = Eigen::Vector2d(1.0, 0.0);
  for (int j = 0; j < c.n_steps; ++j) x[j + 1] = a * x[j];
  return x;
}

struct PeakSeries {
  std::vector<int> samples;        // index of the local maximum
  std::vector<double> positions;   // refined sample index
  std::vector<double> amplitudes;  // refined value minus baseline
  std::size_t size() const { return amplitudes.size(); }
};

/// Local maxima above the series mean, refined by a parabola through three samples.
inline PeakSeries extract_peaks(const std::vector<double>& samples, double baseline = 0.0) {
  if (samples.size() < 3) throw InsufficientData("peak extraction needs at least 3 samples");
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  PeakSeries p;
  for (std::size_t i = 1; i + 1 < samples.size(); ++i) {
    const double a = samples[i - 1], b = samples[i], c = samples[i + 1];
    if (!(b > a && b >= c && b > mean)) continue;
    const double curv = a - 2.0 * b + c;
    double offset = 0.0, value = b;
    if (curv < 0.0) {
      offset = 0.5 * (a - c) / curv;
      value = b - 0.25 * (a - c) * offset;
    }
    if (value - baseline <= 0.0) continue;
    p.samples.push_back(static_cast<int>(i));
    p.positions.push_back(static_cast<double>(i) + offset);
    p.amplitudes.push_back(value - baseline);
  }
  if (p.size() < 2) throw InsufficientData("fewer than 2 oscillation peaks found");
  return p;
}

/// (1/m) ln(X_k / X_{k+m}) averaged over every admissible k.
inline double log_decrement(const std::vector<double>& amplitudes, int m = 1) {
  if (m < 1) throw InvalidArgument("peak spacing m must be at least 1");
  if (amplitudes.size() < static_cast<std::size_t>(m) + 1)
    throw InsufficientData("not enough peaks for spacing m=" + std::to_string(m));
  for (double x : amplitudes)
    if (!(x > 0.0)) throw InvalidArgument("peak amplitudes must be positive");
  double sum = 0.0;
  const std::size_t count = amplitudes.size() - m;
  for (std::size_t k = 0; k < count; ++k) sum += std::log(amplitudes[k] / amplitudes[k + m]);
  return sum / (static_cast<double>(count) * m);
}

inline double log_decrement(const PeakSeries& peaks, int m = 1) { return log_decrement(peaks.amplitudes, m); }

/// Negative decrements (growing oscillations) map to negative ratios.
inline double damping_ratio(double delta) {
  return delta / std::sqrt(4.0 * std::numbers::pi * std::numbers::pi + delta * delta);
}

inline double implicit_euler_decrement(double omega, double h) {
  const double wh = omega * h;
  return std::numbers::pi / std::atan(wh) * std::log1p(wh * wh);
}

inline double zeta_analytic(double omega, double h) {
  if (!(omega > 0.0) || !(h > 0.0)) throw InvalidArgument("zeta_analytic needs positive frequency and time step");
  return damping_ratio(implicit_euler_decrement(omega, h));
}

/// Largest gain keeping the implicit Euler oscillator map inside the unit circle.
inline double lambda_crit(double omega, double h) {
  if (!(omega > 0.0) || !(h > 0.0)) throw InvalidArgument("lambda_crit needs positive frequency and time step");
  // Stable at 0; just below the singular gain the map blows up.
  double lo = 0.0;
  double hi = (1.0 + h * h * omega * omega) / h * (1.0 - 1e-9);
  if (spectral_radius(oscillator_matrix(omega, h, hi)) <= 1.0) return hi;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (spectral_radius(oscillator_matrix(omega, h, mid)) <= 1.0)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

/// Angular frequency from the mean spacing of upward crossings of baseline.
inline double dominant_frequency(const std::vector<double>& samples, double dt, double baseline) {
  std::vector<double> crossings;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    const double a = samples[i - 1] - baseline, b = samples[i] - baseline;
    if (a < 0.0 && b >= 0.0) crossings.push_back((static_cast<double>(i) - 1.0 + a / (a - b)) * dt);
  }
  if (crossings.size() < 2) throw InsufficientData("fewer than 2 baseline crossings");
  const double period = (crossings.back() - crossings.front()) / static_cast<double>(crossings.size() - 1);
  return 2.0 * std::numbers::pi / period;
}

/// Undamped frequency of the continuous oscillator whose implicit Euler
/// discretization rotates by omega_discrete * h per step.
inline double continuous_frequency(double omega_discrete, double h) {
  const double theta = omega_discrete * h;
  if (!(theta > 0.0) || theta >= std::numbers::pi / 2) throw InvalidArgument("discrete frequency out of range");
  return std::tan(theta) / h;
}

/// Drops the tail once the deviation from baseline stays below `fraction` of
/// its maximum. Late samples of a decayed signal are solver noise whose
/// crossings and maxima would pollute the estimators.
inline std::vector<double> trim_decayed(std::vector<double> samples, double baseline, double fraction = 1e-4) {
  double peak = 0.0;
  for (double s : samples) peak = std::max(peak, std::abs(s - baseline));
  std::size_t end = samples.size();
  while (end > 0 && std::abs(samples[end - 1] - baseline) < fraction * peak) --end;
  samples.resize(end);
  return samples;
}

/// Damping ratio measured from the peaks of a sampled signal.
inline double measured_zeta(const std::vector<double>& samples, double baseline, int m = 1) {
  return damping_ratio(log_decrement(extract_peaks(samples, baseline), m));
}

struct SweepRow {
  double omega = 0.0;
  double h = 0.0;
  double lambda = 0.0;
  double zeta_measured = std::numeric_limits<double>::quiet_NaN();
  double zeta_analytic = 0.0;
  double lambda_crit = 0.0;
  bool constant_amplitude = false;
  std::string flag;  // non-empty when the measurement failed
};

/// Compensation has removed at least 95% of the numerical damping.
inline bool is_constant_amplitude(double zeta_measured, double zeta_numerical) {
  return std::abs(zeta_measured) < 0.05 * zeta_numerical;
}

/// 1-DOF sweep point: the measured ratio comes from the simulated oscillator.
inline SweepRow oscillator_sweep_point(double omega, double h, double lambda, int periods = 20) {
  SweepRow row{omega, h, lambda};
  row.zeta_analytic = zeta_analytic(omega, h);
  row.lambda_crit = lambda_crit(omega, h);
  OscillatorConfig c{omega, h, 0, lambda};
  const double period_steps = 2.0 * std::numbers::pi / std::atan(omega * h);
  c.n_steps = static_cast<int>(std::ceil(periods * period_steps));
  const auto xs = second_order_oscillator(c);
  std::vector<double> x(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) x[i] = xs[i][0];
  try {
    row.zeta_measured = measured_zeta(x, 0.0);
    row.constant_amplitude = is_constant_amplitude(row.zeta_measured, row.zeta_analytic);
  } catch (const InsufficientData& e) {
    row.flag = e.what();
  }
  return row;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "omega,h,lambda,zeta_measured,zeta_analytic,lambda_crit\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.omega << ',' << r.h << ',' << r.lambda << ',';
    if (std::isfinite(r.zeta_measured)) os << r.zeta_measured;
    os << ',' << r.zeta_analytic << ',' << r.lambda_crit << '\n';
  }
}

}  // namespace softfem
