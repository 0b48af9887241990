#pragma once

// Spin-3/2 ground state under a static field and a strong RF drive, without
// the rotating-wave approximation. Basis order {+3/2, +1/2, -1/2, -3/2}.

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "homsim/units.hpp"

namespace homsim {

using Matrix4c = Eigen::Matrix<std::complex<double>, 4, 4>;
using Matrix4r = Eigen::Matrix4d;

struct SpinParams {
  double zero_field = kTwoPi * 2.25e-3;    // D, rad/ns
  double gyromagnetic = kTwoPi * 28e-3;    // rad/(ns mT)
  double field_mt = 0.919;
  double rabi = kTwoPi * 14.4e-3;          // Omega, rad/ns
  double frequency_ghz = 0.03026911;
  double dt = 0.1;
  int n_phase = 32;

  void validate() const {
    require(dt > 0.0, "spin: dt must be > 0");
    const double limit = frequency_ghz > 0.0 ? std::min(0.5, 1.0 / (20.0 * frequency_ghz)) : 0.5;
    require(dt <= limit + 1e-15, "spin: dt must not exceed min(0.5 ns, 1/(20 f))");
    require(n_phase >= 1, "spin: n_phase must be >= 1");
    require(rabi >= 0.0, "spin: Omega must be >= 0");
    require(frequency_ghz >= 0.0, "spin: RF frequency must be >= 0");
  }
};

inline Matrix4r spin_z() {
  Matrix4r s = Matrix4r::Zero();
  s.diagonal() << 1.5, 0.5, -0.5, -1.5;
  return s;
}

// (S+ + S-)/2 with <m+1|S+|m> = sqrt(s(s+1) - m(m+1)).
inline Matrix4r spin_x() {
  Matrix4r s = Matrix4r::Zero();
  const double m[4] = {1.5, 0.5, -0.5, -1.5};
  for (int i = 0; i < 3; ++i) {
    const double lower = m[i + 1];
    const double v = 0.5 * std::sqrt(3.75 - lower * (lower + 1.0));
    s(i, i + 1) = v;
    s(i + 1, i) = v;
  }
  return s;
}

// H0 = D Sz^2 + gamma_e Bz Sz, rad/ns.
inline Matrix4r build_static_hamiltonian(const SpinParams& sp) {
  const Matrix4r sz = spin_z();
  return sp.zero_field * sz * sz + sp.gyromagnetic * sp.field_mt * sz;
}

// Frequency (GHz) of the |3/2> <-> |1/2> transition, 2D + gamma_e Bz over 2 pi.
inline double upper_transition_ghz(const SpinParams& sp) {
  return (2.0 * sp.zero_field + sp.gyromagnetic * sp.field_mt) / kTwoPi;
}

class DensityMatrix4 {
 public:
  explicit DensityMatrix4(const Matrix4c& m) : m_(m) { validate(m_); }

  static DensityMatrix4 subspace_half() { return diag(0.0, 0.5, 0.5, 0.0); }
  static DensityMatrix4 subspace_three_half() { return diag(0.5, 0.0, 0.0, 0.5); }

  const Matrix4c& matrix() const { return m_; }
  double population(int i) const { return m_(i, i).real(); }
  double half_population() const { return population(1) + population(2); }
  double three_half_population() const { return population(0) + population(3); }

  static void validate(const Matrix4c& m) {
    require((m - m.adjoint()).norm() < 1e-10, "density matrix: not Hermitian");
    require(std::abs(m.trace() - 1.0) < 1e-10, "density matrix: trace differs from 1");
    Eigen::SelfAdjointEigenSolver<Matrix4c> es(m);
    require(es.eigenvalues().minCoeff() >= -1e-10, "density matrix: negative eigenvalue");
  }

 private:
  static DensityMatrix4 diag(double a, double b, double c, double d) {
    Matrix4c m = Matrix4c::Zero();
    m.diagonal() << a, b, c, d;
    return DensityMatrix4(m);
  }
  Matrix4c m_;
};

namespace detail {

// exp(-i H h) for real symmetric H.
inline Matrix4c step_unitary(const Matrix4r& h_matrix, double h) {
  Eigen::SelfAdjointEigenSolver<Matrix4r> es(h_matrix);
  const Matrix4r& v = es.eigenvectors();
  Matrix4c vc = v.cast<std::complex<double>>();
  Eigen::Matrix<std::complex<double>, 4, 1> phases;
  for (int i = 0; i < 4; ++i) phases(i) = std::polar(1.0, -es.eigenvalues()(i) * h);
  return vc * phases.asDiagonal() * vc.transpose();
}

// Propagator over [t0, t1] with the Hamiltonian frozen at the interval midpoint.
inline Matrix4c segment_unitary(const SpinParams& sp, const Matrix4r& h0, const Matrix4r& sx, double t0, double t1,
                                double phase) {
  const double mid = 0.5 * (t0 + t1);
  const Matrix4r h = h0 + sp.rabi * std::cos(kTwoPi * sp.frequency_ghz * mid + phase) * sx;
  return step_unitary(h, t1 - t0);
}

}  // namespace detail

// U(duration) as an ordered product over steps k dt plus one shorter final step.
inline Matrix4c pulse_unitary(const SpinParams& sp, double duration_ns, double phase) {
  sp.validate();
  require(duration_ns >= 0.0, "spin: pulse duration must be >= 0");
  const Matrix4r h0 = build_static_hamiltonian(sp);
  const Matrix4r sx = spin_x();
  Matrix4c u = Matrix4c::Identity();
  const auto full = static_cast<long>(std::floor(duration_ns / sp.dt + 1e-12));
  for (long k = 0; k < full; ++k)
    u = detail::segment_unitary(sp, h0, sx, k * sp.dt, (k + 1) * sp.dt, phase) * u;
  const double rest = duration_ns - full * sp.dt;
  if (rest > 1e-12) u = detail::segment_unitary(sp, h0, sx, full * sp.dt, duration_ns, phase) * u;
  return u;
}

inline DensityMatrix4 propagate(const DensityMatrix4& rho0, const SpinParams& sp, double duration_ns, double phase) {
  if (duration_ns == 0.0) return rho0;
  const Matrix4c u = pulse_unitary(sp, duration_ns, phase);
  Matrix4c rho = u * rho0.matrix() * u.adjoint();
  rho = 0.5 * (rho + rho.adjoint()).eval();
  return DensityMatrix4(rho);
}

struct SubspacePopulations {
  double half = 0.0;        // p(+-1/2)
  double three_half = 0.0;  // p(+-3/2)
};

// Populations averaged over drive phases 2 pi k / n_phase. One propagation
// per phase walks the step grid; the result at each duration is identical
// to a standalone propagate() call.
inline std::vector<SubspacePopulations> phase_averaged_populations(const DensityMatrix4& rho0, const SpinParams& sp,
                                                                   const std::vector<double>& durations) {
  sp.validate();
  for (double d : durations) require(d >= 0.0, "spin: durations must be >= 0");
  std::vector<std::size_t> order(durations.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return durations[a] < durations[b]; });

  const Matrix4r h0 = build_static_hamiltonian(sp);
  const Matrix4r sx = spin_x();
  std::vector<SubspacePopulations> out(durations.size());
  for (int k = 0; k < sp.n_phase; ++k) {
    const double phase = kTwoPi * k / sp.n_phase;
    Matrix4c u = Matrix4c::Identity();
    long step = 0;
    for (std::size_t idx : order) {
      const double d = durations[idx];
      const auto full = static_cast<long>(std::floor(d / sp.dt + 1e-12));
      for (; step < full; ++step)
        u = detail::segment_unitary(sp, h0, sx, step * sp.dt, (step + 1) * sp.dt, phase) * u;
      Matrix4c ud = u;
      const double rest = d - full * sp.dt;
      if (rest > 1e-12) ud = detail::segment_unitary(sp, h0, sx, full * sp.dt, d, phase) * u;
      const Matrix4c rho = ud * rho0.matrix() * ud.adjoint();
      out[idx].half += rho(1, 1).real() + rho(2, 2).real();
      out[idx].three_half += rho(0, 0).real() + rho(3, 3).real();
    }
  }
  for (auto& p : out) {
    p.half /= sp.n_phase;
    p.three_half /= sp.n_phase;
  }
  return out;
}

// Population that left the initial subspace, averaged over both initial states.
inline std::vector<double> flipped_population(const SpinParams& sp, const std::vector<double>& durations) {
  const auto from_half = phase_averaged_populations(DensityMatrix4::subspace_half(), sp, durations);
  const auto from_three = phase_averaged_populations(DensityMatrix4::subspace_three_half(), sp, durations);
  std::vector<double> out(durations.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * (from_half[i].three_half + from_three[i].half);
  return out;
}

struct PulseCalibrationOptions {
  double scan_step_ns = 0.25;
  double max_duration_ns = 200.0;
  double tolerance_ns = 1e-6;
};

// Height of the first maximum of the flip curve and where it sits.
struct FirstFlipMaximum {
  double duration_ns = 0.0;
  double flip = 0.0;
};

inline FirstFlipMaximum first_flip_maximum(const SpinParams& sp, const PulseCalibrationOptions& opt = {}) {
  std::vector<double> grid;
  for (double t = 0.0; t <= opt.max_duration_ns + 1e-9; t += opt.scan_step_ns) grid.push_back(t);
  const auto flips = flipped_population(sp, grid);
  for (std::size_t i = 1; i + 1 < flips.size(); ++i)
    if (flips[i] >= flips[i - 1] && flips[i] > flips[i + 1]) return {grid[i], flips[i]};
  return {grid.back(), flips.back()};
}

// Shortest duration whose phase-averaged flip equals target, by bisection on
// the first rising segment of the flip curve.
inline double calibrate_pulse(const SpinParams& sp, double target_flip, const PulseCalibrationOptions& opt = {}) {
  sp.validate();
  require(target_flip > 0.0, "calibration: target flip must be > 0");
  std::vector<double> grid;
  for (double t = 0.0; t <= opt.max_duration_ns + 1e-9; t += opt.scan_step_ns) grid.push_back(t);
  const auto flips = flipped_population(sp, grid);
  double peak = 0.0;
  for (std::size_t i = 1; i < flips.size(); ++i) {
    peak = std::max(peak, flips[i]);
    if (flips[i] >= target_flip) {
      double lo = grid[i - 1], hi = grid[i];
      while (hi - lo > opt.tolerance_ns) {
        const double mid = 0.5 * (lo + hi);
        (flipped_population(sp, {mid})[0] < target_flip ? lo : hi) = mid;
      }
      return 0.5 * (lo + hi);
    }
    if (flips[i] < flips[i - 1]) break;  // end of the first rising segment
  }
  throw ValidationError("calibration: target flip " + std::to_string(target_flip) +
                        " is unreachable; the first rising segment peaks at " + std::to_string(peak));
}

}  // namespace homsim
