#include <gtest/gtest.h>

#include <cmath>

#include "homsim/spin_dynamics.hpp"
#include "oracles.hpp"

using namespace homsim;

namespace {

SpinParams paper_point() { return SpinParams{}; }

std::vector<double> grid(double lo, double hi, double step) {
  std::vector<double> g;
  for (int i = 0; lo + i * step <= hi + 1e-9; ++i) g.push_back(lo + i * step);
  return g;
}

}  // namespace

TEST(StaticHamiltonian, ZeroFieldZeroSplittingIsZero) {
  SpinParams sp;
  sp.zero_field = 0.0;
  sp.field_mt = 0.0;
  EXPECT_EQ(build_static_hamiltonian(sp).norm(), 0.0);
}

TEST(StaticHamiltonian, ZeroFieldPairsAreDegenerate) {
  SpinParams sp;
  sp.field_mt = 0.0;
  const auto h = build_static_hamiltonian(sp);
  EXPECT_DOUBLE_EQ(h(0, 0), h(3, 3));
  EXPECT_DOUBLE_EQ(h(1, 1), h(2, 2));
  // splitting between the pairs is 2D = 4.5 MHz
  EXPECT_NEAR((h(0, 0) - h(1, 1)) / kTwoPi * 1e3, 4.5, 1e-12);
}

TEST(StaticHamiltonian, UpperTransitionNearDriveFrequency) {
  const SpinParams sp = paper_point();
  EXPECT_NEAR(upper_transition_ghz(sp) * 1e3, 30.23, 0.01);
  EXPECT_LT(std::abs(upper_transition_ghz(sp) - sp.frequency_ghz) / sp.frequency_ghz, 2e-3);
}

TEST(SpinOperators, Commutator) {
  // [Sx, Sz] = -i Sy, so Sx Sz - Sz Sx is real antisymmetric with the ladder norms.
  const Matrix4r sx = spin_x(), sz = spin_z();
  EXPECT_NEAR((sx * sx).trace(), 5.0, 1e-12);  // s(s+1)(2s+1)/3
  EXPECT_NEAR((sx * sz - sz * sx).norm(), std::sqrt(5.0), 1e-12);
}

TEST(Propagate, NoDriveKeepsPopulations) {
  SpinParams sp;
  sp.rabi = 0.0;
  Matrix4c m = Matrix4c::Zero();
  m.diagonal() << 0.1, 0.2, 0.3, 0.4;
  const DensityMatrix4 rho(m);
  const auto out = propagate(rho, sp, 37.3, 0.4);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(out.population(i), rho.population(i), 1e-12);
}

TEST(Propagate, ZeroDurationIsExact) {
  Matrix4c m = Matrix4c::Zero();
  m.diagonal() << 0.25, 0.25, 0.25, 0.25;
  m(0, 1) = {0.1, 0.05};
  m(1, 0) = std::conj(m(0, 1));
  const DensityMatrix4 rho(m);
  EXPECT_EQ(propagate(rho, paper_point(), 0.0, 1.0).matrix(), rho.matrix());
}

TEST(Propagate, RejectsInvalidDensityMatrix) {
  Matrix4c m = Matrix4c::Zero();
  m(0, 0) = 1.0;
  m(0, 1) = 0.1;
  EXPECT_THROW(DensityMatrix4{m}, ValidationError);
  Matrix4c t = Matrix4c::Zero();
  t.diagonal() << 0.5, 0.5, 0.5, 0.0;
  EXPECT_THROW(DensityMatrix4{t}, ValidationError);
  Matrix4c neg = Matrix4c::Zero();
  neg.diagonal() << 1.2, -0.2, 0.0, 0.0;
  EXPECT_THROW(DensityMatrix4{neg}, ValidationError);
}

TEST(Propagate, StepSizeLimitEnforced) {
  SpinParams sp;
  sp.dt = 1.0;
  EXPECT_THROW(sp.validate(), ValidationError);
  sp.dt = 0.5;
  sp.frequency_ghz = 0.2;  // limit 1/(20 f) = 0.25 ns
  EXPECT_THROW(sp.validate(), ValidationError);
  sp.n_phase = 0;
  sp.dt = 0.1;
  EXPECT_THROW(sp.validate(), ValidationError);
}

TEST(Propagate, UnitaryAtDefaultStep) {
  const SpinParams sp = paper_point();
  for (double d : {0.05, 1.0, 19.0, 60.3})
    for (double ph : {0.0, 1.3}) {
      const Matrix4c u = pulse_unitary(sp, d, ph);
      EXPECT_LT((u.adjoint() * u - Matrix4c::Identity()).norm(), 1e-8);
    }
}

TEST(Propagate, HundredPulsesKeepTraceAndHermiticity) {
  const SpinParams sp = paper_point();
  DensityMatrix4 rho = DensityMatrix4::subspace_half();
  for (int i = 0; i < 100; ++i) rho = propagate(rho, sp, 7.3, 0.1 * i);
  EXPECT_LT(std::abs(rho.matrix().trace() - 1.0), 1e-9);
  EXPECT_LT((rho.matrix() - rho.matrix().adjoint()).norm(), 1e-9);
}

TEST(PhaseAverage, ZeroDurationReturnsInitial) {
  const auto p = phase_averaged_populations(DensityMatrix4::subspace_three_half(), paper_point(), {0.0});
  EXPECT_DOUBLE_EQ(p[0].three_half, 1.0);
  EXPECT_DOUBLE_EQ(p[0].half, 0.0);
}

TEST(PhaseAverage, PopulationsSumToOne) {
  const auto p = phase_averaged_populations(DensityMatrix4::subspace_half(), paper_point(), grid(0, 60, 3));
  for (const auto& x : p) EXPECT_NEAR(x.half + x.three_half, 1.0, 1e-9);
}

TEST(PhaseAverage, MatchesStandalonePropagation) {
  const SpinParams sp = paper_point();
  const std::vector<double> d{19.0, 4.25, 33.33};
  const auto batch = phase_averaged_populations(DensityMatrix4::subspace_half(), sp, d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    double three = 0.0;
    for (int k = 0; k < sp.n_phase; ++k)
      three += propagate(DensityMatrix4::subspace_half(), sp, d[i], kTwoPi * k / sp.n_phase).three_half_population();
    EXPECT_NEAR(batch[i].three_half, three / sp.n_phase, 1e-12);
  }
}

TEST(PhaseAverage, HalfPiPulseFlip) {
  const double p = flipped_population(paper_point(), {19.0})[0];
  EXPECT_NEAR(p, 0.39, 0.10);
}

TEST(PhaseAverage, BothStartsTransferAlike) {
  const SpinParams sp = paper_point();
  const double a = phase_averaged_populations(DensityMatrix4::subspace_half(), sp, {19.0})[0].three_half;
  const double b = phase_averaged_populations(DensityMatrix4::subspace_three_half(), sp, {19.0})[0].half;
  EXPECT_LT(std::abs(a - b), 0.05);
}

TEST(PhaseAverage, CurveAgreesWithFineStepOracle) {
  const SpinParams sp = paper_point();
  const auto d = grid(0, 60, 1.0);
  const auto lib = flipped_population(sp, d);
  const oracle::SpinOracle o{sp.zero_field, sp.gyromagnetic * sp.field_mt, sp.rabi, sp.frequency_ghz};
  const auto ref = o.flipped_curve(d, sp.n_phase, 0.01);
  double worst = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) worst = std::max(worst, std::abs(lib[i] - ref[i]));
  EXPECT_LT(worst, 0.01);
  EXPECT_NEAR(ref[19], 0.39, 0.10);
}

TEST(PhaseAverage, StepHalvingConverges) {
  SpinParams sp = paper_point();
  const auto d = grid(0, 60, 2.0);
  const auto coarse = flipped_population(sp, d);
  sp.dt *= 0.5;
  const auto fine = flipped_population(sp, d);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_LT(std::abs(coarse[i] - fine[i]), 1e-3) << d[i];
}

TEST(PhaseAverage, PhaseDoublingConverges) {
  SpinParams sp = paper_point();
  const auto d = grid(0, 60, 2.0);
  const auto base = flipped_population(sp, d);
  sp.n_phase *= 2;
  const auto dbl = flipped_population(sp, d);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_LT(std::abs(base[i] - dbl[i]), 5e-3) << d[i];
}

TEST(PhaseAverage, ResonanceSitsAtUpperTransition) {
  SpinParams sp = paper_point();
  sp.rabi = kTwoPi * 0.5e-3;
  sp.n_phase = 2;
  sp.dt = 0.25;
  double best_f = 0.0, best = -1.0;
  for (double f_mhz = 28.0; f_mhz <= 32.5 + 1e-9; f_mhz += 0.05) {
    sp.frequency_ghz = f_mhz * 1e-3;
    const double p = flipped_population(sp, {300.0})[0];
    if (p > best) best = p, best_f = f_mhz;
  }
  EXPECT_LT(std::abs(best_f - upper_transition_ghz(sp) * 1e3), 0.5);
}

TEST(Calibration, HalfPiDuration) {
  EXPECT_NEAR(calibrate_pulse(paper_point(), 0.39), 19.0, 3.0);
}

TEST(Calibration, SmallTargetGivesShortPulse) {
  const double d = calibrate_pulse(paper_point(), 1e-5);
  EXPECT_GT(d, 0.0);
  EXPECT_LT(d, 0.5);
}

TEST(Calibration, FullFlipTakesAboutTwiceTheHalfFlip) {
  const SpinParams sp = paper_point();
  const auto peak = first_flip_maximum(sp);
  const double full = calibrate_pulse(sp, peak.flip);
  const double half = calibrate_pulse(sp, 0.5 * peak.flip);
  EXPECT_NEAR(full / half, 2.0, 0.4);
  // result is self-consistent with the scan
  EXPECT_NEAR(flipped_population(sp, {half})[0], 0.5 * peak.flip, 1e-6);
}

TEST(Calibration, UnreachableTargetNamesMaximum) {
  try {
    calibrate_pulse(paper_point(), 0.95);
    FAIL() << "expected rejection";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("peaks at 0.70"), std::string::npos) << e.what();
  }
}
