#pragma once

// Imperfection algebra linking raw and corrected HOM visibility: noise
// bound on g, timing-jitter factor, correction and its inverse, normalized
// visibility, beat-coefficient constraints and splitter characterization.

#include <cmath>
#include <optional>

#include "homsim/core_model.hpp"
#include "homsim/units.hpp"

namespace homsim {

// g = 2 SN / (SN + 1)^2, reached when all two-photon events are signal + noise.
inline double g_lower_bound(double sn) {
  require(sn > 0.0, "g bound: SN must be > 0");
  if (std::isinf(sn)) return 0.0;
  return 2.0 * sn / ((sn + 1.0) * (sn + 1.0));
}

inline double signal_fraction_squared(double sn) {
  require(sn > 0.0, "SN must be > 0");
  if (std::isinf(sn)) return 1.0;
  const double s = sn / (sn + 1.0);
  return s * s;
}

// exp(x^2) erfc(x), stable for large x.
inline double scaled_erfc(double x) {
  if (x < 5.0) return std::exp(x * x) * std::erfc(x);
  // Continued fraction, converges quickly for x >= 5.
  double f = 0.0;
  for (int n = 60; n >= 1; --n) f = 0.5 * n / (x + f);
  return 1.0 / (std::sqrt(std::numbers::pi) * (x + f));
}

// Mean of exp(-|d|/tau) for an arrival-time difference d ~ N(0, sigma^2).
inline double jitter_factor(double sigma_ns, double lifetime_ns) {
  require(sigma_ns >= 0.0 && lifetime_ns > 0.0, "jitter factor: need sigma >= 0 and lifetime > 0");
  return scaled_erfc(sigma_ns / (std::sqrt(2.0) * lifetime_ns));
}

struct CorrectionInputs {
  Measurement raw{0.0, 0.0};
  double sn = std::numeric_limits<double>::infinity();
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double fringe_deficit = 0.0;
  double jitter = 1.0;
  std::optional<double> g;  // defaults to g_lower_bound(sn)
  MultiPhotonTerm term = MultiPhotonTerm::kCorrectionForm;

  static CorrectionInputs from_interferometer(Measurement raw, double sn, const InterferometerParams& ifm,
                                              double jitter = 1.0) {
    ifm.validate();
    return CorrectionInputs{raw, sn, ifm.alpha1(), ifm.alpha2(), ifm.fringe_deficit, jitter, std::nullopt,
                            MultiPhotonTerm::kCorrectionForm};
  }
  void validate() const {
    require(raw.value >= -1.0 && raw.value <= 1.0, "correction: V0 must lie in [-1, 1]");
    require(sn > 0.0, "correction: SN must be > 0");
    require(alpha1 >= 1.0 - 1e-12 && alpha2 >= 1.0 - 1e-12, "correction: alpha_i must be >= 1");
    require(fringe_deficit >= 0.0 && fringe_deficit < 1.0, "correction: epsilon must lie in [0, 1)");
    require(jitter > 0.0 && jitter <= 1.0, "correction: jitter factor must lie in (0, 1]");
    require(!g || *g >= 0.0, "correction: g must be >= 0");
  }
};

struct CorrectedVisibility {
  double value = 0.0;
  double sigma = 0.0;
  bool over_corrected = false;  // value > 1: the inputs are mutually inconsistent
};

// Exact inverse of the five-peak forward model. With g at its lower bound
// and the correction-form multi-photon term this is
//   V = [ a2 + g a1 - (1 - V0)(a1 + g a2) ] / ( s^2 (1 - eps)^2 beta ),
// s^2 = (SN/(SN+1))^2, which at beta = 1 is the standard SN/splitter/fringe
// correction and otherwise that correction scaled by 1/beta.
inline CorrectedVisibility correct_visibility(const CorrectionInputs& in) {
  in.validate();
  const double g = in.g.value_or(g_lower_bound(in.sn));
  const double s2 = signal_fraction_squared(in.sn);
  const double fringe = (1.0 - in.fringe_deficit) * (1.0 - in.fringe_deficit);
  const double kappa = in.term == MultiPhotonTerm::kCorrectionForm ? 1.0 : 2.0;
  const double denom = s2 * fringe * in.jitter;
  const double sides = in.alpha1 + g * in.alpha2;
  const double v = (in.alpha2 + kappa * g * in.alpha1 - (1.0 - in.raw.value) * sides) / denom;
  return {v, in.raw.sigma * sides / denom, v > 1.0 + 1e-6};
}

// Raw visibility reached at perfect overlap.
inline double max_raw_visibility(double sn, const InterferometerParams& ifm, double jitter = 1.0,
                                 MultiPhotonTerm term = MultiPhotonTerm::kCorrectionForm) {
  ifm.validate();
  require(jitter > 0.0 && jitter <= 1.0, "max visibility: jitter factor must lie in (0, 1]");
  const double g = g_lower_bound(sn);
  const double s2 = signal_fraction_squared(sn);
  const double fringe = (1.0 - ifm.fringe_deficit) * (1.0 - ifm.fringe_deficit);
  const double kappa = term == MultiPhotonTerm::kCorrectionForm ? 1.0 : 2.0;
  const double a1 = ifm.alpha1(), a2 = ifm.alpha2();
  return 1.0 - (a2 + kappa * g * a1 - s2 * fringe * jitter) / (a1 + g * a2);
}

inline Measurement normalized_visibility(Measurement during, Measurement before) {
  require(before.value > 0.0, "normalized visibility: V_before must be > 0");
  const double r = during.value / before.value;
  const double rel = std::hypot(during.sigma / before.value, r * before.sigma / before.value);
  return {r, rel};
}

struct BeatRatios {
  Measurement same_line;  // c2/c1
  double noise = 0.0;     // c3/c1
};

// c2/c1 = V/(1 - V); c3/c1 = (1 + c2/c1) [ (a2 + 2 a1 g) / (s^2 (1 - eps)^2) - 1 ].
inline BeatRatios beat_coefficient_ratios(Measurement v_norm, double sn, double g, double fringe_deficit,
                                          double alpha1, double alpha2) {
  require(v_norm.value > 0.0 && v_norm.value < 1.0, "beat ratios: V_norm must lie in (0, 1)");
  require(g >= 0.0 && fringe_deficit >= 0.0 && fringe_deficit < 1.0, "beat ratios: invalid g or epsilon");
  const double v = v_norm.value;
  const double c21 = v / (1.0 - v);
  const double fringe = (1.0 - fringe_deficit) * (1.0 - fringe_deficit);
  const double c31 = (1.0 + c21) * ((alpha2 + 2.0 * alpha1 * g) / (signal_fraction_squared(sn) * fringe) - 1.0);
  return {{c21, v_norm.sigma / ((1.0 - v) * (1.0 - v))}, c31};
}

// Noise-to-interference weight of the central peak from forward-model areas
// at perfect (V = 1) and zero (V = 0) overlap: A0(1) / (A0(0) - A0(1)).
inline double noise_to_interference_ratio(const PeakAreas& at_full_overlap, const PeakAreas& at_zero_overlap) {
  const double d = at_zero_overlap.zero - at_full_overlap.zero;
  if (!(d > 0.0)) throw NumericalError("noise ratio: no interference contrast in the central peak");
  return at_full_overlap.zero / d;
}

struct SplitterCharacterization {
  double t1_over_r1 = 1.0;
  double t2_over_r2 = 1.0;
  double fringe_bound = 1.0;
};

// n11: D1 early, n12: D1 late, n21: D2 early, n22: D2 late.
inline SplitterCharacterization characterize_beamsplitters(double n11, double n12, double n21, double n22) {
  require(n11 > 0.0 && n12 > 0.0 && n21 > 0.0 && n22 > 0.0, "splitters: all counts must be > 0");
  const double r1 = std::sqrt((n11 * n21) / (n12 * n22));
  const double r2 = std::sqrt((n12 * n21) / (n11 * n22));
  const double x = std::sqrt(r1 * r2);
  return {r1, r2, 2.0 / (x + 1.0 / x)};
}

}  // namespace homsim
