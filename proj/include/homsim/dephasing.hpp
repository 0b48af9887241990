#pragma once

// Phonon-driven pure dephasing, linewidth bookkeeping and the two limiting
// readings of a fitted coherence decay (pure dephasing vs slow diffusion).

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "homsim/units.hpp"

namespace homsim {

struct VibronicParams {
  double prefactor = mhz_to_rate(365.0);  // A, ns^-1 meV^-3
  double gap_mev = 4.4;
  double boltzmann = kBoltzmannMevPerK;

  void validate() const {
    require(prefactor >= 0.0, "vibronic: prefactor must be >= 0");
    require(gap_mev > 0.0, "vibronic: energy gap must be > 0");
  }
};

// Bose occupation of the vibronic mode, 1 / (exp(dE / kT) - 1).
inline double bose_occupation(double gap_mev, double temperature_k, double boltzmann = kBoltzmannMevPerK) {
  require(temperature_k > 0.0, "temperature must be > 0");
  return 1.0 / std::expm1(gap_mev / (boltzmann * temperature_k));
}

// gamma'(T) = A dE^3 n(dE, T), ns^-1.
inline double dephasing_rate(const VibronicParams& vp, double temperature_k) {
  vp.validate();
  const double e3 = vp.gap_mev * vp.gap_mev * vp.gap_mev;
  return vp.prefactor * e3 * bose_occupation(vp.gap_mev, temperature_k, vp.boltzmann);
}

// FWHM in MHz of a line with decay, diffusion and dephasing rates (ns^-1).
inline double linewidth_mhz(double decay, double diffusion_amplitude, double pure_dephasing) {
  require(decay >= 0.0 && diffusion_amplitude >= 0.0 && pure_dephasing >= 0.0, "linewidth: rates must be >= 0");
  return rate_to_mhz(decay + diffusion_amplitude + pure_dephasing);
}

struct DephasingLimited {
  double max_pure_dephasing = 0.0;  // ns^-1
  double diffusion_amplitude = 0.0;  // ns^-1
};

// Slow diffusion (tau_c >> dt): the whole fitted decay is pure dephasing.
inline DephasingLimited extract_dephasing_limited(double gamma_fit, double linewidth_mhz_ple, double decay) {
  require(gamma_fit >= 0.0 && decay > 0.0, "extraction: need gamma >= 0 and Gamma > 0");
  const double dephasing = 0.5 * gamma_fit;
  const double diffusion = mhz_to_rate(linewidth_mhz_ple) - decay - dephasing;
  require(diffusion >= -1e-12, "extraction: linewidth too narrow for the fitted decay (negative diffusion amplitude)");
  return {dephasing, std::max(diffusion, 0.0)};
}

struct DiffusionLimited {
  double max_diffusion_amplitude = 0.0;  // ns^-1
  // Empty when the fitted decay vanishes: any correlation time fits.
  std::optional<double> min_correlation_time_ns;
};

// No pure dephasing: gamma_fit = Gamma'_0 (1 - exp(-(dt/tau_c)^2)), solved for tau_c.
inline DiffusionLimited extract_diffusion_limited(double gamma_fit, double linewidth_mhz_ple, double decay,
                                                  double delay_ns) {
  require(gamma_fit >= 0.0 && decay > 0.0 && delay_ns > 0.0, "extraction: need gamma >= 0, Gamma > 0, dt > 0");
  const double amplitude = mhz_to_rate(linewidth_mhz_ple) - decay;
  require(amplitude > 0.0, "extraction: linewidth does not exceed the lifetime limit");
  if (!(gamma_fit < amplitude))
    throw ValidationError("extraction: fitted decay " + std::to_string(gamma_fit) +
                          " ns^-1 reaches the saturation bound Gamma'_0,max = " + std::to_string(amplitude) +
                          " ns^-1; no correlation time solves it");
  if (gamma_fit == 0.0) return {amplitude, std::nullopt};
  // 1 - exp(-x) = gamma/amplitude  ->  x = -log1p(-gamma/amplitude)
  const double x = -std::log1p(-gamma_fit / amplitude);
  return {amplitude, delay_ns / std::sqrt(x)};
}

// Temperature at which gamma'(T) = Gamma/2, i.e. the optical coherence time
// 1/(Gamma/2 + gamma') falls to half of its lifetime limit 2/Gamma.
inline double critical_temperature(const VibronicParams& vp, double decay) {
  vp.validate();
  require(vp.prefactor > 0.0, "critical temperature: prefactor must be > 0");
  require(decay >= 0.0, "critical temperature: Gamma must be >= 0");
  const double target = 0.5 * decay;
  if (target == 0.0) return 0.0;
  double lo = 1e-3, hi = 1.0;
  while (dephasing_rate(vp, hi) < target) {
    hi *= 2.0;
    if (hi > 1e7) throw NumericalError("critical temperature: no solution below 1e7 K");
  }
  if (dephasing_rate(vp, lo) >= target) return lo;
  for (int i = 0; i < 200 && hi - lo > 1e-10; ++i) {
    const double mid = 0.5 * (lo + hi);
    (dephasing_rate(vp, mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct DephasingRow {
  double temperature_k = 0.0;
  double linewidth_mhz = 0.0;
  double gamma_fit = 0.0;  // ns^-1
  DephasingLimited dephasing_branch;
  DiffusionLimited diffusion_branch;
  std::string provenance;
};

inline DephasingRow analyze_row(double temperature_k, double linewidth_mhz_ple, double gamma_fit, double decay,
                                double delay_ns, std::string provenance = {}) {
  return {temperature_k,
          linewidth_mhz_ple,
          gamma_fit,
          extract_dephasing_limited(gamma_fit, linewidth_mhz_ple, decay),
          extract_diffusion_limited(gamma_fit, linewidth_mhz_ple, decay, delay_ns),
          std::move(provenance)};
}

struct TemperatureRecord {
  double temperature_k;
  double linewidth_mhz;
  double max_dephasing_mhz;        // gamma'_max / 2pi
  double max_dephasing_sigma_mhz;
};

// Published temperature series; the fitted decay of each row is 2 gamma'_max.
inline std::vector<TemperatureRecord> published_temperature_series() {
  return {{5.0, 62.4, 3.2, 0.4}, {5.9, 70.1, 6.7, 0.8}, {6.8, 82.4, 16.6, 2.4}};
}

}  // namespace homsim
