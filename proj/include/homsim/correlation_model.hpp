#pragma once

// Two-photon coincidence densities, time-gated HOM visibility, the
// three-component quantum-beat pattern and analytic five-peak histograms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "homsim/core_model.hpp"
#include "homsim/units.hpp"

namespace homsim {

struct CoherenceParams {
  double decay = 1.0 / 6.0;  // Gamma, ns^-1
  double gamma = 0.0;        // total coherence decay, ns^-1
  double splitting_ghz = 0.0;

  // gamma = Gamma'_0 (1 - exp(-(dt/tau_c)^2)) + 2 gamma'.
  static double total_decay(double diffusion_amplitude, double diffusion_time_ns, double pure_dephasing,
                            double delay_ns) {
    require(diffusion_amplitude >= 0.0 && pure_dephasing >= 0.0 && diffusion_time_ns > 0.0,
            "coherence: components must be non-negative with tau_c > 0");
    const double r = delay_ns / diffusion_time_ns;
    return -diffusion_amplitude * std::expm1(-r * r) + 2.0 * pure_dephasing;
  }
  static CoherenceParams from_emitter(const EmitterParams& e, double delay_ns) {
    e.validate();
    return {e.decay_rate(),
            total_decay(e.diffusion_amplitude, e.diffusion_time_ns, e.pure_dephasing, delay_ns),
            e.splitting_ghz};
  }
  void validate() const {
    require(decay > 0.0, "coherence: Gamma must be > 0");
    require(gamma >= 0.0, "coherence: gamma must be >= 0");
  }
};

// Per-pair coincidence density at detection time t_D and delay tau.
// With normalization = true the (1 - exp(-gamma tau)) factor is dropped.
inline double g2_density(double t_d, double tau, const CoherenceParams& cp, bool normalization = false) {
  require(t_d >= 0.0 && tau >= 0.0, "g2 density: t_D and tau must be >= 0");
  const double g = cp.decay;
  const double base = g * g * std::exp(-g * (2.0 * t_d + tau));
  return normalization ? base : -std::expm1(-cp.gamma * tau) * base;
}

// expm1 for doubles and for automatic-differentiation scalars.
template <class S>
S expm1_of(const S& x) {
  if constexpr (std::is_arithmetic_v<S>) {
    return std::expm1(x);
  } else {
    const double v = x.value();
    return S(std::expm1(v), x.derivatives() * std::exp(v));
  }
}

// Gated HOM visibility for gate width dt (independent of where the gate opens).
template <class S>
S gated_visibility(double decay, const S& gamma, double dt) {
  using std::exp;
  require(dt > 0.0, "gated visibility: gate width must be > 0");
  require(decay > 0.0 && value_of(gamma) >= 0.0, "gated visibility: need Gamma > 0, gamma >= 0");
  const double g = decay;
  const double norm = -std::expm1(-g * dt);
  const double e2 = std::exp(-2.0 * g * dt);
  const S regular = g / (g + gamma);
  S paired;
  if (std::abs(value_of(gamma) - g) < 1e-6 * g) {
    // Second-order expansion of the two terms that are singular at gamma = Gamma.
    const S eps = gamma - g;
    const double a = 2.0 * g;
    const double c1 = 1.0 / a + dt;
    const double c2 = 1.0 / (a * a) + dt / a + 0.5 * dt * dt;
    const double c3 = 1.0 / (a * a * a) + dt / (a * a) + dt * dt / (2.0 * a) + dt * dt * dt / 6.0;
    paired = -g * e2 * (c1 - eps * c2 + eps * eps * c3);
  } else {
    // g/(g - gamma) e2 - 2g^2/(g^2 - gamma^2) e^{-(g + gamma) dt}, regrouped
    // around eps = gamma - g so nothing cancels near the singular point.
    const S eps = gamma - g;
    paired = -g * e2 * (1.0 / (2.0 * g) - expm1_of(S(-eps * dt)) / eps) / (1.0 + eps / (2.0 * g));
  }
  return (regular + paired) / (norm * norm);
}

inline double gated_visibility(const CoherenceParams& cp, double dt) {
  cp.validate();
  return gated_visibility<double>(cp.decay, cp.gamma, dt);
}

enum class BeatKind { kBeating, kSameLine, kNoise };

template <class S, class T>
S beat_coherence_factor(const T& tau, const S& gamma, const S& splitting_ghz, BeatKind kind) {
  using std::cos;
  using std::exp;
  switch (kind) {
    case BeatKind::kBeating:
      return 1.0 + cos(kTwoPi * splitting_ghz * tau + std::numbers::pi) * exp(-gamma * tau);
    case BeatKind::kSameLine:
      return 1.0 - exp(-gamma * tau);
    case BeatKind::kNoise:
    default:
      return S(1.0);
  }
}

inline double beat_density(double t_d, double tau, const CoherenceParams& cp, BeatKind kind) {
  require(t_d >= 0.0 && tau >= 0.0, "beat density: t_D and tau must be >= 0");
  const double g = cp.decay;
  return g * g * beat_coherence_factor<double, double>(tau, cp.gamma, cp.splitting_ghz, kind) *
         std::exp(-g * (2.0 * t_d + tau));
}

// Beat density integrated over detection times inside the gate, tau >= 0.
template <class S>
S gated_beat_component(const S& tau, double decay, const S& gamma, const S& splitting_ghz, const GateWindow& gate,
                       BeatKind kind) {
  using std::exp;
  const double dt = gate.width();
  if (value_of(tau) < 0.0 || value_of(tau) >= dt) return S(0.0);
  const double g = decay;
  const S envelope =
      0.5 * g * std::exp(-2.0 * g * gate.t_start) * exp(-g * tau) * (1.0 - exp(-2.0 * g * (dt - tau)));
  return envelope * beat_coherence_factor<S, S>(tau, gamma, splitting_ghz, kind);
}

inline double gated_beat_component(double tau, const CoherenceParams& cp, const GateWindow& gate, BeatKind kind) {
  return gated_beat_component<double>(tau, cp.decay, cp.gamma, cp.splitting_ghz, gate, kind);
}

struct BeatCoefficients {
  double c1 = 1.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double t0 = 0.0;
  double sigma_det = 0.0;

  void validate() const {
    require(c1 > 0.0 && c2 >= 0.0 && c3 >= 0.0, "beat: need c1 > 0 and c2, c3 >= 0");
    require(sigma_det >= 0.0, "beat: sigma_det must be >= 0");
  }
};

template <class S>
struct BeatPatternParams {
  S gamma;
  S splitting_ghz;
  S c1, c2, c3;
  S t0;
  S sigma_det;
};

inline constexpr int kBeatOversampling = 10;

// Expected counts per bin (bin-averaged value of the continuous pattern):
// three gated components at |tau - t0|, Gaussian detector response sampled
// on a 10x finer grid and truncated at 10 sigma (the cut is then below
// double precision, so the pattern stays smooth in sigma), bin averaging,
// smoothing.
template <class S>
std::vector<S> beat_pattern(const HistogramAxis& axis, double decay, const BeatPatternParams<S>& p,
                            const GateWindow& gate, int smoothing) {
  using std::exp;
  axis.validate();
  gate.validate();
  require(value_of(p.sigma_det) >= 0.0, "beat: sigma_det must be >= 0");
  const std::size_t nbins = axis.bins();
  const double h = axis.bin_width / kBeatOversampling;
  const double sigma = value_of(p.sigma_det);
  const std::size_t half_kernel = sigma > 1e-3 * h ? static_cast<std::size_t>(std::ceil(10.0 * sigma / h)) : 0;
  const std::size_t nfine = nbins * kBeatOversampling + 2 * half_kernel;
  const double first = axis.tau_min - static_cast<double>(half_kernel) * h + 0.5 * h;

  std::vector<S> raw(nfine);
  for (std::size_t j = 0; j < nfine; ++j) {
    const double tau = first + static_cast<double>(j) * h;
    const S shifted = tau - p.t0;
    const S dist = value_of(shifted) < 0.0 ? S(-shifted) : shifted;
    const S v = p.c1 * gated_beat_component<S>(dist, decay, p.gamma, p.splitting_ghz, gate, BeatKind::kBeating) +
                p.c2 * gated_beat_component<S>(dist, decay, p.gamma, p.splitting_ghz, gate, BeatKind::kSameLine) +
                p.c3 * gated_beat_component<S>(dist, decay, p.gamma, p.splitting_ghz, gate, BeatKind::kNoise);
    raw[j] = v;
  }

  std::vector<S> conv(nbins * kBeatOversampling);
  if (half_kernel == 0) {
    for (std::size_t j = 0; j < conv.size(); ++j) conv[j] = raw[j];
  } else {
    const auto k = static_cast<std::ptrdiff_t>(half_kernel);
    std::vector<S> w(2 * half_kernel + 1);
    S norm = S(0.0);
    for (std::ptrdiff_t i = -k; i <= k; ++i) {
      const double x = static_cast<double>(i) * h;
      w[i + k] = exp(-(x * x) / (2.0 * p.sigma_det * p.sigma_det));
      norm += w[i + k];
    }
    for (auto& wi : w) wi /= norm;
    for (std::size_t j = 0; j < conv.size(); ++j) {
      S acc = S(0.0);
      const std::size_t centre = j + half_kernel;
      for (std::ptrdiff_t i = -k; i <= k; ++i) acc += w[i + k] * raw[centre - i];
      conv[j] = acc;
    }
  }

  std::vector<S> bins(nbins);
  for (std::size_t b = 0; b < nbins; ++b) {
    S s = conv[b * kBeatOversampling];
    for (int i = 1; i < kBeatOversampling; ++i) s += conv[b * kBeatOversampling + i];
    bins[b] = s / static_cast<double>(kBeatOversampling);
  }
  return moving_average(bins, smoothing);
}

inline CoincidenceHistogram beat_pattern(const HistogramAxis& axis, const CoherenceParams& cp,
                                         const BeatCoefficients& bc, const GateWindow& gate, int smoothing = 1) {
  cp.validate();
  bc.validate();
  BeatPatternParams<double> p{cp.gamma, cp.splitting_ghz, bc.c1, bc.c2, bc.c3, bc.t0, bc.sigma_det};
  return CoincidenceHistogram{axis, smoothing, beat_pattern<double>(axis, cp.decay, p, gate, smoothing)};
}

// ---------------------------------------------------------------------------
// Analytic five-peak histogram

// Expected coincidence histogram built from pair weights and single-click
// timing. Every pair class shares one delay profile: the autocorrelation of
// the gated single-click density (exponential decay convolved with a
// Gaussian of width click_sigma_ns). The interfering part of the central
// peak is removed with the coherence factor evaluated at the click delay.
struct PeakShapeModel {
  PeakAreas weights;             // five-peak weights without interference
  double coherent_weight = 0.0;  // central-peak weight multiplying the overlap
  double decay = 1.0 / 6.0;
  double gamma = 0.0;
  double splitting_ghz = 0.0;
  double flip_fraction = 0.0;   // fraction of signal pairs with opposite colours
  double overlap_scale = 1.0;   // timing-jitter factor
  double delay_ns = 48.7;
  double click_sigma_ns = 0.0;
  GateWindow gate{0.0, 48.7};
};

namespace detail {

inline double exgauss_density(double t, double decay, double sigma) {
  if (sigma <= 0.0) return t < 0.0 ? 0.0 : decay * std::exp(-decay * t);
  const double s2 = sigma * sigma;
  const double z = (decay * s2 - t) / (std::sqrt(2.0) * sigma);
  if (z > 5.0) {
    // erfc(z) e^{...} evaluated in a cancellation-free asymptotic form
    const double gauss = std::exp(-t * t / (2.0 * s2));
    double series = 1.0, term = 1.0;
    for (int n = 1; n <= 6; ++n) {
      term *= -(2.0 * n - 1.0) / (2.0 * z * z);
      series += term;
    }
    return 0.5 * decay * gauss * series / (z * std::sqrt(std::numbers::pi));
  }
  return 0.5 * decay * std::exp(0.5 * decay * decay * s2 - decay * t) * std::erfc(z);
}

}  // namespace detail

inline CoincidenceHistogram predict_peak_shape(const PeakShapeModel& m, const HistogramAxis& axis) {
  axis.validate();
  m.gate.validate();
  const double h = std::min(axis.bin_width / kBeatOversampling, 0.02);
  const auto nt = static_cast<std::size_t>(std::ceil(m.gate.width() / h));
  const double ht = m.gate.width() / static_cast<double>(nt);
  std::vector<double> f(nt);
  for (std::size_t i = 0; i < nt; ++i)
    f[i] = detail::exgauss_density(m.gate.t_start + (static_cast<double>(i) + 0.5) * ht, m.decay, m.click_sigma_ns);
  // corr[m] = integral f(t) f(t + m ht) dt, symmetric in m.
  std::vector<double> corr(nt);
  for (std::size_t lag = 0; lag < nt; ++lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < nt; ++i) s += f[i] * f[i + lag];
    corr[lag] = s * ht;
  }
  auto profile = [&](double u) {
    const double x = std::abs(u) / ht;
    const auto i = static_cast<std::size_t>(x);
    if (i + 1 >= nt) return i < nt ? corr[i] * (1.0 - (x - static_cast<double>(i))) : 0.0;
    const double fr = x - static_cast<double>(i);
    return corr[i] * (1.0 - fr) + corr[i + 1] * fr;
  };
  auto coherence = [&](double u) {
    const double a = std::abs(u);
    return m.overlap_scale * std::exp(-m.gamma * a) *
           ((1.0 - m.flip_fraction) + m.flip_fraction * std::cos(kTwoPi * m.splitting_ghz * u));
  };
  const double dt = m.delay_ns;
  const double centres[5] = {-2.0 * dt, -dt, 0.0, dt, 2.0 * dt};
  const double weights[5] = {m.weights.minus2, m.weights.minus1, m.weights.zero, m.weights.plus1,
                             m.weights.plus2};
  auto out = CoincidenceHistogram::empty(axis);
  const double sub = axis.bin_width / kBeatOversampling;
  for (std::size_t b = 0; b < out.counts.size(); ++b) {
    double s = 0.0;
    for (int k = 0; k < kBeatOversampling; ++k) {
      const double u = axis.tau_min + static_cast<double>(b) * axis.bin_width + (k + 0.5) * sub;
      for (int p = 0; p < 5; ++p) {
        const double x = u - centres[p];
        if (std::abs(x) >= m.gate.width()) continue;
        s += weights[p] * profile(x);
        if (p == 2) s -= m.coherent_weight * profile(x) * coherence(x);
      }
    }
    out.counts[b] = std::max(0.0, s * sub);
  }
  return out;
}

}  // namespace homsim
