#pragma once

// Domain types, coincidence histograms with software time gating, five-peak
// areas, raw visibility, g2(0) and the small spectroscopy forward models.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "homsim/units.hpp"

namespace homsim {

struct EmitterParams {
  double lifetime_ns = 6.0;
  double pure_dephasing = 0.0;        // gamma', ns^-1
  double diffusion_amplitude = 0.0;   // Gamma'_0, ns^-1
  double diffusion_time_ns = std::numeric_limits<double>::infinity();
  double splitting_ghz = 0.966;
  double saturation_energy_pj = 4.0;
  double metastable_lifetime_ns = 100.0;
  double isc_probability = 0.3;

  double decay_rate() const { return 1.0 / lifetime_ns; }

  void validate() const {
    require(lifetime_ns > 0.0, "emitter: lifetime_ns must be > 0");
    require(pure_dephasing >= 0.0, "emitter: pure_dephasing must be >= 0");
    require(diffusion_amplitude >= 0.0, "emitter: diffusion_amplitude must be >= 0");
    require(diffusion_time_ns > 0.0, "emitter: diffusion_time_ns must be > 0");
    require(splitting_ghz >= 0.0, "emitter: splitting_ghz must be >= 0");
    require(saturation_energy_pj > 0.0, "emitter: saturation_energy_pj must be > 0");
    require(metastable_lifetime_ns > 0.0, "emitter: metastable_lifetime_ns must be > 0");
    require(isc_probability >= 0.0 && isc_probability <= 1.0,
            "emitter: isc_probability must lie in [0, 1]");
  }
};

struct InterferometerParams {
  double delay_ns = 48.7;
  double t1 = 0.5;  // intensity transmissivity of the first splitter
  double t2 = 0.5;  // ... and of the second
  double fringe_deficit = 0.0;
  double eta1 = 1.0;
  double eta2 = 1.0;
  double detector_jitter_ns = 0.0;
  double arrival_jitter_ns = 0.0;

  double r1() const { return 1.0 - t1; }
  double r2() const { return 1.0 - t2; }
  double alpha1() const { return 0.5 * (t1 / r1() + r1() / t1); }
  double alpha2() const { return 0.5 * (t2 / r2() + r2() / t2); }

  // T/R ratio -> T.
  static double transmissivity(double t_over_r) { return t_over_r / (1.0 + t_over_r); }

  void validate() const {
    require(delay_ns > 0.0, "interferometer: delay_ns must be > 0");
    require(t1 > 0.0 && t1 < 1.0, "interferometer: t1 must lie in (0, 1)");
    require(t2 > 0.0 && t2 < 1.0, "interferometer: t2 must lie in (0, 1)");
    require(fringe_deficit >= 0.0 && fringe_deficit < 1.0,
            "interferometer: fringe_deficit must lie in [0, 1)");
    require(eta1 > 0.0 && eta1 <= 1.0, "interferometer: eta1 must lie in (0, 1]");
    require(eta2 > 0.0 && eta2 <= 1.0, "interferometer: eta2 must lie in (0, 1]");
    require(detector_jitter_ns >= 0.0, "interferometer: detector_jitter_ns must be >= 0");
    require(arrival_jitter_ns >= 0.0, "interferometer: arrival_jitter_ns must be >= 0");
  }
};

struct GateWindow {
  double t_start = 0.0;
  double t_stop = 0.0;

  double width() const { return t_stop - t_start; }
  bool contains(double t) const { return t >= t_start && t <= t_stop; }
  void validate() const {
    require(t_start >= 0.0 && t_start < t_stop, "gate: need 0 <= t_start < t_stop");
  }
};

// Signal probability p and noise probability q per pulse.
struct NoiseModel {
  double p = 1.0;
  double q = 0.0;

  static NoiseModel from_sn(double p, double sn) {
    require(sn > 0.0, "noise: SN must be > 0");
    return NoiseModel{p, p / sn};
  }
  double sn() const { return q > 0.0 ? p / q : std::numeric_limits<double>::infinity(); }
  double p0() const { return (1.0 - p) * (1.0 - q); }
  double p1() const { return p * (1.0 - q) + q * (1.0 - p); }
  double p2() const { return p * q; }
  // Fraction of two-photon events made of two signal photons, (SN/(SN+1))^2.
  double signal_pair_fraction() const {
    const double s = p / (p + q);
    return s * s;
  }
  void validate() const {
    require(p >= 0.0 && p <= 1.0, "noise: p must lie in [0, 1]");
    require(q >= 0.0 && q <= 1.0, "noise: q must lie in [0, 1]");
    require(p > 0.0, "noise: SN = p/q must be > 0");
  }
};

enum class Channel : std::uint8_t { kSync = 0, kDetector1 = 1, kDetector2 = 2 };

struct TimeTag {
  Channel channel = Channel::kSync;
  std::int64_t time_ps = 0;

  friend bool operator==(const TimeTag&, const TimeTag&) = default;
};

struct TimeTagStream {
  std::vector<TimeTag> records;

  // Throws with the 0-based record index of the first violation.
  void validate() const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto c = static_cast<unsigned>(records[i].channel);
      require(c <= 2, "time tags: record " + std::to_string(i) + " has channel " +
                          std::to_string(c) + " outside {0,1,2}");
      require(i == 0 || records[i].time_ps >= records[i - 1].time_ps,
              "time tags: record " + std::to_string(i) + " is earlier than its predecessor");
    }
  }
  friend bool operator==(const TimeTagStream&, const TimeTagStream&) = default;
};

struct HistogramAxis {
  double tau_min = -125.0;
  double tau_max = 125.0;
  double bin_width = 0.1;

  std::size_t bins() const {
    return static_cast<std::size_t>(std::llround((tau_max - tau_min) / bin_width));
  }
  double center(std::size_t i) const { return tau_min + (static_cast<double>(i) + 0.5) * bin_width; }
  void validate() const {
    require(bin_width > 0.0, "histogram: bin_width must be > 0");
    require(tau_max > tau_min, "histogram: tau_max must exceed tau_min");
    require(bins() >= 1, "histogram: range shorter than one bin");
  }
  // Symmetric axis wide enough for the five HOM peaks plus their windows.
  static HistogramAxis for_five_peaks(double delay_ns, double halfwidth_ns, double bin_width) {
    const double n = std::ceil((2.0 * delay_ns + halfwidth_ns) / bin_width) + 1.0;
    return HistogramAxis{-n * bin_width, n * bin_width, bin_width};
  }
  friend bool operator==(const HistogramAxis&, const HistogramAxis&) = default;
};

struct CoincidenceHistogram {
  HistogramAxis axis;
  int smoothing = 1;
  std::vector<double> counts;

  static CoincidenceHistogram empty(const HistogramAxis& axis) {
    axis.validate();
    return CoincidenceHistogram{axis, 1, std::vector<double>(axis.bins(), 0.0)};
  }
  double total() const { return std::accumulate(counts.begin(), counts.end(), 0.0); }

  // Bin-wise merge of histograms built from disjoint stream segments.
  CoincidenceHistogram& operator+=(const CoincidenceHistogram& other) {
    require(axis == other.axis && counts.size() == other.counts.size(),
            "histogram: cannot merge histograms with different axes");
    require(smoothing == 1 && other.smoothing == 1, "histogram: merge before smoothing");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    return *this;
  }
};

struct PeakAreas {
  double minus2 = 0.0;  // tau = -2 dt
  double minus1 = 0.0;  // tau = -dt
  double zero = 0.0;
  double plus1 = 0.0;   // tau = +dt
  double plus2 = 0.0;   // tau = +2 dt

  double total() const { return minus2 + minus1 + zero + plus1 + plus2; }
};

// ---------------------------------------------------------------------------
// Histograms

// Centered moving average of odd order with truncated edges, rescaled so the
// total count is unchanged.
template <class S>
std::vector<S> moving_average_unscaled(const std::vector<S>& x, int order) {
  require(order >= 1 && order % 2 == 1, "smoothing order must be a positive odd integer");
  if (order == 1 || x.empty()) return x;
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const std::ptrdiff_t half = order / 2;
  std::vector<S> y(x.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - half);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n - 1, i + half);
    S s = x[lo];
    for (std::ptrdiff_t j = lo + 1; j <= hi; ++j) s += x[j];
    y[i] = s / static_cast<double>(hi - lo + 1);
  }
  return y;
}

template <class S>
std::vector<S> moving_average(const std::vector<S>& x, int order) {
  std::vector<S> y = moving_average_unscaled(x, order);
  if (order == 1 || x.empty()) return y;
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  S before = x[0], after = y[0];
  for (std::ptrdiff_t i = 1; i < n; ++i) before += x[i], after += y[i];
  if (value_of(after) > 0.0) {
    const S k = before / after;
    for (auto& v : y) v *= k;
  }
  return y;
}

inline CoincidenceHistogram smooth(const CoincidenceHistogram& h, int order) {
  require(h.smoothing == 1, "histogram: already smoothed");
  return CoincidenceHistogram{h.axis, order, moving_average(h.counts, order)};
}

// Drops detector clicks outside the gate (or before the first sync); syncs stay.
inline TimeTagStream apply_gate(const TimeTagStream& tags, const GateWindow& gate) {
  gate.validate();
  TimeTagStream out;
  out.records.reserve(tags.records.size());
  bool have_sync = false;
  std::int64_t last_sync = 0;
  for (const auto& r : tags.records) {
    if (r.channel == Channel::kSync) {
      have_sync = true;
      last_sync = r.time_ps;
      out.records.push_back(r);
      continue;
    }
    if (!have_sync) continue;
    if (gate.contains(static_cast<double>(r.time_ps - last_sync) * 1e-3)) out.records.push_back(r);
  }
  return out;
}

namespace detail {

inline void accumulate_pairs(const std::vector<std::int64_t>& d1, const std::vector<std::int64_t>& d2,
                             const HistogramAxis& axis, std::vector<double>& counts) {
  const auto n = counts.size();
  const auto lo_ps = static_cast<std::int64_t>(std::floor(axis.tau_min * 1000.0));
  const auto hi_ps = static_cast<std::int64_t>(std::ceil(axis.tau_max * 1000.0));
  std::size_t lo = 0;
  for (const std::int64_t t1 : d1) {
    while (lo < d2.size() && d2[lo] < t1 + lo_ps) ++lo;
    for (std::size_t j = lo; j < d2.size() && d2[j] <= t1 + hi_ps; ++j) {
      const double tau = static_cast<double>(d2[j] - t1) * 1e-3;
      if (tau < axis.tau_min || tau > axis.tau_max) continue;
      auto bin = static_cast<std::size_t>(std::floor((tau - axis.tau_min) / axis.bin_width));
      if (bin >= n) bin = n - 1;  // tau == tau_max
      counts[bin] += 1.0;
    }
  }
}

}  // namespace detail

// Counts every gated D1 x D2 pair at tau = t2 - t1 inside the axis range.
inline CoincidenceHistogram build_coincidence_histogram(const TimeTagStream& tags, const GateWindow& gate,
                                                        const HistogramAxis& axis, int smoothing = 1) {
  axis.validate();
  gate.validate();
  require(smoothing >= 1 && smoothing % 2 == 1, "smoothing order must be a positive odd integer");
  tags.validate();
  std::vector<std::int64_t> d1, d2;
  bool have_sync = false;
  std::int64_t last_sync = 0;
  for (const auto& r : tags.records) {
    if (r.channel == Channel::kSync) {
      have_sync = true;
      last_sync = r.time_ps;
      continue;
    }
    if (!have_sync) continue;
    if (!gate.contains(static_cast<double>(r.time_ps - last_sync) * 1e-3)) continue;
    (r.channel == Channel::kDetector1 ? d1 : d2).push_back(r.time_ps);
  }
  require(have_sync, "time tags: no laser sync (channel 0) records present");
  auto h = CoincidenceHistogram::empty(axis);
  detail::accumulate_pairs(d1, d2, axis, h.counts);
  return smoothing == 1 ? h : smooth(h, smoothing);
}

// ---------------------------------------------------------------------------
// Peaks and visibilities

inline double window_sum(const CoincidenceHistogram& h, double lo, double hi, bool closed = true) {
  double s = 0.0;
  constexpr double tol = 1e-9;
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    const double c = h.axis.center(i);
    if (c >= lo - tol && (closed ? c <= hi + tol : c < hi - tol)) s += h.counts[i];
  }
  return s;
}

inline PeakAreas extract_peak_areas(const CoincidenceHistogram& h, double delay_ns, double halfwidth_ns = 20.0) {
  require(halfwidth_ns > 0.0, "peak areas: halfwidth must be > 0");
  require(halfwidth_ns < 0.5 * delay_ns, "peak areas: halfwidth >= dt/2 makes the integration windows overlap");
  const double reach = 2.0 * delay_ns + halfwidth_ns;
  const double slack = 0.5 * h.axis.bin_width + 1e-9;
  require(h.axis.tau_min <= -reach + slack && h.axis.tau_max >= reach - slack,
          "peak areas: histogram must span [-2dt - halfwidth, 2dt + halfwidth]");
  auto area = [&](double c) { return window_sum(h, c - halfwidth_ns, c + halfwidth_ns); };
  return PeakAreas{area(-2.0 * delay_ns), area(-delay_ns), area(0.0), area(delay_ns), area(2.0 * delay_ns)};
}

// V0 = 1 - 2 A0 / (A-dt + A+dt), Poisson errors.
inline Measurement raw_visibility(const PeakAreas& a) {
  const double sides = a.minus1 + a.plus1;
  if (!(sides > 0.0)) throw NumericalError("raw visibility undefined: side peaks are empty");
  const double v = 1.0 - 2.0 * a.zero / sides;
  const double d_zero = 2.0 / sides;
  const double d_sides = 2.0 * a.zero / (sides * sides);
  return {v, std::sqrt(d_zero * d_zero * a.zero + d_sides * d_sides * sides)};
}

// Central-peak area over the mean side-peak area of a pulsed HBT histogram.
// Side peaks sit at non-zero multiples of the repetition period; every
// window has half-width pulse_spacing/2.
inline Measurement g2_zero(const CoincidenceHistogram& h, double repetition_period_ns, double pulse_spacing_ns) {
  require(repetition_period_ns > 0.0 && pulse_spacing_ns > 0.0, "g2: period and spacing must be > 0");
  const double hw = 0.5 * pulse_spacing_ns;
  const double a0 = window_sum(h, -hw, hw, false);
  double side_sum = 0.0;
  int n_side = 0;
  for (int k = 1;; ++k) {
    const double c = k * repetition_period_ns;
    const bool right = c + hw <= h.axis.tau_max + 1e-9;
    const bool left = -c - hw >= h.axis.tau_min - 1e-9;
    if (!right && !left) break;
    if (right) side_sum += window_sum(h, c - hw, c + hw, false), ++n_side;
    if (left) side_sum += window_sum(h, -c - hw, -c + hw, false), ++n_side;
  }
  require(n_side >= 2, "g2: fewer than two side peaks fit inside the histogram");
  const double mean = side_sum / n_side;
  if (!(mean > 0.0)) throw NumericalError("g2: side peaks are empty");
  const double g = a0 / mean;
  const double var_mean = side_sum / (static_cast<double>(n_side) * n_side);
  return {g, std::sqrt(a0 / (mean * mean) + g * g * var_mean / (mean * mean))};
}

// How the same-pulse two-photon term enters the central peak.
//   kCorrectionForm: coefficient g, the structure under which the closed-form
//     visibility correction inverts the forward model exactly.
//   kPairCounting: coefficient 2g, what independent routing of two photons
//     through the second splitter produces (and what the Monte Carlo does).
enum class MultiPhotonTerm { kCorrectionForm, kPairCounting };

// Five-peak weights per unit (p1 + 2 p2)^2 eta1 eta2 N0. s2 is the fraction of
// cross-pulse pairs made of two signal photons. Positive tau means the D2
// click is later; the same-pulse, different-arm term then carries R2^2.
inline PeakAreas five_peak_weights(double s2, double g, const InterferometerParams& ifm, double overlap,
                                   MultiPhotonTerm term) {
  const double t1 = ifm.t1, r1 = ifm.r1(), t2 = ifm.t2, r2 = ifm.r2();
  const double fringe = (1.0 - ifm.fringe_deficit) * (1.0 - ifm.fringe_deficit);
  const double same_arm = t1 * t1 + r1 * r1;
  const double kappa = term == MultiPhotonTerm::kCorrectionForm ? 1.0 : 2.0;
  PeakAreas w;
  w.zero = t1 * r1 * ((t2 * t2 + r2 * r2) - 2.0 * s2 * fringe * t2 * r2 * overlap) + kappa * g * same_arm * t2 * r2;
  w.plus1 = same_arm * t2 * r2 + 2.0 * g * t1 * r1 * r2 * r2;
  w.minus1 = same_arm * t2 * r2 + 2.0 * g * t1 * r1 * t2 * t2;
  w.plus2 = t1 * r1 * r2 * r2;
  w.minus2 = t1 * r1 * t2 * t2;
  return w;
}

inline PeakAreas predict_peak_areas(const NoiseModel& noise, const InterferometerParams& ifm, double g,
                                    double overlap, double repetitions,
                                    MultiPhotonTerm term = MultiPhotonTerm::kCorrectionForm) {
  noise.validate();
  ifm.validate();
  require(overlap >= 0.0 && overlap <= 1.0, "peak areas: V must lie in [0, 1]");
  require(g >= 0.0, "peak areas: g must be >= 0");
  require(repetitions >= 0.0, "peak areas: N0 must be >= 0");
  auto w = five_peak_weights(noise.signal_pair_fraction(), g, ifm, overlap, term);
  const double n1 = noise.p1() + 2.0 * noise.p2();
  const double k = n1 * n1 * ifm.eta1 * ifm.eta2 * repetitions;
  return PeakAreas{k * w.minus2, k * w.minus1, k * w.zero, k * w.plus1, k * w.plus2};
}

// ---------------------------------------------------------------------------
// Spectroscopy

inline double excitation_probability(double energy_pj, double saturation_pj) {
  require(energy_pj >= 0.0 && saturation_pj > 0.0, "saturation: need E >= 0 and E0 > 0");
  return -std::expm1(-energy_pj / saturation_pj);
}

inline double saturation_intensity(double energy_pj, double saturation_pj, double i0) {
  return i0 * excitation_probability(energy_pj, saturation_pj);
}

// Lorentzian FWHMs add under convolution.
inline Measurement deconvolve_lorentzian(Measurement measured_mhz, Measurement instrument_mhz = {}) {
  require(instrument_mhz.value >= 0.0, "deconvolution: instrument width must be >= 0");
  require(measured_mhz.value >= instrument_mhz.value,
          "deconvolution: measured width below the instrument width is unphysical");
  return {measured_mhz.value - instrument_mhz.value, std::hypot(measured_mhz.sigma, instrument_mhz.sigma)};
}

inline double deconvolve_lorentzian(double measured_mhz, double instrument_mhz) {
  return deconvolve_lorentzian(Measurement{measured_mhz, 0.0}, Measurement{instrument_mhz, 0.0}).value;
}

}  // namespace homsim
