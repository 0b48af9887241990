#pragma once

// Seeded photon-level simulation of the two-pulse HOM experiment (and of a
// plain HBT setup), plus the analytic expectation it is checked against.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "homsim/core_model.hpp"
#include "homsim/corrections.hpp"
#include "homsim/correlation_model.hpp"
#include "homsim/fitting.hpp"
#include "homsim/spin_dynamics.hpp"
#include "homsim/units.hpp"

namespace homsim {

// ---------------------------------------------------------------------------
// Random numbers: SplitMix64 finalizer over (key, counter). Each cycle owns
// the substream keyed by (seed, cycle), so results do not depend on how
// cycles are spread over threads.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(splitmix64(seed ^ splitmix64(stream))) {}

  std::uint64_t next() { return splitmix64(key_ + 0xD1B54A32D192ED03ull * ++counter_); }
  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  bool bernoulli(double p) { return uniform() < p; }
  double exponential(double mean) { return -mean * std::log1p(-uniform()); }
  double gaussian(double sigma) {
    if (sigma == 0.0) return 0.0;
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration

enum class Topology { kHom, kHbt };

struct SourceParams {
  double pulse_energy_pj = 5.5;
  double collection_efficiency = 0.05;  // signal photon reaching the first splitter
  double signal_to_noise = std::numeric_limits<double>::infinity();
  Topology topology = Topology::kHom;

  void validate() const {
    require(pulse_energy_pj >= 0.0, "source: pulse_energy_pj must be >= 0");
    require(collection_efficiency >= 0.0 && collection_efficiency <= 1.0,
            "source: collection_efficiency must lie in [0, 1]");
    require(signal_to_noise > 0.0, "source: signal_to_noise must be > 0");
  }
};

struct RfPulse {
  bool enabled = false;
  double start_ns = 18.0;  // after the first laser pulse
  double duration_ns = 19.0;
  SpinParams spin;
  std::optional<double> flip_probability;  // overrides the spin-dynamics value

  void validate(double delay_ns) const {
    if (!enabled) return;
    require(start_ns >= 0.0 && duration_ns >= 0.0, "rf: start_ns and duration_ns must be >= 0");
    require(start_ns + duration_ns <= delay_ns, "rf: pulse must end before the second laser pulse");
    require(!flip_probability || (*flip_probability >= 0.0 && *flip_probability <= 1.0),
            "rf: flip_probability must lie in [0, 1]");
    if (!flip_probability) spin.validate();
  }
};

struct ExperimentConfig {
  EmitterParams emitter;
  InterferometerParams ifm;
  SourceParams source;
  RfPulse rf;
  std::uint64_t n_cycles = 100000;
  std::uint64_t seed = 1;

  double repetition_period_ns() const { return 10.0 * ifm.delay_ns; }
  void validate() const {
    emitter.validate();
    ifm.validate();
    source.validate();
    rf.validate(ifm.delay_ns);
    require(n_cycles >= 1, "config: n_cycles must be >= 1");
    require(source.topology == Topology::kHom || !rf.enabled, "config: RF drive needs the two-pulse HOM sequence");
  }
};

// Exact per-cycle quantities of the emitter chain. Cycles start in the
// stationary state; the metastable dwell is memoryless, so the start state
// is just "ground" or "metastable".
struct ChainStatistics {
  double excitation = 0.0;      // 1 - exp(-E/E0)
  double emission = 0.0;        // signal photon given ground state at a pulse
  double metastable_start = 0.0;
  double signal_first = 0.0;    // P(signal photon at pulse 1)
  double signal_second = 0.0;   // P(signal photon at pulse 2), 0 for HBT
  double signal_both = 0.0;
  double noise = 0.0;           // q, per pulse
  double cross_pairs = 0.0;     // E[n1 n2]
  double same_pulse_pairs = 0.0;
  double flip = 0.0;            // colour flip between the two pulses

  double sn() const { return noise > 0.0 ? signal_first / noise : std::numeric_limits<double>::infinity(); }
  double effective_g() const { return cross_pairs > 0.0 ? same_pulse_pairs / cross_pairs : 0.0; }
  double signal_pair_fraction() const { return cross_pairs > 0.0 ? signal_both / cross_pairs : 0.0; }
  bool degenerate() const { return signal_first == 0.0 && signal_second == 0.0 && noise == 0.0; }
};

inline double rf_flip_probability(const RfPulse& rf) {
  if (!rf.enabled) return 0.0;
  if (rf.flip_probability) return *rf.flip_probability;
  return flipped_population(rf.spin, {rf.duration_ns})[0];
}

inline ChainStatistics chain_statistics(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& e = cfg.emitter;
  ChainStatistics c;
  c.excitation = excitation_probability(cfg.source.pulse_energy_pj, e.saturation_energy_pj);
  c.emission = c.excitation * (1.0 - e.isc_probability) * cfg.source.collection_efficiency;
  const double enter = c.excitation * e.isc_probability;  // ground -> metastable at a pulse
  const double tau = e.metastable_lifetime_ns;
  const double period = cfg.repetition_period_ns();
  if (cfg.source.topology == Topology::kHom) {
    const double dt = cfg.ifm.delay_ns;
    const double stay = std::exp(-dt / tau);
    const double tail = std::exp(-(period - dt) / tau);
    const double from_ground = (enter * stay + (1.0 - enter * stay) * enter) * tail;
    const double from_meta = (stay + (1.0 - stay) * enter) * tail;
    const double denom = 1.0 - from_meta + from_ground;
    c.metastable_start = denom > 0.0 ? from_ground / denom : 0.0;
    c.signal_first = (1.0 - c.metastable_start) * c.emission;
    const double ground_second = 1.0 - stay * (c.metastable_start + (1.0 - c.metastable_start) * enter);
    c.signal_second = ground_second * c.emission;
    c.signal_both = (1.0 - c.metastable_start) * c.emission * c.emission;
    // SN fixes the ratio of signal-noise to signal-signal cross-pulse pairs to 2/SN.
    const double s = c.signal_first + c.signal_second;
    c.noise = std::isinf(cfg.source.signal_to_noise) || s == 0.0
                  ? 0.0
                  : std::min(1.0, 2.0 * c.signal_both / (cfg.source.signal_to_noise * s));
    c.cross_pairs = c.signal_both + c.noise * s + c.noise * c.noise;
    c.same_pulse_pairs = c.noise * s;
    c.flip = rf_flip_probability(cfg.rf);
  } else {
    const double tail = std::exp(-period / tau);
    const double from_ground = enter * tail;
    const double from_meta = tail;
    const double denom = 1.0 - from_meta + from_ground;
    c.metastable_start = denom > 0.0 ? from_ground / denom : 0.0;
    c.signal_first = (1.0 - c.metastable_start) * c.emission;
    c.noise = std::isinf(cfg.source.signal_to_noise) ? 0.0
                                                      : std::min(1.0, c.signal_first / cfg.source.signal_to_noise);
    c.same_pulse_pairs = c.noise * c.signal_first;
  }
  return c;
}

// ---------------------------------------------------------------------------
// One cycle

// Photons entering the detection optics, exposed for bookkeeping tests.
struct EmittedPhoton {
  int pulse = 0;
  bool signal = true;
  int colour = 0;  // 0: +-1/2 line, 1: +-3/2 line
};

namespace detail {

inline constexpr double kTimeOriginNs = 100.0;

struct Prepared {
  ExperimentConfig cfg;
  ChainStatistics chain;
  double gamma = 0.0;
  double decay = 0.0;
  double period = 0.0;
  bool fixed_label = false;  // no ISC and no RF: one colour per run
  int run_label = 0;
};

inline Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p;
  p.cfg = cfg;
  p.chain = chain_statistics(cfg);
  p.gamma = CoherenceParams::from_emitter(cfg.emitter, cfg.ifm.delay_ns).gamma;
  p.decay = cfg.emitter.decay_rate();
  p.period = cfg.repetition_period_ns();
  p.fixed_label = cfg.emitter.isc_probability == 0.0 && !cfg.rf.enabled;
  p.run_label = static_cast<int>(CounterRng(cfg.seed, ~0ull).next() & 1u);
  return p;
}

struct Flight {
  double arrival = 0.0;  // at the second splitter, ns from cycle start
  double emission = 0.0;
  double jitter = 0.0;
  bool signal = true;
  int colour = 0;
  int pulse = 0;
  bool long_arm = false;
};

inline void detect(CounterRng& rng, const Prepared& p, std::uint64_t cycle, double t, bool to_d1,
                   std::vector<TimeTag>& out) {
  const auto& ifm = p.cfg.ifm;
  if (!rng.bernoulli(to_d1 ? ifm.eta1 : ifm.eta2)) return;
  const double abs_ns = kTimeOriginNs + static_cast<double>(cycle) * p.period + t + rng.gaussian(ifm.detector_jitter_ns);
  out.push_back({to_d1 ? Channel::kDetector1 : Channel::kDetector2, std::llround(abs_ns * 1000.0)});
}

// Two photons meeting from opposite ports; returns true when they leave
// through different outputs.
inline double coincidence_probability(const Prepared& p, const Flight& a, const Flight& b) {
  const auto& ifm = p.cfg.ifm;
  const double t2 = ifm.t2, r2 = ifm.r2();
  double overlap = 0.0;
  if (a.signal && b.signal) {
    const double d = a.emission - b.emission;
    overlap = std::exp(-p.gamma * std::abs(d) - p.decay * std::abs(a.jitter - b.jitter));
    if (a.colour != b.colour) overlap *= std::cos(kTwoPi * p.cfg.emitter.splitting_ghz * d);
  }
  const double fringe = (1.0 - ifm.fringe_deficit) * (1.0 - ifm.fringe_deficit);
  return std::clamp(t2 * t2 + r2 * r2 - 2.0 * t2 * r2 * fringe * overlap, 0.0, 1.0);
}

inline void route_slot(CounterRng& rng, const Prepared& p, std::uint64_t cycle, std::vector<Flight>& slot,
                       std::vector<TimeTag>& out) {
  const double t2 = p.cfg.ifm.t2, r2 = p.cfg.ifm.r2();
  // Primary pair: one photon per port, two signal photons preferred.
  int best_short = -1, best_long = -1, best_rank = -1;
  for (std::size_t i = 0; i < slot.size(); ++i)
    for (std::size_t j = 0; j < slot.size(); ++j) {
      if (slot[i].long_arm || !slot[j].long_arm) continue;
      const int rank = static_cast<int>(slot[i].signal) + static_cast<int>(slot[j].signal);
      if (rank > best_rank) best_rank = rank, best_short = static_cast<int>(i), best_long = static_cast<int>(j);
    }
  for (std::size_t i = 0; i < slot.size(); ++i) {
    if (static_cast<int>(i) == best_short || static_cast<int>(i) == best_long) continue;
    // Short-arm photons reach D1 by reflection, long-arm photons by transmission.
    const bool to_d1 = rng.bernoulli(slot[i].long_arm ? t2 : r2);
    detect(rng, p, cycle, slot[i].arrival, to_d1, out);
  }
  if (best_short < 0) return;
  const Flight& s = slot[best_short];
  const Flight& l = slot[best_long];
  if (rng.bernoulli(coincidence_probability(p, s, l))) {
    const bool short_to_d1 = rng.bernoulli(r2 * r2 / (r2 * r2 + t2 * t2));
    detect(rng, p, cycle, s.arrival, short_to_d1, out);
    detect(rng, p, cycle, l.arrival, !short_to_d1, out);
  } else {
    const bool to_d1 = rng.bernoulli(0.5);
    detect(rng, p, cycle, s.arrival, to_d1, out);
    detect(rng, p, cycle, l.arrival, to_d1, out);
  }
}

// Appends the cycle's records (unsorted) to out.
inline void simulate_cycle(const Prepared& p, std::uint64_t cycle, std::vector<TimeTag>& out,
                           std::vector<EmittedPhoton>* photons = nullptr) {
  const auto& cfg = p.cfg;
  const auto& e = cfg.emitter;
  const bool hom = cfg.source.topology == Topology::kHom;
  const double dt = cfg.ifm.delay_ns;
  const int n_pulses = hom ? 2 : 1;
  CounterRng rng(cfg.seed, cycle);

  const double base_ns = kTimeOriginNs + static_cast<double>(cycle) * p.period;
  for (int s = 0; s < (hom ? 3 : 1); ++s) out.push_back({Channel::kSync, std::llround((base_ns + s * dt) * 1000.0)});

  bool metastable = rng.bernoulli(p.chain.metastable_start);
  double return_time = metastable ? rng.exponential(e.metastable_lifetime_ns) : 0.0;
  int label = p.fixed_label ? p.run_label : static_cast<int>(rng.next() & 1u);
  auto settle = [&](double t) {
    if (metastable && return_time <= t) {
      metastable = false;
      label = static_cast<int>(rng.next() & 1u);
    }
  };

  std::vector<Flight> flights;
  const double pulse_jitter = cfg.ifm.arrival_jitter_ns / std::sqrt(2.0);
  for (int k = 0; k < n_pulses; ++k) {
    const double t_pulse = k * dt;
    if (k == 1 && cfg.rf.enabled) {
      settle(cfg.rf.start_ns);
      if (!metastable && rng.bernoulli(p.chain.flip)) label ^= 1;
    }
    settle(t_pulse);
    const double jitter = rng.gaussian(pulse_jitter);
    auto launch = [&](bool signal) {
      Flight f;
      f.signal = signal;
      f.colour = label;
      f.jitter = jitter;
      f.pulse = k;
      f.emission = rng.exponential(e.lifetime_ns);
      f.arrival = t_pulse + jitter + f.emission;
      if (photons) photons->push_back({k, signal, label});
      flights.push_back(f);
    };
    if (!metastable && rng.bernoulli(p.chain.excitation)) {
      if (rng.bernoulli(e.isc_probability)) {
        metastable = true;
        return_time = t_pulse + rng.exponential(e.metastable_lifetime_ns);
      } else if (rng.bernoulli(cfg.source.collection_efficiency)) {
        launch(true);
      }
    }
    if (rng.bernoulli(p.chain.noise)) launch(false);
  }

  if (!hom) {
    for (const auto& f : flights) detect(rng, p, cycle, f.arrival, rng.bernoulli(cfg.ifm.t2), out);
    return;
  }
  std::array<std::vector<Flight>, 3> slots;
  for (auto f : flights) {
    f.long_arm = !rng.bernoulli(cfg.ifm.t1);
    if (f.long_arm) f.arrival += dt;
    slots[f.pulse + (f.long_arm ? 1 : 0)].push_back(f);
  }
  for (auto& slot : slots) route_slot(rng, p, cycle, slot, out);
}

inline bool tag_less(const TimeTag& a, const TimeTag& b) {
  return a.time_ps != b.time_ps ? a.time_ps < b.time_ps : a.channel < b.channel;
}

// HOMSIM_THREADS, when set, is taken as given (even above the core count);
// otherwise one worker per hardware thread.
inline unsigned worker_count() {
  if (const char* env = std::getenv("HOMSIM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(std::min(v, 256L));
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline constexpr std::uint64_t kChunkCycles = 2048;

// Runs job(chunk_index) for every chunk on the worker pool.
template <class Job>
void for_each_chunk(std::uint64_t n_chunks, Job&& job) {
  const unsigned workers = static_cast<unsigned>(std::min<std::uint64_t>(worker_count(), n_chunks));
  if (workers <= 1) {
    for (std::uint64_t c = 0; c < n_chunks; ++c) job(c);
    return;
  }
  std::atomic<std::uint64_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::uint64_t c = next++; c < n_chunks && !failed; c = next++) {
        try {
          job(c);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline std::vector<TimeTag> simulate_chunk(const Prepared& p, std::uint64_t chunk) {
  std::vector<TimeTag> out;
  const std::uint64_t first = chunk * kChunkCycles;
  const std::uint64_t last = std::min(first + kChunkCycles, p.cfg.n_cycles);
  out.reserve((last - first) * 6);
  for (std::uint64_t c = first; c < last; ++c) simulate_cycle(p, c, out);
  std::sort(out.begin(), out.end(), tag_less);
  return out;
}

}  // namespace detail

// Full time-tag stream, sorted by time. Bit-identical for a given seed and
// config whatever the worker count.
inline TimeTagStream simulate_timetags(const ExperimentConfig& cfg) {
  const detail::Prepared p = detail::prepare(cfg);
  const std::uint64_t n_chunks = (cfg.n_cycles + detail::kChunkCycles - 1) / detail::kChunkCycles;
  std::vector<std::vector<TimeTag>> parts(n_chunks);
  detail::for_each_chunk(n_chunks, [&](std::uint64_t c) { parts[c] = detail::simulate_chunk(p, c); });
  TimeTagStream s;
  std::size_t total = 0;
  for (const auto& part : parts) total += part.size();
  s.records.reserve(total);
  for (auto& part : parts) s.records.insert(s.records.end(), part.begin(), part.end());
  if (!std::is_sorted(s.records.begin(), s.records.end(), detail::tag_less))
    std::sort(s.records.begin(), s.records.end(), detail::tag_less);
  return s;
}

// Colours of every photon launched in the given cycles, for bookkeeping checks.
inline std::vector<std::vector<EmittedPhoton>> trace_photons(const ExperimentConfig& cfg, std::uint64_t n_cycles) {
  const detail::Prepared p = detail::prepare(cfg);
  std::vector<std::vector<EmittedPhoton>> out(n_cycles);
  std::vector<TimeTag> scratch;
  for (std::uint64_t c = 0; c < n_cycles; ++c) {
    scratch.clear();
    detail::simulate_cycle(p, c, scratch, &out[c]);
  }
  return out;
}

namespace detail {

struct GatedClicks {
  std::vector<std::int64_t> d1, d2;
};

inline GatedClicks gated_clicks(const std::vector<TimeTag>& tags, const GateWindow& gate) {
  GatedClicks g;
  bool have_sync = false;
  std::int64_t last_sync = 0;
  for (const auto& r : tags) {
    if (r.channel == Channel::kSync) {
      have_sync = true;
      last_sync = r.time_ps;
    } else if (have_sync && gate.contains(static_cast<double>(r.time_ps - last_sync) * 1e-3)) {
      (r.channel == Channel::kDetector1 ? g.d1 : g.d2).push_back(r.time_ps);
    }
  }
  return g;
}

inline GatedClicks slice(const GatedClicks& g, std::int64_t lo, std::int64_t hi) {
  GatedClicks s;
  for (auto t : g.d1)
    if (t >= lo && t < hi) s.d1.push_back(t);
  for (auto t : g.d2)
    if (t >= lo && t < hi) s.d2.push_back(t);
  return s;
}

}  // namespace detail

// Histograms for several gates without materializing the stream. Pairs that
// straddle chunk boundaries are added separately, so the result equals
// build_coincidence_histogram(simulate_timetags(cfg), gate, axis) exactly.
inline std::vector<CoincidenceHistogram> simulate_histograms(const ExperimentConfig& cfg,
                                                             const std::vector<GateWindow>& gates,
                                                             const HistogramAxis& axis) {
  axis.validate();
  for (const auto& g : gates) g.validate();
  const detail::Prepared p = detail::prepare(cfg);
  const std::uint64_t n_chunks = (cfg.n_cycles + detail::kChunkCycles - 1) / detail::kChunkCycles;
  const auto reach_ps = static_cast<std::int64_t>(std::ceil(std::max(-axis.tau_min, axis.tau_max) * 1000.0)) + 1;
  const double chunk_span = detail::kChunkCycles * p.period * 1000.0;
  require(static_cast<double>(reach_ps) < 0.5 * chunk_span, "simulate: histogram range too long for chunking");

  const std::size_t ng = gates.size();
  std::vector<std::vector<CoincidenceHistogram>> per_chunk(n_chunks);
  // Clicks near each chunk's start and end, per gate.
  std::vector<std::vector<detail::GatedClicks>> heads(n_chunks), tails(n_chunks);
  detail::for_each_chunk(n_chunks, [&](std::uint64_t c) {
    const auto tags = detail::simulate_chunk(p, c);
    const auto start_ps = std::llround((detail::kTimeOriginNs + c * detail::kChunkCycles * p.period) * 1000.0);
    const auto end_ps = std::llround((detail::kTimeOriginNs + (c + 1) * detail::kChunkCycles * p.period) * 1000.0);
    per_chunk[c].resize(ng);
    heads[c].resize(ng);
    tails[c].resize(ng);
    for (std::size_t g = 0; g < ng; ++g) {
      const auto clicks = detail::gated_clicks(tags, gates[g]);
      auto h = CoincidenceHistogram::empty(axis);
      detail::accumulate_pairs(clicks.d1, clicks.d2, axis, h.counts);
      per_chunk[c][g] = std::move(h);
      heads[c][g] = detail::slice(clicks, std::numeric_limits<std::int64_t>::min(), start_ps + reach_ps);
      tails[c][g] = detail::slice(clicks, end_ps - reach_ps, std::numeric_limits<std::int64_t>::max());
    }
  });

  std::vector<CoincidenceHistogram> out;
  for (std::size_t g = 0; g < ng; ++g) {
    auto total = CoincidenceHistogram::empty(axis);
    for (std::uint64_t c = 0; c < n_chunks; ++c) total += per_chunk[c][g];
    for (std::uint64_t c = 0; c + 1 < n_chunks; ++c) {
      // pairs(tail + head) - pairs(tail) - pairs(head) = cross pairs only.
      const auto& a = tails[c][g];
      const auto& b = heads[c + 1][g];
      detail::GatedClicks both = a;
      both.d1.insert(both.d1.end(), b.d1.begin(), b.d1.end());
      both.d2.insert(both.d2.end(), b.d2.begin(), b.d2.end());
      std::vector<double> all(total.counts.size(), 0.0), only_a(all), only_b(all);
      detail::accumulate_pairs(both.d1, both.d2, axis, all);
      detail::accumulate_pairs(a.d1, a.d2, axis, only_a);
      detail::accumulate_pairs(b.d1, b.d2, axis, only_b);
      for (std::size_t i = 0; i < all.size(); ++i) total.counts[i] += all[i] - only_a[i] - only_b[i];
    }
    out.push_back(std::move(total));
  }
  return out;
}

inline CoincidenceHistogram simulate_histogram(const ExperimentConfig& cfg, const GateWindow& gate,
                                               const HistogramAxis& axis) {
  return simulate_histograms(cfg, {gate}, axis).front();
}

// ---------------------------------------------------------------------------
// Analytic expectation

// Expected HOM histogram of a config (pair-counting multi-photon term, exact
// chain statistics, shared single-click timing profile).
inline PeakShapeModel analytic_peak_model(const ExperimentConfig& cfg, const GateWindow& gate) {
  require(cfg.source.topology == Topology::kHom, "analytic model: only the HOM topology is modelled");
  const ChainStatistics ch = chain_statistics(cfg);
  const auto& ifm = cfg.ifm;
  const double scale = static_cast<double>(cfg.n_cycles) * ifm.eta1 * ifm.eta2 * ch.cross_pairs;
  const PeakAreas w =
      five_peak_weights(ch.signal_pair_fraction(), ch.effective_g(), ifm, 0.0, MultiPhotonTerm::kPairCounting);
  PeakShapeModel m;
  m.weights = {scale * w.minus2, scale * w.minus1, scale * w.zero, scale * w.plus1, scale * w.plus2};
  const double fringe = (1.0 - ifm.fringe_deficit) * (1.0 - ifm.fringe_deficit);
  m.coherent_weight = scale * ifm.t1 * ifm.r1() * 2.0 * ch.signal_pair_fraction() * fringe * ifm.t2 * ifm.r2();
  const CoherenceParams cp = CoherenceParams::from_emitter(cfg.emitter, ifm.delay_ns);
  m.decay = cp.decay;
  m.gamma = cp.gamma;
  m.splitting_ghz = cp.splitting_ghz;
  m.flip_fraction = ch.flip;
  m.overlap_scale = jitter_factor(ifm.arrival_jitter_ns, cfg.emitter.lifetime_ns);
  m.delay_ns = ifm.delay_ns;
  m.click_sigma_ns = std::sqrt(0.5 * ifm.arrival_jitter_ns * ifm.arrival_jitter_ns +
                               ifm.detector_jitter_ns * ifm.detector_jitter_ns);
  m.gate = gate;
  return m;
}

struct PeakChi2 {
  double chi2 = 0.0;
  int bins = 0;
  double reduced() const { return bins > 0 ? chi2 / bins : std::numeric_limits<double>::quiet_NaN(); }
};

struct McReport {
  bool degenerate = false;
  double chi2 = 0.0;
  int dof = 0;
  double reduced_chi2 = std::numeric_limits<double>::quiet_NaN();
  std::array<PeakChi2, 5> peaks{};  // -2dt, -dt, 0, +dt, +2dt
  std::vector<double> bin_contributions;  // (o - e)^2 / e, 0 where e < 5
  double observed_total = 0.0;
  double expected_total = 0.0;
  PeakAreas expected_areas;
  PeakAreas observed_areas;
};

// Pearson chi^2 of a histogram against a model scaled to the same total,
// over bins with expectation >= 5.
inline McReport compare_histograms(const CoincidenceHistogram& observed, const CoincidenceHistogram& expected_raw,
                                   double delay_ns, double halfwidth_ns = 20.0) {
  require(observed.axis == expected_raw.axis, "report: histogram axes differ");
  McReport r;
  r.observed_total = observed.total();
  r.expected_total = expected_raw.total();
  r.bin_contributions.assign(observed.counts.size(), 0.0);
  if (r.observed_total == 0.0 || r.expected_total == 0.0) {
    r.degenerate = true;
    return r;
  }
  const double k = r.observed_total / r.expected_total;
  const double centres[5] = {-2.0 * delay_ns, -delay_ns, 0.0, delay_ns, 2.0 * delay_ns};
  int used = 0;
  for (std::size_t i = 0; i < observed.counts.size(); ++i) {
    const double e = k * expected_raw.counts[i];
    if (e < 5.0) continue;
    const double d = observed.counts[i] - e;
    const double c = d * d / e;
    r.bin_contributions[i] = c;
    r.chi2 += c;
    ++used;
    const double tau = observed.axis.center(i);
    for (int p = 0; p < 5; ++p)
      if (std::abs(tau - centres[p]) <= halfwidth_ns) r.peaks[p].chi2 += c, ++r.peaks[p].bins;
  }
  r.dof = used - 1;
  r.reduced_chi2 = r.dof > 0 ? r.chi2 / r.dof : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// Fixed beat-fit ratios for an RF run: c2/c1 from the flip fraction, c3/c1
// from the analytic central peak with and without interference.
inline BeatFitSetup beat_setup_for(const ExperimentConfig& cfg, const GateWindow& gate) {
  const ChainStatistics ch = chain_statistics(cfg);
  require(ch.flip > 0.0 && ch.flip < 1.0, "beat setup: needs a spin-flip fraction strictly between 0 and 1");
  const HistogramAxis axis = HistogramAxis::for_five_peaks(cfg.ifm.delay_ns, 20.0, 0.1);
  PeakShapeModel full = analytic_peak_model(cfg, gate);
  full.flip_fraction = 0.0;
  full.overlap_scale = 1.0;
  full.gamma = 0.0;
  PeakShapeModel none = full;
  none.coherent_weight = 0.0;
  const double ratio =
      noise_to_interference_ratio(extract_peak_areas(predict_peak_shape(full, axis), cfg.ifm.delay_ns),
                                  extract_peak_areas(predict_peak_shape(none, axis), cfg.ifm.delay_ns));
  BeatFitSetup s;
  s.decay = cfg.emitter.decay_rate();
  s.gamma = CoherenceParams::from_emitter(cfg.emitter, cfg.ifm.delay_ns).gamma;
  s.same_line_ratio = (1.0 - ch.flip) / ch.flip;
  s.noise_ratio = (1.0 + s.same_line_ratio) * ratio;
  s.gate = gate;
  return s;
}

// Runs the simulation and compares it with the analytic model. A model may
// be supplied to test sensitivity to mismatched parameters.
inline McReport mc_vs_analytic_report(const ExperimentConfig& cfg, const GateWindow& gate, const HistogramAxis& axis,
                                      const std::optional<PeakShapeModel>& model = std::nullopt,
                                      double halfwidth_ns = 20.0) {
  const ChainStatistics ch = chain_statistics(cfg);
  const PeakShapeModel m = model.value_or(analytic_peak_model(cfg, gate));
  const CoincidenceHistogram expected = predict_peak_shape(m, axis);
  if (ch.degenerate()) {
    McReport r = compare_histograms(simulate_histogram(cfg, gate, axis), expected, cfg.ifm.delay_ns, halfwidth_ns);
    r.degenerate = true;
    return r;
  }
  const PeakAreas ea = extract_peak_areas(expected, cfg.ifm.delay_ns, halfwidth_ns);
  const double smallest = std::min({ea.minus2, ea.minus1, ea.plus1, ea.plus2});
  if (smallest < 100.0) {
    const double need = smallest > 0.0 ? std::ceil(cfg.n_cycles * 100.0 / smallest) : 0.0;
    throw ValidationError("report: undersampled run, smallest side peak expects " + std::to_string(smallest) +
                          " counts; need n_cycles >= " +
                          (need > 0.0 ? std::to_string(static_cast<std::uint64_t>(need)) : std::string("(unbounded)")));
  }
  const CoincidenceHistogram observed = simulate_histogram(cfg, gate, axis);
  McReport r = compare_histograms(observed, expected, cfg.ifm.delay_ns, halfwidth_ns);
  r.expected_areas = ea;
  r.observed_areas = extract_peak_areas(observed, cfg.ifm.delay_ns, halfwidth_ns);
  return r;
}

}  // namespace homsim
