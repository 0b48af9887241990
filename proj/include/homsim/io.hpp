#pragma once

// File formats: time-tag CSV, histogram CSV, JSON run configs and the
// provenance sidecar written next to every output.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "homsim/core_model.hpp"
#include "homsim/fitting.hpp"
#include "homsim/monte_carlo.hpp"
#include "homsim/units.hpp"

namespace homsim {

inline constexpr const char* kVersion = "0.1.0";

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Time tags

inline void write_timetags(std::ostream& os, const TimeTagStream& s) {
  os << "channel,time_ps\n";
  for (const auto& r : s.records) os << static_cast<unsigned>(r.channel) << ',' << r.time_ps << '\n';
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool parse_int64(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stoll(s, &pos);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stod(s, &pos);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

// Line numbers in errors are 1-based and count the header.
inline TimeTagStream read_timetags(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "time tags: missing header");
  require(detail::trim(line) == "channel,time_ps", "time tags line 1: header must be 'channel,time_ps'");
  TimeTagStream s;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    const std::string where = "time tags line " + std::to_string(n) + ": ";
    require(cells.size() == 2, where + "expected 2 fields");
    std::int64_t ch = 0, t = 0;
    require(detail::parse_int64(cells[0], ch), where + "channel is not an integer");
    require(ch >= 0 && ch <= 2, where + "channel " + cells[0] + " outside {0,1,2}");
    require(detail::parse_int64(cells[1], t), where + "time_ps '" + cells[1] + "' is not an integer");
    require(s.records.empty() || t >= s.records.back().time_ps, where + "timestamp decreases");
    s.records.push_back({static_cast<Channel>(ch), t});
  }
  return s;
}

inline void write_timetags(const std::string& path, const TimeTagStream& s) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot write " + path);
  write_timetags(os, s);
}

inline TimeTagStream read_timetags(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot read " + path);
  return read_timetags(is);
}

// ---------------------------------------------------------------------------
// Histograms

inline void write_histogram(std::ostream& os, const CoincidenceHistogram& h) {
  os << "tau_ns,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    os << format_double(h.axis.center(i)) << ',' << format_double(h.counts[i]) << '\n';
}

inline CoincidenceHistogram read_histogram(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "histogram: missing header");
  require(detail::trim(line) == "tau_ns,count", "histogram line 1: header must be 'tau_ns,count'");
  std::vector<double> centres, counts;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    const std::string where = "histogram line " + std::to_string(n) + ": ";
    require(cells.size() == 2, where + "expected 2 fields");
    double c = 0.0, v = 0.0;
    require(detail::parse_double(cells[0], c) && detail::parse_double(cells[1], v), where + "non-numeric field");
    require(v >= 0.0, where + "negative count");
    require(centres.empty() || c > centres.back(), where + "tau_ns must increase");
    centres.push_back(c);
    counts.push_back(v);
  }
  require(centres.size() >= 2, "histogram: need at least two bins");
  const double w = (centres.back() - centres.front()) / static_cast<double>(centres.size() - 1);
  for (std::size_t i = 1; i < centres.size(); ++i)
    require(std::abs(centres[i] - centres[i - 1] - w) < 1e-6 * w, "histogram: bins must be evenly spaced");
  HistogramAxis axis{centres.front() - 0.5 * w, centres.back() + 0.5 * w, w};
  require(axis.bins() == counts.size(), "histogram: inconsistent bin count");
  return CoincidenceHistogram{axis, 1, counts};
}

inline void write_histogram(const std::string& path, const CoincidenceHistogram& h) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot write " + path);
  write_histogram(os, h);
}

inline CoincidenceHistogram read_histogram(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot read " + path);
  return read_histogram(is);
}

// x,y,sigma rows for the generic fits.
inline std::vector<DataPoint> read_points(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "data: missing header");
  std::vector<DataPoint> out;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    const std::string where = "data line " + std::to_string(n) + ": ";
    require(cells.size() == 2 || cells.size() == 3, where + "expected x,y[,sigma]");
    DataPoint d;
    require(detail::parse_double(cells[0], d.x) && detail::parse_double(cells[1], d.y), where + "non-numeric field");
    if (cells.size() == 3) require(detail::parse_double(cells[2], d.sigma), where + "non-numeric sigma");
    require(d.sigma > 0.0, where + "sigma must be > 0");
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config

struct AnalysisConfig {
  std::vector<GateWindow> gates;  // empty: ungated [0, dt]
  double bin_width_ns = 0.1;
  int smoothing = 1;
  double integration_halfwidth_ns = 20.0;
  std::optional<double> jitter_sigma_ns;  // for the visibility correction; defaults to arrival jitter

  void validate() const {
    for (const auto& g : gates) g.validate();
    require(bin_width_ns > 0.0, "config: analysis.bin_width_ns must be > 0");
    require(smoothing >= 1 && smoothing % 2 == 1, "config: analysis.smoothing must be a positive odd integer");
    require(integration_halfwidth_ns > 0.0, "config: analysis.integration_halfwidth_ns must be > 0");
  }
};

struct RunConfig {
  ExperimentConfig experiment;
  AnalysisConfig analysis;
};

namespace detail {

using nlohmann::json;

class ConfigReader {
 public:
  ConfigReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), "config: '" + name() + "' must be an object");
  }

  double number(const char* key, double fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    const auto& v = j_.at(key);
    require(v.is_number(), "config: key '" + name(key) + "' must be a number");
    return v.get<double>();
  }
  std::optional<double> optional_number(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return std::nullopt;
    require(j_.at(key).is_number(), "config: key '" + name(key) + "' must be a number");
    return j_.at(key).get<double>();
  }
  std::uint64_t count(const char* key, std::uint64_t fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    const auto& v = j_.at(key);
    require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0),
            "config: key '" + name(key) + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }
  bool flag(const char* key, bool fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    require(j_.at(key).is_boolean(), "config: key '" + name(key) + "' must be true or false");
    return j_.at(key).get<bool>();
  }
  std::string text(const char* key, const std::string& fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    require(j_.at(key).is_string(), "config: key '" + name(key) + "' must be a string");
    return j_.at(key).get<std::string>();
  }
  std::optional<ConfigReader> section(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return ConfigReader(j_.at(key), name(key));
  }
  const json* raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  bool has(const char* key) const { return j_.contains(key); }
  // Call last: any key not consumed is an error.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(seen_.count(it.key()) == 1, "config: unknown key '" + name(it.key()) + "'");
  }
  std::string name(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline double splitter_t(ConfigReader& r, const char* t_key, const char* ratio_key, double fallback) {
  require(!(r.has(t_key) && r.has(ratio_key)),
          "config: give only one of '" + r.name(t_key) + "' and '" + r.name(ratio_key) + "'");
  if (r.has(ratio_key)) {
    const double ratio = r.number(ratio_key, 1.0);
    require(ratio > 0.0, "config: key '" + r.name(ratio_key) + "' must be > 0");
    r.number(t_key, 0.0);
    return InterferometerParams::transmissivity(ratio);
  }
  r.number(ratio_key, 0.0);
  return r.number(t_key, fallback);
}

}  // namespace detail

// Rates are given as "/2pi" MHz values, times in ns.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::ConfigReader root(j, "");
  RunConfig rc;
  auto& x = rc.experiment;
  if (auto s = root.section("emitter")) {
    auto& e = x.emitter;
    e.lifetime_ns = s->number("lifetime_ns", e.lifetime_ns);
    e.pure_dephasing = mhz_to_rate(s->number("pure_dephasing_mhz", rate_to_mhz(e.pure_dephasing)));
    e.diffusion_amplitude = mhz_to_rate(s->number("diffusion_amplitude_mhz", rate_to_mhz(e.diffusion_amplitude)));
    if (auto tc = s->optional_number("diffusion_time_ns")) e.diffusion_time_ns = *tc;
    e.splitting_ghz = s->number("splitting_ghz", e.splitting_ghz);
    e.saturation_energy_pj = s->number("saturation_energy_pj", e.saturation_energy_pj);
    e.metastable_lifetime_ns = s->number("metastable_lifetime_ns", e.metastable_lifetime_ns);
    e.isc_probability = s->number("isc_probability", e.isc_probability);
    s->finish();
  }
  if (auto s = root.section("interferometer")) {
    auto& f = x.ifm;
    f.delay_ns = s->number("delay_ns", f.delay_ns);
    f.t1 = detail::splitter_t(*s, "t1", "t1_over_r1", f.t1);
    f.t2 = detail::splitter_t(*s, "t2", "t2_over_r2", f.t2);
    f.fringe_deficit = s->number("fringe_deficit", f.fringe_deficit);
    f.eta1 = s->number("eta1", f.eta1);
    f.eta2 = s->number("eta2", f.eta2);
    f.detector_jitter_ns = s->number("detector_jitter_ns", f.detector_jitter_ns);
    f.arrival_jitter_ns = s->number("arrival_jitter_ns", f.arrival_jitter_ns);
    s->finish();
  }
  if (auto s = root.section("source")) {
    auto& src = x.source;
    src.pulse_energy_pj = s->number("pulse_energy_pj", src.pulse_energy_pj);
    src.collection_efficiency = s->number("collection_efficiency", src.collection_efficiency);
    if (auto sn = s->optional_number("signal_to_noise")) src.signal_to_noise = *sn;
    const std::string topo = s->text("topology", "hom");
    require(topo == "hom" || topo == "hbt", "config: key 'source.topology' must be \"hom\" or \"hbt\"");
    src.topology = topo == "hom" ? Topology::kHom : Topology::kHbt;
    s->finish();
  }
  if (auto s = root.section("rf")) {
    auto& rf = x.rf;
    rf.enabled = s->flag("enabled", true);
    rf.start_ns = s->number("start_ns", rf.start_ns);
    rf.duration_ns = s->number("duration_ns", rf.duration_ns);
    rf.spin.rabi = mhz_to_rate(s->number("rabi_mhz", rate_to_mhz(rf.spin.rabi)));
    rf.spin.field_mt = s->number("field_mt", rf.spin.field_mt);
    rf.spin.frequency_ghz = 1e-3 * s->number("frequency_mhz", 1e3 * rf.spin.frequency_ghz);
    rf.spin.zero_field = mhz_to_rate(s->number("zero_field_mhz", rate_to_mhz(rf.spin.zero_field)));
    rf.spin.dt = s->number("dt_ns", rf.spin.dt);
    const auto n_phase = s->count("n_phase", static_cast<std::uint64_t>(rf.spin.n_phase));
    require(n_phase >= 1 && n_phase <= 100000, "config: key 'rf.n_phase' must lie in [1, 100000]");
    rf.spin.n_phase = static_cast<int>(n_phase);
    rf.flip_probability = s->optional_number("flip_probability");
    s->finish();
  }
  x.n_cycles = root.count("cycles", x.n_cycles);
  x.seed = root.count("seed", x.seed);
  if (auto s = root.section("analysis")) {
    auto& a = rc.analysis;
    if (const auto* gates = s->raw("gates")) {
      require(gates->is_array(), "config: key 'analysis.gates' must be an array");
      for (std::size_t i = 0; i < gates->size(); ++i) {
        detail::ConfigReader g((*gates)[i], "analysis.gates[" + std::to_string(i) + "]");
        GateWindow w{g.number("t_start", 0.0), g.number("t_stop", 0.0)};
        g.finish();
        require(w.t_start >= 0.0 && w.t_start < w.t_stop,
                "config: '" + g.name() + "' needs 0 <= t_start < t_stop");
        a.gates.push_back(w);
      }
    }
    a.bin_width_ns = s->number("bin_width_ns", a.bin_width_ns);
    const auto sm = s->count("smoothing", static_cast<std::uint64_t>(a.smoothing));
    require(sm >= 1 && sm % 2 == 1 && sm < 1001, "config: key 'analysis.smoothing' must be a positive odd integer");
    a.smoothing = static_cast<int>(sm);
    a.integration_halfwidth_ns = s->number("integration_halfwidth_ns", a.integration_halfwidth_ns);
    a.jitter_sigma_ns = s->optional_number("jitter_sigma_ns");
    s->finish();
  }
  root.finish();
  x.validate();
  rc.analysis.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config " + path + ": malformed JSON: " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Provenance

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// <out>.provenance.json with the hash of the canonical config text.
inline void write_provenance(const std::string& out_path, const std::string& command, const std::string& config_text,
                             std::optional<std::uint64_t> seed) {
  nlohmann::json j;
  j["command"] = command;
  j["config_hash"] = "fnv1a64:" + hex64(fnv1a64(config_text));
  j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
  j["version"] = kVersion;
  std::ofstream os(out_path + ".provenance.json");
  require(static_cast<bool>(os), "cannot write " + out_path + ".provenance.json");
  os << j.dump(2) << '\n';
}

}  // namespace homsim
