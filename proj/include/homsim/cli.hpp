#pragma once

// Command-line front end. cli_dispatch returns 0 on success, 1 on invalid
// input and 2 when a computation fails numerically.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "homsim/core_model.hpp"
#include "homsim/corrections.hpp"
#include "homsim/correlation_model.hpp"
#include "homsim/dephasing.hpp"
#include "homsim/fitting.hpp"
#include "homsim/io.hpp"
#include "homsim/monte_carlo.hpp"
#include "homsim/spin_dynamics.hpp"

namespace homsim {

namespace detail {

using nlohmann::json;

inline json measurement_json(const Measurement& m) { return json{{"value", m.value}, {"sigma", m.sigma}}; }

inline json areas_json(const PeakAreas& a) {
  return json{{"minus2", a.minus2}, {"minus1", a.minus1}, {"zero", a.zero}, {"plus1", a.plus1}, {"plus2", a.plus2}};
}

inline json fit_json(const std::string& model, const std::vector<std::string>& names, const FitResult& r) {
  json j;
  j["model"] = model;
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["chi2"] = r.chi2;
  j["reduced_chi2"] = r.reduced_chi2;
  j["dof"] = r.dof;
  j["rank_deficient"] = r.rank_deficient;
  for (std::size_t i = 0; i < names.size(); ++i) {
    j["params"][names[i]] = r.params[i];
    j["sigmas"][names[i]] = i < r.sigmas.size() && std::isfinite(r.sigmas[i]) ? json(r.sigmas[i]) : json(nullptr);
    j["at_bound"][names[i]] = static_cast<bool>(r.at_bound[i]);
  }
  return j;
}

// Output sink: the --out file (plus provenance sidecar) or stdout.
struct Sink {
  std::string path;
  std::ostream& fallback;

  void emit(const std::string& text, const std::string& command, const std::string& config_text,
            std::optional<std::uint64_t> seed) const {
    if (path.empty()) {
      fallback << text;
      return;
    }
    std::ofstream os(path);
    require(static_cast<bool>(os), "cannot write " + path);
    os << text;
    write_provenance(path, command, config_text, seed);
  }
};

struct LoadedConfig {
  RunConfig run;
  std::string canonical;  // hashed into the provenance record
};

inline LoadedConfig load_config_or_default(const std::string& path) {
  LoadedConfig lc;
  if (path.empty()) {
    lc.canonical = "{}";
    return lc;
  }
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot read config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path + ": malformed JSON: " + e.what());
  }
  lc.run = parse_run_config(j);
  lc.canonical = j.dump();
  return lc;
}

inline std::string args_text(int argc, const char* const* argv) {
  std::string s;
  for (int i = 1; i < argc; ++i) s += std::string(argv[i]) + '\n';
  return s;
}

inline std::vector<DataPoint> load_points(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot read " + path);
  return read_points(is);
}

}  // namespace detail

inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  using detail::json;
  CLI::App app{"homsim: HOM interference simulation and analysis"};
  app.require_subcommand(1);
  std::string config_path, out_path, input;
  std::optional<std::uint64_t> seed, cycles;
  std::optional<double> t_start, t_stop, bin_width;
  std::optional<int> smoothing;

  auto common_out = [&](CLI::App* sc) { sc->add_option("--out", out_path, "output file (default stdout)"); };
  auto gate_opts = [&](CLI::App* sc) {
    sc->add_option("--t-start", t_start, "gate open after the laser sync [ns]");
    sc->add_option("--t-stop", t_stop, "gate close [ns]");
    sc->add_option("--bin-width", bin_width, "histogram bin width [ns]");
    sc->add_option("--smoothing", smoothing, "odd moving-average order");
  };

  auto* sim = app.add_subcommand("simulate", "config -> time-tag CSV");
  sim->add_option("--config", config_path, "run config (JSON)")->required();
  sim->add_option("--seed", seed, "override the config seed");
  sim->add_option("--cycles", cycles, "override the number of cycles");
  common_out(sim);

  auto* hist = app.add_subcommand("hist", "time-tag CSV -> coincidence histogram CSV");
  hist->add_option("input", input, "time-tag CSV")->required();
  hist->add_option("--config", config_path, "run config for dt and analysis defaults");
  gate_opts(hist);
  common_out(hist);

  auto* vis = app.add_subcommand("visibility", "histogram CSV -> raw and corrected visibility (JSON)");
  vis->add_option("input", input, "histogram CSV")->required();
  vis->add_option("--config", config_path, "run config with SN, splitters, fringe and jitter");
  common_out(vis);

  double max_duration = 60.0, step = 0.5;
  auto* rabi = app.add_subcommand("rabi", "spin parameters -> flipped-population curves (CSV)");
  rabi->add_option("--config", config_path, "run config (rf section)");
  rabi->add_option("--max-duration", max_duration, "longest pulse [ns]");
  rabi->add_option("--step", step, "duration step [ns]");
  common_out(rabi);

  std::string model;
  int n_lines = 1;
  double instrument = 0.0;
  std::optional<double> gamma_mhz, same_line_ratio, noise_ratio;
  auto* fit = app.add_subcommand("fit", "data + config -> fit result (JSON)");
  // "[model] data": CLI11 fills positionals left to right, so both go in one list
  std::vector<std::string> fit_args;
  fit->add_option("args", fit_args, "[model] data; model is saturation | gamma | vibronic | rabi | beat | lorentzian")
      ->required()
      ->expected(1, 2);
  fit->add_option("--model", model, "model, instead of the positional one");
  fit->add_option("--config", config_path, "run config");
  fit->add_option("--lines", n_lines, "lorentzian: number of lines");
  fit->add_option("--instrument", instrument, "lorentzian: instrument FWHM [MHz]");
  fit->add_option("--gamma-mhz", gamma_mhz, "beat: fixed coherence decay [/2pi MHz] (default: from the config)");
  fit->add_option("--same-line-ratio", same_line_ratio, "beat: fixed c2/c1 (default: from the RF flip fraction)");
  fit->add_option("--noise-ratio", noise_ratio, "beat: fixed c3/c1 (default: from the analytic peak model)");
  gate_opts(fit);
  common_out(fit);

  std::optional<double> temperature, linewidth, row_gamma;
  auto* deph = app.add_subcommand("dephasing", "temperature rows -> both extraction branches (JSON)");
  deph->add_option("input", input, "CSV temperature_k,linewidth_mhz,gamma_mhz (default: published series)");
  deph->add_option("--temperature", temperature, "single row: temperature [K]");
  deph->add_option("--linewidth", linewidth, "single row: PLE linewidth [MHz]");
  deph->add_option("--gamma-mhz", row_gamma, "single row: fitted gamma [/2pi MHz]");
  deph->add_option("--config", config_path, "run config for lifetime and dt");
  common_out(deph);

  auto* rep = app.add_subcommand("report", "Monte Carlo vs analytic histogram statistics (JSON)");
  rep->add_option("--config", config_path, "run config")->required();
  rep->add_option("--seed", seed, "override the config seed");
  rep->add_option("--cycles", cycles, "override the number of cycles");
  gate_opts(rep);
  common_out(rep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  if (*fit) {
    if (fit_args.size() == 2 && !model.empty() && model != fit_args[0]) {
      err << "fit: model given twice ('" << fit_args[0] << "' and '" << model << "')\n";
      return 1;
    }
    if (fit_args.size() == 2) model = fit_args[0];
    input = fit_args.back();
  }
  const std::string command = app.get_subcommands().front()->get_name();
  const detail::Sink sink{out_path, out};
  try {
    auto lc = detail::load_config_or_default(config_path);
    auto& cfg = lc.run.experiment;
    const auto& an = lc.run.analysis;
    if (seed) cfg.seed = *seed;
    if (cycles) cfg.n_cycles = *cycles;
    cfg.validate();
    const std::string prov_text = lc.canonical + '\n' + detail::args_text(argc, argv);

    GateWindow gate = an.gates.empty() ? GateWindow{0.0, cfg.ifm.delay_ns} : an.gates.front();
    if (t_start) gate.t_start = *t_start;
    if (t_stop) gate.t_stop = *t_stop;
    const double bw = bin_width.value_or(an.bin_width_ns);
    const int sm = smoothing.value_or(an.smoothing);

    if (*sim) {
      require(!out_path.empty(), "simulate: --out is required");
      const TimeTagStream tags = simulate_timetags(cfg);
      std::ostringstream os;
      write_timetags(os, tags);
      sink.emit(os.str(), command, prov_text, cfg.seed);
    } else if (*hist) {
      const TimeTagStream tags = read_timetags(input);
      const auto axis = HistogramAxis::for_five_peaks(cfg.ifm.delay_ns, an.integration_halfwidth_ns, bw);
      const auto h = build_coincidence_histogram(tags, gate, axis, sm);
      std::ostringstream os;
      write_histogram(os, h);
      sink.emit(os.str(), command, prov_text, std::nullopt);
    } else if (*vis) {
      const auto h = read_histogram(input);
      const PeakAreas areas = extract_peak_areas(h, cfg.ifm.delay_ns, an.integration_halfwidth_ns);
      const Measurement raw = raw_visibility(areas);
      const double jitter =
          jitter_factor(an.jitter_sigma_ns.value_or(cfg.ifm.arrival_jitter_ns), cfg.emitter.lifetime_ns);
      const auto corr =
          correct_visibility(CorrectionInputs::from_interferometer(raw, cfg.source.signal_to_noise, cfg.ifm, jitter));
      json j;
      j["areas"] = detail::areas_json(areas);
      j["raw"] = detail::measurement_json(raw);
      j["corrected"] = {{"value", corr.value}, {"sigma", corr.sigma}, {"over_corrected", corr.over_corrected}};
      j["max_raw"] = max_raw_visibility(cfg.source.signal_to_noise, cfg.ifm, jitter);
      sink.emit(j.dump(2) + "\n", command, prov_text, std::nullopt);
    } else if (*rabi) {
      require(step > 0.0 && max_duration >= 0.0, "rabi: need --step > 0 and --max-duration >= 0");
      std::vector<double> durations;
      for (std::size_t k = 0; k * step <= max_duration + 1e-9; ++k) durations.push_back(k * step);
      const auto& sp = cfg.rf.spin;
      const auto half = phase_averaged_populations(DensityMatrix4::subspace_half(), sp, durations);
      const auto three = phase_averaged_populations(DensityMatrix4::subspace_three_half(), sp, durations);
      std::ostringstream os;
      os << "duration_ns,flipped_from_half,flipped_from_three_half,flipped_mean\n";
      for (std::size_t i = 0; i < durations.size(); ++i)
        os << format_double(durations[i]) << ',' << format_double(half[i].three_half) << ','
           << format_double(three[i].half) << ',' << format_double(0.5 * (half[i].three_half + three[i].half))
           << '\n';
      sink.emit(os.str(), command, prov_text, std::nullopt);
    } else if (*fit) {
      json j;
      if (model == "saturation") {
        const auto r = fit_saturation(detail::load_points(input));
        j = detail::fit_json(model, {"i0", "e0_pj"}, r);
      } else if (model == "gamma") {
        const auto r = fit_gamma_from_visibility(detail::load_points(input), cfg.emitter.decay_rate());
        j = detail::fit_json(model, {"gamma_per_ns"}, r);
        j["gamma_mhz"] = rate_to_mhz(r.params[0]);
      } else if (model == "vibronic") {
        auto pts = detail::load_points(input);
        for (auto& p : pts) p.y = mhz_to_rate(p.y), p.sigma = mhz_to_rate(p.sigma);
        const auto r = fit_vibronic_prefactor(pts);
        j = detail::fit_json(model, {"prefactor_per_ns_mev3"}, r);
        j["prefactor_mhz_mev3"] = rate_to_mhz(r.params[0]);
        VibronicParams vp;
        vp.prefactor = r.params[0];
        j["critical_temperature_k"] = critical_temperature(vp, cfg.emitter.decay_rate());
      } else if (model == "lorentzian") {
        const auto lf = fit_lorentzian_lines(detail::load_points(input), n_lines, instrument);
        j["model"] = model;
        j["background"] = lf.background;
        j["overlapping"] = lf.overlapping;
        j["converged"] = lf.raw.converged;
        j["reduced_chi2"] = lf.raw.reduced_chi2;
        for (const auto& l : lf.lines)
          j["lines"].push_back({{"amplitude", l.amplitude},
                                {"center", l.center},
                                {"center_sigma", l.center_sigma},
                                {"fwhm", l.fwhm},
                                {"fwhm_sigma", l.fwhm_sigma},
                                {"deconvolved_fwhm", detail::measurement_json(l.deconvolved_fwhm)}});
      } else if (model == "beat") {
        const auto h = read_histogram(input);
        const GateWindow beat_gate{t_start.value_or(an.gates.empty() ? 1.5 : an.gates.front().t_start),
                                   t_stop.value_or(an.gates.empty() ? 18.0 : an.gates.front().t_stop)};
        BeatFitSetup setup;
        if (!(gamma_mhz && same_line_ratio && noise_ratio)) {
          require(cfg.rf.enabled, "fit beat: without an rf config give --gamma-mhz, --same-line-ratio and --noise-ratio");
          setup = beat_setup_for(cfg, beat_gate);
        }
        setup.decay = cfg.emitter.decay_rate();
        if (gamma_mhz) setup.gamma = mhz_to_rate(*gamma_mhz);
        if (same_line_ratio) setup.same_line_ratio = *same_line_ratio;
        if (noise_ratio) setup.noise_ratio = *noise_ratio;
        setup.gate = beat_gate;
        setup.smoothing = smoothing.value_or(an.smoothing);  // must match how the histogram was smoothed
        const auto r = fit_beat(h, setup);
        j = detail::fit_json(model, {"c1", "t0_ns", "splitting_ghz", "sigma_det_ns"}, r);
      } else if (model == "rabi") {
        std::ifstream is(input);
        require(static_cast<bool>(is), "cannot read " + input);
        std::string line;
        std::getline(is, line);
        RabiCurves curves;
        std::size_t n = 1;
        while (std::getline(is, line)) {
          ++n;
          if (detail::trim(line).empty()) continue;
          const auto cells = detail::split_csv(line);
          double d = 0, a = 0, b = 0;
          require(cells.size() >= 3 && detail::parse_double(cells[0], d) && detail::parse_double(cells[1], a) &&
                      detail::parse_double(cells[2], b),
                  "rabi data line " + std::to_string(n) + ": expected duration,from_half,from_three_half");
          curves.durations_ns.push_back(d);
          curves.from_half.push_back(a);
          curves.from_three_half.push_back(b);
        }
        curves.from_half = normalize_to_peak(curves.from_half);
        curves.from_three_half = normalize_to_peak(curves.from_three_half);
        const auto r = fit_rabi(curves, cfg.rf.spin);
        j = detail::fit_json(model, {"rabi_per_ns", "field_mt"}, r);
        j["rabi_mhz"] = rate_to_mhz(r.params[0]);
      } else {
        throw ValidationError("fit: unknown model '" + model +
                              "' (saturation, gamma, vibronic, rabi, beat, lorentzian)");
      }
      sink.emit(j.dump(2) + "\n", command, prov_text, std::nullopt);
    } else if (*deph) {
      struct Row {
        double t, lw, g;
      };
      std::vector<Row> rows;
      if (temperature || linewidth || row_gamma) {
        require(temperature && linewidth && row_gamma, "dephasing: --temperature, --linewidth and --gamma-mhz go together");
        rows.push_back({*temperature, *linewidth, *row_gamma});
      } else if (!input.empty()) {
        std::ifstream is(input);
        require(static_cast<bool>(is), "cannot read " + input);
        std::string line;
        std::getline(is, line);
        std::size_t n = 1;
        while (std::getline(is, line)) {
          ++n;
          if (detail::trim(line).empty()) continue;
          const auto c = detail::split_csv(line);
          Row r{};
          require(c.size() == 3 && detail::parse_double(c[0], r.t) && detail::parse_double(c[1], r.lw) &&
                      detail::parse_double(c[2], r.g),
                  "dephasing line " + std::to_string(n) + ": expected temperature_k,linewidth_mhz,gamma_mhz");
          rows.push_back(r);
        }
      } else {
        for (const auto& rec : published_temperature_series())
          rows.push_back({rec.temperature_k, rec.linewidth_mhz, 2.0 * rec.max_dephasing_mhz});
      }
      const double decay = cfg.emitter.decay_rate();
      json j;
      for (const auto& r : rows) {
        const auto row = analyze_row(r.t, r.lw, mhz_to_rate(r.g), decay, cfg.ifm.delay_ns);
        json jr;
        jr["temperature_k"] = r.t;
        jr["linewidth_mhz"] = r.lw;
        jr["gamma_mhz"] = r.g;
        jr["max_pure_dephasing_mhz"] = rate_to_mhz(row.dephasing_branch.max_pure_dephasing);
        jr["diffusion_amplitude_mhz"] = rate_to_mhz(row.dephasing_branch.diffusion_amplitude);
        jr["max_diffusion_amplitude_mhz"] = rate_to_mhz(row.diffusion_branch.max_diffusion_amplitude);
        jr["min_correlation_time_ns"] = row.diffusion_branch.min_correlation_time_ns
                                            ? json(*row.diffusion_branch.min_correlation_time_ns)
                                            : json(nullptr);
        j["rows"].push_back(jr);
      }
      sink.emit(j.dump(2) + "\n", command, prov_text, std::nullopt);
    } else if (*rep) {
      const auto axis = HistogramAxis::for_five_peaks(cfg.ifm.delay_ns, an.integration_halfwidth_ns, bw);
      const McReport r = mc_vs_analytic_report(cfg, gate, axis, std::nullopt, an.integration_halfwidth_ns);
      json j;
      j["degenerate"] = r.degenerate;
      j["chi2"] = r.chi2;
      j["dof"] = r.dof;
      j["reduced_chi2"] = std::isfinite(r.reduced_chi2) ? json(r.reduced_chi2) : json(nullptr);
      const char* names[5] = {"minus2", "minus1", "zero", "plus1", "plus2"};
      for (int p = 0; p < 5; ++p) {
        const double red = r.peaks[p].reduced();
        j["peaks"][names[p]] = {{"chi2", r.peaks[p].chi2},
                                {"bins", r.peaks[p].bins},
                                {"reduced_chi2", std::isfinite(red) ? json(red) : json(nullptr)}};
      }
      j["observed_total"] = r.observed_total;
      j["expected_total"] = r.expected_total;
      j["observed_areas"] = detail::areas_json(r.observed_areas);
      j["expected_areas"] = detail::areas_json(r.expected_areas);
      if (!r.degenerate && r.observed_areas.minus1 + r.observed_areas.plus1 > 0.0)
        j["raw_visibility"] = detail::measurement_json(raw_visibility(r.observed_areas));
      sink.emit(j.dump(2) + "\n", command, prov_text, cfg.seed);
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace homsim
