#pragma once

// Bounded Levenberg-Marquardt least squares and the model fits built on it.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/AutoDiff>

#include "homsim/core_model.hpp"
#include "homsim/correlation_model.hpp"
#include "homsim/dephasing.hpp"
#include "homsim/spin_dynamics.hpp"
#include "homsim/units.hpp"

namespace homsim {

struct DataPoint {
  double x = 0.0;
  double y = 0.0;
  double sigma = 1.0;
};

struct FitOptions {
  int max_iterations = 300;
  double relative_tolerance = 1e-14;  // on accepted chi^2 decrease
  double step_tolerance = 1e-12;      // relative parameter change
  double initial_damping = 1e-3;
  std::vector<double> lower;  // empty: unbounded
  std::vector<double> upper;
};

struct FitResult {
  std::vector<double> params;
  std::vector<double> sigmas;  // empty unless converged
  Eigen::MatrixXd covariance;
  double chi2 = 0.0;
  double reduced_chi2 = 0.0;
  int dof = 0;
  int iterations = 0;
  bool converged = false;
  bool rank_deficient = false;
  std::vector<bool> at_bound;
  std::vector<double> chi2_history;  // one entry per accepted step, starting at init
};

class FitError : public NumericalError {
 public:
  FitError(const std::string& what, FitResult best) : NumericalError(what), best_(std::move(best)) {}
  const FitResult& best() const { return best_; }

 private:
  FitResult best_;
};

using ResidualFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
// Jacobian of the residual vector with respect to the parameters.
using JacobianFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>;

namespace detail {

inline Eigen::VectorXd clamp_to_bounds(Eigen::VectorXd p, const FitOptions& opt) {
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!opt.lower.empty()) p(i) = std::max(p(i), opt.lower[i]);
    if (!opt.upper.empty()) p(i) = std::min(p(i), opt.upper[i]);
  }
  return p;
}

// Trial point for a step that may leave the box. A component that would cross
// a bound goes 90% of the way to it instead, and lands on it only once the gap is
// below the step tolerance. Projecting straight onto the bound can park a
// parameter where the model no longer depends on it.
inline Eigen::VectorXd bounded_trial(const Eigen::VectorXd& p, const Eigen::VectorXd& step, const FitOptions& opt) {
  Eigen::VectorXd t = p + step;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double snap = opt.step_tolerance * (std::abs(p(i)) + 1.0);
    if (!opt.lower.empty() && t(i) < opt.lower[i]) {
      const double gap = p(i) - opt.lower[i];
      t(i) = gap <= snap ? opt.lower[i] : p(i) - 0.9 * gap;
    }
    if (!opt.upper.empty() && t(i) > opt.upper[i]) {
      const double gap = opt.upper[i] - p(i);
      t(i) = gap <= snap ? opt.upper[i] : p(i) + 0.9 * gap;
    }
  }
  return t;
}

// Pseudo-inverse of J^T J; parameters with no curvature get infinite variance.
inline Eigen::MatrixXd curvature_inverse(const Eigen::MatrixXd& a, bool& deficient) {
  const Eigen::Index n = a.rows();
  Eigen::VectorXd d = a.diagonal().cwiseMax(0.0).cwiseSqrt();
  const double dmax = d.size() ? d.maxCoeff() : 0.0;
  std::vector<Eigen::Index> live;
  for (Eigen::Index i = 0; i < n; ++i)
    if (d(i) > 1e-12 * dmax && d(i) > 0.0) live.push_back(i);
  deficient = static_cast<Eigen::Index>(live.size()) < n;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (std::find(live.begin(), live.end(), i) == live.end()) out(i, i) = std::numeric_limits<double>::infinity();
  const auto m = static_cast<Eigen::Index>(live.size());
  if (m == 0) return out;
  Eigen::MatrixXd c(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) c(i, j) = a(live[i], live[j]) / (d(live[i]) * d(live[j]));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  const double emax = es.eigenvalues().maxCoeff();
  Eigen::VectorXd inv(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double e = es.eigenvalues()(i);
    if (e > 1e-13 * emax) {
      inv(i) = 1.0 / e;
    } else {
      inv(i) = 0.0;
      deficient = true;
    }
  }
  const Eigen::MatrixXd ci = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) out(live[i], live[j]) = ci(i, j) / (d(live[i]) * d(live[j]));
  return out;
}

}  // namespace detail

// Minimizes |r(p)|^2. Steps are projected onto the bounds and only accepted
// when chi^2 decreases.
inline FitResult levenberg_marquardt(const ResidualFn& residual, const JacobianFn& jacobian,
                                     const std::vector<double>& init, const FitOptions& opt = {}) {
  const auto n = static_cast<Eigen::Index>(init.size());
  require(n >= 1, "fit: need at least one parameter");
  require(opt.lower.empty() || static_cast<Eigen::Index>(opt.lower.size()) == n, "fit: lower bounds size");
  require(opt.upper.empty() || static_cast<Eigen::Index>(opt.upper.size()) == n, "fit: upper bounds size");
  Eigen::VectorXd p = detail::clamp_to_bounds(Eigen::Map<const Eigen::VectorXd>(init.data(), n), opt);
  Eigen::VectorXd r = residual(p);
  require(r.size() >= n, "fit: fewer data points than free parameters");
  require(r.allFinite(), "fit: model is not finite at the initial parameters");
  double chi2 = r.squaredNorm();
  FitResult res;
  res.chi2_history.push_back(chi2);
  double lambda = opt.initial_damping;
  bool converged = false;
  int it = 0;
  Eigen::MatrixXd jac = jacobian(p);
  for (; it < opt.max_iterations && !converged; ++it) {
    const Eigen::MatrixXd a = jac.transpose() * jac;
    const Eigen::VectorXd grad = jac.transpose() * r;
    if (chi2 == 0.0 || grad.lpNorm<Eigen::Infinity>() == 0.0) {
      converged = true;
      break;
    }
    Eigen::VectorXd diag = a.diagonal();
    const double floor = 1e-12 * std::max(diag.maxCoeff(), 1e-300);
    diag = diag.cwiseMax(floor);
    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd m = a;
      m.diagonal() += lambda * diag;
      const Eigen::VectorXd step = m.ldlt().solve(-grad);
      const Eigen::VectorXd trial = detail::bounded_trial(p, step, opt);
      const Eigen::VectorXd moved = trial - p;
      const bool tiny = moved.norm() <= opt.step_tolerance * (p.norm() + opt.step_tolerance);
      Eigen::VectorXd rt = residual(trial);
      const double chi2_trial = rt.allFinite() ? rt.squaredNorm() : std::numeric_limits<double>::infinity();
      if (chi2_trial < chi2) {
        const double drop = chi2 - chi2_trial;
        p = trial;
        r = std::move(rt);
        chi2 = chi2_trial;
        res.chi2_history.push_back(chi2);
        lambda = std::max(lambda / 10.0, 1e-15);
        accepted = true;
        if (drop <= opt.relative_tolerance * chi2 || tiny || chi2 == 0.0) converged = true;
        jac = jacobian(p);
      } else {
        lambda *= 10.0;
        if (tiny || lambda > 1e16) {
          // No descent left at machine precision: stationary point.
          converged = true;
          break;
        }
      }
    }
  }
  res.params.assign(p.data(), p.data() + n);
  res.iterations = it;
  res.converged = converged;
  res.chi2 = chi2;
  res.dof = static_cast<int>(r.size() - n);
  res.reduced_chi2 = res.dof > 0 ? chi2 / res.dof : 0.0;
  res.at_bound.assign(n, false);
  for (Eigen::Index i = 0; i < n; ++i)
    res.at_bound[i] = (!opt.lower.empty() && p(i) <= opt.lower[i]) || (!opt.upper.empty() && p(i) >= opt.upper[i]);
  if (converged) {
    const Eigen::MatrixXd a = jac.transpose() * jac;
    res.covariance = detail::curvature_inverse(a, res.rank_deficient);
    if (res.dof > 0) res.covariance *= res.reduced_chi2;
    res.sigmas.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = res.covariance(i, i);
      res.sigmas[i] = std::isinf(v) ? v : std::sqrt(std::max(v, 0.0));
    }
  }
  return res;
}

inline const FitResult& require_converged(const FitResult& r, const std::string& what) {
  if (!r.converged) throw FitError(what + ": no convergence within the iteration limit", r);
  return r;
}

// Central-difference Jacobian of a residual function.
inline JacobianFn finite_difference_jacobian(ResidualFn residual, double relative_step = 1e-6) {
  return [residual = std::move(residual), relative_step](const Eigen::VectorXd& p) {
    const Eigen::VectorXd r0 = residual(p);
    Eigen::MatrixXd j(r0.size(), p.size());
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double h = relative_step * std::max(std::abs(p(k)), 1e-3);
      Eigen::VectorXd up = p, dn = p;
      up(k) += h;
      dn(k) -= h;
      j.col(k) = (residual(up) - residual(dn)) / (2.0 * h);
    }
    return j;
  };
}

// Vector model: takes a parameter vector of scalar type S, returns model
// values (same order as the data). N is the number of parameters.
template <int N, class Model>
struct AutoDiffProblem {
  using Deriv = Eigen::Matrix<double, N, 1>;
  using Scalar = Eigen::AutoDiffScalar<Deriv>;

  Model model;
  std::vector<double> y;
  std::vector<double> sigma;

  Eigen::VectorXd residual(const Eigen::VectorXd& p) const {
    std::vector<double> pv(p.data(), p.data() + p.size());
    const std::vector<double> f = model(pv);
    Eigen::VectorXd r(static_cast<Eigen::Index>(y.size()));
    for (std::size_t i = 0; i < y.size(); ++i) r(i) = (f[i] - y[i]) / sigma[i];
    return r;
  }
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& p) const {
    std::vector<Scalar> pv(N);
    for (int k = 0; k < N; ++k) pv[k] = Scalar(p(k), Deriv::Unit(N, k));
    const std::vector<Scalar> f = model(pv);
    Eigen::MatrixXd j(static_cast<Eigen::Index>(y.size()), N);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const Deriv& d = f[i].derivatives();
      for (int k = 0; k < N; ++k) j(i, k) = d.size() == N ? d(k) / sigma[i] : 0.0;
    }
    return j;
  }
  FitResult fit(const std::vector<double>& init, const FitOptions& opt = {}) const {
    for (double s : sigma) require(s > 0.0, "fit: every sigma must be > 0");
    require(y.size() == sigma.size(), "fit: y and sigma sizes differ");
    return levenberg_marquardt([this](const Eigen::VectorXd& p) { return residual(p); },
                               [this](const Eigen::VectorXd& p) { return jacobian(p); }, init, opt);
  }
  // Gradient of chi^2 = |r|^2.
  Eigen::VectorXd objective_gradient(const std::vector<double>& p) const {
    const Eigen::VectorXd pv = Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
    return 2.0 * jacobian(pv).transpose() * residual(pv);
  }
  double objective(const std::vector<double>& p) const {
    return residual(Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()))).squaredNorm();
  }
};

template <int N, class Model>
AutoDiffProblem<N, Model> make_problem(Model model, std::vector<double> y, std::vector<double> sigma) {
  return AutoDiffProblem<N, Model>{std::move(model), std::move(y), std::move(sigma)};
}

// Pointwise model f(x, p) over (x, y, sigma) data with automatic derivatives.
template <int N, class PointModel>
auto make_point_problem(PointModel f, const std::vector<DataPoint>& data) {
  std::vector<double> xs, ys, ss;
  for (const auto& d : data) xs.push_back(d.x), ys.push_back(d.y), ss.push_back(d.sigma);
  auto model = [f = std::move(f), xs](const auto& p) {
    using S = typename std::decay_t<decltype(p)>::value_type;
    std::vector<S> out;
    out.reserve(xs.size());
    for (double x : xs) out.push_back(f(x, p));
    return out;
  };
  return make_problem<N>(std::move(model), std::move(ys), std::move(ss));
}

// Generic entry point for a scalar model without derivatives; the Jacobian
// comes from central differences.
inline FitResult fit_least_squares(const std::function<double(double, const std::vector<double>&)>& model,
                                   const std::vector<DataPoint>& data, const std::vector<double>& init,
                                   const FitOptions& opt = {}) {
  for (const auto& d : data) require(d.sigma > 0.0, "fit: every sigma must be > 0");
  ResidualFn residual = [&model, &data](const Eigen::VectorXd& p) {
    const std::vector<double> pv(p.data(), p.data() + p.size());
    Eigen::VectorXd r(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) r(i) = (model(data[i].x, pv) - data[i].y) / data[i].sigma;
    return r;
  };
  return levenberg_marquardt(residual, finite_difference_jacobian(residual), init, opt);
}

// ---------------------------------------------------------------------------
// Model fits

// I(E) = I0 (1 - exp(-E/E0)); parameters (I0, E0).
inline FitResult fit_saturation(const std::vector<DataPoint>& data, std::vector<double> init = {}) {
  require(data.size() >= 2, "saturation fit: need at least two points");
  if (init.empty()) {
    double ymax = 0.0, xmax = 0.0;
    for (const auto& d : data) ymax = std::max(ymax, d.y), xmax = std::max(xmax, d.x);
    init = {ymax, 0.3 * xmax};
  }
  auto problem = make_point_problem<2>(
      [](double e, const auto& p) {
        using std::exp;
        using S = std::decay_t<decltype(p[0])>;
        return S(p[0] * (1.0 - exp(-e / p[1])));
      },
      data);
  FitOptions opt;
  opt.lower = {0.0, 1e-9};
  return require_converged(problem.fit(init, opt), "saturation fit");
}

// One-parameter fit of the gated visibility curve; points are (gate width, V, sigma).
inline FitResult fit_gamma_from_visibility(const std::vector<DataPoint>& points, double decay) {
  require(points.size() >= 2, "gamma fit: need at least two points");
  for (const auto& d : points) require(d.x > 0.0 && d.y > 0.0 && d.y <= 1.0, "gamma fit: need dt > 0, V in (0, 1]");
  // Start from the widest gate, where V approaches Gamma/(Gamma + gamma).
  const auto widest = std::max_element(points.begin(), points.end(), [](auto& a, auto& b) { return a.x < b.x; });
  const double init = std::max(0.0, decay * (1.0 / widest->y - 1.0));
  auto problem = make_point_problem<1>(
      [decay](double dt, const auto& p) { return gated_visibility(decay, p[0], dt); }, points);
  FitOptions opt;
  opt.lower = {0.0};
  return require_converged(problem.fit({init}, opt), "gamma fit");
}

// gamma'_max(T) = A dE^3 n(dE, T); rows are (T, gamma'_max in ns^-1, sigma).
inline FitResult fit_vibronic_prefactor(const std::vector<DataPoint>& rows, const VibronicParams& base = {}) {
  require(!rows.empty(), "vibronic fit: need at least one row");
  VibronicParams unit = base;
  unit.prefactor = 1.0;
  double sfy = 0.0, sff = 0.0;
  for (const auto& r : rows) {
    const double f = dephasing_rate(unit, r.x);
    sfy += f * r.y / (r.sigma * r.sigma);
    sff += f * f / (r.sigma * r.sigma);
  }
  auto problem = make_point_problem<1>(
      [unit](double t, const auto& p) { return p[0] * dephasing_rate(unit, t); }, rows);
  FitOptions opt;
  opt.lower = {0.0};
  return require_converged(problem.fit({0.5 * sfy / sff}, opt), "vibronic fit");
}

struct RabiCurves {
  std::vector<double> durations_ns;
  std::vector<double> from_half;        // flipped population starting in +-1/2, peak-normalized
  std::vector<double> from_three_half;  // flipped population starting in +-3/2, peak-normalized
  double sigma = 0.01;
};

inline std::vector<double> normalize_to_peak(std::vector<double> v) {
  const double m = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  for (auto& x : v) x = m > 1e-12 ? x / m : 0.0;
  return v;
}

// Model curves for (Omega, Bz) with every other spin parameter from base.
inline RabiCurves rabi_model(const SpinParams& base, double rabi, double field_mt,
                             const std::vector<double>& durations) {
  SpinParams sp = base;
  sp.rabi = rabi;
  sp.field_mt = field_mt;
  const auto half = phase_averaged_populations(DensityMatrix4::subspace_half(), sp, durations);
  const auto three = phase_averaged_populations(DensityMatrix4::subspace_three_half(), sp, durations);
  RabiCurves c;
  c.durations_ns = durations;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    c.from_half.push_back(half[i].three_half);
    c.from_three_half.push_back(three[i].half);
  }
  c.from_half = normalize_to_peak(c.from_half);
  c.from_three_half = normalize_to_peak(c.from_three_half);
  return c;
}

// Joint two-parameter fit (Omega in rad/ns, Bz in mT) of both curves.
inline FitResult fit_rabi(const RabiCurves& data, const SpinParams& base, std::vector<double> init = {}) {
  require(data.durations_ns.size() == data.from_half.size() && data.from_half.size() == data.from_three_half.size(),
          "rabi fit: curve sizes differ");
  require(data.sigma > 0.0, "rabi fit: sigma must be > 0");
  auto spread = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()) - *std::min_element(v.begin(), v.end());
  };
  if (spread(data.from_half) < 1e-6 && spread(data.from_three_half) < 1e-6)
    throw FitError("rabi fit: both curves are flat, the drive parameters are not identifiable", FitResult{});
  if (init.empty()) init = {base.rabi, base.field_mt};
  ResidualFn residual = [&data, &base](const Eigen::VectorXd& p) {
    const RabiCurves m = rabi_model(base, p(0), p(1), data.durations_ns);
    const auto n = data.durations_ns.size();
    Eigen::VectorXd r(static_cast<Eigen::Index>(2 * n));
    for (std::size_t i = 0; i < n; ++i) {
      r(i) = (m.from_half[i] - data.from_half[i]) / data.sigma;
      r(n + i) = (m.from_three_half[i] - data.from_three_half[i]) / data.sigma;
    }
    return r;
  };
  FitOptions opt;
  opt.lower = {0.0, 0.0};
  opt.relative_tolerance = 1e-12;
  return require_converged(levenberg_marquardt(residual, finite_difference_jacobian(residual, 1e-5), init, opt),
                           "rabi fit");
}

struct BeatFitSetup {
  double decay = 1.0 / 6.0;
  double gamma = 0.0;          // fixed
  double same_line_ratio = 0;  // c2/c1, fixed
  double noise_ratio = 0;      // c3/c1, fixed
  GateWindow gate{1.5, 18.0};
  int smoothing = 3;
  double fit_min_ns = -10.0;   // fitted tau range
  double fit_max_ns = 10.0;
  double splitting_start_ghz = 0.5;
  double splitting_stop_ghz = 1.5;
  double splitting_step_ghz = 0.05;
};

// Parameters (c1, t0, delta-nu, sigma_det) of the beat pattern; multi-start over delta-nu.
inline FitResult fit_beat(const CoincidenceHistogram& h, const BeatFitSetup& setup) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    const double c = h.axis.center(i);
    if (c >= setup.fit_min_ns && c <= setup.fit_max_ns) idx.push_back(i);
  }
  require(idx.size() >= 8, "beat fit: too few bins inside the fit range");
  std::vector<double> y, sigma;
  for (std::size_t i : idx) {
    y.push_back(h.counts[i]);
    sigma.push_back(std::sqrt(std::max(h.counts[i], 1.0)));
  }

  // Model on bins [first, last] of the histogram axis, compared at idx, with
  // the plain moving average. The data were smoothed over their whole axis and
  // rescaled to keep the total; that factor rides on c1 and is taken out at the end.
  const std::size_t margin = static_cast<std::size_t>(setup.smoothing);
  const std::size_t first = idx.front() >= margin ? idx.front() - margin : 0;
  const std::size_t last = std::min(idx.back() + margin, h.counts.size() - 1);
  const HistogramAxis sub{h.axis.tau_min + first * h.axis.bin_width, h.axis.tau_min + (last + 1) * h.axis.bin_width,
                          h.axis.bin_width};
  auto params_of = [&setup](const auto& p) {
    using S = typename std::decay_t<decltype(p)>::value_type;
    return BeatPatternParams<S>{S(setup.gamma), p[2], p[0], S(setup.same_line_ratio * p[0]),
                                S(setup.noise_ratio * p[0]), p[1], p[3]};
  };
  const auto model = [&setup, sub, params_of, offset = idx.front() - first, n = idx.size()](const auto& p) {
    using S = typename std::decay_t<decltype(p)>::value_type;
    const auto raw = beat_pattern<S>(sub, setup.decay, params_of(p), setup.gate, 1);
    const std::vector<S> sm = moving_average_unscaled(raw, setup.smoothing);
    return std::vector<S>(sm.begin() + offset, sm.begin() + offset + n);
  };
  auto problem = make_problem<4>(model, y, sigma);
  FitOptions opt;
  opt.lower = {1e-12, -2.0, 0.2, 0.0};
  opt.upper = {std::numeric_limits<double>::infinity(), 2.0, 3.0, 1.0};
  // Amplitude start: match the data sum with unit c1.
  double data_sum = 0.0;
  for (double v : y) data_sum += v;
  FitResult best;
  bool have = false;
  for (double nu = setup.splitting_start_ghz; nu <= setup.splitting_stop_ghz + 1e-9; nu += setup.splitting_step_ghz) {
    const std::vector<double> unit = model(std::vector<double>{1.0, 0.0, nu, 0.15});
    double model_sum = 0.0;
    for (double v : unit) model_sum += v;
    const double c1 = model_sum > 0.0 ? data_sum / model_sum : 1.0;
    FitResult r = problem.fit({c1, 0.0, nu, 0.15}, opt);
    if (!r.converged) continue;
    if (!have || r.chi2 < best.chi2) best = std::move(r), have = true;
  }
  if (!have) throw FitError("beat fit: no start converged", best);
  if (setup.smoothing > 1) {
    // rescale factor of the full-axis smoothing; it does not depend on c1
    const auto full = beat_pattern<double>(h.axis, setup.decay, params_of(best.params), setup.gate, 1);
    const auto plain = moving_average_unscaled(full, setup.smoothing);
    const double before = std::accumulate(full.begin(), full.end(), 0.0);
    const double after = std::accumulate(plain.begin(), plain.end(), 0.0);
    if (after > 0.0) {
      const double k = before / after;
      best.params[0] /= k;
      if (!best.sigmas.empty()) best.sigmas[0] /= k;
      if (best.covariance.size() > 0) {
        best.covariance.row(0) /= k;
        best.covariance.col(0) /= k;
      }
    }
  }
  return best;
}

struct LorentzianLine {
  double amplitude = 0.0;
  double center = 0.0;
  double fwhm = 0.0;
  double amplitude_sigma = 0.0;
  double center_sigma = 0.0;
  double fwhm_sigma = 0.0;
  Measurement deconvolved_fwhm;
};

struct LorentzianFit {
  std::vector<LorentzianLine> lines;
  double background = 0.0;
  FitResult raw;
  bool overlapping = false;  // covariance inflated by 2 when set
};

template <class S>
S lorentzian_sum(double x, const std::vector<S>& p) {
  // p = (background, [amplitude, center, fwhm] * n)
  S v = p[0];
  for (std::size_t k = 1; k + 2 < p.size(); k += 3) {
    const S hw = 0.5 * p[k + 2];
    const S d = x - p[k + 1];
    v += p[k] * hw * hw / (d * d + hw * hw);
  }
  return v;
}

namespace detail {

template <int N>
FitResult fit_lorentzian_fixed(const std::vector<DataPoint>& data, const std::vector<double>& init,
                               const FitOptions& opt) {
  auto problem = make_point_problem<N>([](double x, const auto& p) { return lorentzian_sum(x, p); }, data);
  return problem.fit(init, opt);
}

}  // namespace detail

// Sum of Lorentzians plus a constant background. Widths and centers in the
// units of x; deconvolved widths subtract instrument_fwhm.
inline LorentzianFit fit_lorentzian_lines(const std::vector<DataPoint>& spectrum, int n_lines,
                                          double instrument_fwhm = 0.0, std::vector<double> init = {}) {
  require(n_lines >= 1 && n_lines <= 3, "lorentzian fit: 1 to 3 lines supported");
  require(spectrum.size() >= static_cast<std::size_t>(3 * n_lines + 1), "lorentzian fit: too few points");
  for (std::size_t i = 1; i < spectrum.size(); ++i)
    require(spectrum[i].x > spectrum[i - 1].x, "lorentzian fit: frequency grid must increase");
  const double span = spectrum.back().x - spectrum.front().x;
  if (init.empty()) {
    double ymin = spectrum.front().y;
    for (const auto& d : spectrum) ymin = std::min(ymin, d.y);
    init.push_back(ymin);
    // Local maxima by height.
    std::vector<std::size_t> peaks;
    for (std::size_t i = 1; i + 1 < spectrum.size(); ++i)
      if (spectrum[i].y > spectrum[i - 1].y && spectrum[i].y >= spectrum[i + 1].y) peaks.push_back(i);
    std::sort(peaks.begin(), peaks.end(), [&](auto a, auto b) { return spectrum[a].y > spectrum[b].y; });
    for (int k = 0; k < n_lines; ++k) {
      if (k < static_cast<int>(peaks.size())) {
        const std::size_t i = peaks[k];
        const double half = 0.5 * (spectrum[i].y + ymin);
        std::size_t lo = i, hi = i;
        while (lo > 0 && spectrum[lo].y > half) --lo;
        while (hi + 1 < spectrum.size() && spectrum[hi].y > half) ++hi;
        init.insert(init.end(), {spectrum[i].y - ymin, spectrum[i].x,
                                 std::max(spectrum[hi].x - spectrum[lo].x, 2.0 * (spectrum[1].x - spectrum[0].x))});
      } else {
        // No further maximum: a weak line beside the first one.
        init.insert(init.end(), {0.05 * init[1], init[2] + 0.5 * init[3], init[3]});
      }
    }
  }
  FitOptions opt;
  opt.lower.assign(1 + 3 * n_lines, -std::numeric_limits<double>::infinity());
  opt.upper.assign(1 + 3 * n_lines, std::numeric_limits<double>::infinity());
  for (int k = 0; k < n_lines; ++k) {
    opt.lower[1 + 3 * k] = 0.0;
    opt.lower[3 + 3 * k] = 1e-9 * span;
  }
  FitResult r;
  switch (n_lines) {
    case 1: r = detail::fit_lorentzian_fixed<4>(spectrum, init, opt); break;
    case 2: r = detail::fit_lorentzian_fixed<7>(spectrum, init, opt); break;
    default: r = detail::fit_lorentzian_fixed<10>(spectrum, init, opt); break;
  }
  require_converged(r, "lorentzian fit");
  LorentzianFit out;
  out.background = r.params[0];
  for (int k = 0; k < n_lines; ++k) {
    LorentzianLine l;
    l.amplitude = r.params[1 + 3 * k];
    l.center = r.params[2 + 3 * k];
    l.fwhm = r.params[3 + 3 * k];
    out.lines.push_back(l);
  }
  for (int a = 0; a < n_lines; ++a)
    for (int b = a + 1; b < n_lines; ++b) {
      const auto& la = out.lines[a];
      const auto& lb = out.lines[b];
      const bool both = la.amplitude > 0.0 && lb.amplitude > 0.0;
      if (both && std::abs(la.center - lb.center) < 0.5 * (la.fwhm + lb.fwhm)) out.overlapping = true;
    }
  if (out.overlapping) {
    r.covariance *= 2.0;
    for (auto& s : r.sigmas) s *= std::sqrt(2.0);
  }
  for (int k = 0; k < n_lines; ++k) {
    auto& l = out.lines[k];
    l.amplitude_sigma = r.sigmas[1 + 3 * k];
    l.center_sigma = r.sigmas[2 + 3 * k];
    l.fwhm_sigma = r.sigmas[3 + 3 * k];
    l.deconvolved_fwhm = l.fwhm >= instrument_fwhm
                             ? deconvolve_lorentzian(Measurement{l.fwhm, l.fwhm_sigma}, Measurement{instrument_fwhm, 0.0})
                             : Measurement{0.0, l.fwhm_sigma};
  }
  out.raw = std::move(r);
  return out;
}

}  // namespace homsim
