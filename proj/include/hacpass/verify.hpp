#pragma once

// Trajectory-level checks of the incremental dissipation inequality
//   V(x(T), xbar(T)) - V(x(0), xbar(0)) <= int_0^T (u - ubar)^T (y - ybar) dt
// for a single closed-loop inverter, with the incremental storage of model.hpp.

#include "hacpass/integrate.hpp"
#include "hacpass/model.hpp"
#include "hacpass/smallsignal.hpp"

#include <cstdio>
#include <limits>
#include <ostream>
#include <random>
#include <utility>

namespace hacpass {

/// Bounds for randomly generated trajectory pairs.
struct InputSpec {
  double t_end = 0.1;  ///< s
  double dt = 20e-6;   ///< s
  std::size_t sample_every = 1;

  double reference_load_max = 0.0;  ///< A, radius of the random reference dq load current
  double i_dc_amplitude = 0.0;      ///< A, peak perturbation of the DC reference current
  double i_load_amplitude = 0.0;    ///< A, peak perturbation per alpha-beta component
  double bandwidth = 200.0;         ///< rad/s, highest perturbation frequency
  int tones = 3;

  double dv_dc0 = 0.0;    ///< V, initial DC voltage offset bound
  double dv_ac0 = 0.0;    ///< V, per component
  double di_ac0 = 0.0;    ///< A, per component
  double dtheta0 = 0.0;   ///< rad
  /// Initial DC voltage and angle offsets share a sign, so the eta coupling
  /// pushes the angle error outward. Used to probe non-passive tunings.
  bool adversarial = false;

  void validate() const {
    if (!(dt > 0.0) || !(t_end > 0.0)) throw std::invalid_argument("InputSpec: dt and t_end must be > 0");
    if (sample_every == 0) throw std::invalid_argument("InputSpec: sample_every must be >= 1");
    if (tones < 1) throw std::invalid_argument("InputSpec: tones must be >= 1");
    for (double b : {reference_load_max, i_dc_amplitude, i_load_amplitude, bandwidth, dv_dc0, dv_ac0, di_ac0, dtheta0})
      if (!(b >= 0.0)) throw std::invalid_argument("InputSpec: bounds must be >= 0");
  }
};

/// Sum of sinusoids with total peak amplitude at most `amplitude`.
struct ToneSignal {
  std::vector<double> amplitude, omega, phase;

  double operator()(double t) const {
    double s = 0.0;
    for (std::size_t k = 0; k < amplitude.size(); ++k) s += amplitude[k] * std::sin(omega[k] * t + phase[k]);
    return s;
  }

  static ToneSignal random(std::mt19937_64& rng, double peak, double bandwidth, int tones) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    ToneSignal sig;
    double total = 0.0;
    for (int k = 0; k < tones; ++k) {
      sig.amplitude.push_back(unit(rng));
      sig.omega.push_back(bandwidth * unit(rng));
      sig.phase.push_back(2.0 * kPi * unit(rng));
      total += sig.amplitude.back();
    }
    for (double& a : sig.amplitude) a *= total > 0.0 ? peak / total : 0.0;
    return sig;
  }
};

/// Simulates one inverter under time-varying port inputs; records states,
/// passivity inputs [i_dc_ref, -i_load] and outputs [v_dc, v_ac].
template <class InputFn>
Trajectory simulate_inverter(const InverterParams& p, const HacGains& g, const InverterState& x0, InputFn&& input,
                             double t_end, double dt, std::size_t sample_every = 1) {
  auto rhs = [&](double t, const VecX& x) -> VecX {
    return closed_loop_rhs(InverterState::from_vector(x), input(t), p, g, t).to_vector();
  };
  Trajectory tr = integrate(rhs, VecX(x0.to_vector()), 0.0, t_end, dt, std::span<const detail::NoEvent>{}, nullptr,
                            IntegrationOptions{sample_every});
  for (std::size_t k = 0; k < tr.size(); ++k) {
    const PortInput u = input(tr.times[k]);
    tr.inputs.push_back(VecX(u.passivity_input()));
    tr.outputs.push_back(VecX(port_output(InverterState::from_vector(tr.states[k])).to_vector()));
  }
  return tr;
}

struct TrajectoryPair {
  Trajectory perturbed;
  Trajectory reference;
  Equilibrium operating_point;  ///< dq setpoint equilibrium of the reference
};

/// Reference: the setpoint equilibrium orbit (v_dc = v_dc*, theta = theta*)
/// for a random dq load current, integrated from its exact initial state.
/// Perturbed: random initial offsets and random tone perturbations of both
/// port inputs. Deterministic per seed.
inline TrajectoryPair random_trajectory_pair(const InverterParams& p, const HacGains& g, const InputSpec& spec,
                                             std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double r = spec.reference_load_max * std::sqrt(unit(rng));
  const double a = 2.0 * kPi * unit(rng);
  const Equilibrium op = setpoint_equilibrium(p, g, r * unit_phasor(a));

  auto reference_input = [&](double t) {
    PortInput u;
    u.i_dc_ref = op.input_eq.i_dc_ref;
    u.i_load = rotate(op.input_eq.i_load, g.omega0 * t);
    return u;
  };
  InverterState ref0;
  ref0.v_dc = op.v_dc_eq;
  ref0.v_ac = op.v_dq_eq;
  ref0.i_ac = op.i_dq_eq;
  ref0.theta = op.theta_eq;

  InverterState x0 = ref0;
  double s_dc = sym(rng);
  double s_th = sym(rng);
  if (spec.adversarial && (s_dc < 0.0) != (s_th < 0.0)) s_th = -s_th;
  x0.v_dc += spec.dv_dc0 * s_dc;
  x0.theta += spec.dtheta0 * s_th;
  for (int c = 0; c < 2; ++c) {
    x0.v_ac(c) += spec.dv_ac0 * sym(rng);
    x0.i_ac(c) += spec.di_ac0 * sym(rng);
  }
  const ToneSignal dc = ToneSignal::random(rng, spec.i_dc_amplitude, spec.bandwidth, spec.tones);
  const ToneSignal la = ToneSignal::random(rng, spec.i_load_amplitude, spec.bandwidth, spec.tones);
  const ToneSignal lb = ToneSignal::random(rng, spec.i_load_amplitude, spec.bandwidth, spec.tones);
  auto perturbed_input = [&](double t) {
    PortInput u = reference_input(t);
    u.i_dc_ref += dc(t);
    u.i_load += Vec2(la(t), lb(t));
    return u;
  };

  TrajectoryPair out;
  out.operating_point = op;
  out.reference = simulate_inverter(p, g, ref0, reference_input, spec.t_end, spec.dt, spec.sample_every);
  out.perturbed = simulate_inverter(p, g, x0, perturbed_input, spec.t_end, spec.dt, spec.sample_every);
  return out;
}

// ---------------------------------------------------------------------------
// Quadrature

/// Composite Simpson on a uniform grid; an odd number of intervals ends with
/// a Simpson 3/8 panel, a single interval falls back to the trapezoid.
inline std::vector<double> cumulative_simpson(const std::vector<double>& f, double h) {
  std::vector<double> c(f.size(), 0.0);
  for (std::size_t k = 1; k < f.size(); ++k) {
    if (k == 1) {
      c[k] = 0.5 * h * (f[0] + f[1]);
    } else if (k % 2 == 0) {
      const double prev = k == 2 ? 0.0 : c[k - 2];
      c[k] = prev + h / 3.0 * (f[k - 2] + 4.0 * f[k - 1] + f[k]);
    } else {
      const double prev = k == 3 ? 0.0 : c[k - 3];
      c[k] = prev + 3.0 * h / 8.0 * (f[k - 3] + 3.0 * f[k - 2] + 3.0 * f[k - 1] + f[k]);
    }
  }
  // Odd k uses c[k-3], which for k >= 5 must be the even-index Simpson value;
  // it is, since k-3 is even.
  return c;
}

inline double simpson(const std::vector<double>& f, double h) {
  return f.size() < 2 ? 0.0 : cumulative_simpson(f, h).back();
}

// ---------------------------------------------------------------------------
// Dissipation checks

struct DissipationReport {
  double storage_start = 0.0;  ///< J
  double storage_end = 0.0;    ///< J
  double supplied = 0.0;       ///< J, int (du)^T (dy) dt over the whole horizon
  double slack = 0.0;          ///< J, supplied - (storage_end - storage_start)
  double strict_margin = 0.0;  ///< J, worst over horizons of slack - rho int |dy|^2
  double worst_slack = 0.0;    ///< J, min over horizons [0, t_k] of the slack
  double worst_time = 0.0;     ///< s, t_k attaining worst_slack
  double tol = 0.0;            ///< J
  double rho = 0.0;
  double rho_max = 0.0;  ///< largest rho for which the output-strict inequality holds within tol
  bool passed = false;
  bool outside_validated_region = false;  ///< |dtheta| reached 2 pi somewhere
  bool reference_off_setpoint = false;    ///< reference angle or DC voltage left its setpoint

  double violation() const noexcept { return -worst_slack; }
};

/// Per-sample series for plotting and pointwise checks.
struct DissipationSeries {
  std::vector<double> times, storage, supply_rate, output_sq;
};

namespace detail {

inline void require_same_grid(const Trajectory& a, const Trajectory& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("dissipation_check: trajectories have different grids");
  const double h = a.times[1] - a.times[0];
  for (std::size_t k = 0; k < a.size(); ++k)
    if (std::abs(a.times[k] - b.times[k]) > 1e-9 * h)
      throw std::invalid_argument("dissipation_check: trajectories have different grids");
  if (a.inputs.size() != a.size() || b.inputs.size() != b.size() || a.outputs.size() != a.size() ||
      b.outputs.size() != b.size())
    throw std::invalid_argument("dissipation_check: trajectories lack recorded inputs/outputs");
}

}  // namespace detail

inline DissipationSeries dissipation_series(const Trajectory& a, const Trajectory& b, const InverterParams& p,
                                            double lambda) {
  detail::require_same_grid(a, b);
  DissipationSeries s;
  s.times = a.times;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto e = ErrorState::between(InverterState::from_vector(a.states[k]), InverterState::from_vector(b.states[k]));
    s.storage.push_back(storage(e, p, lambda));
    const VecX dy = a.outputs[k] - b.outputs[k];
    s.supply_rate.push_back((a.inputs[k] - b.inputs[k]).dot(dy));
    s.output_sq.push_back(dy.squaredNorm());
  }
  return s;
}

/// Power scale for the tolerance model: peak reference port power, peak
/// incremental supply rate and peak storage rate (finite differences of the
/// sampled storage). The last term dominates when lambda is large.
inline double power_scale(const Trajectory& a, const Trajectory& b, const InverterParams& p, double lambda) {
  const auto s = dissipation_series(a, b, p, lambda);
  const double h = s.times[1] - s.times[0];
  double ref = 0.0, inc = 0.0, rate = 0.0;
  for (std::size_t k = 0; k < b.size(); ++k) {
    ref = std::max(ref, std::abs(b.inputs[k].dot(b.outputs[k])));
    inc = std::max(inc, std::abs(s.supply_rate[k]));
    if (k > 0) rate = std::max(rate, std::abs(s.storage[k] - s.storage[k - 1]) / h);
  }
  return ref + inc + rate;
}

inline constexpr double kToleranceCoefficient = 10.0;  ///< 1/s^2

/// tol = 10 dt^2 T P_scale, with dt the integration step.
inline double default_tolerance(const Trajectory& a, const Trajectory& b, const InverterParams& p, double lambda,
                                double dt) {
  const double horizon = a.times.back() - a.times.front();
  return kToleranceCoefficient * dt * dt * horizon * power_scale(a, b, p, lambda);
}

/// Output-strict form: storage growth bounded by supply minus rho int |dy|^2,
/// checked on every horizon [0, t_k]. rho = 0 is the plain dissipation check.
inline DissipationReport output_strict_check(const Trajectory& a, const Trajectory& b, const InverterParams& p,
                                             const HacGains& g, double lambda, double rho, double tol) {
  if (!(rho >= 0.0)) throw std::invalid_argument("output_strict_check: rho must be >= 0");
  if (!(tol >= 0.0)) throw std::invalid_argument("output_strict_check: tol must be >= 0");
  const auto s = dissipation_series(a, b, p, lambda);
  const double h = s.times[1] - s.times[0];
  const auto supplied = cumulative_simpson(s.supply_rate, h);
  const auto out_sq = cumulative_simpson(s.output_sq, h);

  DissipationReport r;
  r.tol = tol;
  r.rho = rho;
  r.storage_start = s.storage.front();
  r.storage_end = s.storage.back();
  r.supplied = supplied.back();
  r.slack = r.supplied - (r.storage_end - r.storage_start);
  r.worst_slack = std::numeric_limits<double>::infinity();
  r.strict_margin = std::numeric_limits<double>::infinity();
  r.rho_max = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < s.times.size(); ++k) {
    const double slack = supplied[k] - (s.storage[k] - s.storage[0]);
    if (slack < r.worst_slack) {
      r.worst_slack = slack;
      r.worst_time = s.times[k];
    }
    r.strict_margin = std::min(r.strict_margin, slack - rho * out_sq[k]);
    if (out_sq[k] > 0.0) r.rho_max = std::min(r.rho_max, (slack + tol) / out_sq[k]);
  }
  r.rho_max = std::max(r.rho_max, 0.0);
  if (r.worst_slack < -tol) r.rho_max = 0.0;

  for (std::size_t k = 0; k < a.size(); ++k) {
    const double dtheta = a.states[k](5) - b.states[k](5);
    if (!(std::abs(dtheta) < 2.0 * kPi)) r.outside_validated_region = true;
    const double v_scale = std::max(1.0, std::abs(g.v_dc_star));
    if (std::abs(b.states[k](0) - g.v_dc_star) > 1e-6 * v_scale ||
        std::abs(b.states[k](5) - g.theta_star(b.times[k])) > 1e-6)
      r.reference_off_setpoint = true;
  }
  r.passed = r.strict_margin >= -tol && std::isfinite(r.slack);
  return r;
}

inline DissipationReport dissipation_check(const Trajectory& a, const Trajectory& b, const InverterParams& p,
                                           const HacGains& g, double lambda, double tol) {
  return output_strict_check(a, b, p, g, lambda, 0.0, tol);
}

struct PointwiseReport {
  std::size_t samples = 0;
  std::size_t within = 0;
  double worst_excess = -std::numeric_limits<double>::infinity();  ///< J over a two-step window
  double fraction() const noexcept { return samples ? static_cast<double>(within) / samples : 1.0; }
};

/// Differential form on two-step windows: V(t_{k+1}) - V(t_{k-1}) against
/// the Simpson supply over the same window, with window tolerance
/// 10 dt^2 (2 h) P_scale.
inline PointwiseReport pointwise_check(const Trajectory& a, const Trajectory& b, const InverterParams& p,
                                       double lambda, double dt) {
  const auto s = dissipation_series(a, b, p, lambda);
  const double h = s.times[1] - s.times[0];
  const double tol = kToleranceCoefficient * dt * dt * 2.0 * h * power_scale(a, b, p, lambda);
  PointwiseReport r;
  for (std::size_t k = 1; k + 1 < s.times.size(); ++k) {
    const double supplied = h / 3.0 * (s.supply_rate[k - 1] + 4.0 * s.supply_rate[k] + s.supply_rate[k + 1]);
    const double excess = (s.storage[k + 1] - s.storage[k - 1]) - supplied;
    r.worst_excess = std::max(r.worst_excess, excess);
    ++r.samples;
    if (excess <= tol) ++r.within;
  }
  return r;
}

inline void write_dissipation_csv(const DissipationSeries& s, std::ostream& os) {
  os << "time_s,storage_J,supply_rate_W\n";
  char buf[96];
  for (std::size_t k = 0; k < s.times.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", s.times[k], s.storage[k], s.supply_rate[k]);
    os << buf;
  }
}

}  // namespace hacpass
