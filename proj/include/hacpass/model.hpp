#pragma once

// Averaged two-level inverter under hybrid-angle control (HAC), written in
// the stationary alpha-beta frame with a power-invariant Clarke transform, so
// port power is the plain inner product of current and voltage vectors.

#include "hacpass/types.hpp"

#include <stdexcept>
#include <string>

namespace hacpass {

/// Physical constants of one inverter, SI units throughout.
struct InverterParams {
  double c_dc = 1.0;   ///< DC link capacitance (F)
  double g_dc = 0.0;   ///< DC link conductance (S)
  double c_f = 1.0;    ///< AC filter capacitance (F)
  double g_f = 0.0;    ///< AC shunt conductance (S)
  double l_f = 1.0;    ///< filter inductance (H)
  double r_f = 1.0;    ///< filter resistance (Ohm)
  double mu = 0.0;     ///< modulation magnitude, in [0, 1]
  double kappa = 0.0;  ///< DC-side proportional current gain (S)

  /// Effective DC conductance seen by the DC link once the proportional
  /// current control is closed.
  double g_dc_eff() const noexcept { return g_dc + kappa; }

  void validate() const {
    auto require = [](bool ok, const char* msg) {
      if (!ok) throw std::invalid_argument(std::string("InverterParams: ") + msg);
    };
    require(std::isfinite(c_dc) && c_dc > 0.0, "c_dc must be > 0");
    require(std::isfinite(c_f) && c_f > 0.0, "c_f must be > 0");
    require(std::isfinite(l_f) && l_f > 0.0, "l_f must be > 0");
    require(std::isfinite(r_f) && r_f > 0.0, "r_f must be > 0");
    require(std::isfinite(g_dc) && g_dc >= 0.0, "g_dc must be >= 0");
    require(std::isfinite(g_f) && g_f >= 0.0, "g_f must be >= 0");
    require(std::isfinite(kappa) && kappa >= 0.0, "kappa must be >= 0");
    require(mu >= 0.0 && mu <= 1.0, "mu must lie in [0, 1]");
  }
};

/// Gains and setpoints of the HAC law.
struct HacGains {
  double omega0 = 2.0 * kPi * 60.0;  ///< nominal angular frequency (rad/s)
  double eta = 0.0;                  ///< DC-voltage gain (rad/(s V))
  double gamma = 1.0;                ///< half-angle gain (rad/s)
  double v_dc_star = 1.0;            ///< DC voltage setpoint (V)
  double theta_star0 = 0.0;          ///< angle setpoint in the rotating frame (rad)

  /// Angle setpoint in the stationary frame.
  double theta_star(double t) const noexcept { return theta_star0 + omega0 * t; }

  void validate() const {
    auto require = [](bool ok, const char* msg) {
      if (!ok) throw std::invalid_argument(std::string("HacGains: ") + msg);
    };
    require(std::isfinite(eta) && eta >= 0.0, "eta must be >= 0");
    require(std::isfinite(gamma) && gamma >= 0.0, "gamma must be >= 0");
    require(std::isfinite(omega0) && omega0 > 0.0, "omega0 must be > 0");
    require(std::isfinite(v_dc_star) && v_dc_star > 0.0, "v_dc_star must be > 0");
    require(std::isfinite(theta_star0), "theta_star0 must be finite");
  }
};

struct InverterState {
  double v_dc = 0.0;
  Vec2 v_ac = Vec2::Zero();
  Vec2 i_ac = Vec2::Zero();
  double theta = 0.0;  // unwrapped

  Vec6 to_vector() const {
    Vec6 x;
    x << v_dc, v_ac, i_ac, theta;
    return x;
  }

  static InverterState from_vector(const Eigen::Ref<const VecX>& x) {
    InverterState s;
    s.v_dc = x(0);
    s.v_ac = x.segment<2>(1);
    s.i_ac = x.segment<2>(3);
    s.theta = x(5);
    return s;
  }

  bool is_finite() const { return to_vector().allFinite(); }
};

/// Port inputs. The passivity pairing uses -i_load as the AC input channel.
struct PortInput {
  double i_dc_ref = 0.0;
  Vec2 i_load = Vec2::Zero();

  Eigen::Vector3d passivity_input() const { return {i_dc_ref, -i_load(0), -i_load(1)}; }
};

struct PortOutput {
  double v_dc = 0.0;
  Vec2 v_ac = Vec2::Zero();

  Eigen::Vector3d to_vector() const { return {v_dc, v_ac(0), v_ac(1)}; }
};

/// Difference between two trajectories, x - xbar.
struct ErrorState {
  double d_v_dc = 0.0;
  Vec2 d_v_ac = Vec2::Zero();
  Vec2 d_i_ac = Vec2::Zero();
  double d_theta = 0.0;

  Vec6 to_vector() const {
    Vec6 x;
    x << d_v_dc, d_v_ac, d_i_ac, d_theta;
    return x;
  }

  static ErrorState from_vector(const Eigen::Ref<const VecX>& x) {
    ErrorState e;
    e.d_v_dc = x(0);
    e.d_v_ac = x.segment<2>(1);
    e.d_i_ac = x.segment<2>(3);
    e.d_theta = x(5);
    return e;
  }

  static ErrorState between(const InverterState& x, const InverterState& ref) {
    return {x.v_dc - ref.v_dc, x.v_ac - ref.v_ac, x.i_ac - ref.i_ac, x.theta - ref.theta};
  }
};

/// m = mu [cos theta, sin theta].
inline Vec2 modulation(double theta, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw std::invalid_argument("modulation: mu must lie in [0, 1]");
  return mu * unit_phasor(theta);
}

inline double hac_angle_rate(double theta, double v_dc, double t, const HacGains& g) {
  return g.omega0 + g.eta * (v_dc - g.v_dc_star) - g.gamma * std::sin(0.5 * (theta - g.theta_star(t)));
}

/// Closed-loop HAC inverter with the DC current control
/// i_dc = i_dc_ref + kappa (v_dc* - v_dc). Returns dx/dt in state layout.
inline InverterState closed_loop_rhs(const InverterState& x, const PortInput& u, const InverterParams& p,
                                     const HacGains& g, double t) {
  const Vec2 m = p.mu * unit_phasor(x.theta);
  const double i_dc = u.i_dc_ref + p.kappa * (g.v_dc_star - x.v_dc);
  const double i_x = m.dot(x.i_ac);  // switch-side DC current
  const Vec2 v_x = m * x.v_dc;       // switch-side AC voltage

  InverterState dx;
  dx.v_dc = (-p.g_dc * x.v_dc + i_dc - i_x) / p.c_dc;
  dx.v_ac = (-p.g_f * x.v_ac - u.i_load + x.i_ac) / p.c_f;
  dx.i_ac = (-p.r_f * x.i_ac - x.v_ac + v_x) / p.l_f;
  dx.theta = hac_angle_rate(x.theta, x.v_dc, t, g);
  return dx;
}

inline PortOutput port_output(const InverterState& x) { return {x.v_dc, x.v_ac}; }

/// Incremental dynamics about a reference trajectory whose angle tracks the
/// setpoint. The reference is described by its DC voltage, inductor current
/// and angle; du is the input difference u - ubar.
inline ErrorState error_rhs(const ErrorState& dx, double ref_v_dc, const Vec2& ref_i_ac, double ref_theta,
                            const InverterParams& p, const HacGains& g, const PortInput& du = {}) {
  const Vec2 psi = unit_phasor(ref_theta + dx.d_theta);
  const Vec2 dpsi = psi - unit_phasor(ref_theta);

  ErrorState r;
  r.d_v_dc = (-p.g_dc_eff() * dx.d_v_dc + du.i_dc_ref - p.mu * (dpsi.dot(ref_i_ac) + psi.dot(dx.d_i_ac))) / p.c_dc;
  r.d_v_ac = (-p.g_f * dx.d_v_ac + dx.d_i_ac - du.i_load) / p.c_f;
  r.d_i_ac = (-p.r_f * dx.d_i_ac - dx.d_v_ac + p.mu * (psi * dx.d_v_dc + dpsi * ref_v_dc)) / p.l_f;
  r.d_theta = g.eta * dx.d_v_dc - g.gamma * std::sin(0.5 * dx.d_theta);
  return r;
}

/// Incremental storage: electrical energy of the error plus the angle term
/// 2 lambda (1 - cos(dtheta / 2)).
inline double storage(const ErrorState& dx, const InverterParams& p, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("storage: lambda must be > 0");
  const double electrical = p.c_dc * dx.d_v_dc * dx.d_v_dc + p.c_f * dx.d_v_ac.squaredNorm() +
                            p.l_f * dx.d_i_ac.squaredNorm();
  return 0.5 * electrical + 2.0 * lambda * (1.0 - std::cos(0.5 * dx.d_theta));
}

enum class PerUnitKind { inductance, resistance, capacitance, conductance };

inline double base_impedance(double base_power, double base_voltage_ll) {
  if (!(base_power > 0.0) || !(base_voltage_ll > 0.0))
    throw std::invalid_argument("per-unit bases must be positive");
  return base_voltage_ll * base_voltage_ll / base_power;
}

inline double per_unit_to_si(double base_power, double base_voltage_ll, double base_frequency, double value_pu,
                             PerUnitKind kind) {
  if (!(base_frequency > 0.0)) throw std::invalid_argument("per-unit bases must be positive");
  const double z = base_impedance(base_power, base_voltage_ll);
  switch (kind) {
    case PerUnitKind::resistance: return value_pu * z;
    case PerUnitKind::inductance: return value_pu * z / base_frequency;
    case PerUnitKind::capacitance: return value_pu / (z * base_frequency);
    case PerUnitKind::conductance: return value_pu / z;
  }
  throw std::invalid_argument("per_unit_to_si: unknown kind");
}

inline double si_to_per_unit(double base_power, double base_voltage_ll, double base_frequency, double value_si,
                             PerUnitKind kind) {
  return value_si / per_unit_to_si(base_power, base_voltage_ll, base_frequency, 1.0, kind);
}

}  // namespace hacpass
