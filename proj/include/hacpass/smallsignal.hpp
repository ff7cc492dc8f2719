#pragma once

// Small-signal analysis of a single HAC inverter in the dq frame rotating at
// omega0: equilibria, symbolic linearization, the quadratic-storage passivity
// LMI, and IFP/OFP passivity indices of the port transfer matrix.
//
// Linearized coordinates are [dv_dc, dv_dq(2), di_dq(2), dphi] with the
// half-angle dphi = dtheta / 2; inputs [di_dc, -di_load(2)]; outputs
// [dv_dc, dv_dq(2)].

#include "hacpass/certify.hpp"
#include "hacpass/model.hpp"

#include <complex>
#include <ostream>
#include <string>
#include <vector>

namespace hacpass {

/// Operating point in the rotating frame; input_eq.i_load is in dq.
struct Equilibrium {
  double v_dc_eq = 0.0;
  Vec2 v_dq_eq = Vec2::Zero();
  Vec2 i_dq_eq = Vec2::Zero();
  double theta_eq = 0.0;
  PortInput input_eq;
  double residual = 0.0;  ///< scaled residual at the returned point
  int iterations = 0;

  Vec6 to_vector() const {
    Vec6 x;
    x << v_dc_eq, v_dq_eq, i_dq_eq, theta_eq;
    return x;
  }
};

struct StateSpace {
  MatX a, b, c, d;

  Eigen::Index states() const { return a.rows(); }
  Eigen::Index inputs() const { return b.cols(); }
  Eigen::Index outputs() const { return c.rows(); }

  static inline const std::vector<std::string> state_labels{"dv_dc", "dv_d", "dv_q", "di_d", "di_q", "dphi"};
  static inline const std::vector<std::string> input_labels{"di_dc", "-di_load_d", "-di_load_q"};
  static inline const std::vector<std::string> output_labels{"dv_dc", "dv_d", "dv_q"};
};

/// Closed-loop right-hand side in the rotating frame. State layout as
/// InverterState with theta measured relative to omega0 t.
inline Vec6 dq_rhs(const Vec6& x, const PortInput& u, const InverterParams& p, const HacGains& g) {
  const Mat2 j = rotation_generator();
  const double v_dc = x(0);
  const Vec2 v = x.segment<2>(1);
  const Vec2 i = x.segment<2>(3);
  const Vec2 psi = unit_phasor(x(5));

  Vec6 f;
  f(0) = (-p.g_dc_eff() * v_dc + u.i_dc_ref + p.kappa * g.v_dc_star - p.mu * psi.dot(i)) / p.c_dc;
  f.segment<2>(1) = (-p.g_f * v - u.i_load + i) / p.c_f - g.omega0 * j * v;
  f.segment<2>(3) = (-p.r_f * i - v + p.mu * v_dc * psi) / p.l_f - g.omega0 * j * i;
  f(5) = g.eta * (v_dc - g.v_dc_star) - g.gamma * std::sin(0.5 * (x(5) - g.theta_star0));
  return f;
}

/// Characteristic magnitudes used to normalize dq residuals.
inline Vec6 dq_state_scale(const InverterParams& p, const HacGains& g, const PortInput& u) {
  const double i_char = std::max(u.i_load.norm(), g.v_dc_star * std::sqrt(p.c_f / p.l_f));
  Vec6 s;
  s << g.v_dc_star, g.v_dc_star, g.v_dc_star, i_char, i_char, 1.0;
  return s;
}

inline double dq_scaled_residual(const Vec6& x, const PortInput& u, const InverterParams& p, const HacGains& g) {
  const Vec6 s = dq_state_scale(p, g, u);
  return (dq_rhs(x, u, p, g).array() / s.array()).abs().maxCoeff() / g.omega0;
}

/// The un-scaled dynamics matrix Abar and the scaling S with A_lin = S^-1 Abar.
/// At a setpoint-consistent point (v_dc = v_dc*, theta = theta*) this is the
/// textbook form; elsewhere the equilibrium values and the half-angle slope
/// cos((theta - theta*) / 2) enter in their place.
inline Mat6 dynamics_matrix_unscaled(const InverterParams& p, const HacGains& g, const Equilibrium& eq) {
  const Mat2 j = rotation_generator();
  const Mat2 id = Mat2::Identity();
  const Vec2 psi = unit_phasor(eq.theta_eq);
  const Vec2 jpsi = j * psi;
  const double slope = std::cos(0.5 * (eq.theta_eq - g.theta_star0));

  Mat6 a = Mat6::Zero();
  a(0, 0) = -p.g_dc_eff();
  a.block<1, 2>(0, 3) = -p.mu * psi.transpose();
  a(0, 5) = -2.0 * p.mu * jpsi.dot(eq.i_dq_eq);

  a.block<2, 2>(1, 1) = -p.g_f * id - p.c_f * g.omega0 * j;
  a.block<2, 2>(1, 3) = id;

  a.block<2, 1>(3, 0) = p.mu * psi;
  a.block<2, 2>(3, 1) = -id;
  a.block<2, 2>(3, 3) = -p.r_f * id - p.l_f * g.omega0 * j;
  a.block<2, 1>(3, 5) = 2.0 * p.mu * eq.v_dc_eq * jpsi;

  a(5, 0) = 0.5 * g.eta;
  a(5, 5) = -0.5 * g.gamma * slope;
  return a;
}

inline Vec6 scaling_diagonal(const InverterParams& p) {
  Vec6 s;
  s << p.c_dc, p.c_f, p.c_f, p.l_f, p.l_f, 1.0;
  return s;
}

inline StateSpace linearize(const InverterParams& p, const HacGains& g, const Equilibrium& eq) {
  StateSpace ss;
  const Vec6 s = scaling_diagonal(p);
  ss.a = s.cwiseInverse().asDiagonal() * dynamics_matrix_unscaled(p, g, eq);
  ss.b = MatX::Zero(6, 3);
  ss.b(0, 0) = 1.0 / p.c_dc;
  ss.b(1, 1) = 1.0 / p.c_f;
  ss.b(2, 2) = 1.0 / p.c_f;
  ss.c = MatX::Zero(3, 6);
  ss.c.block<3, 3>(0, 0).setIdentity();
  ss.d = MatX::Zero(3, 3);
  return ss;
}

namespace detail {

// Jacobian of dq_rhs with respect to the absolute state (theta, not phi).
inline Mat6 dq_jacobian(const InverterParams& p, const HacGains& g, const Vec6& x) {
  Equilibrium at;
  at.v_dc_eq = x(0);
  at.v_dq_eq = x.segment<2>(1);
  at.i_dq_eq = x.segment<2>(3);
  at.theta_eq = x(5);
  Mat6 jac = scaling_diagonal(p).cwiseInverse().asDiagonal() * dynamics_matrix_unscaled(p, g, at);
  jac.col(5) *= 0.5;
  jac.row(5) *= 2.0;
  return jac;
}

}  // namespace detail

/// Newton iteration on dq_rhs from the flat start (v_dc*, [mu v_dc*, 0], 0,
/// theta*), with backtracking on the scaled residual. Throws
/// ConvergenceError after max_iter iterations.
inline Equilibrium equilibrium(const InverterParams& p, const HacGains& g, const PortInput& input_eq,
                               double tol = 1e-9, int max_iter = 50) {
  p.validate();
  g.validate();
  const Vec6 scale = dq_state_scale(p, g, input_eq);
  auto scaled = [&](const Vec6& x) -> double {
    return (dq_rhs(x, input_eq, p, g).array() / scale.array()).abs().maxCoeff() / g.omega0;
  };

  Vec6 x;
  x << g.v_dc_star, p.mu * g.v_dc_star, 0.0, 0.0, 0.0, g.theta_star0;
  std::vector<double> history{scaled(x)};
  int it = 0;
  while (history.back() >= tol) {
    if (it == max_iter)
      throw ConvergenceError("equilibrium: Newton did not converge (last scaled residual " +
                                 std::to_string(history.back()) + ")",
                             history);
    ++it;
    const Vec6 f = dq_rhs(x, input_eq, p, g);
    const Vec6 step = detail::dq_jacobian(p, g, x).fullPivLu().solve(-f);
    double t = 1.0;
    Vec6 trial = x + step;
    while (!(scaled(trial) < history.back()) && t > 1e-6) {
      t *= 0.5;
      trial = x + t * step;
    }
    x = trial;
    history.push_back(scaled(x));
  }

  Equilibrium eq;
  eq.v_dc_eq = x(0);
  eq.v_dq_eq = x.segment<2>(1);
  eq.i_dq_eq = x.segment<2>(3);
  eq.theta_eq = x(5);
  eq.input_eq = input_eq;
  eq.residual = history.back();
  eq.iterations = it;
  return eq;
}

/// Equilibrium with v_dc = v_dc* and theta = theta*, serving a given dq load
/// current. The AC filter equations are linear once the switch voltage is
/// fixed; the DC reference current is whatever balances the DC link.
inline Equilibrium setpoint_equilibrium(const InverterParams& p, const HacGains& g, const Vec2& i_load_dq) {
  p.validate();
  g.validate();
  const Mat2 j = rotation_generator();
  const Mat2 id = Mat2::Identity();
  const Vec2 psi = unit_phasor(g.theta_star0);

  // [G + C w J, -I; I, R + L w J] [v; i] = [-i_load; mu v* psi]
  Eigen::Matrix4d m;
  m.block<2, 2>(0, 0) = p.g_f * id + p.c_f * g.omega0 * j;
  m.block<2, 2>(0, 2) = -id;
  m.block<2, 2>(2, 0) = id;
  m.block<2, 2>(2, 2) = p.r_f * id + p.l_f * g.omega0 * j;
  Eigen::Vector4d rhs;
  rhs << -i_load_dq, p.mu * g.v_dc_star * psi;
  const Eigen::Vector4d vi = m.partialPivLu().solve(rhs);

  Equilibrium eq;
  eq.v_dc_eq = g.v_dc_star;
  eq.v_dq_eq = vi.head<2>();
  eq.i_dq_eq = vi.tail<2>();
  eq.theta_eq = g.theta_star0;
  eq.input_eq.i_load = i_load_dq;
  eq.input_eq.i_dc_ref = p.g_dc * g.v_dc_star + p.mu * psi.dot(eq.i_dq_eq);
  eq.residual = dq_scaled_residual(eq.to_vector(), eq.input_eq, p, g);
  return eq;
}

/// P = diag(C_dc, C, C, L, L, 2 lambda), the Hessian of the incremental
/// storage at the origin in half-angle coordinates.
inline MatX storage_matrix(const InverterParams& p, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("storage_matrix: lambda must be > 0");
  Vec6 d;
  d << p.c_dc, p.c_f, p.c_f, p.l_f, p.l_f, 2.0 * lambda;
  return MatX(d.asDiagonal());
}

struct LmiResidual {
  MatX matrix;  ///< -(A^T P + P A) / 2; passivity needs this PSD
  VecX eigenvalues;
  double min_eig = 0.0;
};

inline LmiResidual lmi_residual(const StateSpace& ss, const MatX& pmat) {
  if (pmat.rows() != ss.states() || pmat.cols() != ss.states())
    throw std::invalid_argument("lmi_residual: P dimension does not match A");
  LmiResidual r;
  r.matrix = -0.5 * (ss.a.transpose() * pmat + pmat * ss.a);
  r.matrix = 0.5 * (r.matrix + r.matrix.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<MatX> es(r.matrix, Eigen::EigenvaluesOnly);
  r.eigenvalues = es.eigenvalues();
  r.min_eig = r.eigenvalues.size() ? r.eigenvalues(0) : 0.0;
  return r;
}

/// Closed-form reduced LMI in terms of the parameters. The (dv_dc, dphi)
/// coupling is -tau with tau = (lambda eta - 2 mu (J psi)^T i) / 2.
inline Mat6 lmi_closed_form(const InverterParams& p, const HacGains& g, const Equilibrium& eq, double lambda) {
  const Vec2 jpsi = rotation_generator() * unit_phasor(eq.theta_eq);
  const double tau = 0.5 * (lambda * g.eta - 2.0 * p.mu * jpsi.dot(eq.i_dq_eq));
  Mat6 m = Mat6::Zero();
  m(0, 0) = p.g_dc_eff();
  m(1, 1) = m(2, 2) = p.g_f;
  m(3, 3) = m(4, 4) = p.r_f;
  m(5, 5) = lambda * g.gamma * std::cos(0.5 * (eq.theta_eq - g.theta_star0));
  m(0, 5) = m(5, 0) = -tau;
  m.block<2, 1>(3, 5) = -p.mu * eq.v_dc_eq * jpsi;
  m.block<1, 2>(5, 3) = m.block<2, 1>(3, 5).transpose();
  return m;
}

/// Reduced LMI computed from the linearization, cross-checked elementwise
/// against the closed form. Throws std::logic_error on disagreement.
inline LmiResidual lmi_residual(const InverterParams& p, const HacGains& g, const Equilibrium& eq, double lambda) {
  const auto r = lmi_residual(linearize(p, g, eq), storage_matrix(p, lambda));
  const Mat6 closed = lmi_closed_form(p, g, eq, lambda);
  const double scale = closed.cwiseAbs().maxCoeff();
  const double err = (r.matrix - MatX(closed)).cwiseAbs().maxCoeff();
  if (err > 1e-10 * scale)
    throw std::logic_error("lmi_residual: closed form disagrees with A^T P + P A (error " + std::to_string(err) + ")");
  return r;
}

/// Kalman-Yakubovich block [[A^T P + P A, P B - C^T], [B^T P - C, -D - D^T]].
inline MatX kyp_matrix(const StateSpace& ss, const MatX& pmat) {
  const auto n = ss.states();
  const auto m = ss.inputs();
  MatX k(n + m, n + m);
  k.topLeftCorner(n, n) = ss.a.transpose() * pmat + pmat * ss.a;
  k.topRightCorner(n, m) = pmat * ss.b - ss.c.transpose();
  k.bottomLeftCorner(m, n) = ss.b.transpose() * pmat - ss.c;
  k.bottomRightCorner(m, m) = -ss.d - ss.d.transpose();
  return k;
}

/// Small-signal certificate conditions with the envelope read as a bound on
/// the dq current magnitude. Same arithmetic as check_conditions.
inline CertificateReport smallsignal_conditions(const InverterParams& p, const HacGains& g, const Certificate& c,
                                                double slack_tol = 0.0) {
  const detail::MarginInputs m{p.r_f, p.g_dc_eff(), p.g_f, p.mu, c.envelope.i_ac_norm_max, c.envelope.v_dc_bar_max,
                               g.eta, g.gamma};
  CertificateReport r;
  r.margins = detail::certificate_margins(m, c);
  r.q_min_eig = min_eigenvalue(build_q(p, g, c));  // Q_lin has the same entries as Q
  r.shunt_conductance_positive = p.g_f > 0.0;
  r.feasible = r.shunt_conductance_positive;
  for (double v : r.margins) r.feasible = r.feasible && v > slack_tol;
  return r;
}

// ---------------------------------------------------------------------------
// Frequency-domain passivity indices.

class FrequencyError : public std::runtime_error {
 public:
  FrequencyError(const std::string& what, double omega) : std::runtime_error(what), omega_(omega) {}
  double omega() const noexcept { return omega_; }

 private:
  double omega_;
};

using MatXc = Eigen::MatrixXcd;

/// G(j omega) = C (j omega I - A)^-1 B + D.
inline MatXc frequency_response(const StateSpace& ss, double omega) {
  const auto n = ss.states();
  MatXc g = ss.d.cast<std::complex<double>>();
  if (n == 0) return g;
  MatXc res = -ss.a.cast<std::complex<double>>();
  res.diagonal().array() += std::complex<double>(0.0, omega);
  Eigen::PartialPivLU<MatXc> lu(res);
  if (!(lu.rcond() > 1e-14))
    throw FrequencyError("resolvent j*omega*I - A is singular at omega = " + std::to_string(omega), omega);
  g += ss.c.cast<std::complex<double>>() * lu.solve(ss.b.cast<std::complex<double>>());
  return g;
}

namespace detail {

inline double half_min_hermitian_eig(const MatXc& m) {
  const MatXc h = m + m.adjoint();
  Eigen::SelfAdjointEigenSolver<MatXc> es(h, Eigen::EigenvaluesOnly);
  return 0.5 * es.eigenvalues()(0);
}

}  // namespace detail

inline constexpr double kOfpConditionLimit = 1e12;

inline double ifp(const StateSpace& ss, double omega) {
  return detail::half_min_hermitian_eig(frequency_response(ss, omega));
}

inline double ofp(const StateSpace& ss, double omega) {
  const MatXc g = frequency_response(ss, omega);
  Eigen::JacobiSVD<MatXc> svd(g);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  if (!(smin > 0.0) || smax / smin > kOfpConditionLimit)
    throw FrequencyError("G(j*omega) is singular or ill-conditioned at omega = " + std::to_string(omega), omega);
  return detail::half_min_hermitian_eig(g.inverse());
}

struct SweepResult {
  std::vector<double> omegas;
  std::vector<double> ifp;  ///< NaN at gaps
  std::vector<double> ofp;  ///< NaN at gaps
  std::vector<std::size_t> gaps;
};

inline std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  if (!(lo > 0.0) || !(hi >= lo) || n == 0) throw std::invalid_argument("log_grid: need 0 < lo <= hi and n > 0");
  std::vector<double> w(n);
  if (n == 1) {
    w[0] = lo;
    return w;
  }
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (std::size_t k = 0; k < n; ++k) w[k] = std::pow(10.0, a + (b - a) * static_cast<double>(k) / (n - 1));
  return w;
}

/// Evaluates IFP and OFP on a positive, strictly increasing grid. Points where
/// either index cannot be evaluated are recorded as gaps.
inline SweepResult sweep(const StateSpace& ss, const std::vector<double>& omega_grid) {
  for (std::size_t k = 0; k < omega_grid.size(); ++k) {
    if (!(omega_grid[k] > 0.0)) throw std::invalid_argument("sweep: frequencies must be positive");
    if (k > 0 && !(omega_grid[k] > omega_grid[k - 1]))
      throw std::invalid_argument("sweep: frequency grid must be strictly increasing");
  }
  SweepResult r;
  r.omegas = omega_grid;
  r.ifp.resize(omega_grid.size(), NAN);
  r.ofp.resize(omega_grid.size(), NAN);
  for (std::size_t k = 0; k < omega_grid.size(); ++k) {
    try {
      r.ifp[k] = ifp(ss, omega_grid[k]);
      r.ofp[k] = ofp(ss, omega_grid[k]);
    } catch (const FrequencyError&) {
      r.gaps.push_back(k);
    }
  }
  return r;
}

inline void write_sweep_csv(const SweepResult& r, std::ostream& os) {
  os << "omega_rad_s,freq_Hz,ifp,ofp\n";
  char buf[128];
  for (std::size_t k = 0; k < r.omegas.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", r.omegas[k], r.omegas[k] / (2.0 * kPi), r.ifp[k],
                  r.ofp[k]);
    os << buf;
  }
}

}  // namespace hacpass
