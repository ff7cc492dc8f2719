#pragma once

// Decentralized large-signal incremental passivity certificate for a HAC
// inverter. The certificate (eps1, eps2, lambda) bounds the cross terms of
// the storage derivative by Young's inequality; the inverter is certified
// when the resulting 6x6 dissipation matrix Q is positive definite over an
// envelope on the reference DC voltage and inductor current magnitude.

#include "hacpass/model.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <optional>
#include <string>

namespace hacpass {

struct OperatingEnvelope {
  double v_dc_bar_max = 0.0;   ///< bound on the reference DC voltage (V)
  double i_ac_norm_max = 0.0;  ///< bound on the reference inductor current norm (A)

  void validate() const {
    if (!(v_dc_bar_max > 0.0) || !(i_ac_norm_max > 0.0))
      throw std::invalid_argument("OperatingEnvelope: bounds must be > 0");
  }
};

/// 1.2 x the DC setpoint and 1.5 x the rated alpha-beta current magnitude
/// S_N / V_ll (power-invariant frame).
inline OperatingEnvelope default_envelope(double v_dc_star, double s_rated, double v_ll) {
  return {1.2 * v_dc_star, 1.5 * s_rated / v_ll};
}

struct Certificate {
  double eps1 = 0.0;
  double eps2 = 0.0;
  double lambda = 0.0;
  OperatingEnvelope envelope;

  void validate() const {
    if (!(eps1 > 0.0) || !(eps2 > 0.0) || !(lambda > 0.0))
      throw std::invalid_argument("Certificate: eps1, eps2 and lambda must be > 0");
    envelope.validate();
  }
};

struct CertificateReport {
  bool feasible = false;
  /// Slacks of the three certificate inequalities, in multiplied-out form:
  ///   [0] R - eps2^2
  ///   [1] G_dc_eff - (eps1 |i| mu)^2
  ///   [2] Lambda (G_dc_eff - (eps1 |i| mu)^2) - (lambda eta / 2)^2
  std::array<double, 3> margins{};
  double q_min_eig = 0.0;
  bool shunt_conductance_positive = false;
};

namespace detail {

struct MarginInputs {
  double r_f;
  double g_dc_eff;
  double g_f;
  double mu;
  double i_norm;
  double v_bar;
  double eta;
  double gamma;
};

inline double angle_damping(const MarginInputs& m, const Certificate& c) {
  const double t = m.mu * m.v_bar / c.eps2;
  return c.lambda * m.gamma - 1.0 / (c.eps1 * c.eps1) - t * t;
}

inline double dc_damping(const MarginInputs& m, const Certificate& c) {
  const double t = c.eps1 * m.i_norm * m.mu;
  return m.g_dc_eff - t * t;
}

// Shared by the large-signal and small-signal checks so both produce the
// same bits for the same numbers.
inline std::array<double, 3> certificate_margins(const MarginInputs& m, const Certificate& c) {
  const double b = dc_damping(m, c);
  const double coupling = 0.5 * c.lambda * m.eta;
  return {m.r_f - c.eps2 * c.eps2, b, angle_damping(m, c) * b - coupling * coupling};
}

inline MarginInputs margin_inputs(const InverterParams& p, const HacGains& g, const OperatingEnvelope& env) {
  return {p.r_f, p.g_dc_eff(), p.g_f, p.mu, env.i_ac_norm_max, env.v_dc_bar_max, g.eta, g.gamma};
}

}  // namespace detail

/// Dissipation matrix in the coordinates [dv_dc, dv_ac, di_ac, sin(dtheta/2)].
inline Mat6 build_q(const InverterParams& p, const HacGains& g, const Certificate& c) {
  const auto m = detail::margin_inputs(p, g, c.envelope);
  Mat6 q = Mat6::Zero();
  q(0, 0) = detail::dc_damping(m, c);
  q(1, 1) = q(2, 2) = p.g_f;
  q(3, 3) = q(4, 4) = p.r_f - c.eps2 * c.eps2;
  q(5, 5) = detail::angle_damping(m, c);
  q(0, 5) = q(5, 0) = -0.5 * c.lambda * g.eta;
  return q;
}

inline double min_eigenvalue(const Mat6& sym) {
  Eigen::SelfAdjointEigenSolver<Mat6> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// Evaluates the certificate inequalities and, independently, the spectrum
/// of Q. Infeasibility is a valid outcome. A margin must exceed slack_tol to
/// count as satisfied; the AC shunt conductance must be strictly positive.
inline CertificateReport check_conditions(const InverterParams& p, const HacGains& g, const Certificate& c,
                                          double slack_tol = 0.0) {
  CertificateReport r;
  r.margins = detail::certificate_margins(detail::margin_inputs(p, g, c.envelope), c);
  r.q_min_eig = min_eigenvalue(build_q(p, g, c));
  r.shunt_conductance_positive = p.g_f > 0.0;
  r.feasible = r.shunt_conductance_positive;
  for (double m : r.margins) r.feasible = r.feasible && m > slack_tol;
  return r;
}

struct Infeasibility {
  std::string violated;  ///< which requirement failed
  double value = 0.0;    ///< the offending quantity (<= 0)
};

struct SynthesisOptions {
  bool refine = false;  ///< grid search over (eps1, eps2) fractions instead of midpoints
  int grid = 9;
};

struct SynthesisResult {
  std::optional<Certificate> certificate;
  Infeasibility witness;

  bool ok() const noexcept { return certificate.has_value(); }
};

namespace detail {

// Certificate for fixed eps fractions of their admissible ranges; lambda is
// the midpoint of the interval where the quadratic in lambda is negative.
inline SynthesisResult synthesize_at(const InverterParams& p, const HacGains& g, const OperatingEnvelope& env,
                                     double eps1_fraction, double eps2_fraction) {
  SynthesisResult out;
  const double g_eff = p.g_dc_eff();
  if (!(p.g_f > 0.0)) {
    out.witness = {"AC shunt conductance G > 0", p.g_f};
    return out;
  }
  if (!(g_eff > 0.0)) {
    out.witness = {"effective DC conductance > 0", g_eff};
    return out;
  }
  if (!(g.gamma > 0.0)) {
    out.witness = {"half-angle gain gamma > 0", g.gamma};
    return out;
  }
  // With no modulation coupling the eps1 range is unbounded; use the
  // envelope current as if mu were 1 so the choice stays finite.
  double k = env.i_ac_norm_max * p.mu;
  if (!(k > 0.0)) k = env.i_ac_norm_max;

  const double eps2_sq = eps2_fraction * p.r_f;
  const double eps1_sq = eps1_fraction * g_eff / (k * k);
  const double b = g_eff - eps1_sq * (env.i_ac_norm_max * p.mu) * (env.i_ac_norm_max * p.mu);
  const double mv = p.mu * env.v_dc_bar_max;
  const double a = 1.0 / eps1_sq + mv * mv / eps2_sq;

  double lambda = 0.0;
  if (g.eta == 0.0) {
    lambda = 2.0 * a / g.gamma;
  } else {
    const double disc = g.gamma * g.gamma * b * b - g.eta * g.eta * a * b;
    if (!(disc > 0.0)) {
      out.witness = {"lambda interval discriminant gamma^2 b^2 - eta^2 a b > 0", disc};
      return out;
    }
    lambda = 2.0 * g.gamma * b / (g.eta * g.eta);
  }
  out.certificate = Certificate{std::sqrt(eps1_sq), std::sqrt(eps2_sq), lambda, env};
  return out;
}

}  // namespace detail

inline SynthesisResult synthesize_certificate(const InverterParams& p, const HacGains& g,
                                              const OperatingEnvelope& env, const SynthesisOptions& opts = {}) {
  env.validate();
  auto best = detail::synthesize_at(p, g, env, 0.5, 0.5);
  if (!opts.refine || opts.grid < 1) return best;

  // Rank candidates by the smallest normalized margin of the result.
  auto score = [&](const SynthesisResult& r) {
    if (!r.ok()) return -std::numeric_limits<double>::infinity();
    const auto rep = check_conditions(p, g, *r.certificate);
    if (!rep.feasible) return -std::numeric_limits<double>::infinity();
    const auto m = detail::margin_inputs(p, g, env);
    const double b = detail::dc_damping(m, *r.certificate);
    const double lam = detail::angle_damping(m, *r.certificate);
    return std::min({rep.margins[0] / p.r_f, rep.margins[1] / p.g_dc_eff(), rep.margins[2] / (lam * b)});
  };
  double best_score = score(best);
  for (int i = 1; i <= opts.grid; ++i) {
    for (int j = 1; j <= opts.grid; ++j) {
      const double f1 = static_cast<double>(i) / (opts.grid + 1);
      const double f2 = static_cast<double>(j) / (opts.grid + 1);
      auto cand = detail::synthesize_at(p, g, env, f1, f2);
      const double s = score(cand);
      if (s > best_score) {
        best_score = s;
        best = std::move(cand);
      }
    }
  }
  return best;
}

/// Largest eta for which synthesis still succeeds at the given gamma, found by
/// bracketing and bisection to relative tolerance rel_tol. Returns +inf when
/// no finite bracket exists and 0 when even eta = 0 is infeasible.
inline double gain_frontier(const InverterParams& p, const OperatingEnvelope& env, double gamma,
                            const SynthesisOptions& opts = {}, double rel_tol = 1e-6) {
  if (!(gamma > 0.0)) throw std::invalid_argument("gain_frontier: gamma must be > 0");
  HacGains g;
  g.gamma = gamma;
  auto feasible = [&](double eta) {
    g.eta = eta;
    return synthesize_certificate(p, g, env, opts).ok();
  };
  if (!feasible(0.0)) return 0.0;

  double lo = 0.0;
  double hi = gamma;
  for (int i = 0; feasible(hi); ++i) {
    if (i > 900) return std::numeric_limits<double>::infinity();
    lo = hi;
    hi *= 2.0;
  }
  while (hi - lo > rel_tol * hi) {
    const double mid = 0.5 * (lo + hi);
    (feasible(mid) ? lo : hi) = mid;
  }
  return lo;
}

}  // namespace hacpass
