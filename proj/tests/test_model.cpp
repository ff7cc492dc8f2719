#include "support.hpp"

#include <gtest/gtest.h>

#include <Eigen/Cholesky>

using namespace hacpass;
using namespace hacpass::testing;

namespace {

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace

// ---------------------------------------------------------------- model

TEST(Modulation, ScalesUnitPhasor) {
  const Vec2 m = modulation(kPi / 3.0, 0.5);
  EXPECT_NEAR(m(0), 0.25, 1e-15);
  EXPECT_NEAR(m(1), 0.5 * std::sqrt(3.0) / 2.0, 1e-15);
  EXPECT_THROW(modulation(0.0, 1.2), std::invalid_argument);
  EXPECT_THROW(modulation(0.0, -0.1), std::invalid_argument);
}

TEST(Model, RejectsNonPhysicalParameters) {
  auto p = table_params(2);
  p.c_dc = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = table_params(2);
  p.mu = 1.5;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  auto g = table_gains();
  g.eta = -1.0;
  EXPECT_THROW(g.validate(), std::invalid_argument);
}

TEST(Model, ClosedLoopMatchesComponentwiseArithmetic) {
  const auto p = table_params(2);
  const auto g = table_gains();
  InverterState x;
  x.v_dc = 1100.0;
  x.v_ac = {650.0, -120.0};
  x.i_ac = {9e4, 2e4};
  x.theta = 0.7;
  PortInput u;
  u.i_dc_ref = 5e4;
  u.i_load = {8.5e4, 1.5e4};
  const double t = 0.013;
  const auto dx = closed_loop_rhs(x, u, p, g, t);

  const double c = std::cos(0.7), s = std::sin(0.7);
  const double idc = 5e4 + p.kappa * (1130.0 - 1100.0);
  const double ix = p.mu * (c * 9e4 + s * 2e4);
  EXPECT_LT(rel(dx.v_dc, (-p.g_dc * 1100.0 + idc - ix) / p.c_dc), 1e-13);
  EXPECT_LT(rel(dx.v_ac(0), (-p.g_f * 650.0 - 8.5e4 + 9e4) / p.c_f), 1e-13);
  EXPECT_LT(rel(dx.v_ac(1), (p.g_f * 120.0 - 1.5e4 + 2e4) / p.c_f), 1e-13);
  EXPECT_LT(rel(dx.i_ac(0), (-p.r_f * 9e4 - 650.0 + p.mu * c * 1100.0) / p.l_f), 1e-13);
  EXPECT_LT(rel(dx.i_ac(1), (-p.r_f * 2e4 + 120.0 + p.mu * s * 1100.0) / p.l_f), 1e-13);
  const double theta_star = 0.0108 + kOmega0 * t;
  EXPECT_LT(rel(dx.theta, kOmega0 + 1e-3 * (1100.0 - 1130.0) - 100.0 * std::sin(0.5 * (0.7 - theta_star))), 1e-14);
}

// The error dynamics are the difference of two closed-loop runs when the
// reference sits on its setpoints.
TEST(Model, ErrorDynamicsAreDifferenceOfTrajectories) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const auto p = random_params(rng);
    auto g = table_gains();
    g.eta = log_uniform(rng, 1e-6, 1.0);
    g.gamma = log_uniform(rng, 1.0, 1e3);
    const double t = 0.05 * (u(rng) + 1.0);
    const double i_scale = g.v_dc_star * std::sqrt(p.c_f / p.l_f);

    InverterState ref;
    ref.v_dc = g.v_dc_star;
    ref.theta = g.theta_star(t);
    ref.v_ac = {u(rng) * 700, u(rng) * 700};
    ref.i_ac = {u(rng) * i_scale, u(rng) * i_scale};
    InverterState x = ref;
    x.v_dc += 50.0 * u(rng);
    x.theta += 3.0 * u(rng);
    x.v_ac += Vec2(u(rng), u(rng)) * 50.0;
    x.i_ac += Vec2(u(rng), u(rng)) * 0.1 * i_scale;

    PortInput ubar{1e3 * u(rng), Vec2(u(rng), u(rng)) * i_scale};
    PortInput du{100.0 * u(rng), Vec2(u(rng), u(rng)) * 0.1 * i_scale};
    PortInput ux{ubar.i_dc_ref + du.i_dc_ref, ubar.i_load + du.i_load};

    const Vec6 diff = closed_loop_rhs(x, ux, p, g, t).to_vector() - closed_loop_rhs(ref, ubar, p, g, t).to_vector();
    const Vec6 err = error_rhs(ErrorState::between(x, ref), ref.v_dc, ref.i_ac, ref.theta, p, g, du).to_vector();
    for (int k = 0; k < 6; ++k) {
      const double scale = std::max({std::abs(diff(k)), std::abs(err(k)), 1e-9});
      ASSERT_LT(std::abs(diff(k) - err(k)) / scale, 1e-7) << "component " << k << " trial " << trial;
    }
  }
}

TEST(Storage, NonNegativeAndZeroAtOrigin) {
  const auto p = table_params(2);
  EXPECT_EQ(storage(ErrorState{}, p, 1e10), 0.0);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 1000; ++k) {
    ErrorState e{10 * u(rng), Vec2(u(rng), u(rng)), Vec2(u(rng), u(rng)), 6.2 * u(rng)};
    EXPECT_GE(storage(e, p, 1e10), 0.0);
  }
  // The angle term is 4 pi periodic and vanishes again at dtheta = 4 pi.
  EXPECT_NEAR(storage(ErrorState{0, {}, {}, 4.0 * kPi}, p, 1.0), 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(storage(ErrorState{0, {}, {}, 2.0 * kPi}, p, 1.0), 4.0);
  EXPECT_THROW(storage(ErrorState{}, p, 0.0), std::invalid_argument);
}

// Along the error dynamics, dV/dt <= du^T dy whenever the certificate is
// feasible and the reference lies inside the envelope.
TEST(Storage, PointwiseDissipationUnderFeasibleCertificate) {
  const auto p = table_params(2);
  const auto g = table_gains();
  const auto c = paper_witness();
  ASSERT_TRUE(check_conditions(p, g, c).feasible);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0), u01(0.0, 1.0);
  const double i_bar = c.envelope.i_ac_norm_max;
  for (int trial = 0; trial < 5000; ++trial) {
    const double ref_v = c.envelope.v_dc_bar_max * u01(rng);
    const Vec2 ref_i = i_bar * std::sqrt(u01(rng)) * unit_phasor(2 * kPi * u01(rng));
    const double ref_theta = 2 * kPi * u01(rng);
    ErrorState e{30 * u(rng), Vec2(u(rng), u(rng)) * 40, Vec2(u(rng), u(rng)) * 1e4, 6.0 * u(rng)};
    PortInput du{1e4 * u(rng), Vec2(u(rng), u(rng)) * 1e4};
    const auto f = error_rhs(e, ref_v, ref_i, ref_theta, p, g, du);
    const double vdot = p.c_dc * e.d_v_dc * f.d_v_dc + p.c_f * e.d_v_ac.dot(f.d_v_ac) + p.l_f * e.d_i_ac.dot(f.d_i_ac) +
                        c.lambda * std::sin(0.5 * e.d_theta) * f.d_theta;
    const double supply = du.passivity_input().dot(Eigen::Vector3d(e.d_v_dc, e.d_v_ac(0), e.d_v_ac(1)));
    const double scale = std::abs(supply) + std::abs(c.lambda * g.gamma) + 1.0;
    ASSERT_LE(vdot, supply + 1e-9 * scale) << "trial " << trial;
  }
}

TEST(PerUnit, InverterThreeBaseValues) {
  EXPECT_NEAR(base_impedance(128e6, 690.0), 3.7195e-3, 1e-7);
  const double l = per_unit_to_si(128e6, 690.0, kOmega0, 0.05, PerUnitKind::inductance);
  EXPECT_NEAR(l, 0.05 * 690.0 * 690.0 / 128e6 / kOmega0, 1e-20);
  EXPECT_NEAR(l, 4.933e-7, 1e-10);
  EXPECT_NEAR(per_unit_to_si(128e6, 690.0, kOmega0, 0.05, PerUnitKind::capacitance), 0.03566, 1e-5);
  for (auto kind : {PerUnitKind::inductance, PerUnitKind::resistance, PerUnitKind::capacitance,
                    PerUnitKind::conductance}) {
    const double si = per_unit_to_si(128e6, 690.0, kOmega0, 0.123, kind);
    EXPECT_NEAR(si_to_per_unit(128e6, 690.0, kOmega0, si, kind), 0.123, 1e-15);
  }
  EXPECT_THROW(base_impedance(0.0, 690.0), std::invalid_argument);
}

// ---------------------------------------------------------------- certify

TEST(Certify, PaperWitnessForInverterThree) {
  const auto r = check_conditions(table_params(2), table_gains(), paper_witness());
  EXPECT_TRUE(r.feasible);
  EXPECT_GT(r.q_min_eig, 0.0);
  EXPECT_TRUE(r.shunt_conductance_positive);
  for (double m : r.margins) EXPECT_GT(m, 0.0);
}

TEST(Certify, QEntriesFromHandArithmetic) {
  InverterParams p;
  p.c_dc = 1;
  p.g_dc = 0.5;
  p.kappa = 1.5;  // effective 2
  p.g_f = 0.3;
  p.r_f = 0.7;
  p.l_f = p.c_f = 1;
  p.mu = 0.5;
  HacGains g;
  g.eta = 0.2;
  g.gamma = 4.0;
  const Certificate c{0.5, 0.4, 3.0, {10.0, 2.0}};
  const Mat6 q = build_q(p, g, c);
  // G~ - (eps1 |i| mu)^2 = 2 - (0.5*2*0.5)^2 = 1.75
  EXPECT_DOUBLE_EQ(q(0, 0), 1.75);
  EXPECT_DOUBLE_EQ(q(1, 1), 0.3);
  EXPECT_DOUBLE_EQ(q(3, 3), 0.7 - 0.16);
  // lambda gamma - 1/eps1^2 - (mu vbar / eps2)^2 = 12 - 4 - 156.25
  EXPECT_DOUBLE_EQ(q(5, 5), 12.0 - 4.0 - 156.25);
  EXPECT_DOUBLE_EQ(q(0, 5), -0.3);
  EXPECT_DOUBLE_EQ(q(5, 0), -0.3);
  EXPECT_EQ(q(1, 2), 0.0);
  EXPECT_FALSE(check_conditions(p, g, c).feasible);
}

// Margin feasibility against an independent positive-definiteness test
// (Cholesky) of Q.
TEST(Certify, MarginsAgreeWithCholesky) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> f(0.3, 3.0);
  int feasible = 0, infeasible = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const auto p = random_params(rng);
    HacGains g;
    g.v_dc_star = log_uniform(rng, 100, 5000);
    g.eta = log_uniform(rng, 1e-6, 10.0);
    g.gamma = log_uniform(rng, 1.0, 1e3);
    const auto env = default_envelope(g.v_dc_star, log_uniform(rng, 1e5, 1e9), log_uniform(rng, 200, 2e4));
    auto syn = detail::synthesize_at(p, g, env, 0.5, 0.5);
    Certificate c{std::sqrt(p.r_f) * f(rng) * 0.7, 1e-3 * f(rng), 1e6 * f(rng), env};
    if (syn.ok()) c = Certificate{syn.certificate->eps1 * f(rng), syn.certificate->eps2 * f(rng),
                                  syn.certificate->lambda * f(rng), env};
    const auto r = check_conditions(p, g, c);
    const Mat6 q = build_q(p, g, c);
    Eigen::LLT<Mat6> llt(q);
    const bool chol = llt.info() == Eigen::Success;
    const double qn = q.cwiseAbs().maxCoeff();
    if (std::abs(r.q_min_eig) > 1e-10 * qn) {
      ASSERT_EQ(r.feasible, chol) << "trial " << trial;
      ASSERT_EQ(r.feasible, r.q_min_eig > 0.0) << "trial " << trial;
    }
    (r.feasible ? feasible : infeasible)++;
  }
  EXPECT_GT(feasible, 100);
  EXPECT_GT(infeasible, 100);
}

TEST(Certify, ShuntConductanceRequired) {
  auto p = table_params(2);
  p.g_f = 0.0;
  const auto r = check_conditions(p, table_gains(), paper_witness());
  EXPECT_FALSE(r.feasible);
  EXPECT_FALSE(r.shunt_conductance_positive);
}

TEST(Synthesis, MidpointChoicesAndFeasibility) {
  const auto p = table_params(2);
  const auto g = table_gains();
  const auto env = table_envelope(2);
  const auto r = synthesize_certificate(p, g, env);
  ASSERT_TRUE(r.ok());
  EXPECT_DOUBLE_EQ(r.certificate->eps2 * r.certificate->eps2, 0.5 * p.r_f);
  const double k = env.i_ac_norm_max * p.mu;
  EXPECT_NEAR(r.certificate->eps1 * r.certificate->eps1 * k * k, 0.5 * p.g_dc_eff(), 1e-12 * p.g_dc_eff());
  EXPECT_TRUE(check_conditions(p, g, *r.certificate).feasible);

  const auto refined = synthesize_certificate(p, g, env, SynthesisOptions{true, 5});
  ASSERT_TRUE(refined.ok());
  EXPECT_TRUE(check_conditions(p, g, *refined.certificate).feasible);
}

TEST(Synthesis, ReportsWitnessWhenInfeasible) {
  auto g = table_gains();
  g.gamma = 0.0;
  auto r = synthesize_certificate(table_params(2), g, table_envelope(2));
  EXPECT_FALSE(r.ok());
  EXPECT_FALSE(r.witness.violated.empty());

  g = table_gains();
  g.gamma = 1e-3;
  g.eta = 1.0;
  r = synthesize_certificate(table_params(2), g, table_envelope(2), SynthesisOptions{true, 9});
  EXPECT_FALSE(r.ok());
  EXPECT_LE(r.witness.value, 0.0);

  auto p = table_params(2);
  p.g_f = 0.0;
  r = synthesize_certificate(p, table_gains(), table_envelope(2));
  EXPECT_FALSE(r.ok());
  EXPECT_NE(r.witness.violated.find("shunt"), std::string::npos);
}

// With midpoint eps choices the frontier has the closed form
//   eta_max = gamma sqrt(b / a),  b = G~ - eps1^2 (|i| mu)^2,
//   a = 1/eps1^2 + (mu vbar)^2 / eps2^2.
TEST(Frontier, MatchesClosedForm) {
  for (int which = 0; which < 3; ++which) {
    const auto p = table_params(which);
    const auto env = table_envelope(which);
    const double k = env.i_ac_norm_max * p.mu;
    const double e1 = 0.5 * p.g_dc_eff() / (k * k);
    const double e2 = 0.5 * p.r_f;
    const double b = p.g_dc_eff() - e1 * k * k;
    const double a = 1.0 / e1 + std::pow(p.mu * env.v_dc_bar_max, 2) / e2;
    for (double gamma : {1.0, 100.0, 1e3}) {
      const double expected = gamma * std::sqrt(b / a);
      EXPECT_LT(rel(gain_frontier(p, env, gamma), expected), 2e-6) << which << " " << gamma;
    }
  }
}

TEST(Frontier, FiniteWithoutModulationCoupling) {
  auto p = table_params(2);
  p.mu = 0.0;
  const auto env = table_envelope(2);
  const double eps1 = std::sqrt(0.5 * p.g_dc_eff()) / env.i_ac_norm_max;
  const double eta = gain_frontier(p, env, 100.0);
  ASSERT_TRUE(std::isfinite(eta));
  EXPECT_LT(rel(eta, 100.0 * eps1 * std::sqrt(p.g_dc_eff())), 2e-6);
}

TEST(Frontier, MonotoneInGamma) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(rng);
    const auto env = default_envelope(1000.0, 1e6, 400.0);
    const double lo = gain_frontier(p, env, 10.0);
    const double hi = gain_frontier(p, env, 20.0);
    EXPECT_GE(hi, lo);
  }
  EXPECT_THROW(gain_frontier(table_params(2), table_envelope(2), 0.0), std::invalid_argument);
}
