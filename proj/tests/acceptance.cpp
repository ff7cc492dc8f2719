// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "hacpass/cli.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>

using namespace hacpass;
using namespace hacpass::testing;

namespace {

const std::string kData = HACPASS_DATA_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome certificate_reproduction() {
  const auto dir = std::filesystem::temp_directory_path() / "hacpass_acceptance";
  std::filesystem::remove_all(dir);
  cli::CertifyArgs args;
  args.config = kData + "/single_inverter.cfg";
  args.out_dir = dir.string();
  std::ostringstream out, err;
  const int code = cli::cmd_certify(args, out, err);
  const auto report = nlohmann::json::parse(cli::read_text((dir / args.out).string()));
  std::filesystem::remove_all(dir);
  const auto& inv = report["inverters"][0];
  const double q_min = inv["q_min_eig"].get<double>();
  const bool feasible = inv["feasible"].get<bool>();
  return {code == cli::kOk && feasible && q_min > 0.0,
          fmt("exit %d, feasible %s, min eig(Q) %.4g, margins [%.4g, %.4g, %.4g]", code, feasible ? "yes" : "no", q_min,
              inv["margins"][0].get<double>(), inv["margins"][1].get<double>(), inv["margins"][2].get<double>())};
}

// ---------------------------------------------------------------- 2

Outcome equivalence_suite() {
  std::mt19937_64 rng(2002);
  std::uniform_real_distribution<double> f(0.3, 3.0);
  int disagreements = 0, feasible = 0, ambiguous = 0, bit_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto p = random_params(rng);
    HacGains g;
    g.v_dc_star = log_uniform(rng, 100, 5000);
    g.eta = log_uniform(rng, 1e-6, 10.0);
    g.gamma = log_uniform(rng, 1.0, 1e3);
    const auto env = default_envelope(g.v_dc_star, log_uniform(rng, 1e5, 1e9), log_uniform(rng, 200, 2e4));
    const auto syn = detail::synthesize_at(p, g, env, 0.5, 0.5);
    Certificate c{std::sqrt(p.r_f) * f(rng) * 0.7, 1e-3 * f(rng), 1e6 * f(rng), env};
    if (syn.ok())
      c = Certificate{syn.certificate->eps1 * f(rng), syn.certificate->eps2 * f(rng), syn.certificate->lambda * f(rng),
                      env};
    const auto r = check_conditions(p, g, c);
    // Eigenvalue route on the diagonally scaled congruent matrix D Q D, which
    // has the same inertia as Q and entries of order one.
    const Mat6 q = build_q(p, g, c);
    double eig = -1.0, qn = 1.0;
    if ((q.diagonal().array() > 0.0).all()) {
      const Vec6 d = q.diagonal().cwiseSqrt().cwiseInverse();
      const Mat6 scaled = d.asDiagonal() * q * d.asDiagonal();
      eig = min_eigenvalue(scaled);
      qn = scaled.norm();
    }
    if (std::abs(eig) <= 1e-10 * qn) {
      ++ambiguous;
    } else if (r.feasible != (eig > 0.0)) {
      ++disagreements;
    }
    feasible += r.feasible;
    const auto s = smallsignal_conditions(p, g, c);
    if (std::memcmp(r.margins.data(), s.margins.data(), sizeof r.margins) != 0) ++bit_mismatch;
  }
  return {disagreements == 0 && bit_mismatch == 0,
          fmt("1000 draws (%d feasible), %d disagreements, %d within eigenvalue tolerance, %d margin bit mismatches",
              feasible, disagreements, ambiguous, bit_mismatch)};
}

// ---------------------------------------------------------------- 3

Outcome linearization_oracle() {
  std::mt19937_64 rng(3003);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0, worst_port = 0.0;
  int done = 0;
  while (done < 50) {
    const auto p = random_params(rng);
    auto g = table_gains();
    g.v_dc_star = log_uniform(rng, 300.0, 3000.0);
    g.eta = log_uniform(rng, 1e-5, 1e-2);
    g.gamma = log_uniform(rng, 10.0, 1e3);
    g.theta_star0 = u(rng);
    const double i_char = g.v_dc_star * std::sqrt(p.c_f / p.l_f);
    PortInput in = setpoint_equilibrium(p, g, Vec2(u(rng), u(rng)) * 0.3 * i_char).input_eq;
    in.i_dc_ref += 0.05 * u(rng) * std::abs(in.i_dc_ref);
    Equilibrium eq;
    try {
      eq = equilibrium(p, g, in);
    } catch (const ConvergenceError&) {
      continue;
    }
    ++done;
    const auto ss = linearize(p, g, eq);
    const Vec6 x0 = eq.to_vector();
    const Vec6 scale = dq_state_scale(p, g, eq.input_eq);
    Mat6 fd;
    for (int c = 0; c < 6; ++c) {
      const double h = 1e-5 * scale(c);
      Vec6 xp = x0, xm = x0;
      xp(c) += h;
      xm(c) -= h;
      fd.col(c) = (dq_rhs(xp, eq.input_eq, p, g) - dq_rhs(xm, eq.input_eq, p, g)) / (2.0 * h);
    }
    // Half-angle coordinate for the last state.
    fd.row(5) *= 0.5;
    fd.col(5) *= 2.0;
    for (int r = 0; r < 6; ++r) {
      const double row = std::max(ss.a.row(r).cwiseAbs().maxCoeff(), fd.row(r).cwiseAbs().maxCoeff());
      for (int c = 0; c < 6; ++c) worst = std::max(worst, std::abs(ss.a(r, c) - fd(r, c)) / row);
    }
    const MatX diff = ss.b.transpose() * storage_matrix(p, 1e10) - ss.c;
    worst_port = std::max(worst_port, diff.cwiseAbs().maxCoeff());
  }
  const double ulp = std::numeric_limits<double>::epsilon();
  return {worst < 1e-6 && worst_port <= ulp,
          fmt("50 equilibria, max row-relative FD error %.3g (< 1e-6), max |B^T P - C| %.3g (<= 1 ulp of 1 = %.3g)", worst,
              worst_port, ulp)};
}

// ---------------------------------------------------------------- 4

Outcome smallsignal_passivity() {
  const auto cfg = load_config_file(kData + "/ieee9.cfg");
  const std::size_t k = inverter_index(cfg, "2");
  InverterParams p;
  const auto eq = cli::network_operating_point(cfg, k, p);
  const bool certified = check_conditions(p, cfg.inverters[k].gains, *cfg.inverters[k].certificate).feasible;
  const auto r = sweep(linearize(p, cfg.inverters[k].gains, eq), log_grid(0.1, 1e4, 400));
  std::size_t positive = 0;
  double min_ifp = INFINITY, min_ofp = INFINITY;
  for (std::size_t i = 0; i < r.omegas.size(); ++i) {
    if (r.ifp[i] > 0.0 && r.ofp[i] > 0.0) ++positive;
    min_ifp = std::min(min_ifp, r.ifp[i]);
    min_ofp = std::min(min_ofp, r.ofp[i]);
  }
  return {certified && r.gaps.empty() && positive == 400,
          fmt("certified %s, %zu/400 points with IFP > 0 and OFP > 0, min IFP %.4g S, min OFP %.4g Ohm",
              certified ? "yes" : "no", positive, min_ifp, min_ofp)};
}

// ---------------------------------------------------------------- 5

Outcome nine_bus_scenario() {
  const auto cfg = load_config_file(kData + "/ieee9.cfg");
  NetworkModel model(cfg);
  std::size_t bus6 = cfg.loads.size();
  for (std::size_t k = 0; k < cfg.loads.size(); ++k)
    if (cfg.loads[k].bus == 6) bus6 = k;
  if (bus6 == cfg.loads.size()) return {false, "no load at bus 6"};
  SimulationResult res;
  try {
    res = simulate(model, cfg.events, SimulationOptions{50e-6, 5.0, 10});
  } catch (const std::exception& e) {
    return {false, std::string("run failed: ") + e.what()};
  }
  const double p6 = res.load_power_initial[bus6](0), q6 = res.load_power_initial[bus6](1);
  const bool power_ok = std::abs(p6 / 125e6 - 1.0) <= 0.02 && std::abs(q6 / 50e6 - 1.0) <= 0.02;
  const bool event_ok = cfg.events.size() == 1 && cfg.events[0].time == 1.5 && res.trajectory.skipped_events.empty() &&
                        model.load_scale(bus6) == 2.0;
  bool finite = true;
  for (const auto& x : res.trajectory.states) finite = finite && x.allFinite();
  return {power_ok && event_ok && res.settled && finite,
          fmt("bus 6 pre-event %.4g MW / %.4g MVAr, doubling at t = 1.5 s %s, settle ratio %.3g (< %.0e), finite %s", p6 / 1e6,
              q6 / 1e6, event_ok ? "applied" : "MISSING", res.settle_ratio, kSettleRatio, finite ? "yes" : "no")};
}

// ---------------------------------------------------------------- 6

InputSpec certified_spec(double dt) {
  const double i_rated = kTable[2].s_rated / kVll;
  InputSpec s;
  s.t_end = 0.1;
  s.dt = dt;
  s.reference_load_max = i_rated;
  s.i_dc_amplitude = 0.2 * kTable[2].s_rated / kVdc;
  s.i_load_amplitude = 0.2 * i_rated;
  s.dv_dc0 = 0.02 * kVdc;
  s.dv_ac0 = 0.02 * kVll;
  s.di_ac0 = 0.05 * i_rated;
  s.dtheta0 = 0.5;
  return s;
}

InverterParams inverter_three() {
  auto p = table_params(2);
  p.mu = 0.63265;
  return p;
}

DissipationReport run_pair(const InverterParams& p, const HacGains& g, const InputSpec& spec, std::uint64_t seed) {
  const auto pr = random_trajectory_pair(p, g, spec, seed);
  const double tol = default_tolerance(pr.perturbed, pr.reference, p, 1e10, spec.dt);
  return dissipation_check(pr.perturbed, pr.reference, p, g, 1e10, tol);
}

Outcome dissipation_inequality() {
  const auto p = inverter_three();
  const auto g = table_gains();
  const double dt = 20e-6;
  int passed = 0;
  double neg_dt = 0.0, neg_half = 0.0, worst_norm = INFINITY;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const auto r = run_pair(p, g, certified_spec(dt), seed);
    const auto h = run_pair(p, g, certified_spec(dt / 2), seed);
    passed += r.passed && r.worst_slack >= -r.tol;
    neg_dt = std::max(neg_dt, std::max(0.0, -r.worst_slack));
    neg_half = std::max(neg_half, std::max(0.0, -h.worst_slack));
    worst_norm = std::min(worst_norm, r.worst_slack / r.tol);
  }
  // Discretization error of the slack against a dt/8 run: it must at least
  // halve when dt halves.
  double ratio = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const double fine = run_pair(p, g, certified_spec(dt / 8), seed).slack;
    const double e1 = std::abs(run_pair(p, g, certified_spec(dt), seed).slack - fine);
    const double e2 = std::abs(run_pair(p, g, certified_spec(dt / 2), seed).slack - fine);
    ratio = std::max(ratio, e2 / e1);
  }
  const bool halving = neg_half <= 0.5 * neg_dt && ratio <= 0.5;
  return {passed == 100 && halving,
          fmt("%d/100 seeds slack >= -tol (min worst_slack/tol %.3g); worst negative excursion %.3g J at dt, %.3g J at dt/2; "
              "slack error ratio e(dt/2)/e(dt) %.3g (<= 0.5)",
              passed, worst_norm, neg_dt, neg_half, ratio)};
}

// ---------------------------------------------------------------- 7

Outcome negative_control() {
  const auto p = inverter_three();
  auto g = table_gains();
  g.gamma = 1e-3;
  g.eta = 1.0;
  const bool infeasible = !check_conditions(p, g, paper_witness()).feasible;
  InputSpec spec;
  spec.t_end = 0.1;
  spec.reference_load_max = kTable[2].s_rated / kVll;
  spec.dv_dc0 = 0.02 * kVdc;
  spec.dtheta0 = 0.5;
  spec.adversarial = true;
  double best = 0.0, violation = 0.0, tol = 0.0;
  std::uint64_t best_seed = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto r = run_pair(p, g, spec, seed);
    if (r.violation() / r.tol > best) {
      best = r.violation() / r.tol;
      violation = r.violation();
      tol = r.tol;
      best_seed = seed;
    }
  }
  return {infeasible && best > 100.0,
          fmt("certificate infeasible %s; seed %llu violation %.4g J vs tol %.4g J (%.3g x tol)", infeasible ? "yes" : "no",
              static_cast<unsigned long long>(best_seed), violation, tol, best)};
}

// ---------------------------------------------------------------- 8

Outcome integrator_convergence() {
  auto err = [](double dt) {
    const auto tr = integrate([](double, const VecX& x) -> VecX { return -x; }, VecX::Ones(1), 0.0, 1.0, dt);
    return std::abs(tr.states.back()(0) - std::exp(-1.0));
  };
  const double e1 = err(0.1), e2 = err(0.05), e3 = err(0.025);
  const double r1 = e1 / e2, r2 = e2 / e3;
  return {std::abs(r1 - 16.0) <= 2.0 && std::abs(r2 - 16.0) <= 2.0, fmt("error ratios %.3f, %.3f (16 +- 2)", r1, r2)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "certificate reproduction", 1.0, certificate_reproduction},
      {2, "equivalence suite", 10.0, equivalence_suite},
      {3, "linearization oracle", 10.0, linearization_oracle},
      {4, "small-signal passivity", 5.0, smallsignal_passivity},
      {5, "9-bus scenario", 300.0, nine_bus_scenario},
      {6, "dissipation inequality", 120.0, dissipation_inequality},
      {7, "negative control", 120.0, negative_control},
      {8, "integrator convergence", 1.0, integrator_convergence},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = o.pass && secs < c.budget_s;
    failures += !pass;
    std::printf("%s criterion %d (%s): %s; runtime %.2f s (< %.0f s)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_s);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
