#pragma once

// Subcommands behind the hacpass executable. Each returns a process exit
// code: 0 success or feasible, 1 infeasible or violated, 2 usage or config
// error, 3 numerical failure. Every file is written under the output
// directory; each run writes exactly one manifest next to its main output.

#include "hacpass/certify.hpp"
#include "hacpass/config.hpp"
#include "hacpass/network.hpp"
#include "hacpass/smallsignal.hpp"
#include "hacpass/verify.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>

namespace hacpass::cli {

inline constexpr const char* kToolVersion = "hacpass 1.0.0";
inline constexpr const char* kOutDirEnv = "HACPASS_OUT_DIR";

enum ExitCode : int { kOk = 0, kViolated = 1, kUsage = 2, kNumerical = 3 };

using nlohmann::ordered_json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Output handling

/// Resolves the output directory: explicit flag, then HACPASS_OUT_DIR, then ".".
inline std::filesystem::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return ".";
}

/// Output file inside dir. Names must be relative and must not climb out.
inline std::filesystem::path output_path(const std::filesystem::path& dir, const std::string& name) {
  const std::filesystem::path rel(name);
  if (name.empty() || rel.is_absolute()) throw UsageError("--out must be a relative file name: '" + name + "'");
  for (const auto& part : rel)
    if (part == "..") throw UsageError("--out must not leave the output directory: '" + name + "'");
  const auto full = dir / rel;
  std::filesystem::create_directories(full.parent_path().empty() ? dir : full.parent_path());
  return full;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError(path, "cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int k = 0; k < len; ++k) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[k]);
  return os.str();
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline ordered_json number(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

inline ordered_json params_json(const InverterSpec& inv) {
  const auto& p = inv.params;
  const auto& g = inv.gains;
  ordered_json j;
  j["name"] = inv.name;
  j["bus"] = inv.bus;
  j["s_rated_VA"] = inv.s_rated;
  j["v_ll_V"] = inv.v_ll;
  j["c_dc_F"] = p.c_dc;
  j["g_dc_S"] = p.g_dc;
  j["c_f_F"] = p.c_f;
  j["g_f_S"] = p.g_f;
  j["l_f_H"] = p.l_f;
  j["r_f_Ohm"] = p.r_f;
  j["mu"] = p.mu;
  j["kappa_S"] = p.kappa;
  j["omega0_rad_s"] = g.omega0;
  j["eta"] = g.eta;
  j["gamma"] = g.gamma;
  j["v_dc_star_V"] = g.v_dc_star;
  j["theta_star_rad"] = g.theta_star0;
  j["envelope_v_dc_V"] = inv.envelope.v_dc_bar_max;
  j["envelope_i_A"] = inv.envelope.i_ac_norm_max;
  return j;
}

inline ordered_json certificate_json(const Certificate& c) {
  return ordered_json{{"eps1", c.eps1}, {"eps2", c.eps2}, {"lambda", c.lambda},
                      {"envelope_v_dc_V", c.envelope.v_dc_bar_max}, {"envelope_i_A", c.envelope.i_ac_norm_max}};
}

/// Manifest skeleton shared by all subcommands.
class Manifest {
 public:
  Manifest(std::string command, const std::string& config_path, const std::string& config_text)
      : started_(utc_now()) {
    j_["command"] = std::move(command);
    j_["tool_version"] = kToolVersion;
    j_["config_path"] = config_path;
    j_["config_sha256"] = sha256_hex(config_text);
  }

  ordered_json& operator[](const std::string& key) { return j_[key]; }

  void add_output(const std::filesystem::path& p) { outputs_.push_back(p.string()); }

  void write(const std::filesystem::path& path, int exit_code) {
    add_output(path);
    j_["outputs"] = outputs_;
    j_["exit_code"] = exit_code;
    j_["started_utc"] = started_;
    j_["finished_utc"] = utc_now();
    write_text(path, j_.dump(2) + "\n");
  }

 private:
  ordered_json j_;
  std::vector<std::string> outputs_;
  std::string started_;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& main_output) {
  auto p = main_output;
  p.replace_extension(".manifest.json");
  return p;
}

/// Applies --eta / --gamma overrides to every inverter.
inline void override_gains(NetworkConfig& cfg, std::optional<double> eta, std::optional<double> gamma) {
  for (auto& inv : cfg.inverters) {
    if (eta) inv.gains.eta = *eta;
    if (gamma) inv.gains.gamma = *gamma;
    try {
      inv.gains.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("gain override: ") + e.what());
    }
  }
}

/// Runs body, mapping exceptions to exit codes with a diagnostic on err.
template <class Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConvergenceError& e) {
    err << "numerical failure: " << e.what() << "\n  residual history:";
    for (double r : e.residual_history()) err << " " << r;
    err << "\n";
    return kNumerical;
  } catch (const DivergenceError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const FrequencyError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kNumerical;
  }
}

// ---------------------------------------------------------------------------
// certify

struct CertifyArgs {
  std::string config;
  std::string out_dir;
  std::string out = "certify_report.json";
  bool synthesize = false;
  bool refine = false;
  std::optional<double> envelope_v_dc;
  std::optional<double> envelope_i;
  std::optional<double> eta;
  std::optional<double> gamma;
};

inline int cmd_certify(const CertifyArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (args.config.empty()) throw UsageError("--config is required");
    const std::string text = read_text(args.config);
    NetworkConfig cfg = load_config(text);
    override_gains(cfg, args.eta, args.gamma);
    const auto dir = output_dir(args.out_dir);
    const auto report_path = output_path(dir, args.out);

    ordered_json report;
    report["inverters"] = ordered_json::array();
    bool all = !cfg.inverters.empty();
    for (auto& inv : cfg.inverters) {
      if (args.envelope_v_dc) inv.envelope.v_dc_bar_max = *args.envelope_v_dc;
      if (args.envelope_i) inv.envelope.i_ac_norm_max = *args.envelope_i;
      try {
        inv.envelope.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      ordered_json entry;
      entry["name"] = inv.name;
      entry["bus"] = inv.bus;
      std::optional<Certificate> cert;
      if (inv.certificate && !args.synthesize) {
        cert = inv.certificate;
        cert->envelope = inv.envelope;
        entry["certificate_source"] = "config";
      } else {
        const auto syn = synthesize_certificate(inv.params, inv.gains, inv.envelope, SynthesisOptions{args.refine});
        entry["certificate_source"] = "synthesized";
        if (syn.ok()) {
          cert = syn.certificate;
        } else {
          entry["violated"] = syn.witness.violated;
          entry["violated_value"] = number(syn.witness.value);
        }
      }
      bool feasible = false;
      if (cert) {
        const auto rep = check_conditions(inv.params, inv.gains, *cert);
        feasible = rep.feasible;
        entry["certificate"] = certificate_json(*cert);
        entry["margins"] = {number(rep.margins[0]), number(rep.margins[1]), number(rep.margins[2])};
        entry["q_min_eig"] = number(rep.q_min_eig);
        entry["shunt_conductance_positive"] = rep.shunt_conductance_positive;
      }
      entry["feasible"] = feasible;
      all = all && feasible;
      out << "inverter " << inv.name << ": " << (feasible ? "feasible" : "INFEASIBLE") << "\n";
      report["inverters"].push_back(entry);
    }
    report["all_feasible"] = all;
    write_text(report_path, report.dump(2) + "\n");

    const int code = all ? kOk : kViolated;
    Manifest m("certify", args.config, text);
    m["parameters"] = ordered_json::array();
    for (const auto& inv : cfg.inverters) m["parameters"].push_back(params_json(inv));
    m["flags"] = {{"synthesize", args.synthesize}, {"refine", args.refine}};
    m.add_output(report_path);
    m.write(manifest_path(report_path), code);
    return code;
  });
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  std::string config;
  std::string out_dir;
  std::string out = "sweep.csv";
  std::string inverter;
  std::string grid = "0.1:1e4:400";  ///< lo:hi:n, logarithmic
  std::vector<double> omegas;        ///< explicit grid, overrides `grid`
};

inline std::vector<double> parse_grid(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string s; std::getline(ss, s, ':');) parts.push_back(s);
  if (parts.size() != 3) throw UsageError("--grid expects lo:hi:n, got '" + spec + "'");
  try {
    const double lo = std::stod(parts[0]);
    const double hi = std::stod(parts[1]);
    const long n = std::stol(parts[2]);
    if (n < 1) throw UsageError("--grid: n must be >= 1");
    if (!(lo > 0.0) || !(hi >= lo)) throw UsageError("--grid: need 0 < lo <= hi (ascending)");
    return log_grid(lo, hi, static_cast<std::size_t>(n));
  } catch (const std::logic_error&) {
    throw UsageError("--grid expects lo:hi:n, got '" + spec + "'");
  }
}

/// Operating point of one inverter inside the configured network: the
/// network steady state gives its load current and DC reference, and the
/// single-inverter Newton solve gives the dq equilibrium.
inline Equilibrium network_operating_point(const NetworkConfig& cfg, std::size_t k, InverterParams& effective) {
  NetworkModel model(cfg);
  const auto ss = steady_state(model);
  effective = model.effective_params(k);
  return equilibrium(effective, cfg.inverters[k].gains, model.port_input(ss.x, k));
}

inline int cmd_sweep(const SweepArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (args.config.empty()) throw UsageError("--config is required");
    if (args.inverter.empty()) throw UsageError("--inverter is required");
    const std::string text = read_text(args.config);
    const NetworkConfig cfg = load_config(text);
    const std::size_t k = inverter_index(cfg, args.inverter);
    std::vector<double> grid = args.omegas.empty() ? parse_grid(args.grid) : args.omegas;
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (!(grid[i] > 0.0) || (i > 0 && !(grid[i] > grid[i - 1])))
        throw UsageError("frequency grid must be positive and strictly increasing");
    const auto dir = output_dir(args.out_dir);
    const auto csv_path = output_path(dir, args.out);

    InverterParams p;
    const Equilibrium eq = network_operating_point(cfg, k, p);
    const StateSpace ss = linearize(p, cfg.inverters[k].gains, eq);
    const SweepResult r = sweep(ss, grid);
    std::ostringstream csv;
    write_sweep_csv(r, csv);
    write_text(csv_path, csv.str());

    double min_ifp = INFINITY, min_ofp = INFINITY;
    for (std::size_t i = 0; i < r.omegas.size(); ++i) {
      if (std::isfinite(r.ifp[i])) min_ifp = std::min(min_ifp, r.ifp[i]);
      if (std::isfinite(r.ofp[i])) min_ofp = std::min(min_ofp, r.ofp[i]);
    }
    if (!r.gaps.empty()) err << "warning: " << r.gaps.size() << " sweep point(s) could not be evaluated\n";
    out << "inverter " << args.inverter << ": min IFP " << min_ifp << ", min OFP " << min_ofp << " over "
        << r.omegas.size() << " points\n";

    const bool positive = r.gaps.size() < r.omegas.size() && min_ifp > 0.0 && min_ofp > 0.0;
    const int code = r.gaps.size() == r.omegas.size() ? kNumerical : (positive ? kOk : kViolated);
    Manifest m("sweep", args.config, text);
    m["parameters"] = params_json(cfg.inverters[k]);
    m["operating_point"] = {{"v_dc_V", eq.v_dc_eq},         {"v_dq_V", {eq.v_dq_eq(0), eq.v_dq_eq(1)}},
                            {"i_dq_A", {eq.i_dq_eq(0), eq.i_dq_eq(1)}}, {"theta_rad", eq.theta_eq},
                            {"i_dc_ref_A", eq.input_eq.i_dc_ref}, {"residual", eq.residual}};
    m["grid"] = {{"points", grid.size()}, {"omega_min", grid.front()}, {"omega_max", grid.back()}};
    m["metrics"] = {{"min_ifp", number(min_ifp)}, {"min_ofp", number(min_ofp)}, {"gaps", r.gaps}};
    m.add_output(csv_path);
    m.write(manifest_path(csv_path), code);
    return code;
  });
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string config;
  std::string out_dir;
  std::string out = "trajectory.csv";
  double dt = 50e-6;
  double t_end = 5.0;
  std::size_t sample_every = 10;
  std::vector<std::string> events;  ///< replace the config events when non-empty
  std::optional<double> eta;
  std::optional<double> gamma;
};

/// TIME:load_scale:BUS:MULTIPLIER or TIME:input_step:INVERTER:DELTA_A
inline SimEvent parse_event(const std::string& spec, const NetworkConfig& cfg) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string s; std::getline(ss, s, ':');) parts.push_back(s);
  const std::string usage = "--event expects TIME:load_scale:BUS:MULTIPLIER or TIME:input_step:INVERTER:DELTA_A, got '" + spec + "'";
  if (parts.size() != 4) throw UsageError(usage);
  SimEvent ev;
  try {
    ev.time = std::stod(parts[0]);
    ev.value = std::stod(parts[3]);
  } catch (const std::logic_error&) {
    throw UsageError(usage);
  }
  if (parts[1] == "load_scale") {
    ev.kind = SimEvent::Kind::load_scale;
    try {
      ev.target = std::stoi(parts[2]);
    } catch (const std::logic_error&) {
      throw UsageError(usage);
    }
  } else if (parts[1] == "input_step") {
    ev.kind = SimEvent::Kind::input_step;
    ev.target = static_cast<int>(inverter_index(cfg, parts[2]));
  } else {
    throw UsageError(usage);
  }
  return ev;
}

inline ordered_json event_json(const SimEvent& ev) {
  return {{"time_s", ev.time},
          {"kind", ev.kind == SimEvent::Kind::load_scale ? "load_scale" : "input_step"},
          {"target", ev.target},
          {"value", ev.value}};
}

inline int cmd_simulate(const SimulateArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (args.config.empty()) throw UsageError("--config is required");
    if (!(args.dt > 0.0)) throw UsageError("--dt must be > 0");
    if (!(args.t_end > 0.0)) throw UsageError("--t-end must be > 0");
    if (args.sample_every == 0) throw UsageError("--sample-every must be >= 1");
    const std::string text = read_text(args.config);
    NetworkConfig cfg = load_config(text);
    override_gains(cfg, args.eta, args.gamma);
    if (!args.events.empty()) {
      cfg.events.clear();
      for (const auto& e : args.events) cfg.events.push_back(parse_event(e, cfg));
    }
    try {
      cfg.validate();
      detail::exact_step_count(args.t_end, args.dt, "t_end");
      for (const auto& ev : cfg.events) detail::exact_step_count(ev.time, args.dt, "event time");
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    const auto dir = output_dir(args.out_dir);
    const auto csv_path = output_path(dir, args.out);

    Manifest m("simulate", args.config, text);
    m["parameters"] = ordered_json::array();
    for (const auto& inv : cfg.inverters) m["parameters"].push_back(params_json(inv));
    m["dt_s"] = args.dt;
    m["t_end_s"] = args.t_end;
    m["sample_every"] = args.sample_every;
    m["events"] = ordered_json::array();
    for (const auto& ev : cfg.events) m["events"].push_back(event_json(ev));

    NetworkModel model(cfg);
    SimulationResult res;
    try {
      res = simulate(model, cfg.events, SimulationOptions{args.dt, args.t_end, args.sample_every});
    } catch (const DivergenceError& e) {
      const auto dump = output_path(dir, csv_path.stem().string() + ".last_state.json");
      ordered_json j;
      j["time_s"] = e.time();
      j["state"] = std::vector<double>(e.last_finite_state().data(),
                                       e.last_finite_state().data() + e.last_finite_state().size());
      write_text(dump, j.dump(2) + "\n");
      err << "numerical failure: " << e.what() << "\n  last finite state written to " << dump.string() << "\n";
      m["divergence"] = {{"time_s", e.time()}};
      m.add_output(dump);
      m.write(manifest_path(csv_path), kNumerical);
      return static_cast<int>(kNumerical);
    }
    for (std::size_t e : res.trajectory.skipped_events)
      err << "warning: event at t = " << cfg.events[e].time << " s is after t_end and was skipped\n";

    std::ostringstream csv;
    export_csv(res.trajectory, model, csv);
    write_text(csv_path, csv.str());

    const int code = res.settled ? kOk : kViolated;
    m["steady_state"] = {{"residual", res.initial.residual},
                         {"newton_history", res.initial.history},
                         {"i_dc_ref_A", res.initial.i_dc_ref}};
    m["initial_load_power"] = ordered_json::array();
    for (std::size_t k = 0; k < cfg.loads.size(); ++k)
      m["initial_load_power"].push_back(
          {{"bus", cfg.loads[k].bus}, {"p_W", res.load_power_initial[k](0)}, {"q_var", res.load_power_initial[k](1)}});
    m["skipped_events"] = res.trajectory.skipped_events;
    m["metrics"] = {{"settling_peak_post_event", res.peak_post_event},
                    {"settling_final", res.final_metric},
                    {"settle_ratio", res.settle_ratio},
                    {"settle_ratio_threshold", kSettleRatio},
                    {"settled", res.settled}};
    m.add_output(csv_path);
    m.write(manifest_path(csv_path), code);
    out << (res.settled ? "settled" : "NOT settled") << ": final/peak settling metric " << res.settle_ratio << "\n";
    return code;
  });
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string config;
  std::string out_dir;
  std::string out = "verify_report.json";
  std::string inverter;
  long seeds = 20;
  std::uint64_t seed_base = 1;
  std::optional<double> lambda;
  std::optional<double> eta;
  std::optional<double> gamma;
  double t_end = 0.1;
  double dt = 20e-6;
  bool adversarial = false;
  std::string series;  ///< optional CSV of V(t) and supply rate for the worst seed
};

/// Perturbation bounds scaled to the inverter rating.
inline InputSpec default_input_spec(const InverterSpec& inv, double t_end, double dt, bool adversarial) {
  const double i_rated = inv.s_rated / inv.v_ll;
  InputSpec s;
  s.t_end = t_end;
  s.dt = dt;
  s.reference_load_max = i_rated;
  s.dv_dc0 = 0.02 * inv.gains.v_dc_star;
  s.dtheta0 = 0.5;
  if (adversarial) {
    s.adversarial = true;
    return s;  // initial offsets only, no input perturbation
  }
  s.i_dc_amplitude = 0.2 * inv.s_rated / inv.gains.v_dc_star;
  s.i_load_amplitude = 0.2 * i_rated;
  s.dv_ac0 = 0.02 * inv.v_ll;
  s.di_ac0 = 0.05 * i_rated;
  return s;
}

inline int cmd_verify(const VerifyArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (args.config.empty()) throw UsageError("--config is required");
    if (args.inverter.empty()) throw UsageError("--inverter is required");
    if (args.seeds < 1) throw UsageError("--seeds must be >= 1");
    const std::string text = read_text(args.config);
    NetworkConfig cfg = load_config(text);
    override_gains(cfg, args.eta, args.gamma);
    const std::size_t k = inverter_index(cfg, args.inverter);
    const auto& inv = cfg.inverters[k];
    const auto dir = output_dir(args.out_dir);
    const auto report_path = output_path(dir, args.out);

    double lambda = 0.0;
    std::string lambda_source;
    if (args.lambda) {
      lambda = *args.lambda;
      lambda_source = "flag";
    } else if (inv.certificate) {
      lambda = inv.certificate->lambda;
      lambda_source = "config";
    } else {
      const auto syn = synthesize_certificate(inv.params, inv.gains, inv.envelope);
      if (!syn.ok()) throw UsageError("no certificate in config and synthesis failed; pass --lambda");
      lambda = syn.certificate->lambda;
      lambda_source = "synthesized";
    }
    if (!(lambda > 0.0)) throw UsageError("--lambda must be > 0");

    InputSpec spec;
    try {
      spec = default_input_spec(inv, args.t_end, args.dt, args.adversarial);
      spec.validate();
      detail::exact_step_count(args.t_end, args.dt, "t_end");
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }

    ordered_json runs = ordered_json::array();
    bool all = true;
    double worst = INFINITY;
    std::uint64_t worst_seed = args.seed_base;
    for (long s = 0; s < args.seeds; ++s) {
      const std::uint64_t seed = args.seed_base + static_cast<std::uint64_t>(s);
      const auto pair = random_trajectory_pair(inv.params, inv.gains, spec, seed);
      const double tol = default_tolerance(pair.perturbed, pair.reference, inv.params, lambda, spec.dt);
      const auto rep = dissipation_check(pair.perturbed, pair.reference, inv.params, inv.gains, lambda, tol);
      all = all && rep.passed;
      const double normalized = rep.worst_slack / std::max(tol, std::numeric_limits<double>::min());
      if (normalized < worst) {
        worst = normalized;
        worst_seed = seed;
      }
      runs.push_back({{"seed", seed},
                      {"passed", rep.passed},
                      {"slack_J", rep.slack},
                      {"worst_slack_J", rep.worst_slack},
                      {"worst_time_s", rep.worst_time},
                      {"tol_J", rep.tol},
                      {"storage_start_J", rep.storage_start},
                      {"storage_end_J", rep.storage_end},
                      {"supplied_J", rep.supplied},
                      {"rho_max", number(rep.rho_max)},
                      {"outside_validated_region", rep.outside_validated_region},
                      {"reference_off_setpoint", rep.reference_off_setpoint}});
      if (!rep.passed)
        err << "seed " << seed << ": dissipation violated by " << -rep.worst_slack << " J (tol " << tol << " J)\n";
    }

    std::optional<std::filesystem::path> series_path;
    if (!args.series.empty()) {
      series_path = output_path(dir, args.series);
      const auto pair = random_trajectory_pair(inv.params, inv.gains, spec, worst_seed);
      std::ostringstream csv;
      write_dissipation_csv(dissipation_series(pair.perturbed, pair.reference, inv.params, lambda), csv);
      write_text(*series_path, csv.str());
    }

    ordered_json report;
    report["inverter"] = inv.name;
    report["lambda"] = lambda;
    report["lambda_source"] = lambda_source;
    report["adversarial"] = args.adversarial;
    report["all_passed"] = all;
    report["worst_seed"] = worst_seed;
    report["runs"] = runs;
    write_text(report_path, report.dump(2) + "\n");

    const int code = all ? kOk : kViolated;
    Manifest m("verify", args.config, text);
    m["parameters"] = params_json(inv);
    m["lambda"] = lambda;
    m["seeds"] = {{"base", args.seed_base}, {"count", args.seeds}};
    m["dt_s"] = spec.dt;
    m["t_end_s"] = spec.t_end;
    m["tolerance_model"] = "10 * dt^2 * T * P_scale";
    m.add_output(report_path);
    if (series_path) m.add_output(*series_path);
    m.write(manifest_path(report_path), code);
    out << (all ? "all " : "NOT all ") << args.seeds << " seed(s) satisfy the dissipation inequality\n";
    return code;
  });
}

}  // namespace hacpass::cli
