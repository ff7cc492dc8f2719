#include "hacpass/cli.hpp"

#include <CLI11.hpp>

namespace {

template <class T>
void optional_flag(CLI::App* app, const std::string& name, std::optional<T>& target, const std::string& help) {
  app->add_option_function<T>(name, [&target](const T& v) { target = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace hacpass::cli;
  CLI::App app{"Incremental passivity tooling for HAC grid-forming inverters"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CertifyArgs certify;
  auto* c = app.add_subcommand("certify", "check (or synthesize) the large-signal certificate of every inverter");
  c->add_option("--config", certify.config, "network config file")->required();
  c->add_option("--out-dir", certify.out_dir, "output directory (default $HACPASS_OUT_DIR or .)");
  c->add_option("--out", certify.out, "report file name")->capture_default_str();
  c->add_flag("--synthesize", certify.synthesize, "synthesize certificates instead of using the configured ones");
  c->add_flag("--refine", certify.refine, "grid search for the synthesis");
  optional_flag(c, "--envelope-v-dc", certify.envelope_v_dc, "envelope bound on the reference DC voltage (V)");
  optional_flag(c, "--envelope-i", certify.envelope_i, "envelope bound on the reference current norm (A)");
  optional_flag(c, "--eta", certify.eta, "override eta for every inverter");
  optional_flag(c, "--gamma", certify.gamma, "override gamma for every inverter");

  SweepArgs sweep;
  auto* s = app.add_subcommand("sweep", "IFP/OFP frequency sweep of one inverter at its network operating point");
  s->add_option("--config", sweep.config, "network config file")->required();
  s->add_option("--inverter", sweep.inverter, "inverter id (the N of [inverter N])")->required();
  s->add_option("--out-dir", sweep.out_dir, "output directory (default $HACPASS_OUT_DIR or .)");
  s->add_option("--out", sweep.out, "CSV file name")->capture_default_str();
  s->add_option("--grid", sweep.grid, "logarithmic grid lo:hi:n in rad/s")->capture_default_str();
  s->add_option("--omegas", sweep.omegas, "explicit ascending grid in rad/s")->delimiter(',');

  SimulateArgs sim;
  auto* m = app.add_subcommand("simulate", "steady state, then time-domain simulation with events");
  m->add_option("--config", sim.config, "network config file")->required();
  m->add_option("--out-dir", sim.out_dir, "output directory (default $HACPASS_OUT_DIR or .)");
  m->add_option("--out", sim.out, "trajectory CSV file name")->capture_default_str();
  m->add_option("--dt", sim.dt, "step size (s)")->capture_default_str();
  m->add_option("--t-end", sim.t_end, "end time (s)")->capture_default_str();
  m->add_option("--sample-every", sim.sample_every, "record every Nth step")->capture_default_str();
  m->add_option("--event", sim.events, "TIME:load_scale:BUS:MULT or TIME:input_step:INVERTER:DELTA_A (repeatable)");
  optional_flag(m, "--eta", sim.eta, "override eta for every inverter");
  optional_flag(m, "--gamma", sim.gamma, "override gamma for every inverter");

  VerifyArgs ver;
  auto* v = app.add_subcommand("verify", "dissipation inequality on seeded random trajectory pairs");
  v->add_option("--config", ver.config, "network config file")->required();
  v->add_option("--inverter", ver.inverter, "inverter id (the N of [inverter N])")->required();
  v->add_option("--out-dir", ver.out_dir, "output directory (default $HACPASS_OUT_DIR or .)");
  v->add_option("--out", ver.out, "report file name")->capture_default_str();
  v->add_option("--seeds", ver.seeds, "number of seeds")->capture_default_str();
  v->add_option("--seed-base", ver.seed_base, "first seed")->capture_default_str();
  optional_flag(v, "--lambda", ver.lambda, "storage weight (default: certificate)");
  optional_flag(v, "--eta", ver.eta, "override eta");
  optional_flag(v, "--gamma", ver.gamma, "override gamma");
  v->add_option("--t-end", ver.t_end, "horizon (s)")->capture_default_str();
  v->add_option("--dt", ver.dt, "step size (s)")->capture_default_str();
  v->add_flag("--adversarial", ver.adversarial, "same-sign initial DC voltage and angle offsets, no input noise");
  v->add_option("--series", ver.series, "CSV of V(t) and supply rate for the worst seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  if (c->parsed()) return cmd_certify(certify);
  if (s->parsed()) return cmd_sweep(sweep);
  if (m->parsed()) return cmd_simulate(sim);
  return cmd_verify(ver);
}
