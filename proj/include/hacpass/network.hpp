#pragma once

// Multi-inverter averaged network in the stationary alpha-beta frame.
//
// State vector, in order:
//   per inverter  [v_dc, v_alpha, v_beta, i_alpha, i_beta, theta]
//   per junction  [v_alpha, v_beta]   (buses without an inverter)
//   per branch    [i_alpha, i_beta]   (series RL, positive from -> to)
//   per load      [i_alpha, i_beta]   (series RL to ground)
//
// An inverter bus voltage is the inverter's filter-capacitor voltage; any
// shunt elements configured at that bus are folded into the filter. Junction
// buses carry a shunt capacitance so every bus has a voltage state.

#include "hacpass/certify.hpp"
#include "hacpass/integrate.hpp"
#include "hacpass/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace hacpass {

struct BusSpec {
  int id = 0;
  double v_ll = 0.0;     ///< nominal line-to-line voltage (V)
  double shunt_c = 0.0;  ///< F
  double shunt_g = 0.0;  ///< S
};

struct BranchSpec {
  std::string name;
  int from = 0;
  int to = 0;
  double r = 0.0;  ///< Ohm
  double l = 0.0;  ///< H
};

struct LoadSpec {
  std::string name;
  int bus = 0;
  double r = 0.0;  ///< Ohm at scale 1
  double l = 0.0;  ///< H at scale 1
  double scale = 1.0;  ///< admittance multiplier; impedance is divided by it
};

struct InverterSpec {
  std::string name;
  int bus = 0;
  InverterParams params;
  HacGains gains;
  double s_rated = 0.0;  ///< VA
  double v_ll = 0.0;     ///< V
  double i_dc_ref = std::numeric_limits<double>::quiet_NaN();  ///< A; NaN until a steady state sets it
  OperatingEnvelope envelope;
  std::optional<Certificate> certificate;
};

struct SimEvent {
  enum class Kind { load_scale, input_step };
  double time = 0.0;
  Kind kind = Kind::load_scale;
  int target = 0;      ///< bus id for load_scale, inverter index for input_step
  double value = 1.0;  ///< multiplier, or delta i_dc_ref in A
};

struct NetworkConfig {
  double omega0 = 2.0 * kPi * 60.0;
  double s_base = 100e6;
  double v_base = 690.0;
  double junction_c = 0.0;  ///< F, used at junction buses without a shunt capacitance
  std::vector<BusSpec> buses;
  std::vector<BranchSpec> branches;
  std::vector<LoadSpec> loads;
  std::vector<InverterSpec> inverters;
  std::vector<SimEvent> events;

  std::size_t bus_index(int id) const {
    for (std::size_t k = 0; k < buses.size(); ++k)
      if (buses[k].id == id) return k;
    throw std::out_of_range("unknown bus " + std::to_string(id));
  }

  bool has_bus(int id) const {
    for (const auto& b : buses)
      if (b.id == id) return true;
    return false;
  }

  /// Throws std::invalid_argument naming the offending element.
  void validate() const {
    if (buses.empty()) throw std::invalid_argument("network: no buses defined");
    if (!(omega0 > 0.0)) throw std::invalid_argument("system.frequency: must be > 0");
    std::set<int> ids;
    for (const auto& b : buses) {
      if (!ids.insert(b.id).second) throw std::invalid_argument("bus " + std::to_string(b.id) + ": duplicate id");
      if (!(b.v_ll > 0.0)) throw std::invalid_argument("bus " + std::to_string(b.id) + ".v_ll_V: must be > 0");
      if (!(b.shunt_c >= 0.0) || !(b.shunt_g >= 0.0))
        throw std::invalid_argument("bus " + std::to_string(b.id) + ": shunt elements must be >= 0");
    }
    for (const auto& br : branches) {
      if (!ids.count(br.from) || !ids.count(br.to))
        throw std::invalid_argument("branch " + br.name + ": endpoint bus does not exist");
      if (br.from == br.to) throw std::invalid_argument("branch " + br.name + ": from and to are the same bus");
      if (!(br.r >= 0.0)) throw std::invalid_argument("branch " + br.name + ".r: must be >= 0");
      if (!(br.l > 0.0)) throw std::invalid_argument("branch " + br.name + ".l: must be > 0");
    }
    for (const auto& ld : loads) {
      if (!ids.count(ld.bus)) throw std::invalid_argument("load " + ld.name + ": bus does not exist");
      if (!(ld.r >= 0.0) || !(ld.l > 0.0)) throw std::invalid_argument("load " + ld.name + ": need r >= 0, l > 0");
      if (!(ld.scale > 0.0)) throw std::invalid_argument("load " + ld.name + ".scale: must be > 0");
    }
    std::set<int> inverter_buses;
    for (const auto& inv : inverters) {
      if (!ids.count(inv.bus)) throw std::invalid_argument("inverter " + inv.name + ": bus does not exist");
      if (!inverter_buses.insert(inv.bus).second)
        throw std::invalid_argument("inverter " + inv.name + ": bus already hosts an inverter");
      try {
        inv.params.validate();
        inv.gains.validate();
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("inverter " + inv.name + ": " + e.what());
      }
    }
    for (const auto& b : buses)
      if (!inverter_buses.count(b.id) && !(b.shunt_c > 0.0) && !(junction_c > 0.0))
        throw std::invalid_argument("bus " + std::to_string(b.id) + ": junction bus needs a shunt capacitance");

    // Connectivity by union-find over branches.
    std::map<int, int> parent;
    for (int id : ids) parent[id] = id;
    auto find = [&](int a) {
      while (parent[a] != a) a = parent[a] = parent[parent[a]];
      return a;
    };
    for (const auto& br : branches) parent[find(br.from)] = find(br.to);
    const int root = find(buses.front().id);
    for (int id : ids)
      if (find(id) != root) throw std::invalid_argument("network: bus " + std::to_string(id) + " is disconnected");

    for (std::size_t e = 0; e < events.size(); ++e) {
      const auto& ev = events[e];
      const std::string where = "event " + std::to_string(e + 1);
      if (!(ev.time >= 0.0)) throw std::invalid_argument(where + ".time_s: must be >= 0");
      if (ev.kind == SimEvent::Kind::load_scale) {
        if (!ids.count(ev.target)) throw std::invalid_argument(where + ".bus: bus does not exist");
        if (!(ev.value > 0.0)) throw std::invalid_argument(where + ".multiplier: must be > 0");
      } else if (ev.target < 0 || static_cast<std::size_t>(ev.target) >= inverters.size()) {
        throw std::invalid_argument(where + ".inverter: no such inverter");
      }
    }
  }
};

/// Series RL load drawing (p, q) at the given line-to-line voltage magnitude.
inline LoadSpec load_from_power(std::string name, int bus, double p, double q, double v_ll, double omega) {
  const double s2 = p * p + q * q;
  if (!(s2 > 0.0) || !(q > 0.0) || !(p >= 0.0))
    throw std::invalid_argument("load " + name + ": need p >= 0 and q > 0 for a series RL load");
  LoadSpec ld;
  ld.name = std::move(name);
  ld.bus = bus;
  ld.r = v_ll * v_ll * p / s2;
  ld.l = v_ll * v_ll * q / s2 / omega;
  return ld;
}

/// Assembled network dynamics. rhs() is a pure function of (t, x) given the
/// current event-controlled settings (load scales, DC reference currents).
class NetworkModel {
 public:
  explicit NetworkModel(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t nb = cfg_.buses.size();
    inverter_at_bus_.assign(nb, -1);
    for (std::size_t k = 0; k < cfg_.inverters.size(); ++k)
      inverter_at_bus_[cfg_.bus_index(cfg_.inverters[k].bus)] = static_cast<int>(k);

    effective_.reserve(cfg_.inverters.size());
    for (const auto& inv : cfg_.inverters) {
      InverterParams p = inv.params;
      const auto& b = cfg_.buses[cfg_.bus_index(inv.bus)];
      p.c_f += b.shunt_c;
      p.g_f += b.shunt_g;
      effective_.push_back(p);
      i_dc_ref_.push_back(std::isnan(inv.i_dc_ref) ? 0.0 : inv.i_dc_ref);
    }

    std::size_t off = 6 * cfg_.inverters.size();
    junction_offset_.assign(nb, -1);
    for (std::size_t b = 0; b < nb; ++b) {
      if (inverter_at_bus_[b] >= 0) continue;
      junction_offset_[b] = static_cast<long>(off);
      off += 2;
    }
    branch_offset_ = off;
    off += 2 * cfg_.branches.size();
    load_offset_ = off;
    off += 2 * cfg_.loads.size();
    size_ = off;

    for (const auto& br : cfg_.branches) branch_ends_.push_back({cfg_.bus_index(br.from), cfg_.bus_index(br.to)});
    for (const auto& ld : cfg_.loads) {
      load_bus_.push_back(cfg_.bus_index(ld.bus));
      load_scale_.push_back(ld.scale);
    }
  }

  const NetworkConfig& config() const noexcept { return cfg_; }
  std::size_t size() const noexcept { return size_; }
  std::size_t inverter_count() const noexcept { return cfg_.inverters.size(); }
  std::size_t inverter_offset(std::size_t k) const noexcept { return 6 * k; }
  std::size_t branch_offset(std::size_t k) const noexcept { return branch_offset_ + 2 * k; }
  std::size_t load_offset(std::size_t k) const noexcept { return load_offset_ + 2 * k; }
  /// Offset of the voltage pair of a bus (inverter filter voltage or junction).
  std::size_t bus_voltage_offset(std::size_t b) const noexcept {
    const int inv = inverter_at_bus_[b];
    return inv >= 0 ? 6 * static_cast<std::size_t>(inv) + 1 : static_cast<std::size_t>(junction_offset_[b]);
  }
  const InverterParams& effective_params(std::size_t k) const { return effective_[k]; }
  double i_dc_ref(std::size_t k) const { return i_dc_ref_[k]; }
  void set_i_dc_ref(std::size_t k, double v) { i_dc_ref_[k] = v; }
  double load_scale(std::size_t k) const { return load_scale_[k]; }

  double junction_capacitance(std::size_t b) const {
    const double c = cfg_.buses[b].shunt_c;
    return c > 0.0 ? c : cfg_.junction_c;
  }

  void apply(const SimEvent& ev) {
    if (ev.kind == SimEvent::Kind::load_scale) {
      const std::size_t b = cfg_.bus_index(ev.target);
      for (std::size_t k = 0; k < load_bus_.size(); ++k)
        if (load_bus_[k] == b) load_scale_[k] *= ev.value;
    } else {
      i_dc_ref_.at(static_cast<std::size_t>(ev.target)) += ev.value;
    }
  }

  Vec2 bus_voltage(const VecX& x, std::size_t b) const { return x.segment<2>(bus_voltage_offset(b)); }

  /// Net current leaving each bus into branches and loads.
  std::vector<Vec2> bus_outflow(const VecX& x) const {
    std::vector<Vec2> out(cfg_.buses.size(), Vec2::Zero());
    for (std::size_t k = 0; k < branch_ends_.size(); ++k) {
      const Vec2 i = x.segment<2>(branch_offset(k));
      out[branch_ends_[k].first] += i;
      out[branch_ends_[k].second] -= i;
    }
    for (std::size_t k = 0; k < load_bus_.size(); ++k) out[load_bus_[k]] += x.segment<2>(load_offset(k));
    return out;
  }

  PortInput port_input(const VecX& x, std::size_t k) const {
    const auto out = bus_outflow(x);
    return {i_dc_ref_[k], out[cfg_.bus_index(cfg_.inverters[k].bus)]};
  }

  VecX rhs(double t, const VecX& x) const {
    VecX dx(size_);
    const auto out = bus_outflow(x);
    for (std::size_t k = 0; k < cfg_.inverters.size(); ++k) {
      const auto& inv = cfg_.inverters[k];
      const auto s = InverterState::from_vector(x.segment<6>(inverter_offset(k)));
      const PortInput u{i_dc_ref_[k], out[cfg_.bus_index(inv.bus)]};
      dx.segment<6>(inverter_offset(k)) = closed_loop_rhs(s, u, effective_[k], inv.gains, t).to_vector();
    }
    for (std::size_t b = 0; b < cfg_.buses.size(); ++b) {
      if (junction_offset_[b] < 0) continue;
      const Vec2 v = x.segment<2>(static_cast<std::size_t>(junction_offset_[b]));
      dx.segment<2>(static_cast<std::size_t>(junction_offset_[b])) =
          (-cfg_.buses[b].shunt_g * v - out[b]) / junction_capacitance(b);
    }
    for (std::size_t k = 0; k < branch_ends_.size(); ++k) {
      const auto& br = cfg_.branches[k];
      const Vec2 i = x.segment<2>(branch_offset(k));
      const Vec2 dv = bus_voltage(x, branch_ends_[k].first) - bus_voltage(x, branch_ends_[k].second);
      dx.segment<2>(branch_offset(k)) = (dv - br.r * i) / br.l;
    }
    for (std::size_t k = 0; k < load_bus_.size(); ++k) {
      const auto& ld = cfg_.loads[k];
      const Vec2 i = x.segment<2>(load_offset(k));
      const double s = load_scale_[k];
      dx.segment<2>(load_offset(k)) = (bus_voltage(x, load_bus_[k]) - (ld.r / s) * i) * (s / ld.l);
    }
    return dx;
  }

  /// Time derivative seen from the frame rotating at omega0: alpha-beta pairs
  /// lose omega0 J x, angles lose omega0. Zero on a synchronous steady state.
  VecX rotating_residual(double t, const VecX& x) const {
    VecX r = rhs(t, x);
    const Mat2 j = rotation_generator();
    for (std::size_t k = 0; k < cfg_.inverters.size(); ++k) {
      const std::size_t o = inverter_offset(k);
      r.segment<2>(o + 1) -= cfg_.omega0 * j * x.segment<2>(o + 1);
      r.segment<2>(o + 3) -= cfg_.omega0 * j * x.segment<2>(o + 3);
      r(o + 5) -= cfg_.omega0;
    }
    for (std::size_t o = 6 * cfg_.inverters.size(); o < size_; o += 2) r.segment<2>(o) -= cfg_.omega0 * j * x.segment<2>(o);
    return r;
  }

  /// Characteristic magnitude of each state: DC setpoints, bus voltages,
  /// rated currents, 1 rad for angles.
  VecX state_scale() const {
    VecX s(size_);
    const double i_sys = cfg_.s_base / cfg_.v_base;
    for (std::size_t k = 0; k < cfg_.inverters.size(); ++k) {
      const auto& inv = cfg_.inverters[k];
      const double i_inv = inv.s_rated > 0.0 ? inv.s_rated / inv.v_ll : i_sys;
      const double v_bus = cfg_.buses[cfg_.bus_index(inv.bus)].v_ll;
      s.segment<6>(inverter_offset(k)) << inv.gains.v_dc_star, v_bus, v_bus, i_inv, i_inv, 1.0;
    }
    for (std::size_t b = 0; b < cfg_.buses.size(); ++b)
      if (junction_offset_[b] >= 0) s.segment<2>(static_cast<std::size_t>(junction_offset_[b])).setConstant(cfg_.buses[b].v_ll);
    s.segment(branch_offset_, size_ - branch_offset_).setConstant(i_sys);
    return s;
  }

  /// max_i |r_i| / (omega0 scale_i) of the rotating-frame residual.
  double scaled_residual(double t, const VecX& x) const {
    return (rotating_residual(t, x).array() / state_scale().array()).abs().maxCoeff() / cfg_.omega0;
  }

  /// Euclidean norm of the scaled rotating-frame residual.
  double settling_metric(double t, const VecX& x) const {
    return (rotating_residual(t, x).array() / state_scale().array()).matrix().norm() / cfg_.omega0;
  }

  // ---- power audit ------------------------------------------------------

  double stored_energy(const VecX& x) const {
    double e = 0.0;
    for (std::size_t k = 0; k < cfg_.inverters.size(); ++k) {
      const auto& p = effective_[k];
      const auto s = InverterState::from_vector(x.segment<6>(inverter_offset(k)));
      e += 0.5 * (p.c_dc * s.v_dc * s.v_dc + p.c_f * s.v_ac.squaredNorm() + p.l_f * s.i_ac.squaredNorm());
    }
    for (std::size_t b = 0; b < cfg_.buses.size(); ++b)
      if (junction_offset_[b] >= 0)
        e += 0.5 * junction_capacitance(b) * x.segment<2>(static_cast<std::size_t>(junction_offset_[b])).squaredNorm();
    for (std::size_t k = 0; k < cfg_.branches.size(); ++k)
      e += 0.5 * cfg_.branches[k].l * x.segment<2>(branch_offset(k)).squaredNorm();
    for (std::size_t k = 0; k < cfg_.loads.size(); ++k)
      e += 0.5 * (cfg_.loads[k].l / load_scale_[k]) * x.segment<2>(load_offset(k)).squaredNorm();
    return e;
  }

  /// Power delivered by the controlled DC current sources.
  double source_power(const VecX& x) const {
    double p = 0.0;
    for (std::size_t k = 0; k < cfg_.inverters.size(); ++k) {
      const double v = x(inverter_offset(k));
      const auto& inv = cfg_.inverters[k];
      p += v * (i_dc_ref_[k] + effective_[k].kappa * (inv.gains.v_dc_star - v));
    }
    return p;
  }

  double dissipated_power(const VecX& x) const {
    double d = 0.0;
    for (std::size_t k = 0; k < cfg_.inverters.size(); ++k) {
      const auto& p = effective_[k];
      const auto s = InverterState::from_vector(x.segment<6>(inverter_offset(k)));
      d += p.g_dc * s.v_dc * s.v_dc + p.g_f * s.v_ac.squaredNorm() + p.r_f * s.i_ac.squaredNorm();
    }
    for (std::size_t b = 0; b < cfg_.buses.size(); ++b)
      if (junction_offset_[b] >= 0)
        d += cfg_.buses[b].shunt_g * x.segment<2>(static_cast<std::size_t>(junction_offset_[b])).squaredNorm();
    for (std::size_t k = 0; k < cfg_.branches.size(); ++k)
      d += cfg_.branches[k].r * x.segment<2>(branch_offset(k)).squaredNorm();
    for (std::size_t k = 0; k < cfg_.loads.size(); ++k)
      d += (cfg_.loads[k].r / load_scale_[k]) * x.segment<2>(load_offset(k)).squaredNorm();
    return d;
  }

  /// Active and reactive power drawn by load k.
  Vec2 load_power(const VecX& x, std::size_t k) const {
    const Vec2 v = bus_voltage(x, load_bus_[k]);
    const Vec2 i = x.segment<2>(load_offset(k));
    return {v.dot(i), v(1) * i(0) - v(0) * i(1)};
  }

 private:
  NetworkConfig cfg_;
  std::vector<InverterParams> effective_;
  std::vector<double> i_dc_ref_;
  std::vector<int> inverter_at_bus_;
  std::vector<long> junction_offset_;
  std::vector<std::pair<std::size_t, std::size_t>> branch_ends_;
  std::vector<std::size_t> load_bus_;
  std::vector<double> load_scale_;
  std::size_t branch_offset_ = 0;
  std::size_t load_offset_ = 0;
  std::size_t size_ = 0;
};

// ---------------------------------------------------------------------------
// Steady state

struct SteadyStateOptions {
  /// Hold v_dc = v_dc* and theta = theta* and solve for the DC reference
  /// currents. Otherwise the configured references are kept and every state
  /// is free.
  bool fix_setpoints = true;
  double tol = 1e-8;
  int max_newton = 30;
  int max_fallback_rounds = 20;
  double fallback_span = 0.2;  ///< s of time stepping per fallback round
  double fallback_dt = 50e-6;
};

struct SteadyState {
  VecX x;  ///< network state at t = 0
  std::vector<double> i_dc_ref;
  double residual = 0.0;
  std::vector<double> history;
};

namespace detail {

// Dense Newton with a central-difference Jacobian and backtracking.
template <class Residual>
bool newton_solve(Residual&& residual, VecX& z, const VecX& z_scale, double tol, int max_iter,
                  std::vector<double>& history) {
  auto measure = [&](const VecX& v) { return residual(v).template lpNorm<Eigen::Infinity>(); };
  double r = measure(z);
  history.push_back(r);
  for (int it = 0; it < max_iter && r >= tol; ++it) {
    const VecX f = residual(z);
    MatX jac(f.size(), z.size());
    for (Eigen::Index c = 0; c < z.size(); ++c) {
      const double h = 1e-6 * z_scale(c);
      VecX zp = z, zm = z;
      zp(c) += h;
      zm(c) -= h;
      jac.col(c) = (residual(zp) - residual(zm)) / (2.0 * h);
    }
    const VecX step = jac.fullPivLu().solve(-f);
    double t = 1.0;
    VecX trial = z + step;
    double rt = measure(trial);
    while (!(rt < r) && t > 1e-4) {
      t *= 0.5;
      trial = z + t * step;
      rt = measure(trial);
    }
    if (!(rt < r)) return false;
    z = trial;
    r = rt;
    history.push_back(r);
  }
  return r < tol;
}

}  // namespace detail

/// Synchronous steady state at t = 0. Newton on the scaled rotating-frame
/// residual; if Newton stalls, the network is time-stepped for a while and
/// Newton retried. Throws ConvergenceError with the residual history.
inline SteadyState steady_state(NetworkModel& model, const SteadyStateOptions& opts = {}) {
  const auto& cfg = model.config();
  const std::size_t n = model.size();
  const std::size_t ni = model.inverter_count();
  const VecX scale = model.state_scale();
  const double w0 = cfg.omega0;

  // Unknowns: in fix_setpoints mode the per-inverter v_dc and theta slots
  // carry the DC reference current and are pinned in the state.
  auto to_state = [&](const VecX& z, std::vector<double>& iref) {
    VecX x = z;
    if (opts.fix_setpoints) {
      for (std::size_t k = 0; k < ni; ++k) {
        const std::size_t o = model.inverter_offset(k);
        iref[k] = z(o);
        x(o) = cfg.inverters[k].gains.v_dc_star;
        x(o + 5) = cfg.inverters[k].gains.theta_star0;
      }
    }
    return x;
  };
  std::vector<double> iref(ni);
  for (std::size_t k = 0; k < ni; ++k) iref[k] = model.i_dc_ref(k);

  auto residual = [&](const VecX& z) -> VecX {
    std::vector<double> ir(ni);
    const VecX x = to_state(z, ir);
    if (opts.fix_setpoints)
      for (std::size_t k = 0; k < ni; ++k) model.set_i_dc_ref(k, ir[k]);
    VecX r = (model.rotating_residual(0.0, x).array() / scale.array()).matrix() / w0;
    if (opts.fix_setpoints)
      for (std::size_t k = 0; k < ni; ++k) r(model.inverter_offset(k) + 5) = 0.0;  // identically satisfied
    return r;
  };

  // Flat start: nominal voltages in phase with the angle setpoints.
  VecX z = VecX::Zero(n);
  VecX z_scale = scale;
  for (std::size_t k = 0; k < ni; ++k) {
    const auto& inv = cfg.inverters[k];
    const std::size_t o = model.inverter_offset(k);
    z(o) = opts.fix_setpoints ? 0.0 : inv.gains.v_dc_star;
    z(o + 5) = inv.gains.theta_star0;
    z.segment<2>(o + 1) = inv.params.mu * inv.gains.v_dc_star * unit_phasor(inv.gains.theta_star0);
    if (opts.fix_setpoints) z_scale(o) = inv.s_rated > 0.0 ? inv.s_rated / inv.gains.v_dc_star : 1.0;
  }
  for (std::size_t b = 0; b < cfg.buses.size(); ++b)
    if (model.bus_voltage_offset(b) >= 6 * ni) z.segment<2>(model.bus_voltage_offset(b)) = Vec2(cfg.buses[b].v_ll, 0.0);

  std::vector<double> history;
  bool ok = detail::newton_solve(residual, z, z_scale, opts.tol, opts.max_newton, history);
  for (int round = 0; !ok && round < opts.max_fallback_rounds; ++round) {
    // Damped time stepping from the current iterate, then Newton again.
    std::vector<double> ir(ni);
    VecX x = to_state(z, ir);
    if (opts.fix_setpoints)
      for (std::size_t k = 0; k < ni; ++k) model.set_i_dc_ref(k, ir[k]);
    auto traj = integrate([&](double t, const VecX& s) { return model.rhs(t, s); }, x, 0.0, opts.fallback_span,
                          opts.fallback_dt);
    // Rotate the final state back to t = 0 so the frame matches.
    VecX xe = traj.states.back();
    const double back = -w0 * traj.times.back();
    for (std::size_t k = 0; k < ni; ++k) {
      const std::size_t o = model.inverter_offset(k);
      xe.segment<2>(o + 1) = rotate(xe.segment<2>(o + 1), back);
      xe.segment<2>(o + 3) = rotate(xe.segment<2>(o + 3), back);
      xe(o + 5) += back;
      if (opts.fix_setpoints) xe(o) = ir[k];
    }
    for (std::size_t o = 6 * ni; o < n; o += 2) xe.segment<2>(o) = rotate(xe.segment<2>(o), back);
    z = xe;
    ok = detail::newton_solve(residual, z, z_scale, opts.tol, opts.max_newton, history);
  }
  if (!ok) throw ConvergenceError("steady_state: no convergence (last residual " + std::to_string(history.back()) + ")", history);

  SteadyState ss;
  ss.x = to_state(z, iref);
  if (!opts.fix_setpoints)
    for (std::size_t k = 0; k < ni; ++k) iref[k] = model.i_dc_ref(k);
  for (std::size_t k = 0; k < ni; ++k) model.set_i_dc_ref(k, iref[k]);
  ss.i_dc_ref = iref;
  ss.residual = model.scaled_residual(0.0, ss.x);
  ss.history = std::move(history);
  return ss;
}

/// Steady state rotated to time t (the synchronous orbit through ss.x).
inline VecX steady_state_at(const NetworkModel& model, const VecX& x0, double t) {
  VecX x = x0;
  const double a = model.config().omega0 * t;
  for (std::size_t k = 0; k < model.inverter_count(); ++k) {
    const std::size_t o = model.inverter_offset(k);
    x.segment<2>(o + 1) = rotate(x0.segment<2>(o + 1), a);
    x.segment<2>(o + 3) = rotate(x0.segment<2>(o + 3), a);
    x(o + 5) = x0(o + 5) + a;
  }
  for (std::size_t o = 6 * model.inverter_count(); o < model.size(); o += 2) x.segment<2>(o) = rotate(x0.segment<2>(o), a);
  return x;
}

// ---------------------------------------------------------------------------
// Simulation

struct SimulationOptions {
  double dt = 50e-6;
  double t_end = 5.0;
  std::size_t sample_every = 10;
};

struct SimulationResult {
  Trajectory trajectory;
  SteadyState initial;
  std::vector<double> settling;  ///< settling metric per recorded sample
  double peak_post_event = 0.0;  ///< max settling metric after the first event
  double final_metric = 0.0;
  double settle_ratio = 0.0;  ///< final / peak post-event
  bool settled = false;
  std::vector<Vec2> load_power_initial;  ///< (P, Q) per load at t = 0
};

inline constexpr double kSettleRatio = 1e-4;
/// Settling metric of a run without events. RK4 leaves a floor of about 1e-5
/// at dt = 50 us from the filter resonance.
inline constexpr double kRestMetric = 1e-4;

/// Steady state, then RK4 over [0, t_end] with the given events. Events past
/// t_end are skipped (listed in trajectory.skipped_events).
inline SimulationResult simulate(NetworkModel& model, std::vector<SimEvent> events, const SimulationOptions& opts,
                                 const SteadyStateOptions& ss_opts = {}) {
  std::stable_sort(events.begin(), events.end(), [](const SimEvent& a, const SimEvent& b) { return a.time < b.time; });
  for (const auto& ev : events) detail::exact_step_count(ev.time, opts.dt, "event time");

  SimulationResult res;
  res.initial = steady_state(model, ss_opts);
  for (std::size_t k = 0; k < model.config().loads.size(); ++k)
    res.load_power_initial.push_back(model.load_power(res.initial.x, k));

  // A copy of the model drives the settling metric so post-event parameters
  // are in effect when it is evaluated.
  NetworkModel shadow = model;
  res.trajectory = integrate(
      [&](double t, const VecX& x) { return model.rhs(t, x); }, res.initial.x, 0.0, opts.t_end, opts.dt,
      std::span<const SimEvent>(events), [&](const SimEvent& ev) { model.apply(ev); },
      IntegrationOptions{opts.sample_every});

  const auto& tr = res.trajectory;
  std::size_t next = 0;
  const double first_event = events.empty() ? std::numeric_limits<double>::infinity() : events.front().time;
  for (std::size_t s = 0; s < tr.size(); ++s) {
    while (next < events.size() && events[next].time <= tr.times[s] + 1e-12) shadow.apply(events[next++]);
    const double m = shadow.settling_metric(tr.times[s], tr.states[s]);
    res.settling.push_back(m);
    if (tr.times[s] >= first_event) res.peak_post_event = std::max(res.peak_post_event, m);
  }
  res.final_metric = res.settling.back();
  if (res.peak_post_event > 0.0) {
    res.settle_ratio = res.final_metric / res.peak_post_event;
    res.settled = res.settle_ratio < kSettleRatio;
  } else {
    res.settled = res.final_metric < kRestMetric;
  }
  for (auto& s : res.trajectory.states) {
    VecX y(3 * model.inverter_count());
    for (std::size_t k = 0; k < model.inverter_count(); ++k) y.segment<3>(3 * k) = s.segment<3>(model.inverter_offset(k));
    res.trajectory.outputs.push_back(std::move(y));
  }
  return res;
}

/// Default scenario: load at the given bus scaled by `multiplier` at `time`.
inline SimulationResult scenario_nine_bus(const NetworkConfig& cfg, const SimEvent& event,
                                          const SimulationOptions& opts = {}) {
  NetworkModel model(cfg);
  return simulate(model, {event}, opts);
}

// ---------------------------------------------------------------------------
// CSV export

inline std::vector<std::string> csv_header(const NetworkModel& model) {
  std::vector<std::string> h{"time_s"};
  for (const auto& inv : model.config().inverters) {
    const std::string p = "inv" + inv.name + "_";
    for (const char* c : {"v_dc_V", "v_alpha_V", "v_beta_V", "i_alpha_A", "i_beta_A", "theta_rad", "freq_est_rad_s"})
      h.push_back(p + c);
  }
  for (const auto& ld : model.config().loads) {
    h.push_back("load" + ld.name + "_p_W");
    h.push_back("load" + ld.name + "_q_var");
  }
  return h;
}

/// Writes one row per sample. Load powers use the load currents in the state,
/// so they stay valid across load-scale events.
inline void export_csv(const Trajectory& traj, const NetworkModel& model, std::ostream& os) {
  const auto header = csv_header(model);
  for (std::size_t c = 0; c < header.size(); ++c) os << (c ? "," : "") << header[c];
  os << '\n';
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    os << buf;
  };
  for (std::size_t s = 0; s < traj.size(); ++s) {
    std::snprintf(buf, sizeof buf, "%.17g", traj.times[s]);
    os << buf;
    const VecX& x = traj.states[s];
    for (std::size_t k = 0; k < model.inverter_count(); ++k) {
      const std::size_t o = model.inverter_offset(k);
      for (int c = 0; c < 6; ++c) put(x(o + c));
      put(hac_angle_rate(x(o + 5), x(o), traj.times[s], model.config().inverters[k].gains));
    }
    for (std::size_t k = 0; k < model.config().loads.size(); ++k) {
      const Vec2 pq = model.load_power(x, k);
      put(pq(0));
      put(pq(1));
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("export_csv: write failed");
}

inline void export_csv(const Trajectory& traj, const NetworkModel& model, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("export_csv: cannot open " + path);
  export_csv(traj, model, f);
}

}  // namespace hacpass
