#pragma once

// INI-style network configuration. Every numeric key carries its unit as a
// suffix (_V, _Ohm, _H, _F, _S, _VA, _W, _var, _s, _rad, _A, _Hz); keys ending
// in _pu are per-unit and converted to SI on load. The schema is documented in
// README.md.

#include "hacpass/network.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <fstream>
#include <functional>
#include <sstream>
#include <string>

namespace hacpass {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::runtime_error(field.empty() ? msg : field + ": " + msg), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

namespace detail {

using boost::property_tree::ptree;

// Reads keys from one section, tracking which were consumed so leftovers
// can be reported as unknown.
class SectionReader {
 public:
  SectionReader(std::string name, const ptree& tree) : name_(std::move(name)), tree_(tree) {}

  const std::string& name() const noexcept { return name_; }
  std::string path(const std::string& key) const { return name_ + "." + key; }
  bool has(const std::string& key) const { return tree_.find(key) != tree_.not_found(); }

  std::string text(const std::string& key) {
    auto it = tree_.find(key);
    if (it == tree_.not_found()) throw ConfigError(path(key), "missing required key");
    used_.push_back(key);
    return it->second.data();
  }

  double number(const std::string& key) {
    const std::string s = text(key);
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      throw ConfigError(path(key), "not a number: '" + s + "'");
    }
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos != s.size() || !std::isfinite(v)) throw ConfigError(path(key), "not a finite number: '" + s + "'");
    return v;
  }

  double number_or(const std::string& key, double fallback) { return has(key) ? number(key) : fallback; }

  int integer(const std::string& key) {
    const double v = number(key);
    if (v != std::floor(v) || std::abs(v) > 1e9) throw ConfigError(path(key), "not an integer");
    return static_cast<int>(v);
  }

  /// SI value from `stem_<si_unit>` or `stem_pu`; exactly one must be given
  /// unless a fallback is supplied.
  double quantity(const std::string& stem, const std::string& si_unit, const std::function<double(double)>& from_pu,
                  std::optional<double> fallback = std::nullopt) {
    const std::string si = stem + "_" + si_unit;
    const std::string pu = stem + "_pu";
    if (has(si) && has(pu)) throw ConfigError(path(stem), "give either " + si + " or " + pu + ", not both");
    if (has(si)) return number(si);
    if (has(pu)) return from_pu(number(pu));
    if (fallback) return *fallback;
    throw ConfigError(path(si), "missing required key (or " + pu + ")");
  }

  void reject_unknown() const {
    for (const auto& kv : tree_) {
      if (std::find(used_.begin(), used_.end(), kv.first) == used_.end())
        throw ConfigError(path(kv.first), "unknown key");
    }
  }

 private:
  std::string name_;
  const ptree& tree_;
  std::vector<std::string> used_;
};

inline int section_id(const std::string& section, const std::string& prefix) {
  const std::string rest = section.substr(prefix.size());
  std::size_t pos = 0;
  int id = 0;
  try {
    id = std::stoi(rest, &pos);
  } catch (const std::exception&) {
    throw ConfigError(section, "expected '" + prefix + "<integer>'");
  }
  if (pos != rest.size()) throw ConfigError(section, "expected '" + prefix + "<integer>'");
  return id;
}

inline bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace detail

/// Parses and validates a configuration. Errors carry the offending field path
/// ("inverter 3.kappa_S", "branch 4-5", ...).
inline NetworkConfig load_config(const std::string& text) {
  using detail::SectionReader;
  detail::ptree root;
  {
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, root);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("line " + std::to_string(e.line()), e.message());
    }
  }
  if (root.empty()) throw ConfigError("", "empty configuration");
  for (const auto& kv : root)
    if (!kv.second.data().empty()) throw ConfigError(kv.first, "key outside any section");

  NetworkConfig cfg;
  auto sys_it = root.find("system");
  if (sys_it == root.not_found()) throw ConfigError("system", "missing [system] section");
  {
    SectionReader s("system", sys_it->second);
    cfg.omega0 = 2.0 * kPi * s.number_or("frequency_Hz", 60.0);
    cfg.s_base = s.number_or("s_base_VA", cfg.s_base);
    cfg.v_base = s.number_or("v_base_V", cfg.v_base);
    if (!(cfg.omega0 > 0.0)) throw ConfigError("system.frequency_Hz", "must be > 0");
    if (!(cfg.s_base > 0.0)) throw ConfigError("system.s_base_VA", "must be > 0");
    if (!(cfg.v_base > 0.0)) throw ConfigError("system.v_base_V", "must be > 0");
    const double z = base_impedance(cfg.s_base, cfg.v_base);
    cfg.junction_c = s.quantity("junction_c", "F", [&](double pu) { return pu / (z * cfg.omega0); },
                                1e-6 * cfg.s_base / (cfg.v_base * cfg.v_base));
    if (!(cfg.junction_c > 0.0)) throw ConfigError("system.junction_c_F", "must be > 0");
    s.reject_unknown();
  }
  const double w = cfg.omega0;
  auto sys_pu = [&](PerUnitKind kind) {
    return [&, kind](double v) { return per_unit_to_si(cfg.s_base, cfg.v_base, w, v, kind); };
  };

  std::map<int, double> branch_charging;  // bus id -> capacitance from line charging
  struct PendingEvent {
    int id;
    SimEvent ev;
  };
  std::vector<PendingEvent> events;
  std::vector<std::pair<int, InverterSpec>> inverters;

  for (const auto& [section, body] : root) {
    if (section == "system") continue;
    SectionReader s(section, body);
    if (detail::starts_with(section, "bus ")) {
      BusSpec b;
      b.id = detail::section_id(section, "bus ");
      b.v_ll = s.number_or("v_ll_V", cfg.v_base);
      b.shunt_c = s.quantity("shunt_c", "F", sys_pu(PerUnitKind::capacitance), 0.0);
      b.shunt_g = s.quantity("shunt_g", "S", sys_pu(PerUnitKind::conductance), 0.0);
      if (!(b.v_ll > 0.0)) throw ConfigError(s.path("v_ll_V"), "must be > 0");
      if (b.shunt_c < 0.0 || b.shunt_g < 0.0) throw ConfigError(section, "shunt elements must be >= 0");
      cfg.buses.push_back(b);
    } else if (detail::starts_with(section, "branch ")) {
      BranchSpec br;
      br.name = section.substr(7);
      const auto dash = br.name.find('-');
      if (dash == std::string::npos) throw ConfigError(section, "expected 'branch <from>-<to>'");
      try {
        std::size_t p1 = 0, p2 = 0;
        br.from = std::stoi(br.name.substr(0, dash), &p1);
        br.to = std::stoi(br.name.substr(dash + 1), &p2);
        if (p1 != dash || p2 != br.name.size() - dash - 1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError(section, "expected 'branch <from>-<to>'");
      }
      br.r = s.quantity("r", "Ohm", sys_pu(PerUnitKind::resistance));
      br.l = s.quantity("l", "H", sys_pu(PerUnitKind::inductance));
      const double c = s.quantity("charging_c", "F", sys_pu(PerUnitKind::capacitance), 0.0);
      if (c < 0.0) throw ConfigError(s.path("charging_c"), "must be >= 0");
      branch_charging[br.from] += 0.5 * c;
      branch_charging[br.to] += 0.5 * c;
      if (br.r < 0.0) throw ConfigError(s.path("r"), "must be >= 0");
      if (!(br.l > 0.0)) throw ConfigError(s.path("l"), "must be > 0");
      cfg.branches.push_back(br);
    } else if (detail::starts_with(section, "load ")) {
      const int bus = detail::section_id(section, "load ");
      LoadSpec ld;
      if (s.has("p_W") || s.has("q_var") || s.has("p_pu") || s.has("q_pu")) {
        const double p = s.quantity("p", "W", [&](double v) { return v * cfg.s_base; });
        const double q = s.quantity("q", "var", [&](double v) { return v * cfg.s_base; });
        const double v = s.number_or("v_ll_V", cfg.v_base);
        try {
          ld = load_from_power(std::to_string(bus), bus, p, q, v, w);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(section, e.what());
        }
      } else {
        ld.name = std::to_string(bus);
        ld.bus = bus;
        ld.r = s.quantity("r", "Ohm", sys_pu(PerUnitKind::resistance));
        ld.l = s.quantity("l", "H", sys_pu(PerUnitKind::inductance));
      }
      ld.scale = s.number_or("scale", 1.0);
      if (!(ld.scale > 0.0)) throw ConfigError(s.path("scale"), "must be > 0");
      cfg.loads.push_back(ld);
    } else if (detail::starts_with(section, "inverter ")) {
      const int id = detail::section_id(section, "inverter ");
      InverterSpec inv;
      inv.name = std::to_string(id);
      inv.bus = s.has("bus") ? s.integer("bus") : id;
      inv.s_rated = s.number("s_rated_VA");
      inv.v_ll = s.number_or("v_ll_V", cfg.v_base);
      if (!(inv.s_rated > 0.0)) throw ConfigError(s.path("s_rated_VA"), "must be > 0");
      if (!(inv.v_ll > 0.0)) throw ConfigError(s.path("v_ll_V"), "must be > 0");
      auto own_pu = [&](PerUnitKind kind) {
        return [&, kind](double v) { return per_unit_to_si(inv.s_rated, inv.v_ll, w, v, kind); };
      };
      auto& p = inv.params;
      p.c_dc = s.number("c_dc_F");
      p.g_dc = s.number_or("g_dc_S", 0.0);
      p.l_f = s.quantity("l_f", "H", own_pu(PerUnitKind::inductance));
      p.r_f = s.quantity("r_f", "Ohm", own_pu(PerUnitKind::resistance));
      p.c_f = s.quantity("c_f", "F", own_pu(PerUnitKind::capacitance));
      p.g_f = s.quantity("g_f", "S", own_pu(PerUnitKind::conductance), own_pu(PerUnitKind::conductance)(1e-4));
      p.kappa = s.number_or("kappa_S", 0.0);
      auto& g = inv.gains;
      g.omega0 = w;
      const double v_dc_nominal = s.number_or("v_dc_nominal_V", 0.0);
      g.v_dc_star = s.quantity("v_dc_star", "V", [&](double v) {
        if (!(v_dc_nominal > 0.0)) throw ConfigError(s.path("v_dc_star_pu"), "needs v_dc_nominal_V");
        return v * v_dc_nominal;
      });
      p.mu = s.number_or("mu", inv.v_ll / g.v_dc_star);
      g.eta = s.number("eta");
      g.gamma = s.number("gamma");
      g.theta_star0 = s.number_or("theta_star_rad", 0.0);
      if (s.has("i_dc_ref_A")) inv.i_dc_ref = s.number("i_dc_ref_A");
      const auto def = default_envelope(g.v_dc_star, inv.s_rated, inv.v_ll);
      inv.envelope.v_dc_bar_max = s.number_or("envelope_v_dc_V", def.v_dc_bar_max);
      inv.envelope.i_ac_norm_max = s.number_or("envelope_i_A", def.i_ac_norm_max);
      if (s.has("lambda") || s.has("eps1") || s.has("eps2"))
        inv.certificate = Certificate{s.number("eps1"), s.number("eps2"), s.number("lambda"), inv.envelope};
      try {
        p.validate();
        g.validate();
        inv.envelope.validate();
        if (inv.certificate) inv.certificate->validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(section, e.what());
      }
      inverters.emplace_back(id, inv);
    } else if (detail::starts_with(section, "event ")) {
      PendingEvent pe{detail::section_id(section, "event "), {}};
      pe.ev.time = s.number("time_s");
      const std::string kind = s.text("kind");
      if (kind == "load_scale") {
        pe.ev.kind = SimEvent::Kind::load_scale;
        pe.ev.target = s.integer("bus");
        pe.ev.value = s.number("multiplier");
      } else if (kind == "input_step") {
        pe.ev.kind = SimEvent::Kind::input_step;
        pe.ev.target = s.integer("inverter");  // resolved to an index below
        pe.ev.value = s.number("delta_i_dc_ref_A");
      } else {
        throw ConfigError(s.path("kind"), "expected load_scale or input_step");
      }
      events.push_back(pe);
    } else {
      throw ConfigError(section, "unknown section");
    }
    s.reject_unknown();
  }

  for (auto& b : cfg.buses) {
    auto it = branch_charging.find(b.id);
    if (it != branch_charging.end()) b.shunt_c += it->second;
  }
  for (auto& [id, inv] : inverters) cfg.inverters.push_back(inv);
  std::sort(events.begin(), events.end(), [](const PendingEvent& a, const PendingEvent& b) { return a.id < b.id; });
  for (auto& pe : events) {
    if (pe.ev.kind == SimEvent::Kind::input_step) {
      const std::string want = std::to_string(pe.ev.target);
      auto it = std::find_if(cfg.inverters.begin(), cfg.inverters.end(),
                             [&](const InverterSpec& i) { return i.name == want; });
      if (it == cfg.inverters.end()) throw ConfigError("event " + std::to_string(pe.id) + ".inverter", "no such inverter");
      pe.ev.target = static_cast<int>(it - cfg.inverters.begin());
    }
    cfg.events.push_back(pe.ev);
  }

  if (cfg.buses.empty()) throw ConfigError("", "no [bus N] sections");
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("", e.what());
  }
  return cfg;
}

inline NetworkConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path, "cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return load_config(ss.str());
}

/// Index of the inverter whose section was [inverter <name>].
inline std::size_t inverter_index(const NetworkConfig& cfg, const std::string& name) {
  for (std::size_t k = 0; k < cfg.inverters.size(); ++k)
    if (cfg.inverters[k].name == name) return k;
  throw ConfigError("inverter " + name, "no such inverter in config");
}

}  // namespace hacpass
