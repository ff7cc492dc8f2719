#pragma once

// Shared fixtures for the test suites: published inverter data and random
// parameter draws.

#include "hacpass/certify.hpp"
#include "hacpass/model.hpp"

#include <random>

namespace hacpass::testing {

inline constexpr double kVll = 690.0;
inline constexpr double kVdc = 1130.0;
inline constexpr double kOmega0 = 2.0 * kPi * 60.0;

struct TableInverter {
  double s_rated, c_dc, g_dc, kappa;
};

// Ratings and DC-side data of the three inverters of the 9-bus study.
inline constexpr TableInverter kTable[3] = {
    {247.5e6, 8.07, 0.19, 1.9494e4},
    {192e6, 14.44, 0.15, 1.5123e4},
    {128e6, 5.78, 0.10, 1.0082e4},
};

/// Filter per unit on the inverter's own base: L = C = 0.05, R = 0.05/30,
/// G = 1e-4. mu is the nominal ratio V_ll / v_dc*.
inline InverterParams table_params(int which) {
  const auto& t = kTable[which];
  const double z = kVll * kVll / t.s_rated;
  InverterParams p;
  p.c_dc = t.c_dc;
  p.g_dc = t.g_dc;
  p.kappa = t.kappa;
  p.l_f = 0.05 * z / kOmega0;
  p.r_f = 0.05 / 30.0 * z;
  p.c_f = 0.05 / (z * kOmega0);
  p.g_f = 1e-4 / z;
  p.mu = kVll / kVdc;
  return p;
}

inline HacGains table_gains() {
  HacGains g;
  g.omega0 = kOmega0;
  g.eta = 1e-3;
  g.gamma = 100.0;
  g.v_dc_star = kVdc;
  g.theta_star0 = 0.0108;
  return g;
}

inline OperatingEnvelope table_envelope(int which) { return default_envelope(kVdc, kTable[which].s_rated, kVll); }

/// The certificate values published for inverter 3.
inline Certificate paper_witness(int which = 2) { return {2.2097e-4, 1.4375e-3, 1e10, table_envelope(which)}; }

inline double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

/// Random but physically shaped inverter: per-unit filter values around the
/// table, random rating and DC side.
inline InverterParams random_params(std::mt19937_64& rng) {
  const double s = log_uniform(rng, 1e5, 1e9);
  const double v = log_uniform(rng, 200.0, 20e3);
  const double z = v * v / s;
  const double w = kOmega0;
  InverterParams p;
  p.c_dc = log_uniform(rng, 1e-3, 50.0);
  p.g_dc = log_uniform(rng, 1e-3, 1.0);
  p.kappa = log_uniform(rng, 1e-2, 1e5);
  p.l_f = log_uniform(rng, 0.01, 0.2) * z / w;
  p.r_f = log_uniform(rng, 1e-3, 0.05) * z;
  p.c_f = log_uniform(rng, 0.01, 0.2) / (z * w);
  p.g_f = log_uniform(rng, 1e-5, 1e-2) / z;
  std::uniform_real_distribution<double> mu(0.2, 0.95);
  p.mu = mu(rng);
  return p;
}

}  // namespace hacpass::testing
