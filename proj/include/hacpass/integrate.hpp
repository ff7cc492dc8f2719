#pragma once

// Classical fixed-step fourth-order Runge-Kutta with discrete events applied
// exactly on step boundaries.

#include "hacpass/types.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <vector>

namespace hacpass {

/// Uniformly sampled time series. inputs/outputs are filled by the layer that
/// knows what they are; integrate() only records states.
struct Trajectory {
  std::vector<double> times;
  std::vector<VecX> states;
  std::vector<VecX> inputs;
  std::vector<VecX> outputs;
  std::vector<std::size_t> skipped_events;  ///< indices of events past t_end

  std::size_t size() const noexcept { return times.size(); }
  double step() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
};

struct IntegrationOptions {
  std::size_t sample_every = 1;  ///< record one sample per this many steps
};

namespace detail {

inline long long exact_step_count(double span, double dt, const char* what) {
  const double n = span / dt;
  const double r = std::round(n);
  if (std::abs(n - r) > 1e-9 * std::max(1.0, std::abs(n)))
    throw std::invalid_argument(std::string(what) + " is not an integer multiple of dt");
  return static_cast<long long>(r);
}

struct NoEvent {
  double time = 0.0;
};

}  // namespace detail

/// Integrates x' = rhs(t, x) from t0 to t_end. Events must be sorted by time
/// and land on the step grid; apply(event) is invoked when the integration
/// reaches event.time, before the step leaving it. Events after t_end are
/// skipped and listed in the result.
template <class Rhs, class Event = detail::NoEvent, class Apply = void (*)(const detail::NoEvent&)>
Trajectory integrate(Rhs&& rhs, VecX x, double t0, double t_end, double dt, std::span<const Event> events = {},
                     Apply&& apply = nullptr, IntegrationOptions opts = {}) {
  if (!(dt > 0.0)) throw std::invalid_argument("integrate: dt must be > 0");
  if (!(t_end >= t0)) throw std::invalid_argument("integrate: t_end must be >= t0");
  if (opts.sample_every == 0) throw std::invalid_argument("integrate: sample_every must be >= 1");
  const long long n_steps = detail::exact_step_count(t_end - t0, dt, "integration span");

  std::vector<long long> event_step(events.size(), -1);
  for (std::size_t e = 0; e < events.size(); ++e) {
    if (e > 0 && events[e].time < events[e - 1].time) throw std::invalid_argument("integrate: events must be sorted");
    if (events[e].time < t0) throw std::invalid_argument("integrate: event before t0");
    event_step[e] = detail::exact_step_count(events[e].time - t0, dt, "event time");
  }

  Trajectory traj;
  const auto n_samples = static_cast<std::size_t>(n_steps) / opts.sample_every + 1;
  traj.times.reserve(n_samples);
  traj.states.reserve(n_samples);
  for (std::size_t e = 0; e < events.size(); ++e)
    if (event_step[e] > n_steps) traj.skipped_events.push_back(e);

  std::size_t next_event = 0;
  auto fire_events = [&](long long step) {
    while (next_event < events.size() && event_step[next_event] == step) {
      if constexpr (std::is_invocable_v<Apply&, const Event&>) {
        if constexpr (std::is_pointer_v<std::decay_t<Apply>>) {
          if (apply) apply(events[next_event]);
        } else {
          apply(events[next_event]);
        }
      }
      ++next_event;
    }
  };

  traj.times.push_back(t0);
  traj.states.push_back(x);
  VecX k1, k2, k3, k4;
  for (long long step = 0; step < n_steps; ++step) {
    fire_events(step);
    const double t = t0 + static_cast<double>(step) * dt;
    k1 = rhs(t, x);
    k2 = rhs(t + 0.5 * dt, (x + 0.5 * dt * k1).eval());
    k3 = rhs(t + 0.5 * dt, (x + 0.5 * dt * k2).eval());
    k4 = rhs(t + dt, (x + dt * k3).eval());
    VecX next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite())
      throw DivergenceError("integrate: non-finite state after t = " + std::to_string(t), t, x);
    x = std::move(next);
    if ((step + 1) % static_cast<long long>(opts.sample_every) == 0) {
      traj.times.push_back(t0 + static_cast<double>(step + 1) * dt);
      traj.states.push_back(x);
    }
  }
  fire_events(n_steps);
  return traj;
}

}  // namespace hacpass
