#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace hacpass {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline constexpr double kPi = std::numbers::pi;

// Rotation generator with J * psi(theta) == d psi / d theta for
// psi(theta) = [cos theta, sin theta]. A frame rotating at +omega0 picks up
// the term -omega0 * J * x in its dynamics.
inline Mat2 rotation_generator() {
  Mat2 j;
  j << 0.0, -1.0, 1.0, 0.0;
  return j;
}

inline Vec2 unit_phasor(double theta) { return {std::cos(theta), std::sin(theta)}; }

// Rotates an alpha-beta vector by +angle.
inline Vec2 rotate(const Vec2& x, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * x(0) - s * x(1), s * x(0) + c * x(1)};
}

// Raised when an iterative solve fails to reach its residual target.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> residual_history)
      : std::runtime_error(what), history_(std::move(residual_history)) {}

  const std::vector<double>& residual_history() const noexcept { return history_; }
  double last_residual() const noexcept { return history_.empty() ? NAN : history_.back(); }

 private:
  std::vector<double> history_;
};

// Raised when a time integration produces a non-finite state.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, double t_last, VecX last_finite)
      : std::runtime_error(what), t_last_(t_last), last_(std::move(last_finite)) {}

  double time() const noexcept { return t_last_; }
  const VecX& last_finite_state() const noexcept { return last_; }

 private:
  double t_last_;
  VecX last_;
};

}  // namespace hacpass
