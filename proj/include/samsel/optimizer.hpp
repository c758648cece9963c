#pragma once

#include <Eigen/Dense>

#include <functional>

namespace samsel {

struct NelderMeadOptions {
  double rel_tol = 1e-6;   // spread of simplex values relative to |f|
  double x_tol = 1e-4;     // simplex diameter, in the units of x
  int max_evaluations = 500;
  double initial_step = 1.0;
  int max_restarts = 4;
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int evaluations = 0;
  bool converged = false;
};

/// Minimizes f over the box [lower, upper] with a Nelder-Mead simplex whose
/// vertices are projected onto the box. After convergence the search is
/// restarted from the best vertex until a restart no longer improves it.
NelderMeadResult nelder_mead_minimize(const std::function<double(const Eigen::VectorXd&)>& f,
                                      const Eigen::VectorXd& start, const Eigen::VectorXd& lower,
                                      const Eigen::VectorXd& upper, const NelderMeadOptions& options = {});

}  // namespace samsel
