#include "samsel/optimizer.hpp"

#include "samsel/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace samsel {

namespace {

struct Simplex {
  std::vector<Eigen::VectorXd> x;
  std::vector<double> f;

  void sort() {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return f[a] < f[b]; });
    std::vector<Eigen::VectorXd> xs;
    std::vector<double> fs;
    for (auto i : idx) {
      xs.push_back(x[i]);
      fs.push_back(f[i]);
    }
    x = std::move(xs);
    f = std::move(fs);
  }

  double diameter() const {
    double d = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) d = std::max(d, (x[i] - x[0]).cwiseAbs().maxCoeff());
    return d;
  }
};

}  // namespace

NelderMeadResult nelder_mead_minimize(const std::function<double(const Eigen::VectorXd&)>& f,
                                      const Eigen::VectorXd& start, const Eigen::VectorXd& lower,
                                      const Eigen::VectorXd& upper, const NelderMeadOptions& options) {
  const Eigen::Index dim = start.size();
  if (dim < 1 || lower.size() != dim || upper.size() != dim) throw ParameterError("nelder_mead: dimension mismatch");
  if ((upper - lower).minCoeff() < 0.0) throw ParameterError("nelder_mead: empty box");

  int evals = 0;
  auto project = [&](Eigen::VectorXd v) { return v.cwiseMax(lower).cwiseMin(upper).eval(); };
  auto eval = [&](const Eigen::VectorXd& v) {
    ++evals;
    const double value = f(v);
    return std::isfinite(value) ? value : std::numeric_limits<double>::infinity();
  };

  NelderMeadResult best;
  best.x = project(start);
  best.value = eval(best.x);

  for (int restart = 0; restart <= options.max_restarts; ++restart) {
    Simplex s;
    s.x.push_back(best.x);
    s.f.push_back(best.value);
    for (Eigen::Index j = 0; j < dim; ++j) {
      Eigen::VectorXd v = best.x;
      const double room_up = upper(j) - v(j);
      v(j) += room_up >= options.initial_step ? options.initial_step : -options.initial_step;
      v = project(v);
      if (v(j) == best.x(j)) v(j) = lower(j) + 0.5 * (upper(j) - lower(j));
      s.x.push_back(v);
      s.f.push_back(eval(v));
    }

    bool converged = false;
    while (evals < options.max_evaluations) {
      s.sort();
      const double spread = s.f.back() - s.f.front();
      if (spread <= options.rel_tol * std::max(std::abs(s.f.front()), 1e-8) && s.diameter() <= options.x_tol) {
        converged = true;
        break;
      }
      const std::size_t worst = s.x.size() - 1;
      Eigen::VectorXd centroid = Eigen::VectorXd::Zero(dim);
      for (std::size_t i = 0; i < worst; ++i) centroid += s.x[i];
      centroid /= static_cast<double>(worst);

      const Eigen::VectorXd xr = project(centroid + (centroid - s.x[worst]));
      const double fr = eval(xr);
      if (fr < s.f.front()) {
        const Eigen::VectorXd xe = project(centroid + 2.0 * (centroid - s.x[worst]));
        const double fe = eval(xe);
        if (fe < fr) {
          s.x[worst] = xe;
          s.f[worst] = fe;
        } else {
          s.x[worst] = xr;
          s.f[worst] = fr;
        }
        continue;
      }
      if (fr < s.f[worst - 1]) {
        s.x[worst] = xr;
        s.f[worst] = fr;
        continue;
      }
      const bool outside = fr < s.f[worst];
      const Eigen::VectorXd xc = outside ? project(centroid + 0.5 * (xr - centroid))
                                         : project(centroid + 0.5 * (s.x[worst] - centroid));
      const double fc = eval(xc);
      if (fc < (outside ? fr : s.f[worst])) {
        s.x[worst] = xc;
        s.f[worst] = fc;
        continue;
      }
      for (std::size_t i = 1; i < s.x.size(); ++i) {
        s.x[i] = project(s.x[0] + 0.5 * (s.x[i] - s.x[0]));
        s.f[i] = eval(s.x[i]);
      }
    }
    s.sort();
    const double improvement = best.value - s.f.front();
    if (s.f.front() < best.value) {
      best.x = s.x.front();
      best.value = s.f.front();
    }
    best.converged = converged;
    if (!converged) break;
    if (restart > 0 && improvement <= options.rel_tol * std::max(std::abs(best.value), 1e-8)) break;
  }
  best.evaluations = evals;
  return best;
}

}  // namespace samsel
