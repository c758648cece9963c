#include "samsel/basis.hpp"

#include "samsel/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>

namespace samsel {

SiteCoords::SiteCoords(std::vector<Site> points) : points_(std::move(points)) {
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (!std::isfinite(points_[i].east) || !std::isfinite(points_[i].north)) {
      throw InputError("site " + std::to_string(i) + " has a non-finite coordinate");
    }
  }
}

double SiteCoords::distance(std::size_t i, std::size_t j) const {
  return std::hypot(points_[i].east - points_[j].east, points_[i].north - points_[j].north);
}

double SiteCoords::max_nearest_neighbor_distance() const {
  double worst = 0.0;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < points_.size(); ++j) {
      if (i != j) nearest = std::min(nearest, distance(i, j));
    }
    if (std::isfinite(nearest)) worst = std::max(worst, nearest);
  }
  return worst;
}

Eigen::VectorXd MoranBasis::normalized_eigenvalues() const {
  if (eigenvalues.size() == 0) return {};
  return eigenvalues / eigenvalues(0);
}

ProximityMatrix build_proximity(const SiteCoords& coords, double range) {
  if (!(range > 0.0) || !std::isfinite(range)) {
    throw ParameterError("proximity range must be positive and finite");
  }
  const auto n = static_cast<Eigen::Index>(coords.size());
  if (n < 2) throw InputError("at least two sites are required to build a proximity matrix");
  ProximityMatrix c;
  c.range = range;
  c.entries.setZero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = std::exp(-coords.distance(i, j) / range);
      c.entries(i, j) = v;
      c.entries(j, i) = v;
    }
  }
  return c;
}

Eigen::MatrixXd double_center(const Eigen::MatrixXd& c) {
  if (c.rows() != c.cols()) throw InputError("double_center expects a square matrix");
  const Eigen::VectorXd row_means = c.rowwise().mean();
  const Eigen::RowVectorXd col_means = c.colwise().mean();
  const double grand = c.mean();
  Eigen::MatrixXd out = c;
  out.colwise() -= row_means;
  out.rowwise() -= col_means;
  out.array() += grand;
  return out;
}

Eigen::MatrixXd row_standardize(const Eigen::MatrixXd& c) {
  Eigen::MatrixXd out = c;
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    const double s = c.row(i).sum();
    if (!(s > 0.0)) {
      throw InputError("row " + std::to_string(i) + " of the proximity matrix has no positive sum (isolated site)");
    }
    out.row(i) /= s;
  }
  return out;
}

namespace {

// Flip each column so that its first clearly non-zero entry is positive.
void fix_signs(Eigen::MatrixXd& v) {
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    const double scale = v.col(j).cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (std::abs(v(i, j)) > 1e-8 * scale) {
        if (v(i, j) < 0) v.col(j) = -v.col(j);
        break;
      }
    }
  }
}

}  // namespace

MoranBasis moran_eigen(const ProximityMatrix& c, const EigenOptions& options) {
  if (options.l_max < 1) throw ParameterError("l_max must be at least 1");
  if (!(options.eps_eig > 0.0)) throw ParameterError("eps_eig must be positive");
  const Eigen::Index n = c.size();
  if (n < 2) throw InputError("at least two sites are required for Moran eigenvectors");

  const Eigen::MatrixXd centered = double_center(c.entries);
  MoranBasis basis;
  basis.l_max = options.l_max;

  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  double radius = 0.0;
  if (n <= options.dense_limit) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(centered);
    if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    values = solver.eigenvalues().reverse();
    vectors = solver.eigenvectors().rowwise().reverse();
    radius = std::max(std::abs(values(0)), std::abs(values(n - 1)));
  } else {
    const Eigen::Index want = std::min<Eigen::Index>(static_cast<Eigen::Index>(options.l_max), n - 1);
    EigenPairs pairs = top_eigenpairs(centered, want, options.seed);
    values = std::move(pairs.values);
    vectors = std::move(pairs.vectors);
    radius = std::max(values.size() > 0 ? values(0) : 0.0, 1e-14 * centered.norm());
  }

  const double threshold = options.eps_eig * radius;
  Eigen::Index keep = 0;
  const auto cap = static_cast<Eigen::Index>(options.l_max);
  while (keep < values.size() && keep < cap && values(keep) > threshold) ++keep;

  basis.eigenvalues = values.head(keep);
  basis.vectors = vectors.leftCols(keep);
  fix_signs(basis.vectors);
  return basis;
}

MoranBasis moran_eigen(const ProximityMatrix& c, std::size_t l_max, double eps_eig) {
  EigenOptions options;
  options.l_max = l_max;
  options.eps_eig = eps_eig;
  return moran_eigen(c, options);
}

namespace {

double quantile7(const std::vector<double>& sorted, double prob) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double cube_plus(double v) { return v > 0.0 ? v * v * v : 0.0; }

// Raw (uncentered) basis columns for the given covariate values.
Eigen::MatrixXd raw_columns(const NvcBasis& b, const Eigen::VectorXd& x, Eigen::Index width) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd out(n, width);
  if (b.kind == NvcKind::Polynomial) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double power = 1.0;
      for (Eigen::Index j = 0; j < width; ++j) {
        power *= x(i);
        out(i, j) = power;
      }
    }
    return out;
  }
  const auto& k = b.knots;
  const std::size_t last = k.size() - 1;
  auto d = [&](std::size_t idx, double u) {
    return (cube_plus(u - k[idx]) - cube_plus(u - k[last])) / (k[last] - k[idx]);
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = (x(i) - b.lower) / (b.upper - b.lower);
    out(i, 0) = u;
    const double tail = d(last - 1, u);
    for (Eigen::Index j = 1; j < width; ++j) out(i, j) = d(static_cast<std::size_t>(j - 1), u) - tail;
  }
  return out;
}

}  // namespace

NvcBasis nvc_basis(const Eigen::VectorXd& x, int l_n, NvcKind kind) {
  if (l_n < 1) throw ParameterError("NVC basis size must be at least 1");
  const Eigen::Index n = x.size();
  if (n < 2 || !x.allFinite()) throw BasisError("NVC basis needs at least two finite covariate values");
  const double lo = x.minCoeff();
  const double hi = x.maxCoeff();
  if (!(hi > lo)) throw BasisError("NVC basis is undefined for a constant covariate");

  NvcBasis b;
  b.kind = kind;
  b.lower = lo;
  b.upper = hi;
  if (kind == NvcKind::NaturalSpline) {
    std::vector<double> sorted(x.data(), x.data() + n);
    std::sort(sorted.begin(), sorted.end());
    const auto distinct = std::unique(sorted.begin(), sorted.end()) - sorted.begin();
    if (distinct < l_n + 2) {
      throw BasisError("natural spline basis of size " + std::to_string(l_n) + " needs at least " +
                       std::to_string(l_n + 2) + " distinct covariate values");
    }
    sorted.assign(x.data(), x.data() + n);
    std::sort(sorted.begin(), sorted.end());
    const int knot_count = l_n + 1;
    for (int j = 0; j < knot_count; ++j) {
      const double q = quantile7(sorted, static_cast<double>(j) / (knot_count - 1));
      b.knots.push_back((q - lo) / (hi - lo));
    }
    for (std::size_t j = 1; j < b.knots.size(); ++j) {
      if (!(b.knots[j] > b.knots[j - 1])) throw BasisError("spline knots are not distinct (too many tied values)");
    }
  }

  Eigen::MatrixXd raw = raw_columns(b, x, l_n);
  b.means = raw.colwise().mean();
  raw.rowwise() -= b.means;
  b.scales = Eigen::RowVectorXd::Ones(l_n);
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    const double sd = std::sqrt(raw.col(j).squaredNorm() / static_cast<double>(n));
    if (!(sd > 1e-12 * (1.0 + b.means.cwiseAbs()(j)))) {
      throw BasisError("NVC basis column " + std::to_string(j + 1) + " is constant");
    }
    if (kind == NvcKind::NaturalSpline) b.scales(j) = sd;
  }
  raw.array().rowwise() /= b.scales.array();
  b.vectors = std::move(raw);
  return b;
}

Eigen::MatrixXd NvcBasis::evaluate(const Eigen::VectorXd& x) const {
  Eigen::MatrixXd raw = raw_columns(*this, x, means.size());
  raw.rowwise() -= means;
  raw.array().rowwise() /= scales.array();
  return raw;
}

double moran_coefficient(const Eigen::VectorXd& f, const Eigen::MatrixXd& c) {
  if (f.size() != c.rows() || c.rows() != c.cols()) throw InputError("moran_coefficient: dimension mismatch");
  const Eigen::VectorXd g = f.array() - f.mean();
  const double denom = g.squaredNorm();
  if (!(denom > 1e-24 * std::max(1.0, f.squaredNorm()))) {
    throw DiagnosticError("Moran coefficient is undefined for a constant vector");
  }
  const double total = c.sum();
  if (total == 0.0) throw DiagnosticError("Moran coefficient is undefined for an all-zero proximity matrix");
  const double numer = g.dot(c * g);
  return static_cast<double>(f.size()) / total * numer / denom;
}

void write_basis_csv(std::ostream& out, const Eigen::MatrixXd& vectors) {
  for (Eigen::Index j = 0; j < vectors.cols(); ++j) out << (j ? "," : "") << 'e' << (j + 1);
  out << '\n';
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    for (Eigen::Index j = 0; j < vectors.cols(); ++j) out << (j ? "," : "") << vectors(i, j);
    out << '\n';
  }
}

}  // namespace samsel
