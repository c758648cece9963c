#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

namespace samsel {

struct Site {
  double east = 0.0;
  double north = 0.0;
};

/// Planar site locations. All coordinates are finite.
class SiteCoords {
 public:
  SiteCoords() = default;
  explicit SiteCoords(std::vector<Site> points);

  std::size_t size() const { return points_.size(); }
  const Site& operator[](std::size_t i) const { return points_[i]; }
  const std::vector<Site>& points() const { return points_; }

  double distance(std::size_t i, std::size_t j) const;
  /// Largest distance from any site to its nearest neighbour.
  double max_nearest_neighbor_distance() const;

 private:
  std::vector<Site> points_;
};

/// Exponential proximity exp(-d/range) with a zero diagonal.
struct ProximityMatrix {
  Eigen::MatrixXd entries;
  double range = 1.0;

  Eigen::Index size() const { return entries.rows(); }
};

/// Moran eigenvectors: eigenpairs of the doubly-centered proximity matrix with
/// positive eigenvalues, sorted in descending order.
struct MoranBasis {
  Eigen::MatrixXd vectors;      // N x L, orthonormal, column sums zero
  Eigen::VectorXd eigenvalues;  // raw eigenvalues, descending, positive
  std::size_t l_max = 0;

  Eigen::Index size() const { return vectors.cols(); }
  bool empty() const { return vectors.cols() == 0; }
  /// Eigenvalues divided by the leading one, so the first entry is 1.
  Eigen::VectorXd normalized_eigenvalues() const;
};

enum class NvcKind { NaturalSpline, Polynomial };

/// Basis expansion of a covariate used by non-spatially varying coefficients.
/// Columns are centered; the stored metadata re-evaluates the basis at new values.
struct NvcBasis {
  Eigen::MatrixXd vectors;  // N x L_n
  std::size_t covariate_index = 0;
  NvcKind kind = NvcKind::NaturalSpline;
  std::vector<double> knots;  // on the rescaled [0, 1] axis, spline kind only
  double lower = 0.0;         // covariate range used for rescaling
  double upper = 1.0;
  Eigen::RowVectorXd means;   // column means removed during construction
  Eigen::RowVectorXd scales;  // column divisors (1 for polynomial kind)

  Eigen::Index size() const { return vectors.cols(); }
  /// Basis rows at arbitrary covariate values using the training centering.
  Eigen::MatrixXd evaluate(const Eigen::VectorXd& x) const;
};

ProximityMatrix build_proximity(const SiteCoords& coords, double range);

/// M C M with M = I - 11'/N.
Eigen::MatrixXd double_center(const Eigen::MatrixXd& c);

Eigen::MatrixXd row_standardize(const Eigen::MatrixXd& c);

struct EigenOptions {
  std::size_t l_max = 200;
  double eps_eig = 1e-8;               // relative to the leading eigenvalue
  Eigen::Index dense_limit = 2000;     // larger problems use the block Krylov solver
  std::uint64_t seed = 0x5eed5eedULL;  // start block of the Krylov solver
};

MoranBasis moran_eigen(const ProximityMatrix& c, const EigenOptions& options = {});
MoranBasis moran_eigen(const ProximityMatrix& c, std::size_t l_max, double eps_eig);

/// Leading `count` eigenpairs of a symmetric matrix by thick-restarted block
/// Krylov iteration. Eigenvalues are returned in descending order.
struct EigenPairs {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
};
EigenPairs top_eigenpairs(const Eigen::MatrixXd& a, Eigen::Index count, std::uint64_t seed,
                          double tol = 1e-12);

NvcBasis nvc_basis(const Eigen::VectorXd& x, int l_n, NvcKind kind);

/// Moran coefficient of f under the proximity C.
double moran_coefficient(const Eigen::VectorXd& f, const Eigen::MatrixXd& c);

/// Writes a basis matrix as CSV with header e1..eL, one row per site.
void write_basis_csv(std::ostream& out, const Eigen::MatrixXd& vectors);

}  // namespace samsel
