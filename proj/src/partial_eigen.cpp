#include "samsel/basis.hpp"
#include "samsel/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace samsel {

namespace {

// Orthogonalizes w against q (two passes of classical Gram-Schmidt) and then
// orthonormalizes its own columns. Columns that vanish are replaced by random
// directions so the block keeps full rank.
Eigen::MatrixXd extend_block(const Eigen::MatrixXd& q, Eigen::MatrixXd w, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  const double ref = std::max(w.norm(), 1e-300);
  for (int pass = 0; pass < 2; ++pass) {
    if (q.cols() > 0) w -= q * (q.transpose() * w);
  }
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    for (int attempt = 0; attempt < 4; ++attempt) {
      for (int pass = 0; pass < 2; ++pass) {
        if (q.cols() > 0) w.col(j) -= q * (q.transpose() * w.col(j));
        if (j > 0) w.col(j) -= w.leftCols(j) * (w.leftCols(j).transpose() * w.col(j));
      }
      const double norm = w.col(j).norm();
      if (norm > 1e-10 * ref) {
        w.col(j) /= norm;
        break;
      }
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = normal(rng);
    }
  }
  return w;
}

}  // namespace

EigenPairs top_eigenpairs(const Eigen::MatrixXd& a, Eigen::Index count, std::uint64_t seed, double tol) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n) throw InputError("top_eigenpairs expects a square matrix");
  if (count < 1 || count > n) throw ParameterError("top_eigenpairs: invalid eigenpair count");

  if (n <= 3 * count + 64) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(a);
    if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    return {solver.eigenvalues().reverse().head(count), solver.eigenvectors().rowwise().reverse().leftCols(count)};
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const Eigen::Index block = std::clamp<Eigen::Index>(count / 4, 8, 64);
  const Eigen::Index keep = count + block;
  const Eigen::Index max_dim = std::min<Eigen::Index>(n, std::max<Eigen::Index>(3 * count, keep + 4 * block));

  Eigen::MatrixXd start(n, block);
  for (Eigen::Index j = 0; j < block; ++j)
    for (Eigen::Index i = 0; i < n; ++i) start(i, j) = normal(rng);

  Eigen::MatrixXd q = extend_block(Eigen::MatrixXd(n, 0), std::move(start), rng);
  Eigen::MatrixXd aq = a * q;
  const double scale = a.norm();

  EigenPairs best;
  for (int cycle = 0; cycle < 200; ++cycle) {
    while (q.cols() + block <= max_dim) {
      Eigen::MatrixXd w = extend_block(q, aq.rightCols(block), rng);
      Eigen::MatrixXd aw = a * w;
      q.conservativeResize(Eigen::NoChange, q.cols() + block);
      q.rightCols(block) = w;
      aq.conservativeResize(Eigen::NoChange, aq.cols() + block);
      aq.rightCols(block) = aw;
    }

    Eigen::MatrixXd t = q.transpose() * aq;
    t = 0.5 * (t + t.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> small(t);
    const Eigen::VectorXd theta = small.eigenvalues().reverse();
    const Eigen::MatrixXd s = small.eigenvectors().rowwise().reverse();

    const Eigen::MatrixXd s_keep = s.leftCols(std::min<Eigen::Index>(keep, s.cols()));
    Eigen::MatrixXd ritz = q * s_keep;
    Eigen::MatrixXd a_ritz = aq * s_keep;

    const Eigen::MatrixXd resid =
        a_ritz.leftCols(count) - ritz.leftCols(count) * theta.head(count).asDiagonal();
    const double worst = resid.colwise().norm().maxCoeff();
    best.values = theta.head(count);
    best.vectors = ritz.leftCols(count);
    if (worst <= tol * std::max(scale, 1e-300)) return best;

    // Thick restart from the leading Ritz vectors (already orthonormal).
    q = std::move(ritz);
    aq = std::move(a_ritz);
  }
  return best;
}

}  // namespace samsel
