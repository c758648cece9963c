#pragma once

#include "samsel/optimizer.hpp"
#include "samsel/terms.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace samsel {

/// Gram-matrix replacement of every N-dimensional data matrix. Once built,
/// no likelihood evaluation touches N-dimensional data again.
struct InnerProducts {
  Eigen::MatrixXd m00;                            // X'X
  std::vector<Eigen::MatrixXd> m0p;               // X'(x_p o E_p)
  std::vector<std::vector<Eigen::MatrixXd>> mpq;  // (x_p o E_p)'(x_q o E_q), full grid
  Eigen::VectorXd v0;                             // X'y
  std::vector<Eigen::VectorXd> vp;                // (x_p o E_p)'y
  double myy = 0.0;                               // y'y
  Eigen::Index n = 0;
  Eigen::Index k = 0;
  std::vector<std::vector<DesignBlock>> layout;  // block structure of each term
  std::vector<Eigen::Index> fixed_column;        // fixed-effect column of each term, -1 if none

  std::size_t terms() const { return layout.size(); }
};

/// `fixed_column[p]` names the column of X holding term p's constant part;
/// when omitted, term p < K maps to column p and later terms have none.
InnerProducts precompute(const Eigen::VectorXd& y, const Eigen::MatrixXd& x, const std::vector<TermDesign>& designs,
                         std::vector<Eigen::Index> fixed_column = {});

struct BlockParams {
  bool active = false;
  double tau = 0.0;    // tau / sigma
  double alpha = 1.0;  // spatial blocks only
};

struct BlockRef {
  std::size_t term = 0;
  std::size_t block = 0;
  friend bool operator==(const BlockRef&, const BlockRef&) = default;
};

/// Variance parameters of every design block. Inactive blocks are left out of the model.
struct ModelTheta {
  std::vector<std::vector<BlockParams>> blocks;

  static ModelTheta none(const InnerProducts& ip);
  BlockParams& at(BlockRef r) { return blocks[r.term][r.block]; }
  const BlockParams& at(BlockRef r) const { return blocks[r.term][r.block]; }
  /// Coefficient type implied by which blocks of a covariate term are active.
  EffectType type(std::size_t term, const InnerProducts& ip) const;
  VarianceParams params(std::size_t term, const InnerProducts& ip) const;
  /// Activates the blocks needed for `type` with the given parameters.
  void set_type(std::size_t term, const InnerProducts& ip, EffectType type, const VarianceParams& params);
};

/// Locates the block of the given kind inside term p, if the design has one.
std::optional<BlockRef> find_block(const InnerProducts& ip, std::size_t term, BlockKind kind);

struct Solution {
  Eigen::VectorXd b;                            // fixed coefficients
  std::vector<std::vector<Eigen::VectorXd>> u;  // per term, per block; empty when inactive
  double resid_norm2 = 0.0;                     // ||y - Xb - EU||^2
  double penalty = 0.0;                         // sum ||u_p||^2
  double sigma2 = 0.0;
  double log_det_p = 0.0;
  double loglik = 0.0;
  bool jittered = false;
};

/// Full bordered-system solve from the inner products: assembles P block by
/// block, solves for [b; U] and evaluates the residual norm from inner products.
Solution solve_effects(const ModelTheta& theta, const InnerProducts& ip);
double loglik_fast(const ModelTheta& theta, const InnerProducts& ip);

/// Reference evaluation on the raw N-dimensional data.
double loglik_direct(const ModelTheta& theta, const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                     const std::vector<TermDesign>& designs);

/// Restricted log-likelihood given log|P|, the penalized residual sum d and the degrees of freedom.
double restricted_loglik(double log_det_p, double d, Eigen::Index n, Eigen::Index k);

/// Partitioned evaluation for varying one block while every other block is held
/// fixed. Everything that does not depend on the target block is factorized
/// once in the constructor; each evaluation then costs O(L^3) in the target
/// block width. Other blocks with tau = 0 are treated as dropped.
class BlockUpdate {
 public:
  BlockUpdate(const InnerProducts& ip, const ModelTheta& theta, BlockRef target);

  double loglik(double tau, double alpha) const;
  /// Likelihood with the target block removed, from the factorization already held.
  double loglik_without() const { return loglik_without_; }
  double log_det_p(double tau, double alpha) const;
  /// [b; u_1; ...] ordered as the fixed effects, the other active blocks in
  /// (term, block) order, then the target block.
  Eigen::VectorXd coefficients(double tau, double alpha) const;
  const std::vector<BlockRef>& others() const { return others_; }
  bool jittered() const { return jittered_; }

 private:
  struct Schur {
    Eigen::LLT<Eigen::MatrixXd> llt;
    double log_det = 0.0;
    Eigen::VectorXd v;
  };
  Schur schur(double tau, double alpha) const;
  // Solves the A-form system ordered [fixed, others, target] from the held factors.
  Eigen::VectorXd solve(const Schur& s, const Eigen::VectorXd& r) const;

  const InnerProducts* ip_;
  BlockRef target_;
  const DesignBlock* block_;
  std::vector<BlockRef> others_;
  std::vector<Eigen::VectorXd> others_v_;
  double others_log_v2_ = 0.0;  // 2 sum log V over other blocks
  double log_det_a_ = 0.0;      // log |M_-,- + V_-^-2|
  Eigen::LLT<Eigen::MatrixXd> a_llt_;
  Eigen::MatrixXd cross_;       // M_-,t
  Eigen::MatrixXd a_inv_b_;     // (M_-,- + V_-^-2)^-1 M_-,t
  Eigen::VectorXd a_inv_m_;     // (M_-,- + V_-^-2)^-1 m_-
  double m_a_inv_m_ = 0.0;
  Eigen::MatrixXd reduced_tt_;  // M_t,t - M_t,- (M_-,- + V_-^-2)^-1 M_-,t
  Eigen::VectorXd reduced_m_;   // m_t - M_t,- (M_-,- + V_-^-2)^-1 m_-
  double loglik_without_ = 0.0;
  bool jittered_ = false;
};

struct OptimizeResult {
  BlockParams params;
  double loglik = 0.0;
  double loglik_without = 0.0;
  bool converged = false;
  int evaluations = 0;
};

/// Maximizes the restricted likelihood over one block's parameters with all
/// other blocks fixed. Starts from the block's current parameters when it is
/// active and never returns a value below the starting likelihood.
OptimizeResult optimize_effect(const InnerProducts& ip, const ModelTheta& theta, BlockRef target,
                               const NelderMeadOptions& options = {});

double loglik_drop_effect(const InnerProducts& ip, const ModelTheta& theta, BlockRef target);

struct RemlState {
  ModelTheta theta;
  Eigen::VectorXd b_hat;
  std::vector<std::vector<Eigen::VectorXd>> u_hat;
  double sigma2_hat = 0.0;
  double loglik_r = 0.0;
  double resid_norm2 = 0.0;
  bool converged = false;
  std::vector<std::string> warnings;
};

RemlState evaluate_state(const InnerProducts& ip, ModelTheta theta, bool converged);

/// Coordinate ascent over the active blocks until the likelihood stops improving.
RemlState fit_theta(const InnerProducts& ip, ModelTheta theta, const NelderMeadOptions& options = {},
                    double rel_tol = 1e-5, int max_sweeps = 30);

struct TermCoefficients {
  std::size_t term = 0;
  EffectType type = EffectType::Constant;
  Eigen::VectorXd estimate;
  Eigen::VectorXd se;
  Eigen::VectorXd t;
  Eigen::VectorXd p_value;  // two-sided, normal reference
};

struct CoefficientTable {
  std::vector<TermCoefficients> terms;  // every term that has a fixed column
};

/// Per-row coefficients b_p + basis_i V_p u_p with standard errors from sigma^2 P^-1.
CoefficientTable coefficient_table(const RemlState& state, const InnerProducts& ip,
                                   const std::vector<TermDesign>& designs, bool allow_nonconverged = false);

/// Group effects V u for a group term, one per level.
Eigen::VectorXd group_effects(const RemlState& state, std::size_t term);

}  // namespace samsel
