#pragma once

#include "samsel/reml.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace samsel {

enum class CostKind { BIC, AIC };

std::string_view to_string(CostKind kind);
CostKind parse_cost_kind(std::string_view text);

/// Number of fixed coefficients plus variance parameters of the active blocks
/// (spatial 2, non-spatial 1, group 1). The residual variance is profiled out
/// and not counted.
int count_params(const ModelTheta& theta, const InnerProducts& ip);

/// BIC = -2 loglik + q log n, AIC = -2 loglik + 2 q.
double cost(double loglik, int q, Eigen::Index n, CostKind kind);

/// What a term of the precomputed layout may become during selection.
struct TermCandidates {
  std::string name;
  bool is_group = false;
  std::vector<EffectType> allowed{EffectType::Constant};  // covariate terms only

  bool allows(EffectType t) const;
};

struct SelectionOptions {
  CostKind cost = CostKind::BIC;
  double tol_accept = 1e-6;  // a transition must improve the cost by more than this
  double tol_outer = 1e-5;   // relative cost change that ends the sweeps
  int max_sweeps = 30;
  NelderMeadOptions optimizer;
  std::ostream* trace = nullptr;  // JSON lines per trial when set
};

struct SelectionResult {
  std::vector<EffectType> types;  // per term; Constant for group terms
  std::vector<bool> included;     // per term: any random block active
  RemlState state;
  double cost = 0.0;
  int q = 0;
  std::vector<double> cost_trace;   // cost after every trial, non-increasing
  std::vector<double> sweep_costs;  // cost at the end of each sweep
  std::vector<double> sweep_seconds;
  int sweeps = 0;
  int trials = 0;
  int accepted = 0;
  std::vector<std::vector<std::size_t>> sequences;
  bool converged = false;
  // Monte Carlo mode only.
  std::vector<double> run_costs;
  std::vector<bool> run_failed;
  std::size_t best_run = 0;
};

/// Sequential selection: for every term in `order` the spatial block is fitted
/// and kept only if it lowers the cost, then the non-spatial block likewise;
/// sweeps repeat until the cost stops changing. The starting model is
/// all-Constant with every group term excluded.
SelectionResult simple_select(const InnerProducts& ip, const std::vector<TermCandidates>& candidates,
                              const SelectionOptions& options, std::vector<std::size_t> order = {});

struct McConfig {
  int replicates = 30;
  std::uint64_t seed = 1;
  int workers = 1;
  bool force_identity = false;  // replicate 0 uses the identity order
};

/// Runs independent simple selections over random term orders sharing the same
/// inner products and returns the lowest-cost result. Deterministic given the seed.
SelectionResult mc_select(const InnerProducts& ip, const std::vector<TermCandidates>& candidates,
                          const SelectionOptions& options, const McConfig& mc);

/// Deterministic per-replicate random stream derived from a master seed.
std::uint64_t split_seed(std::uint64_t master, std::uint64_t stream);

}  // namespace samsel
