#pragma once

#include "samsel/basis.hpp"
#include "samsel/pipeline.hpp"
#include "samsel/selection.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace samsel {

/// Synthetic data generator settings. Covariate group p contributes a plain
/// covariate, one carrying a spatially varying coefficient and one carrying a
/// non-spatially varying coefficient.
struct DgpConfig {
  Eigen::Index n = 1000;
  int p = 1;
  double tau0 = 1.0;  // sd of the intercept surface
  double tau1 = 0.5;  // sd of the spatial part of the SVC coefficients
  double tau2 = 0.5;  // sd of the non-spatial part of the NVC coefficients
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticData {
  Eigen::VectorXd y;
  Eigen::MatrixXd x_const;  // N x P
  Eigen::MatrixXd x_svc;    // N x P
  Eigen::MatrixXd x_nvc;    // N x P
  SiteCoords coords;
  Eigen::VectorXd beta0;
  Eigen::MatrixXd beta_svc;  // N x P
  Eigen::MatrixXd beta_nvc;  // N x P
  Eigen::VectorXd b;         // coefficients of the plain covariates

  /// Model input with every covariate allowed all four types, in the order
  /// x1, xs1, xn1, x2, ...
  ModelInput model_input() const;
  /// True coefficient surface of model term `term` (0 = intercept).
  Eigen::VectorXd truth(std::size_t term) const;
  /// Types of the generating process for each model term.
  std::vector<EffectType> true_types() const;
};

SyntheticData generate(const DgpConfig& config);

/// sqrt of the mean squared error over iterations and sites.
double rmse(const std::vector<Eigen::VectorXd>& estimates, const std::vector<Eigen::VectorXd>& truth);
/// Mean signed error over iterations and sites.
double bias(const std::vector<Eigen::VectorXd>& estimates, const std::vector<Eigen::VectorXd>& truth);

enum class ExperimentModel { LM, SVCAll, SNVCAll, TrueTypes, Simple, MC };
enum class CoefClass { Intercept, Constant, SVC, NVC };

std::string_view to_string(ExperimentModel m);
ExperimentModel parse_experiment_model(std::string_view text);
std::string_view to_string(CoefClass c);
/// Class of model term `term` in the synthetic layout.
CoefClass coef_class(std::size_t term);

struct ExperimentConfig {
  DgpConfig dgp;
  int iterations = 50;
  std::vector<ExperimentModel> models{ExperimentModel::LM,        ExperimentModel::SVCAll, ExperimentModel::SNVCAll,
                                      ExperimentModel::TrueTypes, ExperimentModel::Simple, ExperimentModel::MC};
  BasisConfig basis;  // range defaults to 1 here, the kernel scale of the generator
  SelectionOptions selection;
  int replicates = 30;  // Monte Carlo model
  int workers = 1;
};

struct ClassSums {
  double sq = 0.0;
  double err = 0.0;
  double count = 0.0;
  double se_sq = 0.0;
  double se_err = 0.0;
  double se_count = 0.0;
};

/// Outcome of one model on one synthetic dataset.
struct IterationRecord {
  int iteration = 0;
  std::uint64_t seed = 0;
  ExperimentModel model = ExperimentModel::LM;
  bool ok = false;
  std::string error;
  std::vector<EffectType> types;
  std::vector<ClassSums> sums;  // indexed by CoefClass
  double cost = 0.0;
  bool converged = false;
  double seconds = 0.0;
};

struct ExperimentCell {
  ExperimentModel model = ExperimentModel::LM;
  CoefClass cls = CoefClass::Intercept;
  double rmse = 0.0;
  double bias = 0.0;
  double se_rmse = 0.0;  // NaN without a true-types reference
  double se_bias = 0.0;
  int fits = 0;
  int failures = 0;
};

/// Counts of chosen types per model, coefficient class and type.
struct TypeFrequency {
  ExperimentModel model = ExperimentModel::LM;
  CoefClass cls = CoefClass::Intercept;
  EffectType type = EffectType::Constant;
  int count = 0;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<IterationRecord> records;  // iteration-major, models in config order
  std::vector<ExperimentCell> cells;
  std::vector<TypeFrequency> frequencies;
  std::vector<double> model_seconds;  // total wall time per model, config order
};

ExperimentReport run_experiment(const ExperimentConfig& config);

/// Cells over iterations [first, last).
std::vector<ExperimentCell> aggregate(const ExperimentConfig& config, const std::vector<IterationRecord>& records,
                                      int first, int last);

struct TimingRow {
  Eigen::Index n = 0;
  int repeats = 0;
  Eigen::Index basis_size = 0;
  double range = 0.0;  // proximity range that reached the basis cap
  double basis_seconds = 0.0;
  double precompute_seconds = 0.0;  // mean over repeats
  double selection_seconds = 0.0;   // mean over repeats, after the precompute
  double sweep_seconds = 0.0;       // median over repeats of the mean sweep time
  double first_sweep_seconds = 0.0; // median over repeats
  double total_seconds = 0.0;       // basis + mean precompute + mean selection
  int sweeps = 0;
};

/// Times basis construction once per N, then precompute and simple selection
/// `repeats` times on the same synthetic dataset. The proximity range starts at
/// the largest nearest-neighbour distance and shrinks until the basis has
/// `l_cap` vectors, so every N is timed at the same L when possible.
std::vector<TimingRow> bench_timing(const std::vector<Eigen::Index>& n_values, int p, std::size_t l_cap, int repeats,
                                    std::uint64_t seed);

}  // namespace samsel
