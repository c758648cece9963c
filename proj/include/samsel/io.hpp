#pragma once

#include "samsel/pipeline.hpp"
#include "samsel/selection.hpp"
#include "samsel/simulate.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace samsel {

/// 17 significant digits; round-trips every finite double.
std::string format_number(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws InputError when absent.
  std::size_t column(const std::string& name) const;
  bool has_column(const std::string& name) const;
};

CsvTable read_csv(std::istream& in, const std::string& source = "input");
CsvTable read_csv_file(const std::string& path);
void write_csv(std::ostream& out, const CsvTable& table);

/// Appends `<column>_lag`, the value of `column` in the previous period of the
/// same site, and drops rows that have no previous period. Periods sort
/// numerically when every label is a number, else lexicographically.
CsvTable add_lag(const CsvTable& table, const std::string& column, const std::string& period,
                 const std::string& id_column);

struct DatasetSchema {
  std::string id = "id";
  std::string east = "east";
  std::string north = "north";
  std::string response = "y";
  std::vector<std::string> covariates;
  std::vector<std::string> groups;
  std::string period;  // empty: every row is its own period
};

struct Dataset {
  std::vector<std::string> site_id;  // per row
  Eigen::VectorXd east;
  Eigen::VectorXd north;
  Eigen::VectorXd y;
  std::vector<std::string> covariate_names;
  Eigen::MatrixXd covariates;  // N x covariate count
  std::vector<std::string> group_names;
  std::vector<std::vector<std::string>> groups;  // per group column, per row
  std::vector<std::string> period;                // per row, empty without a period column

  Eigen::Index size() const { return y.size(); }
};

/// Rows are reported 1-based counting data rows after the header.
Dataset ingest_table(const CsvTable& table, const DatasetSchema& schema, const std::string& source = "input");
Dataset ingest_csv(const std::string& path, const DatasetSchema& schema);
void export_csv(std::ostream& out, const Dataset& data);

enum class SelectMode { None, Simple, MC };
std::string_view to_string(SelectMode m);
SelectMode parse_select_mode(std::string_view text);

struct CovariateConfig {
  std::string name;
  std::vector<EffectType> types{EffectType::Constant, EffectType::SVC, EffectType::NVC, EffectType::SNVC};
};

struct FitConfig {
  std::string data_path;
  DatasetSchema schema;  // covariates and groups follow `covariates` / schema.groups
  BasisConfig basis;
  std::vector<EffectType> intercept_types{EffectType::Constant, EffectType::SVC};
  std::vector<CovariateConfig> covariates;
  SelectMode mode = SelectMode::Simple;
  SelectionOptions selection;
  McConfig mc;
  std::uint64_t seed = 1;
  bool allow_nonconverged = false;
  std::string out_dir = ".";

  void validate() const;
};

/// Parses a small TOML subset: [sections], key = value with strings, numbers,
/// booleans and flat arrays, and # comments. Relative data paths resolve
/// against `base_dir`.
FitConfig parse_config(std::istream& in, const std::string& base_dir = "", const std::string& source = "config");
FitConfig load_config(const std::string& path);

/// Per-site data the selected model needs for prediction.
struct SavedTerm {
  std::string name;
  EffectType type = EffectType::Constant;
  double b = 0.0;
  double tau_s = 0.0;
  double alpha = 1.0;
  double tau_n = 0.0;
  Eigen::VectorXd spatial_weights;  // V u over the Moran basis, empty when inactive
  Eigen::VectorXd nvc_weights;      // V u over the NVC basis, empty when inactive
  std::optional<NvcBasis> nvc;      // evaluation metadata (vectors left empty)
};

struct SavedGroup {
  std::string name;
  bool included = false;
  double tau = 0.0;
  std::vector<std::string> levels;
  Eigen::VectorXd effects;  // per level, empty when excluded
};

struct SavedModel {
  std::uint64_t seed = 0;
  SelectMode mode = SelectMode::Simple;
  CostKind cost_kind = CostKind::BIC;
  double cost = 0.0;
  int q = 0;
  double loglik = 0.0;
  double sigma2 = 0.0;
  bool converged = false;
  Eigen::Index n = 0;
  double range = 0.0;
  Eigen::VectorXd eigenvalues;
  std::vector<std::string> site_ids;
  Eigen::MatrixXd site_basis;  // sites x L
  std::vector<SavedTerm> terms;
  std::vector<SavedGroup> groups;
};

struct FitRun {
  FitConfig config;
  std::vector<std::string> row_ids;
  std::vector<std::string> site_ids;  // unique, first appearance
  PreparedModel model;
  SelectionResult result;
  CoefficientTable table;
  SavedModel saved;
  double seconds = 0.0;
};

/// Basis construction, precompute and selection (or a fixed fit for mode none).
/// Mode none fits every term with its richest allowed type and all groups.
FitRun run_fit(const Dataset& data, const FitConfig& config, std::ostream* trace = nullptr);

void write_model_json(std::ostream& out, const SavedModel& model);
SavedModel read_model_json(std::istream& in);
void write_coefficients_csv(std::ostream& out, const FitRun& run);
void write_report_json(std::ostream& out, const FitRun& run, bool include_timing = false);

struct PredictionRequest {
  std::vector<std::string> site_id;
  Eigen::MatrixXd x;  // rows x covariate terms, in model term order (intercept excluded)
  std::vector<std::vector<std::string>> group_levels;  // per model group, per row
};

struct Prediction {
  Eigen::VectorXd y_hat;
  std::vector<int> unseen;  // per row: number of group levels not seen in training
};

/// Request CSV: an `id` column, one column per covariate term and one per group term.
PredictionRequest read_request(const CsvTable& table, const SavedModel& model, const std::string& id_column = "id");
Prediction predict(const SavedModel& model, const PredictionRequest& request);
void write_predictions_csv(std::ostream& out, const PredictionRequest& request, const Prediction& prediction);

/// One row per model x class x metric.
void write_experiment_csv(std::ostream& out, const ExperimentReport& report);
void write_experiment_json(std::ostream& out, const ExperimentReport& report, bool include_timing = false);
void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows);
/// Synthetic dataset as a CSV that `fit` / `select` can ingest.
void write_synthetic_csv(std::ostream& out, const SyntheticData& data);

}  // namespace samsel
