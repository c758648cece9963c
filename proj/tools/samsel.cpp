// samsel: spatial additive mixed model fitting and coefficient-type selection.

#include "samsel/error.hpp"
#include "samsel/io.hpp"
#include "samsel/simulate.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace samsel;

namespace {

constexpr int kExitError = 2;
constexpr int kExitNonConverged = 3;

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  return out;
}

int env_workers(int fallback) {
  if (const char* w = std::getenv("SAMSEL_WORKERS")) {
    const int v = std::atoi(w);
    if (v > 0) return v;
  }
  return fallback;
}

struct FitArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string mode;
  std::string cost;
  std::string lag;
  std::string by;
  std::optional<std::uint64_t> seed;
  std::optional<int> replicates;
  bool verbose = false;
  bool allow_nonconverged = false;
  bool timing = false;
};

void add_fit_options(CLI::App* cmd, FitArgs& a) {
  cmd->add_option("--config", a.config, "TOML-style model configuration")->required()->check(CLI::ExistingFile);
  cmd->add_option("--data", a.data, "training CSV (overrides [data] path)");
  cmd->add_option("--out", a.out, "output directory (overrides [output] dir)");
  cmd->add_option("--mode", a.mode, "selection mode")->check(CLI::IsMember({"none", "simple", "mc"}));
  cmd->add_option("--cost", a.cost, "selection cost")->check(CLI::IsMember({"bic", "aic"}));
  cmd->add_option("--seed", a.seed, "master seed");
  cmd->add_option("--replicates", a.replicates, "Monte Carlo replicates G")->check(CLI::PositiveNumber);
  cmd->add_option("--lag", a.lag, "column to lag by one period within each site");
  cmd->add_option("--by", a.by, "period column for --lag");
  cmd->add_flag("--verbose", a.verbose, "write per-trial likelihood trace (trace.jsonl)");
  cmd->add_flag("--allow-nonconverged", a.allow_nonconverged, "exit 0 even if selection did not converge");
  cmd->add_flag("--timing", a.timing, "include wall times in report.json");
}

int cmd_fit(const FitArgs& a, std::optional<SelectMode> forced) {
  FitConfig cfg = load_config(a.config);
  if (!a.data.empty()) cfg.data_path = a.data;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (forced) cfg.mode = *forced;
  if (!a.mode.empty()) cfg.mode = parse_select_mode(a.mode);
  if (!a.cost.empty()) cfg.selection.cost = parse_cost_kind(a.cost);
  if (a.seed) cfg.seed = *a.seed;
  if (a.replicates) cfg.mc.replicates = *a.replicates;
  if (a.allow_nonconverged) cfg.allow_nonconverged = true;
  cfg.mc.workers = env_workers(cfg.mc.workers);
  if (cfg.data_path.empty()) throw InputError("no training data: set [data] path or pass --data");

  CsvTable table = read_csv_file(cfg.data_path);
  if (!a.lag.empty()) {
    if (a.by.empty()) throw InputError("--lag requires --by <period column>");
    table = add_lag(table, a.lag, a.by, cfg.schema.id);
    const std::string name = a.lag + "_lag";
    bool listed = false;
    for (const auto& c : cfg.covariates) listed = listed || c.name == name;
    if (!listed) {
      cfg.covariates.push_back({name, {}});
      cfg.covariates.back().types = CovariateConfig{}.types;
      cfg.schema.covariates.push_back(name);
    }
  }
  const Dataset data = ingest_table(table, cfg.schema, cfg.data_path);

  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  std::optional<std::ofstream> trace;
  if (a.verbose) trace = open_out(dir / "trace.jsonl");
  if (trace) *trace << std::setprecision(17);
  const FitRun run = run_fit(data, cfg, trace ? &*trace : nullptr);

  {
    auto out = open_out(dir / "model.json");
    write_model_json(out, run.saved);
  }
  {
    auto out = open_out(dir / "coefficients.csv");
    write_coefficients_csv(out, run);
  }
  {
    auto out = open_out(dir / "report.json");
    write_report_json(out, run, a.timing);
  }
  std::cerr << "mode " << to_string(cfg.mode) << ": " << to_string(cfg.selection.cost) << " " << run.result.cost
            << ", types:";
  for (std::size_t p = 0; p < run.model.terms.size(); ++p) {
    std::cerr << ' ' << run.model.terms[p].name << '=' << to_string(run.result.types[p]);
  }
  for (std::size_t g = 0; g < run.model.groups.size(); ++g) {
    std::cerr << ' ' << run.model.groups[g].name << '=' << (run.saved.groups[g].included ? "in" : "out");
  }
  std::cerr << "\n";
  if (!run.result.converged) {
    std::cerr << "warning: selection did not converge\n";
    if (!cfg.allow_nonconverged) return kExitNonConverged;
  }
  return 0;
}

struct PredictArgs {
  std::string model;
  std::string request;
  std::string out;
  std::string id = "id";
};

int cmd_predict(const PredictArgs& a) {
  std::ifstream in(a.model);
  if (!in) throw InputError("cannot open model '" + a.model + "'");
  const SavedModel model = read_model_json(in);
  const PredictionRequest req = read_request(read_csv_file(a.request), model, a.id);
  const Prediction pred = predict(model, req);
  int unseen = 0;
  for (int u : pred.unseen) unseen += u > 0;
  if (unseen > 0) std::cerr << "note: " << unseen << " rows reference group levels unseen in training (effect 0)\n";
  if (a.out.empty()) {
    write_predictions_csv(std::cout, req, pred);
  } else {
    auto out = open_out(a.out);
    write_predictions_csv(out, req, pred);
  }
  return 0;
}

struct SimArgs {
  std::vector<Eigen::Index> n{1000};
  std::vector<int> p{1};
  int iterations = 50;
  std::vector<std::string> models{"lm", "svc_all", "snvc_all", "true_types", "simple", "mc"};
  std::uint64_t seed = 1;
  double tau0 = 1.0;
  double tau1 = 0.5;
  double tau2 = 0.5;
  int replicates = 30;
  int workers = 1;
  std::size_t l_max = 200;
  double range = 1.0;
  int nvc_size = 10;
  int repeats = 5;
  std::string out = ".";
  bool timing = false;
};

int cmd_experiment(const SimArgs& a) {
  const fs::path dir(a.out);
  fs::create_directories(dir);
  for (auto n : a.n) {
    for (int p : a.p) {
      ExperimentConfig cfg;
      cfg.dgp.n = n;
      cfg.dgp.p = p;
      cfg.dgp.tau0 = a.tau0;
      cfg.dgp.tau1 = a.tau1;
      cfg.dgp.tau2 = a.tau2;
      cfg.dgp.seed = a.seed;
      cfg.iterations = a.iterations;
      cfg.models.clear();
      for (const auto& m : a.models) cfg.models.push_back(parse_experiment_model(m));
      cfg.basis.l_max = a.l_max;
      cfg.basis.range = a.range;
      cfg.basis.nvc_size = a.nvc_size;
      cfg.replicates = a.replicates;
      cfg.workers = env_workers(a.workers);
      const ExperimentReport report = run_experiment(cfg);
      const std::string stem = "experiment_n" + std::to_string(n) + "_p" + std::to_string(p);
      {
        auto out = open_out(dir / (stem + ".csv"));
        write_experiment_csv(out, report);
      }
      {
        auto out = open_out(dir / (stem + ".json"));
        write_experiment_json(out, report, a.timing);
      }
      std::cerr << stem << ": " << report.records.size() << " fits\n";
    }
  }
  return 0;
}

int cmd_timing(const SimArgs& a) {
  if (a.p.size() != 1) throw ParameterError("timing takes a single --p value");
  const auto rows = bench_timing(a.n, a.p.front(), a.l_max, a.repeats, a.seed);
  if (a.out == "-") {
    write_timing_csv(std::cout, rows);
  } else {
    auto out = open_out(a.out);
    write_timing_csv(out, rows);
  }
  return 0;
}

int cmd_data(const SimArgs& a) {
  if (a.n.size() != 1 || a.p.size() != 1) throw ParameterError("data takes a single --n and --p");
  DgpConfig dgp;
  dgp.n = a.n.front();
  dgp.p = a.p.front();
  dgp.tau0 = a.tau0;
  dgp.tau1 = a.tau1;
  dgp.tau2 = a.tau2;
  dgp.seed = a.seed;
  const SyntheticData d = generate(dgp);
  if (a.out == "-") {
    write_synthetic_csv(std::cout, d);
  } else {
    auto out = open_out(a.out);
    write_synthetic_csv(out, d);
  }
  return 0;
}

void add_dgp_options(CLI::App* cmd, SimArgs& a) {
  cmd->add_option("--n", a.n, "sample sizes")->delimiter(',');
  cmd->add_option("--p", a.p, "covariate group counts")->delimiter(',');
  cmd->add_option("--seed", a.seed, "master seed");
  cmd->add_option("--tau0", a.tau0, "sd of the intercept surface");
  cmd->add_option("--tau1", a.tau1, "sd of the spatial coefficient part");
  cmd->add_option("--tau2", a.tau2, "sd of the non-spatial coefficient part");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial additive mixed models with coefficient-type selection"};
  app.require_subcommand(1);

  FitArgs fit_args;
  auto* fit = app.add_subcommand("fit", "fit a model (mode none unless --mode is given)");
  add_fit_options(fit, fit_args);
  FitArgs select_args;
  auto* select = app.add_subcommand("select", "select coefficient types and fit");
  add_fit_options(select, select_args);

  PredictArgs predict_args;
  auto* pred = app.add_subcommand("predict", "predict at training sites from a saved model");
  pred->add_option("--model", predict_args.model, "model.json from fit/select")->required()->check(CLI::ExistingFile);
  pred->add_option("--request", predict_args.request, "request CSV")->required()->check(CLI::ExistingFile);
  pred->add_option("--out", predict_args.out, "predictions CSV (default stdout)");
  pred->add_option("--id", predict_args.id, "site id column of the request");

  SimArgs sim_args;
  auto* sim = app.add_subcommand("simulate", "synthetic experiments");
  sim->require_subcommand(1);
  auto* exp = sim->add_subcommand("experiment", "compare estimators on synthetic data");
  add_dgp_options(exp, sim_args);
  exp->add_option("--iterations", sim_args.iterations, "datasets per (n, p)")->check(CLI::PositiveNumber);
  exp->add_option("--models", sim_args.models, "models to fit")
      ->delimiter(',')
      ->check(CLI::IsMember({"lm", "svc_all", "snvc_all", "true_types", "simple", "mc"}));
  exp->add_option("--replicates", sim_args.replicates, "Monte Carlo replicates G")->check(CLI::PositiveNumber);
  exp->add_option("--workers", sim_args.workers, "parallel iterations (SAMSEL_WORKERS overrides)");
  exp->add_option("--l-max", sim_args.l_max, "Moran basis cap");
  exp->add_option("--range", sim_args.range, "proximity range of the model basis")->check(CLI::PositiveNumber);
  exp->add_option("--nvc-size", sim_args.nvc_size, "NVC basis size");
  exp->add_option("--out", sim_args.out, "output directory");
  exp->add_flag("--timing", sim_args.timing, "include wall times in the JSON report");
  auto* timing = sim->add_subcommand("timing", "time precompute and selection across sample sizes");
  add_dgp_options(timing, sim_args);
  timing->add_option("--l-cap", sim_args.l_max, "Moran basis cap");
  timing->add_option("--repeats", sim_args.repeats, "repeats per sample size (>= 3)");
  timing->add_option("--out", sim_args.out, "timing CSV ('-' for stdout)");
  auto* data = sim->add_subcommand("data", "write one synthetic dataset as CSV");
  add_dgp_options(data, sim_args);
  data->add_option("--out", sim_args.out, "CSV path ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fit) return cmd_fit(fit_args, SelectMode::None);
    if (*select) return cmd_fit(select_args, std::nullopt);
    if (*pred) return cmd_predict(predict_args);
    if (*exp) return cmd_experiment(sim_args);
    if (*timing) {
      if (sim_args.out == ".") sim_args.out = "-";
      return cmd_timing(sim_args);
    }
    if (*data) {
      if (sim_args.out == ".") sim_args.out = "-";
      return cmd_data(sim_args);
    }
  } catch (const samsel::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return 0;
}
