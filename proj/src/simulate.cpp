#include "samsel/simulate.hpp"

#include "samsel/error.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <thread>

namespace samsel {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double sample_sd(const Eigen::VectorXd& v) {
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

// Row-standardized moving average exp(-d) over all other sites, one column per field.
Eigen::MatrixXd moving_average(const SiteCoords& coords, const Eigen::MatrixXd& fields) {
  const auto n = static_cast<Eigen::Index>(coords.size());
  Eigen::ArrayXd east(n), north(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    east(i) = coords[static_cast<std::size_t>(i)].east;
    north(i) = coords[static_cast<std::size_t>(i)].north;
  }
  Eigen::MatrixXd out(n, fields.cols());
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    w = (-((east - east(i)).square() + (north - north(i)).square()).sqrt()).exp().matrix();
    w(i) = 0.0;
    out.row(i) = (w.transpose() * fields) / w.sum();
  }
  return out;
}

// Orthonormal polynomials of the standard normal cdf of x, centered. Working on
// the probability scale keeps the tails from dominating the high degrees.
Eigen::MatrixXd orthonormal_polynomials(const Eigen::VectorXd& x, int degree) {
  const Eigen::Index n = x.size();
  const Eigen::ArrayXd v = x.array().unaryExpr([](double t) { return 0.5 * std::erfc(-t / std::sqrt(2.0)); });
  Eigen::MatrixXd raw(n, degree);
  for (int k = 0; k < degree; ++k) raw.col(k) = v.pow(k + 1).matrix();
  raw.rowwise() -= raw.colwise().mean();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
  return qr.householderQ() * Eigen::MatrixXd::Identity(n, degree);
}

void check_shapes(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  if (a.size() != b.size() || a.empty()) throw ParameterError("estimates and truth must cover the same iterations");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size() || a[i].size() == 0) throw ParameterError("estimate and truth lengths differ");
  }
}

constexpr int kClassCount = 4;

}  // namespace

void DgpConfig::validate() const {
  if (n < 50) throw ParameterError("synthetic data needs n >= 50");
  if (p < 1) throw ParameterError("synthetic data needs p >= 1");
  if (!(tau0 >= 0.0) || !(tau1 >= 0.0) || !(tau2 >= 0.0)) throw ParameterError("tau values must be non-negative");
}

SyntheticData generate(const DgpConfig& config) {
  config.validate();
  const Eigen::Index n = config.n;
  const int p = config.p;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal;
  auto draw = [&](Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    }
    return m;
  };

  SyntheticData d;
  std::vector<Site> sites(static_cast<std::size_t>(n));
  for (auto& s : sites) {
    s.east = normal(rng);
    s.north = normal(rng);
  }
  d.coords = SiteCoords(std::move(sites));

  const Eigen::MatrixXd u = draw(n, p + 1);
  const Eigen::MatrixXd z = draw(10, p);
  d.x_const = draw(n, p);
  d.x_svc = draw(n, p);
  d.x_nvc = draw(n, p);
  const Eigen::VectorXd eps = draw(n, 1).col(0);

  const Eigen::MatrixXd smooth = moving_average(d.coords, u);
  d.beta0 = config.tau0 * smooth.col(0) / sample_sd(smooth.col(0));
  d.beta_svc.resize(n, p);
  d.beta_nvc.resize(n, p);
  for (int j = 0; j < p; ++j) {
    const Eigen::VectorXd s = smooth.col(j + 1);
    d.beta_svc.col(j) = (1.0 + config.tau1 * (s / sample_sd(s)).array()).matrix();
    const Eigen::VectorXd g = orthonormal_polynomials(d.x_nvc.col(j), 10) * z.col(j);
    d.beta_nvc.col(j) = (1.0 + config.tau2 * (g / sample_sd(g)).array()).matrix();
  }
  d.b = Eigen::VectorXd::Ones(p);

  d.y = d.beta0 + eps;
  for (int j = 0; j < p; ++j) {
    d.y += d.x_const.col(j) * d.b(j);
    d.y += d.x_svc.col(j).cwiseProduct(d.beta_svc.col(j));
    d.y += d.x_nvc.col(j).cwiseProduct(d.beta_nvc.col(j));
  }
  return d;
}

ModelInput SyntheticData::model_input() const {
  ModelInput in;
  in.y = y;
  in.sites = coords;
  const std::vector<EffectType> all{EffectType::Constant, EffectType::SVC, EffectType::NVC, EffectType::SNVC};
  for (Eigen::Index j = 0; j < x_const.cols(); ++j) {
    const std::string k = std::to_string(j + 1);
    in.covariates.push_back({"x" + k, x_const.col(j), all});
    in.covariates.push_back({"xs" + k, x_svc.col(j), all});
    in.covariates.push_back({"xn" + k, x_nvc.col(j), all});
  }
  return in;
}

Eigen::VectorXd SyntheticData::truth(std::size_t term) const {
  if (term == 0) return beta0;
  const auto j = static_cast<Eigen::Index>((term - 1) / 3);
  if (j >= x_const.cols()) throw ParameterError("term index out of range");
  switch ((term - 1) % 3) {
    case 0:
      return Eigen::VectorXd::Constant(y.size(), b(j));
    case 1:
      return beta_svc.col(j);
    default:
      return beta_nvc.col(j);
  }
}

std::vector<EffectType> SyntheticData::true_types() const {
  std::vector<EffectType> t{EffectType::SVC};
  for (Eigen::Index j = 0; j < x_const.cols(); ++j) {
    t.push_back(EffectType::Constant);
    t.push_back(EffectType::SVC);
    t.push_back(EffectType::NVC);
  }
  return t;
}

double rmse(const std::vector<Eigen::VectorXd>& estimates, const std::vector<Eigen::VectorXd>& truth) {
  check_shapes(estimates, truth);
  double sq = 0.0;
  double err = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    sq += (estimates[i] - truth[i]).squaredNorm();
    err += (estimates[i] - truth[i]).sum();
    count += static_cast<double>(estimates[i].size());
  }
  // Equal errors everywhere give rmse == |bias| up to rounding; keep rmse >= |bias|.
  return std::max(std::sqrt(sq / count), std::abs(err / count));
}

double bias(const std::vector<Eigen::VectorXd>& estimates, const std::vector<Eigen::VectorXd>& truth) {
  check_shapes(estimates, truth);
  double err = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    err += (estimates[i] - truth[i]).sum();
    count += static_cast<double>(estimates[i].size());
  }
  return err / count;
}

std::string_view to_string(ExperimentModel m) {
  switch (m) {
    case ExperimentModel::LM:
      return "lm";
    case ExperimentModel::SVCAll:
      return "svc_all";
    case ExperimentModel::SNVCAll:
      return "snvc_all";
    case ExperimentModel::TrueTypes:
      return "true_types";
    case ExperimentModel::Simple:
      return "simple";
    case ExperimentModel::MC:
      return "mc";
  }
  return "?";
}

ExperimentModel parse_experiment_model(std::string_view text) {
  for (auto m : {ExperimentModel::LM, ExperimentModel::SVCAll, ExperimentModel::SNVCAll, ExperimentModel::TrueTypes,
                 ExperimentModel::Simple, ExperimentModel::MC}) {
    if (to_string(m) == text) return m;
  }
  throw ParameterError("unknown experiment model '" + std::string(text) + "'");
}

std::string_view to_string(CoefClass c) {
  switch (c) {
    case CoefClass::Intercept:
      return "intercept";
    case CoefClass::Constant:
      return "constant";
    case CoefClass::SVC:
      return "svc";
    case CoefClass::NVC:
      return "nvc";
  }
  return "?";
}

CoefClass coef_class(std::size_t term) {
  if (term == 0) return CoefClass::Intercept;
  switch ((term - 1) % 3) {
    case 0:
      return CoefClass::Constant;
    case 1:
      return CoefClass::SVC;
    default:
      return CoefClass::NVC;
  }
}

namespace {

struct ModelFit {
  SelectionResult result;
  CoefficientTable table;
};

ModelFit fit_model(ExperimentModel m, const PreparedModel& model, const SyntheticData& data,
                   const ExperimentConfig& config, std::uint64_t seed) {
  const std::size_t terms = model.terms.size();
  std::vector<EffectType> types(terms, EffectType::Constant);
  ModelFit fit;
  switch (m) {
    case ExperimentModel::LM:
      fit.result = fit_fixed(model, types, {}, config.selection);
      break;
    case ExperimentModel::SVCAll:
      std::fill(types.begin(), types.end(), EffectType::SVC);
      fit.result = fit_fixed(model, types, {}, config.selection);
      break;
    case ExperimentModel::SNVCAll:
      std::fill(types.begin() + 1, types.end(), EffectType::SNVC);
      types[0] = EffectType::SVC;
      fit.result = fit_fixed(model, types, {}, config.selection);
      break;
    case ExperimentModel::TrueTypes:
      fit.result = fit_fixed(model, data.true_types(), {}, config.selection);
      break;
    case ExperimentModel::Simple:
      fit.result = simple_select(model.ip, model.candidates, config.selection);
      break;
    case ExperimentModel::MC: {
      McConfig mc;
      mc.replicates = config.replicates;
      mc.seed = seed;
      fit.result = mc_select(model.ip, model.candidates, config.selection, mc);
      break;
    }
  }
  fit.table = coefficient_table(fit.result.state, model.ip, model.designs, true);
  return fit;
}

void run_iteration(const ExperimentConfig& config, int iteration, IterationRecord* out) {
  const std::size_t mcount = config.models.size();
  const std::uint64_t seed = split_seed(config.dgp.seed, static_cast<std::uint64_t>(iteration));
  for (std::size_t k = 0; k < mcount; ++k) {
    out[k].iteration = iteration;
    out[k].seed = seed;
    out[k].model = config.models[k];
    out[k].sums.assign(kClassCount, ClassSums{});
  }
  std::optional<SyntheticData> data;
  std::optional<PreparedModel> model;
  try {
    DgpConfig dgp = config.dgp;
    dgp.seed = seed;
    data = generate(dgp);
    BasisConfig basis = config.basis;
    if (!basis.range) basis.range = 1.0;  // the generator's own exp(-d) kernel
    model = prepare(data->model_input(), basis);
  } catch (const std::exception& e) {
    for (std::size_t k = 0; k < mcount; ++k) out[k].error = e.what();
    return;
  }

  std::vector<std::optional<ModelFit>> fits(mcount);
  std::optional<std::size_t> reference;
  for (std::size_t k = 0; k < mcount; ++k) {
    const auto t0 = Clock::now();
    try {
      fits[k] = fit_model(config.models[k], *model, *data, config, seed);
      out[k].ok = true;
      out[k].types = fits[k]->result.types;
      out[k].cost = fits[k]->result.cost;
      out[k].converged = fits[k]->result.converged;
      if (config.models[k] == ExperimentModel::TrueTypes) reference = k;
    } catch (const std::exception& e) {
      out[k].error = e.what();
    }
    out[k].seconds = seconds_since(t0);
  }

  for (std::size_t k = 0; k < mcount; ++k) {
    if (!fits[k]) continue;
    for (const auto& tc : fits[k]->table.terms) {
      auto& s = out[k].sums[static_cast<std::size_t>(coef_class(tc.term))];
      const Eigen::VectorXd err = tc.estimate - data->truth(tc.term);
      s.sq += err.squaredNorm();
      s.err += err.sum();
      s.count += static_cast<double>(err.size());
      if (reference) {
        for (const auto& ref : fits[*reference]->table.terms) {
          if (ref.term != tc.term) continue;
          const Eigen::VectorXd se_err = tc.se - ref.se;
          s.se_sq += se_err.squaredNorm();
          s.se_err += se_err.sum();
          s.se_count += static_cast<double>(se_err.size());
        }
      }
    }
  }
}

}  // namespace

std::vector<ExperimentCell> aggregate(const ExperimentConfig& config, const std::vector<IterationRecord>& records,
                                      int first, int last) {
  std::vector<ExperimentCell> cells;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (auto m : config.models) {
    for (int c = 0; c < kClassCount; ++c) {
      ClassSums total;
      ExperimentCell cell;
      cell.model = m;
      cell.cls = static_cast<CoefClass>(c);
      for (const auto& r : records) {
        if (r.model != m || r.iteration < first || r.iteration >= last) continue;
        if (!r.ok) {
          ++cell.failures;
          continue;
        }
        ++cell.fits;
        const auto& s = r.sums[static_cast<std::size_t>(c)];
        total.sq += s.sq;
        total.err += s.err;
        total.count += s.count;
        total.se_sq += s.se_sq;
        total.se_err += s.se_err;
        total.se_count += s.se_count;
      }
      if (total.count == 0.0 && cell.fits > 0) continue;  // class absent from the layout
      cell.bias = total.count > 0 ? total.err / total.count : nan;
      cell.rmse = total.count > 0 ? std::max(std::sqrt(total.sq / total.count), std::abs(cell.bias)) : nan;
      cell.se_bias = total.se_count > 0 ? total.se_err / total.se_count : nan;
      cell.se_rmse = total.se_count > 0 ? std::max(std::sqrt(total.se_sq / total.se_count), std::abs(cell.se_bias)) : nan;
      cells.push_back(cell);
    }
  }
  return cells;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  if (config.iterations < 1) throw ParameterError("an experiment needs at least one iteration");
  if (config.models.empty()) throw ParameterError("an experiment needs at least one model");
  config.dgp.validate();
  const std::size_t mcount = config.models.size();
  ExperimentReport report;
  report.config = config;
  report.records.resize(static_cast<std::size_t>(config.iterations) * mcount);

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int it = next++; it < config.iterations; it = next++) {
      run_iteration(config, it, &report.records[static_cast<std::size_t>(it) * mcount]);
    }
  };
  const int workers = std::max(1, std::min(config.workers, config.iterations));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  report.cells = aggregate(config, report.records, 0, config.iterations);
  report.model_seconds.assign(mcount, 0.0);
  for (std::size_t k = 0; k < mcount; ++k) {
    for (int c = 0; c < kClassCount; ++c) {
      for (auto t : {EffectType::Constant, EffectType::SVC, EffectType::NVC, EffectType::SNVC}) {
        TypeFrequency f{config.models[k], static_cast<CoefClass>(c), t, 0};
        for (const auto& r : report.records) {
          if (r.model != config.models[k] || !r.ok) continue;
          for (std::size_t term = 0; term < r.types.size(); ++term) {
            if (coef_class(term) == f.cls && r.types[term] == t) ++f.count;
          }
        }
        if (f.count > 0) report.frequencies.push_back(f);
      }
    }
    for (const auto& r : report.records) {
      if (r.model == config.models[k]) report.model_seconds[k] += r.seconds;
    }
  }
  return report;
}

std::vector<TimingRow> bench_timing(const std::vector<Eigen::Index>& n_values, int p, std::size_t l_cap, int repeats,
                                    std::uint64_t seed) {
  if (repeats < 3) throw ParameterError("timing needs at least three repeats");
  std::vector<TimingRow> rows;
  for (auto n : n_values) {
    DgpConfig dgp;
    dgp.n = n;
    dgp.p = p;
    dgp.seed = seed;
    const SyntheticData data = generate(dgp);
    const ModelInput input = data.model_input();
    BasisConfig bc;
    bc.l_max = l_cap;

    TimingRow row;
    row.n = n;
    row.repeats = repeats;
    // Hold L at the cap across N: small samples have fewer positive
    // eigenvalues at the default range, so shrink the range until L is reached.
    // Only the final construction is timed.
    double range = data.coords.max_nearest_neighbor_distance();
    EigenOptions eo;
    eo.l_max = l_cap;
    eo.seed = seed;
    auto t0 = Clock::now();
    MoranBasis moran = moran_eigen(build_proximity(data.coords, range), eo);
    row.basis_seconds = seconds_since(t0);
    for (int shrink = 0; moran.size() < static_cast<Eigen::Index>(l_cap) && shrink < 10; ++shrink) {
      range *= 0.8;
      t0 = Clock::now();
      moran = moran_eigen(build_proximity(data.coords, range), eo);
      row.basis_seconds = seconds_since(t0);
    }
    row.range = range;
    row.basis_size = moran.size();

    std::vector<double> sweep, first;
    double pre = 0.0, sel = 0.0;
    for (int r = 0; r < repeats; ++r) {
      t0 = Clock::now();
      const PreparedModel model = prepare(input, bc, moran, range);
      pre += seconds_since(t0);
      t0 = Clock::now();
      const SelectionResult res = simple_select(model.ip, model.candidates, SelectionOptions{});
      sel += seconds_since(t0);
      row.sweeps = res.sweeps;
      double s = 0.0;
      for (double v : res.sweep_seconds) s += v;
      sweep.push_back(s / std::max<std::size_t>(1, res.sweep_seconds.size()));
      first.push_back(res.sweep_seconds.empty() ? 0.0 : res.sweep_seconds.front());
    }
    auto median = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      const std::size_t m = v.size() / 2;
      return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    };
    row.precompute_seconds = pre / repeats;
    row.selection_seconds = sel / repeats;
    row.sweep_seconds = median(sweep);
    row.first_sweep_seconds = median(first);
    row.total_seconds = row.basis_seconds + row.precompute_seconds + row.selection_seconds;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace samsel
