#include "oracles.hpp"

#include "samsel/error.hpp"
#include "samsel/simulate.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace samsel;

TEST(Generate, Deterministic) {
  DgpConfig c;
  c.n = 120;
  c.p = 2;
  c.seed = 77;
  const SyntheticData a = generate(c);
  const SyntheticData b = generate(c);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.beta_svc, b.beta_svc);
  EXPECT_EQ(a.beta_nvc, b.beta_nvc);
  c.seed = 78;
  EXPECT_NE(generate(c).y, a.y);
}

TEST(Generate, LayoutAndAssembly) {
  DgpConfig c;
  c.n = 150;
  c.p = 3;
  const SyntheticData d = generate(c);
  EXPECT_EQ(d.x_const.cols() + d.x_svc.cols() + d.x_nvc.cols(), 3 * c.p);
  const ModelInput in = d.model_input();
  ASSERT_EQ(in.covariates.size(), 9u);
  EXPECT_EQ(in.covariates[1].name, "xs1");
  EXPECT_EQ(d.true_types().size(), 10u);
  EXPECT_EQ(d.b, Eigen::VectorXd::Ones(3));

  // y = sum over terms of x o beta plus unit-variance noise.
  Eigen::VectorXd signal = d.beta0;
  for (std::size_t t = 1; t < 10; ++t) signal += in.covariates[t - 1].values.cwiseProduct(d.truth(t));
  const Eigen::VectorXd eps = d.y - signal;
  EXPECT_NEAR(eps.mean(), 0.0, 0.3);
  EXPECT_NEAR(std::sqrt((eps.array() - eps.mean()).square().mean()), 1.0, 0.2);
  for (int j = 0; j < 3; ++j) {
    for (const Eigen::VectorXd& x : {Eigen::VectorXd(d.x_const.col(j)), Eigen::VectorXd(d.x_svc.col(j)),
                                     Eigen::VectorXd(d.x_nvc.col(j))}) {
      EXPECT_GT(x.maxCoeff() - x.minCoeff(), 0.0);
    }
  }
  EXPECT_TRUE(d.beta_svc.allFinite() && d.beta_nvc.allFinite() && d.beta0.allFinite());
}

TEST(Generate, NvcSurfaceIsAFunctionOfItsCovariate) {
  DgpConfig c;
  c.n = 200;
  const SyntheticData d = generate(c);
  // Sorting by x_nvc leaves a smooth sequence: equal x gives equal beta by construction,
  // so neighbours in x have close coefficients compared with the overall spread.
  std::vector<Eigen::Index> idx(200);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return d.x_nvc(a, 0) < d.x_nvc(b, 0); });
  double jump = 0.0;
  for (std::size_t i = 1; i < idx.size(); ++i) jump += std::abs(d.beta_nvc(idx[i], 0) - d.beta_nvc(idx[i - 1], 0));
  EXPECT_LT(jump / 199.0, 0.2 * (d.beta_nvc.maxCoeff() - d.beta_nvc.minCoeff()));
  EXPECT_NEAR(std::sqrt((d.beta_nvc.array() - 1.0).square().mean()), c.tau2, 0.05);
}

TEST(Generate, SvcMeanIsOne) {
  // E[beta_svc] = 1: the mean over sites across 100 seeds is within 3 standard errors.
  std::vector<double> means;
  for (std::uint64_t s = 0; s < 100; ++s) {
    DgpConfig c;
    c.n = 500;
    c.seed = 500 + s;
    means.push_back(generate(c).beta_svc.mean());
  }
  double m = 0.0;
  for (double v : means) m += v;
  m /= 100.0;
  double var = 0.0;
  for (double v : means) var += (v - m) * (v - m);
  const double se = std::sqrt(var / 99.0 / 100.0);
  EXPECT_LT(std::abs(m - 1.0), 3.0 * se);
}

TEST(Generate, Validation) {
  DgpConfig c;
  c.n = 49;
  EXPECT_THROW(generate(c), ParameterError);
  c.n = 60;
  c.p = 0;
  EXPECT_THROW(generate(c), ParameterError);
  c.p = 1;
  c.tau1 = -0.1;
  EXPECT_THROW(generate(c), ParameterError);
}

TEST(Metrics, SimpleCases) {
  const std::vector<Eigen::VectorXd> truth{Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(0, 0, 0)};
  EXPECT_EQ(rmse(truth, truth), 0.0);
  EXPECT_EQ(bias(truth, truth), 0.0);
  std::vector<Eigen::VectorXd> shifted = truth;
  for (auto& v : shifted) v.array() += 0.5;
  EXPECT_NEAR(rmse(shifted, truth), 0.5, 1e-15);
  EXPECT_NEAR(bias(shifted, truth), 0.5, 1e-15);
  std::vector<Eigen::VectorXd> anti = truth;
  anti[0] += Eigen::Vector3d(0.7, -0.7, 0.7);
  anti[1] += Eigen::Vector3d(-0.7, 0.7, -0.7);
  EXPECT_NEAR(bias(anti, truth), 0.0, 1e-12);
  EXPECT_THROW(rmse({Eigen::Vector2d(1, 2)}, truth), ParameterError);
  EXPECT_THROW(bias({Eigen::Vector2d(1, 2), Eigen::Vector3d(1, 2, 3)}, truth), ParameterError);
}

TEST(Metrics, MatchBruteForce) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> z;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<Eigen::VectorXd> e, t;
    for (int it = 0; it < 7; ++it) {
      Eigen::VectorXd a(40), b(40);
      for (int i = 0; i < 40; ++i) {
        a(i) = z(rng);
        b(i) = z(rng) + 0.3;
      }
      e.push_back(a);
      t.push_back(b);
    }
    EXPECT_NEAR(rmse(e, t), oracle::brute_rmse(e, t), 1e-12);
    EXPECT_NEAR(bias(e, t), oracle::brute_bias(e, t), 1e-12);
    EXPECT_GE(rmse(e, t), std::abs(bias(e, t)));
  }
}

TEST(Experiment, SingleIterationSingleModel) {
  ExperimentConfig c;
  c.dgp.n = 120;
  c.iterations = 1;
  c.models = {ExperimentModel::LM};
  const ExperimentReport r = run_experiment(c);
  ASSERT_EQ(r.cells.size(), 4u);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(r.cells[k].cls, static_cast<CoefClass>(k));
  for (const auto& cell : r.cells) {
    EXPECT_EQ(cell.fits, 1);
    EXPECT_GE(cell.rmse, std::abs(cell.bias));
    EXPECT_TRUE(std::isnan(cell.se_rmse));
  }
}

TEST(Experiment, AggregatesMatchPerIterationOracle) {
  ExperimentConfig c;
  c.dgp.n = 150;
  c.dgp.seed = 3;
  c.iterations = 3;
  c.models = {ExperimentModel::TrueTypes, ExperimentModel::Simple};
  c.workers = 2;
  const ExperimentReport r = run_experiment(c);
  // Recompute the SVC-class RMSE of the true-types model from scratch.
  std::vector<Eigen::VectorXd> est, truth;
  for (int it = 0; it < 3; ++it) {
    DgpConfig d = c.dgp;
    d.seed = split_seed(c.dgp.seed, static_cast<std::uint64_t>(it));
    const SyntheticData data = generate(d);
    BasisConfig basis = c.basis;
    basis.range = 1.0;
    const PreparedModel m = prepare(data.model_input(), basis);
    const SelectionResult fit = fit_fixed(m, data.true_types(), {}, c.selection);
    const CoefficientTable t = coefficient_table(fit.state, m.ip, m.designs, true);
    est.push_back(t.terms[2].estimate);
    truth.push_back(data.truth(2));
  }
  bool found = false;
  for (const auto& cell : r.cells) {
    if (cell.model != ExperimentModel::TrueTypes || cell.cls != CoefClass::SVC) continue;
    found = true;
    EXPECT_NEAR(cell.rmse, rmse(est, truth), 1e-12);
    EXPECT_NEAR(cell.bias, bias(est, truth), 1e-12);
    EXPECT_EQ(cell.se_rmse, 0.0);
  }
  EXPECT_TRUE(found);
  const ExperimentReport again = run_experiment(c);
  ASSERT_EQ(again.cells.size(), r.cells.size());
  for (std::size_t i = 0; i < r.cells.size(); ++i) EXPECT_EQ(again.cells[i].rmse, r.cells[i].rmse);
}

TEST(Timing, RowsAndValidation) {
  EXPECT_THROW(bench_timing({200}, 1, 20, 2, 1), ParameterError);
  const auto rows = bench_timing({200, 400}, 1, 20, 3, 1);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& row : rows) {
    EXPECT_EQ(row.repeats, 3);
    EXPECT_LE(row.basis_size, 20);
    EXPECT_GT(row.sweep_seconds, 0.0);
    EXPECT_GE(row.total_seconds, row.selection_seconds);
  }
}
