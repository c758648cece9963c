#include "oracles.hpp"

#include "samsel/error.hpp"
#include "samsel/io.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace samsel;

namespace {

CsvTable parse(const std::string& text) {
  std::istringstream in(text);
  return read_csv(in, "test.csv");
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

// Panel of `sites` x `quarters` rows: spatially varying intercept and slope,
// and a quarter effect.
CsvTable panel(std::uint64_t seed, int sites, int quarters) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> east(sites), north(sites);
  for (int s = 0; s < sites; ++s) {
    east[s] = u(rng);
    north[s] = u(rng);
  }
  std::vector<double> quarter_effect(quarters);
  for (auto& q : quarter_effect) q = 0.5 * z(rng);
  CsvTable t;
  t.header = {"id", "east", "north", "quarter", "y", "x"};
  for (int q = 0; q < quarters; ++q) {
    for (int s = 0; s < sites; ++s) {
      const double x = z(rng);
      const double b0 = 2.0 + std::sin(4.0 * east[s]) + north[s];
      const double b1 = 1.0 + std::cos(3.0 * north[s]);
      const double y = b0 + b1 * x + quarter_effect[q] + 0.5 * z(rng);
      t.rows.push_back({"s" + std::to_string(s), format_number(east[s]), format_number(north[s]),
                        "q" + std::to_string(q), format_number(y), format_number(x)});
    }
  }
  return t;
}

FitConfig panel_config() {
  FitConfig c;
  c.schema.covariates = {"x"};
  c.schema.groups = {"quarter"};
  c.schema.period = "quarter";
  c.covariates = {CovariateConfig{"x"}};
  c.basis.l_max = 40;
  c.mode = SelectMode::Simple;
  return c;
}

}  // namespace

TEST(Csv, ReadsQuotesAndCrlf) {
  const CsvTable t = parse("a,b,c\r\n1,\"x,y\",\"he said \"\"hi\"\"\"\r\n2,,3\r\n");
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][1], "x,y");
  EXPECT_EQ(t.rows[0][2], "he said \"hi\"");
  EXPECT_EQ(t.rows[1][1], "");
  std::ostringstream out;
  write_csv(out, t);
  const CsvTable back = parse(out.str());
  EXPECT_EQ(back.rows, t.rows);
}

TEST(Csv, Errors) {
  EXPECT_NE(error_of([] { parse("a,b\n1,2\n3\n"); }).find("row 2"), std::string::npos);
  EXPECT_THROW(parse("a,a\n1,2\n"), InputError);
  EXPECT_THROW(parse("a\n\"open\n"), InputError);
  EXPECT_THROW(parse(""), InputError);
  EXPECT_THROW(parse("a\n1\n").column("b"), InputError);
}

TEST(Ingest, WellFormedFile) {
  DatasetSchema s;
  s.covariates = {"x"};
  const Dataset d = ingest_table(parse("id,east,north,y,x\na,0,0,1,2\nb,1,0,2,3\nc,0,1,3,5\n"), s);
  EXPECT_EQ(d.size(), 3);
  EXPECT_EQ(d.covariates(2, 0), 5.0);
  EXPECT_EQ(d.site_id[1], "b");
}

TEST(Ingest, ErrorsNameRowAndColumn) {
  DatasetSchema s;
  s.covariates = {"x"};
  const std::string missing = error_of([&] { ingest_table(parse("id,east,north,y,x\na,0,0,1,2\nb,1,0,,3\n"), s); });
  EXPECT_NE(missing.find("row 2"), std::string::npos) << missing;
  EXPECT_NE(missing.find("'y'"), std::string::npos) << missing;
  const std::string text = error_of([&] { ingest_table(parse("id,east,north,y,x\na,0,0,1,two\n"), s); });
  EXPECT_NE(text.find("row 1, column 'x'"), std::string::npos) << text;
  EXPECT_THROW(ingest_table(parse("id,east,north,y,x\na,0,0,1,inf\n"), s), InputError);
  EXPECT_THROW(ingest_table(parse("id,east,north,y\na,0,0,1\n"), s), InputError);
  const std::string dup = error_of([&] { ingest_table(parse("id,east,north,y,x\na,0,0,1,2\na,0,0,1,2\n"), s); });
  EXPECT_NE(dup.find("duplicate site id"), std::string::npos) << dup;
  EXPECT_NE(dup.find("row 2"), std::string::npos) << dup;
  DatasetSchema none = s;
  none.covariates.clear();
  EXPECT_THROW(ingest_table(parse("id,east,north,y,x\na,0,0,1,2\n"), none), InputError);

  // Repeated ids are fine across periods but not within one.
  s.period = "t";
  EXPECT_NO_THROW(ingest_table(parse("id,east,north,y,x,t\na,0,0,1,2,1\na,0,0,1,2,2\n"), s));
  EXPECT_THROW(ingest_table(parse("id,east,north,y,x,t\na,0,0,1,2,1\na,0,0,1,2,1\n"), s), InputError);
}

TEST(Ingest, ExportRoundTripIsLossless) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  CsvTable t;
  t.header = {"id", "east", "north", "y", "x1", "x2", "g"};
  for (int i = 0; i < 50; ++i) {
    t.rows.push_back({"r" + std::to_string(i), format_number(z(rng)), format_number(z(rng) * 1e-7),
                      format_number(z(rng) * 1e12), format_number(z(rng)), format_number(1.0 / 3.0 + z(rng)),
                      i % 2 ? "a" : "b"});
  }
  DatasetSchema s;
  s.covariates = {"x1", "x2"};
  s.groups = {"g"};
  const Dataset a = ingest_table(t, s);
  std::ostringstream out;
  export_csv(out, a);
  const Dataset b = ingest_table(parse(out.str()), s);
  EXPECT_EQ(a.east, b.east);
  EXPECT_EQ(a.north, b.north);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.covariates, b.covariates);
  EXPECT_EQ(a.groups, b.groups);
  EXPECT_EQ(format_number(0.1), "0.10000000000000001");
  EXPECT_EQ(std::stod(format_number(M_PI)), M_PI);
}

TEST(Lag, ShiftsWithinSite) {
  const CsvTable t = parse("id,t,v\na,2,20\nb,1,5\na,1,10\na,10,30\nb,2,6\n");
  const CsvTable l = add_lag(t, "v", "t", "id");
  EXPECT_EQ(l.header.back(), "v_lag");
  // Periods sort numerically, so 10 follows 2. First periods are dropped.
  ASSERT_EQ(l.rows.size(), 3u);
  EXPECT_EQ(l.rows[0], (std::vector<std::string>{"a", "2", "20", "10"}));
  EXPECT_EQ(l.rows[1], (std::vector<std::string>{"a", "10", "30", "20"}));
  EXPECT_EQ(l.rows[2], (std::vector<std::string>{"b", "2", "6", "5"}));
  EXPECT_THROW(add_lag(parse("id,t,v\na,1,1\na,1,2\n"), "v", "t", "id"), InputError);
}

TEST(Config, ParsesSections) {
  std::istringstream in(R"(# comment
[data]
path = "d.csv"
id = "site"
period = "quarter"
groups = ["quarter"]

[basis]
range = 2.5
l_max = 50
nvc_kind = "polynomial"
nvc_size = 4

[model]
mode = "mc"
cost = "aic"
replicates = 7
seed = 42
intercept = ["constant"]

[covariate.x1]
types = ["constant", "nvc"]

[covariate.x2]

[output]
dir = "out"
)");
  const FitConfig c = parse_config(in, "/base");
  EXPECT_EQ(c.data_path, "/base/d.csv");
  EXPECT_EQ(c.schema.id, "site");
  EXPECT_EQ(c.schema.groups, std::vector<std::string>{"quarter"});
  EXPECT_EQ(*c.basis.range, 2.5);
  EXPECT_EQ(c.basis.l_max, 50u);
  EXPECT_EQ(c.basis.nvc_kind, NvcKind::Polynomial);
  EXPECT_EQ(c.mode, SelectMode::MC);
  EXPECT_EQ(c.selection.cost, CostKind::AIC);
  EXPECT_EQ(c.mc.replicates, 7);
  EXPECT_EQ(c.seed, 42u);
  ASSERT_EQ(c.covariates.size(), 2u);
  EXPECT_EQ(c.covariates[0].types, (std::vector<EffectType>{EffectType::Constant, EffectType::NVC}));
  EXPECT_EQ(c.covariates[1].types.size(), 4u);
  EXPECT_EQ(c.intercept_types, std::vector<EffectType>{EffectType::Constant});
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, Rejections) {
  auto bad = [](const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
  };
  EXPECT_THROW(bad("[data]\nfoo = 1\n"), InputError);
  EXPECT_THROW(bad("[nope]\n"), InputError);
  EXPECT_THROW(bad("[model]\nmode = \"exhaustive\"\n"), ParameterError);
  EXPECT_THROW(bad("[basis]\nl_max = 2.5\n"), InputError);
  EXPECT_THROW(bad("[covariate.x]\ntypes = [\"gwr\"]\n"), SpecError);
  FitConfig c = bad("[covariate.x]\n[model]\ntol_accept = 0\n");
  EXPECT_THROW(c.validate(), ParameterError);
  c = bad("[covariate.x]\n[model]\nmode = \"mc\"\nreplicates = 0\n");
  EXPECT_THROW(c.validate(), ParameterError);
  c = bad("[covariate.x]\n[model]\nintercept = [\"constant\", \"nvc\"]\n");
  EXPECT_THROW(c.validate(), SpecError);
}

TEST(Fit, ModeNoneOnConstantSpecIsOls) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  CsvTable t;
  t.header = {"id", "east", "north", "y", "a", "b"};
  Eigen::MatrixXd x(120, 3);
  Eigen::VectorXd y(120);
  for (int i = 0; i < 120; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = z(rng);
    x(i, 2) = z(rng);
    y(i) = 0.5 + 2.0 * x(i, 1) - x(i, 2) + z(rng);
    t.rows.push_back({"s" + std::to_string(i), format_number(z(rng)), format_number(z(rng)), format_number(y(i)),
                      format_number(x(i, 1)), format_number(x(i, 2))});
  }
  FitConfig c;
  c.schema.covariates = {"a", "b"};
  c.covariates = {{"a", {EffectType::Constant}}, {"b", {EffectType::Constant}}};
  c.intercept_types = {EffectType::Constant};
  c.mode = SelectMode::None;
  const FitRun run = run_fit(ingest_table(t, c.schema), c);
  const oracle::Ols o = oracle::ols(y, x);
  ASSERT_EQ(run.table.terms.size(), 3u);
  for (std::size_t p = 0; p < 3; ++p) {
    const auto j = static_cast<Eigen::Index>(p);
    EXPECT_NEAR(run.table.terms[p].estimate(0), o.b(j), 1e-10);
    EXPECT_NEAR(run.table.terms[p].se(0), o.se(j), 1e-10);
  }
  EXPECT_NEAR(run.saved.loglik, o.loglik, 1e-10 * std::abs(o.loglik));
  EXPECT_TRUE(run.model.moran.empty());
}

TEST(Fit, SelectReportsEveryTermAndModelRoundTrips) {
  const CsvTable t = panel(3, 60, 4);
  FitConfig c = panel_config();
  const FitRun run = run_fit(ingest_table(t, c.schema), c);
  std::ostringstream report;
  write_report_json(report, run);
  for (const char* name : {"\"(Intercept)\"", "\"x\"", "\"quarter\""}) {
    EXPECT_NE(report.str().find(name), std::string::npos) << name;
  }
  EXPECT_EQ(run.result.types.size(), 3u);

  std::ostringstream a;
  write_model_json(a, run.saved);
  std::istringstream in(a.str());
  const SavedModel back = read_model_json(in);
  std::ostringstream b;
  write_model_json(b, back);
  EXPECT_EQ(a.str(), b.str());

  std::istringstream broken("{\"format\": \"samsel-model\"}");
  EXPECT_THROW(read_model_json(broken), InputError);
  std::istringstream junk("not json");
  EXPECT_THROW(read_model_json(junk), InputError);

  std::ostringstream coef;
  write_coefficients_csv(coef, run);
  const CsvTable ct = parse(coef.str());
  EXPECT_EQ(ct.rows.size(), 240u);
  EXPECT_TRUE(ct.has_column("x_est") && ct.has_column("x_se") && ct.has_column("x_t"));
}

TEST(Predict, IdentityRequestReproducesFittedValues) {
  const CsvTable t = panel(4, 50, 4);
  const FitConfig c = panel_config();
  FitRun run = run_fit(ingest_table(t, c.schema), c);
  const PredictionRequest req = read_request(t, run.saved);
  const Prediction pred = predict(run.saved, req);

  const Dataset d = ingest_table(t, c.schema);
  Eigen::VectorXd fitted = run.table.terms[0].estimate + run.table.terms[1].estimate.cwiseProduct(d.covariates.col(0));
  const std::size_t gterm = 2;
  if (run.result.included[gterm]) {
    const Eigen::VectorXd eff = group_effects(run.result.state, gterm);
    for (Eigen::Index i = 0; i < d.size(); ++i) fitted(i) += eff(run.model.groups[0].membership[static_cast<std::size_t>(i)]);
  }
  EXPECT_LT((pred.y_hat - fitted).cwiseAbs().maxCoeff(), 1e-10);
  for (int u : pred.unseen) EXPECT_EQ(u, 0);

  CsvTable unknown = t;
  unknown.rows[3][0] = "nowhere";
  EXPECT_THROW(predict(run.saved, read_request(unknown, run.saved)), InputError);
}

TEST(Predict, ZeroCovariatesGiveGroupEffectsOnly) {
  const CsvTable t = panel(6, 50, 8);
  const FitConfig c = panel_config();
  FitRun run = run_fit(ingest_table(t, c.schema), c);
  ASSERT_TRUE(run.saved.groups[0].included);
  SavedModel m = run.saved;
  m.terms[0].b = 0.0;
  m.terms[0].spatial_weights.resize(0);
  CsvTable req = t;
  for (auto& r : req.rows) r[5] = "0";
  req.rows[0][3] = "q9";  // a level not seen in training
  const Prediction p = predict(m, read_request(req, m));
  const SavedGroup& g = m.groups[0];
  for (std::size_t i = 0; i < req.rows.size(); ++i) {
    const auto level = std::find(g.levels.begin(), g.levels.end(), req.rows[i][3]);
    const double expect = level == g.levels.end() ? 0.0 : g.effects(level - g.levels.begin());
    EXPECT_NEAR(p.y_hat(static_cast<Eigen::Index>(i)), expect, 1e-12);
  }
  EXPECT_EQ(p.unseen[0], 1);
  EXPECT_EQ(p.unseen[1], 0);
}

TEST(Predict, HeldOutQuarterBeatsInterceptOnly) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const CsvTable all = panel(100 + seed, 80, 9);
    CsvTable train, test;
    train.header = test.header = all.header;
    for (const auto& r : all.rows) (r[3] == "q8" ? test : train).rows.push_back(r);
    const FitConfig c = panel_config();
    const FitRun run = run_fit(ingest_table(train, c.schema), c);
    const Prediction p = predict(run.saved, read_request(test, run.saved));
    double mean = 0.0;
    for (const auto& r : train.rows) mean += std::stod(r[4]);
    mean /= static_cast<double>(train.rows.size());
    double model_sq = 0.0, base_sq = 0.0;
    for (std::size_t i = 0; i < test.rows.size(); ++i) {
      const double y = std::stod(test.rows[i][4]);
      model_sq += std::pow(y - p.y_hat(static_cast<Eigen::Index>(i)), 2);
      base_sq += std::pow(y - mean, 2);
    }
    if (model_sq < base_sq) ++wins;
  }
  EXPECT_GE(wins, 27);
}

TEST(SimOutput, ExperimentCsvColumns) {
  ExperimentConfig c;
  c.dgp.n = 100;
  c.iterations = 2;
  c.models = {ExperimentModel::LM, ExperimentModel::Simple};
  const ExperimentReport r = run_experiment(c);
  std::ostringstream out;
  write_experiment_csv(out, r);
  const CsvTable t = parse(out.str());
  EXPECT_EQ(t.header, (std::vector<std::string>{"model", "class", "metric", "value"}));
  std::set<std::string> metrics;
  for (const auto& row : t.rows) metrics.insert(row[2]);
  for (const char* m : {"rmse", "bias", "se_rmse", "se_bias", "fits", "failures"}) EXPECT_TRUE(metrics.count(m)) << m;
  std::ostringstream timing;
  write_timing_csv(timing, bench_timing({120}, 1, 10, 3, 1));
  const CsvTable tt = parse(timing.str());
  EXPECT_TRUE(tt.has_column("precompute_seconds") && tt.has_column("selection_seconds"));
}
