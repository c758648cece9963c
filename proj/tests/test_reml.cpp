#include "oracles.hpp"

#include "samsel/error.hpp"
#include "samsel/reml.hpp"

#include <gtest/gtest.h>

using namespace samsel;

namespace {

std::vector<BlockRef> active_refs(const ModelTheta& theta) {
  std::vector<BlockRef> refs;
  for (std::size_t p = 0; p < theta.blocks.size(); ++p) {
    for (std::size_t b = 0; b < theta.blocks[p].size(); ++b) {
      if (theta.blocks[p][b].active) refs.push_back({p, b});
    }
  }
  return refs;
}

}  // namespace

TEST(Reml, FastMatchesDirectAndMarginalOracle) {
  for (std::uint64_t s = 0; s < 12; ++s) {
    const auto inst = oracle::make_instance(100 + s, s % 2 ? 50 : 120, 1 + static_cast<int>(s % 3), s % 4 == 0);
    const double fast = loglik_fast(inst.theta, inst.ip);
    const double direct = loglik_direct(inst.theta, inst.y, inst.x, inst.designs);
    const double marginal = oracle::marginal_reml(inst.theta, inst.y, inst.x, inst.designs);
    EXPECT_LT(oracle::rel_err(fast, direct), 1e-8) << "seed " << s;
    EXPECT_LT(oracle::rel_err(fast, marginal), 1e-7) << "seed " << s;
  }
}

TEST(Reml, OlsReduction) {
  const auto inst = oracle::make_instance(7, 80, 3);
  const ModelTheta none = ModelTheta::none(inst.ip);
  const Solution s = solve_effects(none, inst.ip);
  const oracle::Ols o = oracle::ols(inst.y, inst.x);
  EXPECT_NEAR(s.loglik, o.loglik, 1e-10 * std::abs(o.loglik));
  for (Eigen::Index j = 0; j < o.b.size(); ++j) EXPECT_NEAR(s.b(j), o.b(j), 1e-10);

  const RemlState st = evaluate_state(inst.ip, none, true);
  const CoefficientTable t = coefficient_table(st, inst.ip, inst.designs);
  ASSERT_EQ(t.terms.size(), 4u);
  for (const auto& tc : t.terms) {
    EXPECT_NEAR(tc.estimate(0), o.b(static_cast<Eigen::Index>(tc.term)), 1e-10);
    EXPECT_NEAR(tc.se(0), o.se(static_cast<Eigen::Index>(tc.term)), 1e-10);
    EXPECT_NEAR(tc.se.maxCoeff() - tc.se.minCoeff(), 0.0, 1e-12);
  }
}

TEST(Reml, ExactFitHasZeroResidual) {
  // y in the column space of X with integer data.
  Eigen::MatrixXd x(6, 2);
  x << 1, 0, 1, 1, 1, 2, 1, 3, 1, 4, 1, 5;
  const Eigen::VectorXd y = x * Eigen::Vector2d(2.0, -1.0);
  std::vector<TermDesign> designs(2);
  const InnerProducts ip = precompute(y, x, designs);
  const Solution s = solve_effects(ModelTheta::none(ip), ip);
  EXPECT_LT(s.resid_norm2, 1e-16 * y.squaredNorm());
  EXPECT_NEAR(s.b(0), 2.0, 1e-12);
  EXPECT_NEAR(s.b(1), -1.0, 1e-12);
}

TEST(Reml, PartitionedUpdateMatchesFullSystem) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    auto inst = oracle::make_instance(300 + s, 90, 2, s % 2 == 0);
    const auto refs = active_refs(inst.theta);
    if (refs.empty()) continue;
    const BlockRef target = refs[s % refs.size()];
    const BlockParams tp = inst.theta.at(target);
    const BlockUpdate up(inst.ip, inst.theta, target);
    const Solution full = solve_effects(inst.theta, inst.ip);
    EXPECT_LT(oracle::rel_err(up.loglik(tp.tau, tp.alpha), full.loglik), 1e-8);
    EXPECT_LT(oracle::rel_err(up.log_det_p(tp.tau, tp.alpha), full.log_det_p), 1e-8);

    const Eigen::VectorXd coef = up.coefficients(tp.tau, tp.alpha);
    Eigen::Index off = 0;
    EXPECT_LT((coef.head(inst.ip.k) - full.b).norm(), 1e-8 * (1.0 + full.b.norm()));
    off += inst.ip.k;
    for (const auto& r : up.others()) {
      const Eigen::VectorXd& u = full.u[r.term][r.block];
      EXPECT_LT((coef.segment(off, u.size()) - u).norm(), 1e-8 * (1.0 + u.norm()));
      off += u.size();
    }
    const Eigen::VectorXd& ut = full.u[target.term][target.block];
    EXPECT_LT((coef.tail(ut.size()) - ut).norm(), 1e-8 * (1.0 + ut.norm()));
  }
}

TEST(Reml, DropEffectMatchesRefit) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    auto inst = oracle::make_instance(500 + s, 70, 3, s % 3 == 0);
    const auto refs = active_refs(inst.theta);
    if (refs.empty()) continue;
    const BlockRef target = refs[(s * 7) % refs.size()];
    ModelTheta without = inst.theta;
    without.at(target) = BlockParams{};
    const double drop = loglik_drop_effect(inst.ip, inst.theta, target);
    EXPECT_LT(oracle::rel_err(drop, oracle::marginal_reml(without, inst.y, inst.x, inst.designs)), 1e-8);
  }
}

TEST(Reml, DropEffectRequiresActiveTarget) {
  auto inst = oracle::make_instance(1, 60, 1);
  ModelTheta t = ModelTheta::none(inst.ip);
  EXPECT_THROW(loglik_drop_effect(inst.ip, t, {0, 0}), ParameterError);
}

TEST(Reml, OptimizeEffectReachesGridMaximum) {
  auto inst = oracle::make_instance(42, 150, 1);
  ModelTheta theta = ModelTheta::none(inst.ip);
  const auto sref = find_block(inst.ip, 0, BlockKind::Spatial);
  ASSERT_TRUE(sref.has_value());
  theta.at(*sref) = {true, 1.0, 1.0};
  const OptimizeResult r = optimize_effect(inst.ip, theta, *sref);

  // Two-stage grid on (log tau, log alpha).
  auto ll = [&](double lt, double la) {
    ModelTheta t = theta;
    t.at(*sref) = {true, std::exp(lt), std::exp(la)};
    return loglik_fast(t, inst.ip);
  };
  double best = -1e300, bt = 0, ba = 0;
  const double t0 = std::log(kTauMin), t1 = std::log(kTauMax), a0 = std::log(kAlphaMin), a1 = std::log(kAlphaMax);
  for (int i = 0; i <= 60; ++i) {
    for (int j = 0; j <= 60; ++j) {
      const double lt = t0 + (t1 - t0) * i / 60.0, la = a0 + (a1 - a0) * j / 60.0;
      const double v = ll(lt, la);
      if (v > best) best = v, bt = lt, ba = la;
    }
  }
  const double st = (t1 - t0) / 60.0, sa = (a1 - a0) / 60.0;
  const double ct = bt, ca = ba;
  for (int i = -30; i <= 30; ++i) {
    for (int j = -30; j <= 30; ++j) {
      const double lt = std::clamp(ct + st * i / 30.0, t0, t1), la = std::clamp(ca + sa * j / 30.0, a0, a1);
      best = std::max(best, ll(lt, la));
    }
  }
  EXPECT_GE(r.loglik, best - 1e-6 * std::max(1.0, std::abs(best)));
  EXPECT_NEAR(r.loglik, ll(std::log(r.params.tau), std::log(r.params.alpha)), 1e-9 * std::abs(r.loglik));
}

TEST(Reml, OptimizeNeverWorseThanStart) {
  auto inst = oracle::make_instance(9, 100, 2);
  for (const auto& ref : active_refs(inst.theta)) {
    const double before = loglik_fast(inst.theta, inst.ip);
    const OptimizeResult r = optimize_effect(inst.ip, inst.theta, ref);
    EXPECT_GE(r.loglik, before - 1e-9 * std::abs(before));
    EXPECT_GE(r.params.tau, kTauMin * (1 - 1e-12));
    EXPECT_LE(r.params.tau, kTauMax * (1 + 1e-12));
    if (inst.ip.layout[ref.term][ref.block].kind == BlockKind::Spatial) {
      EXPECT_GE(r.params.alpha, kAlphaMin * (1 - 1e-12));
      EXPECT_LE(r.params.alpha, kAlphaMax * (1 + 1e-12));
    }
  }
}

TEST(Reml, FitThetaIsCoordinateAscent) {
  auto inst = oracle::make_instance(11, 120, 2);
  const double start = loglik_fast(inst.theta, inst.ip);
  const RemlState st = fit_theta(inst.ip, inst.theta);
  EXPECT_GE(st.loglik_r, start - 1e-9 * std::abs(start));
  EXPECT_NEAR(st.loglik_r, oracle::marginal_reml(st.theta, inst.y, inst.x, inst.designs), 1e-7 * std::abs(st.loglik_r));
  EXPECT_GT(st.sigma2_hat, 0.0);
}

TEST(Reml, CoefficientStandardErrorsMatchDenseOracle) {
  auto inst = oracle::make_instance(21, 80, 1);
  ModelTheta theta = ModelTheta::none(inst.ip);
  theta.set_type(1, inst.ip, EffectType::SNVC, {0.7, 1.5, 0.3});
  const RemlState st = evaluate_state(inst.ip, theta, true);
  const CoefficientTable t = coefficient_table(st, inst.ip, inst.designs);

  // Dense bordered system on N-dimensional data.
  const Eigen::MatrixXd zv = oracle::scaled_random_design(theta, inst.designs);
  Eigen::MatrixXd w(inst.x.rows(), inst.x.cols() + zv.cols());
  w << inst.x, zv;
  Eigen::MatrixXd p = w.transpose() * w;
  p.diagonal().tail(zv.cols()).array() += 1.0;
  const Eigen::MatrixXd pinv = p.inverse();
  const Eigen::VectorXd coef = pinv * (w.transpose() * inst.y);
  const Eigen::Index k = inst.x.cols();
  Eigen::MatrixXd basis_v(inst.x.rows(), zv.cols());
  for (Eigen::Index j = 0; j < zv.cols(); ++j) basis_v.col(j) = zv.col(j).cwiseQuotient(inst.x.col(1));
  std::vector<Eigen::Index> idx{1};
  for (Eigen::Index j = 0; j < zv.cols(); ++j) idx.push_back(k + j);
  const auto& tc = t.terms[1];
  for (Eigen::Index i = 0; i < inst.x.rows(); ++i) {
    Eigen::VectorXd z(static_cast<Eigen::Index>(idx.size()));
    z(0) = 1.0;
    z.tail(zv.cols()) = basis_v.row(i).transpose();
    double est = 0.0, var = 0.0;
    for (std::size_t a = 0; a < idx.size(); ++a) {
      est += z(static_cast<Eigen::Index>(a)) * coef(idx[a]);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        var += z(static_cast<Eigen::Index>(a)) * pinv(idx[a], idx[b]) * z(static_cast<Eigen::Index>(b));
      }
    }
    EXPECT_NEAR(tc.estimate(i), est, 1e-8 * (1 + std::abs(est)));
    EXPECT_NEAR(tc.se(i), std::sqrt(st.sigma2_hat * var), 1e-8);
  }
}

TEST(Reml, NonConvergedTableNeedsOptIn) {
  auto inst = oracle::make_instance(3, 60, 1);
  const RemlState st = evaluate_state(inst.ip, ModelTheta::none(inst.ip), false);
  EXPECT_THROW(coefficient_table(st, inst.ip, inst.designs), ParameterError);
  EXPECT_NO_THROW(coefficient_table(st, inst.ip, inst.designs, true));
}

TEST(Reml, PrecomputeValidatesShapes) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(3, 1);
  EXPECT_THROW(precompute(Eigen::VectorXd::Ones(4), x, {}), InputError);
  EXPECT_THROW(precompute(Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Ones(1, 1), {}), InputError);
}

TEST(Reml, PrecomputeMatchesDenseProducts) {
  const auto inst = oracle::make_instance(31, 70, 2, true);
  const auto& ip = inst.ip;
  EXPECT_LT((ip.m00 - inst.x.transpose() * inst.x).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NEAR(ip.myy, inst.y.squaredNorm(), 1e-10 * ip.myy);
  for (std::size_t p = 0; p < inst.designs.size(); ++p) {
    const Eigen::MatrixXd& zp = inst.designs[p].columns;
    EXPECT_LT((ip.m0p[p] - inst.x.transpose() * zp).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((ip.vp[p] - zp.transpose() * inst.y).cwiseAbs().maxCoeff(), 1e-10);
    for (std::size_t q = 0; q < inst.designs.size(); ++q) {
      const Eigen::MatrixXd dense = zp.transpose() * inst.designs[q].columns;
      EXPECT_LT((ip.mpq[p][q] - dense).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_EQ(ip.mpq[p][q], ip.mpq[q][p].transpose());
    }
    if (ip.mpq[p][p].size() > 0) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ip.mpq[p][p]);
      EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
    }
  }
  Eigen::MatrixXd x(2, 1);
  x << 1, 1;
  EXPECT_DOUBLE_EQ(precompute(Eigen::Vector2d(1, 2), x, {TermDesign{}}).myy, 5.0);
}

TEST(Reml, ResidualNormMatchesDenseResidual) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto inst = oracle::make_instance(40 + s, 90, 2, s % 2 == 0);
    const Solution sol = solve_effects(inst.theta, inst.ip);
    Eigen::VectorXd fitted = inst.x * sol.b;
    double penalty = 0.0;
    for (std::size_t p = 0; p < inst.designs.size(); ++p) {
      for (std::size_t b = 0; b < inst.designs[p].blocks.size(); ++b) {
        const auto& bp = inst.theta.blocks[p][b];
        if (!bp.active) continue;
        const auto& blk = inst.designs[p].blocks[b];
        fitted += inst.designs[p].columns.middleCols(blk.offset, blk.width) *
                  blk.v(bp.tau, bp.alpha).cwiseProduct(sol.u[p][b]);
        penalty += sol.u[p][b].squaredNorm();
      }
    }
    const double rss = (inst.y - fitted).squaredNorm();
    EXPECT_NEAR(sol.resid_norm2, rss, 1e-7 * (1.0 + rss)) << "seed " << s;
    EXPECT_NEAR(sol.penalty, penalty, 1e-7 * (1.0 + penalty)) << "seed " << s;
    EXPECT_GT(sol.sigma2, 0.0);
  }
}

TEST(Reml, SolutionIsLinearInY) {
  auto inst = oracle::make_instance(50, 80, 2);
  const Solution a = solve_effects(inst.theta, inst.ip);
  const InnerProducts ip2 = precompute(2.0 * inst.y, inst.x, inst.designs);
  const Solution b = solve_effects(inst.theta, ip2);
  EXPECT_LT((b.b - 2.0 * a.b).norm(), 1e-9 * (1.0 + a.b.norm()));
  for (std::size_t p = 0; p < a.u.size(); ++p) {
    for (std::size_t k = 0; k < a.u[p].size(); ++k) {
      if (a.u[p][k].size() == 0) continue;
      EXPECT_LT((b.u[p][k] - 2.0 * a.u[p][k]).norm(), 1e-9 * (1.0 + a.u[p][k].norm()));
    }
  }
}

TEST(Reml, SaturatedFixedEffectsRejected) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Identity(3, 3);
  std::vector<TermDesign> designs(3);
  EXPECT_THROW(
      {
        const InnerProducts ip = precompute(Eigen::Vector3d(1, 2, 3), x, designs);
        loglik_fast(ModelTheta::none(ip), ip);
      },
      Error);
  EXPECT_THROW(loglik_direct(ModelTheta{}, Eigen::Vector3d(1, 2, 3), x, designs), Error);
}

TEST(Reml, TermOrderDoesNotChangeLikelihood) {
  const auto inst = oracle::make_instance(60, 100, 3, true);
  std::vector<TermDesign> reversed(inst.designs.rbegin(), inst.designs.rend());
  std::vector<Eigen::Index> fixed;
  const auto terms = static_cast<Eigen::Index>(inst.designs.size());
  for (Eigen::Index t = terms - 1; t >= 0; --t) fixed.push_back(t < inst.x.cols() ? t : -1);
  const InnerProducts ip = precompute(inst.y, inst.x, reversed, fixed);
  ModelTheta theta = inst.theta;
  std::reverse(theta.blocks.begin(), theta.blocks.end());
  const double a = loglik_fast(inst.theta, inst.ip);
  const double b = loglik_fast(theta, ip);
  EXPECT_NEAR(a, b, 1e-10 * std::max(1.0, std::abs(a)));
}

TEST(Reml, ReoptimizingAnOptimalBlockIsAFixedPoint) {
  auto inst = oracle::make_instance(70, 150, 1);
  inst.theta = ModelTheta::none(inst.ip);
  inst.theta.set_type(1, inst.ip, EffectType::SVC, {0.5, 1.0, 0.0});
  const BlockRef ref = *find_block(inst.ip, 1, BlockKind::Spatial);
  const OptimizeResult first = optimize_effect(inst.ip, inst.theta, ref);
  inst.theta.at(ref) = first.params;
  const OptimizeResult second = optimize_effect(inst.ip, inst.theta, ref);
  EXPECT_LT(std::abs(second.loglik - first.loglik), 1e-6);
}

TEST(Reml, DroppingNegligibleBlockBarelyMoves) {
  auto inst = oracle::make_instance(71, 150, 2);
  inst.theta = ModelTheta::none(inst.ip);
  inst.theta.set_type(1, inst.ip, EffectType::NVC, {0.0, 1.0, 1e-6});
  inst.theta.set_type(2, inst.ip, EffectType::SVC, {0.8, 1.0, 0.0});
  const BlockRef ref = *find_block(inst.ip, 1, BlockKind::NonSpatial);
  const double with = loglik_fast(inst.theta, inst.ip);
  EXPECT_LT(std::abs(loglik_drop_effect(inst.ip, inst.theta, ref) - with), 1e-6);
}

TEST(Reml, DroppingTheOnlyBlockGivesOls) {
  auto inst = oracle::make_instance(72, 120, 1);
  inst.theta = ModelTheta::none(inst.ip);
  inst.theta.set_type(1, inst.ip, EffectType::SVC, {2.0, 1.5, 0.0});
  const BlockRef ref = *find_block(inst.ip, 1, BlockKind::Spatial);
  const oracle::Ols o = oracle::ols(inst.y, inst.x);
  EXPECT_NEAR(loglik_drop_effect(inst.ip, inst.theta, ref), o.loglik, 1e-9 * std::abs(o.loglik));
}

TEST(Reml, SvcWithZeroRandomPartIsConstant) {
  auto inst = oracle::make_instance(73, 60, 1);
  inst.theta = ModelTheta::none(inst.ip);
  inst.theta.set_type(0, inst.ip, EffectType::SVC, {0.0, 1.0, 0.0});
  const RemlState st = evaluate_state(inst.ip, inst.theta, true);
  const CoefficientTable t = coefficient_table(st, inst.ip, inst.designs);
  EXPECT_EQ(t.terms[0].estimate.maxCoeff(), t.terms[0].estimate.minCoeff());
  for (const auto& tc : t.terms) EXPECT_GT(tc.se.minCoeff(), 0.0);
}
