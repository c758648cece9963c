#include "samsel/reml.hpp"

#include "samsel/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace samsel {

namespace {

struct SpdFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double log_det = 0.0;
  bool jittered = false;
};

// Cholesky with a single jitter retry of 1e-10 * trace.
SpdFactor factor_spd(Eigen::MatrixXd a, const char* what) {
  SpdFactor f;
  f.llt.compute(a);
  if (f.llt.info() != Eigen::Success) {
    const double jitter = 1e-10 * std::abs(a.trace());
    a.diagonal().array() += jitter;
    f.llt.compute(a);
    f.jittered = true;
    if (f.llt.info() != Eigen::Success || !(jitter > 0.0)) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
      std::ostringstream msg;
      msg << what << " is numerically singular (eigenvalue range " << es.eigenvalues().minCoeff() << " .. "
          << es.eigenvalues().maxCoeff() << ")";
      throw NumericalError(msg.str());
    }
  }
  f.log_det = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();
  return f;
}

long double dot_ld(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  long double s = 0.0L;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += static_cast<long double>(a(i)) * b(i);
  return s;
}

// r - A x, accumulated in extended precision for iterative refinement.
Eigen::VectorXd residual_ld(const Eigen::MatrixXd& a, const Eigen::VectorXd& x, const Eigen::VectorXd& r) {
  Eigen::VectorXd out(r.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    long double acc = r(i);
    for (Eigen::Index j = 0; j < x.size(); ++j) acc -= static_cast<long double>(a(i, j)) * x(j);
    out(i) = static_cast<double>(acc);
  }
  return out;
}

// Columns [fixed | listed blocks] and their offsets.
struct Layout {
  std::vector<BlockRef> refs;
  std::vector<Eigen::Index> offsets;
  Eigen::Index dim = 0;
};

Layout make_layout(const InnerProducts& ip, const std::vector<BlockRef>& refs) {
  Layout l;
  l.refs = refs;
  l.dim = ip.k;
  for (const auto& r : refs) {
    l.offsets.push_back(l.dim);
    l.dim += ip.layout[r.term][r.block].width;
  }
  return l;
}

std::vector<BlockRef> active_blocks(const ModelTheta& theta, bool positive_only, const BlockRef* skip = nullptr) {
  std::vector<BlockRef> refs;
  for (std::size_t p = 0; p < theta.blocks.size(); ++p) {
    for (std::size_t b = 0; b < theta.blocks[p].size(); ++b) {
      const auto& bp = theta.blocks[p][b];
      const BlockRef r{p, b};
      if (skip && r == *skip) continue;
      if (bp.active && (!positive_only || bp.tau > 0.0)) refs.push_back(r);
    }
  }
  return refs;
}

const Eigen::MatrixXd& cross(const InnerProducts& ip, std::size_t p, std::size_t q) { return ip.mpq[p][q]; }

Eigen::MatrixXd gather_gram(const InnerProducts& ip, const Layout& l) {
  Eigen::MatrixXd g(l.dim, l.dim);
  g.topLeftCorner(ip.k, ip.k) = ip.m00;
  for (std::size_t a = 0; a < l.refs.size(); ++a) {
    const auto& ra = l.refs[a];
    const auto& ba = ip.layout[ra.term][ra.block];
    g.block(0, l.offsets[a], ip.k, ba.width) = ip.m0p[ra.term].middleCols(ba.offset, ba.width);
    g.block(l.offsets[a], 0, ba.width, ip.k) = g.block(0, l.offsets[a], ip.k, ba.width).transpose();
    for (std::size_t b = a; b < l.refs.size(); ++b) {
      const auto& rb = l.refs[b];
      const auto& bb = ip.layout[rb.term][rb.block];
      g.block(l.offsets[a], l.offsets[b], ba.width, bb.width) =
          cross(ip, ra.term, rb.term).block(ba.offset, bb.offset, ba.width, bb.width);
      if (b != a) {
        g.block(l.offsets[b], l.offsets[a], bb.width, ba.width) =
            g.block(l.offsets[a], l.offsets[b], ba.width, bb.width).transpose();
      }
    }
  }
  return g;
}

Eigen::VectorXd gather_rhs(const InnerProducts& ip, const Layout& l) {
  Eigen::VectorXd m(l.dim);
  m.head(ip.k) = ip.v0;
  for (std::size_t a = 0; a < l.refs.size(); ++a) {
    const auto& ba = ip.layout[l.refs[a].term][l.refs[a].block];
    m.segment(l.offsets[a], ba.width) = ip.vp[l.refs[a].term].segment(ba.offset, ba.width);
  }
  return m;
}

// Rows of the cross Gram between a layout and one target block.
Eigen::MatrixXd gather_cross(const InnerProducts& ip, const Layout& l, BlockRef t) {
  const auto& bt = ip.layout[t.term][t.block];
  Eigen::MatrixXd c(l.dim, bt.width);
  c.topRows(ip.k) = ip.m0p[t.term].middleCols(bt.offset, bt.width);
  for (std::size_t a = 0; a < l.refs.size(); ++a) {
    const auto& ra = l.refs[a];
    const auto& ba = ip.layout[ra.term][ra.block];
    c.middleRows(l.offsets[a], ba.width) = cross(ip, ra.term, t.term).block(ba.offset, bt.offset, ba.width, bt.width);
  }
  return c;
}

Eigen::VectorXd layout_scale(const InnerProducts& ip, const ModelTheta& theta, const Layout& l) {
  Eigen::VectorXd d = Eigen::VectorXd::Ones(l.dim);
  for (std::size_t a = 0; a < l.refs.size(); ++a) {
    const auto& r = l.refs[a];
    const auto& bp = theta.at(r);
    const auto& blk = ip.layout[r.term][r.block];
    d.segment(l.offsets[a], blk.width) = blk.v(bp.tau, bp.alpha);
  }
  return d;
}

void check_theta(const ModelTheta& theta, const InnerProducts& ip) {
  if (theta.blocks.size() != ip.terms()) throw ParameterError("variance parameters do not match the term layout");
  for (std::size_t p = 0; p < ip.terms(); ++p) {
    if (theta.blocks[p].size() != ip.layout[p].size()) {
      throw ParameterError("variance parameters do not match the block layout of term " + std::to_string(p));
    }
    for (std::size_t b = 0; b < theta.blocks[p].size(); ++b) {
      const auto& bp = theta.blocks[p][b];
      if (!bp.active) continue;
      if (!(bp.tau >= 0.0) || !std::isfinite(bp.tau)) throw ParameterError("tau must be finite and non-negative");
      if (ip.layout[p][b].kind == BlockKind::Spatial && !(bp.alpha > 0.0)) {
        throw ParameterError("alpha must be positive");
      }
    }
  }
}

}  // namespace

InnerProducts precompute(const Eigen::VectorXd& y, const Eigen::MatrixXd& x, const std::vector<TermDesign>& designs,
                         std::vector<Eigen::Index> fixed_column) {
  const Eigen::Index n = y.size();
  const Eigen::Index k = x.cols();
  if (k < 1) throw InputError("at least one fixed-effect column is required");
  if (x.rows() != n) throw InputError("X rows do not match the response length");
  if (n <= k) throw InputError("sample size must exceed the number of fixed-effect columns");
  if (!y.allFinite() || !x.allFinite()) throw InputError("response and covariates must be finite");
  Eigen::Index total = k;
  for (const auto& d : designs) {
    if (d.width() > 0 && d.columns.rows() != n) throw InputError("term design rows do not match the response length");
    if (!d.columns.allFinite()) throw InputError("term design contains non-finite values");
    total += d.width();
  }
  if (fixed_column.empty()) {
    for (std::size_t p = 0; p < designs.size(); ++p) {
      fixed_column.push_back(static_cast<Eigen::Index>(p) < k ? static_cast<Eigen::Index>(p) : -1);
    }
  }
  if (fixed_column.size() != designs.size()) throw InputError("fixed column map does not match the designs");

  Eigen::MatrixXd z(n, total);
  z.leftCols(k) = x;
  std::vector<Eigen::Index> start;
  Eigen::Index off = k;
  for (const auto& d : designs) {
    start.push_back(off);
    if (d.width() > 0) z.middleCols(off, d.width()) = d.columns;
    off += d.width();
  }
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(total, total);
  g.selfadjointView<Eigen::Lower>().rankUpdate(z.transpose());
  g.triangularView<Eigen::StrictlyUpper>() = g.transpose();
  const Eigen::VectorXd zy = z.transpose() * y;

  InnerProducts ip;
  ip.n = n;
  ip.k = k;
  ip.m00 = g.topLeftCorner(k, k);
  ip.v0 = zy.head(k);
  ip.myy = static_cast<double>(dot_ld(y, y));
  ip.fixed_column = std::move(fixed_column);
  const std::size_t terms = designs.size();
  ip.mpq.assign(terms, std::vector<Eigen::MatrixXd>(terms));
  for (std::size_t p = 0; p < terms; ++p) {
    const Eigen::Index wp = designs[p].width();
    ip.layout.push_back(designs[p].blocks);
    ip.m0p.push_back(g.block(0, start[p], k, wp));
    ip.vp.push_back(zy.segment(start[p], wp));
    for (std::size_t q = 0; q < terms; ++q) {
      ip.mpq[p][q] = g.block(start[p], start[q], wp, designs[q].width());
    }
  }
  return ip;
}

ModelTheta ModelTheta::none(const InnerProducts& ip) {
  ModelTheta t;
  for (const auto& blocks : ip.layout) t.blocks.emplace_back(blocks.size());
  return t;
}

std::optional<BlockRef> find_block(const InnerProducts& ip, std::size_t term, BlockKind kind) {
  for (std::size_t b = 0; b < ip.layout[term].size(); ++b) {
    if (ip.layout[term][b].kind == kind) return BlockRef{term, b};
  }
  return std::nullopt;
}

EffectType ModelTheta::type(std::size_t term, const InnerProducts& ip) const {
  bool spatial = false;
  bool nonspatial = false;
  for (std::size_t b = 0; b < blocks[term].size(); ++b) {
    if (!blocks[term][b].active) continue;
    if (ip.layout[term][b].kind == BlockKind::Spatial) spatial = true;
    if (ip.layout[term][b].kind == BlockKind::NonSpatial) nonspatial = true;
  }
  return compose(spatial, nonspatial);
}

VarianceParams ModelTheta::params(std::size_t term, const InnerProducts& ip) const {
  VarianceParams v;
  for (std::size_t b = 0; b < blocks[term].size(); ++b) {
    const auto& bp = blocks[term][b];
    if (!bp.active) continue;
    if (ip.layout[term][b].kind == BlockKind::Spatial) {
      v.tau_s = bp.tau;
      v.alpha = bp.alpha;
    } else {
      v.tau_n = bp.tau;
    }
  }
  return v;
}

void ModelTheta::set_type(std::size_t term, const InnerProducts& ip, EffectType type, const VarianceParams& params) {
  bool spatial_done = !has_spatial(type);
  bool nonspatial_done = !has_nonspatial(type);
  for (std::size_t b = 0; b < blocks[term].size(); ++b) {
    auto& bp = blocks[term][b];
    bp = BlockParams{};
    const auto kind = ip.layout[term][b].kind;
    if (kind == BlockKind::Spatial && has_spatial(type)) {
      bp = {true, params.tau_s, params.alpha};
      spatial_done = true;
    } else if (kind == BlockKind::NonSpatial && has_nonspatial(type)) {
      bp = {true, params.tau_n, 1.0};
      nonspatial_done = true;
    }
  }
  if (!spatial_done || !nonspatial_done) {
    throw SpecError("term " + std::to_string(term) + " has no design block for type " + std::string(to_string(type)));
  }
}

double restricted_loglik(double log_det_p, double d, Eigen::Index n, Eigen::Index k) {
  const double dof = static_cast<double>(n - k);
  return -0.5 * log_det_p - 0.5 * dof * (1.0 + std::log(2.0 * std::numbers::pi * d / dof));
}

Solution solve_effects(const ModelTheta& theta, const InnerProducts& ip) {
  check_theta(theta, ip);
  const Layout l = make_layout(ip, active_blocks(theta, false));
  const Eigen::MatrixXd g = gather_gram(ip, l);
  const Eigen::VectorXd m = gather_rhs(ip, l);
  const Eigen::VectorXd scale = layout_scale(ip, theta, l);

  // P = D G D + diag(0, I), right-hand side D m.
  const Eigen::MatrixXd p0 = scale.asDiagonal() * g * scale.asDiagonal();
  Eigen::MatrixXd p = p0;
  p.diagonal().tail(l.dim - ip.k).array() += 1.0;
  const Eigen::VectorXd r = scale.cwiseProduct(m);

  const SpdFactor f = factor_spd(p, "bordered system P");
  Eigen::VectorXd beta = f.llt.solve(r);
  // Refine against the A-form system A (D beta) = m when every scale is positive,
  // else against P itself. Both routes then converge to the same solution.
  if ((scale.array() > 0.0).all()) {
    Eigen::MatrixXd a = g;
    a.diagonal().tail(l.dim - ip.k) += scale.tail(l.dim - ip.k).array().square().inverse().matrix();
    for (int it = 0; it < 2; ++it) {
      beta += f.llt.solve(scale.cwiseProduct(residual_ld(a, scale.cwiseProduct(beta), m)));
    }
  } else {
    beta += f.llt.solve(residual_ld(p, beta, r));
  }

  // ||e||^2 = m_yy - 2 beta'r + beta' P0 beta, accumulated in extended precision.
  long double quad = 0.0L;
  for (Eigen::Index i = 0; i < l.dim; ++i) {
    long double row = 0.0L;
    for (Eigen::Index j = 0; j < l.dim; ++j) row += static_cast<long double>(p0(i, j)) * beta(j);
    quad += row * beta(i);
  }
  const long double resid = static_cast<long double>(ip.myy) - 2.0L * dot_ld(beta, r) + quad;

  Solution s;
  s.jittered = f.jittered;
  s.b = beta.head(ip.k);
  s.u.resize(ip.terms());
  for (std::size_t p = 0; p < ip.terms(); ++p) s.u[p].resize(ip.layout[p].size());
  long double penalty = 0.0L;
  for (std::size_t a = 0; a < l.refs.size(); ++a) {
    const auto& ra = l.refs[a];
    const Eigen::VectorXd u = beta.segment(l.offsets[a], ip.layout[ra.term][ra.block].width);
    penalty += dot_ld(u, u);
    s.u[ra.term][ra.block] = u;
  }
  s.resid_norm2 = std::max(0.0, static_cast<double>(resid));
  s.penalty = static_cast<double>(penalty);
  const double d = s.resid_norm2 + s.penalty;
  s.sigma2 = d / static_cast<double>(ip.n - ip.k);
  s.log_det_p = f.log_det;
  s.loglik = restricted_loglik(s.log_det_p, d, ip.n, ip.k);
  return s;
}

double loglik_fast(const ModelTheta& theta, const InnerProducts& ip) { return solve_effects(theta, ip).loglik; }

double loglik_direct(const ModelTheta& theta, const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                     const std::vector<TermDesign>& designs) {
  const Eigen::Index n = y.size();
  const Eigen::Index k = x.cols();
  if (x.rows() != n) throw InputError("X rows do not match the response length");
  if (n <= k) throw InputError("sample size must exceed the number of fixed-effect columns");
  if (theta.blocks.size() != designs.size()) throw ParameterError("variance parameters do not match the designs");

  Eigen::Index width = 0;
  for (std::size_t p = 0; p < designs.size(); ++p) {
    for (std::size_t b = 0; b < designs[p].blocks.size(); ++b) {
      if (theta.blocks[p][b].active) width += designs[p].blocks[b].width;
    }
  }
  Eigen::MatrixXd z(n, k + width);
  z.leftCols(k) = x;
  Eigen::Index off = k;
  for (std::size_t p = 0; p < designs.size(); ++p) {
    for (std::size_t b = 0; b < designs[p].blocks.size(); ++b) {
      const auto& bp = theta.blocks[p][b];
      if (!bp.active) continue;
      const auto& blk = designs[p].blocks[b];
      const Eigen::VectorXd v = blk.v(bp.tau, bp.alpha);
      z.middleCols(off, blk.width) = designs[p].columns.middleCols(blk.offset, blk.width) * v.asDiagonal();
      off += blk.width;
    }
  }
  Eigen::MatrixXd bordered = z.transpose() * z;
  bordered.diagonal().tail(width).array() += 1.0;
  const SpdFactor f = factor_spd(bordered, "bordered system");
  const Eigen::VectorXd coef = f.llt.solve(z.transpose() * y);
  const Eigen::VectorXd resid = y - z * coef;
  const double d = resid.squaredNorm() + coef.tail(width).squaredNorm();
  return restricted_loglik(f.log_det, d, n, k);
}

BlockUpdate::BlockUpdate(const InnerProducts& ip, const ModelTheta& theta, BlockRef target)
    : ip_(&ip), target_(target) {
  check_theta(theta, ip);
  if (target.term >= ip.terms() || target.block >= ip.layout[target.term].size()) {
    throw ParameterError("target block does not exist");
  }
  block_ = &ip.layout[target.term][target.block];
  others_ = active_blocks(theta, true, &target);
  const Layout l = make_layout(ip, others_);

  Eigen::MatrixXd a = gather_gram(ip, l);
  for (std::size_t i = 0; i < others_.size(); ++i) {
    const auto& bp = theta.at(others_[i]);
    const auto& blk = ip.layout[others_[i].term][others_[i].block];
    const Eigen::VectorXd v = blk.v(bp.tau, bp.alpha);
    a.diagonal().segment(l.offsets[i], blk.width) += v.array().square().inverse().matrix();
    others_v_.push_back(v);
    others_log_v2_ += 2.0 * blk.log_v_sum(bp.tau, bp.alpha);
  }
  const Eigen::VectorXd m = gather_rhs(ip, l);
  const Eigen::MatrixXd b = gather_cross(ip, l, target);

  SpdFactor f = factor_spd(std::move(a), "reduced system");
  jittered_ = f.jittered;
  log_det_a_ = f.log_det;
  a_llt_ = std::move(f.llt);
  cross_ = b;
  a_inv_b_ = a_llt_.solve(b);
  a_inv_m_ = a_llt_.solve(m);
  m_a_inv_m_ = static_cast<double>(dot_ld(m, a_inv_m_));

  const Eigen::MatrixXd& mtt = cross(ip, target.term, target.term);
  reduced_tt_ = mtt.block(block_->offset, block_->offset, block_->width, block_->width) - b.transpose() * a_inv_b_;
  reduced_tt_ = 0.5 * (reduced_tt_ + reduced_tt_.transpose()).eval();
  reduced_m_ = ip.vp[target.term].segment(block_->offset, block_->width) - b.transpose() * a_inv_m_;

  loglik_without_ = restricted_loglik(others_log_v2_ + log_det_a_, ip.myy - m_a_inv_m_, ip.n, ip.k);
}

BlockUpdate::Schur BlockUpdate::schur(double tau, double alpha) const {
  Schur s;
  s.v = block_->v(tau, alpha);
  Eigen::MatrixXd mat = reduced_tt_;
  mat.diagonal() += s.v.array().square().inverse().matrix();
  SpdFactor f = factor_spd(std::move(mat), "target block system");
  s.llt = std::move(f.llt);
  s.log_det = f.log_det;
  return s;
}

double BlockUpdate::log_det_p(double tau, double alpha) const {
  const Schur s = schur(tau, alpha);
  return others_log_v2_ + 2.0 * block_->log_v_sum(tau, alpha) + log_det_a_ + s.log_det;
}

double BlockUpdate::loglik(double tau, double alpha) const {
  const Schur s = schur(tau, alpha);
  const Eigen::VectorXd sol = s.llt.solve(reduced_m_);
  const double d = ip_->myy - m_a_inv_m_ - static_cast<double>(dot_ld(reduced_m_, sol));
  const double log_det = others_log_v2_ + 2.0 * block_->log_v_sum(tau, alpha) + log_det_a_ + s.log_det;
  return restricted_loglik(log_det, d, ip_->n, ip_->k);
}

Eigen::VectorXd BlockUpdate::solve(const Schur& s, const Eigen::VectorXd& r) const {
  const Eigen::Index no = a_inv_m_.size();
  const Eigen::VectorXd a_inv_r = a_llt_.solve(r.head(no));
  const Eigen::VectorXd x_t = s.llt.solve(r.tail(r.size() - no) - cross_.transpose() * a_inv_r);
  Eigen::VectorXd out(r.size());
  out << a_inv_r - a_inv_b_ * x_t, x_t;
  return out;
}

Eigen::VectorXd BlockUpdate::coefficients(double tau, double alpha) const {
  const Schur s = schur(tau, alpha);
  std::vector<BlockRef> refs = others_;
  refs.push_back(target_);
  const Layout l = make_layout(*ip_, refs);
  Eigen::MatrixXd a = gather_gram(*ip_, l);
  for (std::size_t i = 0; i < others_.size(); ++i) {
    a.diagonal().segment(l.offsets[i], others_v_[i].size()) += others_v_[i].array().square().inverse().matrix();
  }
  a.diagonal().tail(s.v.size()) += s.v.array().square().inverse().matrix();
  const Eigen::VectorXd m = gather_rhs(*ip_, l);

  // Refinement against the assembled A-form system.
  Eigen::VectorXd gamma = solve(s, m);
  for (int it = 0; it < 2; ++it) gamma += solve(s, residual_ld(a, gamma, m));

  Eigen::Index off = ip_->k;
  for (const auto& v : others_v_) {
    gamma.segment(off, v.size()).array() /= v.array();
    off += v.size();
  }
  gamma.tail(s.v.size()).array() /= s.v.array();
  return gamma;
}

OptimizeResult optimize_effect(const InnerProducts& ip, const ModelTheta& theta, BlockRef target,
                               const NelderMeadOptions& options) {
  const BlockUpdate update(ip, theta, target);
  const bool spatial = ip.layout[target.term][target.block].kind == BlockKind::Spatial;
  const auto& current = theta.at(target);

  Eigen::VectorXd lower(spatial ? 2 : 1);
  Eigen::VectorXd upper(spatial ? 2 : 1);
  Eigen::VectorXd start(spatial ? 2 : 1);
  lower(0) = std::log(kTauMin);
  upper(0) = std::log(kTauMax);
  start(0) = std::log(0.1);
  if (spatial) {
    lower(1) = std::log(kAlphaMin);
    upper(1) = std::log(kAlphaMax);
    start(1) = 0.0;
  }
  if (current.active && current.tau > 0.0) {
    start(0) = std::log(current.tau);
    if (spatial) start(1) = std::log(current.alpha);
  }
  auto objective = [&](const Eigen::VectorXd& z) {
    return -update.loglik(std::exp(z(0)), spatial ? std::exp(z(1)) : 1.0);
  };
  const NelderMeadResult nm = nelder_mead_minimize(objective, start, lower, upper, options);

  OptimizeResult out;
  out.params = {true, std::exp(nm.x(0)), spatial ? std::exp(nm.x(1)) : 1.0};
  out.loglik = -nm.value;
  out.loglik_without = update.loglik_without();
  out.converged = nm.converged;
  out.evaluations = nm.evaluations;
  return out;
}

double loglik_drop_effect(const InnerProducts& ip, const ModelTheta& theta, BlockRef target) {
  if (!theta.at(target).active) throw ParameterError("loglik_drop_effect: target block is not active");
  return BlockUpdate(ip, theta, target).loglik_without();
}

RemlState evaluate_state(const InnerProducts& ip, ModelTheta theta, bool converged) {
  const Solution s = solve_effects(theta, ip);
  RemlState st;
  st.theta = std::move(theta);
  st.b_hat = s.b;
  st.u_hat = s.u;
  st.sigma2_hat = s.sigma2;
  st.loglik_r = s.loglik;
  st.resid_norm2 = s.resid_norm2;
  st.converged = converged;
  if (s.jittered) st.warnings.emplace_back("bordered system required jitter");
  return st;
}

RemlState fit_theta(const InnerProducts& ip, ModelTheta theta, const NelderMeadOptions& options, double rel_tol,
                    int max_sweeps) {
  check_theta(theta, ip);
  const std::vector<BlockRef> blocks = active_blocks(theta, false);
  double previous = loglik_fast(theta, ip);
  bool converged = blocks.empty();
  bool optimizer_ok = true;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    double current = previous;
    for (const auto& r : blocks) {
      const OptimizeResult res = optimize_effect(ip, theta, r, options);
      optimizer_ok = optimizer_ok && res.converged;
      theta.at(r) = res.params;
      current = res.loglik;
    }
    converged = std::abs(current - previous) <= rel_tol * std::max(1.0, std::abs(previous));
    previous = current;
  }
  RemlState st = evaluate_state(ip, std::move(theta), converged);
  if (!optimizer_ok) st.warnings.emplace_back("variance optimizer hit its evaluation limit");
  return st;
}

CoefficientTable coefficient_table(const RemlState& state, const InnerProducts& ip,
                                   const std::vector<TermDesign>& designs, bool allow_nonconverged) {
  if (!state.converged && !allow_nonconverged) throw ParameterError("coefficient table requested for a non-converged fit");
  if (designs.size() != ip.terms()) throw InputError("designs do not match the inner products");
  const ModelTheta& theta = state.theta;
  const Layout l = make_layout(ip, active_blocks(theta, true));
  const Eigen::VectorXd scale = layout_scale(ip, theta, l);
  Eigen::MatrixXd p = scale.asDiagonal() * gather_gram(ip, l) * scale.asDiagonal();
  p.diagonal().tail(l.dim - ip.k).array() += 1.0;
  const SpdFactor f = factor_spd(std::move(p), "bordered system P");

  CoefficientTable table;
  for (std::size_t term = 0; term < ip.terms(); ++term) {
    const Eigen::Index fixed = ip.fixed_column[term];
    if (fixed < 0) continue;
    std::vector<Eigen::Index> idx{fixed};
    std::vector<std::size_t> members;
    for (std::size_t a = 0; a < l.refs.size(); ++a) {
      if (l.refs[a].term != term) continue;
      members.push_back(a);
      const auto& blk = ip.layout[term][l.refs[a].block];
      for (Eigen::Index j = 0; j < blk.width; ++j) idx.push_back(l.offsets[a] + j);
    }
    const auto width = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd unit = Eigen::MatrixXd::Zero(l.dim, width);
    for (Eigen::Index j = 0; j < width; ++j) unit(idx[static_cast<std::size_t>(j)], j) = 1.0;
    const Eigen::MatrixXd cols = f.llt.solve(unit);
    Eigen::MatrixXd s(width, width);
    for (Eigen::Index i = 0; i < width; ++i) s.row(i) = cols.row(idx[static_cast<std::size_t>(i)]);
    s = 0.5 * (s + s.transpose()).eval();

    const TermDesign& design = designs[term];
    const Eigen::Index n = design.basis.rows() > 0 ? design.basis.rows() : ip.n;
    Eigen::MatrixXd z(n, width);
    z.col(0).setOnes();
    Eigen::VectorXd est = Eigen::VectorXd::Constant(n, state.b_hat(fixed));
    Eigen::Index col = 1;
    for (std::size_t a : members) {
      const auto& r = l.refs[a];
      const auto& blk = ip.layout[term][r.block];
      const Eigen::VectorXd v = scale.segment(l.offsets[a], blk.width);
      z.middleCols(col, blk.width) = design.basis.middleCols(blk.offset, blk.width) * v.asDiagonal();
      est += z.middleCols(col, blk.width) * state.u_hat[term][r.block];
      col += blk.width;
    }
    TermCoefficients tc;
    tc.term = term;
    tc.type = theta.type(term, ip);
    tc.estimate = est;
    tc.se = (state.sigma2_hat * ((z * s).cwiseProduct(z)).rowwise().sum()).cwiseMax(0.0).cwiseSqrt();
    tc.t = tc.estimate.cwiseQuotient(tc.se);
    tc.p_value = tc.t.unaryExpr([](double t) { return std::erfc(std::abs(t) / std::numbers::sqrt2); });
    table.terms.push_back(std::move(tc));
  }
  return table;
}

Eigen::VectorXd group_effects(const RemlState& state, std::size_t term) {
  const auto& blocks = state.theta.blocks[term];
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].active && state.u_hat[term][b].size() > 0) return blocks[b].tau * state.u_hat[term][b];
  }
  return {};
}

}  // namespace samsel
