#include "samsel/pipeline.hpp"

#include "samsel/error.hpp"

#include <chrono>

namespace samsel {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool any_spatial(const std::vector<EffectType>& allowed) {
  for (auto t : allowed) {
    if (has_spatial(t)) return true;
  }
  return false;
}

bool any_nonspatial(const std::vector<EffectType>& allowed) {
  for (auto t : allowed) {
    if (has_nonspatial(t)) return true;
  }
  return false;
}

}  // namespace

std::string PreparedModel::term_name(std::size_t term) const {
  if (term < terms.size()) return terms[term].name;
  return groups[term - terms.size()].name;
}

PreparedModel prepare(const ModelInput& input, const BasisConfig& config) {
  const auto t0 = Clock::now();
  bool need_spatial = any_spatial(input.intercept_allowed);
  for (const auto& c : input.covariates) need_spatial = need_spatial || any_spatial(c.allowed);
  MoranBasis moran;
  double range = config.range.value_or(0.0);
  if (need_spatial) {
    if (!config.range) range = input.sites.max_nearest_neighbor_distance();
    if (!(range > 0.0)) throw ParameterError("proximity range must be positive (are all sites coincident?)");
    EigenOptions eo;
    eo.l_max = config.l_max;
    eo.eps_eig = config.eps_eig;
    moran = moran_eigen(build_proximity(input.sites, range), eo);
  }
  PreparedModel m = prepare(input, config, moran, range);
  m.basis_seconds = seconds_since(t0) - m.precompute_seconds;
  return m;
}

PreparedModel prepare(const ModelInput& input, const BasisConfig& config, const MoranBasis& moran, double range) {
  const auto t0 = Clock::now();
  const Eigen::Index n = input.y.size();
  PreparedModel m;
  m.moran = moran;
  m.range = range;
  m.site_of_row = input.site_of_row;
  if (m.site_of_row.empty()) {
    if (static_cast<Eigen::Index>(input.sites.size()) != n) throw InputError("one site per row expected");
  } else {
    if (static_cast<Eigen::Index>(m.site_of_row.size()) != n) throw InputError("site map does not match the rows");
    for (auto s : m.site_of_row) {
      if (s < 0 || s >= static_cast<Eigen::Index>(input.sites.size())) throw InputError("site index out of range");
    }
  }
  const std::vector<Eigen::Index>* rows = m.site_of_row.empty() ? nullptr : &m.site_of_row;

  const auto k = static_cast<Eigen::Index>(input.covariates.size() + 1);
  m.x.resize(n, k);
  m.x.col(0).setOnes();

  auto design_type = [&](const std::vector<EffectType>& allowed) {
    bool s = any_spatial(allowed) && !moran.empty();
    return compose(s, any_nonspatial(allowed));
  };

  m.terms.push_back(TermSpec::intercept(input.intercept_allowed));
  m.nvc.emplace_back();
  m.designs.push_back(term_design(Eigen::VectorXd::Ones(n), design_type(input.intercept_allowed), moran, nullptr, rows));

  for (std::size_t j = 0; j < input.covariates.size(); ++j) {
    const auto& c = input.covariates[j];
    if (c.values.size() != n) throw InputError("covariate '" + c.name + "' has the wrong length");
    TermSpec t;
    t.name = c.name;
    t.covariate_index = j + 1;
    t.candidate_types = c.allowed;
    if (!t.allows(EffectType::Constant)) t.candidate_types.push_back(EffectType::Constant);
    t.validate();
    m.x.col(static_cast<Eigen::Index>(j + 1)) = c.values;
    std::optional<NvcBasis> nvc;
    if (any_nonspatial(c.allowed)) {
      nvc = nvc_basis(c.values, config.nvc_size, config.nvc_kind);
      nvc->covariate_index = j + 1;
    }
    m.designs.push_back(term_design(c.values, design_type(c.allowed), moran, nvc ? &*nvc : nullptr, rows));
    m.terms.push_back(std::move(t));
    m.nvc.push_back(std::move(nvc));
  }
  for (const auto& g : input.groups) {
    if (static_cast<Eigen::Index>(g.membership.size()) != n) throw InputError("group '" + g.name + "' has the wrong length");
    m.designs.push_back(group_design(g));
    m.groups.push_back(g);
  }

  for (const auto& t : m.terms) {
    TermCandidates c;
    c.name = t.name;
    for (auto type : t.candidate_types) {
      if (has_spatial(type) && moran.empty()) continue;
      c.allowed.push_back(type);
    }
    m.candidates.push_back(std::move(c));
  }
  for (const auto& g : m.groups) {
    TermCandidates c;
    c.name = g.name;
    c.is_group = true;
    m.candidates.push_back(std::move(c));
  }

  const auto t1 = Clock::now();
  m.ip = precompute(input.y, m.x, m.designs);
  m.precompute_seconds = seconds_since(t1);
  (void)t0;
  return m;
}

ModelTheta theta_for_types(const PreparedModel& model, const std::vector<EffectType>& types,
                           const std::vector<bool>& groups_included) {
  if (types.size() != model.terms.size()) throw SpecError("one coefficient type per covariate term is required");
  ModelTheta theta = ModelTheta::none(model.ip);
  const VarianceParams start{0.0, 1.0, 0.0};
  for (std::size_t p = 0; p < types.size(); ++p) {
    if (!model.terms[p].allows(types[p])) {
      throw SpecError("type " + std::string(to_string(types[p])) + " is not allowed for term '" + model.terms[p].name + "'");
    }
    theta.set_type(p, model.ip, types[p], start);
  }
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    if (g < groups_included.size() && groups_included[g]) theta.blocks[model.terms.size() + g][0].active = true;
  }
  return theta;
}

SelectionResult fit_fixed(const PreparedModel& model, const std::vector<EffectType>& types,
                          const std::vector<bool>& groups_included, const SelectionOptions& options) {
  ModelTheta theta = theta_for_types(model, types, groups_included);
  SelectionResult res;
  res.state = fit_theta(model.ip, std::move(theta), options.optimizer, options.tol_outer, options.max_sweeps);
  res.converged = res.state.converged;
  res.q = count_params(res.state.theta, model.ip);
  res.cost = cost(res.state.loglik_r, res.q, model.ip.n, options.cost);
  for (std::size_t p = 0; p < model.term_count(); ++p) {
    const bool group = model.candidates[p].is_group;
    res.types.push_back(group ? EffectType::Constant : res.state.theta.type(p, model.ip));
    bool any = false;
    for (const auto& b : res.state.theta.blocks[p]) any = any || b.active;
    res.included.push_back(any);
  }
  res.cost_trace.push_back(res.cost);
  res.sweep_costs.push_back(res.cost);
  return res;
}

std::vector<EffectType> richest_types(const PreparedModel& model) {
  std::vector<EffectType> out;
  for (std::size_t p = 0; p < model.terms.size(); ++p) {
    const auto& c = model.candidates[p];
    EffectType t = EffectType::Constant;
    for (auto cand : {EffectType::SNVC, EffectType::SVC, EffectType::NVC}) {
      if (c.allows(cand)) {
        t = cand;
        break;
      }
    }
    out.push_back(t);
  }
  return out;
}

}  // namespace samsel
