#include "samsel/terms.hpp"

#include "samsel/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

namespace samsel {

std::string_view to_string(EffectType type) {
  switch (type) {
    case EffectType::Constant: return "constant";
    case EffectType::SVC: return "svc";
    case EffectType::NVC: return "nvc";
    case EffectType::SNVC: return "snvc";
  }
  return "constant";
}

EffectType parse_effect_type(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "constant") return EffectType::Constant;
  if (lower == "svc") return EffectType::SVC;
  if (lower == "nvc") return EffectType::NVC;
  if (lower == "snvc" || lower == "s&nvc") return EffectType::SNVC;
  throw SpecError("unknown coefficient type '" + std::string(text) + "'");
}

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::Spatial: return "spatial";
    case BlockKind::NonSpatial: return "nonspatial";
    case BlockKind::Group: return "group";
  }
  return "spatial";
}

bool TermSpec::allows(EffectType t) const {
  return std::find(candidate_types.begin(), candidate_types.end(), t) != candidate_types.end();
}

void TermSpec::validate() const {
  if (!allows(EffectType::Constant)) throw SpecError("term '" + name + "': Constant must always be a candidate");
  if (!allows(current_type)) throw SpecError("term '" + name + "': current type is not a candidate");
  if (is_intercept && (allows(EffectType::NVC) || allows(EffectType::SNVC))) {
    throw SpecError("term '" + name + "': NVC and SNVC are not defined for the intercept");
  }
}

TermSpec TermSpec::intercept(std::vector<EffectType> candidates) {
  TermSpec t;
  t.name = "(Intercept)";
  t.candidate_types = std::move(candidates);
  t.is_intercept = true;
  t.validate();
  return t;
}

void GroupTermSpec::validate() const {
  std::vector<std::size_t> counts(levels.size(), 0);
  for (int m : membership) {
    if (m < 0 || static_cast<std::size_t>(m) >= levels.size()) {
      throw InputError("group '" + name + "': membership index out of range");
    }
    ++counts[static_cast<std::size_t>(m)];
  }
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g] == 0) throw InputError("group '" + name + "': level '" + levels[g] + "' has no members");
  }
}

Eigen::MatrixXd GroupTermSpec::indicator() const {
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(membership.size()),
                                            static_cast<Eigen::Index>(levels.size()));
  for (std::size_t i = 0; i < membership.size(); ++i) z(static_cast<Eigen::Index>(i), membership[i]) = 1.0;
  return z;
}

GroupTermSpec GroupTermSpec::from_labels(std::string name, const std::vector<std::string>& labels) {
  GroupTermSpec g;
  g.name = std::move(name);
  std::map<std::string, int> index;
  g.membership.reserve(labels.size());
  for (const auto& label : labels) {
    auto [it, inserted] = index.emplace(label, static_cast<int>(g.levels.size()));
    if (inserted) g.levels.push_back(label);
    g.membership.push_back(it->second);
  }
  return g;
}

Eigen::VectorXd v_diag(EffectType type, const VarianceParams& params,
                       const std::optional<Eigen::VectorXd>& eigenvalues, std::optional<Eigen::Index> l_n) {
  if (params.tau_s < 0.0 || params.tau_n < 0.0) throw ParameterError("tau parameters must be non-negative");
  Eigen::VectorXd spatial;
  Eigen::VectorXd nonspatial;
  if (has_spatial(type)) {
    if (!eigenvalues) throw ParameterError("spatial coefficient types require eigenvalues");
    if (!(params.alpha > 0.0)) throw ParameterError("alpha must be positive");
    spatial = params.tau_s * eigenvalues->array().pow(params.alpha);
  }
  if (has_nonspatial(type)) {
    if (!l_n) throw ParameterError("non-spatial coefficient types require the basis size");
    nonspatial = Eigen::VectorXd::Constant(*l_n, params.tau_n);
  }
  Eigen::VectorXd out(spatial.size() + nonspatial.size());
  out << spatial, nonspatial;
  return out;
}

Eigen::VectorXd DesignBlock::v(double tau, double alpha) const {
  if (kind == BlockKind::Spatial) return tau * lambda.array().pow(alpha).matrix();
  return Eigen::VectorXd::Constant(width, tau);
}

double DesignBlock::log_v_sum(double tau, double alpha) const {
  const double base = static_cast<double>(width) * std::log(tau);
  if (kind != BlockKind::Spatial) return base;
  return base + alpha * lambda.array().log().sum();
}

const DesignBlock* TermDesign::find(BlockKind kind) const {
  for (const auto& b : blocks) {
    if (b.kind == kind) return &b;
  }
  return nullptr;
}

TermDesign term_design(const Eigen::VectorXd& x, EffectType type, const MoranBasis& moran, const NvcBasis* nvc,
                       const std::vector<Eigen::Index>* site_of_row) {
  const Eigen::Index n = x.size();
  TermDesign d;
  Eigen::Index width = 0;
  if (has_spatial(type)) {
    if (moran.empty()) throw SpecError("spatial coefficient requested but the Moran basis is empty");
    const Eigen::Index rows = site_of_row ? static_cast<Eigen::Index>(site_of_row->size()) : moran.vectors.rows();
    if (rows != n) throw InputError("term_design: Moran basis rows do not match the covariate length");
    width += moran.size();
  }
  if (has_nonspatial(type)) {
    if (nvc == nullptr) throw SpecError("non-spatial coefficient requested without an NVC basis");
    if (nvc->vectors.rows() != n) throw InputError("term_design: NVC basis rows do not match the covariate length");
    width += nvc->size();
  }
  d.basis.resize(n, width);
  Eigen::Index offset = 0;
  if (has_spatial(type)) {
    if (site_of_row) {
      for (Eigen::Index i = 0; i < n; ++i) d.basis.row(i).head(moran.size()) = moran.vectors.row((*site_of_row)[i]);
    } else {
      d.basis.leftCols(moran.size()) = moran.vectors;
    }
    d.blocks.push_back({BlockKind::Spatial, offset, moran.size(), moran.normalized_eigenvalues()});
    offset += moran.size();
  }
  if (has_nonspatial(type)) {
    d.basis.middleCols(offset, nvc->size()) = nvc->vectors;
    d.blocks.push_back({BlockKind::NonSpatial, offset, nvc->size(), {}});
    offset += nvc->size();
  }
  d.columns = d.basis.array().colwise() * x.array();
  return d;
}

TermDesign group_design(const GroupTermSpec& group) {
  group.validate();
  TermDesign d;
  d.basis = group.indicator();
  d.columns = d.basis;
  d.blocks.push_back({BlockKind::Group, 0, d.basis.cols(), {}});
  return d;
}

}  // namespace samsel
