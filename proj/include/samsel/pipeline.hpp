#pragma once

#include "samsel/basis.hpp"
#include "samsel/reml.hpp"
#include "samsel/selection.hpp"
#include "samsel/terms.hpp"

#include <optional>
#include <string>
#include <vector>

namespace samsel {

struct BasisConfig {
  std::optional<double> range;  // default: largest nearest-neighbour distance
  std::size_t l_max = 200;
  double eps_eig = 1e-8;
  NvcKind nvc_kind = NvcKind::NaturalSpline;
  int nvc_size = 10;
};

struct CovariateInput {
  std::string name;
  Eigen::VectorXd values;
  std::vector<EffectType> allowed{EffectType::Constant};
};

/// Everything needed to assemble a model: response, sites, covariates and groups.
/// Rows may share a site (panel data); `site_of_row` maps each row to its site.
struct ModelInput {
  Eigen::VectorXd y;
  SiteCoords sites;
  std::vector<Eigen::Index> site_of_row;  // empty: row i is site i
  std::vector<EffectType> intercept_allowed{EffectType::Constant, EffectType::SVC};
  std::vector<CovariateInput> covariates;
  std::vector<GroupTermSpec> groups;
};

/// Bases, designs and inner products for one dataset. Terms are ordered as
/// intercept, covariates, then group terms.
struct PreparedModel {
  std::vector<TermSpec> terms;
  std::vector<GroupTermSpec> groups;
  MoranBasis moran;
  double range = 1.0;
  std::vector<std::optional<NvcBasis>> nvc;  // per covariate term (intercept has none)
  Eigen::MatrixXd x;                         // fixed-effect columns, one per covariate term
  std::vector<Eigen::Index> site_of_row;
  std::vector<TermDesign> designs;
  InnerProducts ip;
  std::vector<TermCandidates> candidates;
  double basis_seconds = 0.0;
  double precompute_seconds = 0.0;

  std::size_t term_count() const { return designs.size(); }
  std::string term_name(std::size_t term) const;
};

PreparedModel prepare(const ModelInput& input, const BasisConfig& config);
/// Same, reusing an already computed Moran basis for the input's sites.
PreparedModel prepare(const ModelInput& input, const BasisConfig& config, const MoranBasis& moran, double range);

/// Variance-parameter template for fixed coefficient types. Group terms listed
/// in `groups_included` are switched on.
ModelTheta theta_for_types(const PreparedModel& model, const std::vector<EffectType>& types,
                           const std::vector<bool>& groups_included);

/// Fits fixed coefficient types by coordinate ascent and reports it like a selection.
SelectionResult fit_fixed(const PreparedModel& model, const std::vector<EffectType>& types,
                          const std::vector<bool>& groups_included, const SelectionOptions& options);

/// The richest type each term allows (SNVC, else SVC, else NVC, else Constant).
std::vector<EffectType> richest_types(const PreparedModel& model);

}  // namespace samsel
