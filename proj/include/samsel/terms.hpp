#pragma once

#include "samsel/basis.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace samsel {

enum class EffectType { Constant, SVC, NVC, SNVC };

std::string_view to_string(EffectType type);
/// Accepts "constant", "svc", "nvc", "snvc" (case-insensitive).
EffectType parse_effect_type(std::string_view text);

constexpr bool has_spatial(EffectType t) { return t == EffectType::SVC || t == EffectType::SNVC; }
constexpr bool has_nonspatial(EffectType t) { return t == EffectType::NVC || t == EffectType::SNVC; }
constexpr EffectType compose(bool spatial, bool nonspatial) {
  if (spatial && nonspatial) return EffectType::SNVC;
  if (spatial) return EffectType::SVC;
  if (nonspatial) return EffectType::NVC;
  return EffectType::Constant;
}

// Search box for the variance parameters, on the natural scale.
inline constexpr double kAlphaMin = 0.25;
inline constexpr double kAlphaMax = 8.0;
inline constexpr double kTauMin = 1e-4;
inline constexpr double kTauMax = 1e4;

/// Coefficient specification of one covariate.
struct TermSpec {
  std::string name;
  std::size_t covariate_index = 0;
  std::vector<EffectType> candidate_types{EffectType::Constant};
  EffectType current_type = EffectType::Constant;
  bool is_intercept = false;

  bool allows(EffectType t) const;
  /// Throws SpecError when an invariant is broken (NVC on the intercept, missing Constant, ...).
  void validate() const;

  static TermSpec intercept(std::vector<EffectType> candidates = {EffectType::Constant, EffectType::SVC});
};

/// Random intercept over the levels of a categorical variable.
struct GroupTermSpec {
  std::string name;
  std::vector<int> membership;      // level index per row
  std::vector<std::string> levels;  // label per level
  bool included = false;

  std::size_t level_count() const { return levels.size(); }
  void validate() const;
  Eigen::MatrixXd indicator() const;
  /// Builds a group term from raw labels, levels in order of first appearance.
  static GroupTermSpec from_labels(std::string name, const std::vector<std::string>& labels);
};

/// tau_s / sigma and alpha drive the spatial block, tau_n / sigma the non-spatial one.
/// Group terms use tau_n as their single scale.
struct VarianceParams {
  double tau_s = 0.0;
  double alpha = 1.0;
  double tau_n = 0.0;
};

/// Diagonal of V_p(theta_p). `eigenvalues` are normalized so the first is one.
Eigen::VectorXd v_diag(EffectType type, const VarianceParams& params,
                       const std::optional<Eigen::VectorXd>& eigenvalues, std::optional<Eigen::Index> l_n);

enum class BlockKind { Spatial, NonSpatial, Group };

std::string_view to_string(BlockKind kind);

/// A contiguous column block of a term design sharing one variance structure.
struct DesignBlock {
  BlockKind kind = BlockKind::Spatial;
  Eigen::Index offset = 0;
  Eigen::Index width = 0;
  Eigen::VectorXd lambda;  // normalized eigenvalues, spatial blocks only

  /// V diagonal for this block: tau * lambda^alpha (spatial) or tau (others).
  Eigen::VectorXd v(double tau, double alpha) const;
  /// Sum of log V entries, without forming V.
  double log_v_sum(double tau, double alpha) const;
};

/// Random-effect design of one term: columns = x o basis, split into blocks.
struct TermDesign {
  Eigen::MatrixXd basis;    // N x L_p, basis rows before multiplying by x
  Eigen::MatrixXd columns;  // N x L_p
  std::vector<DesignBlock> blocks;

  Eigen::Index width() const { return columns.cols(); }
  const DesignBlock* find(BlockKind kind) const;
};

/// Moran basis rows may be indexed by site when several rows share a site.
TermDesign term_design(const Eigen::VectorXd& x, EffectType type, const MoranBasis& moran,
                       const NvcBasis* nvc, const std::vector<Eigen::Index>* site_of_row = nullptr);

TermDesign group_design(const GroupTermSpec& group);

}  // namespace samsel
