#include "samsel/selection.hpp"

#include "samsel/error.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <thread>

namespace samsel {

std::string_view to_string(CostKind kind) { return kind == CostKind::BIC ? "bic" : "aic"; }

CostKind parse_cost_kind(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "bic") return CostKind::BIC;
  if (lower == "aic") return CostKind::AIC;
  throw ParameterError("unknown cost kind '" + std::string(text) + "'");
}

int count_params(const ModelTheta& theta, const InnerProducts& ip) {
  int q = static_cast<int>(ip.k);
  for (std::size_t p = 0; p < theta.blocks.size(); ++p) {
    for (std::size_t b = 0; b < theta.blocks[p].size(); ++b) {
      if (!theta.blocks[p][b].active) continue;
      q += ip.layout[p][b].kind == BlockKind::Spatial ? 2 : 1;
    }
  }
  return q;
}

double cost(double loglik, int q, Eigen::Index n, CostKind kind) {
  if (n <= q) throw ParameterError("cost: sample size must exceed the parameter count");
  if (kind == CostKind::BIC) return -2.0 * loglik + q * std::log(static_cast<double>(n));
  return -2.0 * loglik + 2.0 * q;
}

bool TermCandidates::allows(EffectType t) const {
  return std::find(allowed.begin(), allowed.end(), t) != allowed.end();
}

std::uint64_t split_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 over (master, stream)
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

class Selector {
 public:
  Selector(const InnerProducts& ip, const std::vector<TermCandidates>& cand, const SelectionOptions& opt)
      : ip_(ip), cand_(cand), opt_(opt), theta_(ModelTheta::none(ip)) {
    if (cand.size() != ip.terms()) throw SpecError("candidate list does not match the term layout");
    loglik_ = loglik_fast(theta_, ip_);
    cost_ = cost_of(theta_, loglik_);
  }

  SelectionResult run(const std::vector<std::size_t>& order) {
    SelectionResult res;
    res.sequences.push_back(order);
    bool converged = false;
    int sweep = 0;
    while (sweep < opt_.max_sweeps) {
      const double before = cost_;
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t p : order) {
        if (cand_[p].is_group) {
          if (auto g = find_block(ip_, p, BlockKind::Group)) trial(*g, std::nullopt, res);
          continue;
        }
        const auto s = find_block(ip_, p, BlockKind::Spatial);
        const auto n = find_block(ip_, p, BlockKind::NonSpatial);
        if (s) trial(*s, n, res);
        if (n) trial(*n, s, res);
      }
      ++sweep;
      res.sweep_costs.push_back(cost_);
      res.sweep_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (std::abs(before - cost_) <= opt_.tol_outer * std::max(1.0, std::abs(before))) {
        converged = true;
        break;
      }
    }
    res.sweeps = sweep;
    res.converged = converged;
    res.state = evaluate_state(ip_, theta_, converged);
    res.q = count_params(theta_, ip_);
    res.cost = cost(res.state.loglik_r, res.q, ip_.n, opt_.cost);
    for (std::size_t p = 0; p < ip_.terms(); ++p) {
      res.types.push_back(cand_[p].is_group ? EffectType::Constant : theta_.type(p, ip_));
      bool any = false;
      for (const auto& b : theta_.blocks[p]) any = any || b.active;
      res.included.push_back(any);
    }
    return res;
  }

 private:
  double cost_of(const ModelTheta& t, double ll) const { return cost(ll, count_params(t, ip_), ip_.n, opt_.cost); }

  bool allowed(const ModelTheta& t, std::size_t term) const {
    return cand_[term].is_group || cand_[term].allows(t.type(term, ip_));
  }

  // One (b-1)/(b-2) or (b-3)/(b-4) step for `target`; `sibling` is the other
  // random block of the same term, if any.
  void trial(BlockRef target, std::optional<BlockRef> sibling, SelectionResult& res) {
    const bool was_on = theta_.at(target).active;

    // Model in which the target is switched on.
    ModelTheta with_base = theta_;
    with_base.at(target) = BlockParams{true, was_on ? theta_.at(target).tau : 0.0, theta_.at(target).alpha};
    bool sibling_dropped = false;
    if (!allowed(with_base, target.term) && sibling && with_base.at(*sibling).active) {
      with_base.at(*sibling) = BlockParams{};
      sibling_dropped = true;
    }
    const bool with_possible = allowed(with_base, target.term);

    struct Candidate {
      ModelTheta theta;
      double loglik;
      double cost;
    };
    std::vector<Candidate> options;
    double base_cost = cost_;
    ModelTheta base_theta = theta_;
    double base_loglik = loglik_;

    double without_loglik = 0.0;
    bool without_known = false;
    if (with_possible) {
      const OptimizeResult r = optimize_effect(ip_, with_base, target, opt_.optimizer);
      ModelTheta t = with_base;
      t.at(target) = r.params;
      const double c = cost_of(t, r.loglik);
      if (was_on && !sibling_dropped) {
        // Re-optimizing the current model: it becomes the new baseline.
        base_theta = t;
        base_loglik = r.loglik;
        base_cost = c;
      } else {
        options.push_back({t, r.loglik, c});
      }
      if (!sibling_dropped) {
        without_loglik = r.loglik_without;
        without_known = true;
      }
    }

    // Model in which the target is switched off.
    if (was_on) {
      ModelTheta t = theta_;
      t.at(target) = BlockParams{};
      if (!allowed(t, target.term) && sibling) {
        t.at(*sibling) = BlockParams{};
        without_known = false;
      }
      const double ll = without_known ? without_loglik : loglik_fast(t, ip_);
      options.push_back({t, ll, cost_of(t, ll)});
    }

    ++res.trials;
    const Candidate* best = nullptr;
    for (const auto& o : options) {
      if (o.cost < base_cost - opt_.tol_accept && (!best || o.cost < best->cost)) best = &o;
    }
    if (best) {
      theta_ = best->theta;
      loglik_ = best->loglik;
      cost_ = best->cost;
      ++res.accepted;
    } else {
      theta_ = std::move(base_theta);
      loglik_ = base_loglik;
      cost_ = base_cost;
    }
    res.cost_trace.push_back(cost_);
    if (opt_.trace) {
      *opt_.trace << "{\"term\":" << target.term << ",\"block\":\"" << to_string(ip_.layout[target.term][target.block].kind)
                  << "\",\"accepted\":" << (best ? "true" : "false") << ",\"loglik\":" << loglik_
                  << ",\"cost\":" << cost_ << "}\n";
    }
  }

  const InnerProducts& ip_;
  const std::vector<TermCandidates>& cand_;
  const SelectionOptions& opt_;
  ModelTheta theta_;
  double loglik_ = 0.0;
  double cost_ = 0.0;
};

}  // namespace

SelectionResult simple_select(const InnerProducts& ip, const std::vector<TermCandidates>& candidates,
                              const SelectionOptions& options, std::vector<std::size_t> order) {
  if (order.empty()) {
    order.resize(ip.terms());
    std::iota(order.begin(), order.end(), 0);
  }
  std::vector<std::size_t> check = order;
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check[i] != i || check.size() != ip.terms()) throw ParameterError("selection order must be a permutation of the terms");
  }
  Selector s(ip, candidates, options);
  return s.run(order);
}

SelectionResult mc_select(const InnerProducts& ip, const std::vector<TermCandidates>& candidates,
                          const SelectionOptions& options, const McConfig& mc) {
  if (mc.replicates < 1) throw ParameterError("Monte Carlo selection needs at least one replicate");
  const auto g_count = static_cast<std::size_t>(mc.replicates);
  std::vector<std::vector<std::size_t>> orders(g_count);
  for (std::size_t g = 0; g < g_count; ++g) {
    std::vector<std::size_t> order(ip.terms());
    std::iota(order.begin(), order.end(), 0);
    if (!(mc.force_identity && g == 0)) {
      std::mt19937_64 rng(split_seed(mc.seed, g));
      for (std::size_t i = order.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
      }
    }
    orders[g] = std::move(order);
  }

  // Runs never write to shared state except their own slot.
  SelectionOptions run_options = options;
  run_options.trace = nullptr;
  std::vector<std::optional<SelectionResult>> results(g_count);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t g = next++; g < g_count; g = next++) {
      try {
        results[g] = simple_select(ip, candidates, run_options, orders[g]);
      } catch (const std::exception&) {
        results[g].reset();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(mc.workers, mc.replicates));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::optional<std::size_t> best;
  std::vector<double> costs(g_count, std::numeric_limits<double>::quiet_NaN());
  std::vector<bool> failed(g_count, false);
  for (std::size_t g = 0; g < g_count; ++g) {
    if (!results[g]) {
      failed[g] = true;
      continue;
    }
    costs[g] = results[g]->cost;
    if (!best || results[g]->cost < results[*best]->cost) best = g;
  }
  if (!best) throw NumericalError("every Monte Carlo selection run failed");
  SelectionResult out = std::move(*results[*best]);
  out.sequences = orders;
  out.run_costs = std::move(costs);
  out.run_failed = std::move(failed);
  out.best_run = *best;
  return out;
}

}  // namespace samsel
