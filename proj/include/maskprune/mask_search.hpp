#pragma once

#include "maskprune/cost_model.hpp"
#include "maskprune/fisher.hpp"
#include "maskprune/toy_model.hpp"

#include <functional>
#include <span>
#include <stdexcept>
#include <string>

namespace maskprune {

struct SearchResult {
  MaskSet masks;                 // strictly binary
  double pruned_importance = 0;  // sum of scores over Z(m)
  double achieved_cost = 0;      // FLOPs or seconds, matching the search
  Index n_star = 0;              // remaining heads at the optimum
};

/// Raised when a latency budget is below the per-layer constant overhead.
class InfeasibleConstraint : public std::runtime_error {
 public:
  InfeasibleConstraint(double floor, double requested);
  double floor() const noexcept { return floor_; }

 private:
  double floor_;
};

/// Sum of scores over the pruned set, accumulated in flattened mask order
/// (layer 0 heads, layer 0 filters, layer 1 heads, ...). Every search routine
/// reports and compares importance through this function.
double pruned_importance(const FisherDiagonal& diag, const MaskSet& masks);

/// FLOPs-constrained search: for every remaining-head count n, prune the
/// least important heads and keep as many of the most important filters as
/// the budget allows; return the n with the smallest pruned importance.
/// Ordering is (score, layer, unit) ascending; ties on n go to the smallest n.
SearchResult search_flops(const FisherDiagonal& diag, const FlopsCost& cost, double budget);

/// Latency-constrained search with a piecewise-linear LAT model. The
/// T_head (T_filter) most important units of every layer are always kept; the
/// remaining budget C - L (c_head + c_filter) is spent like search_flops with
/// the slopes as unit costs. Throws InfeasibleConstraint below that floor.
SearchResult search_latency(const FisherDiagonal& diag, const LatencyModel& lat, double budget);

/// Cost as a function of kept units per layer (every supported cost is a
/// function of the mask support only).
using SupportCost = std::function<double(std::span<const Index> kept_heads, std::span<const Index> kept_filters)>;

SupportCost flops_support_cost(const FlopsCost& cost);
/// Latency under `lat`; when `require_threshold` is set, masks keeping fewer
/// than T units in some layer cost +infinity.
SupportCost latency_support_cost(const LatencyModel& lat, bool require_threshold = false);

constexpr Index kBruteForceMaxVariables = 32;

/// Exact minimum of the pruned importance over every feasible binary mask.
/// Each layer's 2^(H + N) subsets are reduced to the cheapest one per
/// (kept heads, kept filters) pair, then every combination of per-layer pairs
/// is checked against `cost`; this is exhaustive because a SupportCost sees
/// only those counts. Refuses instances with more than 32 variables, more
/// than 24 units per layer, or more than 2^24 count combinations.
SearchResult brute_force_search(const FisherDiagonal& diag, const SupportCost& cost, double budget);

struct Constraint {
  enum class Kind { ratio, absolute } kind = Kind::ratio;
  double value = 1.0;

  double resolve(double full_cost) const;
};

}  // namespace maskprune
