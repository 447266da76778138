#include "maskprune/mask_search.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

namespace maskprune {

namespace {

struct UnitRef {
  Index layer;
  Index unit;
  double score;
};

// Least important first: (score, layer, unit) ascending.
std::vector<UnitRef> ascending_units(const Matrix& scores, const std::vector<std::vector<bool>>* exclude) {
  std::vector<UnitRef> units;
  for (Index l = 0; l < scores.rows(); ++l)
    for (Index i = 0; i < scores.cols(); ++i)
      if (!exclude || !(*exclude)[l][i]) units.push_back({l, i, scores(l, i)});
  std::sort(units.begin(), units.end(), [](const UnitRef& a, const UnitRef& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.unit < b.unit;
  });
  return units;
}

// Marks the `keep` most important units of every layer.
std::vector<std::vector<bool>> top_per_layer(const Matrix& scores, Index keep) {
  std::vector<std::vector<bool>> kept(scores.rows(), std::vector<bool>(scores.cols(), false));
  for (Index l = 0; l < scores.rows(); ++l) {
    std::vector<Index> idx(scores.cols());
    for (Index i = 0; i < scores.cols(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
      if (scores(l, a) != scores(l, b)) return scores(l, a) < scores(l, b);
      return a < b;
    });
    const Index k = std::min(keep, scores.cols());
    for (Index j = scores.cols() - k; j < scores.cols(); ++j) kept[l][idx[j]] = true;
  }
  return kept;
}

void check_scores(const FisherDiagonal& diag) {
  if (diag.head_scores.rows() != diag.filter_scores.rows()) throw std::invalid_argument("search: layer count mismatch");
  if (!diag.head_scores.allFinite() || !diag.filter_scores.allFinite() || diag.head_scores.minCoeff() < 0 ||
      diag.filter_scores.minCoeff() < 0)
    throw std::invalid_argument("search: scores must be finite and nonnegative");
}

struct SearchSpace {
  std::vector<UnitRef> heads;    // candidates beyond the pre-kept set, least important first
  std::vector<UnitRef> filters;
  std::vector<std::vector<bool>> kept_heads;    // pre-kept
  std::vector<std::vector<bool>> kept_filters;
};

MaskSet base_mask(const FisherDiagonal& diag, const SearchSpace& space, bool pre_kept_only) {
  MaskSet m;
  for (Index l = 0; l < diag.layers(); ++l) {
    Vector h = Vector::Ones(diag.heads());
    Vector f = Vector::Ones(diag.filters());
    if (pre_kept_only) {
      for (Index i = 0; i < h.size(); ++i) h(i) = space.kept_heads[l][i] ? 1.0 : 0.0;
      for (Index i = 0; i < f.size(); ++i) f(i) = space.kept_filters[l][i] ? 1.0 : 0.0;
    }
    m.heads.push_back(std::move(h));
    m.filters.push_back(std::move(f));
  }
  return m;
}

// Shared loop for both searches: for each count n of extra kept heads, keep
// the n most important candidate heads and the largest affordable number of
// most important candidate filters.
SearchResult search_counts(const FisherDiagonal& diag, const SearchSpace& space, double head_cost, double filter_cost,
                           double count_budget, double budget,
                           const std::function<double(const MaskSet&)>& actual_cost, Index pre_kept_heads) {
  const auto n_heads = static_cast<Index>(space.heads.size());
  const auto n_filters = static_cast<Index>(space.filters.size());
  const MaskSet all_candidates_pruned = base_mask(diag, space, true);

  SearchResult best;
  best.pruned_importance = std::numeric_limits<double>::infinity();
  bool found = false;

  for (Index n = 0; n <= n_heads; ++n) {
    const double left = count_budget - head_cost * static_cast<double>(n);
    if (left < 0) break;
    const double q = std::floor(left / filter_cost);
    Index f = q >= static_cast<double>(n_filters) ? n_filters : static_cast<Index>(q);

    MaskSet m = all_candidates_pruned;
    for (Index j = n_heads - n; j < n_heads; ++j) m.heads[space.heads[j].layer](space.heads[j].unit) = 1.0;
    for (Index j = n_filters - f; j < n_filters; ++j) m.filters[space.filters[j].layer](space.filters[j].unit) = 1.0;
    // Guard against rounding in the closed-form count.
    double cost = actual_cost(m);
    while (cost > budget && f > 0) {
      const auto& u = space.filters[n_filters - f];
      m.filters[u.layer](u.unit) = 0.0;
      --f;
      cost = actual_cost(m);
    }
    if (cost > budget) continue;

    const double s = pruned_importance(diag, m);
    if (!found || s < best.pruned_importance) {
      found = true;
      best.masks = std::move(m);
      best.pruned_importance = s;
      best.achieved_cost = cost;
      best.n_star = n + pre_kept_heads;
    }
  }
  if (!found) throw std::logic_error("search: no feasible mask");
  return best;
}

}  // namespace

InfeasibleConstraint::InfeasibleConstraint(double floor, double requested)
    : std::runtime_error([&] {
        std::ostringstream os;
        os.precision(17);
        os << "latency constraint " << requested << " is below the floor " << floor;
        return os.str();
      }()),
      floor_(floor) {}

double pruned_importance(const FisherDiagonal& diag, const MaskSet& masks) {
  double s = 0;
  for (Index l = 0; l < diag.layers(); ++l) {
    for (Index i = 0; i < diag.heads(); ++i)
      if (masks.heads[l](i) == 0.0) s += diag.head_scores(l, i);
    for (Index i = 0; i < diag.filters(); ++i)
      if (masks.filters[l](i) == 0.0) s += diag.filter_scores(l, i);
  }
  return s;
}

SearchResult search_flops(const FisherDiagonal& diag, const FlopsCost& cost, double budget) {
  check_scores(diag);
  if (!(budget >= 0)) throw std::invalid_argument("search_flops: constraint must be >= 0");
  if (!(cost.head > 0) || !(cost.filter > 0)) throw std::invalid_argument("search_flops: unit costs must be > 0");
  SearchSpace space;
  space.heads = ascending_units(diag.head_scores, nullptr);
  space.filters = ascending_units(diag.filter_scores, nullptr);
  space.kept_heads.assign(diag.layers(), std::vector<bool>(diag.heads(), false));
  space.kept_filters.assign(diag.layers(), std::vector<bool>(diag.filters(), false));
  return search_counts(diag, space, cost.head, cost.filter, budget, budget,
                       [&](const MaskSet& m) { return mask_flops(m, cost); }, 0);
}

SearchResult search_latency(const FisherDiagonal& diag, const LatencyModel& lat, double budget) {
  check_scores(diag);
  if (!(budget >= 0)) throw std::invalid_argument("search_latency: constraint must be >= 0");
  if (!(lat.mha.a > 0) || !(lat.ffn.a > 0)) throw std::invalid_argument("search_latency: slopes must be > 0");

  // Same accumulation order as mask_latency so that C == floor is feasible.
  double floor = 0;
  for (Index l = 0; l < diag.layers(); ++l) {
    floor += lat.mha.c;
    floor += lat.ffn.c;
  }
  if (budget < floor) throw InfeasibleConstraint(floor, budget);

  SearchSpace space;
  space.kept_heads = top_per_layer(diag.head_scores, lat.mha.threshold);
  space.kept_filters = top_per_layer(diag.filter_scores, lat.ffn.threshold);
  space.heads = ascending_units(diag.head_scores, &space.kept_heads);
  space.filters = ascending_units(diag.filter_scores, &space.kept_filters);
  const Index pre_kept = diag.layers() * std::min(lat.mha.threshold, diag.heads());

  // Candidate counts come from the linear part; feasibility is checked
  // against the full piecewise model.
  const double linear_budget = budget - floor;
  SearchResult r = search_counts(
      diag, space, lat.mha.a, lat.ffn.a, linear_budget, budget,
      [&](const MaskSet& m) { return mask_latency(m, lat); }, pre_kept);
  r.achieved_cost = mask_latency(r.masks, lat);
  return r;
}

SupportCost flops_support_cost(const FlopsCost& cost) {
  return [cost](std::span<const Index> heads, std::span<const Index> filters) {
    Index h = 0, f = 0;
    for (auto v : heads) h += v;
    for (auto v : filters) f += v;
    return cost.of(h, f);
  };
}

SupportCost latency_support_cost(const LatencyModel& lat, bool require_threshold) {
  return [lat, require_threshold](std::span<const Index> heads, std::span<const Index> filters) {
    double total = 0;
    for (std::size_t l = 0; l < heads.size(); ++l) {
      if (require_threshold && (heads[l] < lat.mha.threshold || filters[l] < lat.ffn.threshold))
        return std::numeric_limits<double>::infinity();
      total += lat.mha(heads[l]);
      total += lat.ffn(filters[l]);
    }
    return total;
  };
}

SearchResult brute_force_search(const FisherDiagonal& diag, const SupportCost& cost, double budget) {
  check_scores(diag);
  const Index layers = diag.layers(), heads = diag.heads(), filters = diag.filters();
  const Index vars = layers * (heads + filters);
  const Index width = heads + filters;
  double combos = 1;
  for (Index l = 0; l < layers; ++l) combos *= static_cast<double>((heads + 1) * (filters + 1));
  if (vars > kBruteForceMaxVariables || width > 24 || combos > 16777216.0)
    throw std::invalid_argument("brute_force_search: instance too large (" + std::to_string(vars) + " variables)");

  // Every subset of every layer, reduced to the cheapest pruned set per
  // (kept heads, kept filters) pair; the first subset in counter order wins ties.
  struct Best {
    double score = std::numeric_limits<double>::infinity();
    std::uint32_t bits = 0;  // bit set = unit kept; heads first, then filters
  };
  const Index pairs = (heads + 1) * (filters + 1);
  std::vector<std::vector<Best>> best(layers, std::vector<Best>(pairs));
  const std::uint32_t head_mask = (1u << heads) - 1;
  for (Index l = 0; l < layers; ++l) {
    for (std::uint32_t bits = 0; bits < (1u << width); ++bits) {
      double s = 0;
      for (Index i = 0; i < heads; ++i)
        if (!(bits >> i & 1u)) s += diag.head_scores(l, i);
      for (Index i = 0; i < filters; ++i)
        if (!(bits >> (heads + i) & 1u)) s += diag.filter_scores(l, i);
      const Index key = std::popcount(bits & head_mask) * (filters + 1) + std::popcount(bits >> heads);
      if (s < best[l][key].score) best[l][key] = {s, bits};
    }
  }

  // Every combination of per-layer counts, as a mixed-radix counter.
  std::vector<Index> digit(layers, 0), kept_heads(layers), kept_filters(layers), choice;
  double best_total = std::numeric_limits<double>::infinity();
  for (;;) {
    for (Index l = 0; l < layers; ++l) {
      kept_heads[l] = digit[l] / (filters + 1);
      kept_filters[l] = digit[l] % (filters + 1);
    }
    if (cost(kept_heads, kept_filters) <= budget) {
      double total = 0;
      for (Index l = 0; l < layers; ++l) total += best[l][digit[l]].score;
      if (total < best_total) {
        best_total = total;
        choice = digit;
      }
    }
    Index l = 0;
    while (l < layers && ++digit[l] == pairs) digit[l++] = 0;
    if (l == layers) break;
  }
  if (choice.empty()) throw std::invalid_argument("brute_force_search: no feasible mask");

  SearchResult r;
  r.masks.heads.assign(layers, Vector::Zero(heads));
  r.masks.filters.assign(layers, Vector::Zero(filters));
  for (Index l = 0; l < layers; ++l) {
    const std::uint32_t bits = best[l][choice[l]].bits;
    for (Index i = 0; i < heads; ++i)
      if (bits >> i & 1u) r.masks.heads[l](i) = 1.0;
    for (Index i = 0; i < filters; ++i)
      if (bits >> (heads + i) & 1u) r.masks.filters[l](i) = 1.0;
    kept_heads[l] = std::popcount(bits & head_mask);
    kept_filters[l] = std::popcount(bits >> heads);
  }
  r.pruned_importance = pruned_importance(diag, r.masks);
  r.achieved_cost = cost(kept_heads, kept_filters);
  r.n_star = r.masks.nonzero_heads();
  return r;
}

double Constraint::resolve(double full_cost) const {
  if (kind == Kind::ratio) {
    if (!(value > 0 && value <= 1)) throw std::invalid_argument("constraint ratio must be in (0, 1]");
    return value == 1.0 ? full_cost : value * full_cost;
  }
  if (!(value >= 0)) throw std::invalid_argument("absolute constraint must be >= 0");
  return value;
}

}  // namespace maskprune
