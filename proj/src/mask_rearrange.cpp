#include "maskprune/mask_rearrange.hpp"

#include <json.hpp>

#include <algorithm>
#include <stdexcept>

namespace maskprune {

double block_objective(const Matrix& block, const Vector& mask) {
  if (block.rows() != block.cols() || block.rows() != mask.size())
    throw std::invalid_argument("block_objective: dimension mismatch");
  double s = 0;
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask(i) != 0.0) continue;
    for (Index j = 0; j < mask.size(); ++j)
      if (mask(j) == 0.0) s += block(i, j);
  }
  return s;
}

LayerRearrangement rearrange_layer(const Matrix& block, const Vector& mask, const RearrangeOptions& options) {
  if (block.rows() != block.cols() || block.rows() != mask.size())
    throw std::invalid_argument("rearrange_layer: dimension mismatch");
  if (!((mask.array() == 0.0) || (mask.array() == 1.0)).all())
    throw std::invalid_argument("rearrange_layer: mask must be binary");

  const Index n = mask.size();
  LayerRearrangement out;
  out.mask = mask;
  out.initial_objective = block_objective(block, mask);
  out.tracked_objective = out.initial_objective;

  std::vector<bool> pruned(n);
  for (Index i = 0; i < n; ++i) pruned[i] = mask(i) == 0.0;

  // row_sum(x) = sum_{b pruned} I(x, b)
  Vector row_sum = Vector::Zero(n);
  for (Index b = 0; b < n; ++b)
    if (pruned[b]) row_sum += block.col(b);

  for (int pass = 0; pass < options.passes; ++pass) {
    std::vector<Index> order;
    for (Index i = 0; i < n; ++i)
      if (pruned[i]) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return block(a, a) > block(b, b); });

    Index swaps_this_pass = 0;
    for (Index i : order) {
      // Swapping pruned i with unpruned j changes the objective by
      //   -2 rs(i) + I_ii + 2 rs(j) - 2 I_ij + I_jj.
      Index best_j = -1;
      double best_delta = -options.min_improvement;
      for (Index j = 0; j < n; ++j) {
        if (pruned[j]) continue;
        const double delta = -2.0 * row_sum(i) + block(i, i) + 2.0 * row_sum(j) - 2.0 * block(i, j) + block(j, j);
        if (delta < best_delta) {
          best_delta = delta;
          best_j = j;
        }
      }
      if (best_j < 0) continue;
      pruned[i] = false;
      pruned[best_j] = true;
      row_sum += block.col(best_j) - block.col(i);
      out.mask(i) = 1.0;
      out.mask(best_j) = 0.0;
      out.tracked_objective += best_delta;
      ++out.swaps;
      ++swaps_this_pass;
    }
    if (swaps_this_pass == 0) break;
  }
  out.final_objective = block_objective(block, out.mask);
  return out;
}

std::pair<MaskSet, RearrangeReport> rearrange(const FisherBlocks& blocks, const MaskSet& masks,
                                              const RearrangeOptions& options) {
  if (!masks.is_binary()) throw std::invalid_argument("rearrange: masks must be binary");
  if (blocks.head_blocks.size() != masks.heads.size() || blocks.filter_blocks.size() != masks.filters.size())
    throw std::invalid_argument("rearrange: layer count mismatch");

  MaskSet out = masks;
  RearrangeReport report;
  for (std::size_t l = 0; l < masks.heads.size(); ++l) {
    for (SublayerKind kind : {SublayerKind::attention, SublayerKind::feedforward}) {
      const bool attention = kind == SublayerKind::attention;
      const Matrix& block = attention ? blocks.head_blocks[l] : blocks.filter_blocks[l];
      const Vector& m = attention ? masks.heads[l] : masks.filters[l];
      const LayerRearrangement r = rearrange_layer(block, m, options);
      (attention ? out.heads[l] : out.filters[l]) = r.mask;
      const Index pruned_before = (m.array() == 0.0).count();
      const Index pruned_after = (r.mask.array() == 0.0).count();
      report.cost_unchanged = report.cost_unchanged && pruned_before == pruned_after;
      report.entries.push_back({static_cast<Index>(l), kind, pruned_after, r.swaps, r.initial_objective,
                                r.final_objective});
    }
  }
  return {std::move(out), std::move(report)};
}

std::string RearrangeReport::to_json() const {
  nlohmann::ordered_json j;
  j["cost_unchanged"] = cost_unchanged;
  auto& layers = j["layers"] = nlohmann::ordered_json::array();
  for (const auto& e : entries)
    layers.push_back({{"layer", e.layer},
                      {"kind", to_string(e.kind)},
                      {"pruned", e.pruned},
                      {"swaps", e.swaps},
                      {"initial_objective", e.initial_objective},
                      {"final_objective", e.final_objective}});
  return j.dump(2) + "\n";
}

}  // namespace maskprune
