#pragma once

#include "maskprune/fisher.hpp"
#include "maskprune/toy_model.hpp"

#include <string>
#include <utility>
#include <vector>

namespace maskprune {

/// (1 - m)^T I (1 - m) for a binary mask: the sum of block entries over
/// pruned x pruned index pairs.
double block_objective(const Matrix& block, const Vector& mask);

struct LayerRearrangement {
  Vector mask;
  Index swaps = 0;
  double initial_objective = 0;
  double final_objective = 0;    // full re-evaluation
  double tracked_objective = 0;  // initial plus the sum of applied swap deltas
};

struct RearrangeOptions {
  /// Number of sweeps over the pruned units. With one sweep every pruned
  /// unit gets exactly one round.
  int passes = 1;
  /// A swap must decrease the objective by more than this.
  double min_improvement = 1e-12;
};

/// Greedy swap search within one block. Pruned units are visited once, in
/// descending diagonal order (ties by index); each may be exchanged with the
/// unpruned unit giving the largest strict decrease of the objective.
LayerRearrangement rearrange_layer(const Matrix& block, const Vector& mask, const RearrangeOptions& options = {});

struct RearrangeReport {
  struct Entry {
    Index layer = 0;
    SublayerKind kind = SublayerKind::attention;
    Index pruned = 0;
    Index swaps = 0;
    double initial_objective = 0;
    double final_objective = 0;
  };
  std::vector<Entry> entries;
  bool cost_unchanged = true;

  std::string to_json() const;
};

/// Applies rearrange_layer to every MHA and FFN block independently. Per-layer
/// pruned counts, and therefore FLOPs and latency, are unchanged.
std::pair<MaskSet, RearrangeReport> rearrange(const FisherBlocks& blocks, const MaskSet& masks,
                                              const RearrangeOptions& options = {});

}  // namespace maskprune
