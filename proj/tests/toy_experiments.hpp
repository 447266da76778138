#pragma once

// Seeded end-to-end runs on the default toy task, shared by the pipeline
// tests and the acceptance suite.

#include "maskprune/pipeline.hpp"

#include <vector>

namespace maskprune::testing {

struct AblationRun {
  double search_only_loss = 0;  // sample-set loss of the stage-1 mask
  double before_tune_loss = 0;  // after rearrangement
  double full_loss = 0;         // after rearrangement and tuning
};

/// Default config at a 60% FLOPs target; losses are measured on the samples
/// the pipeline itself used.
inline AblationRun run_ablation(std::uint64_t seed, double target = 0.6) {
  PruneConfig config;
  config.seed = seed;
  config.constraint = {Constraint::Kind::ratio, target};
  const PipelineInputs in = load_inputs(config);
  const PipelineResult r = run_pipeline(in.model, in.data, config);
  const FlopsCost flops = config_flops(config, in.model.shape);
  return {evaluate(in.model, r.search.masks, in.data, flops).loss,
          evaluate(in.model, r.after_rearrange, in.data, flops).loss,
          evaluate(in.model, r.final_masks, in.data, flops).loss};
}

/// Held-out losses for the default sweep targets {0.4, 0.6, 0.8, 1.0}.
inline std::vector<SweepRow> run_default_sweep(std::uint64_t seed) {
  PruneConfig config;
  config.seed = seed;
  const PipelineInputs in = load_inputs(config);
  const SampleBatch held_out = generate_toy_data(in.model, 512, seed + 1000);
  return sweep(in.model, in.data, held_out, config, {0.4, 0.6, 0.8, 1.0});
}

}  // namespace maskprune::testing
