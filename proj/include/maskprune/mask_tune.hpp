#pragma once

#include "maskprune/numerics.hpp"
#include "maskprune/toy_model.hpp"

#include <string>
#include <utility>
#include <vector>

namespace maskprune {

/// Least-squares system for one sublayer: columns of A are the unpruned
/// units' outputs over every token of the sample set, and b is the original
/// model's post-residual output minus everything the mask does not scale
/// (the pruned model's input x and, for FFN, the output bias b2).
struct ReconProblem {
  SublayerId id;
  Matrix A;  // (tokens * hidden) x k
  Vector b;  // tokens * hidden
  std::vector<Index> unit_ids;
};

ReconProblem build_recon_problem(const LayerIO& io);
ReconProblem build_recon_problem(const ToyTransformer& model, const MaskSet& pruned_masks, const SampleBatch& data,
                                 SublayerId id);

struct TuneOptions {
  double damp = 1.0;
  double lower = -10.0;
  double upper = 10.0;
  double tol = 1e-10;
  Index max_iterations = 0;  // 0: 10 * k
  /// Build A from the original model's sublayer inputs instead of the pruned
  /// (already tuned) model's.
  bool original_inputs = false;
};

struct LayerTune {
  Vector values;  // tuned mask values 1 + r, length k
  Vector delta;   // r
  bool accepted = false;
  bool converged = false;
  Index iterations = 0;
};

/// Solves argmin_r ||A r - (b - A 1)||^2 + damp^2 ||r||^2 and accepts the
/// candidate m = 1 + r iff every entry lies in [lower, upper] and the solver
/// converged.
LayerTune tune_layer(const ReconProblem& problem, const TuneOptions& options = {});

enum class TuneStatus { tuned, reverted_and_stopped, skipped_after_stop, empty };

const char* to_string(TuneStatus status);

struct TuneReport {
  struct Entry {
    SublayerId id;
    TuneStatus status = TuneStatus::tuned;
    Index units = 0;
    double min_value = 0;
    double max_value = 0;
    Index iterations = 0;
  };
  std::vector<Entry> entries;
  MaskSet final_masks;

  bool stopped() const;
  std::string to_json() const;
};

/// Tunes sublayers in forward order MHA_0, FFN_0, MHA_1, .... The first
/// rejected sublayer is reverted to its binary mask and tuning stops there;
/// earlier accepted sublayers keep their values. Pruned entries stay 0.
std::pair<MaskSet, TuneReport> tune_model(const ToyTransformer& model, const SampleBatch& data, const MaskSet& masks,
                                          const TuneOptions& options = {});

}  // namespace maskprune
