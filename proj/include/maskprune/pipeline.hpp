#pragma once

#include "maskprune/cost_model.hpp"
#include "maskprune/fisher.hpp"
#include "maskprune/mask_rearrange.hpp"
#include "maskprune/mask_search.hpp"
#include "maskprune/mask_tune.hpp"
#include "maskprune/toy_model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace maskprune {

enum class ConstraintMode { flops, latency };
enum class ImportanceMetric { fisher, magnitude, gradient };

const char* to_string(ConstraintMode mode);
const char* to_string(ImportanceMetric metric);
ConstraintMode parse_constraint_mode(const std::string& s);
ImportanceMetric parse_importance_metric(const std::string& s);

/// Thrown for bad configuration or missing inputs (CLI exit code 1).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PruneConfig {
  ConstraintMode mode = ConstraintMode::flops;
  Constraint constraint;  // ratio of full cost by default
  Index samples = 256;
  std::uint64_t seed = 0;

  // Inputs. An empty model/data path means "generate from seed and toy_shape".
  std::string model_path;
  std::string data_path;
  std::string latency_path;  // fitted model (.json) or lookup table (.csv)
  std::string out_dir;
  ModelShape toy_shape = make_shape(4, 4, 32, 32, 8, 8, 8);

  bool rearrange = true;
  bool tune = true;
  ImportanceMetric metric = ImportanceMetric::fisher;

  RearrangeOptions rearrange_options;
  TuneOptions tune_options;
  std::optional<double> flops_head;    // override F_head
  std::optional<double> flops_filter;  // override F_filter

  static PruneConfig from_json(const std::string& text);
  std::string to_json() const;
  void validate() const;
};

/// Importance scores for the search stage. `fisher` is the empirical Fisher
/// diagonal; `magnitude` sums absolute weights owned by a head/filter;
/// `gradient` is |mean gradient| over the samples.
FisherDiagonal importance_scores(ImportanceMetric metric, const ToyTransformer& model,
                                 const std::vector<Vector>& grads);

struct StageTimings {
  double gradients = 0;
  double search = 0;
  double rearrange = 0;
  double tune = 0;
};

struct PipelineResult {
  double budget = 0;
  double full_cost = 0;
  SearchResult search;
  MaskSet after_rearrange;
  RearrangeReport rearrange_report;
  TuneReport tune_report;
  MaskSet final_masks;
  StageTimings timings;
};

FlopsCost config_flops(const PruneConfig& config, const ModelShape& shape);

/// gradients -> Fisher -> search -> (rearrange) -> (tune). Throws
/// InfeasibleConstraint for an unreachable latency budget.
PipelineResult run_pipeline(const ToyTransformer& model, const SampleBatch& samples, const PruneConfig& config,
                            const LatencyModel* latency = nullptr);

/// Writes search.json, rearrange.json, tune.json, masks/, masks_search/,
/// masks_rearrange/ and timing.csv into `dir`.
void write_pipeline_outputs(const PipelineResult& result, const PruneConfig& config,
                            const std::filesystem::path& dir);

std::string search_result_to_json(const SearchResult& r, double budget, double full_cost, const char* cost_unit);

struct Metrics {
  Index examples = 0;
  double loss = 0;
  double accuracy = 0;
  double flops_ratio = 0;
  std::optional<double> latency;

  std::string to_json() const;
  std::string to_csv() const;
};

Metrics evaluate(const ToyTransformer& model, const MaskSet& masks, const SampleBatch& data,
                 const FlopsCost& cost, const LatencyModel* latency = nullptr);

struct SweepRow {
  double target_ratio = 0;
  double achieved_ratio = 0;
  double loss = 0;
  double accuracy = 0;
  bool ok = true;
  std::string error;
};

/// Runs the pipeline per target ratio and evaluates on `eval_data`. Failed
/// targets are recorded (ok = false) and the sweep continues.
std::vector<SweepRow> sweep(const ToyTransformer& model, const SampleBatch& samples, const SampleBatch& eval_data,
                            const PruneConfig& config, const std::vector<double>& targets,
                            const LatencyModel* latency = nullptr);

/// `target_ratio,achieved_ratio,loss,accuracy`; failed rows carry nan.
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Loads or generates the model, samples and latency model named by `config`.
struct PipelineInputs {
  ToyTransformer model;
  SampleBatch data;
  std::optional<LatencyModel> latency;
};
PipelineInputs load_inputs(const PruneConfig& config);

/// Synthetic lookup table from a piecewise model, one row per n in 1..width,
/// with optional relative Gaussian noise.
LatencyTable synthesize_latency_table(const ModelShape& shape, const LatencyModel& truth, double noise,
                                      std::uint64_t seed);

}  // namespace maskprune
