#include "maskprune/pipeline.hpp"

#include "maskprune/random.hpp"
#include "maskprune/tensor_io.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace maskprune {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const char* to_string(ConstraintMode mode) { return mode == ConstraintMode::flops ? "flops" : "latency"; }

const char* to_string(ImportanceMetric metric) {
  switch (metric) {
    case ImportanceMetric::fisher: return "fisher";
    case ImportanceMetric::magnitude: return "magnitude";
    case ImportanceMetric::gradient: return "gradient";
  }
  return "unknown";
}

ConstraintMode parse_constraint_mode(const std::string& s) {
  if (s == "flops") return ConstraintMode::flops;
  if (s == "latency") return ConstraintMode::latency;
  throw InputError("unknown constraint mode '" + s + "' (expected flops or latency)");
}

ImportanceMetric parse_importance_metric(const std::string& s) {
  if (s == "fisher") return ImportanceMetric::fisher;
  if (s == "magnitude") return ImportanceMetric::magnitude;
  if (s == "gradient") return ImportanceMetric::gradient;
  throw InputError("unknown importance metric '" + s + "'");
}

// --- Config ------------------------------------------------------------------

PruneConfig PruneConfig::from_json(const std::string& text) {
  PruneConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  try {
    if (j.contains("mode")) c.mode = parse_constraint_mode(j["mode"].get<std::string>());
    if (j.contains("target")) c.constraint.value = j["target"].get<double>();
    if (j.contains("target_kind")) {
      const auto kind = j["target_kind"].get<std::string>();
      if (kind == "ratio") c.constraint.kind = Constraint::Kind::ratio;
      else if (kind == "absolute") c.constraint.kind = Constraint::Kind::absolute;
      else throw InputError("config: target_kind must be ratio or absolute");
    }
    c.samples = j.value("samples", c.samples);
    c.seed = j.value("seed", c.seed);
    c.model_path = j.value("model", c.model_path);
    c.data_path = j.value("data", c.data_path);
    c.latency_path = j.value("latency", c.latency_path);
    c.out_dir = j.value("out", c.out_dir);
    if (j.contains("toy_shape")) {
      const auto& s = j["toy_shape"];
      c.toy_shape = make_shape(s.value("layers", c.toy_shape.layers), s.value("heads", c.toy_shape.heads),
                               s.value("filters", c.toy_shape.filters), s.value("hidden", c.toy_shape.hidden),
                               s.value("seq_len", c.toy_shape.seq_len), s.value("features", c.toy_shape.features),
                               s.value("classes", c.toy_shape.classes));
    }
    if (j.contains("stages")) {
      c.rearrange = j["stages"].value("rearrange", c.rearrange);
      c.tune = j["stages"].value("tune", c.tune);
    }
    if (j.contains("metric")) c.metric = parse_importance_metric(j["metric"].get<std::string>());
    c.rearrange_options.passes = j.value("rearrange_passes", c.rearrange_options.passes);
    if (j.contains("tune")) {
      const auto& t = j["tune"];
      c.tune_options.damp = t.value("damp", c.tune_options.damp);
      c.tune_options.lower = t.value("lower", c.tune_options.lower);
      c.tune_options.upper = t.value("upper", c.tune_options.upper);
      c.tune_options.tol = t.value("tol", c.tune_options.tol);
      c.tune_options.max_iterations = t.value("max_iterations", c.tune_options.max_iterations);
      c.tune_options.original_inputs = t.value("original_inputs", c.tune_options.original_inputs);
    }
    if (j.contains("flops")) {
      if (j["flops"].contains("head")) c.flops_head = j["flops"]["head"].get<double>();
      if (j["flops"].contains("filter")) c.flops_filter = j["flops"]["filter"].get<double>();
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  } catch (const ShapeError& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  return c;
}

std::string PruneConfig::to_json() const {
  json j;
  j["mode"] = to_string(mode);
  j["target"] = constraint.value;
  j["target_kind"] = constraint.kind == Constraint::Kind::ratio ? "ratio" : "absolute";
  j["samples"] = samples;
  j["seed"] = seed;
  j["model"] = model_path;
  j["data"] = data_path;
  j["latency"] = latency_path;
  j["out"] = out_dir;
  j["toy_shape"] = json::parse(shape_to_json(toy_shape));
  j["stages"] = {{"rearrange", rearrange}, {"tune", tune}};
  j["metric"] = to_string(metric);
  j["rearrange_passes"] = rearrange_options.passes;
  j["tune"] = {{"damp", tune_options.damp},
               {"lower", tune_options.lower},
               {"upper", tune_options.upper},
               {"tol", tune_options.tol},
               {"max_iterations", tune_options.max_iterations},
               {"original_inputs", tune_options.original_inputs}};
  if (flops_head || flops_filter) {
    j["flops"] = json::object();
    if (flops_head) j["flops"]["head"] = *flops_head;
    if (flops_filter) j["flops"]["filter"] = *flops_filter;
  }
  return j.dump(2) + "\n";
}

void PruneConfig::validate() const {
  if (constraint.kind == Constraint::Kind::ratio && !(constraint.value > 0 && constraint.value <= 1))
    throw InputError("target ratio must be in (0, 1]");
  if (constraint.kind == Constraint::Kind::absolute && !(constraint.value >= 0))
    throw InputError("absolute target must be >= 0");
  if (samples < 1) throw InputError("samples must be >= 1");
  if (rearrange_options.passes < 1) throw InputError("rearrange_passes must be >= 1");
  if (!(tune_options.damp >= 0)) throw InputError("tune.damp must be >= 0");
  if (!(tune_options.lower <= 1.0 && tune_options.upper >= 1.0)) throw InputError("tune range must contain 1");
  if (mode == ConstraintMode::latency && latency_path.empty())
    throw InputError("latency mode requires a latency model or table");
  for (const auto* p : {&model_path, &data_path, &latency_path})
    if (!p->empty() && !fs::exists(*p)) throw InputError("input path does not exist: " + *p);
}

// --- Importance metrics --------------------------------------------------------

FisherDiagonal importance_scores(ImportanceMetric metric, const ToyTransformer& model,
                                 const std::vector<Vector>& grads) {
  const auto& shape = model.shape;
  switch (metric) {
    case ImportanceMetric::fisher:
      return fisher_diagonal(grads, shape);
    case ImportanceMetric::gradient: {
      if (grads.empty()) throw std::invalid_argument("importance_scores: no gradients");
      Vector mean = Vector::Zero(shape.mask_count());
      for (const auto& g : grads) mean += g;
      mean *= 1.0 / static_cast<double>(grads.size());
      const MaskSet m = MaskSet::unflatten(shape, mean.cwiseAbs());
      FisherDiagonal d;
      d.head_scores.resize(shape.layers, shape.heads);
      d.filter_scores.resize(shape.layers, shape.filters);
      for (Index l = 0; l < shape.layers; ++l) {
        d.head_scores.row(l) = m.heads[l].transpose();
        d.filter_scores.row(l) = m.filters[l].transpose();
      }
      return d;
    }
    case ImportanceMetric::magnitude: {
      FisherDiagonal d;
      d.head_scores.resize(shape.layers, shape.heads);
      d.filter_scores.resize(shape.layers, shape.filters);
      for (Index l = 0; l < shape.layers; ++l) {
        const auto& layer = model.layers[l];
        for (Index i = 0; i < shape.heads; ++i) {
          const auto& h = layer.heads[i];
          d.head_scores(l, i) = h.wq.cwiseAbs().sum() + h.wk.cwiseAbs().sum() + h.wv.cwiseAbs().sum() +
                                h.wo.cwiseAbs().sum();
        }
        for (Index i = 0; i < shape.filters; ++i)
          d.filter_scores(l, i) =
              layer.w1.row(i).cwiseAbs().sum() + std::abs(layer.b1(i)) + layer.w2.col(i).cwiseAbs().sum();
      }
      return d;
    }
  }
  throw std::logic_error("unreachable");
}

// --- Pipeline --------------------------------------------------------------------

FlopsCost config_flops(const PruneConfig& config, const ModelShape& shape) {
  FlopsCost cost = flops_constants(shape);
  if (config.flops_head) cost.head = *config.flops_head;
  if (config.flops_filter) cost.filter = *config.flops_filter;
  if (!(cost.head > 0) || !(cost.filter > 0)) throw InputError("FLOPs constants must be > 0");
  return cost;
}

namespace {

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - start_).count();
    start_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

PipelineResult run_pipeline(const ToyTransformer& model, const SampleBatch& samples, const PruneConfig& config,
                            const LatencyModel* latency) {
  if (samples.size() == 0) throw InputError("empty sample set");
  if (config.mode == ConstraintMode::latency && !latency) throw InputError("latency mode requires a latency model");
  const SampleBatch batch = samples.size() > config.samples ? samples.slice(0, config.samples) : samples;
  const FlopsCost flops = config_flops(config, model.shape);

  PipelineResult r;
  Stopwatch watch;
  const auto grads = mask_gradients(model, batch);
  const FisherDiagonal scores = importance_scores(config.metric, model, grads);
  std::optional<FisherBlocks> blocks;
  if (config.rearrange) blocks = fisher_blocks(grads, model.shape);
  r.timings.gradients = watch.lap();

  if (config.mode == ConstraintMode::flops) {
    r.full_cost = flops.full_cost();
    r.budget = config.constraint.resolve(r.full_cost);
    r.search = search_flops(scores, flops, r.budget);
  } else {
    r.full_cost = full_latency(model.shape, *latency);
    r.budget = config.constraint.resolve(r.full_cost);
    r.search = search_latency(scores, *latency, r.budget);
  }
  r.timings.search = watch.lap();

  r.after_rearrange = r.search.masks;
  if (config.rearrange) {
    auto [masks, report] = rearrange(*blocks, r.search.masks, config.rearrange_options);
    r.after_rearrange = std::move(masks);
    r.rearrange_report = std::move(report);
  }
  r.timings.rearrange = watch.lap();

  r.final_masks = r.after_rearrange;
  if (config.tune) {
    auto [masks, report] = tune_model(model, batch, r.after_rearrange, config.tune_options);
    r.final_masks = std::move(masks);
    r.tune_report = std::move(report);
  }
  r.timings.tune = watch.lap();
  return r;
}

std::string search_result_to_json(const SearchResult& r, double budget, double full_cost, const char* cost_unit) {
  json j;
  j["budget"] = budget;
  j["full_cost"] = full_cost;
  j["cost_unit"] = cost_unit;
  j["achieved_cost"] = r.achieved_cost;
  j["pruned_importance"] = r.pruned_importance;
  j["n_star"] = r.n_star;
  auto& layers = j["layers"] = json::array();
  for (std::size_t l = 0; l < r.masks.heads.size(); ++l) {
    json kept_heads = json::array(), kept_filters = json::array();
    for (Index i = 0; i < r.masks.heads[l].size(); ++i)
      if (r.masks.heads[l](i) != 0.0) kept_heads.push_back(i);
    for (Index i = 0; i < r.masks.filters[l].size(); ++i)
      if (r.masks.filters[l](i) != 0.0) kept_filters.push_back(i);
    layers.push_back({{"layer", l}, {"kept_heads", kept_heads}, {"kept_filters", kept_filters}});
  }
  return j.dump(2) + "\n";
}

void write_pipeline_outputs(const PipelineResult& result, const PruneConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  write_file_atomic(dir / "search.json",
                    search_result_to_json(result.search, result.budget, result.full_cost,
                                          config.mode == ConstraintMode::flops ? "flops" : "seconds"));
  save_masks(result.search.masks, dir / "masks_search");
  if (config.rearrange) {
    write_file_atomic(dir / "rearrange.json", result.rearrange_report.to_json());
    save_masks(result.after_rearrange, dir / "masks_rearrange");
  }
  if (config.tune) write_file_atomic(dir / "tune.json", result.tune_report.to_json());
  save_masks(result.final_masks, dir / "masks");

  std::ostringstream timing;
  timing << "stage,seconds\n"
         << "gradient_computation," << fmt_double(result.timings.gradients) << '\n'
         << "mask_search," << fmt_double(result.timings.search) << '\n'
         << "mask_rearrangement," << fmt_double(result.timings.rearrange) << '\n'
         << "mask_tuning," << fmt_double(result.timings.tune) << '\n';
  write_file_atomic(dir / "timing.csv", timing.str());
}

// --- Evaluation ------------------------------------------------------------------

Metrics evaluate(const ToyTransformer& model, const MaskSet& masks, const SampleBatch& data, const FlopsCost& cost,
                 const LatencyModel* latency) {
  if (data.size() == 0) throw InputError("eval: empty data");
  const ForwardResult fr = forward(model, masks, data);
  Metrics m;
  m.examples = data.size();
  m.loss = fr.loss;
  m.accuracy = fr.accuracy(data);
  m.flops_ratio = mask_flops(masks, cost) / cost.full_cost();
  if (latency) m.latency = mask_latency(masks, *latency);
  return m;
}

std::string Metrics::to_json() const {
  json j;
  j["examples"] = examples;
  j["loss"] = loss;
  j["accuracy"] = accuracy;
  j["flops_ratio"] = flops_ratio;
  if (latency) j["latency_seconds"] = *latency;
  return j.dump(2) + "\n";
}

std::string Metrics::to_csv() const {
  std::ostringstream os;
  os << "examples,loss,accuracy,flops_ratio,latency_seconds\n"
     << examples << ',' << fmt_double(loss) << ',' << fmt_double(accuracy) << ',' << fmt_double(flops_ratio) << ','
     << (latency ? fmt_double(*latency) : std::string()) << '\n';
  return os.str();
}

std::vector<SweepRow> sweep(const ToyTransformer& model, const SampleBatch& samples, const SampleBatch& eval_data,
                            const PruneConfig& config, const std::vector<double>& targets,
                            const LatencyModel* latency) {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!(targets[i] > 0 && targets[i] <= 1)) throw InputError("sweep targets must lie in (0, 1]");
    if (i > 0 && targets[i] < targets[i - 1]) throw InputError("sweep targets must be sorted");
  }
  const FlopsCost flops = config_flops(config, model.shape);
  std::vector<SweepRow> rows;
  for (double t : targets) {
    SweepRow row;
    row.target_ratio = t;
    try {
      PruneConfig c = config;
      c.constraint = {Constraint::Kind::ratio, t};
      const PipelineResult r = run_pipeline(model, samples, c, latency);
      const Metrics m = evaluate(model, r.final_masks, eval_data, flops, latency);
      row.achieved_ratio = c.mode == ConstraintMode::flops ? m.flops_ratio : *m.latency / r.full_cost;
      row.loss = m.loss;
      row.accuracy = m.accuracy;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
      row.achieved_ratio = row.loss = row.accuracy = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "target_ratio,achieved_ratio,loss,accuracy\n";
  for (const auto& r : rows) {
    if (r.ok)
      os << fmt_double(r.target_ratio) << ',' << fmt_double(r.achieved_ratio) << ',' << fmt_double(r.loss) << ','
         << fmt_double(r.accuracy) << '\n';
    else
      os << fmt_double(r.target_ratio) << ",nan,nan,nan\n";
  }
  return os.str();
}

// --- Inputs ----------------------------------------------------------------------

PipelineInputs load_inputs(const PruneConfig& config) {
  config.validate();
  PipelineInputs in;
  in.model = config.model_path.empty() ? init_toy_model(config.toy_shape, config.seed) : load_model(config.model_path);
  in.data = config.data_path.empty() ? generate_toy_data(in.model, config.samples, config.seed)
                                     : load_batch(config.data_path);
  if (!config.latency_path.empty()) {
    const fs::path p = config.latency_path;
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    if (p.extension() == ".csv") {
      LatencyTable table = parse_latency_csv(ss.str());
      table.validate(&in.model.shape);
      in.latency = fit_latency_model(table);
    } else {
      in.latency = latency_model_from_json(ss.str());
    }
  }
  return in;
}

LatencyTable synthesize_latency_table(const ModelShape& shape, const LatencyModel& truth, double noise,
                                      std::uint64_t seed) {
  auto rng = make_rng(seed, "latency");
  std::normal_distribution<double> dist(0.0, 1.0);
  LatencyTable table;
  for (LayerKind kind : {LayerKind::mha, LayerKind::ffn}) {
    const Index width = kind == LayerKind::mha ? shape.heads : shape.filters;
    for (Index n = 1; n <= width; ++n) {
      const double clean = truth.of(kind)(n);
      table.entries.push_back({kind, n, clean * (1.0 + noise * dist(rng))});
    }
  }
  return table;
}

}  // namespace maskprune
