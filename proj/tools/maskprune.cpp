// Command-line front end: toy model generation, the three pruning stages,
// end-to-end runs, sweeps and evaluation.
//
// Exit codes: 0 ok, 1 input error, 2 infeasible constraint, 3 internal error.

#include "maskprune/pipeline.hpp"
#include "maskprune/tensor_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace maskprune;

namespace {

enum ExitCode { kOk = 0, kInputError = 1, kInfeasible = 2, kInternal = 3 };

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& require_path(const fs::path& path, const char* what) {
  if (path.empty()) throw InputError(std::string("missing --") + what);
  if (!fs::exists(path)) throw InputError(std::string(what) + " not found: " + path.string());
  return path;
}

const fs::path& require_out(const fs::path& path) {
  if (path.empty()) throw InputError("missing --out (or \"out\" in the config)");
  return path;
}

// Flag values that override the JSON config when given on the command line.
struct Overrides {
  std::string mode, target_kind, metric, model, data, latency, out;
  double target = 0;
  Index samples = 0;
  std::uint64_t seed = 0;
  bool no_rearrange = false, no_tune = false, original_inputs = false;
  // One option per subcommand that shares this struct.
  std::vector<CLI::Option*> target_opts, samples_opts, seed_opts;

  static bool given(const std::vector<CLI::Option*>& opts) {
    for (const auto* o : opts)
      if (o->count()) return true;
    return false;
  }

  void add_to(CLI::App& app) {
    app.add_option("--mode", mode, "flops or latency");
    target_opts.push_back(app.add_option("--target", target, "Cost target (ratio of the full cost by default)"));
    app.add_option("--target-kind", target_kind, "ratio or absolute");
    app.add_option("--metric", metric, "fisher, magnitude or gradient");
    samples_opts.push_back(app.add_option("--samples", samples, "Number of sample examples"));
    seed_opts.push_back(app.add_option("--seed", seed, "Root seed"));
    app.add_option("--model", model, "Model directory (generated from the seed when omitted)");
    app.add_option("--data", data, "Sample directory (generated from the seed when omitted)");
    app.add_option("--latency", latency, "Latency model (.json) or lookup table (.csv)");
    app.add_option("--out", out, "Output path");
    app.add_flag("--no-rearrange", no_rearrange, "Skip mask rearrangement");
    app.add_flag("--no-tune", no_tune, "Skip mask tuning");
    app.add_flag("--original-inputs", original_inputs, "Tune against the original model's sublayer inputs");
  }

  void apply(PruneConfig& c) const {
    if (!mode.empty()) c.mode = parse_constraint_mode(mode);
    if (given(target_opts)) c.constraint.value = target;
    if (!target_kind.empty()) {
      if (target_kind == "ratio") c.constraint.kind = Constraint::Kind::ratio;
      else if (target_kind == "absolute") c.constraint.kind = Constraint::Kind::absolute;
      else throw InputError("--target-kind must be ratio or absolute");
    }
    if (!metric.empty()) c.metric = parse_importance_metric(metric);
    if (given(samples_opts)) c.samples = samples;
    if (given(seed_opts)) c.seed = seed;
    if (!model.empty()) c.model_path = model;
    if (!data.empty()) c.data_path = data;
    if (!latency.empty()) c.latency_path = latency;
    if (!out.empty()) c.out_dir = out;
    if (no_rearrange) c.rearrange = false;
    if (no_tune) c.tune = false;
    if (original_inputs) c.tune_options.original_inputs = true;
  }
};

struct Cli {
  std::string config_path;
  Overrides ov;

  PruneConfig config() const {
    PruneConfig c = config_path.empty() ? PruneConfig{} : PruneConfig::from_json(read_text(config_path));
    ov.apply(c);
    return c;
  }
};

void print_json(const std::string& text) { std::cout << text; }

int run(int argc, char** argv) {
  CLI::App app{"Post-training structured pruning of toy Transformer encoders"};
  app.require_subcommand(1);
  Cli cli;
  app.add_option("--config", cli.config_path, "JSON config file; command-line flags take precedence");

  // gen-toy
  auto* gen_toy = app.add_subcommand("gen-toy", "Generate a random toy model");
  Index layers = 4, heads = 4, filters = 32, hidden = 32, seq_len = 8, features = 8, classes = 8;
  CLI::Option* shape_opts[7];
  shape_opts[0] = gen_toy->add_option("--layers", layers);
  shape_opts[1] = gen_toy->add_option("--heads", heads);
  shape_opts[2] = gen_toy->add_option("--filters", filters);
  shape_opts[3] = gen_toy->add_option("--hidden", hidden);
  shape_opts[4] = gen_toy->add_option("--seq-len", seq_len);
  shape_opts[5] = gen_toy->add_option("--features", features);
  shape_opts[6] = gen_toy->add_option("--classes", classes);
  std::uint64_t toy_seed = 0;
  auto* toy_seed_opt = gen_toy->add_option("--seed", toy_seed);
  std::string toy_out;
  gen_toy->add_option("--out", toy_out, "Model directory")->required();

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "Sample toy data labelled by a teacher model");
  std::string data_model, data_out;
  Index data_count = 256;
  std::uint64_t data_seed = 0;
  bool unbalanced = false;
  gen_data->add_option("--model", data_model, "Teacher model directory")->required();
  gen_data->add_option("--count", data_count, "Number of examples");
  auto* data_seed_opt = gen_data->add_option("--seed", data_seed);
  gen_data->add_flag("--unbalanced", unbalanced, "Do not equalise class counts");
  gen_data->add_option("--out", data_out, "Data directory")->required();

  // gen-latency
  auto* gen_latency = app.add_subcommand("gen-latency", "Write a synthetic latency lookup table");
  std::string lat_model, lat_out;
  double mha_a = 40e-6, mha_c = 120e-6, ffn_a = 2e-6, ffn_c = 60e-6, lat_noise = 0;
  Index mha_t = 1, ffn_t = 8;
  std::uint64_t lat_seed = 0;
  gen_latency->add_option("--model", lat_model, "Model directory (for layer widths)")->required();
  gen_latency->add_option("--mha-a", mha_a, "MHA slope, seconds per head");
  gen_latency->add_option("--mha-c", mha_c, "MHA constant, seconds");
  gen_latency->add_option("--mha-t", mha_t, "MHA threshold");
  gen_latency->add_option("--ffn-a", ffn_a, "FFN slope, seconds per filter");
  gen_latency->add_option("--ffn-c", ffn_c, "FFN constant, seconds");
  gen_latency->add_option("--ffn-t", ffn_t, "FFN threshold");
  gen_latency->add_option("--noise", lat_noise, "Relative Gaussian noise");
  gen_latency->add_option("--seed", lat_seed);
  gen_latency->add_option("--out", lat_out, "CSV path")->required();

  // fisher
  auto* fisher = app.add_subcommand("fisher", "Compute the empirical Fisher diagonal and blocks");

  // fit-latency
  auto* fit = app.add_subcommand("fit-latency", "Fit piecewise latency models to a lookup table");
  std::string fit_table, fit_out;
  fit->add_option("--table", fit_table, "CSV with kind,n_active,latency_us")->required();
  fit->add_option("--out", fit_out, "Latency model JSON")->required();

  // search
  auto* search = app.add_subcommand("search", "Fisher-based mask search under a cost constraint");
  std::string search_fisher;
  search->add_option("--fisher", search_fisher, "Fisher directory")->required();

  // rearrange
  auto* rearr = app.add_subcommand("rearrange", "Fisher-based mask rearrangement");
  std::string rearr_fisher, rearr_masks, rearr_out;
  int passes = 1;
  rearr->add_option("--fisher", rearr_fisher, "Fisher directory with blocks")->required();
  rearr->add_option("--masks", rearr_masks, "Binary mask directory")->required();
  rearr->add_option("--passes", passes, "Sweeps over the pruned units");
  rearr->add_option("--out", rearr_out, "Output directory")->required();

  // tune
  auto* tune = app.add_subcommand("tune", "Layer-wise mask tuning by damped least squares");
  std::string tune_masks;
  tune->add_option("--masks", tune_masks, "Binary mask directory")->required();

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Run gradients, search, rearrangement and tuning");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Run the pipeline for several target ratios");
  std::vector<double> targets{0.4, 0.6, 0.8, 1.0};
  std::string eval_data;
  sw->add_option("--targets", targets, "Sorted target ratios in (0, 1]")->delimiter(',');
  sw->add_option("--eval-data", eval_data, "Evaluation data (defaults to the sample set)");

  // eval
  auto* ev = app.add_subcommand("eval", "Loss, accuracy and cost of a masked model");
  std::string eval_masks;
  bool eval_csv = false;
  ev->add_option("--masks", eval_masks, "Mask directory (all ones when omitted)");
  ev->add_flag("--csv", eval_csv, "Print CSV instead of JSON");

  for (auto* sub : {fisher, search, tune, pipe, sw, ev}) cli.ov.add_to(*sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  if (gen_toy->parsed()) {
    PruneConfig c = cli.config();
    ModelShape s = c.toy_shape;
    Index* fields[7] = {&s.layers, &s.heads, &s.filters, &s.hidden, &s.seq_len, &s.features, &s.classes};
    const Index values[7] = {layers, heads, filters, hidden, seq_len, features, classes};
    for (int i = 0; i < 7; ++i)
      if (shape_opts[i]->count()) *fields[i] = values[i];
    try {
      s = make_shape(s.layers, s.heads, s.filters, s.hidden, s.seq_len, s.features, s.classes);
    } catch (const ShapeError& e) {
      throw InputError(e.what());
    }
    save_model(init_toy_model(s, toy_seed_opt->count() ? toy_seed : c.seed), toy_out);
    return kOk;
  }

  if (gen_data->parsed()) {
    const PruneConfig c = cli.config();
    const ToyTransformer model = load_model(require_path(data_model, "model"));
    save_batch(generate_toy_data(model, data_count, data_seed_opt->count() ? data_seed : c.seed, !unbalanced),
               data_out);
    return kOk;
  }

  if (gen_latency->parsed()) {
    const ToyTransformer model = load_model(require_path(lat_model, "model"));
    LatencyModel truth;
    truth.mha = {mha_a, mha_c, mha_t};
    truth.ffn = {ffn_a, ffn_c, ffn_t};
    write_file_atomic(lat_out, latency_csv(synthesize_latency_table(model.shape, truth, lat_noise, lat_seed)));
    return kOk;
  }

  if (fit->parsed()) {
    LatencyTable table = parse_latency_csv(read_text(require_path(fit_table, "table")));
    table.validate();
    write_file_atomic(fit_out, latency_model_to_json(fit_latency_model(table)));
    return kOk;
  }

  if (rearr->parsed()) {
    const FisherBlocks blocks = load_fisher_blocks(require_path(rearr_fisher, "fisher"));
    const MaskSet masks = load_masks(require_path(rearr_masks, "masks"));
    RearrangeOptions options;
    options.passes = passes;
    if (passes < 1) throw InputError("--passes must be >= 1");
    const auto [out, report] = rearrange(blocks, masks, options);
    fs::create_directories(rearr_out);
    save_masks(out, fs::path(rearr_out) / "masks");
    write_file_atomic(fs::path(rearr_out) / "rearrange.json", report.to_json());
    print_json(report.to_json());
    return kOk;
  }

  // The remaining commands share the config-driven input loading.
  const PruneConfig config = cli.config();
  const PipelineInputs in = load_inputs(config);
  const LatencyModel* latency = in.latency ? &*in.latency : nullptr;
  const FlopsCost flops = config_flops(config, in.model.shape);
  const fs::path out = config.out_dir;

  if (fisher->parsed()) {
    const SampleBatch batch = in.data.size() > config.samples ? in.data.slice(0, config.samples) : in.data;
    const auto grads = mask_gradients(in.model, batch);
    const FisherBlocks blocks = fisher_blocks(grads, in.model.shape);
    save_fisher(importance_scores(config.metric, in.model, grads), &blocks, require_out(out));
    return kOk;
  }

  if (search->parsed()) {
    const FisherDiagonal diag = load_fisher_diagonal(require_path(search_fisher, "fisher"));
    SearchResult r;
    double full = 0, budget = 0;
    if (config.mode == ConstraintMode::flops) {
      full = flops.full_cost();
      budget = config.constraint.resolve(full);
      r = search_flops(diag, flops, budget);
    } else {
      if (!latency) throw InputError("latency mode requires --latency");
      full = full_latency(in.model.shape, *latency);
      budget = config.constraint.resolve(full);
      r = search_latency(diag, *latency, budget);
    }
    const std::string json =
        search_result_to_json(r, budget, full, config.mode == ConstraintMode::flops ? "flops" : "seconds");
    fs::create_directories(require_out(out));
    save_masks(r.masks, out / "masks");
    write_file_atomic(out / "search.json", json);
    print_json(json);
    return kOk;
  }

  if (tune->parsed()) {
    const MaskSet masks = load_masks(require_path(tune_masks, "masks"));
    const SampleBatch batch = in.data.size() > config.samples ? in.data.slice(0, config.samples) : in.data;
    const auto [tuned, report] = tune_model(in.model, batch, masks, config.tune_options);
    fs::create_directories(require_out(out));
    save_masks(tuned, out / "masks");
    write_file_atomic(out / "tune.json", report.to_json());
    print_json(report.to_json());
    return kOk;
  }

  if (pipe->parsed()) {
    const PipelineResult r = run_pipeline(in.model, in.data, config, latency);
    write_pipeline_outputs(r, config, require_out(out));
    write_file_atomic(out / "config.json", config.to_json());
    print_json(evaluate(in.model, r.final_masks, in.data, flops, latency).to_json());
    return kOk;
  }

  if (sw->parsed()) {
    const SampleBatch eval = eval_data.empty() ? in.data : load_batch(require_path(eval_data, "eval-data"));
    const std::string csv = sweep_csv(sweep(in.model, in.data, eval, config, targets, latency));
    if (!out.empty()) write_file_atomic(out, csv);
    std::cout << csv;
    return kOk;
  }

  if (ev->parsed()) {
    const MaskSet masks = eval_masks.empty() ? MaskSet::ones_for(in.model) : load_masks(require_path(eval_masks, "masks"));
    const Metrics m = evaluate(in.model, masks, in.data, flops, latency);
    const std::string text = eval_csv ? m.to_csv() : m.to_json();
    if (!out.empty()) write_file_atomic(out, text);
    std::cout << text;
    return kOk;
  }
  return kInternal;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const InfeasibleConstraint& e) {
    std::cerr << "infeasible: " << e.what() << "\nfloor: " << e.floor() << '\n';
    return kInfeasible;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const TensorError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}
