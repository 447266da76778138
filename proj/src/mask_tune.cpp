#include "maskprune/mask_tune.hpp"

#include <json.hpp>

#include <stdexcept>

namespace maskprune {

ReconProblem build_recon_problem(const LayerIO& io) {
  ReconProblem p;
  p.id = io.id;
  p.A = io.columns;
  p.unit_ids = io.unit_ids;
  Matrix fixed = io.x;
  fixed.rowwise() += io.unmasked_bias.transpose();
  const Matrix diff = io.original_output - fixed;
  p.b.resize(diff.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(p.b.data(), diff.rows(),
                                                                                       diff.cols()) = diff;
  return p;
}

ReconProblem build_recon_problem(const ToyTransformer& model, const MaskSet& pruned_masks, const SampleBatch& data,
                                 SublayerId id) {
  return build_recon_problem(capture_layer_io(model, pruned_masks, data, id));
}

LayerTune tune_layer(const ReconProblem& problem, const TuneOptions& options) {
  const Index k = problem.A.cols();
  if (k < 1) throw std::invalid_argument("tune_layer: no unpruned units");
  if (problem.A.rows() != problem.b.size()) throw std::invalid_argument("tune_layer: A and b disagree");

  const Vector rhs = problem.b - problem.A * Vector::Ones(k);
  LeastSquaresOptions lls;
  lls.damp = options.damp;
  lls.tol = options.tol;
  lls.max_iterations = options.max_iterations;
  const auto sol = solve_damped_lls(problem.A, rhs, lls);

  LayerTune out;
  out.delta = sol.solution;
  out.values = Vector::Ones(k) + sol.solution;
  out.converged = sol.converged;
  out.iterations = sol.iterations;
  out.accepted = sol.converged && (out.values.array() >= options.lower).all() &&
                 (out.values.array() <= options.upper).all();
  return out;
}

const char* to_string(TuneStatus status) {
  switch (status) {
    case TuneStatus::tuned: return "tuned";
    case TuneStatus::reverted_and_stopped: return "reverted_and_stopped";
    case TuneStatus::skipped_after_stop: return "skipped_after_stop";
    case TuneStatus::empty: return "empty";
  }
  return "unknown";
}

bool TuneReport::stopped() const {
  for (const auto& e : entries)
    if (e.status == TuneStatus::reverted_and_stopped) return true;
  return false;
}

std::pair<MaskSet, TuneReport> tune_model(const ToyTransformer& model, const SampleBatch& data, const MaskSet& masks,
                                          const TuneOptions& options) {
  masks.check_matches(model);
  if (!masks.is_binary()) throw std::invalid_argument("tune_model: masks must be binary");
  if (data.size() == 0) throw std::invalid_argument("tune_model: empty sample set");

  const MaskSet ones = MaskSet::ones_for(model);
  MaskSet tuned = masks;
  TuneReport report;

  Activations x = embed(model, data);
  Activations x_orig = x;
  bool stopped = false;
  const Index sublayers = 2 * static_cast<Index>(model.layers.size());
  for (Index s = 0; s < sublayers; ++s) {
    const SublayerId id = SublayerId::from_index(s);
    const auto& layer = model.layers[id.layer];
    const bool attention = id.kind == SublayerKind::attention;
    Vector& mask = attention ? tuned.heads[id.layer] : tuned.filters[id.layer];

    TuneReport::Entry entry;
    entry.id = id;
    entry.units = (mask.array() != 0.0).count();
    if (stopped) {
      entry.status = TuneStatus::skipped_after_stop;
      report.entries.push_back(entry);
      continue;
    }

    if (entry.units == 0) {
      entry.status = TuneStatus::empty;
    } else {
      const LayerIO io =
          capture_layer_io_from(model, tuned, options.original_inputs ? x_orig : x, x_orig, id);
      const LayerTune t = tune_layer(build_recon_problem(io), options);
      entry.min_value = t.values.minCoeff();
      entry.max_value = t.values.maxCoeff();
      entry.iterations = t.iterations;
      if (t.accepted) {
        entry.status = TuneStatus::tuned;
        for (std::size_t j = 0; j < io.unit_ids.size(); ++j)
          mask(io.unit_ids[j]) = t.values(static_cast<Index>(j));
      } else {
        entry.status = TuneStatus::reverted_and_stopped;
        stopped = true;
      }
    }
    report.entries.push_back(entry);
    if (stopped) continue;

    x = apply_sublayer(layer, id.kind, mask, x);
    x_orig = apply_sublayer(layer, id.kind, attention ? ones.heads[id.layer] : ones.filters[id.layer], x_orig);
  }
  report.final_masks = tuned;
  return {std::move(tuned), std::move(report)};
}

std::string TuneReport::to_json() const {
  nlohmann::ordered_json j;
  j["stopped"] = stopped();
  auto& layers = j["layers"] = nlohmann::ordered_json::array();
  for (const auto& e : entries)
    layers.push_back({{"layer", e.id.layer},
                      {"kind", to_string(e.id.kind)},
                      {"status", to_string(e.status)},
                      {"units", e.units},
                      {"min", e.min_value},
                      {"max", e.max_value},
                      {"iterations", e.iterations}});
  return j.dump(2) + "\n";
}

}  // namespace maskprune
