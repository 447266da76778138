#include "maskprune/cost_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace maskprune {

namespace {

constexpr double kMinSlope = 1e-12;

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

struct Candidate {
  double a;
  double c;
  double sse;
};

double sse_of(const std::vector<Index>& n, const std::vector<double>& y, Index threshold, double a, double c) {
  const PiecewiseLatency f{a, c, threshold};
  double sse = 0;
  for (std::size_t k = 0; k < n.size(); ++k) {
    const double r = y[k] - f(n[k]);
    sse += r * r;
  }
  return sse;
}

// Least squares for (a, c) at a fixed threshold, subject to a >= kMinSlope and
// c >= 0. The objective is a convex quadratic, so the optimum is either the
// unconstrained solution or lies on one of the constraint boundaries.
Candidate fit_at_threshold(const std::vector<Index>& n, const std::vector<double>& y, Index threshold) {
  // Feature for a: max(n - T, 0) on active points; feature for c: 1.
  double s_ff = 0, s_f = 0, s_1 = 0, s_fy = 0, s_y = 0;
  for (std::size_t k = 0; k < n.size(); ++k) {
    if (n[k] <= 0) continue;
    const double f = n[k] > threshold ? static_cast<double>(n[k] - threshold) : 0.0;
    s_ff += f * f;
    s_f += f;
    s_1 += 1;
    s_fy += f * y[k];
    s_y += y[k];
  }

  std::vector<Candidate> candidates;
  auto push = [&](double a, double c) {
    if (a >= kMinSlope && c >= 0) candidates.push_back({a, c, sse_of(n, y, threshold, a, c)});
  };

  const double det = s_ff * s_1 - s_f * s_f;
  if (det > 0) {
    const double a = (s_1 * s_fy - s_f * s_y) / det;
    const double c = (s_ff * s_y - s_f * s_fy) / det;
    push(a, c);
  }
  // c = 0 boundary.
  if (s_ff > 0) push(std::max(s_fy / s_ff, kMinSlope), 0.0);
  // a = kMinSlope boundary.
  if (s_1 > 0) push(kMinSlope, std::max((s_y - kMinSlope * s_f) / s_1, 0.0));
  push(kMinSlope, 0.0);

  Candidate best = candidates.front();
  for (const auto& cand : candidates)
    if (cand.sse < best.sse || (cand.sse == best.sse && cand.c < best.c)) best = cand;
  return best;
}

}  // namespace

double FlopsCost::full_cost() const { return of(layers * heads, layers * filters); }

FlopsCost flops_constants(const ModelShape& shape) {
  shape.validate();
  const double s = static_cast<double>(shape.seq_len);
  const double d = static_cast<double>(shape.hidden);
  const double dh = static_cast<double>(shape.head_dim);
  FlopsCost cost;
  cost.head = 8.0 * s * d * dh + 4.0 * s * s * dh;
  cost.filter = 4.0 * s * d;
  cost.layers = shape.layers;
  cost.heads = shape.heads;
  cost.filters = shape.filters;
  return cost;
}

double mask_flops(const MaskSet& masks, const FlopsCost& cost) {
  return cost.of(masks.nonzero_heads(), masks.nonzero_filters());
}

const char* to_string(LayerKind kind) { return kind == LayerKind::mha ? "MHA" : "FFN"; }

void LatencyTable::validate(const ModelShape* shape) const {
  std::set<Index> distinct[2];
  for (const auto& e : entries) {
    if (!(e.latency > 0) || !std::isfinite(e.latency)) throw std::invalid_argument("latency table: latencies must be positive");
    if (e.n_active < 0) throw std::invalid_argument("latency table: negative n_active");
    if (shape) {
      const Index limit = e.kind == LayerKind::mha ? shape->heads : shape->filters;
      if (e.n_active > limit)
        throw std::invalid_argument(std::string("latency table: n_active exceeds ") + to_string(e.kind) + " width");
    }
    distinct[e.kind == LayerKind::mha ? 0 : 1].insert(e.n_active);
  }
  for (int k = 0; k < 2; ++k)
    if (distinct[k].size() < 3)
      throw std::invalid_argument(std::string("latency table: need >= 3 distinct n_active for ") +
                                  (k == 0 ? "MHA" : "FFN"));
}

LatencyTable parse_latency_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || lower(trim(line)) != "kind,n_active,latency_us")
    throw std::invalid_argument("latency csv: expected header 'kind,n_active,latency_us'");
  LatencyTable table;
  Index lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string kind, n, lat;
    if (!std::getline(row, kind, ',') || !std::getline(row, n, ',') || !std::getline(row, lat))
      throw std::invalid_argument("latency csv: malformed line " + std::to_string(lineno));
    LatencyEntry e;
    kind = lower(trim(kind));
    if (kind == "mha") e.kind = LayerKind::mha;
    else if (kind == "ffn") e.kind = LayerKind::ffn;
    else throw std::invalid_argument("latency csv: unknown kind '" + kind + "'");
    try {
      e.n_active = std::stoll(trim(n));
      e.latency = std::stod(trim(lat)) * 1e-6;
    } catch (const std::exception&) {
      throw std::invalid_argument("latency csv: bad number on line " + std::to_string(lineno));
    }
    table.entries.push_back(e);
  }
  return table;
}

LatencyTable load_latency_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_latency_csv(ss.str());
}

std::string latency_csv(const LatencyTable& table) {
  std::ostringstream out;
  out.precision(17);
  out << "kind,n_active,latency_us\n";
  for (const auto& e : table.entries) out << to_string(e.kind) << ',' << e.n_active << ',' << e.latency * 1e6 << '\n';
  return out.str();
}

LatencyFit fit_piecewise_latency(const std::vector<Index>& n_active, const std::vector<double>& latency) {
  if (n_active.size() != latency.size()) throw std::invalid_argument("fit_piecewise_latency: size mismatch");
  const std::set<Index> distinct(n_active.begin(), n_active.end());
  if (distinct.size() < 3) throw std::invalid_argument("fit_piecewise_latency: need >= 3 distinct points");
  const Index max_n = *distinct.rbegin();
  if (max_n < 1) throw std::invalid_argument("fit_piecewise_latency: no positive n_active");

  double scale = 0;
  for (double y : latency) scale += y * y;
  scale /= static_cast<double>(latency.size());
  const double tie_tol = 1e-12 * scale;
  const double count = static_cast<double>(latency.size());

  LatencyFit best;
  best.mse = std::numeric_limits<double>::infinity();
  for (Index t = 0; t < max_n; ++t) {
    const Candidate cand = fit_at_threshold(n_active, latency, t);
    const double mse = cand.sse / count;
    if (mse < best.mse - tie_tol) {
      best.model = {cand.a, cand.c, t};
      best.mse = mse;
    }
  }
  return best;
}

LatencyModel fit_latency_model(const LatencyTable& table) {
  table.validate();
  LatencyModel model;
  for (LayerKind kind : {LayerKind::mha, LayerKind::ffn}) {
    std::vector<Index> n;
    std::vector<double> y;
    for (const auto& e : table.entries)
      if (e.kind == kind) {
        n.push_back(e.n_active);
        y.push_back(e.latency);
      }
    const LatencyFit fit = fit_piecewise_latency(n, y);
    (kind == LayerKind::mha ? model.mha : model.ffn) = fit.model;
    (kind == LayerKind::mha ? model.mha_mse : model.ffn_mse) = fit.mse;
  }
  return model;
}

double mask_latency(const MaskSet& masks, const LatencyModel& lat) {
  double total = 0;
  for (std::size_t l = 0; l < masks.heads.size(); ++l) {
    total += lat.mha((masks.heads[l].array() != 0.0).count());
    total += lat.ffn((masks.filters[l].array() != 0.0).count());
  }
  return total;
}

double full_latency(const ModelShape& shape, const LatencyModel& lat) {
  return static_cast<double>(shape.layers) * (lat.mha(shape.heads) + lat.ffn(shape.filters));
}

std::string latency_model_to_json(const LatencyModel& lat) {
  nlohmann::ordered_json j;
  for (LayerKind kind : {LayerKind::mha, LayerKind::ffn}) {
    const auto& p = lat.of(kind);
    j[to_string(kind)] = {{"a", p.a}, {"c", p.c}, {"T", p.threshold},
                          {"mse", kind == LayerKind::mha ? lat.mha_mse : lat.ffn_mse}};
  }
  return j.dump(2) + "\n";
}

LatencyModel latency_model_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  LatencyModel lat;
  for (LayerKind kind : {LayerKind::mha, LayerKind::ffn}) {
    const auto& e = j.at(to_string(kind));
    PiecewiseLatency p{e.at("a").get<double>(), e.at("c").get<double>(), e.at("T").get<Index>()};
    if (!(p.a > 0) || p.c < 0 || p.threshold < 0) throw std::invalid_argument("latency model: invalid parameters");
    (kind == LayerKind::mha ? lat.mha : lat.ffn) = p;
    (kind == LayerKind::mha ? lat.mha_mse : lat.ffn_mse) = e.value("mse", 0.0);
  }
  return lat;
}

}  // namespace maskprune
