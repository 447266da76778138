#pragma once

#include "maskprune/toy_model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace maskprune {

/// FLOPs of a single head and a single filter; identical in every layer.
struct FlopsCost {
  double head = 0;
  double filter = 0;
  Index layers = 0;
  Index heads = 0;
  Index filters = 0;

  double full_cost() const;
  /// Cost of keeping `kept_heads` heads and `kept_filters` filters in total.
  double of(Index kept_heads, Index kept_filters) const {
    return head * static_cast<double>(kept_heads) + filter * static_cast<double>(kept_filters);
  }
};

/// Per sequence, multiply-accumulate counted as two FLOPs:
///   head   = 8 s D d_head + 4 s^2 d_head  (Q/K/V/O projections, scores, context)
///   filter = 4 s D                        (one W1 row, one W2 column)
/// LayerNorm, softmax and the embedding are not counted.
FlopsCost flops_constants(const ModelShape& shape);

/// F_head * ||m_MHA||_0 + F_filter * ||m_FFN||_0; depends on the support only.
double mask_flops(const MaskSet& masks, const FlopsCost& cost);

enum class LayerKind { mha, ffn };

const char* to_string(LayerKind kind);

struct LatencyEntry {
  LayerKind kind = LayerKind::mha;
  Index n_active = 0;
  double latency = 0;  // seconds
};

struct LatencyTable {
  std::vector<LatencyEntry> entries;

  /// Validates against the model shape: n_active <= H (MHA) or N (FFN),
  /// positive latencies, at least three distinct n_active per kind.
  void validate(const ModelShape* shape = nullptr) const;
};

/// CSV with header `kind,n_active,latency_us`; latencies converted to seconds.
LatencyTable parse_latency_csv(const std::string& text);
LatencyTable load_latency_csv(const std::filesystem::path& path);
std::string latency_csv(const LatencyTable& table);

/// LAT(0) = 0; LAT(n) = c for 0 < n <= T; a (n - T) + c for n > T.
struct PiecewiseLatency {
  double a = 1;  // seconds per unit
  double c = 0;  // seconds
  Index threshold = 0;

  double operator()(Index n) const {
    if (n <= 0) return 0.0;
    if (n <= threshold) return c;
    return a * static_cast<double>(n - threshold) + c;
  }
};

struct LatencyModel {
  PiecewiseLatency mha;
  PiecewiseLatency ffn;
  double mha_mse = 0;
  double ffn_mse = 0;

  const PiecewiseLatency& of(LayerKind kind) const { return kind == LayerKind::mha ? mha : ffn; }
};

struct LatencyFit {
  PiecewiseLatency model;
  double mse = 0;
};

/// Exhaustive search over T in {0, ..., max n_active - 1} with a closed-form
/// least-squares fit of (a, c) per T (a >= 1e-12, c >= 0). Ties on MSE go to
/// the smallest T.
LatencyFit fit_piecewise_latency(const std::vector<Index>& n_active, const std::vector<double>& latency);
LatencyModel fit_latency_model(const LatencyTable& table);

/// sum_l LAT_MHA(||m_l^MHA||_0) + LAT_FFN(||m_l^FFN||_0).
double mask_latency(const MaskSet& masks, const LatencyModel& lat);
double full_latency(const ModelShape& shape, const LatencyModel& lat);

std::string latency_model_to_json(const LatencyModel& lat);
LatencyModel latency_model_from_json(const std::string& text);

}  // namespace maskprune
