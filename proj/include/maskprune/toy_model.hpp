#pragma once

#include "maskprune/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskprune {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelShape {
  Index layers = 1;
  Index heads = 1;
  Index filters = 1;
  Index hidden = 1;
  Index head_dim = 1;
  Index seq_len = 1;
  Index features = 1;
  Index classes = 2;

  /// Total number of mask variables, L * (H + N).
  Index mask_count() const { return layers * (heads + filters); }
  void validate() const;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Builds a shape with head_dim = hidden / heads; throws ShapeError when the
/// hidden size is not divisible by the head count.
ModelShape make_shape(Index layers, Index heads, Index filters, Index hidden, Index seq_len,
                      Index features = 8, Index classes = 2);

struct AttentionHead {
  Matrix wq, wk, wv;  // hidden x head_dim
  Matrix wo;          // head_dim x hidden
};

struct EncoderLayer {
  std::vector<AttentionHead> heads;
  Matrix w1;  // filters x hidden
  Vector b1;  // filters
  Matrix w2;  // hidden x filters
  Vector b2;  // hidden
  Vector ln1_gamma, ln1_beta;
  Vector ln2_gamma, ln2_beta;

  Index head_count() const { return static_cast<Index>(heads.size()); }
  Index filter_count() const { return w1.rows(); }
};

struct ToyTransformer {
  ModelShape shape;
  Matrix embedding;   // features x hidden
  std::vector<EncoderLayer> layers;
  Matrix classifier;  // hidden x classes
};

/// Per-layer head and filter masks. Zero means pruned.
struct MaskSet {
  std::vector<Vector> heads;
  std::vector<Vector> filters;

  static MaskSet ones(const ModelShape& shape);
  static MaskSet zeros(const ModelShape& shape);
  /// Sized from the model's actual per-layer unit counts.
  static MaskSet ones_for(const ToyTransformer& model);

  Index layer_count() const { return static_cast<Index>(heads.size()); }
  /// Layout: layer 0 heads, layer 0 filters, layer 1 heads, ...
  Vector flatten() const;
  static MaskSet unflatten(const ModelShape& shape, const Vector& flat);

  bool is_binary() const;
  bool all_ones() const;
  Index nonzero_heads() const;
  Index nonzero_filters() const;
  bool same_support(const MaskSet& other) const;
  void check_matches(const ToyTransformer& model) const;

  friend bool operator==(const MaskSet& a, const MaskSet& b);
};

struct SampleBatch {
  std::vector<Matrix> inputs;  // each seq_len x features
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(inputs.size()); }
  SampleBatch slice(Index begin, Index count) const;
};

ToyTransformer init_toy_model(const ModelShape& shape, std::uint64_t seed);

/// Synthetic classification data: tokens are drawn around Gaussian cluster
/// centres; each label is sampled from the unpruned model's softmax, which
/// acts as a frozen teacher.
/// With `balanced`, each class receives an equal share of examples.
SampleBatch generate_toy_data(const ToyTransformer& teacher, Index count, std::uint64_t seed,
                              bool balanced = true);

struct ForwardResult {
  double loss = 0;  // mean cross-entropy
  std::vector<double> example_losses;
  Matrix logits;  // batch x classes
  std::vector<int> predictions;

  double accuracy(const SampleBatch& batch) const;
};

ForwardResult forward(const ToyTransformer& model, const MaskSet& masks, const SampleBatch& batch);

/// Physically removes every head/filter whose mask is zero. The returned model
/// has fewer units per layer and should be run with MaskSet::ones_for(result)
/// or with `kept_masks` to carry over non-unit mask values.
struct PrunedModel {
  ToyTransformer model;
  MaskSet kept_masks;
};
PrunedModel remove_units(const ToyTransformer& model, const MaskSet& masks);

// --- Mask gradients -------------------------------------------------------

/// Per-example gradients of the loss w.r.t. every mask variable at m = 1,
/// via reverse mode over the fixed architecture.
std::vector<Vector> mask_gradients(const ToyTransformer& model, const SampleBatch& batch);

/// Central finite differences at m = 1 with step h > 0.
std::vector<Vector> mask_gradients_fd(const ToyTransformer& model, const SampleBatch& batch, double h);

namespace detail {
// Gradients at an arbitrary mask; mask_gradients() calls this with m = 1.
std::vector<Vector> mask_gradients_at(const ToyTransformer& model, const MaskSet& masks,
                                      const SampleBatch& batch);
}  // namespace detail

// --- Sublayer-level access --------------------------------------------------

enum class SublayerKind { attention, feedforward };

struct SublayerId {
  Index layer = 0;
  SublayerKind kind = SublayerKind::attention;

  /// Forward order: MHA_0, FFN_0, MHA_1, ...
  static SublayerId from_index(Index i) {
    return {i / 2, i % 2 == 0 ? SublayerKind::attention : SublayerKind::feedforward};
  }
  Index index() const { return 2 * layer + (kind == SublayerKind::attention ? 0 : 1); }
};

const char* to_string(SublayerKind kind);

/// Residual stream of a batch, one seq_len x hidden matrix per example.
using Activations = std::vector<Matrix>;

Activations embed(const ToyTransformer& model, const SampleBatch& batch);

/// Attn_i(x) including the head's output projection (seq_len x hidden).
Matrix head_output(const AttentionHead& head, const Matrix& x);
/// W2[:, i] * gelu(W1[i, :] x + b1_i) for every token (seq_len x hidden).
Matrix filter_output(const EncoderLayer& layer, Index filter, const Matrix& x);

/// Masked sublayer before LayerNorm: x + layer(x; m).
Matrix sublayer_residual(const EncoderLayer& layer, SublayerKind kind, const Vector& mask, const Matrix& x);
/// Masked sublayer after LayerNorm, i.e. the next sublayer's input.
Matrix apply_sublayer(const EncoderLayer& layer, SublayerKind kind, const Vector& mask, const Matrix& x);

Activations apply_sublayer(const EncoderLayer& layer, SublayerKind kind, const Vector& mask,
                           const Activations& x);

/// Inputs and per-unit outputs of one sublayer, gathered over the whole batch.
struct LayerIO {
  SublayerId id;
  std::vector<Index> unit_ids;  // unpruned units, ascending
  Matrix columns;               // (batch * seq_len * hidden) x unit_ids.size()
  Matrix x;                     // pruned-model input, (batch * seq_len) x hidden
  Matrix x_original;            // original-model input, same layout
  Matrix original_output;       // x' + layer(x'; 1), same layout
  Vector unmasked_bias;         // b2 for FFN sublayers, zero for MHA
};

/// `pruned_masks` must already carry final values for every sublayer before
/// `id`; the original model is the same weights with all-ones masks.
LayerIO capture_layer_io(const ToyTransformer& model, const MaskSet& pruned_masks,
                         const SampleBatch& data, SublayerId id);

/// Same as capture_layer_io but from precomputed sublayer inputs.
LayerIO capture_layer_io_from(const ToyTransformer& model, const MaskSet& pruned_masks,
                              const Activations& x, const Activations& x_original, SublayerId id);

/// Row-major flattening of stacked activations: index ((e * s) + t) * D + d.
Vector flatten_rows(const Activations& acts);
Matrix stack_rows(const Activations& acts);

// --- Serialization ----------------------------------------------------------

void save_model(const ToyTransformer& model, const std::filesystem::path& dir);
ToyTransformer load_model(const std::filesystem::path& dir);

void save_batch(const SampleBatch& batch, const std::filesystem::path& dir);
SampleBatch load_batch(const std::filesystem::path& dir);

void save_masks(const MaskSet& masks, const std::filesystem::path& dir);
MaskSet load_masks(const std::filesystem::path& dir);

std::string shape_to_json(const ModelShape& shape);
ModelShape shape_from_json(const std::string& text);

}  // namespace maskprune
