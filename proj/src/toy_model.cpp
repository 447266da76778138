#include "maskprune/toy_model.hpp"

#include "maskprune/random.hpp"
#include "maskprune/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace maskprune {

namespace {

constexpr double kLayerNormEps = 1e-5;

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); }

double gelu_grad(double z) {
  const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + z * pdf;
}

struct LayerNormCache {
  Matrix xhat;
  Vector inv_std;
};

Matrix layer_norm(const Matrix& u, const Vector& gamma, const Vector& beta, LayerNormCache* cache) {
  const Index d = u.cols();
  Matrix xhat(u.rows(), d);
  Vector inv_std(u.rows());
  for (Index t = 0; t < u.rows(); ++t) {
    const double mean = u.row(t).mean();
    const auto centered = u.row(t).array() - mean;
    const double var = centered.square().sum() / static_cast<double>(d);
    inv_std(t) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(t) = centered * inv_std(t);
  }
  Matrix y = (xhat.array().rowwise() * gamma.transpose().array()).rowwise() + beta.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Vector& gamma, const LayerNormCache& cache) {
  const Matrix dxhat = dy.array().rowwise() * gamma.transpose().array();
  Matrix du(dy.rows(), dy.cols());
  for (Index t = 0; t < dy.rows(); ++t) {
    const double mean_dxhat = dxhat.row(t).mean();
    const double mean_dxhat_xhat = dxhat.row(t).cwiseProduct(cache.xhat.row(t)).mean();
    du.row(t) = cache.inv_std(t) *
                (dxhat.row(t).array() - mean_dxhat - cache.xhat.row(t).array() * mean_dxhat_xhat).matrix();
  }
  return du;
}

void softmax_rows(Matrix& s) {
  for (Index t = 0; t < s.rows(); ++t) {
    const double mx = s.row(t).maxCoeff();
    s.row(t) = (s.row(t).array() - mx).exp();
    s.row(t) /= s.row(t).sum();
  }
}

struct HeadCache {
  Matrix q, k, v, p, out;
};

struct LayerCache {
  std::vector<HeadCache> heads;
  LayerNormCache ln1;
  Matrix h1;
  Matrix z, g;
  LayerNormCache ln2;
};

struct ExampleTrace {
  std::vector<LayerCache> layers;
  Vector pooled;
  Vector logits;
};

HeadCache run_head(const AttentionHead& head, const Matrix& x) {
  HeadCache c;
  c.q = x * head.wq;
  c.k = x * head.wk;
  c.v = x * head.wv;
  c.p = (c.q * c.k.transpose()) / std::sqrt(static_cast<double>(head.wq.cols()));
  softmax_rows(c.p);
  c.out = (c.p * c.v) * head.wo;
  return c;
}

Matrix ffn_preactivation(const EncoderLayer& layer, const Matrix& x) {
  return (x * layer.w1.transpose()).rowwise() + layer.b1.transpose();
}

ExampleTrace trace_example(const ToyTransformer& model, const MaskSet& masks, const Matrix& input) {
  ExampleTrace tr;
  Matrix h = input * model.embedding;
  tr.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    auto& cache = tr.layers[l];
    Matrix u = h;
    cache.heads.reserve(layer.heads.size());
    for (std::size_t i = 0; i < layer.heads.size(); ++i) {
      cache.heads.push_back(run_head(layer.heads[i], h));
      u += masks.heads[l](static_cast<Index>(i)) * cache.heads.back().out;
    }
    cache.h1 = layer_norm(u, layer.ln1_gamma, layer.ln1_beta, &cache.ln1);

    cache.z = ffn_preactivation(layer, cache.h1);
    cache.g = cache.z.unaryExpr([](double z) { return gelu(z); });
    Matrix u2 = cache.h1 + (cache.g * masks.filters[l].asDiagonal()) * layer.w2.transpose();
    u2.rowwise() += layer.b2.transpose();
    h = layer_norm(u2, layer.ln2_gamma, layer.ln2_beta, &cache.ln2);
  }
  tr.pooled = h.colwise().mean().transpose();
  tr.logits = model.classifier.transpose() * tr.pooled;
  return tr;
}

double cross_entropy(const Vector& logits, int label, Vector* probs) {
  const double mx = logits.maxCoeff();
  const Vector e = (logits.array() - mx).exp();
  const double z = e.sum();
  if (probs) *probs = e / z;
  return std::log(z) + mx - logits(label);
}

Vector backward_example(const ToyTransformer& model, const MaskSet& masks, const Matrix& input, int label) {
  const ExampleTrace tr = trace_example(model, masks, input);
  Vector probs;
  cross_entropy(tr.logits, label, &probs);
  Vector dlogits = probs;
  dlogits(label) -= 1.0;

  const Index s = input.rows();
  const Index layers = static_cast<Index>(model.layers.size());
  Index total = 0;
  std::vector<Index> offsets(model.layers.size());
  for (Index l = 0; l < layers; ++l) {
    offsets[l] = total;
    total += model.layers[l].head_count() + model.layers[l].filter_count();
  }
  Vector grad = Vector::Zero(total);

  const Vector dpooled = model.classifier * dlogits;
  Matrix dh = (Vector::Ones(s) * dpooled.transpose()) / static_cast<double>(s);

  for (Index l = layers - 1; l >= 0; --l) {
    const auto& layer = model.layers[l];
    const auto& cache = tr.layers[l];
    const Index nh = layer.head_count();
    const Index nf = layer.filter_count();

    // FFN sublayer.
    const Matrix du2 = layer_norm_backward(dh, layer.ln2_gamma, cache.ln2);
    const Matrix dg_full = du2 * layer.w2;  // s x N
    grad.segment(offsets[l] + nh, nf) = cache.g.cwiseProduct(dg_full).colwise().sum().transpose();
    const Matrix dz = (dg_full * masks.filters[l].asDiagonal()).cwiseProduct(
        cache.z.unaryExpr([](double z) { return gelu_grad(z); }));
    Matrix dh1 = du2 + dz * layer.w1;

    // MHA sublayer.
    const Matrix du1 = layer_norm_backward(dh1, layer.ln1_gamma, cache.ln1);
    Matrix dx = du1;
    for (Index i = 0; i < nh; ++i) {
      const auto& head = layer.heads[i];
      const auto& hc = cache.heads[i];
      grad(offsets[l] + i) = du1.cwiseProduct(hc.out).sum();
      const double m = masks.heads[l](i);
      if (m == 0.0) continue;
      const Matrix dctx = (m * du1) * head.wo.transpose();
      const Matrix dp = dctx * hc.v.transpose();
      const Matrix dv = hc.p.transpose() * dctx;
      Matrix ds = hc.p.cwiseProduct(dp);
      const Vector row_dot = ds.rowwise().sum();
      ds = hc.p.cwiseProduct(dp.colwise() - row_dot) / std::sqrt(static_cast<double>(head.wq.cols()));
      const Matrix dq = ds * hc.k;
      const Matrix dk = ds.transpose() * hc.q;
      dx += dq * head.wq.transpose() + dk * head.wk.transpose() + dv * head.wv.transpose();
    }
    dh = std::move(dx);
  }
  return grad;
}

void append_row_major(const Matrix& m, double* out) {
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out, m.rows(), m.cols()) = m;
}

Matrix normal_matrix(std::mt19937_64& rng, Index rows, Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  // Fill row-major so the draw order matches the on-disk layout.
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

Vector normal_vector(std::mt19937_64& rng, Index n, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

}  // namespace

// --- Shape and masks ---------------------------------------------------------

void ModelShape::validate() const {
  if (layers < 1 || heads < 1 || filters < 1 || hidden < 1 || head_dim < 1 || seq_len < 1 || features < 1 ||
      classes < 1)
    throw ShapeError("all shape counts must be >= 1");
  if (hidden != heads * head_dim) throw ShapeError("hidden size must equal heads * head_dim");
}

ModelShape make_shape(Index layers, Index heads, Index filters, Index hidden, Index seq_len, Index features,
                      Index classes) {
  if (heads < 1 || hidden % heads != 0) throw ShapeError("hidden size must be divisible by the head count");
  ModelShape s{layers, heads, filters, hidden, hidden / heads, seq_len, features, classes};
  s.validate();
  return s;
}

MaskSet MaskSet::ones(const ModelShape& shape) {
  MaskSet m;
  m.heads.assign(shape.layers, Vector::Ones(shape.heads));
  m.filters.assign(shape.layers, Vector::Ones(shape.filters));
  return m;
}

MaskSet MaskSet::zeros(const ModelShape& shape) {
  MaskSet m;
  m.heads.assign(shape.layers, Vector::Zero(shape.heads));
  m.filters.assign(shape.layers, Vector::Zero(shape.filters));
  return m;
}

MaskSet MaskSet::ones_for(const ToyTransformer& model) {
  MaskSet m;
  for (const auto& layer : model.layers) {
    m.heads.push_back(Vector::Ones(layer.head_count()));
    m.filters.push_back(Vector::Ones(layer.filter_count()));
  }
  return m;
}

Vector MaskSet::flatten() const {
  Index total = 0;
  for (std::size_t l = 0; l < heads.size(); ++l) total += heads[l].size() + filters[l].size();
  Vector flat(total);
  Index pos = 0;
  for (std::size_t l = 0; l < heads.size(); ++l) {
    flat.segment(pos, heads[l].size()) = heads[l];
    pos += heads[l].size();
    flat.segment(pos, filters[l].size()) = filters[l];
    pos += filters[l].size();
  }
  return flat;
}

MaskSet MaskSet::unflatten(const ModelShape& shape, const Vector& flat) {
  if (flat.size() != shape.mask_count()) throw ShapeError("flat mask length mismatch");
  MaskSet m = ones(shape);
  Index pos = 0;
  for (Index l = 0; l < shape.layers; ++l) {
    m.heads[l] = flat.segment(pos, shape.heads);
    pos += shape.heads;
    m.filters[l] = flat.segment(pos, shape.filters);
    pos += shape.filters;
  }
  return m;
}

bool MaskSet::is_binary() const {
  auto binary = [](const Vector& v) { return ((v.array() == 0.0) || (v.array() == 1.0)).all(); };
  return std::all_of(heads.begin(), heads.end(), binary) && std::all_of(filters.begin(), filters.end(), binary);
}

bool MaskSet::all_ones() const {
  auto ones = [](const Vector& v) { return (v.array() == 1.0).all(); };
  return std::all_of(heads.begin(), heads.end(), ones) && std::all_of(filters.begin(), filters.end(), ones);
}

Index MaskSet::nonzero_heads() const {
  Index n = 0;
  for (const auto& v : heads) n += (v.array() != 0.0).count();
  return n;
}

Index MaskSet::nonzero_filters() const {
  Index n = 0;
  for (const auto& v : filters) n += (v.array() != 0.0).count();
  return n;
}

bool MaskSet::same_support(const MaskSet& other) const {
  if (heads.size() != other.heads.size()) return false;
  auto same = [](const Vector& a, const Vector& b) {
    return a.size() == b.size() && ((a.array() != 0.0) == (b.array() != 0.0)).all();
  };
  for (std::size_t l = 0; l < heads.size(); ++l)
    if (!same(heads[l], other.heads[l]) || !same(filters[l], other.filters[l])) return false;
  return true;
}

void MaskSet::check_matches(const ToyTransformer& model) const {
  if (heads.size() != model.layers.size() || filters.size() != model.layers.size())
    throw ShapeError("mask layer count does not match model");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (heads[l].size() != model.layers[l].head_count() || filters[l].size() != model.layers[l].filter_count())
      throw ShapeError("mask size does not match layer " + std::to_string(l));
  }
}

bool operator==(const MaskSet& a, const MaskSet& b) {
  if (a.heads.size() != b.heads.size() || a.filters.size() != b.filters.size()) return false;
  for (std::size_t l = 0; l < a.heads.size(); ++l) {
    if (a.heads[l].size() != b.heads[l].size() || a.heads[l] != b.heads[l]) return false;
    if (a.filters[l].size() != b.filters[l].size() || a.filters[l] != b.filters[l]) return false;
  }
  return true;
}

SampleBatch SampleBatch::slice(Index begin, Index count) const {
  SampleBatch out;
  out.inputs.assign(inputs.begin() + begin, inputs.begin() + begin + count);
  out.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
  return out;
}

// --- Model construction ------------------------------------------------------

namespace {

// Tokens drawn around 4 * classes Gaussian cluster centres.
class InputSampler {
 public:
  InputSampler(std::mt19937_64& rng, const ModelShape& shape)
      : rng_(rng), shape_(shape), centres_(normal_matrix(rng, 4 * shape.classes, shape.features, 1.0)),
        pick_(0, 4 * shape.classes - 1) {}

  Matrix operator()() {
    Matrix x(shape_.seq_len, shape_.features);
    const Index c = pick_(rng_);
    for (Index t = 0; t < shape_.seq_len; ++t)
      for (Index f = 0; f < shape_.features; ++f) x(t, f) = centres_(c, f) + noise_(rng_);
    return x;
  }

 private:
  std::mt19937_64& rng_;
  const ModelShape& shape_;
  Matrix centres_;
  std::uniform_int_distribution<Index> pick_;
  std::normal_distribution<double> noise_{0.0, 0.7};
};

constexpr Index kCalibration = 256;

}  // namespace

ToyTransformer init_toy_model(const ModelShape& shape, std::uint64_t seed) {
  if (shape.heads < 1 || shape.hidden % shape.heads != 0)
    throw ShapeError("hidden size must be divisible by the head count");
  shape.validate();

  auto rng = make_rng(seed, "model");
  const double d = static_cast<double>(shape.hidden);
  const double dh = static_cast<double>(shape.head_dim);
  const double n = static_cast<double>(shape.filters);
  std::normal_distribution<double> log_scale(0.0, 0.5);

  ToyTransformer model;
  model.shape = shape;
  model.embedding = normal_matrix(rng, shape.features, shape.hidden, 1.0 / std::sqrt(static_cast<double>(shape.features)));
  model.layers.resize(shape.layers);
  for (auto& layer : model.layers) {
    layer.heads.resize(shape.heads);
    for (auto& head : layer.heads) {
      head.wq = normal_matrix(rng, shape.hidden, shape.head_dim, std::sqrt(2.0 / d));
      head.wk = normal_matrix(rng, shape.hidden, shape.head_dim, std::sqrt(2.0 / d));
      head.wv = normal_matrix(rng, shape.hidden, shape.head_dim, std::sqrt(1.0 / d));
      // Per-head scale spreads importances out.
      head.wo = normal_matrix(rng, shape.head_dim, shape.hidden, std::sqrt(2.0 / (dh * shape.heads))) *
                std::exp(log_scale(rng));
    }
    layer.w1 = normal_matrix(rng, shape.filters, shape.hidden, std::sqrt(1.0 / d));
    layer.b1 = normal_vector(rng, shape.filters, 0.0, 0.5);
    layer.w2 = normal_matrix(rng, shape.hidden, shape.filters, std::sqrt(4.0 / n));
    for (Index i = 0; i < shape.filters; ++i) layer.w2.col(i) *= std::exp(log_scale(rng));
    layer.b2 = normal_vector(rng, shape.hidden, 0.0, 0.1);
    layer.ln1_gamma = normal_vector(rng, shape.hidden, 1.0, 0.1);
    layer.ln1_beta = normal_vector(rng, shape.hidden, 0.0, 0.1);
    layer.ln2_gamma = normal_vector(rng, shape.hidden, 1.0, 0.1);
    layer.ln2_beta = normal_vector(rng, shape.hidden, 0.0, 0.1);
  }
  model.classifier = normal_matrix(rng, shape.hidden, shape.classes, 2.0 / std::sqrt(d));

  // An untrained encoder's pooled features share a large common direction.
  // Remove it from the classifier so logits are centred on the input family.
  auto cal_rng = make_rng(seed, "calibration");
  InputSampler draw(cal_rng, shape);
  const MaskSet ones = MaskSet::ones(shape);
  Vector mu = Vector::Zero(shape.hidden);
  for (Index i = 0; i < kCalibration; ++i) mu += trace_example(model, ones, draw()).pooled;
  mu /= static_cast<double>(kCalibration);
  model.classifier -= mu * (mu.transpose() * model.classifier) / mu.squaredNorm();
  return model;
}

SampleBatch generate_toy_data(const ToyTransformer& teacher, Index count, std::uint64_t seed, bool balanced) {
  if (count < 1) throw std::invalid_argument("generate_toy_data: count must be >= 1");
  const auto& shape = teacher.shape;
  auto rng = make_rng(seed, "data");
  InputSampler draw(rng, shape);

  std::vector<Index> quota(shape.classes, count / shape.classes);
  for (Index c = 0; c < count % shape.classes; ++c) ++quota[c];

  const MaskSet ones = MaskSet::ones_for(teacher);
  SampleBatch batch;
  const Index max_attempts = 1000 * count;
  for (Index attempt = 0; batch.size() < count; ++attempt) {
    if (attempt >= max_attempts)
      throw std::runtime_error("generate_toy_data: teacher never produces some classes; try another seed");
    Matrix x = draw();
    const ExampleTrace tr = trace_example(teacher, ones, x);
    // Labels are drawn from the teacher's softmax, so the unpruned model is
    // the expected-loss minimiser on this distribution.
    const Vector p = (tr.logits.array() - tr.logits.maxCoeff()).exp();
    std::discrete_distribution<Index> categorical(p.data(), p.data() + p.size());
    const Index label = categorical(rng);
    if (balanced) {
      if (quota[label] == 0) continue;
      --quota[label];
    }
    batch.inputs.push_back(std::move(x));
    batch.labels.push_back(static_cast<int>(label));
  }
  return batch;
}

// --- Forward -------------------------------------------------------------------

double ForwardResult::accuracy(const SampleBatch& batch) const {
  if (batch.size() == 0) throw std::invalid_argument("accuracy: empty batch");
  Index correct = 0;
  for (Index e = 0; e < batch.size(); ++e) correct += predictions[e] == batch.labels[e];
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

ForwardResult forward(const ToyTransformer& model, const MaskSet& masks, const SampleBatch& batch) {
  masks.check_matches(model);
  if (batch.size() == 0) throw std::invalid_argument("forward: empty batch");
  ForwardResult r;
  r.logits.resize(batch.size(), model.classifier.cols());
  r.example_losses.resize(batch.size());
  r.predictions.resize(batch.size());
  double total = 0;
  for (Index e = 0; e < batch.size(); ++e) {
    if (batch.inputs[e].cols() != model.embedding.rows()) throw ShapeError("input feature size mismatch");
    const ExampleTrace tr = trace_example(model, masks, batch.inputs[e]);
    r.logits.row(e) = tr.logits.transpose();
    r.example_losses[e] = cross_entropy(tr.logits, batch.labels[e], nullptr);
    Index pred = 0;
    tr.logits.maxCoeff(&pred);
    r.predictions[e] = static_cast<int>(pred);
    total += r.example_losses[e];
  }
  r.loss = total / static_cast<double>(batch.size());
  return r;
}

PrunedModel remove_units(const ToyTransformer& model, const MaskSet& masks) {
  masks.check_matches(model);
  PrunedModel out;
  out.model.shape = model.shape;
  out.model.embedding = model.embedding;
  out.model.classifier = model.classifier;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& src = model.layers[l];
    EncoderLayer dst;
    std::vector<double> head_vals, filter_vals;
    for (Index i = 0; i < src.head_count(); ++i) {
      if (masks.heads[l](i) == 0.0) continue;
      dst.heads.push_back(src.heads[i]);
      head_vals.push_back(masks.heads[l](i));
    }
    std::vector<Index> kept;
    for (Index i = 0; i < src.filter_count(); ++i) {
      if (masks.filters[l](i) == 0.0) continue;
      kept.push_back(i);
      filter_vals.push_back(masks.filters[l](i));
    }
    const auto k = static_cast<Index>(kept.size());
    dst.w1.resize(k, src.w1.cols());
    dst.b1.resize(k);
    dst.w2.resize(src.w2.rows(), k);
    for (Index j = 0; j < k; ++j) {
      dst.w1.row(j) = src.w1.row(kept[j]);
      dst.b1(j) = src.b1(kept[j]);
      dst.w2.col(j) = src.w2.col(kept[j]);
    }
    dst.b2 = src.b2;
    dst.ln1_gamma = src.ln1_gamma;
    dst.ln1_beta = src.ln1_beta;
    dst.ln2_gamma = src.ln2_gamma;
    dst.ln2_beta = src.ln2_beta;
    out.model.layers.push_back(std::move(dst));
    out.kept_masks.heads.push_back(Eigen::Map<const Vector>(head_vals.data(), static_cast<Index>(head_vals.size())));
    out.kept_masks.filters.push_back(
        Eigen::Map<const Vector>(filter_vals.data(), static_cast<Index>(filter_vals.size())));
  }
  return out;
}

// --- Gradients -----------------------------------------------------------------

namespace detail {

std::vector<Vector> mask_gradients_at(const ToyTransformer& model, const MaskSet& masks, const SampleBatch& batch) {
  masks.check_matches(model);
  std::vector<Vector> grads;
  grads.reserve(batch.size());
  for (Index e = 0; e < batch.size(); ++e)
    grads.push_back(backward_example(model, masks, batch.inputs[e], batch.labels[e]));
  return grads;
}

}  // namespace detail

std::vector<Vector> mask_gradients(const ToyTransformer& model, const SampleBatch& batch) {
  return detail::mask_gradients_at(model, MaskSet::ones_for(model), batch);
}

std::vector<Vector> mask_gradients_fd(const ToyTransformer& model, const SampleBatch& batch, double h) {
  if (!(h > 0)) throw std::invalid_argument("mask_gradients_fd: step must be > 0");
  const MaskSet ones = MaskSet::ones_for(model);
  const Vector base = ones.flatten();
  std::vector<Vector> grads(batch.size(), Vector::Zero(base.size()));

  auto masks_at = [&](const Vector& flat) {
    MaskSet m = ones;
    Index pos = 0;
    for (std::size_t l = 0; l < m.heads.size(); ++l) {
      m.heads[l] = flat.segment(pos, m.heads[l].size());
      pos += m.heads[l].size();
      m.filters[l] = flat.segment(pos, m.filters[l].size());
      pos += m.filters[l].size();
    }
    return m;
  };

  for (Index i = 0; i < base.size(); ++i) {
    Vector plus = base, minus = base;
    plus(i) += h;
    minus(i) -= h;
    const auto lp = forward(model, masks_at(plus), batch).example_losses;
    const auto lm = forward(model, masks_at(minus), batch).example_losses;
    for (Index e = 0; e < batch.size(); ++e) grads[e](i) = (lp[e] - lm[e]) / (2.0 * h);
  }
  return grads;
}

// --- Sublayers -------------------------------------------------------------------

const char* to_string(SublayerKind kind) { return kind == SublayerKind::attention ? "mha" : "ffn"; }

Activations embed(const ToyTransformer& model, const SampleBatch& batch) {
  Activations acts;
  acts.reserve(batch.size());
  for (const auto& x : batch.inputs) acts.push_back(x * model.embedding);
  return acts;
}

Matrix head_output(const AttentionHead& head, const Matrix& x) { return run_head(head, x).out; }

Matrix filter_output(const EncoderLayer& layer, Index filter, const Matrix& x) {
  const Vector z = (x * layer.w1.row(filter).transpose()).array() + layer.b1(filter);
  const Vector g = z.unaryExpr([](double v) { return gelu(v); });
  return g * layer.w2.col(filter).transpose();
}

Matrix sublayer_residual(const EncoderLayer& layer, SublayerKind kind, const Vector& mask, const Matrix& x) {
  Matrix u = x;
  if (kind == SublayerKind::attention) {
    for (Index i = 0; i < layer.head_count(); ++i)
      if (mask(i) != 0.0) u += mask(i) * head_output(layer.heads[i], x);
  } else {
    const Matrix g = ffn_preactivation(layer, x).unaryExpr([](double z) { return gelu(z); });
    u += (g * mask.asDiagonal()) * layer.w2.transpose();
    u.rowwise() += layer.b2.transpose();
  }
  return u;
}

Matrix apply_sublayer(const EncoderLayer& layer, SublayerKind kind, const Vector& mask, const Matrix& x) {
  const Matrix u = sublayer_residual(layer, kind, mask, x);
  return kind == SublayerKind::attention ? layer_norm(u, layer.ln1_gamma, layer.ln1_beta, nullptr)
                                         : layer_norm(u, layer.ln2_gamma, layer.ln2_beta, nullptr);
}

Activations apply_sublayer(const EncoderLayer& layer, SublayerKind kind, const Vector& mask, const Activations& x) {
  Activations out;
  out.reserve(x.size());
  for (const auto& xe : x) out.push_back(apply_sublayer(layer, kind, mask, xe));
  return out;
}

Vector flatten_rows(const Activations& acts) {
  Index total = 0;
  for (const auto& a : acts) total += a.size();
  Vector flat(total);
  Index pos = 0;
  for (const auto& a : acts) {
    append_row_major(a, flat.data() + pos);
    pos += a.size();
  }
  return flat;
}

Matrix stack_rows(const Activations& acts) {
  Index rows = 0;
  for (const auto& a : acts) rows += a.rows();
  Matrix out(rows, acts.empty() ? 0 : acts.front().cols());
  Index pos = 0;
  for (const auto& a : acts) {
    out.middleRows(pos, a.rows()) = a;
    pos += a.rows();
  }
  return out;
}

LayerIO capture_layer_io_from(const ToyTransformer& model, const MaskSet& pruned_masks, const Activations& x,
                              const Activations& x_original, SublayerId id) {
  if (id.layer < 0 || id.layer >= static_cast<Index>(model.layers.size()))
    throw std::out_of_range("capture_layer_io: layer id out of range");
  pruned_masks.check_matches(model);
  const auto& layer = model.layers[id.layer];
  const bool attention = id.kind == SublayerKind::attention;
  const Vector& mask = attention ? pruned_masks.heads[id.layer] : pruned_masks.filters[id.layer];

  LayerIO io;
  io.id = id;
  for (Index i = 0; i < mask.size(); ++i)
    if (mask(i) != 0.0) io.unit_ids.push_back(i);

  Index rows = 0;
  for (const auto& xe : x) rows += xe.size();
  io.columns.resize(rows, static_cast<Index>(io.unit_ids.size()));
  Index pos = 0;
  for (const auto& xe : x) {
    for (std::size_t j = 0; j < io.unit_ids.size(); ++j) {
      const Index unit = io.unit_ids[j];
      const Matrix out = attention ? head_output(layer.heads[unit], xe) : filter_output(layer, unit, xe);
      append_row_major(out, io.columns.col(static_cast<Index>(j)).data() + pos);
    }
    pos += xe.size();
  }

  io.x = stack_rows(x);
  io.x_original = stack_rows(x_original);
  const Vector ones = Vector::Ones(mask.size());
  Activations target;
  target.reserve(x_original.size());
  for (const auto& xe : x_original) target.push_back(sublayer_residual(layer, id.kind, ones, xe));
  io.original_output = stack_rows(target);
  io.unmasked_bias = attention ? Vector::Zero(layer.b2.size()) : layer.b2;
  return io;
}

LayerIO capture_layer_io(const ToyTransformer& model, const MaskSet& pruned_masks, const SampleBatch& data,
                         SublayerId id) {
  if (id.layer < 0 || id.layer >= static_cast<Index>(model.layers.size()))
    throw std::out_of_range("capture_layer_io: layer id out of range");
  pruned_masks.check_matches(model);
  const MaskSet ones = MaskSet::ones_for(model);
  Activations x = embed(model, data);
  Activations x_orig = x;
  for (Index s = 0; s < id.index(); ++s) {
    const auto sub = SublayerId::from_index(s);
    const auto& layer = model.layers[sub.layer];
    const bool attention = sub.kind == SublayerKind::attention;
    x = apply_sublayer(layer, sub.kind, attention ? pruned_masks.heads[sub.layer] : pruned_masks.filters[sub.layer], x);
    x_orig = apply_sublayer(layer, sub.kind, attention ? ones.heads[sub.layer] : ones.filters[sub.layer], x_orig);
  }
  return capture_layer_io_from(model, pruned_masks, x, x_orig, id);
}

// --- Serialization -------------------------------------------------------------

namespace {

namespace fs = std::filesystem;

void write_stack(const fs::path& path, const std::vector<Matrix>& mats) {
  const auto rows = mats.front().rows(), cols = mats.front().cols();
  std::vector<double> values(mats.size() * rows * cols);
  for (std::size_t i = 0; i < mats.size(); ++i) append_row_major(mats[i], values.data() + i * rows * cols);
  const std::vector<std::uint64_t> dims = {mats.size(), static_cast<std::uint64_t>(rows),
                                           static_cast<std::uint64_t>(cols)};
  write_tensor(path, dims, values);
}

std::vector<Matrix> read_stack(const fs::path& path, Index count, Index rows, Index cols) {
  const Tensor t = read_tensor(path);
  if (t.dims.size() != 3 || t.dims[0] != static_cast<std::uint64_t>(count) ||
      t.dims[1] != static_cast<std::uint64_t>(rows) || t.dims[2] != static_cast<std::uint64_t>(cols))
    throw ShapeError("unexpected tensor dims in " + path.string());
  std::vector<Matrix> out;
  for (Index i = 0; i < count; ++i)
    out.push_back(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.values.data() + i * rows * cols, rows, cols));
  return out;
}

Matrix read_matrix_checked(const fs::path& path, Index rows, Index cols) {
  Matrix m = read_matrix(path);
  if (m.rows() != rows || m.cols() != cols) throw ShapeError("unexpected tensor dims in " + path.string());
  return m;
}

Vector read_vector_checked(const fs::path& path, Index n) {
  Vector v = read_vector(path);
  if (v.size() != n) throw ShapeError("unexpected tensor dims in " + path.string());
  return v;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string layer_file(Index l, const char* name) { return "layer" + std::to_string(l) + "_" + name + ".pkt"; }

void require_uniform(const ToyTransformer& model) {
  for (const auto& layer : model.layers)
    if (layer.head_count() != model.shape.heads || layer.filter_count() != model.shape.filters)
      throw ShapeError("only full-shape models can be saved");
}

}  // namespace

std::string shape_to_json(const ModelShape& s) {
  nlohmann::ordered_json j;
  j["layers"] = s.layers;
  j["heads"] = s.heads;
  j["filters"] = s.filters;
  j["hidden"] = s.hidden;
  j["head_dim"] = s.head_dim;
  j["seq_len"] = s.seq_len;
  j["features"] = s.features;
  j["classes"] = s.classes;
  return j.dump(2) + "\n";
}

ModelShape shape_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelShape s;
  s.layers = j.at("layers").get<Index>();
  s.heads = j.at("heads").get<Index>();
  s.filters = j.at("filters").get<Index>();
  s.hidden = j.at("hidden").get<Index>();
  s.head_dim = j.value("head_dim", s.heads > 0 ? s.hidden / s.heads : Index(0));
  s.seq_len = j.at("seq_len").get<Index>();
  s.features = j.at("features").get<Index>();
  s.classes = j.at("classes").get<Index>();
  s.validate();
  return s;
}

void save_model(const ToyTransformer& model, const fs::path& dir) {
  require_uniform(model);
  fs::create_directories(dir);
  write_file_atomic(dir / "shape.json", shape_to_json(model.shape));
  write_matrix(dir / "embedding.pkt", model.embedding);
  write_matrix(dir / "classifier.pkt", model.classifier);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    const auto li = static_cast<Index>(l);
    std::vector<Matrix> wq, wk, wv, wo;
    for (const auto& h : layer.heads) {
      wq.push_back(h.wq);
      wk.push_back(h.wk);
      wv.push_back(h.wv);
      wo.push_back(h.wo);
    }
    write_stack(dir / layer_file(li, "wq"), wq);
    write_stack(dir / layer_file(li, "wk"), wk);
    write_stack(dir / layer_file(li, "wv"), wv);
    write_stack(dir / layer_file(li, "wo"), wo);
    write_matrix(dir / layer_file(li, "w1"), layer.w1);
    write_vector(dir / layer_file(li, "b1"), layer.b1);
    write_matrix(dir / layer_file(li, "w2"), layer.w2);
    write_vector(dir / layer_file(li, "b2"), layer.b2);
    write_vector(dir / layer_file(li, "ln1_gamma"), layer.ln1_gamma);
    write_vector(dir / layer_file(li, "ln1_beta"), layer.ln1_beta);
    write_vector(dir / layer_file(li, "ln2_gamma"), layer.ln2_gamma);
    write_vector(dir / layer_file(li, "ln2_beta"), layer.ln2_beta);
  }
}

ToyTransformer load_model(const fs::path& dir) {
  ToyTransformer model;
  model.shape = shape_from_json(read_text(dir / "shape.json"));
  const auto& s = model.shape;
  model.embedding = read_matrix_checked(dir / "embedding.pkt", s.features, s.hidden);
  model.classifier = read_matrix_checked(dir / "classifier.pkt", s.hidden, s.classes);
  model.layers.resize(s.layers);
  for (Index l = 0; l < s.layers; ++l) {
    auto& layer = model.layers[l];
    const auto wq = read_stack(dir / layer_file(l, "wq"), s.heads, s.hidden, s.head_dim);
    const auto wk = read_stack(dir / layer_file(l, "wk"), s.heads, s.hidden, s.head_dim);
    const auto wv = read_stack(dir / layer_file(l, "wv"), s.heads, s.hidden, s.head_dim);
    const auto wo = read_stack(dir / layer_file(l, "wo"), s.heads, s.head_dim, s.hidden);
    layer.heads.resize(s.heads);
    for (Index i = 0; i < s.heads; ++i) layer.heads[i] = {wq[i], wk[i], wv[i], wo[i]};
    layer.w1 = read_matrix_checked(dir / layer_file(l, "w1"), s.filters, s.hidden);
    layer.b1 = read_vector_checked(dir / layer_file(l, "b1"), s.filters);
    layer.w2 = read_matrix_checked(dir / layer_file(l, "w2"), s.hidden, s.filters);
    layer.b2 = read_vector_checked(dir / layer_file(l, "b2"), s.hidden);
    layer.ln1_gamma = read_vector_checked(dir / layer_file(l, "ln1_gamma"), s.hidden);
    layer.ln1_beta = read_vector_checked(dir / layer_file(l, "ln1_beta"), s.hidden);
    layer.ln2_gamma = read_vector_checked(dir / layer_file(l, "ln2_gamma"), s.hidden);
    layer.ln2_beta = read_vector_checked(dir / layer_file(l, "ln2_beta"), s.hidden);
  }
  return model;
}

void save_batch(const SampleBatch& batch, const fs::path& dir) {
  if (batch.size() == 0) throw std::invalid_argument("save_batch: empty batch");
  fs::create_directories(dir);
  write_stack(dir / "inputs.pkt", batch.inputs);
  std::vector<double> labels(batch.labels.begin(), batch.labels.end());
  const std::vector<std::uint64_t> dims = {labels.size()};
  write_tensor(dir / "labels.pkt", dims, labels);
}

SampleBatch load_batch(const fs::path& dir) {
  const Tensor in = read_tensor(dir / "inputs.pkt");
  if (in.dims.size() != 3) throw ShapeError("inputs.pkt must be 3-d");
  const auto count = static_cast<Index>(in.dims[0]);
  SampleBatch batch;
  batch.inputs = read_stack(dir / "inputs.pkt", count, static_cast<Index>(in.dims[1]), static_cast<Index>(in.dims[2]));
  const Tensor labels = read_tensor(dir / "labels.pkt");
  if (labels.dims.size() != 1 || static_cast<Index>(labels.dims[0]) != count)
    throw ShapeError("labels.pkt does not match inputs");
  for (double v : labels.values) batch.labels.push_back(static_cast<int>(v));
  return batch;
}

void save_masks(const MaskSet& masks, const fs::path& dir) {
  fs::create_directories(dir);
  const auto layers = static_cast<Index>(masks.heads.size());
  Matrix heads(layers, layers ? masks.heads[0].size() : 0);
  Matrix filters(layers, layers ? masks.filters[0].size() : 0);
  for (Index l = 0; l < layers; ++l) {
    if (masks.heads[l].size() != heads.cols() || masks.filters[l].size() != filters.cols())
      throw ShapeError("save_masks: ragged masks");
    heads.row(l) = masks.heads[l].transpose();
    filters.row(l) = masks.filters[l].transpose();
  }
  write_matrix(dir / "head_masks.pkt", heads);
  write_matrix(dir / "filter_masks.pkt", filters);
}

MaskSet load_masks(const fs::path& dir) {
  const Matrix heads = read_matrix(dir / "head_masks.pkt");
  const Matrix filters = read_matrix(dir / "filter_masks.pkt");
  if (heads.rows() != filters.rows()) throw ShapeError("mask files disagree on layer count");
  MaskSet m;
  for (Index l = 0; l < heads.rows(); ++l) {
    m.heads.push_back(heads.row(l).transpose());
    m.filters.push_back(filters.row(l).transpose());
  }
  return m;
}

}  // namespace maskprune
