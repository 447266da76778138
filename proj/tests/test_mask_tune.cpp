#include "maskprune/mask_tune.hpp"

#include "maskprune/cost_model.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <Eigen/Cholesky>

using namespace maskprune;
using namespace maskprune::testing;

namespace {

// Output of one first-layer head for one example, computed with plain loops.
Rows first_layer_head_output(const ToyTransformer& model, Index head, const Matrix& input) {
  const Rows h = matmul(to_rows(input), model.embedding);
  const auto& w = model.layers[0].heads[head];
  const Rows q = matmul(h, w.wq), k = matmul(h, w.wk), v = matmul(h, w.wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(w.wq.cols()));
  Rows ctx(h.size(), std::vector<double>(w.wv.cols(), 0.0));
  for (std::size_t t = 0; t < h.size(); ++t) {
    std::vector<double> p(h.size());
    double mx = -1e300, z = 0;
    for (std::size_t r = 0; r < h.size(); ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < q[t].size(); ++j) dot += q[t][j] * k[r][j];
      mx = std::max(mx, p[r] = dot * scale);
    }
    for (double& x : p) z += (x = std::exp(x - mx));
    for (std::size_t r = 0; r < h.size(); ++r)
      for (std::size_t j = 0; j < ctx[t].size(); ++j) ctx[t][j] += p[r] / z * v[r][j];
  }
  return matmul(ctx, w.wo);
}

double damped(const Matrix& A, const Vector& rhs, const Vector& r, double damp) {
  return (A * r - rhs).squaredNorm() + damp * damp * r.squaredNorm();
}

ReconProblem random_problem(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> dist;
  ReconProblem p;
  p.A.resize(rows, cols);
  p.b.resize(rows);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) p.A(i, j) = dist(rng);
    p.b(i) = dist(rng);
  }
  for (Index j = 0; j < cols; ++j) p.unit_ids.push_back(j);
  return p;
}

MaskSet random_pruning(std::mt19937_64& rng, const ModelShape& shape) {
  MaskSet m = MaskSet::ones(shape);
  for (auto& v : m.heads) v = random_binary(rng, v.size(), static_cast<Index>(rng() % v.size()));
  for (auto& v : m.filters) v = random_binary(rng, v.size(), static_cast<Index>(rng() % v.size()));
  return m;
}

struct Fixture {
  ModelShape shape = make_shape(2, 4, 12, 8, 5);
  ToyTransformer model = init_toy_model(shape, 31);
  SampleBatch data = generate_toy_data(model, 16, 31);
};

}  // namespace

TEST(ReconProblem, NothingPrunedHasZeroResidual) {
  Fixture f;
  for (Index s = 0; s < 2 * f.shape.layers; ++s) {
    const ReconProblem p = build_recon_problem(f.model, MaskSet::ones(f.shape), f.data, SublayerId::from_index(s));
    const Vector residual = p.b - p.A * Vector::Ones(p.A.cols());
    EXPECT_LE(residual.norm(), 1e-10 * p.b.norm()) << "sublayer " << s;
  }
}

TEST(ReconProblem, PrunedFirstLayerHeadIsTheResidual) {
  Fixture f;
  MaskSet masks = MaskSet::ones(f.shape);
  masks.heads[0](2) = 0.0;
  const ReconProblem p = build_recon_problem(f.model, masks, f.data, {0, SublayerKind::attention});
  EXPECT_EQ(p.unit_ids, (std::vector<Index>{0, 1, 3}));
  const Vector residual = p.b - p.A * Vector::Ones(3);
  Vector expected(residual.size());
  Index k = 0;
  for (Index e = 0; e < f.data.size(); ++e)
    for (const auto& row : first_layer_head_output(f.model, 2, f.data.inputs[e]))
      for (double v : row) expected(k++) = v;
  ASSERT_EQ(k, residual.size());
  EXPECT_LE((residual - expected).norm(), 1e-10 * expected.norm());
}

TEST(TuneLayer, ExactProblemGivesZeroUpdate) {
  std::mt19937_64 rng(1);
  ReconProblem p = random_problem(rng, 30, 4);
  p.b = p.A * Vector::Ones(4);
  const LayerTune t = tune_layer(p);
  EXPECT_TRUE(t.accepted);
  EXPECT_LE(t.delta.norm(), 1e-12);
  EXPECT_LE((t.values - Vector::Ones(4)).norm(), 1e-12);
}

TEST(TuneLayer, ScalarDampedSolution) {
  ReconProblem p;
  p.A = Matrix::Zero(3, 1);
  p.A(1, 0) = 1.0;
  p.b = 3.0 * p.A.col(0);  // b - A 1 = 2a
  p.unit_ids = {0};
  const LayerTune t = tune_layer(p, {.damp = 1.0});
  EXPECT_TRUE(t.accepted);
  EXPECT_NEAR(t.delta(0), 1.0, 1e-12);
  EXPECT_NEAR(t.values(0), 2.0, 1e-12);
}

TEST(TuneLayer, MatchesNormalEquationsAndNeverWorseThanZero) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Index cols = 1 + static_cast<Index>(rng() % 8);
    const ReconProblem p = random_problem(rng, cols + 5 + static_cast<Index>(rng() % 40), cols);
    const double damp = 0.1 + static_cast<double>(rng() % 20) / 10.0;
    const TuneOptions opts{.damp = damp, .lower = -1e9, .upper = 1e9};
    const LayerTune t = tune_layer(p, opts);
    const Vector rhs = p.b - p.A * Vector::Ones(cols);
    const Matrix normal = p.A.transpose() * p.A + damp * damp * Matrix::Identity(cols, cols);
    const Vector oracle = normal.llt().solve(p.A.transpose() * rhs);
    EXPECT_LE((t.delta - oracle).norm(), 1e-8 * (1 + oracle.norm())) << "trial " << trial;
    EXPECT_LE(damped(p.A, rhs, t.delta, damp), damped(p.A, rhs, Vector::Zero(cols), damp) + 1e-8);
  }
}

TEST(TuneLayer, RejectsOutOfRangeValues) {
  ReconProblem p;
  p.A = Matrix::Zero(2, 1);
  p.A(0, 0) = 1.0;
  p.b = 101.0 * p.A.col(0);  // r = 50 under damp 1
  p.unit_ids = {0};
  const LayerTune t = tune_layer(p);
  EXPECT_FALSE(t.accepted);
  EXPECT_NEAR(t.values(0), 51.0, 1e-9);
  EXPECT_TRUE(tune_layer(p, {.lower = -100, .upper = 100}).accepted);
}

TEST(TuneLayer, RejectsUnconvergedSolve) {
  std::mt19937_64 rng(3);
  const ReconProblem p = random_problem(rng, 40, 6);
  const LayerTune t = tune_layer(p, {.damp = 1e-3, .lower = -1e9, .upper = 1e9, .max_iterations = 1});
  EXPECT_FALSE(t.converged);
  EXPECT_FALSE(t.accepted);
}

TEST(TuneLayer, RejectsEmptyProblem) {
  ReconProblem p;
  p.A = Matrix(4, 0);
  p.b = Vector::Zero(4);
  EXPECT_THROW(tune_layer(p), std::invalid_argument);
}

TEST(TuneModel, AllOnesStaysAllOnes) {
  Fixture f;
  const auto [masks, report] = tune_model(f.model, f.data, MaskSet::ones(f.shape));
  EXPECT_EQ(report.entries.size(), 4u);
  for (const auto& e : report.entries) EXPECT_EQ(e.status, TuneStatus::tuned);
  for (const auto* group : {&masks.heads, &masks.filters})
    for (const Vector& v : *group) EXPECT_LE((v - Vector::Ones(v.size())).lpNorm<Eigen::Infinity>(), 1e-10);
  EXPECT_FALSE(report.stopped());
}

TEST(TuneModel, PreservesSupportAndCost) {
  Fixture f;
  std::mt19937_64 rng(4);
  const FlopsCost flops = flops_constants(f.shape);
  for (int trial = 0; trial < 5; ++trial) {
    const MaskSet binary = random_pruning(rng, f.shape);
    const auto [tuned, report] = tune_model(f.model, f.data, binary);
    for (Index l = 0; l < f.shape.layers; ++l) {
      EXPECT_TRUE(((tuned.heads[l].array() == 0.0) == (binary.heads[l].array() == 0.0)).all());
      EXPECT_TRUE(((tuned.filters[l].array() == 0.0) == (binary.filters[l].array() == 0.0)).all());
      EXPECT_LE(tuned.heads[l].cwiseAbs().maxCoeff(), 10.0);
      EXPECT_LE(tuned.filters[l].cwiseAbs().maxCoeff(), 10.0);
    }
    EXPECT_EQ(mask_flops(tuned, flops), mask_flops(binary, flops));
    EXPECT_EQ(report.final_masks, tuned);
  }
}

TEST(TuneModel, FirstRejectionStopsTuning) {
  Fixture f;
  MaskSet binary = MaskSet::ones(f.shape);
  binary.filters[0](3) = 0.0;  // first pruned sublayer is FFN_0
  binary.heads[1](1) = 0.0;
  // A zero-width range accepts only r = 0, which holds exactly where nothing is pruned.
  const auto [tuned, report] = tune_model(f.model, f.data, binary, {.lower = 1.0, .upper = 1.0});
  ASSERT_EQ(report.entries.size(), 4u);
  EXPECT_EQ(report.entries[0].status, TuneStatus::tuned);
  EXPECT_EQ(report.entries[1].status, TuneStatus::reverted_and_stopped);
  EXPECT_EQ(report.entries[2].status, TuneStatus::skipped_after_stop);
  EXPECT_EQ(report.entries[3].status, TuneStatus::skipped_after_stop);
  EXPECT_TRUE(report.stopped());
  EXPECT_EQ(tuned.filters[0], binary.filters[0]);
  EXPECT_EQ(tuned.heads[1], binary.heads[1]);
  EXPECT_EQ(tuned.filters[1], binary.filters[1]);
}

TEST(TuneModel, FullyPrunedSublayerIsSkippedWithoutStopping) {
  Fixture f;
  MaskSet binary = MaskSet::ones(f.shape);
  binary.heads[0].setZero();
  binary.filters[1](0) = 0.0;
  const auto [tuned, report] = tune_model(f.model, f.data, binary);
  EXPECT_EQ(report.entries[0].status, TuneStatus::empty);
  EXPECT_NE(report.entries[1].status, TuneStatus::skipped_after_stop);
  EXPECT_EQ(tuned.heads[0], Vector::Zero(4));
  EXPECT_NE(report.to_json().find("\"status\""), std::string::npos);
}

TEST(TuneModel, StatusesAreMonotone) {
  Fixture f;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const MaskSet binary = random_pruning(rng, f.shape);
    const auto [tuned, report] = tune_model(f.model, f.data, binary, {.lower = 0.5, .upper = 1.5});
    bool stopped = false;
    for (const auto& e : report.entries) {
      if (stopped) EXPECT_EQ(e.status, TuneStatus::skipped_after_stop);
      if (e.status == TuneStatus::reverted_and_stopped) stopped = true;
      if (e.status == TuneStatus::tuned) {
        EXPECT_GE(e.min_value, 0.5);
        EXPECT_LE(e.max_value, 1.5);
      }
    }
  }
}

TEST(TuneModel, RejectsBadInput) {
  Fixture f;
  MaskSet tuned = MaskSet::ones(f.shape);
  tuned.heads[0](0) = 0.5;
  EXPECT_THROW(tune_model(f.model, f.data, tuned), std::invalid_argument);
  EXPECT_THROW(tune_model(f.model, f.data.slice(0, 0), MaskSet::ones(f.shape)), std::invalid_argument);
}
