#include "maskprune/fisher.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

using namespace maskprune;
using namespace maskprune::testing;

namespace {

std::vector<Vector> random_grads(std::mt19937_64& rng, Index count, Index n) {
  std::normal_distribution<double> dist;
  std::vector<Vector> g(count, Vector(n));
  for (auto& v : g)
    for (Index i = 0; i < n; ++i) v(i) = dist(rng);
  return g;
}

// Offset of (layer, head) and (layer, filter) in the flattened mask vector.
Index head_index(const ModelShape& s, Index l, Index i) { return l * (s.heads + s.filters) + i; }
Index filter_index(const ModelShape& s, Index l, Index i) { return l * (s.heads + s.filters) + s.heads + i; }

void expect_rel(double got, double want, double rtol) {
  EXPECT_LE(std::abs(got - want), rtol * std::max(std::abs(want), 1e-300)) << got << " vs " << want;
}

}  // namespace

TEST(FisherDiagonal, HandArithmetic) {
  const ModelShape shape = make_shape(1, 1, 1, 2, 1);
  const FisherDiagonal d = fisher_diagonal({Vector{{1.0, 2.0}}, Vector{{3.0, 0.0}}}, shape);
  EXPECT_EQ(d.head_scores(0, 0), 5.0);
  EXPECT_EQ(d.filter_scores(0, 0), 2.0);
}

TEST(FisherDiagonal, EqualGradientsGiveSquares) {
  const ModelShape shape = make_shape(2, 2, 3, 4, 2);
  std::mt19937_64 rng(1);
  const Vector g = random_grads(rng, 1, shape.mask_count())[0];
  const FisherDiagonal d = fisher_diagonal(std::vector<Vector>(7, g), shape);
  for (Index l = 0; l < 2; ++l) {
    for (Index i = 0; i < 2; ++i) expect_rel(d.head_scores(l, i), g(head_index(shape, l, i)) * g(head_index(shape, l, i)), 1e-15);
    for (Index i = 0; i < 3; ++i)
      expect_rel(d.filter_scores(l, i), g(filter_index(shape, l, i)) * g(filter_index(shape, l, i)), 1e-15);
  }
}

TEST(FisherDiagonal, MatchesOuterProductOnToyModel) {
  const ModelShape shape = small_shape();
  const ToyTransformer model = init_toy_model(shape, 3);
  const SampleBatch batch = generate_toy_data(model, 64, 3);
  const auto grads = mask_gradients(model, batch);
  const Matrix full = outer_product_fisher(grads);
  const FisherDiagonal d = fisher_diagonal(grads, shape);
  const FisherBlocks b = fisher_blocks(grads, shape);
  for (Index l = 0; l < shape.layers; ++l) {
    for (Index i = 0; i < shape.heads; ++i) {
      expect_rel(d.head_scores(l, i), full(head_index(shape, l, i), head_index(shape, l, i)), 1e-10);
      for (Index j = 0; j < shape.heads; ++j)
        EXPECT_NEAR(b.head_blocks[l](i, j), full(head_index(shape, l, i), head_index(shape, l, j)),
                    1e-10 * std::abs(full(head_index(shape, l, i), head_index(shape, l, j))) + 1e-300);
    }
    for (Index i = 0; i < shape.filters; ++i) {
      expect_rel(d.filter_scores(l, i), full(filter_index(shape, l, i), filter_index(shape, l, i)), 1e-10);
      for (Index j = 0; j < shape.filters; ++j)
        EXPECT_NEAR(b.filter_blocks[l](i, j), full(filter_index(shape, l, i), filter_index(shape, l, j)),
                    1e-10 * std::abs(full(filter_index(shape, l, i), filter_index(shape, l, j))) + 1e-300);
    }
  }
}

TEST(FisherBlocks, SingleSampleIsRankOne) {
  const ModelShape shape = make_shape(2, 4, 5, 8, 2);
  std::mt19937_64 rng(2);
  const Vector g = random_grads(rng, 1, shape.mask_count())[0];
  const FisherBlocks b = fisher_blocks({g}, shape);
  for (Index l = 0; l < 2; ++l) {
    const Vector gh = g.segment(head_index(shape, l, 0), 4);
    const Vector gf = g.segment(filter_index(shape, l, 0), 5);
    EXPECT_LE((b.head_blocks[l] - gh * gh.transpose()).norm(), 1e-15 * gh.squaredNorm());
    EXPECT_LE((b.filter_blocks[l] - gf * gf.transpose()).norm(), 1e-15 * gf.squaredNorm());
    Eigen::FullPivLU<Matrix> lu(b.head_blocks[l]);
    lu.setThreshold(1e-10);
    EXPECT_EQ(lu.rank(), 1);
  }
}

TEST(FisherBlocks, DiagonalsEqualFisherDiagonalExactly) {
  const ModelShape shape = make_shape(3, 4, 6, 8, 2);
  std::mt19937_64 rng(3);
  const auto grads = random_grads(rng, 33, shape.mask_count());
  const FisherDiagonal d = fisher_diagonal(grads, shape);
  const FisherDiagonal from_blocks = diagonal_of(fisher_blocks(grads, shape));
  EXPECT_EQ(d.head_scores, from_blocks.head_scores);
  EXPECT_EQ(d.filter_scores, from_blocks.filter_scores);
}

TEST(FisherBlocks, SymmetricAndPositiveSemidefinite) {
  const ModelShape shape = make_shape(2, 4, 7, 8, 2);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto grads = random_grads(rng, 1 + trial % 6, shape.mask_count());
    const FisherBlocks b = fisher_blocks(grads, shape);
    for (const auto* blocks : {&b.head_blocks, &b.filter_blocks})
      for (const Matrix& m : *blocks) {
        EXPECT_EQ(m, m.transpose());
        Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
        EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-8);
      }
  }
}

TEST(FisherDiagonal, ScalesQuadratically) {
  const ModelShape shape = make_shape(2, 2, 3, 4, 2);
  std::mt19937_64 rng(5);
  auto grads = random_grads(rng, 10, shape.mask_count());
  const FisherDiagonal d = fisher_diagonal(grads, shape);
  for (auto& g : grads) g *= 3.0;
  const FisherDiagonal scaled = fisher_diagonal(grads, shape);
  EXPECT_LE((scaled.head_scores - 9.0 * d.head_scores).norm(), 1e-12 * d.head_scores.norm());
  EXPECT_LE((scaled.filter_scores - 9.0 * d.filter_scores).norm(), 1e-12 * d.filter_scores.norm());
}

TEST(FisherDiagonal, SampleOrderInvariant) {
  const ModelShape shape = make_shape(2, 2, 3, 4, 2);
  std::mt19937_64 rng(6);
  auto grads = random_grads(rng, 25, shape.mask_count());
  const FisherDiagonal d = fisher_diagonal(grads, shape);
  std::shuffle(grads.begin(), grads.end(), rng);
  const FisherDiagonal p = fisher_diagonal(grads, shape);
  EXPECT_LE((p.head_scores - d.head_scores).norm(), 1e-13 * d.head_scores.norm());
  EXPECT_LE((p.filter_scores - d.filter_scores).norm(), 1e-13 * d.filter_scores.norm());
}

TEST(FisherDiagonal, RejectsBadInput) {
  const ModelShape shape = make_shape(1, 1, 1, 2, 1);
  EXPECT_THROW(fisher_diagonal({}, shape), std::invalid_argument);
  EXPECT_THROW(fisher_diagonal({Vector{{1.0, 2.0, 3.0}}}, shape), std::invalid_argument);
  EXPECT_THROW(fisher_blocks({Vector{{1.0, std::nan("")}}}, shape), std::invalid_argument);
}

TEST(FisherIo, RoundTrip) {
  TempDir dir("fisher");
  const ModelShape shape = make_shape(2, 3, 4, 6, 2);
  std::mt19937_64 rng(7);
  const auto grads = random_grads(rng, 5, shape.mask_count());
  const FisherDiagonal d = fisher_diagonal(grads, shape);
  const FisherBlocks b = fisher_blocks(grads, shape);
  save_fisher(d, &b, dir.path());
  const FisherDiagonal d2 = load_fisher_diagonal(dir.path());
  EXPECT_EQ(d2.head_scores, d.head_scores);
  EXPECT_EQ(d2.filter_scores, d.filter_scores);
  const FisherBlocks b2 = load_fisher_blocks(dir.path());
  ASSERT_EQ(b2.head_blocks.size(), 2u);
  EXPECT_EQ(b2.head_blocks[1], b.head_blocks[1]);
  EXPECT_EQ(b2.filter_blocks[0], b.filter_blocks[0]);
}
