#include "maskprune/cost_model.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace maskprune;
using namespace maskprune::testing;

namespace {

std::vector<Index> range(Index lo, Index hi) {
  std::vector<Index> v;
  for (Index n = lo; n <= hi; ++n) v.push_back(n);
  return v;
}

// Straight-line piecewise evaluation used as an oracle.
double lat_oracle(double a, double c, Index t, Index n) {
  if (n == 0) return 0.0;
  return n <= t ? c : c + a * static_cast<double>(n - t);
}

}  // namespace

TEST(Flops, BertBaseConstants) {
  const FlopsCost f = flops_constants(make_shape(12, 12, 3072, 768, 128));
  EXPECT_EQ(f.head, 54525952.0);
  EXPECT_EQ(f.filter, 393216.0);
}

TEST(Flops, UnitShape) {
  const FlopsCost f = flops_constants(make_shape(1, 1, 1, 1, 1));
  EXPECT_EQ(f.head, 12.0);
  EXPECT_EQ(f.filter, 4.0);
}

TEST(Flops, MaskFlopsConsistency) {
  const ModelShape shape = make_shape(3, 4, 10, 8, 6);
  const FlopsCost f = flops_constants(shape);
  EXPECT_EQ(f.full_cost(), mask_flops(MaskSet::ones(shape), f));
  EXPECT_EQ(f.full_cost(), 3 * (4 * f.head + 10 * f.filter));
  MaskSet zeros = MaskSet::ones(shape);
  for (auto& v : zeros.heads) v.setZero();
  for (auto& v : zeros.filters) v.setZero();
  EXPECT_EQ(mask_flops(zeros, f), 0.0);
}

TEST(Flops, DependsOnSupportOnly) {
  const ModelShape shape = make_shape(2, 4, 6, 8, 4);
  const FlopsCost f = flops_constants(shape);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-9.0, 9.0);
  for (int trial = 0; trial < 20; ++trial) {
    MaskSet binary = MaskSet::ones(shape);
    for (auto& v : binary.heads) v = random_binary(rng, v.size(), rng() % 5);
    for (auto& v : binary.filters) v = random_binary(rng, v.size(), rng() % 7);
    MaskSet tuned = binary;
    for (auto* group : {&tuned.heads, &tuned.filters})
      for (auto& v : *group)
        for (Index i = 0; i < v.size(); ++i)
          if (v(i) != 0.0) {
            double x = u(rng);
            v(i) = x == 0.0 ? 1.0 : x;
          }
    EXPECT_EQ(mask_flops(tuned, f), mask_flops(binary, f));
  }
}

TEST(LatencyFit, PureLinearPrefersZeroThreshold) {
  const auto n = range(1, 12);
  std::vector<double> lat;
  for (Index k : n) lat.push_back(2.0 * static_cast<double>(k));
  const LatencyFit fit = fit_piecewise_latency(n, lat);
  EXPECT_EQ(fit.model.threshold, 0);
  EXPECT_NEAR(fit.model.a, 2.0, 1e-12);
  EXPECT_NEAR(fit.model.c, 0.0, 1e-12);
  EXPECT_NEAR(fit.mse, 0.0, 1e-20);
}

TEST(LatencyFit, RecoversExactPiecewiseModel) {
  const auto n = range(1, 20);
  std::vector<double> lat;
  for (Index k : n) lat.push_back(lat_oracle(3.0, 5.0, 8, k));
  const LatencyFit fit = fit_piecewise_latency(n, lat);
  EXPECT_EQ(fit.model.threshold, 8);
  EXPECT_NEAR(fit.model.a, 3.0, 1e-10);
  EXPECT_NEAR(fit.model.c, 5.0, 1e-10);
  EXPECT_NEAR(fit.mse, 0.0, 1e-18);
}

TEST(LatencyFit, RecoversUnderNoise) {
  const auto n = range(1, 20);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1e-3);
    std::vector<double> lat;
    for (Index k : n) lat.push_back(lat_oracle(3.0, 5.0, 8, k) + noise(rng));
    const LatencyFit fit = fit_piecewise_latency(n, lat);
    EXPECT_EQ(fit.model.threshold, 8) << "seed " << seed;
    EXPECT_NEAR(fit.model.a, 3.0, 0.03) << "seed " << seed;
    EXPECT_NEAR(fit.model.c, 5.0, 0.05) << "seed " << seed;
  }
}

TEST(LatencyFit, RejectsDegenerateInput) {
  EXPECT_THROW(fit_piecewise_latency({1, 2}, {1.0, 2.0}), std::invalid_argument);
  EXPECT_THROW(fit_piecewise_latency({1, 2, 3}, {1.0, 2.0}), std::invalid_argument);
  EXPECT_THROW(fit_piecewise_latency({1, 1, 1, 1}, {1.0, 2.0, 3.0, 4.0}), std::invalid_argument);
}

TEST(MaskLatency, FullyPrunedIsZero) {
  const ModelShape shape = make_shape(3, 4, 6, 8, 4);
  LatencyModel lat{{2.0, 7.0, 2}, {1.0, 3.0, 1}};
  MaskSet zeros = MaskSet::ones(shape);
  for (auto& v : zeros.heads) v.setZero();
  for (auto& v : zeros.filters) v.setZero();
  EXPECT_EQ(mask_latency(zeros, lat), 0.0);
}

TEST(MaskLatency, FlatRegime) {
  const ModelShape shape = make_shape(1, 6, 4, 6, 4);
  LatencyModel lat{{2.0, 7.0, 4}, {1.0, 3.0, 1}};
  MaskSet m = MaskSet::ones(shape);
  m.heads[0] << 0, 0, 1, 0, 0, 0;
  m.filters[0].setZero();
  EXPECT_EQ(mask_latency(m, lat), 7.0);
}

TEST(MaskLatency, MatchesScalarEvaluation) {
  const ModelShape shape = make_shape(3, 5, 8, 10, 4);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    LatencyModel lat{{u(rng), u(rng), static_cast<Index>(rng() % 4)}, {u(rng), u(rng), static_cast<Index>(rng() % 6)}};
    MaskSet m = MaskSet::ones(shape);
    double expected = 0;
    for (Index l = 0; l < 3; ++l) {
      const Index ph = rng() % 6, pf = rng() % 9;
      m.heads[l] = random_binary(rng, 5, ph);
      m.filters[l] = random_binary(rng, 8, pf);
      expected += lat_oracle(lat.mha.a, lat.mha.c, lat.mha.threshold, 5 - ph);
      expected += lat_oracle(lat.ffn.a, lat.ffn.c, lat.ffn.threshold, 8 - pf);
    }
    EXPECT_NEAR(mask_latency(m, lat), expected, 1e-12 * expected);
  }
  LatencyModel lat{{1.0, 2.0, 1}, {0.5, 1.0, 2}};
  EXPECT_EQ(full_latency(shape, lat), mask_latency(MaskSet::ones(shape), lat));
}

TEST(LatencyTable, ParsesCsv) {
  const LatencyTable t = parse_latency_csv("kind,n_active,latency_us\nmha,1,10\nmha,2,10\nmha,3,15\nffn,1,2\nffn,2,4\nffn,4,8\n");
  ASSERT_EQ(t.entries.size(), 6u);
  EXPECT_EQ(t.entries[2].kind, LayerKind::mha);
  EXPECT_EQ(t.entries[2].n_active, 3);
  EXPECT_DOUBLE_EQ(t.entries[2].latency, 15e-6);
  EXPECT_NO_THROW(t.validate());
  const LatencyTable again = parse_latency_csv(latency_csv(t));
  ASSERT_EQ(again.entries.size(), 6u);
  EXPECT_NEAR(again.entries[5].latency, 8e-6, 1e-18);

  const LatencyModel m = fit_latency_model(t);
  EXPECT_EQ(m.mha.threshold, 2);
  EXPECT_NEAR(m.mha.a, 5e-6, 1e-15);
  EXPECT_NEAR(m.ffn.a, 2e-6, 1e-15);
}

TEST(LatencyTable, RejectsMalformedCsv) {
  EXPECT_THROW(parse_latency_csv("kind,n,lat\nmha,1,2\n"), std::invalid_argument);
  EXPECT_THROW(parse_latency_csv("kind,n_active,latency_us\nattn,1,2\n"), std::invalid_argument);
  EXPECT_THROW(parse_latency_csv("kind,n_active,latency_us\nmha,x,2\n"), std::invalid_argument);
  EXPECT_THROW(parse_latency_csv("kind,n_active,latency_us\nmha,1\n"), std::invalid_argument);
}

TEST(LatencyTable, ValidatesAgainstShape) {
  const ModelShape shape = make_shape(1, 2, 4, 4, 2);
  const LatencyTable too_wide = parse_latency_csv("kind,n_active,latency_us\nmha,1,1\nmha,2,2\nmha,3,3\nffn,1,1\nffn,2,2\nffn,3,3\n");
  EXPECT_THROW(too_wide.validate(&shape), std::invalid_argument);
  const LatencyTable sparse = parse_latency_csv("kind,n_active,latency_us\nmha,1,1\nmha,2,2\nffn,1,1\nffn,2,2\nffn,3,3\n");
  EXPECT_THROW(sparse.validate(), std::invalid_argument);
  const LatencyTable negative = parse_latency_csv("kind,n_active,latency_us\nmha,1,-1\nmha,2,2\nmha,3,3\n");
  EXPECT_THROW(negative.validate(), std::invalid_argument);
}

TEST(LatencyModelJson, RoundTrip) {
  LatencyModel lat{{2.5e-6, 40e-6, 3}, {1.25e-6, 10e-6, 0}};
  const LatencyModel back = latency_model_from_json(latency_model_to_json(lat));
  EXPECT_EQ(back.mha.a, lat.mha.a);
  EXPECT_EQ(back.mha.c, lat.mha.c);
  EXPECT_EQ(back.mha.threshold, 3);
  EXPECT_EQ(back.ffn.a, lat.ffn.a);
  EXPECT_EQ(back.ffn.threshold, 0);
  EXPECT_THROW(latency_model_from_json(R"({"mha":{"a":-1,"c":0,"threshold":0},"ffn":{"a":1,"c":0,"threshold":0}})"),
               std::exception);
}
