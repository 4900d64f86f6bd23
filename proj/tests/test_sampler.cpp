#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <unordered_set>

#include "fusedrec/sampler.hpp"
#include "test_util.hpp"

namespace fusedrec {
namespace {

TEST(SampleIds, EmptyAndSingleton) {
  Rng rng(1);
  EXPECT_TRUE(sample_ids(0, 10, rng).empty());
  EXPECT_EQ(rng.draws(), 0u);
  for (auto id : sample_ids(100, 1, rng)) EXPECT_EQ(id, 0u);
  EXPECT_THROW(sample_ids(3, 0, rng), Error);
}

TEST(SampleIds, OneDrawPerNegative) {
  Rng rng(2);
  for (std::size_t n : {1u, 17u, 128u}) {
    const auto before = rng.draws();
    sample_ids(n, 1000, rng);
    EXPECT_EQ(rng.draws() - before, n);
  }
}

TEST(SampleIds, ChiSquareUniform) {
  Rng rng(3);
  const auto ids = sample_ids(100000, 50, rng);
  std::vector<std::size_t> counts(50, 0);
  for (auto id : ids) ++counts.at(id);
  const double expected = 2000.0;
  double stat = 0.0;
  for (auto c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(49.0);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, stat)), 0.001);
}

TEST(SampleIds, SameRngStateSameIds) {
  Rng a(4);
  Rng b(4);
  EXPECT_EQ(sample_ids(64, 99, a), sample_ids(64, 99, b));
}

TEST(NegativeEmbedding, ForcedExample) {
  FusedItemSpace s;
  s.mode = FusionMode::add;
  s.id_emb = Matrix(1, 2);
  s.id_emb << 3, 0;
  s.w_text = Matrix::Zero(2, 2);
  s.w_neg = Matrix::Identity(2, 2);
  s.gate = Matrix::Zero(1, 2);
  auto text = std::make_shared<Matrix>(1, 2);
  *text << 0, 4;
  s.text = text;
  const RowVector e = fused_negative_embedding(0, s);
  EXPECT_NEAR(e(0), 0.6, 1e-15);
  EXPECT_NEAR(e(1), 0.8, 1e-15);
}

TEST(NegativeEmbedding, ZeroProjectionNormalizesId) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::add), 5);
  p.items.w_neg.setZero();
  for (ItemIndex i = 0; i < p.items.n_items(); ++i) {
    const RowVector expected = p.items.id_emb.row(i) / p.items.id_emb.row(i).norm();
    EXPECT_LT((fused_negative_embedding(i, p.items) - expected).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(NegativeEmbedding, UsesNegativeProjectionNotFusion) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::add), 6);
  const RowVector before = fused_negative_embedding(2, p.items);
  p.items.w_text *= 3.0;
  EXPECT_EQ(fused_negative_embedding(2, p.items), before);
  p.items.w_neg *= 3.0;
  EXPECT_NE(fused_negative_embedding(2, p.items), before);
}

TEST(NegativeEmbedding, UnitNormOnRandomInputs) {
  for (auto mode : {FusionMode::none, FusionMode::add, FusionMode::gate}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto p = testing::random_model(testing::tiny_config(mode), seed, 2.0);
      Rng rng(seed);
      const auto batch = sample_batch(64, p.items, rng);
      for (Eigen::Index r = 0; r < batch.embeddings.rows(); ++r) {
        EXPECT_NEAR(batch.embeddings.row(r).norm(), 1.0, 1e-6);
      }
    }
  }
}

TEST(NegativeEmbedding, ZeroVectorFallsBackToBasis) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::none), 7);
  p.items.id_emb.row(5).setZero();
  const ItemIndex ids[] = {5, 1};
  const auto batch = embed_negatives({ids, ids + 2}, p.items);
  EXPECT_EQ(batch.embeddings(0, 0), 1.0);
  EXPECT_EQ(batch.embeddings.row(0).norm(), 1.0);
  EXPECT_EQ(batch.raw_norms(0), 0.0);
  EXPECT_GT(batch.raw_norms(1), 0.0);
}

TEST(SampleBatch, NoneModeUsesIdOnly) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::none), 8);
  Rng rng(1);
  const auto batch = sample_batch(20, p.items, rng);
  for (std::size_t r = 0; r < batch.ids.size(); ++r) {
    const RowVector expected = p.items.id_emb.row(batch.ids[r]) / p.items.id_emb.row(batch.ids[r]).norm();
    EXPECT_LT((batch.embeddings.row(r) - expected).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(SampleBatch, SameRngSameBatch) {
  const auto p = testing::random_model(testing::tiny_config(FusionMode::add), 9);
  Rng a(3);
  Rng b(3);
  const auto x = sample_batch(30, p.items, a);
  const auto y = sample_batch(30, p.items, b);
  EXPECT_EQ(x.ids, y.ids);
  EXPECT_EQ(x.embeddings, y.embeddings);
}

TEST(SampleBatch, IdHistogramsIdenticalAcrossModes) {
  std::vector<std::vector<std::size_t>> hist;
  for (auto mode : {FusionMode::none, FusionMode::add, FusionMode::gate}) {
    const auto p = testing::random_model(testing::tiny_config(mode), 10);
    Rng rng(77);
    std::vector<std::size_t> h(p.items.n_items(), 0);
    for (int step = 0; step < 200; ++step) {
      for (auto id : sample_batch(128, p.items, rng).ids) ++h[id];
    }
    hist.push_back(h);
  }
  EXPECT_EQ(hist[0], hist[1]);
  EXPECT_EQ(hist[0], hist[2]);
}

TEST(SampleBatch, DuplicateCountMatchesBirthdayBound) {
  // Colliding pairs among n draws over I items: mean n(n-1)/(2I).
  const std::size_t n = 256;
  const std::size_t catalog = 1000;
  const double mean = n * (n - 1) / (2.0 * catalog);
  Rng rng(11);
  const int trials = 100;
  double total = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::vector<std::size_t> counts(catalog, 0);
    for (auto id : sample_ids(n, catalog, rng)) ++counts[id];
    double pairs = 0.0;
    for (auto c : counts) pairs += c * (c - 1) / 2.0;
    total += pairs;
  }
  const double avg = total / trials;
  // Per-trial pair count is close to Poisson, so its sd is about sqrt(mean).
  const double sigma = std::sqrt(mean / trials);
  EXPECT_NEAR(avg, mean, 4 * sigma);
}

TEST(NegativesBackward, FiniteDifferences) {
  auto p = testing::random_model(testing::tiny_config(FusionMode::add), 12);
  const std::vector<ItemIndex> ids{1, 4, 4, 9};
  Rng rng(5);
  const Matrix w = testing::random_matrix(4, 8, rng);
  auto objective = [&]() { return embed_negatives(ids, p.items).embeddings.cwiseProduct(w).sum(); };
  ModelParams grad = p.zeros_like();
  negatives_backward(embed_negatives(ids, p.items), w, p.items, grad.items);
  for (Matrix* m : {&p.items.id_emb, &p.items.w_neg}) {
    const Matrix& g = m == &p.items.id_emb ? grad.items.id_emb : grad.items.w_neg;
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const double keep = m->data()[i];
      m->data()[i] = keep + 1e-6;
      const double up = objective();
      m->data()[i] = keep - 1e-6;
      const double down = objective();
      m->data()[i] = keep;
      EXPECT_NEAR(g.data()[i], (up - down) / 2e-6, 1e-7);
    }
  }
  EXPECT_TRUE(grad.items.w_text.isZero(0));
}

}  // namespace
}  // namespace fusedrec
