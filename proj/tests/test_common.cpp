#include <gtest/gtest.h>

#include <atomic>
#include <boost/math/distributions/chi_squared.hpp>

#include "fusedrec/common.hpp"

namespace fusedrec {
namespace {

double chi_square_p(const std::vector<std::size_t>& counts, double expected) {
  double stat = 0.0;
  for (const auto c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_EQ(a, b);
}

TEST(Rng, UniformIndexUsesOneDrawAndStaysInRange) {
  Rng rng(1);
  for (std::uint64_t n : {1ULL, 2ULL, 7ULL, 1000ULL, 1ULL << 40}) {
    const auto before = rng.draws();
    const auto v = rng.uniform_index(n);
    EXPECT_EQ(rng.draws(), before + 1);
    EXPECT_LT(v, n);
  }
}

TEST(Rng, UniformIndexPassesChiSquare) {
  Rng rng(3);
  std::vector<std::size_t> counts(37, 0);
  const std::size_t n = 370000;
  for (std::size_t i = 0; i < n; ++i) ++counts[rng.uniform_index(counts.size())];
  EXPECT_GT(chi_square_p(counts, static_cast<double>(n) / counts.size()), 0.001);
}

TEST(Rng, NormalMoments) {
  Rng rng(5);
  double s1 = 0.0;
  double s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s1 += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s1 / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
  EXPECT_EQ(rng.draws(), 2u * n);
}

TEST(Rng, Uniform01Range) {
  Rng rng(9);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform01();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Rng, SerializeRoundTripContinuesStream) {
  Rng rng(11);
  for (int i = 0; i < 17; ++i) rng.next();
  Rng copy = Rng::deserialize(rng.serialize());
  EXPECT_EQ(copy, rng);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(copy.next(), rng.next());
  EXPECT_THROW(Rng::deserialize("garbage"), FormatError);
}

TEST(DeriveSeed, DistinctLabelsDistinctSeeds) {
  EXPECT_NE(derive_seed(0, "a"), derive_seed(0, "b"));
  EXPECT_NE(derive_seed(0, "a"), derive_seed(1, "a"));
  EXPECT_EQ(derive_seed(7, "x"), derive_seed(7, "x"));
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  for (std::size_t workers : {1u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(101);
    parallel_for(hits.size(), workers, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
}

TEST(ParallelFor, RethrowsWorkerFailure) {
  EXPECT_THROW(parallel_for(10, 4,
                            [](std::size_t i) {
                              if (i == 5) throw Error("boom");
                            }),
               Error);
}

TEST(ParseError, NamesSourceAndLine) {
  const ParseError e("f.tsv", 3, "bad");
  EXPECT_EQ(e.line(), 3u);
  EXPECT_STREQ(e.what(), "f.tsv:3: bad");
}

}  // namespace
}  // namespace fusedrec
