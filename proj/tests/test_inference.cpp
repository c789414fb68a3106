#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "pmf/inference.hpp"

using namespace pmf;
using pmf::test::random_matrix;

namespace {

std::vector<std::size_t> brute_order(const Matrix& s, const Matrix& t, Eigen::Index i) {
  std::vector<std::pair<double, std::size_t>> v;
  for (Eigen::Index j = 0; j < t.rows(); ++j) {
    const double ns = s.row(i).norm(), nt = t.row(j).norm();
    const double c = ns == 0.0 || nt == 0.0 ? 0.0 : s.row(i).dot(t.row(j)) / (ns * nt);
    v.emplace_back(-c, static_cast<std::size_t>(j));
  }
  std::sort(v.begin(), v.end());
  std::vector<std::size_t> out;
  for (const auto& [c, j] : v) out.push_back(j);
  return out;
}

std::vector<std::size_t> random_ranks(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> u(1, 50);
  std::vector<std::size_t> r(n);
  for (auto& x : r) x = u(rng);
  return r;
}

}  // namespace

TEST(RankAll, ExactRowRanksFirst) {
  Matrix tgt = Matrix::Identity(4, 4);
  const Matrix src{{0.0, 0.0, 2.0, 0.0}};
  const RankingResult r = rank_all(src, tgt);
  EXPECT_EQ(r.candidates[0][0], 2u);
}

TEST(RankAll, ZeroRowRanksByTargetId) {
  const RankingResult r = rank_all(Matrix::Zero(1, 3), random_matrix(5, 3, 1));
  EXPECT_EQ(r.candidates[0], (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(RankAll, MatchesBruteForceSort) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix s = random_matrix(5, 8, seed);
    const Matrix t = random_matrix(7, 8, seed + 100);
    const RankingResult r = rank_all(s, t);
    for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(r.candidates[static_cast<std::size_t>(i)], brute_order(s, t, i));
  }
}

TEST(RankOf, TiesBreakByLowerIndex) {
  const Eigen::RowVectorXd sims{{0.5, 0.9, 0.5, 0.9}};
  EXPECT_EQ(rank_of(sims, 1), 1u);
  EXPECT_EQ(rank_of(sims, 3), 2u);
  EXPECT_EQ(rank_of(sims, 0), 3u);
  EXPECT_EQ(rank_of(sims, 2), 4u);
}

TEST(Greedy, ConfidenceFirstExample) {
  const MatchResult m = greedy_match_similarity(Matrix{{0.9, 0.8}, {0.85, 0.1}});
  ASSERT_EQ(m.matches.size(), 2u);
  EXPECT_EQ(m.matches[0].source, 0u);
  EXPECT_EQ(m.matches[0].target, 0u);
  EXPECT_DOUBLE_EQ(m.matches[0].similarity, 0.9);
  EXPECT_EQ(m.matches[1].source, 1u);
  EXPECT_EQ(m.matches[1].target, 1u);
  EXPECT_DOUBLE_EQ(m.matches[1].similarity, 0.1);
}

TEST(Greedy, IdentityMatrix) {
  const MatchResult m = greedy_match_similarity(Matrix::Identity(5, 5));
  ASSERT_EQ(m.matches.size(), 5u);
  for (const Match& x : m.matches) EXPECT_EQ(x.source, x.target);
}

TEST(Greedy, PigeonholeLeavesOneSource) {
  const MatchResult m = greedy_match(random_matrix(3, 4, 1), random_matrix(2, 4, 2));
  EXPECT_EQ(m.matches.size(), 2u);
  EXPECT_EQ(m.unmatched_sources.size(), 1u);
  EXPECT_TRUE(m.unmatched_targets.empty());
}

TEST(Greedy, OneToOneOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix sim = random_matrix(6, 9, seed);
    const MatchResult m = greedy_match_similarity(sim);
    std::vector<int> used_s(6, 0), used_t(9, 0);
    double prev = std::numeric_limits<double>::infinity();
    for (const Match& x : m.matches) {
      EXPECT_EQ(used_s[x.source]++, 0);
      EXPECT_EQ(used_t[x.target]++, 0);
      EXPECT_LE(x.similarity, prev);
      prev = x.similarity;
    }
    EXPECT_EQ(m.matches.size(), 6u);
    EXPECT_EQ(m.unmatched_targets.size(), 3u);
  }
}

TEST(Metrics, HitsExamples) {
  const std::vector<std::size_t> r = {1, 3, 2};
  EXPECT_DOUBLE_EQ(hits_at_n(r, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(hits_at_n(r, 3), 1.0);
}

TEST(Metrics, MrrExamples) {
  EXPECT_DOUBLE_EQ(mean_reciprocal_rank(std::vector<std::size_t>{1, 1, 1}), 1.0);
  EXPECT_NEAR(mean_reciprocal_rank(std::vector<std::size_t>{1, 2, 4}), 0.583333333333, 1e-9);
}

TEST(Metrics, ThousandRandomRanksMatchCounting) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = random_ranks(1000, seed);
    for (std::size_t n : {1, 5, 10, 50}) {
      std::size_t c = 0;
      for (auto x : r) c += x <= n;
      EXPECT_EQ(hits_at_n(r, n), static_cast<double>(c) / 1000.0);
    }
    double s = 0.0;
    for (auto x : r) s += 1.0 / static_cast<double>(x);
    EXPECT_EQ(mean_reciprocal_rank(r), s / 1000.0);
  }
}

TEST(Evaluate, PerfectEmbeddings) {
  const Matrix e = Matrix::Identity(6, 6);
  std::vector<SeedPair> pairs;
  for (EntityId i = 0; i < 6; ++i) pairs.push_back({i, i});
  const MetricsReport m = evaluate(e, e, pairs);
  EXPECT_EQ(m.mean.hits1, 1.0);
  EXPECT_EQ(m.mean.mrr, 1.0);
  EXPECT_EQ(m.n_pairs, 6u);
}

TEST(Evaluate, ZeroEmbeddingsOnlyHitLowestId) {
  std::vector<SeedPair> pairs;
  std::vector<EntityId> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(4));
  for (EntityId i = 0; i < 20; ++i) pairs.push_back({i, perm[i]});
  const MetricsReport m = evaluate(Matrix::Zero(20, 4), Matrix::Zero(20, 4), pairs);
  EXPECT_LE(m.source_to_target.hits1, 1.0 / 20.0 + 1e-12);
  EXPECT_LE(m.target_to_source.hits1, 1.0 / 20.0 + 1e-12);
}

TEST(Evaluate, MatchesIndependentRecomputation) {
  const Matrix s = random_matrix(15, 6, 1);
  Matrix t = random_matrix(15, 6, 2) * 0.8;
  t += s;
  std::vector<SeedPair> pairs;
  for (EntityId i = 3; i < 13; ++i) pairs.push_back({i, i});
  for (bool all : {false, true}) {
    const MetricsReport m = evaluate(s, t, pairs, all);
    std::vector<std::size_t> fwd, bwd;
    for (const SeedPair& p : pairs) {
      std::size_t rf = 1, rb = 1;
      const double pos = diff::cosine_similarity_matrix(s.row(p.source), t.row(p.target))(0, 0);
      for (EntityId j = 0; j < 15; ++j) {
        const bool in_pool = all || (j >= 3 && j < 13);
        if (!in_pool || j == p.target) continue;
        const double c = diff::cosine_similarity_matrix(s.row(p.source), t.row(j))(0, 0);
        rf += c > pos || (c == pos && j < p.target);
      }
      for (EntityId j = 0; j < 15; ++j) {
        const bool in_pool = all || (j >= 3 && j < 13);
        if (!in_pool || j == p.source) continue;
        const double c = diff::cosine_similarity_matrix(t.row(p.target), s.row(j))(0, 0);
        rb += c > pos || (c == pos && j < p.source);
      }
      fwd.push_back(rf);
      bwd.push_back(rb);
    }
    EXPECT_DOUBLE_EQ(m.source_to_target.hits1, hits_at_n(fwd, 1));
    EXPECT_DOUBLE_EQ(m.source_to_target.mrr, mean_reciprocal_rank(fwd));
    EXPECT_DOUBLE_EQ(m.target_to_source.hits10, hits_at_n(bwd, 10));
    EXPECT_DOUBLE_EQ(m.mean.mrr, 0.5 * (mean_reciprocal_rank(fwd) + mean_reciprocal_rank(bwd)));
  }
}

TEST(Evaluate, ExplicitPoolsMustContainTruth) {
  const Matrix e = random_matrix(4, 3, 1);
  const std::vector<SeedPair> pairs = {{0, 0}};
  const std::vector<std::size_t> src = {0, 1};
  const std::vector<std::size_t> tgt = {1, 2};
  EXPECT_ANY_THROW(evaluate_with_pools(e, e, pairs, src, tgt));
}
