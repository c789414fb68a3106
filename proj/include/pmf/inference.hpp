#pragma once

// Alignment prediction (ranking, greedy one-to-one matching) and ranking
// metrics over joint embeddings.

#include <cstddef>
#include <span>
#include <vector>

#include "pmf/diff.hpp"
#include "pmf/mmkg.hpp"

namespace pmf {

struct RankingResult {
  // candidates[i]: target row indices by descending similarity, ties by
  // ascending index.
  std::vector<std::vector<std::size_t>> candidates;
  // 1-based rank of the ground truth per query, when known.
  std::vector<std::size_t> ranks;
};

// Ranks every target row for every source row by cosine similarity.
RankingResult rank_all(const Matrix& source_rows, const Matrix& target_rows);

// 1-based rank of `truth` in row `sims` under the rank_all ordering.
std::size_t rank_of(const Eigen::Ref<const Eigen::RowVectorXd>& sims, std::size_t truth);

struct Match {
  std::size_t source = 0;
  std::size_t target = 0;
  double similarity = 0.0;
};

struct MatchResult {
  std::vector<Match> matches;
  std::vector<std::size_t> unmatched_sources;
  std::vector<std::size_t> unmatched_targets;
};

// Confidence-first greedy: repeatedly commits the most similar pair among
// still-unmatched sources and targets (ties: lower source, then lower target).
MatchResult greedy_match_similarity(const Matrix& similarity);
MatchResult greedy_match(const Matrix& source_rows, const Matrix& target_rows);

double hits_at_n(std::span<const std::size_t> ranks, std::size_t n);
double mean_reciprocal_rank(std::span<const std::size_t> ranks);

struct DirectionMetrics {
  double hits1 = 0.0;
  double hits10 = 0.0;
  double mrr = 0.0;
};

struct MetricsReport {
  DirectionMetrics source_to_target;
  DirectionMetrics target_to_source;
  DirectionMetrics mean;
  std::size_t n_pairs = 0;
};

DirectionMetrics metrics_from_ranks(std::span<const std::size_t> ranks);

// Each direction ranks the other side's entities of `pairs` (or every
// entity of that side when `candidate_pool_all` is set).
MetricsReport evaluate(const Matrix& source_joint, const Matrix& target_joint, std::span<const SeedPair> pairs,
                       bool candidate_pool_all = false);

// As evaluate(), with explicit candidate pools (entity ids per side). Each
// pair's own entities must be inside the opposite pool.
MetricsReport evaluate_with_pools(const Matrix& source_joint, const Matrix& target_joint,
                                  std::span<const SeedPair> pairs, std::span<const std::size_t> source_pool,
                                  std::span<const std::size_t> target_pool);

}  // namespace pmf
