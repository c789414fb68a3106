#include "pmf/inference.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>

#include "pmf/errors.hpp"

namespace pmf {

RankingResult rank_all(const Matrix& source_rows, const Matrix& target_rows) {
  if (target_rows.rows() == 0) throw DataError("rank_all: empty candidate set");
  const Matrix sim = diff::cosine_similarity_matrix(source_rows, target_rows);
  RankingResult out;
  out.candidates.resize(static_cast<std::size_t>(sim.rows()));
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    auto& c = out.candidates[static_cast<std::size_t>(i)];
    c.resize(static_cast<std::size_t>(sim.cols()));
    std::iota(c.begin(), c.end(), std::size_t{0});
    std::stable_sort(c.begin(), c.end(), [&](std::size_t a, std::size_t b) {
      return sim(i, static_cast<Eigen::Index>(a)) > sim(i, static_cast<Eigen::Index>(b));
    });
  }
  return out;
}

std::size_t rank_of(const Eigen::Ref<const Eigen::RowVectorXd>& sims, std::size_t truth) {
  const double s = sims(static_cast<Eigen::Index>(truth));
  std::size_t rank = 1;
  for (Eigen::Index k = 0; k < sims.size(); ++k) {
    if (sims(k) > s || (sims(k) == s && static_cast<std::size_t>(k) < truth)) ++rank;
  }
  return rank;
}

MatchResult greedy_match_similarity(const Matrix& similarity) {
  struct Cand {
    double s;
    std::size_t i;
    std::size_t j;
  };
  std::vector<Cand> all;
  all.reserve(static_cast<std::size_t>(similarity.size()));
  for (Eigen::Index i = 0; i < similarity.rows(); ++i) {
    for (Eigen::Index j = 0; j < similarity.cols(); ++j) {
      all.push_back({similarity(i, j), static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
    }
  }
  std::sort(all.begin(), all.end(), [](const Cand& a, const Cand& b) {
    if (a.s != b.s) return a.s > b.s;
    return std::tie(a.i, a.j) < std::tie(b.i, b.j);
  });
  std::vector<std::uint8_t> src_done(static_cast<std::size_t>(similarity.rows()), 0);
  std::vector<std::uint8_t> tgt_done(static_cast<std::size_t>(similarity.cols()), 0);
  MatchResult out;
  for (const Cand& c : all) {
    if (src_done[c.i] || tgt_done[c.j]) continue;
    src_done[c.i] = tgt_done[c.j] = 1;
    out.matches.push_back({c.i, c.j, c.s});
  }
  for (std::size_t i = 0; i < src_done.size(); ++i) {
    if (!src_done[i]) out.unmatched_sources.push_back(i);
  }
  for (std::size_t j = 0; j < tgt_done.size(); ++j) {
    if (!tgt_done[j]) out.unmatched_targets.push_back(j);
  }
  return out;
}

MatchResult greedy_match(const Matrix& source_rows, const Matrix& target_rows) {
  return greedy_match_similarity(diff::cosine_similarity_matrix(source_rows, target_rows));
}

double hits_at_n(std::span<const std::size_t> ranks, std::size_t n) {
  if (ranks.empty()) throw DataError("hits_at_n: no ranks");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [n](std::size_t r) { return r <= n; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double mean_reciprocal_rank(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw DataError("mean_reciprocal_rank: no ranks");
  double total = 0.0;
  for (std::size_t r : ranks) {
    if (r == 0) throw DataError("mean_reciprocal_rank: ranks are 1-based");
    total += 1.0 / static_cast<double>(r);
  }
  return total / static_cast<double>(ranks.size());
}

DirectionMetrics metrics_from_ranks(std::span<const std::size_t> ranks) {
  return {hits_at_n(ranks, 1), hits_at_n(ranks, 10), mean_reciprocal_rank(ranks)};
}

namespace {

Matrix gather(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (static_cast<Eigen::Index>(rows[k]) >= m.rows()) throw DataError("evaluate: entity id out of range");
    out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(rows[k]));
  }
  return out;
}

std::vector<std::size_t> direction_ranks(const Matrix& queries, const Matrix& candidates,
                                         const std::vector<std::size_t>& truth_pos) {
  const Matrix sim = diff::cosine_similarity_matrix(queries, candidates);
  std::vector<std::size_t> ranks(truth_pos.size());
  for (std::size_t k = 0; k < truth_pos.size(); ++k) ranks[k] = rank_of(sim.row(static_cast<Eigen::Index>(k)), truth_pos[k]);
  return ranks;
}

}  // namespace

MetricsReport evaluate_with_pools(const Matrix& source_joint, const Matrix& target_joint,
                                  std::span<const SeedPair> pairs, std::span<const std::size_t> source_pool,
                                  std::span<const std::size_t> target_pool) {
  if (pairs.empty()) throw DataError("evaluate: no seed pairs");
  auto position = [](std::span<const std::size_t> pool, std::size_t id) {
    auto it = std::find(pool.begin(), pool.end(), id);
    if (it == pool.end()) throw DataError("evaluate: ground truth entity missing from the candidate pool");
    return static_cast<std::size_t>(it - pool.begin());
  };
  std::vector<std::size_t> src_ids, tgt_ids, src_truth, tgt_truth;
  for (const SeedPair& p : pairs) {
    src_ids.push_back(p.source);
    tgt_ids.push_back(p.target);
    src_truth.push_back(position(target_pool, p.target));
    tgt_truth.push_back(position(source_pool, p.source));
  }
  const Matrix src_q = gather(source_joint, src_ids);
  const Matrix tgt_q = gather(target_joint, tgt_ids);
  const auto l2r = direction_ranks(src_q, gather(target_joint, target_pool), src_truth);
  const auto r2l = direction_ranks(tgt_q, gather(source_joint, source_pool), tgt_truth);
  MetricsReport report;
  report.n_pairs = pairs.size();
  report.source_to_target = metrics_from_ranks(l2r);
  report.target_to_source = metrics_from_ranks(r2l);
  report.mean = {(report.source_to_target.hits1 + report.target_to_source.hits1) / 2.0,
                 (report.source_to_target.hits10 + report.target_to_source.hits10) / 2.0,
                 (report.source_to_target.mrr + report.target_to_source.mrr) / 2.0};
  return report;
}

MetricsReport evaluate(const Matrix& source_joint, const Matrix& target_joint, std::span<const SeedPair> pairs,
                       bool candidate_pool_all) {
  std::vector<std::size_t> src_pool, tgt_pool;
  if (candidate_pool_all) {
    src_pool.resize(static_cast<std::size_t>(source_joint.rows()));
    tgt_pool.resize(static_cast<std::size_t>(target_joint.rows()));
    std::iota(src_pool.begin(), src_pool.end(), std::size_t{0});
    std::iota(tgt_pool.begin(), tgt_pool.end(), std::size_t{0});
  } else {
    for (const SeedPair& p : pairs) {
      src_pool.push_back(p.source);
      tgt_pool.push_back(p.target);
    }
    std::sort(src_pool.begin(), src_pool.end());
    std::sort(tgt_pool.begin(), tgt_pool.end());
  }
  return evaluate_with_pools(source_joint, target_joint, pairs, src_pool, tgt_pool);
}

}  // namespace pmf
