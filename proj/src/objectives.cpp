#include "pmf/objectives.hpp"

#include <cmath>
#include <limits>

#include "pmf/errors.hpp"

namespace pmf {

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  for (const auto& [m, b] : beta) {
    if (!(b > 0.0)) throw ConfigError("beta for " + std::string(modality_name(m)) + " must be positive");
  }
  for (const auto& [p, q] : modality_pairs) {
    if (p == q) throw ConfigError("cross-modality pairs must join distinct modalities");
  }
  if (negatives == NegativeMode::InBatch && cm_batch_size == 0) throw ConfigError("cm_batch_size must be positive");
}

namespace {

Matrix neg_inf_diagonal(Eigen::Index n) {
  Matrix m = Matrix::Zero(n, n);
  m.diagonal().setConstant(-std::numeric_limits<double>::infinity());
  return m;
}

double beta_of(const LossConfig& config, Modality m) {
  auto it = config.beta.find(m);
  if (it == config.beta.end()) throw ConfigError("no beta weight for modality " + std::string(modality_name(m)));
  return it->second;
}

}  // namespace

Var cross_modality_loss(Tape& tape, const ModalityEmbeddings& embeddings, const LossConfig& config,
                        std::span<const std::size_t> pool) {
  std::vector<std::pair<Modality, Modality>> pairs = config.modality_pairs;
  if (pairs.empty()) {
    for (auto a = embeddings.begin(); a != embeddings.end(); ++a) {
      for (auto b = std::next(a); b != embeddings.end(); ++b) pairs.emplace_back(a->first, b->first);
    }
  }
  Matrix zero = Matrix::Zero(1, 1);
  Var total = tape.constant(zero);
  for (const auto& [p, q] : pairs) {
    auto hp = embeddings.find(p);
    auto hq = embeddings.find(q);
    if (hp == embeddings.end() || hq == embeddings.end()) {
      throw ConfigError("cross-modality loss: modality " + std::string(modality_name(hp == embeddings.end() ? p : q)) +
                        " has no embeddings");
    }
    Var a = hp->second;
    Var b = hq->second;
    if (!pool.empty()) {
      a = diff::gather_rows(tape, a, pool);
      b = diff::gather_rows(tape, b, pool);
    }
    a = diff::l2_normalize_rows(tape, a);
    b = diff::l2_normalize_rows(tape, b);
    const Var sim = diff::scale(tape, diff::matmul_transposed(tape, a, b), 1.0 / config.temperature);
    const Eigen::Index n = tape.value(sim).rows();
    // Row i of [S | S^T] minus the duplicated positive holds the positive and
    // both negative families of entity i.
    const Var cols = diff::add_constant(tape, diff::transpose(tape, sim), neg_inf_diagonal(n));
    const Var both[] = {sim, cols};
    const Var lse = diff::logsumexp_rows(tape, diff::hconcat(tape, both));
    const Var nll = diff::sub(tape, lse, diff::diagonal(tape, sim));
    const Var term = diff::scale(tape, diff::sum(tape, nll), beta_of(config, p) * beta_of(config, q));
    total = diff::add(tape, total, term);
  }
  return total;
}

Var cross_kg_loss(Tape& tape, std::span<const ChannelEmbeddings> channels, std::span<const SeedPair> batch,
                  const LossConfig& config) {
  std::vector<std::size_t> src_rows;
  std::vector<std::size_t> tgt_rows;
  for (const SeedPair& p : batch) {
    src_rows.push_back(p.source);
    tgt_rows.push_back(p.target);
  }
  Var total = tape.constant(Matrix::Zero(1, 1));
  if (batch.empty()) return total;
  for (const ChannelEmbeddings& ch : channels) {
    const Var x = diff::l2_normalize_rows(tape, diff::gather_rows(tape, ch.source, src_rows));
    const Var y = diff::l2_normalize_rows(tape, diff::gather_rows(tape, ch.target, tgt_rows));
    const Var sim = diff::scale(tape, diff::matmul_transposed(tape, x, y), 1.0 / config.temperature);
    const Var pos = diff::diagonal(tape, sim);
    const Var forward = diff::sub(tape, diff::logsumexp_rows(tape, sim), pos);
    const Var backward = diff::sub(tape, diff::logsumexp_rows(tape, diff::transpose(tape, sim)), pos);
    Var term;
    if (config.ckg_literal_sum) {
      const Var parts[] = {diff::scale(tape, forward, -1.0), diff::scale(tape, backward, -1.0)};
      term = diff::scale(tape, diff::sum(tape, diff::logsumexp_rows(tape, diff::hconcat(tape, parts))), -0.5);
    } else {
      term = diff::scale(tape, diff::sum(tape, diff::add(tape, forward, backward)), 0.5);
    }
    total = diff::add(tape, total, term);
  }
  return total;
}

Var total_loss(Tape& tape, Var l_cm, Var l_ckg) {
  total_loss(tape.value(l_cm)(0, 0), tape.value(l_ckg)(0, 0));
  return diff::add(tape, l_cm, l_ckg);
}

double total_loss(double l_cm, double l_ckg) {
  if (!std::isfinite(l_cm) || !std::isfinite(l_ckg)) {
    throw NumericError("non-finite loss (cross-modality " + std::to_string(l_cm) + ", cross-KG " +
                       std::to_string(l_ckg) + ")");
  }
  return l_cm + l_ckg;
}

}  // namespace pmf
