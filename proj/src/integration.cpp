#include "pmf/integration.hpp"

#include <algorithm>
#include <cmath>

#include "pmf/errors.hpp"

namespace pmf {

void ThresholdSchedule::validate() const {
  if (!(initial >= 0.0 && initial <= cap && cap <= 1.0)) {
    throw ConfigError("threshold schedule requires 0 <= initial <= cap <= 1");
  }
  if (!(factor >= 1.0)) throw ConfigError("threshold schedule factor must be >= 1");
}

double schedule_delta(const ThresholdSchedule& schedule, std::size_t epoch) {
  return std::min(schedule.initial * std::pow(schedule.factor, static_cast<double>(epoch)), schedule.cap);
}

Vector best_cross_similarity(const Matrix& h, const Matrix& other) {
  if (h.cols() != other.cols()) {
    throw DimensionError("relevance_scores: embedding widths differ (" + std::to_string(h.cols()) + " vs " +
                         std::to_string(other.cols()) + ")");
  }
  Vector alpha = Vector::Zero(h.rows());
  if (other.rows() == 0) return alpha;
  const Matrix sim = diff::cosine_similarity_matrix(h, other);
  for (Eigen::Index i = 0; i < sim.rows(); ++i) alpha(i) = sim.row(i).maxCoeff();
  return alpha;
}

Vector scores_from_alpha(const Vector& alpha, double delta) {
  Vector w = Vector::Zero(alpha.size());
  if (alpha.size() == 0) return w;
  const double top = alpha.maxCoeff();
  const double denom = top - delta;
  if (!(denom > 0.0)) return w;
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    w(i) = alpha(i) == top ? 1.0 : std::max(0.0, (alpha(i) - delta) / denom);
  }
  return w;
}

RelevanceScores relevance_scores(const Matrix& h_source, const Matrix& h_target, double delta) {
  return {scores_from_alpha(best_cross_similarity(h_source, h_target), delta),
          scores_from_alpha(best_cross_similarity(h_target, h_source), delta)};
}

RowMask freeze_mask(const Vector& scores) {
  RowMask mask(static_cast<std::size_t>(scores.size()));
  for (Eigen::Index i = 0; i < scores.size(); ++i) mask[static_cast<std::size_t>(i)] = scores(i) == 0.0 ? 0 : 1;
  return mask;
}

Var apply_freezing(Tape& tape, Var embeddings, const RowMask& mask) {
  return diff::stop_gradient_rows(tape, embeddings, mask);
}

Var fuse_modalities(Tape& tape, std::span<const ModalityState> states) {
  if (states.empty()) throw DimensionError("fuse_modalities: no modalities");
  std::vector<const ModalityState*> ordered;
  for (const auto& s : states) ordered.push_back(&s);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const ModalityState* a, const ModalityState* b) { return a->modality < b->modality; });
  const Eigen::Index n = tape.value(ordered.front()->embeddings).rows();
  const Eigen::Index d = tape.value(ordered.front()->embeddings).cols();
  std::vector<Var> blocks;
  for (const ModalityState* s : ordered) {
    const Matrix& h = tape.value(s->embeddings);
    if (h.rows() != n || h.cols() != d || s->scores.size() != n) {
      throw DimensionError("fuse_modalities: inconsistent entity count or width for modality " +
                           std::string(modality_name(s->modality)));
    }
    blocks.push_back(diff::scale_rows(tape, s->embeddings, s->scores));
  }
  return diff::hconcat(tape, blocks);
}

namespace {

double frozen_ratio(const RowMask& mask) {
  if (mask.empty()) return 0.0;
  const auto frozen = std::count(mask.begin(), mask.end(), std::uint8_t{0});
  return static_cast<double>(frozen) / static_cast<double>(mask.size());
}

}  // namespace

IntegrationResult integrate_epoch(Tape& tape, const std::array<ModalityEmbeddings, 2>& encoded,
                                  const ThresholdSchedule& schedule, std::size_t epoch,
                                  const IntegrationOptions& options,
                                  const std::map<Modality, RelevanceScores>* fixed_scores,
                                  std::optional<double> fixed_delta) {
  IntegrationResult out;
  out.delta = fixed_delta ? *fixed_delta : schedule_delta(schedule, epoch);
  for (const auto& [m, h_src] : encoded[0]) {
    auto it = encoded[1].find(m);
    if (it == encoded[1].end()) throw ConfigError("integrate_epoch: modality missing on the target side");
    if (fixed_scores != nullptr) {
      auto fixed = fixed_scores->find(m);
      if (fixed == fixed_scores->end()) throw ConfigError("integrate_epoch: fixed scores lack a modality");
      out.scores[m] = fixed->second;
    } else {
      out.scores[m] = relevance_scores(tape.value(h_src), tape.value(it->second), out.delta);
    }
  }
  for (std::size_t side = 0; side < 2; ++side) {
    for (const auto& [m, h] : encoded[side]) {
      const RelevanceScores& rs = out.scores.at(m);
      ModalityState st;
      st.modality = m;
      st.epoch = epoch;
      st.scores = side == 0 ? rs.source : rs.target;
      if (options.force_frozen.contains(m)) {
        st.freeze = RowMask(static_cast<std::size_t>(st.scores.size()), 0);
      } else {
        st.freeze = options.freezing ? freeze_mask(st.scores) : RowMask(static_cast<std::size_t>(st.scores.size()), 1);
      }
      const Var frozen = apply_freezing(tape, h, st.freeze);
      st.embeddings = diff::l2_normalize_rows(tape, frozen);
      out.stats.push_back({m, static_cast<Side>(side), frozen_ratio(st.freeze), st.scores.size() ? st.scores.mean() : 0.0});
      out.states[side].push_back(std::move(st));
    }
    std::vector<ModalityState> fusion = out.states[side];
    if (!options.weighted_fusion) {
      for (auto& st : fusion) st.scores = Vector::Ones(st.scores.size());
    }
    out.joint[side] = fuse_modalities(tape, fusion);
  }
  return out;
}

std::map<Modality, RelevanceScores> score_all(const std::array<std::map<Modality, Matrix>, 2>& encoded,
                                              double delta) {
  std::map<Modality, RelevanceScores> out;
  for (const auto& [m, h] : encoded[0]) out[m] = relevance_scores(h, encoded[1].at(m), delta);
  return out;
}

std::array<Matrix, 2> joint_embeddings(const std::array<std::map<Modality, Matrix>, 2>& encoded,
                                       const std::map<Modality, RelevanceScores>& scores,
                                       const IntegrationOptions& options) {
  Tape tape(false);
  std::array<ModalityEmbeddings, 2> vars;
  for (std::size_t side = 0; side < 2; ++side) {
    for (const auto& [m, h] : encoded[side]) vars[side][m] = tape.constant(h);
  }
  const IntegrationResult r = integrate_epoch(tape, vars, ThresholdSchedule{}, 0, options, &scores, 0.0);
  return {diff::normalized_rows(tape.value(r.joint[0])), diff::normalized_rows(tape.value(r.joint[1]))};
}

}  // namespace pmf
