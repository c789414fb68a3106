#pragma once

// Progressive modality integration: per-modality alignment-relevance scores,
// freeze masks, stop-gradient freezing and relevance-weighted fusion.

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "pmf/diff.hpp"
#include "pmf/encoders.hpp"
#include "pmf/mmkg.hpp"

namespace pmf {

using diff::RowMask;

// delta_t = min(initial * factor^t, cap).
struct ThresholdSchedule {
  double initial = 0.1;
  double factor = 1.2;
  double cap = 0.9;

  void validate() const;
};

double schedule_delta(const ThresholdSchedule& schedule, std::size_t epoch);

// alpha_i: best cosine similarity of row i of `h` against any row of `other`.
Vector best_cross_similarity(const Matrix& h, const Matrix& other);

// w_i = ReLU((alpha_i - delta) / (max_j alpha_j - delta)); all zero when
// max_j alpha_j <= delta.
Vector scores_from_alpha(const Vector& alpha, double delta);

struct RelevanceScores {
  Vector source;
  Vector target;
};

// Scores for both sides of one modality. Pure; runs off-tape.
RelevanceScores relevance_scores(const Matrix& h_source, const Matrix& h_target, double delta);

// F_i = 0 iff w_i == 0.
RowMask freeze_mask(const Vector& scores);

// Stop-gradient on rows whose mask is 0.
Var apply_freezing(Tape& tape, Var embeddings, const RowMask& mask);

struct ModalityState {
  Modality modality = Modality::Structure;
  Var embeddings;
  Vector scores;
  RowMask freeze;
  std::size_t epoch = 0;
};

// Row i = concat over the states (in kAllModalities order) of w_i^m * h_i^m.
// Scores are constants.
Var fuse_modalities(Tape& tape, std::span<const ModalityState> states);

struct IntegrationOptions {
  // Off: masks forced to all ones.
  bool freezing = true;
  // Off: fusion uses w = 1.
  bool weighted_fusion = true;
  // Modalities whose masks are forced to all zeros.
  std::set<Modality> force_frozen;
};

struct FreezeStat {
  Modality modality = Modality::Structure;
  Side side = Side::Source;
  double frozen_ratio = 0.0;
  double mean_score = 0.0;
};

struct IntegrationResult {
  double delta = 0.0;
  // Per side; embeddings are post-freezing and row-normalised.
  std::array<std::vector<ModalityState>, 2> states;
  std::array<Var, 2> joint;
  // Raw scores per modality (before any ablation override).
  std::map<Modality, RelevanceScores> scores;
  std::vector<FreezeStat> stats;
};

// One epoch of integration. When `fixed_scores` is given it replaces the
// recomputation (static integration); `delta` is then only reported.
IntegrationResult integrate_epoch(Tape& tape, const std::array<ModalityEmbeddings, 2>& encoded,
                                  const ThresholdSchedule& schedule, std::size_t epoch,
                                  const IntegrationOptions& options,
                                  const std::map<Modality, RelevanceScores>* fixed_scores = nullptr,
                                  std::optional<double> fixed_delta = std::nullopt);

// Off-tape joint embeddings (row-normalised) for prediction and evaluation,
// computed with the same fusion path as training.
std::array<Matrix, 2> joint_embeddings(const std::array<std::map<Modality, Matrix>, 2>& encoded,
                                       const std::map<Modality, RelevanceScores>& scores,
                                       const IntegrationOptions& options);

// Relevance scores for every modality of an off-tape encoding.
std::map<Modality, RelevanceScores> score_all(const std::array<std::map<Modality, Matrix>, 2>& encoded,
                                              double delta);

}  // namespace pmf
