#pragma once

// Optimisation loop: encode -> integrate -> loss -> backward -> AdamW step,
// with warm-up/cosine learning rate, gradient accumulation, early stopping on
// validation Hits@1 and mutual-nearest-neighbour probation for iterative
// seed augmentation.

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "pmf/encoders.hpp"
#include "pmf/inference.hpp"
#include "pmf/integration.hpp"
#include "pmf/objectives.hpp"

namespace pmf {

struct TrainConfig {
  std::size_t epochs = 250;
  // Extra epochs with probation-based seed augmentation; 0 disables.
  std::size_t iterative_epochs = 500;
  std::size_t batch_size = 3500;
  double base_lr = 5e-3;
  double warmup_fraction = 0.15;
  std::size_t accumulation_steps = 1;
  std::size_t early_stop_patience = 10;
  std::size_t eval_interval = 5;
  std::size_t probation_interval = 5;
  std::size_t probation_stability = 10;
  double weight_decay = 0.01;
  // Above this entity count the cross-modality loss runs over entity batches.
  std::size_t cm_full_batch_limit = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

// Linear warm-up over warmup_fraction * total_steps, then cosine decay to 0.
double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam. Moments are keyed by tensor position, so the
// same tensor list must be passed on every step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Throws NumericError on a non-finite gradient (parameters untouched).
  void step(std::span<DiffTensor* const> params, double rate);

  [[nodiscard]] std::size_t steps() const { return steps_; }
  [[nodiscard]] const std::vector<Matrix>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t steps_ = 0;
};

// Streak counts of candidate pairs across probation rounds.
struct ProbationLedger {
  std::map<std::pair<EntityId, EntityId>, std::size_t> streaks;
};

// Mutual nearest neighbours (cosine over joint embeddings) among entities
// not already in `train`. Streaks grow for pairs found again and reset
// otherwise; pairs reaching `stability` rounds are returned for promotion
// and leave the ledger.
std::vector<SeedPair> probation_update(const Matrix& source_joint, const Matrix& target_joint,
                                       std::span<const SeedPair> train, ProbationLedger& ledger,
                                       std::size_t stability);

struct Ablations {
  // Masks forced to ones; fusion still weighted.
  bool disable_freezing = false;
  // Fusion uses w = 1; masks still applied.
  bool disable_fusion_weighting = false;
  // Scores ignored entirely: masks ones and w = 1.
  bool disable_relevance = false;
  // Scores computed once at this epoch and reused afterwards.
  std::optional<std::size_t> static_epoch;
  bool disable_cm_loss = false;
  // Modalities whose masks are forced to all zeros.
  std::set<Modality> force_frozen;

  [[nodiscard]] IntegrationOptions integration_options() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double total_loss = 0.0;
  double cm_loss = 0.0;
  double ckg_loss = 0.0;
  double delta = 0.0;
  double lr = 0.0;
  std::vector<FreezeStat> freeze;
  std::optional<DirectionMetrics> valid;
  std::size_t train_seeds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_lrs;
};

struct TrainResult {
  EncoderParams best_params;
  std::map<Modality, RelevanceScores> best_scores;
  std::size_t best_epoch = 0;
  TrainHistory history;
  // Scores and effective masks of the last epoch run.
  std::map<Modality, RelevanceScores> final_scores;
  std::array<std::map<Modality, RowMask>, 2> final_masks;
  std::vector<SeedPair> augmented_seeds;
  bool early_stopped = false;
};

struct TrainData {
  const std::array<ModalityInputs, 2>* inputs = nullptr;
  std::vector<SeedPair> train;
  std::vector<SeedPair> valid;
  // Candidate pools for validation ranking; empty means the valid entities.
  std::array<std::vector<std::size_t>, 2> valid_pool;
};

using EpochHook = std::function<void(std::size_t epoch, const IntegrationResult&)>;

TrainResult train_pmf(const TrainData& data, EncoderParams params, const LossConfig& loss,
                      const TrainConfig& config, const ThresholdSchedule& schedule, const Ablations& ablations = {},
                      const EpochHook& hook = {});

// Joint embeddings for the given parameters and scores (off-tape).
std::array<Matrix, 2> joint_for(const std::array<ModalityInputs, 2>& inputs, EncoderParams& params,
                                const std::map<Modality, RelevanceScores>& scores, const Ablations& ablations);

}  // namespace pmf
