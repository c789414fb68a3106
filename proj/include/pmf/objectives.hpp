#pragma once

// Contrastive objectives: cross-modality association within a KG and
// bidirectional cross-KG alignment over seed pairs.

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pmf/diff.hpp"
#include "pmf/encoders.hpp"
#include "pmf/mmkg.hpp"

namespace pmf {

enum class NegativeMode : std::uint8_t { Full, InBatch };

struct LossConfig {
  double temperature = 0.05;
  std::map<Modality, double> beta = {{Modality::Structure, 0.1},
                                     {Modality::Relation, 0.1},
                                     {Modality::Attribute, 0.1},
                                     {Modality::Image, 10.0}};
  // Unordered modality pairs for the cross-modality loss. Empty means every
  // pair of the embedded modalities, in kAllModalities order.
  std::vector<std::pair<Modality, Modality>> modality_pairs;
  NegativeMode negatives = NegativeMode::Full;
  // Entity chunk size for the cross-modality loss in InBatch mode.
  std::size_t cm_batch_size = 2000;
  // Use -1/2 log(l(i->j) + l(j->i)) instead of the two-log form.
  bool ckg_literal_sum = false;

  void validate() const;
};

// Sum over modality pairs (p, q) and pool entities i of
// -beta_p * beta_q * log l_i, where the negatives of i are every (i, j) and
// (j, i) cross pair with j != i inside the pool. Rows are L2-normalised
// first. An empty `pool` means every entity.
Var cross_modality_loss(Tape& tape, const ModalityEmbeddings& embeddings, const LossConfig& config,
                        std::span<const std::size_t> pool = {});

// Source/target embeddings of one channel of M+ (a modality or the joint).
struct ChannelEmbeddings {
  std::string name;
  Var source;
  Var target;
};

// Per channel and seed pair k in the batch: -1/2 (log l(k->k) + log l(k<-k))
// with in-batch negatives from the opposite side.
Var cross_kg_loss(Tape& tape, std::span<const ChannelEmbeddings> channels, std::span<const SeedPair> batch,
                  const LossConfig& config);

// l_cm + l_ckg; throws NumericError when either is not finite.
Var total_loss(Tape& tape, Var l_cm, Var l_ckg);
double total_loss(double l_cm, double l_ckg);

}  // namespace pmf
