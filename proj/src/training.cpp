#include "pmf/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "pmf/errors.hpp"

namespace pmf {

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || accumulation_steps < 1 || early_stop_patience < 1 || eval_interval < 1 ||
      probation_interval < 1 || probation_stability < 1 || cm_full_batch_limit < 1) {
    throw ConfigError("training counts must be at least 1 (iterative_epochs may be 0)");
  }
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0,1]");
  if (!(base_lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("base_lr and weight_decay must be >= 0");
}

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  const double s = static_cast<double>(std::min(step, total_steps));
  const double total = static_cast<double>(total_steps);
  const double warm = config.warmup_fraction * total;
  if (s < warm) return config.base_lr * s / warm;
  if (total <= warm) return config.base_lr;
  const double progress = (s - warm) / (total - warm);
  return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(std::span<DiffTensor* const> params, double rate) {
  for (DiffTensor* p : params) {
    if (!p->grad.allFinite()) throw NumericError("non-finite gradient in optimizer step");
  }
  if (m_.empty()) {
    for (DiffTensor* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw DimensionError("AdamW: parameter list changed between steps");
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    DiffTensor& p = *params[k];
    if (m_[k].rows() != p.rows() || m_[k].cols() != p.cols()) throw DimensionError("AdamW: moment shape mismatch");
    m_[k] = config_.beta1 * m_[k] + (1.0 - config_.beta1) * p.grad;
    v_[k] = config_.beta2 * v_[k] + (1.0 - config_.beta2) * p.grad.cwiseProduct(p.grad);
    const auto m_hat = m_[k].array() / bc1;
    const auto v_hat = v_[k].array() / bc2;
    const Matrix update = (m_hat / (v_hat.sqrt() + config_.eps)).matrix();
    p.values = p.values - rate * update - (rate * config_.weight_decay) * p.values;
  }
}

std::vector<SeedPair> probation_update(const Matrix& source_joint, const Matrix& target_joint,
                                       std::span<const SeedPair> train, ProbationLedger& ledger,
                                       std::size_t stability) {
  std::vector<std::uint8_t> src_used(static_cast<std::size_t>(source_joint.rows()), 0);
  std::vector<std::uint8_t> tgt_used(static_cast<std::size_t>(target_joint.rows()), 0);
  for (const SeedPair& p : train) {
    src_used.at(p.source) = 1;
    tgt_used.at(p.target) = 1;
  }
  std::vector<std::size_t> src_ids, tgt_ids;
  for (std::size_t i = 0; i < src_used.size(); ++i) {
    if (!src_used[i]) src_ids.push_back(i);
  }
  for (std::size_t j = 0; j < tgt_used.size(); ++j) {
    if (!tgt_used[j]) tgt_ids.push_back(j);
  }

  std::map<std::pair<EntityId, EntityId>, std::size_t> next;
  if (!src_ids.empty() && !tgt_ids.empty()) {
    Matrix s(static_cast<Eigen::Index>(src_ids.size()), source_joint.cols());
    Matrix t(static_cast<Eigen::Index>(tgt_ids.size()), target_joint.cols());
    for (std::size_t k = 0; k < src_ids.size(); ++k) s.row(static_cast<Eigen::Index>(k)) = source_joint.row(static_cast<Eigen::Index>(src_ids[k]));
    for (std::size_t k = 0; k < tgt_ids.size(); ++k) t.row(static_cast<Eigen::Index>(k)) = target_joint.row(static_cast<Eigen::Index>(tgt_ids[k]));
    const Matrix sim = diff::cosine_similarity_matrix(s, t);
    std::vector<Eigen::Index> best_t(static_cast<std::size_t>(sim.rows()));
    std::vector<Eigen::Index> best_s(static_cast<std::size_t>(sim.cols()));
    for (Eigen::Index i = 0; i < sim.rows(); ++i) sim.row(i).maxCoeff(&best_t[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < sim.cols(); ++j) sim.col(j).maxCoeff(&best_s[static_cast<std::size_t>(j)]);
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
      const Eigen::Index j = best_t[static_cast<std::size_t>(i)];
      if (best_s[static_cast<std::size_t>(j)] != i) continue;
      const std::pair<EntityId, EntityId> key{static_cast<EntityId>(src_ids[static_cast<std::size_t>(i)]),
                                              static_cast<EntityId>(tgt_ids[static_cast<std::size_t>(j)])};
      auto it = ledger.streaks.find(key);
      next[key] = (it == ledger.streaks.end() ? 0 : it->second) + 1;
    }
  }
  std::vector<SeedPair> promoted;
  for (auto it = next.begin(); it != next.end();) {
    if (it->second >= stability) {
      promoted.push_back({it->first.first, it->first.second});
      it = next.erase(it);
    } else {
      ++it;
    }
  }
  ledger.streaks = std::move(next);
  return promoted;
}

IntegrationOptions Ablations::integration_options() const {
  IntegrationOptions o;
  o.freezing = !(disable_freezing || disable_relevance);
  o.weighted_fusion = !(disable_fusion_weighting || disable_relevance);
  o.force_frozen = force_frozen;
  return o;
}

std::array<Matrix, 2> joint_for(const std::array<ModalityInputs, 2>& inputs, EncoderParams& params,
                                const std::map<Modality, RelevanceScores>& scores, const Ablations& ablations) {
  const std::array<std::map<Modality, Matrix>, 2> values = {encode_values(inputs[0], params, Side::Source),
                                                            encode_values(inputs[1], params, Side::Target)};
  return joint_embeddings(values, scores, ablations.integration_options());
}

namespace {

std::vector<DiffTensor*> tensor_list(EncoderParams& params) {
  std::vector<DiffTensor*> out;
  for (auto& [name, t] : params.named_tensors()) out.push_back(t);
  return out;
}

MetricsReport validation_metrics(const std::array<Matrix, 2>& joint, const TrainData& data) {
  if (data.valid_pool[0].empty() || data.valid_pool[1].empty()) return evaluate(joint[0], joint[1], data.valid);
  return evaluate_with_pools(joint[0], joint[1], data.valid, data.valid_pool[0], data.valid_pool[1]);
}

}  // namespace

TrainResult train_pmf(const TrainData& data, EncoderParams params, const LossConfig& loss,
                      const TrainConfig& config, const ThresholdSchedule& schedule, const Ablations& ablations,
                      const EpochHook& hook) {
  config.validate();
  loss.validate();
  schedule.validate();
  if (data.inputs == nullptr) throw ConfigError("train_pmf: no inputs");
  if (data.train.empty()) throw ConfigError("train_pmf: no training seeds");
  const auto& inputs = *data.inputs;
  const IntegrationOptions integration = ablations.integration_options();
  const std::size_t total_epochs = config.epochs + config.iterative_epochs;
  const std::size_t n_src = static_cast<std::size_t>(inputs[0].adjacency.rows());
  const std::size_t n_tgt = static_cast<std::size_t>(inputs[1].adjacency.rows());

  auto micro_batches_for = [&](std::size_t n_seeds) { return (n_seeds + config.batch_size - 1) / config.batch_size; };
  auto steps_for = [&](std::size_t n_seeds) {
    return (micro_batches_for(n_seeds) + config.accumulation_steps - 1) / config.accumulation_steps;
  };
  const std::size_t total_steps = steps_for(data.train.size()) * total_epochs;
  const auto warmup_steps = static_cast<std::size_t>(std::ceil(config.warmup_fraction * static_cast<double>(total_steps)));

  std::vector<DiffTensor*> tensors = tensor_list(params);
  AdamW optimizer(AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay});
  std::mt19937_64 rng(config.seed);

  TrainResult result;
  std::vector<SeedPair> train = data.train;
  ProbationLedger ledger;
  std::optional<std::map<Modality, RelevanceScores>> static_scores;
  double static_delta = 0.0;
  double best_h1 = -1.0;
  std::size_t evals_without_gain = 0;
  std::size_t step = 0;
  bool have_best = false;

  for (std::size_t epoch = 0; epoch < total_epochs; ++epoch) {
    std::vector<SeedPair> order = train;
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_micro = micro_batches_for(order.size());
    const double cm_share = 1.0 / static_cast<double>(n_micro);

    // Scores of this epoch are fixed by its first forward pass.
    std::optional<std::map<Modality, RelevanceScores>> epoch_scores;
    const bool before_static = ablations.static_epoch && epoch < *ablations.static_epoch;
    if (static_scores) epoch_scores = static_scores;

    EpochRecord record;
    record.epoch = epoch;
    params.zero_grad();
    std::size_t pending = 0;
    for (std::size_t mb = 0; mb < n_micro; ++mb) {
      Tape tape;
      const std::array<ModalityEmbeddings, 2> encoded = {encode_all(tape, inputs[0], params, Side::Source),
                                                         encode_all(tape, inputs[1], params, Side::Target)};
      IntegrationOptions opts = integration;
      std::map<Modality, RelevanceScores> ones;
      if (before_static) {
        // Nothing is scored before the static epoch.
        for (const auto& [m, v] : encoded[0]) {
          ones[m] = {Vector::Ones(static_cast<Eigen::Index>(n_src)), Vector::Ones(static_cast<Eigen::Index>(n_tgt))};
        }
      }
      const std::map<Modality, RelevanceScores>* fixed =
          before_static ? &ones : (epoch_scores ? &*epoch_scores : nullptr);
      std::optional<double> fixed_delta;
      if (static_scores) fixed_delta = static_delta;
      const IntegrationResult integ = integrate_epoch(tape, encoded, schedule, epoch, opts, fixed, fixed_delta);
      if (!epoch_scores && !before_static) epoch_scores = integ.scores;
      if (ablations.static_epoch && epoch == *ablations.static_epoch && !static_scores) {
        static_scores = integ.scores;
        static_delta = integ.delta;
      }
      if (mb == 0) {
        record.delta = integ.delta;
        record.freeze = integ.stats;
        if (hook) hook(epoch, integ);
        result.final_scores = integ.scores;
        for (std::size_t side = 0; side < 2; ++side) {
          result.final_masks[side].clear();
          for (const auto& st : integ.states[side]) result.final_masks[side][st.modality] = st.freeze;
        }
      }

      Var l_cm = tape.constant(Matrix::Zero(1, 1));
      if (!ablations.disable_cm_loss) {
        for (std::size_t side = 0; side < 2; ++side) {
          ModalityEmbeddings states;
          for (const auto& st : integ.states[side]) states[st.modality] = st.embeddings;
          const std::size_t n = side == 0 ? n_src : n_tgt;
          if (loss.negatives == NegativeMode::Full && n <= config.cm_full_batch_limit) {
            l_cm = diff::add(tape, l_cm, cross_modality_loss(tape, states, loss));
          } else {
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            const std::size_t chunk = std::min(loss.cm_batch_size, config.cm_full_batch_limit);
            for (std::size_t start = 0; start < n; start += chunk) {
              std::span<const std::size_t> pool(perm.data() + start, std::min(chunk, n - start));
              l_cm = diff::add(tape, l_cm, cross_modality_loss(tape, states, loss, pool));
            }
          }
        }
        l_cm = diff::scale(tape, l_cm, cm_share);
      }

      std::vector<ChannelEmbeddings> channels;
      for (std::size_t k = 0; k < integ.states[0].size(); ++k) {
        channels.push_back({std::string(modality_name(integ.states[0][k].modality)), integ.states[0][k].embeddings,
                            integ.states[1][k].embeddings});
      }
      channels.push_back({"joint", integ.joint[0], integ.joint[1]});
      const std::size_t begin = mb * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const std::span<const SeedPair> batch(order.data() + begin, end - begin);
      const Var l_ckg = cross_kg_loss(tape, channels, batch, loss);

      const double cm_value = tape.value(l_cm)(0, 0);
      const double ckg_value = tape.value(l_ckg)(0, 0);
      try {
        total_loss(cm_value, ckg_value);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
      const Var total = total_loss(tape, l_cm, l_ckg);
      tape.backward(total);
      record.cm_loss += cm_value;
      record.ckg_loss += ckg_value;
      ++pending;

      if (pending == config.accumulation_steps || mb + 1 == n_micro) {
        const double rate = lr_schedule(step, total_steps, config);
        try {
          optimizer.step(tensors, rate);
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
        }
        result.history.step_lrs.push_back(rate);
        record.lr = rate;
        ++step;
        pending = 0;
        params.zero_grad();
      }
    }
    record.total_loss = record.cm_loss + record.ckg_loss;
    record.train_seeds = train.size();

    const bool iterative_phase = epoch >= config.epochs;
    const bool do_eval = !data.valid.empty() && ((epoch + 1) % config.eval_interval == 0 || epoch + 1 == total_epochs);
    const bool do_probation = iterative_phase && (epoch + 1 - config.epochs) % config.probation_interval == 0;
    if (do_eval || do_probation) {
      // End-of-epoch embeddings scored at this epoch's threshold.
      const std::array<std::map<Modality, Matrix>, 2> values = {encode_values(inputs[0], params, Side::Source),
                                                                encode_values(inputs[1], params, Side::Target)};
      std::map<Modality, RelevanceScores> scores;
      if (static_scores) {
        scores = *static_scores;
      } else if (before_static) {
        for (const auto& [m, v] : values[0]) {
          scores[m] = {Vector::Ones(static_cast<Eigen::Index>(n_src)), Vector::Ones(static_cast<Eigen::Index>(n_tgt))};
        }
      } else {
        scores = score_all(values, record.delta);
      }
      const std::array<Matrix, 2> joint = joint_embeddings(values, scores, integration);
      if (do_eval) {
        const MetricsReport report = validation_metrics(joint, data);
        record.valid = report.mean;
        if (report.mean.hits1 > best_h1) {
          best_h1 = report.mean.hits1;
          evals_without_gain = 0;
          result.best_params = params;
          result.best_scores = scores;
          result.best_epoch = epoch;
          have_best = true;
        } else if (step >= warmup_steps || config.base_lr == 0.0) {
          // Patience only runs once the rate has peaked.
          ++evals_without_gain;
        }
      }
      if (do_probation) {
        for (const SeedPair& p : probation_update(joint[0], joint[1], train, ledger, config.probation_stability)) {
          train.push_back(p);
          result.augmented_seeds.push_back(p);
        }
      }
      if (!have_best && data.valid.empty()) {
        result.best_scores = scores;
      }
    }
    result.history.epochs.push_back(std::move(record));
    if (do_eval && evals_without_gain >= config.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }

  if (!have_best) {
    // No validation signal: keep the final parameters.
    result.best_params = params;
    result.best_epoch = result.history.epochs.empty() ? 0 : result.history.epochs.back().epoch;
    const std::array<std::map<Modality, Matrix>, 2> values = {encode_values(inputs[0], params, Side::Source),
                                                              encode_values(inputs[1], params, Side::Target)};
    result.best_scores = static_scores ? *static_scores : score_all(values, result.history.epochs.back().delta);
  }
  return result;
}

}  // namespace pmf
