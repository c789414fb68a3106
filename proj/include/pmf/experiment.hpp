#pragma once

// Experiment runner: TOML configuration, dataset resolution (synthetic or
// on-disk), training runs with their artifact directories, delta sweeps and
// cross-run reports.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pmf/encoders.hpp"
#include "pmf/inference.hpp"
#include "pmf/integration.hpp"
#include "pmf/mmkg.hpp"
#include "pmf/objectives.hpp"
#include "pmf/training.hpp"

namespace pmf {

enum class CandidatePool : std::uint8_t { Test, All };
enum class Prediction : std::uint8_t { Rank, Greedy };

struct ExperimentConfig {
  // Seeds the split, parameter init and training. The synthetic generator
  // has its own seed; --seed sets both.
  std::uint64_t seed = 0;
  // Empty: generate from `synthetic`.
  std::filesystem::path data_dir;
  SyntheticSpec synthetic;
  // Seed ratio; a tenth of those seeds is held out for validation.
  double train_ratio = 0.2;
  double valid_fraction = 0.1;
  CandidatePool candidate_pool = CandidatePool::Test;
  Prediction prediction = Prediction::Rank;
  std::vector<std::size_t> score_dump_epochs;

  EncoderConfig encoder;
  std::size_t bag_cap = 1000;
  std::vector<Modality> drop_modalities;
  Ablations ablations;
  LossConfig loss;
  TrainConfig train;
  ThresholdSchedule schedule;

  void validate() const;
  // Configured modalities minus the dropped ones, in canonical order.
  [[nodiscard]] std::vector<Modality> active_modalities() const;
  void set_seed(std::uint64_t s);
};

ExperimentConfig parse_config(std::string_view toml_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string to_toml(const ExperimentConfig& config);

// "frm", "iff", "rff", "cm", "static_integration=epoch:K", "none".
void apply_ablation(ExperimentConfig& config, std::string_view token);

// 64-bit FNV-1a of the canonical TOML snapshot, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

struct Dataset {
  KgPair kgs;
  std::optional<CorruptionLabels> corruption;
};

// Synthetic pair or on-disk directory, seeds split per the config.
Dataset resolve_dataset(const ExperimentConfig& config);

struct RunSummary {
  MetricsReport test;
  TrainResult train;
  std::size_t n_train = 0;
  std::size_t n_valid = 0;
  std::size_t n_test = 0;
  // Image frozen ratio per side at the final epoch (mean of both sides).
  double final_img_frozen = 0.0;
  // Fraction of image-corrupted entities whose target-side image row is
  // frozen at the final epoch; empty without corruption labels.
  std::optional<double> corrupted_image_frozen;
  std::optional<double> epoch0_img_frozen;
  std::string config_hash;
};

// Trains and writes config.toml, history.csv, freeze_log.csv, checkpoint.bin,
// metrics.json and the optional artifacts into `run_dir`.
RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& run_dir);

// Recomputes test metrics from a run directory's config and checkpoint.
MetricsReport evaluate_run(const std::filesystem::path& run_dir, std::optional<Prediction> prediction = {},
                           const std::filesystem::path& out_dir = {});

struct SweepRow {
  double cap = 0.0;
  double img_frozen = 0.0;
  double hits1 = 0.0;
};

// One run per cap under `out_dir/cap_<cap>`, summary in `out_dir/sweep.csv`.
std::vector<SweepRow> sweep_delta(const ExperimentConfig& config, const std::vector<double>& caps,
                                  const std::filesystem::path& out_dir);

struct ReportRow {
  std::string run;
  MetricsReport metrics;
};

// Reads metrics.json of every run; throws DataError naming the offending
// directory when one is missing or malformed.
std::vector<ReportRow> collect_report(const std::vector<std::filesystem::path>& run_dirs);
std::string report_csv(const std::vector<ReportRow>& rows);
std::string report_table(const std::vector<ReportRow>& rows);

std::string metrics_json(const RunSummary& summary, const ExperimentConfig& config);

}  // namespace pmf
