// pmf: generate synthetic data, train, evaluate, sweep delta caps, report.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pmf/errors.hpp"
#include "pmf/experiment.hpp"

namespace fs = std::filesystem;
using namespace pmf;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kDimension = 4, kNumeric = 5 };

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
};

fs::path output_root() {
  if (const char* env = std::getenv("PMF_OUTPUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

ExperimentConfig base_config(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed) c.set_seed(*g.seed);
  return c;
}

fs::path out_dir(const Globals& g, const std::string& fallback) {
  return g.out.empty() ? output_root() / fallback : fs::path(g.out);
}

std::vector<double> parse_caps(const std::string& list, const std::string& range) {
  std::vector<double> caps;
  if (!range.empty()) {
    double lo = 0, hi = 0, step = 0;
    char c1 = 0, c2 = 0;
    std::istringstream in(range);
    if (!(in >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || !(step > 0.0)) {
      throw ConfigError("--cap-range expects start:stop:step");
    }
    const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
    for (long k = 0; k <= n; ++k) caps.push_back(lo + static_cast<double>(k) * step);
  }
  std::istringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      caps.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("--caps: not a number: " + item);
    }
  }
  return caps;
}

void print_metrics(const MetricsReport& m) {
  std::cout << "test pairs " << m.n_pairs << "\n";
  std::cout << "source->target  H@1 " << m.source_to_target.hits1 << "  H@10 " << m.source_to_target.hits10
            << "  MRR " << m.source_to_target.mrr << "\n";
  std::cout << "target->source  H@1 " << m.target_to_source.hits1 << "  H@10 " << m.target_to_source.hits10
            << "  MRR " << m.target_to_source.mrr << "\n";
  std::cout << "mean            H@1 " << m.mean.hits1 << "  H@10 " << m.mean.hits10 << "  MRR " << m.mean.mrr << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Progressive modality freezing for multi-modal entity alignment"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for data generation, splitting, init and training");
  app.add_option("--out", g.out, "Output directory (default: $PMF_OUTPUT_ROOT/<command>..., else ./runs/...)");
  app.add_option("--config", g.config, "Experiment config (TOML)");

  auto* gen = app.add_subcommand("generate", "Write a synthetic KG pair with corruption labels");
  gen->fallthrough();

  auto* train = app.add_subcommand("train", "Train and write a run directory");
  train->fallthrough();
  std::vector<std::string> ablate;
  std::string drop;
  train->add_option("--ablate", ablate, "frm | iff | rff | cm | static_integration=epoch:K (repeatable)");
  train->add_option("--drop-modalities", drop, "Comma-separated modalities to drop (str,rel,attr,img)");

  auto* eval = app.add_subcommand("evaluate", "Recompute test metrics from a run directory");
  eval->fallthrough();
  std::string run_dir;
  bool greedy = false;
  eval->add_option("run", run_dir, "Run directory")->required();
  eval->add_flag("--greedy", greedy, "Also write greedy one-to-one matches.tsv");

  auto* sweep = app.add_subcommand("sweep-delta", "One run per delta cap");
  sweep->fallthrough();
  std::string caps, cap_range;
  sweep->add_option("--caps", caps, "Comma-separated caps in (0,1]");
  sweep->add_option("--cap-range", cap_range, "start:stop:step, e.g. 0.1:0.95:0.05");

  auto* report = app.add_subcommand("report", "Merge metrics of several runs");
  report->fallthrough();
  std::vector<std::string> runs;
  report->add_option("runs", runs, "Run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (gen->parsed()) {
    const ExperimentConfig c = base_config(g);
    c.synthetic.validate();
    const SyntheticPair p = generate_synthetic_pair(c.synthetic);
    const fs::path dir = out_dir(g, "dataset");
    write_kg_pair(dir, p.source, p.target, p.pairs);
    write_corruption_labels(dir / "corruption.tsv", p.corruption);
    std::cout << "wrote " << dir.string() << "\n";
    std::cout << "entities " << p.source.n_entities << " / " << p.target.n_entities << ", triples "
              << p.source.triples.size() << " / " << p.target.triples.size() << ", seed pairs " << p.pairs.size()
              << "\n";
    std::cout << "corrupted";
    for (Modality m : kAllModalities) {
      std::size_t k = 0;
      for (const auto& row : p.corruption) k += row[static_cast<std::size_t>(m)];
      std::cout << " " << modality_name(m) << "=" << k;
    }
    std::size_t missing = 0;
    for (auto h : p.target.has_image) missing += h == 0;
    std::cout << ", target entities without image " << missing << "\n";
    return kOk;
  }

  if (train->parsed()) {
    ExperimentConfig c = base_config(g);
    for (const auto& a : ablate) apply_ablation(c, a);
    if (!drop.empty()) {
      std::istringstream in(drop);
      std::string item;
      while (std::getline(in, item, ',')) {
        if (!item.empty()) c.drop_modalities.push_back(parse_modality(item));
      }
    }
    c.validate();
    const fs::path dir = out_dir(g, "train-" + config_hash(c).substr(0, 8));
    const RunSummary s = run_experiment(c, dir);
    std::cout << "run " << dir.string() << "  epochs " << s.train.history.epochs.size() << "  best epoch "
              << s.train.best_epoch << "\n";
    print_metrics(s.test);
    if (s.corrupted_image_frozen) std::cout << "image-corrupted entities frozen: " << *s.corrupted_image_frozen << "\n";
    return kOk;
  }

  if (eval->parsed()) {
    const fs::path dir = g.out.empty() ? fs::path(run_dir) : fs::path(g.out);
    const MetricsReport m =
        evaluate_run(run_dir, greedy ? std::optional<Prediction>(Prediction::Greedy) : std::nullopt, dir);
    print_metrics(m);
    return kOk;
  }

  if (sweep->parsed()) {
    const ExperimentConfig c = base_config(g);
    const std::vector<double> list = parse_caps(caps, cap_range);
    const fs::path dir = out_dir(g, "sweep-" + config_hash(c).substr(0, 8));
    const auto rows = sweep_delta(c, list, dir);
    std::cout << "cap      img_frozen  H@1\n";
    for (const auto& r : rows) {
      std::cout << std::fixed << std::setprecision(4) << r.cap << "   " << r.img_frozen << "      " << r.hits1 << "\n";
    }
    std::cout << "wrote " << (dir / "sweep.csv").string() << "\n";
    return kOk;
  }

  if (report->parsed()) {
    std::vector<fs::path> dirs(runs.begin(), runs.end());
    const auto rows = collect_report(dirs);
    std::cout << report_table(rows);
    if (!g.out.empty()) {
      fs::create_directories(g.out);
      std::ofstream out(fs::path(g.out) / "report.csv", std::ios::binary);
      out << report_csv(rows);
      if (!out) throw DataError("cannot write report.csv under " + g.out);
    } else {
      std::cout << "\n" << report_csv(rows);
    }
    return kOk;
  }
  return kOther;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return kDimension;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
