#include "pmf/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>
#include <toml.hpp>

#include "pmf/archive.hpp"
#include "pmf/errors.hpp"

namespace fs = std::filesystem;

namespace pmf {

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Reads one TOML table and rejects keys nobody asked for.
class TableReader {
 public:
  TableReader(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <typename F>
  void with(const char* key, F&& f) {
    seen_.insert(key);
    if (table_ == nullptr) return;
    const toml::node* node = table_->get(key);
    if (node != nullptr) f(*node, where(key));
  }

  void real(const char* key, double& out) {
    with(key, [&](const toml::node& n, const std::string& w) {
      if (auto v = n.value<double>()) {
        out = *v;
      } else {
        throw ConfigError(w + ": expected a number");
      }
    });
  }

  void count(const char* key, std::size_t& out) {
    with(key, [&](const toml::node& n, const std::string& w) {
      auto v = n.as_integer();
      if (v == nullptr || v->get() < 0) throw ConfigError(w + ": expected a non-negative integer");
      out = static_cast<std::size_t>(v->get());
    });
  }

  void seed(const char* key, std::uint64_t& out) {
    std::size_t v = static_cast<std::size_t>(out);
    count(key, v);
    out = v;
  }

  void flag(const char* key, bool& out) {
    with(key, [&](const toml::node& n, const std::string& w) {
      auto v = n.as_boolean();
      if (v == nullptr) throw ConfigError(w + ": expected true or false");
      out = v->get();
    });
  }

  void text(const char* key, std::string& out) {
    with(key, [&](const toml::node& n, const std::string& w) {
      auto v = n.as_string();
      if (v == nullptr) throw ConfigError(w + ": expected a string");
      out = v->get();
    });
  }

  void strings(const char* key, std::vector<std::string>& out) {
    with(key, [&](const toml::node& n, const std::string& w) {
      auto arr = n.as_array();
      if (arr == nullptr) throw ConfigError(w + ": expected an array of strings");
      out.clear();
      for (const auto& item : *arr) {
        auto s = item.as_string();
        if (s == nullptr) throw ConfigError(w + ": expected an array of strings");
        out.push_back(s->get());
      }
    });
  }

  void counts(const char* key, std::vector<std::size_t>& out) {
    with(key, [&](const toml::node& n, const std::string& w) {
      auto arr = n.as_array();
      if (arr == nullptr) throw ConfigError(w + ": expected an array of integers");
      out.clear();
      for (const auto& item : *arr) {
        auto v = item.as_integer();
        if (v == nullptr || v->get() < 0) throw ConfigError(w + ": expected an array of non-negative integers");
        out.push_back(static_cast<std::size_t>(v->get()));
      }
    });
  }

  void finish() const {
    if (table_ == nullptr) return;
    for (const auto& [key, node] : *table_) {
      if (node.is_table() && name_.empty()) continue;
      if (!seen_.contains(std::string(key.str()))) throw ConfigError("unknown config key " + where(key.str()));
    }
  }

 private:
  std::string where(std::string_view key) const {
    return name_.empty() ? std::string(key) : name_ + "." + std::string(key);
  }

  const toml::table* table_;
  std::string name_;
  std::set<std::string> seen_;
};

std::vector<Modality> parse_modalities(const std::vector<std::string>& names) {
  std::vector<Modality> out;
  for (const auto& s : names) out.push_back(parse_modality(s));
  return out;
}

toml::array modality_array(const std::vector<Modality>& ms) {
  toml::array a;
  for (Modality m : ms) a.push_back(std::string(modality_name(m)));
  return a;
}

const char* negatives_name(NegativeMode m) { return m == NegativeMode::Full ? "full" : "in-batch"; }

}  // namespace

void ExperimentConfig::validate() const {
  if (!(train_ratio > 0.0 && train_ratio <= 1.0)) throw ConfigError("train_ratio must lie in (0,1]");
  if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) throw ConfigError("valid_fraction must lie in [0,1)");
  if (encoder.hidden_dim < 1 || encoder.gat_layers < 1) throw ConfigError("encoder sizes must be at least 1");
  if (encoder.modalities.empty()) throw ConfigError("no modalities configured");
  std::set<Modality> configured(encoder.modalities.begin(), encoder.modalities.end());
  if (configured.size() != encoder.modalities.size()) throw ConfigError("duplicate modality in encoder.modalities");
  for (Modality m : drop_modalities) {
    if (!configured.contains(m)) {
      throw ConfigError("dropped modality " + std::string(modality_name(m)) + " is not configured");
    }
  }
  if (active_modalities().empty()) throw ConfigError("every modality was dropped; at least one must remain");
  for (Modality m : ablations.force_frozen) {
    if (!configured.contains(m)) throw ConfigError("force_frozen modality is not configured");
  }
  if (bag_cap < 1) throw ConfigError("bag_cap must be at least 1");
  if (data_dir.empty()) synthetic.validate();
  loss.validate();
  train.validate();
  schedule.validate();
}

std::vector<Modality> ExperimentConfig::active_modalities() const {
  std::vector<Modality> out;
  for (Modality m : kAllModalities) {
    const bool configured = std::find(encoder.modalities.begin(), encoder.modalities.end(), m) != encoder.modalities.end();
    const bool dropped = std::find(drop_modalities.begin(), drop_modalities.end(), m) != drop_modalities.end();
    if (configured && !dropped) out.push_back(m);
  }
  return out;
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  synthetic.seed = s;
  train.seed = s;
}

ExperimentConfig parse_config(std::string_view toml_text) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  ExperimentConfig c;
  {
    TableReader r(&root, "");
    r.seed("seed", c.seed);
    c.synthetic.seed = c.seed;
    c.train.seed = c.seed;
    r.real("train_ratio", c.train_ratio);
    r.real("valid_fraction", c.valid_fraction);
    std::string pool = "test";
    r.text("candidate_pool", pool);
    if (pool == "test") {
      c.candidate_pool = CandidatePool::Test;
    } else if (pool == "all") {
      c.candidate_pool = CandidatePool::All;
    } else {
      throw ConfigError("candidate_pool must be \"test\" or \"all\"");
    }
    std::string pred = "rank";
    r.text("prediction", pred);
    if (pred == "rank") {
      c.prediction = Prediction::Rank;
    } else if (pred == "greedy") {
      c.prediction = Prediction::Greedy;
    } else {
      throw ConfigError("prediction must be \"rank\" or \"greedy\"");
    }
    r.counts("score_dump_epochs", c.score_dump_epochs);
    for (const auto& [key, node] : root) {
      static const std::set<std::string> tables = {"data", "synthetic", "encoder", "ablation", "loss", "train", "schedule"};
      if (node.is_table() && !tables.contains(std::string(key.str()))) {
        throw ConfigError("unknown config table [" + std::string(key.str()) + "]");
      }
    }
    r.finish();
  }
  {
    TableReader r(root["data"].as_table(), "data");
    std::string path;
    r.text("path", path);
    c.data_dir = path;
    r.finish();
  }
  {
    SyntheticSpec& s = c.synthetic;
    TableReader r(root["synthetic"].as_table(), "synthetic");
    r.count("n_entities", s.n_entities);
    r.count("n_relations", s.n_relations);
    r.count("n_attributes", s.n_attributes);
    r.real("triple_density", s.triple_density);
    r.count("image_dim", s.image_dim);
    r.real("corrupt_str", s.corrupt_rate[0]);
    r.real("corrupt_rel", s.corrupt_rate[1]);
    r.real("corrupt_attr", s.corrupt_rate[2]);
    r.real("corrupt_img", s.corrupt_rate[3]);
    r.real("missing_image_rate", s.missing_image_rate);
    r.real("feature_noise", s.feature_noise);
    r.real("structure_noise", s.structure_noise);
    r.real("attribute_noise", s.attribute_noise);
    r.count("attributes_per_entity", s.attributes_per_entity);
    r.seed("seed", s.seed);
    r.finish();
  }
  {
    TableReader r(root["encoder"].as_table(), "encoder");
    r.count("hidden_dim", c.encoder.hidden_dim);
    r.count("gat_layers", c.encoder.gat_layers);
    r.real("leaky_slope", c.encoder.leaky_slope);
    std::vector<std::string> ms;
    r.strings("modalities", ms);
    if (root["encoder"]["modalities"]) c.encoder.modalities = parse_modalities(ms);
    r.count("bag_cap", c.bag_cap);
    r.finish();
  }
  {
    Ablations& a = c.ablations;
    TableReader r(root["ablation"].as_table(), "ablation");
    r.flag("disable_freezing", a.disable_freezing);
    r.flag("disable_fusion_weighting", a.disable_fusion_weighting);
    r.flag("disable_relevance", a.disable_relevance);
    r.flag("disable_cm_loss", a.disable_cm_loss);
    r.with("static_epoch", [&](const toml::node& n, const std::string& w) {
      auto v = n.as_integer();
      if (v == nullptr || v->get() < -1) throw ConfigError(w + ": expected -1 (off) or an epoch");
      if (v->get() >= 0) a.static_epoch = static_cast<std::size_t>(v->get());
    });
    std::vector<std::string> ms;
    r.strings("drop_modalities", ms);
    c.drop_modalities = parse_modalities(ms);
    ms.clear();
    r.strings("force_frozen", ms);
    for (Modality m : parse_modalities(ms)) a.force_frozen.insert(m);
    r.finish();
  }
  {
    LossConfig& l = c.loss;
    TableReader r(root["loss"].as_table(), "loss");
    r.real("temperature", l.temperature);
    for (Modality m : kAllModalities) {
      const std::string key = "beta_" + std::string(modality_name(m));
      r.real(key.c_str(), l.beta[m]);
    }
    std::vector<std::string> pairs;
    r.strings("modality_pairs", pairs);
    for (const auto& p : pairs) {
      const auto dash = p.find('-');
      if (dash == std::string::npos) throw ConfigError("loss.modality_pairs entries look like \"str-img\"");
      l.modality_pairs.emplace_back(parse_modality(p.substr(0, dash)), parse_modality(p.substr(dash + 1)));
    }
    std::string neg = "full";
    r.text("negatives", neg);
    if (neg == "full") {
      l.negatives = NegativeMode::Full;
    } else if (neg == "in-batch") {
      l.negatives = NegativeMode::InBatch;
    } else {
      throw ConfigError("loss.negatives must be \"full\" or \"in-batch\"");
    }
    r.count("cm_batch_size", l.cm_batch_size);
    r.flag("ckg_literal_sum", l.ckg_literal_sum);
    r.finish();
  }
  {
    TrainConfig& t = c.train;
    TableReader r(root["train"].as_table(), "train");
    r.count("epochs", t.epochs);
    r.count("iterative_epochs", t.iterative_epochs);
    r.count("batch_size", t.batch_size);
    r.real("base_lr", t.base_lr);
    r.real("warmup_fraction", t.warmup_fraction);
    r.count("accumulation_steps", t.accumulation_steps);
    r.count("early_stop_patience", t.early_stop_patience);
    r.count("eval_interval", t.eval_interval);
    r.count("probation_interval", t.probation_interval);
    r.count("probation_stability", t.probation_stability);
    r.real("weight_decay", t.weight_decay);
    r.count("cm_full_batch_limit", t.cm_full_batch_limit);
    r.finish();
  }
  {
    TableReader r(root["schedule"].as_table(), "schedule");
    r.real("initial", c.schedule.initial);
    r.real("factor", c.schedule.factor);
    r.real("cap", c.schedule.cap);
    r.finish();
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_text(path));
}

std::string to_toml(const ExperimentConfig& c) {
  toml::table root;
  root.insert("seed", static_cast<std::int64_t>(c.seed));
  root.insert("train_ratio", c.train_ratio);
  root.insert("valid_fraction", c.valid_fraction);
  root.insert("candidate_pool", c.candidate_pool == CandidatePool::Test ? "test" : "all");
  root.insert("prediction", c.prediction == Prediction::Rank ? "rank" : "greedy");
  toml::array dumps;
  for (auto e : c.score_dump_epochs) dumps.push_back(static_cast<std::int64_t>(e));
  root.insert("score_dump_epochs", dumps);

  root.insert("data", toml::table{{"path", c.data_dir.string()}});

  const SyntheticSpec& s = c.synthetic;
  root.insert("synthetic", toml::table{
                               {"n_entities", static_cast<std::int64_t>(s.n_entities)},
                               {"n_relations", static_cast<std::int64_t>(s.n_relations)},
                               {"n_attributes", static_cast<std::int64_t>(s.n_attributes)},
                               {"triple_density", s.triple_density},
                               {"image_dim", static_cast<std::int64_t>(s.image_dim)},
                               {"corrupt_str", s.corrupt_rate[0]},
                               {"corrupt_rel", s.corrupt_rate[1]},
                               {"corrupt_attr", s.corrupt_rate[2]},
                               {"corrupt_img", s.corrupt_rate[3]},
                               {"missing_image_rate", s.missing_image_rate},
                               {"feature_noise", s.feature_noise},
                               {"structure_noise", s.structure_noise},
                               {"attribute_noise", s.attribute_noise},
                               {"attributes_per_entity", static_cast<std::int64_t>(s.attributes_per_entity)},
                               {"seed", static_cast<std::int64_t>(s.seed)},
                           });

  root.insert("encoder", toml::table{
                             {"hidden_dim", static_cast<std::int64_t>(c.encoder.hidden_dim)},
                             {"gat_layers", static_cast<std::int64_t>(c.encoder.gat_layers)},
                             {"leaky_slope", c.encoder.leaky_slope},
                             {"modalities", modality_array(c.encoder.modalities)},
                             {"bag_cap", static_cast<std::int64_t>(c.bag_cap)},
                         });

  const Ablations& a = c.ablations;
  root.insert("ablation", toml::table{
                              {"disable_freezing", a.disable_freezing},
                              {"disable_fusion_weighting", a.disable_fusion_weighting},
                              {"disable_relevance", a.disable_relevance},
                              {"disable_cm_loss", a.disable_cm_loss},
                              {"static_epoch", a.static_epoch ? static_cast<std::int64_t>(*a.static_epoch) : -1},
                              {"drop_modalities", modality_array(c.drop_modalities)},
                              {"force_frozen", modality_array({a.force_frozen.begin(), a.force_frozen.end()})},
                          });

  toml::table loss{
      {"temperature", c.loss.temperature},
      {"negatives", negatives_name(c.loss.negatives)},
      {"cm_batch_size", static_cast<std::int64_t>(c.loss.cm_batch_size)},
      {"ckg_literal_sum", c.loss.ckg_literal_sum},
  };
  for (Modality m : kAllModalities) {
    auto it = c.loss.beta.find(m);
    loss.insert("beta_" + std::string(modality_name(m)), it == c.loss.beta.end() ? 1.0 : it->second);
  }
  toml::array pairs;
  for (const auto& [p, q] : c.loss.modality_pairs) {
    pairs.push_back(std::string(modality_name(p)) + "-" + std::string(modality_name(q)));
  }
  loss.insert("modality_pairs", pairs);
  root.insert("loss", loss);

  const TrainConfig& t = c.train;
  root.insert("train", toml::table{
                           {"epochs", static_cast<std::int64_t>(t.epochs)},
                           {"iterative_epochs", static_cast<std::int64_t>(t.iterative_epochs)},
                           {"batch_size", static_cast<std::int64_t>(t.batch_size)},
                           {"base_lr", t.base_lr},
                           {"warmup_fraction", t.warmup_fraction},
                           {"accumulation_steps", static_cast<std::int64_t>(t.accumulation_steps)},
                           {"early_stop_patience", static_cast<std::int64_t>(t.early_stop_patience)},
                           {"eval_interval", static_cast<std::int64_t>(t.eval_interval)},
                           {"probation_interval", static_cast<std::int64_t>(t.probation_interval)},
                           {"probation_stability", static_cast<std::int64_t>(t.probation_stability)},
                           {"weight_decay", t.weight_decay},
                           {"cm_full_batch_limit", static_cast<std::int64_t>(t.cm_full_batch_limit)},
                       });

  root.insert("schedule", toml::table{
                              {"initial", c.schedule.initial},
                              {"factor", c.schedule.factor},
                              {"cap", c.schedule.cap},
                          });
  std::ostringstream out;
  out << root << "\n";
  return out.str();
}

void apply_ablation(ExperimentConfig& c, std::string_view token) {
  std::string t(token);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (!t.empty() && t.front() == '-') t.erase(t.begin());
  if (t == "none") {
    c.ablations = Ablations{};
  } else if (t == "frm" || t == "disable_relevance") {
    c.ablations.disable_relevance = true;
  } else if (t == "iff" || t == "disable_freezing") {
    c.ablations.disable_freezing = true;
  } else if (t == "rff" || t == "disable_fusion_weighting") {
    c.ablations.disable_fusion_weighting = true;
  } else if (t == "cm" || t == "l_cm" || t == "disable_cm_loss") {
    c.ablations.disable_cm_loss = true;
  } else if (t.starts_with("static_integration") || t.starts_with("pi")) {
    const auto pos = t.find("epoch:");
    std::size_t epoch = 0;
    if (pos != std::string::npos) {
      try {
        std::size_t used = 0;
        epoch = std::stoul(t.substr(pos + 6), &used);
        if (used != t.size() - pos - 6) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError("bad ablation '" + std::string(token) + "': expected static_integration=epoch:K");
      }
    } else if (t.find('=') != std::string::npos) {
      throw ConfigError("bad ablation '" + std::string(token) + "': expected static_integration=epoch:K");
    }
    c.ablations.static_epoch = epoch;
  } else {
    throw ConfigError("unknown ablation '" + std::string(token) + "' (frm, iff, rff, cm, static_integration=epoch:K)");
  }
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string text = to_toml(config);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

Dataset resolve_dataset(const ExperimentConfig& config) {
  Dataset ds;
  std::vector<SeedPair> pairs;
  if (config.data_dir.empty()) {
    SyntheticPair p = generate_synthetic_pair(config.synthetic);
    ds.kgs.source = std::move(p.source);
    ds.kgs.target = std::move(p.target);
    pairs = std::move(p.pairs);
    ds.corruption = std::move(p.corruption);
  } else {
    ds.kgs = load_kg_pair(config.data_dir);
    pairs = ds.kgs.seeds.pairs;
    const fs::path labels = config.data_dir / "corruption.tsv";
    if (fs::exists(labels)) ds.corruption = read_corruption_labels(labels, ds.kgs.target.n_entities);
  }
  const double train = config.train_ratio * (1.0 - config.valid_fraction);
  const double valid = config.train_ratio * config.valid_fraction;
  ds.kgs.seeds = split_seeds(std::move(pairs), train, valid, config.seed);
  ds.kgs.seeds.validate(ds.kgs.source.n_entities, ds.kgs.target.n_entities);
  return ds;
}

namespace {

std::string history_csv(const TrainHistory& h, const std::vector<Modality>& active) {
  std::ostringstream out;
  out << "epoch,total_loss,cm_loss,ckg_loss,delta,lr,train_seeds";
  for (Modality m : active) out << ",frozen_" << modality_name(m) << "_source,frozen_" << modality_name(m) << "_target";
  out << ",valid_hits1,valid_hits10,valid_mrr\n";
  for (const EpochRecord& r : h.epochs) {
    out << r.epoch << ',' << num(r.total_loss) << ',' << num(r.cm_loss) << ',' << num(r.ckg_loss) << ','
        << num(r.delta) << ',' << num(r.lr) << ',' << r.train_seeds;
    for (Modality m : active) {
      for (Side side : {Side::Source, Side::Target}) {
        auto it = std::find_if(r.freeze.begin(), r.freeze.end(),
                               [&](const FreezeStat& f) { return f.modality == m && f.side == side; });
        out << ',' << (it == r.freeze.end() ? std::string() : num(it->frozen_ratio));
      }
    }
    if (r.valid) {
      out << ',' << num(r.valid->hits1) << ',' << num(r.valid->hits10) << ',' << num(r.valid->mrr);
    } else {
      out << ",,,";
    }
    out << '\n';
  }
  return out.str();
}

std::string freeze_log_csv(const TrainHistory& h) {
  std::ostringstream out;
  out << "epoch,modality,side,delta,frozen_ratio,mean_w\n";
  for (const EpochRecord& r : h.epochs) {
    for (const FreezeStat& f : r.freeze) {
      out << r.epoch << ',' << modality_name(f.modality) << ',' << (f.side == Side::Source ? "source" : "target")
          << ',' << num(r.delta) << ',' << num(f.frozen_ratio) << ',' << num(f.mean_score) << '\n';
    }
  }
  return out.str();
}

std::string scores_csv(const std::map<Modality, RelevanceScores>& scores, const std::vector<SeedPair>& pairs) {
  std::ostringstream out;
  out << "source,target";
  for (const auto& [m, s] : scores) out << ",w_" << modality_name(m) << "_source,w_" << modality_name(m) << "_target";
  out << '\n';
  for (const SeedPair& p : pairs) {
    out << p.source << ',' << p.target;
    for (const auto& [m, s] : scores) out << ',' << num(s.source(p.source)) << ',' << num(s.target(p.target));
    out << '\n';
  }
  return out.str();
}

std::vector<std::pair<std::string, Matrix>> checkpoint_sections(const EncoderParams& params,
                                                                const std::map<Modality, RelevanceScores>& scores) {
  auto sections = params.to_sections();
  for (const auto& [m, s] : scores) {
    sections.emplace_back("scores/" + std::string(modality_name(m)) + "/source", Matrix(s.source));
    sections.emplace_back("scores/" + std::string(modality_name(m)) + "/target", Matrix(s.target));
  }
  return sections;
}

std::map<Modality, RelevanceScores> scores_from_sections(const std::map<std::string, Matrix>& sections,
                                                         const std::vector<Modality>& active) {
  std::map<Modality, RelevanceScores> out;
  for (Modality m : active) {
    const std::string base = "scores/" + std::string(modality_name(m));
    auto s = sections.find(base + "/source");
    auto t = sections.find(base + "/target");
    if (s == sections.end() || t == sections.end()) throw DataError("checkpoint lacks " + base);
    out[m] = {Vector(Eigen::Map<const Vector>(s->second.data(), s->second.size())),
              Vector(Eigen::Map<const Vector>(t->second.data(), t->second.size()))};
  }
  return out;
}

std::string matches_tsv(const Matrix& src_joint, const Matrix& tgt_joint, const std::vector<SeedPair>& pairs) {
  std::vector<std::size_t> src_ids, tgt_ids;
  for (const SeedPair& p : pairs) {
    src_ids.push_back(p.source);
    tgt_ids.push_back(p.target);
  }
  std::sort(src_ids.begin(), src_ids.end());
  std::sort(tgt_ids.begin(), tgt_ids.end());
  Matrix s(static_cast<Eigen::Index>(src_ids.size()), src_joint.cols());
  Matrix t(static_cast<Eigen::Index>(tgt_ids.size()), tgt_joint.cols());
  for (std::size_t k = 0; k < src_ids.size(); ++k) s.row(static_cast<Eigen::Index>(k)) = src_joint.row(static_cast<Eigen::Index>(src_ids[k]));
  for (std::size_t k = 0; k < tgt_ids.size(); ++k) t.row(static_cast<Eigen::Index>(k)) = tgt_joint.row(static_cast<Eigen::Index>(tgt_ids[k]));
  const MatchResult r = greedy_match(s, t);
  std::ostringstream out;
  for (const Match& m : r.matches) out << src_ids[m.source] << '\t' << tgt_ids[m.target] << '\t' << num(m.similarity) << '\n';
  return out.str();
}

nlohmann::ordered_json direction_json(const DirectionMetrics& d) {
  return {{"hits1", d.hits1}, {"hits10", d.hits10}, {"mrr", d.mrr}};
}

struct Prepared {
  Dataset data;
  std::array<ModalityInputs, 2> inputs;
  std::vector<Modality> active;
};

Prepared prepare(const ExperimentConfig& config) {
  Prepared p;
  p.data = resolve_dataset(config);
  p.inputs = prepare_inputs(p.data.kgs.source, p.data.kgs.target, config.bag_cap);
  p.active = config.active_modalities();
  return p;
}

MetricsReport test_metrics(const std::array<Matrix, 2>& joint, const std::vector<SeedPair>& test,
                           const ExperimentConfig& config) {
  return evaluate(joint[0], joint[1], test, config.candidate_pool == CandidatePool::All);
}

}  // namespace

std::string metrics_json(const RunSummary& s, const ExperimentConfig& config) {
  nlohmann::ordered_json j;
  j["source_to_target"] = direction_json(s.test.source_to_target);
  j["target_to_source"] = direction_json(s.test.target_to_source);
  j["mean"] = direction_json(s.test.mean);
  j["seeds"] = {{"train", s.n_train},
                {"valid", s.n_valid},
                {"test", s.n_test},
                {"augmented", s.train.augmented_seeds.size()}};
  j["best_epoch"] = s.train.best_epoch;
  j["epochs_run"] = s.train.history.epochs.size();
  j["early_stopped"] = s.train.early_stopped;
  j["final_img_frozen"] = s.final_img_frozen;
  if (s.corrupted_image_frozen) j["corrupted_image_frozen"] = *s.corrupted_image_frozen;
  j["modalities"] = nlohmann::ordered_json::array();
  for (Modality m : config.active_modalities()) j["modalities"].push_back(std::string(modality_name(m)));
  j["config_hash"] = s.config_hash;
  return j.dump(2) + "\n";
}

RunSummary run_experiment(const ExperimentConfig& config, const fs::path& run_dir) {
  config.validate();
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec || !fs::is_directory(run_dir)) throw DataError("cannot create run directory " + run_dir.string());
  write_text(run_dir / "config.toml", to_toml(config));

  Prepared p = prepare(config);
  const AlignmentSeedSet& seeds = p.data.kgs.seeds;
  const std::vector<SeedPair> test = seeds.test();
  if (test.empty()) throw ConfigError("seed split leaves no test pairs");

  EncoderConfig ec_cfg = config.encoder;
  ec_cfg.modalities = p.active;
  EncoderParams params = EncoderParams::initialize(
      ec_cfg, {p.data.kgs.source.n_entities, p.data.kgs.target.n_entities},
      static_cast<std::size_t>(p.inputs[0].rel_bags.cols()), static_cast<std::size_t>(p.inputs[0].attr_bags.cols()),
      static_cast<std::size_t>(p.inputs[0].images.cols()), config.seed);

  TrainData data;
  data.inputs = &p.inputs;
  data.train = seeds.train();
  data.valid = seeds.valid();
  // Validation ranks against every entity outside the training seeds.
  std::array<std::vector<std::uint8_t>, 2> in_train = {
      std::vector<std::uint8_t>(p.data.kgs.source.n_entities, 0),
      std::vector<std::uint8_t>(p.data.kgs.target.n_entities, 0)};
  for (const SeedPair& s : data.train) {
    in_train[0][s.source] = 1;
    in_train[1][s.target] = 1;
  }
  for (std::size_t side = 0; side < 2; ++side) {
    for (std::size_t i = 0; i < in_train[side].size(); ++i) {
      if (!in_train[side][i]) data.valid_pool[side].push_back(i);
    }
  }

  const std::set<std::size_t> dumps(config.score_dump_epochs.begin(), config.score_dump_epochs.end());
  const std::vector<SeedPair>& all_pairs = seeds.pairs;
  RunSummary summary;
  auto hook = [&](std::size_t epoch, const IntegrationResult& r) {
    if (epoch == 0) {
      double total = 0.0;
      int count = 0;
      for (const FreezeStat& f : r.stats) {
        if (f.modality == Modality::Image) {
          total += f.frozen_ratio;
          ++count;
        }
      }
      if (count > 0) summary.epoch0_img_frozen = total / count;
    }
    if (dumps.contains(epoch)) {
      write_text(run_dir / ("scores_epoch" + std::to_string(epoch) + ".csv"), scores_csv(r.scores, all_pairs));
    }
  };

  summary.train = train_pmf(data, std::move(params), config.loss, config.train, config.schedule, config.ablations, hook);
  summary.n_train = data.train.size();
  summary.n_valid = data.valid.size();
  summary.n_test = test.size();
  summary.config_hash = config_hash(config);

  const std::array<Matrix, 2> joint = joint_for(p.inputs, summary.train.best_params, summary.train.best_scores,
                                                config.ablations);
  summary.test = test_metrics(joint, test, config);

  auto img_mask = [&](std::size_t side) -> const RowMask* {
    auto it = summary.train.final_masks[side].find(Modality::Image);
    return it == summary.train.final_masks[side].end() ? nullptr : &it->second;
  };
  if (img_mask(0) != nullptr && img_mask(1) != nullptr) {
    auto frozen_ratio = [](const RowMask& m) {
      return static_cast<double>(std::count(m.begin(), m.end(), std::uint8_t{0})) / static_cast<double>(m.size());
    };
    summary.final_img_frozen = 0.5 * (frozen_ratio(*img_mask(0)) + frozen_ratio(*img_mask(1)));
    if (p.data.corruption) {
      std::size_t corrupted = 0, frozen = 0;
      const RowMask& mask = *img_mask(1);
      for (std::size_t i = 0; i < p.data.corruption->size() && i < mask.size(); ++i) {
        if ((*p.data.corruption)[i][static_cast<std::size_t>(Modality::Image)]) {
          ++corrupted;
          if (mask[i] == 0) ++frozen;
        }
      }
      if (corrupted > 0) summary.corrupted_image_frozen = static_cast<double>(frozen) / static_cast<double>(corrupted);
    }
  }

  write_text(run_dir / "history.csv", history_csv(summary.train.history, p.active));
  write_text(run_dir / "freeze_log.csv", freeze_log_csv(summary.train.history));
  write_archive(run_dir / "checkpoint.bin", checkpoint_sections(summary.train.best_params, summary.train.best_scores));
  if (config.train.iterative_epochs > 0) {
    std::ostringstream aug;
    for (const SeedPair& s : summary.train.augmented_seeds) aug << s.source << '\t' << s.target << '\n';
    write_text(run_dir / "augmented_seeds.tsv", aug.str());
  }
  if (config.prediction == Prediction::Greedy) write_text(run_dir / "matches.tsv", matches_tsv(joint[0], joint[1], test));
  write_text(run_dir / "metrics.json", metrics_json(summary, config));
  return summary;
}

MetricsReport evaluate_run(const fs::path& run_dir, std::optional<Prediction> prediction, const fs::path& out_dir) {
  const fs::path ckpt = run_dir / "checkpoint.bin";
  if (!fs::exists(ckpt)) throw DataError("no checkpoint.bin in " + run_dir.string());
  ExperimentConfig config = load_config(run_dir / "config.toml");
  if (prediction) config.prediction = *prediction;
  Prepared p = prepare(config);
  const auto sections = read_archive(ckpt);
  EncoderParams params = EncoderParams::from_sections(sections);
  const auto scores = scores_from_sections(sections, p.active);
  const std::array<Matrix, 2> joint = joint_for(p.inputs, params, scores, config.ablations);
  const std::vector<SeedPair> test = p.data.kgs.seeds.test();
  const MetricsReport report = test_metrics(joint, test, config);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    nlohmann::ordered_json j;
    j["source_to_target"] = direction_json(report.source_to_target);
    j["target_to_source"] = direction_json(report.target_to_source);
    j["mean"] = direction_json(report.mean);
    j["n_test"] = report.n_pairs;
    write_text(out_dir / "evaluation.json", j.dump(2) + "\n");
    if (config.prediction == Prediction::Greedy) write_text(out_dir / "matches.tsv", matches_tsv(joint[0], joint[1], test));
  }
  return report;
}

std::vector<SweepRow> sweep_delta(const ExperimentConfig& config, const std::vector<double>& caps, const fs::path& out_dir) {
  if (caps.empty()) throw ConfigError("sweep-delta: empty cap list");
  for (double cap : caps) {
    if (!(cap > 0.0 && cap <= 1.0)) throw ConfigError("sweep-delta: every cap must lie in (0,1], got " + num(cap));
  }
  std::vector<SweepRow> rows;
  for (double cap : caps) {
    ExperimentConfig c = config;
    c.schedule.cap = cap;
    // A cap below the starting threshold pins delta at the cap.
    c.schedule.initial = std::min(c.schedule.initial, cap);
    char name[32];
    std::snprintf(name, sizeof name, "cap_%.4f", cap);
    const RunSummary s = run_experiment(c, out_dir / name);
    rows.push_back({cap, s.final_img_frozen, s.test.mean.hits1});
  }
  std::ostringstream csv;
  csv << "cap,img_frozen_ratio,hits1\n";
  for (const SweepRow& r : rows) csv << num(r.cap) << ',' << num(r.img_frozen) << ',' << num(r.hits1) << '\n';
  write_text(out_dir / "sweep.csv", csv.str());
  return rows;
}

std::vector<ReportRow> collect_report(const std::vector<fs::path>& run_dirs) {
  std::vector<ReportRow> rows;
  for (const fs::path& dir : run_dirs) {
    const fs::path file = dir / "metrics.json";
    if (!fs::exists(file)) throw DataError("missing metrics.json in " + dir.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text(file));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("cannot parse " + file.string() + ": " + e.what());
    }
    auto direction = [&](const char* key) {
      DirectionMetrics d;
      try {
        const auto& o = j.at(key);
        for (auto [name, slot] : {std::pair{"hits1", &d.hits1}, std::pair{"hits10", &d.hits10}, std::pair{"mrr", &d.mrr}}) {
          const auto& v = o.at(name);
          if (!v.is_number()) throw DataError(std::string(key) + "." + name + " is not a number");
          *slot = v.get<double>();
          if (!std::isfinite(*slot)) throw DataError(std::string(key) + "." + name + " is not finite");
        }
      } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed " + file.string() + ": " + e.what());
      } catch (const DataError& e) {
        throw DataError("malformed " + file.string() + ": " + e.what());
      }
      return d;
    };
    ReportRow row;
    row.run = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    row.metrics.source_to_target = direction("source_to_target");
    row.metrics.target_to_source = direction("target_to_source");
    row.metrics.mean = direction("mean");
    if (j.contains("seeds") && j["seeds"].contains("test") && j["seeds"]["test"].is_number_unsigned()) {
      row.metrics.n_pairs = j["seeds"]["test"].get<std::size_t>();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << "run,hits1,hits10,mrr,s2t_hits1,s2t_hits10,s2t_mrr,t2s_hits1,t2s_hits10,t2s_mrr,n_test\n";
  for (const ReportRow& r : rows) {
    const MetricsReport& m = r.metrics;
    out << r.run << ',' << num(m.mean.hits1) << ',' << num(m.mean.hits10) << ',' << num(m.mean.mrr) << ','
        << num(m.source_to_target.hits1) << ',' << num(m.source_to_target.hits10) << ','
        << num(m.source_to_target.mrr) << ',' << num(m.target_to_source.hits1) << ','
        << num(m.target_to_source.hits10) << ',' << num(m.target_to_source.mrr) << ',' << m.n_pairs << '\n';
  }
  return out.str();
}

std::string report_table(const std::vector<ReportRow>& rows) {
  std::size_t width = 3;
  for (const ReportRow& r : rows) width = std::max(width, r.run.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "run" << "   H@1     H@10    MRR\n";
  out << std::string(width + 24, '-') << '\n';
  for (const ReportRow& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.run << std::right << std::fixed << std::setprecision(4)
        << std::setw(8) << r.metrics.mean.hits1 << std::setw(8) << r.metrics.mean.hits10 << std::setw(8)
        << r.metrics.mean.mrr << '\n';
  }
  return out.str();
}

}  // namespace pmf
