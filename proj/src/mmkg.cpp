#include "pmf/mmkg.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "pmf/errors.hpp"

namespace pmf {

namespace fs = std::filesystem;

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Structure: return "str";
    case Modality::Relation: return "rel";
    case Modality::Attribute: return "attr";
    case Modality::Image: return "img";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  for (Modality m : kAllModalities) {
    if (modality_name(m) == name) return m;
  }
  throw ConfigError("unknown modality '" + std::string(name) + "' (expected str, rel, attr or img)");
}

void MultiModalKG::validate() const {
  auto fail = [&](const std::string& what) { throw DataError(name + ": " + what); };
  for (std::size_t k = 0; k < triples.size(); ++k) {
    const Triple& t = triples[k];
    if (t.head >= n_entities || t.tail >= n_entities) {
      fail("triple " + std::to_string(k) + " references an entity outside [0, " +
           std::to_string(n_entities) + ")");
    }
    if (t.relation >= n_relations) fail("triple " + std::to_string(k) + " has an out-of-vocabulary relation");
  }
  if (rel_items.size() != n_entities || attr_items.size() != n_entities) fail("bag count != n_entities");
  for (const auto& bag : rel_items) {
    for (auto r : bag) {
      if (r >= n_relations) fail("relation bag item out of vocabulary");
    }
  }
  for (const auto& bag : attr_items) {
    for (auto a : bag) {
      if (a >= n_attributes) fail("attribute bag item out of vocabulary");
    }
  }
  if (static_cast<std::size_t>(image_features.rows()) != n_entities || has_image.size() != n_entities) {
    fail("image feature rows != n_entities");
  }
  for (std::size_t i = 0; i < n_entities; ++i) {
    if (!has_image[i] && !image_features.row(static_cast<Eigen::Index>(i)).isZero(0.0)) {
      fail("entity " + std::to_string(i) + " has no image but a nonzero feature row");
    }
  }
}

Matrix build_adjacency(const MultiModalKG& kg) {
  const auto n = static_cast<Eigen::Index>(kg.n_entities);
  Matrix adj = Matrix::Identity(n, n);
  for (const Triple& t : kg.triples) {
    adj(t.head, t.tail) = 1.0;
    adj(t.tail, t.head) = 1.0;
  }
  return adj;
}

std::vector<std::vector<std::uint32_t>> relation_items_from_triples(const MultiModalKG& kg) {
  std::vector<std::set<std::uint32_t>> sets(kg.n_entities);
  for (const Triple& t : kg.triples) {
    sets[t.head].insert(t.relation);
    sets[t.tail].insert(t.relation);
  }
  std::vector<std::vector<std::uint32_t>> out(kg.n_entities);
  for (std::size_t i = 0; i < kg.n_entities; ++i) out[i].assign(sets[i].begin(), sets[i].end());
  return out;
}

std::vector<SeedPair> AlignmentSeedSet::select(const std::vector<std::size_t>& idx) const {
  std::vector<SeedPair> out;
  out.reserve(idx.size());
  for (std::size_t k : idx) out.push_back(pairs.at(k));
  return out;
}

void AlignmentSeedSet::validate(std::size_t n_source, std::size_t n_target) const {
  std::vector<std::uint8_t> seen(pairs.size(), 0);
  for (const auto* part : {&train_idx, &valid_idx, &test_idx}) {
    for (std::size_t k : *part) {
      if (k >= pairs.size() || seen[k]) throw DataError("seed partitions overlap or reference a missing pair");
      seen[k] = 1;
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw DataError("seed partitions do not cover all pairs");
  std::set<EntityId> src, tgt;
  for (const SeedPair& p : pairs) {
    if (p.source >= n_source || p.target >= n_target) throw DataError("seed pair references an unknown entity");
    if (!src.insert(p.source).second || !tgt.insert(p.target).second) {
      throw DataError("entity appears twice on one side of the seed pairs");
    }
  }
}

AlignmentSeedSet split_seeds(std::vector<SeedPair> pairs, double train_ratio, double valid_ratio,
                             std::uint64_t seed) {
  auto bad = [](double r) { return !(r >= 0.0 && r <= 1.0); };
  if (bad(train_ratio) || bad(valid_ratio) || train_ratio + valid_ratio > 1.0 + 1e-12) {
    throw ConfigError("seed split ratios must lie in [0,1] and sum to at most 1");
  }
  AlignmentSeedSet out;
  out.pairs = std::move(pairs);
  std::vector<std::size_t> order(out.pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const double n = static_cast<double>(order.size());
  const auto n_train = static_cast<std::size_t>(std::floor(train_ratio * n + 1e-9));
  const auto n_valid = std::min(order.size() - n_train, static_cast<std::size_t>(std::floor(valid_ratio * n + 1e-9)));
  out.train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.valid_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                       order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  out.test_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), order.end());
  return out;
}

namespace {

const std::vector<std::vector<std::uint32_t>>& bag_items(const MultiModalKG& kg, BagKind kind) {
  return kind == BagKind::Relation ? kg.rel_items : kg.attr_items;
}

}  // namespace

BagVocabulary build_bag_vocabulary(std::span<const MultiModalKG* const> kgs, BagKind kind, std::size_t cap) {
  std::map<std::uint32_t, std::size_t> freq;
  std::uint32_t max_item = 0;
  for (const MultiModalKG* kg : kgs) {
    for (const auto& bag : bag_items(*kg, kind)) {
      for (auto item : bag) {
        ++freq[item];
        max_item = std::max(max_item, item);
      }
    }
  }
  std::vector<std::pair<std::uint32_t, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > cap) ranked.resize(cap);
  // Columns keep ascending item order among the retained items.
  std::sort(ranked.begin(), ranked.end());
  BagVocabulary vocab;
  vocab.column_of.assign(freq.empty() ? 0 : max_item + 1, -1);
  for (const auto& [item, count] : ranked) {
    vocab.column_of[item] = static_cast<std::int64_t>(vocab.items.size());
    vocab.items.push_back(item);
  }
  return vocab;
}

Matrix build_bag_features(const MultiModalKG& kg, BagKind kind, const BagVocabulary& vocab) {
  const auto& bags = bag_items(kg, kind);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(kg.n_entities), static_cast<Eigen::Index>(vocab.size()));
  for (std::size_t i = 0; i < bags.size(); ++i) {
    for (auto item : bags[i]) {
      if (item < vocab.column_of.size() && vocab.column_of[item] >= 0) {
        out(static_cast<Eigen::Index>(i), vocab.column_of[item]) = 1.0;
      }
    }
  }
  return out;
}

Matrix build_bag_features(const MultiModalKG& kg, BagKind kind, std::size_t cap) {
  const MultiModalKG* one[] = {&kg};
  return build_bag_features(kg, kind, build_bag_vocabulary(one, kind, cap));
}

// ---------------------------------------------------------------------------
// File layout

namespace {

constexpr char kImageMagic[] = {'P', 'M', 'F', 'V', '1'};

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::uint32_t parse_id(const std::string& field, const fs::path& file, std::size_t line) {
  std::uint32_t v = 0;
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw DataError(file.filename().string() + ":" + std::to_string(line) + ": bad integer '" + field + "'");
  }
  return v;
}

std::ifstream open_input(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  return in;
}

template <typename Fn>
void for_each_record(const fs::path& path, Fn&& fn) {
  std::ifstream in = open_input(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fn(split(line, '\t'), lineno);
  }
}

std::vector<Triple> read_triples(const fs::path& path, std::size_t n_entities) {
  std::vector<Triple> out;
  for_each_record(path, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f.size() != 3) {
      throw DataError(path.filename().string() + ":" + std::to_string(line) + ": expected 3 fields");
    }
    Triple t{parse_id(f[0], path, line), parse_id(f[1], path, line), parse_id(f[2], path, line)};
    if (t.head >= n_entities || t.tail >= n_entities) {
      throw DataError(path.filename().string() + ":" + std::to_string(line) + ": entity id out of range [0, " +
                      std::to_string(n_entities) + ")");
    }
    out.push_back(t);
  });
  return out;
}

std::vector<std::vector<std::uint32_t>> read_bags(const fs::path& path, std::size_t n_entities) {
  std::vector<std::vector<std::uint32_t>> out(n_entities);
  std::vector<std::uint8_t> seen(n_entities, 0);
  for_each_record(path, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f.size() > 2) {
      throw DataError(path.filename().string() + ":" + std::to_string(line) + ": expected 2 fields");
    }
    const auto id = parse_id(f[0], path, line);
    if (id >= n_entities) {
      throw DataError(path.filename().string() + ":" + std::to_string(line) + ": entity id out of range [0, " +
                      std::to_string(n_entities) + ")");
    }
    if (seen[id]) throw DataError(path.filename().string() + ":" + std::to_string(line) + ": duplicate entity");
    seen[id] = 1;
    if (f.size() == 2 && !f[1].empty()) {
      for (const auto& item : split(f[1], ',')) out[id].push_back(parse_id(item, path, line));
    }
    std::sort(out[id].begin(), out[id].end());
    out[id].erase(std::unique(out[id].begin(), out[id].end()), out[id].end());
  });
  return out;
}

std::uint32_t max_item_plus_one(const std::vector<std::vector<std::uint32_t>>& bags) {
  std::uint32_t m = 0;
  for (const auto& b : bags) {
    for (auto x : b) m = std::max(m, x + 1);
  }
  return m;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path.string());
  out << content;
  if (!out) throw DataError("write failed: " + path.string());
}

std::string format_triples(const std::vector<Triple>& triples) {
  std::vector<Triple> sorted = triples;
  std::sort(sorted.begin(), sorted.end(), [](const Triple& a, const Triple& b) {
    return std::tie(a.head, a.relation, a.tail) < std::tie(b.head, b.relation, b.tail);
  });
  std::ostringstream os;
  for (const Triple& t : sorted) os << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  return os.str();
}

std::string format_bags(const std::vector<std::vector<std::uint32_t>>& bags) {
  std::ostringstream os;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    os << i << '\t';
    for (std::size_t k = 0; k < bags[i].size(); ++k) os << (k ? "," : "") << bags[i][k];
    os << '\n';
  }
  return os.str();
}

}  // namespace

Matrix read_image_file(const fs::path& path) {
  std::ifstream in = open_input(path);
  char magic[sizeof(kImageMagic)];
  std::uint32_t header[2] = {0, 0};
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, kImageMagic, sizeof(kImageMagic)) != 0) {
    throw DataError(path.filename().string() + ": bad image file header");
  }
  const std::size_t n = header[0];
  const std::size_t d = header[1];
  std::vector<float> buf(n * d);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw DataError(path.filename().string() + ": truncated image payload");
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError(path.filename().string() + ": payload size does not match header dimensions");
  }
  Matrix rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < buf.size(); ++k) rows.data()[k] = static_cast<double>(buf[k]);
  return rows;
}

void write_image_file(const fs::path& path, const Matrix& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path.string());
  const std::uint32_t header[2] = {static_cast<std::uint32_t>(rows.rows()), static_cast<std::uint32_t>(rows.cols())};
  out.write(kImageMagic, sizeof(kImageMagic));
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> buf(static_cast<std::size_t>(rows.size()));
  for (std::size_t k = 0; k < buf.size(); ++k) buf[k] = static_cast<float>(rows.data()[k]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw DataError("write failed: " + path.string());
}

KgPair load_kg_pair(const fs::path& dir, std::string_view layout) {
  if (layout != "pmf") throw ConfigError("unsupported dataset layout '" + std::string(layout) + "'");
  KgPair pair;
  MultiModalKG* sides[] = {&pair.source, &pair.target};
  for (int s = 0; s < 2; ++s) {
    const std::string suffix = "_" + std::to_string(s + 1);
    MultiModalKG& kg = *sides[s];
    kg.name = "kg" + std::to_string(s + 1);
    kg.image_features = read_image_file(dir / ("img_features" + suffix + ".bin"));
    kg.n_entities = static_cast<std::size_t>(kg.image_features.rows());
    kg.has_image.resize(kg.n_entities);
    for (std::size_t i = 0; i < kg.n_entities; ++i) {
      kg.has_image[i] = kg.image_features.row(static_cast<Eigen::Index>(i)).isZero(0.0) ? 0 : 1;
    }
    kg.triples = read_triples(dir / ("triples" + suffix + ".tsv"), kg.n_entities);
    kg.rel_items = read_bags(dir / ("rel_bags" + suffix + ".tsv"), kg.n_entities);
    kg.attr_items = read_bags(dir / ("attr_bags" + suffix + ".tsv"), kg.n_entities);
  }
  if (pair.source.image_dim() != pair.target.image_dim()) {
    throw DataError("image feature dimension mismatch: " + std::to_string(pair.source.image_dim()) + " vs " +
                    std::to_string(pair.target.image_dim()));
  }
  std::size_t n_rel = 0;
  std::size_t n_attr = 0;
  for (const MultiModalKG* kg : sides) {
    for (const Triple& t : kg->triples) n_rel = std::max<std::size_t>(n_rel, t.relation + 1);
    n_rel = std::max<std::size_t>(n_rel, max_item_plus_one(kg->rel_items));
    n_attr = std::max<std::size_t>(n_attr, max_item_plus_one(kg->attr_items));
  }
  for (MultiModalKG* kg : sides) {
    kg->n_relations = n_rel;
    kg->n_attributes = n_attr;
    kg->validate();
  }

  const fs::path seeds_path = dir / "seeds.tsv";
  for_each_record(seeds_path, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f.size() != 2) throw DataError("seeds.tsv:" + std::to_string(line) + ": expected 2 fields");
    SeedPair p{parse_id(f[0], seeds_path, line), parse_id(f[1], seeds_path, line)};
    if (p.source >= pair.source.n_entities || p.target >= pair.target.n_entities) {
      throw DataError("seeds.tsv:" + std::to_string(line) + ": entity id out of range");
    }
    pair.seeds.pairs.push_back(p);
  });
  pair.seeds.test_idx.resize(pair.seeds.pairs.size());
  std::iota(pair.seeds.test_idx.begin(), pair.seeds.test_idx.end(), std::size_t{0});
  pair.seeds.validate(pair.source.n_entities, pair.target.n_entities);
  return pair;
}

void write_kg_pair(const fs::path& dir, const MultiModalKG& source, const MultiModalKG& target,
                   const std::vector<SeedPair>& pairs) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
  const MultiModalKG* sides[] = {&source, &target};
  for (int s = 0; s < 2; ++s) {
    const std::string suffix = "_" + std::to_string(s + 1);
    write_text(dir / ("triples" + suffix + ".tsv"), format_triples(sides[s]->triples));
    write_text(dir / ("rel_bags" + suffix + ".tsv"), format_bags(sides[s]->rel_items));
    write_text(dir / ("attr_bags" + suffix + ".tsv"), format_bags(sides[s]->attr_items));
    write_image_file(dir / ("img_features" + suffix + ".bin"), sides[s]->image_features);
  }
  std::ostringstream os;
  for (const SeedPair& p : pairs) os << p.source << '\t' << p.target << '\n';
  write_text(dir / "seeds.tsv", os.str());
}

void write_corruption_labels(const fs::path& path, const CorruptionLabels& labels) {
  std::ostringstream os;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (Modality m : kAllModalities) {
      os << i << '\t' << modality_name(m) << '\t' << int(labels[i][static_cast<std::size_t>(m)]) << '\n';
    }
  }
  write_text(path, os.str());
}

CorruptionLabels read_corruption_labels(const fs::path& path, std::size_t n_entities) {
  CorruptionLabels labels(n_entities, {0, 0, 0, 0});
  for_each_record(path, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f.size() != 3) throw DataError("corruption.tsv:" + std::to_string(line) + ": expected 3 fields");
    const auto id = parse_id(f[0], path, line);
    if (id >= n_entities) throw DataError("corruption.tsv:" + std::to_string(line) + ": entity id out of range");
    const auto flag = parse_id(f[2], path, line);
    if (flag > 1) throw DataError("corruption.tsv:" + std::to_string(line) + ": flag must be 0 or 1");
    labels[id][static_cast<std::size_t>(parse_modality(f[1]))] = static_cast<std::uint8_t>(flag);
  });
  return labels;
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SyntheticSpec::validate() const {
  if (n_entities < 2) throw ConfigError("synthetic spec: n_entities must be at least 2");
  if (n_relations < 1 || n_attributes < 1 || image_dim < 1) {
    throw ConfigError("synthetic spec: vocabulary sizes and image_dim must be positive");
  }
  auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  for (double r : corrupt_rate) {
    if (!rate_ok(r)) throw ConfigError("synthetic spec: corruption rates must lie in [0,1]");
  }
  if (!rate_ok(missing_image_rate) || !rate_ok(structure_noise) || !rate_ok(attribute_noise)) {
    throw ConfigError("synthetic spec: rates must lie in [0,1]");
  }
  if (!(feature_noise >= 0.0) || !(triple_density >= 0.0)) {
    throw ConfigError("synthetic spec: feature_noise and triple_density must be non-negative");
  }
  if (attributes_per_entity > n_attributes) {
    throw ConfigError("synthetic spec: attributes_per_entity exceeds n_attributes");
  }
}

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  std::uint32_t below(std::size_t n) {
    return static_cast<std::uint32_t>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_));
  }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
  double normal() { return normal_(rng_); }

  // k distinct items from [0, n), sorted.
  std::vector<std::uint32_t> distinct(std::size_t k, std::size_t n) {
    std::set<std::uint32_t> s;
    while (s.size() < k) s.insert(below(n));
    return {s.begin(), s.end()};
  }

  // Exactly floor(rate * n) flagged entities.
  std::vector<std::uint8_t> flags(double rate, std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    const auto k = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
    std::vector<std::uint8_t> out(n, 0);
    for (std::size_t i = 0; i < k; ++i) out[order[i]] = 1;
    return out;
  }

  Eigen::RowVectorXd image_row(std::size_t d) {
    Eigen::RowVectorXd v(static_cast<Eigen::Index>(d));
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = normal() * s;
    return v;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

Triple random_triple(Sampler& rng, std::size_t n, std::size_t n_rel) {
  const auto h = rng.below(n);
  auto t = rng.below(n - 1);
  if (t >= h) ++t;
  return Triple{h, rng.below(n_rel), t};
}

// Round to float32 so in-memory values match what the image files store.
void round_to_float(Matrix& m) {
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<double>(static_cast<float>(m.data()[k]));
}

}  // namespace

SyntheticPair generate_synthetic_pair(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n_entities;
  const std::size_t d = spec.image_dim;
  Sampler rng(spec.seed);
  SyntheticPair out;
  MultiModalKG& src = out.source;
  MultiModalKG& tgt = out.target;
  src.name = "kg1";
  tgt.name = "kg2";
  for (MultiModalKG* kg : {&src, &tgt}) {
    kg->n_entities = n;
    kg->n_relations = spec.n_relations;
    kg->n_attributes = spec.n_attributes;
  }

  // Corruption flags are drawn first so their count is independent of the
  // rest of the generation.
  std::array<std::vector<std::uint8_t>, 4> corrupted;
  for (Modality m : kAllModalities) {
    corrupted[static_cast<std::size_t>(m)] = rng.flags(spec.corrupt_rate[static_cast<std::size_t>(m)], n);
  }
  const auto& str_bad = corrupted[static_cast<std::size_t>(Modality::Structure)];
  const auto& rel_bad = corrupted[static_cast<std::size_t>(Modality::Relation)];
  const auto& attr_bad = corrupted[static_cast<std::size_t>(Modality::Attribute)];
  const auto& img_bad = corrupted[static_cast<std::size_t>(Modality::Image)];

  // Structure.
  const auto n_triples = static_cast<std::size_t>(std::llround(spec.triple_density * static_cast<double>(n)));
  for (std::size_t k = 0; k < n_triples; ++k) src.triples.push_back(random_triple(rng, n, spec.n_relations));
  for (const Triple& t : src.triples) {
    Triple copy = t;
    if (rng.uniform() < spec.structure_noise) copy = random_triple(rng, n, spec.n_relations);
    if (str_bad[copy.head] || str_bad[copy.tail]) {
      // Rewire the non-corrupted endpoint so the entity's neighbourhood is unrelated.
      const Triple r = random_triple(rng, n, spec.n_relations);
      if (str_bad[copy.head]) copy.tail = r.tail == copy.head ? r.head : r.tail;
      else copy.head = r.head == copy.tail ? r.tail : r.head;
    }
    tgt.triples.push_back(copy);
  }

  // Relation bags follow the triples, except for relation-corrupted entities.
  src.rel_items = relation_items_from_triples(src);
  tgt.rel_items = relation_items_from_triples(tgt);
  for (std::size_t i = 0; i < n; ++i) {
    if (rel_bad[i]) {
      const std::size_t k = std::max<std::size_t>(1, std::min(tgt.rel_items[i].size(), spec.n_relations));
      tgt.rel_items[i] = rng.distinct(k, spec.n_relations);
    }
  }

  // Attribute bags.
  const std::size_t apm = spec.attributes_per_entity;
  src.attr_items.resize(n);
  tgt.attr_items.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = std::max<std::size_t>(1, apm / 2);
    const std::size_t hi = std::min(spec.n_attributes, std::max(lo, apm + apm / 2));
    const std::size_t k = lo + rng.below(hi - lo + 1);
    src.attr_items[i] = rng.distinct(k, spec.n_attributes);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (attr_bad[i]) {
      tgt.attr_items[i] = rng.distinct(src.attr_items[i].size(), spec.n_attributes);
      continue;
    }
    std::set<std::uint32_t> items;
    for (auto a : src.attr_items[i]) items.insert(rng.uniform() < spec.attribute_noise ? rng.below(spec.n_attributes) : a);
    tgt.attr_items[i].assign(items.begin(), items.end());
  }

  // Images.
  src.image_features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) src.image_features.row(static_cast<Eigen::Index>(i)) = rng.image_row(d);
  const double mean_norm = src.image_features.rowwise().norm().mean();
  tgt.image_features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    if (img_bad[i]) {
      tgt.image_features.row(row) = rng.image_row(d);
    } else {
      tgt.image_features.row(row) = src.image_features.row(row) + rng.image_row(d) * (spec.feature_noise * mean_norm);
    }
  }
  const auto src_missing = rng.flags(spec.missing_image_rate, n);
  const auto tgt_missing = rng.flags(spec.missing_image_rate, n);
  src.has_image.assign(n, 1);
  tgt.has_image.assign(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (src_missing[i]) {
      src.has_image[i] = 0;
      src.image_features.row(static_cast<Eigen::Index>(i)).setZero();
    }
    if (tgt_missing[i]) {
      tgt.has_image[i] = 0;
      tgt.image_features.row(static_cast<Eigen::Index>(i)).setZero();
    }
  }
  round_to_float(src.image_features);
  round_to_float(tgt.image_features);

  out.pairs.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.pairs[i] = {static_cast<EntityId>(i), static_cast<EntityId>(i)};
  out.corruption.assign(n, {0, 0, 0, 0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < 4; ++m) out.corruption[i][m] = corrupted[m][i];
  }
  src.validate();
  tgt.validate();
  return out;
}

}  // namespace pmf
