#pragma once

// Multi-modal knowledge graph data model, on-disk layout, seed splitting and a
// synthetic paired-KG generator with controlled per-modality corruption.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pmf/diff.hpp"

namespace pmf {

using diff::Matrix;
using diff::Vector;
using EntityId = std::uint32_t;

enum class Modality : std::uint8_t { Structure = 0, Relation = 1, Attribute = 2, Image = 3 };

// Fixed order used for concatenation, logging and file layouts.
inline constexpr std::array<Modality, 4> kAllModalities = {Modality::Structure, Modality::Relation,
                                                          Modality::Attribute, Modality::Image};

std::string_view modality_name(Modality m);
// Accepts "str", "rel", "attr", "img". Throws ConfigError otherwise.
Modality parse_modality(std::string_view name);

struct Triple {
  EntityId head = 0;
  std::uint32_t relation = 0;
  EntityId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
};

// One knowledge graph with its per-entity raw modality features.
//
// Relation and attribute bags are kept as sorted item-id lists per entity,
// the sparse form of the multi-hot rows produced by build_bag_features().
// Rows of `image_features` for entities without an image are zero.
struct MultiModalKG {
  std::string name;
  std::size_t n_entities = 0;
  std::size_t n_relations = 0;
  std::size_t n_attributes = 0;
  std::vector<Triple> triples;
  std::vector<std::vector<std::uint32_t>> rel_items;
  std::vector<std::vector<std::uint32_t>> attr_items;
  Matrix image_features;
  std::vector<std::uint8_t> has_image;

  [[nodiscard]] std::size_t image_dim() const { return static_cast<std::size_t>(image_features.cols()); }

  // Throws DataError if any invariant is broken.
  void validate() const;
};

// Symmetric, self-looped, unlabeled 0/1 adjacency.
Matrix build_adjacency(const MultiModalKG& kg);

// Relation items per entity derived from the triples it occurs in.
std::vector<std::vector<std::uint32_t>> relation_items_from_triples(const MultiModalKG& kg);

struct SeedPair {
  EntityId source = 0;
  EntityId target = 0;

  friend bool operator==(const SeedPair&, const SeedPair&) = default;
  friend auto operator<=>(const SeedPair&, const SeedPair&) = default;
};

// Seed pairs with a disjoint train/validation/test partition of pair indices.
struct AlignmentSeedSet {
  std::vector<SeedPair> pairs;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> valid_idx;
  std::vector<std::size_t> test_idx;

  [[nodiscard]] std::vector<SeedPair> select(const std::vector<std::size_t>& idx) const;
  [[nodiscard]] std::vector<SeedPair> train() const { return select(train_idx); }
  [[nodiscard]] std::vector<SeedPair> valid() const { return select(valid_idx); }
  [[nodiscard]] std::vector<SeedPair> test() const { return select(test_idx); }

  void validate(std::size_t n_source, std::size_t n_target) const;
};

// Deterministic shuffle then |train| = floor(train_ratio * n),
// |valid| = floor(valid_ratio * n), the rest is test.
AlignmentSeedSet split_seeds(std::vector<SeedPair> pairs, double train_ratio, double valid_ratio,
                             std::uint64_t seed);

enum class BagKind : std::uint8_t { Relation, Attribute };

// Maps raw item ids to matrix columns; at most `cap` items, most frequent first.
struct BagVocabulary {
  std::vector<std::uint32_t> items;
  std::vector<std::int64_t> column_of;
  [[nodiscard]] std::size_t size() const { return items.size(); }
};

// Vocabulary over the union of the given graphs (shared across a KG pair).
// Ties in frequency break by ascending item id.
BagVocabulary build_bag_vocabulary(std::span<const MultiModalKG* const> kgs, BagKind kind,
                                   std::size_t cap = 1000);

Matrix build_bag_features(const MultiModalKG& kg, BagKind kind, const BagVocabulary& vocab);
// Single-graph convenience: vocabulary built from `kg` alone.
Matrix build_bag_features(const MultiModalKG& kg, BagKind kind, std::size_t cap = 1000);

struct KgPair {
  MultiModalKG source;
  MultiModalKG target;
  AlignmentSeedSet seeds;
};

// Reads the tab-separated directory layout ("pmf" is the only layout id).
// Entity counts come from the image files, which hold one row per entity;
// an all-zero row marks a missing image. Seeds come back unsplit (every pair
// index in test_idx); call split_seeds() for a partition.
KgPair load_kg_pair(const std::filesystem::path& dir, std::string_view layout = "pmf");

// Writes the canonical layout (sorted records, one per line).
void write_kg_pair(const std::filesystem::path& dir, const MultiModalKG& source,
                   const MultiModalKG& target, const std::vector<SeedPair>& pairs);

// Image file: "PMFV1", u32 n, u32 d, then n*d little-endian float32, row-major.
Matrix read_image_file(const std::filesystem::path& path);
void write_image_file(const std::filesystem::path& path, const Matrix& rows);

struct SyntheticSpec {
  std::size_t n_entities = 300;
  std::size_t n_relations = 40;
  std::size_t n_attributes = 120;
  double triple_density = 3.0;
  std::size_t image_dim = 64;
  // Indexed by Modality.
  std::array<double, 4> corrupt_rate = {0.0, 0.0, 0.0, 0.0};
  double missing_image_rate = 0.0;
  // Additive spherical noise on target image rows, relative to mean row norm.
  double feature_noise = 0.1;
  // Fraction of source triples dropped (and replaced by random ones) in the target.
  double structure_noise = 0.4;
  // Probability that an attribute item is replaced in the target copy.
  double attribute_noise = 0.7;
  std::size_t attributes_per_entity = 6;
  std::uint64_t seed = 0;

  void validate() const;
};

// Ground-truth corruption flags, [entity][modality].
using CorruptionLabels = std::vector<std::array<std::uint8_t, 4>>;

struct SyntheticPair {
  MultiModalKG source;
  MultiModalKG target;
  std::vector<SeedPair> pairs;
  CorruptionLabels corruption;
};

// Entity i of the source aligns to entity i of the target. Exactly
// floor(rate * n) entities are corrupted per modality.
SyntheticPair generate_synthetic_pair(const SyntheticSpec& spec);

void write_corruption_labels(const std::filesystem::path& path, const CorruptionLabels& labels);
CorruptionLabels read_corruption_labels(const std::filesystem::path& path, std::size_t n_entities);

}  // namespace pmf
