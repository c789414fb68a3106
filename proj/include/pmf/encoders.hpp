#pragma once

// Per-modality entity encoders: a graph attention network over a learned base
// embedding table for structure, and single dense layers for relation bags,
// attribute bags and image vectors.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmf/diff.hpp"
#include "pmf/mmkg.hpp"

namespace pmf {

using diff::DiffTensor;
using diff::Tape;
using diff::Var;

enum class Side : std::uint8_t { Source = 0, Target = 1 };

struct GatLayer {
  DiffTensor weight;    // d x d
  DiffTensor attn_src;  // d x 1, scores the receiving node
  DiffTensor attn_dst;  // d x 1, scores the neighbour
};

struct StructureEncoder {
  // Learned base embeddings, one table per KG (n_side x d).
  std::array<DiffTensor, 2> base;
  std::vector<GatLayer> layers;
  double leaky_slope = 0.2;
};

struct DenseEncoder {
  DiffTensor weight;  // k x d
  // Absent for the image encoder so an all-zero input maps to a zero row.
  std::optional<DiffTensor> bias;  // 1 x d
};

struct EncoderConfig {
  std::size_t hidden_dim = 300;
  std::size_t gat_layers = 2;
  double leaky_slope = 0.2;
  std::vector<Modality> modalities = {kAllModalities.begin(), kAllModalities.end()};
};

// Raw per-entity inputs for one KG, already vectorised.
struct ModalityInputs {
  Matrix adjacency;
  Matrix rel_bags;
  Matrix attr_bags;
  Matrix images;
};

// Builds inputs for both KGs with bag vocabularies shared across the pair.
std::array<ModalityInputs, 2> prepare_inputs(const MultiModalKG& source, const MultiModalKG& target,
                                             std::size_t bag_cap = 1000);

class EncoderParams {
 public:
  EncoderParams() = default;
  // Xavier-uniform weights, zero biases.
  static EncoderParams initialize(const EncoderConfig& config, std::array<std::size_t, 2> n_entities,
                                  std::size_t rel_dim, std::size_t attr_dim, std::size_t image_dim,
                                  std::uint64_t seed);

  [[nodiscard]] std::size_t hidden_dim() const { return hidden_dim_; }
  [[nodiscard]] const std::vector<Modality>& modalities() const { return modalities_; }
  [[nodiscard]] bool has(Modality m) const;

  StructureEncoder& structure();
  [[nodiscard]] const StructureEncoder& structure() const;
  DenseEncoder& dense(Modality m);
  [[nodiscard]] const DenseEncoder& dense(Modality m) const;

  // Every trainable tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, DiffTensor*>> named_tensors();
  // Tensors belonging to one modality's encoder.
  std::vector<DiffTensor*> tensors_of(Modality m);

  void zero_grad();

  // Named matrices for checkpointing, including a "meta" section.
  [[nodiscard]] std::vector<std::pair<std::string, Matrix>> to_sections() const;
  static EncoderParams from_sections(const std::map<std::string, Matrix>& sections);

 private:
  std::size_t hidden_dim_ = 0;
  std::vector<Modality> modalities_;
  std::optional<StructureEncoder> structure_;
  std::map<Modality, DenseEncoder> dense_;
};

// Attention coefficients of one GAT layer (n x n, rows sum to 1 over the
// neighbourhood) computed off-tape, for inspection and tests.
Matrix gat_attention(const Matrix& features, const GatLayer& layer, const Matrix& adjacency, double slope);

Var encode_structure(Tape& tape, const Matrix& adjacency, StructureEncoder& enc, Side side);
Var encode_dense(Tape& tape, const Matrix& features, DenseEncoder& enc);

// One embedding per configured modality, in kAllModalities order.
using ModalityEmbeddings = std::map<Modality, Var>;

// Encodes `modalities` (all of the params' modalities when empty). Throws
// ConfigError when a requested modality has no parameters.
ModalityEmbeddings encode_all(Tape& tape, const ModalityInputs& inputs, EncoderParams& params, Side side,
                              std::span<const Modality> modalities = {});

// Off-tape forward pass (values only).
std::map<Modality, Matrix> encode_values(const ModalityInputs& inputs, EncoderParams& params, Side side);

}  // namespace pmf
