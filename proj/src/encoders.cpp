#include "pmf/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "pmf/errors.hpp"

namespace pmf {

namespace {

DiffTensor xavier(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return DiffTensor(std::move(m));
}

}  // namespace

std::array<ModalityInputs, 2> prepare_inputs(const MultiModalKG& source, const MultiModalKG& target,
                                             std::size_t bag_cap) {
  const MultiModalKG* both[] = {&source, &target};
  const BagVocabulary rel_vocab = build_bag_vocabulary(both, BagKind::Relation, bag_cap);
  const BagVocabulary attr_vocab = build_bag_vocabulary(both, BagKind::Attribute, bag_cap);
  std::array<ModalityInputs, 2> out;
  for (std::size_t s = 0; s < 2; ++s) {
    out[s].adjacency = build_adjacency(*both[s]);
    out[s].rel_bags = build_bag_features(*both[s], BagKind::Relation, rel_vocab);
    out[s].attr_bags = build_bag_features(*both[s], BagKind::Attribute, attr_vocab);
    out[s].images = both[s]->image_features;
  }
  return out;
}

EncoderParams EncoderParams::initialize(const EncoderConfig& config, std::array<std::size_t, 2> n_entities,
                                        std::size_t rel_dim, std::size_t attr_dim, std::size_t image_dim,
                                        std::uint64_t seed) {
  if (config.hidden_dim == 0) throw ConfigError("hidden_dim must be positive");
  if (config.modalities.empty()) throw ConfigError("at least one modality is required");
  std::mt19937_64 rng(seed);
  const std::size_t d = config.hidden_dim;
  EncoderParams p;
  p.hidden_dim_ = d;
  for (Modality m : kAllModalities) {
    if (std::find(config.modalities.begin(), config.modalities.end(), m) == config.modalities.end()) continue;
    p.modalities_.push_back(m);
    switch (m) {
      case Modality::Structure: {
        StructureEncoder enc;
        enc.leaky_slope = config.leaky_slope;
        enc.base[0] = xavier(n_entities[0], d, rng);
        enc.base[1] = xavier(n_entities[1], d, rng);
        for (std::size_t l = 0; l < config.gat_layers; ++l) {
          GatLayer layer{xavier(d, d, rng), xavier(d, 1, rng), xavier(d, 1, rng)};
          enc.layers.push_back(std::move(layer));
        }
        p.structure_ = std::move(enc);
        break;
      }
      case Modality::Relation:
      case Modality::Attribute: {
        const std::size_t k = m == Modality::Relation ? rel_dim : attr_dim;
        DenseEncoder enc{xavier(k, d, rng), DiffTensor(Matrix::Zero(1, static_cast<Eigen::Index>(d)))};
        p.dense_.emplace(m, std::move(enc));
        break;
      }
      case Modality::Image: {
        DenseEncoder enc{xavier(image_dim, d, rng), std::nullopt};
        p.dense_.emplace(m, std::move(enc));
        break;
      }
    }
  }
  return p;
}

bool EncoderParams::has(Modality m) const {
  return std::find(modalities_.begin(), modalities_.end(), m) != modalities_.end();
}

StructureEncoder& EncoderParams::structure() {
  if (!structure_) throw ConfigError("structure encoder not configured");
  return *structure_;
}

const StructureEncoder& EncoderParams::structure() const {
  if (!structure_) throw ConfigError("structure encoder not configured");
  return *structure_;
}

DenseEncoder& EncoderParams::dense(Modality m) {
  auto it = dense_.find(m);
  if (it == dense_.end()) throw ConfigError("no encoder configured for modality " + std::string(modality_name(m)));
  return it->second;
}

const DenseEncoder& EncoderParams::dense(Modality m) const {
  auto it = dense_.find(m);
  if (it == dense_.end()) throw ConfigError("no encoder configured for modality " + std::string(modality_name(m)));
  return it->second;
}

std::vector<DiffTensor*> EncoderParams::tensors_of(Modality m) {
  std::vector<DiffTensor*> out;
  if (!has(m)) return out;
  if (m == Modality::Structure) {
    auto& s = structure();
    out.push_back(&s.base[0]);
    out.push_back(&s.base[1]);
    for (auto& l : s.layers) {
      out.push_back(&l.weight);
      out.push_back(&l.attn_src);
      out.push_back(&l.attn_dst);
    }
  } else {
    auto& e = dense(m);
    out.push_back(&e.weight);
    if (e.bias) out.push_back(&*e.bias);
  }
  return out;
}

std::vector<std::pair<std::string, DiffTensor*>> EncoderParams::named_tensors() {
  std::vector<std::pair<std::string, DiffTensor*>> out;
  for (Modality m : modalities_) {
    const std::string prefix(modality_name(m));
    if (m == Modality::Structure) {
      auto& s = structure();
      out.emplace_back("str/base1", &s.base[0]);
      out.emplace_back("str/base2", &s.base[1]);
      for (std::size_t l = 0; l < s.layers.size(); ++l) {
        const std::string lp = "str/gat" + std::to_string(l);
        out.emplace_back(lp + "/weight", &s.layers[l].weight);
        out.emplace_back(lp + "/attn_src", &s.layers[l].attn_src);
        out.emplace_back(lp + "/attn_dst", &s.layers[l].attn_dst);
      }
    } else {
      auto& e = dense(m);
      out.emplace_back(prefix + "/weight", &e.weight);
      if (e.bias) out.emplace_back(prefix + "/bias", &*e.bias);
    }
  }
  return out;
}

void EncoderParams::zero_grad() {
  for (auto& [name, t] : named_tensors()) t->zero_grad();
}

std::vector<std::pair<std::string, Matrix>> EncoderParams::to_sections() const {
  // named_tensors() only hands out pointers; the values are not modified.
  auto& self = const_cast<EncoderParams&>(*this);
  Matrix meta(1, 7);
  meta << static_cast<double>(hidden_dim_), has(Modality::Structure) ? 1.0 : 0.0, has(Modality::Relation) ? 1.0 : 0.0,
      has(Modality::Attribute) ? 1.0 : 0.0, has(Modality::Image) ? 1.0 : 0.0,
      structure_ ? static_cast<double>(structure_->layers.size()) : 0.0, structure_ ? structure_->leaky_slope : 0.0;
  std::vector<std::pair<std::string, Matrix>> out;
  out.emplace_back("meta", meta);
  for (auto& [name, t] : self.named_tensors()) out.emplace_back(name, t->values);
  return out;
}

EncoderParams EncoderParams::from_sections(const std::map<std::string, Matrix>& sections) {
  auto get = [&](const std::string& name) -> const Matrix& {
    auto it = sections.find(name);
    if (it == sections.end()) throw DataError("checkpoint is missing section '" + name + "'");
    return it->second;
  };
  const Matrix& meta = get("meta");
  if (meta.rows() != 1 || meta.cols() != 7) throw DataError("checkpoint meta section malformed");
  EncoderParams p;
  p.hidden_dim_ = static_cast<std::size_t>(meta(0, 0));
  for (std::size_t k = 0; k < 4; ++k) {
    if (meta(0, static_cast<Eigen::Index>(k + 1)) != 0.0) p.modalities_.push_back(kAllModalities[k]);
  }
  for (Modality m : p.modalities_) {
    const std::string prefix(modality_name(m));
    if (m == Modality::Structure) {
      StructureEncoder s;
      s.leaky_slope = meta(0, 6);
      s.base[0] = DiffTensor(get("str/base1"));
      s.base[1] = DiffTensor(get("str/base2"));
      const auto layers = static_cast<std::size_t>(meta(0, 5));
      for (std::size_t l = 0; l < layers; ++l) {
        const std::string lp = "str/gat" + std::to_string(l);
        s.layers.push_back(
            GatLayer{DiffTensor(get(lp + "/weight")), DiffTensor(get(lp + "/attn_src")), DiffTensor(get(lp + "/attn_dst"))});
      }
      p.structure_ = std::move(s);
    } else {
      DenseEncoder e{DiffTensor(get(prefix + "/weight")), std::nullopt};
      if (m != Modality::Image) e.bias = DiffTensor(get(prefix + "/bias"));
      p.dense_.emplace(m, std::move(e));
    }
  }
  return p;
}

Matrix gat_attention(const Matrix& features, const GatLayer& layer, const Matrix& adjacency, double slope) {
  const Matrix z = features * layer.weight.values;
  const Matrix s = z * layer.attn_src.values;
  const Matrix t = z * layer.attn_dst.values;
  const Eigen::Index n = features.rows();
  Matrix att = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (adjacency(i, j) == 0.0) continue;
      double e = s(i, 0) + t(j, 0);
      e = e > 0.0 ? e : slope * e;
      att(i, j) = e;
      mx = std::max(mx, e);
    }
    double z_sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (adjacency(i, j) == 0.0) continue;
      att(i, j) = std::exp(att(i, j) - mx);
      z_sum += att(i, j);
    }
    att.row(i) /= z_sum;
  }
  return att;
}

Var encode_structure(Tape& tape, const Matrix& adjacency, StructureEncoder& enc, Side side) {
  DiffTensor& base = enc.base[static_cast<std::size_t>(side)];
  if (adjacency.rows() != base.rows() || adjacency.cols() != base.rows()) {
    throw DimensionError("encode_structure: adjacency is " + std::to_string(adjacency.rows()) + "x" +
                         std::to_string(adjacency.cols()) + " but the graph has " + std::to_string(base.rows()) +
                         " entities");
  }
  Var h = tape.watch(base);
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    GatLayer& layer = enc.layers[l];
    const Var z = diff::matmul(tape, h, tape.watch(layer.weight));
    const Var s = diff::matmul(tape, z, tape.watch(layer.attn_src));
    const Var t = diff::matmul(tape, z, tape.watch(layer.attn_dst));
    const Var logits = diff::leaky_relu(tape, diff::outer_sum(tape, s, t), enc.leaky_slope);
    const Var att = diff::masked_softmax_rows(tape, logits, adjacency);
    h = diff::matmul(tape, att, z);
    if (l + 1 < enc.layers.size()) h = diff::relu(tape, h);
  }
  return h;
}

Var encode_dense(Tape& tape, const Matrix& features, DenseEncoder& enc) {
  if (features.cols() != enc.weight.rows()) {
    throw DimensionError("encode_dense: feature width " + std::to_string(features.cols()) +
                         " does not match encoder input " + std::to_string(enc.weight.rows()));
  }
  Var out = diff::matmul(tape, tape.constant(features), tape.watch(enc.weight));
  if (enc.bias) out = diff::add_row_broadcast(tape, out, tape.watch(*enc.bias));
  return out;
}

ModalityEmbeddings encode_all(Tape& tape, const ModalityInputs& inputs, EncoderParams& params, Side side,
                              std::span<const Modality> modalities) {
  std::vector<Modality> wanted(modalities.begin(), modalities.end());
  if (wanted.empty()) wanted = params.modalities();
  ModalityEmbeddings out;
  for (Modality m : wanted) {
    if (!params.has(m)) {
      throw ConfigError("no encoder parameters for configured modality " + std::string(modality_name(m)));
    }
    switch (m) {
      case Modality::Structure:
        out[m] = encode_structure(tape, inputs.adjacency, params.structure(), side);
        break;
      case Modality::Relation:
        out[m] = encode_dense(tape, inputs.rel_bags, params.dense(m));
        break;
      case Modality::Attribute:
        out[m] = encode_dense(tape, inputs.attr_bags, params.dense(m));
        break;
      case Modality::Image:
        out[m] = encode_dense(tape, inputs.images, params.dense(m));
        break;
    }
  }
  return out;
}

std::map<Modality, Matrix> encode_values(const ModalityInputs& inputs, EncoderParams& params, Side side) {
  Tape tape(false);
  std::map<Modality, Matrix> out;
  for (const auto& [m, v] : encode_all(tape, inputs, params, side)) out.emplace(m, tape.value(v));
  return out;
}

}  // namespace pmf
