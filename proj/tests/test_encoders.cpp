#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "pmf/encoders.hpp"
#include "pmf/errors.hpp"

using namespace pmf;
using pmf::test::random_matrix;

namespace {

StructureEncoder one_layer(const Matrix& base, const Matrix& w, const Matrix& a_src, const Matrix& a_dst) {
  StructureEncoder enc;
  enc.base = {DiffTensor(base), DiffTensor(base)};
  enc.layers.push_back(GatLayer{DiffTensor(w), DiffTensor(a_src), DiffTensor(a_dst)});
  return enc;
}

Matrix run_structure(StructureEncoder& enc, const Matrix& adj) {
  Tape t(false);
  return t.value(encode_structure(t, adj, enc, Side::Source));
}

SyntheticPair small_pair(std::size_t n = 30) {
  SyntheticSpec spec;
  spec.n_entities = n;
  spec.image_dim = 8;
  spec.n_relations = 10;
  spec.n_attributes = 30;
  spec.seed = 2;
  return generate_synthetic_pair(spec);
}

}  // namespace

TEST(Gat, PathGraphMatchesScalarOracle) {
  // 0 - 1 - 2 - 3 with self-loops, d = 2.
  const Matrix adj{{1, 1, 0, 0}, {1, 1, 1, 0}, {0, 1, 1, 1}, {0, 0, 1, 1}};
  const Matrix base{{1.0, 0.0}, {0.5, -1.0}, {-0.3, 0.8}, {2.0, 1.0}};
  const Matrix w{{0.6, -0.2}, {0.4, 1.1}};
  const Matrix a_src{{0.7}, {-0.5}};
  const Matrix a_dst{{0.3}, {0.9}};
  const double slope = 0.2;
  StructureEncoder enc = one_layer(base, w, a_src, a_dst);
  const Matrix got = run_structure(enc, adj);

  // Step by step: z_i = h_i W; e_ij = leaky(a_src.z_i + a_dst.z_j); softmax over N(i); out_i = sum att_ij z_j.
  double z[4][2];
  for (int i = 0; i < 4; ++i) {
    for (int c = 0; c < 2; ++c) z[i][c] = base(i, 0) * w(0, c) + base(i, 1) * w(1, c);
  }
  for (int i = 0; i < 4; ++i) {
    double e[4] = {0, 0, 0, 0};
    double denom = 0.0;
    for (int j = 0; j < 4; ++j) {
      if (adj(i, j) == 0) continue;
      double x = a_src(0, 0) * z[i][0] + a_src(1, 0) * z[i][1] + a_dst(0, 0) * z[j][0] + a_dst(1, 0) * z[j][1];
      x = x > 0 ? x : slope * x;
      e[j] = std::exp(x);
      denom += e[j];
    }
    for (int c = 0; c < 2; ++c) {
      double out = 0.0;
      for (int j = 0; j < 4; ++j) out += e[j] / denom * z[j][c];
      EXPECT_NEAR(got(i, c), out, 1e-12) << "row " << i;
    }
  }
}

TEST(Gat, SingletonAttendsToItself) {
  const Matrix base{{0.4, -1.2, 0.7}};
  const Matrix w = random_matrix(3, 3, 1);
  StructureEncoder enc = one_layer(base, w, random_matrix(3, 1, 2), random_matrix(3, 1, 3));
  const Matrix got = run_structure(enc, Matrix::Ones(1, 1));
  EXPECT_TRUE(got.isApprox(base * w, 1e-14));
  const Matrix att = gat_attention(base, enc.layers[0], Matrix::Ones(1, 1), 0.2);
  EXPECT_DOUBLE_EQ(att(0, 0), 1.0);
}

TEST(Gat, IdenticalNodesGiveIdenticalRows) {
  const Matrix base{{0.3, 0.9}, {0.3, 0.9}};
  StructureEncoder enc = one_layer(base, random_matrix(2, 2, 4), random_matrix(2, 1, 5), random_matrix(2, 1, 6));
  const Matrix got = run_structure(enc, Matrix::Ones(2, 2));
  EXPECT_EQ(got.row(0), got.row(1));
}

TEST(Gat, AttentionRowsAreDistributionsOverNeighbourhood) {
  const SyntheticPair p = small_pair();
  const Matrix adj = build_adjacency(p.source);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GatLayer layer{DiffTensor(random_matrix(6, 6, seed)), DiffTensor(random_matrix(6, 1, seed + 10)),
                   DiffTensor(random_matrix(6, 1, seed + 20))};
    const Matrix att = gat_attention(random_matrix(30, 6, seed + 30), layer, adj, 0.2);
    for (Eigen::Index i = 0; i < att.rows(); ++i) {
      EXPECT_NEAR(att.row(i).sum(), 1.0, 1e-12);
      for (Eigen::Index j = 0; j < att.cols(); ++j) {
        if (adj(i, j) == 0.0) EXPECT_EQ(att(i, j), 0.0);
        else EXPECT_GT(att(i, j), 0.0);
      }
    }
  }
}

TEST(Gat, AdjacencySizeMismatchThrows) {
  StructureEncoder enc = one_layer(Matrix::Ones(3, 2), Matrix::Identity(2, 2), Matrix::Ones(2, 1), Matrix::Ones(2, 1));
  Tape t;
  EXPECT_THROW(encode_structure(t, Matrix::Identity(4, 4), enc, Side::Source), DimensionError);
}

TEST(Gat, TwoLayerGradientMatchesFiniteDifference) {
  const SyntheticPair p = small_pair(8);
  const Matrix adj = build_adjacency(p.source);
  StructureEncoder enc;
  enc.base = {DiffTensor(random_matrix(8, 4, 1)), DiffTensor(random_matrix(8, 4, 2))};
  for (int l = 0; l < 2; ++l) {
    enc.layers.push_back(GatLayer{DiffTensor(random_matrix(4, 4, 10 + l, 0.5)), DiffTensor(random_matrix(4, 1, 20 + l)),
                                  DiffTensor(random_matrix(4, 1, 30 + l))});
  }
  const Matrix proj = random_matrix(8, 4, 99);
  std::vector<DiffTensor*> ps = {&enc.base[0]};
  for (auto& l : enc.layers) ps.insert(ps.end(), {&l.weight, &l.attn_src, &l.attn_dst});
  const double err = diff::finite_difference_check(
      [&](Tape& t) { return diff::sum(t, diff::mul(t, encode_structure(t, adj, enc, Side::Source), t.constant(proj))); },
      ps);
  EXPECT_LT(err, 1e-4);
}

TEST(Dense, IdentityWeightIsIdentity) {
  DenseEncoder enc{DiffTensor(Matrix::Identity(3, 3)), DiffTensor(Matrix::Zero(1, 3))};
  const Matrix x = random_matrix(4, 3, 7);
  Tape t(false);
  EXPECT_EQ(t.value(encode_dense(t, x, enc)), x);
}

TEST(Dense, ZeroRowWithoutBiasStaysZero) {
  DenseEncoder enc{DiffTensor(random_matrix(3, 5, 1)), std::nullopt};
  Matrix x = random_matrix(2, 3, 2);
  x.row(1).setZero();
  Tape t(false);
  EXPECT_TRUE(t.value(encode_dense(t, x, enc)).row(1).isZero(0.0));
}

TEST(Dense, HandComputedProduct) {
  const Matrix x{{1.0, 2.0, 3.0}, {-1.0, 0.5, 2.0}};
  const Matrix w{{1.0, 0.0}, {2.0, -1.0}, {0.5, 3.0}};
  DenseEncoder enc{DiffTensor(w), DiffTensor(Matrix{{0.1, -0.2}})};
  Tape t(false);
  const Matrix got = t.value(encode_dense(t, x, enc));
  // [1+4+1.5, 0-2+9] + bias ; [-1+1+1, 0-0.5+6] + bias
  EXPECT_NEAR(got(0, 0), 6.6, 1e-12);
  EXPECT_NEAR(got(0, 1), 6.8, 1e-12);
  EXPECT_NEAR(got(1, 0), 1.1, 1e-12);
  EXPECT_NEAR(got(1, 1), 5.3, 1e-12);
}

TEST(Dense, WidthMismatchThrows) {
  DenseEncoder enc{DiffTensor(Matrix::Ones(3, 2)), std::nullopt};
  Tape t;
  EXPECT_THROW(encode_dense(t, Matrix::Ones(2, 4), enc), DimensionError);
}

TEST(EncodeAll, SubsetAndShapes) {
  const SyntheticPair p = small_pair();
  const auto inputs = prepare_inputs(p.source, p.target);
  EncoderConfig cfg;
  EncoderParams full = EncoderParams::initialize(cfg, {30, 30}, inputs[0].rel_bags.cols(), inputs[0].attr_bags.cols(),
                                                 inputs[0].images.cols(), 0);
  Tape t(false);
  const ModalityEmbeddings all = encode_all(t, inputs[0], full, Side::Source);
  ASSERT_EQ(all.size(), 4u);
  for (const auto& [m, v] : all) {
    EXPECT_EQ(t.value(v).rows(), 30);
    EXPECT_EQ(t.value(v).cols(), 300);
  }
  const Modality only[] = {Modality::Structure};
  EXPECT_EQ(encode_all(t, inputs[0], full, Side::Source, only).size(), 1u);

  cfg.modalities = {Modality::Structure};
  EncoderParams str_only = EncoderParams::initialize(cfg, {30, 30}, 1, 1, 1, 0);
  const ModalityEmbeddings one = encode_all(t, inputs[1], str_only, Side::Target);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_TRUE(one.count(Modality::Structure));
  const Modality img[] = {Modality::Image};
  EXPECT_THROW(encode_all(t, inputs[1], str_only, Side::Target, img), ConfigError);
}

TEST(EncodeAll, DeterministicInitAndForward) {
  const SyntheticPair p = small_pair();
  const auto inputs = prepare_inputs(p.source, p.target);
  EncoderConfig cfg;
  cfg.hidden_dim = 16;
  auto make = [&](std::uint64_t seed) {
    return EncoderParams::initialize(cfg, {30, 30}, inputs[0].rel_bags.cols(), inputs[0].attr_bags.cols(),
                                     inputs[0].images.cols(), seed);
  };
  EncoderParams a = make(5);
  EncoderParams b = make(5);
  const auto va = encode_values(inputs[1], a, Side::Target);
  const auto vb = encode_values(inputs[1], b, Side::Target);
  for (Modality m : kAllModalities) EXPECT_EQ(va.at(m), vb.at(m));
  EXPECT_EQ(encode_values(inputs[1], a, Side::Target).at(Modality::Structure), va.at(Modality::Structure));
  EncoderParams c = make(6);
  EXPECT_NE(encode_values(inputs[1], c, Side::Target).at(Modality::Image), va.at(Modality::Image));
}

TEST(EncodeAll, MissingImageGivesZeroEmbedding) {
  SyntheticSpec spec;
  spec.n_entities = 40;
  spec.image_dim = 8;
  spec.missing_image_rate = 0.25;
  const SyntheticPair p = generate_synthetic_pair(spec);
  const auto inputs = prepare_inputs(p.source, p.target);
  EncoderConfig cfg;
  cfg.hidden_dim = 8;
  EncoderParams params = EncoderParams::initialize(cfg, {40, 40}, inputs[0].rel_bags.cols(),
                                                   inputs[0].attr_bags.cols(), 8, 0);
  const Matrix img = encode_values(inputs[1], params, Side::Target).at(Modality::Image);
  std::size_t missing = 0;
  for (std::size_t i = 0; i < 40; ++i) {
    if (!p.target.has_image[i]) {
      ++missing;
      EXPECT_TRUE(img.row(static_cast<Eigen::Index>(i)).isZero(0.0));
    }
  }
  EXPECT_EQ(missing, 10u);
}

TEST(Params, SectionsRoundTrip) {
  EncoderConfig cfg;
  cfg.hidden_dim = 6;
  EncoderParams a = EncoderParams::initialize(cfg, {5, 7}, 4, 9, 3, 1);
  std::map<std::string, Matrix> sections;
  for (auto& [name, m] : a.to_sections()) sections[name] = m;
  EncoderParams b = EncoderParams::from_sections(sections);
  EXPECT_EQ(b.hidden_dim(), 6u);
  EXPECT_EQ(b.modalities(), a.modalities());
  auto na = a.named_tensors();
  auto nb = b.named_tensors();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t k = 0; k < na.size(); ++k) {
    EXPECT_EQ(na[k].first, nb[k].first);
    EXPECT_EQ(na[k].second->values, nb[k].second->values);
  }
}

TEST(Params, XavierBoundsAndZeroBias) {
  EncoderConfig cfg;
  cfg.hidden_dim = 20;
  EncoderParams p = EncoderParams::initialize(cfg, {10, 10}, 50, 30, 16, 3);
  const double bound = std::sqrt(6.0 / (50 + 20));
  EXPECT_LE(p.dense(Modality::Relation).weight.values.cwiseAbs().maxCoeff(), bound);
  EXPECT_TRUE(p.dense(Modality::Relation).bias->values.isZero(0.0));
  EXPECT_FALSE(p.dense(Modality::Image).bias.has_value());
}
