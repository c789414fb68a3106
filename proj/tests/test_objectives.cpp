#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "helpers.hpp"
#include "pmf/errors.hpp"
#include "pmf/objectives.hpp"

using namespace pmf;
using pmf::test::random_matrix;

namespace {

constexpr double kOracleTol = 1e-6;

double value(Tape& t, Var v) { return t.value(v)(0, 0); }

// Scalar evaluation of the cross-modality term for one modality pair.
double cm_oracle(const Matrix& a_raw, const Matrix& b_raw, double tau, double beta) {
  const Matrix a = diff::normalized_rows(a_raw);
  const Matrix b = diff::normalized_rows(b_raw);
  const Eigen::Index n = a.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double pos = std::exp(a.row(i).dot(b.row(i)) / tau);
    double denom = pos;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      denom += std::exp(a.row(i).dot(b.row(j)) / tau);
      denom += std::exp(a.row(j).dot(b.row(i)) / tau);
    }
    loss += -beta * std::log(pos / denom);
  }
  return loss;
}

// Scalar evaluation of one cross-KG channel.
double ckg_oracle(const Matrix& x_raw, const Matrix& y_raw, double tau, bool literal) {
  const Matrix x = diff::normalized_rows(x_raw);
  const Matrix y = diff::normalized_rows(y_raw);
  const Eigen::Index n = x.rows();
  double loss = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double pos = std::exp(x.row(k).dot(y.row(k)) / tau);
    double fwd = 0.0, bwd = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      fwd += std::exp(x.row(k).dot(y.row(j)) / tau);
      bwd += std::exp(x.row(j).dot(y.row(k)) / tau);
    }
    const double lf = pos / fwd;
    const double lb = pos / bwd;
    loss += literal ? -0.5 * std::log(lf + lb) : -0.5 * (std::log(lf) + std::log(lb));
  }
  return loss;
}

std::vector<SeedPair> identity_pairs(std::size_t n) {
  std::vector<SeedPair> p;
  for (EntityId i = 0; i < n; ++i) p.push_back({i, i});
  return p;
}

LossConfig only_pair(Modality a, Modality b) {
  LossConfig c;
  c.modality_pairs = {{a, b}};
  return c;
}

}  // namespace

TEST(CrossModality, TwoEntitiesHandOracle) {
  // Unit vectors; beta_str * beta_img = 0.1 * 10 = 1.
  const Matrix str{{1.0, 0.0}, {0.0, 1.0}};
  const Matrix img{{0.6, 0.8}, {-0.8, 0.6}};
  LossConfig c = only_pair(Modality::Structure, Modality::Image);
  c.temperature = 1.0;
  Tape t(false);
  const ModalityEmbeddings e = {{Modality::Structure, t.constant(str)}, {Modality::Image, t.constant(img)}};
  // Entity 0: pos 0.6, negatives s01 = 0.8 and s10 = -0.8.
  // Entity 1: pos 0.6, negatives s10 = -0.8 and s01 = 0.8.
  const double per = -std::log(std::exp(0.6) / (std::exp(0.6) + std::exp(0.8) + std::exp(-0.8)));
  EXPECT_NEAR(value(t, cross_modality_loss(t, e, c)), 2.0 * per, kOracleTol);
  EXPECT_NEAR(value(t, cross_modality_loss(t, e, c)), cm_oracle(str, img, 1.0, 1.0), kOracleTol);
}

TEST(CrossModality, SingleEntityIsZero) {
  Tape t(false);
  const ModalityEmbeddings e = {{Modality::Structure, t.constant(random_matrix(1, 4, 1))},
                                {Modality::Relation, t.constant(random_matrix(1, 4, 2))},
                                {Modality::Image, t.constant(random_matrix(1, 4, 3))}};
  EXPECT_EQ(value(t, cross_modality_loss(t, e, LossConfig{})), 0.0);
}

TEST(CrossModality, AllPairsByDefault) {
  Tape t(false);
  std::map<Modality, Matrix> raw;
  ModalityEmbeddings e;
  for (Modality m : kAllModalities) {
    raw[m] = random_matrix(4, 3, static_cast<std::uint64_t>(m));
    e[m] = t.constant(raw[m]);
  }
  const LossConfig c;
  double expect = 0.0;
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t q = p + 1; q < 4; ++q) {
      const Modality mp = kAllModalities[p];
      const Modality mq = kAllModalities[q];
      expect += cm_oracle(raw[mp], raw[mq], c.temperature, c.beta.at(mp) * c.beta.at(mq));
    }
  }
  EXPECT_NEAR(value(t, cross_modality_loss(t, e, c)), expect, kOracleTol * std::abs(expect));
}

TEST(CrossModality, BetaLinearity) {
  const Matrix a = random_matrix(5, 3, 1);
  const Matrix b = random_matrix(5, 3, 2);
  Tape t(false);
  const ModalityEmbeddings e = {{Modality::Attribute, t.constant(a)}, {Modality::Image, t.constant(b)}};
  LossConfig c = only_pair(Modality::Attribute, Modality::Image);
  const double base = value(t, cross_modality_loss(t, e, c));
  c.beta[Modality::Image] *= 2.0;
  EXPECT_EQ(value(t, cross_modality_loss(t, e, c)), 2.0 * base);
}

TEST(CrossModality, PoolRestrictsNegatives) {
  const Matrix a = random_matrix(6, 3, 1);
  const Matrix b = random_matrix(6, 3, 2);
  Tape t(false);
  const ModalityEmbeddings e = {{Modality::Structure, t.constant(a)}, {Modality::Relation, t.constant(b)}};
  const LossConfig c = only_pair(Modality::Structure, Modality::Relation);
  const std::vector<std::size_t> pool = {1, 4, 5};
  Matrix pa(3, 3), pb(3, 3);
  for (int k = 0; k < 3; ++k) {
    pa.row(k) = a.row(static_cast<Eigen::Index>(pool[k]));
    pb.row(k) = b.row(static_cast<Eigen::Index>(pool[k]));
  }
  EXPECT_NEAR(value(t, cross_modality_loss(t, e, c, pool)), cm_oracle(pa, pb, c.temperature, 0.01), kOracleTol);
}

TEST(CrossModality, PermutationInvariant) {
  const Matrix a = random_matrix(5, 4, 3);
  const Matrix b = random_matrix(5, 4, 4);
  const std::vector<int> perm = {3, 0, 4, 1, 2};
  Matrix pa(5, 4), pb(5, 4);
  for (int k = 0; k < 5; ++k) {
    pa.row(k) = a.row(perm[k]);
    pb.row(k) = b.row(perm[k]);
  }
  Tape t(false);
  const LossConfig c = only_pair(Modality::Structure, Modality::Image);
  const double x = value(t, cross_modality_loss(
                                t, {{Modality::Structure, t.constant(a)}, {Modality::Image, t.constant(b)}}, c));
  const double y = value(t, cross_modality_loss(
                                t, {{Modality::Structure, t.constant(pa)}, {Modality::Image, t.constant(pb)}}, c));
  EXPECT_NEAR(x, y, 1e-9 * std::abs(x));
}

TEST(CrossModality, MissingModalityThrows) {
  Tape t(false);
  const ModalityEmbeddings e = {{Modality::Structure, t.constant(Matrix::Ones(2, 2))}};
  EXPECT_THROW(cross_modality_loss(t, e, only_pair(Modality::Structure, Modality::Image)), ConfigError);
}

TEST(CrossKg, SinglePairIsZero) {
  Tape t(false);
  const ChannelEmbeddings ch[] = {{"img", t.constant(random_matrix(3, 4, 1)), t.constant(random_matrix(3, 4, 2))}};
  const SeedPair one[] = {{1, 2}};
  EXPECT_EQ(value(t, cross_kg_loss(t, ch, one, LossConfig{})), 0.0);
  LossConfig literal;
  literal.ckg_literal_sum = true;
  // Literal form: -1/2 log(1 + 1).
  EXPECT_NEAR(value(t, cross_kg_loss(t, ch, one, literal)), -0.5 * std::log(2.0), 1e-15);
}

TEST(CrossKg, OrthonormalThreePairsOracle) {
  // Rows of x: e0, e1, e2. y rotated so positives are not perfect.
  const Matrix x = Matrix::Identity(3, 3);
  const Matrix y{{0.8, 0.6, 0.0}, {0.0, 0.8, 0.6}, {0.6, 0.0, 0.8}};
  const double tau = 0.05;
  Tape t(false);
  const ChannelEmbeddings ch[] = {{"str", t.constant(x), t.constant(y)}};
  const auto pairs = identity_pairs(3);
  LossConfig c;
  c.temperature = tau;
  // By hand for row k: forward logits {0.8, 0.6, 0}/tau, backward the same set.
  const double lse = std::log(std::exp(0.8 / tau) + std::exp(0.6 / tau) + 1.0);
  const double per = 0.5 * ((lse - 0.8 / tau) + (lse - 0.8 / tau));
  EXPECT_NEAR(value(t, cross_kg_loss(t, ch, pairs, c)), 3.0 * per, kOracleTol);
  EXPECT_NEAR(value(t, cross_kg_loss(t, ch, pairs, c)), ckg_oracle(x, y, tau, false), kOracleTol);
}

TEST(CrossKg, GathersSeedRowsAndSumsChannels) {
  const Matrix xs = random_matrix(6, 3, 1);
  const Matrix ys = random_matrix(7, 3, 2);
  const Matrix xj = random_matrix(6, 5, 3);
  const Matrix yj = random_matrix(7, 5, 4);
  const std::vector<SeedPair> batch = {{0, 6}, {3, 1}, {5, 2}};
  auto pick = [&](const Matrix& m, bool src) {
    Matrix out(3, m.cols());
    for (int k = 0; k < 3; ++k) out.row(k) = m.row(src ? batch[k].source : batch[k].target);
    return out;
  };
  for (bool literal : {false, true}) {
    LossConfig c;
    c.ckg_literal_sum = literal;
    Tape t(false);
    const ChannelEmbeddings ch[] = {{"str", t.constant(xs), t.constant(ys)}, {"joint", t.constant(xj), t.constant(yj)}};
    const double expect = ckg_oracle(pick(xs, true), pick(ys, false), c.temperature, literal) +
                          ckg_oracle(pick(xj, true), pick(yj, false), c.temperature, literal);
    EXPECT_NEAR(value(t, cross_kg_loss(t, ch, batch, c)), expect, kOracleTol * std::max(1.0, std::abs(expect)));
  }
}

TEST(CrossKg, PerfectEmbeddingsBeatRandom) {
  const Matrix perfect = Matrix::Identity(4, 4);
  Tape t(false);
  const auto pairs = identity_pairs(4);
  const ChannelEmbeddings good[] = {{"img", t.constant(perfect), t.constant(perfect)}};
  const ChannelEmbeddings rnd[] = {{"img", t.constant(random_matrix(4, 4, 1)), t.constant(random_matrix(4, 4, 2))}};
  LossConfig c;
  c.temperature = 0.01;
  const double g = value(t, cross_kg_loss(t, good, pairs, c));
  EXPECT_LT(g, value(t, cross_kg_loss(t, rnd, pairs, c)));
  EXPECT_LT(g, 1e-30);
}

TEST(CrossKg, TemperatureScalesLogits) {
  const Matrix x = random_matrix(4, 3, 5);
  const Matrix y = random_matrix(4, 3, 6);
  Tape t(false);
  const ChannelEmbeddings ch[] = {{"rel", t.constant(x), t.constant(y)}};
  for (double tau : {0.05, 0.2, 1.0}) {
    LossConfig c;
    c.temperature = tau;
    EXPECT_NEAR(value(t, cross_kg_loss(t, ch, identity_pairs(4), c)), ckg_oracle(x, y, tau, false), 1e-8);
  }
}

TEST(TotalLoss, Examples) {
  EXPECT_EQ(total_loss(0.0, 0.0), 0.0);
  EXPECT_EQ(total_loss(1.5, 2.5), 4.0);
  EXPECT_THROW(total_loss(std::numeric_limits<double>::quiet_NaN(), 1.0), NumericError);
  EXPECT_THROW(total_loss(1.0, std::numeric_limits<double>::infinity()), NumericError);
}

TEST(TotalLoss, FiveEntityPairEqualsComponents) {
  SyntheticSpec spec;
  spec.n_entities = 5;
  spec.image_dim = 4;
  spec.n_relations = 3;
  spec.n_attributes = 8;
  spec.attributes_per_entity = 3;
  const SyntheticPair p = generate_synthetic_pair(spec);
  const auto inputs = prepare_inputs(p.source, p.target);
  EncoderConfig cfg;
  cfg.hidden_dim = 4;
  EncoderParams params = EncoderParams::initialize(cfg, {5, 5}, inputs[0].rel_bags.cols(),
                                                   inputs[0].attr_bags.cols(), 4, 0);
  const LossConfig c;
  const auto pairs = identity_pairs(3);
  Tape t;
  const ModalityEmbeddings es = encode_all(t, inputs[0], params, Side::Source);
  const ModalityEmbeddings et = encode_all(t, inputs[1], params, Side::Target);
  const Var cm = diff::add(t, cross_modality_loss(t, es, c), cross_modality_loss(t, et, c));
  std::vector<ChannelEmbeddings> ch;
  for (Modality m : kAllModalities) ch.push_back({std::string(modality_name(m)), es.at(m), et.at(m)});
  const Var ckg = cross_kg_loss(t, ch, pairs, c);
  const double sum = value(t, total_loss(t, cm, ckg));

  const auto vs = encode_values(inputs[0], params, Side::Source);
  const auto vt = encode_values(inputs[1], params, Side::Target);
  double expect = 0.0;
  for (const auto* v : {&vs, &vt}) {
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = a + 1; b < 4; ++b) {
        const Modality ma = kAllModalities[a], mb = kAllModalities[b];
        expect += cm_oracle(v->at(ma), v->at(mb), c.temperature, c.beta.at(ma) * c.beta.at(mb));
      }
    }
  }
  for (Modality m : kAllModalities) expect += ckg_oracle(vs.at(m).topRows(3), vt.at(m).topRows(3), c.temperature, false);
  EXPECT_NEAR(sum, expect, 1e-9 * std::abs(expect));
}

TEST(Objectives, GradientsMatchFiniteDifference) {
  DiffTensor a(random_matrix(4, 3, 1));
  DiffTensor b(random_matrix(4, 3, 2));
  DiffTensor x(random_matrix(5, 3, 3));
  DiffTensor y(random_matrix(5, 3, 4));
  DiffTensor* ps[] = {&a, &b, &x, &y};
  LossConfig c;
  c.temperature = 0.5;
  const std::vector<SeedPair> batch = {{0, 1}, {2, 2}, {4, 0}};
  for (bool literal : {false, true}) {
    c.ckg_literal_sum = literal;
    const double err = diff::finite_difference_check(
        [&](Tape& t) {
          const ModalityEmbeddings e = {{Modality::Structure, t.watch(a)}, {Modality::Image, t.watch(b)}};
          const ChannelEmbeddings ch[] = {{"str", t.watch(x), t.watch(y)}};
          return total_loss(t, cross_modality_loss(t, e, c), cross_kg_loss(t, ch, batch, c));
        },
        ps);
    EXPECT_LT(err, 1e-3);
  }
}

TEST(LossConfigValidation, Rejects) {
  LossConfig c;
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.beta[Modality::Image] = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.modality_pairs = {{Modality::Image, Modality::Image}};
  EXPECT_THROW(c.validate(), ConfigError);
}
