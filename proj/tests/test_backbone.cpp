#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "evofa/backbone.hpp"
#include "evofa/fsl.hpp"
#include "evofa/gradcheck.hpp"
#include "test_support.hpp"

using namespace evofa;
using namespace evofa::testing;

namespace {

Tensor identity_proj(std::size_t c, std::size_t g) {
  std::vector<double> p(c * g * g, 0.0);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < g; ++i) p[(k * g + i) * g + i] = 1.0;
  return Tensor({c, g, g}, std::move(p));
}

Tensor permute_rows(const Tensor& f, const std::vector<std::size_t>& perm) {
  const std::size_t d = f.dim(1);
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = f[perm[i] * d + j];
  return Tensor(f.shape(), std::move(out));
}

}  // namespace

// --- g2g ------------------------------------------------------------------------

TEST(G2G, IdentityInputGivesHalfIdentity) {
  const Tensor out = grouped_gram(Tensor::matrix({{1, 0}, {0, 1}}), identity_proj(1, 2));
  EXPECT_EQ(out.shape(), (Shape{1, 2, 2}));
  const std::vector<double> expected{0.5, 0, 0, 0.5};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out[i], expected[i]);
}

TEST(G2G, MatchesGramOracleOfProjectedGroups) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 5, c = 2, g = 3, d = c * g;
    Tensor f = random_tensor({n, d}, rng, false);
    Tensor p = random_tensor({c, g, g}, rng, false);
    const Tensor out = grouped_gram(f, p);
    for (std::size_t k = 0; k < c; ++k) {
      // Z = F[:, group k] * P_k
      std::vector<double> z(n * g, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < g; ++s)
          for (std::size_t t = 0; t < g; ++t) z[i * g + s] += f[i * d + k * g + t] * p[(k * g + t) * g + s];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0.0;
          for (std::size_t s = 0; s < g; ++s) dot += z[i * g + s] * z[j * g + s];
          ASSERT_NEAR(out[(k * n + i) * n + j], dot / g, 1e-12);
        }
    }
  }
}

TEST(G2G, ChannelsAreSymmetric) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Tensor out = grouped_gram(random_tensor({6, 4}, rng, false), random_tensor({2, 2, 2}, rng, false));
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) ASSERT_NEAR(out[(k * 6 + i) * 6 + j], out[(k * 6 + j) * 6 + i], 1e-9);
  }
}

TEST(G2G, ElectrodePermutationPermutesRowsAndColumns) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    Tensor f = random_tensor({4, 4}, rng, false);
    Tensor p = random_tensor({1, 4, 4}, rng, false);
    std::vector<std::size_t> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor a = grouped_gram(f, p);
    const Tensor b = grouped_gram(permute_rows(f, perm), p);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) ASSERT_NEAR(b[i * 4 + j], a[perm[i] * 4 + perm[j]], 1e-12);
  }
}

TEST(G2G, IndivisibleBandsIsConfigError) {
  auto cfg = tiny_backbone();
  cfg.g2g_channels = 3;
  EXPECT_THROW(make_model(cfg), ConfigError);
  EXPECT_THROW(grouped_gram(Tensor::zeros({2, 4}), Tensor::zeros({3, 1, 1})), ConfigError);
}

// --- config ---------------------------------------------------------------------

TEST(BackboneConfig, RejectsInconsistentWidths) {
  auto cfg = tiny_backbone();
  cfg.embedding_dim = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_backbone();
  cfg.adapter_hidden = 15;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_backbone();
  cfg.conv_channels = {4, 4, 8};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_backbone();
  cfg.n_electrodes = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Model, CopiesAreDeep) {
  Model a = make_model(tiny_backbone());
  Model b = a;
  b.phi.at("fc1.bias").mutable_data()[0] = 3.0;
  EXPECT_DOUBLE_EQ(a.phi.at("fc1.bias")[0], 0.0);
}

TEST(Model, InitSeedControlsWeights) {
  auto cfg = tiny_backbone();
  const auto a = make_model(cfg).theta.checksum();
  EXPECT_EQ(a, make_model(cfg).theta.checksum());
  cfg.init_seed += 1;
  EXPECT_NE(a, make_model(cfg).theta.checksum());
}

// --- encode ---------------------------------------------------------------------

TEST(Encode, OutputHasEmbeddingShape) {
  Model model = make_model(tiny_backbone());
  Rng rng(1);
  EXPECT_EQ(encode(random_tensor({6, 4}, rng, false), model).shape(), (Shape{8}));
  EXPECT_EQ(encode_batch(random_tensor({5, 6, 4}, rng, false), model, NormMode::eval).shape(), (Shape{5, 8}));
}

TEST(Encode, SchemaMismatchIsDimensionError) {
  Model model = make_model(tiny_backbone());
  EXPECT_THROW(encode(Tensor::zeros({5, 4}), model), DimensionError);
  EXPECT_THROW(encode_batch(Tensor::zeros({2, 6, 3}), model, NormMode::eval), DimensionError);
}

TEST(Encode, ZeroInputGivesZeroEmbedding) {
  Model model = make_model(tiny_backbone());
  const Tensor e = encode(Tensor::zeros({6, 4}), model);
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, EvalModeIsPure) {
  Model model = make_model(tiny_backbone());
  const auto before = model.theta.checksum();
  Rng rng(2);
  Tensor f = random_tensor({6, 4}, rng, false);
  EXPECT_TRUE(bitwise_equal(encode(f, model).data(), encode(f, model).data()));
  EXPECT_EQ(model.theta.checksum(), before);
}

TEST(Encode, TrainModeUpdatesOnlyRunningStatistics) {
  Model model = make_model(tiny_backbone());
  const Model before = model;
  Rng rng(3);
  encode_batch(random_tensor({4, 6, 4}, rng, false), model, NormMode::train);
  for (std::size_t i = 0; i < model.theta.entries().size(); ++i) {
    const auto& now = model.theta.entries()[i];
    const bool same = bitwise_equal(now.value.data(), before.theta.entries()[i].value.data());
    EXPECT_EQ(same, now.name.find("running") == std::string::npos) << now.name;
  }
}

// --- adapter --------------------------------------------------------------------

TEST(Adapter, StartsAsExactIdentity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto cfg = tiny_backbone();
    cfg.init_seed = seed;
    Model model = make_model(cfg);
    Rng rng(seed);
    Tensor e = random_tensor({7, 8}, rng, false, 3.0);
    const Tensor out = adapt(e, model.phi);
    ASSERT_EQ(out.shape(), e.shape());
    for (std::size_t i = 0; i < e.size(); ++i) ASSERT_NEAR(out[i], e[i], 1e-9);
  }
}

TEST(Adapter, SingleVectorKeepsShape) {
  Model model = make_model(tiny_backbone());
  EXPECT_EQ(adapt(Tensor::full({8}, 1.0), model.phi).shape(), (Shape{8}));
}

TEST(Adapter, LossGradientReachesPhi) {
  Model model = make_model(tiny_backbone());
  const auto ds = generate_synthetic_drift(tiny_drift());
  Pool pool = select(ds, [](const auto& s) { return s.subject_id == 1 && s.session_id == 1; });
  Rng rng(4);
  const Episode ep = sample_episode(pool, 3, 2, 3, rng);
  model.zero_grad();
  episode_loss(ep, model).backward();
  for (const auto& e : model.phi.entries()) {
    ASSERT_TRUE(e.value.has_grad()) << e.name;
    double norm = 0.0;
    for (double g : e.value.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << e.name;
  }
  // And the reported gradient is the true one.
  Tensor emb = encode_batch(stack_features(ep.support), model, NormMode::eval);
  auto& phi = model.phi;
  const double err = finite_diff_check(
      [&] {
        Tensor a = adapt(emb, phi);
        return sum(mul(a, a));
      },
      phi.trainable());
  EXPECT_LT(err, 1e-4);
}

// --- heads ----------------------------------------------------------------------

TEST(ProtoHead, OneShotPrototypeIsTheSupportEmbedding) {
  Rng rng(5);
  Tensor support = random_tensor({3, 4}, rng, false);
  const Tensor p = prototypes(support, {0, 1, 2}, 3);
  EXPECT_TRUE(bitwise_equal(p.data(), support.data()));
}

TEST(ProtoHead, PrototypeIsClassMean) {
  const Tensor p = prototypes(Tensor::matrix({{1, 1}, {9, 9}, {3, 3}}), {0, 1, 0}, 2);
  EXPECT_DOUBLE_EQ(p[0], 2.0);
  EXPECT_DOUBLE_EQ(p[1], 2.0);
  EXPECT_DOUBLE_EQ(p[2], 9.0);
}

TEST(ProtoHead, ScoresAreNegativeSquaredDistances) {
  auto cfg = tiny_backbone();
  cfg.embedding_dim = 2;
  const auto out = head_forward(Tensor::matrix({{0, 0}, {2, 0}}), {0, 1}, Tensor::matrix({{0, 1}}), ParamGroup("w"),
                                cfg, 2);
  EXPECT_DOUBLE_EQ(out.scores[0], -1.0);
  EXPECT_DOUBLE_EQ(out.scores[1], -5.0);
}

TEST(ProtoHead, TranslationLeavesArgmaxUnchanged) {
  const auto cfg = tiny_backbone();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    Tensor support = random_tensor({6, 8}, rng, false);
    Tensor query = random_tensor({9, 8}, rng, false);
    Tensor shift = random_tensor({8}, rng, false, 10.0);
    const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
    const auto a = head_forward(support, labels, query, ParamGroup("w"), cfg, 3);
    const auto b = head_forward(add_row_vector(support, shift), labels, add_row_vector(query, shift),
                                ParamGroup("w"), cfg, 3);
    ASSERT_EQ(argmax_rows(a.scores), argmax_rows(b.scores)) << "seed " << seed;
  }
}

TEST(MatchingHead, ExactMatchTakesAllMass) {
  auto cfg = tiny_backbone(HeadKind::matching);
  const Tensor support = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const auto out = head_forward(support, {0, 1, 2}, Tensor::matrix({{0, 2, 0}}), ParamGroup("w"), cfg, 3);
  EXPECT_NEAR(out.scores[1], 1.0, 1e-3);
  double total = 0.0;
  for (double v : out.scores.data()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(RelationHead, ScoresLieInUnitInterval) {
  Model model = make_model(tiny_backbone(HeadKind::relation));
  Rng rng(6);
  const auto out = head_forward(random_tensor({6, 8}, rng, false), {0, 0, 1, 1, 2, 2},
                                random_tensor({4, 8}, rng, false), model.w, model.config, 3);
  EXPECT_EQ(out.scores.shape(), (Shape{4, 3}));
  for (double v : out.scores.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Heads, AbsentClassIsProtocolError) {
  for (HeadKind kind : {HeadKind::proto, HeadKind::matching, HeadKind::relation}) {
    Model model = make_model(tiny_backbone(kind));
    EXPECT_THROW(head_forward(Tensor::zeros({2, 8}), {0, 0}, Tensor::zeros({1, 8}), model.w, model.config, 2),
                 ProtocolError)
        << to_string(kind);
  }
}

TEST(Heads, LinearHeadHasNoEpisodicForm) {
  Model model = make_model(tiny_backbone(HeadKind::linear));
  EXPECT_THROW(head_forward(Tensor::zeros({1, 8}), {0}, Tensor::zeros({1, 8}), model.w, model.config, 1),
               ConfigError);
}

TEST(Heads, ArgmaxTiesGoToLowestClass) {
  EXPECT_EQ(argmax_rows(Tensor::matrix({{0.2, 0.5, 0.5}, {1, 1, 1}})), (std::vector<std::size_t>{1, 0}));
}

// --- end-to-end properties ------------------------------------------------------

TEST(Backbone, RandomConfigsAreShapeConsistent) {
  Rng rng(2024);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  for (int trial = 0; trial < 25; ++trial) {
    BackboneConfig cfg;
    cfg.n_electrodes = pick(1, 7);
    cfg.g2g_channels = pick(1, 3);
    cfg.d_bands = cfg.g2g_channels * pick(1, 3);
    cfg.conv_channels = {pick(1, 5), pick(1, 5), pick(1, 5), pick(1, 6)};
    cfg.embedding_dim = cfg.conv_channels.back();
    cfg.adapter_hidden = 2 * cfg.embedding_dim + 2 * pick(0, 3);
    const HeadKind kinds[] = {HeadKind::proto, HeadKind::matching, HeadKind::relation};
    cfg.head_kind = kinds[pick(0, 2)];
    cfg.relation_hidden = pick(1, 5);
    cfg.init_seed = static_cast<std::uint64_t>(trial);
    const std::size_t n_way = pick(1, 4), k = pick(1, 3), q = pick(1, 3);
    cfg.num_classes = n_way;
    Model model = make_model(cfg);

    Tensor batch = random_tensor({n_way * (k + q), cfg.n_electrodes, cfg.d_bands}, rng, false);
    Tensor emb = adapt(encode_batch(batch, model, NormMode::train), model.phi);
    ASSERT_EQ(emb.shape(), (Shape{n_way * (k + q), cfg.embedding_dim}));
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < n_way; ++c)
      for (std::size_t j = 0; j < k; ++j) labels.push_back(c);
    const auto out = head_forward(slice_rows(emb, 0, n_way * k), labels, slice_rows(emb, n_way * k, emb.dim(0)),
                                  model.w, cfg, n_way);
    ASSERT_EQ(out.scores.shape(), (Shape{n_way * q, n_way})) << "trial " << trial;
    ASSERT_TRUE(out.scores.is_finite());
  }
}

TEST(Backbone, IdentityAdapterLeavesFewShotAccuracyUnchanged) {
  const auto ds = generate_synthetic_drift(tiny_drift(5));
  Pool pool = select(ds, [](const auto& s) { return s.subject_id == 2; });
  for (HeadKind kind : {HeadKind::proto, HeadKind::matching, HeadKind::relation}) {
    Model model = make_model(tiny_backbone(kind));
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const Episode ep = sample_episode(pool, 3, 2, 5, rng);
      const double with_adapter = classify_query(ep, model).accuracy;

      Tensor s = encode_batch(stack_features(ep.support), model, NormMode::eval);
      Tensor q = encode_batch(stack_features(ep.query), model, NormMode::eval);
      const auto raw = head_forward(s, ep.support_labels, q, model.w, model.config, 3);
      const auto pred = argmax_rows(raw.scores);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query_labels[i];
      ASSERT_DOUBLE_EQ(with_adapter, static_cast<double>(correct) / static_cast<double>(pred.size()))
          << to_string(kind) << " seed " << seed;
    }
  }
}
