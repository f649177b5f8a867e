#include <gtest/gtest.h>

#include <cmath>

#include "mlgcn/model.hpp"
#include "mlgcn/train.hpp"

using namespace mlgcn;

namespace {

ModelParams<double> identity_model(std::size_t vocab, std::size_t d) {
  auto p = ModelParams<double>::zeros({vocab, d, d, true});
  for (std::size_t i = 0; i < d; ++i) {
    p.encoder_weight(i, i) = 1.0;
    p.neighbor_weight(i, i) = 1.0;
    p.fusion_weight(i, i) = 1.0;
    p.fusion_weight(i, d + i) = 1.0;
  }
  return p;
}

// Straight-line reference for the whole forward pass, written against the
// definitions rather than the library's traces.
std::vector<double> ref_text(const TokenSeq& toks, const ModelParams<double>& p) {
  const std::size_t de = p.shape.embed_dim, d = p.shape.dim;
  std::vector<double> pooled(de, 0.0), h(d, 0.0);
  for (TokenId t : toks)
    for (std::size_t c = 0; c < de; ++c) pooled[c] += p.token_embeddings(t, c) / static_cast<double>(toks.size());
  for (std::size_t r = 0; r < d; ++r) {
    double s = p.encoder_bias[r];
    for (std::size_t c = 0; c < de; ++c) s += p.encoder_weight(r, c) * pooled[c];
    h[r] = s > 0 ? s : 0;
  }
  return h;
}

std::vector<double> ref_product(const ProductRef& ref, const ModelParams<double>& p) {
  const std::size_t d = p.shape.dim;
  const auto hp = ref_text(ref.description, p);
  if (!p.shape.gcn) return hp;
  std::vector<double> hq(d, 0.0);
  for (const auto& n : ref.neighbors) {
    const auto hj = ref_text(n, p);
    for (std::size_t r = 0; r < d; ++r) {
      double s = p.neighbor_bias[r];
      for (std::size_t c = 0; c < d; ++c) s += p.neighbor_weight(r, c) * hj[c];
      hq[r] += (s > 0 ? s : 0) / static_cast<double>(ref.neighbors.size());
    }
  }
  std::vector<double> x(d);
  for (std::size_t r = 0; r < d; ++r) {
    double s = p.fusion_bias[r];
    for (std::size_t c = 0; c < d; ++c) s += p.fusion_weight(r, c) * hp[c] + p.fusion_weight(r, d + c) * hq[c];
    x[r] = s > 0 ? s : 0;
  }
  return x;
}

TokenSeq random_tokens(Rng& rng, std::size_t vocab, std::size_t lo, std::size_t hi) {
  TokenSeq s(lo + rng.uniform(hi - lo + 1));
  for (auto& t : s) t = static_cast<TokenId>(2 + rng.uniform(vocab - 2));
  return s;
}

ProductRef random_product(Rng& rng, std::size_t vocab) {
  ProductRef r;
  r.description = random_tokens(rng, vocab, 1, 5);
  const auto nn = rng.uniform(4);
  for (std::size_t j = 0; j < nn; ++j) r.neighbors.push_back(random_tokens(rng, vocab, 1, 4));
  return r;
}

}  // namespace

TEST(EncodeText, ZeroParamsGiveZero) {
  const auto p = ModelParams<double>::zeros({10, 3, 3, true});
  EXPECT_EQ(encode_text({2, 3, 4}, p), std::vector<double>(3, 0.0));
}

TEST(EncodeText, EmptyTokensPoolToZero) {
  auto p = ModelParams<double>::init({10, 3, 3, true}, 1);
  p.encoder_bias = {1.0, -1.0, 0.5};
  EXPECT_EQ(encode_text({}, p), (std::vector<double>{1.0, 0.0, 0.5}));
}

TEST(EncodeText, MeanThenIdentity) {
  auto p = identity_model(8, 2);
  p.token_embeddings(5, 0) = 2.0;
  EXPECT_EQ(encode_text({5, 5}, p), (std::vector<double>{2.0, 0.0}));
}

TEST(EncodeText, OutOfRangeToken) {
  const auto p = ModelParams<double>::zeros({4, 2, 2, true});
  EXPECT_THROW(encode_text({4}, p), Error);
}

TEST(EncodeQuery, AliasOfEncodeText) {
  const auto p = ModelParams<float>::init({30, 6, 5, true}, 3);
  const TokenSeq t{4, 9, 17};
  EXPECT_EQ(encode_query(t, p), encode_text(t, p));
  EXPECT_EQ(encode_query(t, ModelParams<float>::zeros(p.shape)), std::vector<float>(5, 0.0f));
}

TEST(EncodeProduct, WorkedGraphConvolution) {
  const auto p = identity_model(4, 2);
  const std::vector<double> h_p{1.0, 0.0};
  const std::vector<std::vector<double>> nbrs{{0.0, 1.0}, {0.0, 3.0}};
  EXPECT_EQ(combine_product<double>(h_p, nbrs, p), (std::vector<double>{1.0, 2.0}));
}

TEST(EncodeProduct, NoNeighborsUsesZeroAggregate) {
  const auto p = identity_model(4, 2);
  const std::vector<double> h_p{1.5, 0.25};
  EXPECT_EQ(combine_product<double>(h_p, {}, p), h_p);
}

TEST(EncodeProduct, ZeroParamsGiveZero) {
  const auto p = ModelParams<double>::zeros({10, 3, 3, true});
  EXPECT_EQ(encode_product(ProductRef{{2, 3}, {{4}, {5, 6}}}, p), std::vector<double>(3, 0.0));
}

TEST(EncodeProduct, MatchesReferenceForward) {
  Rng rng(5);
  for (bool gcn : {true, false}) {
    auto p = ModelParams<double>::init({25, 5, 4, gcn}, 9);
    for (double& b : p.encoder_bias) b = rng.uniform(-0.1, 0.1);
    for (double& b : p.neighbor_bias) b = rng.uniform(-0.1, 0.1);
    for (double& b : p.fusion_bias) b = rng.uniform(-0.1, 0.1);
    for (int trial = 0; trial < 50; ++trial) {
      const auto ref = random_product(rng, 25);
      const auto got = encode_product(ref, p);
      const auto want = ref_product(ref, p);
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(EncodeProduct, NeighborPermutationAndDuplicationInvariant) {
  Rng rng(6);
  const auto p = ModelParams<double>::init({25, 5, 4, true}, 10);
  for (int trial = 0; trial < 30; ++trial) {
    auto ref = random_product(rng, 25);
    if (ref.neighbors.empty()) ref.neighbors.push_back({3});
    const auto base = encode_product(ref, p);
    auto perm = ref;
    std::reverse(perm.neighbors.begin(), perm.neighbors.end());
    auto dup = ref;
    dup.neighbors.insert(dup.neighbors.end(), ref.neighbors.begin(), ref.neighbors.end());
    const auto a = encode_product(perm, p);
    const auto b = encode_product(dup, p);
    for (std::size_t i = 0; i < base.size(); ++i) {
      EXPECT_NEAR(a[i], base[i], 1e-12);
      EXPECT_NEAR(b[i], base[i], 1e-12);
      EXPECT_GE(base[i], 0.0);
    }
  }
}

TEST(TripletLoss, ZeroMarginIsLog2) {
  const std::vector<double> q{0.3, 0.7}, p{1.0, 2.0}, n{1.0, 2.0};
  EXPECT_NEAR(triplet_loss<double>(q, p, n), std::log(2.0), 1e-12);
}

TEST(TripletLoss, UnitMargin) {
  const std::vector<double> q{1.0}, p{1.0}, n{0.0};
  EXPECT_NEAR(triplet_loss<double>(q, p, n), std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(triplet_loss<double>(q, p, n), 0.313262, 1e-6);
}

TEST(TripletLoss, LargeMarginIsStable) {
  const std::vector<double> q{1.0}, p{0.0}, n{50.0};
  EXPECT_NEAR(triplet_loss<double>(q, p, n), 50.0, 1e-12);
  const std::vector<double> far{1000.0};
  EXPECT_NEAR(triplet_loss<double>(q, p, far), 1000.0, 1e-9);
  const std::vector<double> thirty{30.0};
  EXPECT_NEAR(triplet_loss<double>(q, thirty, p), std::exp(-30.0), 1e-18);
}

TEST(TripletLoss, Errors) {
  const std::vector<double> a{1.0}, b{1.0, 2.0}, nan{std::nan("")};
  EXPECT_THROW(triplet_loss<double>(a, b, a), Error);
  EXPECT_THROW(triplet_loss<double>(a, a, nan), Error);
}

TEST(LossAndGrads, ZeroParams) {
  const auto p = ModelParams<double>::zeros({10, 3, 3, true});
  TripletBatch b{"en", {{{2, 3}, {{4}, {{5}}}, {{6}, {}}}}};
  const auto lg = loss_and_grads(b, p);
  EXPECT_NEAR(lg.loss, std::log(2.0), 1e-15);
  for (std::size_t t = 0; t < kTensorCount; ++t) {
    const std::size_t n = t == 0 ? 30 : p.tensors()[t].size();
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(lg.grads.at(t, i), 0.0);
  }
}

TEST(LossAndGrads, EmptyBatch) {
  const auto p = ModelParams<double>::zeros({10, 3, 3, true});
  EXPECT_THROW(loss_and_grads(TripletBatch{}, p), Error);
}

TEST(LossAndGrads, DuplicatedBatchSameMeanAndGradients) {
  const auto fx = make_gradcheck_fixture(0);
  auto twice = fx.batch;
  twice.triplets.insert(twice.triplets.end(), fx.batch.triplets.begin(), fx.batch.triplets.end());
  const auto a = loss_and_grads(fx.batch, fx.params);
  const auto b = loss_and_grads(twice, fx.params);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  for (std::size_t t = 0; t < kTensorCount; ++t) {
    const std::size_t n = t == 0 ? 20 * 4 : fx.params.tensors()[t].size();
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(a.grads.at(t, i), b.grads.at(t, i), 1e-14);
  }
}

TEST(LossAndGrads, MeanMatchesReference) {
  const auto fx = make_gradcheck_fixture(2);
  double total = 0;
  for (const auto& t : fx.batch.triplets) {
    const auto q = ref_text(t.query, fx.params);
    const auto pos = ref_product(t.positive, fx.params);
    const auto neg = ref_product(t.negative, fx.params);
    double sp = 0, sn = 0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      sp += q[i] * pos[i];
      sn += q[i] * neg[i];
    }
    total += std::log1p(std::exp(sn - sp));
  }
  EXPECT_NEAR(loss_and_grads(fx.batch, fx.params).loss, total / 3.0, 1e-12);
}

TEST(LossAndGrads, EmbeddingRowsOnlyForBatchTokens) {
  const auto fx = make_gradcheck_fixture(1);
  std::set<TokenId> present;
  for (const auto& t : fx.batch.triplets) {
    present.insert(t.query.begin(), t.query.end());
    for (const auto* r : {&t.positive, &t.negative}) {
      present.insert(r->description.begin(), r->description.end());
      for (const auto& n : r->neighbors) present.insert(n.begin(), n.end());
    }
  }
  const auto lg = loss_and_grads(fx.batch, fx.params);
  for (const auto& [row, _] : lg.grads.token_embeddings) EXPECT_TRUE(present.contains(row));
}

TEST(LossAndGrads, ThreadCountDoesNotChangeBits) {
  Rng rng(12);
  const auto p = ModelParams<float>::init({40, 8, 8, true}, 4);
  TripletBatch b{"en", {}};
  for (int i = 0; i < 37; ++i) b.triplets.push_back({random_tokens(rng, 40, 1, 4), random_product(rng, 40), random_product(rng, 40)});
  const auto a = loss_and_grads(b, p, 1);
  const auto c = loss_and_grads(b, p, 5);
  EXPECT_EQ(a.loss, c.loss);
  for (std::size_t t = 0; t < kTensorCount; ++t) {
    const std::size_t n = t == 0 ? 40 * 8 : p.tensors()[t].size();
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(a.grads.at(t, i), c.grads.at(t, i));
  }
}

TEST(LossAndGrads, WithoutGraphLayerMatchesFiniteDifferences) {
  auto fx = make_gradcheck_fixture(0);
  auto p = fx.params;
  p.shape.gcn = false;
  if (min_abs_preactivation(fx.batch, p) < 1e-3) GTEST_SKIP() << "fixture near a kink";
  const auto r = grad_check(p, fx.batch, 1e-5, 210, 0);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Params, InitRangesAndDeterminism) {
  const ModelShape s{50, 6, 4, true};
  const auto a = ModelParams<float>::init(s, 7);
  EXPECT_EQ(a, ModelParams<float>::init(s, 7));
  EXPECT_FALSE(a == ModelParams<float>::init(s, 8));
  for (float v : a.token_embeddings.data) EXPECT_LE(std::abs(v), 0.05f);
  for (float v : a.encoder_weight.data) EXPECT_LE(std::abs(v), 1.0f / std::sqrt(6.0f));
  for (float v : a.fusion_weight.data) EXPECT_LE(std::abs(v), 1.0f / std::sqrt(8.0f));
  for (float v : a.encoder_bias) EXPECT_EQ(v, 0.0f);
}
