#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <numeric>
#include <set>

#include "foal/byte_io.hpp"
#include "foal/errors.hpp"
#include "foal/gradcheck_suite.hpp"
#include "foal/model.hpp"
#include "golden_fixtures.hpp"
#include "reference.hpp"
#include "test_util.hpp"

using namespace foal;
using foal::testing::random_tensor;

namespace {

FoalNetConfig toy(std::uint64_t seed = 5) {
  FoalNetConfig cfg = gradcheck_model_config();
  cfg.seed = seed;
  return cfg;
}

double grad_energy(const Tensor& t) {
  double s = 0.0;
  for (double g : t.grad()) s += g * g;
  return s;
}

Batch permuted(const Batch& b, const std::vector<std::size_t>& perm) {
  Batch out;
  out.audio = index_rows(b.audio, perm);
  out.video = index_rows(b.video, perm);
  for (auto p : perm) out.labels.push_back(b.labels[p]);
  out.indices = perm;
  return out;
}

}  // namespace

TEST(Init, SameSeedSameParameters) {
  FoalNet a(toy(9)), b(toy(9));
  EXPECT_EQ(a.snapshot(), b.snapshot());
}

TEST(Init, DifferentSeedsDiffer) {
  FoalNet a(toy(9)), b(toy(10));
  EXPECT_NE(a.snapshot(), b.snapshot());
}

TEST(Init, DefaultsToTrainMode) { EXPECT_EQ(FoalNet(toy()).mode(), Mode::train); }

TEST(Init, ParameterCountMatchesClosedForm) {
  const auto cfg = toy();
  const std::size_t da = cfg.audio_dim, dv = cfg.video_dim, h = cfg.proj_hidden, p = cfg.align.proj_dim;
  const std::size_t layers = cfg.fusion_layers, c = cfg.classes, m = std::max(da, dv);
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  auto attn = [&](std::size_t q, std::size_t kv) { return lin(q, q) + 2 * lin(kv, q) + 2 * q; };
  const std::size_t expect = lin(da, h) + lin(h, p) + lin(dv, h) + lin(h, p) + layers * (attn(da, dv) + attn(dv, da)) +
                             lin(da, m) + lin(dv, m) + lin(m, 2) + lin(da + dv, c);
  FoalNet model(cfg);
  EXPECT_EQ(model.parameter_count(), expect);
  EXPECT_EQ(expect, 1458u);
}

TEST(Init, EqualDimsNeedNoAdapters) {
  auto cfg = toy();
  cfg.video_dim = cfg.audio_dim;
  FoalNet model(cfg);
  EXPECT_FALSE(model.adapter_a.has_value());
  EXPECT_FALSE(model.adapter_v.has_value());
  EXPECT_EQ(model.match_head.in_features(), cfg.audio_dim);
}

TEST(Init, ParametersAreUniqueAndNamed) {
  FoalNet model(toy());
  const auto params = model.parameters();
  std::set<const void*> nodes;
  std::set<std::string> names;
  for (const auto& p : params) {
    nodes.insert(p.tensor.node());
    names.insert(p.name);
    EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
  }
  EXPECT_EQ(nodes.size(), params.size());
  EXPECT_EQ(names.size(), params.size());
  EXPECT_EQ(params.front().name, "proj_a.lin1.weight");
  EXPECT_EQ(params.back().name, "emo_head.bias");
}

TEST(Init, HeadsMustDivideBothDims) {
  auto cfg = toy();
  cfg.heads = 4;  // divides 8 but not 6
  EXPECT_THROW(FoalNet{cfg}, ConfigError);
}

TEST(Fuse, OutputShapesEqualInputs) {
  FoalNet model(toy());
  const Batch b = gradcheck_batch();
  auto [fa, fv] = model.fuse(b.audio, b.video);
  EXPECT_EQ(fa.shape(), b.audio.shape());
  EXPECT_EQ(fv.shape(), b.video.shape());
}

TEST(Fuse, MatchesComposedLayerOracle) {
  auto cfg = toy();
  cfg.audio_dim = 3;
  cfg.video_dim = 2;
  cfg.heads = 1;
  FoalNet model(cfg);
  model.set_mode(Mode::eval);
  Rng rng(1);
  const auto za = random_tensor(rng, {2, 1, 3}), zv = random_tensor(rng, {2, 1, 2});
  auto [fa, fv] = model.fuse(za, zv);
  for (std::size_t n = 0; n < 2; ++n) {
    const auto a = ref::sample(za, n), v = ref::sample(zv, n);
    const auto ea = ref::cross_attention(ref::cross_attention(a, v, model.branch_a[0]), v, model.branch_a[1]);
    const auto ev = ref::cross_attention(ref::cross_attention(v, a, model.branch_v[0]), a, model.branch_v[1]);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(fa.at({n, 0, c}), ea[0][c], 1e-12);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(fv.at({n, 0, c}), ev[0][c], 1e-12);
  }
}

TEST(Fuse, ZeroValueWeightsReduceToNormalizedBias) {
  FoalNet model(toy());
  model.set_mode(Mode::eval);
  Rng rng(2);
  for (auto& layer : model.branch_a) {
    for (auto& w : layer.wv.weight.mutable_data()) w = 0.0;
    for (auto& b : layer.wv.bias.mutable_data()) b = rng.normal();
  }
  const Batch b = gradcheck_batch();
  const auto fa = model.fuse_audio(b.audio, b.video, Mode::eval);
  for (std::size_t n = 0; n < 4; ++n) {
    for (std::size_t t = 0; t < 3; ++t) {
      ref::Vec row = ref::sample(b.audio, n)[t];
      for (const auto& layer : model.branch_a) {
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.wv.bias.data()[c];
        row = ref::layer_norm(row, layer.norm);
      }
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(fa.at({n, t, c}), row[c], 1e-12);
    }
  }
}

TEST(Fuse, KeysComeFromRawOtherModality) {
  // Changing only the video input must change the audio branch output of
  // every layer, including the second.
  FoalNet model(toy());
  model.set_mode(Mode::eval);
  const Batch b = gradcheck_batch();
  const auto base = model.fuse_audio(b.audio, b.video, Mode::eval);
  const auto other = model.fuse_audio(b.audio, scale(b.video, -1.0), Mode::eval);
  EXPECT_GT(foal::testing::max_abs_diff(base.data(), other.data()), 1e-6);
}

TEST(Classify, ShapeAtFourClasses) {
  FoalNet model(toy());
  const Batch b = gradcheck_batch();
  EXPECT_EQ(model.classify(b.audio, b.video).shape(), (Shape{4, 4}));
}

TEST(Classify, ZeroHeadGivesUniformSoftmax) {
  FoalNet model(toy());
  for (auto& v : model.emo_head.weight.mutable_data()) v = 0.0;
  const Batch b = gradcheck_batch();
  const auto logits = model.classify(b.audio, b.video);
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
  const auto probs = softmax(logits, 1);
  for (double p : probs.data()) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Classify, MatchesStraightLineOracle) {
  FoalNet model(toy());
  model.set_mode(Mode::eval);
  Rng rng(3);
  for (const auto& p : model.parameters()) {
    if (p.name.ends_with("bias")) {
      for (auto& v : Tensor(p.tensor).mutable_data()) v = 0.3 * rng.normal();
    }
  }
  const Batch b = gradcheck_batch();
  const auto logits = model.classify(b.audio, b.video);
  const auto expect = ref::classify(model, b.audio, b.video);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(logits.at({n, c}), expect[n][c], 1e-10);
}

TEST(TotalLoss, ComponentArithmetic) {
  const auto total = add(add(Tensor::scalar(1.0), Tensor::scalar(0.5)), scale(Tensor::scalar(2.0), 0.01));
  EXPECT_NEAR(total.item(), 1.52, 1e-15);
}

TEST(TotalLoss, BaselineIsCrossEntropyOnly) {
  auto cfg = toy();
  cfg.enable_avel = false;
  cfg.enable_mem = false;
  FoalNet model(cfg);
  const auto v = model.total_loss(gradcheck_batch()).values();
  EXPECT_EQ(v.l_a, 0.0);
  EXPECT_EQ(v.l_m, 0.0);
  EXPECT_EQ(v.l_total, v.l_ce);
}

TEST(TotalLoss, TotalIsBitExactSumOfParts) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    FoalNet model(toy(seed));
    const auto v = model.total_loss(gradcheck_batch(seed)).values();
    EXPECT_EQ(v.l_total, v.l_ce + v.l_a + 0.01 * v.l_m);
  }
}

TEST(TotalLoss, MatchesStraightLineOracle) {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    for (bool per_positive : {false, true}) {
      auto cfg = toy(seed);
      cfg.align.per_positive_norm = per_positive;
      FoalNet model(cfg);
      model.set_mode(Mode::eval);
      const Batch b = gradcheck_batch(seed + 20);
      const auto got = model.total_loss(b).values();
      const auto expect = ref::total_loss(model, b);
      EXPECT_NEAR(got.l_ce, expect.l_ce, 1e-10);
      EXPECT_NEAR(got.l_a, expect.l_a, 1e-10);
      EXPECT_NEAR(got.l_m, expect.l_m, 1e-10);
      EXPECT_NEAR(got.l_total, expect.l_total, 1e-10);
    }
  }
}

TEST(TotalLoss, InvariantUnderBatchPermutation) {
  FoalNet model(toy());
  model.set_mode(Mode::eval);
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const Batch b = gradcheck_batch(40 + trial);
    std::vector<std::size_t> perm(b.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span(perm));
    const auto x = model.total_loss(b).values();
    const auto y = model.total_loss(permuted(b, perm)).values();
    EXPECT_NEAR(x.l_ce, y.l_ce, 1e-12);
    EXPECT_NEAR(x.l_a, y.l_a, 1e-12);
    EXPECT_NEAR(x.l_m, y.l_m, 1e-12);
    EXPECT_NEAR(x.l_total, y.l_total, 1e-12);
  }
}

TEST(TotalLoss, DisabledTasksLeaveTheirParametersUntouched) {
  struct Case {
    bool avel, mem;
  };
  for (const Case c : {Case{false, false}, Case{true, false}, Case{false, true}, Case{true, true}}) {
    auto cfg = toy();
    cfg.enable_avel = c.avel;
    cfg.enable_mem = c.mem;
    FoalNet model(cfg);
    model.set_mode(Mode::eval);
    const auto terms = model.total_loss(gradcheck_batch());
    if (!c.avel) EXPECT_EQ(terms.align.item(), 0.0);
    if (!c.mem) EXPECT_EQ(terms.match.item(), 0.0);
    model.zero_grad();
    backward(terms.total);
    for (const auto& p : model.parameters()) {
      const bool projection = p.name.starts_with("proj_");
      const bool matching = p.name.starts_with("match_head") || p.name.starts_with("adapter_");
      const double e = grad_energy(p.tensor);
      if (projection) EXPECT_EQ(e > 0.0, c.avel) << p.name;
      if (matching) EXPECT_EQ(e > 0.0, c.mem) << p.name;
      if (p.name.starts_with("emo_head")) EXPECT_GT(e, 0.0);
    }
  }
}

TEST(TotalLoss, SingleSampleWithAuxTasksRejected) {
  FoalNet model(toy());
  Batch b = gradcheck_batch();
  const std::vector<std::size_t> one{0};
  Batch single;
  single.audio = index_rows(b.audio, one);
  single.video = index_rows(b.video, one);
  single.labels = {b.labels[0]};
  EXPECT_THROW(model.total_loss(single), ConfigError);
}

TEST(Checkpoint, RoundTripRestoresEveryValue) {
  FoalNet a(toy(1)), b(toy(2));
  decode_checkpoint_into(encode_checkpoint(a.parameters()), b);
  EXPECT_EQ(a.snapshot(), b.snapshot());
}

TEST(Checkpoint, ShapeOrNameMismatchRejected) {
  FoalNet a(toy());
  auto cfg = toy();
  cfg.proj_hidden = 12;
  FoalNet b(cfg);
  EXPECT_THROW(decode_checkpoint_into(encode_checkpoint(a.parameters()), b), DataError);
  auto params = a.parameters();
  params[0].name = "renamed";
  EXPECT_THROW(decode_checkpoint_into(encode_checkpoint(params), a), DataError);
  auto bytes = encode_checkpoint(a.parameters());
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint_into(bytes, a), BadMagicError);
  bytes = encode_checkpoint(a.parameters());
  bytes.pop_back();
  EXPECT_THROW(decode_checkpoint_into(bytes, a), DataError);
}

TEST(GoldenFiles, CheckpointLoadsBitExactly) {
  const auto path = std::filesystem::path(FOAL_GOLDEN_DIR) / "tiny.ckpt";
  FoalNet model(foal::testing::golden_model_config());
  load_checkpoint(path, model);
  const auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto v = params[k].tensor.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      ASSERT_EQ(std::bit_cast<std::uint64_t>(v[i]),
                std::bit_cast<std::uint64_t>(foal::testing::golden_value(k, i)))
          << params[k].name << "[" << i << "]";
    }
  }
  const auto raw = byte_io::read_file(path);
  EXPECT_EQ(encode_checkpoint(params), raw);
  EXPECT_EQ(std::vector<std::uint8_t>(raw.begin(), raw.begin() + 8),
            (std::vector<std::uint8_t>{'F', 'O', 'C', 'K', 1, 0, 0, 0}));
}
