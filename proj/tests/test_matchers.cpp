#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "helpers.hpp"
#include "tinydd/matchers.hpp"

using namespace tinydd;

namespace {

// Plain double-loop reference for the rowwise cosine distance, including the
// convention that a zero-norm row scores cosine 0 and so contributes 1.
double cosine_distance_oracle(const NamedTensors& a, const NamedTensors& b) {
  double total = 0.0;
  for (std::size_t e = 0; e < a.size(); ++e) {
    const Shape& s = a[e].second.shape();
    const std::int64_t rows = s.size() >= 2 ? s[0] : 1;
    const std::int64_t cols = numel(s) / rows;
    const auto& va = a[e].second.values();
    const auto& vb = b[e].second.values();
    for (std::int64_t r = 0; r < rows; ++r) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) {
        const double x = va[r * cols + c], y = vb[r * cols + c];
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      const double cosine =
          (na == 0.0 || nb == 0.0) ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
      total += 1.0 - cosine;
    }
  }
  return total;
}

NamedTensors random_named(Rng& rng, bool with_zero_row) {
  NamedTensors out;
  std::vector<double> w = tdt::random_values(4 * 6, rng);
  if (with_zero_row) std::fill(w.begin() + 6, w.begin() + 12, 0.0);
  out.emplace_back("layer.w", Tensor({4, 6}, std::move(w)));
  out.emplace_back("layer.b", Tensor({4}, tdt::random_values(4, rng)));
  out.emplace_back("fc.w", Tensor({2, 5}, tdt::random_values(10, rng)));
  return out;
}

TEST(CosineDistance, MatchesBruteForceOracle) {
  Rng rng(31);
  const NamedTensors a = random_named(rng, false);
  const NamedTensors b = random_named(rng, false);
  EXPECT_NEAR(layerwise_cosine_distance(a, b).item(),
              cosine_distance_oracle(a, b), 1e-12);
}

TEST(CosineDistance, ZeroNormRowContributesExactlyOne) {
  Rng rng(32);
  const NamedTensors a = random_named(rng, true);   // row 1 of layer.w zeroed
  const NamedTensors b = random_named(rng, false);
  const double got = layerwise_cosine_distance(a, b).item();
  EXPECT_NEAR(got, cosine_distance_oracle(a, b), 1e-12);
  EXPECT_TRUE(std::isfinite(got));
}

TEST(CosineDistance, HandCases) {
  auto one = [](std::vector<double> v) {
    const auto cols = static_cast<std::int64_t>(v.size());
    NamedTensors n;
    n.emplace_back("p", Tensor({1, cols}, std::move(v)));
    return n;
  };
  EXPECT_NEAR(layerwise_cosine_distance(one({1, 2}), one({1, 2})).item(), 0.0,
              1e-12);
  EXPECT_NEAR(layerwise_cosine_distance(one({1, 0}), one({0, 3})).item(), 1.0,
              1e-12);
  EXPECT_NEAR(layerwise_cosine_distance(one({1, 2}), one({-2, -4})).item(), 2.0,
              1e-12);
}

TEST(CosineDistance, RejectsMismatchedMaps) {
  Rng rng(33);
  NamedTensors a = random_named(rng, false);
  NamedTensors b = random_named(rng, false);
  b[1].first = "layer.bias";
  EXPECT_THROW(layerwise_cosine_distance(a, b), std::invalid_argument);
}

// Shared fixture pieces: a tiny dataset and class batches for matcher calls.
struct MatcherSetup {
  LabeledDataset data;
  ArchitectureSpec spec;
  SyntheticDataset syn;
  std::vector<Tensor> real_batches;

  explicit MatcherSetup(const std::string& arch, int ipc = 2,
                        int real_per_class = 3) {
    BlobConfig cfg;
    cfg.classes = 2;
    cfg.per_class = 8;
    cfg.image_size = 8;
    data = generate_blobs(cfg);
    spec = parse_arch(arch, data.image_shape, data.classes);
    syn = init_synthetic(data, ipc, InitMode::real_sample, 5);
    const auto by_class = data.indices_by_class();
    for (int c = 0; c < data.classes; ++c)
      real_batches.push_back(data.batch(std::vector<int>(
          by_class[c].begin(), by_class[c].begin() + real_per_class)));
  }
};

TEST(GradientMatching, AgreesWithManualPerClassComposition) {
  MatcherSetup ms("mlp-d1-w2");
  const ModelCheckpoint ckpt = build_model(ms.spec, 17);

  Graph g;
  const Tensor pixels = ms.syn.attach(g);
  const NamedTensors theta = attach_parameters(ckpt, g);
  const double got =
      dc_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches).item();

  // replicate with library gradients but the plain-loop distance oracle
  double want = 0.0;
  const auto wrt = detail::theta_tensors(theta);
  for (int c = 0; c < ms.spec.classes; ++c) {
    const Tensor syn_c = slice_rows(pixels, c * ms.syn.ipc, ms.syn.ipc);
    const auto gs = detail::branch_gradients(
        ms.spec, theta, wrt, syn_c, std::vector<int>(ms.syn.ipc, c),
        default_logits_loss, true);
    const auto gt = detail::branch_gradients(
        ms.spec, theta, wrt, ms.real_batches[c],
        std::vector<int>(ms.real_batches[c].shape()[0], c),
        default_logits_loss, false);
    want += cosine_distance_oracle(gs, gt);
  }
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(GradientMatching, IdenticalBranchesScoreZero) {
  // a conv family: instance norm keeps activations centered, so no unit goes
  // silent and every gradient row carries signal
  MatcherSetup ms("conv-net-d1-w3", 3, 3);
  // real batches equal to the synthetic class slices
  std::vector<Tensor> same;
  const Tensor all = ms.syn.as_tensor();
  for (int c = 0; c < ms.spec.classes; ++c)
    same.push_back(slice_rows(all, c * ms.syn.ipc, ms.syn.ipc));

  Graph g;
  const Tensor pixels = ms.syn.attach(g);
  const NamedTensors theta = attach_parameters(build_model(ms.spec, 17), g);
  EXPECT_NEAR(dc_loss(ms.spec, theta, pixels, ms.syn.ipc, same).item(), 0.0,
              1e-10);
}

TEST(GradientMatching, PixelGradientMatchesFiniteDifferences) {
  MatcherSetup ms("mlp-d1-w2");
  const ModelCheckpoint ckpt = build_model(ms.spec, 23);

  auto loss_at = [&](const std::vector<double>& px) {
    Graph g;
    Tensor pixels = g.leaf({ms.syn.size(), 1, 8, 8}, px);
    const NamedTensors theta = attach_parameters(ckpt, g);
    return dc_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches).item();
  };

  Graph g;
  Tensor pixels = ms.syn.attach(g);
  const NamedTensors theta = attach_parameters(ckpt, g);
  const Tensor gp = grad(
      dc_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches), {pixels})[0];
  EXPECT_LT(tdt::max_grad_rel_err(loss_at, ms.syn.images, gp.values(), 1e-5),
            1e-3);
}

TEST(GradientMatching, ConvPixelGradientMatchesFiniteDifferences) {
  MatcherSetup ms("conv-net-d1-w2");
  const ModelCheckpoint ckpt = build_model(ms.spec, 29);

  auto loss_at = [&](const std::vector<double>& px) {
    Graph g;
    Tensor pixels = g.leaf({ms.syn.size(), 1, 8, 8}, px);
    const NamedTensors theta = attach_parameters(ckpt, g);
    return dc_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches).item();
  };

  Graph g;
  Tensor pixels = ms.syn.attach(g);
  const NamedTensors theta = attach_parameters(ckpt, g);
  const Tensor gp = grad(
      dc_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches), {pixels})[0];
  EXPECT_LT(tdt::max_grad_rel_err(loss_at, ms.syn.images, gp.values(), 1e-5),
            1e-3);
}

TEST(GradientMatching, PositiveLossRescalingCancelsExactly) {
  MatcherSetup ms("mlp-d1-w2");
  const ModelCheckpoint ckpt = build_model(ms.spec, 17);
  const LogitsLoss doubled = [](const Tensor& logits,
                                const std::vector<int>& labels) {
    return scale(cross_entropy_mean(logits, labels), 2.0);
  };
  Graph g;
  const Tensor pixels = ms.syn.attach(g);
  const NamedTensors theta = attach_parameters(ckpt, g);
  const double base =
      dc_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches).item();
  const double scaled = dc_loss(ms.spec, theta, pixels, ms.syn.ipc,
                                ms.real_batches, doubled)
                            .item();
  EXPECT_DOUBLE_EQ(base, scaled);
}

TEST(SiameseMatching, IdentityFamilyReproducesPlainMatchingBitExactly) {
  MatcherSetup ms("mlp-d1-w2");
  const ModelCheckpoint ckpt = build_model(ms.spec, 17);
  AugmentFamily identity_only;
  identity_only.enabled = {TransformKind::identity};

  Graph g1;
  Tensor p1 = ms.syn.attach(g1);
  const double plain =
      dc_loss(ms.spec, attach_parameters(ckpt, g1), p1, ms.syn.ipc,
              ms.real_batches)
          .item();

  Graph g2;
  Tensor p2 = ms.syn.attach(g2);
  Rng rng(3);
  const double siamese =
      dsa_loss(ms.spec, attach_parameters(ckpt, g2), p2, ms.syn.ipc,
               ms.real_batches, identity_only, rng)
          .item();
  EXPECT_EQ(plain, siamese);
}

TEST(SiameseMatching, BothBranchesSeeTheSameDrawPerClass) {
  struct Recorder : SiameseObserver {
    std::vector<std::pair<AugmentationParams, int>> calls;
    void on_apply(const AugmentationParams& p, int branch) override {
      calls.emplace_back(p, branch);
    }
  };
  MatcherSetup ms("mlp-d1-w2");
  Recorder rec;
  Graph g;
  Tensor pixels = ms.syn.attach(g);
  const NamedTensors theta = attach_parameters(build_model(ms.spec, 17), g);
  AugmentFamily fam;
  Rng rng(9);
  dsa_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches, fam, rng, &rec);
  ASSERT_EQ(rec.calls.size(), 4u);  // 2 classes x 2 branches
  for (int c = 0; c < 2; ++c) {
    const auto& syn_call = rec.calls[2 * c];
    const auto& real_call = rec.calls[2 * c + 1];
    EXPECT_EQ(syn_call.second, 0);
    EXPECT_EQ(real_call.second, 1);
    EXPECT_EQ(syn_call.first.kind, real_call.first.kind);
    EXPECT_EQ(syn_call.first.dy, real_call.first.dy);
    EXPECT_EQ(syn_call.first.dx, real_call.first.dx);
    EXPECT_EQ(syn_call.first.factor, real_call.first.factor);
    EXPECT_EQ(syn_call.first.delta, real_call.first.delta);
    EXPECT_EQ(syn_call.first.cy, real_call.first.cy);
    EXPECT_EQ(syn_call.first.cx, real_call.first.cx);
  }
}

TEST(SiameseMatching, FlipFamilyGradientMatchesFiniteDifferences) {
  MatcherSetup ms("mlp-d1-w2", 1, 2);
  const ModelCheckpoint ckpt = build_model(ms.spec, 23);
  AugmentFamily flips;
  flips.enabled = {TransformKind::flip};

  auto loss_at = [&](const std::vector<double>& px) {
    Graph g;
    Tensor pixels = g.leaf({ms.syn.size(), 1, 8, 8}, px);
    const NamedTensors theta = attach_parameters(ckpt, g);
    Rng rng(1);
    return dsa_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches, flips,
                    rng)
        .item();
  };

  Graph g;
  Tensor pixels = ms.syn.attach(g);
  const NamedTensors theta = attach_parameters(ckpt, g);
  Rng rng(1);
  const Tensor gp =
      grad(dsa_loss(ms.spec, theta, pixels, ms.syn.ipc, ms.real_batches, flips,
                    rng),
           {pixels})[0];
  EXPECT_LT(tdt::max_grad_rel_err(loss_at, ms.syn.images, gp.values(), 1e-5),
            1e-3);
}

TEST(DistributionMatching, AgreesWithPlainLoopOracle) {
  MatcherSetup ms("conv-net-d1-w3", 2, 4);
  const ModelCheckpoint embedder = build_model(ms.spec, 41);

  Graph g;
  const Tensor pixels = ms.syn.attach(g);
  const double got = dm_loss(embedder, pixels, ms.syn.ipc, ms.real_batches).item();

  double want = 0.0;
  const std::int64_t fdim = ms.spec.feature_dim();
  for (int c = 0; c < ms.spec.classes; ++c) {
    const Tensor syn_c = slice_rows(ms.syn.as_tensor(), c * ms.syn.ipc,
                                    ms.syn.ipc);
    const auto fs = forward(embedder, syn_c).features.values();
    const auto ft = forward(embedder, ms.real_batches[c]).features.values();
    const std::int64_t nt = ms.real_batches[c].shape()[0];
    for (std::int64_t j = 0; j < fdim; ++j) {
      double a = 0.0, b = 0.0;
      for (int i = 0; i < ms.syn.ipc; ++i) a += fs[i * fdim + j];
      for (std::int64_t i = 0; i < nt; ++i) b += ft[i * fdim + j];
      const double d = a / ms.syn.ipc - b / static_cast<double>(nt);
      want += d * d;
    }
  }
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(DistributionMatching, MatchedMeansScoreZero) {
  MatcherSetup ms("mlp-d1-w2", 3, 3);
  std::vector<Tensor> same;
  const Tensor all = ms.syn.as_tensor();
  for (int c = 0; c < ms.spec.classes; ++c)
    same.push_back(slice_rows(all, c * ms.syn.ipc, ms.syn.ipc));
  Graph g;
  const Tensor pixels = ms.syn.attach(g);
  EXPECT_NEAR(dm_loss(build_model(ms.spec, 41), pixels, ms.syn.ipc, same).item(),
              0.0, 1e-12);
}

TEST(DistributionMatching, PixelGradientMatchesFiniteDifferences) {
  MatcherSetup ms("conv-net-d1-w2", 1, 2);
  const ModelCheckpoint embedder = build_model(ms.spec, 43);
  auto loss_at = [&](const std::vector<double>& px) {
    Graph g;
    Tensor pixels = g.leaf({ms.syn.size(), 1, 8, 8}, px);
    return dm_loss(embedder, pixels, ms.syn.ipc, ms.real_batches).item();
  };
  Graph g;
  Tensor pixels = ms.syn.attach(g);
  const Tensor gp =
      grad(dm_loss(embedder, pixels, ms.syn.ipc, ms.real_batches), {pixels})[0];
  EXPECT_LT(tdt::max_grad_rel_err(loss_at, ms.syn.images, gp.values(), 1e-5),
            1e-4);
}

TEST(InnerUpdate, ZeroStepsIsANoOp) {
  MatcherSetup ms("mlp-d1-w2");
  const ModelCheckpoint ckpt = build_model(ms.spec, 3);
  const ModelCheckpoint out = inner_update(ckpt, ms.syn, 0, 0.01);
  ASSERT_EQ(out.parameters.size(), ckpt.parameters.size());
  for (std::size_t i = 0; i < out.parameters.size(); ++i)
    EXPECT_EQ(std::memcmp(out.parameters[i].second.values().data(),
                          ckpt.parameters[i].second.values().data(),
                          out.parameters[i].second.values().size() * 8),
              0);
}

TEST(InnerUpdate, LowersTheSyntheticLoss) {
  MatcherSetup ms("mlp-d1-w4", 4);
  const ModelCheckpoint before = build_model(ms.spec, 3);
  const ModelCheckpoint after = inner_update(before, ms.syn, 20, 0.05);
  const Tensor x = ms.syn.as_tensor();
  const double l0 =
      cross_entropy_mean(forward(before, x).logits, ms.syn.labels).item();
  const double l1 =
      cross_entropy_mean(forward(after, x).logits, ms.syn.labels).item();
  EXPECT_LT(l1, l0);
  EXPECT_EQ(after.provenance.source, before.provenance.source);
}

TEST(MatcherConfig, ValidateRejectsNonsense) {
  MatcherConfig cfg;
  cfg.outer_iterations = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.inner_momentum = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.real_batch_per_class = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_EQ(parse_matcher("dm"), MatcherKind::dm);
  EXPECT_THROW(parse_matcher("mmd"), std::invalid_argument);
}

}  // namespace
