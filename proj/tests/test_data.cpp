#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "tinydd/data.hpp"

using namespace tinydd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path p = fs::temp_directory_path() / "tinydd-data-test";
  fs::create_directories(p);
  return p;
}

TEST(Blobs, GenerationIsDeterministicAndInRange) {
  BlobConfig cfg;
  cfg.per_class = 20;
  const LabeledDataset a = generate_blobs(cfg);
  const LabeledDataset b = generate_blobs(cfg);
  a.validate();
  ASSERT_EQ(a.images.size(), b.images.size());
  EXPECT_EQ(std::memcmp(a.images.data(), b.images.data(),
                        a.images.size() * sizeof(double)),
            0);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.size(), 60);
  EXPECT_EQ(a.domain_id, "blobs-a");

  BlobConfig other = cfg;
  other.seed = 2;
  const LabeledDataset c = generate_blobs(other);
  EXPECT_NE(std::memcmp(a.images.data(), c.images.data(),
                        a.images.size() * sizeof(double)),
            0);
}

TEST(Blobs, LinearProbeSeparatesAtDefaultDifficulty) {
  BlobConfig train_cfg;
  train_cfg.per_class = 200;
  BlobConfig test_cfg = train_cfg;
  test_cfg.seed = 99;
  const double acc = linear_probe_accuracy(generate_blobs(train_cfg),
                                           generate_blobs(test_cfg));
  EXPECT_GT(acc, 0.80);
  EXPECT_LT(acc, 0.999);  // leaves headroom for the nonlinear models
}

TEST(Blobs, SeparationControlsDifficulty) {
  auto probe_at = [](double sep) {
    BlobConfig tr;
    tr.per_class = 150;
    tr.separation = sep;
    BlobConfig te = tr;
    te.seed = 99;
    return linear_probe_accuracy(generate_blobs(tr), generate_blobs(te));
  };
  EXPECT_GT(probe_at(3.0), probe_at(0.7) + 0.05);
}

TEST(Stripes, GenerationValidatesAndUsesOwnLabelSpace) {
  StripeConfig cfg;
  cfg.per_class = 30;
  const LabeledDataset ds = generate_stripes(cfg);
  ds.validate();
  EXPECT_EQ(ds.classes, 4);
  EXPECT_EQ(ds.domain_id, "stripes-b");
  EXPECT_EQ(ds.size(), 120);
}

TEST(SyntheticInit, RealSampleCopiesClassImages) {
  BlobConfig cfg;
  cfg.per_class = 40;
  const LabeledDataset real = generate_blobs(cfg);
  const SyntheticDataset syn =
      init_synthetic(real, 5, InitMode::real_sample, 7);
  syn.validate();
  EXPECT_EQ(syn.size(), 15);
  const std::int64_t pix = syn.image_numel();
  for (std::int64_t i = 0; i < syn.size(); ++i) {
    const int cls = syn.labels[i];
    bool found = false;
    for (std::int64_t j = 0; j < real.size() && !found; ++j) {
      if (real.labels[j] != cls) continue;
      found = std::memcmp(syn.images.data() + i * pix,
                          real.images.data() + j * pix,
                          pix * sizeof(double)) == 0;
    }
    EXPECT_TRUE(found) << "synthetic image " << i
                       << " is not a class-" << cls << " sample";
  }
}

TEST(SyntheticInit, NoiseModeCentersNearMidGray) {
  BlobConfig cfg;
  cfg.per_class = 10;
  const LabeledDataset real = generate_blobs(cfg);
  const SyntheticDataset syn =
      init_synthetic(real, 20, InitMode::gaussian_noise, 3);
  syn.validate();
  double mean = 0.0;
  for (const double v : syn.images) mean += v;
  mean /= static_cast<double>(syn.images.size());
  EXPECT_GT(mean, 0.4);
  EXPECT_LT(mean, 0.6);
}

TEST(SyntheticInit, LabelsAreClassMajorAndFixed) {
  BlobConfig cfg;
  cfg.per_class = 12;
  const LabeledDataset real = generate_blobs(cfg);
  const SyntheticDataset syn =
      init_synthetic(real, 4, InitMode::real_sample, 1);
  for (std::int64_t i = 0; i < syn.size(); ++i)
    EXPECT_EQ(syn.labels[i], i / 4);
}

TEST(Samplers, ClassSamplerCoversAnEpochWithoutReplacement) {
  BlobConfig cfg;
  cfg.per_class = 30;
  const LabeledDataset ds = generate_blobs(cfg);
  ClassBatchSampler sampler(ds, 5);
  std::vector<int> seen;
  for (int k = 0; k < 3; ++k) {
    const auto idx = sampler.draw(1, 10);
    seen.insert(seen.end(), idx.begin(), idx.end());
  }
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen.end(), std::unique(seen.begin(), seen.end()));
  for (const int i : seen) EXPECT_EQ(ds.labels[i], 1);
}

TEST(Samplers, CopyReproducesDraws) {
  BlobConfig cfg;
  cfg.per_class = 25;
  const LabeledDataset ds = generate_blobs(cfg);
  ClassBatchSampler a(ds, 9);
  ClassBatchSampler b = a;
  for (int k = 0; k < 12; ++k) EXPECT_EQ(a.draw(k % 3, 7), b.draw(k % 3, 7));
}

TEST(Samplers, TenThousandDrawsStayWithinThreeSigmaOfUniform) {
  BlobConfig cfg;
  cfg.per_class = 50;
  const LabeledDataset ds = generate_blobs(cfg);
  ClassBatchSampler sampler(ds, 11);
  std::vector<int> count(ds.size(), 0);
  const int draws = 10000;
  for (int k = 0; k < draws; ++k)
    for (const int i : sampler.draw(0, 1)) ++count[i];
  const double expect = static_cast<double>(draws) / 50.0;
  const double sigma = std::sqrt(expect * (1.0 - 1.0 / 50.0));
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] != 0) {
      EXPECT_EQ(count[i], 0);
      continue;
    }
    EXPECT_NEAR(count[i], expect, 3.0 * sigma);
  }
}

TEST(Serialization, LabeledRoundTripIsBitExact) {
  BlobConfig cfg;
  cfg.per_class = 15;
  const LabeledDataset ds = generate_blobs(cfg);
  const std::string path = (temp_dir() / "labeled.bin").string();
  save_labeled(path, ds);
  const LabeledDataset back = load_labeled(path);
  EXPECT_EQ(ds.domain_id, back.domain_id);
  EXPECT_EQ(ds.classes, back.classes);
  EXPECT_EQ(ds.image_shape, back.image_shape);
  EXPECT_EQ(ds.labels, back.labels);
  ASSERT_EQ(ds.images.size(), back.images.size());
  EXPECT_EQ(std::memcmp(ds.images.data(), back.images.data(),
                        ds.images.size() * sizeof(double)),
            0);
}

TEST(Serialization, SyntheticRoundTripIsBitExact) {
  BlobConfig cfg;
  cfg.per_class = 20;
  const SyntheticDataset syn =
      init_synthetic(generate_blobs(cfg), 6, InitMode::gaussian_noise, 2);
  const std::string path = (temp_dir() / "synthetic.bin").string();
  save_synthetic(path, syn);
  const SyntheticDataset back = load_synthetic(path);
  EXPECT_EQ(syn.ipc, back.ipc);
  EXPECT_EQ(syn.labels, back.labels);
  ASSERT_EQ(syn.images.size(), back.images.size());
  EXPECT_EQ(std::memcmp(syn.images.data(), back.images.data(),
                        syn.images.size() * sizeof(double)),
            0);
}

TEST(Serialization, LoaderRejectsOutOfRangePixels) {
  BlobConfig cfg;
  cfg.per_class = 5;
  LabeledDataset ds = generate_blobs(cfg);
  const std::string path = (temp_dir() / "bad.bin").string();
  ds.images[3] = 0.25;
  save_labeled(path, ds);
  // corrupt one stored pixel to sit outside [0, 1]
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(0, std::ios::end);
  const auto size = static_cast<std::int64_t>(f.tellg());
  const double bad = 1.5;
  f.seekp(size - 8);
  f.write(reinterpret_cast<const char*>(&bad), 8);
  f.close();
  EXPECT_THROW(load_labeled(path), std::runtime_error);
}

TEST(Serialization, LoaderRejectsForeignMagic) {
  const std::string path = (temp_dir() / "foreign.bin").string();
  std::ofstream(path) << "not a dataset at all";
  EXPECT_THROW(load_labeled(path), std::runtime_error);
}

TEST(Serialization, LoaderRejectsWrongKind) {
  BlobConfig cfg;
  cfg.per_class = 5;
  const std::string path = (temp_dir() / "kind.bin").string();
  save_labeled(path, generate_blobs(cfg));
  EXPECT_THROW(load_synthetic(path), std::runtime_error);
}

}  // namespace
