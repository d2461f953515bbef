#pragma once

// Datasets and samplers. Two synthetic-image domains are generated
// procedurally: "blobs-a" places one Gaussian intensity bump per class on a
// noisy background, "stripes-b" draws oriented gratings. Pixels always live in
// [0, 1]; loaders reject anything outside that range.

#include <string>
#include <vector>

#include "tinydd/autodiff.hpp"
#include "tinydd/ops.hpp"
#include "tinydd/rng.hpp"
#include "tinydd/serialize.hpp"
#include "tinydd/tensor.hpp"

namespace tinydd {

struct LabeledDataset {
  Shape image_shape;  // (channels, h, w)
  int classes = 0;
  std::string domain_id;
  std::vector<double> images;  // n * channels * h * w, values in [0, 1]
  std::vector<int> labels;

  std::int64_t size() const {
    return static_cast<std::int64_t>(labels.size());
  }

  std::int64_t image_numel() const { return numel(image_shape); }

  void validate() const {
    check(image_shape.size() == 3, "dataset image shape must be rank 3");
    check(classes >= 2, "dataset needs at least two classes");
    check(static_cast<std::int64_t>(images.size()) ==
              size() * image_numel(),
          "dataset pixel count does not match label count");
    for (const int y : labels)
      check(y >= 0 && y < classes,
            "label " + std::to_string(y) + " outside [0, " +
                std::to_string(classes) + ")");
    for (const double v : images)
      check(v >= 0.0 && v <= 1.0,
            "pixel value " + std::to_string(v) + " outside [0, 1]");
  }

  std::vector<std::vector<int>> indices_by_class() const {
    std::vector<std::vector<int>> by_class(classes);
    for (std::int64_t i = 0; i < size(); ++i)
      by_class[labels[i]].push_back(static_cast<int>(i));
    return by_class;
  }

  // Detached (b, c, h, w) tensor of the selected images.
  Tensor batch(const std::vector<int>& idx) const {
    const std::int64_t pix = image_numel();
    std::vector<double> v(idx.size() * pix);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      check(idx[i] >= 0 && idx[i] < size(), "batch index out of range");
      std::copy_n(images.begin() + idx[i] * pix, pix, v.begin() + i * pix);
    }
    Shape s{static_cast<std::int64_t>(idx.size()), image_shape[0],
            image_shape[1], image_shape[2]};
    return Tensor(std::move(s), std::move(v));
  }

  std::vector<int> labels_of(const std::vector<int>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
  }
};

struct BlobConfig {
  int classes = 3;
  int per_class = 200;
  int image_size = 16;
  double separation = 2.0;  // anchor spacing in units of bump width
  std::uint64_t seed = 1;
};

// One soft intensity bump per class, anchors evenly spaced on a circle whose
// radius grows with separation, plus per-image anchor jitter, amplitude
// jitter, and pixel noise that shrinks as separation grows.
inline LabeledDataset generate_blobs(const BlobConfig& cfg) {
  check(cfg.classes >= 2 && cfg.per_class >= 1 && cfg.image_size >= 4,
        "blob config out of range");
  check(cfg.separation > 0.0, "blob separation must be positive");
  LabeledDataset ds;
  const int s = cfg.image_size;
  ds.image_shape = {1, s, s};
  ds.classes = cfg.classes;
  ds.domain_id = "blobs-a";
  Rng rng(derive_seed(cfg.seed, 0xb10b));

  const double center = (s - 1) / 2.0;
  const double width = 0.14 * s;
  const double radius = cfg.separation * width / 1.45;
  const double noise_sd = 0.21 / std::sqrt(cfg.separation);
  const double jitter = 0.17 * s;  // large enough to defeat pixel templates

  for (int c = 0; c < cfg.classes; ++c) {
    const double angle = 2.0 * std::numbers::pi * c / cfg.classes + 0.4;
    const double ax = center + radius * std::cos(angle);
    const double ay = center + radius * std::sin(angle);
    for (int i = 0; i < cfg.per_class; ++i) {
      const double jx = ax + rng.uniform(-jitter, jitter);
      const double jy = ay + rng.uniform(-jitter, jitter);
      const double amp = rng.uniform(0.5, 0.95);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double d2 = (x - jx) * (x - jx) + (y - jy) * (y - jy);
          double v = 0.15 + amp * std::exp(-d2 / (2.0 * width * width)) +
                     rng.normal(0.0, noise_sd);
          ds.images.push_back(std::clamp(v, 0.0, 1.0));
        }
      ds.labels.push_back(c);
    }
  }
  return ds;
}

struct StripeConfig {
  int classes = 4;
  int per_class = 200;
  int image_size = 16;
  std::uint64_t seed = 1;
};

// Oriented sinusoidal gratings, one orientation per class, with random phase,
// frequency jitter, and pixel noise. A deliberately different image family
// from the blobs, with its own label space.
inline LabeledDataset generate_stripes(const StripeConfig& cfg) {
  check(cfg.classes >= 2 && cfg.per_class >= 1 && cfg.image_size >= 4,
        "stripe config out of range");
  LabeledDataset ds;
  const int s = cfg.image_size;
  ds.image_shape = {1, s, s};
  ds.classes = cfg.classes;
  ds.domain_id = "stripes-b";
  Rng rng(derive_seed(cfg.seed, 0x57a1));

  for (int c = 0; c < cfg.classes; ++c) {
    const double angle = std::numbers::pi * c / cfg.classes + 0.3;
    const double nx = std::cos(angle), ny = std::sin(angle);
    for (int i = 0; i < cfg.per_class; ++i) {
      const double freq = rng.uniform(1.7, 2.3);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = rng.uniform(0.6, 0.95);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double t = (x * nx + y * ny) / s;
          double v = 0.5 +
                     0.35 * amp *
                         std::sin(2.0 * std::numbers::pi * freq * t + phase) +
                     rng.normal(0.0, 0.06);
          ds.images.push_back(std::clamp(v, 0.0, 1.0));
        }
      ds.labels.push_back(c);
    }
  }
  return ds;
}

enum class InitMode { real_sample, gaussian_noise };

inline const char* init_mode_name(InitMode m) {
  return m == InitMode::real_sample ? "real-sample" : "gaussian-noise";
}

struct SyntheticDataset {
  Shape image_shape;
  int classes = 0;
  int ipc = 0;  // images per class
  std::string source_domain;
  std::vector<double> images;  // class-major: ipc rows for class 0, then 1, ...
  std::vector<int> labels;     // fixed and class-balanced, never learned

  std::int64_t size() const { return static_cast<std::int64_t>(classes) * ipc; }
  std::int64_t image_numel() const { return numel(image_shape); }

  void validate() const {
    check(image_shape.size() == 3, "synthetic image shape must be rank 3");
    check(classes >= 2 && ipc >= 1, "synthetic set needs classes >= 2, ipc >= 1");
    check(static_cast<std::int64_t>(images.size()) == size() * image_numel(),
          "synthetic pixel count inconsistent");
    check(static_cast<std::int64_t>(labels.size()) == size(),
          "synthetic label count inconsistent");
    for (std::int64_t i = 0; i < size(); ++i)
      check(labels[i] == static_cast<int>(i / ipc),
            "synthetic labels must stay class-major and balanced");
    for (const double v : images)
      check(v >= 0.0 && v <= 1.0, "synthetic pixel outside [0, 1]");
  }

  // Leaf over every pixel: the optimization variable of distillation.
  Tensor attach(Graph& g) const {
    Shape s{size(), image_shape[0], image_shape[1], image_shape[2]};
    return g.leaf(std::move(s), images);
  }

  Tensor as_tensor() const {
    Shape s{size(), image_shape[0], image_shape[1], image_shape[2]};
    return Tensor(std::move(s), images);
  }

  void clamp01() {
    for (double& v : images) v = std::clamp(v, 0.0, 1.0);
  }
};

inline SyntheticDataset init_synthetic(const LabeledDataset& real, int ipc,
                                       InitMode mode, std::uint64_t seed) {
  check(ipc >= 1, "ipc must be >= 1");
  SyntheticDataset syn;
  syn.image_shape = real.image_shape;
  syn.classes = real.classes;
  syn.ipc = ipc;
  syn.source_domain = real.domain_id;
  const std::int64_t pix = syn.image_numel();
  syn.images.reserve(syn.size() * pix);
  Rng rng(derive_seed(seed, 0x1c17));

  if (mode == InitMode::real_sample) {
    auto by_class = real.indices_by_class();
    for (int c = 0; c < real.classes; ++c) {
      check(static_cast<int>(by_class[c].size()) >= ipc,
            "class " + std::to_string(c) + " has fewer than ipc samples");
      rng.shuffle(by_class[c]);
      for (int i = 0; i < ipc; ++i) {
        const int idx = by_class[c][i];
        syn.images.insert(syn.images.end(),
                          real.images.begin() + idx * pix,
                          real.images.begin() + (idx + 1) * pix);
      }
    }
  } else {
    for (std::int64_t i = 0; i < syn.size() * pix; ++i)
      syn.images.push_back(std::clamp(rng.normal(0.5, 0.2), 0.0, 1.0));
  }
  for (std::int64_t i = 0; i < syn.size(); ++i)
    syn.labels.push_back(static_cast<int>(i / syn.ipc));
  return syn;
}

// Epoch-style sampling without replacement inside each class. Copying the
// sampler copies its full state, so a copy reproduces the original's draws.
class ClassBatchSampler {
 public:
  ClassBatchSampler(const LabeledDataset& ds, std::uint64_t seed)
      : rng_(derive_seed(seed, 0xc1a5)), pools_(ds.indices_by_class()) {
    cursors_.assign(pools_.size(), 0);
    for (auto& pool : pools_) rng_.shuffle(pool);
  }

  std::vector<int> draw(int cls, int batch) {
    check(cls >= 0 && cls < static_cast<int>(pools_.size()),
          "sampler class out of range");
    check(batch >= 1, "sampler batch must be >= 1");
    std::vector<int> out;
    out.reserve(batch);
    auto& pool = pools_[cls];
    auto& cur = cursors_[cls];
    while (static_cast<int>(out.size()) < batch) {
      if (cur == pool.size()) {
        rng_.shuffle(pool);
        cur = 0;
      }
      out.push_back(pool[cur++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::vector<int>> pools_;
  std::vector<std::size_t> cursors_;
};

// Same idea over the whole dataset, for mixed-label batches.
class BatchSampler {
 public:
  BatchSampler(std::int64_t n, std::uint64_t seed)
      : rng_(derive_seed(seed, 0xba7c)) {
    pool_.resize(n);
    for (std::int64_t i = 0; i < n; ++i) pool_[i] = static_cast<int>(i);
    rng_.shuffle(pool_);
  }

  std::vector<int> draw(int batch) {
    check(batch >= 1, "sampler batch must be >= 1");
    std::vector<int> out;
    out.reserve(batch);
    while (static_cast<int>(out.size()) < batch) {
      if (cur_ == pool_.size()) {
        rng_.shuffle(pool_);
        cur_ = 0;
      }
      out.push_back(pool_[cur_++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<int> pool_;
  std::size_t cur_ = 0;
};

inline void save_labeled(const std::string& path, const LabeledDataset& ds) {
  ds.validate();
  BinWriter w(path);
  w.header(FileKind::labeled_dataset);
  w.str(ds.domain_id);
  w.u32(static_cast<std::uint32_t>(ds.classes));
  w.i64_array(ds.image_shape);
  std::vector<std::int64_t> labels(ds.labels.begin(), ds.labels.end());
  w.i64_array(labels);
  w.f64_array(ds.images);
  w.finish();
}

inline LabeledDataset load_labeled(const std::string& path) {
  BinReader r(path);
  r.header_expect(FileKind::labeled_dataset, "labeled dataset");
  LabeledDataset ds;
  ds.domain_id = r.str();
  ds.classes = static_cast<int>(r.u32());
  ds.image_shape = r.i64_array();
  const auto labels = r.i64_array();
  ds.labels.assign(labels.begin(), labels.end());
  ds.images = r.f64_array();
  try {
    ds.validate();
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return ds;
}

inline void save_synthetic(const std::string& path,
                           const SyntheticDataset& syn) {
  syn.validate();
  BinWriter w(path);
  w.header(FileKind::synthetic_dataset);
  w.str(syn.source_domain);
  w.u32(static_cast<std::uint32_t>(syn.classes));
  w.u32(static_cast<std::uint32_t>(syn.ipc));
  w.i64_array(syn.image_shape);
  w.f64_array(syn.images);
  w.finish();
}

inline SyntheticDataset load_synthetic(const std::string& path) {
  BinReader r(path);
  r.header_expect(FileKind::synthetic_dataset, "synthetic dataset");
  SyntheticDataset syn;
  syn.source_domain = r.str();
  syn.classes = static_cast<int>(r.u32());
  syn.ipc = static_cast<int>(r.u32());
  syn.image_shape = r.i64_array();
  syn.images = r.f64_array();
  for (std::int64_t i = 0; i < syn.size(); ++i)
    syn.labels.push_back(static_cast<int>(i / syn.ipc));
  try {
    syn.validate();
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return syn;
}

// Multinomial logistic regression on raw pixels, full-batch gradient descent.
// A sanity meter for generated datasets, not a serious classifier.
inline double linear_probe_accuracy(const LabeledDataset& train,
                                    const LabeledDataset& test,
                                    int iterations = 250, double lr = 0.5) {
  const std::int64_t d = train.image_numel();
  std::vector<double> wv(train.classes * d, 0.0);
  std::vector<double> bv(train.classes, 0.0);
  std::vector<int> all(train.size());
  for (std::int64_t i = 0; i < train.size(); ++i) all[i] = static_cast<int>(i);
  const Tensor x = reshape(train.batch(all), {train.size(), d});

  for (int it = 0; it < iterations; ++it) {
    Graph g;
    Tensor w = g.leaf({train.classes, d}, wv);
    Tensor b = g.leaf({train.classes}, bv);
    Tensor loss = cross_entropy_mean(linear(x, w, b), train.labels);
    auto grads = grad(loss, {w, b});
    for (std::size_t i = 0; i < wv.size(); ++i)
      wv[i] -= lr * grads[0].values()[i];
    for (std::size_t i = 0; i < bv.size(); ++i)
      bv[i] -= lr * grads[1].values()[i];
  }

  std::vector<int> tidx(test.size());
  for (std::int64_t i = 0; i < test.size(); ++i) tidx[i] = static_cast<int>(i);
  const Tensor tx = reshape(test.batch(tidx), {test.size(), d});
  const Tensor logits =
      linear(tx, Tensor({test.classes, d}, wv), Tensor({test.classes}, bv));
  const auto pred = argmax_rows(logits);
  std::int64_t hit = 0;
  for (std::int64_t i = 0; i < test.size(); ++i)
    if (pred[i] == test.labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

}  // namespace tinydd
