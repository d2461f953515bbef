#pragma once

// Supervision from pools of pre-trained models. A pool spans seeds,
// architectures, and training epochs; distillation samples one checkpoint per
// step and adds either a classification loss on the synthetic images (clom)
// or a label-agnostic contrastive feature loss against a real batch (cclom).
// Checkpoint parameters stay detached throughout: supervision shapes the
// synthetic pixels, never the frozen models.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tinydd/data.hpp"
#include "tinydd/matchers.hpp"
#include "tinydd/models.hpp"

namespace tinydd {

struct PretrainedPool {
  std::vector<ModelCheckpoint> checkpoints;
  std::string source_domain;
  int source_classes = 0;
  std::vector<std::uint64_t> seeds;   // distinct, in first-seen order
  std::vector<std::string> arch_ids;  // distinct, in first-seen order
  std::vector<int> epochs;            // distinct, ascending
  std::vector<std::size_t> active;    // indices sample() may return

  static PretrainedPool from_checkpoints(std::vector<ModelCheckpoint> ckpts,
                                         std::string source_domain,
                                         int source_classes) {
    check(!ckpts.empty(), "a pool needs at least one checkpoint");
    PretrainedPool pool;
    pool.source_domain = std::move(source_domain);
    pool.source_classes = source_classes;
    pool.checkpoints = std::move(ckpts);
    for (const ModelCheckpoint& c : pool.checkpoints) {
      check(c.provenance.source == pool.source_domain,
            "checkpoint trained on '" + c.provenance.source +
                "' cannot join a '" + pool.source_domain + "' pool");
      check(c.spec.classes == pool.source_classes,
            "checkpoint class count disagrees with the pool");
      check(c.provenance.epoch >= 1, "pool checkpoints must be trained");
      pool.note_axes(c);
    }
    std::sort(pool.epochs.begin(), pool.epochs.end());
    pool.set_epoch_subset({});
    return pool;
  }

  int n_seeds() const { return static_cast<int>(seeds.size()); }
  int n_archs() const { return static_cast<int>(arch_ids.size()); }
  int n_epochs() const { return static_cast<int>(epochs.size()); }

  // A fully populated pool holds exactly one checkpoint per
  // (seed, architecture, epoch) combination.
  void validate_full() const {
    const std::size_t want = static_cast<std::size_t>(n_seeds()) * n_archs() *
                             n_epochs();
    check(checkpoints.size() == want,
          "pool holds " + std::to_string(checkpoints.size()) +
              " checkpoints, expected " + std::to_string(want) + " (" +
              std::to_string(n_seeds()) + " seeds x " +
              std::to_string(n_archs()) + " archs x " +
              std::to_string(n_epochs()) + " epochs)");
    for (const std::uint64_t s : seeds)
      for (const std::string& a : arch_ids)
        for (const int e : epochs) {
          std::size_t hits = 0;
          for (const ModelCheckpoint& c : checkpoints)
            if (c.provenance.seed == s && c.spec.id() == a &&
                c.provenance.epoch == e)
              ++hits;
          check(hits == 1, "pool is missing or duplicates seed " +
                               std::to_string(s) + ", " + a + ", epoch " +
                               std::to_string(e));
        }
  }

  // Restricts sampling to the given epochs (empty means all). This is how
  // early-epoch supervision is selected without rebuilding the pool.
  void set_epoch_subset(const std::vector<int>& subset) {
    for (const int e : subset)
      check(std::find(epochs.begin(), epochs.end(), e) != epochs.end(),
            "epoch " + std::to_string(e) + " is not in this pool");
    active.clear();
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      const int e = checkpoints[i].provenance.epoch;
      if (subset.empty() ||
          std::find(subset.begin(), subset.end(), e) != subset.end())
        active.push_back(i);
    }
    check(!active.empty(), "epoch subset leaves the pool empty");
  }

  std::size_t sample_index(Rng& rng) const {
    check(!active.empty(), "cannot sample from an empty pool");
    return active[rng.below(active.size())];
  }

  const ModelCheckpoint& sample(Rng& rng) const {
    return checkpoints[sample_index(rng)];
  }

  PretrainedPool filter(
      const std::function<bool(const ModelCheckpoint&)>& keep) const {
    std::vector<ModelCheckpoint> kept;
    for (const ModelCheckpoint& c : checkpoints)
      if (keep(c)) kept.push_back(c);
    return from_checkpoints(std::move(kept), source_domain, source_classes);
  }

 private:
  void note_axes(const ModelCheckpoint& c) {
    if (std::find(seeds.begin(), seeds.end(), c.provenance.seed) == seeds.end())
      seeds.push_back(c.provenance.seed);
    const std::string id = c.spec.id();
    if (std::find(arch_ids.begin(), arch_ids.end(), id) == arch_ids.end())
      arch_ids.push_back(id);
    if (std::find(epochs.begin(), epochs.end(), c.provenance.epoch) ==
        epochs.end())
      epochs.push_back(c.provenance.epoch);
  }
};

// Mean classification loss of a frozen model on the synthetic images. The
// model must share the synthetic label space.
inline Tensor clom(const ModelCheckpoint& ckpt, const Tensor& syn_images,
                   const std::vector<int>& syn_labels) {
  check(ckpt.spec.input_shape ==
            Shape(syn_images.shape().begin() + 1, syn_images.shape().end()),
        "clom image shape does not match model " + ckpt.spec.id());
  for (const int y : syn_labels)
    check(y >= 0 && y < ckpt.spec.classes,
          "clom label " + std::to_string(y) + " outside the model's " +
              std::to_string(ckpt.spec.classes) + " classes");
  return cross_entropy_mean(forward(ckpt, syn_images).logits, syn_labels);
}

// M[i][j] = 1 iff synthetic image i and real image j carry the same label.
inline Tensor correspondence_matrix(const std::vector<int>& syn_labels,
                                    const std::vector<int>& real_labels) {
  const std::int64_t s = static_cast<std::int64_t>(syn_labels.size());
  const std::int64_t b = static_cast<std::int64_t>(real_labels.size());
  check(s >= 1 && b >= 1, "correspondence matrix needs nonempty label lists");
  std::vector<double> m(static_cast<std::size_t>(s * b), 0.0);
  for (std::int64_t i = 0; i < s; ++i)
    for (std::int64_t j = 0; j < b; ++j)
      if (syn_labels[i] == real_labels[j]) m[i * b + j] = 1.0;
  return Tensor({s, b}, std::move(m));
}

struct CclomResult {
  Tensor loss;          // scalar in [0, 1]; detached zero when skipped
  bool skipped = false; // all pairwise distances vanished
};

// Ratio of matched to total cosine distance between row-normalized feature
// sets. Minimizing it pulls each synthetic feature toward the real features
// that share its label, without needing the extractor to know those labels.
inline CclomResult cclom_from_features(const Tensor& syn_features,
                                       const Tensor& real_features,
                                       const Tensor& correspondence) {
  check(syn_features.rank() == 2 && real_features.rank() == 2 &&
            syn_features.shape()[1] == real_features.shape()[1],
        "feature sets must be (n, dim) with a shared dim");
  check(correspondence.shape() ==
            Shape({syn_features.shape()[0], real_features.shape()[0]}),
        "correspondence matrix shape mismatch");
  const std::int64_t dim = syn_features.shape()[1];
  const Tensor ns = guarded_row_norm(sum_cols(square(syn_features)));
  const Tensor nb = guarded_row_norm(sum_cols(square(real_features)));
  const Tensor fs = div(syn_features, tile_cols(ns, dim));
  const Tensor fb = div(real_features, tile_cols(nb, dim));
  const Tensor dist = sub(Tensor::full(correspondence.shape(), 1.0),
                          matmul(fs, transpose(fb)));
  const Tensor den = sum_all(dist);
  if (den.item() < 1e-8) {
    if (syn_features.attached())
      syn_features.graph()->warn(
          "cclom skipped: feature distances degenerate (all cosines ~1)");
    return {Tensor::scalar(0.0), true};
  }
  return {div(sum_all(mul(dist, correspondence)), den), false};
}

// Feature-space supervision against a real batch, using the frozen model
// purely as an extractor; its own label space never enters.
inline CclomResult cclom(const ModelCheckpoint& ckpt, const Tensor& syn_images,
                         const std::vector<int>& syn_labels,
                         const Tensor& real_batch,
                         const std::vector<int>& real_labels) {
  check(static_cast<std::int64_t>(syn_labels.size()) == syn_images.shape()[0] &&
            static_cast<std::int64_t>(real_labels.size()) ==
                real_batch.shape()[0],
        "cclom label counts must match their image batches");
  const Tensor fs = forward(ckpt, syn_images).features;
  const Tensor fb = forward(ckpt, real_batch).features;
  return cclom_from_features(fs, fb,
                             correspondence_matrix(syn_labels, real_labels));
}

struct SupervisionConfig {
  enum class Kind : std::uint8_t { none = 0, clom = 1, cclom = 2 };

  Kind kind = Kind::none;
  double alpha = 0.5;             // weight on the supervision term
  int real_batch = 64;            // target-domain batch size for cclom
  std::vector<int> epoch_subset;  // pool epochs to sample; empty = all
  bool ensemble_average = false;  // average over the pool instead of sampling

  void validate() const {
    check(alpha >= 0.0, "supervision weight alpha must be >= 0");
    check(real_batch >= 1, "supervision real batch must be >= 1");
  }
};

inline const char* supervision_name(SupervisionConfig::Kind k) {
  switch (k) {
    case SupervisionConfig::Kind::none: return "none";
    case SupervisionConfig::Kind::clom: return "clom";
    case SupervisionConfig::Kind::cclom: return "cclom";
  }
  return "?";
}

inline SupervisionConfig::Kind parse_supervision(const std::string& s) {
  if (s == "none") return SupervisionConfig::Kind::none;
  if (s == "clom") return SupervisionConfig::Kind::clom;
  if (s == "cclom") return SupervisionConfig::Kind::cclom;
  throw std::invalid_argument("unknown supervision kind '" + s + "'");
}

inline std::string pool_entry_filename(const ModelCheckpoint& c) {
  return c.spec.id() + "_s" + std::to_string(c.provenance.seed) + "_e" +
         std::to_string(c.provenance.epoch) + ".bin";
}

inline void save_pool(const std::string& dir, const PretrainedPool& pool) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["source_domain"] = pool.source_domain;
  manifest["source_classes"] = pool.source_classes;
  manifest["entries"] = nlohmann::ordered_json::array();
  for (const ModelCheckpoint& c : pool.checkpoints) {
    const std::string file = pool_entry_filename(c);
    save_checkpoint((fs::path(dir) / file).string(), c);
    manifest["entries"].push_back({{"file", file},
                                   {"arch", c.spec.id()},
                                   {"seed", c.provenance.seed},
                                   {"epoch", c.provenance.epoch}});
  }
  std::ofstream out(fs::path(dir) / "pool.json");
  if (!out) throw std::runtime_error("cannot write pool manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

// Loads a pool directory and cross-checks every manifest row against the
// provenance embedded in its checkpoint file; any disagreement is an error.
inline PretrainedPool load_pool(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(dir) / "pool.json";
  std::ifstream in(manifest_path);
  if (!in)
    throw std::runtime_error("no pool manifest at " + manifest_path.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  const std::string source = manifest.at("source_domain");
  const int classes = manifest.at("source_classes");
  std::vector<ModelCheckpoint> ckpts;
  for (const auto& entry : manifest.at("entries")) {
    const std::string file = entry.at("file");
    ModelCheckpoint c = load_checkpoint((fs::path(dir) / file).string());
    if (c.spec.id() != entry.at("arch").get<std::string>() ||
        c.provenance.seed != entry.at("seed").get<std::uint64_t>() ||
        c.provenance.epoch != entry.at("epoch").get<int>())
      throw std::runtime_error(
          "pool manifest entry '" + file +
          "' does not match the checkpoint's own provenance");
    ckpts.push_back(std::move(c));
  }
  return PretrainedPool::from_checkpoints(std::move(ckpts), source, classes);
}

}  // namespace tinydd
