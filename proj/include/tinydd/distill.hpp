#pragma once

// The outer distillation loop: repeatedly build a matching loss over the
// synthetic pixels, optionally add pool supervision, take one SGD step on the
// pixels, clamp to [0, 1], and log. Each iteration records onto a fresh graph
// that dies with the step. Every random choice flows from the four named
// seeds, so a stored job config replays bit-exactly.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tinydd/augment.hpp"
#include "tinydd/data.hpp"
#include "tinydd/matchers.hpp"
#include "tinydd/models.hpp"
#include "tinydd/supervision.hpp"

namespace tinydd {

struct DistillSeeds {
  std::uint64_t data = 1;     // real-batch sampling and synthetic init
  std::uint64_t model = 2;    // matcher model and embedder inits
  std::uint64_t augment = 3;  // siamese transform draws
  std::uint64_t pool = 4;     // supervision checkpoint choice
};

struct IterationRecord {
  int iteration = 0;
  double base_loss = 0.0;
  double supervision_loss = 0.0;
  double total_loss = 0.0;
};

struct RunLog {
  std::vector<IterationRecord> rows;
  std::vector<std::string> notes;
};

using LogSink = std::function<void(const IterationRecord&)>;

struct DistillJob {
  ArchitectureSpec arch;
  int ipc = 10;
  InitMode init_mode = InitMode::real_sample;
  MatcherConfig matcher;
  SupervisionConfig supervision;
  double pixel_lr = 0.0;  // 0 picks the matcher's default step size
  double pixel_momentum = 0.5;
  int iterations = -1;  // -1 means matcher.outer_iterations; 0 is a no-op run
  DistillSeeds seeds;
  AugmentFamily augment;
  LogSink sink;  // optional progress callback, not part of the stored config

  double effective_pixel_lr() const {
    if (pixel_lr > 0.0) return pixel_lr;
    return matcher.kind == MatcherKind::dm ? 1.0 : 0.1;
  }

  int budget() const {
    return iterations < 0 ? matcher.outer_iterations : iterations;
  }

  void validate() const {
    arch.validate();
    matcher.validate();
    supervision.validate();
    check(ipc >= 1, "distill job needs ipc >= 1");
    check(pixel_lr >= 0.0 && pixel_momentum >= 0.0 && pixel_momentum < 1.0,
          "pixel optimizer settings out of range");
    check(iterations >= -1, "iteration budget cannot be below zero");
  }
};

inline nlohmann::ordered_json job_to_json(const DistillJob& job) {
  nlohmann::ordered_json j;
  j["arch"] = job.arch.id();
  j["classes"] = job.arch.classes;
  j["input_shape"] = job.arch.input_shape;
  j["ipc"] = job.ipc;
  j["init"] = init_mode_name(job.init_mode);
  j["iterations"] = job.iterations;
  j["matcher"] = {{"kind", matcher_name(job.matcher.kind)},
                  {"outer_iterations", job.matcher.outer_iterations},
                  {"reinit_period", job.matcher.reinit_period},
                  {"inner_steps", job.matcher.inner_steps},
                  {"inner_lr", job.matcher.inner_lr},
                  {"inner_momentum", job.matcher.inner_momentum},
                  {"real_batch_per_class", job.matcher.real_batch_per_class},
                  {"whole_set", job.matcher.whole_set}};
  j["supervision"] = {{"kind", supervision_name(job.supervision.kind)},
                      {"alpha", job.supervision.alpha},
                      {"real_batch", job.supervision.real_batch},
                      {"epoch_subset", job.supervision.epoch_subset},
                      {"ensemble_average", job.supervision.ensemble_average}};
  j["pixels"] = {{"lr", job.pixel_lr}, {"momentum", job.pixel_momentum}};
  j["seeds"] = {{"data", job.seeds.data},
                {"model", job.seeds.model},
                {"augment", job.seeds.augment},
                {"pool", job.seeds.pool}};
  std::vector<std::string> enabled;
  for (const TransformKind k : job.augment.enabled)
    enabled.push_back(transform_name(k));
  j["augment"] = {{"enabled", enabled},
                  {"max_shift", job.augment.max_shift},
                  {"scale_range", job.augment.scale_range},
                  {"brightness_range", job.augment.brightness_range},
                  {"cutout_frac", job.augment.cutout_frac}};
  return j;
}

inline TransformKind parse_transform(const std::string& s) {
  const TransformKind kinds[] = {TransformKind::identity, TransformKind::flip,
                                 TransformKind::shift, TransformKind::scale,
                                 TransformKind::brightness,
                                 TransformKind::cutout};
  for (const TransformKind k : kinds)
    if (s == transform_name(k)) return k;
  throw std::invalid_argument("unknown transform '" + s + "'");
}

inline DistillJob job_from_json(const nlohmann::json& j) {
  DistillJob job;
  Shape input = j.value("input_shape", std::vector<std::int64_t>{1, 16, 16});
  job.arch = parse_arch(j.at("arch"), input, j.value("classes", 3));
  job.ipc = j.value("ipc", 10);
  const std::string init = j.value("init", "real-sample");
  check(init == "real-sample" || init == "gaussian-noise",
        "unknown init mode '" + init + "'");
  job.init_mode =
      init == "real-sample" ? InitMode::real_sample : InitMode::gaussian_noise;
  job.iterations = j.value("iterations", -1);
  if (j.contains("matcher")) {
    const auto& m = j.at("matcher");
    job.matcher.kind = parse_matcher(m.value("kind", "dsa"));
    job.matcher.outer_iterations = m.value("outer_iterations", 500);
    job.matcher.reinit_period = m.value("reinit_period", 50);
    job.matcher.inner_steps = m.value("inner_steps", 10);
    job.matcher.inner_lr = m.value("inner_lr", 0.01);
    job.matcher.inner_momentum = m.value("inner_momentum", 0.5);
    job.matcher.real_batch_per_class = m.value("real_batch_per_class", 64);
    job.matcher.whole_set = m.value("whole_set", false);
  }
  if (j.contains("supervision")) {
    const auto& s = j.at("supervision");
    job.supervision.kind = parse_supervision(s.value("kind", "none"));
    job.supervision.alpha = s.value("alpha", 0.5);
    job.supervision.real_batch = s.value("real_batch", 64);
    job.supervision.epoch_subset =
        s.value("epoch_subset", std::vector<int>{});
    job.supervision.ensemble_average = s.value("ensemble_average", false);
  }
  if (j.contains("pixels")) {
    job.pixel_lr = j.at("pixels").value("lr", 0.0);
    job.pixel_momentum = j.at("pixels").value("momentum", 0.5);
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    job.seeds.data = s.value("data", std::uint64_t{1});
    job.seeds.model = s.value("model", std::uint64_t{2});
    job.seeds.augment = s.value("augment", std::uint64_t{3});
    job.seeds.pool = s.value("pool", std::uint64_t{4});
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    if (a.contains("enabled")) {
      job.augment.enabled.clear();
      for (const auto& name : a.at("enabled"))
        job.augment.enabled.push_back(parse_transform(name));
    }
    job.augment.max_shift = a.value("max_shift", std::int64_t{2});
    job.augment.scale_range = a.value("scale_range", 0.2);
    job.augment.brightness_range = a.value("brightness_range", 0.15);
    job.augment.cutout_frac = a.value("cutout_frac", 0.3);
  }
  job.validate();
  return job;
}

struct AlphaResolution {
  bool is_sweep = false;
  double alpha = 0.5;
  std::vector<double> grid;
};

// Turns a supervision config plus an optional grid into either one weight or
// a sweep descriptor. Negative weights are rejected in both forms.
inline AlphaResolution resolve_alpha(const SupervisionConfig& cfg,
                                     const std::vector<double>& grid = {}) {
  cfg.validate();
  if (grid.empty()) return {false, cfg.alpha, {}};
  for (const double a : grid)
    check(a >= 0.0, "alpha grid contains a negative weight");
  return {true, 0.0, grid};
}

inline std::vector<DistillJob> expand_alpha_sweep(
    const DistillJob& base, const std::vector<double>& grid) {
  const AlphaResolution res = resolve_alpha(base.supervision, grid);
  std::vector<DistillJob> jobs;
  if (!res.is_sweep) {
    jobs.push_back(base);
    return jobs;
  }
  for (const double a : res.grid) {
    DistillJob j = base;
    j.supervision.alpha = a;
    jobs.push_back(std::move(j));
  }
  return jobs;
}

struct RunResult {
  SyntheticDataset synthetic;
  RunLog log;
};

// One full distillation run. pool may be null only when supervision is off;
// a clom request against a pool from another domain or label space is
// switched to cclom with a note in the log.
inline RunResult run_distillation(const DistillJob& job_in,
                                  const LabeledDataset& target,
                                  const PretrainedPool* pool) {
  DistillJob job = job_in;
  job.validate();
  check(job.arch.classes == target.classes &&
            job.arch.input_shape == target.image_shape,
        "distillation architecture does not match the target dataset");
  const bool supervised = job.supervision.kind != SupervisionConfig::Kind::none;
  check(supervised == (pool != nullptr),
        supervised ? "supervision requested but no pool given"
                   : "a pool was given but supervision kind is none");

  RunResult result;
  PretrainedPool active_pool;
  if (supervised) {
    active_pool = *pool;
    active_pool.set_epoch_subset(job.supervision.epoch_subset);
    if (job.supervision.kind == SupervisionConfig::Kind::clom &&
        (active_pool.source_classes != target.classes ||
         active_pool.source_domain != target.domain_id)) {
      job.supervision.kind = SupervisionConfig::Kind::cclom;
      result.log.notes.push_back(
          "supervision switched from clom to cclom: pool source '" +
          active_pool.source_domain + "' (" +
          std::to_string(active_pool.source_classes) +
          " classes) does not match target '" + target.domain_id + "' (" +
          std::to_string(target.classes) + " classes)");
    }
  }

  SyntheticDataset syn = init_synthetic(target, job.ipc, job.init_mode,
                                        derive_seed(job.seeds.data, 101));
  const int budget = job.budget();
  if (budget == 0) {
    result.synthetic = std::move(syn);
    return result;
  }

  ClassBatchSampler class_sampler(target, derive_seed(job.seeds.data, 202));
  BatchSampler mixed_sampler(target.size(), derive_seed(job.seeds.data, 303));
  Rng aug_rng(derive_seed(job.seeds.augment, 404));
  Rng pool_rng(derive_seed(job.seeds.pool, 505));
  const double lr = job.effective_pixel_lr();
  std::vector<double> velocity(syn.images.size(), 0.0);
  const bool use_cclom = job.supervision.kind == SupervisionConfig::Kind::cclom;
  bool warned_skip = false;

  ModelCheckpoint matcher_model;
  auto by_class = target.indices_by_class();

  for (int t = 0; t < budget; ++t) {
    const bool dm = job.matcher.kind == MatcherKind::dm;
    if (dm) {
      matcher_model = build_model(job.arch, derive_seed(job.seeds.model, t));
    } else if (t % job.matcher.reinit_period == 0) {
      matcher_model = build_model(
          job.arch, derive_seed(job.seeds.model, t / job.matcher.reinit_period));
    }

    std::vector<Tensor> real_batches;
    real_batches.reserve(target.classes);
    for (int c = 0; c < target.classes; ++c) {
      const std::vector<int> idx =
          job.matcher.whole_set
              ? by_class[c]
              : class_sampler.draw(c, job.matcher.real_batch_per_class);
      real_batches.push_back(target.batch(idx));
    }

    Graph g;
    const Tensor pixels = syn.attach(g);
    Tensor base;
    switch (job.matcher.kind) {
      case MatcherKind::dc: {
        const NamedTensors theta = attach_parameters(matcher_model, g);
        base = dc_loss(job.arch, theta, pixels, job.ipc, real_batches);
        break;
      }
      case MatcherKind::dsa: {
        const NamedTensors theta = attach_parameters(matcher_model, g);
        base = dsa_loss(job.arch, theta, pixels, job.ipc, real_batches,
                        job.augment, aug_rng);
        break;
      }
      case MatcherKind::dm:
        base = dm_loss(matcher_model, pixels, job.ipc, real_batches);
        break;
    }

    double sup_value = 0.0;
    Tensor total = base;
    if (supervised && job.supervision.alpha > 0.0) {
      Tensor real_images;
      std::vector<int> real_labels;
      if (use_cclom) {
        const std::vector<int> bidx =
            mixed_sampler.draw(job.supervision.real_batch);
        real_images = target.batch(bidx);
        real_labels = target.labels_of(bidx);
      }
      auto term_for = [&](const ModelCheckpoint& ckpt) -> Tensor {
        if (!use_cclom) return clom(ckpt, pixels, syn.labels);
        const CclomResult r =
            cclom(ckpt, pixels, syn.labels, real_images, real_labels);
        if (r.skipped && !warned_skip) {
          result.log.notes.push_back(
              "cclom skipped at iteration " + std::to_string(t) +
              ": degenerate feature distances");
          warned_skip = true;
        }
        return r.loss;
      };
      Tensor sup;
      if (job.supervision.ensemble_average) {
        for (const std::size_t i : active_pool.active) {
          const Tensor term = term_for(active_pool.checkpoints[i]);
          sup = sup.defined() ? add(sup, term) : term;
        }
        sup = scale(sup, 1.0 / static_cast<double>(active_pool.active.size()));
      } else {
        sup = term_for(active_pool.sample(pool_rng));
      }
      sup_value = sup.item();
      if (sup.attached()) total = add(base, scale(sup, job.supervision.alpha));
    }

    const std::vector<Tensor> grads = grad(total, {pixels});
    const auto& gv = grads[0].values();
    for (std::size_t i = 0; i < syn.images.size(); ++i) {
      velocity[i] = job.pixel_momentum * velocity[i] + gv[i];
      syn.images[i] =
          std::clamp(syn.images[i] - lr * velocity[i], 0.0, 1.0);
    }

    IterationRecord rec{t, base.item(), sup_value, total.item()};
    result.log.rows.push_back(rec);
    if (job.sink) job.sink(rec);

    if (!dm && job.matcher.inner_steps > 0)
      matcher_model =
          inner_update(matcher_model, syn, job.matcher.inner_steps,
                       job.matcher.inner_lr, job.matcher.inner_momentum);
  }

  result.synthetic = std::move(syn);
  return result;
}

inline void write_log_csv(const std::string& path, const RunLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write log to " + path);
  out << "iteration,base_loss,supervision_loss,total_loss\n";
  char buf[128];
  for (const IterationRecord& r : log.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.iteration,
                  r.base_loss, r.supervision_loss, r.total_loss);
    out << buf;
  }
  for (const std::string& note : log.notes) out << "# " << note << "\n";
}

// Persists everything needed to replay: the job config, the loss trace, and
// the distilled images themselves.
inline void write_run_outputs(const std::string& dir, const DistillJob& job,
                              const RunResult& result) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["kind"] = "distill-run";
  manifest["job"] = job_to_json(job);
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
  write_log_csv((fs::path(dir) / "log.csv").string(), result.log);
  save_synthetic((fs::path(dir) / "synthetic.bin").string(), result.synthetic);
}

inline DistillJob load_job_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  const nlohmann::json j = nlohmann::json::parse(in);
  return job_from_json(j.contains("job") ? j.at("job") : j);
}

}  // namespace tinydd
