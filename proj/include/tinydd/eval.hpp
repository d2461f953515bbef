#pragma once

// Train-on-synthetic evaluation: fresh models are trained on a distilled set
// under the shared augmentation family, then scored on held-out real data.
// Reports carry per-repeat accuracies plus a config fingerprint and survive a
// JSON round-trip exactly.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tinydd/augment.hpp"
#include "tinydd/data.hpp"
#include "tinydd/models.hpp"

namespace tinydd {

struct EvalConfig {
  int epochs = 200;
  int batch = 64;  // clipped to the synthetic set size
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay = 0.1;
  int decay_at = 100;  // epoch at which the step size drops
  bool augment = true;
  AugmentFamily family;
};

inline nlohmann::ordered_json eval_config_json(const EvalConfig& cfg) {
  return {{"epochs", cfg.epochs},       {"batch", cfg.batch},
          {"lr", cfg.lr},               {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"lr_decay", cfg.lr_decay},   {"decay_at", cfg.decay_at},
          {"augment", cfg.augment}};
}

struct EvalReport {
  std::string arch_id;
  int repeats = 0;
  std::vector<double> accuracies;  // successful repeats only
  int failed = 0;
  double mean = 0.0;
  double stddev = 0.0;
  bool valid = false;  // false when more than one in five repeats failed
  std::string fingerprint;
};

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  return {{"arch", r.arch_id},
          {"repeats", r.repeats},
          {"accuracies", r.accuracies},
          {"failed", r.failed},
          {"mean", r.mean},
          {"stddev", r.stddev},
          {"valid", r.valid},
          {"fingerprint", r.fingerprint}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.arch_id = j.at("arch");
  r.repeats = j.at("repeats");
  r.accuracies = j.at("accuracies").get<std::vector<double>>();
  r.failed = j.at("failed");
  r.mean = j.at("mean");
  r.stddev = j.at("stddev");
  r.valid = j.at("valid");
  r.fingerprint = j.at("fingerprint");
  return r;
}

namespace detail {

inline Tensor synthetic_batch(const SyntheticDataset& syn,
                              const std::vector<int>& idx) {
  const std::int64_t pix = syn.image_numel();
  std::vector<double> v(idx.size() * pix);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(syn.images.begin() + idx[i] * pix, pix, v.begin() + i * pix);
  return Tensor({static_cast<std::int64_t>(idx.size()), syn.image_shape[0],
                 syn.image_shape[1], syn.image_shape[2]},
                std::move(v));
}

inline std::string fingerprint(const ArchitectureSpec& arch,
                               const EvalConfig& cfg, int repeats,
                               std::uint64_t seed) {
  nlohmann::ordered_json j = eval_config_json(cfg);
  j["arch"] = arch.id();
  j["repeats"] = repeats;
  j["seed"] = seed;
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

}  // namespace detail

// Trains one fresh model per repeat on the synthetic set and scores it on the
// test set. The synthetic set itself is read-only here. A repeat that goes
// non-finite counts as failed and is excluded from the mean; the report stays
// valid while no more than one in five repeats fail.
inline EvalReport evaluate(const SyntheticDataset& syn,
                           const LabeledDataset& test,
                           const ArchitectureSpec& arch, int repeats,
                           std::uint64_t seed, const EvalConfig& cfg = {}) {
  arch.validate();
  syn.validate();
  check(repeats >= 1, "evaluate needs repeats >= 1");
  check(arch.classes == syn.classes && arch.input_shape == syn.image_shape,
        "evaluate architecture does not match the synthetic set");
  check(test.classes == syn.classes && test.image_shape == syn.image_shape,
        "evaluate test set does not match the synthetic set");

  EvalReport report;
  report.arch_id = arch.id();
  report.repeats = repeats;
  report.fingerprint = detail::fingerprint(arch, cfg, repeats, seed);
  const auto defs = parameter_defs(arch);
  const int batch = static_cast<int>(
      std::min<std::int64_t>(cfg.batch, syn.size()));
  const std::int64_t steps_per_epoch = (syn.size() + batch - 1) / batch;

  for (int r = 0; r < repeats; ++r) {
    bool failed = false;
    const ModelCheckpoint init =
        build_model(arch, derive_seed(seed, 1000 + r));
    std::vector<std::vector<double>> params;
    for (const auto& [name, t] : init.parameters) params.push_back(t.values());
    SgdMomentum opt(params.size(), cfg.momentum, cfg.weight_decay);
    BatchSampler sampler(syn.size(), derive_seed(seed, 2000 + r));
    Rng aug_rng(derive_seed(seed, 3000 + r));

    for (int epoch = 1; epoch <= cfg.epochs && !failed; ++epoch) {
      const double lr = epoch > cfg.decay_at ? cfg.lr * cfg.lr_decay : cfg.lr;
      for (std::int64_t s = 0; s < steps_per_epoch && !failed; ++s) {
        Graph g;
        NamedTensors leaves;
        std::vector<Tensor> wrt;
        for (std::size_t i = 0; i < defs.size(); ++i) {
          Tensor t = g.leaf(defs[i].shape, params[i]);
          leaves.emplace_back(defs[i].name, t);
          wrt.push_back(t);
        }
        const std::vector<int> idx = sampler.draw(batch);
        Tensor x = detail::synthetic_batch(syn, idx);
        std::vector<int> labels(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i)
          labels[i] = syn.labels[idx[i]];
        if (cfg.augment)
          x = apply_augment(
              x, sample_params(cfg.family, aug_rng, syn.image_shape[1],
                               syn.image_shape[2]));
        const Tensor loss =
            cross_entropy_mean(forward(arch, leaves, x).logits, labels);
        if (!std::isfinite(loss.item())) {
          failed = true;
          break;
        }
        opt.step(params, grad(loss, wrt), lr);
      }
    }

    if (failed) {
      ++report.failed;
      continue;
    }
    ModelCheckpoint trained;
    trained.spec = arch;
    trained.provenance = {derive_seed(seed, 1000 + r), cfg.epochs, "eval"};
    for (std::size_t i = 0; i < defs.size(); ++i)
      trained.parameters.emplace_back(defs[i].name,
                                      Tensor(defs[i].shape, params[i]));
    report.accuracies.push_back(accuracy(trained, test));
  }

  const std::size_t n = report.accuracies.size();
  if (n > 0) {
    double sum = 0.0;
    for (const double a : report.accuracies) sum += a;
    report.mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const double a : report.accuracies)
      ss += (a - report.mean) * (a - report.mean);
    report.stddev = std::sqrt(ss / static_cast<double>(n));
  }
  report.valid = report.failed * 5 <= repeats;
  return report;
}

struct CrossArchReport {
  std::map<std::string, EvalReport> per_arch;
  std::map<std::string, double> baseline_mean;
  std::map<std::string, double> gain;  // mean minus baseline mean
  double avg_gain = 0.0;               // arithmetic mean over architectures
};

inline nlohmann::ordered_json cross_report_to_json(const CrossArchReport& r) {
  nlohmann::ordered_json j;
  j["per_arch"] = nlohmann::ordered_json::object();
  for (const auto& [id, rep] : r.per_arch) j["per_arch"][id] = report_to_json(rep);
  j["baseline_mean"] = r.baseline_mean;
  j["gain"] = r.gain;
  j["avg_gain"] = r.avg_gain;
  return j;
}

inline CrossArchReport cross_report_from_json(const nlohmann::json& j) {
  CrossArchReport r;
  for (const auto& [id, rep] : j.at("per_arch").items())
    r.per_arch[id] = report_from_json(rep);
  r.baseline_mean =
      j.at("baseline_mean").get<std::map<std::string, double>>();
  r.gain = j.at("gain").get<std::map<std::string, double>>();
  r.avg_gain = j.at("avg_gain");
  return r;
}

// Evaluates the synthetic set on each architecture and reports accuracy gains
// over the supplied per-architecture baseline means.
inline CrossArchReport cross_arch_eval(
    const SyntheticDataset& syn, const LabeledDataset& test,
    const std::vector<ArchitectureSpec>& archs,
    const std::map<std::string, double>& baseline_mean, int repeats,
    std::uint64_t seed, const EvalConfig& cfg = {}) {
  check(!archs.empty(), "cross_arch_eval needs at least one architecture");
  CrossArchReport out;
  out.baseline_mean = baseline_mean;
  double sum = 0.0;
  for (const ArchitectureSpec& arch : archs) {
    EvalReport rep = evaluate(syn, test, arch, repeats, seed, cfg);
    const auto it = baseline_mean.find(arch.id());
    check(it != baseline_mean.end(),
          "no baseline mean supplied for " + arch.id());
    out.gain[arch.id()] = rep.mean - it->second;
    sum += out.gain[arch.id()];
    out.per_arch[arch.id()] = std::move(rep);
  }
  out.avg_gain = sum / static_cast<double>(archs.size());
  return out;
}

// A header line, then one CSV row per image: label first, then the feature
// vector under the given frozen model. Formatting is fixed so identical
// inputs give identical bytes.
inline void export_features(const ModelCheckpoint& ckpt, const Tensor& images,
                            const std::vector<int>& labels,
                            const std::string& path) {
  check(images.rank() == 4 &&
            static_cast<std::int64_t>(labels.size()) == images.shape()[0],
        "export_features needs (n, c, h, w) images and one label per image");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write features to " + path);
  out << "label";
  for (std::int64_t d = 0; d < ckpt.spec.feature_dim(); ++d) out << ",f" << d;
  out << "\n";
  const std::int64_t n = images.shape()[0];
  const std::int64_t chunk = 256;
  char buf[64];
  const std::int64_t pix = numel(Shape(images.shape().begin() + 1,
                                       images.shape().end()));
  for (std::int64_t at = 0; at < n; at += chunk) {
    const std::int64_t take = std::min(chunk, n - at);
    Shape s = images.shape();
    s[0] = take;
    std::vector<double> part(images.values().begin() + at * pix,
                             images.values().begin() + (at + take) * pix);
    const Tensor x(std::move(s), std::move(part));
    const Tensor f = forward(ckpt, x).features;
    const std::int64_t dim = f.shape()[1];
    for (std::int64_t i = 0; i < take; ++i) {
      out << labels[at + i];
      for (std::int64_t d = 0; d < dim; ++d) {
        std::snprintf(buf, sizeof buf, ",%.17g", f.values()[i * dim + d]);
        out << buf;
      }
      out << "\n";
    }
  }
  if (!out) throw std::runtime_error("write to " + path + " failed");
}

}  // namespace tinydd
