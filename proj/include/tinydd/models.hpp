#pragma once

// Model zoo: four small architecture families driven by one spec struct.
// Parameters are stored as ordered (name, tensor) pairs so the same forward
// code runs frozen checkpoints (detached tensors) and matching models
// (graph leaves) alike. Pretraining produces epoch-tagged checkpoints.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tinydd/autodiff.hpp"
#include "tinydd/data.hpp"
#include "tinydd/ops.hpp"
#include "tinydd/rng.hpp"
#include "tinydd/serialize.hpp"

namespace tinydd {

enum class ArchFamily : std::uint8_t {
  conv_net = 0,     // conv 3x3, instance norm, relu, avgpool per block
  wide_conv = 1,    // two convs per block, channels double, maxpool
  strided_conv = 2, // stride-2 convs instead of pooling
  mlp = 3,          // flatten plus relu hidden layers
};

inline const char* family_name(ArchFamily f) {
  switch (f) {
    case ArchFamily::conv_net: return "conv-net";
    case ArchFamily::wide_conv: return "wide-conv";
    case ArchFamily::strided_conv: return "strided-conv";
    case ArchFamily::mlp: return "mlp";
  }
  return "?";
}

struct ArchitectureSpec {
  ArchFamily family = ArchFamily::conv_net;
  int depth = 3;
  int width = 16;
  Shape input_shape{1, 16, 16};  // (channels, h, w)
  int classes = 3;

  void validate() const {
    check(depth >= 1 && width >= 1 && classes >= 2,
          "architecture needs depth >= 1, width >= 1, classes >= 2");
    check(input_shape.size() == 3 && input_shape[0] >= 1 &&
              input_shape[1] >= 2 && input_shape[2] >= 2,
          "architecture input shape must be (channels, h, w)");
    if (family == ArchFamily::conv_net || family == ArchFamily::wide_conv) {
      const std::int64_t div = std::int64_t{1} << depth;
      check(input_shape[1] % div == 0 && input_shape[2] % div == 0,
            "spatial dims of " + shape_str(input_shape) + " must divide by 2^" +
                std::to_string(depth) + " for " + family_name(family));
    }
    if (family == ArchFamily::strided_conv) {
      std::int64_t h = input_shape[1], w = input_shape[2];
      for (int d = 0; d < depth; ++d) {
        h = (h - 1) / 2 + 1;
        w = (w - 1) / 2 + 1;
      }
      check(h >= 1 && w >= 1, "strided-conv reduces input to nothing");
    }
  }

  // Penultimate feature width produced by forward().
  std::int64_t feature_dim() const {
    switch (family) {
      case ArchFamily::conv_net:
        return width * (input_shape[1] >> depth) * (input_shape[2] >> depth);
      case ArchFamily::wide_conv:
        return (std::int64_t{width} << (depth - 1)) *
               (input_shape[1] >> depth) * (input_shape[2] >> depth);
      case ArchFamily::strided_conv: {
        std::int64_t h = input_shape[1], w = input_shape[2];
        for (int d = 0; d < depth; ++d) {
          h = (h - 1) / 2 + 1;
          w = (w - 1) / 2 + 1;
        }
        return width * h * w;
      }
      case ArchFamily::mlp:
        return 4 * width;
    }
    return 0;
  }

  std::string id() const {
    return std::string(family_name(family)) + "-d" + std::to_string(depth) +
           "-w" + std::to_string(width);
  }

  bool operator==(const ArchitectureSpec& o) const {
    return family == o.family && depth == o.depth && width == o.width &&
           input_shape == o.input_shape && classes == o.classes;
  }
};

// Parses "family", "family-dN", "family-dN-wM" (suffixes in either order).
inline ArchitectureSpec parse_arch(const std::string& id, Shape input_shape,
                                   int classes) {
  ArchitectureSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.classes = classes;
  std::string rest;
  const ArchFamily families[] = {ArchFamily::conv_net, ArchFamily::wide_conv,
                                 ArchFamily::strided_conv, ArchFamily::mlp};
  bool found = false;
  for (const ArchFamily f : families) {
    const std::string name = family_name(f);
    if (id == name || id.rfind(name + "-", 0) == 0) {
      spec.family = f;
      rest = id.size() > name.size() ? id.substr(name.size() + 1) : "";
      found = true;
      break;
    }
  }
  check(found, "unknown architecture id '" + id + "'");
  switch (spec.family) {
    case ArchFamily::conv_net: spec.depth = 3; spec.width = 16; break;
    case ArchFamily::wide_conv: spec.depth = 2; spec.width = 12; break;
    case ArchFamily::strided_conv: spec.depth = 3; spec.width = 16; break;
    case ArchFamily::mlp: spec.depth = 2; spec.width = 24; break;
  }
  while (!rest.empty()) {
    const auto dash = rest.find('-');
    const std::string tok = rest.substr(0, dash);
    rest = dash == std::string::npos ? "" : rest.substr(dash + 1);
    check(tok.size() >= 2 && (tok[0] == 'd' || tok[0] == 'w'),
          "bad architecture suffix '" + tok + "' in '" + id + "'");
    const int v = std::stoi(tok.substr(1));
    (tok[0] == 'd' ? spec.depth : spec.width) = v;
  }
  spec.validate();
  return spec;
}

struct ParamDef {
  std::string name;
  Shape shape;
  std::int64_t fan_in;
};

inline std::vector<ParamDef> parameter_defs(const ArchitectureSpec& spec) {
  spec.validate();
  std::vector<ParamDef> defs;
  auto conv = [&](const std::string& name, std::int64_t co, std::int64_t ci) {
    defs.push_back({name + ".w", {co, ci, 3, 3}, ci * 9});
    defs.push_back({name + ".b", {co}, ci * 9});
  };
  auto dense = [&](const std::string& name, std::int64_t out, std::int64_t in) {
    defs.push_back({name + ".w", {out, in}, in});
    defs.push_back({name + ".b", {out}, in});
  };

  std::int64_t ci = spec.input_shape[0];
  switch (spec.family) {
    case ArchFamily::conv_net:
    case ArchFamily::strided_conv:
      for (int d = 0; d < spec.depth; ++d) {
        conv("conv" + std::to_string(d + 1), spec.width, ci);
        ci = spec.width;
      }
      break;
    case ArchFamily::wide_conv:
      for (int d = 0; d < spec.depth; ++d) {
        const std::int64_t co = std::int64_t{spec.width} << d;
        conv("conv" + std::to_string(2 * d + 1), co, ci);
        conv("conv" + std::to_string(2 * d + 2), co, co);
        ci = co;
      }
      break;
    case ArchFamily::mlp: {
      std::int64_t in = numel(spec.input_shape);
      for (int d = 0; d < spec.depth; ++d) {
        dense("hidden" + std::to_string(d + 1), 4 * spec.width, in);
        in = 4 * spec.width;
      }
      break;
    }
  }
  dense("fc", spec.classes, spec.feature_dim());
  return defs;
}

inline std::int64_t parameter_count(const ArchitectureSpec& spec) {
  std::int64_t n = 0;
  for (const ParamDef& d : parameter_defs(spec)) n += numel(d.shape);
  return n;
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct ModelCheckpoint {
  struct Provenance {
    std::uint64_t seed = 0;
    int epoch = 0;  // 0 means freshly initialized, never trained
    std::string source;
  };

  ArchitectureSpec spec;
  NamedTensors parameters;  // detached, in parameter_defs order
  Provenance provenance;
};

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Uniform fan-in init, U(-sqrt(1/fan_in), sqrt(1/fan_in)). One generator,
// parameters filled in definition order: bit-identical for a (spec, seed).
inline ModelCheckpoint build_model(const ArchitectureSpec& spec,
                                   std::uint64_t seed) {
  ModelCheckpoint ckpt;
  ckpt.spec = spec;
  ckpt.provenance = {seed, 0, "init"};
  Rng rng(derive_seed(seed, fnv1a(spec.id())));
  for (const ParamDef& def : parameter_defs(spec)) {
    const double bound = std::sqrt(1.0 / static_cast<double>(def.fan_in));
    std::vector<double> v(static_cast<std::size_t>(numel(def.shape)));
    for (double& x : v) x = rng.uniform(-bound, bound);
    ckpt.parameters.emplace_back(def.name, Tensor(def.shape, std::move(v)));
  }
  return ckpt;
}

inline ModelCheckpoint zero_model(const ArchitectureSpec& spec) {
  ModelCheckpoint ckpt;
  ckpt.spec = spec;
  ckpt.provenance = {0, 0, "zero"};
  for (const ParamDef& def : parameter_defs(spec))
    ckpt.parameters.emplace_back(def.name, Tensor::zeros(def.shape));
  return ckpt;
}

// Re-creates the parameters as leaves of g, preserving order and names.
inline NamedTensors attach_parameters(const ModelCheckpoint& ckpt, Graph& g) {
  NamedTensors out;
  out.reserve(ckpt.parameters.size());
  for (const auto& [name, t] : ckpt.parameters)
    out.emplace_back(name, g.leaf(t.shape(), t.values()));
  return out;
}

struct ModelOutput {
  Tensor logits;    // (batch, classes)
  Tensor features;  // (batch, feature_dim), the flattened penultimate layer
};

inline ModelOutput forward(const ArchitectureSpec& spec,
                           const NamedTensors& params, const Tensor& x) {
  check(x.rank() == 4 && x.shape()[1] == spec.input_shape[0] &&
            x.shape()[2] == spec.input_shape[1] &&
            x.shape()[3] == spec.input_shape[2],
        "forward input " + shape_str(x.shape()) +
            " does not match architecture input " +
            shape_str(spec.input_shape));
  check(params.size() == parameter_defs(spec).size(),
        "forward got wrong parameter count for " + spec.id());
  const std::int64_t batch = x.shape()[0];
  std::size_t p = 0;
  auto next = [&]() -> const Tensor& { return params[p++].second; };

  Tensor h = x;
  switch (spec.family) {
    // The per-channel bias is added after instance norm: a pre-norm bias
    // would be cancelled exactly by the plane mean subtraction and its
    // gradient would be numerical noise. Added afterwards it acts as the
    // norm's shift parameter and trains normally.
    case ArchFamily::conv_net:
      for (int d = 0; d < spec.depth; ++d) {
        const Tensor& w = next();
        const Tensor& b = next();
        h = avgpool2d(
            relu(conv_bias_add(instance_norm_2d(conv2d(h, w, 1, 1)), b)), 2);
      }
      break;
    case ArchFamily::wide_conv:
      for (int d = 0; d < spec.depth; ++d) {
        for (int k = 0; k < 2; ++k) {
          const Tensor& w = next();
          const Tensor& b = next();
          h = relu(conv_bias_add(instance_norm_2d(conv2d(h, w, 1, 1)), b));
        }
        h = maxpool2d(h, 2);
      }
      break;
    case ArchFamily::strided_conv:
      for (int d = 0; d < spec.depth; ++d) {
        const Tensor& w = next();
        const Tensor& b = next();
        h = relu(conv_bias_add(instance_norm_2d(conv2d(h, w, 2, 1)), b));
      }
      break;
    case ArchFamily::mlp: {
      h = flatten_rows(h, batch);
      for (int d = 0; d < spec.depth; ++d) {
        const Tensor& w = next();
        const Tensor& b = next();
        h = relu(linear(h, w, b));
      }
      break;
    }
  }
  ModelOutput out;
  out.features = h.rank() == 2 ? h : flatten_rows(h, batch);
  const Tensor& fw = next();
  const Tensor& fb = next();
  out.logits = linear(out.features, fw, fb);
  return out;
}

inline ModelOutput forward(const ModelCheckpoint& ckpt, const Tensor& x) {
  return forward(ckpt.spec, ckpt.parameters, x);
}

// Heavy-ball SGD with coupled weight decay, velocities kept across steps.
class SgdMomentum {
 public:
  SgdMomentum(std::size_t n_params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay), vel_(n_params) {}

  void step(std::vector<std::vector<double>>& params,
            const std::vector<Tensor>& grads, double lr) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto& v = vel_[i];
      if (v.empty()) v.assign(p.size(), 0.0);
      const auto& g = grads[i].values();
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j] + weight_decay_ * p[j];
        p[j] -= lr * v[j];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> vel_;
};

struct PretrainConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-3;
  double lr_decay = 0.1;
  int decay_every = 10;
  std::vector<int> snapshot_epochs{1, 2, 3, 5, 8, 12, 20, 25, 30};
};

// Trains from a fresh seeded init and returns one checkpoint per snapshot
// epoch, tagged with (seed, epoch, dataset id). Throws if the loss ever goes
// non-finite, naming the epoch.
inline std::vector<ModelCheckpoint> pretrain(const ArchitectureSpec& spec,
                                             std::uint64_t seed,
                                             const LabeledDataset& data,
                                             const PretrainConfig& cfg = {}) {
  spec.validate();
  check(cfg.epochs >= 1 && cfg.batch >= 1, "pretrain needs epochs, batch >= 1");
  check(!cfg.snapshot_epochs.empty(), "pretrain needs snapshot epochs");
  for (const int e : cfg.snapshot_epochs)
    check(e >= 1 && e <= cfg.epochs,
          "snapshot epoch " + std::to_string(e) + " outside [1, " +
              std::to_string(cfg.epochs) + "]");
  check(data.classes == spec.classes && data.image_shape == spec.input_shape,
        "pretrain dataset does not match architecture " + spec.id());

  const auto defs = parameter_defs(spec);
  const ModelCheckpoint init = build_model(spec, seed);
  std::vector<std::vector<double>> params;
  for (const auto& [name, t] : init.parameters) params.push_back(t.values());

  SgdMomentum opt(params.size(), cfg.momentum, cfg.weight_decay);
  BatchSampler sampler(data.size(), derive_seed(seed, fnv1a("pretrain-order")));
  const std::int64_t steps_per_epoch =
      (data.size() + cfg.batch - 1) / cfg.batch;

  std::vector<ModelCheckpoint> snapshots;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr =
        cfg.lr * std::pow(cfg.lr_decay, (epoch - 1) / cfg.decay_every);
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      Graph g;
      NamedTensors leaves;
      std::vector<Tensor> wrt;
      for (std::size_t i = 0; i < defs.size(); ++i) {
        Tensor t = g.leaf(defs[i].shape, params[i]);
        leaves.emplace_back(defs[i].name, t);
        wrt.push_back(t);
      }
      const auto idx = sampler.draw(cfg.batch);
      const Tensor loss = cross_entropy_mean(
          forward(spec, leaves, data.batch(idx)).logits, data.labels_of(idx));
      if (!std::isfinite(loss.item()))
        throw std::runtime_error("pretraining diverged at epoch " +
                                 std::to_string(epoch));
      opt.step(params, grad(loss, wrt), lr);
    }
    if (std::find(cfg.snapshot_epochs.begin(), cfg.snapshot_epochs.end(),
                  epoch) != cfg.snapshot_epochs.end()) {
      ModelCheckpoint snap;
      snap.spec = spec;
      snap.provenance = {seed, epoch, data.domain_id};
      for (std::size_t i = 0; i < defs.size(); ++i)
        snap.parameters.emplace_back(defs[i].name,
                                     Tensor(defs[i].shape, params[i]));
      snapshots.push_back(std::move(snap));
    }
  }
  return snapshots;
}

inline double accuracy(const ModelCheckpoint& ckpt, const LabeledDataset& data,
                       int batch = 256) {
  std::int64_t hit = 0;
  for (std::int64_t at = 0; at < data.size(); at += batch) {
    const std::int64_t n = std::min<std::int64_t>(batch, data.size() - at);
    std::vector<int> idx(n);
    for (std::int64_t i = 0; i < n; ++i) idx[i] = static_cast<int>(at + i);
    const auto pred = argmax_rows(forward(ckpt, data.batch(idx)).logits);
    for (std::int64_t i = 0; i < n; ++i)
      if (pred[i] == data.labels[idx[i]]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

inline void write_arch(BinWriter& w, const ArchitectureSpec& spec) {
  w.u8(static_cast<std::uint8_t>(spec.family));
  w.u32(static_cast<std::uint32_t>(spec.depth));
  w.u32(static_cast<std::uint32_t>(spec.width));
  w.i64_array(spec.input_shape);
  w.u32(static_cast<std::uint32_t>(spec.classes));
}

inline ArchitectureSpec read_arch(BinReader& r) {
  ArchitectureSpec spec;
  spec.family = static_cast<ArchFamily>(r.u8());
  spec.depth = static_cast<int>(r.u32());
  spec.width = static_cast<int>(r.u32());
  spec.input_shape = r.i64_array();
  spec.classes = static_cast<int>(r.u32());
  spec.validate();
  return spec;
}

inline void save_checkpoint(const std::string& path,
                            const ModelCheckpoint& ckpt) {
  BinWriter w(path);
  w.header(FileKind::checkpoint);
  write_arch(w, ckpt.spec);
  w.u64(ckpt.provenance.seed);
  w.i64(ckpt.provenance.epoch);
  w.str(ckpt.provenance.source);
  w.u32(static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& [name, t] : ckpt.parameters) {
    w.str(name);
    w.i64_array(t.shape());
    w.f64_array(t.values());
  }
  w.finish();
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
  BinReader r(path);
  r.header_expect(FileKind::checkpoint, "checkpoint");
  ModelCheckpoint ckpt;
  ckpt.spec = read_arch(r);
  ckpt.provenance.seed = r.u64();
  ckpt.provenance.epoch = static_cast<int>(r.i64());
  ckpt.provenance.source = r.str();
  const std::uint32_t count = r.u32();
  const auto defs = parameter_defs(ckpt.spec);
  if (count != defs.size())
    throw std::runtime_error(path + ": parameter table has " +
                             std::to_string(count) + " entries, expected " +
                             std::to_string(defs.size()) + " for " +
                             ckpt.spec.id());
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const Shape shape = r.i64_array();
    if (name != defs[i].name || shape != defs[i].shape)
      throw std::runtime_error(path + ": parameter " + std::to_string(i) +
                               " is " + name + shape_str(shape) +
                               ", expected " + defs[i].name +
                               shape_str(defs[i].shape));
    ckpt.parameters.emplace_back(name, Tensor(shape, r.f64_array()));
  }
  return ckpt;
}

}  // namespace tinydd
