#pragma once

// Matching losses that drive distillation: gradient matching (plain and
// siamese-augmented) and feature-distribution matching. All three return an
// attached scalar whose gradient with respect to the synthetic pixels flows
// through whatever model graph they built, including the double-backward
// path through the model-parameter gradients.

#include <functional>
#include <string>
#include <vector>

#include "tinydd/augment.hpp"
#include "tinydd/autodiff.hpp"
#include "tinydd/data.hpp"
#include "tinydd/models.hpp"
#include "tinydd/ops.hpp"

namespace tinydd {

enum class MatcherKind : std::uint8_t { dc = 0, dsa = 1, dm = 2 };

inline const char* matcher_name(MatcherKind k) {
  switch (k) {
    case MatcherKind::dc: return "dc";
    case MatcherKind::dsa: return "dsa";
    case MatcherKind::dm: return "dm";
  }
  return "?";
}

inline MatcherKind parse_matcher(const std::string& s) {
  if (s == "dc") return MatcherKind::dc;
  if (s == "dsa") return MatcherKind::dsa;
  if (s == "dm") return MatcherKind::dm;
  throw std::invalid_argument("unknown matcher kind '" + s + "'");
}

struct MatcherConfig {
  MatcherKind kind = MatcherKind::dsa;
  int outer_iterations = 500;    // pixel update steps
  int reinit_period = 50;        // fresh matcher model every this many steps
  int inner_steps = 10;          // model refinement steps between reinits
  double inner_lr = 0.01;
  double inner_momentum = 0.5;
  int real_batch_per_class = 64;
  bool whole_set = false;  // match against every real sample of the class

  void validate() const {
    check(outer_iterations >= 1 && reinit_period >= 1,
          "matcher needs outer_iterations >= 1 and reinit_period >= 1");
    check(inner_steps >= 0 && real_batch_per_class >= 1,
          "matcher needs inner_steps >= 0 and real_batch_per_class >= 1");
    check(inner_lr > 0.0 && inner_momentum >= 0.0 && inner_momentum < 1.0,
          "matcher inner optimizer settings out of range");
  }
};

using LogitsLoss =
    std::function<Tensor(const Tensor& logits, const std::vector<int>& labels)>;

inline Tensor default_logits_loss(const Tensor& logits,
                                  const std::vector<int>& labels) {
  return cross_entropy_mean(logits, labels);
}

namespace detail {

// (rows, rest) view used for the per-row cosine: leading dim for weights,
// one single row for rank-1 tensors such as biases.
inline Tensor as_rows(const Tensor& t) {
  if (t.rank() >= 2) return flatten_rows(t, t.shape()[0]);
  return reshape(t, {1, t.size()});
}

}  // namespace detail

// Sum over parameters of the rowwise cosine distances between two gradient
// maps. Rows are output units; each contributes 1 - cos(a_row, b_row), and a
// zero-norm row contributes exactly 1.
inline Tensor layerwise_cosine_distance(const NamedTensors& a,
                                        const NamedTensors& b) {
  check(a.size() == b.size() && !a.empty(),
        "cosine distance needs two equally sized parameter maps");
  Tensor total;
  for (std::size_t i = 0; i < a.size(); ++i) {
    check(a[i].first == b[i].first && a[i].second.shape() == b[i].second.shape(),
          "cosine distance maps disagree at entry " + std::to_string(i) +
              ": " + a[i].first + shape_str(a[i].second.shape()) + " vs " +
              b[i].first + shape_str(b[i].second.shape()));
    const Tensor ra = detail::as_rows(a[i].second);
    const Tensor rb = detail::as_rows(b[i].second);
    const double rows = static_cast<double>(ra.shape()[0]);
    const Tensor dots = sum_cols(mul(ra, rb));
    const Tensor na = guarded_row_norm(sum_cols(square(ra)));
    const Tensor nb = guarded_row_norm(sum_cols(square(rb)));
    const Tensor layer = sub(Tensor::scalar(rows),
                             sum_all(div(dots, mul(na, nb))));
    total = total.defined() ? add(total, layer) : layer;
  }
  return total;
}

namespace detail {

// Per-class model gradients for one branch. create_graph keeps the synthetic
// branch differentiable; the real branch comes back detached.
inline NamedTensors branch_gradients(const ArchitectureSpec& spec,
                                     const NamedTensors& theta,
                                     const std::vector<Tensor>& wrt,
                                     const Tensor& images,
                                     const std::vector<int>& labels,
                                     const LogitsLoss& loss,
                                     bool create_graph) {
  const Tensor objective = loss(forward(spec, theta, images).logits, labels);
  const std::vector<Tensor> grads = grad(objective, wrt, create_graph);
  NamedTensors out;
  out.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i)
    out.emplace_back(theta[i].first, grads[i]);
  return out;
}

inline std::vector<Tensor> theta_tensors(const NamedTensors& theta) {
  std::vector<Tensor> out;
  out.reserve(theta.size());
  for (const auto& [name, t] : theta) out.push_back(t);
  return out;
}

}  // namespace detail

// Gradient matching: per class, cosine distance between model gradients on
// the synthetic class slice and on a real batch of that class, summed.
// syn_images is class-major with ipc rows per class; real_batches holds one
// detached batch per class.
inline Tensor dc_loss(const ArchitectureSpec& spec, const NamedTensors& theta,
                      const Tensor& syn_images, int ipc,
                      const std::vector<Tensor>& real_batches,
                      const LogitsLoss& loss = default_logits_loss) {
  check(static_cast<int>(real_batches.size()) == spec.classes,
        "dc_loss needs one real batch per class");
  check(syn_images.shape()[0] == static_cast<std::int64_t>(spec.classes) * ipc,
        "dc_loss synthetic row count does not match classes * ipc");
  const auto wrt = detail::theta_tensors(theta);
  Tensor total;
  for (int c = 0; c < spec.classes; ++c) {
    const Tensor syn_c = slice_rows(syn_images, c * ipc, ipc);
    const NamedTensors gs = detail::branch_gradients(
        spec, theta, wrt, syn_c, std::vector<int>(ipc, c), loss, true);
    const NamedTensors gt = detail::branch_gradients(
        spec, theta, wrt, real_batches[c],
        std::vector<int>(real_batches[c].shape()[0], c), loss, false);
    const Tensor d = layerwise_cosine_distance(gs, gt);
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

// Siamese-augmented gradient matching: one transform draw per class per call,
// the same parameters applied to both branches before the gradients are taken.
inline Tensor dsa_loss(const ArchitectureSpec& spec, const NamedTensors& theta,
                       const Tensor& syn_images, int ipc,
                       const std::vector<Tensor>& real_batches,
                       const AugmentFamily& family, Rng& rng,
                       SiameseObserver* observer = nullptr,
                       const LogitsLoss& loss = default_logits_loss) {
  check(static_cast<int>(real_batches.size()) == spec.classes,
        "dsa_loss needs one real batch per class");
  const auto wrt = detail::theta_tensors(theta);
  Tensor total;
  for (int c = 0; c < spec.classes; ++c) {
    const AugmentationParams omega = sample_params(
        family, rng, spec.input_shape[1], spec.input_shape[2]);
    const Tensor syn_c = apply_augment(
        slice_rows(syn_images, c * ipc, ipc), omega, observer, 0);
    const Tensor real_c = apply_augment(real_batches[c], omega, observer, 1);
    const NamedTensors gs = detail::branch_gradients(
        spec, theta, wrt, syn_c, std::vector<int>(ipc, c), loss, true);
    const NamedTensors gt = detail::branch_gradients(
        spec, theta, wrt, real_c,
        std::vector<int>(real_batches[c].shape()[0], c), loss, false);
    const Tensor d = layerwise_cosine_distance(gs, gt);
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

// Distribution matching: squared distance between per-class feature means
// under a frozen randomly initialized embedder.
inline Tensor dm_loss(const ModelCheckpoint& embedder, const Tensor& syn_images,
                      int ipc, const std::vector<Tensor>& real_batches) {
  const ArchitectureSpec& spec = embedder.spec;
  check(static_cast<int>(real_batches.size()) == spec.classes,
        "dm_loss needs one real batch per class");
  Tensor total;
  for (int c = 0; c < spec.classes; ++c) {
    const Tensor syn_c = slice_rows(syn_images, c * ipc, ipc);
    const Tensor fs = forward(spec, embedder.parameters, syn_c).features;
    const Tensor ft = forward(spec, embedder.parameters, real_batches[c]).features;
    const Tensor mean_s = scale(sum_rows(fs), 1.0 / static_cast<double>(ipc));
    const Tensor mean_t = scale(
        sum_rows(ft), 1.0 / static_cast<double>(real_batches[c].shape()[0]));
    const Tensor d = sum_all(square(sub(mean_s, mean_t)));
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

// Refines a matcher model on the synthetic set: full-batch SGD on the
// classification loss, detached from any outer graph. steps == 0 returns the
// checkpoint unchanged.
inline ModelCheckpoint inner_update(const ModelCheckpoint& ckpt,
                                    const SyntheticDataset& syn, int steps,
                                    double lr, double momentum = 0.5) {
  check(steps >= 0 && lr > 0.0, "inner_update needs steps >= 0 and lr > 0");
  if (steps == 0) return ckpt;
  check(ckpt.spec.classes == syn.classes &&
            ckpt.spec.input_shape == syn.image_shape,
        "inner_update synthetic set does not match model " + ckpt.spec.id());

  const auto defs = parameter_defs(ckpt.spec);
  std::vector<std::vector<double>> params;
  for (const auto& [name, t] : ckpt.parameters) params.push_back(t.values());
  SgdMomentum opt(params.size(), momentum, 0.0);
  const Tensor x = syn.as_tensor();

  for (int s = 0; s < steps; ++s) {
    Graph g;
    NamedTensors leaves;
    std::vector<Tensor> wrt;
    for (std::size_t i = 0; i < defs.size(); ++i) {
      Tensor t = g.leaf(defs[i].shape, params[i]);
      leaves.emplace_back(defs[i].name, t);
      wrt.push_back(t);
    }
    const Tensor loss = cross_entropy_mean(
        forward(ckpt.spec, leaves, x).logits, syn.labels);
    opt.step(params, grad(loss, wrt), lr);
  }

  ModelCheckpoint out;
  out.spec = ckpt.spec;
  out.provenance = ckpt.provenance;
  for (std::size_t i = 0; i < defs.size(); ++i)
    out.parameters.emplace_back(defs[i].name, Tensor(defs[i].shape, params[i]));
  return out;
}

}  // namespace tinydd
