#pragma once

// Reverse-mode differentiation over a recorded Graph. Every vjp below is
// expressed through the public op builders, so when create_graph is true the
// backward pass records onto the same tape and its outputs can be
// differentiated again (gradients of gradients, to any depth).

#include <unordered_set>
#include <vector>

#include "tinydd/ops.hpp"
#include "tinydd/tensor.hpp"

namespace tinydd {
namespace detail {

// Nonzero-entry mask of the relu input, detached. Using a constant factor
// gives the usual subgradient (zero at the kink) and a zero second derivative.
inline Tensor relu_mask(const Graph::Node& n) {
  const auto& x = *n.values;
  std::vector<double> m(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0 ? 1.0 : 0.0;
  return Tensor(n.shape, std::move(m));
}

inline std::vector<std::int64_t> stored_indices(
    const std::vector<std::int64_t>& iattr, std::size_t skip) {
  return std::vector<std::int64_t>(iattr.begin() + skip, iattr.end());
}

}  // namespace detail

// Gradients of a scalar output with respect to each tensor in wrt. Tensors
// outside the output's graph produce zeros plus a warning channel entry. With
// create_graph the results stay recorded and are differentiable in turn.
inline std::vector<Tensor> grad(const Tensor& output,
                                const std::vector<Tensor>& wrt,
                                bool create_graph = false) {
  check(output.attached(), "grad() needs an output recorded on a graph");
  check(output.size() == 1, "grad() needs a scalar output, got shape " +
                                shape_str(output.shape()));
  Graph& g = *output.graph();
  const std::int32_t out_id = output.node();

  std::unordered_set<std::int32_t> wanted;
  for (const Tensor& t : wrt)
    if (t.attached() && t.graph() == &g) wanted.insert(t.node());

  std::vector<Tensor> adj(static_cast<std::size_t>(out_id) + 1);
  adj[out_id] = Tensor::full(output.shape(), 1.0);

  // With create_graph off, vjp construction must not grow the tape.
  Graph::PauseRecording pause(create_graph ? nullptr : &g);

  auto needs = [&](std::int32_t id) {
    return g.node(id).requires_grad || wanted.count(id) > 0;
  };
  auto accumulate = [&](std::int32_t id, const Tensor& contribution) {
    adj[id] = adj[id].defined() ? add(adj[id], contribution) : contribution;
  };

  for (std::int32_t id = out_id; id >= 0; --id) {
    if (!adj[id].defined()) continue;
    const Graph::Node& n = g.node(id);
    if (n.op == Op::leaf || n.op == Op::constant) continue;
    if (!n.requires_grad) continue;
    const Tensor u = adj[id];
    const std::vector<std::int32_t> in = n.inputs;

    auto input = [&](std::size_t i) { return g.tensor_of(in[i]); };
    auto push = [&](std::size_t i, const Tensor& contribution) {
      if (needs(in[i])) accumulate(in[i], contribution);
    };

    switch (n.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::add:
        push(0, u);
        push(1, u);
        break;
      case Op::sub:
        push(0, u);
        push(1, neg(u));
        break;
      case Op::mul:
        push(0, mul(u, input(1)));
        push(1, mul(u, input(0)));
        break;
      case Op::div: {
        push(0, div(u, input(1)));
        if (needs(in[1]))
          accumulate(in[1], neg(mul(u, div(g.tensor_of(id), input(1)))));
        break;
      }
      case Op::neg:
        push(0, neg(u));
        break;
      case Op::scale:
        push(0, scale(u, n.dattr[0]));
        break;
      case Op::offset:
        push(0, u);
        break;
      case Op::matmul:
        push(0, matmul(u, transpose(input(1))));
        push(1, matmul(transpose(input(0)), u));
        break;
      case Op::transpose:
        push(0, transpose(u));
        break;
      case Op::reshape:
        push(0, reshape(u, g.node(in[0]).shape));
        break;
      case Op::slice_rows:
        push(0, embed_rows(u, g.node(in[0]).shape[0], n.iattr[0]));
        break;
      case Op::embed_rows:
        push(0, slice_rows(u, n.iattr[1], g.node(in[0]).shape[0]));
        break;
      case Op::flip_w:
        push(0, flip_w(u));
        break;
      case Op::shift2d:
        push(0, shift2d(u, -n.iattr[0], -n.iattr[1]));
        break;
      case Op::conv2d: {
        const Shape& xs = g.node(in[0]).shape;
        const Shape& ws = g.node(in[1]).shape;
        push(0, conv2d_dx(u, input(1), n.iattr[0], n.iattr[1], xs[2], xs[3]));
        push(1, conv2d_dw(u, input(0), n.iattr[0], n.iattr[1], ws[2], ws[3]));
        break;
      }
      case Op::conv2d_dx: {
        const Shape& ws = g.node(in[1]).shape;
        push(0, conv2d(u, input(1), n.iattr[0], n.iattr[1]));
        push(1, conv2d_dw(input(0), u, n.iattr[0], n.iattr[1], ws[2], ws[3]));
        break;
      }
      case Op::conv2d_dw: {
        const Shape& xs = g.node(in[1]).shape;
        push(0, conv2d(input(1), u, n.iattr[0], n.iattr[1]));
        push(1, conv2d_dx(input(0), u, n.iattr[0], n.iattr[1], xs[2], xs[3]));
        break;
      }
      case Op::avgpool2d:
        push(0, avgunpool2d(u, n.iattr[0]));
        break;
      case Op::avgunpool2d:
        push(0, avgpool2d(u, n.iattr[0]));
        break;
      case Op::maxpool2d: {
        const Shape& xs = g.node(in[0]).shape;
        push(0, maxpool_scatter(u, detail::stored_indices(n.iattr, 1), xs[2],
                                xs[3]));
        break;
      }
      case Op::maxpool_scatter: {
        const Shape& gs = g.node(in[0]).shape;
        push(0, maxpool_gather(u, detail::stored_indices(n.iattr, 2), gs[2],
                               gs[3]));
        break;
      }
      case Op::maxpool_gather: {
        const Shape& xs = g.node(in[0]).shape;
        push(0, maxpool_scatter(u, detail::stored_indices(n.iattr, 2), xs[2],
                                xs[3]));
        break;
      }
      case Op::relu:
        push(0, mul(u, detail::relu_mask(g.node(in[0]))));
        break;
      case Op::log:
        push(0, div(u, input(0)));
        break;
      case Op::exp:
        push(0, mul(u, g.tensor_of(id)));
        break;
      case Op::sqrt:
        push(0, div(scale(u, 0.5), g.tensor_of(id)));
        break;
      case Op::sum_all:
        push(0, broadcast_full(u, g.node(in[0]).shape));
        break;
      case Op::broadcast_full:
        push(0, sum_all(u));
        break;
      case Op::sum_rows:
        push(0, tile_rows(u, g.node(in[0]).shape[0]));
        break;
      case Op::tile_rows:
        push(0, sum_rows(u));
        break;
      case Op::sum_cols:
        push(0, tile_cols(u, g.node(in[0]).shape[1]));
        break;
      case Op::tile_cols:
        push(0, sum_cols(u));
        break;
    }
    // free intermediate adjoints as the walk passes them
    if (wanted.count(id) == 0) adj[id] = Tensor();
  }

  // With create_graph, even structurally constant gradients must stay
  // attached, so that differentiating them again flows and yields zeros.
  auto deliver = [&](Tensor t) {
    return create_graph && !t.attached() ? g.constant(t) : t;
  };

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    if (!t.attached() || t.graph() != &g) {
      g.warn("gradient requested for a tensor outside this graph; returning zeros");
      out.push_back(deliver(Tensor::zeros(t.shape())));
    } else if (t.node() <= out_id && adj[t.node()].defined()) {
      out.push_back(deliver(adj[t.node()]));
    } else {
      out.push_back(deliver(Tensor::zeros(t.shape())));
    }
  }
  return out;
}

}  // namespace tinydd
