#pragma once

// Forward kernels and the public op builders. Every op records a node when an
// attached operand is present and the graph is recording; otherwise it
// produces a detached constant. The primitive set is closed under
// differentiation: each op's vjp in autodiff.hpp is built from ops in this
// file, so gradients of gradients reduce to more of the same tape.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <vector>

#include "tinydd/tensor.hpp"

namespace tinydd {
namespace detail {

struct ArgView {
  const Shape* shape;
  const std::vector<double>* vals;
};

inline Graph* common_graph(const std::vector<const Tensor*>& ins) {
  Graph* g = nullptr;
  for (const Tensor* t : ins) {
    if (t->attached()) {
      check(!g || g == t->graph(), "operands live on different graphs");
      g = t->graph();
    }
  }
  return g;
}

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t k,
                                 std::int64_t stride, std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Writes the forward result of one op into out. iattr is mutable because
// maxpool2d appends its argmax indices on first evaluation.
inline void eval_node(Op op, const std::vector<ArgView>& a,
                      const Shape& out_shape, std::vector<std::int64_t>& iattr,
                      const std::vector<double>& dattr,
                      std::vector<double>& out) {
  out.assign(static_cast<std::size_t>(numel(out_shape)), 0.0);
  const auto n_out = out.size();
  switch (op) {
    case Op::leaf:
    case Op::constant:
      check(false, "leaf/constant nodes are not evaluated");
      break;
    case Op::add: {
      const auto& x = *a[0].vals;
      const auto& y = *a[1].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] + y[i];
      break;
    }
    case Op::sub: {
      const auto& x = *a[0].vals;
      const auto& y = *a[1].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] - y[i];
      break;
    }
    case Op::mul: {
      const auto& x = *a[0].vals;
      const auto& y = *a[1].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] * y[i];
      break;
    }
    case Op::div: {
      const auto& x = *a[0].vals;
      const auto& y = *a[1].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] / y[i];
      break;
    }
    case Op::neg: {
      const auto& x = *a[0].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = -x[i];
      break;
    }
    case Op::scale: {
      const auto& x = *a[0].vals;
      const double c = dattr[0];
      for (std::size_t i = 0; i < n_out; ++i) out[i] = c * x[i];
      break;
    }
    case Op::offset: {
      const auto& x = *a[0].vals;
      const double c = dattr[0];
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] + c;
      break;
    }
    case Op::matmul: {
      const auto& x = *a[0].vals;
      const auto& y = *a[1].vals;
      const std::int64_t m = (*a[0].shape)[0];
      const std::int64_t k = (*a[0].shape)[1];
      const std::int64_t n = (*a[1].shape)[1];
      for (std::int64_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::int64_t l = 0; l < k; ++l) {
          const double xv = x[i * k + l];
          const double* yrow = y.data() + l * n;
          for (std::int64_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
        }
      }
      break;
    }
    case Op::transpose: {
      const auto& x = *a[0].vals;
      const std::int64_t m = (*a[0].shape)[0];
      const std::int64_t n = (*a[0].shape)[1];
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
      break;
    }
    case Op::reshape: {
      out = *a[0].vals;
      break;
    }
    case Op::slice_rows: {
      const auto& x = *a[0].vals;
      const std::int64_t stride = numel(*a[0].shape) / (*a[0].shape)[0];
      const std::int64_t begin = iattr[0];
      std::memcpy(out.data(), x.data() + begin * stride,
                  n_out * sizeof(double));
      break;
    }
    case Op::embed_rows: {
      const auto& x = *a[0].vals;
      const std::int64_t stride = numel(*a[0].shape) / (*a[0].shape)[0];
      const std::int64_t begin = iattr[1];
      std::memcpy(out.data() + begin * stride, x.data(),
                  x.size() * sizeof(double));
      break;
    }
    case Op::flip_w: {
      const auto& x = *a[0].vals;
      const std::int64_t w = a[0].shape->back();
      const std::int64_t rows = numel(*a[0].shape) / w;
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < w; ++j)
          out[r * w + j] = x[r * w + (w - 1 - j)];
      break;
    }
    case Op::shift2d: {
      const auto& x = *a[0].vals;
      const Shape& s = *a[0].shape;
      const std::int64_t h = s[2], w = s[3];
      const std::int64_t planes = s[0] * s[1];
      const std::int64_t dy = iattr[0], dx = iattr[1];
      for (std::int64_t p = 0; p < planes; ++p) {
        const double* xi = x.data() + p * h * w;
        double* oi = out.data() + p * h * w;
        for (std::int64_t i = 0; i < h; ++i) {
          const std::int64_t si = i - dy;
          if (si < 0 || si >= h) continue;
          for (std::int64_t j = 0; j < w; ++j) {
            const std::int64_t sj = j - dx;
            if (sj >= 0 && sj < w) oi[i * w + j] = xi[si * w + sj];
          }
        }
      }
      break;
    }
    case Op::conv2d: {
      const auto& x = *a[0].vals;
      const auto& wt = *a[1].vals;
      const Shape& xs = *a[0].shape;
      const Shape& ws = *a[1].shape;
      const std::int64_t bsz = xs[0], ci = xs[1], h = xs[2], w = xs[3];
      const std::int64_t co = ws[0], kh = ws[2], kw = ws[3];
      const std::int64_t stride = iattr[0], pad = iattr[1];
      const std::int64_t ho = out_shape[2], wo = out_shape[3];
      for (std::int64_t b = 0; b < bsz; ++b)
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t i = 0; i < ho; ++i)
            for (std::int64_t j = 0; j < wo; ++j) {
              double acc = 0.0;
              for (std::int64_t c = 0; c < ci; ++c)
                for (std::int64_t ki = 0; ki < kh; ++ki) {
                  const std::int64_t y = i * stride - pad + ki;
                  if (y < 0 || y >= h) continue;
                  const double* xrow = x.data() + ((b * ci + c) * h + y) * w;
                  const double* wrow =
                      wt.data() + ((o * ci + c) * kh + ki) * kw;
                  for (std::int64_t kj = 0; kj < kw; ++kj) {
                    const std::int64_t z = j * stride - pad + kj;
                    if (z >= 0 && z < w) acc += xrow[z] * wrow[kj];
                  }
                }
              out[((b * co + o) * ho + i) * wo + j] = acc;
            }
      break;
    }
    case Op::conv2d_dx: {
      const auto& g = *a[0].vals;
      const auto& wt = *a[1].vals;
      const Shape& gs = *a[0].shape;
      const Shape& ws = *a[1].shape;
      const std::int64_t bsz = gs[0], co = gs[1], ho = gs[2], wo = gs[3];
      const std::int64_t ci = ws[1], kh = ws[2], kw = ws[3];
      const std::int64_t stride = iattr[0], pad = iattr[1];
      const std::int64_t h = iattr[2], w = iattr[3];
      for (std::int64_t b = 0; b < bsz; ++b)
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t i = 0; i < ho; ++i)
            for (std::int64_t j = 0; j < wo; ++j) {
              const double gv = g[((b * co + o) * ho + i) * wo + j];
              for (std::int64_t c = 0; c < ci; ++c)
                for (std::int64_t ki = 0; ki < kh; ++ki) {
                  const std::int64_t y = i * stride - pad + ki;
                  if (y < 0 || y >= h) continue;
                  double* orow = out.data() + ((b * ci + c) * h + y) * w;
                  const double* wrow =
                      wt.data() + ((o * ci + c) * kh + ki) * kw;
                  for (std::int64_t kj = 0; kj < kw; ++kj) {
                    const std::int64_t z = j * stride - pad + kj;
                    if (z >= 0 && z < w) orow[z] += gv * wrow[kj];
                  }
                }
            }
      break;
    }
    case Op::conv2d_dw: {
      const auto& g = *a[0].vals;
      const auto& x = *a[1].vals;
      const Shape& gs = *a[0].shape;
      const Shape& xs = *a[1].shape;
      const std::int64_t bsz = gs[0], co = gs[1], ho = gs[2], wo = gs[3];
      const std::int64_t ci = xs[1], h = xs[2], w = xs[3];
      const std::int64_t stride = iattr[0], pad = iattr[1];
      const std::int64_t kh = iattr[2], kw = iattr[3];
      for (std::int64_t b = 0; b < bsz; ++b)
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t i = 0; i < ho; ++i)
            for (std::int64_t j = 0; j < wo; ++j) {
              const double gv = g[((b * co + o) * ho + i) * wo + j];
              for (std::int64_t c = 0; c < ci; ++c)
                for (std::int64_t ki = 0; ki < kh; ++ki) {
                  const std::int64_t y = i * stride - pad + ki;
                  if (y < 0 || y >= h) continue;
                  const double* xrow = x.data() + ((b * ci + c) * h + y) * w;
                  double* orow = out.data() + ((o * ci + c) * kh + ki) * kw;
                  for (std::int64_t kj = 0; kj < kw; ++kj) {
                    const std::int64_t z = j * stride - pad + kj;
                    if (z >= 0 && z < w) orow[kj] += gv * xrow[z];
                  }
                }
            }
      break;
    }
    case Op::avgpool2d: {
      const auto& x = *a[0].vals;
      const Shape& s = *a[0].shape;
      const std::int64_t h = s[2], w = s[3];
      const std::int64_t planes = s[0] * s[1];
      const std::int64_t k = iattr[0];
      const std::int64_t hp = h / k, wp = w / k;
      const double inv = 1.0 / static_cast<double>(k * k);
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < hp; ++i)
          for (std::int64_t j = 0; j < wp; ++j) {
            double acc = 0.0;
            for (std::int64_t y = i * k; y < (i + 1) * k; ++y)
              for (std::int64_t z = j * k; z < (j + 1) * k; ++z)
                acc += x[p * h * w + y * w + z];
            out[p * hp * wp + i * wp + j] = acc * inv;
          }
      break;
    }
    case Op::avgunpool2d: {
      const auto& g = *a[0].vals;
      const Shape& s = *a[0].shape;
      const std::int64_t hp = s[2], wp = s[3];
      const std::int64_t planes = s[0] * s[1];
      const std::int64_t k = iattr[0];
      const std::int64_t h = hp * k, w = wp * k;
      const double inv = 1.0 / static_cast<double>(k * k);
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < h; ++i)
          for (std::int64_t j = 0; j < w; ++j)
            out[p * h * w + i * w + j] =
                g[p * hp * wp + (i / k) * wp + (j / k)] * inv;
      break;
    }
    case Op::maxpool2d: {
      const auto& x = *a[0].vals;
      const Shape& s = *a[0].shape;
      const std::int64_t h = s[2], w = s[3];
      const std::int64_t planes = s[0] * s[1];
      const std::int64_t k = iattr[0];
      const std::int64_t hp = h / k, wp = w / k;
      const bool record_idx = iattr.size() == 1;
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < hp; ++i)
          for (std::int64_t j = 0; j < wp; ++j) {
            // ties go to the first maximal element in scan order
            std::int64_t best = p * h * w + (i * k) * w + (j * k);
            double bv = x[best];
            for (std::int64_t y = i * k; y < (i + 1) * k; ++y)
              for (std::int64_t z = j * k; z < (j + 1) * k; ++z) {
                const std::int64_t f = p * h * w + y * w + z;
                if (x[f] > bv) {
                  bv = x[f];
                  best = f;
                }
              }
            out[p * hp * wp + i * wp + j] = bv;
            if (record_idx) iattr.push_back(best);
          }
      break;
    }
    case Op::maxpool_scatter: {
      const auto& g = *a[0].vals;
      for (std::size_t e = 0; e < g.size(); ++e)
        out[static_cast<std::size_t>(iattr[2 + e])] += g[e];
      break;
    }
    case Op::maxpool_gather: {
      const auto& x = *a[0].vals;
      for (std::size_t e = 0; e < n_out; ++e)
        out[e] = x[static_cast<std::size_t>(iattr[2 + e])];
      break;
    }
    case Op::relu: {
      const auto& x = *a[0].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    }
    case Op::log: {
      const auto& x = *a[0].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = std::log(x[i]);
      break;
    }
    case Op::exp: {
      const auto& x = *a[0].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = std::exp(x[i]);
      break;
    }
    case Op::sqrt: {
      const auto& x = *a[0].vals;
      for (std::size_t i = 0; i < n_out; ++i) out[i] = std::sqrt(x[i]);
      break;
    }
    case Op::sum_all: {
      const auto& x = *a[0].vals;
      double acc = 0.0;
      for (const double v : x) acc += v;
      out[0] = acc;
      break;
    }
    case Op::broadcast_full: {
      const double v = (*a[0].vals)[0];
      std::fill(out.begin(), out.end(), v);
      break;
    }
    case Op::sum_rows: {
      const auto& x = *a[0].vals;
      const std::int64_t m = (*a[0].shape)[0];
      const std::int64_t n = (*a[0].shape)[1];
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j] += x[i * n + j];
      break;
    }
    case Op::tile_rows: {
      const auto& x = *a[0].vals;
      const std::int64_t m = iattr[0];
      const std::int64_t n = (*a[0].shape)[0];
      for (std::int64_t i = 0; i < m; ++i)
        std::memcpy(out.data() + i * n, x.data(), n * sizeof(double));
      break;
    }
    case Op::sum_cols: {
      const auto& x = *a[0].vals;
      const std::int64_t m = (*a[0].shape)[0];
      const std::int64_t n = (*a[0].shape)[1];
      for (std::int64_t i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* row = x.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) acc += row[j];
        out[i] = acc;
      }
      break;
    }
    case Op::tile_cols: {
      const auto& x = *a[0].vals;
      const std::int64_t m = (*a[0].shape)[0];
      const std::int64_t n = iattr[0];
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = x[i];
      break;
    }
  }
}

}  // namespace detail

// Builds one op: evaluates it, and records a node when the graph is live.
inline Tensor make_op(Op op, const std::vector<const Tensor*>& ins,
                      Shape out_shape, std::vector<std::int64_t> iattr,
                      std::vector<double> dattr) {
  Graph* g = detail::common_graph(ins);
  std::vector<detail::ArgView> views;
  views.reserve(ins.size());
  for (const Tensor* t : ins) views.push_back({&t->shape(), &t->values()});
  std::vector<double> out;
  detail::eval_node(op, views, out_shape, iattr, dattr, out);
  if (!g || !g->recording()) return Tensor(std::move(out_shape), std::move(out));

  Graph::Node n;
  n.op = op;
  n.shape = std::move(out_shape);
  n.values = std::make_shared<std::vector<double>>(std::move(out));
  n.iattr = std::move(iattr);
  n.dattr = std::move(dattr);
  for (const Tensor* t : ins) {
    if (t->attached()) {
      n.inputs.push_back(t->node());
      n.requires_grad = n.requires_grad || g->node(t->node()).requires_grad;
    } else {
      n.inputs.push_back(g->intern_constant(*t));
    }
  }
  const std::int32_t id = g->append(std::move(n));
  return g->tensor_of(id);
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* what) {
  check(a.shape() == b.shape(), std::string(what) + " needs matching shapes, got " +
                                    shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  return make_op(Op::add, {&a, &b}, a.shape(), {}, {});
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  return make_op(Op::sub, {&a, &b}, a.shape(), {}, {});
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  return make_op(Op::mul, {&a, &b}, a.shape(), {}, {});
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  return make_op(Op::div, {&a, &b}, a.shape(), {}, {});
}

inline Tensor neg(const Tensor& a) {
  return make_op(Op::neg, {&a}, a.shape(), {}, {});
}

inline Tensor scale(const Tensor& a, double c) {
  return make_op(Op::scale, {&a}, a.shape(), {}, {c});
}

inline Tensor offset(const Tensor& a, double c) {
  return make_op(Op::offset, {&a}, a.shape(), {}, {c});
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
        "matmul needs (m, k) x (k, n), got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  return make_op(Op::matmul, {&a, &b}, {a.shape()[0], b.shape()[1]}, {}, {});
}

inline Tensor transpose(const Tensor& a) {
  check(a.rank() == 2, "transpose needs a matrix, got " + shape_str(a.shape()));
  return make_op(Op::transpose, {&a}, {a.shape()[1], a.shape()[0]}, {}, {});
}

inline Tensor reshape(const Tensor& a, Shape s) {
  check(numel(s) == a.size(), "reshape from " + shape_str(a.shape()) + " to " +
                                  shape_str(s) + " changes element count");
  return make_op(Op::reshape, {&a}, std::move(s), {}, {});
}

inline Tensor slice_rows(const Tensor& a, std::int64_t begin,
                         std::int64_t count) {
  check(a.rank() >= 1, "slice_rows needs rank >= 1");
  check(begin >= 0 && count >= 1 && begin + count <= a.shape()[0],
        "slice_rows [" + std::to_string(begin) + ", " +
            std::to_string(begin + count) + ") out of range for " +
            shape_str(a.shape()));
  Shape out = a.shape();
  out[0] = count;
  return make_op(Op::slice_rows, {&a}, std::move(out), {begin, count}, {});
}

inline Tensor embed_rows(const Tensor& a, std::int64_t total,
                         std::int64_t begin) {
  check(a.rank() >= 1, "embed_rows needs rank >= 1");
  check(begin >= 0 && begin + a.shape()[0] <= total,
        "embed_rows target rows exceeded");
  Shape out = a.shape();
  out[0] = total;
  return make_op(Op::embed_rows, {&a}, std::move(out), {total, begin}, {});
}

inline Tensor flip_w(const Tensor& a) {
  check(a.rank() >= 1, "flip_w needs rank >= 1");
  return make_op(Op::flip_w, {&a}, a.shape(), {}, {});
}

inline Tensor shift2d(const Tensor& a, std::int64_t dy, std::int64_t dx) {
  check(a.rank() == 4, "shift2d needs (b, c, h, w), got " +
                           shape_str(a.shape()));
  return make_op(Op::shift2d, {&a}, a.shape(), {dy, dx}, {});
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::int64_t stride = 1,
                     std::int64_t pad = 0) {
  check(x.rank() == 4 && w.rank() == 4, "conv2d needs rank-4 input and kernel");
  check(x.shape()[1] == w.shape()[1],
        "conv2d channel mismatch: input " + shape_str(x.shape()) +
            ", kernel " + shape_str(w.shape()));
  check(stride >= 1 && pad >= 0, "conv2d needs stride >= 1, pad >= 0");
  const std::int64_t ho =
      detail::conv_out_dim(x.shape()[2], w.shape()[2], stride, pad);
  const std::int64_t wo =
      detail::conv_out_dim(x.shape()[3], w.shape()[3], stride, pad);
  check(ho >= 1 && wo >= 1, "conv2d output would be empty for input " +
                                shape_str(x.shape()) + " and kernel " +
                                shape_str(w.shape()));
  return make_op(Op::conv2d, {&x, &w}, {x.shape()[0], w.shape()[0], ho, wo},
                 {stride, pad}, {});
}

inline Tensor conv2d_dx(const Tensor& g, const Tensor& w, std::int64_t stride,
                        std::int64_t pad, std::int64_t in_h,
                        std::int64_t in_w) {
  check(g.rank() == 4 && w.rank() == 4, "conv2d_dx needs rank-4 operands");
  check(g.shape()[1] == w.shape()[0], "conv2d_dx channel mismatch");
  check(detail::conv_out_dim(in_h, w.shape()[2], stride, pad) == g.shape()[2] &&
            detail::conv_out_dim(in_w, w.shape()[3], stride, pad) ==
                g.shape()[3],
        "conv2d_dx geometry inconsistent with gradient shape " +
            shape_str(g.shape()));
  return make_op(Op::conv2d_dx, {&g, &w},
                 {g.shape()[0], w.shape()[1], in_h, in_w},
                 {stride, pad, in_h, in_w}, {});
}

inline Tensor conv2d_dw(const Tensor& g, const Tensor& x, std::int64_t stride,
                        std::int64_t pad, std::int64_t k_h, std::int64_t k_w) {
  check(g.rank() == 4 && x.rank() == 4, "conv2d_dw needs rank-4 operands");
  check(g.shape()[0] == x.shape()[0], "conv2d_dw batch mismatch");
  check(detail::conv_out_dim(x.shape()[2], k_h, stride, pad) == g.shape()[2] &&
            detail::conv_out_dim(x.shape()[3], k_w, stride, pad) ==
                g.shape()[3],
        "conv2d_dw geometry inconsistent with gradient shape " +
            shape_str(g.shape()));
  return make_op(Op::conv2d_dw, {&g, &x},
                 {g.shape()[1], x.shape()[1], k_h, k_w},
                 {stride, pad, k_h, k_w}, {});
}

inline void check_pool(const Tensor& x, std::int64_t k, const char* what) {
  check(x.rank() == 4, std::string(what) + " needs (b, c, h, w)");
  check(k >= 1 && x.shape()[2] % k == 0 && x.shape()[3] % k == 0,
        std::string(what) + " window " + std::to_string(k) +
            " must divide spatial dims of " + shape_str(x.shape()));
}

inline Tensor avgpool2d(const Tensor& x, std::int64_t k) {
  check_pool(x, k, "avgpool2d");
  return make_op(Op::avgpool2d, {&x},
                 {x.shape()[0], x.shape()[1], x.shape()[2] / k,
                  x.shape()[3] / k},
                 {k}, {});
}

inline Tensor avgunpool2d(const Tensor& g, std::int64_t k) {
  check(g.rank() == 4 && k >= 1, "avgunpool2d needs (b, c, h, w) and k >= 1");
  return make_op(Op::avgunpool2d, {&g},
                 {g.shape()[0], g.shape()[1], g.shape()[2] * k,
                  g.shape()[3] * k},
                 {k}, {});
}

inline Tensor maxpool2d(const Tensor& x, std::int64_t k) {
  check_pool(x, k, "maxpool2d");
  return make_op(Op::maxpool2d, {&x},
                 {x.shape()[0], x.shape()[1], x.shape()[2] / k,
                  x.shape()[3] / k},
                 {k}, {});
}

inline Tensor maxpool_scatter(const Tensor& g,
                              const std::vector<std::int64_t>& idx,
                              std::int64_t in_h, std::int64_t in_w) {
  check(g.rank() == 4, "maxpool_scatter needs (b, c, hp, wp)");
  check(static_cast<std::int64_t>(idx.size()) == g.size(),
        "maxpool_scatter index count mismatch");
  std::vector<std::int64_t> iattr{in_h, in_w};
  iattr.insert(iattr.end(), idx.begin(), idx.end());
  return make_op(Op::maxpool_scatter, {&g},
                 {g.shape()[0], g.shape()[1], in_h, in_w}, std::move(iattr),
                 {});
}

inline Tensor maxpool_gather(const Tensor& x,
                             const std::vector<std::int64_t>& idx,
                             std::int64_t out_h, std::int64_t out_w) {
  check(x.rank() == 4, "maxpool_gather needs (b, c, h, w)");
  check(static_cast<std::int64_t>(idx.size()) ==
            x.shape()[0] * x.shape()[1] * out_h * out_w,
        "maxpool_gather index count mismatch");
  std::vector<std::int64_t> iattr{out_h, out_w};
  iattr.insert(iattr.end(), idx.begin(), idx.end());
  return make_op(Op::maxpool_gather, {&x},
                 {x.shape()[0], x.shape()[1], out_h, out_w}, std::move(iattr),
                 {});
}

inline Tensor relu(const Tensor& a) {
  return make_op(Op::relu, {&a}, a.shape(), {}, {});
}

inline Tensor log(const Tensor& a) {
  return make_op(Op::log, {&a}, a.shape(), {}, {});
}

inline Tensor exp(const Tensor& a) {
  return make_op(Op::exp, {&a}, a.shape(), {}, {});
}

inline Tensor sqrt(const Tensor& a) {
  return make_op(Op::sqrt, {&a}, a.shape(), {}, {});
}

inline Tensor sum_all(const Tensor& a) {
  return make_op(Op::sum_all, {&a}, Shape{}, {}, {});
}

inline Tensor broadcast_full(const Tensor& s, Shape shape) {
  check(s.size() == 1, "broadcast_full needs a scalar, got " +
                           shape_str(s.shape()));
  return make_op(Op::broadcast_full, {&s}, std::move(shape), {}, {});
}

inline void check_matrix(const Tensor& a, const char* what) {
  check(a.rank() == 2, std::string(what) + " needs a matrix, got " +
                           shape_str(a.shape()));
}

inline Tensor sum_rows(const Tensor& a) {
  check_matrix(a, "sum_rows");
  return make_op(Op::sum_rows, {&a}, {a.shape()[1]}, {}, {});
}

inline Tensor tile_rows(const Tensor& v, std::int64_t m) {
  check(v.rank() == 1 && m >= 1, "tile_rows needs a vector and m >= 1");
  return make_op(Op::tile_rows, {&v}, {m, v.shape()[0]}, {m}, {});
}

inline Tensor sum_cols(const Tensor& a) {
  check_matrix(a, "sum_cols");
  return make_op(Op::sum_cols, {&a}, {a.shape()[0]}, {}, {});
}

inline Tensor tile_cols(const Tensor& v, std::int64_t n) {
  check(v.rank() == 1 && n >= 1, "tile_cols needs a vector and n >= 1");
  return make_op(Op::tile_cols, {&v}, {v.shape()[0], n}, {n}, {});
}

// Composites. These stay differentiable to any order because they only touch
// the primitives above.

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor dot(const Tensor& a, const Tensor& b) {
  return sum_all(mul(a, b));
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor l2_norm(const Tensor& a) { return sqrt(sum_all(square(a))); }

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  return div(dot(a, b), mul(l2_norm(a), l2_norm(b)));
}

inline Tensor flatten_rows(const Tensor& a, std::int64_t rows) {
  check(rows >= 1 && a.size() % rows == 0,
        "flatten_rows cannot split " + shape_str(a.shape()) + " into " +
            std::to_string(rows) + " rows");
  return reshape(a, {rows, a.size() / rows});
}

// Per-row max as a detached constant. Subtracting it keeps exp() in range
// without touching derivatives, since it is constant under differentiation.
inline Tensor rowmax_const(const Tensor& z) {
  check_matrix(z, "rowmax_const");
  const std::int64_t m = z.shape()[0], n = z.shape()[1];
  std::vector<double> mx(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    double best = z.values()[i * n];
    for (std::int64_t j = 1; j < n; ++j)
      best = std::max(best, z.values()[i * n + j]);
    mx[i] = best;
  }
  return Tensor({m}, std::move(mx));
}

inline Tensor softmax_rows(const Tensor& z) {
  check_matrix(z, "softmax_rows");
  const std::int64_t n = z.shape()[1];
  const Tensor shifted = sub(z, tile_cols(rowmax_const(z), n));
  const Tensor e = exp(shifted);
  return div(e, tile_cols(sum_cols(e), n));
}

inline Tensor one_hot(const std::vector<int>& labels, std::int64_t classes) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check(labels[i] >= 0 && labels[i] < classes,
          "label " + std::to_string(labels[i]) + " outside [0, " +
              std::to_string(classes) + ")");
    v[i * classes + labels[i]] = 1.0;
  }
  return Tensor({static_cast<std::int64_t>(labels.size()), classes},
                std::move(v));
}

// Mean cross-entropy of logits against integer labels.
inline Tensor cross_entropy_mean(const Tensor& logits,
                                 const std::vector<int>& labels) {
  check_matrix(logits, "cross_entropy_mean");
  const std::int64_t b = logits.shape()[0], c = logits.shape()[1];
  check(static_cast<std::int64_t>(labels.size()) == b,
        "cross_entropy_mean label count mismatch");
  const Tensor shifted = sub(logits, tile_cols(rowmax_const(logits), c));
  const Tensor lse = log(sum_cols(exp(shifted)));
  const Tensor picked = sum_cols(mul(shifted, one_hot(labels, c)));
  return scale(sum_all(sub(lse, picked)), 1.0 / static_cast<double>(b));
}

// Per-sample normalization over each (batch, channel) plane.
inline Tensor instance_norm_2d(const Tensor& x, double eps = 1e-5) {
  check(x.rank() == 4, "instance_norm_2d needs (b, c, h, w)");
  const std::int64_t planes = x.shape()[0] * x.shape()[1];
  const std::int64_t hw = x.shape()[2] * x.shape()[3];
  const Tensor r = reshape(x, {planes, hw});
  const Tensor mean = scale(sum_cols(r), 1.0 / static_cast<double>(hw));
  const Tensor centered = sub(r, tile_cols(mean, hw));
  const Tensor var =
      scale(sum_cols(square(centered)), 1.0 / static_cast<double>(hw));
  const Tensor norm = div(centered, tile_cols(sqrt(offset(var, eps)), hw));
  return reshape(norm, x.shape());
}

// x (b, in) with weight (out, in) and bias (out).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_matrix(x, "linear");
  check_matrix(w, "linear weight");
  check(b.rank() == 1 && b.shape()[0] == w.shape()[0] &&
            x.shape()[1] == w.shape()[1],
        "linear shapes inconsistent: x " + shape_str(x.shape()) + ", w " +
            shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  return add(matmul(x, transpose(w)), tile_rows(b, x.shape()[0]));
}

// Adds a per-channel bias to a (b, c, h, w) activation.
inline Tensor conv_bias_add(const Tensor& y, const Tensor& b) {
  check(y.rank() == 4 && b.rank() == 1 && b.shape()[0] == y.shape()[1],
        "conv_bias_add needs (b, c, h, w) and a length-c bias");
  const std::int64_t bs = y.shape()[0], c = y.shape()[1];
  const std::int64_t hw = y.shape()[2] * y.shape()[3];
  const Tensor tiled =
      tile_cols(reshape(tile_rows(b, bs), {bs * c}), hw);
  return add(y, reshape(tiled, y.shape()));
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows needs at least one tensor");
  if (parts.size() == 1) return parts[0];
  std::int64_t total = 0;
  for (const Tensor& t : parts) {
    check(t.rank() == parts[0].rank(), "concat_rows rank mismatch");
    for (std::int64_t d = 1; d < t.rank(); ++d)
      check(t.shape()[d] == parts[0].shape()[d],
            "concat_rows trailing dims mismatch");
    total += t.shape()[0];
  }
  Tensor acc;
  std::int64_t at = 0;
  for (const Tensor& t : parts) {
    Tensor placed = embed_rows(t, total, at);
    acc = acc.defined() ? add(acc, placed) : placed;
    at += t.shape()[0];
  }
  return acc;
}

// Marks rows whose sum of squares is exactly zero. Adding the mask under a
// sqrt keeps the tape finite at such rows; callers arrange for the numerator
// to vanish there so the masked value never shows through.
inline Tensor zero_row_mask(const Tensor& sumsq) {
  std::vector<double> m(sumsq.values().size(), 0.0);
  bool any = false;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (sumsq.values()[i] == 0.0) {
      m[i] = 1.0;
      any = true;
    }
  return any ? Tensor(sumsq.shape(), std::move(m)) : Tensor();
}

inline Tensor guarded_row_norm(const Tensor& sumsq) {
  const Tensor mask = zero_row_mask(sumsq);
  return sqrt(mask.defined() ? add(sumsq, mask) : sumsq);
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  check_matrix(logits, "argmax_rows");
  const std::int64_t m = logits.shape()[0], n = logits.shape()[1];
  std::vector<int> out(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < n; ++j)
      if (logits.values()[i * n + j] > logits.values()[i * n + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline bool Graph::replay_check() const {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::leaf || n.op == Op::constant) continue;
    std::vector<detail::ArgView> args;
    args.reserve(n.inputs.size());
    for (const std::int32_t in : n.inputs)
      args.push_back({&nodes_[in].shape, nodes_[in].values.get()});
    // maxpool regenerates its indices, so replay from the window size alone
    std::vector<std::int64_t> iattr =
        n.op == Op::maxpool2d ? std::vector<std::int64_t>{n.iattr[0]} : n.iattr;
    std::vector<double> out;
    detail::eval_node(n.op, args, n.shape, iattr, n.dattr, out);
    if (out.size() != n.values->size()) return false;
    if (std::memcmp(out.data(), n.values->data(),
                    out.size() * sizeof(double)) != 0)
      return false;
    if (n.op == Op::maxpool2d && iattr != n.iattr) return false;
  }
  return true;
}

}  // namespace tinydd
