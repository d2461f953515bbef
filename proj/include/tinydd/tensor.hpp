#pragma once

// Dense f64 tensors plus the operation tape they are recorded on. A Graph owns
// an append-only list of nodes; each node stores its op kind, input node ids,
// op attributes, and the forward values. Tensors are cheap handles: either
// detached constants (no graph) or views of a graph node. Backward passes in
// autodiff.hpp walk the tape in reverse; replay_check() in ops.hpp re-executes
// it to prove the record is complete.

#include <cstdint>
#include <deque>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tinydd {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

enum class Op : std::uint8_t {
  leaf,      // differentiable input, values supplied by the caller
  constant,  // interned detached value
  add,
  sub,
  mul,
  div,
  neg,
  scale,   // dattr: c, y = c * x
  offset,  // dattr: c, y = x + c
  matmul,
  transpose,
  reshape,
  slice_rows,  // iattr: begin, count
  embed_rows,  // iattr: total, begin; rows placed into a larger zero tensor
  flip_w,      // reverse the last axis
  shift2d,     // iattr: dy, dx; zero-fill shift over the two trailing axes
  conv2d,      // iattr: stride, pad
  conv2d_dx,   // iattr: stride, pad, in_h, in_w; input gradient of conv2d
  conv2d_dw,   // iattr: stride, pad, k_h, k_w; weight gradient of conv2d
  avgpool2d,   // iattr: k (window and stride)
  avgunpool2d,
  maxpool2d,        // iattr: k, then one flat argmax index per output element
  maxpool_scatter,  // iattr: in_h, in_w, then indices
  maxpool_gather,   // iattr: out_h, out_w, then indices
  relu,
  log,
  exp,
  sqrt,
  sum_all,
  broadcast_full,  // scalar to arbitrary shape
  sum_rows,        // (m, n) -> (n)
  tile_rows,       // iattr: m, (n) -> (m, n)
  sum_cols,        // (m, n) -> (m)
  tile_cols,       // iattr: n, (m) -> (m, n)
};

class Graph;

class Tensor {
 public:
  Tensor() = default;

  // Detached constant.
  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        values_(std::make_shared<std::vector<double>>(std::move(values))) {
    check(numel(shape_) == static_cast<std::int64_t>(values_->size()),
          "tensor value count " + std::to_string(values_->size()) +
              " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, double value) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), value);
    return Tensor(std::move(shape), std::move(v));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return numel(shape_); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  const std::vector<double>& values() const { return *values_; }
  bool defined() const { return values_ != nullptr; }

  double item() const {
    check(size() == 1, "item() needs a single-element tensor, got shape " +
                           shape_str(shape_));
    return (*values_)[0];
  }

  Graph* graph() const { return graph_; }
  std::int32_t node() const { return node_; }
  bool attached() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Tensor(Shape shape, std::shared_ptr<std::vector<double>> values, Graph* g,
         std::int32_t node)
      : shape_(std::move(shape)),
        values_(std::move(values)),
        graph_(g),
        node_(node) {}

  Shape shape_;
  std::shared_ptr<std::vector<double>> values_;
  Graph* graph_ = nullptr;
  std::int32_t node_ = -1;
};

class Graph {
 public:
  struct Node {
    Op op;
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    std::vector<std::int32_t> inputs;
    std::vector<std::int64_t> iattr;
    std::vector<double> dattr;
    bool requires_grad = false;  // true iff some leaf feeds this node
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // New differentiable input holding a copy of the given values.
  Tensor leaf(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    return adopt(t, Op::leaf, true);
  }

  Tensor leaf(const Tensor& detached) {
    check(!detached.attached(), "leaf() needs a detached tensor");
    return adopt(detached, Op::leaf, true);
  }

  std::size_t size() const { return nodes_.size(); }

  const Node& node(std::int32_t id) const { return nodes_[id]; }

  Tensor tensor_of(std::int32_t id) {
    const Node& n = nodes_[id];
    return Tensor(n.shape, n.values, this, id);
  }

  // Records a detached value as a constant node: attached, but opaque to
  // differentiation. Backward through it yields zeros rather than an error.
  Tensor constant(const Tensor& t) {
    check(!t.attached(), "constant() needs a detached tensor");
    return tensor_of(intern_constant(t));
  }

  bool recording() const { return recording_; }

  // Scoped off-switch: ops built while one is alive come out detached.
  class PauseRecording {
   public:
    explicit PauseRecording(Graph* g) : g_(g) {
      if (g_) {
        prev_ = g_->recording_;
        g_->recording_ = false;
      }
    }
    ~PauseRecording() {
      if (g_) g_->recording_ = prev_;
    }
    PauseRecording(const PauseRecording&) = delete;
    PauseRecording& operator=(const PauseRecording&) = delete;

   private:
    Graph* g_;
    bool prev_ = true;
  };

  const std::vector<std::string>& warnings() const { return warnings_; }
  void warn(std::string msg) { warnings_.push_back(std::move(msg)); }

  // Re-executes every recorded op and verifies the stored forward values
  // match bit for bit. Defined in ops.hpp next to the kernels.
  bool replay_check() const;

 private:
  friend Tensor make_op(Op, const std::vector<const Tensor*>&, Shape,
                        std::vector<std::int64_t>, std::vector<double>);

  Tensor adopt(const Tensor& src, Op op, bool differentiable) {
    Node n;
    n.op = op;
    n.shape = src.shape();
    n.values = std::make_shared<std::vector<double>>(src.values());
    n.requires_grad = differentiable;
    nodes_.push_back(std::move(n));
    const auto id = static_cast<std::int32_t>(nodes_.size() - 1);
    return tensor_of(id);
  }

  std::int32_t intern_constant(const Tensor& t) {
    Node n;
    n.op = Op::constant;
    n.shape = t.shape();
    n.values = std::make_shared<std::vector<double>>(t.values());
    nodes_.push_back(std::move(n));
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  std::int32_t append(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool recording_ = true;
  std::vector<std::string> warnings_;
};

}  // namespace tinydd
