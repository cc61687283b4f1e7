// Copyright 2026 The MSM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tape-based reverse-mode differentiation over dense double matrices.
//
// A Graph owns every intermediate value built during one forward pass. Ops
// are free functions taking and returning Var handles; each op computes its
// value eagerly and, when the graph is recording and some input needs a
// gradient, appends a backward rule to the tape. Graph::backward walks the
// tape in reverse and accumulates parameter gradients into the ParamStore
// the parameters were bound from.

#ifndef MSM_AUTOGRAD_HPP_
#define MSM_AUTOGRAD_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "msm/tensor.hpp"

namespace msm {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Graph;

class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  // Receives the graph and the id of the node whose gradient is propagated.
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  // A non-recording graph computes values only; used for evaluation.
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Free leaf that tracks a gradient but is not bound to a ParamStore.
  Var input(Tensor value);
  // Leaf bound to store[name]; repeated calls return the same node.
  Var param(ParamStore& store, const std::string& name);

  // Seeds d(root)/d(root) = 1 and accumulates into bound parameter grads.
  void backward(Var root);

  bool recording() const { return recording_; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  // Gradient accumulator of a node, allocated on first touch.
  Tensor& grad_ref(std::size_t id);

  // Op construction. `inputs` decide whether the node needs a gradient.
  Var make(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var make(Tensor value, std::span<const Var> inputs, BackwardFn fn);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    ParamStore* store = nullptr;
    std::string param_name;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_nodes_;
};

// Half-open row range [start, start + length) of a stacked sequence matrix.
struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
// Same shape, or b a 1 x n row broadcast over the rows of a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
// axis -1 (or 1) normalizes each row; axis 0 normalizes each column.
Var softmax(Var x, int axis = -1);
// Per-row normalization; gain and bias are 1 x n rows.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
Var embedding_lookup(Var table, std::span<const std::int32_t> ids);
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var concat(std::span<const Var> parts, int axis = 0);
// Mean over rows of -log softmax(row)[target]. `allowed`, when non-empty,
// is a row-major 0/1 mask of the logits; masked-out entries take no mass.
Var cross_entropy(Var logits, std::span<const std::int32_t> targets,
                  std::span<const std::uint8_t> allowed = {});
Var dot(Var a, Var b);
Var detach(Var x);
Var sum(Var x);
Var l2_normalize_rows(Var x, double eps = 1e-12);
// Multi-head scaled dot-product attention applied independently within
// each segment. q, k, v are T x d with d divisible by `heads`.
Var segment_attention(Var q, Var k, Var v, std::span<const Segment> segments,
                      std::size_t heads);

}  // namespace msm

#endif  // MSM_AUTOGRAD_HPP_
