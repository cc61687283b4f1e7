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

#include "msm/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace msm {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StridedConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

ConstMap view(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                   shape_str(b));
}

Shape mat(std::size_t r, std::size_t c) { return {r, c}; }

// Adds `delta` into the gradient of `id` when that node needs one.
void accumulate(Graph& g, Var target, const Tensor& delta) {
  if (!g.needs_grad(target)) return;
  auto dst = g.grad_ref(target.id()).data();
  auto src = delta.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

const Tensor& Var::value() const { return graph_->value(id_); }
const Tensor& Var::grad() const { return graph_->grad(id_); }

Var Graph::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::input(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = recording_;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(ParamStore& store, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Var(this, it->second);
  Node node;
  node.value = store.value(name);
  node.needs_grad = recording_;
  node.store = &store;
  node.param_name = name;
  nodes_.push_back(std::move(node));
  param_nodes_.emplace(name, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::grad(std::size_t id) const {
  static const Tensor kEmpty;
  const Node& n = nodes_[id];
  return n.has_grad ? n.grad : kEmpty;
}

Tensor& Graph::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

Var Graph::make(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return make(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
              std::move(fn));
}

Var Graph::make(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (recording_) {
    for (const Var& in : inputs) {
      if (nodes_[in.id()].needs_grad) {
        node.needs_grad = true;
        break;
      }
    }
    if (node.needs_grad) node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var root) {
  if (!recording_) throw std::logic_error("backward on a non-recording graph");
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  if (!nodes_[root.id()].needs_grad) return;
  grad_ref(root.id())[0] += 1.0;
  // Ids are topologically ordered by construction.
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.needs_grad) continue;
    if (n.backward) {
      n.backward(*this, id);
    } else if (n.store != nullptr) {
      auto dst = n.store->grad(n.param_name).data();
      auto src = n.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

// Backward closures capture Var handles (ids), never references into the
// node vector: it may reallocate while the forward pass is still growing.

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
  Graph& g = *a.graph();
  Tensor out(mat(a.rows(), b.cols()));
  view(out).noalias() = view(a.value()) * view(b.value());
  return g.make(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    auto dy = view(g.grad(self));
    if (g.needs_grad(a)) view(g.grad_ref(a.id())).noalias() += dy * view(b.value()).transpose();
    if (g.needs_grad(b)) view(g.grad_ref(b.id())).noalias() += view(a.value()).transpose() * dy;
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) shape_error("matmul_nt", a.shape(), b.shape());
  Graph& g = *a.graph();
  Tensor out(mat(a.rows(), b.rows()));
  view(out).noalias() = view(a.value()) * view(b.value()).transpose();
  return g.make(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    auto dy = view(g.grad(self));
    if (g.needs_grad(a)) view(g.grad_ref(a.id())).noalias() += dy * view(b.value());
    if (g.needs_grad(b)) view(g.grad_ref(b.id())).noalias() += dy.transpose() * view(a.value());
  });
}

Var add(Var a, Var b) {
  Graph& g = *a.graph();
  const bool same = a.shape() == b.shape() ||
                    (a.value().size() == b.value().size() && a.rows() == b.rows() &&
                     a.cols() == b.cols());
  const bool broadcast = !same && b.rows() == 1 && b.cols() == a.cols();
  if (!same && !broadcast) shape_error("add", a.shape(), b.shape());
  Tensor out = a.value();
  if (same) {
    view(out) += view(b.value());
  } else {
    view(out).rowwise() += view(b.value()).row(0);
  }
  return g.make(std::move(out), {a, b}, [a, b, same](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    accumulate(g, a, dy);
    if (!g.needs_grad(b)) return;
    if (same) {
      accumulate(g, b, dy);
    } else {
      view(g.grad_ref(b.id())).row(0) += view(dy).colwise().sum();
    }
  });
}

Var sub(Var a, Var b) {
  if (a.value().size() != b.value().size() || a.rows() != b.rows()) {
    shape_error("sub", a.shape(), b.shape());
  }
  Graph& g = *a.graph();
  Tensor out = a.value();
  view(out) -= view(b.value());
  return g.make(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    accumulate(g, a, g.grad(self));
    if (g.needs_grad(b)) view(g.grad_ref(b.id())) -= view(g.grad(self));
  });
}

Var mul(Var a, Var b) {
  if (a.value().size() != b.value().size() || a.rows() != b.rows()) {
    shape_error("mul", a.shape(), b.shape());
  }
  Graph& g = *a.graph();
  Tensor out = a.value();
  view(out).array() *= view(b.value()).array();
  return g.make(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    auto dy = view(g.grad(self)).array();
    if (g.needs_grad(a)) view(g.grad_ref(a.id())).array() += dy * view(b.value()).array();
    if (g.needs_grad(b)) view(g.grad_ref(b.id())).array() += dy * view(a.value()).array();
  });
}

Var scale(Var a, double c) {
  Graph& g = *a.graph();
  Tensor out = a.value();
  view(out) *= c;
  return g.make(std::move(out), {a}, [a, c](Graph& g, std::size_t self) {
    view(g.grad_ref(a.id())) += c * view(g.grad(self));
  });
}

Var softmax(Var x, int axis) {
  if (axis != -1 && axis != 0 && axis != 1) {
    throw std::invalid_argument("softmax: axis must be -1, 0 or 1");
  }
  // Rank <= 1 has a single axis; axis 0 there means the whole row.
  const bool by_column = axis == 0 && x.value().rank() == 2;
  const std::size_t extent = by_column ? x.rows() : x.cols();
  if (extent == 0 || x.value().size() == 0) {
    throw ShapeError("softmax: empty axis in shape " + shape_str(x.shape()));
  }
  Graph& g = *x.graph();
  Tensor out = x.value();
  auto y = view(out);
  auto normalize = [](auto&& v) {
    const double m = v.maxCoeff();
    v = (v.array() - m).exp();
    v /= v.sum();
  };
  if (by_column) {
    for (Eigen::Index c = 0; c < y.cols(); ++c) normalize(y.col(c));
  } else {
    for (Eigen::Index r = 0; r < y.rows(); ++r) normalize(y.row(r));
  }
  return g.make(std::move(out), {x}, [x, by_column](Graph& g, std::size_t self) {
    auto yv = view(g.value(self));
    auto dy = view(g.grad(self));
    auto dx = view(g.grad_ref(x.id()));
    if (by_column) {
      for (Eigen::Index c = 0; c < yv.cols(); ++c) {
        const double s = yv.col(c).dot(dy.col(c));
        dx.col(c).array() += yv.col(c).array() * (dy.col(c).array() - s);
      }
    } else {
      for (Eigen::Index r = 0; r < yv.rows(); ++r) {
        const double s = yv.row(r).dot(dy.row(r));
        dx.row(r).array() += yv.row(r).array() * (dy.row(r).array() - s);
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const std::size_t n = x.cols();
  if (gain.value().size() != n) shape_error("layer_norm", x.shape(), gain.shape());
  if (bias.value().size() != n) shape_error("layer_norm", x.shape(), bias.shape());
  Graph& g = *x.graph();
  const std::size_t rows = x.rows();
  auto xhat = std::make_shared<Tensor>(x.value());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(x.shape());
  auto xh = view(*xhat);
  auto y = view(out);
  auto gv = view(gain.value()).row(0);
  auto bv = view(bias.value()).row(0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xh.row(r);
    const double mean = row.mean();
    row.array() -= mean;
    const double var = row.squaredNorm() / static_cast<double>(n);
    (*rstd)[r] = 1.0 / std::sqrt(var + eps);
    row *= (*rstd)[r];
    y.row(r) = row.cwiseProduct(gv) + bv;
  }
  return g.make(std::move(out), {x, gain, bias},
                [x, gain, bias, xhat, rstd, n](Graph& g, std::size_t self) {
                  auto dy = view(g.grad(self));
                  auto xh = view(*xhat);
                  if (g.needs_grad(gain)) {
                    view(g.grad_ref(gain.id())).row(0) += dy.cwiseProduct(xh).colwise().sum();
                  }
                  if (g.needs_grad(bias)) view(g.grad_ref(bias.id())).row(0) += dy.colwise().sum();
                  if (!g.needs_grad(x)) return;
                  auto dx = view(g.grad_ref(x.id()));
                  auto gv = view(gain.value()).row(0);
                  const double inv_n = 1.0 / static_cast<double>(n);
                  Eigen::RowVectorXd dxhat(n);
                  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                    dxhat = dy.row(r).cwiseProduct(gv);
                    const double m1 = dxhat.sum() * inv_n;
                    const double m2 = dxhat.dot(xh.row(r)) * inv_n;
                    dx.row(r).array() +=
                        (*rstd)[r] * (dxhat.array() - m1 - xh.row(r).array() * m2);
                  }
                });
}

Var gelu(Var x) {
  Graph& g = *x.graph();
  Tensor out = x.value();
  for (double& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return g.make(std::move(out), {x}, [x](Graph& g, std::size_t self) {
    const auto& xv = x.value().storage();
    const auto& dy = g.grad(self).storage();
    auto& dx = g.grad_ref(x.id()).storage();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      dx[i] += dy[i] * (cdf + v * pdf);
    }
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  Graph& g = *x.graph();
  const std::size_t n = x.cols();
  const std::size_t src_rows = x.rows();
  Tensor out(mat(rows.size(), n));
  auto src = view(x.value());
  auto y = view(out);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= src_rows) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) +
                              " out of range for shape " + shape_str(x.shape()));
    }
    y.row(i) = src.row(rows[i]);
  }
  auto index = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return g.make(std::move(out), {x}, [x, index](Graph& g, std::size_t self) {
    auto dy = view(g.grad(self));
    auto dx = view(g.grad_ref(x.id()));
    for (std::size_t i = 0; i < index->size(); ++i) dx.row((*index)[i]) += dy.row(i);
  });
}

Var embedding_lookup(Var table, std::span<const std::int32_t> ids) {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) +
                              " out of range for table " + shape_str(table.shape()));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, rows);
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  Graph& g = *parts.front().graph();
  const Var& first = parts.front();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (axis == 0 && p.cols() != first.cols()) shape_error("concat", first.shape(), p.shape());
    if (axis == 1 && p.rows() != first.rows()) shape_error("concat", first.shape(), p.shape());
    total += axis == 0 ? p.rows() : p.cols();
  }
  Tensor out = axis == 0 ? Tensor(mat(total, first.cols())) : Tensor(mat(first.rows(), total));
  auto y = view(out);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    auto pv = view(p.value());
    if (axis == 0) {
      y.middleRows(offset, pv.rows()) = pv;
      offset += pv.rows();
    } else {
      y.middleCols(offset, pv.cols()) = pv;
      offset += pv.cols();
    }
  }
  auto inputs = std::make_shared<std::vector<Var>>(parts.begin(), parts.end());
  return g.make(std::move(out), parts, [inputs, axis](Graph& g, std::size_t self) {
    auto dy = view(g.grad(self));
    std::size_t offset = 0;
    for (const Var& p : *inputs) {
      const std::size_t extent = axis == 0 ? p.rows() : p.cols();
      if (g.needs_grad(p)) {
        if (axis == 0) {
          view(g.grad_ref(p.id())) += dy.middleRows(offset, extent);
        } else {
          view(g.grad_ref(p.id())) += dy.middleCols(offset, extent);
        }
      }
      offset += extent;
    }
  });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets,
                  std::span<const std::uint8_t> allowed) {
  const std::size_t rows = logits.rows();
  const std::size_t n = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(logits.shape()));
  }
  if (!allowed.empty() && allowed.size() != rows * n) {
    throw ShapeError("cross_entropy: mask size " + std::to_string(allowed.size()) +
                     " does not match logits " + shape_str(logits.shape()));
  }
  if (rows == 0) throw ShapeError("cross_entropy: no rows");
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) +
                              " out of range for " + std::to_string(n) + " classes");
    }
    if (!allowed.empty() && !allowed[r * n + targets[r]]) {
      throw std::invalid_argument("cross_entropy: target is masked out");
    }
  }
  Graph& g = *logits.graph();
  const auto& z = logits.value();
  auto probs = std::make_shared<Tensor>(mat(rows, n));
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (allowed.empty() || allowed[r * n + c]) m = std::max(m, z(r, c));
    }
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (allowed.empty() || allowed[r * n + c]) {
        const double e = std::exp(z(r, c) - m);
        (*probs)(r, c) = e;
        s += e;
      }
    }
    for (std::size_t c = 0; c < n; ++c) (*probs)(r, c) /= s;
    total += (m + std::log(s)) - z(r, static_cast<std::size_t>(targets[r]));
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  return g.make(Tensor::scalar(total * inv_rows), {logits},
                [logits, probs, tgt, inv_rows](Graph& g, std::size_t self) {
                  const double dy = g.grad(self)[0] * inv_rows;
                  auto dx = view(g.grad_ref(logits.id()));
                  dx += dy * view(*probs);
                  for (std::size_t r = 0; r < tgt->size(); ++r) dx(r, (*tgt)[r]) -= dy;
                });
}

Var dot(Var a, Var b) {
  if (a.value().size() != b.value().size()) shape_error("dot", a.shape(), b.shape());
  Graph& g = *a.graph();
  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return g.make(Tensor::scalar(s), {a, b}, [a, b](Graph& g, std::size_t self) {
    const double dy = g.grad(self)[0];
    if (g.needs_grad(a)) view(g.grad_ref(a.id())) += dy * view(b.value());
    if (g.needs_grad(b)) view(g.grad_ref(b.id())) += dy * view(a.value());
  });
}

Var detach(Var x) { return x.graph()->constant(x.value()); }

Var sum(Var x) {
  Graph& g = *x.graph();
  double s = 0.0;
  for (double v : x.value().storage()) s += v;
  return g.make(Tensor::scalar(s), {x}, [x](Graph& g, std::size_t self) {
    const double dy = g.grad(self)[0];
    for (double& v : g.grad_ref(x.id()).storage()) v += dy;
  });
}

Var l2_normalize_rows(Var x, double eps) {
  Graph& g = *x.graph();
  Tensor out = x.value();
  auto y = view(out);
  auto norms = std::make_shared<std::vector<double>>(x.rows());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    (*norms)[r] = std::max(y.row(r).norm(), eps);
    y.row(r) /= (*norms)[r];
  }
  return g.make(std::move(out), {x}, [x, norms](Graph& g, std::size_t self) {
    auto yv = view(g.value(self));
    auto dy = view(g.grad(self));
    auto dx = view(g.grad_ref(x.id()));
    for (Eigen::Index r = 0; r < yv.rows(); ++r) {
      const double s = yv.row(r).dot(dy.row(r));
      dx.row(r) += (dy.row(r) - s * yv.row(r)) / (*norms)[r];
    }
  });
}

Var segment_attention(Var q, Var k, Var v, std::span<const Segment> segments,
                      std::size_t heads) {
  if (q.shape() != k.shape()) shape_error("segment_attention", q.shape(), k.shape());
  if (q.shape() != v.shape()) shape_error("segment_attention", q.shape(), v.shape());
  const std::size_t total = q.rows();
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("segment_attention: width " + std::to_string(d) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  for (const Segment& s : segments) {
    if (s.length == 0 || s.start + s.length > total) {
      throw ShapeError("segment_attention: segment [" + std::to_string(s.start) + ", " +
                       std::to_string(s.start + s.length) + ") outside " +
                       std::to_string(total) + " rows");
    }
  }
  Graph& g = *q.graph();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto segs = std::make_shared<std::vector<Segment>>(segments.begin(), segments.end());
  // Attention weights per (segment, head), kept for the backward pass.
  auto weights = std::make_shared<std::vector<RowMat>>(segments.size() * heads);
  Tensor out(mat(total, d));
  const double* qp = q.value().data().data();
  const double* kp = k.value().data().data();
  const double* vp = v.value().data().data();
  double* op = out.data().data();
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  for (std::size_t s = 0; s < segs->size(); ++s) {
    const auto [start, len] = (*segs)[s];
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = start * d + h * dh;
      StridedConst qh(qp + off, len, dh, stride);
      StridedConst kh(kp + off, len, dh, stride);
      StridedConst vh(vp + off, len, dh, stride);
      RowMat& a = (*weights)[s * heads + h];
      a.noalias() = (qh * kh.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double m = a.row(r).maxCoeff();
        a.row(r) = (a.row(r).array() - m).exp();
        a.row(r) /= a.row(r).sum();
      }
      StridedMut oh(op + off, len, dh, stride);
      oh.noalias() = a * vh;
    }
  }
  return g.make(std::move(out), {q, k, v},
                [q, k, v, segs, weights, heads, dh, d, inv_sqrt](Graph& g, std::size_t self) {
                  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
                  const double* dyp = g.grad(self).data().data();
                  const double* qp = q.value().data().data();
                  const double* kp = k.value().data().data();
                  const double* vp = v.value().data().data();
                  double* dqp = g.needs_grad(q) ? g.grad_ref(q.id()).data().data() : nullptr;
                  double* dkp = g.needs_grad(k) ? g.grad_ref(k.id()).data().data() : nullptr;
                  double* dvp = g.needs_grad(v) ? g.grad_ref(v.id()).data().data() : nullptr;
                  RowMat da, ds;
                  for (std::size_t s = 0; s < segs->size(); ++s) {
                    const auto [start, len] = (*segs)[s];
                    for (std::size_t h = 0; h < heads; ++h) {
                      const std::size_t off = start * d + h * dh;
                      const RowMat& a = (*weights)[s * heads + h];
                      StridedConst dy(dyp + off, len, dh, stride);
                      StridedConst qh(qp + off, len, dh, stride);
                      StridedConst kh(kp + off, len, dh, stride);
                      StridedConst vh(vp + off, len, dh, stride);
                      if (dvp) {
                        StridedMut dv(dvp + off, len, dh, stride);
                        dv.noalias() += a.transpose() * dy;
                      }
                      if (!dqp && !dkp) continue;
                      da.noalias() = dy * vh.transpose();
                      ds.resize(a.rows(), a.cols());
                      for (Eigen::Index r = 0; r < a.rows(); ++r) {
                        const double dotp = a.row(r).dot(da.row(r));
                        ds.row(r) = a.row(r).array() * (da.row(r).array() - dotp);
                      }
                      ds *= inv_sqrt;
                      if (dqp) {
                        StridedMut dq(dqp + off, len, dh, stride);
                        dq.noalias() += ds * kh;
                      }
                      if (dkp) {
                        StridedMut dk(dkp + off, len, dh, stride);
                        dk.noalias() += ds.transpose() * qh;
                      }
                    }
                  }
                });
}

}  // namespace msm
