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

#include <cmath>
#include <filesystem>
#include <limits>
#include <cstring>
#include <random>

#include "doctest.h"
#include "msm/autograd.hpp"
#include "msm/checkpoint.hpp"
#include "msm/gradcheck.hpp"

using namespace msm;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = n(rng);
  return t;
}

// Reduces an op output to a scalar through fixed random weights so that no
// gradient cancels by symmetry (softmax rows sum to one, for example).
Var weighted_sum(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var w = y.graph()->constant(random_tensor(y.shape(), rng));
  return sum(mul(y, w));
}

GradCheckReport check_op(ParamStore& store, const std::function<Var(Graph&, ParamStore&)>& op) {
  GradCheckOptions opt;
  opt.epsilon = 1e-5;
  opt.tolerance = 1e-6;
  return grad_check([&](Graph& g, ParamStore& p) { return weighted_sum(op(g, p), 99); }, store,
                    opt);
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Graph g;
  Var x = g.constant(Tensor::row({0.0, 0.0, 0.0}));
  Var y = softmax(x);
  for (double v : y.value().storage()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("cross entropy of uniform logits is log of class count") {
  Graph g;
  Var x = g.constant(Tensor::row({0.3, 0.3, 0.3, 0.3}));
  for (std::int32_t target = 0; target < 4; ++target) {
    const std::int32_t t[] = {target};
    CHECK(cross_entropy(x, t).value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }
}

TEST_CASE("gradient of dot is the other operand") {
  Graph g;
  Var x = g.input(Tensor::row({1.0, 2.0}));
  Var w = g.constant(Tensor::row({3.0, 4.0}));
  Var y = dot(x, w);
  g.backward(y);
  CHECK(x.grad()[0] == 3.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("shape errors name both shapes") {
  Graph g;
  Var a = g.constant(Tensor::matrix(2, 3));
  Var b = g.constant(Tensor::matrix(4, 5));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,5)") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(dot(a, b), ShapeError);
}

TEST_CASE("softmax over an empty axis is an error") {
  Graph g;
  Var x = g.constant(Tensor::matrix(2, 0));
  CHECK_THROWS_AS(softmax(x), ShapeError);
}

TEST_CASE("detach severs gradient flow but keeps the value") {
  Graph g;
  Var x = g.input(Tensor::row({1.5, -2.0}));
  Var d = detach(x);
  CHECK(d.value() == x.value());
  Var y = add(dot(x, x), dot(d, d));
  g.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(-4.0));
}

TEST_CASE("grad_check on a quadratic matches the parameters exactly") {
  ParamStore store;
  std::mt19937_64 rng(5);
  store.add("theta", random_tensor({3, 4}, rng));
  GradCheckOptions opt;
  opt.tolerance = 1e-9;
  auto report = grad_check(
      [](Graph& g, ParamStore& p) {
        Var t = g.param(p, "theta");
        return scale(dot(t, t), 0.5);
      },
      store, opt);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-9);
  CHECK(report.coords_checked == 12);
  for (const auto& e : report.entries) CHECK(e.analytic == store.value("theta")[e.index]);
}

TEST_CASE("grad_check rejects bad epsilon and non-finite losses") {
  ParamStore store;
  store.add("x", Tensor::row({1.0}));
  auto fn = [](Graph& g, ParamStore& p) {
    Var x = g.param(p, "x");
    return dot(x, x);
  };
  GradCheckOptions opt;
  opt.epsilon = 1e-2;
  CHECK_THROWS_AS(grad_check(fn, store, opt), std::invalid_argument);
  store.value("x")[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(grad_check(fn, store), std::runtime_error);
}

TEST_CASE("every differentiable op passes grad_check in isolation") {
  std::mt19937_64 rng(17);
  ParamStore store;
  store.add("a", random_tensor({3, 4}, rng));
  store.add("b", random_tensor({4, 5}, rng));
  store.add("c", random_tensor({3, 4}, rng));
  store.add("r", random_tensor({1, 4}, rng));
  store.add("gain", random_tensor({1, 4}, rng));
  store.add("bias", random_tensor({1, 4}, rng));
  store.add("qkv", random_tensor({7, 4}, rng));
  store.add("k", random_tensor({7, 4}, rng));
  store.add("v", random_tensor({7, 4}, rng));

  auto p = [](Graph& g, ParamStore& s, const char* n) { return g.param(s, n); };
  using Op = std::function<Var(Graph&, ParamStore&)>;
  std::vector<std::pair<const char*, Op>> ops = {
      {"matmul", [&](Graph& g, ParamStore& s) { return matmul(p(g, s, "a"), p(g, s, "b")); }},
      {"matmul_nt", [&](Graph& g, ParamStore& s) { return matmul_nt(p(g, s, "a"), p(g, s, "c")); }},
      {"add", [&](Graph& g, ParamStore& s) { return add(p(g, s, "a"), p(g, s, "c")); }},
      {"add_broadcast", [&](Graph& g, ParamStore& s) { return add(p(g, s, "a"), p(g, s, "r")); }},
      {"sub", [&](Graph& g, ParamStore& s) { return sub(p(g, s, "a"), p(g, s, "c")); }},
      {"mul", [&](Graph& g, ParamStore& s) { return mul(p(g, s, "a"), p(g, s, "c")); }},
      {"scale", [&](Graph& g, ParamStore& s) { return scale(p(g, s, "a"), -1.7); }},
      {"softmax_rows", [&](Graph& g, ParamStore& s) { return softmax(p(g, s, "a"), -1); }},
      {"softmax_cols", [&](Graph& g, ParamStore& s) { return softmax(p(g, s, "a"), 0); }},
      {"layer_norm",
       [&](Graph& g, ParamStore& s) {
         return layer_norm(p(g, s, "a"), p(g, s, "gain"), p(g, s, "bias"));
       }},
      {"gelu", [&](Graph& g, ParamStore& s) { return gelu(p(g, s, "a")); }},
      {"embedding_lookup",
       [&](Graph& g, ParamStore& s) {
         const std::int32_t ids[] = {2, 0, 2, 1};
         return embedding_lookup(p(g, s, "a"), ids);
       }},
      {"concat_rows",
       [&](Graph& g, ParamStore& s) {
         Var parts[] = {p(g, s, "a"), p(g, s, "r"), p(g, s, "c")};
         return concat(parts, 0);
       }},
      {"concat_cols",
       [&](Graph& g, ParamStore& s) {
         Var parts[] = {p(g, s, "a"), p(g, s, "c")};
         return concat(parts, 1);
       }},
      {"cross_entropy",
       [&](Graph& g, ParamStore& s) {
         const std::int32_t t[] = {1, 3, 0};
         return cross_entropy(p(g, s, "a"), t);
       }},
      {"cross_entropy_masked",
       [&](Graph& g, ParamStore& s) {
         const std::int32_t t[] = {1, 3, 0};
         const std::uint8_t allowed[] = {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1};
         return cross_entropy(p(g, s, "a"), t, allowed);
       }},
      {"dot", [&](Graph& g, ParamStore& s) { return dot(p(g, s, "a"), p(g, s, "c")); }},
      {"sum", [&](Graph& g, ParamStore& s) { return sum(p(g, s, "a")); }},
      {"l2_normalize_rows", [&](Graph& g, ParamStore& s) { return l2_normalize_rows(p(g, s, "a")); }},
      {"segment_attention",
       [&](Graph& g, ParamStore& s) {
         const Segment segs[] = {{0, 3}, {3, 1}, {4, 3}};
         return segment_attention(p(g, s, "qkv"), p(g, s, "k"), p(g, s, "v"), segs, 2);
       }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    auto report = check_op(store, op);
    CAPTURE(report.worst.name);
    CAPTURE(report.worst.index);
    CHECK(report.max_rel_error < 1e-6);
  }
}

TEST_CASE("softmax rows are distributions") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g(false);
    Var x = g.constant(random_tensor({5, 9}, rng, 10.0));
    Var y = softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        CHECK(y.value()(r, c) >= 0.0);
        s += y.value()(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layer_norm standardizes each row before gain and bias") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g(false);
    Var x = g.constant(random_tensor({4, 16}, rng, 3.0));
    Var gain = g.constant(Tensor({1, 16}, 1.0));
    Var bias = g.constant(Tensor({1, 16}, 0.0));
    Var y = layer_norm(x, gain, bias, 1e-14);
    for (std::size_t r = 0; r < 4; ++r) {
      double mean = 0.0, var = 0.0;
      for (double v : y.value().row_span(r)) mean += v;
      mean /= 16.0;
      for (double v : y.value().row_span(r)) var += (v - mean) * (v - mean);
      var /= 16.0;
      CHECK(std::abs(mean) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-8);
    }
  }
}

TEST_CASE("tensor archive round-trips bit-exactly") {
  std::mt19937_64 rng(8);
  TensorArchive a;
  a.tensors.emplace("w", random_tensor({3, 5}, rng));
  Tensor special({4});
  special[0] = -0.0;
  special[1] = std::numeric_limits<double>::denorm_min();
  special[2] = std::numeric_limits<double>::max();
  special[3] = 1.0 / 3.0;
  a.tensors.emplace("special", special);
  a.meta["d"] = 5;
  const auto dir = std::filesystem::temp_directory_path() / "msm_archive_test";
  std::filesystem::remove_all(dir);
  save_archive(dir, a);
  TensorArchive b = load_archive(dir);
  CHECK(b.meta["d"] == 5);
  REQUIRE(b.tensors.size() == 2);
  for (const auto& [name, t] : a.tensors) {
    const Tensor& u = b.tensors.at(name);
    CHECK(u.shape() == t.shape());
    CHECK(std::memcmp(u.data().data(), t.data().data(), t.size() * sizeof(double)) == 0);
  }
  CHECK(std::signbit(b.tensors.at("special")[0]));
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_archive(dir));
}
