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

#include "msm/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace msm {
namespace {

double norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::max(std::sqrt(s), 1e-12);
}

void require_finite(double s) {
  if (!std::isfinite(s)) throw std::runtime_error("non-finite similarity");
}

}  // namespace

std::string to_string(Similarity s) { return s == Similarity::kDot ? "dot" : "cosine"; }

Similarity parse_similarity(const std::string& s) {
  if (s == "dot") return Similarity::kDot;
  if (s == "cosine") return Similarity::kCosine;
  throw std::invalid_argument("unknown similarity '" + s + "' (dot|cosine)");
}

void LossConfig::validate() const {
  if (!std::isfinite(mu) || mu < 0.0) throw std::invalid_argument("mu must be finite and >= 0");
}

double similarity(std::span<const double> a, std::span<const double> b, Similarity sim) {
  if (a.size() != b.size()) {
    throw ShapeError("similarity: dimension " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  if (sim == Similarity::kCosine) s /= norm(a) * norm(b);
  require_finite(s);
  return s;
}

double compute_alpha(std::span<const double> p, const NegativePools& pools, Similarity sim) {
  if (pools.cross.empty()) throw std::invalid_argument("no cross-doc negatives");
  if (pools.intra.empty()) return 0.0;
  double intra = 0.0, cross = 0.0;
  for (const Vector& h : pools.intra) intra += similarity(p, h, sim);
  for (const Vector& h : pools.cross) cross += similarity(p, h, sim);
  return intra / static_cast<double>(pools.intra.size()) -
         cross / static_cast<double>(pools.cross.size());
}

double msm_loss(std::span<const double> p, std::span<const double> positive,
                const NegativePools& pools, const LossConfig& config) {
  config.validate();
  const double alpha = compute_alpha(p, pools, config.similarity);
  std::vector<double> logits;
  logits.push_back(similarity(p, positive, config.similarity));
  for (const Vector& h : pools.intra) {
    logits.push_back(similarity(p, h, config.similarity) - config.mu * alpha);
  }
  for (const Vector& h : pools.cross) logits.push_back(similarity(p, h, config.similarity));
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - m);
  return m + std::log(s) - logits[0];
}

MsmResult msm_loss(Graph& g, Var p, Var h, const MsmTargets& t, const LossConfig& config,
                   bool detach_alpha, const std::vector<double>* frozen_alpha) {
  config.validate();
  const std::size_t m = p.rows(), k = h.rows();
  if (p.cols() != h.cols()) {
    throw ShapeError("msm_loss: " + shape_str(p.shape()) + " vs " + shape_str(h.shape()));
  }
  if (t.positive.size() != m || t.intra.size() != m * k || t.cross.size() != m * k) {
    throw ShapeError("msm_loss: targets do not match " + std::to_string(m) + " x " +
                     std::to_string(k) + " scores");
  }
  if (frozen_alpha != nullptr && frozen_alpha->size() != m) {
    throw ShapeError("msm_loss: frozen alpha size mismatch");
  }
  if (config.similarity == Similarity::kCosine) {
    p = l2_normalize_rows(p);
    h = l2_normalize_rows(h);
  }
  Var scores = matmul_nt(p, h);
  if (!scores.value().all_finite()) throw std::runtime_error("non-finite similarity");

  // Row weights that turn a score row into alpha.
  Tensor w = Tensor::matrix(m, k);
  Tensor intra_mask = Tensor::matrix(m, k);
  std::vector<std::uint8_t> allowed(m * k, 0);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t ni = 0, nc = 0;
    const auto pos = static_cast<std::size_t>(t.positive[i]);
    if (t.positive[i] < 0 || pos >= k) throw std::out_of_range("msm_loss: positive out of range");
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t idx = i * k + j;
      if (t.intra[idx] && t.cross[idx]) {
        throw std::invalid_argument("msm_loss: candidate both intra and cross");
      }
      ni += t.intra[idx] != 0;
      nc += t.cross[idx] != 0;
    }
    if (t.intra[i * k + pos] || t.cross[i * k + pos]) {
      throw std::invalid_argument("msm_loss: positive listed as a negative");
    }
    if (nc == 0) throw std::invalid_argument("no cross-doc negatives");
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t idx = i * k + j;
      // Without intra negatives alpha is 0.
      if (t.intra[idx]) {
        w(i, j) = 1.0 / static_cast<double>(ni);
        intra_mask(i, j) = -config.mu;
      }
      if (t.cross[idx] && ni > 0) w(i, j) = -1.0 / static_cast<double>(nc);
      allowed[idx] = t.intra[idx] || t.cross[idx] || j == pos;
    }
  }

  MsmResult out;
  out.alpha.resize(m);
  const Tensor& sv = scores.value();
  for (std::size_t i = 0; i < m; ++i) {
    double a = 0.0;
    for (std::size_t j = 0; j < k; ++j) a += w(i, j) * sv(i, j);
    out.alpha[i] = frozen_alpha != nullptr ? (*frozen_alpha)[i] : a;
  }

  Var bias;
  if (detach_alpha || frozen_alpha != nullptr) {
    Tensor b = intra_mask;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < k; ++j) b(i, j) *= out.alpha[i];
    }
    bias = g.constant(std::move(b));
  } else {
    Var alpha = matmul(mul(scores, g.constant(w)), g.constant(Tensor::matrix(k, 1, 1.0)));
    bias = mul(matmul(alpha, g.constant(Tensor::matrix(1, k, 1.0))), g.constant(intra_mask));
  }
  out.loss = cross_entropy(add(scores, bias), t.positive, allowed);
  return out;
}

Var mlm_loss(Graph& g, Var logits, std::span<const std::int32_t> targets) {
  if (targets.empty() && logits.rows() == 0) return g.constant(Tensor::scalar(0.0));
  return cross_entropy(logits, targets);
}

double mlm_loss(const Tensor& logits, std::span<const std::int32_t> targets) {
  Graph g(false);
  return mlm_loss(g, g.constant(logits), targets).value().item();
}

LossBreakdown total_loss(double msm, double mlm, double alpha) {
  return {msm, mlm, msm + mlm, alpha};
}

}  // namespace msm
