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

// Hierarchical contrastive loss over projected sentence vectors. For a
// masked position t with prediction p and positive h:
//
//   L = -log( e^{s+} / (e^{s+} + sum_intra e^{s_j - mu*alpha} + sum_cross e^{s_k}) )
//
// alpha = mean intra similarity - mean cross similarity, used as a value only.

#ifndef MSM_LOSS_HPP_
#define MSM_LOSS_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msm/autograd.hpp"

namespace msm {

enum class Similarity { kDot, kCosine };
std::string to_string(Similarity s);
Similarity parse_similarity(const std::string& s);

struct LossConfig {
  double mu = 0.5;
  Similarity similarity = Similarity::kDot;

  void validate() const;
};

using Vector = std::vector<double>;

struct NegativePools {
  std::vector<Vector> intra;  // same document, positive excluded
  std::vector<Vector> cross;  // other documents
};

struct LossBreakdown {
  double msm = 0.0;
  double mlm = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

double similarity(std::span<const double> a, std::span<const double> b, Similarity sim);

// Throws std::invalid_argument("no cross-doc negatives") for an empty cross pool.
double compute_alpha(std::span<const double> p, const NegativePools& pools, Similarity sim);
double msm_loss(std::span<const double> p, std::span<const double> positive,
                const NegativePools& pools, const LossConfig& config);

// Candidate structure of a batch: row i of P is scored against every row of
// H; masks are row-major |P| x |H| with 1 marking membership.
struct MsmTargets {
  std::vector<std::int32_t> positive;
  std::vector<std::uint8_t> intra;
  std::vector<std::uint8_t> cross;
};

struct MsmResult {
  Var loss;                  // mean over rows of P
  std::vector<double> alpha;
};

// With detach_alpha false, alpha stays in the graph (used to show that
// detaching matters). `frozen_alpha` overrides the computed values.
MsmResult msm_loss(Graph& g, Var p, Var h, const MsmTargets& targets, const LossConfig& config,
                   bool detach_alpha = true, const std::vector<double>* frozen_alpha = nullptr);

// Mean cross-entropy of masked-token logits; a zero constant with no rows.
Var mlm_loss(Graph& g, Var logits, std::span<const std::int32_t> targets);
double mlm_loss(const Tensor& logits, std::span<const std::int32_t> targets);

LossBreakdown total_loss(double msm, double mlm, double alpha = 0.0);

}  // namespace msm

#endif  // MSM_LOSS_HPP_
