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

#ifndef MSM_GRADCHECK_HPP_
#define MSM_GRADCHECK_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msm/autograd.hpp"
#include "msm/tensor.hpp"

namespace msm {

// Builds a scalar loss from parameters bound through Graph::param. It is
// called once with a recording graph and then repeatedly, without
// recording, on perturbed parameter values. Quantities that the loss treats
// as constants (detached values) must be frozen by the builder across calls.
using LossBuilder = std::function<Var(Graph&, ParamStore&)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-6;
  // Coordinates below this magnitude (analytic and numeric) are compared on
  // an absolute scale; it bounds the relative error's denominator.
  double abs_floor = 1e-7;
  // 0 checks every coordinate; otherwise a seeded sample per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 1;
  // Empty checks every parameter.
  std::vector<std::string> only;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double loss = 0.0;
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::size_t coords_checked = 0;
  bool passed = false;
  std::vector<GradCheckEntry> entries;
};

// Central differences (L(x+e) - L(x-e)) / 2e against the backprop gradient.
// Throws std::invalid_argument for epsilon outside [1e-7, 1e-3] and
// std::runtime_error when the loss is not finite.
GradCheckReport grad_check(const LossBuilder& loss_fn, ParamStore& params,
                           const GradCheckOptions& options = {});

}  // namespace msm

#endif  // MSM_GRADCHECK_HPP_
