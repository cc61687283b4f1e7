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

#include "msm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace msm {
namespace {

double evaluate(const LossBuilder& loss_fn, ParamStore& params) {
  Graph g(/*recording=*/false);
  const double loss = loss_fn(g, params).value().item();
  if (!std::isfinite(loss)) throw std::runtime_error("grad_check: non-finite loss");
  return loss;
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& loss_fn, ParamStore& params,
                           const GradCheckOptions& options) {
  if (!(options.epsilon >= 1e-7 && options.epsilon <= 1e-3)) {
    throw std::invalid_argument("grad_check: epsilon must lie in [1e-7, 1e-3]");
  }
  GradCheckReport report;
  params.zero_grad();
  {
    Graph g;
    Var loss = loss_fn(g, params);
    report.loss = loss.value().item();
    if (!std::isfinite(report.loss)) throw std::runtime_error("grad_check: non-finite loss");
    g.backward(loss);
  }

  std::mt19937_64 rng(options.seed);
  for (const std::string& name : params.names()) {
    if (!options.only.empty() &&
        std::find(options.only.begin(), options.only.end(), name) == options.only.end()) {
      continue;
    }
    const std::size_t n = params.value(name).size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param > 0 && n > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      double& slot = params.value(name)[i];
      const double saved = slot;
      slot = saved + options.epsilon;
      const double plus = evaluate(loss_fn, params);
      slot = saved - options.epsilon;
      const double minus = evaluate(loss_fn, params);
      slot = saved;

      GradCheckEntry e;
      e.name = name;
      e.index = i;
      e.analytic = params.grad(name)[i];
      e.numeric = (plus - minus) / (2.0 * options.epsilon);
      const double denom =
          std::max({std::abs(e.analytic), std::abs(e.numeric), options.abs_floor});
      e.rel_error = std::abs(e.analytic - e.numeric) / denom;
      if (report.coords_checked == 0 || e.rel_error > report.max_rel_error) {
        report.max_rel_error = e.rel_error;
        report.worst = e;
      }
      ++report.coords_checked;
      report.entries.push_back(std::move(e));
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace msm
