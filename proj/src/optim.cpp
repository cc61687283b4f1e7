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

#include "msm/optim.hpp"

#include <algorithm>
#include <cmath>

namespace msm {

std::uint64_t Adam::steps() const {
  return state_.contains("step") ? static_cast<std::uint64_t>(state_.value("step").item()) : 0;
}

void Adam::step(ParamStore& params, double lr) {
  if (!state_.contains("step")) state_.add("step", Tensor::scalar(0.0));
  Tensor& counter = state_.value("step");
  const double t = counter.item() + 1.0;
  counter.storage()[0] = t;
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (const std::string& name : params.names()) {
    Tensor& w = params.value(name);
    const Tensor& g = params.grad(name);
    const std::string mn = "m/" + name, vn = "v/" + name;
    if (!state_.contains(mn)) {
      state_.add(mn, Tensor(w.shape()));
      state_.add(vn, Tensor(w.shape()));
    }
    auto m = state_.value(mn).storage().begin();
    auto v = state_.value(vn).storage().begin();
    auto gi = g.storage().begin();
    for (double& x : w.storage()) {
      const double gr = *gi++;
      *m = config_.beta1 * *m + (1.0 - config_.beta1) * gr;
      *v = config_.beta2 * *v + (1.0 - config_.beta2) * gr * gr;
      const double upd = (*m / c1) / (std::sqrt(*v / c2) + config_.eps);
      x -= lr * (upd + config_.weight_decay * x);
      ++m;
      ++v;
    }
  }
}

double linear_schedule(std::uint64_t step, double base, std::uint64_t warmup, std::uint64_t total) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / warmup;
  if (total <= warmup || step >= total) return step >= total ? 0.0 : base;
  return base * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const std::string& name : params.names()) {
    for (double g : params.grad(name).storage()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const std::string& name : params.names()) {
      for (double& g : params.grad(name).storage()) g *= s;
    }
  }
  return norm;
}

}  // namespace msm
