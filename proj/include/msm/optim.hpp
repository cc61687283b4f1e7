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

#ifndef MSM_OPTIM_HPP_
#define MSM_OPTIM_HPP_

#include <cstdint>

#include "msm/tensor.hpp"

namespace msm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with bias correction. Moments live in a ParamStore ("m/<name>",
// "v/<name>") plus a "step" scalar, so they checkpoint like weights.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(ParamStore& params, double lr);
  std::uint64_t steps() const;

  ParamStore& state() { return state_; }
  const ParamStore& state() const { return state_; }
  void set_state(ParamStore state) { state_ = std::move(state); }

 private:
  AdamConfig config_;
  ParamStore state_;
};

// Linear warm-up to `base` over `warmup` steps, then linear decay to zero
// at `total`. `step` counts from 0.
double linear_schedule(std::uint64_t step, double base, std::uint64_t warmup, std::uint64_t total);

// Scales every gradient so the global L2 norm is at most max_norm; returns
// the norm before clipping. max_norm <= 0 only measures.
double clip_grad_norm(ParamStore& params, double max_norm);

}  // namespace msm

#endif  // MSM_OPTIM_HPP_
