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

#include "msm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace msm {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << ")";
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_size(shape_) != data_.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw std::logic_error("item() on tensor of shape " + shape_str(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void ParamStore::add(const std::string& name, Tensor value) {
  if (values_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  grads_.emplace(name, Tensor(value.shape()));
  values_.emplace(name, std::move(value));
}

bool ParamStore::contains(const std::string& name) const { return values_.count(name) > 0; }

void ParamStore::erase(const std::string& name) {
  values_.erase(name);
  grads_.erase(name);
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamStore::grad(const std::string& name) {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::grad(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, g] : grads_) g.fill(0.0);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(values_.size());
  for (const auto& [name, v] : values_) out.push_back(name);
  return out;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [name, v] : values_) n += v.size();
  return n;
}

}  // namespace msm
