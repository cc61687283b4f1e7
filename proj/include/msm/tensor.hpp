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

#ifndef MSM_TENSOR_HPP_
#define MSM_TENSOR_HPP_

#include <cstddef>
#include <map>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace msm {

using Shape = std::vector<std::size_t>;

// 64-byte aligned buffers: vectorized kernels then take the same code path
// for every allocation, which keeps results bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles. Rank-1 tensors behave as 1 x n rows in
// matrix operations; rank-0 (empty shape) holds a single scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor row(std::vector<double> values);
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row_span(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }

  double item() const;
  bool all_finite() const;
  void fill(double v);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  Storage data_;
};

// Named parameters with matching gradient accumulators. Iteration order is
// the lexicographic name order, which fixes every reduction over parameters.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const;
  void erase(const std::string& name);

  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;

  void zero_grad();
  std::vector<std::string> names() const;
  std::size_t num_scalars() const;

  const std::map<std::string, Tensor>& values() const { return values_; }

 private:
  std::map<std::string, Tensor> values_;
  std::map<std::string, Tensor> grads_;
};

}  // namespace msm

#endif  // MSM_TENSOR_HPP_
