// Copyright 2026 the ftvp authors
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

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ftvp {

/// Thrown on any contract violation in tensor operations (shape mismatch,
/// invalid index, non-integral convolution geometry, ...).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-d array with an optional gradient buffer.
/// Feature maps use the [C,h,w] layout throughout.
template <class T>
struct TensorData {
  std::vector<int> shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward touches this tensor
  bool requires_grad = false;

  size_t size() const { return values.size(); }

  T* grad_data() {
    if (grad.empty()) grad.assign(values.size(), T(0));
    return grad.data();
  }

  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
};

template <class T>
using TensorPtr = std::shared_ptr<TensorData<T>>;

template <class T>
TensorPtr<T> make_tensor(std::vector<int> shape, bool requires_grad = false) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
    n *= static_cast<size_t>(d);
  }
  auto t = std::make_shared<TensorData<T>>();
  t->shape = std::move(shape);
  t->values.assign(n, T(0));
  t->requires_grad = requires_grad;
  return t;
}

template <class T>
TensorPtr<T> make_tensor(std::vector<int> shape, std::vector<T> values,
                         bool requires_grad = false) {
  auto t = make_tensor<T>(std::move(shape), requires_grad);
  if (values.size() != t->values.size())
    throw ShapeError("value count does not match shape " + shape_str(t->shape));
  t->values = std::move(values);
  return t;
}

template <class T>
bool all_finite(const TensorData<T>& t) {
  for (T v : t.values)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

/// Ordered record of executed primitives. backward() replays the registered
/// closures in exact reverse execution order, seeding the loss gradient
/// with 1. A Tape can be consumed by backward() exactly once.
template <class T>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  void backward(const TensorPtr<T>& loss) {
    if (consumed_)
      throw std::logic_error("Tape::backward called twice without a new forward pass");
    if (loss->size() != 1)
      throw ShapeError("backward seed must be a scalar, got " + shape_str(loss->shape));
    consumed_ = true;
    loss->grad_data()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

}  // namespace ftvp
