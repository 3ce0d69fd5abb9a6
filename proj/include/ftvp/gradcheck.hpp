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

#include <functional>
#include <random>
#include <vector>

#include "ftvp/tensor.hpp"

namespace ftvp {

/// Central finite-difference validation of reverse-mode gradients.
///
/// `forward` must rebuild the computation from the current input values on the
/// given tape and return the scalar loss. Inputs are double precision; h is
/// the central-difference step. Returns the max relative error over all
/// entries of all differentiable inputs.
inline double finite_diff_check(const std::vector<TensorPtr<double>>& inputs,
                                const std::function<TensorPtr<double>(Tape<double>&)>& forward,
                                double h = 1e-5) {
  // analytic pass
  for (auto& in : inputs) {
    in->requires_grad = true;
    in->grad.clear();
  }
  Tape<double> tape;
  auto loss = forward(tape);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    if (in->grad.empty()) in->grad.assign(in->size(), 0.0);
    analytic.push_back(in->grad);
  }

  double max_rel = 0.0;
  for (size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    for (size_t i = 0; i < in->size(); ++i) {
      const double orig = in->values[i];
      in->values[i] = orig + h;
      Tape<double> tp;
      const double fp = forward(tp)->values[0];
      in->values[i] = orig - h;
      Tape<double> tm;
      const double fm = forward(tm)->values[0];
      in->values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

/// Fills a tensor with uniform values in [lo, hi) from a seeded stream.
template <class T>
void fill_uniform(TensorPtr<T>& t, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t->values) v = static_cast<T>(dist(rng));
}

/// Nudges entries away from the kinks of relu / abs / max so that central
/// differences stay on one smooth branch.
template <class T>
void avoid_kinks(TensorPtr<T>& t, double margin) {
  for (auto& v : t->values) {
    if (std::abs(static_cast<double>(v)) < margin) v = v >= T(0) ? T(margin) : T(-margin);
  }
}

}  // namespace ftvp
