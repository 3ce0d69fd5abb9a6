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

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "ftvp/tensor.hpp"

namespace ftvp {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

template <class T>
void check_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                     " vs " + shape_str(b->shape));
}

template <class T>
bool wants_grad(Tape<T>* tape, std::initializer_list<const TensorPtr<T>*> inputs) {
  if (!tape) return false;
  for (auto* p : inputs)
    if ((*p)->requires_grad) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <class T>
TensorPtr<T> matmul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2)
    throw ShapeError("matmul: operands must be rank 2");
  const int m = a->dim(0), k = a->dim(1), k2 = b->dim(0), n = b->dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a->shape) +
                     " vs " + shape_str(b->shape));
  auto out = make_tensor<T>({m, n});
  EMap<T>(out->values.data(), m, n) = ECMap<T>(a->values.data(), m, k) *
                                      ECMap<T>(b->values.data(), k, n);
  if (detail::wants_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record([a, b, out, m, k, n] {
      ECMap<T> g(out->grad_data(), m, n);
      if (a->requires_grad)
        EMap<T>(a->grad_data(), m, k) += g * ECMap<T>(b->values.data(), k, n).transpose();
      if (b->requires_grad)
        EMap<T>(b->grad_data(), k, n) += ECMap<T>(a->values.data(), m, k).transpose() * g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, zero padding)

template <class T>
void im2col(const T* x, int c_in, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, T* cols) {
  // cols is [c_in*kh*kw, oh*ow]
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = cols + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) *
                            static_cast<size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + static_cast<size_t>(oy) * ow,
                      row + static_cast<size_t>(oy + 1) * ow, T(0));
            continue;
          }
          const T* src = x + (static_cast<size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[static_cast<size_t>(oy) * ow + ox] =
                (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, int c_in, int h, int w, int kh, int kw, int stride,
                int pad, int oh, int ow, T* x) {
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = cols + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) *
                                  static_cast<size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (static_cast<size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[static_cast<size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

/// x: [Cin,h,w], kernel: [Cout,Cin,kh,kw] -> [Cout,h',w'].
template <class T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& kernel,
                    int stride = 1, int pad = 0) {
  if (x->shape.size() != 3 || kernel->shape.size() != 4)
    throw ShapeError("conv2d: x must be [C,h,w] and kernel [Cout,Cin,kh,kw]");
  const int c_in = x->dim(0), h = x->dim(1), w = x->dim(2);
  const int c_out = kernel->dim(0), kc = kernel->dim(1);
  const int kh = kernel->dim(2), kw = kernel->dim(3);
  if (kc != c_in)
    throw ShapeError("conv2d: channel mismatch, input C=" + std::to_string(c_in) +
                     " kernel Cin=" + std::to_string(kc));
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if ((h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0)
    throw ShapeError("conv2d: non-integral output size");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output");

  const int krows = c_in * kh * kw;
  const int ocols = oh * ow;
  std::vector<T> cols(static_cast<size_t>(krows) * ocols);
  im2col(x->values.data(), c_in, h, w, kh, kw, stride, pad, oh, ow, cols.data());

  auto out = make_tensor<T>({c_out, oh, ow});
  EMap<T>(out->values.data(), c_out, ocols) =
      ECMap<T>(kernel->values.data(), c_out, krows) * ECMap<T>(cols.data(), krows, ocols);

  if (detail::wants_grad(tape, {&x, &kernel})) {
    out->requires_grad = true;
    auto saved_cols = std::make_shared<std::vector<T>>(std::move(cols));
    tape->record([x, kernel, out, saved_cols, c_in, h, w, c_out, kh, kw, stride, pad,
                  oh, ow, krows, ocols] {
      ECMap<T> g(out->grad_data(), c_out, ocols);
      if (kernel->requires_grad)
        EMap<T>(kernel->grad_data(), c_out, krows) +=
            g * ECMap<T>(saved_cols->data(), krows, ocols).transpose();
      if (x->requires_grad) {
        std::vector<T> gcols(static_cast<size_t>(krows) * ocols);
        EMap<T>(gcols.data(), krows, ocols) =
            ECMap<T>(kernel->values.data(), c_out, krows).transpose() * g;
        col2im_add(gcols.data(), c_in, h, w, kh, kw, stride, pad, oh, ow,
                   x->grad_data());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pointwise and layout primitives

template <class T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& x) {
  auto out = make_tensor<T>(x->shape);
  for (size_t i = 0; i < x->size(); ++i) out->values[i] = x->values[i] > T(0) ? x->values[i] : T(0);
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out] {
      T* gx = x->grad_data();
      for (size_t i = 0; i < x->size(); ++i)
        if (x->values[i] > T(0)) gx[i] += out->grad[i];
    });
  }
  return out;
}

template <class T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = make_tensor<T>(a->shape);
  for (size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] + b->values[i];
  if (detail::wants_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record([a, b, out] {
      if (a->requires_grad) {
        T* ga = a->grad_data();
        for (size_t i = 0; i < a->size(); ++i) ga[i] += out->grad[i];
      }
      if (b->requires_grad) {
        T* gb = b->grad_data();
        for (size_t i = 0; i < b->size(); ++i) gb[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <class T>
TensorPtr<T> scale(Tape<T>* tape, const TensorPtr<T>& x, T c) {
  auto out = make_tensor<T>(x->shape);
  for (size_t i = 0; i < x->size(); ++i) out->values[i] = c * x->values[i];
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, c] {
      T* gx = x->grad_data();
      for (size_t i = 0; i < x->size(); ++i) gx[i] += c * out->grad[i];
    });
  }
  return out;
}

/// x: [C,h,w] weighted by a single-channel map wmap: [1,h,w], broadcast over C.
template <class T>
TensorPtr<T> mul_broadcast(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& wmap) {
  if (x->shape.size() != 3 || wmap->shape.size() != 3 || wmap->dim(0) != 1 ||
      wmap->dim(1) != x->dim(1) || wmap->dim(2) != x->dim(2))
    throw ShapeError("mul_broadcast: need x [C,h,w] and weight [1,h,w], got " +
                     shape_str(x->shape) + " and " + shape_str(wmap->shape));
  const int c = x->dim(0);
  const size_t hw = static_cast<size_t>(x->dim(1)) * x->dim(2);
  auto out = make_tensor<T>(x->shape);
  for (int ch = 0; ch < c; ++ch)
    for (size_t p = 0; p < hw; ++p)
      out->values[ch * hw + p] = x->values[ch * hw + p] * wmap->values[p];
  if (detail::wants_grad(tape, {&x, &wmap})) {
    out->requires_grad = true;
    tape->record([x, wmap, out, c, hw] {
      if (x->requires_grad) {
        T* gx = x->grad_data();
        for (int ch = 0; ch < c; ++ch)
          for (size_t p = 0; p < hw; ++p)
            gx[ch * hw + p] += out->grad[ch * hw + p] * wmap->values[p];
      }
      if (wmap->requires_grad) {
        T* gw = wmap->grad_data();
        for (int ch = 0; ch < c; ++ch)
          for (size_t p = 0; p < hw; ++p)
            gw[p] += out->grad[ch * hw + p] * x->values[ch * hw + p];
      }
    });
  }
  return out;
}

template <class T>
TensorPtr<T> concat_channels(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape.size() != 3 || b->shape.size() != 3 || a->dim(1) != b->dim(1) ||
      a->dim(2) != b->dim(2))
    throw ShapeError("concat_channels: spatial extents differ, " + shape_str(a->shape) +
                     " vs " + shape_str(b->shape));
  const size_t na = a->size(), nb = b->size();
  auto out = make_tensor<T>({a->dim(0) + b->dim(0), a->dim(1), a->dim(2)});
  std::copy(a->values.begin(), a->values.end(), out->values.begin());
  std::copy(b->values.begin(), b->values.end(), out->values.begin() + na);
  if (detail::wants_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record([a, b, out, na, nb] {
      if (a->requires_grad) {
        T* ga = a->grad_data();
        for (size_t i = 0; i < na; ++i) ga[i] += out->grad[i];
      }
      if (b->requires_grad) {
        T* gb = b->grad_data();
        for (size_t i = 0; i < nb; ++i) gb[i] += out->grad[na + i];
      }
    });
  }
  return out;
}

/// Nearest-neighbor 2x upsample; backward sums each 2x2 block.
template <class T>
TensorPtr<T> upsample2x(Tape<T>* tape, const TensorPtr<T>& x) {
  if (x->shape.size() != 3) throw ShapeError("upsample2x: need [C,h,w]");
  const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
  auto out = make_tensor<T>({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out->values[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + xx] =
            x->values[(static_cast<size_t>(ch) * h + y / 2) * w + xx / 2];
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, c, h, w] {
      T* gx = x->grad_data();
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx)
            gx[(static_cast<size_t>(ch) * h + y / 2) * w + xx / 2] +=
                out->grad[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + xx];
    });
  }
  return out;
}

template <class T>
TensorPtr<T> maxpool2x2(Tape<T>* tape, const TensorPtr<T>& x) {
  if (x->shape.size() != 3) throw ShapeError("maxpool2x2: need [C,h,w]");
  const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
  if (h % 2 || w % 2) throw ShapeError("maxpool2x2: odd spatial extent " + shape_str(x->shape));
  const int oh = h / 2, ow = w / 2;
  auto out = make_tensor<T>({c, oh, ow});
  auto argmax = std::make_shared<std::vector<int32_t>>(out->size());
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        int best = (ch * h + 2 * oy) * w + 2 * ox;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (x->values[idx] > x->values[best]) best = idx;
          }
        const size_t o = (static_cast<size_t>(ch) * oh + oy) * ow + ox;
        out->values[o] = x->values[best];
        (*argmax)[o] = best;
      }
    }
  }
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, argmax] {
      T* gx = x->grad_data();
      for (size_t o = 0; o < out->size(); ++o) gx[(*argmax)[o]] += out->grad[o];
    });
  }
  return out;
}

/// Per-channel normalization over the spatial extent (single-sample batch
/// statistics), followed by a learned affine transform.
template <class T>
TensorPtr<T> batchnorm(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                       const TensorPtr<T>& beta, T eps = T(1e-5)) {
  if (x->shape.size() != 3) throw ShapeError("batchnorm: need [C,h,w]");
  const int c = x->dim(0);
  const size_t hw = static_cast<size_t>(x->dim(1)) * x->dim(2);
  if (gamma->size() != static_cast<size_t>(c) || beta->size() != static_cast<size_t>(c))
    throw ShapeError("batchnorm: gamma/beta must have C entries");
  auto out = make_tensor<T>(x->shape);
  auto mean = std::make_shared<std::vector<T>>(c);
  auto inv_std = std::make_shared<std::vector<T>>(c);
  for (int ch = 0; ch < c; ++ch) {
    const T* xs = x->values.data() + ch * hw;
    T m = 0;
    for (size_t p = 0; p < hw; ++p) m += xs[p];
    m /= static_cast<T>(hw);
    T var = 0;
    for (size_t p = 0; p < hw; ++p) var += (xs[p] - m) * (xs[p] - m);
    var /= static_cast<T>(hw);
    const T is = T(1) / std::sqrt(var + eps);
    (*mean)[ch] = m;
    (*inv_std)[ch] = is;
    T* os = out->values.data() + ch * hw;
    for (size_t p = 0; p < hw; ++p)
      os[p] = gamma->values[ch] * (xs[p] - m) * is + beta->values[ch];
  }
  if (detail::wants_grad(tape, {&x, &gamma, &beta})) {
    out->requires_grad = true;
    tape->record([x, gamma, beta, out, mean, inv_std, c, hw] {
      for (int ch = 0; ch < c; ++ch) {
        const T* xs = x->values.data() + ch * hw;
        const T* go = out->grad.data() + ch * hw;
        const T m = (*mean)[ch], is = (*inv_std)[ch], g = gamma->values[ch];
        T sum_go = 0, sum_go_xhat = 0;
        for (size_t p = 0; p < hw; ++p) {
          sum_go += go[p];
          sum_go_xhat += go[p] * (xs[p] - m) * is;
        }
        if (gamma->requires_grad) gamma->grad_data()[ch] += sum_go_xhat;
        if (beta->requires_grad) beta->grad_data()[ch] += sum_go;
        if (x->requires_grad) {
          T* gx = x->grad_data() + ch * hw;
          const T n = static_cast<T>(hw);
          for (size_t p = 0; p < hw; ++p) {
            const T xhat = (xs[p] - m) * is;
            gx[p] += g * is / n * (n * go[p] - sum_go - xhat * sum_go_xhat);
          }
        }
      }
    });
  }
  return out;
}

/// Divides each spatial location's channel vector by max(||.||_2, eps).
template <class T>
TensorPtr<T> l2_normalize_channel(Tape<T>* tape, const TensorPtr<T>& x, T eps = T(1e-12)) {
  if (x->shape.size() != 3) throw ShapeError("l2_normalize_channel: need [C,h,w]");
  const int c = x->dim(0);
  const size_t hw = static_cast<size_t>(x->dim(1)) * x->dim(2);
  auto out = make_tensor<T>(x->shape);
  auto norms = std::make_shared<std::vector<T>>(hw);
  for (size_t p = 0; p < hw; ++p) {
    T s = 0;
    for (int ch = 0; ch < c; ++ch) s += x->values[ch * hw + p] * x->values[ch * hw + p];
    const T n = std::max(std::sqrt(s), eps);
    (*norms)[p] = n;
    for (int ch = 0; ch < c; ++ch) out->values[ch * hw + p] = x->values[ch * hw + p] / n;
  }
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, norms, c, hw] {
      T* gx = x->grad_data();
      for (size_t p = 0; p < hw; ++p) {
        const T n = (*norms)[p];
        T dot = 0;
        for (int ch = 0; ch < c; ++ch) dot += out->grad[ch * hw + p] * x->values[ch * hw + p];
        for (int ch = 0; ch < c; ++ch)
          gx[ch * hw + p] += out->grad[ch * hw + p] / n - x->values[ch * hw + p] * dot / (n * n * n);
      }
    });
  }
  return out;
}

/// Row-wise hard selection. W carries the max per row, H its column index
/// (lowest index on ties). Gradient flows only through the max elements.
template <class T>
struct RowMax {
  TensorPtr<T> values;        // [n]
  std::vector<int32_t> indices;  // [n]
};

template <class T>
RowMax<T> rowwise_max_argmax(Tape<T>* tape, const TensorPtr<T>& r) {
  if (r->shape.size() != 2) throw ShapeError("rowwise_max_argmax: need [n,m]");
  const int n = r->dim(0), m = r->dim(1);
  if (n < 1 || m < 1) throw ShapeError("rowwise_max_argmax: empty matrix");
  RowMax<T> res;
  res.values = make_tensor<T>({n});
  res.indices.resize(n);
  for (int i = 0; i < n; ++i) {
    const T* row = r->values.data() + static_cast<size_t>(i) * m;
    int best = 0;
    for (int j = 1; j < m; ++j)
      if (row[j] > row[best]) best = j;
    res.values->values[i] = row[best];
    res.indices[i] = best;
  }
  if (detail::wants_grad(tape, {&r})) {
    res.values->requires_grad = true;
    auto w = res.values;
    auto idx = std::make_shared<std::vector<int32_t>>(res.indices);
    tape->record([r, w, idx, n, m] {
      T* gr = r->grad_data();
      for (int i = 0; i < n; ++i)
        gr[static_cast<size_t>(i) * m + (*idx)[i]] += w->grad[i];
    });
  }
  return res;
}

/// Output row i is row h_i of v; backward scatter-adds (duplicates accumulate).
template <class T>
TensorPtr<T> gather_rows(Tape<T>* tape, const TensorPtr<T>& v,
                         const std::vector<int32_t>& indices) {
  if (v->shape.size() != 2) throw ShapeError("gather_rows: need [m,C]");
  const int m = v->dim(0), c = v->dim(1);
  const int n = static_cast<int>(indices.size());
  for (int32_t h : indices)
    if (h < 0 || h >= m)
      throw ShapeError("gather_rows: index " + std::to_string(h) + " out of [0," +
                       std::to_string(m) + ")");
  auto out = make_tensor<T>({n, c});
  for (int i = 0; i < n; ++i)
    std::copy_n(v->values.data() + static_cast<size_t>(indices[i]) * c, c,
                out->values.data() + static_cast<size_t>(i) * c);
  if (detail::wants_grad(tape, {&v})) {
    out->requires_grad = true;
    auto idx = std::make_shared<std::vector<int32_t>>(indices);
    tape->record([v, out, idx, c] {
      T* gv = v->grad_data();
      for (size_t i = 0; i < idx->size(); ++i)
        for (int k = 0; k < c; ++k)
          gv[static_cast<size_t>((*idx)[i]) * c + k] += out->grad[i * c + k];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layout helpers (pure permutations, exact backward)

template <class T>
TensorPtr<T> reshape(Tape<T>* tape, const TensorPtr<T>& x, std::vector<int> shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  if (n != x->size())
    throw ShapeError("reshape: element count mismatch " + shape_str(x->shape) + " -> " +
                     shape_str(shape));
  auto out = make_tensor<T>(std::move(shape));
  out->values = x->values;
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out] {
      T* gx = x->grad_data();
      for (size_t i = 0; i < x->size(); ++i) gx[i] += out->grad[i];
    });
  }
  return out;
}

/// [C,h,w] -> [hw,C]: row p is the channel vector at spatial location p.
template <class T>
TensorPtr<T> flatten_locations(Tape<T>* tape, const TensorPtr<T>& x) {
  if (x->shape.size() != 3) throw ShapeError("flatten_locations: need [C,h,w]");
  const int c = x->dim(0);
  const size_t hw = static_cast<size_t>(x->dim(1)) * x->dim(2);
  auto out = make_tensor<T>({static_cast<int>(hw), c});
  for (size_t p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) out->values[p * c + ch] = x->values[ch * hw + p];
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, c, hw] {
      T* gx = x->grad_data();
      for (size_t p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) gx[ch * hw + p] += out->grad[p * c + ch];
    });
  }
  return out;
}

/// Inverse of flatten_locations: [hw,C] -> [C,h,w].
template <class T>
TensorPtr<T> unflatten_locations(Tape<T>* tape, const TensorPtr<T>& x, int h, int w) {
  if (x->shape.size() != 2 || x->dim(0) != h * w)
    throw ShapeError("unflatten_locations: need [h*w,C]");
  const int c = x->dim(1);
  const size_t hw = static_cast<size_t>(h) * w;
  auto out = make_tensor<T>({c, h, w});
  for (size_t p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) out->values[ch * hw + p] = x->values[p * c + ch];
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, c, hw] {
      T* gx = x->grad_data();
      for (size_t p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) gx[p * c + ch] += out->grad[ch * hw + p];
    });
  }
  return out;
}

template <class T>
TensorPtr<T> transpose2d(Tape<T>* tape, const TensorPtr<T>& x) {
  if (x->shape.size() != 2) throw ShapeError("transpose2d: need [n,m]");
  const int n = x->dim(0), m = x->dim(1);
  auto out = make_tensor<T>({m, n});
  EMap<T>(out->values.data(), m, n) = ECMap<T>(x->values.data(), n, m).transpose();
  if (detail::wants_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record([x, out, n, m] {
      EMap<T>(x->grad_data(), n, m) += ECMap<T>(out->grad.data(), m, n).transpose();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

/// Mean absolute difference; subgradient 0 at exact ties.
template <class T>
TensorPtr<T> l1_loss(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_same_shape(a, b, "l1_loss");
  auto out = make_tensor<T>({1});
  const T n = static_cast<T>(a->size());
  T acc = 0;
  for (size_t i = 0; i < a->size(); ++i) acc += std::abs(a->values[i] - b->values[i]);
  out->values[0] = acc / n;
  if (detail::wants_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record([a, b, out, n] {
      const T g = out->grad[0] / n;
      for (size_t i = 0; i < a->size(); ++i) {
        const T d = a->values[i] - b->values[i];
        const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
        if (a->requires_grad) a->grad_data()[i] += s;
        if (b->requires_grad) b->grad_data()[i] -= s;
      }
    });
  }
  return out;
}

/// Mean over pixels of w_t * (-log softmax(logits)_t), stabilized by
/// max-subtraction. Class weights are constants.
template <class T>
TensorPtr<T> weighted_cross_entropy(Tape<T>* tape, const TensorPtr<T>& logits,
                                    const std::vector<int32_t>& target,
                                    const std::vector<T>& weights) {
  if (logits->shape.size() != 3) throw ShapeError("weighted_cross_entropy: logits must be [K,h,w]");
  const int k = logits->dim(0);
  const size_t hw = static_cast<size_t>(logits->dim(1)) * logits->dim(2);
  if (target.size() != hw) throw ShapeError("weighted_cross_entropy: target size mismatch");
  if (weights.size() != static_cast<size_t>(k))
    throw ShapeError("weighted_cross_entropy: need one weight per class");
  for (int32_t t : target)
    if (t < 0 || t >= k)
      throw ShapeError("weighted_cross_entropy: class id " + std::to_string(t) +
                       " outside [0," + std::to_string(k) + ")");
  auto out = make_tensor<T>({1});
  auto softmax = std::make_shared<std::vector<T>>(logits->size());
  T acc = 0;
  for (size_t p = 0; p < hw; ++p) {
    T mx = logits->values[p];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits->values[c * hw + p]);
    T z = 0;
    for (int c = 0; c < k; ++c) z += std::exp(logits->values[c * hw + p] - mx);
    const T logz = std::log(z) + mx;
    for (int c = 0; c < k; ++c)
      (*softmax)[c * hw + p] = std::exp(logits->values[c * hw + p] - logz);
    acc += weights[target[p]] * (logz - logits->values[target[p] * hw + p]);
  }
  out->values[0] = acc / static_cast<T>(hw);
  if (detail::wants_grad(tape, {&logits})) {
    out->requires_grad = true;
    auto tgt = std::make_shared<std::vector<int32_t>>(target);
    auto wts = std::make_shared<std::vector<T>>(weights);
    tape->record([logits, out, softmax, tgt, wts, k, hw] {
      T* gl = logits->grad_data();
      const T g = out->grad[0] / static_cast<T>(hw);
      for (size_t p = 0; p < hw; ++p) {
        const T wp = (*wts)[(*tgt)[p]];
        for (int c = 0; c < k; ++c) {
          const T ind = (c == (*tgt)[p]) ? T(1) : T(0);
          gl[c * hw + p] += g * wp * ((*softmax)[c * hw + p] - ind);
        }
      }
    });
  }
  return out;
}

}  // namespace ftvp
