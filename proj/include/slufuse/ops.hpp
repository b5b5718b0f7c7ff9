#pragma once

// Value-level tensor arithmetic: matmul, pointwise kernels, softmax,
// logsumexp. The autodiff tape in graph.hpp builds on these same kernels.
// No implicit broadcasting: binary kinds require equal shapes. Reductions
// use a fixed loop order so identical inputs give bit-identical outputs.

#include <algorithm>
#include <cmath>
#include <string>

#include "slufuse/blas.hpp"
#include "slufuse/tensor.hpp"

namespace slufuse {

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected 2-D operands, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], p = a.shape()[1], n = b.shape()[1];
  Tensor<S> c({m, n});
  gemm(false, false, m, n, p, S(1), a.data(), p, b.data(), n, S(0), c.data(), n);
  return c;
}

enum class Pointwise { add, sub, hadamard, tanh, sigmoid, relu, scale };

template <class S>
inline S sigmoid_scalar(S x) {
  // evaluate on the negative side only, so exp never overflows
  if (x >= 0) {
    S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  S e = std::exp(x);
  return e / (S(1) + e);
}

// Unary kinds ignore `b`; `scale` multiplies by `c`.
template <class S>
Tensor<S> elementwise(Pointwise kind, const Tensor<S>& a,
                      const Tensor<S>* b = nullptr, S c = S(1)) {
  auto require_b = [&]() -> const Tensor<S>& {
    if (!b) throw ShapeError("elementwise: binary kind missing second operand");
    if (!a.same_shape(*b))
      throw ShapeError("elementwise: shape mismatch " + shape_str(a.shape()) +
                       " vs " + shape_str(b->shape()));
    return *b;
  };
  Tensor<S> out(a.shape());
  switch (kind) {
    case Pointwise::add: {
      const Tensor<S>& bb = require_b();
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + bb[i];
      break;
    }
    case Pointwise::sub: {
      const Tensor<S>& bb = require_b();
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - bb[i];
      break;
    }
    case Pointwise::hadamard: {
      const Tensor<S>& bb = require_b();
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * bb[i];
      break;
    }
    case Pointwise::tanh:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::tanh(a[i]);
      break;
    case Pointwise::sigmoid:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = sigmoid_scalar(a[i]);
      break;
    case Pointwise::relu:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > S(0) ? a[i] : S(0);
      break;
    case Pointwise::scale:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
      break;
  }
  return out;
}

// Max-shifted softmax along `axis`; slices along the axis sum to 1.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  const Shape& sh = x.shape();
  std::size_t inner = 1;  // stride between consecutive entries along axis
  for (std::size_t d = axis + 1; d < sh.size(); ++d) inner *= sh[d];
  const std::size_t extent = sh[axis];
  const std::size_t outer = x.size() / (inner * extent);

  Tensor<S> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      S mx = x[base];
      for (std::size_t e = 1; e < extent; ++e)
        mx = std::max(mx, x[base + e * inner]);
      S denom = 0;
      for (std::size_t e = 0; e < extent; ++e) {
        S v = std::exp(x[base + e * inner] - mx);
        out[base + e * inner] = v;
        denom += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= denom;
    }
  }
  return out;
}

// log sum exp over a contiguous range, max-shifted
template <class S>
S logsumexp(const S* v, std::size_t n) {
  if (n == 0) throw ShapeError("logsumexp: empty input");
  S mx = v[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
  S acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(v[i] - mx);
  return mx + std::log(acc);
}

template <class S>
S logsumexp(const Tensor<S>& v) {
  return logsumexp(v.data(), v.size());
}

}  // namespace slufuse
