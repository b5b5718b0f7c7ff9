#pragma once

// Fusion of the intent-branch and slot-branch features: low-rank bilinear
// fusion evaluated through Hadamard products of projections,
//   f_i = 1^T (U_i^T x o V_i^T y) + b_i,
// equivalent to the full bilinear form x^T (U_i V_i^T) y + b_i but with
// l*(m+n)*k + l parameters instead of l*(m*n+1); plus plain elementwise
// addition, and the 2D->3D broadcast used when the intent branch emits one
// vector per sentence.

#include <string>
#include <vector>

#include "slufuse/graph.hpp"
#include "slufuse/layers.hpp"

namespace slufuse {

// Factor matrices are stored fused: U as m x (l*k) and V as n x (l*k), where
// column i*k + t is factor t of output feature i. U_i is then the column
// block [i*k, (i+1)*k).
template <class S>
struct MlbFusion {
  std::size_t U = 0, V = 0, b = 0;
  std::size_t m = 0, n = 0, k = 0, l = 0;

  static MlbFusion create(ParamStore<S>& ps, const std::string& prefix,
                          std::size_t m, std::size_t n, std::size_t k,
                          std::size_t l, Rng& rng) {
    if (k >= std::min(m, n))
      throw std::invalid_argument(
          "mlb: rank bound k=" + std::to_string(k) +
          " must be below min(m,n)=" + std::to_string(std::min(m, n)));
    MlbFusion f;
    f.m = m;
    f.n = n;
    f.k = k;
    f.l = l;
    f.U = ps.add(prefix + ".U", glorot_uniform<S>({m, l * k}, m, k, rng));
    f.V = ps.add(prefix + ".V", glorot_uniform<S>({n, l * k}, n, k, rng));
    f.b = ps.add(prefix + ".b", Tensor<S>({l}));
    return f;
  }

  std::size_t param_count() const { return l * (m + n) * k + l; }
  std::size_t full_bilinear_count() const { return l * (m * n + 1); }

  // x: P x m, y: P x n (P = batch*positions; parameters shared across
  // positions) -> P x l; no nonlinearity.
  Var apply(Graph<S>& g, Var x, Var y) const {
    const Tensor<S>&X = g.val(x), &Y = g.val(y);
    if (X.cols() != m || Y.cols() != n)
      throw ShapeError("mlb_fuse: inputs " + shape_str(X.shape()) + ", " +
                       shape_str(Y.shape()) + " do not match m=" +
                       std::to_string(m) + ", n=" + std::to_string(n));
    if (X.rows() != Y.rows())
      throw ShapeError("mlb_fuse: row mismatch " + shape_str(X.shape()) +
                       " vs " + shape_str(Y.shape()));
    Var xu = g.matmul(g.reshape(x, {X.rows(), m}), g.param(U));
    Var yv = g.matmul(g.reshape(y, {Y.rows(), n}), g.param(V));
    Var fused = g.block_rowsum(g.mul(xu, yv), k);
    return g.add_rowvec(fused, g.param(b));
  }
};

// Elementwise sum of two equal-shaped branch feature tensors.
template <class S>
Var dense_add(Graph<S>& g, Var x, Var y) {
  return g.add(x, y);
}

// v: B x d -> (B*L2) x d batch-major, v replicated at every position; the
// broadcast's gradient sums over positions.
template <class S>
Var broadcast_intent(Graph<S>& g, Var v, std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("broadcast_intent: L2 must be >= 1");
  return g.repeat_each_row(v, steps);
}

}  // namespace slufuse
