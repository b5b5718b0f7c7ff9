#pragma once

// Reverse-mode differentiation over a tape of tensor-level operations.
//
// A Graph is built fresh for every forward pass: ops compute values eagerly
// and record pullback closures. backward() walks the tape in reverse
// creation order (a valid reverse-topological order by construction) and
// accumulates gradients, summing over all uses of a node. Parameters live
// in a ParamStore shared across passes; leaf nodes copy the current value in
// and push gradients back out, so parameters never reachable from the loss
// keep exactly-zero gradients.
//
// A Graph is confined to one thread; ParamStore values may be read-shared
// across threads between updates.

#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "slufuse/ops.hpp"
#include "slufuse/rng.hpp"
#include "slufuse/tensor.hpp"

namespace slufuse {

struct Var {
  std::int32_t i = -1;
  bool valid() const { return i >= 0; }
};

template <class S>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<S> value, bool trainable = true) {
    if (index_.count(name))
      throw std::runtime_error("param '" + name + "' already registered");
    std::size_t id = values_.size();
    index_.emplace(name, id);
    names_.push_back(std::move(name));
    grads_.emplace_back(value.shape());
    values_.push_back(std::move(value));
    trainable_.push_back(trainable);
    return id;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t id) const { return names_[id]; }
  bool trainable(std::size_t id) const { return trainable_[id]; }
  Tensor<S>& value(std::size_t id) { return values_[id]; }
  const Tensor<S>& value(std::size_t id) const { return values_[id]; }
  Tensor<S>& grad(std::size_t id) { return grads_[id]; }
  const Tensor<S>& grad(std::size_t id) const { return grads_[id]; }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t id_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::runtime_error("unknown param '" + name + "'");
    return it->second;
  }

  void zero_grads() {
    for (auto& g : grads_) g.fill(S(0));
  }

  std::size_t total_elems() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> names_;
  std::vector<Tensor<S>> values_;
  std::vector<Tensor<S>> grads_;
  std::vector<bool> trainable_;
};

template <class S>
class Graph {
 public:
  explicit Graph(ParamStore<S>* params = nullptr, bool record = true)
      : params_(params), record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  const Tensor<S>& val(Var v) const { return nodes_[v.i].value; }

  // ---- leaves ----

  Var param(std::size_t id) {
    if (!params_) throw std::runtime_error("graph has no parameter store");
    Var v = push(Tensor<S>(params_->value(id)), params_->trainable(id));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, id]() {
        Tensor<S>& pg = params_->grad(id);
        const Tensor<S>& g = nodes_[v.i].grad;
        for (std::size_t t = 0; t < g.size(); ++t) pg[t] += g[t];
      };
    }
    return v;
  }

  Var param(const std::string& name) { return param(params_->id_of(name)); }

  Var constant(Tensor<S> value) { return push(std::move(value), false); }

  // ---- arithmetic ----

  Var matmul(Var a, Var b) {
    const Tensor<S>&A = val(a), &B = val(b);
    Var v = push(slufuse::matmul(A, B), needs(a) || needs(b));
    if (recording(v)) {
      const std::size_t m = A.shape()[0], p = A.shape()[1], n = B.shape()[1];
      nodes_[v.i].pull = [this, v, a, b, m, p, n]() {
        const Tensor<S>& g = nodes_[v.i].grad;
        if (needs(a)) {
          // dA += g * B^T
          gemm(false, true, m, p, n, S(1), g.data(), n, val(b).data(), n, S(1),
               grad(a).data(), p);
        }
        if (needs(b)) {
          // dB += A^T * g
          gemm(true, false, p, n, m, S(1), val(a).data(), p, g.data(), n, S(1),
               grad(b).data(), n);
        }
      };
    }
    return v;
  }

  Var add(Var a, Var b) { return binary(a, b, Pointwise::add); }
  Var sub(Var a, Var b) { return binary(a, b, Pointwise::sub); }
  Var mul(Var a, Var b) { return binary(a, b, Pointwise::hadamard); }

  Var scale(Var a, S c) {
    Var v = push(elementwise(Pointwise::scale, val(a), nullptr, c), needs(a));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, a, c]() {
        if (!needs(a)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& ga = grad(a);
        for (std::size_t t = 0; t < g.size(); ++t) ga[t] += c * g[t];
      };
    }
    return v;
  }

  Var tanh_(Var a) {
    Var v = push(elementwise(Pointwise::tanh, val(a)), needs(a));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, a]() {
        if (!needs(a)) return;
        const Tensor<S>&g = nodes_[v.i].grad, &y = nodes_[v.i].value;
        Tensor<S>& ga = grad(a);
        for (std::size_t t = 0; t < g.size(); ++t)
          ga[t] += g[t] * (S(1) - y[t] * y[t]);
      };
    }
    return v;
  }

  Var sigmoid_(Var a) {
    Var v = push(elementwise(Pointwise::sigmoid, val(a)), needs(a));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, a]() {
        if (!needs(a)) return;
        const Tensor<S>&g = nodes_[v.i].grad, &y = nodes_[v.i].value;
        Tensor<S>& ga = grad(a);
        for (std::size_t t = 0; t < g.size(); ++t)
          ga[t] += g[t] * y[t] * (S(1) - y[t]);
      };
    }
    return v;
  }

  Var relu_(Var a) {
    Var v = push(elementwise(Pointwise::relu, val(a)), needs(a));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, a]() {
        if (!needs(a)) return;
        const Tensor<S>&g = nodes_[v.i].grad, &y = nodes_[v.i].value;
        Tensor<S>& ga = grad(a);
        for (std::size_t t = 0; t < g.size(); ++t)
          if (y[t] > S(0)) ga[t] += g[t];
      };
    }
    return v;
  }

  // x: R x C, bias: vector of C (or 1 x C), added to every row
  Var add_rowvec(Var x, Var bias) {
    const Tensor<S>&X = val(x), &B = val(bias);
    const std::size_t r = X.rows(), c = X.cols();
    if (B.size() != c)
      throw ShapeError("add_rowvec: bias " + shape_str(B.shape()) +
                       " does not match columns of " + shape_str(X.shape()));
    Tensor<S> out(X.shape());
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] + B[j];
    Var v = push(std::move(out), needs(x) || needs(bias));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, bias, r, c]() {
        const Tensor<S>& g = nodes_[v.i].grad;
        if (needs(x)) {
          Tensor<S>& gx = grad(x);
          for (std::size_t t = 0; t < g.size(); ++t) gx[t] += g[t];
        }
        if (needs(bias)) {
          Tensor<S>& gb = grad(bias);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
      };
    }
    return v;
  }

  // ---- data movement ----

  Var reshape(Var x, Shape shape) {
    Var v = push(val(x).reshaped(std::move(shape)), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x]() {
        if (!needs(x)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t t = 0; t < g.size(); ++t) gx[t] += g[t];
      };
    }
    return v;
  }

  Var concat_cols(Var a, Var b) {
    const Tensor<S>&A = val(a), &B = val(b);
    const std::size_t r = A.rows();
    if (B.rows() != r)
      throw ShapeError("concat_cols: row mismatch " + shape_str(A.shape()) +
                       " vs " + shape_str(B.shape()));
    const std::size_t ca = A.cols(), cb = B.cols();
    Tensor<S> out({r, ca + cb});
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < ca; ++j) out[i * (ca + cb) + j] = A[i * ca + j];
      for (std::size_t j = 0; j < cb; ++j)
        out[i * (ca + cb) + ca + j] = B[i * cb + j];
    }
    Var v = push(std::move(out), needs(a) || needs(b));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, a, b, r, ca, cb]() {
        const Tensor<S>& g = nodes_[v.i].grad;
        if (needs(a)) {
          Tensor<S>& ga = grad(a);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < ca; ++j)
              ga[i * ca + j] += g[i * (ca + cb) + j];
        }
        if (needs(b)) {
          Tensor<S>& gb = grad(b);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < cb; ++j)
              gb[i * cb + j] += g[i * (ca + cb) + ca + j];
        }
      };
    }
    return v;
  }

  Var slice_cols(Var x, std::size_t c0, std::size_t c1) {
    const Tensor<S>& X = val(x);
    const std::size_t r = X.rows(), c = X.cols();
    if (c0 >= c1 || c1 > c)
      throw ShapeError("slice_cols: [" + std::to_string(c0) + "," +
                       std::to_string(c1) + ") out of " + shape_str(X.shape()));
    const std::size_t w = c1 - c0;
    Tensor<S> out({r, w});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * w + j] = X[i * c + c0 + j];
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, r, c, c0, w]() {
        if (!needs(x)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) gx[i * c + c0 + j] += g[i * w + j];
      };
    }
    return v;
  }

  Var slice_rows(Var x, std::size_t r0, std::size_t r1) {
    const Tensor<S>& X = val(x);
    const std::size_t r = X.rows(), c = X.cols();
    if (r0 >= r1 || r1 > r)
      throw ShapeError("slice_rows: [" + std::to_string(r0) + "," +
                       std::to_string(r1) + ") out of " + shape_str(X.shape()));
    const std::size_t h = r1 - r0;
    Tensor<S> out({h, c});
    std::copy(X.data() + r0 * c, X.data() + r1 * c, out.data());
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, r0, c, h]() {
        if (!needs(x)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t t = 0; t < h * c; ++t) gx[r0 * c + t] += g[t];
      };
    }
    return v;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t c = val(parts[0]).cols();
    std::size_t rows = 0;
    bool any = false;
    for (Var p : parts) {
      if (val(p).cols() != c)
        throw ShapeError("concat_rows: column mismatch");
      rows += val(p).rows();
      any = any || needs(p);
    }
    Tensor<S> out({rows, c});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor<S>& P = val(p);
      std::copy(P.data(), P.data() + P.size(), out.data() + off);
      off += P.size();
    }
    Var v = push(std::move(out), any);
    if (recording(v)) {
      std::vector<Var> ps = parts;
      nodes_[v.i].pull = [this, v, ps]() {
        const Tensor<S>& g = nodes_[v.i].grad;
        std::size_t off = 0;
        for (Var p : ps) {
          const std::size_t n = val(p).size();
          if (needs(p)) {
            Tensor<S>& gp = grad(p);
            for (std::size_t t = 0; t < n; ++t) gp[t] += g[off + t];
          }
          off += n;
        }
      };
    }
    return v;
  }

  // (B*L2) x d batch-major rows -> (L2*B) x d time-major rows
  Var to_time_major(Var x, std::size_t batch, std::size_t steps) {
    return permute_rows(x, batch, steps, /*to_time=*/true);
  }
  Var to_batch_major(Var x, std::size_t batch, std::size_t steps) {
    return permute_rows(x, batch, steps, /*to_time=*/false);
  }

  // B x d -> (B*times) x d, each row repeated `times` consecutive rows.
  // The pullback sums over the replicas.
  Var repeat_each_row(Var x, std::size_t times) {
    const Tensor<S>& X = val(x);
    const std::size_t r = X.rows(), c = X.cols();
    Tensor<S> out({r * times, c});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t k = 0; k < times; ++k)
        std::copy(X.data() + i * c, X.data() + (i + 1) * c,
                  out.data() + (i * times + k) * c);
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, r, c, times]() {
        if (!needs(x)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t k = 0; k < times; ++k)
            for (std::size_t j = 0; j < c; ++j)
              gx[i * c + j] += g[(i * times + k) * c + j];
      };
    }
    return v;
  }

  // R x (G*block) -> R x G, summing each consecutive `block` columns
  Var block_rowsum(Var x, std::size_t block) {
    const Tensor<S>& X = val(x);
    const std::size_t r = X.rows(), c = X.cols();
    if (block == 0 || c % block != 0)
      throw ShapeError("block_rowsum: block " + std::to_string(block) +
                       " does not divide " + shape_str(X.shape()));
    const std::size_t groups = c / block;
    Tensor<S> out({r, groups});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t gidx = 0; gidx < groups; ++gidx) {
        S acc = 0;
        for (std::size_t j = 0; j < block; ++j)
          acc += X[i * c + gidx * block + j];
        out[i * groups + gidx] = acc;
      }
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, r, c, block]() {
        if (!needs(x)) return;
        const std::size_t groups = c / block;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t gidx = 0; gidx < groups; ++gidx)
            for (std::size_t j = 0; j < block; ++j)
              gx[i * c + gidx * block + j] += g[i * groups + gidx];
      };
    }
    return v;
  }

  Var sum_all(Var x) {
    const Tensor<S>& X = val(x);
    S acc = 0;
    for (std::size_t t = 0; t < X.size(); ++t) acc += X[t];
    Var v = push(Tensor<S>({1, 1}, {acc}), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x]() {
        if (!needs(x)) return;
        const S g = nodes_[v.i].grad[0];
        Tensor<S>& gx = grad(x);
        for (std::size_t t = 0; t < gx.size(); ++t) gx[t] += g;
      };
    }
    return v;
  }

  // Row lookup from an embedding-style table node. Rows whose id equals
  // pad_id come out as zeros and route no gradient back, which keeps the
  // table's PAD row pinned at zero under any optimizer.
  Var gather_rows(Var table, const std::vector<std::int32_t>& ids,
                  std::int32_t pad_id = -1) {
    const Tensor<S>& T = val(table);
    const std::size_t v_rows = T.rows(), c = T.cols();
    for (std::int32_t id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= v_rows)
        throw ShapeError("gather_rows: id " + std::to_string(id) +
                         " out of range [0," + std::to_string(v_rows) + ")");
    Tensor<S> out({ids.size(), c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == pad_id) continue;  // stays zero
      std::copy(T.data() + ids[i] * c, T.data() + (ids[i] + 1) * c,
                out.data() + i * c);
    }
    Var v = push(std::move(out), needs(table));
    if (recording(v)) {
      std::vector<std::int32_t> idv = ids;
      nodes_[v.i].pull = [this, v, table, idv, c, pad_id]() {
        if (!needs(table)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gt = grad(table);
        for (std::size_t i = 0; i < idv.size(); ++i) {
          if (idv[i] == pad_id) continue;
          for (std::size_t j = 0; j < c; ++j)
            gt[idv[i] * c + j] += g[i * c + j];
        }
      };
    }
    return v;
  }

  // Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
  Var dropout(Var x, double p, Rng& rng) {
    if (p < 0 || p >= 1)
      throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (p == 0) return x;
    const Tensor<S>& X = val(x);
    Tensor<S> mask(X.shape());
    const S keep = S(1.0 / (1.0 - p));
    for (std::size_t t = 0; t < mask.size(); ++t)
      mask[t] = rng.next_double() < p ? S(0) : keep;
    Tensor<S> out(X.shape());
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = X[t] * mask[t];
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      auto m = std::make_shared<Tensor<S>>(std::move(mask));
      nodes_[v.i].pull = [this, v, x, m]() {
        if (!needs(x)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t t = 0; t < g.size(); ++t) gx[t] += g[t] * (*m)[t];
      };
    }
    return v;
  }

  Var softmax_rows(Var x) {
    const Tensor<S>& X = val(x);
    const std::size_t r = X.rows(), c = X.cols();
    Var v = push(softmax(X, X.rank() ? X.rank() - 1 : 0), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, r, c]() {
        if (!needs(x)) return;
        const Tensor<S>&g = nodes_[v.i].grad, &y = nodes_[v.i].value;
        Tensor<S>& gx = grad(x);
        for (std::size_t i = 0; i < r; ++i) {
          S dot = 0;
          for (std::size_t j = 0; j < c; ++j)
            dot += g[i * c + j] * y[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
        }
      };
    }
    return v;
  }

  // Mean cross-entropy -log softmax(logits)[gold] over rows with weight 1;
  // rows with weight 0 are excluded from both the mean and the gradient.
  Var softmax_ce_rows(Var logits, const std::vector<std::int32_t>& gold,
                      const std::vector<S>& row_weight) {
    const Tensor<S>& X = val(logits);
    const std::size_t r = X.rows(), c = X.cols();
    if (gold.size() != r || row_weight.size() != r)
      throw ShapeError("softmax_ce_rows: " + std::to_string(gold.size()) +
                       " labels for " + std::to_string(r) + " rows");
    S wsum = 0;
    for (S w : row_weight) wsum += w;
    if (wsum <= S(0))
      throw std::invalid_argument("softmax_ce_rows: no active rows");
    auto probs = std::make_shared<Tensor<S>>(softmax(X, X.rank() - 1));
    S loss = 0;
    for (std::size_t i = 0; i < r; ++i) {
      if (row_weight[i] == S(0)) continue;
      const std::int32_t y = gold[i];
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw ShapeError("softmax_ce_rows: label " + std::to_string(y) +
                         " out of range [0," + std::to_string(c) + ")");
      loss -= row_weight[i] * std::log((*probs)[i * c + y]);
    }
    loss /= wsum;
    Var v = push(Tensor<S>({1, 1}, {loss}), needs(logits));
    if (recording(v)) {
      auto gv = std::make_shared<std::vector<std::int32_t>>(gold);
      auto wv = std::make_shared<std::vector<S>>(row_weight);
      nodes_[v.i].pull = [this, v, logits, probs, gv, wv, wsum, r, c]() {
        if (!needs(logits)) return;
        const S gs = nodes_[v.i].grad[0] / wsum;
        Tensor<S>& gx = grad(logits);
        for (std::size_t i = 0; i < r; ++i) {
          const S w = (*wv)[i];
          if (w == S(0)) continue;
          for (std::size_t j = 0; j < c; ++j)
            gx[i * c + j] += gs * w * (*probs)[i * c + j];
          gx[i * c + (*gv)[i]] -= gs * w;
        }
      };
    }
    return v;
  }

  // Sliding windows of width w over each utterance: (B*L2) x d batch-major
  // -> (B*(L2-w+1)) x (w*d)
  Var im2col_seq(Var x, std::size_t batch, std::size_t steps, std::size_t w) {
    const Tensor<S>& X = val(x);
    const std::size_t d = X.cols();
    if (X.rows() != batch * steps)
      throw ShapeError("im2col_seq: rows != batch*steps");
    if (w == 0 || w > steps)
      throw ShapeError("im2col_seq: window " + std::to_string(w) +
                       " exceeds sequence length " + std::to_string(steps));
    const std::size_t t_out = steps - w + 1;
    Tensor<S> out({batch * t_out, w * d});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < t_out; ++t)
        std::copy(X.data() + (b * steps + t) * d,
                  X.data() + (b * steps + t + w) * d,
                  out.data() + (b * t_out + t) * (w * d));
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, batch, steps, w, d]() {
        if (!needs(x)) return;
        const std::size_t t_out = steps - w + 1;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < t_out; ++t)
            for (std::size_t j = 0; j < w * d; ++j)
              gx[(b * steps + t) * d + j] += g[(b * t_out + t) * (w * d) + j];
      };
    }
    return v;
  }

  // (B*T) x F batch-major -> B x F, max over the T axis; ties keep the
  // earliest timestep.
  Var maxpool_time(Var x, std::size_t batch, std::size_t t_len) {
    const Tensor<S>& X = val(x);
    const std::size_t f = X.cols();
    if (X.rows() != batch * t_len)
      throw ShapeError("maxpool_time: rows != batch*t_len");
    Tensor<S> out({batch, f});
    auto arg = std::make_shared<std::vector<std::uint32_t>>(batch * f);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < f; ++j) {
        S best = X[(b * t_len) * f + j];
        std::uint32_t bi = 0;
        for (std::size_t t = 1; t < t_len; ++t) {
          S cand = X[(b * t_len + t) * f + j];
          if (cand > best) {
            best = cand;
            bi = static_cast<std::uint32_t>(t);
          }
        }
        out[b * f + j] = best;
        (*arg)[b * f + j] = bi;
      }
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, arg, batch, t_len, f]() {
        if (!needs(x)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < f; ++j)
            gx[(b * t_len + (*arg)[b * f + j]) * f + j] += g[b * f + j];
      };
    }
    return v;
  }

  // ---- custom ops ----
  // Escape hatch for layers with hand-coded pullbacks (the CRF). The pull
  // closure reads grad(v) and accumulates into grads of the parents it
  // captured; it is installed only when the graph is recording.

  Var custom_node(Tensor<S> value, bool needs_grad) {
    return push(std::move(value), needs_grad);
  }

  bool recording_at(Var v) const { return recording(v); }

  void set_pull(Var v, std::function<void()> pull) {
    if (recording(v)) nodes_[v.i].pull = std::move(pull);
  }

  // ---- backward ----

  void backward(Var loss) {
    if (val(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got " +
                                  shape_str(val(loss).shape()));
    if (!record_)
      throw std::logic_error("backward: graph built in value-only mode");
    grad(loss)[0] = S(1);
    for (std::int32_t i = loss.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.grad.empty() && n.pull) n.pull();
    }
  }

  Tensor<S>& grad(Var v) {
    Node& n = nodes_[v.i];
    if (n.grad.empty()) n.grad = Tensor<S>(n.value.shape());
    return n.grad;
  }

  bool needs(Var v) const { return nodes_[v.i].needs; }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // empty until first touched
    std::function<void()> pull;
    bool needs = false;
  };

  Var push(Tensor<S> value, bool needs) {
    nodes_.push_back(Node{std::move(value), {}, {}, record_ && needs});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  bool recording(Var v) const { return record_ && nodes_[v.i].needs; }

  Var binary(Var a, Var b, Pointwise kind) {
    const Tensor<S>&A = val(a), &B = val(b);
    Var v = push(elementwise(kind, A, &B), needs(a) || needs(b));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, a, b, kind]() {
        const Tensor<S>& g = nodes_[v.i].grad;
        if (needs(a)) {
          Tensor<S>& ga = grad(a);
          if (kind == Pointwise::hadamard) {
            const Tensor<S>& bv = val(b);
            for (std::size_t t = 0; t < g.size(); ++t) ga[t] += g[t] * bv[t];
          } else {
            for (std::size_t t = 0; t < g.size(); ++t) ga[t] += g[t];
          }
        }
        if (needs(b)) {
          Tensor<S>& gb = grad(b);
          if (kind == Pointwise::hadamard) {
            const Tensor<S>& av = val(a);
            for (std::size_t t = 0; t < g.size(); ++t) gb[t] += g[t] * av[t];
          } else if (kind == Pointwise::sub) {
            for (std::size_t t = 0; t < g.size(); ++t) gb[t] -= g[t];
          } else {
            for (std::size_t t = 0; t < g.size(); ++t) gb[t] += g[t];
          }
        }
      };
    }
    return v;
  }

  Var permute_rows(Var x, std::size_t batch, std::size_t steps, bool to_time) {
    const Tensor<S>& X = val(x);
    const std::size_t c = X.cols();
    if (X.rows() != batch * steps)
      throw ShapeError("permute_rows: rows != batch*steps");
    Tensor<S> out({batch * steps, c});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t src = to_time ? b * steps + t : t * batch + b;
        const std::size_t dst = to_time ? t * batch + b : b * steps + t;
        std::copy(X.data() + src * c, X.data() + (src + 1) * c,
                  out.data() + dst * c);
      }
    Var v = push(std::move(out), needs(x));
    if (recording(v)) {
      nodes_[v.i].pull = [this, v, x, batch, steps, c, to_time]() {
        if (!needs(x)) return;
        const Tensor<S>& g = nodes_[v.i].grad;
        Tensor<S>& gx = grad(x);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < steps; ++t) {
            const std::size_t src = to_time ? b * steps + t : t * batch + b;
            const std::size_t dst = to_time ? t * batch + b : b * steps + t;
            for (std::size_t j = 0; j < c; ++j)
              gx[src * c + j] += g[dst * c + j];
          }
      };
    }
    return v;
  }

  ParamStore<S>* params_;
  bool record_;
  std::deque<Node> nodes_;
};

}  // namespace slufuse
