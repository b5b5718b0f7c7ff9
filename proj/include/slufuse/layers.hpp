#pragma once

// Neural building blocks: embedding lookup, dense, the four-width parallel
// convolution sentence encoder, and bidirectional GRU/LSTM encoders. Layer
// structs own parameter handles into a ParamStore; apply() records the op
// onto a Graph. Weight matrices init uniform(-s, s), s = sqrt(6/(fan_in +
// fan_out)); biases zero.

#include <cstdint>
#include <string>
#include <vector>

#include "slufuse/graph.hpp"
#include "slufuse/rng.hpp"

namespace slufuse {

enum class Act { none, relu, softmax };
enum class Cell { gru, lstm };

template <class S>
Tensor<S> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                         Rng& rng) {
  Tensor<S> t(shape);
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(rng.uniform(-s, s));
  return t;
}

template <class S>
struct DenseLayer {
  std::size_t W = 0, b = 0;
  std::size_t in = 0, out = 0;

  static DenseLayer create(ParamStore<S>& ps, const std::string& prefix,
                           std::size_t in, std::size_t out, Rng& rng) {
    DenseLayer d;
    d.in = in;
    d.out = out;
    d.W = ps.add(prefix + ".W", glorot_uniform<S>({in, out}, in, out, rng));
    d.b = ps.add(prefix + ".b", Tensor<S>({out}));
    return d;
  }

  // x: ... x in, affine along the trailing axis, leading axes preserved
  Var apply(Graph<S>& g, Var x, Act act = Act::none) const {
    const Tensor<S>& X = g.val(x);
    if (X.cols() != in)
      throw ShapeError("dense: trailing extent " + shape_str(X.shape()) +
                       " does not match in=" + std::to_string(in));
    Shape out_shape = X.shape();
    out_shape.back() = out;
    Var flat = g.reshape(x, {X.rows(), in});
    Var y = g.add_rowvec(g.matmul(flat, g.param(W)), g.param(b));
    if (act == Act::relu) y = g.relu_(y);
    if (act == Act::softmax) y = g.softmax_rows(y);
    return g.reshape(y, out_shape);
  }
};

// ids: B x L2 -> (B*L2) x width rows (batch-major); PAD rows are zero and
// receive no gradient.
template <class S>
Var embed_lookup(Graph<S>& g, std::size_t table_param, const IntMat& ids,
                 std::int32_t pad_id) {
  std::vector<std::int32_t> flat(ids.data.begin(), ids.data.end());
  return g.gather_rows(g.param(table_param), flat, pad_id);
}

// One direction of a recurrent encoder. Gate blocks are stored fused:
// GRU W: in x 3H, U: H x 3H, b: 3H with column order [update z | reset r |
// candidate]; LSTM W: in x 4H with order [input | forget | cell | output].
template <class S>
struct RnnDir {
  std::size_t W = 0, U = 0, b = 0;
  std::size_t in = 0, hidden = 0;
  Cell cell = Cell::gru;

  static RnnDir create(ParamStore<S>& ps, const std::string& prefix,
                       std::size_t in, std::size_t hidden, Cell cell,
                       Rng& rng) {
    RnnDir r;
    r.in = in;
    r.hidden = hidden;
    r.cell = cell;
    const std::size_t gates = cell == Cell::gru ? 3 : 4;
    r.W = ps.add(prefix + ".W",
                 glorot_uniform<S>({in, gates * hidden}, in, hidden, rng));
    r.U = ps.add(prefix + ".U",
                 glorot_uniform<S>({hidden, gates * hidden}, hidden, hidden, rng));
    r.b = ps.add(prefix + ".b", Tensor<S>({gates * hidden}));
    return r;
  }
};

namespace detail {

// xt: (L2*B) x in time-major. Returns hidden states stacked time-major
// (L2*B) x H, positioned by true timestep regardless of scan direction.
template <class S>
Var rnn_scan(Graph<S>& g, Var xt, std::size_t batch, std::size_t steps,
             const RnnDir<S>& dir, bool reverse) {
  const std::size_t H = dir.hidden;
  Var xw = g.add_rowvec(g.matmul(xt, g.param(dir.W)), g.param(dir.b));
  Var U = g.param(dir.U);

  Var h = g.constant(Tensor<S>({batch, H}));
  Var c{};  // LSTM cell state
  Var u_zr{}, u_cand{};
  if (dir.cell == Cell::gru) {
    u_zr = g.slice_cols(U, 0, 2 * H);
    u_cand = g.slice_cols(U, 2 * H, 3 * H);
  } else {
    c = g.constant(Tensor<S>({batch, H}));
  }

  std::vector<Var> out(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    Var xwt = g.slice_rows(xw, t * batch, (t + 1) * batch);
    if (dir.cell == Cell::gru) {
      // z = sigm(Wz x + Uz h + bz), r = sigm(Wr x + Ur h + br)
      Var zr = g.sigmoid_(
          g.add(g.slice_cols(xwt, 0, 2 * H), g.matmul(h, u_zr)));
      Var z = g.slice_cols(zr, 0, H);
      Var r = g.slice_cols(zr, H, 2 * H);
      // cand = tanh(Wc x + Uc (r o h) + bc)
      Var cand = g.tanh_(
          g.add(g.slice_cols(xwt, 2 * H, 3 * H), g.matmul(g.mul(r, h), u_cand)));
      // h = (1-z) o h + z o cand
      h = g.add(g.sub(h, g.mul(z, h)), g.mul(z, cand));
    } else {
      Var pre = g.add(xwt, g.matmul(h, U));
      Var i = g.sigmoid_(g.slice_cols(pre, 0, H));
      Var f = g.sigmoid_(g.slice_cols(pre, H, 2 * H));
      Var cand = g.tanh_(g.slice_cols(pre, 2 * H, 3 * H));
      Var o = g.sigmoid_(g.slice_cols(pre, 3 * H, 4 * H));
      c = g.add(g.mul(f, c), g.mul(i, cand));
      h = g.mul(o, g.tanh_(c));
    }
    out[t] = h;
  }
  return g.concat_rows(out);
}

}  // namespace detail

// Bidirectional encoder: forward scan left-to-right, backward scan
// right-to-left over the full padded window, concatenated per position.
template <class S>
struct BiRnn {
  RnnDir<S> fwd, bwd;

  static BiRnn create(ParamStore<S>& ps, const std::string& prefix,
                      std::size_t in, std::size_t hidden, Cell cell, Rng& rng) {
    BiRnn b;
    b.fwd = RnnDir<S>::create(ps, prefix + ".fwd", in, hidden, cell, rng);
    b.bwd = RnnDir<S>::create(ps, prefix + ".bwd", in, hidden, cell, rng);
    return b;
  }

  // x: (B*L2) x in batch-major -> (B*L2) x 2H batch-major
  Var apply(Graph<S>& g, Var x, std::size_t batch, std::size_t steps) const {
    const Tensor<S>& X = g.val(x);
    if (X.cols() != fwd.in)
      throw ShapeError("birnn: input width " + shape_str(X.shape()) +
                       " does not match in=" + std::to_string(fwd.in));
    Var xt = g.to_time_major(x, batch, steps);
    Var hf = detail::rnn_scan(g, xt, batch, steps, fwd, /*reverse=*/false);
    Var hb = detail::rnn_scan(g, xt, batch, steps, bwd, /*reverse=*/true);
    return g.to_batch_major(g.concat_cols(hf, hb), batch, steps);
  }
};

// Parallel convolution branches, one per filter width, each followed by a
// global max-pool over time; group outputs concatenate to a fixed-width
// sentence vector.
template <class S>
struct ConvEncoder {
  struct Group {
    std::size_t width = 0;
    std::size_t filters = 0;
    std::size_t W = 0, b = 0;
  };
  std::vector<Group> groups;
  std::size_t in_dim = 0;
  Act act = Act::relu;

  static ConvEncoder create(ParamStore<S>& ps, const std::string& prefix,
                            std::size_t in_dim,
                            const std::vector<std::size_t>& widths,
                            std::size_t filters, Rng& rng,
                            Act act = Act::relu) {
    ConvEncoder e;
    e.in_dim = in_dim;
    e.act = act;
    for (std::size_t w : widths) {
      Group grp;
      grp.width = w;
      grp.filters = filters;
      const std::string base = prefix + ".w" + std::to_string(w);
      grp.W = ps.add(base + ".W", glorot_uniform<S>({w * in_dim, filters},
                                                    w * in_dim, filters, rng));
      grp.b = ps.add(base + ".b", Tensor<S>({filters}));
      e.groups.push_back(grp);
    }
    return e;
  }

  std::size_t out_dim() const {
    std::size_t n = 0;
    for (const auto& grp : groups) n += grp.filters;
    return n;
  }

  std::size_t max_width() const {
    std::size_t w = 0;
    for (const auto& grp : groups) w = std::max(w, grp.width);
    return w;
  }

  // x: (B*L2) x in batch-major -> B x out_dim()
  Var apply(Graph<S>& g, Var x, std::size_t batch, std::size_t steps) const {
    if (steps < max_width())
      throw ShapeError("conv_encoder: sequence length " +
                       std::to_string(steps) + " shorter than widest filter " +
                       std::to_string(max_width()));
    Var out{};
    for (const auto& grp : groups) {
      Var win = g.im2col_seq(x, batch, steps, grp.width);
      Var conv = g.add_rowvec(g.matmul(win, g.param(grp.W)), g.param(grp.b));
      if (act == Act::relu) conv = g.relu_(conv);
      Var pooled = g.maxpool_time(conv, batch, steps - grp.width + 1);
      out = out.valid() ? g.concat_cols(out, pooled) : pooled;
    }
    return out;
  }
};

}  // namespace slufuse
