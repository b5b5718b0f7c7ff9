#pragma once

// Linear-chain CRF: forward-algorithm negative log-likelihood (log space,
// max-shifted) and Viterbi decoding. Path score over the first `length`
// positions of an utterance:
//   score(y) = start[y_0] + sum_t em[t, y_t]
//            + sum_{t>0} trans[y_{t-1}, y_t] + end[y_{T-1}]
// The NLL gradient is the classic forward-backward marginal form, verified
// by the central-difference suite.

#include <cstdint>
#include <string>
#include <vector>

#include "slufuse/graph.hpp"
#include "slufuse/ops.hpp"

namespace slufuse {

template <class S>
struct CrfLayer {
  std::size_t trans = 0, start = 0, end = 0;
  std::size_t num_tags = 0;

  // transition/start/end scores init to zero
  static CrfLayer create(ParamStore<S>& ps, const std::string& prefix,
                         std::size_t num_tags) {
    CrfLayer c;
    c.num_tags = num_tags;
    c.trans = ps.add(prefix + ".trans", Tensor<S>({num_tags, num_tags}));
    c.start = ps.add(prefix + ".start", Tensor<S>({num_tags}));
    c.end = ps.add(prefix + ".end", Tensor<S>({num_tags}));
    return c;
  }
};

namespace detail {

// alphas[t*K+j] = log sum over prefixes ending in tag j at step t
template <class S>
void crf_forward(const S* em, std::size_t stride, const S* trans,
                 const S* start, std::size_t T, std::size_t K, S* alpha) {
  std::vector<S> work(K);
  for (std::size_t j = 0; j < K; ++j) alpha[j] = start[j] + em[j];
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t j = 0; j < K; ++j) {
      for (std::size_t i = 0; i < K; ++i)
        work[i] = alpha[(t - 1) * K + i] + trans[i * K + j];
      alpha[t * K + j] = logsumexp(work.data(), K) + em[t * stride + j];
    }
}

template <class S>
void crf_backward_pass(const S* em, std::size_t stride, const S* trans,
                       const S* end, std::size_t T, std::size_t K, S* beta) {
  std::vector<S> work(K);
  for (std::size_t j = 0; j < K; ++j) beta[(T - 1) * K + j] = end[j];
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j)
        work[j] = trans[i * K + j] + em[(t + 1) * stride + j] +
                  beta[(t + 1) * K + j];
      beta[t * K + i] = logsumexp(work.data(), K);
    }
}

}  // namespace detail

// emissions: (B*L2) x K batch-major; gold: B x L2 CRF tag ids, valid for
// positions < lengths[b]. Returns the batch-mean NLL as a scalar node.
template <class S>
Var crf_nll(Graph<S>& g, Var emissions, const CrfLayer<S>& crf,
            const IntMat& gold, const std::vector<std::int32_t>& lengths,
            std::size_t batch, std::size_t steps) {
  Var trans_v = g.param(crf.trans);
  Var start_v = g.param(crf.start);
  Var end_v = g.param(crf.end);

  const std::size_t K = crf.num_tags;
  const Tensor<S>& EM = g.val(emissions);
  if (EM.cols() != K || EM.rows() != batch * steps)
    throw ShapeError("crf_nll: emissions " + shape_str(EM.shape()) +
                     " do not match batch*steps x " + std::to_string(K));
  if (!EM.all_finite())
    throw std::invalid_argument("crf_nll: non-finite emissions");

  const S* trans = g.val(trans_v).data();
  const S* start = g.val(start_v).data();
  const S* end = g.val(end_v).data();

  std::vector<S> alpha(steps * K);
  S total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t T = static_cast<std::size_t>(lengths[b]);
    if (T == 0 || T > steps)
      throw std::invalid_argument("crf_nll: utterance length " +
                                  std::to_string(lengths[b]) +
                                  " outside [1," + std::to_string(steps) + "]");
    const S* em = EM.data() + b * steps * K;
    detail::crf_forward(em, K, trans, start, T, K, alpha.data());
    std::vector<S> last(K);
    for (std::size_t j = 0; j < K; ++j)
      last[j] = alpha[(T - 1) * K + j] + end[j];
    const S log_z = logsumexp(last.data(), K);

    S score = start[gold.at(b, 0)] + em[gold.at(b, 0)];
    for (std::size_t t = 1; t < T; ++t) {
      const std::int32_t prev = gold.at(b, t - 1), cur = gold.at(b, t);
      if (cur < 0 || static_cast<std::size_t>(cur) >= K)
        throw std::invalid_argument("crf_nll: gold tag " + std::to_string(cur) +
                                    " invalid inside length");
      score += trans[prev * K + cur] + em[t * K + cur];
    }
    score += end[gold.at(b, T - 1)];
    total += log_z - score;
  }
  const S mean_nll = total / static_cast<S>(batch);

  Var v = g.custom_node(Tensor<S>({1, 1}, {mean_nll}),
                        g.needs(emissions) || g.needs(trans_v) ||
                            g.needs(start_v) || g.needs(end_v));
  if (g.recording_at(v)) {
    IntMat gold_c = gold;
    std::vector<std::int32_t> len_c = lengths;
    g.set_pull([&g, v, emissions, trans_v, start_v, end_v, gold_c, len_c,
                batch, steps, K]() {
      const S gs = g.grad(v)[0] / static_cast<S>(batch);
      const Tensor<S>& EM = g.val(emissions);
      const S* trans = g.val(trans_v).data();
      const S* start = g.val(start_v).data();
      const S* end = g.val(end_v).data();

      Tensor<S>* g_em = g.needs(emissions) ? &g.grad(emissions) : nullptr;
      Tensor<S>* g_tr = g.needs(trans_v) ? &g.grad(trans_v) : nullptr;
      Tensor<S>* g_st = g.needs(start_v) ? &g.grad(start_v) : nullptr;
      Tensor<S>* g_en = g.needs(end_v) ? &g.grad(end_v) : nullptr;

      std::vector<S> alpha(steps * K), beta(steps * K);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t T = static_cast<std::size_t>(len_c[b]);
        const S* em = EM.data() + b * steps * K;
        detail::crf_forward(em, K, trans, start, T, K, alpha.data());
        detail::crf_backward_pass(em, K, trans, end, T, K, beta.data());
        std::vector<S> last(K);
        for (std::size_t j = 0; j < K; ++j)
          last[j] = alpha[(T - 1) * K + j] + end[j];
        const S log_z = logsumexp(last.data(), K);

        // unary marginals minus gold counts
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < K; ++j) {
            S m = std::exp(alpha[t * K + j] + beta[t * K + j] - log_z);
            if (gold_c.at(b, t) == static_cast<std::int32_t>(j)) m -= S(1);
            if (g_em) (*g_em)[(b * steps + t) * K + j] += gs * m;
          }
        if (g_st)
          for (std::size_t j = 0; j < K; ++j) {
            S m = std::exp(alpha[j] + beta[j] - log_z);
            if (gold_c.at(b, 0) == static_cast<std::int32_t>(j)) m -= S(1);
            (*g_st)[j] += gs * m;
          }
        if (g_en)
          for (std::size_t j = 0; j < K; ++j) {
            S m = std::exp(alpha[(T - 1) * K + j] + beta[(T - 1) * K + j] -
                           log_z);
            if (gold_c.at(b, T - 1) == static_cast<std::int32_t>(j)) m -= S(1);
            (*g_en)[j] += gs * m;
          }
        if (g_tr)
          for (std::size_t t = 1; t < T; ++t)
            for (std::size_t i = 0; i < K; ++i)
              for (std::size_t j = 0; j < K; ++j) {
                S m = std::exp(alpha[(t - 1) * K + i] + trans[i * K + j] +
                               em[t * K + j] + beta[t * K + j] - log_z);
                if (gold_c.at(b, t - 1) == static_cast<std::int32_t>(i) &&
                    gold_c.at(b, t) == static_cast<std::int32_t>(j))
                  m -= S(1);
                (*g_tr)[i * K + j] += gs * m;
              }
      }
    });
  }
  return v;
}

// Max-score path over the first `length` rows of emissions (T x K). Ties
// break toward the lowest tag id at every argmax.
template <class S>
std::vector<std::int32_t> crf_viterbi(const Tensor<S>& emissions,
                                      std::size_t length,
                                      const Tensor<S>& trans,
                                      const Tensor<S>& start,
                                      const Tensor<S>& end) {
  const std::size_t K = emissions.cols();
  if (length == 0) throw std::invalid_argument("crf_viterbi: length 0");
  if (emissions.rows() < length)
    throw ShapeError("crf_viterbi: emissions " + shape_str(emissions.shape()) +
                     " shorter than length " + std::to_string(length));

  std::vector<S> score(length * K);
  std::vector<std::int32_t> back((length > 1 ? length - 1 : 0) * K);
  for (std::size_t j = 0; j < K; ++j) score[j] = start[j] + emissions[j];
  for (std::size_t t = 1; t < length; ++t)
    for (std::size_t j = 0; j < K; ++j) {
      S best = score[(t - 1) * K] + trans[j];
      std::int32_t arg = 0;
      for (std::size_t i = 1; i < K; ++i) {
        const S cand = score[(t - 1) * K + i] + trans[i * K + j];
        if (cand > best) {  // strict: first (lowest) index wins ties
          best = cand;
          arg = static_cast<std::int32_t>(i);
        }
      }
      score[t * K + j] = best + emissions.at(t, j);
      back[(t - 1) * K + j] = arg;
    }

  S best = score[(length - 1) * K] + end[0];
  std::int32_t arg = 0;
  for (std::size_t j = 1; j < K; ++j) {
    const S cand = score[(length - 1) * K + j] + end[j];
    if (cand > best) {
      best = cand;
      arg = static_cast<std::int32_t>(j);
    }
  }

  std::vector<std::int32_t> path(length);
  path[length - 1] = arg;
  for (std::size_t t = length - 1; t-- > 0;)
    path[t] = back[t * K + path[t + 1]];
  return path;
}

}  // namespace slufuse
