#pragma once

// Central-difference gradient verification. Always run in double: it is the
// 64-bit verification mode, tolerances target float-free arithmetic.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "slufuse/graph.hpp"

namespace slufuse {

struct GradientReport {
  struct PerParam {
    std::string name;
    double max_rel_err;
  };
  std::vector<PerParam> per_param;
  double max_rel_err = 0.0;
  std::string worst_param;
  double step = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// `build` constructs the scalar loss on a fresh graph and must be
// deterministic call-to-call (fix any dropout seeds). Every element of every
// trainable parameter is perturbed by +/-h and the analytic gradient is
// compared against (f(t+h) - f(t-h)) / 2h with
// rel_err = |a - n| / max(1e-8, |a| + |n|).
template <class S, class Builder>
GradientReport grad_check(Builder build, ParamStore<S>& params, double h,
                          double tol) {
  GradientReport report;
  report.step = h;
  report.tolerance = tol;

  params.zero_grads();
  {
    Graph<S> g(&params);
    Var loss = build(g);
    if (!std::isfinite(static_cast<double>(g.val(loss)[0])))
      throw std::runtime_error("grad_check: non-finite loss");
    g.backward(loss);
  }
  std::vector<Tensor<S>> analytic;
  analytic.reserve(params.size());
  for (std::size_t id = 0; id < params.size(); ++id)
    analytic.push_back(params.grad(id));

  auto eval = [&]() -> double {
    Graph<S> g(&params, /*record=*/false);
    double v = static_cast<double>(g.val(build(g))[0]);
    if (!std::isfinite(v))
      throw std::runtime_error("grad_check: non-finite value at perturbed point");
    return v;
  };

  for (std::size_t id = 0; id < params.size(); ++id) {
    if (!params.trainable(id)) continue;
    Tensor<S>& theta = params.value(id);
    double worst = 0.0;
    for (std::size_t e = 0; e < theta.size(); ++e) {
      const S saved = theta[e];
      theta[e] = saved + static_cast<S>(h);
      const double f_plus = eval();
      theta[e] = saved - static_cast<S>(h);
      const double f_minus = eval();
      theta[e] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = static_cast<double>(analytic[id][e]);
      const double rel =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
    report.per_param.push_back({params.name(id), worst});
    if (worst >= report.max_rel_err) {
      report.max_rel_err = worst;
      report.worst_param = params.name(id);
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace slufuse
