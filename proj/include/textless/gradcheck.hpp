#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "textless/autograd.hpp"
#include "textless/random.hpp"

namespace textless {

/// A scalar objective recorded on the given tape.
using ScalarFn = std::function<Var(Tape&)>;

/// Reverse-mode gradients of a rank-0 loss w.r.t. bound tensors. Tensors
/// that never reached the trace get zero gradients.
inline std::vector<Tensor> gradient_of(Tape& tape, const Var& loss, const std::vector<const Tensor*>& params) {
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(tape.grad_of(*p));
  return out;
}

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t max_coords_per_tensor = 0;
  /// Denominator floor for the relative error.
  double abs_floor = 1e-6;
  std::uint64_t seed = 1;
};

/// Worst relative error between central differences and reverse-mode
/// gradients of f over the given (mutable) tensors. Each tensor's
/// requires_grad flag decides whether it is checked.
inline double finite_difference_check(const ScalarFn& f, const std::vector<Tensor*>& params,
                                      const GradCheckOptions& opt = {}) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var loss = f(tape);
    std::vector<const Tensor*> cps(params.begin(), params.end());
    analytic = gradient_of(tape, loss, cps);
  }
  auto eval = [&f] {
    Tape tape(false);
    return f(tape).value().item();
  };
  Rng rng(opt.seed);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    if (!t.requires_grad()) continue;
    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords_per_tensor && coords.size() > opt.max_coords_per_tensor) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opt.max_coords_per_tensor);
    }
    for (auto i : coords) {
      const double orig = t[i];
      t[i] = orig + opt.eps;
      const double up = eval();
      t[i] = orig - opt.eps;
      const double down = eval();
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double exact = analytic[p][i];
      const double denom = std::max({std::abs(numeric), std::abs(exact), opt.abs_floor});
      worst = std::max(worst, std::abs(numeric - exact) / denom);
    }
  }
  return worst;
}

}  // namespace textless
