#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nif/diffcore/kernels.hpp"

namespace nif::testing {

using DVar = dc::BasicVar<double>;
using DTape = dc::BasicTape<double>;
using DTensor = dc::BasicTensor<double>;
using DParam = dc::BasicParameter<double>;

using LossFn = std::function<DVar(DTape&, const std::vector<DVar>&)>;

// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
// turning rounding noise into large ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline DTensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  DTensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline double evaluate(std::vector<DParam>& params, const LossFn& fn) {
  DTape tape(false);
  std::vector<DVar> vars;
  for (auto& p : params) vars.push_back(tape.constant(p.value));
  return fn(tape, vars).value()[0];
}

/// Worst relative error between reverse-mode gradients and central
/// differences over every input element.
inline double max_gradient_error(std::vector<DParam>& params, const LossFn& fn, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  {
    DTape tape(true);
    std::vector<DVar> vars;
    for (auto& p : params) vars.push_back(tape.param(p));
    tape.backward(fn(tape, vars));
  }
  double worst = 0;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = evaluate(params, fn);
      p.value[i] = saved - h;
      const double down = evaluate(params, fn);
      p.value[i] = saved;
      worst = std::max(worst, relative_error(p.grad[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

// Contracts a non-scalar output with fixed random weights so every output
// element carries a distinct gradient.
inline DVar project(DVar out, std::mt19937_64& rng) {
  DTape& tape = *out.tape;
  return dc::mean(dc::mul(out, tape.constant(random_tensor(out.value().shape(), rng))));
}

struct KernelCase {
  const char* name;
  // Builds inputs for one random case and the loss over them.
  std::function<std::pair<std::vector<DParam>, LossFn>(std::mt19937_64&)> make;
};

/// Every differentiable kernel with random shapes, as used by the unit tests
/// and the acceptance check.
std::vector<KernelCase> kernel_cases();

/// One random case of the composed training loss in float64: a tiny Field
/// model, a random batch, and `coordinates` parameter entries sampled across
/// all parameters. The target branch is left differentiable so the analytic
/// gradient is the full derivative. Returns the worst relative error.
double loss_total_gradient_error(std::uint64_t seed, int coordinates, double h = 1e-5);

}  // namespace nif::testing
