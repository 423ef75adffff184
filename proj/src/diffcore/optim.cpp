#include "nif/diffcore/optim.hpp"

#include <algorithm>
#include <cmath>

#include "nif/errors.hpp"

namespace nif::dc {

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
  if (state.first.empty()) {
    for (const Parameter* p : params) {
      state.first.emplace_back(p->value.shape());
      state.second.emplace_back(p->value.shape());
    }
  }
  if (state.first.size() != params.size()) throw ShapeMismatch("adam: parameter count changed");
  ++state.step;
  const double b1 = state.config.beta1, b2 = state.config.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double step_size = lr / corr1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.first[i];
    Tensor& v = state.second[i];
    if (!m.same_shape(p.value) || !p.grad.same_shape(p.value)) {
      throw ShapeMismatch("adam: shape mismatch for parameter " + p.name);
    }
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * g * g);
      const double denom = std::sqrt(v[j] / corr2) + state.config.eps;
      p.value[j] -= static_cast<float>(step_size * m[j] / denom);
    }
  }
}

double lr_at(const LrSchedule& s, std::int64_t step) {
  const double st = static_cast<double>(std::max<std::int64_t>(step, 1));
  const double w = static_cast<double>(std::max<std::int64_t>(s.warmup_steps, 1));
  return s.base_scale * std::min(1.0 / std::sqrt(st), st * std::pow(w, -1.5));
}

}  // namespace nif::dc
