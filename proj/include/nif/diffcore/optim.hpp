#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nif/diffcore/tensor.hpp"

namespace nif::dc {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Moment accumulators, one pair per parameter in registration order.
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Moments are created on the first call; a later call with a
/// different parameter layout raises ShapeMismatch.
void adam_step(std::span<Parameter* const> params, AdamState& state, double lr);

struct LrSchedule {
  double base_scale = 0.03;
  std::int64_t warmup_steps = 4000;
};

/// base_scale * min(step^-1/2, step * warmup^-3/2): linear warmup to the peak
/// at step == warmup_steps, then inverse-square-root decay.
double lr_at(const LrSchedule& s, std::int64_t step);

}  // namespace nif::dc
