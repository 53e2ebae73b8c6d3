#pragma once

#include <cstdint>
#include <utility>

#include "psyt/tensor.h"

namespace psyt {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

// Per-parameter Adam moments. t counts applied updates.
struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

AdamState make_adam_state(const Shape& shape, const AdamConfig& cfg = {});

// In-place bias-corrected Adam update. Refuses (throws NumericError) when
// grad holds a non-finite value; param and state are left untouched then.
void adam_update(Tensor& param, const Tensor& grad, AdamState& state, double lr);

// Value form of adam_update.
std::pair<Tensor, AdamState> adam_step(Tensor param, const Tensor& grad, AdamState state, double lr);

}  // namespace psyt
