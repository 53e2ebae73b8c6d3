#include "psyt/optim.h"

#include <cmath>
#include <stdexcept>

namespace psyt {

AdamState make_adam_state(const Shape& shape, const AdamConfig& cfg) {
  AdamState s;
  s.m = Tensor(shape);
  s.v = Tensor(shape);
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.epsilon = cfg.epsilon;
  return s;
}

void adam_update(Tensor& param, const Tensor& grad, AdamState& state, double lr) {
  if (!param.same_shape(grad) || !param.same_shape(state.m) || !param.same_shape(state.v)) {
    throw DimensionError("adam: param " + shape_string(param.shape()) + ", grad " + shape_string(grad.shape()) +
                         ", moments " + shape_string(state.m.shape()));
  }
  if (!(lr >= 0.0)) throw std::invalid_argument("adam: learning rate must be non-negative");
  grad.check_finite("adam gradient (update refused)");

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

std::pair<Tensor, AdamState> adam_step(Tensor param, const Tensor& grad, AdamState state, double lr) {
  adam_update(param, grad, state, lr);
  return {std::move(param), std::move(state)};
}

}  // namespace psyt
