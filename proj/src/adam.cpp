#include "matl/adam.hpp"

#include <cmath>

namespace matl {

AdamState::AdamState(Index size, AdamOptions opts)
    : first_moment(static_cast<std::size_t>(size), 0.0),
      second_moment(static_cast<std::size_t>(size), 0.0),
      options(opts) {}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size())
    throw UsageError("adam_step: parameter, gradient and moment lengths differ (" +
                     std::to_string(params.size()) + ", " + std::to_string(grads.size()) + ", " +
                     std::to_string(state.first_moment.size()) + ")");
  const AdamOptions& o = state.options;
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = o.beta1 * m + (1.0 - o.beta1) * grads[i];
    v = o.beta2 * v + (1.0 - o.beta2) * grads[i] * grads[i];
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    params[i] -= o.learning_rate * m_hat / (std::sqrt(v_hat) + o.epsilon);
  }
}

Adam::Adam(std::vector<Tensor*> params, AdamOptions options) : params_(std::move(params)) {
  states_.reserve(params_.size());
  for (Tensor* p : params_) {
    p->set_requires_grad(true);
    states_.emplace_back(p->size(), options);
  }
}

void Adam::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i)
    adam_step(params_[i]->data(), params_[i]->grad(), states_[i]);
}

void Adam::set_learning_rate(double lr) {
  for (auto& s : states_) s.options.learning_rate = lr;
}

}  // namespace matl
