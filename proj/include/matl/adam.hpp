#pragma once

#include "matl/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace matl {

struct AdamOptions {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step_count = 0;
  AdamOptions options;

  AdamState() = default;
  AdamState(Index size, AdamOptions opts);
};

// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

// Adam over a fixed set of parameter tensors, each with its own moments.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamOptions options);

  void zero_grad();
  void step();
  void set_learning_rate(double lr);
  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
};

}  // namespace matl
