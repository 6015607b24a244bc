#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aclstage/nn/parameters.hpp"

namespace aclstage::nn {

struct AdamConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// Moment accumulators for one parameter block.
template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

// One bias-corrected Adam update of `params` at step `t` (1-based, already
// incremented by the caller).
template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, AdamMoments<T>& moments, const AdamConfig& config,
                 std::size_t t);

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {});

  const AdamConfig& config() const noexcept { return config_; }
  std::size_t step_count() const noexcept { return t_; }

  // Applies one update from the accumulated gradients and increments t.
  void step(ParameterSet<T>& params);

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<AdamMoments<T>> moments_;
};

}  // namespace aclstage::nn
