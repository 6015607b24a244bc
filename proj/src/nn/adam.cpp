#include "aclstage/nn/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace aclstage::nn {

void AdamConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("Adam learning rate must be positive");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
    throw std::invalid_argument("Adam betas must lie in (0, 1)");
  }
  if (!(epsilon > 0)) throw std::invalid_argument("Adam epsilon must be positive");
}

template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, AdamMoments<T>& moments, const AdamConfig& config,
                 std::size_t t) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter and gradient sizes differ");
  if (moments.m.size() != params.size()) {
    moments.m.assign(params.size(), T{0});
    moments.v.assign(params.size(), T{0});
  }
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    moments.m[i] = b1 * moments.m[i] + (T{1} - b1) * g;
    moments.v[i] = b2 * moments.v[i] + (T{1} - b2) * g * g;
    const double m_hat = static_cast<double>(moments.m[i]) / c1;
    const double v_hat = static_cast<double>(moments.v[i]) / c2;
    params[i] -= static_cast<T>(config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon));
  }
}

template <typename T>
Adam<T>::Adam(AdamConfig config) : config_(config) {
  config_.validate();
}

template <typename T>
void Adam<T>::step(ParameterSet<T>& params) {
  auto& entries = params.entries();
  if (moments_.empty()) moments_.resize(entries.size());
  if (moments_.size() != entries.size()) throw ShapeError("adam: parameter set changed between steps");
  ++t_;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& node = *entries[i].var;
    adam_update<T>(node.value(), node.grad(), moments_[i], config_, t_);
  }
}

template void adam_update<float>(std::span<float>, std::span<const float>, AdamMoments<float>&, const AdamConfig&,
                                 std::size_t);
template void adam_update<double>(std::span<double>, std::span<const double>, AdamMoments<double>&,
                                  const AdamConfig&, std::size_t);
template class Adam<float>;
template class Adam<double>;

}  // namespace aclstage::nn
