#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "aclstage/nn/tensor.hpp"

namespace aclstage::nn {

template <typename T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

// Ordered, named parameter registry. Order is the declaration order and is
// what the optimizer, the weights file and gradient checks iterate over.
template <typename T>
class ParameterSet {
 public:
  Var<T> add(std::string name, Tensor<T> init);

  const std::vector<NamedParameter<T>>& entries() const noexcept { return entries_; }
  std::vector<NamedParameter<T>>& entries() noexcept { return entries_; }
  const NamedParameter<T>* find(const std::string& name) const;

  std::size_t scalar_count() const;
  void zero_grad();

  // Deep copy of all values (gradients reset), used for snapshots.
  std::vector<std::vector<T>> snapshot() const;
  void restore(const std::vector<std::vector<T>>& values);

 private:
  std::vector<NamedParameter<T>> entries_;
};

// Fan-in scaled uniform initialisation, U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

// Copies values across precisions; names and shapes must match.
template <typename To, typename From>
void copy_parameters(const ParameterSet<From>& from, ParameterSet<To>& to);

}  // namespace aclstage::nn
