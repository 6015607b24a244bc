#include "aclstage/nn/parameters.hpp"

#include <cmath>

namespace aclstage::nn {

template <typename T>
Var<T> ParameterSet<T>::add(std::string name, Tensor<T> init) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name " + name);
  auto var = make_leaf(std::move(init));
  entries_.push_back({std::move(name), var});
  return var;
}

template <typename T>
const NamedParameter<T>* ParameterSet<T>::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var->tensor.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) e.var->tensor.zero_grad();
}

template <typename T>
std::vector<std::vector<T>> ParameterSet<T>::snapshot() const {
  std::vector<std::vector<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.var->value().begin(), e.var->value().end());
  return out;
}

template <typename T>
void ParameterSet<T>::restore(const std::vector<std::vector<T>>& values) {
  if (values.size() != entries_.size()) throw ShapeError("parameter snapshot does not match model");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = entries_[i].var->value();
    if (values[i].size() != dst.size()) throw ShapeError("parameter snapshot size mismatch for " + entries_[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
    entries_[i].var->tensor.zero_grad();
  }
}

template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename To, typename From>
void copy_parameters(const ParameterSet<From>& from, ParameterSet<To>& to) {
  if (from.entries().size() != to.entries().size()) throw ShapeError("parameter sets differ in size");
  for (std::size_t i = 0; i < from.entries().size(); ++i) {
    const auto& a = from.entries()[i];
    auto& b = to.entries()[i];
    if (a.name != b.name || a.var->shape() != b.var->shape()) {
      throw ShapeError("parameter mismatch: " + a.name + " vs " + b.name);
    }
    auto src = a.var->value();
    auto dst = b.var->value();
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<To>(src[j]);
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template Tensor<float> he_uniform<float>(Shape, std::size_t, std::mt19937_64&);
template Tensor<double> he_uniform<double>(Shape, std::size_t, std::mt19937_64&);
template void copy_parameters<float, double>(const ParameterSet<double>&, ParameterSet<float>&);
template void copy_parameters<double, float>(const ParameterSet<float>&, ParameterSet<double>&);
template void copy_parameters<float, float>(const ParameterSet<float>&, ParameterSet<float>&);
template void copy_parameters<double, double>(const ParameterSet<double>&, ParameterSet<double>&);

}  // namespace aclstage::nn
