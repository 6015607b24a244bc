#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aclstage::nn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major array with a gradient slot of the same shape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(checked_size(shape_)), grad_(values_.size()) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != checked_size(shape_)) {
      throw ShapeError("tensor value count " + std::to_string(values_.size()) + " does not match shape " +
                       to_string(shape_));
    }
    grad_.assign(values_.size(), T{0});
  }

  static Tensor filled(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.values_.begin(), t.values_.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }

  T& operator[](std::size_t i) noexcept { return values_[i]; }
  const T& operator[](std::size_t i) const noexcept { return values_[i]; }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }

  void reshape(Shape shape) {
    if (shape_size(shape) != values_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

 private:
  static std::size_t checked_size(const Shape& shape) {
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape));
    }
    return shape_size(shape);
  }

  Shape shape_;
  std::vector<T> values_;
  std::vector<T> grad_;
};

// A value in the computation graph. Leaves (parameters, inputs) outlive a
// tape; interior nodes are created by ops and owned by the tape that
// recorded them.
template <typename T>
struct Node {
  Tensor<T> tensor;
  std::function<void(const Node&)> backward;
  bool leaf = true;

  std::span<T> value() noexcept { return tensor.values(); }
  std::span<const T> value() const noexcept { return tensor.values(); }
  std::span<T> grad() noexcept { return tensor.grad(); }
  std::span<const T> grad() const noexcept { return tensor.grad(); }
  const Shape& shape() const noexcept { return tensor.shape(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_leaf(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->tensor = std::move(value);
  return node;
}

// Records interior nodes in creation order so that reverse iteration is a
// valid topological order for backpropagation.
template <typename T>
class Tape {
 public:
  Var<T> record(Tensor<T> value, std::function<void(const Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->tensor = std::move(value);
    node->backward = std::move(backward);
    node->leaf = false;
    nodes_.push_back(node);
    return node;
  }

  bool empty() const noexcept { return nodes_.empty(); }
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(output)/d(output) = 1 per element.
  void backward(const Var<T>& output) {
    std::vector<T> ones(output ? output->tensor.size() : 0, T{1});
    backward(output, ones);
  }

  // Interior gradients are reset on every call; leaf gradients accumulate.
  void backward(const Var<T>& output, std::span<const T> seed) {
    if (nodes_.empty() || !output) throw StateError("backward called before any forward pass was recorded");
    if (output->leaf) throw StateError("backward output must be produced by a recorded op");
    if (seed.size() != output->tensor.size()) throw ShapeError("backward seed size mismatch");
    for (auto& n : nodes_) n->tensor.zero_grad();
    auto g = output->grad();
    std::copy(seed.begin(), seed.end(), g.begin());
    bool found = false;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (*it == output) found = true;
      if (found && (*it)->backward) (*it)->backward(**it);
    }
    if (!found) throw StateError("backward output was not recorded on this tape");
  }

 private:
  std::vector<Var<T>> nodes_;
};

}  // namespace aclstage::nn
