#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "aclstage/nn/tensor.hpp"

namespace aclstage::nn {

struct Conv3dGeometry {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
};

struct Conv2dGeometry {
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> pad{0, 0};
};

// Output extent for one axis; throws ShapeError when the window does not fit.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

// x: [c_in, d, h, w], kernels: [c_out, c_in, kd, kh, kw], bias: [c_out].
template <typename T>
Var<T> conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias,
              const Conv3dGeometry& geom);

// x: [c_in, h, w], kernels: [c_out, c_in, kh, kw], bias: [c_out].
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias,
              const Conv2dGeometry& geom);

// Up-convolution, x: [c_in, d, h, w], kernels: [c_in, c_out, kd, kh, kw],
// output extent (in - 1) * stride + k per axis.
template <typename T>
Var<T> conv_transpose3d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias,
                        const std::array<std::size_t, 3>& stride);

// x: [n], weights: [m, n], bias: [m].
template <typename T>
Var<T> dense(Tape<T>& tape, const Var<T>& x, const Var<T>& weights, const Var<T>& bias);

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x);

// Softmax over axis 0 independently for every trailing position; a rank-1
// input is a single distribution.
template <typename T>
Var<T> softmax(Tape<T>& tape, const Var<T>& x);

// Stacks channels of a then b along axis 0.
template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

// Non-overlapping max pooling over the trailing spatial axes of
// [c, spatial...]; window extent 1 leaves an axis untouched.
template <typename T>
Var<T> max_pool(Tape<T>& tape, const Var<T>& x, const std::vector<std::size_t>& window);

// [c, spatial...] -> [c].
template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x);

// [slices, c] -> [c], elementwise maximum over slices (first index wins ties).
template <typename T>
Var<T> cross_slice_max(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> flatten(Tape<T>& tape, const Var<T>& x);

// [c, d, h, w] -> [c, d, h] taking width index `index` (one sagittal slice).
template <typename T>
Var<T> select_slice(Tape<T>& tape, const Var<T>& x, std::size_t index);

// Equal-shape inputs stacked along a new leading axis.
template <typename T>
Var<T> stack(Tape<T>& tape, const std::vector<Var<T>>& xs);

// [1] logit -> [2] probabilities (1 - sigmoid, sigmoid).
template <typename T>
Var<T> binary_probabilities(Tape<T>& tape, const Var<T>& logit);

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T factor);

inline constexpr double kProbabilityFloor = 1e-12;

// -w[target] * ln(max(p[target], 1e-12)); probs must sum to 1 within 1e-6.
template <typename T>
Var<T> weighted_cross_entropy(Tape<T>& tape, const Var<T>& probs, std::size_t target,
                              const std::vector<double>& class_weights);

// Mean over voxels of the weighted cross entropy; probs: [k, spatial...].
template <typename T>
Var<T> voxel_weighted_cross_entropy(Tape<T>& tape, const Var<T>& probs, const std::vector<std::uint8_t>& labels,
                                    const std::vector<double>& class_weights);

// 1 - mean_c (2 sum p t + s) / (sum p + sum t + s) with one-hot truth.
template <typename T>
Var<T> dice_loss(Tape<T>& tape, const Var<T>& probs, const std::vector<std::uint8_t>& labels,
                 double smoothing = 1.0);

}  // namespace aclstage::nn
