#include "aclstage/nn/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

namespace aclstage::nn {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("convolution stride must be >= 1");
  if (kernel == 0 || kernel > in + 2 * pad) {
    throw ShapeError("kernel extent " + std::to_string(kernel) + " exceeds padded input extent " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

// Thin wrappers over BLAS level 3 with accumulate (beta = 1) semantics.
inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t M, std::size_t N, std::size_t K, const float* A,
                 std::size_t lda, const float* B, std::size_t ldb, float* C, std::size_t ldc) {
  if (M == 0 || N == 0 || K == 0) return;
  cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), 1.0f, A,
              static_cast<int>(lda), B, static_cast<int>(ldb), 1.0f, C, static_cast<int>(ldc));
}

// OpenBLAS 0.3.20 picks a dgemm kernel on AVX-512 hosts that returns wrong
// results for some shapes in every transpose mode. Double precision only
// serves verification, so it uses plain loops that hold on any host.
inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t M, std::size_t N, std::size_t K, const double* A,
                 std::size_t lda, const double* B, std::size_t ldb, double* C, std::size_t ldc) {
  if (M == 0 || N == 0 || K == 0) return;
  thread_local std::vector<double> bt;
  const double* b = B;
  std::size_t ldb_n = ldb;
  if (tb == CblasTrans) {
    bt.resize(K * N);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) bt[k * N + n] = B[n * ldb + k];
    }
    b = bt.data();
    ldb_n = N;
  }
  for (std::size_t m = 0; m < M; ++m) {
    double* c = C + m * ldc;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = ta == CblasTrans ? A[k * lda + m] : A[m * lda + k];
      if (a == 0.0) continue;
      const double* row = b + k * ldb_n;
      for (std::size_t n = 0; n < N; ++n) c[n] += a * row[n];
    }
  }
}

struct ConvPlan {
  std::size_t channels;              // channels of the "image" side
  std::array<std::size_t, 3> image;  // spatial extents of the image side
  std::array<std::size_t, 3> kernel;
  std::array<std::size_t, 3> stride;
  std::array<std::size_t, 3> pad;
  std::array<std::size_t, 3> out;    // spatial extents of the column side

  std::size_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  std::size_t rows() const { return channels * kernel_volume(); }
  std::size_t cols() const { return out[0] * out[1] * out[2]; }
  std::size_t image_size() const { return image[0] * image[1] * image[2]; }
};

// Source index along one axis for output o and kernel tap k, or -1 if the
// tap lands in zero padding.
inline std::ptrdiff_t tap(std::size_t o, std::size_t k, std::size_t stride, std::size_t pad, std::size_t extent) {
  const auto i = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
  return (i >= 0 && i < static_cast<std::ptrdiff_t>(extent)) ? i : -1;
}

// Output rows ("lines") are runs of columns sharing (d, h); work is split
// into chunks of whole lines so the column buffer stays cache-sized.
constexpr std::size_t kChunkFloats = 1 << 16;

std::size_t lines_per_chunk(const ConvPlan& p) {
  const std::size_t per_line = p.rows() * p.out[2];
  return std::max<std::size_t>(1, kChunkFloats / std::max<std::size_t>(1, per_line));
}

// Fills columns of lines [l0, l1) into `col` with row stride (l1-l0)*out_w.
template <typename T>
void im2col_lines(const ConvPlan& p, const T* image, T* col, std::size_t l0, std::size_t l1) {
  const std::size_t ld = (l1 - l0) * p.out[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.channels; ++c) {
    const T* img = image + c * p.image_size();
    for (std::size_t kd = 0; kd < p.kernel[0]; ++kd) {
      for (std::size_t kh = 0; kh < p.kernel[1]; ++kh) {
        for (std::size_t kw = 0; kw < p.kernel[2]; ++kw, ++row) {
          for (std::size_t line = l0; line < l1; ++line) {
            const std::size_t od = line / p.out[1], oh = line % p.out[1];
            T* d = col + row * ld + (line - l0) * p.out[2];
            const auto id = tap(od, kd, p.stride[0], p.pad[0], p.image[0]);
            const auto ih = tap(oh, kh, p.stride[1], p.pad[1], p.image[1]);
            if (id < 0 || ih < 0) {
              std::fill(d, d + p.out[2], T{0});
              continue;
            }
            const T* src =
                img + (static_cast<std::size_t>(id) * p.image[1] + static_cast<std::size_t>(ih)) * p.image[2];
            for (std::size_t ow = 0; ow < p.out[2]; ++ow) {
              const auto iw = tap(ow, kw, p.stride[2], p.pad[2], p.image[2]);
              d[ow] = iw < 0 ? T{0} : src[iw];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_lines_acc(const ConvPlan& p, const T* col, T* image, std::size_t l0, std::size_t l1) {
  const std::size_t ld = (l1 - l0) * p.out[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.channels; ++c) {
    T* img = image + c * p.image_size();
    for (std::size_t kd = 0; kd < p.kernel[0]; ++kd) {
      for (std::size_t kh = 0; kh < p.kernel[1]; ++kh) {
        for (std::size_t kw = 0; kw < p.kernel[2]; ++kw, ++row) {
          for (std::size_t line = l0; line < l1; ++line) {
            const std::size_t od = line / p.out[1], oh = line % p.out[1];
            const auto id = tap(od, kd, p.stride[0], p.pad[0], p.image[0]);
            const auto ih = tap(oh, kh, p.stride[1], p.pad[1], p.image[1]);
            if (id < 0 || ih < 0) continue;
            const T* s = col + row * ld + (line - l0) * p.out[2];
            T* dst = img + (static_cast<std::size_t>(id) * p.image[1] + static_cast<std::size_t>(ih)) * p.image[2];
            for (std::size_t ow = 0; ow < p.out[2]; ++ow) {
              const auto iw = tap(ow, kw, p.stride[2], p.pad[2], p.image[2]);
              if (iw >= 0) dst[iw] += s[ow];
            }
          }
        }
      }
    }
  }
}

// Reused scratch so large volumes do not fault in fresh pages per layer.
template <typename T>
std::vector<T>& scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

std::string shapes_message(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

// Shared implementation of 3D (and, with unit depth, 2D) convolution.
template <typename T>
Var<T> conv_impl(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias,
                 const std::array<std::size_t, 4>& x_shape, const std::array<std::size_t, 5>& k_shape,
                 const Conv3dGeometry& geom, const Shape& out_shape_template, const char* name) {
  const std::size_t c_in = x_shape[0];
  const std::size_t c_out = k_shape[0];
  if (k_shape[1] != c_in) throw ShapeError(shapes_message(name, x->shape(), kernels->shape()));
  if (bias->tensor.size() != c_out) throw ShapeError(shapes_message(name, kernels->shape(), bias->shape()));
  ConvPlan plan;
  plan.channels = c_in;
  plan.image = {x_shape[1], x_shape[2], x_shape[3]};
  plan.kernel = {k_shape[2], k_shape[3], k_shape[4]};
  plan.stride = geom.stride;
  plan.pad = geom.pad;
  for (int a = 0; a < 3; ++a) {
    try {
      plan.out[a] = conv_output_extent(plan.image[a], plan.kernel[a], plan.stride[a], plan.pad[a]);
    } catch (const ShapeError&) {
      throw ShapeError(shapes_message(name, x->shape(), kernels->shape()));
    }
  }
  const std::size_t K = plan.rows();
  const std::size_t N = plan.cols();
  const std::size_t lines = plan.out[0] * plan.out[1];
  const std::size_t step = lines_per_chunk(plan);

  Shape out_shape = out_shape_template;
  out_shape[0] = c_out;
  if (out_shape.size() == 4) {
    out_shape[1] = plan.out[0];
    out_shape[2] = plan.out[1];
    out_shape[3] = plan.out[2];
  } else {
    out_shape[1] = plan.out[1];
    out_shape[2] = plan.out[2];
  }
  Tensor<T> out(out_shape);
  auto y = out.values();
  const auto b = bias->value();
  for (std::size_t co = 0; co < c_out; ++co) std::fill(y.begin() + co * N, y.begin() + (co + 1) * N, b[co]);
  for (std::size_t l0 = 0; l0 < lines; l0 += step) {
    const std::size_t l1 = std::min(lines, l0 + step);
    const std::size_t n0 = l0 * plan.out[2], nc = (l1 - l0) * plan.out[2];
    auto& col = scratch<T>(0, K * nc);
    im2col_lines(plan, x->value().data(), col.data(), l0, l1);
    gemm(CblasNoTrans, CblasNoTrans, c_out, nc, K, kernels->value().data(), K, col.data(), nc, y.data() + n0, N);
  }

  return tape.record(std::move(out), [x, kernels, bias, plan, c_out, K, N, lines, step](const Node<T>& self) {
    const T* dy = self.grad().data();
    auto db = bias->grad();
    for (std::size_t co = 0; co < c_out; ++co) {
      T acc = 0;
      for (std::size_t n = 0; n < N; ++n) acc += dy[co * N + n];
      db[co] += acc;
    }
    for (std::size_t l0 = 0; l0 < lines; l0 += step) {
      const std::size_t l1 = std::min(lines, l0 + step);
      const std::size_t n0 = l0 * plan.out[2], nc = (l1 - l0) * plan.out[2];
      auto& col = scratch<T>(0, K * nc);
      im2col_lines(plan, x->value().data(), col.data(), l0, l1);
      gemm(CblasNoTrans, CblasTrans, c_out, K, nc, dy + n0, N, col.data(), nc, kernels->grad().data(), K);
      auto& dcol = scratch<T>(1, K * nc);
      std::fill(dcol.begin(), dcol.begin() + static_cast<std::ptrdiff_t>(K * nc), T{0});
      gemm(CblasTrans, CblasNoTrans, K, nc, c_out, kernels->value().data(), K, dy + n0, N, dcol.data(), nc);
      col2im_lines_acc(plan, dcol.data(), x->grad().data(), l0, l1);
    }
  });
}

}  // namespace

template <typename T>
Var<T> conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias,
              const Conv3dGeometry& geom) {
  if (x->shape().size() != 4 || kernels->shape().size() != 5) {
    throw ShapeError(shapes_message("conv3d", x->shape(), kernels->shape()));
  }
  const auto& xs = x->shape();
  const auto& ks = kernels->shape();
  return conv_impl(tape, x, kernels, bias, {xs[0], xs[1], xs[2], xs[3]}, {ks[0], ks[1], ks[2], ks[3], ks[4]}, geom,
                   Shape(4), "conv3d");
}

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias,
              const Conv2dGeometry& geom) {
  if (x->shape().size() != 3 || kernels->shape().size() != 4) {
    throw ShapeError(shapes_message("conv2d", x->shape(), kernels->shape()));
  }
  const auto& xs = x->shape();
  const auto& ks = kernels->shape();
  Conv3dGeometry g3;
  g3.stride = {1, geom.stride[0], geom.stride[1]};
  g3.pad = {0, geom.pad[0], geom.pad[1]};
  return conv_impl(tape, x, kernels, bias, {xs[0], 1, xs[1], xs[2]}, {ks[0], ks[1], 1, ks[2], ks[3]}, g3, Shape(3),
                   "conv2d");
}

template <typename T>
Var<T> conv_transpose3d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernels, const Var<T>& bias,
                        const std::array<std::size_t, 3>& stride) {
  const auto& xs = x->shape();
  const auto& ks = kernels->shape();
  if (xs.size() != 4 || ks.size() != 5 || ks[0] != xs[0]) {
    throw ShapeError(shapes_message("conv_transpose3d", xs, ks));
  }
  const std::size_t c_in = xs[0];
  const std::size_t c_out = ks[1];
  if (bias->tensor.size() != c_out) throw ShapeError(shapes_message("conv_transpose3d", ks, bias->shape()));
  // Viewed from the output side this is an ordinary strided convolution
  // whose column matrix has one column per input voxel.
  ConvPlan plan;
  plan.channels = c_out;
  plan.kernel = {ks[2], ks[3], ks[4]};
  plan.stride = stride;
  plan.pad = {0, 0, 0};
  plan.out = {xs[1], xs[2], xs[3]};
  for (int a = 0; a < 3; ++a) {
    if (stride[a] == 0) throw ShapeError("conv_transpose3d: stride must be >= 1");
    plan.image[a] = (plan.out[a] - 1) * stride[a] + plan.kernel[a];
  }
  const std::size_t K = plan.rows();
  const std::size_t N = plan.cols();
  const std::size_t lines = plan.out[0] * plan.out[1];
  const std::size_t step = lines_per_chunk(plan);
  Tensor<T> out(Shape{c_out, plan.image[0], plan.image[1], plan.image[2]});
  auto y = out.values();
  const std::size_t out_n = plan.image_size();
  const auto b = bias->value();
  for (std::size_t co = 0; co < c_out; ++co) std::fill(y.begin() + co * out_n, y.begin() + (co + 1) * out_n, b[co]);
  for (std::size_t l0 = 0; l0 < lines; l0 += step) {
    const std::size_t l1 = std::min(lines, l0 + step);
    const std::size_t n0 = l0 * plan.out[2], nc = (l1 - l0) * plan.out[2];
    auto& col = scratch<T>(0, K * nc);
    std::fill(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(K * nc), T{0});
    gemm(CblasTrans, CblasNoTrans, K, nc, c_in, kernels->value().data(), K, x->value().data() + n0, N, col.data(), nc);
    col2im_lines_acc(plan, col.data(), y.data(), l0, l1);
  }

  return tape.record(std::move(out), [x, kernels, bias, plan, c_in, c_out, K, N, out_n, lines, step](const Node<T>& self) {
    const T* dy = self.grad().data();
    auto db = bias->grad();
    for (std::size_t co = 0; co < c_out; ++co) {
      T acc = 0;
      for (std::size_t n = 0; n < out_n; ++n) acc += dy[co * out_n + n];
      db[co] += acc;
    }
    for (std::size_t l0 = 0; l0 < lines; l0 += step) {
      const std::size_t l1 = std::min(lines, l0 + step);
      const std::size_t n0 = l0 * plan.out[2], nc = (l1 - l0) * plan.out[2];
      auto& gcol = scratch<T>(0, K * nc);
      im2col_lines(plan, dy, gcol.data(), l0, l1);
      gemm(CblasNoTrans, CblasNoTrans, c_in, nc, K, kernels->value().data(), K, gcol.data(), nc,
           x->grad().data() + n0, N);
      gemm(CblasNoTrans, CblasTrans, c_in, K, nc, x->value().data() + n0, N, gcol.data(), nc,
           kernels->grad().data(), K);
    }
  });
}

template <typename T>
Var<T> dense(Tape<T>& tape, const Var<T>& x, const Var<T>& weights, const Var<T>& bias) {
  const auto& ws = weights->shape();
  const std::size_t n = x->tensor.size();
  if (ws.size() != 2 || ws[1] != n || bias->tensor.size() != ws[0] || x->shape().size() != 1) {
    throw ShapeError(shapes_message("dense", x->shape(), ws));
  }
  const std::size_t m = ws[0];
  Tensor<T> out(Shape{m});
  const auto xv = x->value();
  const auto W = weights->value();
  const auto b = bias->value();
  for (std::size_t i = 0; i < m; ++i) {
    T acc = b[i];
    for (std::size_t j = 0; j < n; ++j) acc += W[i * n + j] * xv[j];
    out[i] = acc;
  }
  return tape.record(std::move(out), [x, weights, bias, m, n](const Node<T>& self) {
    const auto dy = self.grad();
    const auto xv = x->value();
    const auto W = weights->value();
    auto dx = x->grad();
    auto dW = weights->grad();
    auto db = bias->grad();
    for (std::size_t i = 0; i < m; ++i) {
      const T g = dy[i];
      db[i] += g;
      for (std::size_t j = 0; j < n; ++j) {
        dW[i * n + j] += g * xv[j];
        dx[j] += W[i * n + j] * g;
      }
    }
  });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x->shape());
  const auto xv = x->value();
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T{0} ? xv[i] : T{0};
  return tape.record(std::move(out), [x](const Node<T>& self) {
    const auto xv = x->value();
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xv[i] > T{0}) dx[i] += dy[i];
    }
  });
}

namespace {

template <typename T>
T stable_sigmoid(T z) {
  if (z >= 0) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

}  // namespace

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x->shape());
  const auto xv = x->value();
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(xv[i]);
  return tape.record(std::move(out), [x](const Node<T>& self) {
    const auto y = self.value();
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> softmax(Tape<T>& tape, const Var<T>& x) {
  const std::size_t k = x->shape().at(0);
  const std::size_t r = x->tensor.size() / k;
  Tensor<T> out(x->shape());
  const auto xv = x->value();
  auto y = out.values();
  for (std::size_t j = 0; j < r; ++j) {
    T mx = xv[j];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, xv[c * r + j]);
    T sum = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const T e = std::exp(xv[c * r + j] - mx);
      y[c * r + j] = e;
      sum += e;
    }
    for (std::size_t c = 0; c < k; ++c) y[c * r + j] /= sum;
  }
  return tape.record(std::move(out), [x, k, r](const Node<T>& self) {
    const auto y = self.value();
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t j = 0; j < r; ++j) {
      T dot = 0;
      for (std::size_t c = 0; c < k; ++c) dot += dy[c * r + j] * y[c * r + j];
      for (std::size_t c = 0; c < k; ++c) dx[c * r + j] += y[c * r + j] * (dy[c * r + j] - dot);
    }
  });
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const auto& as = a->shape();
  const auto& bs = b->shape();
  if (as.size() != bs.size() || as.empty() || !std::equal(as.begin() + 1, as.end(), bs.begin() + 1)) {
    throw ShapeError(shapes_message("concat_channels", as, bs));
  }
  Shape os = as;
  os[0] = as[0] + bs[0];
  Tensor<T> out(os);
  auto y = out.values();
  std::copy(a->value().begin(), a->value().end(), y.begin());
  std::copy(b->value().begin(), b->value().end(), y.begin() + static_cast<std::ptrdiff_t>(a->tensor.size()));
  return tape.record(std::move(out), [a, b](const Node<T>& self) {
    const auto dy = self.grad();
    auto da = a->grad();
    auto db = b->grad();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
    for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[da.size() + i];
  });
}

template <typename T>
Var<T> max_pool(Tape<T>& tape, const Var<T>& x, const std::vector<std::size_t>& window) {
  const auto& xs = x->shape();
  if (xs.size() < 2 || xs.size() > 4 || window.size() != xs.size() - 1) {
    throw ShapeError("max_pool: window " + to_string(window) + " does not match input " + to_string(xs));
  }
  std::array<std::size_t, 3> in{1, 1, 1};
  std::array<std::size_t, 3> win{1, 1, 1};
  const std::size_t spatial = xs.size() - 1;
  for (std::size_t a = 0; a < spatial; ++a) {
    in[3 - spatial + a] = xs[a + 1];
    win[3 - spatial + a] = window[a];
  }
  std::array<std::size_t, 3> od{};
  for (int a = 0; a < 3; ++a) {
    if (win[a] == 0 || win[a] > in[a]) {
      throw ShapeError("max_pool: window " + to_string(window) + " exceeds input " + to_string(xs));
    }
    od[a] = in[a] / win[a];
  }
  const std::size_t c = xs[0];
  Shape os(xs.size());
  os[0] = c;
  for (std::size_t a = 0; a < spatial; ++a) os[a + 1] = od[3 - spatial + a];
  Tensor<T> out(os);
  auto y = out.values();
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
  const auto xv = x->value();
  const std::size_t in_n = in[0] * in[1] * in[2];
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t d = 0; d < od[0]; ++d) {
      for (std::size_t h = 0; h < od[1]; ++h) {
        for (std::size_t w = 0; w < od[2]; ++w, ++o) {
          std::size_t best = 0;
          T best_v = -std::numeric_limits<T>::infinity();
          for (std::size_t i = 0; i < win[0]; ++i) {
            for (std::size_t j = 0; j < win[1]; ++j) {
              for (std::size_t k = 0; k < win[2]; ++k) {
                const std::size_t idx =
                    ch * in_n + ((d * win[0] + i) * in[1] + (h * win[1] + j)) * in[2] + (w * win[2] + k);
                if (xv[idx] > best_v) {
                  best_v = xv[idx];
                  best = idx;
                }
              }
            }
          }
          y[o] = best_v;
          (*argmax)[o] = best;
        }
      }
    }
  }
  return tape.record(std::move(out), [x, argmax](const Node<T>& self) {
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[(*argmax)[i]] += dy[i];
  });
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x) {
  const std::size_t c = x->shape().at(0);
  const std::size_t n = x->tensor.size() / c;
  Tensor<T> out(Shape{c});
  const auto xv = x->value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += xv[ch * n + i];
    out[ch] = acc / static_cast<T>(n);
  }
  return tape.record(std::move(out), [x, c, n](const Node<T>& self) {
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = dy[ch] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) dx[ch * n + i] += g;
    }
  });
}

template <typename T>
Var<T> cross_slice_max(Tape<T>& tape, const Var<T>& x) {
  if (x->shape().size() != 2) throw ShapeError("cross_slice_max expects [slices, channels], got " + to_string(x->shape()));
  const std::size_t s = x->shape()[0];
  const std::size_t c = x->shape()[1];
  Tensor<T> out(Shape{c});
  auto arg = std::make_shared<std::vector<std::size_t>>(c, 0);
  const auto xv = x->value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::size_t best = ch;
    for (std::size_t i = 1; i < s; ++i) {
      if (xv[i * c + ch] > xv[best]) best = i * c + ch;
    }
    out[ch] = xv[best];
    (*arg)[ch] = best;
  }
  return tape.record(std::move(out), [x, arg](const Node<T>& self) {
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t ch = 0; ch < dy.size(); ++ch) dx[(*arg)[ch]] += dy[ch];
  });
}

template <typename T>
Var<T> flatten(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(Shape{x->tensor.size()}, std::vector<T>(x->value().begin(), x->value().end()));
  return tape.record(std::move(out), [x](const Node<T>& self) {
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

template <typename T>
Var<T> select_slice(Tape<T>& tape, const Var<T>& x, std::size_t index) {
  const auto& xs = x->shape();
  if (xs.size() != 4 || index >= xs[3]) {
    throw ShapeError("select_slice: index " + std::to_string(index) + " invalid for " + to_string(xs));
  }
  const std::size_t rows = xs[0] * xs[1] * xs[2];
  const std::size_t width = xs[3];
  Tensor<T> out(Shape{xs[0], xs[1], xs[2]});
  const auto xv = x->value();
  for (std::size_t r = 0; r < rows; ++r) out[r] = xv[r * width + index];
  return tape.record(std::move(out), [x, rows, width, index](const Node<T>& self) {
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t r = 0; r < rows; ++r) dx[r * width + index] += dy[r];
  });
}

template <typename T>
Var<T> stack(Tape<T>& tape, const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("stack of zero tensors");
  const Shape& s0 = xs.front()->shape();
  for (const auto& v : xs) {
    if (v->shape() != s0) throw ShapeError(shapes_message("stack", s0, v->shape()));
  }
  Shape os;
  os.push_back(xs.size());
  os.insert(os.end(), s0.begin(), s0.end());
  Tensor<T> out(os);
  const std::size_t n = shape_size(s0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::copy(xs[i]->value().begin(), xs[i]->value().end(), out.values().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return tape.record(std::move(out), [xs, n](const Node<T>& self) {
    const auto dy = self.grad();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto dx = xs[i]->grad();
      for (std::size_t j = 0; j < n; ++j) dx[j] += dy[i * n + j];
    }
  });
}

template <typename T>
Var<T> binary_probabilities(Tape<T>& tape, const Var<T>& logit) {
  if (logit->tensor.size() != 1) throw ShapeError("binary_probabilities expects a single logit");
  const T p = stable_sigmoid(logit->value()[0]);
  Tensor<T> out(Shape{2}, std::vector<T>{T{1} - p, p});
  return tape.record(std::move(out), [logit, p](const Node<T>& self) {
    const auto dy = self.grad();
    logit->grad()[0] += (dy[1] - dy[0]) * p * (T{1} - p);
  });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->shape() != b->shape()) throw ShapeError(shapes_message("add", a->shape(), b->shape()));
  Tensor<T> out(a->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value()[i] + b->value()[i];
  return tape.record(std::move(out), [a, b](const Node<T>& self) {
    const auto dy = self.grad();
    auto da = a->grad();
    auto db = b->grad();
    for (std::size_t i = 0; i < dy.size(); ++i) {
      da[i] += dy[i];
      db[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T factor) {
  Tensor<T> out(x->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value()[i] * factor;
  return tape.record(std::move(out), [x, factor](const Node<T>& self) {
    const auto dy = self.grad();
    auto dx = x->grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
  });
}

template <typename T>
Var<T> weighted_cross_entropy(Tape<T>& tape, const Var<T>& probs, std::size_t target,
                              const std::vector<double>& class_weights) {
  const std::size_t k = probs->tensor.size();
  if (probs->shape().size() != 1) throw ShapeError("weighted_cross_entropy expects a probability vector");
  if (class_weights.size() != k) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(class_weights.size()) + " weights for " +
                     std::to_string(k) + " classes");
  }
  if (target >= k) {
    throw std::out_of_range("weighted_cross_entropy: target class " + std::to_string(target) + " out of range");
  }
  const auto p = probs->value();
  double total = 0;
  for (auto v : p) total += static_cast<double>(v);
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("weighted_cross_entropy: probabilities sum to " + std::to_string(total));
  }
  const double floor = kProbabilityFloor;
  const double pt = std::max(static_cast<double>(p[target]), floor);
  const double w = class_weights[target];
  Tensor<T> out(Shape{1}, std::vector<T>{static_cast<T>(-w * std::log(pt))});
  return tape.record(std::move(out), [probs, target, w, floor](const Node<T>& self) {
    const T p = probs->value()[target];
    if (static_cast<double>(p) > floor) probs->grad()[target] += self.grad()[0] * static_cast<T>(-w) / p;
  });
}

template <typename T>
Var<T> voxel_weighted_cross_entropy(Tape<T>& tape, const Var<T>& probs, const std::vector<std::uint8_t>& labels,
                                    const std::vector<double>& class_weights) {
  const std::size_t k = probs->shape().at(0);
  const std::size_t n = probs->tensor.size() / k;
  if (labels.size() != n || class_weights.size() != k) {
    throw ShapeError("voxel_weighted_cross_entropy: label count or class weights do not match " +
                     to_string(probs->shape()));
  }
  const auto p = probs->value();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw std::out_of_range("voxel_weighted_cross_entropy: label out of range");
    const double pt = std::max(static_cast<double>(p[labels[i] * n + i]), kProbabilityFloor);
    total -= class_weights[labels[i]] * std::log(pt);
  }
  Tensor<T> out(Shape{1}, std::vector<T>{static_cast<T>(total / static_cast<double>(n))});
  return tape.record(std::move(out), [probs, labels, class_weights, n](const Node<T>& self) {
    const auto p = probs->value();
    auto dp = probs->grad();
    const T g = self.grad()[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = labels[i] * n + i;
      if (static_cast<double>(p[idx]) > kProbabilityFloor) {
        dp[idx] -= g * static_cast<T>(class_weights[labels[i]]) / p[idx];
      }
    }
  });
}

template <typename T>
Var<T> dice_loss(Tape<T>& tape, const Var<T>& probs, const std::vector<std::uint8_t>& labels, double smoothing) {
  const std::size_t k = probs->shape().at(0);
  const std::size_t n = probs->tensor.size() / k;
  if (labels.size() != n) {
    throw ShapeError("dice_loss: " + std::to_string(labels.size()) + " labels for prediction " +
                     to_string(probs->shape()));
  }
  const auto p = probs->value();
  std::vector<double> inter(k, 0.0), psum(k, 0.0), tsum(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const double pv = p[c * n + i];
      psum[c] += pv;
      if (labels[i] == c) {
        inter[c] += pv;
        tsum[c] += 1.0;
      }
    }
  }
  double mean_dice = 0;
  std::vector<double> denom(k);
  for (std::size_t c = 0; c < k; ++c) {
    denom[c] = psum[c] + tsum[c] + smoothing;
    mean_dice += denom[c] > 0 ? (2.0 * inter[c] + smoothing) / denom[c] : 1.0;
  }
  mean_dice /= static_cast<double>(k);
  Tensor<T> out(Shape{1}, std::vector<T>{static_cast<T>(1.0 - mean_dice)});
  return tape.record(std::move(out), [probs, labels, inter, denom, smoothing, k, n](const Node<T>& self) {
    auto dp = probs->grad();
    const double g = static_cast<double>(self.grad()[0]);
    for (std::size_t c = 0; c < k; ++c) {
      if (denom[c] <= 0) continue;
      const double num = 2.0 * inter[c] + smoothing;
      const double base = -g / static_cast<double>(k) / (denom[c] * denom[c]);
      const double d_in = base * (2.0 * denom[c] - num);  // voxel of class c
      const double d_out = base * (-num);                 // voxel of another class
      for (std::size_t i = 0; i < n; ++i) dp[c * n + i] += static_cast<T>(labels[i] == c ? d_in : d_out);
    }
  });
}

#define ACLSTAGE_INSTANTIATE_OPS(T)                                                                           \
  template Var<T> conv3d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Conv3dGeometry&);       \
  template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Conv2dGeometry&);       \
  template Var<T> conv_transpose3d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,                     \
                                   const std::array<std::size_t, 3>&);                                        \
  template Var<T> dense(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> relu(Tape<T>&, const Var<T>&);                                                               \
  template Var<T> sigmoid(Tape<T>&, const Var<T>&);                                                            \
  template Var<T> softmax(Tape<T>&, const Var<T>&);                                                            \
  template Var<T> concat_channels(Tape<T>&, const Var<T>&, const Var<T>&);                                     \
  template Var<T> max_pool(Tape<T>&, const Var<T>&, const std::vector<std::size_t>&);                          \
  template Var<T> global_avg_pool(Tape<T>&, const Var<T>&);                                                    \
  template Var<T> cross_slice_max(Tape<T>&, const Var<T>&);                                                    \
  template Var<T> flatten(Tape<T>&, const Var<T>&);                                                            \
  template Var<T> select_slice(Tape<T>&, const Var<T>&, std::size_t);                                          \
  template Var<T> stack(Tape<T>&, const std::vector<Var<T>>&);                                                 \
  template Var<T> binary_probabilities(Tape<T>&, const Var<T>&);                                               \
  template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                                 \
  template Var<T> scale(Tape<T>&, const Var<T>&, T);                                                           \
  template Var<T> weighted_cross_entropy(Tape<T>&, const Var<T>&, std::size_t, const std::vector<double>&);    \
  template Var<T> voxel_weighted_cross_entropy(Tape<T>&, const Var<T>&, const std::vector<std::uint8_t>&,      \
                                               const std::vector<double>&);                                    \
  template Var<T> dice_loss(Tape<T>&, const Var<T>&, const std::vector<std::uint8_t>&, double);

ACLSTAGE_INSTANTIATE_OPS(float)
ACLSTAGE_INSTANTIATE_OPS(double)

}  // namespace aclstage::nn
