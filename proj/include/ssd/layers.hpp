#pragma once

// Layer primitives with hand-derived backward passes.
//
// Convolutions are lowered to im2col + GEMM over the whole batch. The
// transposed convolution is the adjoint of conv2d with the same geometry, so
// the three conv kernels below (forward, input gradient, kernel gradient)
// cover both layer types.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ssd/errors.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

/// Which buffers a forward pass may read or mutate.
struct Pass {
  bool batch_stats = true;             // batch norm normalizes by batch statistics
  bool update_running_stats = true;    // batch norm running mean/var are updated
  bool advance_power_iteration = true; // spectral-norm u vectors are updated
};

namespace passes {
inline constexpr Pass train{true, true, true};
// Training statistics but no buffer mutation at all.
inline constexpr Pass frozen{true, false, false};
inline constexpr Pass train_no_advance{true, true, false};
inline constexpr Pass eval{false, false, false};
}  // namespace passes

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// [N, C, P] <-> [C, N, P]
template <typename T>
void swap_leading(const T* src, T* dst, std::size_t a, std::size_t b, std::size_t inner) {
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      const T* s = src + (i * b + j) * inner;
      T* d = dst + (j * a + i) * inner;
      std::copy(s, s + inner, d);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear

/// y = W x + b for a single vector.
template <typename T>
std::vector<T> linear_forward(std::span<const T> x, const Tensor<T>& weights,
                              std::span<const T> bias) {
  require_rank(weights, 2, "linear_forward weights");
  const std::size_t out = weights.dim(0), in = weights.dim(1);
  if (x.size() != in || bias.size() != out)
    throw DimensionError("linear_forward: x has " + std::to_string(x.size()) +
                         " entries, bias " + std::to_string(bias.size()) + ", W is " +
                         shape_string(weights.shape()));
  std::vector<T> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    T acc = bias[o];
    for (std::size_t i = 0; i < in; ++i) acc += weights[o * in + i] * x[i];
    y[o] = acc;
  }
  return y;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out)
      : weight(Shape{out, in}), bias(Shape{out}), in_(in), out_(out) {}

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  /// x: [N, in] -> [N, out]
  Tensor<T> forward(const Tensor<T>& x) {
    require_rank(x, 2, "Linear input");
    if (x.dim(1) != in_)
      throw DimensionError("Linear: expected width " + std::to_string(in_) + ", got " +
                           std::to_string(x.dim(1)));
    input_ = x;
    const std::size_t n = x.dim(0);
    Tensor<T> y(Shape{n, out_});
    detail::MatMap<T> ym(y.data(), n, out_);
    detail::ConstMatMap<T> xm(x.data(), n, in_);
    detail::ConstMatMap<T> wm(weight.value.data(), out_, in_);
    ym.noalias() = xm * wm.transpose();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t o = 0; o < out_; ++o) y[r * out_ + o] += bias.value[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool param_grads = true) {
    const std::size_t n = input_.dim(0);
    if (grad_out.shape() != Shape{n, out_}) throw DimensionError("Linear backward shape");
    detail::ConstMatMap<T> gm(grad_out.data(), n, out_);
    detail::ConstMatMap<T> xm(input_.data(), n, in_);
    detail::ConstMatMap<T> wm(weight.value.data(), out_, in_);
    if (param_grads) {
      detail::MatMap<T> gw(weight.grad.data(), out_, in_);
      gw.noalias() += gm.transpose() * xm;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out_; ++o) bias.grad[o] += grad_out[r * out_ + o];
    }
    Tensor<T> gx(Shape{n, in_});
    detail::MatMap<T> gxm(gx.data(), n, in_);
    gxm.noalias() = gm * wm;
    return gx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------
// Activations

enum class ActivationKind { leaky_relu, relu, tanh, sigmoid };

template <typename T>
struct Activation {
  ActivationKind kind = ActivationKind::relu;
  T slope = T{0};  // leaky_relu only

  static Activation leaky_relu(T s) {
    if (!(s >= T{0} && s < T{1})) throw ArgumentError("leaky_relu slope must lie in [0,1)");
    return {ActivationKind::leaky_relu, s};
  }
  static Activation relu() { return {ActivationKind::relu, T{0}}; }
  static Activation tanh() { return {ActivationKind::tanh, T{0}}; }
  static Activation sigmoid() { return {ActivationKind::sigmoid, T{0}}; }
};

namespace detail {
template <typename T>
T leaky(T x, T slope) {
  return x > T{0} ? x : slope * x;
}
template <typename T>
T sigmoid(T x) {
  // Split by sign so exp never overflows.
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}
}  // namespace detail

template <typename T>
T activate(T x, const Activation<T>& act) {
  switch (act.kind) {
    case ActivationKind::leaky_relu: return detail::leaky(x, act.slope);
    case ActivationKind::relu: return detail::leaky(x, T{0});
    case ActivationKind::tanh: return std::tanh(x);
    case ActivationKind::sigmoid: return detail::sigmoid(x);
  }
  return x;
}

template <typename T>
Tensor<T> apply_activation(const Tensor<T>& x, const Activation<T>& act) {
  Tensor<T> y = x;
  for (auto& v : y.values()) v = activate(v, act);
  return y;
}

/// Elementwise activation that remembers what its backward pass needs.
template <typename T>
class ActivationLayer {
 public:
  ActivationLayer() = default;
  explicit ActivationLayer(Activation<T> act) : act_(act) {}

  const Activation<T>& activation() const { return act_; }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y = apply_activation(x, act_);
    if (act_.kind == ActivationKind::leaky_relu || act_.kind == ActivationKind::relu)
      cache_ = x;
    else
      cache_ = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) const {
    Tensor<T> gx = g;
    const auto& c = cache_;
    switch (act_.kind) {
      case ActivationKind::leaky_relu:
      case ActivationKind::relu: {
        const T slope = act_.kind == ActivationKind::relu ? T{0} : act_.slope;
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (!(c[i] > T{0})) gx[i] *= slope;
        break;
      }
      case ActivationKind::tanh:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= T{1} - c[i] * c[i];
        break;
      case ActivationKind::sigmoid:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= c[i] * (T{1} - c[i]);
        break;
    }
    return gx;
  }

 private:
  Activation<T> act_;
  Tensor<T> cache_;
};

// ---------------------------------------------------------------------------
// Convolutions

struct ConvGeometry {
  std::size_t kernel = 4;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_output_size(std::size_t in, const ConvGeometry& g) {
  if (g.stride == 0 || g.kernel == 0) throw DimensionError("conv: zero stride or kernel");
  if (in + 2 * g.padding < g.kernel)
    throw DimensionError("conv: input " + std::to_string(in) + " too small for kernel " +
                         std::to_string(g.kernel) + " with padding " +
                         std::to_string(g.padding));
  return (in + 2 * g.padding - g.kernel) / g.stride + 1;
}

inline std::size_t conv_transpose_output_size(std::size_t in, const ConvGeometry& g) {
  if (in == 0 || g.stride == 0 || g.kernel == 0)
    throw DimensionError("conv_transpose: empty input or zero stride/kernel");
  const long long out = static_cast<long long>(in - 1) * static_cast<long long>(g.stride) -
                        2 * static_cast<long long>(g.padding) +
                        static_cast<long long>(g.kernel);
  if (out < 1) throw DimensionError("conv_transpose: output size " + std::to_string(out) + " < 1");
  return static_cast<std::size_t>(out);
}

namespace detail {

// x [N, C, H, W] -> col [C*k*k, N*Ho*Wo]
template <typename T>
void im2col(const T* x, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            const ConvGeometry& g, std::size_t ho, std::size_t wo, T* col) {
  const std::size_t k = g.kernel, cols = n * ho * wo;
  const long pad = static_cast<long>(g.padding), stride = static_cast<long>(g.stride);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ci * k + ki) * k + kj) * cols;
        for (std::size_t b = 0; b < n; ++b) {
          const T* plane = x + (b * c + ci) * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
            T* out = row + (b * ho + oy) * wo;
            if (iy < 0 || iy >= static_cast<long>(h)) {
              std::fill(out, out + wo, T{0});
              continue;
            }
            const T* src = plane + iy * static_cast<long>(w);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kj);
              out[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
            }
          }
        }
      }
}

// Adjoint of im2col: accumulates col into x (x must be zeroed by the caller).
template <typename T>
void col2im(const T* col, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            const ConvGeometry& g, std::size_t ho, std::size_t wo, T* x) {
  const std::size_t k = g.kernel, cols = n * ho * wo;
  const long pad = static_cast<long>(g.padding), stride = static_cast<long>(g.stride);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ci * k + ki) * k + kj) * cols;
        for (std::size_t b = 0; b < n; ++b) {
          T* plane = x + (b * c + ci) * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const T* in = row + (b * ho + oy) * wo;
            T* dst = plane + iy * static_cast<long>(w);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kj);
              if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += in[ox];
            }
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation. x [N, Cin, H, W], kernel [Cout, Cin, k, k].
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const ConvGeometry& g) {
  require_rank(x, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0);
  if (kernel.dim(1) != cin || kernel.dim(2) != g.kernel || kernel.dim(3) != g.kernel)
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " does not fit input " + shape_string(x.shape()));
  const std::size_t ho = conv_output_size(h, g), wo = conv_output_size(w, g);
  const std::size_t kk = cin * g.kernel * g.kernel, cols = n * ho * wo;
  std::vector<T> col(kk * cols);
  detail::im2col(x.data(), n, cin, h, w, g, ho, wo, col.data());
  std::vector<T> ymat(cout * cols);
  detail::MatMap<T>(ymat.data(), cout, cols).noalias() =
      detail::ConstMatMap<T>(kernel.data(), cout, kk) *
      detail::ConstMatMap<T>(col.data(), kk, cols);
  Tensor<T> y(Shape{n, cout, ho, wo});
  detail::swap_leading(ymat.data(), y.data(), cout, n, ho * wo);
  return y;
}

/// Gradient of conv2d_forward with respect to its input; equivalently the
/// transposed convolution of `grad_out` producing an h x w map.
template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& kernel,
                                const ConvGeometry& g, std::size_t h, std::size_t w) {
  require_rank(grad_out, 4, "conv2d_backward_input grad");
  require_rank(kernel, 4, "conv2d_backward_input kernel");
  const std::size_t n = grad_out.dim(0), cout = grad_out.dim(1);
  const std::size_t ho = grad_out.dim(2), wo = grad_out.dim(3);
  if (kernel.dim(0) != cout || kernel.dim(2) != g.kernel || kernel.dim(3) != g.kernel)
    throw DimensionError("conv2d_backward_input: kernel " + shape_string(kernel.shape()) +
                         " does not fit gradient " + shape_string(grad_out.shape()));
  if (conv_output_size(h, g) != ho || conv_output_size(w, g) != wo)
    throw DimensionError("conv2d_backward_input: inconsistent geometry");
  const std::size_t cin = kernel.dim(1);
  const std::size_t kk = cin * g.kernel * g.kernel, cols = n * ho * wo;
  std::vector<T> gmat(cout * cols);
  detail::swap_leading(grad_out.data(), gmat.data(), n, cout, ho * wo);
  std::vector<T> col(kk * cols);
  detail::MatMap<T>(col.data(), kk, cols).noalias() =
      detail::ConstMatMap<T>(kernel.data(), cout, kk).transpose() *
      detail::ConstMatMap<T>(gmat.data(), cout, cols);
  Tensor<T> gx(Shape{n, cin, h, w});
  detail::col2im(col.data(), n, cin, h, w, g, ho, wo, gx.data());
  return gx;
}

/// Gradient of conv2d_forward with respect to its kernel.
template <typename T>
Tensor<T> conv2d_backward_kernel(const Tensor<T>& x, const Tensor<T>& grad_out,
                                 const ConvGeometry& g) {
  require_rank(x, 4, "conv2d_backward_kernel input");
  require_rank(grad_out, 4, "conv2d_backward_kernel grad");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = grad_out.dim(1), ho = grad_out.dim(2), wo = grad_out.dim(3);
  if (grad_out.dim(0) != n || conv_output_size(h, g) != ho || conv_output_size(w, g) != wo)
    throw DimensionError("conv2d_backward_kernel: inconsistent shapes");
  const std::size_t kk = cin * g.kernel * g.kernel, cols = n * ho * wo;
  std::vector<T> col(kk * cols);
  detail::im2col(x.data(), n, cin, h, w, g, ho, wo, col.data());
  std::vector<T> gmat(cout * cols);
  detail::swap_leading(grad_out.data(), gmat.data(), n, cout, ho * wo);
  Tensor<T> gk(Shape{cout, cin, g.kernel, g.kernel});
  detail::MatMap<T>(gk.data(), cout, kk).noalias() =
      detail::ConstMatMap<T>(gmat.data(), cout, cols) *
      detail::ConstMatMap<T>(col.data(), kk, cols).transpose();
  return gk;
}

/// Fractionally strided convolution. x [N, Cin, H, W], kernel [Cin, Cout, k, k].
template <typename T>
Tensor<T> conv_transpose2d_forward(const Tensor<T>& x, const Tensor<T>& kernel,
                                   const ConvGeometry& g) {
  require_rank(x, 4, "conv_transpose2d input");
  require_rank(kernel, 4, "conv_transpose2d kernel");
  if (kernel.dim(0) != x.dim(1))
    throw DimensionError("conv_transpose2d: kernel " + shape_string(kernel.shape()) +
                         " does not fit input " + shape_string(x.shape()));
  const std::size_t ho = conv_transpose_output_size(x.dim(2), g);
  const std::size_t wo = conv_transpose_output_size(x.dim(3), g);
  return conv2d_backward_input(x, kernel, g, ho, wo);
}

template <typename T>
Tensor<T> conv_transpose2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& kernel,
                                          const ConvGeometry& g) {
  return conv2d_forward(grad_out, kernel, g);
}

template <typename T>
Tensor<T> conv_transpose2d_backward_kernel(const Tensor<T>& x, const Tensor<T>& grad_out,
                                           const ConvGeometry& g) {
  return conv2d_backward_kernel(grad_out, x, g);
}

// ---------------------------------------------------------------------------
// Spectral normalization

/// Persistent power-iteration state for one weight matrix. `u` is a buffer,
/// never a learnable parameter.
template <typename T>
struct SpectralState {
  Tensor<T> u;
  int n_power_iterations = 1;
  T eps = T(1e-12);

  SpectralState() = default;
  explicit SpectralState(std::size_t out_features) : u(Shape{out_features}) {
    const T e = T{1} / std::sqrt(static_cast<T>(out_features));
    u.fill(e);
  }
};

/// Read-only row-major matrix view used for kernels reshaped to
/// (out_channels) x (in_channels * k * k).
template <typename T>
struct MatrixView {
  const T* data;
  std::size_t rows;
  std::size_t cols;
  T operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

template <typename T>
MatrixView<T> as_matrix(const Tensor<T>& kernel) {
  if (kernel.rank() < 1) throw DimensionError("as_matrix: empty shape");
  const std::size_t rows = kernel.dim(0);
  return {kernel.data(), rows, rows ? kernel.size() / rows : 0};
}

/// Everything one power-iteration step produced; kept for the backward pass.
template <typename T>
struct PowerStep {
  std::vector<T> u_in;   // u the step started from
  std::vector<T> v;      // normalize(W^T u_in)
  std::vector<T> u_out;  // normalize(W v)
  T a_norm = T{0};       // |W^T u_in|
  T sigma = T{0};        // u_out^T W v
  bool degenerate = false;
};

namespace detail {

template <typename T>
PowerStep<T> power_step(const MatrixView<T>& w, std::span<const T> u, T eps) {
  PowerStep<T> s;
  s.u_in.assign(u.begin(), u.end());
  std::vector<double> a(w.cols, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double ur = u[r];
    if (ur == 0.0) continue;
    const T* row = w.data + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) a[c] += ur * double(row[c]);
  }
  double an = 0.0;
  for (double x : a) an += x * x;
  an = std::sqrt(an);
  s.a_norm = static_cast<T>(an);
  s.v.resize(w.cols);
  const double adiv = std::max(an, double(eps));
  for (std::size_t c = 0; c < w.cols; ++c) s.v[c] = static_cast<T>(a[c] / adiv);
  std::vector<double> b(w.rows, 0.0);
  double bn = 0.0;
  for (std::size_t r = 0; r < w.rows; ++r) {
    const T* row = w.data + r * w.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += double(row[c]) * double(s.v[c]);
    b[r] = acc;
    bn += acc * acc;
  }
  bn = std::sqrt(bn);
  if (!(an > double(eps)) || !(bn > double(eps))) {
    s.degenerate = true;
    s.sigma = eps;
    s.u_out = s.u_in;
    return s;
  }
  s.u_out.resize(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) s.u_out[r] = static_cast<T>(b[r] / bn);
  // sigma = u_out^T W v
  double sigma = 0.0;
  for (std::size_t r = 0; r < w.rows; ++r) sigma += double(s.u_out[r]) * b[r];
  s.sigma = static_cast<T>(sigma);
  return s;
}

}  // namespace detail

/// One power-iteration step: v = normalize(W^T u), u' = normalize(W v),
/// sigma = u'^T W v. The state's u becomes u'. A zero matrix yields
/// sigma = eps and leaves u unchanged.
template <typename T>
T power_iteration_step(const MatrixView<T>& w, SpectralState<T>& state) {
  if (state.u.size() != w.rows)
    throw DimensionError("power_iteration_step: u has " + std::to_string(state.u.size()) +
                         " entries, matrix has " + std::to_string(w.rows) + " rows");
  auto step = detail::power_step<T>(w, state.u.span(), state.eps);
  std::copy(step.u_out.begin(), step.u_out.end(), state.u.data());
  return step.sigma;
}

/// Divides a kernel by the estimate of its largest singular value. With
/// `advance` the state's u is updated (training); otherwise it is read only.
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& kernel, SpectralState<T>& state,
                             bool advance = true, T* sigma_out = nullptr) {
  const auto w = as_matrix(kernel);
  if (state.u.size() != w.rows) throw DimensionError("spectral_normalize: u size mismatch");
  std::vector<T> u(state.u.values());
  for (int i = 1; i < state.n_power_iterations; ++i)
    u = detail::power_step<T>(w, u, state.eps).u_out;
  auto step = detail::power_step<T>(w, u, state.eps);
  if (advance) std::copy(step.u_out.begin(), step.u_out.end(), state.u.data());
  if (sigma_out) *sigma_out = step.sigma;
  Tensor<T> out = kernel;
  for (auto& v : out.values()) v /= step.sigma;
  return out;
}

/// Spectral-norm reparameterization of one kernel with an exact backward
/// pass: sigma is differentiated through the final power-iteration step while
/// the starting vector u is held constant. At convergence this reduces to the
/// usual u' v^T term.
template <typename T>
class SpectralNorm {
 public:
  SpectralNorm() = default;
  explicit SpectralNorm(std::size_t out_features) : state(out_features) {}

  Tensor<T> forward(const Tensor<T>& kernel, bool advance) {
    const auto w = as_matrix(kernel);
    std::vector<T> u(state.u.values());
    for (int i = 1; i < state.n_power_iterations; ++i)
      u = detail::power_step<T>(w, u, state.eps).u_out;
    step_ = detail::power_step<T>(w, u, state.eps);
    if (advance) std::copy(step_.u_out.begin(), step_.u_out.end(), state.u.data());
    normalized_ = kernel;
    for (auto& v : normalized_.values()) v /= step_.sigma;
    return normalized_;
  }

  T sigma() const { return step_.sigma; }

  /// grad wrt W_sn -> grad wrt W. `kernel` is the tensor passed to forward.
  Tensor<T> backward(const Tensor<T>& grad_normalized, const Tensor<T>& kernel) const {
    const T sigma = step_.sigma;
    Tensor<T> gw = grad_normalized;
    if (step_.degenerate) {
      for (auto& v : gw.values()) v /= sigma;
      return gw;
    }
    const auto w = as_matrix(kernel);
    const std::size_t rows = w.rows, cols = w.cols;
    double inner = 0.0;  // <G, W_sn>
    for (std::size_t i = 0; i < gw.size(); ++i)
      inner += double(grad_normalized[i]) * double(normalized_[i]);
    // d sigma / dW = u' v^T + u (W^T u' - sigma v)^T / |a|
    std::vector<double> r(cols, 0.0);
    for (std::size_t rr = 0; rr < rows; ++rr) {
      const double uo = step_.u_out[rr];
      for (std::size_t c = 0; c < cols; ++c) r[c] += uo * double(w(rr, c));
    }
    for (std::size_t c = 0; c < cols; ++c)
      r[c] = (r[c] - double(sigma) * double(step_.v[c])) / double(step_.a_norm);
    for (std::size_t rr = 0; rr < rows; ++rr) {
      const double uo = step_.u_out[rr], ui = step_.u_in[rr];
      for (std::size_t c = 0; c < cols; ++c) {
        const double dsig = uo * double(step_.v[c]) + ui * r[c];
        const std::size_t i = rr * cols + c;
        gw[i] = static_cast<T>((double(grad_normalized[i]) - inner * dsig) / double(sigma));
      }
    }
    return gw;
  }

  SpectralState<T> state;

 private:
  PowerStep<T> step_;
  Tensor<T> normalized_;
};

// ---------------------------------------------------------------------------
// Conv layers (no bias terms)

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, ConvGeometry g, bool spectral_norm)
      : weight(Shape{out, in, g.kernel, g.kernel}), geometry_(g) {
    if (spectral_norm) sn_.emplace(out);
  }

  const ConvGeometry& geometry() const { return geometry_; }
  bool spectral_norm() const { return sn_.has_value(); }
  SpectralNorm<T>* spectral() { return sn_ ? &*sn_ : nullptr; }
  const SpectralNorm<T>* spectral() const { return sn_ ? &*sn_ : nullptr; }

  /// The kernel as used by the most recent forward pass.
  const Tensor<T>& effective_kernel() const { return sn_ ? effective_ : weight.value; }

  Tensor<T> forward(const Tensor<T>& x, const Pass& pass) {
    input_ = x;
    if (sn_) effective_ = sn_->forward(weight.value, pass.advance_power_iteration);
    return conv2d_forward(x, effective_kernel(), geometry_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool param_grads = true) {
    if (param_grads) {
      Tensor<T> gk = conv2d_backward_kernel(input_, grad_out, geometry_);
      if (sn_) gk = sn_->backward(gk, weight.value);
      add_into(weight.grad, gk);
    }
    return conv2d_backward_input(grad_out, effective_kernel(), geometry_, input_.dim(2),
                                 input_.dim(3));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
  }
  void collect_buffers(const std::string& prefix, std::vector<BufferRef<T>>& out) {
    if (sn_) out.push_back({prefix + ".sn_u", &sn_->state.u});
  }

  Parameter<T> weight;

 private:
  ConvGeometry geometry_;
  std::optional<SpectralNorm<T>> sn_;
  Tensor<T> effective_;
  Tensor<T> input_;
};

template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in, std::size_t out, ConvGeometry g)
      : weight(Shape{in, out, g.kernel, g.kernel}), geometry_(g) {}

  const ConvGeometry& geometry() const { return geometry_; }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return conv_transpose2d_forward(x, weight.value, geometry_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool param_grads = true) {
    if (param_grads)
      add_into(weight.grad, conv_transpose2d_backward_kernel(input_, grad_out, geometry_));
    return conv_transpose2d_backward_input(grad_out, weight.value, geometry_);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
  }

  Parameter<T> weight;

 private:
  ConvGeometry geometry_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  T momentum = T(0.1);
};

namespace detail {

// Per-channel (or per (n, c) instance) mean and biased variance over `count`
// contiguous-or-strided elements; accumulation in double.
template <typename T>
void moments(const T* x, std::size_t count, double& mean, double& var) {
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) s += x[i];
  mean = s / double(count);
  double q = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = double(x[i]) - mean;
    q += d * d;
  }
  var = q / double(count);
}

// Batch mean and biased variance of one channel of an [N, C, H, W] tensor.
template <typename T>
void channel_moments(const Tensor<T>& x, std::size_t ch, double& mean, double& var) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  double s = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const T* p = x.data() + (b * c + ch) * hw;
    for (std::size_t i = 0; i < hw; ++i) s += p[i];
  }
  const double cnt = double(n * hw);
  mean = s / cnt;
  double q = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const T* p = x.data() + (b * c + ch) * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = double(p[i]) - mean;
      q += d * d;
    }
  }
  var = q / cnt;
}

template <typename T>
void update_running(RunningStats<T>& running, std::size_t ch, double mean, double var,
                    double count) {
  const double m = running.momentum;
  running.mean[ch] = static_cast<T>((1.0 - m) * running.mean[ch] + m * mean);
  running.var[ch] =
      static_cast<T>((1.0 - m) * running.var[ch] + m * var * count / (count - 1.0));
}

}  // namespace detail

/// Functional batch norm. In train mode the running stats are updated with
/// momentum; the running variance uses the unbiased batch estimate while the
/// normalization itself divides by the biased one.
template <typename T>
Tensor<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             RunningStats<T>& running, bool train, T eps = T(1e-5),
                             bool update_running = true) {
  require_rank(x, 4, "batch_norm input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.size() != c || beta.size() != c || running.mean.size() != c ||
      running.var.size() != c)
    throw DimensionError("batch_norm: parameter width does not match channels");
  if (train && n * hw <= 1)
    throw ArgumentError("batch_norm: degenerate statistics, need more than one value per channel");
  Tensor<T> y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (train) {
      detail::channel_moments(x, ch, mean, var);
      if (update_running) detail::update_running(running, ch, mean, var, double(n * hw));
    } else {
      mean = running.mean[ch];
      var = running.var[ch];
    }
    const double inv = 1.0 / std::sqrt(var + double(eps));
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.data() + (b * c + ch) * hw;
      T* q = y.data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i)
        q[i] = static_cast<T>(double(gamma[ch]) * (double(p[i]) - mean) * inv + double(beta[ch]));
    }
  }
  return y;
}

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels, T eps = T(1e-5), T momentum = T(0.1))
      : gamma(Shape{channels}), beta(Shape{channels}), eps_(eps), channels_(channels) {
    gamma.value.fill(T{1});
    running_.mean = Tensor<T>(Shape{channels});
    running_.var = Tensor<T>(Shape{channels}, T{1});
    running_.momentum = momentum;
  }

  std::size_t channels() const { return channels_; }
  RunningStats<T>& running() { return running_; }
  const RunningStats<T>& running() const { return running_; }

  Tensor<T> forward(const Tensor<T>& x, const Pass& pass) {
    require_rank(x, 4, "BatchNorm2d input");
    if (x.dim(1) != channels_) throw DimensionError("BatchNorm2d: channel mismatch");
    batch_stats_ = pass.batch_stats;
    const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3);
    if (batch_stats_ && n * hw <= 1)
      throw ArgumentError("batch_norm: degenerate statistics, need more than one value per channel");
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(channels_, T{0});
    Tensor<T> y(x.shape());
    for (std::size_t ch = 0; ch < channels_; ++ch) {
      double mean, var;
      if (batch_stats_) {
        detail::channel_moments(x, ch, mean, var);
        if (pass.update_running_stats)
          detail::update_running(running_, ch, mean, var, double(n * hw));
      } else {
        mean = running_.mean[ch];
        var = running_.var[ch];
      }
      const double inv = 1.0 / std::sqrt(var + double(eps_));
      inv_std_[ch] = static_cast<T>(inv);
      const double g = gamma.value[ch], bt = beta.value[ch];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * channels_ + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T xh = static_cast<T>((double(x[off + i]) - mean) * inv);
          xhat_[off + i] = xh;
          y[off + i] = static_cast<T>(g * double(xh) + bt);
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out, bool param_grads = true) {
    const std::size_t n = xhat_.dim(0), hw = xhat_.dim(2) * xhat_.dim(3);
    const double cnt = double(n * hw);
    Tensor<T> gx(xhat_.shape());
    for (std::size_t ch = 0; ch < channels_; ++ch) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * channels_ + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sg += grad_out[off + i];
          sgx += double(grad_out[off + i]) * double(xhat_[off + i]);
        }
      }
      if (param_grads) {
        gamma.grad[ch] += static_cast<T>(sgx);
        beta.grad[ch] += static_cast<T>(sg);
      }
      const double scale = double(gamma.value[ch]) * double(inv_std_[ch]);
      const double mg = sg / cnt, mgx = sgx / cnt;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * channels_ + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double g = grad_out[off + i];
          gx[off + i] = static_cast<T>(
              batch_stats_ ? scale * (g - mg - double(xhat_[off + i]) * mgx) : scale * g);
        }
      }
    }
    return gx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
  void collect_buffers(const std::string& prefix, std::vector<BufferRef<T>>& out) {
    out.push_back({prefix + ".running_mean", &running_.mean});
    out.push_back({prefix + ".running_var", &running_.var});
  }

  Parameter<T> gamma;
  Parameter<T> beta;

 private:
  T eps_ = T(1e-5);
  std::size_t channels_ = 0;
  RunningStats<T> running_;
  bool batch_stats_ = true;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

// ---------------------------------------------------------------------------
// Instance statistics and AdaIN

template <typename T>
struct InstanceStats {
  Tensor<T> mean;  // [N, C]
  Tensor<T> var;   // [N, C], biased
};

/// Spatial mean and biased variance per (sample, channel).
template <typename T>
InstanceStats<T> instance_stats(const Tensor<T>& x) {
  require_rank(x, 4, "instance_stats input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw DimensionError("instance_stats: empty spatial extent");
  InstanceStats<T> s{Tensor<T>(Shape{n, c}), Tensor<T>(Shape{n, c})};
  for (std::size_t i = 0; i < n * c; ++i) {
    double m, v;
    detail::moments(x.data() + i * hw, hw, m, v);
    s.mean[i] = static_cast<T>(m);
    s.var[i] = static_cast<T>(v);
  }
  return s;
}

/// Style-conditioned affine over instance-normalized features:
///   AdaIN(x, w) = alpha(w) * (x - mu) / sqrt(var + eps) + beta(w)
/// alpha and beta are linear maps w_dim -> C with bias. The normalization core
/// has no parameters of its own.
template <typename T>
class AdaIN {
 public:
  AdaIN() = default;
  AdaIN(std::size_t w_dim, std::size_t channels, T eps = T(1e-5))
      : alpha(w_dim, channels), beta(w_dim, channels), eps_(eps), channels_(channels) {}

  std::size_t channels() const { return channels_; }
  std::size_t w_dim() const { return alpha.in_features(); }
  T eps() const { return eps_; }

  /// x [N, C, H, W], w [N, w_dim]
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& w) {
    require_rank(x, 4, "AdaIN input");
    require_rank(w, 2, "AdaIN style");
    const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3);
    if (x.dim(1) != channels_)
      throw DimensionError("AdaIN: expected " + std::to_string(channels_) + " channels, got " +
                           std::to_string(x.dim(1)));
    if (w.dim(0) != n || w.dim(1) != w_dim())
      throw DimensionError("AdaIN: style shape " + shape_string(w.shape()) +
                           " does not match batch " + std::to_string(n) + " x " +
                           std::to_string(w_dim()));
    a_ = alpha.forward(w);
    b_ = beta.forward(w);
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(n * channels_, T{0});
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < n * channels_; ++i) {
      double m, v;
      detail::moments(x.data() + i * hw, hw, m, v);
      const double inv = 1.0 / std::sqrt(v + double(eps_));
      inv_std_[i] = static_cast<T>(inv);
      const double sa = a_[i], sb = b_[i];
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t k = i * hw + j;
        const T xh = static_cast<T>((double(x[k]) - m) * inv);
        xhat_[k] = xh;
        y[k] = static_cast<T>(sa * double(xh) + sb);
      }
    }
    return y;
  }

  struct Grads {
    Tensor<T> x;
    Tensor<T> w;
  };

  Grads backward(const Tensor<T>& grad_out, bool param_grads = true) {
    const std::size_t n = xhat_.dim(0), hw = xhat_.dim(2) * xhat_.dim(3);
    Tensor<T> ga(Shape{n, channels_}), gb(Shape{n, channels_});
    Tensor<T> gx(xhat_.shape());
    for (std::size_t i = 0; i < n * channels_; ++i) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t k = i * hw + j;
        sg += grad_out[k];
        sgx += double(grad_out[k]) * double(xhat_[k]);
      }
      ga[i] = static_cast<T>(sgx);
      gb[i] = static_cast<T>(sg);
      // d xhat = alpha * g; instance-norm backward on top.
      const double a = a_[i], inv = inv_std_[i];
      const double mg = a * sg / double(hw), mgx = a * sgx / double(hw);
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t k = i * hw + j;
        gx[k] = static_cast<T>(inv * (a * double(grad_out[k]) - mg - double(xhat_[k]) * mgx));
      }
    }
    Tensor<T> gw = alpha.backward(ga, param_grads);
    add_into(gw, beta.backward(gb, param_grads));
    return {std::move(gx), std::move(gw)};
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    alpha.collect(prefix + ".alpha", out);
    beta.collect(prefix + ".beta", out);
  }

  Linear<T> alpha;
  Linear<T> beta;

 private:
  T eps_ = T(1e-5);
  std::size_t channels_ = 0;
  Tensor<T> a_, b_, xhat_;
  std::vector<T> inv_std_;
};

/// Functional AdaIN for a single style vector shared by the whole batch.
template <typename T>
Tensor<T> adain_forward(const Tensor<T>& x, std::span<const T> w, AdaIN<T>& params) {
  require_rank(x, 4, "adain_forward input");
  if (w.size() != params.w_dim())
    throw DimensionError("adain_forward: style has " + std::to_string(w.size()) +
                         " entries, expected " + std::to_string(params.w_dim()));
  const std::size_t n = x.dim(0);
  Tensor<T> ws(Shape{n, w.size()});
  for (std::size_t b = 0; b < n; ++b) std::copy(w.begin(), w.end(), ws.data() + b * w.size());
  return params.forward(x, ws);
}

}  // namespace ssd
