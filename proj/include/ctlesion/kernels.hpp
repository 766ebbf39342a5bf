#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "ctlesion/tensor.hpp"

namespace ctlesion {

enum class Mode { kTrain, kInfer };
enum class Padding { kValid, kSame };
enum class PoolKind { kMax, kAvg };

struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  Padding padding = Padding::kValid;
  int in_channels = 1;
  int out_channels = 1;
};

struct ConvDims {
  int out_h = 0;
  int out_w = 0;
  int pad_top = 0;
  int pad_left = 0;
};

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline void same_pad(int in, int kernel, int stride, int* out, int* pad_lo) {
  *out = (in + stride - 1) / stride;
  int total = std::max(0, (*out - 1) * stride + kernel - in);
  *pad_lo = total / 2;
}

}  // namespace detail

inline ConvDims conv_output_dims(int h, int w, const ConvSpec& spec) {
  if (spec.kernel_h < 1 || spec.kernel_w < 1 || spec.stride < 1) {
    throw std::invalid_argument("conv2d: kernel and stride must be positive");
  }
  ConvDims d;
  if (spec.padding == Padding::kSame) {
    detail::same_pad(h, spec.kernel_h, spec.stride, &d.out_h, &d.pad_top);
    detail::same_pad(w, spec.kernel_w, spec.stride, &d.out_w, &d.pad_left);
  } else {
    d.out_h = (h - spec.kernel_h) / spec.stride + 1;
    d.out_w = (w - spec.kernel_w) / spec.stride + 1;
  }
  if (d.out_h < 1 || d.out_w < 1) {
    throw std::invalid_argument("conv2d: output spatial dims < 1 for input " + std::to_string(h) +
                                "x" + std::to_string(w) + " with kernel " +
                                std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w) +
                                " stride " + std::to_string(spec.stride));
  }
  return d;
}

namespace detail {

template <typename T>
void check_conv_args(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>* bias,
                     const ConvSpec& spec) {
  if (input.rank() != 4) throw std::invalid_argument("conv2d: input must be rank 4 (NCHW), got " + shape_str(input.shape()));
  if (weights.rank() != 4) throw std::invalid_argument("conv2d: weights must be rank 4 (FCkhkw), got " + shape_str(weights.shape()));
  if (input.dim(1) != weights.dim(1)) {
    throw std::invalid_argument("conv2d: input channel dim (" + std::to_string(input.dim(1)) +
                                ") does not match weight in-channel dim (" + std::to_string(weights.dim(1)) + ")");
  }
  if (weights.dim(1) != spec.in_channels || weights.dim(0) != spec.out_channels ||
      weights.dim(2) != spec.kernel_h || weights.dim(3) != spec.kernel_w) {
    throw std::invalid_argument("conv2d: spec " + std::to_string(spec.out_channels) + "x" +
                                std::to_string(spec.in_channels) + "x" + std::to_string(spec.kernel_h) +
                                "x" + std::to_string(spec.kernel_w) +
                                " inconsistent with weight shape " + shape_str(weights.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != weights.dim(0))) {
    throw std::invalid_argument("conv2d: bias dim must equal out_channels (" +
                                std::to_string(weights.dim(0)) + "), got " + shape_str(bias->shape()));
  }
}

// One sample: gather conv patches into a (C*kh*kw) x (OH*OW) matrix.
template <typename T>
void im2col(const T* x, int c_in, int h, int w, const ConvSpec& spec, const ConvDims& d, T* cols) {
  const int kh = spec.kernel_h, kw = spec.kernel_w, s = spec.stride;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t n_pix = static_cast<std::int64_t>(d.out_h) * d.out_w;
  std::int64_t row = 0;
  for (int c = 0; c < c_in; ++c) {
    const T* xc = x + c * plane;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        T* dst = cols + row * n_pix;
        for (int oi = 0; oi < d.out_h; ++oi) {
          const int ii = oi * s - d.pad_top + ki;
          if (ii < 0 || ii >= h) {
            std::fill(dst, dst + d.out_w, T(0));
            dst += d.out_w;
            continue;
          }
          const T* src_row = xc + static_cast<std::int64_t>(ii) * w;
          for (int oj = 0; oj < d.out_w; ++oj) {
            const int jj = oj * s - d.pad_left + kj;
            *dst++ = (jj < 0 || jj >= w) ? T(0) : src_row[jj];
          }
        }
      }
    }
  }
}

// Scatter-add the column matrix back onto an input-shaped gradient.
template <typename T>
void col2im_accum(const T* cols, int c_in, int h, int w, const ConvSpec& spec, const ConvDims& d,
                  T* gx) {
  const int kh = spec.kernel_h, kw = spec.kernel_w, s = spec.stride;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t n_pix = static_cast<std::int64_t>(d.out_h) * d.out_w;
  std::int64_t row = 0;
  for (int c = 0; c < c_in; ++c) {
    T* gc = gx + c * plane;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const T* src = cols + row * n_pix;
        for (int oi = 0; oi < d.out_h; ++oi) {
          const int ii = oi * s - d.pad_top + ki;
          if (ii < 0 || ii >= h) {
            src += d.out_w;
            continue;
          }
          T* dst_row = gc + static_cast<std::int64_t>(ii) * w;
          for (int oj = 0; oj < d.out_w; ++oj) {
            const int jj = oj * s - d.pad_left + kj;
            if (jj >= 0 && jj < w) dst_row[jj] += src[oj];
          }
          src += d.out_w;
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation with per-output-channel bias. Input NCHW, weights [F,C,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  detail::check_conv_args(input, weights, &bias, spec);
  const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int f = weights.dim(0);
  const ConvDims d = conv_output_dims(h, w, spec);
  const std::int64_t k = static_cast<std::int64_t>(c_in) * spec.kernel_h * spec.kernel_w;
  const std::int64_t n_pix = static_cast<std::int64_t>(d.out_h) * d.out_w;

  Tensor<T> out({n, f, d.out_h, d.out_w});
  detail::ConstMatMap<T> wm(weights.data(), f, k);

#pragma omp parallel
  {
    std::vector<T> cols(static_cast<std::size_t>(k * n_pix));
#pragma omp for
    for (int i = 0; i < n; ++i) {
      detail::im2col(input.data() + static_cast<std::int64_t>(i) * c_in * h * w, c_in, h, w, spec, d,
                     cols.data());
      detail::ConstMatMap<T> cm(cols.data(), k, n_pix);
      detail::MatMap<T> om(out.data() + static_cast<std::int64_t>(i) * f * n_pix, f, n_pix);
      om.noalias() = wm * cm;
      for (int ch = 0; ch < f; ++ch) om.row(ch).array() += bias[ch];
    }
  }
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const Tensor<T>& weights, const ConvSpec& spec) {
  detail::check_conv_args<T>(input, weights, nullptr, spec);
  const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int f = weights.dim(0);
  const ConvDims d = conv_output_dims(h, w, spec);
  if (grad_out.shape() != std::vector<int>{n, f, d.out_h, d.out_w}) {
    throw std::invalid_argument("conv2d_backward: grad shape " + shape_str(grad_out.shape()) +
                                " does not match output shape");
  }
  const std::int64_t k = static_cast<std::int64_t>(c_in) * spec.kernel_h * spec.kernel_w;
  const std::int64_t n_pix = static_cast<std::int64_t>(d.out_h) * d.out_w;

  ConvGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weights.shape()), Tensor<T>({f})};
  detail::ConstMatMap<T> wm(weights.data(), f, k);
  detail::MatMap<T> gwm(g.weights.data(), f, k);

  // per-sample partial weight grads, reduced in sample order below
  std::vector<std::vector<T>> gw_parts(static_cast<std::size_t>(n));

#pragma omp parallel
  {
    std::vector<T> cols(static_cast<std::size_t>(k * n_pix));
    std::vector<T> gcols(static_cast<std::size_t>(k * n_pix));
#pragma omp for
    for (int i = 0; i < n; ++i) {
      const T* xi = input.data() + static_cast<std::int64_t>(i) * c_in * h * w;
      const T* gyi = grad_out.data() + static_cast<std::int64_t>(i) * f * n_pix;
      detail::im2col(xi, c_in, h, w, spec, d, cols.data());
      detail::ConstMatMap<T> cm(cols.data(), k, n_pix);
      detail::ConstMatMap<T> gym(gyi, f, n_pix);

      gw_parts[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(f * k));
      detail::MatMap<T> gwp(gw_parts[static_cast<std::size_t>(i)].data(), f, k);
      gwp.noalias() = gym * cm.transpose();

      detail::MatMap<T> gcm(gcols.data(), k, n_pix);
      gcm.noalias() = wm.transpose() * gym;
      detail::col2im_accum(gcols.data(), c_in, h, w, spec, d,
                           g.input.data() + static_cast<std::int64_t>(i) * c_in * h * w);
    }
  }
  for (int i = 0; i < n; ++i) {
    detail::ConstMatMap<T> gwp(gw_parts[static_cast<std::size_t>(i)].data(), f, k);
    gwm.noalias() += gwp;
  }
  for (int ch = 0; ch < f; ++ch) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* gyi = grad_out.data() + (static_cast<std::int64_t>(i) * f + ch) * n_pix;
      for (std::int64_t p = 0; p < n_pix; ++p) acc += static_cast<double>(gyi[p]);
    }
    g.bias[ch] = static_cast<T>(acc);
  }
  return g;
}

namespace detail {

inline void check_pool_args(int h, int w, PoolKind, int window, int stride, Padding padding) {
  if (window < 1 || stride < 1) throw std::invalid_argument("pool2d: window and stride must be positive");
  if (padding == Padding::kValid && (window > h || window > w)) {
    throw std::invalid_argument("pool2d: window " + std::to_string(window) +
                                " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  }
}

}  // namespace detail

/// Max/avg pooling. Same padding excludes padded cells (avg divides by the
/// count of in-bounds cells; max ignores them).
template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, PoolKind kind, int window, int stride,
                 Padding padding = Padding::kValid) {
  if (input.rank() != 4) throw std::invalid_argument("pool2d: input must be rank 4, got " + shape_str(input.shape()));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  detail::check_pool_args(h, w, kind, window, stride, padding);
  ConvDims d;
  if (padding == Padding::kSame) {
    detail::same_pad(h, window, stride, &d.out_h, &d.pad_top);
    detail::same_pad(w, window, stride, &d.out_w, &d.pad_left);
  } else {
    d.out_h = (h - window) / stride + 1;
    d.out_w = (w - window) / stride + 1;
  }
  Tensor<T> out({n, c, d.out_h, d.out_w});
  const std::int64_t planes = static_cast<std::int64_t>(n) * c;
#pragma omp parallel for
  for (std::int64_t pc = 0; pc < planes; ++pc) {
    const T* xp = input.data() + pc * h * w;
    T* op = out.data() + pc * d.out_h * d.out_w;
    for (int oi = 0; oi < d.out_h; ++oi) {
      for (int oj = 0; oj < d.out_w; ++oj) {
        const int i0 = oi * stride - d.pad_top, j0 = oj * stride - d.pad_left;
        const int i1 = std::max(i0, 0), j1 = std::max(j0, 0);
        const int i2 = std::min(i0 + window, h), j2 = std::min(j0 + window, w);
        if (kind == PoolKind::kMax) {
          T best = xp[static_cast<std::int64_t>(i1) * w + j1];
          for (int ii = i1; ii < i2; ++ii)
            for (int jj = j1; jj < j2; ++jj) best = std::max(best, xp[static_cast<std::int64_t>(ii) * w + jj]);
          op[static_cast<std::int64_t>(oi) * d.out_w + oj] = best;
        } else {
          double acc = 0.0;
          for (int ii = i1; ii < i2; ++ii)
            for (int jj = j1; jj < j2; ++jj) acc += static_cast<double>(xp[static_cast<std::int64_t>(ii) * w + jj]);
          op[static_cast<std::int64_t>(oi) * d.out_w + oj] =
              static_cast<T>(acc / ((i2 - i1) * (j2 - j1)));
        }
      }
    }
  }
  return out;
}

/// Gradient routed to the argmax cell (first hit in scan order on ties) for
/// max pooling, spread uniformly over contributing cells for avg pooling.
template <typename T>
Tensor<T> pool2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, PoolKind kind,
                          int window, int stride, Padding padding = Padding::kValid) {
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  detail::check_pool_args(h, w, kind, window, stride, padding);
  ConvDims d;
  if (padding == Padding::kSame) {
    detail::same_pad(h, window, stride, &d.out_h, &d.pad_top);
    detail::same_pad(w, window, stride, &d.out_w, &d.pad_left);
  } else {
    d.out_h = (h - window) / stride + 1;
    d.out_w = (w - window) / stride + 1;
  }
  if (grad_out.shape() != std::vector<int>{n, c, d.out_h, d.out_w}) {
    throw std::invalid_argument("pool2d_backward: grad shape " + shape_str(grad_out.shape()) +
                                " does not match pooled shape");
  }
  Tensor<T> gx(input.shape());
  const std::int64_t planes = static_cast<std::int64_t>(n) * c;
#pragma omp parallel for
  for (std::int64_t pc = 0; pc < planes; ++pc) {
    const T* xp = input.data() + pc * h * w;
    const T* gp = grad_out.data() + pc * d.out_h * d.out_w;
    T* gxp = gx.data() + pc * h * w;
    for (int oi = 0; oi < d.out_h; ++oi) {
      for (int oj = 0; oj < d.out_w; ++oj) {
        const int i0 = oi * stride - d.pad_top, j0 = oj * stride - d.pad_left;
        const int i1 = std::max(i0, 0), j1 = std::max(j0, 0);
        const int i2 = std::min(i0 + window, h), j2 = std::min(j0 + window, w);
        const T g = gp[static_cast<std::int64_t>(oi) * d.out_w + oj];
        if (kind == PoolKind::kMax) {
          int bi = i1, bj = j1;
          T best = xp[static_cast<std::int64_t>(i1) * w + j1];
          for (int ii = i1; ii < i2; ++ii)
            for (int jj = j1; jj < j2; ++jj) {
              const T v = xp[static_cast<std::int64_t>(ii) * w + jj];
              if (v > best) { best = v; bi = ii; bj = jj; }
            }
          gxp[static_cast<std::int64_t>(bi) * w + bj] += g;
        } else {
          const T share = g / static_cast<T>((i2 - i1) * (j2 - j1));
          for (int ii = i1; ii < i2; ++ii)
            for (int jj = j1; jj < j2; ++jj) gxp[static_cast<std::int64_t>(ii) * w + jj] += share;
        }
      }
    }
  }
  return gx;
}

/// [N,C,H,W] -> [N,C] spatial mean per channel.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  if (input.rank() != 4) throw std::invalid_argument("global_avg_pool: input must be rank 4, got " + shape_str(input.shape()));
  const int n = input.dim(0), c = input.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
  Tensor<T> out({n, c});
  for (std::int64_t pc = 0; pc < static_cast<std::int64_t>(n) * c; ++pc) {
    const T* xp = input.data() + pc * hw;
    double acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(xp[i]);
    out[pc] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const std::vector<int>& in_shape) {
  Tensor<T> gx(in_shape);
  const std::int64_t hw = static_cast<std::int64_t>(in_shape[2]) * in_shape[3];
  for (std::int64_t pc = 0; pc < static_cast<std::int64_t>(in_shape[0]) * in_shape[1]; ++pc) {
    const T share = grad_out[pc] / static_cast<T>(hw);
    T* gp = gx.data() + pc * hw;
    for (std::int64_t i = 0; i < hw; ++i) gp[i] = share;
  }
  return gx;
}

/// Affine map: [N,D] x [D,M] + [M].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (input.rank() != 2 || weights.rank() != 2) {
    throw std::invalid_argument("dense: input and weights must be rank 2");
  }
  if (input.dim(1) != weights.dim(0)) {
    throw std::invalid_argument("dense: inner dims disagree, input " + shape_str(input.shape()) +
                                " vs weights " + shape_str(weights.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(1)) {
    throw std::invalid_argument("dense: bias shape " + shape_str(bias.shape()) +
                                " does not match output width " + std::to_string(weights.dim(1)));
  }
  const int n = input.dim(0), d = input.dim(1), m = weights.dim(1);
  Tensor<T> out({n, m});
  detail::ConstMatMap<T> xm(input.data(), n, d), wm(weights.data(), d, m);
  detail::MatMap<T> om(out.data(), n, m);
  om.noalias() = xm * wm;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(i, j) += bias[j];
  return out;
}

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const Tensor<T>& weights) {
  const int n = input.dim(0), d = input.dim(1), m = weights.dim(1);
  if (grad_out.shape() != std::vector<int>{n, m}) {
    throw std::invalid_argument("dense_backward: grad shape " + shape_str(grad_out.shape()) +
                                " does not match output shape");
  }
  DenseGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weights.shape()), Tensor<T>({m})};
  detail::ConstMatMap<T> xm(input.data(), n, d), wm(weights.data(), d, m), gym(grad_out.data(), n, m);
  detail::MatMap<T> gxm(g.input.data(), n, d), gwm(g.weights.data(), d, m);
  gxm.noalias() = gym * wm.transpose();
  gwm.noalias() = xm.transpose() * gym;
  for (int j = 0; j < m; ++j) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += static_cast<double>(grad_out.at(i, j));
    g.bias[j] = static_cast<T>(acc);
  }
  return g;
}

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.99);
  T eps = T(1e-3);

  explicit BatchNormParams(int channels = 1)
      : gamma({channels}, T(1)), beta({channels}, T(0)), running_mean({channels}, T(0)),
        running_var({channels}, T(1)) {}
};

template <typename T>
struct BatchNormCache {
  Tensor<T> mean;     // batch mean per channel
  Tensor<T> inv_std;  // 1/sqrt(var + eps) per channel
};

/// Train mode normalizes by batch statistics (biased variance) and updates the
/// running buffers; infer mode uses the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormParams<T>& params, Mode mode,
                     BatchNormCache<T>* cache = nullptr) {
  if (input.rank() != 4) throw std::invalid_argument("batch_norm: input must be rank 4, got " + shape_str(input.shape()));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (params.gamma.dim(0) != c) {
    throw std::invalid_argument("batch_norm: params sized for " + std::to_string(params.gamma.dim(0)) +
                                " channels, input has " + std::to_string(c));
  }
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const std::int64_t m = static_cast<std::int64_t>(n) * hw;
  Tensor<T> out(input.shape());
  for (int ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s = 0.0, s2 = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* xp = input.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
          const double v = static_cast<double>(xp[p]);
          s += v;
          s2 += v * v;
        }
      }
      mean = s / static_cast<double>(m);
      var = std::max(0.0, s2 / static_cast<double>(m) - mean * mean);
      const double mom = static_cast<double>(params.momentum);
      params.running_mean[ch] = static_cast<T>(mom * params.running_mean[ch] + (1.0 - mom) * mean);
      params.running_var[ch] = static_cast<T>(mom * params.running_var[ch] + (1.0 - mom) * var);
    } else {
      mean = static_cast<double>(params.running_mean[ch]);
      var = static_cast<double>(params.running_var[ch]);
    }
    const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(params.eps));
    const double g = static_cast<double>(params.gamma[ch]);
    const double b = static_cast<double>(params.beta[ch]);
    for (int i = 0; i < n; ++i) {
      const T* xp = input.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      T* op = out.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        op[p] = static_cast<T>((static_cast<double>(xp[p]) - mean) * inv_std * g + b);
      }
    }
    if (cache) {
      if (cache->mean.size() != c) {
        cache->mean = Tensor<T>({c});
        cache->inv_std = Tensor<T>({c});
      }
      cache->mean[ch] = static_cast<T>(mean);
      cache->inv_std[ch] = static_cast<T>(inv_std);
    }
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Backward through train-mode batch norm (batch statistics participate).
template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                                      const BatchNormParams<T>& params,
                                      const BatchNormCache<T>& cache) {
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const double m = static_cast<double>(static_cast<std::int64_t>(n) * hw);
  BatchNormGrads<T> g{Tensor<T>(input.shape()), Tensor<T>({c}), Tensor<T>({c})};
  for (int ch = 0; ch < c; ++ch) {
    const double mean = static_cast<double>(cache.mean[ch]);
    const double inv_std = static_cast<double>(cache.inv_std[ch]);
    const double gamma = static_cast<double>(params.gamma[ch]);
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* xp = input.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      const T* gp = grad_out.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        const double xhat = (static_cast<double>(xp[p]) - mean) * inv_std;
        sum_gy += static_cast<double>(gp[p]);
        sum_gy_xhat += static_cast<double>(gp[p]) * xhat;
      }
    }
    g.beta[ch] = static_cast<T>(sum_gy);
    g.gamma[ch] = static_cast<T>(sum_gy_xhat);
    for (int i = 0; i < n; ++i) {
      const T* xp = input.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      const T* gp = grad_out.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      T* op = g.input.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        const double xhat = (static_cast<double>(xp[p]) - mean) * inv_std;
        const double gy = static_cast<double>(gp[p]);
        op[p] = static_cast<T>(gamma * inv_std * (gy - sum_gy / m - xhat * sum_gy_xhat / m));
      }
    }
  }
  return g;
}

/// Inverted dropout: kept units are scaled by 1/(1-rate) at train time so
/// inference is the identity. The mask is a function of the seed alone.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, Mode mode, std::uint64_t seed,
                  std::vector<std::uint8_t>* mask_out = nullptr) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (mode == Mode::kInfer || rate == 0.0) {
    if (mask_out) mask_out->assign(static_cast<std::size_t>(input.size()), 1);
    return input;
  }
  Tensor<T> out(input.shape());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  if (mask_out) mask_out->assign(static_cast<std::size_t>(input.size()), 0);
  for (std::int64_t i = 0; i < input.size(); ++i) {
    if (uni(rng) >= rate) {
      out[i] = input[i] * scale;
      if (mask_out) (*mask_out)[static_cast<std::size_t>(i)] = 1;
    }
  }
  return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, double rate,
                           const std::vector<std::uint8_t>& mask) {
  Tensor<T> gx(grad_out.shape());
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::int64_t i = 0; i < grad_out.size(); ++i) {
    gx[i] = mask[static_cast<std::size_t>(i)] ? grad_out[i] * scale : T(0);
  }
  return gx;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::int64_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  Tensor<T> gx(input.shape());
  for (std::int64_t i = 0; i < input.size(); ++i) gx[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return gx;
}

/// Row softmax with max subtraction. [N,K] -> [N,K].
template <typename T>
Tensor<T> softmax(const Tensor<T>& input) {
  if (input.rank() != 2) throw std::invalid_argument("softmax: input must be rank 2, got " + shape_str(input.shape()));
  const int n = input.dim(0), k = input.dim(1);
  Tensor<T> out(input.shape());
  for (int i = 0; i < n; ++i) {
    T mx = input.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, input.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      const double e = std::exp(static_cast<double>(input.at(i, j) - mx));
      out.at(i, j) = static_cast<T>(e);
      sum += e;
    }
    for (int j = 0; j < k; ++j) out.at(i, j) = static_cast<T>(static_cast<double>(out.at(i, j)) / sum);
  }
  return out;
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;  // d(loss)/d(logits), already divided by batch size
};

/// Label-smoothed cross entropy from logits. Targets are
/// (1-eps)*onehot + eps/K; returns the batch-mean loss.
template <typename T>
LossResult<T> smoothed_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                                     double eps) {
  if (logits.rank() != 2) throw std::invalid_argument("smoothed_cross_entropy: logits must be rank 2");
  if (eps < 0.0 || eps >= 1.0) {
    throw std::invalid_argument("smoothed_cross_entropy: epsilon must be in [0,1), got " + std::to_string(eps));
  }
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("smoothed_cross_entropy: expected " + std::to_string(n) + " labels, got " +
                                std::to_string(labels.size()));
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= k) {
      throw std::invalid_argument("smoothed_cross_entropy: label index " + std::to_string(lab) +
                                  " out of range for " + std::to_string(k) + " classes");
    }
  }
  LossResult<T> r;
  r.grad = Tensor<T>(logits.shape());
  const Tensor<T> probs = softmax(logits);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    T mx = logits.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.at(i, j));
    double lse = 0.0;
    for (int j = 0; j < k; ++j) lse += std::exp(static_cast<double>(logits.at(i, j) - mx));
    lse = std::log(lse) + static_cast<double>(mx);
    double row = 0.0;
    for (int j = 0; j < k; ++j) {
      const double target = (1.0 - eps) * (labels[static_cast<std::size_t>(i)] == j ? 1.0 : 0.0) + eps / k;
      row += target * (lse - static_cast<double>(logits.at(i, j)));
      r.grad.at(i, j) = static_cast<T>((static_cast<double>(probs.at(i, j)) - target) / n);
    }
    total += row;
  }
  r.loss = total / n;
  return r;
}

/// Concatenate along the channel axis, argument order preserved.
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Tensor<T>& first = *inputs.front();
  if (first.rank() != 4) throw std::invalid_argument("concat_channels: inputs must be rank 4");
  int total_c = 0;
  for (const Tensor<T>* t : inputs) {
    if (t->rank() != 4 || t->dim(0) != first.dim(0) || t->dim(2) != first.dim(2) ||
        t->dim(3) != first.dim(3)) {
      throw std::invalid_argument("concat_channels: shape " + shape_str(t->shape()) +
                                  " incompatible with " + shape_str(first.shape()));
    }
    total_c += t->dim(1);
  }
  const int n = first.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(first.dim(2)) * first.dim(3);
  Tensor<T> out({n, total_c, first.dim(2), first.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::int64_t c_off = 0;
    for (const Tensor<T>* t : inputs) {
      const std::int64_t len = static_cast<std::int64_t>(t->dim(1)) * hw;
      std::copy_n(t->data() + static_cast<std::int64_t>(i) * len, len,
                  out.data() + (static_cast<std::int64_t>(i) * total_c + c_off) * hw);
      c_off += t->dim(1);
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> concat_channels_backward(const Tensor<T>& grad_out,
                                                const std::vector<int>& channel_counts) {
  const int n = grad_out.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(grad_out.dim(2)) * grad_out.dim(3);
  std::vector<Tensor<T>> grads;
  grads.reserve(channel_counts.size());
  std::int64_t c_off = 0;
  for (int ci : channel_counts) {
    Tensor<T> g({n, ci, grad_out.dim(2), grad_out.dim(3)});
    for (int i = 0; i < n; ++i) {
      std::copy_n(grad_out.data() + (static_cast<std::int64_t>(i) * grad_out.dim(1) + c_off) * hw,
                  static_cast<std::int64_t>(ci) * hw,
                  g.data() + static_cast<std::int64_t>(i) * ci * hw);
    }
    grads.push_back(std::move(g));
    c_off += ci;
  }
  return grads;
}

/// x + scale * fx, identical shapes.
template <typename T>
Tensor<T> add_residual(const Tensor<T>& x, const Tensor<T>& fx, T scale) {
  if (!x.same_shape(fx)) {
    throw std::invalid_argument("add_residual: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(fx.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] + scale * fx[i];
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> add_residual_backward(const Tensor<T>& grad_out, T scale) {
  Tensor<T> gfx(grad_out.shape());
  for (std::int64_t i = 0; i < grad_out.size(); ++i) gfx[i] = scale * grad_out[i];
  return {grad_out, std::move(gfx)};
}

}  // namespace ctlesion
