#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctlesion/kernels.hpp"
#include "ctlesion/tensor.hpp"

namespace ctlesion {

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;  // null for non-trainable state (running stats)
};

template <typename T>
struct FwdContext {
  Mode mode = Mode::kInfer;
  std::mt19937_64* rng = nullptr;  // required in train mode when dropout is present
};

/// Stateful layer: forward caches whatever backward needs. Training drives
/// forward/backward from a single thread; inference is side-effect free.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual int out_channels(int in_channels) const { return in_channels; }
  // trainable parameters (value+grad) plus persistent buffers (grad == null)
  virtual void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {}
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

namespace detail {
inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}
}  // namespace detail

template <typename T>
class Conv2dLayer final : public Layer<T> {
 public:
  Conv2dLayer(ConvSpec spec, bool use_bias = true)
      : spec_(spec),
        weight_({spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w}),
        grad_weight_(weight_.shape()),
        use_bias_(use_bias),
        bias_({spec.out_channels}),
        grad_bias_({spec.out_channels}) {}

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kTrain) input_ = x;
    return conv2d(x, weight_, bias_, spec_);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    auto g = conv2d_backward(gy, input_, weight_, spec_);
    accumulate(grad_weight_, g.weights);
    if (use_bias_) accumulate(grad_bias_, g.bias);
    return std::move(g.input);
  }

  int out_channels(int) const override { return spec_.out_channels; }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({detail::join_name(prefix, "weight"), &weight_, &grad_weight_});
    if (use_bias_) out.push_back({detail::join_name(prefix, "bias"), &bias_, &grad_bias_});
  }

  Tensor<T>& weight() { return weight_; }
  const ConvSpec& spec() const { return spec_; }

 private:
  static void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  ConvSpec spec_;
  Tensor<T> weight_, grad_weight_;
  bool use_bias_;
  Tensor<T> bias_, grad_bias_;
  Tensor<T> input_;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
 public:
  explicit BatchNormLayer(int channels, T momentum = T(0.99), T eps = T(1e-3))
      : params_(channels), grad_gamma_({channels}), grad_beta_({channels}) {
    params_.momentum = momentum;
    params_.eps = eps;
  }

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kTrain) {
      input_ = x;
      return batch_norm(x, params_, Mode::kTrain, &cache_);
    }
    return batch_norm(x, params_, Mode::kInfer);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    auto g = batch_norm_backward(gy, input_, params_, cache_);
    for (std::int64_t i = 0; i < grad_gamma_.size(); ++i) {
      grad_gamma_[i] += g.gamma[i];
      grad_beta_[i] += g.beta[i];
    }
    return std::move(g.input);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({detail::join_name(prefix, "gamma"), &params_.gamma, &grad_gamma_});
    out.push_back({detail::join_name(prefix, "beta"), &params_.beta, &grad_beta_});
    out.push_back({detail::join_name(prefix, "running_mean"), &params_.running_mean, nullptr});
    out.push_back({detail::join_name(prefix, "running_var"), &params_.running_var, nullptr});
  }

  BatchNormParams<T>& params() { return params_; }

 private:
  BatchNormParams<T> params_;
  Tensor<T> grad_gamma_, grad_beta_;
  BatchNormCache<T> cache_;
  Tensor<T> input_;
};

template <typename T>
class ReluLayer final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kTrain) input_ = x;
    return relu(x);
  }
  Tensor<T> backward(const Tensor<T>& gy) override { return relu_backward(gy, input_); }

 private:
  Tensor<T> input_;
};

template <typename T>
class PoolLayer final : public Layer<T> {
 public:
  PoolLayer(PoolKind kind, int window, int stride, Padding padding = Padding::kValid)
      : kind_(kind), window_(window), stride_(stride), padding_(padding) {}

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kTrain) input_ = x;
    return pool2d(x, kind_, window_, stride_, padding_);
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    return pool2d_backward(gy, input_, kind_, window_, stride_, padding_);
  }

 private:
  PoolKind kind_;
  int window_, stride_;
  Padding padding_;
  Tensor<T> input_;
};

template <typename T>
class GlobalAvgPoolLayer final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kTrain) in_shape_ = x.shape();
    return global_avg_pool(x);
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    return global_avg_pool_backward(gy, in_shape_);
  }

 private:
  std::vector<int> in_shape_;
};

template <typename T>
class DenseLayer final : public Layer<T> {
 public:
  DenseLayer(int in_dim, int out_dim)
      : weight_({in_dim, out_dim}), grad_weight_(weight_.shape()), bias_({out_dim}),
        grad_bias_({out_dim}) {}

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kTrain) input_ = x;
    return dense(x, weight_, bias_);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    auto g = dense_backward(gy, input_, weight_);
    for (std::int64_t i = 0; i < grad_weight_.size(); ++i) grad_weight_[i] += g.weights[i];
    for (std::int64_t i = 0; i < grad_bias_.size(); ++i) grad_bias_[i] += g.bias[i];
    return std::move(g.input);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({detail::join_name(prefix, "weight"), &weight_, &grad_weight_});
    out.push_back({detail::join_name(prefix, "bias"), &bias_, &grad_bias_});
  }

  Tensor<T>& weight() { return weight_; }

 private:
  Tensor<T> weight_, grad_weight_, bias_, grad_bias_;
  Tensor<T> input_;
};

template <typename T>
class DropoutLayer final : public Layer<T> {
 public:
  explicit DropoutLayer(double rate) : rate_(rate) {
    if (rate < 0.0 || rate >= 1.0) {
      throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
  }

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kInfer || rate_ == 0.0) return x;
    if (!ctx.rng) throw std::logic_error("dropout: train-mode forward requires an rng");
    const std::uint64_t seed = (*ctx.rng)();
    return dropout(x, rate_, Mode::kTrain, seed, &mask_);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    if (rate_ == 0.0) return gy;
    return dropout_backward(gy, rate_, mask_);
  }

 private:
  double rate_;
  std::vector<std::uint8_t> mask_;
};

// N,C,H,W -> N,C*H*W
template <typename T>
class FlattenLayer final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (ctx.mode == Mode::kTrain) in_shape_ = x.shape();
    const int n = x.dim(0);
    return Tensor<T>::from_data({n, static_cast<int>(x.size() / n)}, x.vec());
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    return Tensor<T>::from_data(in_shape_, gy.vec());
  }

 private:
  std::vector<int> in_shape_;
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;

  Sequential& add(std::string name, LayerPtr<T> layer) {
    children_.emplace_back(std::move(name), std::move(layer));
    return *this;
  }

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    Tensor<T> cur = x;
    for (auto& [name, layer] : children_) cur = layer->forward(cur, ctx);
    return cur;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> cur = gy;
    for (auto it = children_.rbegin(); it != children_.rend(); ++it) cur = it->second->backward(cur);
    return cur;
  }

  int out_channels(int in_channels) const override {
    int c = in_channels;
    for (const auto& [name, layer] : children_) c = layer->out_channels(c);
    return c;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    for (auto& [name, layer] : children_) layer->collect(detail::join_name(prefix, name), out);
  }

  bool empty() const { return children_.empty(); }

 private:
  std::vector<std::pair<std::string, LayerPtr<T>>> children_;
};

/// Runs every branch on the same input and concatenates along channels.
template <typename T>
class ConcatBranches final : public Layer<T> {
 public:
  ConcatBranches& add(std::string name, LayerPtr<T> branch) {
    branches_.emplace_back(std::move(name), std::move(branch));
    return *this;
  }

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    std::vector<Tensor<T>> outs;
    outs.reserve(branches_.size());
    if (ctx.mode == Mode::kTrain) channel_counts_.clear();
    for (auto& [name, branch] : branches_) {
      outs.push_back(branch->forward(x, ctx));
      if (ctx.mode == Mode::kTrain) channel_counts_.push_back(outs.back().dim(1));
    }
    std::vector<const Tensor<T>*> ptrs;
    for (const auto& t : outs) ptrs.push_back(&t);
    return concat_channels(ptrs);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    auto parts = concat_channels_backward(gy, channel_counts_);
    Tensor<T> gx;
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      Tensor<T> g = branches_[i].second->backward(parts[i]);
      if (gx.empty()) {
        gx = std::move(g);
      } else {
        for (std::int64_t j = 0; j < gx.size(); ++j) gx[j] += g[j];
      }
    }
    return gx;
  }

  int out_channels(int in_channels) const override {
    int total = 0;
    for (const auto& [name, branch] : branches_) total += branch->out_channels(in_channels);
    return total;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    for (auto& [name, branch] : branches_) branch->collect(detail::join_name(prefix, name), out);
  }

 private:
  std::vector<std::pair<std::string, LayerPtr<T>>> branches_;
  std::vector<int> channel_counts_;
};

/// y = proj(x) + scale * inner(x); proj is identity when channel counts match.
template <typename T>
class ResidualLayer final : public Layer<T> {
 public:
  ResidualLayer(LayerPtr<T> inner, LayerPtr<T> projection, T scale)
      : inner_(std::move(inner)), projection_(std::move(projection)), scale_(scale) {}

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    Tensor<T> shortcut = projection_ ? projection_->forward(x, ctx) : x;
    Tensor<T> fx = inner_->forward(x, ctx);
    return add_residual(shortcut, fx, scale_);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    auto [g_short, g_fx] = add_residual_backward(gy, scale_);
    Tensor<T> gx = inner_->backward(g_fx);
    Tensor<T> g_skip = projection_ ? projection_->backward(g_short) : std::move(g_short);
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g_skip[i];
    return gx;
  }

  int out_channels(int in_channels) const override { return inner_->out_channels(in_channels); }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    inner_->collect(detail::join_name(prefix, "block"), out);
    if (projection_) projection_->collect(detail::join_name(prefix, "proj"), out);
  }

 private:
  LayerPtr<T> inner_;
  LayerPtr<T> projection_;  // may be null
  T scale_;
};

}  // namespace ctlesion
