#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

#include "ctlesion/layers.hpp"

namespace ctlesion {

// Parameter-count bookkeeping for the factorization trade-off: a full n x n
// kernel costs n^2 weights per channel pair, the n x 1 / 1 x n pair costs 2n.
inline std::int64_t conv_param_count(int kernel_h, int kernel_w, int in_c, int out_c) {
  return static_cast<std::int64_t>(kernel_h) * kernel_w * in_c * out_c;
}

inline std::int64_t factorized_param_count(int n, int in_c, int out_c) {
  return 2LL * n * in_c * out_c;
}

/// Conv (no bias) -> batch norm -> ReLU, the unit every block is made of.
template <typename T>
LayerPtr<T> make_conv_bn_relu(int in_c, int out_c, int kh, int kw, int stride = 1,
                              Padding padding = Padding::kSame) {
  auto seq = std::make_unique<Sequential<T>>();
  seq->add("conv", std::make_unique<Conv2dLayer<T>>(
                       ConvSpec{kh, kw, stride, padding, in_c, out_c}, /*use_bias=*/false));
  seq->add("bn", std::make_unique<BatchNormLayer<T>>(out_c));
  seq->add("relu", std::make_unique<ReluLayer<T>>());
  return seq;
}

/// n x 1 followed by 1 x n, same padding; receptive field n x n.
template <typename T>
LayerPtr<T> make_factorized_conv(int in_c, int out_c, int n) {
  if (n < 3 || n % 2 == 0) {
    throw std::invalid_argument("factorized conv: n must be odd and >= 3, got " + std::to_string(n));
  }
  auto seq = std::make_unique<Sequential<T>>();
  seq->add("nx1", make_conv_bn_relu<T>(in_c, out_c, n, 1));
  seq->add("1xn", make_conv_bn_relu<T>(out_c, out_c, 1, n));
  return seq;
}

template <typename T>
struct Block {
  LayerPtr<T> layer;
  int out_channels = 0;
};

struct InceptionAConfig {
  int b1 = 16;          // 1x1
  int b2_reduce = 12;   // 1x1 -> 3x3
  int b2_out = 16;
  int b3_reduce = 12;   // 1x1 -> 3x3 -> 3x3
  int b3_mid = 16;
  int b3_out = 24;
  int pool_proj = 8;    // avg pool -> 1x1
};

/// Parallel 1x1 / 3x3 / double-3x3 / pooled branches, channel-concatenated.
/// Stride 1, same padding everywhere, so spatial dims are preserved.
template <typename T>
Block<T> make_inception_a(int in_c, const InceptionAConfig& cfg) {
  auto cat = std::make_unique<ConcatBranches<T>>();
  cat->add("b1", make_conv_bn_relu<T>(in_c, cfg.b1, 1, 1));

  auto b2 = std::make_unique<Sequential<T>>();
  b2->add("reduce", make_conv_bn_relu<T>(in_c, cfg.b2_reduce, 1, 1));
  b2->add("conv", make_conv_bn_relu<T>(cfg.b2_reduce, cfg.b2_out, 3, 3));
  cat->add("b2", std::move(b2));

  auto b3 = std::make_unique<Sequential<T>>();
  b3->add("reduce", make_conv_bn_relu<T>(in_c, cfg.b3_reduce, 1, 1));
  b3->add("conv1", make_conv_bn_relu<T>(cfg.b3_reduce, cfg.b3_mid, 3, 3));
  b3->add("conv2", make_conv_bn_relu<T>(cfg.b3_mid, cfg.b3_out, 3, 3));
  cat->add("b3", std::move(b3));

  auto bp = std::make_unique<Sequential<T>>();
  bp->add("pool", std::make_unique<PoolLayer<T>>(PoolKind::kAvg, 3, 1, Padding::kSame));
  bp->add("proj", make_conv_bn_relu<T>(in_c, cfg.pool_proj, 1, 1));
  cat->add("pool", std::move(bp));

  return {std::move(cat), cfg.b1 + cfg.b2_out + cfg.b3_out + cfg.pool_proj};
}

struct FactorizedModuleConfig {
  int n = 3;
  int b1 = 24;
  int b2_reduce = 24;   // 1x1 -> nx1 -> 1xn
  int b2_out = 32;
  int b3_reduce = 24;   // 1x1 -> factorized -> factorized
  int b3_mid = 28;
  int b3_out = 32;
  int pool_proj = 8;
};

/// Inception module with asymmetric-factorized n x n branches.
template <typename T>
Block<T> make_factorized_module(int in_c, const FactorizedModuleConfig& cfg) {
  auto cat = std::make_unique<ConcatBranches<T>>();
  cat->add("b1", make_conv_bn_relu<T>(in_c, cfg.b1, 1, 1));

  auto b2 = std::make_unique<Sequential<T>>();
  b2->add("reduce", make_conv_bn_relu<T>(in_c, cfg.b2_reduce, 1, 1));
  b2->add("fact", make_factorized_conv<T>(cfg.b2_reduce, cfg.b2_out, cfg.n));
  cat->add("b2", std::move(b2));

  auto b3 = std::make_unique<Sequential<T>>();
  b3->add("reduce", make_conv_bn_relu<T>(in_c, cfg.b3_reduce, 1, 1));
  b3->add("fact1", make_factorized_conv<T>(cfg.b3_reduce, cfg.b3_mid, cfg.n));
  b3->add("fact2", make_factorized_conv<T>(cfg.b3_mid, cfg.b3_out, cfg.n));
  cat->add("b3", std::move(b3));

  auto bp = std::make_unique<Sequential<T>>();
  bp->add("pool", std::make_unique<PoolLayer<T>>(PoolKind::kAvg, 3, 1, Padding::kSame));
  bp->add("proj", make_conv_bn_relu<T>(in_c, cfg.pool_proj, 1, 1));
  cat->add("pool", std::move(bp));

  return {std::move(cat), cfg.b1 + cfg.b2_out + cfg.b3_out + cfg.pool_proj};
}

struct ExpandedBankConfig {
  int b1 = 48;
  int b2_reduce = 32;   // 1x1 -> {1x3 || 3x1}
  int b2_split = 32;    // channels of each parallel split
  int b3_reduce = 32;   // 1x1 -> 3x3 -> {1x3 || 3x1}
  int b3_mid = 48;
  int b3_split = 32;
  int pool_proj = 16;
};

/// Widened module: the 3x3 output feeds 1x3 and 3x1 in parallel and their
/// outputs are concatenated instead of stacked serially.
template <typename T>
Block<T> make_expanded_filter_bank(int in_c, const ExpandedBankConfig& cfg) {
  auto make_split = [&](int c_in, int c_each) {
    auto split = std::make_unique<ConcatBranches<T>>();
    split->add("1xn", make_conv_bn_relu<T>(c_in, c_each, 1, 3));
    split->add("nx1", make_conv_bn_relu<T>(c_in, c_each, 3, 1));
    return split;
  };

  auto cat = std::make_unique<ConcatBranches<T>>();
  cat->add("b1", make_conv_bn_relu<T>(in_c, cfg.b1, 1, 1));

  auto b2 = std::make_unique<Sequential<T>>();
  b2->add("reduce", make_conv_bn_relu<T>(in_c, cfg.b2_reduce, 1, 1));
  b2->add("split", make_split(cfg.b2_reduce, cfg.b2_split));
  cat->add("b2", std::move(b2));

  auto b3 = std::make_unique<Sequential<T>>();
  b3->add("reduce", make_conv_bn_relu<T>(in_c, cfg.b3_reduce, 1, 1));
  b3->add("conv", make_conv_bn_relu<T>(cfg.b3_reduce, cfg.b3_mid, 3, 3));
  b3->add("split", make_split(cfg.b3_mid, cfg.b3_split));
  cat->add("b3", std::move(b3));

  auto bp = std::make_unique<Sequential<T>>();
  bp->add("pool", std::make_unique<PoolLayer<T>>(PoolKind::kAvg, 3, 1, Padding::kSame));
  bp->add("proj", make_conv_bn_relu<T>(in_c, cfg.pool_proj, 1, 1));
  cat->add("pool", std::move(bp));

  return {std::move(cat), cfg.b1 + 2 * cfg.b2_split + 2 * cfg.b3_split + cfg.pool_proj};
}

struct GridReductionConfig {
  int conv_reduce = 32;  // 1x1 -> 2x2 stride 2
  int conv_out = 48;
  int pool_proj = 48;    // max pool 2x2 stride 2 -> 1x1
};

/// Enforces the minimum spatial size of a reduction stage.
template <typename T>
class SpatialGuard final : public Layer<T> {
 public:
  SpatialGuard(LayerPtr<T> inner, int min_dim) : inner_(std::move(inner)), min_dim_(min_dim) {}

  Tensor<T> forward(const Tensor<T>& x, FwdContext<T>& ctx) override {
    if (x.dim(2) < min_dim_ || x.dim(3) < min_dim_) {
      throw std::invalid_argument("grid reduction: input " + std::to_string(x.dim(2)) + "x" +
                                  std::to_string(x.dim(3)) + " too small (min " +
                                  std::to_string(min_dim_) + ")");
    }
    return inner_->forward(x, ctx);
  }
  Tensor<T> backward(const Tensor<T>& gy) override { return inner_->backward(gy); }
  int out_channels(int in_c) const override { return inner_->out_channels(in_c); }
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    inner_->collect(prefix, out);
  }

 private:
  LayerPtr<T> inner_;
  int min_dim_;
};

/// Stride-2 conv branch alongside a stride-2 pool branch; both use 2x2 valid
/// windows so the output grid is exactly floor(dim/2). Channel count must
/// grow across the reduction.
template <typename T>
Block<T> make_grid_reduction(int in_c, const GridReductionConfig& cfg) {
  if (cfg.conv_out + cfg.pool_proj <= in_c) {
    throw std::invalid_argument("grid reduction: output channels (" +
                                std::to_string(cfg.conv_out + cfg.pool_proj) +
                                ") must exceed input channels (" + std::to_string(in_c) + ")");
  }
  auto cat = std::make_unique<ConcatBranches<T>>();

  auto bc = std::make_unique<Sequential<T>>();
  bc->add("reduce", make_conv_bn_relu<T>(in_c, cfg.conv_reduce, 1, 1));
  bc->add("down", make_conv_bn_relu<T>(cfg.conv_reduce, cfg.conv_out, 2, 2, 2, Padding::kValid));
  cat->add("conv", std::move(bc));

  auto bp = std::make_unique<Sequential<T>>();
  bp->add("pool", std::make_unique<PoolLayer<T>>(PoolKind::kMax, 2, 2, Padding::kValid));
  bp->add("proj", make_conv_bn_relu<T>(in_c, cfg.pool_proj, 1, 1));
  cat->add("pool", std::move(bp));

  return {std::make_unique<SpatialGuard<T>>(std::move(cat), 3), cfg.conv_out + cfg.pool_proj};
}

/// Wraps a block with a scaled identity shortcut. When the block changes the
/// channel count a 1x1 projection is inserted on the shortcut, so output
/// channels always equal the block's.
template <typename T>
Block<T> make_residual(Block<T> block, int in_c, T scale) {
  LayerPtr<T> proj;
  if (block.out_channels != in_c) {
    proj = make_conv_bn_relu<T>(in_c, block.out_channels, 1, 1);
  }
  const int out_c = block.out_channels;
  return {std::make_unique<ResidualLayer<T>>(std::move(block.layer), std::move(proj), scale), out_c};
}

/// Secondary classification head fed from an intermediate activation:
/// avg pool -> 1x1 conv -> dense logits.
template <typename T>
Block<T> make_auxiliary_classifier(int in_c, int in_h, int in_w, int aux_channels,
                                   int num_classes) {
  const int window = (in_h >= 2 && in_w >= 2) ? 2 : 1;
  const int ph = (in_h - window) / 2 + 1;
  const int pw = (in_w - window) / 2 + 1;
  auto seq = std::make_unique<Sequential<T>>();
  seq->add("pool", std::make_unique<PoolLayer<T>>(PoolKind::kAvg, window, 2, Padding::kValid));
  seq->add("proj", make_conv_bn_relu<T>(in_c, aux_channels, 1, 1));
  seq->add("flatten", std::make_unique<FlattenLayer<T>>());
  seq->add("fc", std::make_unique<DenseLayer<T>>(aux_channels * ph * pw, num_classes));
  return {std::move(seq), num_classes};
}

}  // namespace ctlesion
