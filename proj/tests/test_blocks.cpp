#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ctlesion/blocks.hpp"
#include "gradcheck.hpp"

using namespace ctlesion;
using oracle::grid_tensor;

namespace {

// Fill a layer's trainable parameters with small random values so relu/pool
// kinks sit far from the finite-difference step.
void init_layer_params(Layer<double>& layer, std::mt19937_64& rng) {
  std::vector<ParamRef<double>> ps;
  layer.collect("blk", ps);
  std::normal_distribution<double> normal(0.0, 0.4);
  for (auto& p : ps) {
    if (!p.grad) continue;  // running stats keep their defaults
    if (p.name.ends_with(".gamma")) {
      for (std::int64_t i = 0; i < p.value->size(); ++i) (*p.value)[i] = 1.0 + 0.1 * normal(rng);
    } else {
      for (std::int64_t i = 0; i < p.value->size(); ++i) (*p.value)[i] = normal(rng);
    }
  }
}

// End-to-end finite-difference check through a composite block (train mode,
// double precision, sampled parameter coordinates).
double block_fd_worst(Layer<double>& layer, Tensor<double> x, std::mt19937_64& rng,
                      int max_coords = 20) {
  FwdContext<double> ctx{Mode::kTrain, &rng};
  auto eval = [&] { return layer.forward(x, ctx); };
  auto y = eval();
  auto cot = grid_tensor(y.shape(), rng);

  std::vector<ParamRef<double>> ps;
  layer.collect("blk", ps);
  for (auto& p : ps) {
    if (p.grad) p.grad->fill(0.0);
  }
  eval();  // refresh caches right before backward
  Tensor<double> gx = layer.backward(cot);
  std::vector<Tensor<double>> param_grads;
  for (auto& p : ps) {
    if (p.grad) param_grads.push_back(*p.grad);
  }

  const double h = 1e-5;
  double worst = oracle::max_fd_rel_err(eval, x, gx, cot, h, rng, max_coords);
  std::size_t gi = 0;
  for (auto& p : ps) {
    if (!p.grad) continue;
    worst = std::max(worst, oracle::max_fd_rel_err(eval, *p.value, param_grads[gi], cot, h, rng,
                                                   max_coords));
    ++gi;
  }
  return worst;
}

}  // namespace

TEST_CASE("inception A output channels are the branch sum") {
  InceptionAConfig cfg;
  auto blk = make_inception_a<double>(32, cfg);
  REQUIRE(blk.out_channels == cfg.b1 + cfg.b2_out + cfg.b3_out + cfg.pool_proj);
  std::mt19937_64 rng(811);
  init_layer_params(*blk.layer, rng);
  auto x = grid_tensor({1, 32, 6, 6}, rng);
  FwdContext<double> ctx{Mode::kTrain, &rng};
  auto y = blk.layer->forward(x, ctx);
  REQUIRE(y.shape() == std::vector<int>{1, blk.out_channels, 6, 6});
}

TEST_CASE("inception A preserves spatial dims") {
  InceptionAConfig cfg;
  auto blk = make_inception_a<double>(8, cfg);
  std::mt19937_64 rng(812);
  init_layer_params(*blk.layer, rng);
  auto x = grid_tensor({2, 8, 7, 5}, rng);
  FwdContext<double> ctx{Mode::kInfer, nullptr};
  auto y = blk.layer->forward(x, ctx);
  REQUIRE(y.dim(2) == 7);
  REQUIRE(y.dim(3) == 5);
}

TEST_CASE("inception A gradient reaches every branch") {
  InceptionAConfig cfg;
  auto blk = make_inception_a<double>(8, cfg);
  std::mt19937_64 rng(813);
  init_layer_params(*blk.layer, rng);
  auto x = grid_tensor({2, 8, 6, 6}, rng);
  FwdContext<double> ctx{Mode::kTrain, &rng};
  auto y = blk.layer->forward(x, ctx);
  std::vector<ParamRef<double>> ps;
  blk.layer->collect("blk", ps);
  for (auto& p : ps) {
    if (p.grad) p.grad->fill(0.0);
  }
  blk.layer->backward(grid_tensor(y.shape(), rng));
  for (auto& p : ps) {
    if (!p.grad || !p.name.ends_with(".weight")) continue;
    double norm = 0.0;
    for (std::int64_t i = 0; i < p.grad->size(); ++i) norm += std::abs((*p.grad)[i]);
    INFO(p.name);
    REQUIRE(norm > 0.0);
  }
}

TEST_CASE("factorized conv rejects even or small n") {
  REQUIRE_THROWS_AS(make_factorized_conv<double>(4, 4, 4), std::invalid_argument);
  REQUIRE_THROWS_AS(make_factorized_conv<double>(4, 4, 1), std::invalid_argument);
}

TEST_CASE("factorization parameter ratios") {
  // one 5x5 kernel vs two stacked 3x3 kernels
  const double stacked = static_cast<double>(2 * conv_param_count(3, 3, 1, 1));
  REQUIRE(conv_param_count(5, 5, 1, 1) / stacked == Catch::Approx(25.0 / 18.0));
  // 5x5 vs a single 3x3 budget: the quoted reduction factor
  REQUIRE(static_cast<double>(conv_param_count(5, 5, 1, 1)) / conv_param_count(3, 3, 1, 1) ==
          Catch::Approx(2.78).epsilon(0.001));
  // n=3 asymmetric pair: 6 weights per channel pair vs 9 dense
  REQUIRE(factorized_param_count(3, 1, 1) == 6);
  REQUIRE(conv_param_count(3, 3, 1, 1) == 9);
}

TEST_CASE("factorized conv preserves spatial dims and matches dense shapes") {
  std::mt19937_64 rng(814);
  for (int rep = 0; rep < 8; ++rep) {
    const int n = (rep % 2) ? 3 : 5;
    const int h = 4 + static_cast<int>(rng() % 5);
    const int w = 4 + static_cast<int>(rng() % 5);
    const int c_in = 1 + static_cast<int>(rng() % 3);
    auto fact = make_factorized_conv<double>(c_in, 4, n);
    init_layer_params(*fact, rng);
    auto dense_blk = make_conv_bn_relu<double>(c_in, 4, n, n);
    init_layer_params(*dense_blk, rng);
    auto x = grid_tensor({1, c_in, h, w}, rng);
    FwdContext<double> ctx{Mode::kInfer, nullptr};
    auto yf = fact->forward(x, ctx);
    auto yd = dense_blk->forward(x, ctx);
    REQUIRE(yf.shape() == yd.shape());
    REQUIRE(yf.shape() == std::vector<int>{1, 4, h, w});
  }
}

TEST_CASE("expanded filter bank widens by the split sum") {
  ExpandedBankConfig cfg;
  auto blk = make_expanded_filter_bank<double>(24, cfg);
  REQUIRE(blk.out_channels == cfg.b1 + 2 * cfg.b2_split + 2 * cfg.b3_split + cfg.pool_proj);
  std::mt19937_64 rng(815);
  init_layer_params(*blk.layer, rng);
  auto x = grid_tensor({1, 24, 5, 5}, rng);
  FwdContext<double> ctx{Mode::kTrain, &rng};
  auto y = blk.layer->forward(x, ctx);
  REQUIRE(y.dim(1) == blk.out_channels);
  REQUIRE(y.dim(2) == 5);
}

TEST_CASE("parallel split branches share the parent activation") {
  // zero parent -> both split outputs zero (fresh BN: gamma 1, beta 0)
  auto split = std::make_unique<ConcatBranches<double>>();
  split->add("1xn", make_conv_bn_relu<double>(4, 3, 1, 3));
  split->add("nx1", make_conv_bn_relu<double>(4, 3, 3, 1));
  Tensor<double> zero({1, 4, 5, 5}, 0.0);
  FwdContext<double> ctx{Mode::kInfer, nullptr};
  auto y = split->forward(zero, ctx);
  REQUIRE(y.dim(1) == 6);
  for (std::int64_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0);
}

TEST_CASE("grid reduction halves spatial dims with floor") {
  GridReductionConfig cfg{8, 12, 12};
  auto blk = make_grid_reduction<double>(16, cfg);
  std::mt19937_64 rng(816);
  init_layer_params(*blk.layer, rng);
  FwdContext<double> ctx{Mode::kInfer, nullptr};

  auto y8 = blk.layer->forward(grid_tensor({1, 16, 8, 8}, rng), ctx);
  REQUIRE(y8.dim(2) == 4);
  REQUIRE(y8.dim(3) == 4);

  auto y7 = blk.layer->forward(grid_tensor({1, 16, 7, 7}, rng), ctx);
  REQUIRE(y7.dim(2) == 3);
  REQUIRE(y7.dim(3) == 3);

  REQUIRE(blk.out_channels > 16);
}

TEST_CASE("grid reduction rejects tiny inputs and shrinking configs") {
  GridReductionConfig cfg{8, 12, 12};
  auto blk = make_grid_reduction<double>(16, cfg);
  FwdContext<double> ctx{Mode::kInfer, nullptr};
  Tensor<double> tiny({1, 16, 2, 2});
  REQUIRE_THROWS_AS(blk.layer->forward(tiny, ctx), std::invalid_argument);
  REQUIRE_THROWS_AS(make_grid_reduction<double>(64, GridReductionConfig{8, 16, 16}),
                    std::invalid_argument);
}

namespace {

class ZeroBlock final : public Layer<double> {
 public:
  explicit ZeroBlock(int channels) : channels_(channels) {}
  Tensor<double> forward(const Tensor<double>& x, FwdContext<double>&) override {
    shape_ = x.shape();
    return Tensor<double>({x.dim(0), channels_, x.dim(2), x.dim(3)}, 0.0);
  }
  Tensor<double> backward(const Tensor<double>&) override { return Tensor<double>(shape_, 0.0); }
  int out_channels(int) const override { return channels_; }

 private:
  int channels_;
  std::vector<int> shape_;
};

}  // namespace

TEST_CASE("residual wrap is identity for a zero block") {
  std::mt19937_64 rng(818);
  Block<double> zero{std::make_unique<ZeroBlock>(6), 6};
  auto wrapped = make_residual(std::move(zero), 6, 0.7);
  auto x = grid_tensor({2, 6, 4, 4}, rng);
  FwdContext<double> ctx{Mode::kInfer, nullptr};
  auto y = wrapped.layer->forward(x, ctx);
  for (std::int64_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == x[i]);
}

TEST_CASE("residual wrap with scale zero is identity") {
  std::mt19937_64 rng(819);
  InceptionAConfig cfg{16, 8, 16, 8, 12, 24, 8};  // 16+16+24+8 = 64 = in_c
  Block<double> blk = make_inception_a<double>(64, cfg);
  REQUIRE(blk.out_channels == 64);
  auto wrapped = make_residual(std::move(blk), 64, 0.0);
  init_layer_params(*wrapped.layer, rng);
  auto x = grid_tensor({1, 64, 5, 5}, rng);
  FwdContext<double> ctx{Mode::kInfer, nullptr};
  auto y = wrapped.layer->forward(x, ctx);
  for (std::int64_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == Catch::Approx(x[i]).margin(1e-12));
}

TEST_CASE("residual wrap inserts a projection when channels differ") {
  std::mt19937_64 rng(820);
  InceptionAConfig cfg;
  Block<double> blk = make_inception_a<double>(16, cfg);
  const int out_c = blk.out_channels;
  REQUIRE(out_c != 16);
  auto wrapped = make_residual(std::move(blk), 16, 0.2);
  REQUIRE(wrapped.out_channels == out_c);
  init_layer_params(*wrapped.layer, rng);
  auto x = grid_tensor({1, 16, 5, 5}, rng);
  FwdContext<double> ctx{Mode::kInfer, nullptr};
  auto y = wrapped.layer->forward(x, ctx);
  REQUIRE(y.dim(1) == out_c);
}

TEST_CASE("auxiliary classifier emits two logits per sample") {
  std::mt19937_64 rng(821);
  auto aux = make_auxiliary_classifier<double>(12, 6, 6, 8, 2);
  init_layer_params(*aux.layer, rng);
  auto x = grid_tensor({3, 12, 6, 6}, rng);
  FwdContext<double> ctx{Mode::kInfer, nullptr};
  auto y = aux.layer->forward(x, ctx);
  REQUIRE(y.shape() == std::vector<int>{3, 2});
}

TEST_CASE("every block variant passes end-to-end gradient checks") {
  std::mt19937_64 rng(822);
  const double tol = 1e-3;

  SECTION("inception A") {
    for (int rep = 0; rep < 3; ++rep) {
      InceptionAConfig cfg{3, 2, 3, 2, 3, 4, 2};
      auto blk = make_inception_a<double>(4, cfg);
      init_layer_params(*blk.layer, rng);
      REQUIRE(block_fd_worst(*blk.layer, grid_tensor({2, 4, 5, 5}, rng), rng) < tol);
    }
  }
  SECTION("factorized module") {
    FactorizedModuleConfig cfg{3, 3, 2, 3, 2, 3, 3, 2};
    auto blk = make_factorized_module<double>(4, cfg);
    init_layer_params(*blk.layer, rng);
    REQUIRE(block_fd_worst(*blk.layer, grid_tensor({2, 4, 5, 5}, rng), rng) < tol);
  }
  SECTION("expanded filter bank") {
    ExpandedBankConfig cfg{3, 2, 3, 2, 3, 3, 2};
    auto blk = make_expanded_filter_bank<double>(4, cfg);
    init_layer_params(*blk.layer, rng);
    REQUIRE(block_fd_worst(*blk.layer, grid_tensor({2, 4, 5, 5}, rng), rng) < tol);
  }
  SECTION("grid reduction") {
    GridReductionConfig cfg{3, 4, 4};
    auto blk = make_grid_reduction<double>(4, cfg);
    init_layer_params(*blk.layer, rng);
    REQUIRE(block_fd_worst(*blk.layer, grid_tensor({2, 4, 6, 6}, rng), rng) < tol);
  }
  SECTION("residual-wrapped module with projection") {
    InceptionAConfig cfg{3, 2, 3, 2, 3, 4, 2};
    auto blk = make_residual(make_inception_a<double>(4, cfg), 4, 0.2);
    init_layer_params(*blk.layer, rng);
    REQUIRE(block_fd_worst(*blk.layer, grid_tensor({2, 4, 5, 5}, rng), rng) < tol);
  }
  SECTION("auxiliary classifier") {
    auto blk = make_auxiliary_classifier<double>(4, 6, 6, 3, 2);
    init_layer_params(*blk.layer, rng);
    REQUIRE(block_fd_worst(*blk.layer, grid_tensor({2, 4, 6, 6}, rng), rng) < tol);
  }
}

TEST_CASE("block outputs stay finite for large inputs") {
  std::mt19937_64 rng(823);
  InceptionAConfig cfg;
  auto blk = make_residual(make_inception_a<double>(8, cfg), 8, 0.2);
  init_layer_params(*blk.layer, rng);
  auto x = grid_tensor({1, 8, 6, 6}, rng, 1000.0);
  FwdContext<double> ctx{Mode::kTrain, &rng};
  auto y = blk.layer->forward(x, ctx);
  REQUIRE(y.all_finite());
}
