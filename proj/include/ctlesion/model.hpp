#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctlesion/blocks.hpp"

namespace ctlesion {

using ordered_json = nlohmann::ordered_json;

/// Classifier configuration. Defaults are the compact desk-scale setup; the
/// full-size figures (feature width 2048, 252x210 inputs) remain reachable.
struct ModelConfig {
  std::string backbone = "inception_residual";  // or "inception_plain"
  int feature_width = 256;
  int head_width = 512;
  double dropout_rate = 0.4;
  int num_classes = 2;
  double label_smoothing_eps = 0.1;
  double aux_weight = 0.3;
  int input_h = 128;
  int input_w = 128;
  double width_multiplier = 1.0;
  double residual_scale = 0.2;
  int stem_stride1 = 2;
  int stem_stride2 = 2;
  int aux_attach = 6;  // stage whose output feeds the auxiliary head
  int aux_channels = 64;
  std::string pretrained;

  void validate() const {
    if (backbone != "inception_residual" && backbone != "inception_plain") {
      throw std::invalid_argument("ModelConfig: unknown backbone '" + backbone + "'");
    }
    if (num_classes != 2) throw std::invalid_argument("ModelConfig: num_classes must be 2 for this task");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::invalid_argument("ModelConfig: dropout_rate must be in [0,1)");
    if (feature_width <= 0 || head_width <= 0) throw std::invalid_argument("ModelConfig: widths must be positive");
    if (label_smoothing_eps < 0.0 || label_smoothing_eps >= 1.0) throw std::invalid_argument("ModelConfig: label_smoothing_eps must be in [0,1)");
    if (aux_weight < 0.0) throw std::invalid_argument("ModelConfig: aux_weight must be >= 0");
    if (width_multiplier <= 0.0) throw std::invalid_argument("ModelConfig: width_multiplier must be > 0");
    if (input_h < 16 || input_w < 16) throw std::invalid_argument("ModelConfig: input size too small (min 16)");
    if (stem_stride1 < 1 || stem_stride2 < 1) throw std::invalid_argument("ModelConfig: stem strides must be >= 1");
  }
};

inline void to_json(ordered_json& j, const ModelConfig& c) {
  j = ordered_json{{"backbone", c.backbone},
                   {"feature_width", c.feature_width},
                   {"head_width", c.head_width},
                   {"dropout_rate", c.dropout_rate},
                   {"num_classes", c.num_classes},
                   {"label_smoothing_eps", c.label_smoothing_eps},
                   {"aux_weight", c.aux_weight},
                   {"input_size", {c.input_h, c.input_w}},
                   {"width_multiplier", c.width_multiplier},
                   {"residual_scale", c.residual_scale},
                   {"stem_strides", {c.stem_stride1, c.stem_stride2}},
                   {"aux_attach", c.aux_attach},
                   {"aux_channels", c.aux_channels},
                   {"pretrained", c.pretrained}};
}

inline void from_json(const ordered_json& j, ModelConfig& c) {
  c.backbone = j.value("backbone", c.backbone);
  c.feature_width = j.value("feature_width", c.feature_width);
  c.head_width = j.value("head_width", c.head_width);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.label_smoothing_eps = j.value("label_smoothing_eps", c.label_smoothing_eps);
  c.aux_weight = j.value("aux_weight", c.aux_weight);
  if (j.contains("input_size")) {
    c.input_h = j["input_size"].at(0).get<int>();
    c.input_w = j["input_size"].at(1).get<int>();
  }
  c.width_multiplier = j.value("width_multiplier", c.width_multiplier);
  c.residual_scale = j.value("residual_scale", c.residual_scale);
  if (j.contains("stem_strides")) {
    c.stem_stride1 = j["stem_strides"].at(0).get<int>();
    c.stem_stride2 = j["stem_strides"].at(1).get<int>();
  }
  c.aux_attach = j.value("aux_attach", c.aux_attach);
  c.aux_channels = j.value("aux_channels", c.aux_channels);
  c.pretrained = j.value("pretrained", c.pretrained);
}

/// Backbone + auxiliary head + classification head with an intermediate tap.
///
/// Stage layout (aux_attach indexes into this list):
///   0 stem | 1,2 module A | 3 reduction | 4,5 factorized | 6 reduction |
///   7 expanded bank | 8 final 1x1 to feature_width
template <typename T = float>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  struct Output {
    Tensor<T> main_logits;
    Tensor<T> aux_logits;
  };

  const ModelConfig& config() const { return cfg_; }
  int stage_count() const { return static_cast<int>(stages_.size()); }

  /// Fan-in-scaled normal init for weights, zeros/ones for the rest.
  void init_weights(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& p : blobs()) {
      Tensor<T>& t = *p.value;
      if (p.name.ends_with(".weight")) {
        const auto& s = t.shape();
        const double fan_in = s.size() == 4 ? static_cast<double>(s[1]) * s[2] * s[3]
                                            : static_cast<double>(s[0]);
        const double stddev = std::sqrt(2.0 / fan_in);
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(normal(rng) * stddev);
      } else if (p.name.ends_with(".gamma") || p.name.ends_with(".running_var")) {
        t.fill(T(1));
      } else {
        t.fill(T(0));
      }
    }
  }

  Output forward_train(const Tensor<T>& x, std::mt19937_64& rng) {
    check_input(x);
    FwdContext<T> ctx{Mode::kTrain, &rng};
    Tensor<T> cur = x;
    Tensor<T> tap;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      cur = stages_[i]->forward(cur, ctx);
      if (static_cast<int>(i) == cfg_.aux_attach) tap = cur;
    }
    Output out;
    out.aux_logits = aux_head_->forward(tap, ctx);
    out.main_logits = head_->forward(cur, ctx);
    return out;
  }

  Tensor<T> forward_infer(const Tensor<T>& x) {
    check_input(x);
    FwdContext<T> ctx{Mode::kInfer, nullptr};
    Tensor<T> cur = x;
    for (auto& s : stages_) cur = s->forward(cur, ctx);
    return head_->forward(cur, ctx);
  }

  /// Softmax class probabilities in inference mode.
  Tensor<T> predict(const Tensor<T>& x) { return softmax(forward_infer(x)); }

  /// g_aux must already carry the auxiliary loss weight.
  void backward(const Tensor<T>& g_main, const Tensor<T>& g_aux) {
    Tensor<T> g = head_->backward(g_main);
    for (int i = static_cast<int>(stages_.size()) - 1; i > cfg_.aux_attach; --i) {
      g = stages_[static_cast<std::size_t>(i)]->backward(g);
    }
    Tensor<T> g_tap = aux_head_->backward(g_aux);
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += g_tap[i];
    for (int i = cfg_.aux_attach; i >= 0; --i) {
      g = stages_[static_cast<std::size_t>(i)]->backward(g);
    }
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    collect_all(out);
    std::erase_if(out, [](const ParamRef<T>& p) { return p.grad == nullptr; });
    return out;
  }

  std::vector<ParamRef<T>> blobs() {
    std::vector<ParamRef<T>> out;
    collect_all(out);
    return out;
  }

  void zero_grad() {
    for (auto& p : params()) p.grad->fill(T(0));
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto& p : params()) n += p.value->size();
    return n;
  }

  std::int64_t head_param_count() {
    std::int64_t n = 0;
    for (auto& p : params()) {
      if (p.name.rfind("head.", 0) == 0) n += p.value->size();
    }
    return n;
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != 3) {
      throw std::invalid_argument("model: input must be [N,3,H,W], got " + shape_str(x.shape()));
    }
    if (x.dim(2) != cfg_.input_h || x.dim(3) != cfg_.input_w) {
      throw std::invalid_argument("model: input spatial size " + std::to_string(x.dim(2)) + "x" +
                                  std::to_string(x.dim(3)) + " does not match configured " +
                                  std::to_string(cfg_.input_h) + "x" + std::to_string(cfg_.input_w));
    }
  }

  int sc(int c) const { return std::max(1, static_cast<int>(std::llround(c * cfg_.width_multiplier))); }

  static int same_out(int in, int stride) { return (in + stride - 1) / stride; }

  void build() {
    const bool residual = cfg_.backbone == "inception_residual";
    const T res_scale = static_cast<T>(cfg_.residual_scale);
    int h = cfg_.input_h, w = cfg_.input_w;
    int c = 3;

    auto stem = std::make_unique<Sequential<T>>();
    stem->add("conv1", make_conv_bn_relu<T>(3, sc(16), 3, 3, cfg_.stem_stride1));
    stem->add("conv2", make_conv_bn_relu<T>(sc(16), sc(32), 3, 3, cfg_.stem_stride2));
    h = same_out(same_out(h, cfg_.stem_stride1), cfg_.stem_stride2);
    w = same_out(same_out(w, cfg_.stem_stride1), cfg_.stem_stride2);
    c = sc(32);
    add_stage("stem", {std::move(stem), c});

    auto wrap = [&](Block<T> b) {
      return residual ? make_residual(std::move(b), c, res_scale) : std::move(b);
    };

    InceptionAConfig a{sc(16), sc(12), sc(16), sc(12), sc(16), sc(24), sc(8)};
    for (int i = 1; i <= 2; ++i) {
      Block<T> blk = wrap(make_inception_a<T>(c, a));
      c = blk.out_channels;
      add_stage("a" + std::to_string(i), std::move(blk));
    }

    GridReductionConfig r1{sc(32), sc(48), sc(48)};
    {
      Block<T> blk = make_grid_reduction<T>(c, r1);
      c = blk.out_channels;
      h /= 2;
      w /= 2;
      add_stage("reduce1", std::move(blk));
    }

    FactorizedModuleConfig f{3, sc(24), sc(24), sc(32), sc(24), sc(28), sc(32), sc(8)};
    for (int i = 1; i <= 2; ++i) {
      Block<T> blk = wrap(make_factorized_module<T>(c, f));
      c = blk.out_channels;
      add_stage("b" + std::to_string(i), std::move(blk));
    }

    GridReductionConfig r2{sc(48), sc(72), sc(72)};
    {
      Block<T> blk = make_grid_reduction<T>(c, r2);
      c = blk.out_channels;
      h /= 2;
      w /= 2;
      add_stage("reduce2", std::move(blk));
    }

    ExpandedBankConfig e{sc(48), sc(32), sc(32), sc(32), sc(48), sc(32), sc(16)};
    {
      Block<T> blk = wrap(make_expanded_filter_bank<T>(c, e));
      c = blk.out_channels;
      add_stage("c1", std::move(blk));
    }

    add_stage("feat", {make_conv_bn_relu<T>(c, cfg_.feature_width, 1, 1), cfg_.feature_width});
    c = cfg_.feature_width;

    if (cfg_.aux_attach < 1 || cfg_.aux_attach >= static_cast<int>(stages_.size())) {
      throw std::invalid_argument("ModelConfig: aux_attach must name a stage after the first block (1.." +
                                  std::to_string(stages_.size() - 1) + "), got " +
                                  std::to_string(cfg_.aux_attach));
    }
    // spatial dims at the tap: reductions at stage indices 3 and 6
    int ah = cfg_.input_h, aw = cfg_.input_w;
    ah = same_out(same_out(ah, cfg_.stem_stride1), cfg_.stem_stride2);
    aw = same_out(same_out(aw, cfg_.stem_stride1), cfg_.stem_stride2);
    if (cfg_.aux_attach >= 3) { ah /= 2; aw /= 2; }
    if (cfg_.aux_attach >= 6) { ah /= 2; aw /= 2; }
    Block<T> aux = make_auxiliary_classifier<T>(stage_channels_[static_cast<std::size_t>(cfg_.aux_attach)],
                                                ah, aw, sc(cfg_.aux_channels), cfg_.num_classes);
    aux_head_ = std::move(aux.layer);

    auto head = std::make_unique<Sequential<T>>();
    head->add("gap", std::make_unique<GlobalAvgPoolLayer<T>>());
    head->add("fc1", std::make_unique<DenseLayer<T>>(cfg_.feature_width, cfg_.head_width));
    head->add("relu1", std::make_unique<ReluLayer<T>>());
    head->add("drop1", std::make_unique<DropoutLayer<T>>(cfg_.dropout_rate));
    head->add("fc2", std::make_unique<DenseLayer<T>>(cfg_.head_width, cfg_.head_width));
    head->add("relu2", std::make_unique<ReluLayer<T>>());
    head->add("drop2", std::make_unique<DropoutLayer<T>>(cfg_.dropout_rate));
    head->add("fc3", std::make_unique<DenseLayer<T>>(cfg_.head_width, cfg_.num_classes));
    head_ = std::move(head);
  }

  void add_stage(std::string name, Block<T> blk) {
    stage_names_.push_back(std::move(name));
    stage_channels_.push_back(blk.out_channels);
    stages_.push_back(std::move(blk.layer));
  }

  void collect_all(std::vector<ParamRef<T>>& out) {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      stages_[i]->collect("backbone." + stage_names_[i], out);
    }
    aux_head_->collect("aux", out);
    head_->collect("head", out);
  }

  ModelConfig cfg_;
  std::vector<LayerPtr<T>> stages_;
  std::vector<std::string> stage_names_;
  std::vector<int> stage_channels_;
  LayerPtr<T> aux_head_;
  LayerPtr<T> head_;
};

/// Fresh model with seeded initialization (pretrained import is layered on in
/// checkpoint.hpp's build_model).
template <typename T = float>
Model<T> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model<T> m(cfg);
  m.init_weights(seed);
  return m;
}

}  // namespace ctlesion
