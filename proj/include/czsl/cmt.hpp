#pragma once

#include <string>
#include <vector>

#include "czsl/encoders.hpp"

namespace czsl {

struct CmtConfig {
  bool enabled = true;
  std::size_t layers = 2;
  std::size_t heads = 4;
  double dropout = 0.0;
  double lambda_init = 0.1;
  bool lambda_vectorized = true;
  bool lambda_trainable = true;

  void validate(std::size_t width) const {
    if (!enabled) return;
    if (layers == 0) throw ConfigError("traction stack needs at least one block");
    if (heads == 0 || width % heads != 0) throw ConfigError("traction heads must divide the latent width");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("traction dropout must lie in [0, 1)");
  }
};

/// Per-patch relevance of one prompt representation, per head and averaged.
struct AttentionMap {
  std::size_t heads = 0;
  std::size_t patches = 0;
  std::vector<double> per_head;  // heads x patches
  std::vector<double> mean;      // patches
};

/// One traction block: the prompt representation attends to the patch
/// tokens, an FFN refines the result, and the prompt moves by lambda * t~.
struct CmtBlock {
  Var ln_q_gain, ln_q_bias, ln_kv_gain, ln_kv_bias;
  Var w_q, w_k, w_v, w_out, b_out;
  Var ln_ffn_gain, ln_ffn_bias, w_1, b_1, w_2, b_2;
  Var lambda;
  std::size_t heads = 1;

  static CmtBlock create(ParameterStore& store, const std::string& prefix, std::size_t d, const CmtConfig& cfg,
                         std::uint64_t seed) {
    CmtBlock b;
    b.heads = cfg.heads;
    b.ln_q_gain = init_constant(store, prefix + ".ln_q.gain", {1, d}, 1.0, true);
    b.ln_q_bias = init_constant(store, prefix + ".ln_q.bias", {1, d}, 0.0, true);
    b.ln_kv_gain = init_constant(store, prefix + ".ln_kv.gain", {1, d}, 1.0, true);
    b.ln_kv_bias = init_constant(store, prefix + ".ln_kv.bias", {1, d}, 0.0, true);
    b.w_q = init_normal(store, prefix + ".attn.q.weight", {d, d}, seed, true);
    b.w_k = init_normal(store, prefix + ".attn.k.weight", {d, d}, seed, true);
    b.w_v = init_normal(store, prefix + ".attn.v.weight", {d, d}, seed, true);
    b.w_out = init_normal(store, prefix + ".attn.out.weight", {d, d}, seed, true);
    b.b_out = init_constant(store, prefix + ".attn.out.bias", {1, d}, 0.0, true);
    b.ln_ffn_gain = init_constant(store, prefix + ".ln_ffn.gain", {1, d}, 1.0, true);
    b.ln_ffn_bias = init_constant(store, prefix + ".ln_ffn.bias", {1, d}, 0.0, true);
    b.w_1 = init_normal(store, prefix + ".ffn.fc1.weight", {d, 4 * d}, seed, true);
    b.b_1 = init_constant(store, prefix + ".ffn.fc1.bias", {1, 4 * d}, 0.0, true);
    b.w_2 = init_normal(store, prefix + ".ffn.fc2.weight", {4 * d, d}, seed, true);
    b.b_2 = init_constant(store, prefix + ".ffn.fc2.bias", {1, d}, 0.0, true);
    b.lambda = init_constant(store, prefix + ".lambda", {1, cfg.lambda_vectorized ? d : 1}, cfg.lambda_init,
                             cfg.lambda_trainable);
    return b;
  }

  /// `t` stacks `per_item` prompt representations for each of `batch` images;
  /// `patches` stacks N^p projected patch tokens per image.
  Var forward(const Var& t, const Var& patches, std::size_t batch, std::size_t per_item, double dropout,
              const ForwardContext& ctx, std::vector<double>* weights_out = nullptr) const {
    const std::size_t d = t.cols();
    if (patches.cols() != d || batch == 0 || patches.rows() % batch != 0 || t.rows() != batch * per_item)
      throw ShapeError("traction block: prompts " + Tensor::describe(t.tensor().shape) + ", patches " +
                       Tensor::describe(patches.tensor().shape));
    const std::size_t np = patches.rows() / batch;
    Var q = ad::matmul(ad::layer_norm(t, ln_q_gain, ln_q_bias), w_q);
    Var kv_in = ad::layer_norm(patches, ln_kv_gain, ln_kv_bias);
    Var k = ad::matmul(kv_in, w_k);
    Var v = ad::matmul(kv_in, w_v);
    std::vector<double> keep;
    const bool drop = ctx.stochastic() && dropout > 0.0;
    if (drop) keep = ad::dropout_mask(1, batch * per_item * heads * np, dropout, *ctx.rng).values;
    Var attended = ad::cross_attention(q, k, v, batch, per_item, np, heads, drop ? &keep : nullptr, weights_out);
    Var t_bar = ad::add(t, ad::add_row(ad::matmul(attended, w_out), b_out));
    Var hidden = ad::gelu(ad::add_row(ad::matmul(ad::layer_norm(t_bar, ln_ffn_gain, ln_ffn_bias), w_1), b_1));
    if (drop) hidden = ad::dropout(hidden, dropout, *ctx.rng);
    Var t_tilde = ad::add(t_bar, ad::add_row(ad::matmul(hidden, w_2), b_2));
    return ad::add(t, ad::mul_row(t_tilde, lambda));
  }

  /// Attention weights of a single prompt representation over one image's patches.
  AttentionMap export_attention(const Var& t, const Var& patches) const {
    if (t.rows() != 1) throw ShapeError("export_attention takes a single prompt representation");
    std::vector<double> w;
    forward(t, patches, 1, 1, 0.0, {}, &w);
    AttentionMap map;
    map.heads = heads;
    map.patches = patches.rows();
    map.per_head = w;
    map.mean.assign(map.patches, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < map.patches; ++j) map.mean[j] += w[h * map.patches + j] / static_cast<double>(heads);
    return map;
  }
};

/// N traction blocks shared by the state, object and composition branches.
class CmtStack {
 public:
  CmtStack() = default;

  CmtStack(ParameterStore& store, std::size_t d, const CmtConfig& cfg, std::uint64_t seed)
      : cfg_(cfg) {
    cfg.validate(d);
    if (!cfg.enabled) return;
    for (std::size_t i = 0; i < cfg.layers; ++i)
      blocks_.push_back(CmtBlock::create(store, "cmt.block" + std::to_string(i), d, cfg, seed));
  }

  bool enabled() const { return !blocks_.empty(); }
  const CmtConfig& config() const { return cfg_; }
  const std::vector<CmtBlock>& blocks() const { return blocks_; }

  Var apply(const Var& t, const Var& patches, std::size_t batch, std::size_t per_item, const ForwardContext& ctx) const {
    Var out = t;
    for (const auto& block : blocks_) out = block.forward(out, patches, batch, per_item, cfg_.dropout, ctx);
    return out;
  }

  /// Switches lambda between a d-vector and a broadcast scalar, trainable or
  /// frozen. Every lambda is re-initialized to the configured value.
  void set_lambda_mode(bool vectorized, bool trainable) {
    if (training_started_) throw StateError("lambda mode cannot change after training has started");
    cfg_.lambda_vectorized = vectorized;
    cfg_.lambda_trainable = trainable;
    for (auto& block : blocks_) {
      const std::size_t width = vectorized ? block.w_q.rows() : 1;
      block.lambda.tensor() = Tensor({1, width}, cfg_.lambda_init);
      block.lambda.set_requires_grad(trainable);
    }
  }

  /// Freezes every lambda at `value` (0 switches traction off).
  void freeze_lambda_at(double value) {
    if (training_started_) throw StateError("lambda mode cannot change after training has started");
    for (auto& block : blocks_) {
      for (double& v : block.lambda.values()) v = value;
      block.lambda.set_requires_grad(false);
    }
    cfg_.lambda_trainable = false;
  }

  void mark_training_started() { training_started_ = true; }

 private:
  CmtConfig cfg_;
  std::vector<CmtBlock> blocks_;
  bool training_started_ = false;
};

}  // namespace czsl
