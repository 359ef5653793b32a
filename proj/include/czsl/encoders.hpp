#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "czsl/numerics/parameters.hpp"

namespace czsl {

/// Training-time randomness for one forward pass. A null rng (or
/// training == false) disables every dropout site.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;

  bool stochastic() const { return training && rng != nullptr; }
};

/// Visual tuning strategies. Only the image encoder is affected; prompts,
/// disentanglers and the traction stack stay trainable under all of them.
enum class TuningStrategy { None, Full, Bias, Proj, Partial, Prompt, Adapter };

inline const std::vector<TuningStrategy>& all_tuning_strategies() {
  static const std::vector<TuningStrategy> all{TuningStrategy::None,    TuningStrategy::Full,
                                               TuningStrategy::Bias,    TuningStrategy::Proj,
                                               TuningStrategy::Partial, TuningStrategy::Prompt,
                                               TuningStrategy::Adapter};
  return all;
}

inline std::string to_string(TuningStrategy s) {
  switch (s) {
    case TuningStrategy::None: return "none";
    case TuningStrategy::Full: return "full";
    case TuningStrategy::Bias: return "bias";
    case TuningStrategy::Proj: return "proj";
    case TuningStrategy::Partial: return "partial";
    case TuningStrategy::Prompt: return "prompt";
    case TuningStrategy::Adapter: return "adapter";
  }
  return "?";
}

inline TuningStrategy parse_tuning_strategy(const std::string& name) {
  for (TuningStrategy s : all_tuning_strategies())
    if (to_string(s) == name) return s;
  throw ConfigError("unknown tuning strategy '" + name + "'");
}

struct ImageEncoderConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t depth = 2;
  std::size_t width_in = 64;  // backbone token width
  std::size_t latent = 64;    // cross-modal latent width after g^proj
  std::size_t heads = 4;
  std::size_t adapter_rank = 16;
  std::size_t prompt_len = 4;
  double adapter_dropout = 0.1;
  TuningStrategy tuning = TuningStrategy::Adapter;

  std::size_t num_patches() const { return (height / patch) * (width / patch); }

  void validate() const {
    if (patch == 0 || height % patch != 0 || width % patch != 0)
      throw ConfigError("image size must be a multiple of the patch size");
    if (channels == 0 || width_in == 0 || latent == 0) throw ConfigError("image encoder widths must be positive");
    if (heads == 0 || width_in % heads != 0) throw ConfigError("image heads must divide the backbone width");
    if (adapter_rank == 0 || adapter_rank >= width_in) throw ConfigError("adapter rank must satisfy 0 < r < d_in");
    if (tuning == TuningStrategy::Prompt && prompt_len == 0) throw ConfigError("prompt tuning needs prompt_len > 0");
    if (!(adapter_dropout >= 0.0 && adapter_dropout < 1.0)) throw ConfigError("adapter dropout must lie in [0, 1)");
  }
};

struct TextEncoderConfig {
  std::size_t width_in = 64;  // token width d_in_t
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t latent = 64;
  std::size_t max_len = 8;

  void validate() const {
    if (width_in == 0 || latent == 0 || max_len == 0) throw ConfigError("text encoder sizes must be positive");
    if (heads == 0 || width_in % heads != 0) throw ConfigError("text heads must divide the token width");
  }
};

inline constexpr double kInitStd = 0.02;

/// Creates a Normal(0, std) parameter whose values depend only on (seed, name).
inline Var init_normal(ParameterStore& store, const std::string& name, std::vector<std::size_t> shape,
                       std::uint64_t seed, bool trainable, double std = kInitStd) {
  Rng rng = make_rng(seed, name);
  return store.add(name, normal_tensor(std::move(shape), std, rng), trainable);
}

/// Backbone surrogate weights: Normal(0, 1/sqrt(fan_in)) so activations keep unit scale.
inline Var init_fan_in(ParameterStore& store, const std::string& name, std::vector<std::size_t> shape,
                       std::uint64_t seed, bool trainable) {
  const double std = 1.0 / std::sqrt(static_cast<double>(shape.front()));
  return init_normal(store, name, std::move(shape), seed, trainable, std);
}

inline Var init_constant(ParameterStore& store, const std::string& name, std::vector<std::size_t> shape,
                         double value, bool trainable) {
  return store.add(name, Tensor(std::move(shape), value), trainable);
}

/// Bottleneck residual module: x + GELU(x W_down) W_up.
struct Adapter {
  Var down;  // d_in x r
  Var up;    // r x d_in

  static Adapter create(ParameterStore& store, const std::string& prefix, std::size_t width, std::size_t rank,
                        std::uint64_t seed) {
    Adapter a;
    a.down = init_normal(store, prefix + ".down", {width, rank}, seed, true);
    a.up = init_constant(store, prefix + ".up", {rank, width}, 0.0, true);
    return a;
  }

  Var forward(const Var& x, double dropout_rate, const ForwardContext& ctx) const {
    Var hidden = ad::gelu(ad::matmul(x, down));
    if (ctx.stochastic()) hidden = ad::dropout(hidden, dropout_rate, *ctx.rng);
    return ad::add(x, ad::matmul(hidden, up));
  }
};

inline std::vector<double> adapter_forward(std::span<const double> x, const Tensor& down, const Tensor& up) {
  if (down.rows() != x.size() || up.rows() != down.cols() || up.cols() != x.size())
    throw ShapeError("adapter: input width " + std::to_string(x.size()) + ", W_down " + Tensor::describe(down.shape) +
                     ", W_up " + Tensor::describe(up.shape));
  Var in(Tensor::row(std::vector<double>(x.begin(), x.end())));
  Adapter a{Var(down), Var(up)};
  return a.forward(in, 0.0, {}).values();
}

/// Pre-norm transformer block with optional adapters after the attention and
/// MLP residuals.
struct TransformerBlock {
  Var ln1_gain, ln1_bias, qkv_weight, qkv_bias, out_weight, out_bias;
  Var ln2_gain, ln2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  std::optional<Adapter> adapter_attn, adapter_mlp;
  std::size_t heads = 1;

  static TransformerBlock create(ParameterStore& store, const std::string& prefix, std::size_t width,
                                 std::size_t heads, bool trainable, std::uint64_t seed) {
    TransformerBlock b;
    b.heads = heads;
    b.ln1_gain = init_constant(store, prefix + ".ln1.gain", {1, width}, 1.0, trainable);
    b.ln1_bias = init_constant(store, prefix + ".ln1.bias", {1, width}, 0.0, trainable);
    b.qkv_weight = init_fan_in(store, prefix + ".attn.qkv.weight", {width, 3 * width}, seed, trainable);
    b.qkv_bias = init_constant(store, prefix + ".attn.qkv.bias", {1, 3 * width}, 0.0, trainable);
    b.out_weight = init_fan_in(store, prefix + ".attn.out.weight", {width, width}, seed, trainable);
    b.out_bias = init_constant(store, prefix + ".attn.out.bias", {1, width}, 0.0, trainable);
    b.ln2_gain = init_constant(store, prefix + ".ln2.gain", {1, width}, 1.0, trainable);
    b.ln2_bias = init_constant(store, prefix + ".ln2.bias", {1, width}, 0.0, trainable);
    b.fc1_weight = init_fan_in(store, prefix + ".mlp.fc1.weight", {width, 4 * width}, seed, trainable);
    b.fc1_bias = init_constant(store, prefix + ".mlp.fc1.bias", {1, 4 * width}, 0.0, trainable);
    b.fc2_weight = init_fan_in(store, prefix + ".mlp.fc2.weight", {4 * width, width}, seed, trainable);
    b.fc2_bias = init_constant(store, prefix + ".mlp.fc2.bias", {1, width}, 0.0, trainable);
    return b;
  }

  void add_adapters(ParameterStore& store, const std::string& prefix, std::size_t width, std::size_t rank,
                    std::uint64_t seed) {
    adapter_attn = Adapter::create(store, prefix + ".adapter_attn", width, rank, seed);
    adapter_mlp = Adapter::create(store, prefix + ".adapter_mlp", width, rank, seed);
  }

  Var forward(const Var& x, std::size_t batch, std::size_t seq, bool causal, double adapter_dropout,
              const ForwardContext& ctx) const {
    Var h = ad::layer_norm(x, ln1_gain, ln1_bias);
    Var qkv = ad::add_row(ad::matmul(h, qkv_weight), qkv_bias);
    Var attn = ad::add_row(ad::matmul(ad::self_attention(qkv, batch, seq, heads, causal), out_weight), out_bias);
    Var y = ad::add(x, attn);
    if (adapter_attn) y = adapter_attn->forward(y, adapter_dropout, ctx);
    h = ad::layer_norm(y, ln2_gain, ln2_bias);
    Var m = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(h, fc1_weight), fc1_bias)), fc2_weight), fc2_bias);
    y = ad::add(y, m);
    if (adapter_mlp) y = adapter_mlp->forward(y, adapter_dropout, ctx);
    return y;
  }
};

/// x_cls is the projected [CLS] token; patch_tokens holds the projected patch
/// tokens of every image stacked (batch * N^p rows).
struct EncodedImage {
  Var x_cls;
  Var patch_tokens;
  std::size_t batch = 0;
  std::size_t num_patches = 0;
};

/// Splits a batch of H x W x C images into flattened non-overlapping patches,
/// one row per patch in row-major grid order; each row is (py, px, c) ordered.
inline Tensor extract_patches(const std::vector<const Tensor*>& images, const ImageEncoderConfig& cfg) {
  const std::size_t p = cfg.patch, gh = cfg.height / p, gw = cfg.width / p, c = cfg.channels;
  Tensor out({images.size() * gh * gw, p * p * c});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Tensor& img = *images[b];
    if (img.shape != std::vector<std::size_t>{cfg.height, cfg.width, c})
      throw ShapeError("image of shape " + Tensor::describe(img.shape) + " does not match configured " +
                       Tensor::describe({cfg.height, cfg.width, c}));
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx) {
        double* row = out.values.data() + ((b * gh + gy) * gw + gx) * p * p * c;
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch)
              *row++ = img.values[((gy * p + py) * cfg.width + gx * p + px) * c + ch];
      }
  }
  return out;
}

class ImageEncoder {
 public:
  ImageEncoder() = default;

  ImageEncoder(ParameterStore& store, const ImageEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.width_in, np = cfg.num_patches();
    patch_weight_ = init_fan_in(store, "image.patch_embed.weight", {cfg.patch * cfg.patch * cfg.channels, d}, seed, false);
    patch_bias_ = init_constant(store, "image.patch_embed.bias", {1, d}, 0.0, false);
    cls_ = init_normal(store, "image.cls", {1, d}, seed, false);
    pos_ = init_normal(store, "image.pos", {np + 1, d}, seed, false);
    if (cfg.tuning == TuningStrategy::Prompt)
      prompt_tokens_ = init_normal(store, "image.prompt_tokens", {cfg.prompt_len, d}, seed, false);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      const std::string prefix = "image.block" + std::to_string(i);
      blocks_.push_back(TransformerBlock::create(store, prefix, d, cfg.heads, false, seed));
      if (cfg.tuning == TuningStrategy::Adapter) blocks_.back().add_adapters(store, prefix, d, cfg.adapter_rank, seed);
    }
    proj_ = init_fan_in(store, "image.proj", {d, cfg.latent}, seed, false);
  }

  const ImageEncoderConfig& config() const { return cfg_; }
  bool initialized() const { return proj_.defined(); }
  bool has_adapters() const { return !blocks_.empty() && blocks_.front().adapter_attn.has_value(); }
  bool has_prompt_tokens() const { return prompt_tokens_.defined(); }

  std::size_t sequence_length() const {
    return 1 + (prompt_tokens_.defined() ? cfg_.prompt_len : 0) + cfg_.num_patches();
  }

  /// Token matrix (batch * sequence_length) x d_in_v: [CLS], visual prompt
  /// tokens (Prompt strategy only), patch embeddings; positional embeddings
  /// on CLS and patch rows.
  Var embed(const std::vector<const Tensor*>& images) const {
    require_initialized();
    const std::size_t batch = images.size(), np = cfg_.num_patches();
    const std::size_t nprompt = prompt_tokens_.defined() ? cfg_.prompt_len : 0;
    Var patches = ad::constant(extract_patches(images, cfg_));
    Var emb = ad::add_row(ad::matmul(patches, patch_weight_), patch_bias_);
    std::vector<std::size_t> patch_pos(np);
    for (std::size_t i = 0; i < np; ++i) patch_pos[i] = i + 1;
    emb = ad::add(emb, ad::tile_rows(ad::gather_rows(pos_, patch_pos), batch));
    Var cls = ad::tile_rows(ad::add(cls_, ad::gather_rows(pos_, {0})), batch);
    std::vector<Var> parts{cls, emb};
    if (nprompt) parts.push_back(ad::tile_rows(prompt_tokens_, batch));
    // concat layout: [cls x B | patches x B*np | prompts x B*nprompt]
    std::vector<std::size_t> order;
    order.reserve(batch * sequence_length());
    for (std::size_t b = 0; b < batch; ++b) {
      order.push_back(b);
      for (std::size_t k = 0; k < nprompt; ++k) order.push_back(batch + batch * np + b * nprompt + k);
      for (std::size_t k = 0; k < np; ++k) order.push_back(batch + b * np + k);
    }
    return ad::gather_rows(ad::concat_rows(parts), std::move(order));
  }

  Var patchify(const Tensor& image) const { return embed({&image}); }

  EncodedImage encode(const std::vector<const Tensor*>& images, const ForwardContext& ctx = {}) const {
    require_initialized();
    const std::size_t batch = images.size(), seq = sequence_length(), np = cfg_.num_patches();
    Var x = embed(images);
    for (const auto& block : blocks_) x = block.forward(x, batch, seq, false, cfg_.adapter_dropout, ctx);
    std::vector<std::size_t> cls_rows(batch), patch_rows;
    patch_rows.reserve(batch * np);
    for (std::size_t b = 0; b < batch; ++b) {
      cls_rows[b] = b * seq;
      for (std::size_t k = 0; k < np; ++k) patch_rows.push_back(b * seq + (seq - np) + k);
    }
    EncodedImage out;
    out.x_cls = ad::matmul(ad::gather_rows(x, cls_rows), proj_);
    out.patch_tokens = ad::matmul(ad::gather_rows(x, std::move(patch_rows)), proj_);
    out.batch = batch;
    out.num_patches = np;
    return out;
  }

  EncodedImage encode(const Tensor& image, const ForwardContext& ctx = {}) const { return encode({&image}, ctx); }

 private:
  void require_initialized() const {
    if (!initialized()) throw StateError("image encoder used before initialization");
  }

  ImageEncoderConfig cfg_;
  Var patch_weight_, patch_bias_, cls_, pos_, prompt_tokens_, proj_;
  std::vector<TransformerBlock> blocks_;
};

/// Causal text encoder; the representation of a prompt is its final token,
/// projected to the latent width. Always frozen.
class TextEncoder {
 public:
  TextEncoder() = default;

  TextEncoder(ParameterStore& store, const TextEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    pos_ = init_normal(store, "text.pos", {cfg.max_len, cfg.width_in}, seed, false);
    for (std::size_t i = 0; i < cfg.depth; ++i)
      blocks_.push_back(
          TransformerBlock::create(store, "text.block" + std::to_string(i), cfg.width_in, cfg.heads, false, seed));
    proj_ = init_fan_in(store, "text.proj", {cfg.width_in, cfg.latent}, seed, false);
  }

  const TextEncoderConfig& config() const { return cfg_; }

  /// Encodes `count` prompts of `length` tokens stacked as (count * length) x d_in_t.
  Var encode(const Var& tokens, std::size_t count, std::size_t length) const {
    if (!proj_.defined()) throw StateError("text encoder used before initialization");
    if (length > cfg_.max_len)
      throw LengthError("prompt of " + std::to_string(length) + " tokens exceeds max_len " +
                        std::to_string(cfg_.max_len));
    if (tokens.rows() != count * length || tokens.cols() != cfg_.width_in)
      throw ShapeError("text tokens of shape " + Tensor::describe(tokens.tensor().shape));
    std::vector<std::size_t> rows(length);
    for (std::size_t i = 0; i < length; ++i) rows[i] = i;
    Var x = ad::add(tokens, ad::tile_rows(ad::gather_rows(pos_, rows), count));
    for (const auto& block : blocks_) x = block.forward(x, count, length, true, 0.0, {});
    std::vector<std::size_t> last(count);
    for (std::size_t i = 0; i < count; ++i) last[i] = i * length + length - 1;
    return ad::matmul(ad::gather_rows(x, std::move(last)), proj_);
  }

  Var encode(const Var& prompt) const { return encode(prompt, 1, prompt.rows()); }

 private:
  TextEncoderConfig cfg_;
  Var pos_, proj_;
  std::vector<TransformerBlock> blocks_;
};

/// Applies a visual tuning strategy to the image-encoder parameters in `store`
/// and returns the names that became trainable.
inline std::set<std::string> set_tuning_strategy(ParameterStore& store, const ImageEncoder& encoder,
                                                 TuningStrategy strategy) {
  if (strategy == TuningStrategy::Adapter && !encoder.has_adapters())
    throw ConfigError("adapter strategy requires a model built with adapters");
  if (strategy == TuningStrategy::Prompt && !encoder.has_prompt_tokens())
    throw ConfigError("prompt strategy requires a model built with visual prompt tokens");
  const std::string last_block = "image.block" + std::to_string(encoder.config().depth - 1) + ".";
  std::set<std::string> trainable;
  for (auto& p : store.all()) {
    if (!starts_with(p.name, "image.")) continue;
    const bool adapter = p.name.find(".adapter_") != std::string::npos;
    const bool prompt = p.name == "image.prompt_tokens";
    bool on = false;
    switch (strategy) {
      case TuningStrategy::None: on = false; break;
      case TuningStrategy::Full: on = !adapter && !prompt; break;
      case TuningStrategy::Bias: on = ends_with(p.name, ".bias"); break;
      case TuningStrategy::Proj: on = p.name == "image.proj"; break;
      case TuningStrategy::Partial: on = encoder.config().depth > 0 && starts_with(p.name, last_block) && !adapter; break;
      case TuningStrategy::Prompt: on = prompt; break;
      case TuningStrategy::Adapter: on = adapter; break;
    }
    p.var.set_requires_grad(on);
    if (on) trainable.insert(p.name);
  }
  return trainable;
}

}  // namespace czsl
