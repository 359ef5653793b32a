#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/cmt.hpp"
#include "czsl/data.hpp"
#include "czsl/encoders.hpp"
#include "czsl/eval.hpp"
#include "czsl/multipath.hpp"
#include "czsl/prompts.hpp"

namespace czsl {

struct ModelConfig {
  ImageEncoderConfig image;
  TextEncoderConfig text;
  CmtConfig cmt;
  std::size_t prompt_len = 3;  // prefix tokens m
  PrefixSharing prefix_sharing = PrefixSharing::Independent;
  VocabSharing vocab_sharing = VocabSharing::Shared;
  double tau = 0.05;

  std::size_t latent() const { return image.latent; }

  void validate() const {
    image.validate();
    text.validate();
    if (image.latent != text.latent) throw ConfigError("image and text latent widths differ");
    if (prompt_len == 0) throw ConfigError("prompt_len must be positive");
    if (prompt_len + 2 > text.max_len) throw ConfigError("composition prompts exceed the text encoder max_len");
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    cmt.validate(latent());
  }
};

/// Branch distributions for a batch: rows are images.
struct BatchOutput {
  Var p_s;  // B x |S|
  Var p_o;  // B x |O|
  Var p_c;  // B x |pairs|
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::size_t num_states, std::size_t num_objects, std::uint64_t seed)
      : cfg_(cfg), num_states_(num_states), num_objects_(num_objects), seed_(seed) {
    cfg.validate();
    image_ = ImageEncoder(store_, cfg.image, seed);
    text_ = TextEncoder(store_, cfg.text, seed);
    prompts_ = PromptLearner(store_, num_states, num_objects, cfg.prompt_len, cfg.text.width_in, cfg.prefix_sharing,
                             cfg.vocab_sharing, seed);
    disentanglers_ = Disentanglers::create(store_, cfg.latent(), seed);
    cmt_ = CmtStack(store_, cfg.latent(), cfg.cmt, seed);
    set_tuning_strategy(store_, image_, cfg.image.tuning);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_states() const { return num_states_; }
  std::size_t num_objects() const { return num_objects_; }
  std::uint64_t seed() const { return seed_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const ImageEncoder& image_encoder() const { return image_; }
  CmtStack& cmt() { return cmt_; }
  const CmtStack& cmt() const { return cmt_; }

  /// Prompt representations of every state, object and listed pair, stacked
  /// in that order (|S| + |O| + |pairs| rows of width d).
  Var prompt_representations(const std::vector<Pair>& pairs, double attr_dropout, const ForwardContext& ctx) const {
    const std::size_t m = cfg_.prompt_len;
    const auto tokens = prompts_.build_all(pairs, attr_dropout, ctx);
    Var t_s = text_.encode(tokens.states, num_states_, m + 1);
    Var t_o = text_.encode(tokens.objects, num_objects_, m + 1);
    Var t_c = text_.encode(tokens.compositions, pairs.size(), m + 2);
    return ad::concat_rows({t_s, t_o, t_c});
  }

  /// Full forward pass. `pairs` is the composition label space for p_c.
  BatchOutput forward(const std::vector<const Tensor*>& images, const std::vector<Pair>& pairs, double attr_dropout,
                      const ForwardContext& ctx) const {
    if (images.empty()) throw DataError("empty image batch");
    if (pairs.empty()) throw EmptyCandidateError("empty composition label space");
    const std::size_t batch = images.size();
    const EncodedImage enc = image_.encode(images, ctx);
    const BranchFeatures feats = disentangle(enc.x_cls, disentanglers_);
    const Var reps = prompt_representations(pairs, attr_dropout, ctx);
    const std::size_t per_item = reps.rows();
    Var traced = ad::tile_rows(reps, batch);
    if (cmt_.enabled()) traced = cmt_.apply(traced, enc.patch_tokens, batch, per_item, ctx);
    auto slice = [&](std::size_t offset, std::size_t count) {
      std::vector<std::size_t> rows;
      rows.reserve(batch * count);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t k = 0; k < count; ++k) rows.push_back(b * per_item + offset + k);
      return ad::gather_rows(traced, std::move(rows));
    };
    BatchOutput out;
    out.p_s = branch_distribution(feats.state, slice(0, num_states_), num_states_, cfg_.tau);
    out.p_o = branch_distribution(feats.object, slice(num_states_, num_objects_), num_objects_, cfg_.tau);
    out.p_c = branch_distribution(feats.composition, slice(num_states_ + num_objects_, pairs.size()), pairs.size(),
                                  cfg_.tau);
    return out;
  }

  /// Integrated scores over `space` for every sample, evaluated in batches.
  ScoreMatrix score(const std::vector<Sample>& samples, const TargetSpace& space, const BranchMask& mask = {},
                    std::size_t batch_size = 64) const {
    ScoreMatrix m;
    m.samples = samples.size();
    m.compositions = space.size();
    m.pair_seen = space.seen;
    m.scores.reserve(m.samples * m.compositions);
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
      const std::size_t end = std::min(samples.size(), start + batch_size);
      std::vector<const Tensor*> images;
      for (std::size_t n = start; n < end; ++n) {
        if (!samples[n].image) throw DataError("sample without image data");
        images.push_back(&*samples[n].image);
      }
      const BatchOutput out = forward(images, space.pairs, 0.0, {});
      const std::size_t ns = num_states_, no = num_objects_, nc = space.size();
      for (std::size_t b = 0; b < images.size(); ++b) {
        const auto row = integrate(std::span<const double>(out.p_c.values().data() + b * nc, nc),
                                   std::span<const double>(out.p_s.values().data() + b * ns, ns),
                                   std::span<const double>(out.p_o.values().data() + b * no, no), space.pairs, mask);
        m.scores.insert(m.scores.end(), row.begin(), row.end());
      }
    }
    for (const Sample& s : samples) {
      const std::size_t t = space.index_of(s.pair());
      m.truth.push_back(t);
      m.sample_seen.push_back(space.seen[t]);
    }
    m.validate();
    return m;
  }

  /// Head-averaged attention of the last traction block for the composition
  /// prompt of `pair` over the patches of `image`.
  AttentionMap attention_for(const Tensor& image, const Pair& pair) const {
    if (!cmt_.enabled()) throw StateError("attention export needs the traction module");
    const EncodedImage enc = image_.encode(image);
    const Var reps = prompt_representations({pair}, 0.0, {});
    Var t = ad::gather_rows(reps, {num_states_ + num_objects_});
    const auto& blocks = cmt_.blocks();
    for (std::size_t i = 0; i + 1 < blocks.size(); ++i) t = blocks[i].forward(t, enc.patch_tokens, 1, 1, 0.0, {});
    return blocks.back().export_attention(t, enc.patch_tokens);
  }

 private:
  ModelConfig cfg_;
  std::size_t num_states_ = 0, num_objects_ = 0;
  std::uint64_t seed_ = 0;
  ParameterStore store_;
  ImageEncoder image_;
  TextEncoder text_;
  PromptLearner prompts_;
  Disentanglers disentanglers_;
  CmtStack cmt_;
};

}  // namespace czsl
