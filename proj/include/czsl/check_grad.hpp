#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "czsl/numerics/gradcheck.hpp"
#include "czsl/train.hpp"

namespace czsl {

/// Small model used for finite-difference checks: width 16, one block per
/// encoder and one traction block.
inline RunConfig gradient_check_config(TuningStrategy strategy) {
  RunConfig c;
  c.attribute_dropout = 0.0;
  auto& m = c.model;
  m.image.width_in = 16;
  m.image.latent = 16;
  m.image.depth = 1;
  m.image.adapter_rank = 4;
  m.image.adapter_dropout = 0.0;
  m.image.tuning = strategy;
  m.text.width_in = 16;
  m.text.latent = 16;
  m.text.depth = 1;
  m.cmt.layers = 1;
  m.cmt.dropout = 0.0;
  return c;
}

struct ModelGradReport {
  TuningStrategy strategy = TuningStrategy::None;
  GradCheckReport report;
  double seconds = 0.0;
};

namespace detail {

// Strategies whose networks are structurally identical share one check: the
// per-scalar gradient does not depend on which other scalars are trainable.
inline TuningStrategy structural_group(TuningStrategy s) {
  return s == TuningStrategy::Prompt || s == TuningStrategy::Adapter ? s : TuningStrategy::Full;
}

}  // namespace detail

/// Finite-difference check of the full training loss on a batch of `batch`
/// training samples, for every requested strategy. Zero-initialized adapter
/// up-projections are perturbed first so the down-projections receive gradient.
inline std::vector<ModelGradReport> check_model_gradients(const SplitManifest& manifest,
                                                          const std::vector<TuningStrategy>& strategies,
                                                          std::size_t batch = 4, double step = 1e-5,
                                                          std::uint64_t seed = 1) {
  const auto& train_samples = manifest.split("train");
  if (train_samples.size() < batch) throw DataError("not enough training samples for the gradient check");
  const TargetSpace seen = seen_space(manifest);
  std::vector<const Tensor*> images;
  std::vector<std::size_t> states, objects, pairs;
  const std::size_t stride = train_samples.size() / batch;
  for (std::size_t k = 0; k < batch; ++k) {
    const Sample& s = train_samples[k * stride];
    if (!s.image) throw DataError("gradient check needs image data");
    images.push_back(&*s.image);
    states.push_back(s.state);
    objects.push_back(s.object);
    pairs.push_back(seen.index_of(s.pair()));
  }
  std::vector<ModelGradReport> out;
  std::map<TuningStrategy, std::pair<GradCheckReport, double>> done;
  for (TuningStrategy strategy : strategies) {
    const TuningStrategy group = detail::structural_group(strategy);
    const RunConfig cfg = gradient_check_config(group);
    auto model = build_model(cfg, manifest.states.size(), manifest.objects.size());
    Rng rng = make_rng(seed, "check_grad.perturb");
    for (auto& p : model->parameters().all())
      if (ends_with(p.name, ".up")) p.var.tensor() = normal_tensor(p.var.tensor().shape, kInitStd, rng);
    if (!done.count(group)) {
      const auto start = std::chrono::steady_clock::now();
      auto loss = [&] {
        const BatchOutput o = model->forward(images, seen.pairs, 0.0, {});
        return total_loss(o.p_s, o.p_o, o.p_c, states, objects, pairs, cfg.alphas, cfg.mask).total;
      };
      GradCheckReport full = finite_difference_check(model->parameters(), loss, step);
      done[group] = {full, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    }
    // The strategy's own trainable set on this network.
    set_tuning_strategy(model->parameters(), model->image_encoder(), strategy);
    const auto names = model->parameters().trainable_names();
    ModelGradReport r;
    r.strategy = strategy;
    r.report = done[group].first.restricted_to(std::set<std::string>(names.begin(), names.end()));
    r.seconds = done[group].second;
    out.push_back(r);
  }
  return out;
}

}  // namespace czsl
