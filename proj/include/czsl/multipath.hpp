#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "czsl/encoders.hpp"

namespace czsl {

/// Two-layer GELU MLP, width d -> d -> d, with fan-in scaled weights.
struct Mlp {
  Var w1, b1, w2, b2;

  static Mlp create(ParameterStore& store, const std::string& prefix, std::size_t d, std::uint64_t seed) {
    Mlp m;
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    m.w1 = init_normal(store, prefix + ".fc1.weight", {d, d}, seed, true, std);
    m.b1 = init_constant(store, prefix + ".fc1.bias", {1, d}, 0.0, true);
    m.w2 = init_normal(store, prefix + ".fc2.weight", {d, d}, seed, true, std);
    m.b2 = init_constant(store, prefix + ".fc2.bias", {1, d}, 0.0, true);
    return m;
  }

  Var forward(const Var& x) const {
    if (x.cols() != w1.rows()) throw ShapeError("disentangler input width " + std::to_string(x.cols()));
    return ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(x, w1), b1)), w2), b2);
  }
};

struct Disentanglers {
  Mlp state;
  Mlp object;

  static Disentanglers create(ParameterStore& store, std::size_t d, std::uint64_t seed) {
    return {Mlp::create(store, "disentangler.state", d, seed), Mlp::create(store, "disentangler.object", d, seed)};
  }
};

/// Branch features; `composition` is the image representation itself.
struct BranchFeatures {
  Var state;
  Var object;
  Var composition;
};

inline BranchFeatures disentangle(const Var& x_cls, const Disentanglers& d) {
  return {d.state.forward(x_cls), d.object.forward(x_cls), x_cls};
}

/// Per-image branch distributions.
struct BranchProbabilities {
  std::vector<double> state;
  std::vector<double> object;
  std::vector<double> composition;
};

/// Cosine similarity scaled by 1/tau, softmaxed per row: features is B x d and
/// candidates stacks `per_row` candidate representations for every row.
inline Var branch_distribution(const Var& features, const Var& candidates, std::size_t per_row, double tau) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive");
  Var logits = ad::grouped_dot(ad::l2_normalize_rows(features), ad::l2_normalize_rows(candidates), per_row);
  return ad::softmax_rows(logits, tau);
}

/// Single-image probabilities from fixed prompt representations (one row per
/// label in each tensor).
inline BranchProbabilities branch_probabilities(const std::vector<double>& x_s, const std::vector<double>& x_o,
                                                const std::vector<double>& x_c, const Tensor& t_states,
                                                const Tensor& t_objects, const Tensor& t_pairs, double tau) {
  auto one = [tau](const std::vector<double>& x, const Tensor& t) {
    if (t.cols() != x.size()) throw ShapeError("feature width does not match prompt representations");
    return branch_distribution(Var(Tensor::row(x)), Var(t), t.rows(), tau).values();
  };
  return {one(x_s, t_states), one(x_o, t_objects), one(x_c, t_pairs)};
}

struct LossWeights {
  double state = 1.0;
  double object = 1.0;
  double composition = 1.0;

  void validate() const {
    if (state < 0.0 || object < 0.0 || composition < 0.0) throw ConfigError("loss weights must be non-negative");
    if (state == 0.0 && object == 0.0 && composition == 0.0) throw ConfigError("loss weights cannot all be zero");
  }
};

enum class MaskPhase { TrainingAndInference, InferenceOnly };

/// Branches switched off for ablation. InferenceOnly keeps all training losses.
struct BranchMask {
  bool use_c = true;
  bool use_s = true;
  bool use_o = true;
  MaskPhase phase = MaskPhase::TrainingAndInference;

  void validate() const {
    if (!use_c && !use_s && !use_o) throw ConfigError("branch mask must keep at least one branch");
  }
  bool train_c() const { return use_c || phase == MaskPhase::InferenceOnly; }
  bool train_s() const { return use_s || phase == MaskPhase::InferenceOnly; }
  bool train_o() const { return use_o || phase == MaskPhase::InferenceOnly; }

  std::string label() const {
    std::string s;
    s += use_c ? "c" : "-";
    s += use_s ? "s" : "-";
    s += use_o ? "o" : "-";
    return s;
  }
};

struct BranchLosses {
  Var state;
  Var object;
  Var composition;
  Var total;
};

/// alpha_s L_s + alpha_o L_o + alpha_c L_c over batch-mean cross-entropies.
/// Branches removed from training by the mask contribute nothing to `total`.
inline BranchLosses total_loss(const Var& p_s, const Var& p_o, const Var& p_c, std::span<const std::size_t> states,
                               std::span<const std::size_t> objects, std::span<const std::size_t> pairs,
                               const LossWeights& weights, const BranchMask& mask) {
  weights.validate();
  mask.validate();
  if (states.empty()) throw DataError("empty training batch");
  BranchLosses out;
  out.state = ad::cross_entropy_mean(p_s, states);
  out.object = ad::cross_entropy_mean(p_o, objects);
  out.composition = ad::cross_entropy_mean(p_c, pairs);
  std::vector<Var> terms;
  if (mask.train_s()) terms.push_back(ad::scale(out.state, weights.state));
  if (mask.train_o()) terms.push_back(ad::scale(out.object, weights.object));
  if (mask.train_c()) terms.push_back(ad::scale(out.composition, weights.composition));
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  out.total = total;
  return out;
}

/// p~(c_ij) = p_c(c_ij) + p_s(i) p_o(j). A masked composition branch drops
/// p_c; a masked state or object branch drops the product term.
inline std::vector<double> integrate(std::span<const double> p_c, std::span<const double> p_s,
                                     std::span<const double> p_o,
                                     const std::vector<std::pair<std::size_t, std::size_t>>& pair_index,
                                     const BranchMask& mask = {}) {
  if (pair_index.size() != p_c.size())
    throw IndexError("pair index map covers " + std::to_string(pair_index.size()) + " of " +
                     std::to_string(p_c.size()) + " compositions");
  const bool product = mask.use_s && mask.use_o;
  std::vector<double> out(p_c.size());
  for (std::size_t k = 0; k < p_c.size(); ++k) {
    const auto [i, j] = pair_index[k];
    if (i >= p_s.size() || j >= p_o.size())
      throw IndexError("composition " + std::to_string(k) + " maps outside the primitive distributions");
    out[k] = (mask.use_c ? p_c[k] : 0.0) + (product ? p_s[i] * p_o[j] : 0.0);
  }
  return out;
}

/// Argmax over candidates; ties resolve to the lowest index. `allowed`, when
/// given, restricts the candidates.
inline std::size_t predict(std::span<const double> scores, const std::vector<bool>* allowed = nullptr) {
  std::size_t best = scores.size();
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (allowed && !(*allowed)[k]) continue;
    if (best == scores.size() || scores[k] > scores[best]) best = k;
  }
  if (best == scores.size()) throw EmptyCandidateError("no candidate composition to predict from");
  return best;
}

}  // namespace czsl
