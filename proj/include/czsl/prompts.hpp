#pragma once

#include <string>
#include <utility>
#include <vector>

#include "czsl/encoders.hpp"

namespace czsl {

/// Which branches share a prefix block. Independent is "c|s|o", AllShared is
/// "cso" and PrimitivesShared is "c|so".
enum class PrefixSharing { Independent, AllShared, PrimitivesShared };
/// Shared is one vocabulary for all branches ("cso"); Independent gives each
/// branch its own copy ("c|s|o").
enum class VocabSharing { Shared, Independent };

inline std::string to_string(PrefixSharing s) {
  switch (s) {
    case PrefixSharing::Independent: return "c|s|o";
    case PrefixSharing::AllShared: return "cso";
    case PrefixSharing::PrimitivesShared: return "c|so";
  }
  return "?";
}
inline std::string to_string(VocabSharing s) { return s == VocabSharing::Shared ? "cso" : "c|s|o"; }

inline PrefixSharing parse_prefix_sharing(const std::string& s) {
  if (s == "c|s|o") return PrefixSharing::Independent;
  if (s == "cso") return PrefixSharing::AllShared;
  if (s == "c|so") return PrefixSharing::PrimitivesShared;
  throw ConfigError("unknown prefix sharing mode '" + s + "'");
}
inline VocabSharing parse_vocab_sharing(const std::string& s) {
  if (s == "cso") return VocabSharing::Shared;
  if (s == "c|s|o") return VocabSharing::Independent;
  throw ConfigError("unknown vocabulary sharing mode '" + s + "'");
}

/// One learnable token per state (rows of `states`) and per object.
struct PrimitiveVocabulary {
  Var states;   // |S| x d_in_t
  Var objects;  // |O| x d_in_t

  std::size_t num_states() const { return states.rows(); }
  std::size_t num_objects() const { return objects.rows(); }
};

/// Learnable prefixes, m x d_in_t each. Shared configurations alias the same
/// parameter.
struct PrefixSet {
  Var state;
  Var object;
  Var composition;

  std::size_t length() const { return state.rows(); }
};

/// Token sequences for one pair: state (m+1), object (m+1), composition (m+2).
struct PromptTriple {
  Var state;
  Var object;
  Var composition;
};

inline std::pair<PrimitiveVocabulary, PrefixSet> init_prompts(ParameterStore& store, std::size_t num_states,
                                                              std::size_t num_objects, std::size_t prefix_len,
                                                              std::size_t token_width, std::uint64_t seed,
                                                              const std::string& scope = "prompt") {
  if (num_states == 0 || num_objects == 0 || prefix_len == 0 || token_width == 0)
    throw ConfigError("prompt sizes must be positive");
  PrimitiveVocabulary vocab;
  vocab.states = init_normal(store, scope + ".vocab.states", {num_states, token_width}, seed, true);
  vocab.objects = init_normal(store, scope + ".vocab.objects", {num_objects, token_width}, seed, true);
  PrefixSet prefixes;
  prefixes.state = init_normal(store, scope + ".prefix.state", {prefix_len, token_width}, seed, true);
  prefixes.object = init_normal(store, scope + ".prefix.object", {prefix_len, token_width}, seed, true);
  prefixes.composition = init_normal(store, scope + ".prefix.composition", {prefix_len, token_width}, seed, true);
  return {vocab, prefixes};
}

namespace detail {

// Row indices into concat([prefix; table]) selecting prefix rows then `extra`.
inline std::vector<std::size_t> prompt_rows(std::size_t m, std::initializer_list<std::size_t> extra) {
  std::vector<std::size_t> rows(m);
  for (std::size_t k = 0; k < m; ++k) rows[k] = k;
  for (std::size_t e : extra) rows.push_back(m + e);
  return rows;
}

}  // namespace detail

/// Assembles [prefix, v_s], [prefix, v_o] and [prefix, v_s, v_o]. Vocabulary
/// rows are gathered through the graph, so gradients reach the shared rows
/// from every branch.
inline PromptTriple build_prompts(std::size_t state, std::size_t object, const PrimitiveVocabulary& vocab,
                                  const PrefixSet& prefixes) {
  if (state >= vocab.num_states()) throw IndexError("state index " + std::to_string(state) + " out of range");
  if (object >= vocab.num_objects()) throw IndexError("object index " + std::to_string(object) + " out of range");
  const std::size_t m = prefixes.length(), ns = vocab.num_states();
  PromptTriple t;
  t.state = ad::gather_rows(ad::concat_rows({prefixes.state, vocab.states}), detail::prompt_rows(m, {state}));
  t.object = ad::gather_rows(ad::concat_rows({prefixes.object, vocab.objects}), detail::prompt_rows(m, {object}));
  t.composition = ad::gather_rows(ad::concat_rows({prefixes.composition, vocab.states, vocab.objects}),
                                  detail::prompt_rows(m, {state, ns + object}));
  return t;
}

/// Element-wise inverted dropout over the state vocabulary. Objects pass
/// through untouched; rate 0 or evaluation returns the vocabulary unchanged.
inline PrimitiveVocabulary attribute_dropout(const PrimitiveVocabulary& vocab, double rate, const ForwardContext& ctx) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("attribute dropout rate must lie in [0, 1)");
  if (!ctx.stochastic() || rate == 0.0) return vocab;
  PrimitiveVocabulary out = vocab;
  out.states = ad::dropout(vocab.states, rate, *ctx.rng);
  return out;
}

/// Prompt parameters for the three branches under a sharing configuration.
class PromptLearner {
 public:
  PromptLearner() = default;

  PromptLearner(ParameterStore& store, std::size_t num_states, std::size_t num_objects, std::size_t prefix_len,
                std::size_t token_width, PrefixSharing prefix_mode, VocabSharing vocab_mode, std::uint64_t seed)
      : prefix_mode_(prefix_mode), vocab_mode_(vocab_mode) {
    if (num_states == 0 || num_objects == 0 || prefix_len == 0 || token_width == 0)
      throw ConfigError("prompt sizes must be positive");
    auto normal = [&](const std::string& name, std::size_t rows) {
      return init_normal(store, name, {rows, token_width}, seed, true);
    };
    if (vocab_mode == VocabSharing::Shared) {
      vocab_c_.states = normal("prompt.vocab.states", num_states);
      vocab_c_.objects = normal("prompt.vocab.objects", num_objects);
      vocab_s_ = vocab_o_ = vocab_c_;
    } else {
      vocab_c_.states = normal("prompt.vocab.composition.states", num_states);
      vocab_c_.objects = normal("prompt.vocab.composition.objects", num_objects);
      vocab_s_.states = normal("prompt.vocab.state.states", num_states);
      vocab_o_.objects = normal("prompt.vocab.object.objects", num_objects);
    }
    switch (prefix_mode) {
      case PrefixSharing::Independent:
        prefixes_.state = normal("prompt.prefix.state", prefix_len);
        prefixes_.object = normal("prompt.prefix.object", prefix_len);
        prefixes_.composition = normal("prompt.prefix.composition", prefix_len);
        break;
      case PrefixSharing::AllShared:
        prefixes_.state = prefixes_.object = prefixes_.composition = normal("prompt.prefix.shared", prefix_len);
        break;
      case PrefixSharing::PrimitivesShared:
        prefixes_.composition = normal("prompt.prefix.composition", prefix_len);
        prefixes_.state = prefixes_.object = normal("prompt.prefix.primitive", prefix_len);
        break;
    }
  }

  const PrefixSet& prefixes() const { return prefixes_; }
  const PrimitiveVocabulary& composition_vocabulary() const { return vocab_c_; }
  PrefixSharing prefix_mode() const { return prefix_mode_; }
  VocabSharing vocab_mode() const { return vocab_mode_; }
  std::size_t prefix_length() const { return prefixes_.length(); }
  std::size_t num_states() const { return vocab_c_.num_states(); }
  std::size_t num_objects() const { return vocab_c_.num_objects(); }

  /// Stacked token sequences for every state / object / listed pair, with
  /// attribute dropout applied to state vocabulary rows in training.
  struct Batch {
    Var states;        // (|S| * (m+1)) x d_in_t
    Var objects;       // (|O| * (m+1)) x d_in_t
    Var compositions;  // (|pairs| * (m+2)) x d_in_t
  };

  Batch build_all(const std::vector<std::pair<std::size_t, std::size_t>>& pairs, double attr_dropout,
                  const ForwardContext& ctx) const {
    const std::size_t m = prefix_length(), ns = num_states(), no = num_objects();
    // One dropout mask per distinct state table so shared storage stays shared.
    PrimitiveVocabulary vc = attribute_dropout(vocab_c_, attr_dropout, ctx);
    Var s_states = vocab_mode_ == VocabSharing::Shared ? vc.states
                                                       : attribute_dropout(vocab_s_, attr_dropout, ctx).states;
    Var o_objects = vocab_mode_ == VocabSharing::Shared ? vc.objects : vocab_o_.objects;
    Batch b;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ns; ++i)
      for (std::size_t r : detail::prompt_rows(m, {i})) rows.push_back(r);
    b.states = ad::gather_rows(ad::concat_rows({prefixes_.state, s_states}), rows);
    rows.clear();
    for (std::size_t j = 0; j < no; ++j)
      for (std::size_t r : detail::prompt_rows(m, {j})) rows.push_back(r);
    b.objects = ad::gather_rows(ad::concat_rows({prefixes_.object, o_objects}), rows);
    rows.clear();
    for (const auto& [i, j] : pairs) {
      if (i >= ns || j >= no) throw IndexError("pair (" + std::to_string(i) + ", " + std::to_string(j) + ") out of range");
      for (std::size_t r : detail::prompt_rows(m, {i, ns + j})) rows.push_back(r);
    }
    b.compositions = ad::gather_rows(ad::concat_rows({prefixes_.composition, vc.states, vc.objects}), rows);
    return b;
  }

 private:
  PrefixSharing prefix_mode_ = PrefixSharing::Independent;
  VocabSharing vocab_mode_ = VocabSharing::Shared;
  PrefixSet prefixes_;
  PrimitiveVocabulary vocab_c_, vocab_s_, vocab_o_;
};

}  // namespace czsl
