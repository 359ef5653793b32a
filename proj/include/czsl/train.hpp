#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/model.hpp"

namespace czsl {

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };

/// Verbosity from CZSL_LOG_LEVEL (quiet, info, debug); info by default.
inline LogLevel log_level() {
  const char* env = std::getenv("CZSL_LOG_LEVEL");
  if (!env) return LogLevel::Info;
  const std::string v = env;
  if (v == "quiet" || v == "0") return LogLevel::Quiet;
  if (v == "debug" || v == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

inline void log(LogLevel level, const std::string& message) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) std::cerr << message << "\n";
}

// ---------------------------------------------------------------------------
// Run configuration

enum class LambdaMode { VectorTrainable, VectorFrozen, ScalarTrainable, ScalarFrozen };

inline std::string to_string(LambdaMode m) {
  switch (m) {
    case LambdaMode::VectorTrainable: return "vector-trainable";
    case LambdaMode::VectorFrozen: return "vector-frozen";
    case LambdaMode::ScalarTrainable: return "scalar-trainable";
    case LambdaMode::ScalarFrozen: return "scalar-frozen";
  }
  return "?";
}

inline LambdaMode parse_lambda_mode(const std::string& s) {
  for (auto m : {LambdaMode::VectorTrainable, LambdaMode::VectorFrozen, LambdaMode::ScalarTrainable,
                 LambdaMode::ScalarFrozen})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown lambda mode '" + s + "'");
}

/// Branch mask as "cso" with '-' for removed branches, e.g. "c--".
inline BranchMask parse_branch_mask(const std::string& s, MaskPhase phase) {
  if (s.size() != 3 || (s[0] != 'c' && s[0] != '-') || (s[1] != 's' && s[1] != '-') || (s[2] != 'o' && s[2] != '-'))
    throw ConfigError("branch mask must look like 'cso', 'c--' or '-so', got '" + s + "'");
  BranchMask m{s[0] == 'c', s[1] == 's', s[2] == 'o', phase};
  m.validate();
  return m;
}

inline MaskPhase parse_mask_phase(const std::string& s) {
  if (s == "train+inference") return MaskPhase::TrainingAndInference;
  if (s == "inference") return MaskPhase::InferenceOnly;
  throw ConfigError("unknown mask phase '" + s + "' (expected train+inference or inference)");
}

inline std::string to_string(MaskPhase p) {
  return p == MaskPhase::TrainingAndInference ? "train+inference" : "inference";
}

struct RunConfig {
  // optimization
  double learning_rate = 2.5e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 15;
  std::size_t lr_decay_every = 5;
  double lr_decay = 0.5;
  double attribute_dropout = 0.3;
  double weight_decay = 1e-5;
  LossWeights alphas;
  std::uint64_t seed = 1;
  bool validate_each_epoch = true;
  // protocol
  World world = World::Closed;
  BranchMask mask;
  LambdaMode lambda_mode = LambdaMode::VectorTrainable;
  // architecture
  ModelConfig model;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (lr_decay_every == 0 || !(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("invalid learning-rate schedule");
    if (!(attribute_dropout >= 0.0 && attribute_dropout < 1.0)) throw ConfigError("attribute_dropout must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    alphas.validate();
    mask.validate();
    model.validate();
  }

  /// Learning rate for a 1-based epoch.
  double lr_at(std::size_t epoch) const {
    return learning_rate * std::pow(lr_decay, static_cast<double>((epoch - 1) / lr_decay_every));
  }
};

/// Flat key schema shared by config files and --set overrides.
inline nlohmann::json to_json(const RunConfig& c) {
  const auto& m = c.model;
  return {
      {"learning_rate", c.learning_rate},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"lr_decay_every", c.lr_decay_every},
      {"lr_decay", c.lr_decay},
      {"attribute_dropout", c.attribute_dropout},
      {"weight_decay", c.weight_decay},
      {"alpha_c", c.alphas.composition},
      {"alpha_s", c.alphas.state},
      {"alpha_o", c.alphas.object},
      {"seed", c.seed},
      {"validate_each_epoch", c.validate_each_epoch},
      {"world", to_string(c.world)},
      {"branches", c.mask.label()},
      {"mask_phase", to_string(c.mask.phase)},
      {"lambda_mode", to_string(c.lambda_mode)},
      {"cmt", m.cmt.enabled},
      {"cmt_layers", m.cmt.layers},
      {"cmt_heads", m.cmt.heads},
      {"cmt_dropout", m.cmt.dropout},
      {"lambda_init", m.cmt.lambda_init},
      {"tuning", to_string(m.image.tuning)},
      {"image_size", m.image.height},
      {"channels", m.image.channels},
      {"patch", m.image.patch},
      {"image_depth", m.image.depth},
      {"image_width", m.image.width_in},
      {"image_heads", m.image.heads},
      {"adapter_rank", m.image.adapter_rank},
      {"adapter_dropout", m.image.adapter_dropout},
      {"visual_prompt_len", m.image.prompt_len},
      {"text_width", m.text.width_in},
      {"text_depth", m.text.depth},
      {"text_heads", m.text.heads},
      {"text_max_len", m.text.max_len},
      {"latent", m.image.latent},
      {"prompt_len", m.prompt_len},
      {"prefix_sharing", to_string(m.prefix_sharing)},
      {"vocab_sharing", to_string(m.vocab_sharing)},
      {"tau", m.tau},
  };
}

namespace detail {

template <class T>
T json_get(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

inline std::size_t json_count(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("config key '" + key + "' must be a count");
  return v.get<std::size_t>();
}

}  // namespace detail

/// Applies the keys present in `j` on top of `c`; unknown keys are rejected.
inline void apply_config(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  auto& m = c.model;
  std::string branches = c.mask.label();
  MaskPhase phase = c.mask.phase;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = *it;
    auto num = [&] { return detail::json_get<double>(v, k); };
    auto cnt = [&] { return detail::json_count(v, k); };
    auto str = [&] { return detail::json_get<std::string>(v, k); };
    if (k == "learning_rate") c.learning_rate = num();
    else if (k == "batch_size") c.batch_size = cnt();
    else if (k == "epochs") c.epochs = cnt();
    else if (k == "lr_decay_every") c.lr_decay_every = cnt();
    else if (k == "lr_decay") c.lr_decay = num();
    else if (k == "attribute_dropout") c.attribute_dropout = num();
    else if (k == "weight_decay") c.weight_decay = num();
    else if (k == "alpha_c") c.alphas.composition = num();
    else if (k == "alpha_s") c.alphas.state = num();
    else if (k == "alpha_o") c.alphas.object = num();
    else if (k == "seed") c.seed = cnt();
    else if (k == "validate_each_epoch") c.validate_each_epoch = detail::json_get<bool>(v, k);
    else if (k == "world") c.world = parse_world(str());
    else if (k == "branches") branches = str();
    else if (k == "mask_phase") phase = parse_mask_phase(str());
    else if (k == "lambda_mode") c.lambda_mode = parse_lambda_mode(str());
    else if (k == "cmt") m.cmt.enabled = detail::json_get<bool>(v, k);
    else if (k == "cmt_layers") m.cmt.layers = cnt();
    else if (k == "cmt_heads") m.cmt.heads = cnt();
    else if (k == "cmt_dropout") m.cmt.dropout = num();
    else if (k == "lambda_init") m.cmt.lambda_init = num();
    else if (k == "tuning") m.image.tuning = parse_tuning_strategy(str());
    else if (k == "image_size") m.image.height = m.image.width = cnt();
    else if (k == "channels") m.image.channels = cnt();
    else if (k == "patch") m.image.patch = cnt();
    else if (k == "image_depth") m.image.depth = cnt();
    else if (k == "image_width") m.image.width_in = cnt();
    else if (k == "image_heads") m.image.heads = cnt();
    else if (k == "adapter_rank") m.image.adapter_rank = cnt();
    else if (k == "adapter_dropout") m.image.adapter_dropout = num();
    else if (k == "visual_prompt_len") m.image.prompt_len = cnt();
    else if (k == "text_width") m.text.width_in = cnt();
    else if (k == "text_depth") m.text.depth = cnt();
    else if (k == "text_heads") m.text.heads = cnt();
    else if (k == "text_max_len") m.text.max_len = cnt();
    else if (k == "latent") m.image.latent = m.text.latent = cnt();
    else if (k == "prompt_len") m.prompt_len = cnt();
    else if (k == "prefix_sharing") m.prefix_sharing = parse_prefix_sharing(str());
    else if (k == "vocab_sharing") m.vocab_sharing = parse_vocab_sharing(str());
    else if (k == "tau") m.tau = num();
    else throw ConfigError("unknown config key '" + k + "'");
  }
  c.mask = parse_branch_mask(branches, phase);
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  apply_config(c, j);
  c.validate();
  return c;
}

/// Parses "key=value"; the value is read as JSON when possible, else as a string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  apply_config(c, {{key, value}});
}

inline RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("malformed JSON in " + file.string());
  return config_from_json(j);
}

/// Builds a model for the manifest's primitives and applies the lambda mode.
inline std::unique_ptr<Model> build_model(const RunConfig& c, std::size_t num_states, std::size_t num_objects) {
  c.validate();
  ModelConfig mc = c.model;
  mc.cmt.lambda_vectorized = c.lambda_mode == LambdaMode::VectorTrainable || c.lambda_mode == LambdaMode::VectorFrozen;
  mc.cmt.lambda_trainable = c.lambda_mode == LambdaMode::VectorTrainable || c.lambda_mode == LambdaMode::ScalarTrainable;
  return std::make_unique<Model>(mc, num_states, num_objects, c.seed);
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  static bool decays(const std::string& name) {
    return !ends_with(name, ".bias") && !ends_with(name, ".gain") && !ends_with(name, ".lambda");
  }

  void step(ParameterStore& store, double lr, double weight_decay) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& p : store.all()) {
      if (!p.trainable()) continue;
      auto& values = p.var.values();
      const auto& grad = p.var.grad();
      auto& [m, v] = state_[p.name];
      if (m.empty()) {
        m.assign(values.size(), 0.0);
        v.assign(values.size(), 0.0);
      }
      const double wd = decays(p.name) ? weight_decay : 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad ? (*grad)[i] : 0.0;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        values[i] -= lr * ((m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + wd * values[i]);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_s = 0.0, loss_o = 0.0, loss_c = 0.0, loss_all = 0.0;
  std::optional<MetricsReport> val;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j = {{"epoch", e.epoch}, {"lr", e.lr},          {"L_s", e.loss_s},
                      {"L_o", e.loss_o},  {"L_c", e.loss_c},     {"L_all", e.loss_all},
                      {"seconds", e.seconds}};
  if (e.val) j["val"] = to_json(*e.val);
  return j;
}

inline std::string format_epoch(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "epoch %2zu  lr %.3g  L_s %.4f  L_o %.4f  L_c %.4f  L_all %.4f", e.epoch, e.lr,
                e.loss_s, e.loss_o, e.loss_c, e.loss_all);
  std::string s = buf;
  if (e.val) s += "  val " + format_metrics_row(*e.val);
  std::snprintf(buf, sizeof(buf), "  (%.1fs)", e.seconds);
  return s + buf;
}

/// Closed-world metrics of a split.
inline MetricsReport evaluate_split(const Model& model, const SplitManifest& m, const std::string& split,
                                    const BranchMask& mask, World world = World::Closed) {
  return evaluate_scores(model.score(m.split(split), target_space(m, world), mask));
}

/// Trains in place. The callback, when set, receives every epoch log.
inline std::vector<EpochLog> train(Model& model, const SplitManifest& manifest, const RunConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (model.num_states() != manifest.states.size() || model.num_objects() != manifest.objects.size())
    throw ConfigError("model primitives do not match the manifest");
  const auto& samples = manifest.split("train");
  if (samples.empty()) throw DataError("manifest has no training samples");
  const TargetSpace seen = seen_space(manifest);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng = make_rng(cfg.seed, "train.shuffle");
  Rng dropout_rng = make_rng(cfg.seed, "train.dropout");
  const ForwardContext ctx{true, &dropout_rng};
  Adam adam;
  model.cmt().mark_training_started();
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochLog log_entry;
    log_entry.epoch = epoch;
    log_entry.lr = cfg.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<const Tensor*> images;
      std::vector<std::size_t> states, objects, pairs;
      for (std::size_t k = b0; k < b1; ++k) {
        const Sample& s = samples[order[k]];
        if (!s.image) throw DataError("training sample without image data");
        images.push_back(&*s.image);
        states.push_back(s.state);
        objects.push_back(s.object);
        if (!seen.contains(s.pair())) throw DataError("training label " + manifest.describe(s.pair()) + " is not seen");
        pairs.push_back(seen.index_of(s.pair()));
      }
      model.parameters().zero_grad();
      Tape tape;
      const BatchOutput out = model.forward(images, seen.pairs, cfg.attribute_dropout, ctx);
      const BranchLosses losses = total_loss(out.p_s, out.p_o, out.p_c, states, objects, pairs, cfg.alphas, cfg.mask);
      const double total = losses.total.item();
      if (!std::isfinite(total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
      tape.backward(losses.total);
      adam.step(model.parameters(), log_entry.lr, cfg.weight_decay);
      log_entry.loss_s += losses.state.item();
      log_entry.loss_o += losses.object.item();
      log_entry.loss_c += losses.composition.item();
      log_entry.loss_all += total;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    log_entry.loss_s /= nb;
    log_entry.loss_o /= nb;
    log_entry.loss_c /= nb;
    log_entry.loss_all /= nb;
    if (cfg.validate_each_epoch && !manifest.split("val").empty())
      log_entry.val = evaluate_split(model, manifest, "val", cfg.mask);
    log_entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log(LogLevel::Debug, format_epoch(log_entry));
    if (on_epoch) on_epoch(log_entry);
    logs.push_back(log_entry);
  }
  model.parameters().zero_grad();
  return logs;
}

}  // namespace czsl
