#pragma once

#include <algorithm>
#include <atomic>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "czsl/train.hpp"

namespace czsl {

/// One row of an ablation table. Rows with `reuse` set are evaluated on the
/// model trained for row `*reuse` instead of training their own.
struct AblationRow {
  std::string label;
  RunConfig config;
  BranchMask eval_mask;
  std::optional<std::size_t> reuse;
};

struct AblationResult {
  std::string label;
  std::vector<MetricsReport> per_seed;
  MetricsReport median;
};

inline const std::vector<std::string>& study_names() {
  static const std::vector<std::string> names{"branches", "prompts", "cmt", "visual-tuning", "lambda"};
  return names;
}

inline std::vector<AblationRow> plan_study(const RunConfig& base, const std::string& study) {
  std::vector<AblationRow> rows;
  auto add = [&](std::string label, const std::function<void(RunConfig&)>& edit) {
    RunConfig c = base;
    edit(c);
    c.validate();
    rows.push_back({std::move(label), c, c.mask, std::nullopt});
  };
  if (study == "branches") {
    const std::vector<std::string> masks{"cso", "c--", "-so", "cs-", "c-o"};
    for (const auto& m : masks)
      add("train+inference " + m, [&](RunConfig& c) { c.mask = parse_branch_mask(m, MaskPhase::TrainingAndInference); });
    for (std::size_t k = 1; k < masks.size(); ++k) {
      AblationRow r = rows.front();
      r.label = "inference " + masks[k];
      r.eval_mask = parse_branch_mask(masks[k], MaskPhase::InferenceOnly);
      r.reuse = 0;
      rows.push_back(std::move(r));
    }
  } else if (study == "prompts") {
    const std::vector<std::pair<PrefixSharing, VocabSharing>> grid{
        {PrefixSharing::Independent, VocabSharing::Shared},
        {PrefixSharing::AllShared, VocabSharing::Shared},
        {PrefixSharing::PrimitivesShared, VocabSharing::Shared},
        {PrefixSharing::Independent, VocabSharing::Independent}};
    for (const auto& [p, v] : grid)
      add("prefix " + to_string(p) + " vocab " + to_string(v), [&](RunConfig& c) {
        c.model.prefix_sharing = p;
        c.model.vocab_sharing = v;
      });
  } else if (study == "cmt") {
    add("w/ cmt", [](RunConfig& c) { c.model.cmt.enabled = true; });
    add("w/o cmt", [](RunConfig& c) { c.model.cmt.enabled = false; });
  } else if (study == "visual-tuning") {
    for (TuningStrategy s : all_tuning_strategies())
      add(to_string(s), [&](RunConfig& c) { c.model.image.tuning = s; });
  } else if (study == "lambda") {
    for (LambdaMode m : {LambdaMode::VectorTrainable, LambdaMode::VectorFrozen, LambdaMode::ScalarTrainable})
      add("lambda " + to_string(m), [&](RunConfig& c) { c.lambda_mode = m; });
  } else {
    throw ConfigError("unknown study '" + study + "' (expected branches, prompts, cmt, visual-tuning or lambda)");
  }
  return rows;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ProtocolError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline MetricsReport median_report(const std::vector<MetricsReport>& rs) {
  auto field = [&](double MetricsReport::*f) {
    std::vector<double> v;
    for (const auto& r : rs) v.push_back(r.*f);
    return median_of(v);
  };
  return {field(&MetricsReport::S), field(&MetricsReport::U), field(&MetricsReport::HM), field(&MetricsReport::AUC)};
}

/// Trains every non-reusing row once per seed and evaluates all rows on the
/// test split of the closed world. `jobs` > 1 trains rows on worker threads.
inline std::vector<AblationResult> run_study(const SplitManifest& manifest, const std::vector<AblationRow>& rows,
                                             const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  struct Task {
    std::size_t row;
    std::size_t seed_index;
  };
  std::vector<Task> tasks;
  for (std::size_t s = 0; s < seeds.size(); ++s)
    for (std::size_t r = 0; r < rows.size(); ++r)
      if (!rows[r].reuse) tasks.push_back({r, s});
  std::vector<std::vector<MetricsReport>> metrics(rows.size(), std::vector<MetricsReport>(seeds.size()));
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks.size(); t = next++) {
      try {
        const auto [r, s] = tasks[t];
        RunConfig cfg = rows[r].config;
        cfg.seed = seeds[s];
        auto model = build_model(cfg, manifest.states.size(), manifest.objects.size());
        train(*model, manifest, cfg);
        const ScoreMatrix base_scores = model->score(manifest.split("test"), target_space(manifest, World::Closed),
                                                     rows[r].eval_mask);
        metrics[r][s] = evaluate_scores(base_scores);
        for (std::size_t k = 0; k < rows.size(); ++k)
          if (rows[k].reuse == r)
            metrics[k][s] = evaluate_split(*model, manifest, "test", rows[k].eval_mask);
        log(LogLevel::Info, "row '" + rows[r].label + "' seed " + std::to_string(seeds[s]) + ": " +
                                format_metrics_row(metrics[r][s]));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  std::vector<AblationResult> out;
  for (std::size_t r = 0; r < rows.size(); ++r) out.push_back({rows[r].label, metrics[r], median_report(metrics[r])});
  return out;
}

inline std::string format_study(const std::string& study, const std::vector<AblationResult>& results) {
  std::size_t width = 8;
  for (const auto& r : results) width = std::max(width, r.label.size());
  std::string out = study + "\n" + std::string(width, ' ') + metrics_header() + "\n";
  for (const auto& r : results) {
    out += r.label + std::string(width - r.label.size(), ' ') + format_metrics_row(r.median) + "\n";
  }
  return out;
}

inline nlohmann::json to_json(const std::string& study, const std::vector<AblationResult>& results) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& m : r.per_seed) seeds.push_back(to_json(m));
    rows.push_back({{"label", r.label}, {"median", to_json(r.median)}, {"per_seed", seeds}});
  }
  return {{"study", study}, {"rows", rows}};
}

}  // namespace czsl
