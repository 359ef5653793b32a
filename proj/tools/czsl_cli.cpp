// czsl: dataset generation, training, evaluation, ablation and gradient checks.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "czsl/ablate.hpp"
#include "czsl/check_grad.hpp"
#include "czsl/checkpoint.hpp"

namespace fs = std::filesystem;
using namespace czsl;

namespace {

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  if (path.empty()) return;
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path);
}

int cmd_gen_data(const std::string& preset, const std::string& config_path, const std::vector<std::string>& sets,
                 std::optional<std::uint64_t> seed, const std::string& out, bool inline_images,
                 std::size_t embedding_dim) {
  SyntheticConfig cfg = SyntheticConfig::preset(preset);
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open " + config_path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("malformed JSON in " + config_path);
    from_json(j, cfg);
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key=value: '" + s + "'");
    nlohmann::json v = nlohmann::json::parse(s.substr(eq + 1), nullptr, false);
    if (v.is_discarded()) v = s.substr(eq + 1);
    from_json(nlohmann::json{{s.substr(0, eq), v}}, cfg);
  }
  if (seed) cfg.seed = *seed;
  const SplitManifest m = generate_synthetic(cfg);
  save_manifest(m, out, inline_images ? ImageStorage::Inline : ImageStorage::Files);
  save_embedding_table(random_embedding_table(m, embedding_dim, cfg.seed), fs::path(out) / "embeddings.json");
  nlohmann::json meta = cfg;
  write_json((fs::path(out) / "synthetic.json").string(), meta);
  load_manifest(out);  // round-trip check
  const auto st = manifest_stats(m);
  std::cout << "states " << st.states << "  objects " << st.objects << "  seen pairs " << m.seen_pairs.size()
            << "  unseen pairs " << m.unseen_pairs.size() << "\n";
  for (const auto& name : split_names())
    std::cout << name << ": " << st.samples.at(name) << " samples, " << st.seen_pairs.at(name) << " seen / "
              << st.unseen_pairs.at(name) << " unseen pairs\n";
  return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out, const std::string& log_path) {
  const RunConfig cfg = resolve_config(config_path, sets);
  const SplitManifest m = load_manifest(manifest_path);
  auto model = build_model(cfg, m.states.size(), m.objects.size());
  std::cout << "trainable scalars " << model->parameters().trainable_scalars() << "\n";
  nlohmann::json log_json = {{"config", to_json(cfg)}, {"epochs", nlohmann::json::array()}};
  const auto logs = train(*model, m, cfg, [&](const EpochLog& e) {
    std::cout << format_epoch(e) << std::endl;
    log_json["epochs"].push_back(to_json(e));
  });
  save_checkpoint(make_checkpoint(*model, cfg, m), out);
  write_json(log_path.empty() ? out + ".log.json" : log_path, log_json);
  std::cout << "saved " << out << "\n";
  return 0;
}

void dump_attention(const Model& model, const SplitManifest& m, const TargetSpace& space, const ScoreMatrix& scores,
                    const std::string& split, std::size_t count, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& samples = m.split(split);
  const auto& icfg = model.config().image;
  const std::size_t grid_w = icfg.width / icfg.patch;
  count = std::min(count, samples.size());
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t pred = predict(scores.row(n), scores.allowed.empty() ? nullptr : &scores.allowed);
    const AttentionMap map = model.attention_for(*samples[n].image, space.pairs[pred]);
    const fs::path file = dir / ("attention_" + std::to_string(n) + ".csv");
    std::ofstream out(file);
    out << std::fixed << std::setprecision(6);
    for (std::size_t k = 0; k < map.patches; ++k) out << map.mean[k] << ((k + 1) % grid_w == 0 ? "\n" : ",");
    if (!out) throw DataError("cannot write " + file.string());
  }
  std::cout << "wrote " << count << " attention grids to " << dir.string() << "\n";
}

int cmd_eval(const std::string& ckpt, const std::string& manifest_path, const std::string& split,
             const std::string& world_name, const std::string& feasibility, const std::string& threshold,
             std::size_t dump_k, const std::string& attention_dir, const std::string& json_path) {
  const RestoredModel r = restore_model(load_checkpoint(ckpt));
  const SplitManifest m = load_manifest(manifest_path);
  require_same_label_space(r, m);
  const World world = parse_world(world_name);
  const TargetSpace space = target_space(m, world);
  ScoreMatrix scores = r.model->score(m.split(split), space, r.config.mask);
  nlohmann::json report = {{"split", split}, {"world", to_string(world)}, {"compositions", space.size()}};
  if (world == World::Open && !feasibility.empty()) {
    const FeasibilityScores f = feasibility_scores(m, load_embedding_table(feasibility));
    double t = 0.0;
    if (threshold == "auto") {
      const ScoreMatrix val = r.model->score(m.split("val"), space, r.config.mask);
      t = calibrate_threshold(val, space, f, threshold_grid(space, f)).threshold;
    } else {
      try {
        t = std::stod(threshold);
      } catch (const std::exception&) {
        throw ConfigError("threshold must be a number or 'auto'");
      }
    }
    scores.allowed = feasible_mask(space, f, t);
    report["threshold"] = t;
    report["feasible"] = std::count(scores.allowed.begin(), scores.allowed.end(), true);
  } else if (!feasibility.empty()) {
    throw ConfigError("--feasibility applies to --world open only");
  }
  const MetricsReport metrics = evaluate_scores(scores);
  report["metrics"] = to_json(metrics);
  std::cout << metrics_header() << "\n" << format_metrics_row(metrics) << "\n";
  if (report.contains("threshold")) std::cout << "feasibility threshold " << report["threshold"].get<double>() << "\n";
  std::cout << report.dump() << "\n";
  write_json(json_path, report);
  if (dump_k > 0) dump_attention(*r.model, m, space, scores, split, dump_k, attention_dir);
  return 0;
}

int cmd_ablate(const std::string& study, const std::string& manifest_path, const std::string& config_path,
               const std::vector<std::string>& sets, const std::vector<std::uint64_t>& seeds, std::size_t jobs,
               const std::string& json_path) {
  const RunConfig base = resolve_config(config_path, sets);
  const auto rows = plan_study(base, study);
  const SplitManifest m = load_manifest(manifest_path);
  const auto results = run_study(m, rows, seeds, jobs);
  std::cout << format_study(study, results);
  const nlohmann::json j = to_json(study, results);
  std::cout << j.dump() << "\n";
  write_json(json_path, j);
  return 0;
}

int cmd_check_grad(const std::string& manifest_path, const std::vector<std::string>& names, std::size_t batch,
                   double step, double tolerance) {
  const SplitManifest m = manifest_path.empty() ? generate_synthetic({}) : load_manifest(manifest_path);
  std::vector<TuningStrategy> strategies;
  if (names.empty() || (names.size() == 1 && names[0] == "all")) strategies = all_tuning_strategies();
  else
    for (const auto& n : names) strategies.push_back(parse_tuning_strategy(n));
  bool ok = true;
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : check_model_gradients(m, strategies, batch, step)) {
    const bool pass = r.report.max_relative_error < tolerance;
    ok = ok && pass;
    std::printf("%-8s max rel err %.3e  scalars %6zu  worst %s[%zu]  %s\n", to_string(r.strategy).c_str(),
                r.report.max_relative_error, r.report.checked_scalars, r.report.worst_parameter.c_str(),
                r.report.worst_index, pass ? "ok" : "FAIL");
    out.push_back({{"strategy", to_string(r.strategy)},
                   {"max_relative_error", r.report.max_relative_error},
                   {"scalars", r.report.checked_scalars},
                   {"worst", r.report.worst_parameter}});
  }
  std::cout << out.dump() << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-path compositional zero-shot learning at desk scale"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string preset = "synth-6x6", gen_config, gen_out;
  std::vector<std::string> gen_sets;
  std::optional<std::uint64_t> gen_seed;
  bool inline_images = false;
  std::size_t embedding_dim = 32;
  gen->add_option("--preset", preset, "Dataset preset (synth-6x6, synth-4x4)");
  gen->add_option("--config", gen_config, "Synthetic config JSON");
  gen->add_option("--set", gen_sets, "Override a synthetic config key (key=value)");
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--inline", inline_images, "Store images base64-inline in the manifest");
  gen->add_option("--embedding-dim", embedding_dim, "Width of the primitive embedding table");

  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_manifest, tr_config, tr_out, tr_log;
  std::vector<std::string> tr_sets;
  tr->add_option("--manifest", tr_manifest, "Manifest JSON or dataset directory")->required();
  tr->add_option("--config", tr_config, "Run config JSON");
  tr->add_option("--set", tr_sets, "Override a config key (key=value)");
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--log", tr_log, "Training log JSON (default <out>.log.json)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_manifest, ev_split = "test", ev_world = "closed", ev_feas, ev_threshold = "auto",
                                    ev_attn_dir = "attention", ev_json;
  std::size_t dump_k = 0;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--manifest", ev_manifest, "Manifest JSON or dataset directory")->required();
  ev->add_option("--split", ev_split, "Split to evaluate");
  ev->add_option("--world", ev_world, "closed or open");
  ev->add_option("--feasibility", ev_feas, "Primitive embedding table for open-world filtering");
  ev->add_option("--threshold", ev_threshold, "Feasibility threshold or 'auto'");
  ev->add_option("--dump-attention", dump_k, "Write attention grids for the first k samples");
  ev->add_option("--attention-dir", ev_attn_dir, "Directory for attention CSV files");
  ev->add_option("--json", ev_json, "Write the report JSON here");

  auto* ab = app.add_subcommand("ablate", "Run an ablation study");
  std::string ab_study, ab_manifest, ab_config, ab_json;
  std::vector<std::string> ab_sets;
  std::vector<std::uint64_t> ab_seeds{1, 2, 3};
  std::size_t jobs = 1;
  ab->add_option("study", ab_study, "branches, prompts, cmt, visual-tuning or lambda")->required();
  ab->add_option("--manifest", ab_manifest, "Manifest JSON or dataset directory")->required();
  ab->add_option("--config", ab_config, "Base run config JSON");
  ab->add_option("--set", ab_sets, "Override a config key (key=value)");
  ab->add_option("--seeds", ab_seeds, "Seeds (median is reported)")->delimiter(',');
  ab->add_option("--jobs", jobs, "Rows trained in parallel");
  ab->add_option("--json", ab_json, "Write the study JSON here");

  auto* cg = app.add_subcommand("check-grad", "Finite-difference gradient check of the full model");
  std::string cg_manifest;
  std::vector<std::string> cg_strategies;
  std::size_t cg_batch = 4;
  double cg_step = 1e-5, cg_tol = 1e-4;
  cg->add_option("--manifest", cg_manifest, "Manifest (default: generated synth-6x6)");
  cg->add_option("--tuning", cg_strategies, "Strategies to check (default all)");
  cg->add_option("--batch", cg_batch, "Batch size");
  cg->add_option("--step", cg_step, "Finite-difference step");
  cg->add_option("--tolerance", cg_tol, "Maximum allowed relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen_data(preset, gen_config, gen_sets, gen_seed, gen_out, inline_images, embedding_dim);
    if (*tr) return cmd_train(tr_manifest, tr_config, tr_sets, tr_out, tr_log);
    if (*ev)
      return cmd_eval(ev_ckpt, ev_manifest, ev_split, ev_world, ev_feas, ev_threshold, dump_k, ev_attn_dir, ev_json);
    if (*ab) {
      if (std::find(study_names().begin(), study_names().end(), ab_study) == study_names().end()) {
        std::cerr << "error: unknown study '" << ab_study << "'\n" << ab->help();
        return 2;
      }
      return cmd_ablate(ab_study, ab_manifest, ab_config, ab_sets, ab_seeds, jobs, ab_json);
    }
    if (*cg) return cmd_check_grad(cg_manifest, cg_strategies, cg_batch, cg_step, cg_tol);
  } catch (const Error& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
