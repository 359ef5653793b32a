// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>

#include "czsl/ablate.hpp"
#include "czsl/check_grad.hpp"
#include "czsl/checkpoint.hpp"
#include "oracles.hpp"

using namespace czsl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// Every score matrix produced below, for the curve-property check.
std::vector<ScoreMatrix>& curves() {
  static std::vector<ScoreMatrix> all;
  return all;
}

MetricsReport evaluate_and_keep(ScoreMatrix m) {
  const MetricsReport r = evaluate_scores(m);
  curves().push_back(std::move(m));
  return r;
}

const SplitManifest& synth6() {
  static const SplitManifest m = generate_synthetic(SyntheticConfig::preset("synth-6x6"));
  return m;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = check_model_gradients(synth6(), all_tuning_strategies(), 4, 1e-5);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& r : reports) worst = std::max(worst, r.report.max_relative_error);
  return {worst < 1e-4 && secs < 60.0 && reports.size() == all_tuning_strategies().size(),
          fmt("%g strategies, max rel err %.3g, %.1fs", static_cast<double>(reports.size()), worst, secs)};
}

Outcome metric_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const ScoreMatrix m = oracle::random_matrix(rng, 20, 12);
    const MetricsReport a = evaluate_and_keep(m);
    const oracle::Metrics b = oracle::grid_metrics(oracle::dense_grid(m, 100000));
    for (double d : {a.S - b.S, a.U - b.U, a.HM - b.HM, a.AUC - b.AUC}) worst = std::max(worst, std::abs(d));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 30.0, fmt("50 matrices, max |diff| %.3g, %.1fs", worst, secs)};
}

Outcome multipath_fixtures() {
  std::vector<std::string> failed;
  auto check = [&](const char* name, double got, double want) {
    if (!(std::abs(got - want) <= 1e-12)) failed.push_back(name);
  };
  using PairList = std::vector<std::pair<std::size_t, std::size_t>>;
  check("substitution", integrate(std::vector<double>{0.5}, std::vector<double>{0.6}, std::vector<double>{0.4}, {{0, 0}})[0],
        0.5 + 0.6 * 0.4);
  {
    const std::vector<double> pc{0.1, 0.2, 0.3, 0.4}, ps{0.7, 0.3}, po{0.45, 0.55};
    const auto s = integrate(pc, ps, po, PairList{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) check("2x2 table", s[i * 2 + j], pc[i * 2 + j] + ps[i] * po[j]);
  }
  {
    const Tensor ts = Tensor::matrix(2, 2, {1, 0, -1, 0});
    const auto p = branch_probabilities({3, 0}, {1, 0}, {1, 0}, ts, ts, ts, 1.0);
    const double e = std::exp(1.0), f = std::exp(-1.0);
    check("two-state softmax", p.state[0], e / (e + f));
    check("two-state softmax", p.state[1], f / (e + f));
  }
  {
    const Tensor t = Tensor::matrix(3, 2, {1, 2, 1, 2, 1, 2});
    const auto p = branch_probabilities({1, 0}, {0, 1}, {1, 1}, t, t, t, 0.05);
    for (double v : p.composition) check("identical prompts", v, 1.0 / 3.0);
  }
  {
    const Var p(Tensor({2, 4}, 0.25));
    const std::vector<std::size_t> t{0, 3};
    check("uniform loss", total_loss(p, p, p, t, t, t, {}, {}).total.item(), 3.0 * std::log(4.0));
  }
  {
    Rng rng = make_rng(5, "acceptance.loss");
    const Var ps = ad::softmax_rows(Var(normal_tensor({3, 4}, 1.0, rng)), 1.0);
    const Var po = ad::softmax_rows(Var(normal_tensor({3, 5}, 1.0, rng)), 1.0);
    const Var pc = ad::softmax_rows(Var(normal_tensor({3, 6}, 1.0, rng)), 1.0);
    const std::vector<std::size_t> s{0, 1, 3}, o{4, 0, 2}, c{5, 1, 0};
    BranchMask mask;
    mask.use_s = false;
    const auto l = total_loss(ps, po, pc, s, o, c, {0.1, 0.1, 1.0}, mask);
    check("masked loss", l.total.item(), 0.1 * l.object.item() + l.composition.item());
  }
  {
    const std::vector<double> scores{0.1, 0.5, 0.5, 0.2};
    if (predict(scores) != 1) failed.push_back("tie break");
    if (predict(std::vector<double>{0.3}) != 0) failed.push_back("single candidate");
  }
  std::string detail = failed.empty() ? "all fixtures within 1e-12" : "failed:";
  for (const auto& f : failed) detail += " " + f;
  return {failed.empty(), detail};
}

Outcome cmt_off_equivalence() {
  const SplitManifest& m = synth6();
  RunConfig on;
  on.model.cmt.lambda_init = 0.0;
  on.lambda_mode = LambdaMode::VectorFrozen;
  RunConfig off;
  off.model.cmt.enabled = false;
  on.epochs = off.epochs = 1;
  on.validate_each_epoch = off.validate_each_epoch = false;
  auto a = build_model(on, m.states.size(), m.objects.size());
  auto b = build_model(off, m.states.size(), m.objects.size());
  const std::vector<Sample> images(m.split("test").begin(), m.split("test").begin() + 100);
  const TargetSpace space = target_space(m, World::Closed);
  auto max_diff = [&] {
    const ScoreMatrix x = a->score(images, space), y = b->score(images, space);
    double d = 0.0;
    for (std::size_t k = 0; k < x.scores.size(); ++k) d = std::max(d, std::abs(x.scores[k] - y.scores[k]));
    curves().push_back(x);
    return d;
  };
  const double at_init = max_diff();
  train(*a, m, on);
  train(*b, m, off);
  const double trained = max_diff();
  return {at_init < 1e-12 && trained < 1e-12,
          fmt("100 images, max |diff| %.3g at init, %.3g after one epoch", at_init, trained)};
}

// Default-config runs on synth-6x6, shared by the training, ablation and persistence checks.
struct SeedRun {
  MetricsReport test;
  double seconds = 0.0;
  std::size_t epochs = 0;
  bool backbone_untouched = false;
  bool persistence_exact = false;
};

SeedRun run_seed(std::uint64_t seed, const std::string& branches) {
  const SplitManifest& m = synth6();
  RunConfig cfg;
  cfg.seed = seed;
  cfg.validate_each_epoch = false;
  cfg.mask = parse_branch_mask(branches, MaskPhase::TrainingAndInference);
  auto model = build_model(cfg, m.states.size(), m.objects.size());
  std::map<std::string, std::vector<double>> frozen;
  for (const auto& p : model->parameters().all())
    if (!p.trainable()) frozen[p.name] = p.var.values();
  SeedRun r;
  const auto t0 = std::chrono::steady_clock::now();
  r.epochs = train(*model, m, cfg).size();
  r.seconds = seconds_since(t0);
  r.backbone_untouched = !frozen.empty();
  for (const auto& p : model->parameters().all()) {
    auto it = frozen.find(p.name);
    if (it == frozen.end()) continue;
    const auto& now = p.var.values();
    r.backbone_untouched = r.backbone_untouched && now.size() == it->second.size() &&
                           std::memcmp(now.data(), it->second.data(), now.size() * sizeof(double)) == 0;
  }
  const TargetSpace space = target_space(m, World::Closed);
  r.test = evaluate_and_keep(model->score(m.split("test"), space, cfg.mask));
  const RestoredModel back = restore_model(decode_checkpoint(encode_checkpoint(make_checkpoint(*model, cfg, m))));
  const MetricsReport again = evaluate_scores(back.model->score(m.split("test"), space, back.config.mask));
  r.persistence_exact = std::memcmp(&again, &r.test, sizeof again) == 0;
  return r;
}

std::vector<SeedRun>& runs(const std::string& branches) {
  static std::map<std::string, std::vector<SeedRun>> cache;
  auto& v = cache[branches];
  if (v.empty())
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      v.push_back(run_seed(seed, branches));
      std::fprintf(stderr, "  [%s seed %llu] S %.4f U %.4f HM %.4f AUC %.4f (%.0fs)\n", branches.c_str(),
                   static_cast<unsigned long long>(seed), v.back().test.S, v.back().test.U, v.back().test.HM,
                   v.back().test.AUC, v.back().seconds);
    }
  return v;
}

double median_field(const std::vector<SeedRun>& rs, double MetricsReport::*f) {
  std::vector<double> v;
  for (const auto& r : rs) v.push_back(r.test.*f);
  return median_of(v);
}

Outcome desk_training() {
  const auto& rs = runs("cso");
  double slowest = 0.0;
  std::size_t epochs = 0;
  for (const auto& r : rs) slowest = std::max(slowest, r.seconds), epochs = std::max(epochs, r.epochs);
  const double s = median_field(rs, &MetricsReport::S), u = median_field(rs, &MetricsReport::U);
  return {s >= 0.90 && u >= 5.0 / 36.0 && epochs <= 30 && slowest < 600.0,
          fmt("median S %.4f, median U %.4f (need 0.90, %.4f), slowest run %.0fs", s, u, 5.0 / 36.0, slowest)};
}

Outcome branch_ablation() {
  const double all = median_field(runs("cso"), &MetricsReport::AUC);
  const double comp = median_field(runs("c--"), &MetricsReport::AUC);
  return {all >= comp, fmt("median AUC all branches %.4f, composition only %.4f", all, comp)};
}

Outcome open_world() {
  SplitManifest m;
  m.states = {"a", "b", "c"};
  m.objects = {"x", "y", "z"};
  m.seen_pairs = {{0, 0}, {0, 1}, {1, 1}, {2, 2}};
  m.unseen_pairs = {{0, 2}, {1, 0}, {1, 2}, {2, 0}, {2, 1}};
  PrimitiveEmbeddingTable t;
  t.vectors = {{"a", {1, 0, 0}}, {"b", {0, 1, 0}},    {"c", {0.8, 0.6, 0}},
               {"x", {1, 0, 0}}, {"y", {0.6, 0.8, 0}}, {"z", {0, 0.28, 0.96}}};
  auto cos = [&](const std::string& p, const std::string& q) {
    const auto &u = t.vectors[p], &v = t.vectors[q];
    double uv = 0, uu = 0, vv = 0;
    for (std::size_t k = 0; k < 3; ++k) uv += u[k] * v[k], uu += u[k] * u[k], vv += v[k] * v[k];
    return uv / std::sqrt(uu * vv);
  };
  // Hand enumeration: objects seen with each state, states seen with each object.
  const std::map<Pair, double> hand{
      {{0, 2}, (std::max(cos("x", "z"), cos("y", "z")) + cos("c", "a")) / 2},
      {{1, 0}, (cos("y", "x") + cos("a", "b")) / 2},
      {{1, 2}, (cos("y", "z") + cos("c", "b")) / 2},
      {{2, 0}, (cos("z", "x") + cos("a", "c")) / 2},
      {{2, 1}, (cos("z", "y") + std::max(cos("a", "c"), cos("b", "c"))) / 2}};
  const FeasibilityScores f = feasibility_scores(m, t);
  double rho_err = 0.0;
  for (const auto& [p, v] : hand) rho_err = std::max(rho_err, std::abs(f.at(p) - v));
  bool seen_inf = true;
  for (const Pair& p : m.seen_pairs) seen_inf = seen_inf && std::isinf(f.at(p)) && f.at(p) > 0;

  const TargetSpace space = target_space(m, World::Open);
  const auto grid = threshold_grid(space, f);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  std::size_t violations = 0, filtered_checks = 0;
  for (double thr : grid)
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> scores(space.size());
      for (double& v : scores) v = n(rng);
      ++filtered_checks;
      if (!(f.at(space.pairs[open_world_filter(scores, space, f, thr)]) > thr)) ++violations;
    }

  std::size_t mismatches = 0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::vector<double>> rows(24, std::vector<double>(space.size()));
    std::vector<std::size_t> truth(24);
    for (std::size_t k = 0; k < 24; ++k) {
      for (double& v : rows[k]) v = n(rng);
      truth[k] = k % space.size();
      rows[k][truth[k]] += 0.5;
    }
    const ScoreMatrix val = make_score_matrix(rows, truth, space.seen);
    double best_t = 0.0, best_auc = -1.0;
    for (double thr : grid) {
      ScoreMatrix filtered = val;
      filtered.allowed.assign(space.size(), false);
      for (std::size_t c = 0; c < space.size(); ++c) filtered.allowed[c] = f.at(space.pairs[c]) > thr;
      const double auc = oracle::grid_metrics(oracle::dense_grid(filtered, 20000)).AUC;
      if (auc > best_auc + 1e-12) best_auc = auc, best_t = thr;
      curves().push_back(filtered);
    }
    if (calibrate_threshold(val, space, f, grid).threshold != best_t) ++mismatches;
  }
  return {rho_err == 0.0 && seen_inf && violations == 0 && mismatches == 0,
          fmt("max rho error %.3g, %g filtered picks with rho <= T, %g calibration mismatches", rho_err,
              static_cast<double>(violations), static_cast<double>(mismatches)) +
              " (" + std::to_string(filtered_checks) + " picks, " + std::to_string(grid.size()) + " thresholds)"};
}

Outcome frozen_and_persistence() {
  const auto& rs = runs("cso");
  bool frozen = true, exact = true;
  for (const auto& r : rs) frozen = frozen && r.backbone_untouched, exact = exact && r.persistence_exact;
  return {frozen && exact, std::string("backbone ") + (frozen ? "byte-identical" : "CHANGED") + ", reload metrics " +
                               (exact ? "bit-exact" : "DIFFER") + " over 5 runs"};
}

Outcome curve_properties() {
  std::size_t bad = 0, checked = 0;
  for (const ScoreMatrix& m : curves()) {
    const SweepCurve c = bias_sweep(m);
    ++checked;
    bool ok = c.monotone();
    for (double k : {-3.0, 0.5, 16.0}) {
      ScoreMatrix shifted = m;
      for (double& v : shifted.scores) v += k;
      const SweepCurve d = bias_sweep(shifted);
      ok = ok && d.points.size() == c.points.size();
      for (std::size_t i = 0; ok && i < c.points.size(); ++i)
        ok = c.points[i].seen == d.points[i].seen && c.points[i].unseen == d.points[i].unseen;
      const MetricsReport a = compute_metrics(c), b = compute_metrics(d);
      ok = ok && std::abs(a.HM - b.HM) <= 1e-12 && std::abs(a.AUC - b.AUC) <= 1e-12;
    }
    bad += !ok;
  }
  return {bad == 0 && checked > 0, std::to_string(checked) + " curves, " + std::to_string(bad) + " violations"};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"metric-oracle equivalence", metric_oracle},
      {"multipath fixtures", multipath_fixtures},
      {"traction-off equivalence", cmt_off_equivalence},
      {"desk-scale training", desk_training},
      {"branch ablation direction", branch_ablation},
      {"open-world machinery", open_world},
      {"frozen backbone and persistence", frozen_and_persistence},
      {"sweep-curve properties", curve_properties}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %zu %-32s %s  %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
