#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/data.hpp"
#include "czsl/errors.hpp"

namespace czsl {

/// Test-time integrated scores, one row per sample over the target label space.
struct ScoreMatrix {
  std::size_t samples = 0;
  std::size_t compositions = 0;
  std::vector<double> scores;  // samples x compositions, row-major
  std::vector<std::size_t> truth;
  std::vector<bool> sample_seen;
  std::vector<bool> pair_seen;
  std::vector<bool> allowed;  // empty: every composition is a candidate

  std::span<const double> row(std::size_t n) const { return {scores.data() + n * compositions, compositions}; }
  bool is_allowed(std::size_t c) const { return allowed.empty() || allowed[c]; }

  void validate() const {
    if (scores.size() != samples * compositions || truth.size() != samples || sample_seen.size() != samples ||
        pair_seen.size() != compositions || (!allowed.empty() && allowed.size() != compositions))
      throw ShapeError("score matrix fields have inconsistent sizes");
    for (std::size_t n = 0; n < samples; ++n) {
      if (truth[n] >= compositions) throw IndexError("truth index " + std::to_string(truth[n]) + " out of range");
      if (sample_seen[n] != pair_seen[truth[n]]) throw ValidationError("sample seen flag disagrees with its pair");
    }
    for (double v : scores)
      if (std::isnan(v)) throw NumericError("NaN in score matrix");
  }
};

/// Builds a matrix from per-sample scores over `space`.
inline ScoreMatrix make_score_matrix(std::vector<std::vector<double>> rows, const std::vector<std::size_t>& truth,
                                     const std::vector<bool>& pair_seen) {
  ScoreMatrix m;
  m.samples = rows.size();
  m.compositions = pair_seen.size();
  m.pair_seen = pair_seen;
  m.truth = truth;
  for (std::size_t n = 0; n < rows.size(); ++n) {
    if (rows[n].size() != m.compositions) throw ShapeError("score row width does not match the label space");
    m.scores.insert(m.scores.end(), rows[n].begin(), rows[n].end());
  }
  if (truth.size() != m.samples) throw ShapeError("truth count does not match score rows");
  for (std::size_t t : truth) m.sample_seen.push_back(t < pair_seen.size() && pair_seen[t]);
  m.validate();
  return m;
}

struct SweepPoint {
  double bias = 0.0;
  double seen = 0.0;
  double unseen = 0.0;
};

struct SweepCurve {
  std::vector<SweepPoint> points;  // bias ascending, -inf first, +inf last

  bool monotone() const {
    for (std::size_t k = 1; k < points.size(); ++k)
      if (points[k].seen > points[k - 1].seen || points[k].unseen < points[k - 1].unseen ||
          !(points[k].bias > points[k - 1].bias))
        return false;
    return true;
  }
};

struct MetricsReport {
  double S = 0.0;
  double U = 0.0;
  double HM = 0.0;
  double AUC = 0.0;
};

/// Argmax of `row` with `bias` added to unseen columns; ties go to the lower
/// index. Infinite biases restrict the candidates to one side when possible.
inline std::size_t biased_argmax(std::span<const double> row, const ScoreMatrix& m, double bias) {
  auto best_over = [&](int side) {
    std::size_t best = row.size();
    double best_score = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (!m.is_allowed(c)) continue;
      if (side == 1 && m.pair_seen[c]) continue;
      if (side == -1 && !m.pair_seen[c]) continue;
      const double s = std::isinf(bias) || m.pair_seen[c] ? row[c] : row[c] + bias;
      if (best == row.size() || s > best_score) {
        best = c;
        best_score = s;
      }
    }
    return best;
  };
  std::size_t best = row.size();
  if (bias == std::numeric_limits<double>::infinity()) best = best_over(1);
  else if (bias == -std::numeric_limits<double>::infinity()) best = best_over(-1);
  if (best == row.size()) best = best_over(0);
  if (best == row.size()) throw EmptyCandidateError("no candidate composition to predict from");
  return best;
}

inline SweepPoint evaluate_bias(const ScoreMatrix& m, double bias) {
  std::size_t seen_total = 0, seen_hit = 0, unseen_total = 0, unseen_hit = 0;
  for (std::size_t n = 0; n < m.samples; ++n) {
    const bool hit = biased_argmax(m.row(n), m, bias) == m.truth[n];
    if (m.sample_seen[n]) {
      ++seen_total;
      seen_hit += hit;
    } else {
      ++unseen_total;
      unseen_hit += hit;
    }
  }
  return {bias, static_cast<double>(seen_hit) / static_cast<double>(seen_total),
          static_cast<double>(unseen_hit) / static_cast<double>(unseen_total)};
}

/// Exact calibration-bias sweep. A sample's correctness can only change where
/// its true score ties the best competitor from the other side, so the curve
/// is evaluated at -inf, +inf and between every pair of adjacent transitions.
inline SweepCurve bias_sweep(const ScoreMatrix& m) {
  m.validate();
  const auto seen_count = static_cast<std::size_t>(std::count(m.sample_seen.begin(), m.sample_seen.end(), true));
  if (seen_count == 0 || seen_count == m.samples)
    throw ProtocolError("bias sweep needs both seen-truth and unseen-truth samples");
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> transitions;
  for (std::size_t n = 0; n < m.samples; ++n) {
    const auto row = m.row(n);
    const bool want_seen = !m.sample_seen[n];
    double best_other = -inf;
    for (std::size_t c = 0; c < m.compositions; ++c)
      if (m.is_allowed(c) && m.pair_seen[c] == want_seen) best_other = std::max(best_other, row[c]);
    if (std::isinf(best_other)) continue;
    const double t = row[m.truth[n]];
    transitions.push_back(m.sample_seen[n] ? t - best_other : best_other - t);
  }
  std::sort(transitions.begin(), transitions.end());
  transitions.erase(std::unique(transitions.begin(), transitions.end()), transitions.end());
  SweepCurve curve;
  curve.points.push_back(evaluate_bias(m, -inf));
  for (std::size_t k = 0; k + 1 < transitions.size(); ++k)
    curve.points.push_back(evaluate_bias(m, transitions[k] + 0.5 * (transitions[k + 1] - transitions[k])));
  curve.points.push_back(evaluate_bias(m, inf));
  return curve;
}

inline double harmonic_mean(double s, double u) { return s + u > 0.0 ? 2.0 * s * u / (s + u) : 0.0; }

/// Trapezoidal area of unseen accuracy over seen accuracy. Points sharing a
/// seen accuracy are ordered by falling unseen accuracy, which follows the
/// sweep path from +inf back to -inf.
inline double curve_auc(std::vector<SweepPoint> points) {
  std::stable_sort(points.begin(), points.end(), [](const SweepPoint& a, const SweepPoint& b) {
    return a.seen < b.seen || (a.seen == b.seen && a.unseen > b.unseen);
  });
  double area = 0.0;
  for (std::size_t k = 1; k < points.size(); ++k)
    area += (points[k].seen - points[k - 1].seen) * 0.5 * (points[k].unseen + points[k - 1].unseen);
  return area;
}

inline MetricsReport compute_metrics(const SweepCurve& curve) {
  if (curve.points.empty()) throw ProtocolError("empty sweep curve");
  MetricsReport r;
  r.S = curve.points.front().seen;
  r.U = curve.points.back().unseen;
  for (const auto& p : curve.points) r.HM = std::max(r.HM, harmonic_mean(p.seen, p.unseen));
  r.AUC = curve_auc(curve.points);
  return r;
}

inline MetricsReport evaluate_scores(const ScoreMatrix& m) { return compute_metrics(bias_sweep(m)); }

inline std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

/// Percentages with two decimals.
inline nlohmann::json to_json(const MetricsReport& r) {
  auto pct = [](double v) { return std::round(v * 10000.0) / 100.0; };
  return {{"S", pct(r.S)}, {"U", pct(r.U)}, {"HM", pct(r.HM)}, {"AUC", pct(r.AUC)}};
}

inline std::string metrics_header() { return "       S       U      HM     AUC"; }

inline std::string format_metrics_row(const MetricsReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%8.2f%8.2f%8.2f%8.2f", 100.0 * r.S, 100.0 * r.U, 100.0 * r.HM, 100.0 * r.AUC);
  return buf;
}

// ---------------------------------------------------------------------------
// Open-world feasibility

struct FeasibilityScores {
  std::size_t num_states = 0;
  std::size_t num_objects = 0;
  std::vector<double> rho;  // |S| x |O|; +inf for seen pairs
  double threshold = -std::numeric_limits<double>::infinity();

  double at(std::size_t s, std::size_t o) const {
    if (s >= num_states || o >= num_objects) throw IndexError("feasibility index out of range");
    return rho[s * num_objects + o];
  }
  double at(const Pair& p) const { return at(p.first, p.second); }
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("embedding widths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("zero-norm embedding");
  return dot / std::sqrt(na * nb);
}

/// rho(s, o) = (max cos(o, o') over objects o' seen with s + max cos(s, s')
/// over states s' seen with o) / 2.
inline FeasibilityScores feasibility_scores(const SplitManifest& m, const PrimitiveEmbeddingTable& table) {
  const std::size_t ns = m.states.size(), no = m.objects.size();
  std::vector<std::vector<std::size_t>> objects_of(ns), states_of(no);
  for (const auto& [s, o] : m.seen_pairs) {
    objects_of[s].push_back(o);
    states_of[o].push_back(s);
  }
  std::vector<const std::vector<double>*> phi_s(ns), phi_o(no);
  for (std::size_t s = 0; s < ns; ++s) phi_s[s] = &table.at(m.states[s]);
  for (std::size_t o = 0; o < no; ++o) phi_o[o] = &table.at(m.objects[o]);
  FeasibilityScores f;
  f.num_states = ns;
  f.num_objects = no;
  f.rho.assign(ns * no, 0.0);
  for (std::size_t s = 0; s < ns; ++s) {
    if (objects_of[s].empty()) throw PreconditionError("state '" + m.states[s] + "' has no seen pair");
    for (std::size_t o = 0; o < no; ++o) {
      if (states_of[o].empty()) throw PreconditionError("object '" + m.objects[o] + "' has no seen pair");
      double rho_o = -1.0, rho_s = -1.0;
      for (std::size_t o2 : objects_of[s]) rho_o = std::max(rho_o, cosine(*phi_o[o], *phi_o[o2]));
      for (std::size_t s2 : states_of[o]) rho_s = std::max(rho_s, cosine(*phi_s[s], *phi_s[s2]));
      f.rho[s * no + o] = 0.5 * (rho_o + rho_s);
    }
  }
  for (const Pair& p : m.seen_pairs) f.rho[p.first * no + p.second] = std::numeric_limits<double>::infinity();
  return f;
}

/// Candidate mask {c : rho(c) > T} over a label space.
inline std::vector<bool> feasible_mask(const TargetSpace& space, const FeasibilityScores& f, double threshold) {
  if (!std::isfinite(threshold)) throw DomainError("feasibility threshold must be finite");
  std::vector<bool> mask(space.size());
  for (std::size_t c = 0; c < space.size(); ++c) mask[c] = f.at(space.pairs[c]) > threshold;
  return mask;
}

/// Argmax of `scores` over compositions with rho > T.
inline std::size_t open_world_filter(std::span<const double> scores, const TargetSpace& space,
                                     const FeasibilityScores& f, double threshold) {
  if (scores.size() != space.size()) throw ShapeError("score width does not match the label space");
  const auto mask = feasible_mask(space, f, threshold);
  std::size_t best = scores.size();
  for (std::size_t c = 0; c < scores.size(); ++c)
    if (mask[c] && (best == scores.size() || scores[c] > scores[best])) best = c;
  if (best == scores.size()) throw EmptyCandidateError("no composition passes the feasibility threshold");
  return best;
}

/// Default threshold grid: every distinct finite rho in the space, plus one
/// value below them all (no filtering).
inline std::vector<double> threshold_grid(const TargetSpace& space, const FeasibilityScores& f) {
  std::vector<double> grid;
  for (const Pair& p : space.pairs)
    if (std::isfinite(f.at(p))) grid.push_back(f.at(p));
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  grid.insert(grid.begin(), grid.empty() ? -1.0 : grid.front() - 1.0);
  return grid;
}

struct ThresholdChoice {
  double threshold = 0.0;
  MetricsReport metrics;
};

/// T maximizing validation AUC; ties go to the smaller T.
inline ThresholdChoice calibrate_threshold(const ScoreMatrix& validation, const TargetSpace& space,
                                           const FeasibilityScores& f, std::vector<double> grid) {
  if (grid.empty()) throw ConfigError("empty threshold grid");
  if (validation.samples == 0) throw PreconditionError("empty validation split");
  std::sort(grid.begin(), grid.end());
  ThresholdChoice best;
  bool first = true;
  for (double t : grid) {
    ScoreMatrix m = validation;
    m.allowed = feasible_mask(space, f, t);
    const MetricsReport r = evaluate_scores(m);
    if (first || r.AUC > best.metrics.AUC) {
      best = {t, r};
      first = false;
    }
  }
  return best;
}

}  // namespace czsl
