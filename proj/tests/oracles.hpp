#pragma once

// Brute-force reference evaluators shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <random>
#include <vector>

#include "czsl/eval.hpp"

namespace oracle {

struct GridPoint {
  double bias, seen, unseen;
};

// Accuracy at one bias by a plain argmax with the bias added to unseen columns.
inline GridPoint accuracy_at(const czsl::ScoreMatrix& m, double bias) {
  double seen_hit = 0, seen_n = 0, unseen_hit = 0, unseen_n = 0;
  for (std::size_t n = 0; n < m.samples; ++n) {
    std::size_t best = m.compositions;
    double best_score = 0.0;
    for (std::size_t c = 0; c < m.compositions; ++c) {
      if (!m.allowed.empty() && !m.allowed[c]) continue;
      const double s = m.scores[n * m.compositions + c] + (m.pair_seen[c] ? 0.0 : bias);
      if (best == m.compositions || s > best_score) best = c, best_score = s;
    }
    const bool hit = best == m.truth[n];
    if (m.sample_seen[n]) seen_n += 1, seen_hit += hit;
    else unseen_n += 1, unseen_hit += hit;
  }
  return {bias, seen_hit / seen_n, unseen_hit / unseen_n};
}

// Evenly spaced biases wide enough that the end points act as -inf and +inf.
inline std::vector<GridPoint> dense_grid(const czsl::ScoreMatrix& m, std::size_t points = 100000) {
  const auto [lo, hi] = std::minmax_element(m.scores.begin(), m.scores.end());
  const double reach = (*hi - *lo) + 1.0;
  std::vector<GridPoint> out;
  out.reserve(points);
  for (std::size_t k = 0; k < points; ++k)
    out.push_back(accuracy_at(m, -reach + 2.0 * reach * static_cast<double>(k) / static_cast<double>(points - 1)));
  return out;
}

struct Metrics {
  double S, U, HM, AUC;
};

// Metrics straight off the grid: area integrated along the bias path.
inline Metrics grid_metrics(const std::vector<GridPoint>& g) {
  Metrics r{g.front().seen, g.back().unseen, 0.0, 0.0};
  for (const auto& p : g)
    if (p.seen + p.unseen > 0) r.HM = std::max(r.HM, 2 * p.seen * p.unseen / (p.seen + p.unseen));
  for (std::size_t k = g.size() - 1; k > 0; --k)
    r.AUC += (g[k - 1].seen - g[k].seen) * 0.5 * (g[k - 1].unseen + g[k].unseen);
  return r;
}

inline czsl::ScoreMatrix random_matrix(std::mt19937_64& rng, std::size_t samples, std::size_t compositions) {
  std::normal_distribution<double> score(0.0, 1.0);
  std::vector<bool> pair_seen(compositions);
  for (std::size_t c = 0; c < compositions; ++c) pair_seen[c] = c % 3 != 0;
  std::vector<std::vector<double>> rows(samples, std::vector<double>(compositions));
  std::vector<std::size_t> truth(samples);
  for (std::size_t n = 0; n < samples; ++n) {
    for (double& v : rows[n]) v = score(rng);
    truth[n] = (n * 5 + 1) % compositions;
    rows[n][truth[n]] += 1.0;
  }
  return czsl::make_score_matrix(std::move(rows), truth, pair_seen);
}

}  // namespace oracle
