#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "czsl/numerics/tensor.hpp"

namespace czsl {

/// Log clamp used by cross-entropy so a zero probability yields a large
/// finite loss instead of infinity.
inline constexpr double kLogClamp = 1e-12;

/// Numerically stable softmax(logits / temperature).
inline void softmax_into(std::span<const double> logits, double temperature, std::span<double> out) {
  if (!(temperature > 0.0)) throw DomainError("softmax temperature must be positive");
  if (logits.empty()) throw ShapeError("softmax of empty vector");
  double peak = -INFINITY;
  for (double v : logits) {
    if (std::isnan(v)) throw DomainError("softmax input contains NaN");
    peak = std::max(peak, v);
  }
  if (!std::isfinite(peak)) throw DomainError("softmax input is not finite");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - peak) / temperature);
    total += out[i];
  }
  for (double& v : out.first(logits.size())) v /= total;
}

inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  std::vector<double> out(logits.size());
  softmax_into(logits, temperature, out);
  return out;
}

/// -(1/B) sum_b log p_b[target_b], with the log argument clamped at kLogClamp.
inline double cross_entropy_mean(const std::vector<std::vector<double>>& probabilities,
                                 std::span<const std::size_t> targets) {
  if (probabilities.empty() || probabilities.size() != targets.size())
    throw ShapeError("cross-entropy needs one target per probability row");
  double loss = 0.0;
  for (std::size_t b = 0; b < probabilities.size(); ++b) {
    const auto& row = probabilities[b];
    if (targets[b] >= row.size())
      throw IndexError("target " + std::to_string(targets[b]) + " outside " +
                       std::to_string(row.size()) + " classes");
    loss -= std::log(std::max(row[targets[b]], kLogClamp));
  }
  return loss / static_cast<double>(probabilities.size());
}

struct AttentionResult {
  std::vector<double> output;
  std::vector<double> weights;
};

/// softmax(q K^T / sqrt(d)) V for a single query.
inline AttentionResult scaled_dot_attention(std::span<const double> query, const Tensor& keys,
                                            const Tensor& values) {
  const std::size_t width = query.size();
  if (keys.cols() != width || values.rows() != keys.rows())
    throw ShapeError("attention: query width " + std::to_string(width) + ", keys " +
                     Tensor::describe(keys.shape) + ", values " + Tensor::describe(values.shape));
  const std::size_t n = keys.rows();
  std::vector<double> scores(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < width; ++c) s += query[c] * keys.at(j, c);
    scores[j] = s * scale;
  }
  AttentionResult r;
  r.weights = softmax(scores);
  r.output.assign(values.cols(), 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < values.cols(); ++c) r.output[c] += r.weights[j] * values.at(j, c);
  return r;
}

}  // namespace czsl
