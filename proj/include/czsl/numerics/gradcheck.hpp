#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "czsl/numerics/parameters.hpp"

namespace czsl {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked_scalars = 0;
  // Worst error with its index, and scalar count, per parameter.
  std::map<std::string, std::pair<double, std::size_t>> per_parameter;
  std::map<std::string, std::size_t> scalars;

  /// Worst error restricted to the named parameters.
  GradCheckReport restricted_to(const std::set<std::string>& names) const {
    GradCheckReport r;
    for (const auto& [name, worst] : per_parameter) {
      if (!names.count(name)) continue;
      r.per_parameter[name] = worst;
      if (r.worst_parameter.empty() || worst.first > r.max_relative_error) {
        r.max_relative_error = worst.first;
        r.worst_parameter = name;
        r.worst_index = worst.second;
      }
    }
    for (const auto& [name, count] : scalars)
      if (names.count(name)) {
        r.scalars[name] = count;
        r.checked_scalars += count;
      }
    return r;
  }
};

/// Compares reverse-mode gradients of `loss` against central differences over
/// every scalar of every trainable parameter. Frozen parameters are skipped.
///
/// `loss` must be a deterministic function of the parameter values; it is
/// evaluated once under a tape for the analytic gradient and twice per scalar
/// without one. The error per scalar is |analytic - numeric| / max(1, |analytic|).
inline GradCheckReport finite_difference_check(ParameterStore& params, const std::function<Var()>& loss,
                                               double step) {
  if (!(step > 0.0)) throw DomainError("finite-difference step must be positive");
  params.zero_grad();
  double base = 0.0;
  {
    Tape tape;
    Var l = loss();
    base = l.item();
    tape.backward(l);
  }
  {
    const double again = loss().item();
    if (again != base) throw PreconditionError("loss is not deterministic; disable dropout before checking");
  }
  GradCheckReport report;
  for (auto& p : params.all()) {
    if (!p.trainable()) continue;
    std::vector<double> analytic = p.var.grad() ? *p.var.grad() : std::vector<double>(p.var.numel(), 0.0);
    auto& values = p.var.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss().item();
      values[i] = saved - step;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      ++report.checked_scalars;
      ++report.scalars[p.name];
      auto& worst = report.per_parameter.try_emplace(p.name, err, i).first->second;
      if (err > worst.first) worst = {err, i};
      if (report.worst_parameter.empty() || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = p.name;
        report.worst_index = i;
      }
    }
  }
  params.zero_grad();
  return report;
}

}  // namespace czsl
