#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "skurg/param_store.hpp"
#include "skurg/tensor.hpp"

namespace skurg {

// Central-difference gradient estimate per scalar parameter. The loss function
// must be a deterministic pure function of the stored parameter values; it is
// evaluated with graph recording disabled.
template <class Real>
std::unordered_map<std::string, std::vector<Real>> finite_diff_grad(
    const std::function<Real()>& loss, ParamStoreT<Real>& params, Real epsilon) {
  if (!(epsilon > Real(0))) throw GraphError("finite_diff_grad: epsilon must be positive");
  NoGradGuard ng;
  std::unordered_map<std::string, std::vector<Real>> out;
  for (auto& [name, t] : params) {
    auto v = t.values_mut();
    std::vector<Real> g(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const Real keep = v[i];
      v[i] = keep + epsilon;
      const Real up = loss();
      v[i] = keep - epsilon;
      const Real down = loss();
      v[i] = keep;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw GraphError("finite_diff_grad: non-finite loss while probing " + name);
      g[i] = (up - down) / (Real(2) * epsilon);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  std::int64_t checked = 0;   // entries above the magnitude floor
  std::int64_t skipped = 0;   // entries below the floor on both routes
  std::int64_t failed = 0;
  double max_rel_error = 0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> failures;

  bool passed() const { return failed == 0; }
};

// Compares analytic gradients against finite differences. Entries where both
// routes fall below magnitude_floor carry no signal and are skipped.
template <class Real>
GradCheckReport compare_gradients(
    const std::unordered_map<std::string, std::vector<Real>>& analytic,
    const std::unordered_map<std::string, std::vector<Real>>& numeric, double tolerance,
    double magnitude_floor = 1e-8) {
  GradCheckReport report;
  for (const auto& [name, a] : analytic) {
    auto it = numeric.find(name);
    if (it == numeric.end()) throw GraphError("gradcheck: missing numeric gradient for " + name);
    const auto& n = it->second;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double av = double(a[i]), nv = double(n[i]);
      if (std::abs(av) <= magnitude_floor && std::abs(nv) <= magnitude_floor) {
        ++report.skipped;
        continue;
      }
      ++report.checked;
      const double rel = std::abs(av - nv) / std::max(std::abs(av), std::abs(nv));
      GradCheckEntry entry{name, i, av, nv, rel};
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = entry;
      }
      if (rel > tolerance) {
        ++report.failed;
        if (report.failures.size() < 32) report.failures.push_back(entry);
      }
    }
  }
  return report;
}

}  // namespace skurg
