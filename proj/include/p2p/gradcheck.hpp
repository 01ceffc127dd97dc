#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "p2p/optim.hpp"
#include "p2p/tensor.hpp"

namespace p2p::nn {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  size_t max_coords_per_param = 100;
  uint64_t seed = 0;
  // Coordinates failing at h are retried at h * scale. A step that straddles a
  // piecewise-linear kink inflates the difference quotient, but the crossing
  // window shrinks with h, so shrinking the step rescues those coordinates; a
  // wrong analytic gradient disagrees at every step size.
  std::vector<double> retry_scales = {0.1, 0.01};
  // Optional coordinate filter (name, flat index, current value) -> skip when true.
  std::function<bool(const std::string&, size_t, double)> exclude;
};

struct GradCheckEntry {
  std::string name;
  size_t checked = 0;
  double max_rel_err = 0.0;
  size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  size_t total_checked = 0;

  bool passed(double tol) const { return max_rel_err <= tol; }
};

// Central-difference audit of analytic gradients. loss_fn rebuilds the scalar
// loss from the current parameter values; perturbed evaluations run with grad
// mode off so only values are recomputed. Relative error uses
// |a - n| / max(1, |a|, |n|), in 64-bit.
template <class LossFn>
inline GradCheckReport finite_diff_check(LossFn&& loss_fn,
                                         std::vector<Parameter<double>>& params,
                                         GradCheckOptions opts = {}) {
  for (auto& p : params) p.tensor.zero_grad();
  Tensor<double> loss = loss_fn();
  backward(loss);

  GradCheckReport report;
  Rng rng(opts.seed);
  for (auto& p : params) {
    if (!p.trainable) continue;
    if (!p.tensor.has_grad()) throw MissingGrad("no gradient for parameter " + p.name);
    std::vector<double> analytic = p.tensor.grad();

    std::vector<size_t> coords;
    const size_t n = p.tensor.size();
    if (n <= opts.max_coords_per_param) {
      coords.resize(n);
      for (size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (size_t i = 0; i < opts.max_coords_per_param; ++i)
        coords.push_back(size_t(rng.uniform_index(n)));
    }

    GradCheckEntry entry;
    entry.name = p.name;
    double* w = p.tensor.data();
    auto central_diff = [&](size_t idx, double orig, double h) {
      NoGradGuard ng;
      w[idx] = orig + h;
      double lp = loss_fn().item();
      w[idx] = orig - h;
      double lm = loss_fn().item();
      w[idx] = orig;
      return (lp - lm) / (2.0 * h);
    };
    auto rel_err = [](double an, double fd) {
      return std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
    };
    for (size_t idx : coords) {
      double orig = w[idx];
      if (opts.exclude && opts.exclude(p.name, idx, orig)) continue;
      double an = analytic[idx];
      double fd = central_diff(idx, orig, opts.h);
      double rel = rel_err(an, fd);
      for (double scale : opts.retry_scales) {
        if (rel <= opts.tol) break;
        double fd2 = central_diff(idx, orig, opts.h * scale);
        double rel2 = rel_err(an, fd2);
        if (rel2 < rel) {
          rel = rel2;
          fd = fd2;
        }
      }
      ++entry.checked;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_coord = idx;
        entry.analytic = an;
        entry.numeric = fd;
      }
    }
    report.total_checked += entry.checked;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace p2p::nn
