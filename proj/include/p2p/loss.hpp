#pragma once

#include <array>
#include <string>

#include "p2p/geometry.hpp"
#include "p2p/nn.hpp"

namespace p2p::loss {

using nn::Tensor;

enum class LossType { gaussian_nll, l1 };

inline std::string loss_name(LossType t) {
  return t == LossType::gaussian_nll ? "gaussian_nll" : "l1";
}

inline LossType loss_from_name(const std::string& s) {
  if (s == "gaussian_nll") return LossType::gaussian_nll;
  if (s == "l1") return LossType::l1;
  throw ConfigError("unknown loss: " + s);
}

struct LossConfig {
  LossType type = LossType::gaussian_nll;
  std::array<double, 4> weights = {1.0, 1.0, 1.0, 1.0};
  double log_sigma_clamp = 6.0;
};

template <class T>
Tensor<T> motion_target(const MotionDelta& d) {
  return Tensor<T>::from_data({1, 4}, {T(d.dx), T(d.dy), T(d.dz), T(d.dyaw)});
}

namespace detail {

// Residual [1, 4] between predicted and target motion; the yaw component is
// wrapped to (-pi, pi] so a prediction just past the seam is scored as nearby.
template <class T>
Tensor<T> motion_residual(const Tensor<T>& mean, const Tensor<T>& target) {
  Tensor<T> r = nn::sub(mean, target);
  Tensor<T> xyz = nn::slice(r, 1, 0, 3);
  Tensor<T> yaw = nn::wrap_angle_op(nn::slice(r, 1, 3, 1));
  return nn::concat<T>({xyz, yaw}, 1);
}

template <class T>
Tensor<T> weight_row(const std::array<double, 4>& w) {
  return Tensor<T>::from_data({1, 4}, {T(w[0]), T(w[1]), T(w[2]), T(w[3])});
}

}  // namespace detail

// Heteroscedastic regression objective. For each motion dimension with
// residual r and predicted log-scale s (clamped to +-log_sigma_clamp):
//   0.5 * exp(-2 s) * r^2 + s
// summed with per-dimension weights. At the optimum over s the per-dimension
// value is 0.5 + log|r|, so confident wrong answers are penalized and the
// scales stay bounded.
template <class T>
Tensor<T> gaussian_nll(const Tensor<T>& out, const Tensor<T>& target,
                       const LossConfig& cfg = {}) {
  if (out.ndim() != 2 || out.shape()[0] != 1 || out.shape()[1] != 8)
    throw ShapeMismatch("gaussian_nll expects [1,8] head output, got " +
                        nn::shape_str(out.shape()));
  if (target.ndim() != 2 || target.shape()[0] != 1 || target.shape()[1] != 4)
    throw ShapeMismatch("gaussian_nll expects [1,4] target");
  Tensor<T> mean = nn::slice(out, 1, 0, 4);
  Tensor<T> s = nn::clamp(nn::slice(out, 1, 4, 4), T(-cfg.log_sigma_clamp),
                          T(cfg.log_sigma_clamp));
  Tensor<T> r = detail::motion_residual(mean, target);
  Tensor<T> precision = nn::exp_t(nn::mul_scalar(s, T(-2)));
  Tensor<T> quad = nn::mul_scalar(nn::mul(precision, nn::square(r)), T(0.5));
  Tensor<T> per_dim = nn::add(quad, s);
  return nn::sum_all(nn::mul(per_dim, detail::weight_row<T>(cfg.weights)));
}

// Weighted absolute error over the four motion dimensions. Accepts either a
// [1,4] head or a [1,8] head (extra columns ignored).
template <class T>
Tensor<T> l1_loss(const Tensor<T>& out, const Tensor<T>& target,
                  const LossConfig& cfg = {}) {
  if (out.ndim() != 2 || out.shape()[0] != 1 ||
      (out.shape()[1] != 4 && out.shape()[1] != 8))
    throw ShapeMismatch("l1 loss expects [1,4] or [1,8] head output, got " +
                        nn::shape_str(out.shape()));
  if (target.ndim() != 2 || target.shape()[0] != 1 || target.shape()[1] != 4)
    throw ShapeMismatch("l1 loss expects [1,4] target");
  Tensor<T> mean = out.shape()[1] == 8 ? nn::slice(out, 1, 0, 4) : out;
  Tensor<T> r = detail::motion_residual(mean, target);
  return nn::sum_all(nn::mul(nn::abs_t(r), detail::weight_row<T>(cfg.weights)));
}

template <class T>
Tensor<T> motion_loss(const Tensor<T>& out, const MotionDelta& target,
                      const LossConfig& cfg = {}) {
  Tensor<T> t = motion_target<T>(target);
  if (cfg.type == LossType::gaussian_nll) return gaussian_nll(out, t, cfg);
  return l1_loss(out, t, cfg);
}

}  // namespace p2p::loss
