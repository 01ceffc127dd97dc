#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "p2p/tensor.hpp"

namespace p2p::nn {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// AdamW with decoupled weight decay and bias correction. Moments are kept per
// parameter slot, keyed by position in the parameter list.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  AdamWConfig& config() { return cfg_; }
  const AdamWConfig& config() const { return cfg_; }
  uint64_t step_count() const { return t_; }

  void step(std::vector<Parameter<T>>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
    }
    if (m_.size() != params.size())
      throw LengthMismatch("optimizer state holds " + std::to_string(m_.size()) +
                           " slots, got " + std::to_string(params.size()) + " params");
    ++t_;
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T bc1 = T(1) - T(std::pow(cfg_.beta1, double(t_)));
    const T bc2 = T(1) - T(std::pow(cfg_.beta2, double(t_)));
    const T lr = T(cfg_.lr), eps = T(cfg_.eps), wd = T(cfg_.weight_decay);

    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      if (!p.trainable) continue;
      if (!p.tensor.has_grad()) throw MissingGrad("no gradient for parameter " + p.name);
      const auto& g = p.tensor.grad();
      auto& m = m_[pi];
      auto& v = v_[pi];
      if (m.empty()) {
        m.assign(g.size(), T(0));
        v.assign(g.size(), T(0));
      }
      if (m.size() != g.size())
        throw LengthMismatch("moment size mismatch for parameter " + p.name);
      T* w = p.tensor.data();
      for (size_t i = 0; i < g.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        T mhat = m[i] / bc1;
        T vhat = v[i] / bc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
      }
    }
  }

  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  uint64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace p2p::nn
