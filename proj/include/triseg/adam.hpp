#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "triseg/tensor.hpp"

namespace triseg {

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 1e-7;  // L2 term added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void validate_adam_config(const AdamConfig& c) {
  if (!(c.lr > 0)) throw std::invalid_argument("adam: learning rate must be positive");
  if (c.weight_decay < 0) throw std::invalid_argument("adam: weight decay must be non-negative");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1))
    throw std::invalid_argument("adam: betas must lie in [0,1)");
  if (!(c.eps > 0)) throw std::invalid_argument("adam: eps must be positive");
}

/// Adam with bias correction over a fixed parameter list. step() consumes
/// the gradients currently accumulated on the parameters; if any gradient
/// holds a non-finite value the whole update is rejected (no parameter,
/// moment or counter changes) and step() returns false.
template <class T>
class AdamT {
 public:
  AdamT(std::vector<std::pair<std::string, Tensor<T>>> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    validate_adam_config(cfg_);
    if (params_.empty()) throw std::invalid_argument("adam: no parameters");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, p] : params_) {
      if (!p.is_leaf()) throw std::invalid_argument("adam: parameter '" + name + "' is not a leaf");
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  bool step() {
    for (auto& [name, p] : params_)
      if (!all_finite<T>(p.grad())) return false;
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i].second;
      std::span<const T> g = p.grad();
      std::span<T> w = p.values_mut();
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (int64_t j = 0; j < p.numel(); ++j) {
        const double gj = static_cast<double>(g[j]) + cfg_.weight_decay * w[j];
        m[j] = static_cast<T>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj);
        v[j] = static_cast<T>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj);
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    return true;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  int64_t steps() const { return steps_; }
  size_t size() const { return params_.size(); }
  const std::string& name(size_t i) const { return params_.at(i).first; }
  std::span<const T> moment1(size_t i) const { return m_.at(i); }
  std::span<const T> moment2(size_t i) const { return v_.at(i); }

  /// Restores optimizer state from a checkpoint. Moments must match the
  /// parameter sizes exactly.
  void restore(int64_t steps, size_t i, std::span<const T> m, std::span<const T> v) {
    if (steps < 0) throw std::invalid_argument("adam: negative step count");
    if (m.size() != m_.at(i).size() || v.size() != v_.at(i).size())
      throw std::invalid_argument("adam: moment size mismatch for '" + params_[i].first + "'");
    steps_ = steps;
    std::copy(m.begin(), m.end(), m_[i].begin());
    std::copy(v.begin(), v.end(), v_[i].begin());
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  int64_t steps_ = 0;
};

using Adam = AdamT<float>;

}  // namespace triseg
