#pragma once

// Momentum SGD with decoupled velocity buffers:
//   g' = g + wd * w;  v' = mu * v + g';  w' = w - lr * v'

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedx {

template <typename T>
struct SgdConfig {
  T lr = T(0.01);
  T momentum = T(0.9);
  T weight_decay = T(1e-5);
};

template <typename T>
struct SgdState {
  SgdConfig<T> cfg;
  std::map<std::string, std::vector<T>> momentum_buffers;

  explicit SgdState(SgdConfig<T> c = {}) : cfg(c) {
    if (!(cfg.lr >= T(0))) throw std::invalid_argument("sgd: learning rate must be >= 0");
    if (!(cfg.momentum >= T(0) && cfg.momentum < T(1)))
      throw std::invalid_argument("sgd: momentum must be in [0,1)");
    if (!(cfg.weight_decay >= T(0)))
      throw std::invalid_argument("sgd: weight decay must be >= 0");
  }

  void step(const std::string& name, std::vector<T>& w, const std::vector<T>& g) {
    if (w.size() != g.size()) throw std::invalid_argument("sgd: param/grad shape mismatch");
    auto& v = momentum_buffers[name];
    if (v.empty()) v.assign(w.size(), T(0));
    if (v.size() != w.size()) throw std::invalid_argument("sgd: buffer shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      T gd = g[i] + cfg.weight_decay * w[i];
      v[i] = cfg.momentum * v[i] + gd;
      w[i] -= cfg.lr * v[i];
    }
  }
};

}  // namespace fedx
