#pragma once

// Adam with coupled L2, logistic learning-rate decay, and early stopping.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "ganbalance/params.hpp"

namespace ganbalance {

struct AdamConfig {
  double beta1 = 0.5;  // "momentum" in the DCGAN/DCNN training recipes
  double beta2 = 0.999;
  double eps = 1e-8;
  double l2 = 0.0;  // added to the gradient as l2 * theta
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

template <typename T>
AdamState make_adam_state(const ParamSet<T>& params) {
  AdamState s;
  for (const auto& e : params.entries()) {
    s.m.emplace_back(e.tensor.size(), 0.0);
    s.v.emplace_back(e.tensor.size(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam update from the parameters' accumulated gradients
/// (missing gradients count as zero). Returns false and leaves both the
/// parameters and the state untouched if any gradient is non-finite.
template <typename T>
[[nodiscard]] bool adam_step(ParamSet<T>& params, AdamState& state, double lr,
                             const AdamConfig& cfg = {}) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) throw std::invalid_argument("adam state does not match parameters");
  for (std::size_t p = 0; p < entries.size(); ++p) {
    if (state.m[p].size() != entries[p].tensor.size())
      throw std::invalid_argument("adam state shape mismatch for " + entries[p].name);
    for (auto g : entries[p].tensor.grad())
      if (!std::isfinite(static_cast<double>(g))) return false;
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& tensor = entries[p].tensor;
    const auto grad = tensor.grad();
    auto theta = tensor.mutable_data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      g += cfg.l2 * static_cast<double>(theta[i]);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  return true;
}

struct LrSchedule {
  enum class Kind { constant, sigmoid_decay };
  Kind kind = Kind::constant;
  double lr0 = 1e-3;
  double lr_min = 1e-5;
  double midpoint = 50.0;
  double width = 10.0;

  static LrSchedule constant_rate(double lr0) { return {Kind::constant, lr0, lr0, 0.0, 1.0}; }

  /// Midpoint at half the run, width a tenth of it, floor lr0/100.
  static LrSchedule sigmoid_decay_for(double lr0, std::size_t total_iterations) {
    const double total = static_cast<double>(total_iterations);
    return {Kind::sigmoid_decay, lr0, lr0 / 100.0, total / 2.0, std::max(total / 10.0, 1e-9)};
  }
};

/// lr_min + (lr0 - lr_min) * logistic((midpoint - t) / width) for sigmoid decay.
inline double schedule_lr(const LrSchedule& s, double t) {
  if (s.kind == LrSchedule::Kind::constant) return s.lr0;
  const double z = (s.midpoint - t) / s.width;
  const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return s.lr_min + (s.lr0 - s.lr_min) * sig;
}

struct EarlyStopConfig {
  std::size_t patience = 10;
  double min_delta = 0.0;
};

struct EarlyStopDecision {
  bool stop = false;
  std::size_t best_index = 0;
};

/// Stops once `patience` entries have passed without beating the best by more
/// than min_delta; best_index is the entry to restore.
inline EarlyStopDecision early_stop_check(std::span<const double> history, const EarlyStopConfig& cfg) {
  if (history.empty()) throw std::invalid_argument("early_stop_check: empty history");
  if (cfg.patience < 1) throw std::invalid_argument("early_stop_check: patience must be >= 1");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] > history[best] + cfg.min_delta) best = i;
  return {history.size() - 1 - best >= cfg.patience, best};
}

}  // namespace ganbalance
