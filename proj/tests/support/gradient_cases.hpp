#pragma once

// Seeded finite-difference cases for every differentiable layer, shared by
// the unit tests and the acceptance runner.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "ganbalance/ops.hpp"
#include "oracles.hpp"

namespace gradcases {

using D = ganbalance::BasicTensor<double>;
using ganbalance::Shape;

struct LayerReport {
  std::size_t cases = 0;
  std::size_t failures = 0;
  std::string first_failure;
};

// Scalar loss sum(y * r) with a fixed random projection r.
inline D project(const D& y, std::mt19937& gen) {
  auto r = oracle::random_tensor<double>(y.shape(), gen);
  return ganbalance::sum(ganbalance::mul(y, r));
}

inline std::size_t pick(std::mt19937& gen, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
}

inline oracle::GradCheckResult conv2d_case(unsigned seed) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 1, 2), cin = pick(gen, 1, 3), cout = pick(gen, 1, 3);
  const std::size_t k = pick(gen, 1, 4), stride = pick(gen, 1, 2), pad = pick(gen, 0, 2);
  const std::size_t h = pick(gen, std::max<std::size_t>(k, 2), 6), w = pick(gen, std::max<std::size_t>(k, 2), 6);
  auto x = oracle::random_tensor<double>({n, cin, h, w}, gen, -1, 1, true);
  auto wt = oracle::random_tensor<double>({cout, cin, k, k}, gen, -1, 1, true);
  auto b = oracle::random_tensor<double>({cout}, gen, -1, 1, true);
  auto r = oracle::random_tensor<double>(ganbalance::conv2d(x, wt, b, stride, pad).shape(), gen);
  return oracle::check_gradients({&x, &wt, &b}, [&] {
    return ganbalance::sum(ganbalance::mul(ganbalance::conv2d(x, wt, b, stride, pad), r));
  });
}

inline oracle::GradCheckResult conv2d_transpose_case(unsigned seed) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 1, 2), cin = pick(gen, 1, 3), cout = pick(gen, 1, 3);
  const std::size_t k = pick(gen, 2, 4), stride = pick(gen, 1, 2), pad = pick(gen, 0, 1);
  const std::size_t h = pick(gen, 1, 4), w = pick(gen, 1, 4);
  if ((h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad) return conv2d_transpose_case(seed + 7919);
  auto x = oracle::random_tensor<double>({n, cin, h, w}, gen, -1, 1, true);
  auto wt = oracle::random_tensor<double>({cin, cout, k, k}, gen, -1, 1, true);
  auto b = oracle::random_tensor<double>({cout}, gen, -1, 1, true);
  auto r = oracle::random_tensor<double>(ganbalance::conv2d_transpose(x, wt, b, stride, pad).shape(), gen);
  return oracle::check_gradients({&x, &wt, &b}, [&] {
    return ganbalance::sum(ganbalance::mul(ganbalance::conv2d_transpose(x, wt, b, stride, pad), r));
  });
}

inline oracle::GradCheckResult maxpool_case(unsigned seed) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 1, 2), c = pick(gen, 1, 3), h = 2 * pick(gen, 1, 3), w = 2 * pick(gen, 1, 3);
  auto x = oracle::random_distinct_tensor<double>({n, c, h, w}, gen, 0.05, true);
  auto r = oracle::random_tensor<double>({n, c, h / 2, w / 2}, gen);
  return oracle::check_gradients({&x}, [&] { return ganbalance::sum(ganbalance::mul(ganbalance::maxpool2x2(x), r)); });
}

inline oracle::GradCheckResult dense_case(unsigned seed) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 1, 4), k = pick(gen, 1, 6), m = pick(gen, 1, 5);
  auto x = oracle::random_tensor<double>({n, k}, gen, -1, 1, true);
  auto wt = oracle::random_tensor<double>({k, m}, gen, -1, 1, true);
  auto b = oracle::random_tensor<double>({m}, gen, -1, 1, true);
  auto r = oracle::random_tensor<double>({n, m}, gen);
  return oracle::check_gradients({&x, &wt, &b}, [&] {
    return ganbalance::sum(ganbalance::mul(ganbalance::dense(x, wt, b), r));
  });
}

inline oracle::GradCheckResult batchnorm_case(unsigned seed, ganbalance::NormMode mode) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 2, 3), c = pick(gen, 1, 3), h = pick(gen, 1, 3), w = pick(gen, 1, 3);
  auto x = oracle::random_tensor<double>({n, c, h, w}, gen, -2, 2, true);
  auto gamma = oracle::random_tensor<double>({c}, gen, 0.5, 1.5, true);
  auto beta = oracle::random_tensor<double>({c}, gen, -1, 1, true);
  ganbalance::BatchNormState<double> state(c);
  for (auto& v : state.running_mean) v = std::uniform_real_distribution<double>(-0.5, 0.5)(gen);
  for (auto& v : state.running_var) v = std::uniform_real_distribution<double>(0.5, 2.0)(gen);
  const auto frozen = state;
  auto r = oracle::random_tensor<double>(x.shape(), gen);
  return oracle::check_gradients({&x, &gamma, &beta}, [&] {
    state = frozen;
    return ganbalance::sum(ganbalance::mul(ganbalance::batchnorm2d(x, gamma, beta, state, mode), r));
  });
}

inline oracle::GradCheckResult activation_case(unsigned seed, ganbalance::Activation kind) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 1, 12);
  auto x = oracle::random_tensor_off_zero<double>({n}, gen, 0.01, true);
  // Spread beyond the saturating range of tanh/sigmoid as well.
  for (auto& v : x.mutable_data()) v *= 3.0;
  auto r = oracle::random_tensor<double>({n}, gen);
  return oracle::check_gradients({&x}, [&] {
    return ganbalance::sum(ganbalance::mul(ganbalance::apply_activation(x, kind), r));
  });
}

inline oracle::GradCheckResult softmax_xent_case(unsigned seed) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 1, 4), c = pick(gen, 2, 6);
  auto logits = oracle::random_tensor<double>({n, c}, gen, -3, 3, true);
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(pick(gen, 0, c - 1));
  return oracle::check_gradients({&logits}, [&] {
    return ganbalance::cross_entropy(ganbalance::softmax(logits), labels);
  });
}

inline oracle::GradCheckResult bce_logits_case(unsigned seed) {
  std::mt19937 gen(seed);
  const std::size_t n = pick(gen, 1, 8);
  auto logits = oracle::random_tensor<double>({n, 1}, gen, -4, 4, true);
  const double target = (seed % 2) ? 1.0 : 0.0;
  return oracle::check_gradients({&logits}, [&] { return ganbalance::bce_with_logits(logits, target); });
}

// conv -> relu -> pool -> dense -> softmax -> cross-entropy on a 1x1x8x8 input.
// Draws are rejected while any rectifier input or pooling near-tie sits within
// reach of the difference step, where the loss is not differentiable.
inline oracle::GradCheckResult composite_case(unsigned seed) {
  std::mt19937 gen(seed);
  const std::size_t n = 2;
  const double margin = 5e-3;
  D x, cw, cb, dw, db;
  for (;;) {
    x = oracle::random_tensor<double>({n, 1, 8, 8}, gen, -1, 1, false);
    cw = oracle::random_tensor<double>({3, 1, 3, 3}, gen, -0.5, 0.5, true);
    cb = oracle::random_tensor<double>({3}, gen, 0.05, 0.2, true);
    const auto pre = ganbalance::conv2d(x, cw, cb, 1, 1);
    bool clean = true;
    for (auto v : pre.data()) clean = clean && std::abs(v) > margin;
    const auto act = ganbalance::relu(pre);
    for (std::size_t p = 0; clean && p < n * 3; ++p)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          std::vector<double> win;
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj) win.push_back(act[(p * 8 + 2 * i + di) * 8 + 2 * j + dj]);
          std::sort(win.rbegin(), win.rend());
          if (win[0] > 0 && win[0] - win[1] < margin) clean = false;
        }
    if (clean) break;
  }
  dw = oracle::random_tensor<double>({3 * 4 * 4, 5}, gen, -0.5, 0.5, true);
  db = oracle::random_tensor<double>({5}, gen, -0.1, 0.1, true);
  std::vector<int> labels{static_cast<int>(seed % 5), static_cast<int>((seed + 2) % 5)};
  return oracle::check_gradients({&cw, &cb, &dw, &db}, [&] {
    auto h = ganbalance::relu(ganbalance::conv2d(x, cw, cb, 1, 1));
    auto f = ganbalance::flatten(ganbalance::maxpool2x2(h));
    return ganbalance::cross_entropy(ganbalance::softmax(ganbalance::dense(f, dw, db)), labels);
  });
}

/// Runs `cases` seeded instances per layer.
inline std::map<std::string, LayerReport> run_suite(std::size_t cases, unsigned base_seed = 1000) {
  using ganbalance::Activation;
  using ganbalance::NormMode;
  std::map<std::string, std::function<oracle::GradCheckResult(unsigned)>> layers{
      {"conv2d", conv2d_case},
      {"conv2d_transpose", conv2d_transpose_case},
      {"maxpool2x2", maxpool_case},
      {"dense", dense_case},
      {"batchnorm2d/train", [](unsigned s) { return batchnorm_case(s, NormMode::train); }},
      {"batchnorm2d/eval", [](unsigned s) { return batchnorm_case(s, NormMode::eval); }},
      {"relu", [](unsigned s) { return activation_case(s, Activation::relu); }},
      {"leaky_relu", [](unsigned s) { return activation_case(s, Activation::leaky_relu); }},
      {"tanh", [](unsigned s) { return activation_case(s, Activation::tanh); }},
      {"sigmoid", [](unsigned s) { return activation_case(s, Activation::sigmoid); }},
      {"softmax+cross_entropy", softmax_xent_case},
      {"bce_with_logits", bce_logits_case},
      {"composite conv-relu-pool-dense-softmax-xent", composite_case},
  };
  std::map<std::string, LayerReport> out;
  for (const auto& [name, fn] : layers) {
    auto& rep = out[name];
    for (std::size_t i = 0; i < cases; ++i) {
      const auto res = fn(base_seed + static_cast<unsigned>(i));
      ++rep.cases;
      if (!res.ok) {
        if (rep.failures == 0) rep.first_failure = "seed " + std::to_string(base_seed + i) + " " + res.where;
        ++rep.failures;
      }
    }
  }
  return out;
}

}  // namespace gradcases
