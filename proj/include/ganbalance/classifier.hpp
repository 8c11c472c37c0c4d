#pragma once

// Pathology classifier: stages of (5x5 conv, ReLU, 2x2 max-pool), flatten,
// one hidden dense layer, softmax over the five classes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ganbalance/checkpoint.hpp"
#include "ganbalance/image_set.hpp"
#include "ganbalance/labels.hpp"
#include "ganbalance/ops.hpp"
#include "ganbalance/optim.hpp"
#include "ganbalance/params.hpp"
#include "ganbalance/random.hpp"

namespace ganbalance {

struct ConvStage {
  std::size_t out_channels = 16;
  std::size_t kernel = 5;
  std::size_t stride = 1;
  bool pool = true;
};

enum class InitScheme {
  normal,  // N(0, init_std) weights, init_bias biases
  he,      // N(0, 2/fan_in) weights, init_bias biases
};

struct ClassifierConfig {
  std::size_t input_size = 256;
  std::size_t input_channels = 1;
  std::vector<ConvStage> stages{{16}, {32}, {64}, {64}, {64}};
  std::size_t hidden_units = 4096;  // 0 connects the features straight to the output layer
  std::size_t classes = kNumClasses;
  std::size_t batch_size = 128;
  std::size_t iterations = 100;
  std::size_t batches_per_iteration = 0;  // 0 = one full pass over the training set
  LrSchedule schedule = LrSchedule::sigmoid_decay_for(1e-3, 100);
  AdamConfig adam{0.5, 0.999, 1e-8, 1e-4};
  bool early_stopping = true;
  EarlyStopConfig early_stop{10, 0.0};
  InitScheme init = InitScheme::normal;
  double init_std = 0.01;
  double init_bias = 0.1;
  bool zero_init_output = false;

  static ClassifierConfig full_scale() { return {}; }

  /// 64x64 input, four stages ending at 4x4x64.
  static ClassifierConfig desk() {
    ClassifierConfig c;
    c.input_size = 64;
    c.stages = {{8}, {16}, {32}, {64}};
    c.hidden_units = 128;
    c.iterations = 30;
    c.schedule = LrSchedule::sigmoid_decay_for(1e-3, 30);
    c.init = InitScheme::he;  // std 0.01 does not leave chance level in 30 short iterations
    return c;
  }

  /// Spatial extent after each stage (padding keeps the conv output at
  /// ceil(n / stride)).
  std::vector<std::size_t> stage_extents() const {
    std::vector<std::size_t> out;
    std::size_t e = input_size;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      if (s.kernel % 2 == 0 || s.stride < 1)
        throw std::invalid_argument("classifier: stage " + std::to_string(i) + " needs an odd kernel and stride >= 1");
      e = (e + s.stride - 1) / s.stride;
      if (s.pool) {
        if (e % 2 != 0)
          throw std::invalid_argument("classifier: stage " + std::to_string(i) + " pools an odd extent " +
                                      std::to_string(e));
        e /= 2;
      }
      if (e == 0) throw std::invalid_argument("classifier: stack collapses the input");
      out.push_back(e);
    }
    return out;
  }

  std::size_t feature_length() const {
    if (stages.empty()) return input_channels * input_size * input_size;
    const auto e = stage_extents().back();
    return stages.back().out_channels * e * e;
  }
};

class Classifier {
 public:
  Classifier(const ClassifierConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.classes < 2) throw std::invalid_argument("classifier: need at least two classes");
    feature_length_ = cfg_.feature_length();
    std::size_t cin = cfg_.input_channels;
    for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
      const auto& s = cfg_.stages[i];
      const std::string name = "conv" + std::to_string(i + 1);
      add_layer(name, {s.out_channels, cin, s.kernel, s.kernel}, cin * s.kernel * s.kernel, s.out_channels, rng);
      cin = s.out_channels;
    }
    std::size_t width = feature_length_;
    if (cfg_.hidden_units > 0) {
      add_layer("hidden", {width, cfg_.hidden_units}, width, cfg_.hidden_units, rng);
      width = cfg_.hidden_units;
    }
    add_layer("out", {width, cfg_.classes}, width, cfg_.classes, rng);
    if (cfg_.zero_init_output) {
      for (auto* t : {&params_["out.weight"], &params_["out.bias"]})
        std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0f);
    }
  }

  const ClassifierConfig& config() const { return cfg_; }
  ParamSet<float>& params() { return params_; }
  const ParamSet<float>& params() const { return params_; }
  std::size_t feature_length() const { return feature_length_; }

  /// x [n, C, S, S] -> flattened features [n, feature_length].
  Tensor features(const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != cfg_.input_channels || x.dim(2) != cfg_.input_size ||
        x.dim(3) != cfg_.input_size)
      throw ShapeError("classifier: expected [n," + std::to_string(cfg_.input_channels) + "," +
                       std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) + "], got " +
                       to_string(x.shape()));
    auto h = x;
    for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
      const auto& s = cfg_.stages[i];
      const std::string name = "conv" + std::to_string(i + 1);
      h = relu(conv2d(h, params_[name + ".weight"], params_[name + ".bias"], s.stride, s.kernel / 2));
      if (s.pool) h = maxpool2x2(h);
    }
    auto f = flatten(h);
    if (f.dim(1) != feature_length_) throw std::logic_error("classifier feature length audit failed");
    return f;
  }

  /// Class probabilities [n, classes].
  Tensor forward(const Tensor& x) {
    auto h = features(x);
    if (cfg_.hidden_units > 0) h = relu(dense(h, params_["hidden.weight"], params_["hidden.bias"]));
    return softmax(dense(h, params_["out.weight"], params_["out.bias"]));
  }

  NamedTensors state() const { return to_named(params_); }
  void load_state(const NamedTensors& named) { assign_from(params_, named); }

 private:
  void add_layer(const std::string& name, Shape wshape, std::size_t fan_in, std::size_t width, Rng& rng) {
    // Both schemes draw normal weights; `he` scales the std to the fan-in.
    const double std = cfg_.init == InitScheme::he ? std::sqrt(2.0 / static_cast<double>(fan_in)) : cfg_.init_std;
    params_.add(name + ".weight", normal_tensor<float>(std::move(wshape), rng, std));
    params_.add(name + ".bias", Tensor::full({width}, static_cast<float>(cfg_.init_bias)));
  }

  ClassifierConfig cfg_;
  ParamSet<float> params_;
  std::size_t feature_length_ = 0;
};

/// Row-wise argmax; ties go to the lowest class code.
inline std::vector<int> predict_class(const Tensor& probs) {
  if (probs.rank() != 2) throw ShapeError("predict_class: expected [n, classes], got " + to_string(probs.shape()));
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  std::vector<int> out(n);
  const auto p = probs.data();
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (p[r * c + k] > p[r * c + best]) best = k;
    out[r] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(Classifier& model, const ImageSet& set, std::size_t chunk = 256) {
  NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(set.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += chunk) {
    idx.resize(std::min(chunk, set.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto labels = predict_class(model.forward(to_tensor(set, idx, PixelScale::unit)));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

struct ClassAccuracy {
  std::array<std::optional<double>, kNumClasses> per_class{};  // percent; absent for empty classes
  std::array<std::size_t, kNumClasses> counts{};
  double total = 0.0;  // percent over all samples
};

inline ClassAccuracy accuracy_from_predictions(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("accuracy: prediction/label count mismatch");
  if (truth.empty()) throw std::invalid_argument("accuracy: empty evaluation set");
  ClassAccuracy acc;
  std::array<std::size_t, kNumClasses> correct{};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto c = static_cast<std::size_t>(label_from_code(truth[i]));
    ++acc.counts[c];
    correct[c] += predicted[i] == truth[i];
  }
  std::size_t all = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    all += correct[c];
    if (acc.counts[c] > 0)
      acc.per_class[c] = 100.0 * static_cast<double>(correct[c]) / static_cast<double>(acc.counts[c]);
  }
  acc.total = 100.0 * static_cast<double>(all) / static_cast<double>(truth.size());
  return acc;
}

inline ClassAccuracy evaluate_per_class(Classifier& model, const ImageSet& test) {
  auto predicted = predict(model, test);
  return accuracy_from_predictions(predicted, test.labels);
}

/// "92.10±0.41"
inline std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", mean, std);
  return buf;
}

struct ClassifierTrainingResult {
  std::vector<double> val_accuracy;  // percent, one entry per completed iteration
  std::size_t best_iteration = 0;
  double first_batch_loss = 0.0;
  bool stopped_early = false;
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;  // updates rejected for non-finite gradients
};

/// Mini-batch Adam with the configured schedule and L2 penalty. The order is
/// reshuffled every iteration; with early stopping the parameters of the best
/// validation iteration are restored at the end.
inline ClassifierTrainingResult train_classifier(Classifier& model, const ImageSet& train, const ImageSet& val,
                                                 Rng& rng) {
  const auto& cfg = model.config();
  const auto counts = train.class_counts();
  for (std::size_t c = 0; c < kNumClasses && c < cfg.classes; ++c)
    if (counts[c] == 0)
      throw std::invalid_argument("train_classifier: class " +
                                  std::string(display_name(static_cast<ClassLabel>(c))) + " absent from training set");
  if (val.size() == 0) throw std::invalid_argument("train_classifier: empty validation set");
  if (train.side != cfg.input_size || val.side != cfg.input_size)
    throw ShapeError("train_classifier: image size does not match the configured input");

  auto state = make_adam_state(model.params());
  ClassifierTrainingResult result;
  std::vector<std::vector<float>> best = model.params().snapshot();
  double best_acc = -1.0;
  std::vector<std::size_t> order(train.size());
  std::vector<int> batch_labels;
  const std::size_t batch = std::min(cfg.batch_size, train.size());
  std::size_t batches = (train.size() + batch - 1) / batch;
  if (cfg.batches_per_iteration > 0) batches = std::min(batches, cfg.batches_per_iteration);
  bool first = true;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order.begin(), order.end(), rng);
    const double lr = schedule_lr(cfg.schedule, static_cast<double>(it));
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * batch, end = std::min(start + batch, train.size());
      std::span<const std::size_t> idx(order.data() + start, end - start);
      batch_labels.clear();
      for (auto i : idx) batch_labels.push_back(train.labels[i]);
      auto loss = cross_entropy(model.forward(to_tensor(train, idx, PixelScale::unit)), batch_labels);
      if (first) {
        result.first_batch_loss = loss.item();
        first = false;
      }
      model.params().zero_grad();
      backward(loss);
      ++result.steps;
      if (!adam_step(model.params(), state, lr, cfg.adam)) ++result.skipped_steps;
    }
    model.params().zero_grad();
    const double acc = evaluate_per_class(model, val).total;
    result.val_accuracy.push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      result.best_iteration = it;
      best = model.params().snapshot();
    }
    if (cfg.early_stopping && early_stop_check(result.val_accuracy, cfg.early_stop).stop) {
      result.stopped_early = it + 1 < cfg.iterations;
      break;
    }
  }
  if (cfg.early_stopping) model.params().restore(best);
  return result;
}

}  // namespace ganbalance
