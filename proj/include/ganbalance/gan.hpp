#pragma once

// DCGAN generator/discriminator pair and the alternating adversarial trainer.
//
// Generator: z -> dense projection to a 4x4 seed with base_channels maps ->
// `stages` stride-2 transposed convolutions (kernel 4, padding 1), each
// doubling the extent and halving the channel count, ending in tanh.
// Discriminator: the mirror image with strided convolutions and leaky
// rectifiers, then a dense projection to one logit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ganbalance/checkpoint.hpp"
#include "ganbalance/ops.hpp"
#include "ganbalance/optim.hpp"
#include "ganbalance/params.hpp"
#include "ganbalance/random.hpp"

namespace ganbalance {

struct GanConfig {
  std::size_t z_dim = 128;
  std::size_t base_channels = 1024;
  std::size_t stages = 6;
  std::size_t output_size = 256;
  std::size_t image_channels = 1;
  std::size_t batch_size = 64;
  std::size_t iterations = 20;  // passes over the class's training images
  LrSchedule schedule = LrSchedule::constant_rate(2e-4);
  AdamConfig adam{0.5, 0.999, 1e-8, 0.0};
  bool use_batchnorm = true;
  double init_std = 0.02;
  float leaky_slope = 0.2f;

  static constexpr std::size_t kSeedSize = 4;
  static constexpr std::size_t kKernel = 4;

  /// 128-d noise, 1,024-map projection, six doublings to 256x256.
  static GanConfig full_scale() { return {}; }

  /// Four doublings to 64x64 from a 128-map projection.
  static GanConfig desk() {
    GanConfig c;
    c.base_channels = 128;
    c.stages = 4;
    c.output_size = 64;
    return c;
  }

  /// Channel count after each generator stage, index 0 being the projection.
  std::vector<std::size_t> generator_channels() const {
    std::vector<std::size_t> ch{base_channels};
    for (std::size_t s = 1; s < stages; ++s) ch.push_back(base_channels >> s);
    ch.push_back(image_channels);
    return ch;
  }

  void validate() const {
    if (stages < 1) throw std::invalid_argument("gan: stages must be >= 1");
    if (z_dim < 1 || image_channels < 1 || batch_size < 1)
      throw std::invalid_argument("gan: z_dim, image_channels and batch_size must be positive");
    if (output_size != (kSeedSize << stages))
      throw std::invalid_argument("gan: output_size " + std::to_string(output_size) + " != 4*2^" +
                                  std::to_string(stages));
    if ((base_channels >> (stages - 1)) < image_channels || (base_channels >> (stages - 1)) == 0)
      throw std::invalid_argument("gan: base_channels " + std::to_string(base_channels) +
                                  " cannot halve " + std::to_string(stages - 1) + " times");
  }
};

/// Uniform(-1, 1) noise, [n, z_dim].
inline Tensor sample_noise(std::size_t n, std::size_t z_dim, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_noise: n must be >= 1");
  std::vector<float> data(n * z_dim);
  for (auto& v : data) {
    // float rounding of values just below 1 could otherwise yield exactly 1.
    v = static_cast<float>(uniform(rng, -1.0, 1.0));
    if (v >= 1.0f) v = std::nextafter(1.0f, 0.0f);
  }
  return Tensor({n, z_dim}, std::move(data));
}

namespace detail {

struct NormLayer {
  std::string name;
  BatchNormState<float> state;
};

inline NamedTensors with_running_stats(const ParamSet<float>& params, const std::vector<NormLayer>& norms) {
  auto out = to_named(params);
  for (const auto& n : norms) {
    const auto c = n.state.running_mean.size();
    out.push_back({n.name + ".running_mean", Tensor({c}, n.state.running_mean)});
    out.push_back({n.name + ".running_var", Tensor({c}, n.state.running_var)});
  }
  return out;
}

inline void load_running_stats(std::vector<NormLayer>& norms, const NamedTensors& named) {
  for (auto& n : norms) {
    for (const char* suffix : {".running_mean", ".running_var"}) {
      const std::string key = n.name + suffix;
      const NamedTensor* found = nullptr;
      for (const auto& t : named)
        if (t.name == key) found = &t;
      if (!found) throw CheckpointError("checkpoint lacks " + key);
      auto& dst = std::string(suffix) == ".running_mean" ? n.state.running_mean : n.state.running_var;
      if (found->tensor.size() != dst.size()) throw CheckpointError("shape mismatch for " + key);
      dst.assign(found->tensor.data().begin(), found->tensor.data().end());
    }
  }
}

}  // namespace detail

class Generator {
 public:
  Generator(const GanConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto ch = cfg_.generator_channels();
    const std::size_t seed = GanConfig::kSeedSize;
    params_.add("proj.weight", normal_tensor<float>({cfg_.z_dim, ch[0] * seed * seed}, rng, cfg_.init_std));
    params_.add("proj.bias", Tensor::zeros({ch[0] * seed * seed}));
    if (cfg_.use_batchnorm) add_norm("proj.bn", ch[0]);
    for (std::size_t s = 1; s <= cfg_.stages; ++s) {
      const std::string stage = "up" + std::to_string(s);
      params_.add(stage + ".weight",
                  normal_tensor<float>({ch[s - 1], ch[s], GanConfig::kKernel, GanConfig::kKernel}, rng, cfg_.init_std));
      params_.add(stage + ".bias", Tensor::zeros({ch[s]}));
      if (cfg_.use_batchnorm && s < cfg_.stages) add_norm(stage + ".bn", ch[s]);
    }
  }

  const GanConfig& config() const { return cfg_; }
  ParamSet<float>& params() { return params_; }
  const ParamSet<float>& params() const { return params_; }
  std::vector<detail::NormLayer>& norms() { return norms_; }

  /// z [n, z_dim] -> images [n, image_channels, S, S] in [-1, 1].
  Tensor forward(const Tensor& z, NormMode mode = NormMode::train) {
    if (z.rank() != 2 || z.dim(1) != cfg_.z_dim)
      throw ShapeError("generator: expected noise [n," + std::to_string(cfg_.z_dim) + "], got " +
                       to_string(z.shape()));
    const auto ch = cfg_.generator_channels();
    const std::size_t n = z.dim(0), seed = GanConfig::kSeedSize;
    auto h = reshape(dense(z, params_["proj.weight"], params_["proj.bias"]), Shape{n, ch[0], seed, seed});
    std::size_t norm = 0;
    if (cfg_.use_batchnorm) h = normalize(h, "proj.bn", norm++, mode);
    h = apply_activation(h, Activation::relu);
    for (std::size_t s = 1; s <= cfg_.stages; ++s) {
      const std::string stage = "up" + std::to_string(s);
      h = conv2d_transpose(h, params_[stage + ".weight"], params_[stage + ".bias"], 2, 1);
      if (h.dim(2) != seed << s) throw std::logic_error("generator stage extent audit failed");
      if (s < cfg_.stages) {
        if (cfg_.use_batchnorm) h = normalize(h, stage + ".bn", norm++, mode);
        h = apply_activation(h, Activation::relu);
      }
    }
    return apply_activation(h, Activation::tanh);
  }

  NamedTensors state() const { return detail::with_running_stats(params_, norms_); }
  void load_state(const NamedTensors& named) {
    assign_from(params_, named);
    detail::load_running_stats(norms_, named);
  }

 private:
  void add_norm(const std::string& name, std::size_t c) {
    params_.add(name + ".gamma", Tensor::full({c}, 1.0f));
    params_.add(name + ".beta", Tensor::zeros({c}));
    norms_.push_back({name, BatchNormState<float>(c)});
  }

  Tensor normalize(const Tensor& h, const std::string& name, std::size_t idx, NormMode mode) {
    return batchnorm2d(h, params_[name + ".gamma"], params_[name + ".beta"], norms_[idx].state, mode);
  }

  GanConfig cfg_;
  ParamSet<float> params_;
  std::vector<detail::NormLayer> norms_;
};

struct Discrimination {
  Tensor probabilities;  // [n, 1], sigmoid of the logits
  Tensor logits;         // [n, 1]
};

class Discriminator {
 public:
  Discriminator(const GanConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto ch = channels();
    for (std::size_t s = 1; s <= cfg_.stages; ++s) {
      const std::string stage = "down" + std::to_string(s);
      params_.add(stage + ".weight",
                  normal_tensor<float>({ch[s], ch[s - 1], GanConfig::kKernel, GanConfig::kKernel}, rng, cfg_.init_std));
      params_.add(stage + ".bias", Tensor::zeros({ch[s]}));
      if (cfg_.use_batchnorm && s > 1) {
        params_.add(stage + ".bn.gamma", Tensor::full({ch[s]}, 1.0f));
        params_.add(stage + ".bn.beta", Tensor::zeros({ch[s]}));
        norms_.push_back({stage + ".bn", BatchNormState<float>(ch[s])});
      }
    }
    const std::size_t seed = GanConfig::kSeedSize;
    params_.add("out.weight", normal_tensor<float>({ch.back() * seed * seed, 1}, rng, cfg_.init_std));
    params_.add("out.bias", Tensor::zeros({1}));
  }

  const GanConfig& config() const { return cfg_; }
  ParamSet<float>& params() { return params_; }
  const ParamSet<float>& params() const { return params_; }
  std::vector<detail::NormLayer>& norms() { return norms_; }

  /// images [n, C, S, S] -> logits [n, 1].
  Tensor forward(const Tensor& x, NormMode mode = NormMode::train) {
    if (x.rank() != 4 || x.dim(1) != cfg_.image_channels || x.dim(2) != cfg_.output_size ||
        x.dim(3) != cfg_.output_size)
      throw ShapeError("discriminator: expected [n," + std::to_string(cfg_.image_channels) + "," +
                       std::to_string(cfg_.output_size) + "," + std::to_string(cfg_.output_size) + "], got " +
                       to_string(x.shape()));
    auto h = x;
    std::size_t norm = 0;
    for (std::size_t s = 1; s <= cfg_.stages; ++s) {
      const std::string stage = "down" + std::to_string(s);
      h = conv2d(h, params_[stage + ".weight"], params_[stage + ".bias"], 2, 1);
      if (h.dim(2) != cfg_.output_size >> s) throw std::logic_error("discriminator stage extent audit failed");
      if (cfg_.use_batchnorm && s > 1) {
        h = batchnorm2d(h, params_[stage + ".bn.gamma"], params_[stage + ".bn.beta"], norms_[norm].state, mode);
        ++norm;
      }
      h = apply_activation(h, Activation::leaky_relu, cfg_.leaky_slope);
    }
    return dense(flatten(h), params_["out.weight"], params_["out.bias"]);
  }

  NamedTensors state() const { return detail::with_running_stats(params_, norms_); }
  void load_state(const NamedTensors& named) {
    assign_from(params_, named);
    detail::load_running_stats(norms_, named);
  }

 private:
  // Image channels, then the generator widths in reverse.
  std::vector<std::size_t> channels() const {
    auto g = cfg_.generator_channels();
    std::vector<std::size_t> ch{cfg_.image_channels};
    for (std::size_t s = cfg_.stages; s-- > 0;) ch.push_back(g[s]);
    return ch;
  }

  GanConfig cfg_;
  ParamSet<float> params_;
  std::vector<detail::NormLayer> norms_;
};

/// Images from noise; eval-mode normalization by default so that identical
/// inputs give identical outputs.
inline Tensor generate(const Tensor& z, Generator& g, NormMode mode = NormMode::eval) {
  NoGradGuard no_grad;
  return g.forward(z, mode);
}

inline Discrimination discriminate(const Tensor& x, Discriminator& d, NormMode mode = NormMode::eval) {
  auto logits = d.forward(x, mode);
  return {sigmoid(logits), logits};
}

struct GanLosses {
  double discriminator = 0.0;  // -mean[log D(x) + log(1 - D(G(z)))]
  double generator = 0.0;      // -mean[log D(G(z))]
  // The minimax objective E[log D(x)] + E[log(1 - D(G(z)))].
  double minimax() const { return -discriminator; }
};

/// Losses from discriminator probabilities, clamped at kProbabilityFloor.
inline GanLosses gan_losses(std::span<const float> d_real, std::span<const float> d_fake) {
  if (d_real.empty() || d_fake.empty()) throw std::invalid_argument("gan_losses: empty batch");
  auto safe_log = [](double p) { return std::log(std::max(p, kProbabilityFloor)); };
  double real = 0.0, fake = 0.0, gen = 0.0;
  for (float p : d_real) real += safe_log(p);
  for (float p : d_fake) {
    fake += safe_log(1.0 - p);
    gen += safe_log(p);
  }
  const double nr = static_cast<double>(d_real.size()), nf = static_cast<double>(d_fake.size());
  return {-(real / nr + fake / nf), -gen / nf};
}

// ---------------------------------------------------------------------------
// Alternating training
//
// A model pair needs forward(Tensor, NormMode), params() and norms().

struct GanStepRecord {
  double loss_d = 0.0;
  double loss_g = 0.0;
  double minimax = 0.0;
};

template <typename Model>
std::vector<BatchNormState<float>> copy_norms(Model& m) {
  std::vector<BatchNormState<float>> out;
  for (auto& n : m.norms()) out.push_back(n.state);
  return out;
}

template <typename Model>
void restore_norms(Model& m, const std::vector<BatchNormState<float>>& saved) {
  for (std::size_t i = 0; i < saved.size(); ++i) m.norms()[i].state = saved[i];
}

/// One discriminator update on (real, fresh fake) followed by one generator
/// update. During the D step the generator runs without recording; during the
/// G step the discriminator's parameters are frozen and its normalization
/// statistics restored afterwards.
template <typename Gen, typename Disc>
GanStepRecord adversarial_step(Gen& g, Disc& d, AdamState& g_state, AdamState& d_state, const Tensor& real,
                               Rng& rng, std::size_t z_dim, double lr, const AdamConfig& adam) {
  const std::size_t n = real.dim(0);
  GanStepRecord rec;

  Tensor fake;
  {
    NoGradGuard no_grad;
    fake = g.forward(sample_noise(n, z_dim, rng), NormMode::train);
  }
  auto real_logits = d.forward(real, NormMode::train);
  auto fake_logits = d.forward(fake, NormMode::train);
  auto loss_d = add(bce_with_logits(real_logits, 1.0f), bce_with_logits(fake_logits, 0.0f));
  rec.loss_d = loss_d.item();
  d.params().zero_grad();
  backward(loss_d);
  (void)adam_step(d.params(), d_state, lr, adam);
  d.params().zero_grad();

  {
    const auto saved = copy_norms(d);
    FreezeGuard<float> freeze(d.params());
    auto logits = d.forward(g.forward(sample_noise(n, z_dim, rng), NormMode::train), NormMode::train);
    auto loss_g = bce_with_logits(logits, 1.0f);
    rec.loss_g = loss_g.item();
    g.params().zero_grad();
    backward(loss_g);
    restore_norms(d, saved);
  }
  (void)adam_step(g.params(), g_state, lr, adam);
  g.params().zero_grad();
  rec.minimax = -rec.loss_d;
  return rec;
}

struct GanTrainingResult {
  std::vector<GanStepRecord> history;  // one entry per mini-batch
  std::size_t skipped_steps = 0;
};

/// Trains a generator/discriminator pair on `images` ([N,C,S,S] scaled to
/// [-1,1]) for config.iterations passes. Mini-batches are drawn from a fresh
/// seeded permutation each pass; a trailing partial batch is dropped unless it
/// is the only batch.
inline GanTrainingResult train_gan(Generator& g, Discriminator& d, const Tensor& images, const GanConfig& cfg,
                                   Rng& rng) {
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("train_gan: empty dataset");
  if (images.dim(1) != cfg.image_channels || images.dim(2) != cfg.output_size || images.dim(3) != cfg.output_size)
    throw ShapeError("train_gan: images " + to_string(images.shape()) + " do not match the configured geometry");
  const std::size_t total = images.dim(0);
  const std::size_t per_image = images.size() / total;
  const std::size_t batch = std::min(cfg.batch_size, total);
  const std::size_t batches = total / batch;
  auto g_state = make_adam_state(g.params());
  auto d_state = make_adam_state(d.params());
  GanTrainingResult result;
  std::vector<std::size_t> order(total);
  for (std::size_t epoch = 0; epoch < cfg.iterations; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order.begin(), order.end(), rng);
    const double lr = schedule_lr(cfg.schedule, static_cast<double>(epoch));
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<float> buf(batch * per_image);
      for (std::size_t i = 0; i < batch; ++i) {
        const auto src = images.data().subspan(order[b * batch + i] * per_image, per_image);
        std::copy(src.begin(), src.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * per_image));
      }
      Tensor real({batch, cfg.image_channels, cfg.output_size, cfg.output_size}, std::move(buf));
      result.history.push_back(adversarial_step(g, d, g_state, d_state, real, rng, cfg.z_dim, lr, cfg.adam));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dense toy pair for one-dimensional data.

class DenseNet {
 public:
  DenseNet(std::vector<std::size_t> widths, Activation hidden, std::optional<Activation> output, Rng& rng,
           double init_std)
      : widths_(std::move(widths)), hidden_(hidden), output_(output) {
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      const double std = init_std > 0 ? init_std : std::sqrt(2.0 / static_cast<double>(widths_[l]));
      params_.add("fc" + std::to_string(l) + ".weight", normal_tensor<float>({widths_[l], widths_[l + 1]}, rng, std));
      params_.add("fc" + std::to_string(l) + ".bias", Tensor::zeros({widths_[l + 1]}));
    }
  }

  Tensor forward(const Tensor& x, NormMode = NormMode::train) {
    auto h = x;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      h = dense(h, params_["fc" + std::to_string(l) + ".weight"], params_["fc" + std::to_string(l) + ".bias"]);
      if (l + 2 < widths_.size())
        h = apply_activation(h, hidden_);
      else if (output_)
        h = apply_activation(h, *output_);
    }
    return h;
  }

  ParamSet<float>& params() { return params_; }
  std::vector<detail::NormLayer>& norms() { return norms_; }

 private:
  std::vector<std::size_t> widths_;
  Activation hidden_;
  std::optional<Activation> output_;
  ParamSet<float> params_;
  std::vector<detail::NormLayer> norms_;
};

struct ToyGanConfig {
  std::size_t z_dim = 2;
  std::size_t hidden = 16;
  std::size_t batch_size = 64;
  std::size_t steps = 2000;
  double lr = 1e-3;
  double data_mean = 3.0;
  double data_std = 0.5;
  std::size_t eval_samples = 2000;
};

struct ToyGanResult {
  double generated_mean = 0.0;
  double generated_std = 0.0;
  double discriminator_accuracy = 0.0;  // on fresh real and generated samples
  std::vector<GanStepRecord> history;
};

/// Fits a dense generator to N(data_mean, data_std^2) samples.
inline ToyGanResult run_toy_gan(const ToyGanConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  DenseNet g({cfg.z_dim, cfg.hidden, cfg.hidden, 1}, Activation::leaky_relu, std::nullopt, rng, 0.0);
  DenseNet d({1, cfg.hidden, cfg.hidden, 1}, Activation::leaky_relu, std::nullopt, rng, 0.0);
  auto gs = make_adam_state(g.params());
  auto ds = make_adam_state(d.params());
  const AdamConfig adam{0.5, 0.999, 1e-8, 0.0};
  auto draw_real = [&](std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(normal(rng, cfg.data_mean, cfg.data_std));
    return Tensor({n, 1}, std::move(v));
  };
  ToyGanResult out;
  for (std::size_t step = 0; step < cfg.steps; ++step)
    out.history.push_back(adversarial_step(g, d, gs, ds, draw_real(cfg.batch_size), rng, cfg.z_dim, cfg.lr, adam));

  NoGradGuard no_grad;
  auto fake = g.forward(sample_noise(cfg.eval_samples, cfg.z_dim, rng));
  auto real = draw_real(cfg.eval_samples);
  double sum = 0.0, sq = 0.0;
  for (float v : fake.data()) sum += v;
  out.generated_mean = sum / static_cast<double>(cfg.eval_samples);
  for (float v : fake.data()) sq += (v - out.generated_mean) * (v - out.generated_mean);
  out.generated_std = std::sqrt(sq / static_cast<double>(cfg.eval_samples - 1));
  std::size_t correct = 0;
  for (float l : d.forward(real).data()) correct += l > 0.0f;
  for (float l : d.forward(fake).data()) correct += l < 0.0f;
  out.discriminator_accuracy = static_cast<double>(correct) / static_cast<double>(2 * cfg.eval_samples);
  return out;
}

}  // namespace ganbalance
