#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ganbalance/checkpoint.hpp"
#include "ganbalance/random.hpp"
#include "ganbalance/tensor.hpp"

namespace ganbalance {

/// Ordered, named learnable tensors of one network.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> tensor;
  };

  BasicTensor<T>& add(std::string name, BasicTensor<T> tensor) {
    for (const auto& e : entries_)
      if (e.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    entries_.push_back({std::move(name), std::move(tensor)});
    return entries_.back().tensor;
  }

  BasicTensor<T>& operator[](const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return e.tensor;
    throw std::out_of_range("no parameter named " + name);
  }
  const BasicTensor<T>& operator[](const std::string& name) const {
    return const_cast<ParamSet&>(*this)[name];
  }

  std::size_t size() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  void set_trainable(bool flag) {
    for (auto& e : entries_) e.tensor.set_requires_grad(flag);
  }

  /// Deep copy of current values (for best-checkpoint restoration).
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    for (const auto& e : entries_) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    if (values.size() != entries_.size()) throw std::invalid_argument("snapshot size mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto dst = entries_[i].tensor.mutable_data();
      if (dst.size() != values[i].size()) throw std::invalid_argument("snapshot shape mismatch");
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
};

/// Keeps a parameter set out of gradient recording while in scope.
template <typename T>
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamSet<T>& params) : params_(params) { params_.set_trainable(false); }
  ~FreezeGuard() { params_.set_trainable(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamSet<T>& params_;
};

template <typename T>
BasicTensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(normal(rng, 0.0, stddev));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

inline NamedTensors to_named(const ParamSet<float>& params) {
  NamedTensors out;
  for (const auto& e : params.entries()) out.push_back({e.name, e.tensor.detach()});
  return out;
}

/// Copies checkpoint values into matching parameters; every parameter must be present.
inline void assign_from(ParamSet<float>& params, const NamedTensors& named) {
  for (auto& e : params.entries()) {
    const NamedTensor* found = nullptr;
    for (const auto& n : named)
      if (n.name == e.name) found = &n;
    if (!found) throw CheckpointError("checkpoint lacks parameter " + e.name);
    if (found->tensor.shape() != e.tensor.shape())
      throw CheckpointError("checkpoint shape mismatch for " + e.name + ": " +
                            to_string(found->tensor.shape()) + " vs " + to_string(e.tensor.shape()));
    std::copy(found->tensor.data().begin(), found->tensor.data().end(),
              e.tensor.mutable_data().begin());
  }
}

}  // namespace ganbalance
