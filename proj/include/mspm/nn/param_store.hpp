#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mspm/errors.hpp"
#include "mspm/tensor.hpp"

namespace mspm {

// How a registered tensor is initialized and whether the optimizer owns it.
enum class ParamRole {
  ConvWeight,
  LinearWeight,
  Bias,
  NormScale,
  NormShift,
  Embedding,
  RunningMean,  // batchnorm buffer, not trained
  RunningVar,   // batchnorm buffer, not trained
};

inline bool is_trainable(ParamRole role) { return role != ParamRole::RunningMean && role != ParamRole::RunningVar; }

// Ordered registry of named model tensors. Registration order is the
// iteration order and therefore the checkpoint layout.
template <typename T>
class BasicParamStore {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> tensor;
    ParamRole role;
    std::int64_t fan_in;
  };

  BasicTensor<T> add(std::string name, Shape shape, ParamRole role, std::int64_t fan_in = 0) {
    if (name.empty()) throw InvalidArgument("parameter name must not be empty");
    if (index_.count(name)) throw InvalidArgument("parameter '" + name + "' registered twice");
    BasicTensor<T> t(std::move(shape));
    t.set_requires_grad(is_trainable(role));
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), t, role, fan_in});
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const BasicTensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("no parameter named '" + name + "'");
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<BasicTensor<T>> trainable() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& e : entries_) {
      if (is_trainable(e.role)) out.push_back(e.tensor);
    }
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      if (is_trainable(e.role)) out.push_back(e.name);
    }
    return out;
  }

  // Number of trainable scalars.
  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
      if (is_trainable(e.role)) n += e.tensor.numel();
    }
    return n;
  }

  // Sum of trainable scalars whose name starts with `prefix`.
  std::int64_t parameter_count(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
      if (is_trainable(e.role) && e.name.compare(0, prefix.size(), prefix) == 0) n += e.tensor.numel();
    }
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Overwrites every value from a store with the same layout.
  template <typename U>
  void copy_values_from(const BasicParamStore<U>& other) {
    if (other.size() != size()) {
      throw DimensionMismatch("parameter count " + std::to_string(other.size()) + " does not match " +
                              std::to_string(size()));
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries()[i];
      auto& dst = entries_[i];
      if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
        throw DimensionMismatch("parameter '" + src.name + "' " + to_string(src.tensor.shape()) +
                                " does not match '" + dst.name + "' " + to_string(dst.tensor.shape()));
      }
      auto in = src.tensor.data();
      auto out = dst.tensor.data();
      for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(in[k]);
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = BasicParamStore<float>;

}  // namespace mspm
