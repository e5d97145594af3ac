#pragma once

#include "cast/tensor.hpp"

#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace cast {

/// Named model weight. Frozen parameters never receive gradients.
template <class Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  bool frozen = true;
  /// Depth bucket for layer-wise learning-rate decay: 0 = embeddings,
  /// 1..L = blocks, L+1 = final norms and heads.
  int layer_id = 0;
  /// Whether decoupled weight decay applies (off for norms, biases, embeddings).
  bool decay = true;
  /// Written by Tape::backward even through const references; the value is
  /// what forward passes read.
  mutable std::optional<Tensor<Scalar>> grad;
};

/// Owns every parameter of a model; names are unique, addresses are stable.
template <class Scalar>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<Scalar>& add(std::string name, Tensor<Scalar> value, bool frozen, int layer_id, bool decay) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<Scalar>>();
    p->name = std::move(name);
    p->value = std::move(value);
    p->frozen = frozen;
    p->layer_id = layer_id;
    p->decay = decay;
    index_.emplace(p->name, params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<Scalar>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<Scalar>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<Scalar>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter '" + name + "'");
  }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Number of scalar values across frozen or learnable parameters.
  Index count_values(bool frozen) const {
    Index n = 0;
    for (const auto& p : params_)
      if (p->frozen == frozen) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.reset();
  }

 private:
  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cast
