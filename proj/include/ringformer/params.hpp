#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "ringformer/autograd.hpp"
#include "ringformer/errors.hpp"
#include "ringformer/rng.hpp"
#include "ringformer/tensor.hpp"

namespace ringformer {

// What a parameter belongs to; drives counting conventions.
enum class ParamGroup { block, norm, signal, embedding, head };

enum class InitKind { zeros, ones, xavier, normal };

/// Name, shape and initialization of one model parameter. Layouts are built
/// from configs alone, so counts need no allocation.
struct ParamSpec {
  std::string name;
  Shape shape;
  ParamGroup group = ParamGroup::block;
  bool is_bias = false;
  InitKind init = InitKind::zeros;
  double init_std = 0.0;  // for InitKind::normal

  std::size_t numel() const { return shape_numel(shape); }
};

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  ParamGroup group = ParamGroup::block;
  bool is_bias = false;
  bool trainable = true;
};

/// Ordered collection of named parameters. Order is the layout order, which
/// is also the checkpoint order and the order random draws are consumed in.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;

  static ParamStore allocate(const std::vector<ParamSpec>& layout, Rng& rng) {
    ParamStore store;
    for (const auto& spec : layout) {
      Tensor<T> value(spec.shape);
      switch (spec.init) {
        case InitKind::zeros:
          break;
        case InitKind::ones:
          value.fill(T{1});
          break;
        case InitKind::xavier: {
          const double fan_in = static_cast<double>(spec.shape.front());
          const double fan_out = static_cast<double>(spec.shape.back());
          const double bound = std::sqrt(6.0 / (fan_in + fan_out));
          for (auto& v : value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
          break;
        }
        case InitKind::normal:
          for (auto& v : value.values()) v = static_cast<T>(rng.normal(0.0, spec.init_std));
          break;
      }
      store.add(spec.name, std::move(value), spec.group, spec.is_bias);
    }
    return store;
  }

  Var<T> add(const std::string& name, Tensor<T> value, ParamGroup group, bool is_bias = false) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back({name, Var<T>(std::move(value), true), group, is_bias, true});
    return params_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return params_[it->second].var;
  }

  // Null Var when absent.
  Var<T> find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? Var<T>() : params_[it->second].var;
  }

  const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  std::vector<Parameter<T>>& params() noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  ParamStore clone() const {
    ParamStore copy;
    for (const auto& p : params_) copy.add(p.name, p.var.value(), p.group, p.is_bias);
    return copy;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace ringformer
