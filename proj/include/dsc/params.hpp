// Named parameter storage and its binding onto a Tape.
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dsc/tape.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

/// Tensors addressed by stable names, iterated in insertion order.
template <typename T>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor<T>& at(const std::string& name) { return entries_[position(name)].second; }
  const Tensor<T>& at(const std::string& name) const { return entries_[position(name)].second; }

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.first);
    return out;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Same names and shapes, all zeros.
  [[nodiscard]] ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, t] : entries_) out.add(name, Tensor<T>(t.shape()));
    return out;
  }

  template <typename U>
  [[nodiscard]] ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  [[nodiscard]] std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Every parameter of a ParamSet recorded as a tape variable.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, const ParamSet<T>& params, bool track_grad = true) : tape_(&tape) {
    for (const auto& [name, value] : params) {
      bind(name, track_grad ? tape.variable(value) : tape.constant(value));
    }
  }

  /// An empty binding; populate with bind().
  explicit ParamBinding(Tape<T>& tape) : tape_(&tape) {}

  void bind(const std::string& name, Var v) {
    if (!vars_.emplace(name, v).second) throw ConfigError("parameter bound twice: " + name);
    order_.push_back(name);
  }

  [[nodiscard]] Tape<T>& tape() const { return *tape_; }

  [[nodiscard]] Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter not bound: " + name);
    return it->second;
  }

  [[nodiscard]] bool contains(const std::string& name) const { return vars_.contains(name); }

  /// Gradients after backward(). Parameters that received none are absent.
  [[nodiscard]] ParamSet<T> gradients() const {
    ParamSet<T> out;
    for (const auto& name : order_) {
      Var v = vars_.at(name);
      if (tape_->has_grad(v)) out.add(name, tape_->grad(v));
    }
    return out;
  }

 private:
  Tape<T>* tape_;
  std::map<std::string, Var> vars_;
  std::vector<std::string> order_;
};

/// Prefix-scoped view of a binding, e.g. "stage2.dsc.".
template <typename T>
struct ParamScope {
  const ParamBinding<T>* binding;
  std::string prefix;

  [[nodiscard]] Var operator[](const std::string& name) const { return (*binding)[prefix + name]; }
  [[nodiscard]] bool contains(const std::string& name) const {
    return binding->contains(prefix + name);
  }
  [[nodiscard]] Tape<T>& tape() const { return binding->tape(); }
};

}  // namespace dsc
