#pragma once

#include <map>
#include <string>
#include <vector>

#include "czsl/numerics/autodiff.hpp"

namespace czsl {

struct Parameter {
  std::string name;
  Var var;

  bool trainable() const { return var.requires_grad(); }
};

/// Insertion-ordered collection of uniquely named parameters.
class ParameterStore {
 public:
  Var add(const std::string& name, Tensor init, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, Var(std::move(init), trainable)});
    return params_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("no parameter named '" + name + "'");
    return params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->at(name);
  }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  void set_trainable(const std::string& name, bool on) { at(name).var.set_requires_grad(on); }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& p : params_)
      if (p.trainable()) out.push_back(p.name);
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable()) n += p.var.numel();
    return n;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

inline bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}
inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace czsl
