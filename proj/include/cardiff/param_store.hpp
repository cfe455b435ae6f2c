#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cardiff/rng.hpp"
#include "cardiff/tensor.hpp"

namespace cardiff {

template <class T>
struct ParamEntry {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;
  Tensor<T> v;
  std::uint64_t step = 0;
};

/// Named parameters with gradients and Adam moments. Iteration order is the
/// lexicographic name order, which fixes the layout of flattened gradients.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, ParamEntry<T>>;

  ParamEntry<T>& add(const std::string& name, Tensor<T> value) {
    require(!entries_.count(name), Errc::invalid_argument, "duplicate parameter " + name);
    ParamEntry<T> e;
    e.grad = Tensor<T>(value.shape());
    e.m = Tensor<T>(value.shape());
    e.v = Tensor<T>(value.shape());
    e.value = std::move(value);
    return entries_.emplace(name, std::move(e)).first->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const ParamEntry<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    require(it != entries_.end(), Errc::missing_group, "no parameter named " + name);
    return it->second;
  }
  ParamEntry<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    require(it != entries_.end(), Errc::missing_group, "no parameter named " + name);
    return it->second;
  }
  const Tensor<T>& value(const std::string& name) const { return at(name).value; }

  const Map& entries() const { return entries_; }
  Map& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.grad.fill(T(0));
  }

  std::vector<T> flat_grads() const {
    std::vector<T> out;
    out.reserve(num_values());
    for (const auto& [_, e] : entries_) out.insert(out.end(), e.grad.values().begin(), e.grad.values().end());
    return out;
  }

  void set_flat_grads(std::span<const T> flat) {
    require(flat.size() == num_values(), Errc::shape_mismatch, "flat gradient length mismatch");
    std::size_t off = 0;
    for (auto& [_, e] : entries_) {
      std::copy_n(flat.begin() + off, e.grad.size(), e.grad.data());
      off += e.grad.size();
    }
  }

  /// Entries whose names start with `prefix`.
  ParamStore subset(const std::string& prefix) const {
    ParamStore out;
    for (const auto& [name, e] : entries_)
      if (name.rfind(prefix, 0) == 0) out.entries_.emplace(name, e);
    return out;
  }

  void merge(const ParamStore& other) {
    for (const auto& [name, e] : other.entries_) {
      require(!entries_.count(name), Errc::invalid_argument, "duplicate parameter " + name);
      entries_.emplace(name, e);
    }
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) {
      auto& d = out.add(name, e.value.template cast<U>());
      d.grad = e.grad.template cast<U>();
      d.m = e.m.template cast<U>();
      d.v = e.v.template cast<U>();
      d.step = e.step;
    }
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (auto ia = a.entries_.begin(), ib = b.entries_.begin(); ia != a.entries_.end(); ++ia, ++ib) {
      if (ia->first != ib->first) return false;
      const auto& x = ia->second;
      const auto& y = ib->second;
      if (!(x.value == y.value) || !(x.m == y.m) || !(x.v == y.v) || x.step != y.step) return false;
    }
    return true;
  }

 private:
  Map entries_;
};

/// Initialisation helpers used by every model.
template <class T>
void init_normal(ParamStore<T>& s, const std::string& name, Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = T(rng.normal() * stddev);
  s.add(name, std::move(t));
}

template <class T>
void init_const(ParamStore<T>& s, const std::string& name, Shape shape, double value = 0.0) {
  s.add(name, Tensor<T>::filled(std::move(shape), T(value)));
}

/// Dense layer weights [in, out] with fan-in scaling and a zero bias.
template <class T>
void init_linear(ParamStore<T>& s, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                 double gain = 1.0, bool bias = true) {
  init_normal(s, name + ".w", {in, out}, gain / std::sqrt(double(in)), rng);
  if (bias) init_const(s, name + ".b", {1, out});
}

}  // namespace cardiff
