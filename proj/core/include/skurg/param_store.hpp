#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "skurg/tensor.hpp"

namespace skurg {

// Deterministic normal sampler (Box-Muller over mt19937_64), so that parameter
// initialization does not depend on the standard library's distribution choices.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  double uniform() {
    return double(rng_()) * (1.0 / 18446744073709551616.0);  // [0,1)
  }

  std::mt19937_64 rng_;
  bool have_spare_ = false;
  double spare_ = 0;
};

// Named model parameters with deterministic iteration order (insertion order).
template <class Real>
class ParamStoreT {
 public:
  using Tensor = TensorT<Real>;

  Tensor& create(const std::string& name, Shape shape) {
    if (index_.count(name)) throw std::runtime_error("param store: duplicate name " + name);
    index_.emplace(name, items_.size());
    items_.emplace_back(name, Tensor::zeros(shape, /*requires_grad=*/true));
    return items_.back().second;
  }

  Tensor& create_normal(const std::string& name, Shape shape, NormalSampler& rng, Real stddev) {
    Tensor& t = create(name, shape);
    auto v = t.values_mut();
    for (auto& x : v) x = Real(rng.next()) * stddev;
    return t;
  }

  Tensor& create_const(const std::string& name, Shape shape, Real fill) {
    Tensor& t = create(name, shape);
    auto v = t.values_mut();
    for (auto& x : v) x = fill;
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("param store: unknown name " + name);
    return items_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("param store: unknown name " + name);
    return items_[it->second].second;
  }

  std::size_t size() const { return items_.size(); }
  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

  // Value snapshot (for best-checkpoint retention).
  std::vector<std::vector<Real>> snapshot() const {
    std::vector<std::vector<Real>> out;
    out.reserve(items_.size());
    for (const auto& [_, t] : items_) out.emplace_back(t.values().begin(), t.values().end());
    return out;
  }

  void restore(const std::vector<std::vector<Real>>& snap) {
    if (snap.size() != items_.size()) throw std::runtime_error("param store: snapshot size mismatch");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto dst = items_[i].second.values_mut();
      if (snap[i].size() != dst.size()) throw std::runtime_error("param store: snapshot shape mismatch");
      std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
  }

  template <class Other>
  ParamStoreT<Other> cast() const {
    ParamStoreT<Other> out;
    for (const auto& [name, t] : items_) {
      auto& nt = out.create(name, t.shape());
      auto dst = nt.values_mut();
      auto src = t.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = Other(src[i]);
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore32 = ParamStoreT<float>;
using ParamStore64 = ParamStoreT<double>;

// Gradients of a scalar with respect to every stored parameter. Parameters off
// the path from the root get zero gradients.
template <class Real>
std::unordered_map<std::string, std::vector<Real>> gradients_of(const TensorT<Real>& scalar,
                                                                ParamStoreT<Real>& params) {
  params.zero_grad();
  backward(scalar);
  std::unordered_map<std::string, std::vector<Real>> out;
  for (auto& [name, t] : params) {
    auto g = t.grad_mut();
    out.emplace(name, std::vector<Real>(g.begin(), g.end()));
  }
  return out;
}

}  // namespace skurg
