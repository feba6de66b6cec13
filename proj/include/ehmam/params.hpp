#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ehmam/errors.hpp"

namespace ehmam {

// Storage viewed through Eigen maps. Eigen peels reductions and products at a
// runtime-alignment-dependent index, so buffers must start on a fixed
// boundary for results to be bitwise reproducible.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

enum class ParamGroup : std::uint8_t { kFrontend = 0, kEncoder = 1, kPredictor = 2, kDecoder = 3 };

const char* to_string(ParamGroup g);

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  ParamGroup group = ParamGroup::kEncoder;
  AlignedVector<T> data;

  std::size_t size() const { return data.size(); }
};

// Ordered collection of named parameter arrays.
template <typename T>
class ParamSet {
 public:
  std::size_t add(std::string name, std::vector<int> shape, ParamGroup group) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    params_.push_back(Param<T>{std::move(name), std::move(shape), group, AlignedVector<T>(n, T(0))});
    return params_.size() - 1;
  }

  std::size_t count() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // Index of `name`, or -1.
  long find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return static_cast<long>(i);
    }
    return -1;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& p : params_) out.add(p.name, p.shape, p.group);
    return out;
  }

  void set_zero() {
    for (auto& p : params_) std::fill(p.data.begin(), p.data.end(), T(0));
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : params_) {
      auto i = out.add(p.name, p.shape, p.group);
      for (std::size_t k = 0; k < p.size(); ++k) out[i].data[k] = static_cast<U>(p.data[k]);
    }
    return out;
  }

  bool all_finite() const;

 private:
  std::vector<Param<T>> params_;
};

template <typename T>
bool ParamSet<T>::all_finite() const {
  for (const auto& p : params_) {
    for (T v : p.data) {
      if (!(v - v == v - v)) return false;
    }
  }
  return true;
}

// FNV-1a over raw parameter bytes. Used to detect unexpected mutation.
template <typename T>
std::uint64_t fingerprint(const ParamSet<T>& ps) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : ps) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.data.data());
    for (std::size_t i = 0; i < p.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace ehmam
