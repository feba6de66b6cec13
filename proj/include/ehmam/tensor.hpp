#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "ehmam/params.hpp"

namespace ehmam {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Dense batch x frames x dim array; row(b) views one sample as frames x dim.
template <typename T>
struct Batch3 {
  int batch = 0;
  int frames = 0;
  int dim = 0;
  AlignedVector<T> data;

  Batch3() = default;
  Batch3(int b, int n, int d) : batch(b), frames(n), dim(d), data(std::size_t(b) * n * d, T(0)) {}

  Eigen::Map<Mat<T>> row(int b) { return {data.data() + std::size_t(b) * frames * dim, frames, dim}; }
  Eigen::Map<const Mat<T>> row(int b) const {
    return {data.data() + std::size_t(b) * frames * dim, frames, dim};
  }
  T& at(int b, int n, int c) { return data[(std::size_t(b) * frames + n) * dim + c]; }
  T at(int b, int n, int c) const { return data[(std::size_t(b) * frames + n) * dim + c]; }
  bool same_shape(const Batch3& o) const {
    return batch == o.batch && frames == o.frames && dim == o.dim;
  }
};

// Per-frame scalars with a definedness mask: actual reconstruction losses
// (defined on masked frames) or predicted losses (defined on valid frames).
template <typename T>
struct LossVector {
  int batch = 0;
  int frames = 0;
  std::vector<T> values;
  std::vector<std::uint8_t> defined;

  LossVector() = default;
  LossVector(int b, int n) : batch(b), frames(n), values(std::size_t(b) * n, T(0)), defined(std::size_t(b) * n, 0) {}

  T& at(int b, int n) { return values[std::size_t(b) * frames + n]; }
  T at(int b, int n) const { return values[std::size_t(b) * frames + n]; }
  bool is_defined(int b, int n) const { return defined[std::size_t(b) * frames + n] != 0; }
};

}  // namespace ehmam
