#pragma once

#include <cstdint>
#include <vector>

#include "ehmam/masking.hpp"
#include "ehmam/tensor.hpp"

namespace ehmam {

template <typename T>
struct ReconstructionLoss {
  LossVector<T> per_frame;  // mean over channels of squared error; defined on masked frames
  T scalar = T(0);          // mean of the defined per-frame values
  int count = 0;            // masked frames contributing
  bool empty() const { return count == 0; }
};

template <typename T>
ReconstructionLoss<T> per_frame_reconstruction(const Batch3<T>& student_recon, const Batch3<T>& targets,
                                               const MaskSet& mask);

// Gradient of ReconstructionLoss::scalar w.r.t. student_recon.
template <typename T>
Batch3<T> reconstruction_grad(const Batch3<T>& student_recon, const Batch3<T>& targets, const MaskSet& mask);

// Per-row strict-order indicator over ordered pairs of masked frames.
struct PairTargets {
  std::vector<std::vector<int>> frames;                // masked frame ids per row, ascending
  std::vector<std::vector<std::uint8_t>> indicator;    // per row, M x M row-major

  // I[i, j] for positions i, j within frames[row].
  bool at(int row, std::size_t i, std::size_t j) const {
    return indicator[static_cast<std::size_t>(row)][i * frames[static_cast<std::size_t>(row)].size() + j] != 0;
  }
};

// I[i,j] = 1 iff actual_i > actual_j, both masked, i != j.
template <typename T>
PairTargets build_indicator(const LossVector<T>& actual, const MaskSet& mask);

// sigma(p_i - p_j) in the overflow-safe branch form.
template <typename T>
T pairwise_sigmoid(T predicted_i, T predicted_j);

template <typename T>
struct AuxiliaryLoss {
  T value = T(0);
  // No row had two or more masked frames.
  bool degenerate = false;
};

// Cross-entropy between the pair indicator and the pairwise sigmoid over all
// ordered masked pairs of each row; summed per row (or averaged over pairs
// when `normalize`), then averaged over rows. When `grad` is non-null it
// receives d value / d predicted, sized like `predicted`.
template <typename T>
AuxiliaryLoss<T> auxiliary_loss(const LossVector<T>& predicted, const PairTargets& targets, bool normalize,
                                LossVector<T>* grad = nullptr);

// rec + alpha * aux; throws NumericalError on non-finite input.
double joint_loss(double rec, double aux, double alpha);

}  // namespace ehmam
