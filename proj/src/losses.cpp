#include "ehmam/losses.hpp"

#include <cmath>

#include "ehmam/errors.hpp"

namespace ehmam {

namespace {

template <typename T>
void check_geometry(const Batch3<T>& a, const Batch3<T>& b, const MaskSet& mask) {
  if (!a.same_shape(b)) throw ContractError("reconstruction: prediction and target shapes differ");
  if (mask.batch != a.batch || mask.frames != a.frames) {
    throw ContractError("reconstruction: mask geometry does not match");
  }
}

}  // namespace

template <typename T>
ReconstructionLoss<T> per_frame_reconstruction(const Batch3<T>& student_recon, const Batch3<T>& targets,
                                               const MaskSet& mask) {
  check_geometry(student_recon, targets, mask);
  ReconstructionLoss<T> out;
  out.per_frame = LossVector<T>(student_recon.batch, student_recon.frames);
  double total = 0.0;
  for (int b = 0; b < student_recon.batch; ++b) {
    for (int n = 0; n < student_recon.frames; ++n) {
      if (!mask.at(b, n)) continue;
      T acc = T(0);
      for (int c = 0; c < student_recon.dim; ++c) {
        const T diff = student_recon.at(b, n, c) - targets.at(b, n, c);
        acc += diff * diff;
      }
      const T v = acc / static_cast<T>(student_recon.dim);
      out.per_frame.at(b, n) = v;
      out.per_frame.defined[std::size_t(b) * out.per_frame.frames + n] = 1;
      total += static_cast<double>(v);
      ++out.count;
    }
  }
  out.scalar = out.count ? static_cast<T>(total / out.count) : T(0);
  return out;
}

template <typename T>
Batch3<T> reconstruction_grad(const Batch3<T>& student_recon, const Batch3<T>& targets, const MaskSet& mask) {
  check_geometry(student_recon, targets, mask);
  Batch3<T> g(student_recon.batch, student_recon.frames, student_recon.dim);
  const int count = mask.total_masked();
  if (count == 0) return g;
  const T scale = T(2) / (static_cast<T>(count) * static_cast<T>(student_recon.dim));
  for (int b = 0; b < g.batch; ++b) {
    for (int n = 0; n < g.frames; ++n) {
      if (!mask.at(b, n)) continue;
      for (int c = 0; c < g.dim; ++c) g.at(b, n, c) = scale * (student_recon.at(b, n, c) - targets.at(b, n, c));
    }
  }
  return g;
}

template <typename T>
PairTargets build_indicator(const LossVector<T>& actual, const MaskSet& mask) {
  if (mask.batch != actual.batch || mask.frames != actual.frames) {
    throw ContractError("build_indicator: mask geometry does not match");
  }
  PairTargets pt;
  pt.frames.resize(static_cast<std::size_t>(actual.batch));
  pt.indicator.resize(static_cast<std::size_t>(actual.batch));
  for (int b = 0; b < actual.batch; ++b) {
    auto& fr = pt.frames[static_cast<std::size_t>(b)];
    for (int n = 0; n < actual.frames; ++n) {
      if (mask.at(b, n)) fr.push_back(n);
    }
    const std::size_t m = fr.size();
    auto& ind = pt.indicator[static_cast<std::size_t>(b)];
    ind.assign(m * m, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (i != j && actual.at(b, fr[i]) > actual.at(b, fr[j])) ind[i * m + j] = 1;
      }
    }
  }
  return pt;
}

template <typename T>
T pairwise_sigmoid(T predicted_i, T predicted_j) {
  const T x = predicted_i - predicted_j;
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
AuxiliaryLoss<T> auxiliary_loss(const LossVector<T>& predicted, const PairTargets& targets, bool normalize,
                                LossVector<T>* grad) {
  if (static_cast<int>(targets.frames.size()) != predicted.batch) {
    throw ContractError("auxiliary_loss: pair targets do not match batch");
  }
  if (grad) *grad = LossVector<T>(predicted.batch, predicted.frames);
  AuxiliaryLoss<T> out;
  out.degenerate = true;
  const int rows = predicted.batch;
  if (rows == 0) return out;
  double total = 0.0;
  for (int b = 0; b < rows; ++b) {
    const auto& fr = targets.frames[static_cast<std::size_t>(b)];
    const std::size_t m = fr.size();
    if (m < 2) continue;
    out.degenerate = false;
    const double pairs = static_cast<double>(m * (m - 1));
    const T row_scale = static_cast<T>((normalize ? 1.0 / pairs : 1.0) / rows);
    double row_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const T pi = predicted.at(b, fr[i]);
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        const T x = pi - predicted.at(b, fr[j]);
        const T target = targets.at(b, i, j) ? T(1) : T(0);
        row_sum += static_cast<double>(std::max(x, T(0)) - x * target + std::log1p(std::exp(-std::abs(x))));
        if (grad) {
          const T g = (pairwise_sigmoid(pi, predicted.at(b, fr[j])) - target) * row_scale;
          grad->at(b, fr[i]) += g;
          grad->at(b, fr[j]) -= g;
        }
      }
    }
    if (normalize) row_sum /= pairs;
    total += row_sum;
  }
  if (grad) {
    for (int b = 0; b < rows; ++b) {
      for (int n : targets.frames[static_cast<std::size_t>(b)]) grad->defined[std::size_t(b) * grad->frames + n] = 1;
    }
  }
  out.value = static_cast<T>(total / rows);
  return out;
}

double joint_loss(double rec, double aux, double alpha) {
  if (!std::isfinite(rec) || !std::isfinite(aux) || !std::isfinite(alpha)) {
    throw NumericalError("joint_loss: non-finite input");
  }
  return rec + alpha * aux;
}

#define EHMAM_LOSSES(T)                                                                                         \
  template ReconstructionLoss<T> per_frame_reconstruction<T>(const Batch3<T>&, const Batch3<T>&, const MaskSet&); \
  template Batch3<T> reconstruction_grad<T>(const Batch3<T>&, const Batch3<T>&, const MaskSet&);                 \
  template PairTargets build_indicator<T>(const LossVector<T>&, const MaskSet&);                                 \
  template T pairwise_sigmoid<T>(T, T);                                                                          \
  template AuxiliaryLoss<T> auxiliary_loss<T>(const LossVector<T>&, const PairTargets&, bool, LossVector<T>*);

EHMAM_LOSSES(float)
EHMAM_LOSSES(double)

}  // namespace ehmam
