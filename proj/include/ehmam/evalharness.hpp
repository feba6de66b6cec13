#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ehmam/corpus.hpp"
#include "ehmam/masking.hpp"
#include "ehmam/model.hpp"
#include "ehmam/tensor.hpp"

namespace ehmam {

// Labelled frames, one feature row per frame.
struct FrameSet {
  Mat<double> x;
  std::vector<int> y;
};

struct ProbeConfig {
  int iterations = 300;
  double lr = 0.05;
  double l2 = 1e-4;
  double holdout = 0.25;  // fraction of utterances held out
  // Fraction of each training utterance's frames masked uniformly while
  // fitting, so the probe also sees masked-position representations.
  double train_mask = 0.0;
  // Neighbouring frames on each side whose features are concatenated to
  // the classified frame's; zero beyond the utterance edges.
  int context = 0;
  std::uint64_t seed = 0;
};

// Softmax regression on standardized features.
struct LinearProbe {
  int layer = 0;
  int context = 0;
  int classes = 0;
  RowVec<double> mean;
  RowVec<double> inv_scale;
  Mat<double> weight;  // dim x classes
  RowVec<double> bias;

  std::vector<int> predict(const Mat<double>& x) const;
};

LinearProbe fit_probe(const FrameSet& train, int classes, const ProbeConfig& cfg);
double probe_accuracy(const LinearProbe& probe, const FrameSet& data);

// Encoder features at `layer` for every valid frame. Layers 0..K-1 are the
// block outputs, K is the final normalized output. Each row holds frames
// n-context..n+context.
FrameSet encoder_frames(const ModelState<float>& model, const std::vector<FeatureSequence>& corpus, int layer,
                        const std::vector<std::vector<std::uint8_t>>* masks = nullptr, int context = 0);

struct ProbeResult {
  LinearProbe probe;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::size_t heldout_frames = 0;
};

// Utterances are split by a seeded shuffle into train and held-out parts.
ProbeResult probe_train(const ModelState<float>& student, const std::vector<FeatureSequence>& corpus, int layer,
                        const ProbeConfig& cfg);

enum class DegradeSelector { kPredicted, kActual };

struct DegradeConfig {
  std::vector<double> percentages{0.1, 0.2, 0.3, 0.4, 0.5};
  std::uint64_t seed = 0;
  DegradeSelector selector = DegradeSelector::kPredicted;
};

struct DegradeCurve {
  std::vector<double> percentages;
  std::vector<double> random;
  std::vector<double> selective;
  double baseline_error = 0.0;
};

// Masks a fraction p of each utterance's frames, either the frames with the
// highest teacher-predicted loss or a uniform sample, and reports the probe
// error increase relative to the unmasked input.
DegradeCurve degrade_experiment(const ModelState<float>& student, const ModelState<float>& teacher,
                                const LinearProbe& probe, const std::vector<FeatureSequence>& corpus,
                                const DegradeConfig& cfg);

std::string degrade_csv(const DegradeCurve& curve);

// Kendall tau-b; 0 when either side is constant.
double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y);

struct RankingResult {
  double tau = 0.0;
  std::size_t frames = 0;
  std::vector<double> predicted;
  std::vector<double> actual;
};

// Half of each utterance's frames masked uniformly; teacher predictions on
// the clean input are ranked against the student's actual losses.
RankingResult ranking_quality(const ModelState<float>& student, const ModelState<float>& teacher,
                              const std::vector<FeatureSequence>& corpus, std::uint64_t seed);

struct LandscapeReport {
  std::string csv;
  std::vector<int> unseen_epochs;
};

// One row per epoch; unmasked cells and unseen rows are left empty.
LandscapeReport loss_landscape_report(const std::vector<std::vector<float>>& rows,
                                      const std::vector<std::uint8_t>& seen);

struct MaskReportRow {
  int epoch = 0;
  int row = 0;
  int length = 0;
  MaskRowReport report;
};

// Teacher-driven masks for the first `batch_size` utterances at each epoch.
std::vector<MaskReportRow> mask_report(const ModelState<float>& teacher, const std::vector<FeatureSequence>& corpus,
                                       const MaskConfig& cfg, int epochs, int batch_size, std::uint64_t seed);

std::string mask_report_csv(const std::vector<MaskReportRow>& rows);

}  // namespace ehmam
