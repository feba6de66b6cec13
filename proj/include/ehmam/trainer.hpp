#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ehmam/checkpoint.hpp"
#include "ehmam/corpus.hpp"
#include "ehmam/ema.hpp"
#include "ehmam/gradcheck.hpp"
#include "ehmam/losses.hpp"
#include "ehmam/masking.hpp"
#include "ehmam/model.hpp"
#include "ehmam/rng.hpp"

namespace ehmam {

struct ObjectiveOptions {
  double alpha = 0.05;
  bool normalize_aux = false;
  // Stop the auxiliary gradient at the loss predictor's input.
  bool detach_predictor_input = false;
};

template <typename T>
struct ObjectiveResult {
  double rec = 0.0;
  double aux = 0.0;
  double joint = 0.0;
  bool aux_degenerate = false;
  LossVector<T> actual;     // per-frame reconstruction loss on masked frames
  LossVector<T> predicted;  // student loss-predictor output
};

// Student forward on the masked batch, reconstruction + ranking objective,
// and (when `grad` is non-null) accumulation of parameter gradients.
template <typename T>
ObjectiveResult<T> joint_objective(const ModelState<T>& student, const FrameBatch& batch, const MaskSet& mask,
                                   const Batch3<T>& targets, const ObjectiveOptions& opt, ParamSet<T>* grad);

// Gradient check of the joint objective in 64-bit arithmetic on `student`,
// with the mask and targets produced by one teacher pass.
GradCheckResult gradcheck_joint(const ModelState<double>& student, const FrameBatch& batch, const MaskConfig& mask_cfg,
                                const ObjectiveOptions& opt, double eps, std::size_t coords, std::uint64_t seed);

struct OptimizerConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::int64_t warmup_steps = 300;
  std::int64_t total_steps = 3000;
  int batch_size = 8;
  MaskConfig mask;  // mask.total_epochs is the curriculum length E
  EmaSchedule ema{0.99, 0.999, 1000};
  ObjectiveOptions objective;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  int track_utterance = 0;            // utterance whose per-frame losses are kept once per epoch
  bool record_wall_time = false;      // wall_ms is 0 unless set, keeping metrics byte-stable

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct TrainRecord {
  std::int64_t step = 0;  // updates completed, 1-based
  int epoch = 0;
  double rec_loss = 0.0;
  double aux_loss = 0.0;
  double joint_loss = 0.0;
  double selective_fraction = 0.0;
  double ema_decay = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  bool operator==(const TrainRecord&) const = default;
};

std::string to_json_line(const TrainRecord& r);

// Linear warmup from 0 to the peak, then cosine decay to 0 at total_steps.
double lr_at(const TrainConfig& cfg, std::int64_t step);

// Curriculum epoch of the 0-based step: the run is divided into
// mask.total_epochs equal slices.
int epoch_of(const TrainConfig& cfg, std::int64_t step);

// Adam with decoupled weight decay applied to matrices only.
struct AdamState {
  ParamSet<float> m;
  ParamSet<float> v;
  std::int64_t t = 0;

  static AdamState like(const ParamSet<float>& params);
  void step(ParamSet<float>& params, const ParamSet<float>& grad, const OptimizerConfig& cfg, double lr);
};

struct StepOutput {
  TrainRecord record;
  LossVector<float> actual;  // per-frame reconstruction losses (masked frames)
  MaskSet mask;
};

// Observes the teacher right before it predicts frame losses for a step.
using TeacherHook = std::function<void(std::int64_t step, const ModelState<float>& teacher)>;

// One update. `step` is 0-based; `rng` drives the masking.
StepOutput train_step(ModelState<float>& student, ModelState<float>& teacher, AdamState& adam, const FrameBatch& batch,
                      const TrainConfig& cfg, int epoch, std::int64_t step, RandomSource& rng,
                      const TeacherHook& hook = {});

struct TrainState {
  ModelState<float> student;
  ModelState<float> teacher;
  AdamState adam;
  std::int64_t step = 0;  // completed updates
  Rng data_rng;
  Rng mask_rng;
  std::vector<std::int64_t> order;
  std::int64_t cursor = 0;
  // Tracked utterance per-frame losses, one row per epoch (NaN = unmasked);
  // `landscape_seen[e]` marks rows that were filled.
  std::vector<std::vector<float>> landscape;
  std::vector<std::uint8_t> landscape_seen;

  static TrainState fresh(const ModelConfig& model, const TrainConfig& cfg, std::size_t corpus_size);
  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path, const ModelConfig& model, const TrainConfig& cfg);
};

struct PretrainHooks {
  std::function<void(const TrainRecord&)> on_record;
  TeacherHook on_teacher;
  std::optional<std::filesystem::path> checkpoint_dir;
  // Stop after this many completed updates (simulates interruption).
  std::optional<std::int64_t> stop_after;
};

struct PretrainResult {
  TrainState state;
  std::vector<TrainRecord> metrics;
};

// Trains on featurized sequences. When `resume` is given, continues from it.
PretrainResult pretrain(const std::vector<FeatureSequence>& corpus, const ModelConfig& model, const TrainConfig& cfg,
                        const PretrainHooks& hooks = {}, std::optional<TrainState> resume = std::nullopt);

}  // namespace ehmam
