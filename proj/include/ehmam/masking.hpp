#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ehmam/corpus.hpp"
#include "ehmam/model.hpp"
#include "ehmam/rng.hpp"
#include "ehmam/tensor.hpp"

namespace ehmam {

// e2h: selective share grows linearly with curriculum progress.
// hard: every mask block is selective. random: every block is random.
enum class Schedule { kEasyToHard, kHard, kRandom };
// Progress measured in epochs or in optimizer steps.
enum class CurriculumUnit { kEpoch, kStep };

const char* to_string(Schedule s);
Schedule parse_schedule(const std::string& s);

struct MaskConfig {
  double mask_prob = 0.5;  // P
  int mask_length = 5;     // block width
  int min_masks = 0;
  bool require_same_masks = true;
  double mask_dropout = 0.0;
  int total_epochs = 30;
  // Part of the base profile; nothing reads it.
  double mask_adjust = 0.05;
  Schedule schedule = Schedule::kEasyToHard;
  CurriculumUnit unit = CurriculumUnit::kEpoch;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const MaskConfig&) const = default;
};

// keep_ratio as an exact fraction numer/denom in [0, 1].
struct KeepRatio {
  std::int64_t numer = 1;
  std::int64_t denom = 1;
};

KeepRatio keep_ratio(const MaskConfig& cfg, int epoch, std::int64_t step = 0, std::int64_t total_steps = 1);

struct SplitCounts {
  int selective = 0;
  int random = 0;
  bool operator==(const SplitCounts&) const = default;
};

// random = floor(num_mask * (1 - keep_ratio)), selective = the rest.
SplitCounts split_budget(int num_mask, KeepRatio kr);
// keep_ratio = (epoch + 1) / total_epochs.
SplitCounts schedule_split(int num_mask, int epoch, int total_epochs);

// floor(P * valid_len / L + u), u ~ U[0,1), clamped below by min_masks.
int num_mask_blocks(int valid_len, const MaskConfig& cfg, RandomSource& rng);

// Upper bound (exclusive) offset for random block starts is valid_len - min_len.
// Throws DegenerateLengthError when the row cannot hold num_mask starts.
int block_min_len(int valid_len, int num_mask, int mask_length);

// Indices of the `count` largest values among the first `valid_len`
// entries, in descending value order; ties go to the lower index.
template <typename T>
std::vector<int> select_hard_starts(std::span<const T> predicted, int count, int valid_len);

struct RandomStarts {
  std::vector<int> starts;
  bool clamped = false;  // fewer candidates than requested survived exclusion
};

RandomStarts sample_random_starts(int valid_len, int num_mask, int random_count, const std::vector<int>& selective_starts,
                                  int min_len, RandomSource& rng);

// Sorted union of [s, s + block_len) over starts, restricted to < valid_len.
std::vector<int> expand_blocks(const std::vector<int>& starts, int block_len, int valid_len);

struct MaskRowReport {
  int num_mask = 0;
  int selective_count = 0;
  int random_count = 0;
  int final_cardinality = 0;
  bool clamped = false;
};

struct MaskSet {
  int batch = 0;
  int frames = 0;
  std::vector<std::uint8_t> adaptive;  // batch x frames
  std::vector<std::vector<int>> selective_starts;
  std::vector<std::vector<int>> random_starts;
  std::vector<MaskRowReport> rows;
  int epoch = 0;

  bool at(int b, int n) const { return adaptive[std::size_t(b) * frames + n] != 0; }
  int cardinality(int b) const;
  int total_masked() const;
  // Share of the block budget assigned to selective starts, over all rows.
  double selective_fraction() const;
};

// Full easy-to-hard pipeline over a batch. `predicted` must align with the
// batch geometry; values at padded frames are ignored.
template <typename T>
MaskSet build_adaptive_mask(int frames, const std::vector<int>& lengths, const LossVector<T>& predicted,
                            const MaskConfig& cfg, KeepRatio kr, int epoch, RandomSource& rng);

// keep_ratio from cfg.schedule at `epoch`, epoch granularity.
template <typename T>
MaskSet build_adaptive_mask(int frames, const std::vector<int>& lengths, const LossVector<T>& predicted,
                            const MaskConfig& cfg, int epoch, RandomSource& rng);

// Validates mask geometry against the batch and returns the frame flags the
// encoder substitutes with its mask embedding.
FrameMask apply_mask(const FrameBatch& batch, const MaskSet& mask);

}  // namespace ehmam
