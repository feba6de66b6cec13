#include "ehmam/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ehmam/errors.hpp"

namespace ehmam {

const char* to_string(Schedule s) {
  switch (s) {
    case Schedule::kEasyToHard: return "e2h";
    case Schedule::kHard: return "hard";
    case Schedule::kRandom: return "random";
  }
  return "?";
}

Schedule parse_schedule(const std::string& s) {
  if (s == "e2h") return Schedule::kEasyToHard;
  if (s == "hard") return Schedule::kHard;
  if (s == "random") return Schedule::kRandom;
  throw ConfigError("unknown schedule '" + s + "' (expected e2h, hard or random)");
}

void MaskConfig::validate() const {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask: mask_prob must be in (0, 1)");
  if (mask_length < 1) throw ConfigError("mask: mask_length must be >= 1");
  if (min_masks < 0) throw ConfigError("mask: min_masks must be >= 0");
  if (!(mask_dropout >= 0.0 && mask_dropout < 1.0)) throw ConfigError("mask: mask_dropout must be in [0, 1)");
  if (total_epochs < 1) throw ConfigError("mask: total_epochs must be >= 1");
}

KeepRatio keep_ratio(const MaskConfig& cfg, int epoch, std::int64_t step, std::int64_t total_steps) {
  switch (cfg.schedule) {
    case Schedule::kHard: return {1, 1};
    case Schedule::kRandom: return {0, 1};
    case Schedule::kEasyToHard: break;
  }
  if (cfg.unit == CurriculumUnit::kStep) {
    if (total_steps < 1 || step < 0 || step >= total_steps) {
      throw ContractError("keep_ratio: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + ")");
    }
    return {step + 1, total_steps};
  }
  if (epoch < 0 || epoch >= cfg.total_epochs) {
    throw ContractError("keep_ratio: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(cfg.total_epochs) + ")");
  }
  return {epoch + 1, cfg.total_epochs};
}

SplitCounts split_budget(int num_mask, KeepRatio kr) {
  if (num_mask < 0) throw ContractError("split_budget: negative num_mask");
  if (kr.denom < 1 || kr.numer < 0 || kr.numer > kr.denom) throw ContractError("split_budget: keep ratio outside [0, 1]");
  // Exact floor(num_mask * (denom - numer) / denom).
  const auto random = static_cast<int>((std::int64_t(num_mask) * (kr.denom - kr.numer)) / kr.denom);
  return {num_mask - random, random};
}

SplitCounts schedule_split(int num_mask, int epoch, int total_epochs) {
  if (total_epochs < 1 || epoch < 0 || epoch >= total_epochs) {
    throw ContractError("schedule_split: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(total_epochs) + ")");
  }
  return split_budget(num_mask, {epoch + 1, total_epochs});
}

int num_mask_blocks(int valid_len, const MaskConfig& cfg, RandomSource& rng) {
  if (valid_len < 1) throw ContractError("num_mask_blocks: valid_len must be >= 1");
  const double raw = cfg.mask_prob * valid_len / static_cast<double>(cfg.mask_length) + rng.uniform();
  return std::max(cfg.min_masks, static_cast<int>(std::floor(raw)));
}

int block_min_len(int valid_len, int num_mask, int mask_length) {
  int min_len = mask_length;
  if (valid_len - min_len <= num_mask) min_len = valid_len - num_mask - 1;
  if (min_len < 0) {
    throw DegenerateLengthError("mask: row of " + std::to_string(valid_len) + " frames cannot hold " +
                                std::to_string(num_mask) + " mask starts");
  }
  return min_len;
}

template <typename T>
std::vector<int> select_hard_starts(std::span<const T> predicted, int count, int valid_len) {
  if (valid_len < 0 || static_cast<std::size_t>(valid_len) > predicted.size()) {
    throw ContractError("select_hard_starts: valid_len exceeds row");
  }
  if (count < 0 || count > valid_len) {
    throw ContractError("select_hard_starts: count " + std::to_string(count) + " > valid_len " +
                        std::to_string(valid_len));
  }
  std::vector<int> idx(static_cast<std::size_t>(valid_len));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return predicted[static_cast<std::size_t>(a)] > predicted[static_cast<std::size_t>(b)];
  });
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

template std::vector<int> select_hard_starts<float>(std::span<const float>, int, int);
template std::vector<int> select_hard_starts<double>(std::span<const double>, int, int);

RandomStarts sample_random_starts(int valid_len, int num_mask, int random_count, const std::vector<int>& selective_starts,
                                  int min_len, RandomSource& rng) {
  if (random_count < 0 || random_count > num_mask) throw ContractError("sample_random_starts: bad random_count");
  const int span = valid_len - min_len;
  if (span < num_mask) {
    throw DegenerateLengthError("mask: " + std::to_string(span) + " candidate starts for " +
                                std::to_string(num_mask) + " blocks");
  }
  const auto candidates = rng.choose(span, num_mask);
  std::vector<int> pool;
  pool.reserve(candidates.size());
  for (auto c : candidates) {
    const int v = static_cast<int>(c);
    if (std::find(selective_starts.begin(), selective_starts.end(), v) == selective_starts.end()) pool.push_back(v);
  }
  std::sort(pool.begin(), pool.end());
  RandomStarts out;
  if (static_cast<int>(pool.size()) < random_count) {
    out.starts = std::move(pool);
    out.clamped = true;
    return out;
  }
  for (auto p : rng.choose(static_cast<std::int64_t>(pool.size()), random_count)) {
    out.starts.push_back(pool[static_cast<std::size_t>(p)]);
  }
  return out;
}

std::vector<int> expand_blocks(const std::vector<int>& starts, int block_len, int valid_len) {
  if (block_len < 1) throw ContractError("expand_blocks: block_len must be >= 1");
  std::vector<int> out;
  for (int s : starts) {
    for (int o = 0; o < block_len; ++o) {
      if (s + o < valid_len) out.push_back(s + o);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

int MaskSet::cardinality(int b) const {
  int c = 0;
  for (int n = 0; n < frames; ++n) c += at(b, n) ? 1 : 0;
  return c;
}

int MaskSet::total_masked() const {
  return static_cast<int>(std::count(adaptive.begin(), adaptive.end(), std::uint8_t{1}));
}

double MaskSet::selective_fraction() const {
  long sel = 0;
  long total = 0;
  for (const auto& r : rows) {
    sel += r.selective_count;
    total += r.num_mask;
  }
  return total == 0 ? 0.0 : static_cast<double>(sel) / static_cast<double>(total);
}

template <typename T>
MaskSet build_adaptive_mask(int frames, const std::vector<int>& lengths, const LossVector<T>& predicted,
                            const MaskConfig& cfg, KeepRatio kr, int epoch, RandomSource& rng) {
  cfg.validate();
  const int batch = static_cast<int>(lengths.size());
  if (predicted.batch != batch || predicted.frames != frames) {
    throw ContractError("build_adaptive_mask: predicted losses do not align with the batch");
  }
  MaskSet ms;
  ms.batch = batch;
  ms.frames = frames;
  ms.epoch = epoch;
  ms.adaptive.assign(std::size_t(batch) * frames, 0);
  ms.selective_starts.resize(static_cast<std::size_t>(batch));
  ms.random_starts.resize(static_cast<std::size_t>(batch));
  ms.rows.resize(static_cast<std::size_t>(batch));

  // Batch-level rounding draw. Unused once rows have their own lengths, but
  // consumed so the draw stream matches the reference routine.
  (void)rng.uniform();

  std::vector<std::vector<int>> row_sets(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const int sz = lengths[static_cast<std::size_t>(b)];
    if (sz < 1 || sz > frames) throw ContractError("build_adaptive_mask: row length outside [1, frames]");
    auto& rep = ms.rows[static_cast<std::size_t>(b)];
    const int num_mask = num_mask_blocks(sz, cfg, rng);
    rep.num_mask = num_mask;
    if (num_mask == 0) continue;
    const int min_len = block_min_len(sz, num_mask, cfg.mask_length);
    const SplitCounts split = split_budget(num_mask, kr);
    rep.selective_count = split.selective;
    rep.random_count = split.random;

    const std::span<const T> row(predicted.values.data() + std::size_t(b) * frames, static_cast<std::size_t>(frames));
    auto selective = select_hard_starts(row, split.selective, sz);
    auto random = sample_random_starts(sz, num_mask, split.random, selective, min_len, rng);
    rep.clamped = random.clamped;

    std::vector<int> combined = expand_blocks(selective, cfg.mask_length, sz);
    const auto rnd = expand_blocks(random.starts, cfg.mask_length, sz);
    combined.insert(combined.end(), rnd.begin(), rnd.end());
    std::sort(combined.begin(), combined.end());
    combined.erase(std::unique(combined.begin(), combined.end()), combined.end());
    row_sets[static_cast<std::size_t>(b)] = std::move(combined);
    ms.selective_starts[static_cast<std::size_t>(b)] = std::move(selective);
    ms.random_starts[static_cast<std::size_t>(b)] = std::move(random.starts);
  }

  std::size_t min_count = row_sets.empty() ? 0 : row_sets.front().size();
  for (const auto& s : row_sets) min_count = std::min(min_count, s.size());

  for (int b = 0; b < batch; ++b) {
    auto idc = row_sets[static_cast<std::size_t>(b)];
    if (cfg.require_same_masks && idc.size() > min_count) {
      std::vector<int> kept;
      for (auto p : rng.choose(static_cast<std::int64_t>(idc.size()), static_cast<std::int64_t>(min_count))) {
        kept.push_back(idc[static_cast<std::size_t>(p)]);
      }
      idc = std::move(kept);
    }
    if (cfg.mask_dropout > 0.0) {
      // np.rint: round half to even.
      const auto holes = static_cast<std::int64_t>(std::nearbyint(static_cast<double>(idc.size()) * cfg.mask_dropout));
      std::vector<int> kept;
      const auto keep = static_cast<std::int64_t>(idc.size()) - holes;
      for (auto p : rng.choose(static_cast<std::int64_t>(idc.size()), keep)) kept.push_back(idc[static_cast<std::size_t>(p)]);
      idc = std::move(kept);
    }
    for (int n : idc) ms.adaptive[std::size_t(b) * frames + n] = 1;
    ms.rows[static_cast<std::size_t>(b)].final_cardinality = static_cast<int>(idc.size());
  }
  return ms;
}

template <typename T>
MaskSet build_adaptive_mask(int frames, const std::vector<int>& lengths, const LossVector<T>& predicted,
                            const MaskConfig& cfg, int epoch, RandomSource& rng) {
  return build_adaptive_mask(frames, lengths, predicted, cfg, keep_ratio(cfg, epoch), epoch, rng);
}

template MaskSet build_adaptive_mask<float>(int, const std::vector<int>&, const LossVector<float>&, const MaskConfig&,
                                            KeepRatio, int, RandomSource&);
template MaskSet build_adaptive_mask<double>(int, const std::vector<int>&, const LossVector<double>&,
                                             const MaskConfig&, KeepRatio, int, RandomSource&);
template MaskSet build_adaptive_mask<float>(int, const std::vector<int>&, const LossVector<float>&, const MaskConfig&,
                                            int, RandomSource&);
template MaskSet build_adaptive_mask<double>(int, const std::vector<int>&, const LossVector<double>&,
                                             const MaskConfig&, int, RandomSource&);

FrameMask apply_mask(const FrameBatch& batch, const MaskSet& mask) {
  if (mask.batch != batch.batch || mask.frames != batch.frames) {
    throw ContractError("apply_mask: mask geometry does not match batch");
  }
  FrameMask fm;
  fm.batch = batch.batch;
  fm.frames = batch.frames;
  fm.flags = mask.adaptive;
  for (int b = 0; b < batch.batch; ++b) {
    for (int n = 0; n < batch.frames; ++n) {
      if (mask.at(b, n) && !batch.is_valid(b, n)) {
        throw ContractError("apply_mask: mask covers padded frame (" + std::to_string(b) + ", " +
                            std::to_string(n) + ")");
      }
    }
  }
  return fm;
}

}  // namespace ehmam
