#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ehmam/frontend.hpp"
#include "ehmam/params.hpp"

namespace ehmam {

// Synthetic speech-like corpus: each utterance concatenates segments, each
// rendered from one unit of a fixed codebook (2-3 sinusoids plus low-passed
// noise). Unit templates come from `codebook_seed` so corpora drawn with
// different `seed`s share the same units.
struct SynthConfig {
  int num_utterances = 200;
  int segments_per_utterance = 5;
  int codebook_size = 8;
  int segment_len_min = 400;  // samples
  int segment_len_max = 1200;
  int sample_rate = 8000;
  std::uint64_t seed = 0;
  std::uint64_t codebook_seed = 17;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

// Labels are assigned using `frontend` geometry (frame centers).
std::vector<Utterance> generate_synthetic(const SynthConfig& cfg, const FrontendConfig& frontend);

Utterance load_wav(const std::filesystem::path& path);
// Writes mono PCM16.
void write_wav(const std::filesystem::path& path, const Utterance& utt);

// Binary utterance container (samples, rate, optional labels).
void save_utterance(const std::filesystem::path& path, const Utterance& utt);
Utterance load_utterance(const std::filesystem::path& path);

// Writes one file per utterance under `dir` plus `dir/manifest.txt`; returns
// the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& dir,
                                   const std::vector<Utterance>& utts);
// Reads a manifest; `.wav` entries go through load_wav, everything else
// through load_utterance. Relative paths resolve against the manifest's dir.
std::vector<Utterance> read_manifest(const std::filesystem::path& manifest);

// Padded batch of frame features. `valid` is the complement of padding and
// is always a prefix of each row.
struct FrameBatch {
  int batch = 0;
  int frames = 0;
  int dim = 0;
  AlignedVector<float> features;     // batch x frames x dim
  std::vector<std::uint8_t> valid;   // batch x frames
  std::vector<int> lengths;          // batch
  std::vector<std::int32_t> labels;  // batch x frames, -1 at padding; empty if unlabeled

  bool has_labels() const { return !labels.empty(); }
  bool is_valid(int b, int n) const { return valid[std::size_t(b) * frames + n] != 0; }

  Eigen::Map<const FeatureMatrix> row(int b) const {
    return {features.data() + std::size_t(b) * frames * dim, frames, dim};
  }
  Eigen::Map<FeatureMatrix> row(int b) {
    return {features.data() + std::size_t(b) * frames * dim, frames, dim};
  }
};

// Frontend output for one utterance with its labels.
struct FeatureSequence {
  FeatureMatrix features;
  std::vector<std::int32_t> labels;  // empty if unlabeled
};

FeatureSequence featurize(const Utterance& utt, const Frontend& frontend);

FrameBatch make_batch(const std::vector<Utterance>& utts, const FrontendConfig& frontend);
FrameBatch make_batch(const std::vector<const FeatureSequence*>& seqs);

}  // namespace ehmam
