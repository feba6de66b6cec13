#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ehmam/evalharness.hpp"
#include "ehmam/run_config.hpp"
#include "ehmam/trainer.hpp"

namespace ehmam {

// Exit codes: 0 success, 1 configuration / input error, 2 numerical abort.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Pretraining corpus: the manifest when set, else the synthetic corpus.
std::vector<FeatureSequence> training_corpus(const RunConfig& cfg);
// Held-out corpus for the harness: synthetic, seeded synth.seed + eval_seed,
// eval_utterances long. With a manifest the manifest itself is used.
std::vector<FeatureSequence> evaluation_corpus(const RunConfig& cfg);

// Probe fitted on the training corpus, degradation measured on held-out data.
DegradeCurve run_degrade(const RunConfig& cfg, const TrainState& state, const std::vector<FeatureSequence>& train,
                         const std::vector<FeatureSequence>& heldout);

int probe_layer(const RunConfig& cfg);

// Writes `path.tmp` and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace ehmam
