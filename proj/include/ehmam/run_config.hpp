#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ehmam/corpus.hpp"
#include "ehmam/evalharness.hpp"
#include "ehmam/frontend.hpp"
#include "ehmam/model.hpp"
#include "ehmam/trainer.hpp"

namespace ehmam {

// Evaluation-side options for the harness commands.
struct HarnessConfig {
  int probe_layer = -1;  // -1: final encoder output (layer K)
  ProbeConfig probe{300, 0.05, 1e-4, 0.25, 0.0, 2, 0};
  std::vector<double> degrade_percentages{0.1, 0.2, 0.3, 0.4, 0.5};
  DegradeSelector degrade_selector = DegradeSelector::kPredicted;
  int eval_utterances = 60;
  std::uint64_t eval_seed = 1000;
  int mask_report_epochs = 10;
  int mask_report_batch = 8;
  double gradcheck_eps = 1e-3;
  int gradcheck_coords = 64;
  double gradcheck_threshold = 1e-3;
};

// Everything one command needs. Serialized as `key = value` lines with
// dotted keys; see README for the key list.
struct RunConfig {
  SynthConfig synth;
  std::string manifest;  // when set, the corpus is read from it instead of synthesized
  FrontendConfig frontend;
  ModelConfig model;  // model.input_dim follows the frontend
  TrainConfig train;
  HarnessConfig harness;
  std::string out = "run";

  RunConfig();
  void validate() const;
  int input_dim() const;
};

// Unknown keys, malformed values and failed validation throw ConfigError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
// Canonical form: every key, fixed order, round-trip exact.
std::string snapshot(const RunConfig& cfg);
std::vector<std::string> config_keys();

// Preset used for the full-scale geometry; far too slow for desk runs.
RunConfig base_profile_config();

}  // namespace ehmam
