#include "ehmam/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "ehmam/errors.hpp"

namespace ehmam {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
  T x{};
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, x);
  if (v.empty() || r.ec != std::errc() || r.ptr != end) {
    throw ConfigError("config: bad value '" + v + "' for " + key);
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define INT_FIELD(name, member, type)                                                         \
  Field {                                                                                     \
    name, [](const RunConfig& c) { return fmt_int(c.member); },                               \
        [](RunConfig& c, const std::string& v) { c.member = parse_num<type>(name, v); }       \
  }
#define REAL_FIELD(name, member)                                                              \
  Field {                                                                                     \
    name, [](const RunConfig& c) { return fmt(c.member); },                                   \
        [](RunConfig& c, const std::string& v) { c.member = parse_num<double>(name, v); }     \
  }
#define BOOL_FIELD(name, member)                                                              \
  Field {                                                                                     \
    name, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); },        \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); }            \
  }

std::string layers_str(const std::vector<ConvLayerSpec>& ls) {
  std::string s;
  for (const auto& l : ls) {
    if (!s.empty()) s += ",";
    s += std::to_string(l.kernel) + "x" + std::to_string(l.stride) + "x" + std::to_string(l.channels);
  }
  return s;
}

std::vector<ConvLayerSpec> parse_layers(const std::string& v) {
  std::vector<ConvLayerSpec> out;
  for (const auto& part : split(v, ',')) {
    const auto dims = split(part, 'x');
    if (dims.size() != 3) throw ConfigError("config: frontend.layers entries are KxSxC, got '" + part + "'");
    out.push_back({parse_num<int>("frontend.layers", dims[0]), parse_num<int>("frontend.layers", dims[1]),
                   parse_num<int>("frontend.layers", dims[2])});
  }
  if (out.empty()) throw ConfigError("config: frontend.layers is empty");
  return out;
}

std::string list_str(const std::vector<double>& xs) {
  std::string s;
  for (double x : xs) s += (s.empty() ? "" : ",") + fmt(x);
  return s;
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  if (v.empty()) return out;
  for (const auto& part : split(v, ',')) out.push_back(parse_num<double>(key, part));
  return out;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      Field{"out", [](const RunConfig& c) { return c.out; }, [](RunConfig& c, const std::string& v) { c.out = v; }},
      Field{"data.manifest", [](const RunConfig& c) { return c.manifest; },
            [](RunConfig& c, const std::string& v) { c.manifest = v; }},
      INT_FIELD("synth.num_utterances", synth.num_utterances, int),
      INT_FIELD("synth.segments_per_utterance", synth.segments_per_utterance, int),
      INT_FIELD("synth.codebook_size", synth.codebook_size, int),
      INT_FIELD("synth.segment_len_min", synth.segment_len_min, int),
      INT_FIELD("synth.segment_len_max", synth.segment_len_max, int),
      INT_FIELD("synth.sample_rate", synth.sample_rate, int),
      INT_FIELD("synth.seed", synth.seed, std::uint64_t),
      INT_FIELD("synth.codebook_seed", synth.codebook_seed, std::uint64_t),
      Field{"frontend.mode",
            [](const RunConfig& c) {
              return std::string(c.frontend.mode == FrontendConfig::Mode::kConv ? "conv" : "passthrough");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "conv") {
                c.frontend.mode = FrontendConfig::Mode::kConv;
              } else if (v == "passthrough") {
                c.frontend.mode = FrontendConfig::Mode::kPassthrough;
              } else {
                throw ConfigError("config: frontend.mode must be conv or passthrough");
              }
            }},
      Field{"frontend.layers", [](const RunConfig& c) { return layers_str(c.frontend.layers); },
            [](RunConfig& c, const std::string& v) { c.frontend.layers = parse_layers(v); }},
      INT_FIELD("frontend.seed", frontend.seed, std::uint64_t),
      Field{"frontend.compress_gain", [](const RunConfig& c) { return fmt(c.frontend.compress_gain); },
            [](RunConfig& c, const std::string& v) {
              c.frontend.compress_gain = static_cast<float>(parse_num<double>("frontend.compress_gain", v));
            }},
      INT_FIELD("model.input_dim", model.input_dim, int),
      INT_FIELD("model.dim", model.dim, int),
      INT_FIELD("model.layers", model.layers, int),
      INT_FIELD("model.heads", model.heads, int),
      INT_FIELD("model.ffn_dim", model.ffn_dim, int),
      INT_FIELD("model.conv_layers", model.conv_layers, int),
      INT_FIELD("model.conv_kernel", model.conv_kernel, int),
      INT_FIELD("model.conv_groups", model.conv_groups, int),
      INT_FIELD("model.max_frames", model.max_frames, int),
      INT_FIELD("model.layers_to_average", model.layers_to_average, int),
      REAL_FIELD("model.init_std", model.init_std),
      REAL_FIELD("model.layer_norm_eps", model.layer_norm_eps),
      REAL_FIELD("model.instance_norm_eps", model.instance_norm_eps),
      REAL_FIELD("mask.prob", train.mask.mask_prob),
      INT_FIELD("mask.length", train.mask.mask_length, int),
      INT_FIELD("mask.min_masks", train.mask.min_masks, int),
      BOOL_FIELD("mask.require_same_masks", train.mask.require_same_masks),
      REAL_FIELD("mask.dropout", train.mask.mask_dropout),
      INT_FIELD("mask.total_epochs", train.mask.total_epochs, int),
      REAL_FIELD("mask.adjust", train.mask.mask_adjust),
      Field{"mask.schedule", [](const RunConfig& c) { return std::string(to_string(c.train.mask.schedule)); },
            [](RunConfig& c, const std::string& v) {
              try {
                c.train.mask.schedule = parse_schedule(v);
              } catch (const std::exception&) {
                throw ConfigError("config: mask.schedule must be e2h, hard or random");
              }
            }},
      Field{"mask.unit",
            [](const RunConfig& c) {
              return std::string(c.train.mask.unit == CurriculumUnit::kEpoch ? "epoch" : "step");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "epoch") {
                c.train.mask.unit = CurriculumUnit::kEpoch;
              } else if (v == "step") {
                c.train.mask.unit = CurriculumUnit::kStep;
              } else {
                throw ConfigError("config: mask.unit must be epoch or step");
              }
            }},
      INT_FIELD("mask.seed", train.mask.seed, std::uint64_t),
      REAL_FIELD("ema.tau_start", train.ema.tau_start),
      REAL_FIELD("ema.tau_end", train.ema.tau_end),
      INT_FIELD("ema.anneal_steps", train.ema.anneal_steps, std::int64_t),
      REAL_FIELD("train.lr", train.optimizer.lr),
      REAL_FIELD("train.beta1", train.optimizer.beta1),
      REAL_FIELD("train.beta2", train.optimizer.beta2),
      REAL_FIELD("train.adam_eps", train.optimizer.eps),
      REAL_FIELD("train.weight_decay", train.optimizer.weight_decay),
      INT_FIELD("train.warmup_steps", train.warmup_steps, std::int64_t),
      INT_FIELD("train.total_steps", train.total_steps, std::int64_t),
      INT_FIELD("train.batch_size", train.batch_size, int),
      REAL_FIELD("train.alpha", train.objective.alpha),
      BOOL_FIELD("train.normalize_aux", train.objective.normalize_aux),
      BOOL_FIELD("train.detach_predictor_input", train.objective.detach_predictor_input),
      INT_FIELD("train.seed", train.seed, std::uint64_t),
      INT_FIELD("train.checkpoint_every", train.checkpoint_every, std::int64_t),
      INT_FIELD("train.track_utterance", train.track_utterance, int),
      BOOL_FIELD("train.record_wall_time", train.record_wall_time),
      INT_FIELD("harness.probe_layer", harness.probe_layer, int),
      INT_FIELD("harness.probe_iterations", harness.probe.iterations, int),
      REAL_FIELD("harness.probe_lr", harness.probe.lr),
      REAL_FIELD("harness.probe_l2", harness.probe.l2),
      REAL_FIELD("harness.probe_holdout", harness.probe.holdout),
      REAL_FIELD("harness.probe_train_mask", harness.probe.train_mask),
      INT_FIELD("harness.probe_context", harness.probe.context, int),
      INT_FIELD("harness.probe_seed", harness.probe.seed, std::uint64_t),
      Field{"harness.degrade_percentages", [](const RunConfig& c) { return list_str(c.harness.degrade_percentages); },
            [](RunConfig& c, const std::string& v) {
              c.harness.degrade_percentages = parse_list("harness.degrade_percentages", v);
            }},
      Field{"harness.degrade_selector",
            [](const RunConfig& c) {
              return std::string(c.harness.degrade_selector == DegradeSelector::kPredicted ? "predicted" : "actual");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "predicted") {
                c.harness.degrade_selector = DegradeSelector::kPredicted;
              } else if (v == "actual") {
                c.harness.degrade_selector = DegradeSelector::kActual;
              } else {
                throw ConfigError("config: harness.degrade_selector must be predicted or actual");
              }
            }},
      INT_FIELD("harness.eval_utterances", harness.eval_utterances, int),
      INT_FIELD("harness.eval_seed", harness.eval_seed, std::uint64_t),
      INT_FIELD("harness.mask_report_epochs", harness.mask_report_epochs, int),
      INT_FIELD("harness.mask_report_batch", harness.mask_report_batch, int),
      REAL_FIELD("harness.gradcheck_eps", harness.gradcheck_eps),
      INT_FIELD("harness.gradcheck_coords", harness.gradcheck_coords, int),
      REAL_FIELD("harness.gradcheck_threshold", harness.gradcheck_threshold),
  };
  return f;
}

#undef INT_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

RunConfig::RunConfig() { model.input_dim = input_dim(); }

int RunConfig::input_dim() const {
  return frontend.mode == FrontendConfig::Mode::kConv ? feature_dim(frontend) : model.input_dim;
}

void RunConfig::validate() const {
  if (manifest.empty()) synth.validate();
  static_cast<void>(Frontend{frontend});
  model.validate();
  train.validate();
  if (out.empty()) throw ConfigError("config: out must not be empty");
  const auto& h = harness;
  if (h.probe_layer < -1 || h.probe_layer > model.layers) {
    throw ConfigError("config: harness.probe_layer must be -1 or in [0, model.layers]");
  }
  if (h.probe.iterations < 1 || !(h.probe.lr > 0) || h.probe.l2 < 0) {
    throw ConfigError("config: probe iterations, lr and l2 must be positive");
  }
  if (!(h.probe.holdout > 0 && h.probe.holdout < 1)) throw ConfigError("config: harness.probe_holdout must be in (0, 1)");
  if (!(h.probe.train_mask >= 0 && h.probe.train_mask < 1)) {
    throw ConfigError("config: harness.probe_train_mask must be in [0, 1)");
  }
  if (h.probe.context < 0) throw ConfigError("config: harness.probe_context must be >= 0");
  for (std::size_t i = 0; i < h.degrade_percentages.size(); ++i) {
    const double p = h.degrade_percentages[i];
    if (!(p >= 0 && p < 1)) throw ConfigError("config: degrade percentages must be in [0, 1)");
    if (i > 0 && !(p > h.degrade_percentages[i - 1])) {
      throw ConfigError("config: degrade percentages must be strictly increasing");
    }
  }
  if (h.eval_utterances < 2) throw ConfigError("config: harness.eval_utterances must be >= 2");
  if (h.mask_report_epochs < 1 || h.mask_report_epochs > train.mask.total_epochs) {
    throw ConfigError("config: harness.mask_report_epochs must be in [1, mask.total_epochs]");
  }
  if (h.mask_report_batch < 1) throw ConfigError("config: harness.mask_report_batch must be >= 1");
  if (!(h.gradcheck_eps > 0) || h.gradcheck_coords < 1 || !(h.gradcheck_threshold > 0)) {
    throw ConfigError("config: gradcheck eps, coords and threshold must be positive");
  }
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  field(key).set(cfg, trim(value));
  cfg.model.input_dim = cfg.input_dim();
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("config: duplicate key '" + key + "'");
    apply_override(cfg, key, line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

std::string snapshot(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

RunConfig base_profile_config() {
  RunConfig c;
  c.model = ModelConfig::base_profile(c.input_dim());
  c.train.optimizer.lr = 7.5e-4;
  c.train.optimizer.beta1 = 0.9;
  c.train.optimizer.beta2 = 0.98;
  c.train.optimizer.weight_decay = 0.01;
  c.train.warmup_steps = 8000;
  c.train.total_steps = 400000;
  c.train.ema = {0.999, 0.99999, 75000};
  c.train.mask.mask_prob = 0.5;
  c.train.mask.mask_length = 5;
  c.train.mask.mask_adjust = 0.05;
  c.train.objective.alpha = 0.05;
  return c;
}

}  // namespace ehmam
