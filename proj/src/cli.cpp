#include "ehmam/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "ehmam/errors.hpp"

namespace ehmam {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> schedule;
  std::optional<std::string> checkpoint;
  std::optional<std::int64_t> steps;
  std::optional<double> alpha;
  std::optional<double> mask_prob;
};

std::vector<FeatureSequence> featurize_all(const std::vector<Utterance>& utts, const FrontendConfig& fc) {
  const Frontend frontend(fc);
  std::vector<FeatureSequence> out;
  out.reserve(utts.size());
  for (const auto& u : utts) out.push_back(featurize(u, frontend));
  return out;
}

// `--model.dim 32` and `--model.dim=32` style overrides left over by CLI11.
void apply_extras(RunConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("cli: unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      apply_override(cfg, a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("cli: missing value for '" + a + "'");
      apply_override(cfg, a.substr(2), extras[++i]);
    }
  }
}

RunConfig resolve(const Options& o, const std::vector<std::string>& extras) {
  RunConfig cfg;
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw ConfigError("cli: config file not found: " + o.config);
    cfg = load_run_config(o.config);
  }
  apply_extras(cfg, extras);
  if (o.out) cfg.out = *o.out;
  if (o.seed) {
    cfg.synth.seed = *o.seed;
    cfg.train.seed = *o.seed;
    cfg.harness.probe.seed = *o.seed;
  }
  if (o.schedule) apply_override(cfg, "mask.schedule", *o.schedule);
  if (o.steps) {
    cfg.train.total_steps = *o.steps;
    if (cfg.train.total_steps > 0 && cfg.train.warmup_steps >= cfg.train.total_steps) {
      cfg.train.warmup_steps = cfg.train.total_steps / 10;
    }
  }
  if (o.alpha) cfg.train.objective.alpha = *o.alpha;
  if (o.mask_prob) cfg.train.mask.mask_prob = *o.mask_prob;
  cfg.validate();
  return cfg;
}

TrainState load_state(const RunConfig& cfg, const Options& o) {
  if (!o.checkpoint) throw ConfigError("cli: --checkpoint is required");
  if (!fs::exists(*o.checkpoint)) throw ConfigError("cli: checkpoint not found: " + *o.checkpoint);
  try {
    return TrainState::load(*o.checkpoint, cfg.model, cfg.train);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("cli: incompatible checkpoint: ") + e.what());
  }
}

void write_snapshot(const RunConfig& cfg) { write_file_atomic(fs::path(cfg.out) / "config.snapshot", snapshot(cfg)); }

int cmd_pretrain(const RunConfig& cfg, const Options& o, std::ostream& out) {
  std::optional<TrainState> resume;
  if (o.checkpoint) resume = load_state(cfg, o);
  const auto corpus = training_corpus(cfg);
  const fs::path dir(cfg.out);
  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "reports");
  write_snapshot(cfg);

  const fs::path metrics = dir / "metrics.jsonl";
  const fs::path tmp = dir / "metrics.jsonl.tmp";
  std::ofstream mf(tmp, std::ios::binary | std::ios::trunc);
  if (!mf) throw IoError("cli: cannot write metrics", tmp.string());
  PretrainHooks hooks;
  hooks.checkpoint_dir = dir / "checkpoints";
  hooks.on_record = [&](const TrainRecord& r) { mf << to_json_line(r) << '\n'; };
  std::optional<PretrainResult> res;
  try {
    res = pretrain(corpus, cfg.model, cfg.train, hooks, std::move(resume));
  } catch (const NumericalError&) {
    // Keep the records up to the abort.
    mf.close();
    fs::rename(tmp, metrics);
    throw;
  }
  mf.close();
  fs::rename(tmp, metrics);
  const auto land = loss_landscape_report(res->state.landscape, res->state.landscape_seen);
  write_file_atomic(dir / "reports" / "loss_landscape.csv", land.csv);
  out << "pretrain: " << res->metrics.size() << " steps";
  if (!res->metrics.empty()) out << ", final rec_loss " << res->metrics.back().rec_loss;
  out << ", output in " << dir.string() << '\n';
  return 0;
}

int cmd_mask_report(const RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto st = load_state(cfg, o);
  const auto corpus = training_corpus(cfg);
  const auto rows = mask_report(st.teacher, corpus, cfg.train.mask, cfg.harness.mask_report_epochs,
                                cfg.harness.mask_report_batch, cfg.train.seed);
  const fs::path path = fs::path(cfg.out) / "reports" / "mask_report.csv";
  fs::create_directories(path.parent_path());
  write_file_atomic(path, mask_report_csv(rows));
  out << "mask-report: " << rows.size() << " rows -> " << path.string() << '\n';
  return 0;
}

int cmd_degrade(const RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto st = load_state(cfg, o);
  const auto curve = run_degrade(cfg, st, training_corpus(cfg), evaluation_corpus(cfg));
  const fs::path path = fs::path(cfg.out) / "reports" / "degrade.csv";
  fs::create_directories(path.parent_path());
  write_file_atomic(path, degrade_csv(curve));
  out << "degrade: baseline error " << curve.baseline_error << " -> " << path.string() << '\n';
  return 0;
}

int cmd_probe(const RunConfig& cfg, const Options& o, std::ostream& out) {
  const auto st = load_state(cfg, o);
  const auto fresh = TrainState::fresh(cfg.model, cfg.train, 1);
  const auto heldout = evaluation_corpus(cfg);
  const int layer = probe_layer(cfg);
  std::ostringstream csv;
  csv << std::setprecision(9) << "model,layer,context,train_accuracy,heldout_accuracy,heldout_frames,kendall_tau\n";
  for (const auto* s : {&st, &fresh}) {
    const auto p = probe_train(s->student, heldout, layer, cfg.harness.probe);
    const auto r = ranking_quality(s->student, s->teacher, heldout, cfg.train.seed);
    const char* name = s == &st ? "checkpoint" : "untrained";
    csv << name << ',' << layer << ',' << cfg.harness.probe.context << ',' << p.train_accuracy << ','
        << p.heldout_accuracy << ',' << p.heldout_frames << ',' << r.tau << '\n';
    out << "probe " << name << ": heldout accuracy " << p.heldout_accuracy << ", kendall tau " << r.tau << '\n';
  }
  const fs::path path = fs::path(cfg.out) / "reports" / "probe.csv";
  fs::create_directories(path.parent_path());
  write_file_atomic(path, csv.str());
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, const Options& o, std::ostream& out) {
  ModelState<double> student;
  if (o.checkpoint) {
    student = load_state(cfg, o).student.cast<double>();
  } else {
    student = ModelState<double>::init(ModelConfig::tiny(cfg.input_dim()), Role::kStudent, cfg.train.seed);
  }
  auto sc = cfg.synth;
  sc.num_utterances = 2;
  auto seqs = featurize_all(generate_synthetic(sc, cfg.frontend), cfg.frontend);
  const int lens[2] = {12, 10};
  for (int i = 0; i < 2; ++i) {
    auto& f = seqs[std::size_t(i)].features;
    if (f.rows() < lens[i]) throw ConfigError("cli: synthetic utterance too short for gradcheck");
    f.conservativeResize(lens[i], Eigen::NoChange);
    seqs[std::size_t(i)].labels.clear();
  }
  const auto batch = make_batch({&seqs[0], &seqs[1]});
  auto mc = cfg.train.mask;
  mc.mask_length = std::min(mc.mask_length, 2);
  const auto r = gradcheck_joint(student, batch, mc, cfg.train.objective, cfg.harness.gradcheck_eps,
                                 std::size_t(cfg.harness.gradcheck_coords), cfg.train.seed);
  out << "gradcheck: max relative error " << std::setprecision(6) << r.max_rel_error << " over " << r.coords_checked
      << " coordinates\n";
  if (r.max_rel_error >= cfg.harness.gradcheck_threshold) {
    out << "gradcheck: above threshold " << cfg.harness.gradcheck_threshold << '\n';
    return 2;
  }
  return 0;
}

}  // namespace

std::vector<FeatureSequence> training_corpus(const RunConfig& cfg) {
  if (!cfg.manifest.empty()) return featurize_all(read_manifest(cfg.manifest), cfg.frontend);
  return featurize_all(generate_synthetic(cfg.synth, cfg.frontend), cfg.frontend);
}

std::vector<FeatureSequence> evaluation_corpus(const RunConfig& cfg) {
  if (!cfg.manifest.empty()) return training_corpus(cfg);
  auto sc = cfg.synth;
  sc.seed = cfg.synth.seed + cfg.harness.eval_seed;
  sc.num_utterances = cfg.harness.eval_utterances;
  return featurize_all(generate_synthetic(sc, cfg.frontend), cfg.frontend);
}

int probe_layer(const RunConfig& cfg) {
  return cfg.harness.probe_layer < 0 ? cfg.model.layers : cfg.harness.probe_layer;
}

DegradeCurve run_degrade(const RunConfig& cfg, const TrainState& state, const std::vector<FeatureSequence>& train,
                         const std::vector<FeatureSequence>& heldout) {
  const auto probe = probe_train(state.student, train, probe_layer(cfg), cfg.harness.probe).probe;
  DegradeConfig dc;
  dc.percentages = cfg.harness.degrade_percentages;
  dc.seed = cfg.train.seed;
  dc.selector = cfg.harness.degrade_selector;
  return degrade_experiment(state.student, state.teacher, probe, heldout, dc);
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write file", tmp.string());
    f << content;
    if (!f) throw IoError("write failed", tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed (" + ec.message() + ")", path.string());
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked acoustic model pretraining and evaluation"};
  app.require_subcommand(1);
  Options o;
  using Cmd = int (*)(const RunConfig&, const Options&, std::ostream&);
  std::vector<std::pair<CLI::App*, Cmd>> cmds;
  auto add = [&](const char* name, const char* help, Cmd fn) {
    auto* sub = app.add_subcommand(name, help);
    sub->allow_extras();
    sub->add_option("--config", o.config, "Config file (key = value lines)");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--seed", o.seed, "Run seed (corpus, training, probe)");
    sub->add_option("--schedule", o.schedule, "Masking schedule: e2h, hard or random");
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint to load");
    sub->add_option("--steps,--total-steps", o.steps, "Optimizer steps");
    sub->add_option("--alpha", o.alpha, "Weight of the ranking loss");
    sub->add_option("--mask-prob", o.mask_prob, "Mask probability P");
    cmds.emplace_back(sub, fn);
  };
  add("pretrain", "Train student and teacher; resumes from --checkpoint if given", cmd_pretrain);
  add("mask-report", "Per-row mask statistics over the curriculum", cmd_mask_report);
  add("degrade", "Probe error under selective versus random frame masking", cmd_degrade);
  add("probe", "Linear probe accuracy and predictor ranking quality", cmd_probe);
  add("gradcheck", "Finite-difference check of the joint objective", cmd_gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    for (const auto& [sub, fn] : cmds) {
      if (!sub->parsed()) continue;
      const auto cfg = resolve(o, sub->remaining());
      return fn(cfg, o, out);
    }
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace ehmam
