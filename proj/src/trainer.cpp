#include "ehmam/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace ehmam {

template <typename T>
ObjectiveResult<T> joint_objective(const ModelState<T>& student, const FrameBatch& batch, const MaskSet& mask,
                                   const Batch3<T>& targets, const ObjectiveOptions& opt, ParamSet<T>* grad) {
  const FrameMask fm = apply_mask(batch, mask);
  StudentGraph<T> graph(student, batch, &fm);
  const Batch3<T>& recon = graph.reconstruction();
  auto rl = per_frame_reconstruction(recon, targets, mask);
  const LossVector<T>& pred = graph.predicted_losses();
  // The indicator is built from the actual losses as constants.
  const PairTargets ind = build_indicator(rl.per_frame, mask);
  LossVector<T> d_pred;
  const auto aux = auxiliary_loss(pred, ind, opt.normalize_aux, grad ? &d_pred : nullptr);

  ObjectiveResult<T> res;
  res.rec = static_cast<double>(rl.scalar);
  res.aux = static_cast<double>(aux.value);
  res.aux_degenerate = aux.degenerate;
  res.joint = joint_loss(res.rec, res.aux, opt.alpha);
  res.predicted = pred;

  if (grad) {
    const Batch3<T> d_recon = reconstruction_grad(recon, targets, mask);
    const T a = static_cast<T>(opt.alpha);
    for (auto& v : d_pred.values) v *= a;
    graph.backward(&d_recon, opt.alpha != 0.0 ? &d_pred : nullptr, opt.detach_predictor_input, *grad);
  }
  res.actual = std::move(rl.per_frame);
  return res;
}

template ObjectiveResult<float> joint_objective<float>(const ModelState<float>&, const FrameBatch&, const MaskSet&,
                                                       const Batch3<float>&, const ObjectiveOptions&, ParamSet<float>*);
template ObjectiveResult<double> joint_objective<double>(const ModelState<double>&, const FrameBatch&, const MaskSet&,
                                                         const Batch3<double>&, const ObjectiveOptions&,
                                                         ParamSet<double>*);

namespace {

std::vector<double> flatten(const ParamSet<double>& ps) {
  std::vector<double> out;
  out.reserve(ps.total_size());
  for (const auto& p : ps) out.insert(out.end(), p.data.begin(), p.data.end());
  return out;
}

void unflatten(std::span<const double> flat, ParamSet<double>& ps) {
  std::size_t k = 0;
  for (auto& p : ps) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(k), flat.begin() + static_cast<std::ptrdiff_t>(k + p.size()),
              p.data.begin());
    k += p.size();
  }
}

}  // namespace

GradCheckResult gradcheck_joint(const ModelState<double>& student, const FrameBatch& batch, const MaskConfig& mask_cfg,
                                const ObjectiveOptions& opt, double eps, std::size_t coords, std::uint64_t seed) {
  const auto teacher = student.make_teacher();
  const auto enc = encode(teacher, batch);
  const auto pred = predict_frame_losses(teacher, enc);
  const auto targets = build_targets(enc, student.config.layers_to_average, student.config.instance_norm_eps);
  Rng rng(seed);
  const MaskSet mask = build_adaptive_mask(batch.frames, batch.lengths, pred, mask_cfg, KeepRatio{1, 2}, 0, rng);

  ModelState<double> work = student;
  const LossWithGrad fn = [&](std::span<const double> params, std::vector<double>* grad) {
    unflatten(params, work.params);
    if (!grad) return joint_objective<double>(work, batch, mask, targets, opt, nullptr).joint;
    ParamSet<double> g = work.params.zeros_like();
    const double loss = joint_objective(work, batch, mask, targets, opt, &g).joint;
    *grad = flatten(g);
    return loss;
  };
  return gradient_check(fn, flatten(student.params), eps, coords, mix_seed(seed, 99));
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (total_steps < 0) throw ConfigError("train: total_steps must be >= 0");
  if (warmup_steps < 0 || (total_steps > 0 && warmup_steps >= total_steps)) {
    throw ConfigError("train: warmup_steps must be in [0, total_steps)");
  }
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (objective.alpha < 0) throw ConfigError("train: alpha must be >= 0");
  if (!(optimizer.lr > 0)) throw ConfigError("train: lr must be positive");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1)) {
    throw ConfigError("train: Adam betas must be in [0, 1)");
  }
  if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
  mask.validate();
  ema.validate();
}

std::string to_json_line(const TrainRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["rec_loss"] = r.rec_loss;
  j["aux_loss"] = r.aux_loss;
  j["joint_loss"] = r.joint_loss;
  j["selective_fraction"] = r.selective_fraction;
  j["ema_decay"] = r.ema_decay;
  j["lr"] = r.lr;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

double lr_at(const TrainConfig& cfg, std::int64_t step) {
  const double peak = cfg.optimizer.lr;
  if (step <= 0) return 0.0;
  if (step < cfg.warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const auto span = cfg.total_steps - cfg.warmup_steps;
  if (span <= 0) return peak;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

int epoch_of(const TrainConfig& cfg, std::int64_t step) {
  const std::int64_t e = cfg.total_steps > 0 ? step * cfg.mask.total_epochs / cfg.total_steps : 0;
  return static_cast<int>(std::min<std::int64_t>(e, cfg.mask.total_epochs - 1));
}

AdamState AdamState::like(const ParamSet<float>& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void AdamState::step(ParamSet<float>& params, const ParamSet<float>& grad, const OptimizerConfig& cfg, double lr) {
  ++t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(cfg.eps);
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& p = params[i].data;
    const auto& g = grad[i].data;
    auto& mi = m[i].data;
    auto& vi = v[i].data;
    const bool decay = params[i].shape.size() >= 2;
    const auto wd = static_cast<float>(lr * cfg.weight_decay);
    for (std::size_t k = 0; k < p.size(); ++k) {
      mi[k] = b1 * mi[k] + (1.0f - b1) * g[k];
      vi[k] = b2 * vi[k] + (1.0f - b2) * g[k] * g[k];
      float upd = step_size * mi[k] / (std::sqrt(vi[k] * inv_bc2) + eps);
      if (decay) upd += wd * p[k];
      p[k] -= upd;
    }
  }
}

StepOutput train_step(ModelState<float>& student, ModelState<float>& teacher, AdamState& adam, const FrameBatch& batch,
                      const TrainConfig& cfg, int epoch, std::int64_t step, RandomSource& rng,
                      const TeacherHook& hook) {
  const auto t0 = std::chrono::steady_clock::now();
  if (hook) hook(step, teacher);

  const auto tenc = encode(teacher, batch);
  const auto tpred = predict_frame_losses(teacher, tenc);
  const auto targets = build_targets(tenc, student.config.layers_to_average, student.config.instance_norm_eps);

  const KeepRatio kr = keep_ratio(cfg.mask, epoch, step, std::max<std::int64_t>(cfg.total_steps, 1));
  StepOutput out;
  out.mask = build_adaptive_mask(batch.frames, batch.lengths, tpred, cfg.mask, kr, epoch, rng);

  ParamSet<float> grad = student.params.zeros_like();
  auto obj = joint_objective(student, batch, out.mask, targets, cfg.objective, &grad);
  if (!std::isfinite(obj.joint) || !grad.all_finite()) {
    throw NumericalError("train_step: non-finite loss or gradient at step " + std::to_string(step + 1), step + 1);
  }

  const double lr = lr_at(cfg, step + 1);
  adam.step(student.params, grad, cfg.optimizer, lr);
  const double lambda = decay_at(cfg.ema, step);
  ema_update(teacher, student, lambda);

  auto& r = out.record;
  r.step = step + 1;
  r.epoch = epoch;
  r.rec_loss = obj.rec;
  r.aux_loss = obj.aux;
  r.joint_loss = obj.joint;
  r.selective_fraction = out.mask.selective_fraction();
  r.ema_decay = lambda;
  r.lr = lr;
  if (cfg.record_wall_time) {
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  out.actual = std::move(obj.actual);
  return out;
}

// ---------------------------------------------------------------------------

TrainState TrainState::fresh(const ModelConfig& model, const TrainConfig& cfg, std::size_t corpus_size) {
  TrainState st;
  st.student = ModelState<float>::init(model, Role::kStudent, mix_seed(cfg.seed, 1));
  st.teacher = st.student.make_teacher();
  st.adam = AdamState::like(st.student.params);
  st.data_rng = Rng(mix_seed(cfg.seed, 2));
  st.mask_rng = Rng(mix_seed(cfg.seed ^ cfg.mask.seed, 3));
  st.order.resize(corpus_size);
  std::iota(st.order.begin(), st.order.end(), std::int64_t{0});
  st.data_rng.shuffle(st.order);
  st.landscape.assign(static_cast<std::size_t>(cfg.mask.total_epochs), {});
  st.landscape_seen.assign(static_cast<std::size_t>(cfg.mask.total_epochs), 0);
  return st;
}

void TrainState::save(const std::filesystem::path& path) const {
  Container c;
  put_params(c, "student", student.params);
  put_params(c, "teacher", teacher.params);
  put_params(c, "adam_m", adam.m);
  put_params(c, "adam_v", adam.v);
  c.put_i64("meta/counters", {step, adam.t, cursor});
  c.put_i64("data/order", order);
  c.put_string("rng/data", data_rng.state());
  c.put_string("rng/mask", mask_rng.state());
  std::vector<std::int64_t> seen(landscape_seen.begin(), landscape_seen.end());
  c.put_i64("landscape/seen", seen);
  for (std::size_t e = 0; e < landscape.size(); ++e) {
    if (!landscape_seen[e]) continue;
    c.put_f32("landscape/" + std::to_string(e), {static_cast<std::int64_t>(landscape[e].size())}, landscape[e]);
  }
  c.save(path);
}

TrainState TrainState::load(const std::filesystem::path& path, const ModelConfig& model, const TrainConfig& cfg) {
  const Container c = Container::load(path);
  TrainState st = fresh(model, cfg, 0);
  get_params(c, "student", st.student.params);
  get_params(c, "teacher", st.teacher.params);
  get_params(c, "adam_m", st.adam.m);
  get_params(c, "adam_v", st.adam.v);
  const auto counters = c.get_i64("meta/counters");
  if (counters.size() != 3) throw ContractError("checkpoint: malformed counters");
  st.step = counters[0];
  st.adam.t = counters[1];
  st.cursor = counters[2];
  st.order = c.get_i64("data/order");
  st.data_rng.set_state(c.get_string("rng/data"));
  st.mask_rng.set_state(c.get_string("rng/mask"));
  const auto seen = c.get_i64("landscape/seen");
  st.landscape.assign(seen.size(), {});
  st.landscape_seen.assign(seen.size(), 0);
  for (std::size_t e = 0; e < seen.size(); ++e) {
    if (!seen[e]) continue;
    st.landscape_seen[e] = 1;
    st.landscape[e] = c.get_f32("landscape/" + std::to_string(e));
  }
  return st;
}

PretrainResult pretrain(const std::vector<FeatureSequence>& corpus, const ModelConfig& model, const TrainConfig& cfg,
                        const PretrainHooks& hooks, std::optional<TrainState> resume) {
  cfg.validate();
  model.validate();
  if (corpus.empty()) throw ContractError("pretrain: empty corpus");
  PretrainResult res{resume ? std::move(*resume) : TrainState::fresh(model, cfg, corpus.size()), {}};
  TrainState& st = res.state;
  if (st.order.size() != corpus.size()) throw ContractError("pretrain: resume state is for a different corpus size");
  const auto track = static_cast<std::int64_t>(cfg.track_utterance);

  auto checkpoint = [&](const std::string& name) {
    if (hooks.checkpoint_dir) st.save(*hooks.checkpoint_dir / name);
  };

  while (st.step < cfg.total_steps) {
    if (hooks.stop_after && st.step >= *hooks.stop_after) break;
    std::vector<const FeatureSequence*> seqs;
    std::vector<std::int64_t> ids;
    for (int k = 0; k < cfg.batch_size; ++k) {
      if (st.cursor >= static_cast<std::int64_t>(st.order.size())) {
        st.data_rng.shuffle(st.order);
        st.cursor = 0;
      }
      const auto id = st.order[static_cast<std::size_t>(st.cursor++)];
      ids.push_back(id);
      seqs.push_back(&corpus[static_cast<std::size_t>(id)]);
    }
    const FrameBatch fb = make_batch(seqs);
    const int epoch = epoch_of(cfg, st.step);
    StepOutput out = train_step(st.student, st.teacher, st.adam, fb, cfg, epoch, st.step, st.mask_rng, hooks.on_teacher);
    ++st.step;

    const auto e = static_cast<std::size_t>(epoch);
    if (e < st.landscape_seen.size() && !st.landscape_seen[e]) {
      const auto it = std::find(ids.begin(), ids.end(), track);
      if (it != ids.end()) {
        const int b = static_cast<int>(it - ids.begin());
        const int n = fb.lengths[static_cast<std::size_t>(b)];
        std::vector<float> row(static_cast<std::size_t>(n), std::numeric_limits<float>::quiet_NaN());
        for (int t = 0; t < n; ++t) {
          if (out.actual.is_defined(b, t)) row[static_cast<std::size_t>(t)] = out.actual.at(b, t);
        }
        st.landscape[e] = std::move(row);
        st.landscape_seen[e] = 1;
      }
    }

    if (hooks.on_record) hooks.on_record(out.record);
    res.metrics.push_back(out.record);
    if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) {
      checkpoint("step_" + std::to_string(st.step) + ".bin");
    }
  }
  if (st.step >= cfg.total_steps) {
    checkpoint("final.bin");
  } else if (hooks.checkpoint_dir) {
    checkpoint("step_" + std::to_string(st.step) + ".bin");
  }
  return res;
}

}  // namespace ehmam
