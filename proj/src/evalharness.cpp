#include "ehmam/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "ehmam/errors.hpp"
#include "ehmam/rng.hpp"

namespace ehmam {
namespace {

constexpr std::size_t kChunk = 16;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Calls fn(batch, first) for consecutive chunks of the corpus.
void for_chunks(const std::vector<FeatureSequence>& corpus,
                const std::function<void(const FrameBatch&, std::size_t)>& fn) {
  for (std::size_t first = 0; first < corpus.size(); first += kChunk) {
    std::vector<const FeatureSequence*> ptrs;
    for (std::size_t i = first; i < std::min(corpus.size(), first + kChunk); ++i) ptrs.push_back(&corpus[i]);
    fn(make_batch(ptrs), first);
  }
}

FrameMask chunk_mask(const FrameBatch& batch, std::size_t first, const std::vector<std::vector<std::uint8_t>>& masks) {
  FrameMask fm;
  fm.batch = batch.batch;
  fm.frames = batch.frames;
  fm.flags.assign(std::size_t(batch.batch) * batch.frames, 0);
  for (int b = 0; b < batch.batch; ++b) {
    const auto& m = masks[first + b];
    for (int n = 0; n < batch.lengths[b]; ++n) fm.flags[std::size_t(b) * batch.frames + n] = m[n];
  }
  return fm;
}

int label_count(const std::vector<FeatureSequence>& corpus) {
  int classes = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].labels.empty()) throw ContractError("probe: utterance " + std::to_string(i) + " has no frame labels");
    for (int l : corpus[i].labels) classes = std::max(classes, l + 1);
  }
  return classes;
}

std::vector<int> all_labels(const std::vector<FeatureSequence>& corpus) {
  std::vector<int> y;
  for (const auto& s : corpus) y.insert(y.end(), s.labels.begin(), s.labels.end());
  return y;
}

// Teacher-predicted loss per valid frame, one vector per utterance.
std::vector<std::vector<double>> predicted_per_frame(const ModelState<float>& teacher,
                                                     const std::vector<FeatureSequence>& corpus) {
  std::vector<std::vector<double>> out(corpus.size());
  for_chunks(corpus, [&](const FrameBatch& batch, std::size_t first) {
    const auto enc = encode(teacher, batch);
    const auto pred = predict_frame_losses(teacher, enc);
    for (int b = 0; b < batch.batch; ++b) {
      auto& v = out[first + b];
      for (int n = 0; n < batch.lengths[b]; ++n) v.push_back(pred.at(b, n));
    }
  });
  return out;
}

// Student reconstruction loss per frame under the given masks, computed
// against teacher targets on the clean input. NaN where unmasked.
std::vector<std::vector<double>> actual_per_frame(const ModelState<float>& student, const ModelState<float>& teacher,
                                                  const std::vector<FeatureSequence>& corpus,
                                                  const std::vector<std::vector<std::uint8_t>>& masks) {
  std::vector<std::vector<double>> out(corpus.size());
  for_chunks(corpus, [&](const FrameBatch& batch, std::size_t first) {
    const auto targets = build_targets(encode(teacher, batch), teacher.config.layers_to_average);
    const FrameMask fm = chunk_mask(batch, first, masks);
    StudentGraph<float> graph(student, batch, &fm);
    const auto& recon = graph.reconstruction();
    for (int b = 0; b < batch.batch; ++b) {
      auto& v = out[first + b];
      v.assign(batch.lengths[b], std::numeric_limits<double>::quiet_NaN());
      for (int n = 0; n < batch.lengths[b]; ++n) {
        if (!fm.at(b, n)) continue;
        double s = 0.0;
        for (int c = 0; c < recon.dim; ++c) {
          const double e = double(recon.at(b, n, c)) - double(targets.at(b, n, c));
          s += e * e;
        }
        v[n] = s / recon.dim;
      }
    }
  });
  return out;
}

int masked_count(double p, int n) { return std::min(n, static_cast<int>(std::floor(p * n + 0.5))); }

}  // namespace

std::vector<int> LinearProbe::predict(const Mat<double>& x) const {
  Mat<double> z = (x.rowwise() - mean).array().rowwise() * inv_scale.array();
  Mat<double> logits = (z * weight).rowwise() + bias;
  std::vector<int> out(std::size_t(x.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    out[std::size_t(i)] = static_cast<int>(arg);
  }
  return out;
}

LinearProbe fit_probe(const FrameSet& train, int classes, const ProbeConfig& cfg) {
  if (train.x.rows() == 0) throw ContractError("fit_probe: empty training set");
  if (classes < 1) throw ContractError("fit_probe: need at least one class");
  const auto n = train.x.rows();
  const auto d = train.x.cols();
  LinearProbe p;
  p.classes = classes;
  p.mean = train.x.colwise().mean();
  Mat<double> z = train.x.rowwise() - p.mean;
  p.inv_scale = RowVec<double>(d);
  for (Eigen::Index c = 0; c < d; ++c) {
    const double sd = std::sqrt(z.col(c).squaredNorm() / double(n));
    p.inv_scale[c] = sd > 1e-8 ? 1.0 / sd : 1.0;
  }
  z = z.array().rowwise() * p.inv_scale.array();

  Mat<double> onehot = Mat<double>::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, train.y[std::size_t(i)]) = 1.0;

  p.weight = Mat<double>::Zero(d, classes);
  p.bias = RowVec<double>::Zero(classes);
  Mat<double> mw = p.weight, vw = p.weight;
  RowVec<double> mb = p.bias, vb = p.bias;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= cfg.iterations; ++it) {
    Mat<double> logits = (z * p.weight).rowwise() + p.bias;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto r = logits.row(i);
      r.array() -= r.maxCoeff();
      r = r.array().exp().matrix();
      r /= r.sum();
    }
    Mat<double> g = (logits - onehot) / double(n);
    Mat<double> gw = z.transpose() * g + cfg.l2 * p.weight;
    RowVec<double> gb = g.colwise().sum();
    const double c1 = 1.0 - std::pow(b1, it), c2 = 1.0 - std::pow(b2, it);
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    p.weight.array() -= cfg.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    p.bias.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }
  return p;
}

double probe_accuracy(const LinearProbe& probe, const FrameSet& data) {
  if (data.y.empty()) return 0.0;
  const auto pred = probe.predict(data.x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.y[i];
  return double(hit) / double(pred.size());
}

FrameSet encoder_frames(const ModelState<float>& model, const std::vector<FeatureSequence>& corpus, int layer,
                        const std::vector<std::vector<std::uint8_t>>* masks, int context) {
  if (layer < 0 || layer > model.config.layers) throw ContractError("encoder_frames: layer out of range");
  if (context < 0) throw ContractError("encoder_frames: negative context");
  std::size_t total = 0;
  for (const auto& s : corpus) total += std::size_t(s.features.rows());
  FrameSet out;
  const int dim = model.config.dim;
  out.x = Mat<double>::Zero(Eigen::Index(total), Eigen::Index(2 * context + 1) * dim);
  Eigen::Index at = 0;
  for_chunks(corpus, [&](const FrameBatch& batch, std::size_t first) {
    FrameMask fm;
    if (masks) fm = chunk_mask(batch, first, *masks);
    const auto enc = encode(model, batch, masks ? &fm : nullptr);
    const Batch3<float>& src = layer == model.config.layers ? enc.final : enc.per_layer[std::size_t(layer)];
    for (int b = 0; b < batch.batch; ++b) {
      const int len = batch.lengths[b];
      const auto rows = src.row(b);
      for (int n = 0; n < len; ++n, ++at) {
        for (int o = -context; o <= context; ++o) {
          if (n + o < 0 || n + o >= len) continue;
          out.x.block(at, Eigen::Index(o + context) * dim, 1, dim) = rows.row(n + o).cast<double>();
        }
      }
    }
  });
  for (const auto& s : corpus) {
    out.y.insert(out.y.end(), s.labels.begin(), s.labels.end());
  }
  return out;
}

ProbeResult probe_train(const ModelState<float>& student, const std::vector<FeatureSequence>& corpus, int layer,
                        const ProbeConfig& cfg) {
  if (corpus.size() < 2) throw ContractError("probe_train: need at least two utterances");
  if (!(cfg.train_mask >= 0.0 && cfg.train_mask < 1.0)) throw ContractError("probe_train: train_mask must lie in [0, 1)");
  const int classes = label_count(corpus);
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(mix_seed(cfg.seed, 7));
  rng.shuffle(idx);
  auto held = static_cast<std::size_t>(std::llround(cfg.holdout * double(corpus.size())));
  held = std::clamp<std::size_t>(held, 1, corpus.size() - 1);
  std::vector<FeatureSequence> train, test;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < idx.size() - held ? train : test).push_back(corpus[idx[i]]);

  std::vector<std::vector<std::uint8_t>> masks(train.size());
  for (std::size_t u = 0; u < train.size(); ++u) {
    const int n = int(train[u].features.rows());
    masks[u].assign(n, 0);
    for (auto i : rng.choose(n, masked_count(cfg.train_mask, n))) masks[u][std::size_t(i)] = 1;
  }
  const FrameSet tr = encoder_frames(student, train, layer, cfg.train_mask > 0 ? &masks : nullptr, cfg.context);
  const FrameSet te = encoder_frames(student, test, layer, nullptr, cfg.context);
  ProbeResult res;
  res.probe = fit_probe(tr, classes, cfg);
  res.probe.layer = layer;
  res.probe.context = cfg.context;
  res.train_accuracy = probe_accuracy(res.probe, tr);
  res.heldout_accuracy = probe_accuracy(res.probe, te);
  res.heldout_frames = te.y.size();
  return res;
}

DegradeCurve degrade_experiment(const ModelState<float>& student, const ModelState<float>& teacher,
                                const LinearProbe& probe, const std::vector<FeatureSequence>& corpus,
                                const DegradeConfig& cfg) {
  for (std::size_t i = 0; i < cfg.percentages.size(); ++i) {
    const double p = cfg.percentages[i];
    if (!(p >= 0.0 && p < 1.0)) throw ContractError("degrade_experiment: percentages must lie in [0, 1)");
    if (i > 0 && !(p > cfg.percentages[i - 1])) {
      throw ContractError("degrade_experiment: percentages must be strictly increasing");
    }
  }
  label_count(corpus);
  const std::vector<int> y = all_labels(corpus);
  auto errors = [&](const std::vector<std::vector<std::uint8_t>>* masks) {
    const auto pred = probe.predict(encoder_frames(student, corpus, probe.layer, masks, probe.context).x);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != y[i];
    return wrong;
  };
  const double total = double(y.size());
  // The baseline is floored at one frame so a perfect probe still yields a
  // finite ratio.
  const double base = std::max<double>(double(errors(nullptr)), 1.0);

  Rng rng(mix_seed(cfg.seed, 11));
  std::vector<std::vector<double>> score;
  if (cfg.selector == DegradeSelector::kPredicted) {
    score = predicted_per_frame(teacher, corpus);
  } else {
    std::vector<std::vector<std::uint8_t>> half(corpus.size()), other(corpus.size());
    for (std::size_t u = 0; u < corpus.size(); ++u) {
      const int n = int(corpus[u].features.rows());
      half[u].assign(n, 0);
      for (auto i : rng.choose(n, n / 2)) half[u][std::size_t(i)] = 1;
      other[u].resize(n);
      for (int i = 0; i < n; ++i) other[u][i] = !half[u][i];
    }
    score = actual_per_frame(student, teacher, corpus, half);
    const auto rest = actual_per_frame(student, teacher, corpus, other);
    for (std::size_t u = 0; u < score.size(); ++u) {
      for (std::size_t i = 0; i < score[u].size(); ++i) {
        if (other[u][i]) score[u][i] = rest[u][i];
      }
    }
  }

  DegradeCurve curve;
  curve.percentages = cfg.percentages;
  curve.baseline_error = base / total;
  for (double p : cfg.percentages) {
    std::vector<std::vector<std::uint8_t>> sel(corpus.size()), rnd(corpus.size());
    for (std::size_t u = 0; u < corpus.size(); ++u) {
      const int n = int(corpus[u].features.rows());
      const int k = masked_count(p, n);
      sel[u].assign(n, 0);
      rnd[u].assign(n, 0);
      for (int i : select_hard_starts<double>(score[u], k, n)) sel[u][std::size_t(i)] = 1;
      for (auto i : rng.choose(n, k)) rnd[u][std::size_t(i)] = 1;
    }
    curve.selective.push_back(double(errors(&sel)) / base - 1.0);
    curve.random.push_back(double(errors(&rnd)) / base - 1.0);
  }
  return curve;
}

std::string degrade_csv(const DegradeCurve& curve) {
  std::string out = "percentage,random,selective\n";
  for (std::size_t i = 0; i < curve.percentages.size(); ++i) {
    out += fmt(curve.percentages[i]) + "," + fmt(curve.random[i]) + "," + fmt(curve.selective[i]) + "\n";
  }
  return out;
}

double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("kendall_tau_b: length mismatch");
  const std::size_t n = x.size();
  double concordant = 0, discordant = 0, tie_x = 0, tie_y = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0 && dy == 0) {
        tie_x += 1;
        tie_y += 1;
      } else if (dx == 0) {
        tie_x += 1;
      } else if (dy == 0) {
        tie_y += 1;
      } else if ((dx > 0) == (dy > 0)) {
        concordant += 1;
      } else {
        discordant += 1;
      }
    }
  }
  const double pairs = double(n) * double(n - (n > 0)) / 2.0;
  const double denom = std::sqrt((pairs - tie_x) * (pairs - tie_y));
  return denom > 0 ? (concordant - discordant) / denom : 0.0;
}

RankingResult ranking_quality(const ModelState<float>& student, const ModelState<float>& teacher,
                              const std::vector<FeatureSequence>& corpus, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 13));
  std::vector<std::vector<std::uint8_t>> masks(corpus.size());
  for (std::size_t u = 0; u < corpus.size(); ++u) {
    const int n = int(corpus[u].features.rows());
    masks[u].assign(n, 0);
    for (auto i : rng.choose(n, n / 2)) masks[u][std::size_t(i)] = 1;
  }
  const auto pred = predicted_per_frame(teacher, corpus);
  const auto actual = actual_per_frame(student, teacher, corpus, masks);
  RankingResult res;
  for (std::size_t u = 0; u < corpus.size(); ++u) {
    for (std::size_t i = 0; i < masks[u].size(); ++i) {
      if (!masks[u][i]) continue;
      res.predicted.push_back(pred[u][i]);
      res.actual.push_back(actual[u][i]);
    }
  }
  res.frames = res.actual.size();
  res.tau = kendall_tau_b(res.predicted, res.actual);
  return res;
}

LandscapeReport loss_landscape_report(const std::vector<std::vector<float>>& rows,
                                      const std::vector<std::uint8_t>& seen) {
  if (rows.size() != seen.size()) throw ContractError("loss_landscape_report: rows and flags differ in length");
  std::size_t width = 0;
  for (std::size_t e = 0; e < rows.size(); ++e) {
    if (seen[e]) width = std::max(width, rows[e].size());
  }
  LandscapeReport rep;
  std::string& out = rep.csv;
  out = "epoch,seen";
  for (std::size_t f = 0; f < width; ++f) out += ",f" + std::to_string(f);
  out += "\n";
  for (std::size_t e = 0; e < rows.size(); ++e) {
    if (seen[e] && rows[e].size() != width) throw ContractError("loss_landscape_report: ragged rows");
    out += std::to_string(e) + (seen[e] ? ",1" : ",0");
    if (!seen[e]) rep.unseen_epochs.push_back(int(e));
    for (std::size_t f = 0; f < width; ++f) {
      out += ",";
      if (seen[e] && std::isfinite(rows[e][f])) out += fmt(rows[e][f]);
    }
    out += "\n";
  }
  return rep;
}

std::vector<MaskReportRow> mask_report(const ModelState<float>& teacher, const std::vector<FeatureSequence>& corpus,
                                       const MaskConfig& cfg, int epochs, int batch_size, std::uint64_t seed) {
  if (epochs < 0 || epochs > cfg.total_epochs) throw ContractError("mask_report: epochs out of range");
  if (batch_size < 1 || std::size_t(batch_size) > corpus.size()) {
    throw ContractError("mask_report: batch size exceeds corpus");
  }
  std::vector<const FeatureSequence*> ptrs;
  for (int i = 0; i < batch_size; ++i) ptrs.push_back(&corpus[std::size_t(i)]);
  const FrameBatch batch = make_batch(ptrs);
  const auto pred = predict_frame_losses(teacher, encode(teacher, batch));
  Rng rng(mix_seed(seed, 17));
  std::vector<MaskReportRow> out;
  for (int e = 0; e < epochs; ++e) {
    const MaskSet m = build_adaptive_mask(batch.frames, batch.lengths, pred, cfg, e, rng);
    for (int b = 0; b < batch.batch; ++b) out.push_back({e, b, batch.lengths[b], m.rows[std::size_t(b)]});
  }
  return out;
}

std::string mask_report_csv(const std::vector<MaskReportRow>& rows) {
  std::ostringstream os;
  os << "epoch,row,num_mask,selective_count,random_count,final_cardinality,clamp_flag\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.row << ',' << r.report.num_mask << ',' << r.report.selective_count
       << ',' << r.report.random_count << ',' << r.report.final_cardinality << ',' << (r.report.clamped ? 1 : 0)
       << '\n';
  }
  return os.str();
}

}  // namespace ehmam
