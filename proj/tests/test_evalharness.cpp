#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ehmam/errors.hpp"
#include "ehmam/evalharness.hpp"

using namespace ehmam;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.input_dim = 6;
  m.dim = 16;
  m.layers = 2;
  m.heads = 2;
  m.ffn_dim = 32;
  m.conv_layers = 1;
  m.layers_to_average = 2;
  return m;
}

// Random features; labels depend on the sign of channel 0 when `informative`.
std::vector<FeatureSequence> labelled_corpus(Rng& rng, int utts, bool informative, int constant_label = -1) {
  std::vector<FeatureSequence> out;
  for (int u = 0; u < utts; ++u) {
    FeatureSequence s;
    const int n = 10 + int(rng.below(20));
    s.features = FeatureMatrix(n, 6);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < 6; ++c) s.features(r, c) = float(rng.normal());
      int label = s.features(r, 0) > 0 ? 1 : 0;
      if (!informative) label = int(rng.below(2));
      if (constant_label >= 0) label = constant_label;
      s.labels.push_back(label);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// O(n^2) tau-b straight from the pair definition.
double brute_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  double conc = 0, disc = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0 && dy == 0) continue;
      if (dx == 0) {
        ++tx;
      } else if (dy == 0) {
        ++ty;
      } else if ((dx > 0) == (dy > 0)) {
        ++conc;
      } else {
        ++disc;
      }
    }
  }
  const double denom = std::sqrt((conc + disc + tx) * (conc + disc + ty));
  return denom == 0 ? 0.0 : (conc - disc) / denom;
}

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("kendall tau") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  CHECK(kendall_tau_b(a, a) == 1.0);
  CHECK(kendall_tau_b(a, {5, 4, 3, 2, 1}) == -1.0);
  CHECK(kendall_tau_b(a, {2, 2, 2, 2, 2}) == 0.0);
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const int n = 2 + int(rng.below(30));
    std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (auto& v : x) v = std::floor(rng.uniform() * 4);
    for (auto& v : y) v = std::floor(rng.uniform() * 4);
    REQUIRE(kendall_tau_b(x, y) == doctest::Approx(brute_tau_b(x, y)).epsilon(1e-12));
  }
}

TEST_CASE("kendall tau of a random permutation is near zero") {
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> x(400);
    for (auto& v : x) v = rng.normal();
    auto y = x;
    rng.shuffle(y);
    CHECK(std::abs(kendall_tau_b(x, y)) < 0.1);
  }
}

TEST_CASE("probe on constant labels") {
  Rng rng(3);
  const auto corpus = labelled_corpus(rng, 8, true, 0);
  const auto model = ModelState<float>::init(small_model(), Role::kStudent, 1);
  ProbeConfig pc;
  const auto r = probe_train(model, corpus, 2, pc);
  CHECK(r.heldout_accuracy == 1.0);
  CHECK(r.train_accuracy == 1.0);
  CHECK(r.heldout_frames > 0);
}

TEST_CASE("probe on random features is at chance") {
  const int classes = 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    auto make = [&](int n) {
      FrameSet fs;
      fs.x = Mat<double>(n, 8);
      for (int r = 0; r < n; ++r) {
        for (int c = 0; c < 8; ++c) fs.x(r, c) = rng.normal();
        fs.y.push_back(r % classes);
      }
      return fs;
    };
    const auto train = make(2000), test = make(2000);
    ProbeConfig pc;
    pc.seed = seed;
    const auto probe = fit_probe(train, classes, pc);
    CHECK(std::abs(probe_accuracy(probe, test) - 1.0 / classes) <= 0.05);
  }
}

TEST_CASE("probe separates an informative channel") {
  FrameSet fs;
  Rng rng(4);
  fs.x = Mat<double>(600, 3);
  for (int r = 0; r < 600; ++r) {
    for (int c = 0; c < 3; ++c) fs.x(r, c) = rng.normal();
    fs.y.push_back(fs.x(r, 1) > 0.2 ? 1 : 0);
  }
  const auto probe = fit_probe(fs, 2, ProbeConfig{});
  CHECK(probe_accuracy(probe, fs) > 0.95);
}

TEST_CASE("probe leaves the encoder untouched and is deterministic") {
  Rng rng(5);
  const auto corpus = labelled_corpus(rng, 10, true);
  const auto model = ModelState<float>::init(small_model(), Role::kStudent, 2);
  const auto before = fingerprint(model.params);
  ProbeConfig pc;
  pc.iterations = 50;
  pc.context = 1;
  pc.train_mask = 0.2;
  const auto a = probe_train(model, corpus, 2, pc);
  const auto b = probe_train(model, corpus, 2, pc);
  CHECK(fingerprint(model.params) == before);
  CHECK(a.heldout_accuracy == b.heldout_accuracy);
  CHECK(a.probe.weight == b.probe.weight);
  CHECK(a.probe.weight.rows() == 16 * 3);
}

TEST_CASE("probe errors") {
  Rng rng(6);
  auto corpus = labelled_corpus(rng, 4, true);
  const auto model = ModelState<float>::init(small_model(), Role::kStudent, 2);
  corpus[1].labels.clear();
  CHECK_THROWS_AS(probe_train(model, corpus, 2, ProbeConfig{}), ContractError);
  corpus = labelled_corpus(rng, 4, true);
  CHECK_THROWS_AS(probe_train(model, corpus, 3, ProbeConfig{}), ContractError);
  ProbeConfig bad;
  bad.train_mask = 1.0;
  CHECK_THROWS(probe_train(model, corpus, 2, bad));
}

TEST_CASE("encoder frames") {
  Rng rng(7);
  const auto corpus = labelled_corpus(rng, 3, true);
  const auto model = ModelState<float>::init(small_model(), Role::kStudent, 3);
  std::size_t total = 0;
  for (const auto& s : corpus) total += std::size_t(s.features.rows());
  const auto fs = encoder_frames(model, corpus, 0);
  CHECK(std::size_t(fs.x.rows()) == total);
  CHECK(fs.x.cols() == 16);
  const auto ctx = encoder_frames(model, corpus, 2, nullptr, 2);
  CHECK(ctx.x.cols() == 16 * 5);
  // The first frame has no left neighbours.
  for (int c = 0; c < 32; ++c) CHECK(ctx.x(0, c) == 0.0);
  const auto fin = encoder_frames(model, corpus, 2);
  for (int c = 0; c < 16; ++c) CHECK(ctx.x(0, 32 + c) == fin.x(0, c));
}

TEST_CASE("degrade experiment") {
  Rng rng(8);
  const auto corpus = labelled_corpus(rng, 12, true);
  const auto student = ModelState<float>::init(small_model(), Role::kStudent, 4);
  const auto teacher = student.make_teacher();
  ProbeConfig pc;
  pc.iterations = 100;
  const auto probe = probe_train(student, corpus, 2, pc).probe;
  DegradeConfig dc;
  dc.percentages = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  const auto curve = degrade_experiment(student, teacher, probe, corpus, dc);
  REQUIRE(curve.random.size() == 6);
  REQUIRE(curve.selective.size() == 6);
  CHECK(curve.random[0] == 0.0);
  CHECK(curve.selective[0] == 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(std::isfinite(curve.random[i]));
    CHECK(curve.random[i] >= -1.0);
    CHECK(curve.selective[i] >= -1.0);
  }
  const auto again = degrade_experiment(student, teacher, probe, corpus, dc);
  CHECK(again.random == curve.random);
  CHECK(again.selective == curve.selective);

  dc.selector = DegradeSelector::kActual;
  CHECK_NOTHROW(degrade_experiment(student, teacher, probe, corpus, dc));

  const auto csv = degrade_csv(curve);
  CHECK(csv.rfind("percentage,random,selective\n", 0) == 0);
  CHECK(count_lines(csv) == 7);

  DegradeConfig bad;
  bad.percentages = {0.5, 1.0};
  CHECK_THROWS(degrade_experiment(student, teacher, probe, corpus, bad));
  bad.percentages = {0.3, 0.2};
  CHECK_THROWS(degrade_experiment(student, teacher, probe, corpus, bad));
}

TEST_CASE("ranking quality") {
  Rng rng(9);
  const auto corpus = labelled_corpus(rng, 6, true);
  const auto student = ModelState<float>::init(small_model(), Role::kStudent, 5);
  const auto teacher = student.make_teacher();
  const auto r = ranking_quality(student, teacher, corpus, 1);
  std::size_t half = 0;
  for (const auto& s : corpus) half += std::size_t(s.features.rows() / 2);
  CHECK(r.frames == half);
  CHECK(r.predicted.size() == half);
  CHECK(r.tau == doctest::Approx(kendall_tau_b(r.predicted, r.actual)));
  CHECK(ranking_quality(student, teacher, corpus, 1).tau == r.tau);
}

TEST_CASE("loss landscape report") {
  const float nan = std::nanf("");
  const std::vector<std::vector<float>> rows{{1.5f, nan, 2.0f}, {}, {nan, 0.5f, nan}};
  const auto rep = loss_landscape_report(rows, {1, 0, 1});
  CHECK(rep.unseen_epochs == std::vector<int>{1});
  std::istringstream in(rep.csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "epoch,seen,f0,f1,f2");
  CHECK(lines[1] == "0,1,1.5,,2");
  CHECK(lines[2] == "1,0,,,");
  CHECK(lines[3] == "2,1,,0.5,");
}

TEST_CASE("mask report") {
  Rng rng(10);
  const auto corpus = labelled_corpus(rng, 6, true);
  const auto teacher = ModelState<float>::init(small_model(), Role::kTeacher, 6);
  MaskConfig mc;
  mc.total_epochs = 10;
  mc.mask_length = 2;
  const auto rows = mask_report(teacher, corpus, mc, 10, 4, 1);
  CHECK(rows.size() == 40);
  for (const auto& r : rows) {
    CHECK(r.report.selective_count + r.report.random_count == r.report.num_mask);
    CHECK(r.report.final_cardinality <= r.length);
  }
  for (const auto& r : rows)
    if (r.epoch == 9) CHECK(r.report.random_count == 0);
  const auto csv = mask_report_csv(rows);
  CHECK(csv.rfind("epoch,row,num_mask,selective_count,random_count,final_cardinality,clamp_flag\n", 0) == 0);
  CHECK(count_lines(csv) == 41);
}
