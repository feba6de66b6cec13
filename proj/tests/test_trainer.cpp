#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "ehmam/trainer.hpp"

using namespace ehmam;
namespace fs = std::filesystem;

namespace {

std::vector<FeatureSequence> small_corpus(int n, std::uint64_t seed) {
  SynthConfig sc;
  sc.num_utterances = n;
  sc.seed = seed;
  sc.segments_per_utterance = 3;
  const FrontendConfig fe;
  const Frontend frontend(fe);
  std::vector<FeatureSequence> out;
  for (const auto& u : generate_synthetic(sc, fe)) out.push_back(featurize(u, frontend));
  return out;
}

ModelConfig small_model() {
  ModelConfig m;
  m.dim = 16;
  m.layers = 2;
  m.heads = 2;
  m.ffn_dim = 32;
  m.conv_layers = 1;
  m.layers_to_average = 2;
  return m;
}

TrainConfig small_train(std::int64_t steps) {
  TrainConfig t;
  t.total_steps = steps;
  t.warmup_steps = steps / 10;
  t.batch_size = 4;
  t.mask.total_epochs = 5;
  t.ema = {0.9, 0.99, 20};
  t.seed = 3;
  return t;
}

std::string stream(const std::vector<TrainRecord>& rs) {
  std::string s;
  for (const auto& r : rs) s += to_json_line(r) + "\n";
  return s;
}

// Bitwise, so NaN cells compare equal.
bool same_rows(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(float)) != 0) return false;
  }
  return true;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / "ehmam_test_trainer" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.optimizer.lr = 1e-3;
  c.warmup_steps = 100;
  c.total_steps = 100000;
  CHECK(lr_at(c, 0) == 0.0);
  CHECK(lr_at(c, 50) == doctest::Approx(5e-4));
  CHECK(lr_at(c, 100) == 1e-3);
  const double mid = lr_at(c, (100 + 100000) / 2);
  CHECK(std::abs(mid - 5e-4) / 5e-4 < 0.01);
  CHECK(lr_at(c, 100000) == doctest::Approx(0.0).epsilon(1e-12));
  double prev = 1.0;
  for (std::int64_t s = 100; s <= 100000; s += 97) {
    REQUIRE(lr_at(c, s) <= prev);
    prev = lr_at(c, s);
  }
}

TEST_CASE("epoch slices") {
  TrainConfig c;
  c.total_steps = 100;
  c.mask.total_epochs = 30;
  CHECK(epoch_of(c, 0) == 0);
  CHECK(epoch_of(c, 99) == 29);
  int prev = 0;
  std::vector<int> counts(30, 0);
  for (int s = 0; s < 100; ++s) {
    const int e = epoch_of(c, s);
    REQUIRE(e >= prev);
    prev = e;
    ++counts[std::size_t(e)];
  }
  for (int n : counts) CHECK(n >= 3);
}

TEST_CASE("train config validation") {
  auto c = small_train(10);
  c.warmup_steps = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_train(10);
  c.objective.alpha = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_train(10);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_train(0);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("zero steps returns the initial states") {
  const auto corpus = small_corpus(4, 1);
  const auto cfg = small_train(0);
  const auto res = pretrain(corpus, small_model(), cfg);
  CHECK(res.metrics.empty());
  CHECK(res.state.step == 0);
  const auto fresh = TrainState::fresh(small_model(), cfg, corpus.size());
  CHECK(fingerprint(res.state.student.params) == fingerprint(fresh.student.params));
  CHECK(fingerprint(res.state.teacher.params) == fingerprint(fresh.teacher.params));
  CHECK_THROWS_AS(pretrain({}, small_model(), cfg), ContractError);
}

TEST_CASE("identical seeds give identical metric streams") {
  const auto corpus = small_corpus(10, 2);
  const auto cfg = small_train(50);
  const auto a = pretrain(corpus, small_model(), cfg);
  const auto b = pretrain(corpus, small_model(), cfg);
  REQUIRE(a.metrics.size() == 50);
  CHECK(stream(a.metrics) == stream(b.metrics));
  CHECK(fingerprint(a.state.student.params) == fingerprint(b.state.student.params));
  auto other = cfg;
  other.seed = 4;
  CHECK(stream(pretrain(corpus, small_model(), other).metrics) != stream(a.metrics));
  for (const auto& r : a.metrics) {
    CHECK(std::isfinite(r.joint_loss));
    CHECK(r.wall_ms == 0.0);
    CHECK((r.selective_fraction >= 0.0 && r.selective_fraction <= 1.0));
  }
}

TEST_CASE("resume reproduces the uninterrupted run") {
  const auto corpus = small_corpus(10, 3);
  auto cfg = small_train(40);
  cfg.checkpoint_every = 10;
  const auto dir = scratch("resume");
  PretrainHooks straight_hooks;
  straight_hooks.checkpoint_dir = dir;
  const auto straight = pretrain(corpus, small_model(), cfg, straight_hooks);
  CHECK(fs::exists(dir / "step_20.bin"));
  CHECK(fs::exists(dir / "final.bin"));

  const auto dir2 = scratch("resume_split");
  PretrainHooks first;
  first.checkpoint_dir = dir2;
  first.stop_after = 17;
  const auto part = pretrain(corpus, small_model(), cfg, first);
  CHECK(part.metrics.size() == 17);
  REQUIRE(fs::exists(dir2 / "step_17.bin"));
  auto loaded = TrainState::load(dir2 / "step_17.bin", small_model(), cfg);
  CHECK(loaded.step == 17);
  const auto rest = pretrain(corpus, small_model(), cfg, {}, std::move(loaded));
  auto joined = part.metrics;
  joined.insert(joined.end(), rest.metrics.begin(), rest.metrics.end());
  CHECK(stream(joined) == stream(straight.metrics));
  CHECK(fingerprint(rest.state.teacher.params) == fingerprint(straight.state.teacher.params));
  CHECK(same_rows(rest.state.landscape, straight.state.landscape));
  CHECK(rest.state.landscape_seen == straight.state.landscape_seen);
}

TEST_CASE("frozen teacher") {
  const auto corpus = small_corpus(6, 4);
  auto cfg = small_train(12);
  cfg.ema = {1.0, 1.0, 1};
  const auto fresh = TrainState::fresh(small_model(), cfg, corpus.size());
  const auto res = pretrain(corpus, small_model(), cfg);
  CHECK(fingerprint(res.state.teacher.params) == fingerprint(fresh.teacher.params));
  CHECK(fingerprint(res.state.student.params) != fingerprint(fresh.student.params));
}

TEST_CASE("teacher moves only through the moving average") {
  const auto corpus = small_corpus(6, 5);
  const auto cfg = small_train(10);
  auto st = TrainState::fresh(small_model(), cfg, corpus.size());
  for (std::int64_t step = 0; step < 10; ++step) {
    std::vector<const FeatureSequence*> seqs;
    for (int k = 0; k < cfg.batch_size; ++k) seqs.push_back(&corpus[std::size_t((step + k) % 6)]);
    const auto fb = make_batch(seqs);
    const auto teacher_before = st.teacher;
    std::uint64_t seen = 0;
    const TeacherHook hook = [&](std::int64_t s, const ModelState<float>& t) {
      CHECK(s == step);
      seen = fingerprint(t.params);
    };
    train_step(st.student, st.teacher, st.adam, fb, cfg, epoch_of(cfg, step), step, st.mask_rng, hook);
    // Masking saw the teacher as left by the previous step's update.
    CHECK(seen == fingerprint(teacher_before.params));
    auto expect = teacher_before;
    ema_update(expect, st.student, decay_at(cfg.ema, step));
    REQUIRE(fingerprint(expect.params) == fingerprint(st.teacher.params));
  }
}

TEST_CASE("alpha zero trains on reconstruction alone") {
  const auto corpus = small_corpus(6, 6);
  auto cfg = small_train(4);
  cfg.objective.alpha = 0.0;
  const auto fresh = TrainState::fresh(small_model(), cfg, corpus.size());
  const auto res = pretrain(corpus, small_model(), cfg);
  for (const auto& r : res.metrics) CHECK(r.joint_loss == r.rec_loss);
  CHECK(fingerprint(res.state.teacher.params) != fingerprint(fresh.teacher.params));
  // The predictor gets no gradient, so only weight decay moves its matrices.
  const auto& P = res.state.student.layout.predictor;
  const auto& b0 = fresh.student.params[P.head_b].data;
  CHECK(res.state.student.params[P.head_b].data == b0);
}

TEST_CASE("selective share follows the curriculum") {
  // Equal-length rows so every row gets the same block budget.
  std::vector<FeatureSequence> corpus(8);
  Rng rng(7);
  for (auto& s : corpus) {
    s.features = FeatureMatrix(50, 32);
    for (int r = 0; r < 50; ++r)
      for (int c = 0; c < 32; ++c) s.features(r, c) = float(rng.normal());
  }
  auto cfg = small_train(20);
  cfg.mask.total_epochs = 10;
  const auto res = pretrain(corpus, small_model(), cfg);
  double prev = 0.0;
  for (const auto& r : res.metrics) {
    REQUIRE(r.selective_fraction >= prev);
    prev = r.selective_fraction;
    const auto split = schedule_split(5, r.epoch, 10);
    REQUIRE(r.selective_fraction == double(split.selective) / 5.0);
  }
  CHECK(res.metrics.back().selective_fraction == 1.0);
}

TEST_CASE("landscape rows are recorded per epoch") {
  const auto corpus = small_corpus(6, 8);
  auto cfg = small_train(20);
  cfg.track_utterance = 2;
  const auto res = pretrain(corpus, small_model(), cfg);
  int filled = 0;
  for (std::size_t e = 0; e < res.state.landscape.size(); ++e) {
    if (!res.state.landscape_seen[e]) continue;
    ++filled;
    CHECK(res.state.landscape[e].size() == std::size_t(corpus[2].features.rows()));
  }
  CHECK(filled >= 1);
}

TEST_CASE("checkpoint of an incompatible model is rejected") {
  const auto corpus = small_corpus(4, 9);
  const auto cfg = small_train(2);
  const auto dir = scratch("incompat");
  PretrainHooks h;
  h.checkpoint_dir = dir;
  pretrain(corpus, small_model(), cfg, h);
  auto other = small_model();
  other.dim = 24;
  CHECK_THROWS_AS(TrainState::load(dir / "final.bin", other, cfg), ContractError);
  CHECK_THROWS_AS(TrainState::load(dir / "nothing.bin", small_model(), cfg), IoError);
}
