#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "ehmam/corpus.hpp"
#include "ehmam/errors.hpp"
#include "ehmam/rng.hpp"

using namespace ehmam;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ehmam_test_corpus";
  fs::create_directories(dir);
  return dir / name;
}

void put_u16(std::string& s, std::uint16_t v) { s.append(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }

// Minimal RIFF writer, independent of write_wav.
std::string wav_bytes(std::uint16_t format, std::uint16_t channels, std::uint32_t rate, std::uint16_t bits,
                      const std::string& payload) {
  std::string s = "RIFF";
  put_u32(s, static_cast<std::uint32_t>(36 + payload.size()));
  s += "WAVEfmt ";
  put_u32(s, 16);
  put_u16(s, format);
  put_u16(s, channels);
  put_u32(s, rate);
  put_u32(s, rate * channels * bits / 8);
  put_u16(s, static_cast<std::uint16_t>(channels * bits / 8));
  put_u16(s, bits);
  s += "data";
  put_u32(s, static_cast<std::uint32_t>(payload.size()));
  return s + payload;
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string pcm16(const std::vector<std::int16_t>& v) {
  return std::string(reinterpret_cast<const char*>(v.data()), v.size() * 2);
}

// Hand decoder: little-endian signed 16-bit / 32768, skipping the 44-byte header.
std::vector<float> hand_decode(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)), {});
  std::vector<float> out;
  for (std::size_t i = 44; i + 1 < b.size(); i += 2) {
    const auto raw = static_cast<std::int16_t>(b[i] | (b[i + 1] << 8));
    out.push_back(static_cast<float>(raw) / 32768.0f);
  }
  return out;
}

WavErrorCode wav_code(const fs::path& p) {
  try {
    load_wav(p);
  } catch (const WavError& e) {
    return e.code();
  }
  FAIL("no WavError");
  return WavErrorCode::kMissingFile;
}

FeatureSequence seq_of(int frames, int dim, float fill) {
  FeatureSequence s;
  s.features = FeatureMatrix::Constant(frames, dim, fill);
  return s;
}

}  // namespace

TEST_CASE("synthetic corpus is deterministic") {
  SynthConfig cfg;
  cfg.num_utterances = 6;
  cfg.seed = 7;
  const FrontendConfig fe;
  const auto a = generate_synthetic(cfg, fe);
  const auto b = generate_synthetic(cfg, fe);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].samples.size() == b[i].samples.size());
    CHECK(std::memcmp(a[i].samples.data(), b[i].samples.data(), a[i].samples.size() * sizeof(float)) == 0);
    CHECK(a[i].frame_labels == b[i].frame_labels);
  }
  cfg.seed = 8;
  CHECK(generate_synthetic(cfg, fe)[0].samples != a[0].samples);
}

TEST_CASE("synthetic config validation") {
  const FrontendConfig fe;
  SynthConfig cfg;
  cfg.codebook_size = 1;
  CHECK_THROWS_AS(generate_synthetic(cfg, fe), ConfigError);
  cfg = SynthConfig{};
  cfg.num_utterances = 0;
  CHECK_THROWS_AS(generate_synthetic(cfg, fe), ConfigError);
  cfg = SynthConfig{};
  cfg.segment_len_min = 500;
  cfg.segment_len_max = 400;
  CHECK_THROWS_AS(generate_synthetic(cfg, fe), ConfigError);
}

TEST_CASE("synthetic labels align with frontend frames") {
  SynthConfig cfg;
  cfg.num_utterances = 10;
  cfg.sample_rate = 8000;
  const FrontendConfig fe;
  const auto utts = generate_synthetic(cfg, fe);
  CHECK(utts.size() == 10);
  for (const auto& u : utts) {
    REQUIRE(u.frame_labels.has_value());
    CHECK(u.sample_rate == 8000);
    CHECK(int(u.frame_labels->size()) == frame_count(std::int64_t(u.samples.size()), fe));
    std::set<int> distinct(u.frame_labels->begin(), u.frame_labels->end());
    CHECK(int(distinct.size()) <= cfg.codebook_size);
    for (int l : distinct) CHECK((l >= 0 && l < cfg.codebook_size));
    for (float s : u.samples) REQUIRE((std::isfinite(s) && s >= -1.0f && s <= 1.0f));
  }
}

TEST_CASE("pcm16 decoding") {
  const auto p = scratch("four.wav");
  dump(p, wav_bytes(1, 1, 16000, 16, pcm16({32767, -32768, 0, 1234})));
  const auto u = load_wav(p);
  CHECK(u.sample_rate == 16000);
  CHECK_FALSE(u.frame_labels.has_value());
  CHECK(u.samples == hand_decode(p));
  CHECK(u.samples[0] == 32767.0f / 32768.0f);
  CHECK(u.samples[1] == -1.0f);

  const auto z = scratch("zeros.wav");
  dump(z, wav_bytes(1, 1, 16000, 16, pcm16(std::vector<std::int16_t>(1600, 0))));
  const auto zu = load_wav(z);
  CHECK(zu.samples.size() == 1600);
  for (float v : zu.samples) CHECK(v == 0.0f);
}

TEST_CASE("stereo and float wav") {
  const auto s = scratch("stereo.wav");
  dump(s, wav_bytes(1, 2, 8000, 16, pcm16({16384, 0, -16384, -16384})));
  const auto u = load_wav(s);
  REQUIRE(u.samples.size() == 2);
  CHECK(u.samples[0] == 0.25f);
  CHECK(u.samples[1] == -0.5f);

  const std::vector<float> fv{0.5f, -0.25f, 1.0f};
  const auto f = scratch("float.wav");
  dump(f, wav_bytes(3, 1, 22050, 32, std::string(reinterpret_cast<const char*>(fv.data()), fv.size() * 4)));
  const auto fu = load_wav(f);
  CHECK(fu.samples == fv);
  CHECK(fu.sample_rate == 22050);
}

TEST_CASE("wav round trip") {
  Rng rng(5);
  std::vector<std::int16_t> raw(500);
  for (auto& v : raw) v = static_cast<std::int16_t>(int(rng.below(65536)) - 32768);
  const auto p = scratch("rt_in.wav");
  dump(p, wav_bytes(1, 1, 16000, 16, pcm16(raw)));
  const auto first = load_wav(p);
  const auto q = scratch("rt_out.wav");
  write_wav(q, first);
  const auto second = load_wav(q);
  CHECK(second.samples == first.samples);
  CHECK(second.sample_rate == first.sample_rate);
}

TEST_CASE("wav errors are distinct") {
  CHECK(wav_code(scratch("does_not_exist.wav")) == WavErrorCode::kMissingFile);
  const auto bad = scratch("bad.wav");
  dump(bad, "RIFX0000WAVEjunk");
  CHECK(wav_code(bad) == WavErrorCode::kCorruptHeader);
  const auto b24 = scratch("b24.wav");
  dump(b24, wav_bytes(1, 1, 16000, 24, std::string(6, '\0')));
  CHECK(wav_code(b24) == WavErrorCode::kUnsupportedEncoding);
}

TEST_CASE("utterance container and manifest round trip") {
  SynthConfig cfg;
  cfg.num_utterances = 3;
  const auto utts = generate_synthetic(cfg, FrontendConfig{});
  const auto dir = scratch("manifest_dir");
  fs::remove_all(dir);
  const auto manifest = write_corpus(dir, utts);
  const auto back = read_manifest(manifest);
  REQUIRE(back.size() == utts.size());
  for (std::size_t i = 0; i < utts.size(); ++i) {
    CHECK(back[i].samples == utts[i].samples);
    CHECK(back[i].frame_labels == utts[i].frame_labels);
    CHECK(back[i].sample_rate == utts[i].sample_rate);
  }
  CHECK_THROWS_AS(read_manifest(dir / "nope.txt"), IoError);
}

TEST_CASE("make_batch pads on the right") {
  const auto a = seq_of(50, 4, 1.0f), b = seq_of(30, 4, 2.0f);
  const auto fb = make_batch({&a, &b});
  CHECK(fb.batch == 2);
  CHECK(fb.frames == 50);
  CHECK(fb.lengths == std::vector<int>{50, 30});
  for (int n = 0; n < 50; ++n) {
    CHECK(fb.is_valid(0, n));
    CHECK(fb.is_valid(1, n) == (n < 30));
  }
  for (int n = 30; n < 50; ++n)
    for (int c = 0; c < 4; ++c) CHECK(fb.row(1)(n, c) == 0.0f);
  CHECK(fb.row(1)(29, 3) == 2.0f);

  const auto one = make_batch({&a});
  for (auto v : one.valid) CHECK(v == 1);
  CHECK_THROWS_AS(make_batch(std::vector<const FeatureSequence*>{}), ContractError);
}

TEST_CASE("make_batch padding property") {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    const int n = 1 + int(rng.below(4));
    std::vector<FeatureSequence> seqs;
    for (int i = 0; i < n; ++i) seqs.push_back(seq_of(1 + int(rng.below(20)), 3, float(rng.normal())));
    std::vector<const FeatureSequence*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    const auto fb = make_batch(ptrs);
    for (int b = 0; b < n; ++b) {
      int sum = 0;
      for (int k = 0; k < fb.frames; ++k) sum += fb.is_valid(b, k);
      REQUIRE(sum == fb.lengths[std::size_t(b)]);
      REQUIRE(fb.lengths[std::size_t(b)] == seqs[std::size_t(b)].features.rows());
    }
  }
}

TEST_CASE("make_batch from utterances carries labels") {
  SynthConfig cfg;
  cfg.num_utterances = 2;
  const FrontendConfig fe;
  const auto utts = generate_synthetic(cfg, fe);
  const auto fb = make_batch(utts, fe);
  REQUIRE(fb.has_labels());
  for (int b = 0; b < 2; ++b)
    for (int n = 0; n < fb.frames; ++n)
      CHECK((fb.labels[std::size_t(b) * fb.frames + n] == -1) == !fb.is_valid(b, n));
}
