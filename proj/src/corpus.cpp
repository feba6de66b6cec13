#include "ehmam/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ehmam/errors.hpp"
#include "ehmam/rng.hpp"

namespace ehmam {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (num_utterances < 1) throw ConfigError("synth: num_utterances must be >= 1");
  if (segments_per_utterance < 1) throw ConfigError("synth: segments_per_utterance must be >= 1");
  if (codebook_size < 2) throw ConfigError("synth: codebook_size must be >= 2");
  if (segment_len_min < 1 || segment_len_max < segment_len_min) {
    throw ConfigError("synth: segment length range must be positive and non-empty");
  }
  if (sample_rate < 1) throw ConfigError("synth: sample_rate must be positive");
}

namespace {

struct UnitTemplate {
  std::vector<double> freqs;
  std::vector<double> amps;
  double noise_pole = 0.5;
  double noise_gain = 0.1;
};

std::vector<UnitTemplate> make_codebook(const SynthConfig& cfg) {
  Rng rng(cfg.codebook_seed);
  std::vector<UnitTemplate> units(static_cast<std::size_t>(cfg.codebook_size));
  const double fmax = 0.4 * cfg.sample_rate;
  for (auto& u : units) {
    const int n_sines = rng.uniform() < 0.5 ? 2 : 3;
    for (int i = 0; i < n_sines; ++i) {
      u.freqs.push_back(150.0 * std::pow(fmax / 150.0, rng.uniform()));
      u.amps.push_back(0.3 + 0.7 * rng.uniform());
    }
    u.noise_pole = 0.2 + 0.75 * rng.uniform();
    u.noise_gain = 0.05 + 0.25 * rng.uniform();
  }
  return units;
}

}  // namespace

std::vector<Utterance> generate_synthetic(const SynthConfig& cfg, const FrontendConfig& frontend) {
  cfg.validate();
  const auto units = make_codebook(cfg);
  Rng rng(cfg.seed);
  const int hop = total_stride(frontend);
  const int rf = receptive_field(frontend);

  std::vector<Utterance> out;
  out.reserve(static_cast<std::size_t>(cfg.num_utterances));
  for (int u = 0; u < cfg.num_utterances; ++u) {
    Utterance utt;
    utt.sample_rate = cfg.sample_rate;
    std::vector<int> sample_unit;
    int prev = -1;
    double noise_state = 0.0;
    for (int s = 0; s < cfg.segments_per_utterance; ++s) {
      int unit = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.codebook_size)));
      if (unit == prev) unit = (unit + 1) % cfg.codebook_size;
      prev = unit;
      const auto& tmpl = units[static_cast<std::size_t>(unit)];
      const int len = cfg.segment_len_min +
                      static_cast<int>(rng.below(static_cast<std::uint64_t>(
                          cfg.segment_len_max - cfg.segment_len_min + 1)));
      const double gain = 0.5 + 0.5 * rng.uniform();
      std::vector<double> phase(tmpl.freqs.size());
      std::vector<double> freq(tmpl.freqs.size());
      for (std::size_t i = 0; i < phase.size(); ++i) {
        phase[i] = 2.0 * M_PI * rng.uniform();
        freq[i] = tmpl.freqs[i] * (0.97 + 0.06 * rng.uniform());
      }
      for (int t = 0; t < len; ++t) {
        double v = 0.0;
        for (std::size_t i = 0; i < freq.size(); ++i) {
          v += tmpl.amps[i] * std::sin(2.0 * M_PI * freq[i] * t / cfg.sample_rate + phase[i]);
        }
        noise_state = tmpl.noise_pole * noise_state + (1.0 - tmpl.noise_pole) * (2.0 * rng.uniform() - 1.0);
        v = gain * (v / static_cast<double>(freq.size()) + tmpl.noise_gain * noise_state * 4.0);
        utt.samples.push_back(static_cast<float>(v));
        sample_unit.push_back(unit);
      }
    }
    float peak = 0.0f;
    for (float v : utt.samples) peak = std::max(peak, std::abs(v));
    if (peak > 0.9f) {
      const float scale = 0.9f / peak;
      for (float& v : utt.samples) v *= scale;
    }
    if (frontend.mode == FrontendConfig::Mode::kConv) {
      const int n_frames = frame_count(static_cast<std::int64_t>(utt.samples.size()), frontend);
      std::vector<std::int32_t> labels(static_cast<std::size_t>(n_frames));
      for (int f = 0; f < n_frames; ++f) {
        const std::size_t center = std::min<std::size_t>(
            static_cast<std::size_t>(f) * hop + rf / 2, sample_unit.size() - 1);
        labels[static_cast<std::size_t>(f)] = sample_unit[center];
      }
      utt.frame_labels = std::move(labels);
    }
    out.push_back(std::move(utt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// WAV

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace

Utterance load_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError(WavErrorCode::kMissingFile, "wav: cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  const auto corrupt = [&](const std::string& why) {
    return WavError(WavErrorCode::kCorruptHeader, "wav: " + why + " in " + path.string());
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw corrupt("missing RIFF/WAVE signature");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = read_u32(chunk + 4);
    if (pos + 8 + len > bytes.size()) {
      // Tolerate a data chunk whose declared size overruns the file.
      if (std::memcmp(chunk, "data", 4) == 0) {
        data = chunk + 8;
        data_len = bytes.size() - pos - 8;
        break;
      }
      throw corrupt("chunk overruns file");
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw corrupt("short fmt chunk");
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      if (format == 0xFFFE) {
        if (len < 40) throw corrupt("short extensible fmt chunk");
        format = read_u16(chunk + 8 + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1u);
  }
  if (!have_fmt) throw corrupt("missing fmt chunk");
  if (data == nullptr) throw corrupt("missing data chunk");
  if (channels == 0 || rate == 0) throw corrupt("zero channels or sample rate");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) {
    throw WavError(WavErrorCode::kUnsupportedEncoding,
                   "wav: unsupported encoding (format " + std::to_string(format) + ", " +
                       std::to_string(bits) + " bits) in " + path.string());
  }
  const std::size_t frame_bytes = std::size_t(channels) * (bits / 8);
  const std::size_t n = data_len / frame_bytes;
  Utterance utt;
  utt.sample_rate = static_cast<int>(rate);
  utt.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + i * frame_bytes + c * (bits / 8);
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        float v;
        std::memcpy(&v, p, 4);
        acc += v;
      }
    }
    utt.samples[i] = static_cast<float>(acc / channels);
  }
  return utt;
}

void write_wav(const fs::path& path, const Utterance& utt) {
  std::string out;
  const auto n = static_cast<std::uint32_t>(utt.samples.size());
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(utt.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(utt.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (float v : utt.samples) {
    const double scaled = std::nearbyint(static_cast<double>(v) * 32768.0);
    const auto q = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    put_u16(out, static_cast<std::uint16_t>(q));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("wav: cannot write", path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("wav: write failed", path.string());
}

// ---------------------------------------------------------------------------
// Binary utterance files

namespace {

constexpr char kUttMagic[4] = {'E', 'H', 'U', 'T'};
constexpr std::uint32_t kUttVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is, const fs::path& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("utterance: truncated file", path.string());
  return v;
}

}  // namespace

void save_utterance(const fs::path& path, const Utterance& utt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("utterance: cannot write", path.string());
  os.write(kUttMagic, 4);
  write_pod(os, kUttVersion);
  write_pod(os, static_cast<std::uint32_t>(utt.sample_rate));
  write_pod(os, static_cast<std::uint64_t>(utt.samples.size()));
  os.write(reinterpret_cast<const char*>(utt.samples.data()),
           static_cast<std::streamsize>(utt.samples.size() * sizeof(float)));
  const std::uint64_t n_labels = utt.frame_labels ? utt.frame_labels->size() : 0;
  write_pod(os, static_cast<std::uint8_t>(utt.frame_labels ? 1 : 0));
  write_pod(os, n_labels);
  if (utt.frame_labels) {
    os.write(reinterpret_cast<const char*>(utt.frame_labels->data()),
             static_cast<std::streamsize>(n_labels * sizeof(std::int32_t)));
  }
  if (!os) throw IoError("utterance: write failed", path.string());
}

Utterance load_utterance(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("utterance: cannot open", path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kUttMagic, 4) != 0) {
    throw IoError("utterance: bad magic", path.string());
  }
  if (read_pod<std::uint32_t>(is, path) != kUttVersion) {
    throw IoError("utterance: unsupported version", path.string());
  }
  Utterance utt;
  utt.sample_rate = static_cast<int>(read_pod<std::uint32_t>(is, path));
  const auto n = read_pod<std::uint64_t>(is, path);
  utt.samples.resize(n);
  is.read(reinterpret_cast<char*>(utt.samples.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw IoError("utterance: truncated samples", path.string());
  const auto has_labels = read_pod<std::uint8_t>(is, path);
  const auto n_labels = read_pod<std::uint64_t>(is, path);
  if (has_labels) {
    std::vector<std::int32_t> labels(n_labels);
    is.read(reinterpret_cast<char*>(labels.data()),
            static_cast<std::streamsize>(n_labels * sizeof(std::int32_t)));
    if (!is) throw IoError("utterance: truncated labels", path.string());
    utt.frame_labels = std::move(labels);
  }
  return utt;
}

fs::path write_corpus(const fs::path& dir, const std::vector<Utterance>& utts) {
  fs::create_directories(dir);
  const fs::path manifest = dir / "manifest.txt";
  std::ofstream m(manifest);
  if (!m) throw IoError("corpus: cannot write manifest", manifest.string());
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const std::string name = "utt" + std::to_string(i) + ".bin";
    save_utterance(dir / name, utts[i]);
    m << name << "\n";
  }
  return manifest;
}

std::vector<Utterance> read_manifest(const fs::path& manifest) {
  std::ifstream m(manifest);
  if (!m) throw IoError("corpus: cannot open manifest", manifest.string());
  std::vector<Utterance> out;
  std::string line;
  while (std::getline(m, line)) {
    if (line.empty()) continue;
    fs::path p(line);
    if (p.is_relative()) p = manifest.parent_path() / p;
    out.push_back(p.extension() == ".wav" ? load_wav(p) : load_utterance(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

FeatureSequence featurize(const Utterance& utt, const Frontend& frontend) {
  FeatureSequence seq;
  seq.features = frontend.extract(utt);
  if (utt.frame_labels) {
    if (static_cast<Eigen::Index>(utt.frame_labels->size()) != seq.features.rows()) {
      throw ContractError("featurize: " + std::to_string(utt.frame_labels->size()) +
                          " labels for " + std::to_string(seq.features.rows()) + " frames");
    }
    seq.labels = *utt.frame_labels;
  }
  if (!seq.features.allFinite()) throw NumericalError("featurize: non-finite features");
  return seq;
}

FrameBatch make_batch(const std::vector<const FeatureSequence*>& seqs) {
  if (seqs.empty()) throw ContractError("make_batch: empty input");
  FrameBatch fb;
  fb.batch = static_cast<int>(seqs.size());
  fb.dim = static_cast<int>(seqs.front()->features.cols());
  bool labeled = true;
  for (const auto* s : seqs) {
    if (s->features.cols() != fb.dim) throw ContractError("make_batch: feature dims differ");
    fb.frames = std::max(fb.frames, static_cast<int>(s->features.rows()));
    labeled = labeled && !s->labels.empty();
  }
  fb.features.assign(std::size_t(fb.batch) * fb.frames * fb.dim, 0.0f);
  fb.valid.assign(std::size_t(fb.batch) * fb.frames, 0);
  fb.lengths.resize(seqs.size());
  if (labeled) fb.labels.assign(std::size_t(fb.batch) * fb.frames, -1);
  for (int b = 0; b < fb.batch; ++b) {
    const auto& s = *seqs[static_cast<std::size_t>(b)];
    const int n = static_cast<int>(s.features.rows());
    fb.lengths[static_cast<std::size_t>(b)] = n;
    fb.row(b).topRows(n) = s.features;
    for (int t = 0; t < n; ++t) {
      fb.valid[std::size_t(b) * fb.frames + t] = 1;
      if (labeled) fb.labels[std::size_t(b) * fb.frames + t] = s.labels[static_cast<std::size_t>(t)];
    }
  }
  return fb;
}

FrameBatch make_batch(const std::vector<Utterance>& utts, const FrontendConfig& frontend) {
  if (utts.empty()) throw ContractError("make_batch: empty input");
  const Frontend fe(frontend);
  std::vector<FeatureSequence> seqs;
  seqs.reserve(utts.size());
  for (const auto& u : utts) seqs.push_back(featurize(u, fe));
  std::vector<const FeatureSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return make_batch(ptrs);
}

}  // namespace ehmam
