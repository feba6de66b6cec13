#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

namespace ehmam {

// Row-major frames x channels. Rows are time steps.
using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Utterance {
  std::vector<float> samples;
  int sample_rate = 16000;
  // One unit id per output frame of the frontend, when known.
  std::optional<std::vector<std::int32_t>> frame_labels;
  // Precomputed N x d features; consumed by the passthrough frontend.
  std::optional<FeatureMatrix> features;
};

struct ConvLayerSpec {
  int kernel = 1;
  int stride = 1;
  int channels = 1;
  bool operator==(const ConvLayerSpec&) const = default;
};

// Fixed (non-trainable) strided convolution stack turning waveforms into
// frame features. Layer one is a Hann-windowed cosine filter bank followed by
// rectification; later layers are near-identity channel smoothers with a
// small seeded mixing term. Output is log-compressed.
struct FrontendConfig {
  enum class Mode { kConv, kPassthrough };
  Mode mode = Mode::kConv;
  std::vector<ConvLayerSpec> layers = {{32, 8, 32}, {5, 5, 32}, {4, 2, 32}};
  std::uint64_t seed = 1234;
  float compress_gain = 10.0f;
  bool operator==(const FrontendConfig&) const = default;
};

// Output feature dimension (channels of the last layer).
int feature_dim(const FrontendConfig& cfg);
// Samples covered by one output frame.
int receptive_field(const FrontendConfig& cfg);
// Product of strides: sample distance between adjacent frames.
int total_stride(const FrontendConfig& cfg);
// Frames produced for `num_samples` inputs; 0 if shorter than the receptive field.
int frame_count(std::int64_t num_samples, const FrontendConfig& cfg);

class Frontend {
 public:
  explicit Frontend(FrontendConfig cfg);

  FeatureMatrix extract(const Utterance& utt) const;
  const FrontendConfig& config() const { return cfg_; }

 private:
  FrontendConfig cfg_;
  // weights_[l] is out x (in * kernel), row-major over (in, tap).
  std::vector<Eigen::MatrixXf> layer_weights(int sample_rate) const;
};

FeatureMatrix extract_features(const Utterance& utt, const FrontendConfig& cfg);

}  // namespace ehmam
