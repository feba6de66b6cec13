#include "ehmam/frontend.hpp"

#include <cmath>
#include <string>

#include "ehmam/errors.hpp"
#include "ehmam/rng.hpp"

namespace ehmam {

int feature_dim(const FrontendConfig& cfg) {
  if (cfg.mode == FrontendConfig::Mode::kPassthrough) return -1;
  if (cfg.layers.empty()) throw ConfigError("frontend: no conv layers");
  return cfg.layers.back().channels;
}

int receptive_field(const FrontendConfig& cfg) {
  int rf = 1;
  int jump = 1;
  for (const auto& l : cfg.layers) {
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return rf;
}

int total_stride(const FrontendConfig& cfg) {
  int s = 1;
  for (const auto& l : cfg.layers) s *= l.stride;
  return s;
}

int frame_count(std::int64_t num_samples, const FrontendConfig& cfg) {
  std::int64_t len = num_samples;
  for (const auto& l : cfg.layers) {
    if (len < l.kernel) return 0;
    len = (len - l.kernel) / l.stride + 1;
  }
  return static_cast<int>(len);
}

Frontend::Frontend(FrontendConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.mode == FrontendConfig::Mode::kConv) {
    if (cfg_.layers.empty()) throw ConfigError("frontend: no conv layers");
    for (const auto& l : cfg_.layers) {
      if (l.kernel < 1 || l.stride < 1 || l.channels < 1) {
        throw ConfigError("frontend: kernel, stride and channels must be >= 1");
      }
    }
  }
}

std::vector<Eigen::MatrixXf> Frontend::layer_weights(int sample_rate) const {
  std::vector<Eigen::MatrixXf> out;
  Rng rng(cfg_.seed);
  int in_ch = 1;
  for (std::size_t li = 0; li < cfg_.layers.size(); ++li) {
    const auto& l = cfg_.layers[li];
    Eigen::MatrixXf w = Eigen::MatrixXf::Zero(l.channels, in_ch * l.kernel);
    if (li == 0) {
      // Log-spaced cosine filter bank between 80 Hz and 0.45 * sample_rate.
      const double lo = 80.0;
      const double hi = 0.45 * sample_rate;
      for (int c = 0; c < l.channels; ++c) {
        const double frac = l.channels > 1 ? double(c) / (l.channels - 1) : 0.0;
        const double f = lo * std::pow(hi / lo, frac);
        double norm = 0.0;
        for (int t = 0; t < l.kernel; ++t) {
          const double hann =
              l.kernel > 1 ? 0.5 - 0.5 * std::cos(2.0 * M_PI * t / (l.kernel - 1)) : 1.0;
          const double v = hann * std::cos(2.0 * M_PI * f * t / sample_rate);
          w(c, t) = static_cast<float>(v);
          norm += v * v;
        }
        if (norm > 0) w.row(c) /= static_cast<float>(std::sqrt(norm));
      }
    } else {
      const double mix = 0.05 / std::sqrt(double(in_ch) * l.kernel);
      for (int o = 0; o < l.channels; ++o) {
        for (int i = 0; i < in_ch; ++i) {
          for (int t = 0; t < l.kernel; ++t) {
            double v = rng.normal() * mix;
            if (o % in_ch == i) v += 1.0 / l.kernel;
            w(o, i * l.kernel + t) = static_cast<float>(v);
          }
        }
      }
    }
    out.push_back(std::move(w));
    in_ch = l.channels;
  }
  return out;
}

FeatureMatrix Frontend::extract(const Utterance& utt) const {
  if (cfg_.mode == FrontendConfig::Mode::kPassthrough) {
    if (!utt.features) {
      throw ContractError("frontend: passthrough mode needs precomputed features");
    }
    return *utt.features;
  }
  const int rf = receptive_field(cfg_);
  if (static_cast<std::int64_t>(utt.samples.size()) < rf) {
    throw InputTooShortError("frontend: utterance has " + std::to_string(utt.samples.size()) +
                             " samples, receptive field is " + std::to_string(rf));
  }
  const auto weights = layer_weights(utt.sample_rate);

  // Activations are channels x time.
  Eigen::MatrixXf x = Eigen::Map<const Eigen::RowVectorXf>(
      utt.samples.data(), static_cast<Eigen::Index>(utt.samples.size()));
  for (std::size_t li = 0; li < cfg_.layers.size(); ++li) {
    const auto& l = cfg_.layers[li];
    const Eigen::Index in_ch = x.rows();
    const Eigen::Index out_len = (x.cols() - l.kernel) / l.stride + 1;
    Eigen::MatrixXf patches(in_ch * l.kernel, out_len);
    for (Eigen::Index n = 0; n < out_len; ++n) {
      for (Eigen::Index i = 0; i < in_ch; ++i) {
        patches.block(i * l.kernel, n, l.kernel, 1) =
            x.block(i, n * l.stride, 1, l.kernel).transpose();
      }
    }
    x = (weights[li] * patches).cwiseAbs();
  }
  FeatureMatrix feats = x.transpose();
  feats = (feats.array() * cfg_.compress_gain).log1p().matrix();
  return feats;
}

FeatureMatrix extract_features(const Utterance& utt, const FrontendConfig& cfg) {
  return Frontend(cfg).extract(utt);
}

}  // namespace ehmam
