#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "ehmam/corpus.hpp"
#include "ehmam/params.hpp"
#include "ehmam/tensor.hpp"

namespace ehmam {

struct ModelConfig {
  int input_dim = 32;  // frontend feature channels
  int dim = 64;
  int layers = 4;  // K
  int heads = 2;
  int ffn_dim = 128;
  int conv_layers = 2;  // D, for both decoder and loss predictor
  int conv_kernel = 7;
  int conv_groups = 1;
  int max_frames = 512;
  int layers_to_average = 4;
  double init_std = 0.02;
  double layer_norm_eps = 1e-5;
  double instance_norm_eps = 1e-5;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  // Full base-model geometry. Documented
  // for reference; far too slow for CPU runs.
  static ModelConfig base_profile(int input_dim);
  // Tiny geometry used for gradient checks.
  static ModelConfig tiny(int input_dim);
};

enum class Role { kStudent, kTeacher };

// Indices into a ParamSet for every named tensor. Pure function of the
// config; the decoder block is present only for students and always last.
struct ParamLayout {
  struct Block {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  struct Conv {
    std::size_t w, b, ln_g, ln_b;
  };
  struct ConvStack {
    std::vector<Conv> convs;
    std::size_t head_w = 0, head_b = 0;
  };
  std::size_t proj_w, proj_b, in_ln_g, in_ln_b, mask_emb, pos;
  std::vector<Block> blocks;
  std::size_t final_ln_g, final_ln_b;
  ConvStack predictor;
  std::optional<ConvStack> decoder;
};

template <typename T>
struct ModelState {
  ModelConfig config;
  Role role = Role::kStudent;
  ParamSet<T> params;
  ParamLayout layout;

  // Truncated-normal linear weights, zero biases, unit layer-norm gains.
  static ModelState init(const ModelConfig& cfg, Role role, std::uint64_t seed);
  // Copy of the shared groups (frontend, encoder, predictor) in the teacher role.
  ModelState make_teacher() const;

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out;
    out.config = config;
    out.role = role;
    out.params = params.template cast<U>();
    out.layout = layout;
    return out;
  }
};

// Builds the parameter layout (and allocates zeroed parameters).
template <typename T>
ParamLayout build_layout(const ModelConfig& cfg, Role role, ParamSet<T>& params);

// Frame positions flagged for mask-embedding substitution (batch x frames).
struct FrameMask {
  int batch = 0;
  int frames = 0;
  std::vector<std::uint8_t> flags;
  bool at(int b, int n) const { return flags[std::size_t(b) * frames + n] != 0; }
};

// per_layer[l] is the residual stream after block l; `final` is the final
// layer norm applied to per_layer.back(). Rows at padded frames are zero.
template <typename T>
struct EncoderOutput {
  Batch3<T> final;
  std::vector<Batch3<T>> per_layer;
  std::vector<int> lengths;
};

template <typename T>
EncoderOutput<T> encode(const ModelState<T>& state, const FrameBatch& batch, const FrameMask* mask = nullptr);

// Per-frame predicted reconstruction loss; -infinity at padded frames.
template <typename T>
LossVector<T> predict_frame_losses(const ModelState<T>& state, const EncoderOutput<T>& enc);

// Student only; throws ContractError on a teacher.
template <typename T>
Batch3<T> decode_reconstruction(const ModelState<T>& state, const EncoderOutput<T>& enc);

// Instance-normalize each of the top `layers_to_average` block outputs over
// valid frames (per sample, per channel), then average them.
template <typename T>
Batch3<T> build_targets(const EncoderOutput<T>& teacher_out, int layers_to_average, double eps = 1e-5);

// Forward pass that retains activations so gradients can be propagated back
// to the parameters. One instance per forward call.
template <typename T>
class StudentGraph {
 public:
  StudentGraph(const ModelState<T>& state, const FrameBatch& batch, const FrameMask* mask);
  ~StudentGraph();
  StudentGraph(const StudentGraph&) = delete;
  StudentGraph& operator=(const StudentGraph&) = delete;

  const EncoderOutput<T>& encoder_output() const;
  // Head outputs, computed on demand from the encoder output.
  const Batch3<T>& reconstruction();
  const LossVector<T>& predicted_losses();

  // Accumulates parameter gradients into `grad` given upstream gradients of
  // a scalar w.r.t. the reconstruction and predicted losses. Either may be
  // null. When `detach_predictor_input` is set the predictor gradient stops
  // at the predictor's input.
  void backward(const Batch3<T>* d_recon, const LossVector<T>* d_predicted,
                bool detach_predictor_input, ParamSet<T>& grad);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ehmam
