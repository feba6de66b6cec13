#include "ehmam/model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ehmam/rng.hpp"

namespace ehmam {

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kFrontend: return "frontend";
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kPredictor: return "predictor";
    case ParamGroup::kDecoder: return "decoder";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (input_dim < 1 || dim < 1 || ffn_dim < 1) throw ConfigError("model: dimensions must be >= 1");
  if (layers < 1) throw ConfigError("model: need at least one encoder layer");
  if (heads < 1 || dim % heads != 0) throw ConfigError("model: dim must be divisible by heads");
  if (conv_layers < 1) throw ConfigError("model: need at least one conv layer");
  if (conv_kernel < 1) throw ConfigError("model: conv_kernel must be >= 1");
  if (conv_groups < 1 || dim % conv_groups != 0) {
    throw ConfigError("model: dim must be divisible by conv_groups");
  }
  if (max_frames < 1) throw ConfigError("model: max_frames must be >= 1");
  if (layers_to_average < 1 || layers_to_average > layers) {
    throw ConfigError("model: layers_to_average must be in [1, layers]");
  }
  if (!(init_std > 0)) throw ConfigError("model: init_std must be positive");
}

ModelConfig ModelConfig::base_profile(int input_dim) {
  ModelConfig c;
  c.input_dim = input_dim;
  c.dim = 768;
  c.layers = 12;
  c.heads = 12;
  c.ffn_dim = 3072;
  c.conv_layers = 4;
  c.conv_kernel = 7;
  c.conv_groups = 16;
  c.layers_to_average = 8;
  return c;
}

ModelConfig ModelConfig::tiny(int input_dim) {
  ModelConfig c;
  c.input_dim = input_dim;
  c.dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.ffn_dim = 16;
  c.conv_layers = 1;
  c.conv_kernel = 7;
  c.max_frames = 32;
  c.layers_to_average = 2;
  return c;
}

namespace {

ParamLayout::ConvStack add_conv_stack(const ModelConfig& cfg, const std::string& prefix, ParamGroup group,
                                      int head_out, auto& params) {
  ParamLayout::ConvStack st;
  const int d = cfg.dim;
  const int dg = d / cfg.conv_groups;
  for (int j = 0; j < cfg.conv_layers; ++j) {
    const std::string p = prefix + ".conv" + std::to_string(j);
    ParamLayout::Conv c;
    c.w = params.add(p + ".w", {cfg.conv_groups, cfg.conv_kernel * dg, dg}, group);
    c.b = params.add(p + ".b", {d}, group);
    c.ln_g = params.add(p + ".ln.g", {d}, group);
    c.ln_b = params.add(p + ".ln.b", {d}, group);
    st.convs.push_back(c);
  }
  st.head_w = params.add(prefix + ".head.w", {d, head_out}, group);
  st.head_b = params.add(prefix + ".head.b", {head_out}, group);
  return st;
}

}  // namespace

template <typename T>
ParamLayout build_layout(const ModelConfig& cfg, Role role, ParamSet<T>& params) {
  cfg.validate();
  ParamLayout L;
  const int d = cfg.dim;
  const auto F = ParamGroup::kFrontend;
  const auto E = ParamGroup::kEncoder;
  L.proj_w = params.add("frontend.proj.w", {cfg.input_dim, d}, F);
  L.proj_b = params.add("frontend.proj.b", {d}, F);
  L.in_ln_g = params.add("frontend.ln.g", {d}, F);
  L.in_ln_b = params.add("frontend.ln.b", {d}, F);
  L.mask_emb = params.add("frontend.mask_emb", {d}, F);
  L.pos = params.add("encoder.pos", {cfg.max_frames, d}, E);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "encoder.block" + std::to_string(l);
    ParamLayout::Block b;
    b.ln1_g = params.add(p + ".ln1.g", {d}, E);
    b.ln1_b = params.add(p + ".ln1.b", {d}, E);
    b.qkv_w = params.add(p + ".attn.qkv.w", {d, 3 * d}, E);
    b.qkv_b = params.add(p + ".attn.qkv.b", {3 * d}, E);
    b.out_w = params.add(p + ".attn.out.w", {d, d}, E);
    b.out_b = params.add(p + ".attn.out.b", {d}, E);
    b.ln2_g = params.add(p + ".ln2.g", {d}, E);
    b.ln2_b = params.add(p + ".ln2.b", {d}, E);
    b.ff1_w = params.add(p + ".ff1.w", {d, cfg.ffn_dim}, E);
    b.ff1_b = params.add(p + ".ff1.b", {cfg.ffn_dim}, E);
    b.ff2_w = params.add(p + ".ff2.w", {cfg.ffn_dim, d}, E);
    b.ff2_b = params.add(p + ".ff2.b", {d}, E);
    L.blocks.push_back(b);
  }
  L.final_ln_g = params.add("encoder.final_ln.g", {d}, E);
  L.final_ln_b = params.add("encoder.final_ln.b", {d}, E);
  L.predictor = add_conv_stack(cfg, "predictor", ParamGroup::kPredictor, 1, params);
  if (role == Role::kStudent) {
    L.decoder = add_conv_stack(cfg, "decoder", ParamGroup::kDecoder, d, params);
  }
  return L;
}

template <typename T>
ModelState<T> ModelState<T>::init(const ModelConfig& cfg, Role role, std::uint64_t seed) {
  ModelState s;
  s.config = cfg;
  s.role = role;
  s.layout = build_layout(cfg, role, s.params);
  Rng rng(seed);
  for (auto& p : s.params) {
    const bool is_gain = p.name.ends_with(".g");
    const bool is_bias = p.name.ends_with(".b");
    for (auto& v : p.data) {
      if (is_gain) {
        v = T(1);
      } else if (is_bias) {
        v = T(0);
      } else {
        v = static_cast<T>(rng.truncated_normal(cfg.init_std));
      }
    }
  }
  return s;
}

template <typename T>
ModelState<T> ModelState<T>::make_teacher() const {
  ModelState t;
  t.config = config;
  t.role = Role::kTeacher;
  t.layout = build_layout(config, Role::kTeacher, t.params);
  for (std::size_t i = 0; i < t.params.count(); ++i) t.params[i].data = params[i].data;
  return t;
}

// ---------------------------------------------------------------------------
// Primitive ops on one sample (rows = valid frames).

namespace {

template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;
template <typename T>
using CMapV = Eigen::Map<const RowVec<T>>;
template <typename T>
using MapV = Eigen::Map<RowVec<T>>;

template <typename T>
CMapM<T> pmat(const ParamSet<T>& ps, std::size_t i, int rows, int cols) {
  return {ps[i].data.data(), rows, cols};
}
template <typename T>
MapM<T> gmat(ParamSet<T>& ps, std::size_t i, int rows, int cols) {
  return {ps[i].data.data(), rows, cols};
}
template <typename T>
CMapV<T> pvec(const ParamSet<T>& ps, std::size_t i) {
  return {ps[i].data.data(), static_cast<Eigen::Index>(ps[i].size())};
}
template <typename T>
MapV<T> gvec(ParamSet<T>& ps, std::size_t i) {
  return {ps[i].data.data(), static_cast<Eigen::Index>(ps[i].size())};
}

template <typename T>
struct LnCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const CMapV<T>& g, const CMapV<T>& b, T eps, LnCache<T>& c) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  c.xhat.resize(n, d);
  c.rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mu = x.row(r).mean();
    const T var = (x.row(r).array() - mu).square().mean();
    const T rs = T(1) / std::sqrt(var + eps);
    c.rstd(r) = rs;
    c.xhat.row(r) = (x.row(r).array() - mu) * rs;
  }
  Mat<T> y = c.xhat.array().rowwise() * g.array();
  y.array().rowwise() += b.array();
  return y;
}

// Returns dx; accumulates dg, db.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LnCache<T>& c, const CMapV<T>& g, MapV<T> dg, MapV<T> db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  Mat<T> dxhat = dy.array().rowwise() * g.array();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T m1 = dxhat.row(r).mean();
    const T m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
    dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}
template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

template <typename T>
Mat<T> affine(const Mat<T>& x, const CMapM<T>& w, const CMapV<T>& b) {
  Mat<T> y = x * w;
  y.rowwise() += b;
  return y;
}

template <typename T>
struct BlockCache {
  Mat<T> x;
  LnCache<T> ln1;
  Mat<T> a;
  Mat<T> qkv;
  std::vector<Mat<T>> probs;
  Mat<T> attn;
  Mat<T> h;
  LnCache<T> ln2;
  Mat<T> bn;
  Mat<T> f1;
  Mat<T> g;
};

template <typename T>
struct ConvCache {
  Mat<T> x;
  std::vector<Mat<T>> patches;  // per group
  LnCache<T> ln;
  Mat<T> pre_act;
};

template <typename T>
struct ConvStackCache {
  std::vector<ConvCache<T>> layers;
  Mat<T> head_in;
};

// im2col for one channel group with "same" zero padding.
template <typename T>
Mat<T> im2col(const Mat<T>& x, int kernel, int g, int dg) {
  const Eigen::Index n = x.rows();
  const int pad = kernel / 2;
  Mat<T> p = Mat<T>::Zero(n, Eigen::Index(kernel) * dg);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (int tap = 0; tap < kernel; ++tap) {
      const Eigen::Index src = t + tap - pad;
      if (src < 0 || src >= n) continue;
      p.block(t, Eigen::Index(tap) * dg, 1, dg) = x.block(src, Eigen::Index(g) * dg, 1, dg);
    }
  }
  return p;
}

template <typename T>
void col2im_add(const Mat<T>& dp, int kernel, int g, int dg, Mat<T>& dx) {
  const Eigen::Index n = dx.rows();
  const int pad = kernel / 2;
  for (Eigen::Index t = 0; t < n; ++t) {
    for (int tap = 0; tap < kernel; ++tap) {
      const Eigen::Index src = t + tap - pad;
      if (src < 0 || src >= n) continue;
      dx.block(src, Eigen::Index(g) * dg, 1, dg) += dp.block(t, Eigen::Index(tap) * dg, 1, dg);
    }
  }
}

template <typename T>
Mat<T> conv_stack_forward(const ModelConfig& cfg, const ParamSet<T>& ps, const ParamLayout::ConvStack& st,
                          const Mat<T>& input, int head_out, ConvStackCache<T>& cache) {
  const int d = cfg.dim;
  const int groups = cfg.conv_groups;
  const int dg = d / groups;
  const int k = cfg.conv_kernel;
  const T eps = static_cast<T>(cfg.layer_norm_eps);
  Mat<T> x = input;
  cache.layers.clear();
  for (std::size_t j = 0; j < st.convs.size(); ++j) {
    const auto& c = st.convs[j];
    ConvCache<T> cc;
    cc.x = x;
    Mat<T> y(x.rows(), d);
    const T* w = ps[c.w].data.data();
    for (int g = 0; g < groups; ++g) {
      cc.patches.push_back(im2col(x, k, g, dg));
      CMapM<T> wg(w + std::size_t(g) * k * dg * dg, Eigen::Index(k) * dg, dg);
      y.middleCols(Eigen::Index(g) * dg, dg) = cc.patches.back() * wg;
    }
    y.rowwise() += pvec(ps, c.b);
    cc.pre_act = layer_norm(y, pvec(ps, c.ln_g), pvec(ps, c.ln_b), eps, cc.ln);
    Mat<T> out = cc.pre_act.unaryExpr([](T v) { return gelu(v); });
    if (j > 0) out += x;
    x = std::move(out);
    cache.layers.push_back(std::move(cc));
  }
  cache.head_in = x;
  return affine(x, pmat(ps, st.head_w, d, head_out), pvec(ps, st.head_b));
}

template <typename T>
Mat<T> conv_stack_backward(const ModelConfig& cfg, const ParamSet<T>& ps, const ParamLayout::ConvStack& st,
                           const ConvStackCache<T>& cache, const Mat<T>& d_out, int head_out, ParamSet<T>& grad) {
  const int d = cfg.dim;
  const int groups = cfg.conv_groups;
  const int dg = d / groups;
  const int k = cfg.conv_kernel;
  gmat(grad, st.head_w, d, head_out).noalias() += cache.head_in.transpose() * d_out;
  gvec(grad, st.head_b) += d_out.colwise().sum();
  Mat<T> dx = d_out * pmat(ps, st.head_w, d, head_out).transpose();
  for (std::size_t jj = st.convs.size(); jj-- > 0;) {
    const auto& c = st.convs[jj];
    const auto& cc = cache.layers[jj];
    Mat<T> d_in = Mat<T>::Zero(cc.x.rows(), d);
    if (jj > 0) d_in = dx;
    Mat<T> d_pre = dx.array() * cc.pre_act.unaryExpr([](T v) { return gelu_grad(v); }).array();
    Mat<T> dy = layer_norm_backward(d_pre, cc.ln, pvec(ps, c.ln_g), gvec(grad, c.ln_g), gvec(grad, c.ln_b));
    gvec(grad, c.b) += dy.colwise().sum();
    const T* w = ps[c.w].data.data();
    T* gw = grad[c.w].data.data();
    for (int g = 0; g < groups; ++g) {
      CMapM<T> wg(w + std::size_t(g) * k * dg * dg, Eigen::Index(k) * dg, dg);
      MapM<T> gwg(gw + std::size_t(g) * k * dg * dg, Eigen::Index(k) * dg, dg);
      const auto dyg = dy.middleCols(Eigen::Index(g) * dg, dg);
      gwg.noalias() += cc.patches[static_cast<std::size_t>(g)].transpose() * dyg;
      Mat<T> dp = dyg * wg.transpose();
      col2im_add(dp, k, g, dg, d_in);
    }
    dx = std::move(d_in);
  }
  return dx;
}

template <typename T>
struct SampleCache {
  int n = 0;
  Mat<T> z;
  std::vector<std::uint8_t> masked;
  LnCache<T> in_ln;
  std::vector<BlockCache<T>> blocks;
  Mat<T> last;
  LnCache<T> final_ln;
  Mat<T> final;
  ConvStackCache<T> predictor;
  ConvStackCache<T> decoder;
};

template <typename T>
void encode_sample(const ModelState<T>& st, const Mat<T>& z, const std::vector<std::uint8_t>& masked,
                   SampleCache<T>& c, bool keep) {
  const auto& cfg = st.config;
  const auto& ps = st.params;
  const auto& L = st.layout;
  const int d = cfg.dim;
  const int hd = d / cfg.heads;
  const T eps = static_cast<T>(cfg.layer_norm_eps);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto n = z.rows();
  c.n = static_cast<int>(n);
  c.masked = masked;

  Mat<T> x = layer_norm(affine(z, pmat(ps, L.proj_w, cfg.input_dim, d), pvec(ps, L.proj_b)),
                        pvec(ps, L.in_ln_g), pvec(ps, L.in_ln_b), eps, c.in_ln);
  for (Eigen::Index t = 0; t < n; ++t) {
    if (masked[static_cast<std::size_t>(t)]) x.row(t) = pvec(ps, L.mask_emb);
  }
  x += pmat(ps, L.pos, cfg.max_frames, d).topRows(n);
  if (keep) c.z = z;

  c.blocks.resize(L.blocks.size());
  for (std::size_t l = 0; l < L.blocks.size(); ++l) {
    const auto& B = L.blocks[l];
    auto& bc = c.blocks[l];
    bc.x = x;
    bc.a = layer_norm(x, pvec(ps, B.ln1_g), pvec(ps, B.ln1_b), eps, bc.ln1);
    bc.qkv = affine(bc.a, pmat(ps, B.qkv_w, d, 3 * d), pvec(ps, B.qkv_b));
    bc.attn.resize(n, d);
    bc.probs.resize(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      const auto q = bc.qkv.middleCols(Eigen::Index(h) * hd, hd);
      const auto k = bc.qkv.middleCols(Eigen::Index(d) + h * hd, hd);
      const auto v = bc.qkv.middleCols(Eigen::Index(2 * d) + h * hd, hd);
      Mat<T> s = (q * k.transpose()) * scale;
      for (Eigen::Index r = 0; r < n; ++r) {
        const T mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      bc.attn.middleCols(Eigen::Index(h) * hd, hd) = s * v;
      bc.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    bc.h = x + affine(bc.attn, pmat(ps, B.out_w, d, d), pvec(ps, B.out_b));
    bc.bn = layer_norm(bc.h, pvec(ps, B.ln2_g), pvec(ps, B.ln2_b), eps, bc.ln2);
    bc.f1 = affine(bc.bn, pmat(ps, B.ff1_w, d, cfg.ffn_dim), pvec(ps, B.ff1_b));
    bc.g = bc.f1.unaryExpr([](T v) { return gelu(v); });
    x = bc.h + affine(bc.g, pmat(ps, B.ff2_w, cfg.ffn_dim, d), pvec(ps, B.ff2_b));
    if (!keep) {
      bc.probs.clear();
    }
  }
  c.last = x;
  c.final = layer_norm(x, pvec(ps, L.final_ln_g), pvec(ps, L.final_ln_b), eps, c.final_ln);
}

template <typename T>
Mat<T> encode_backward(const ModelState<T>& st, const SampleCache<T>& c, const Mat<T>& d_final, ParamSet<T>& grad) {
  const auto& cfg = st.config;
  const auto& ps = st.params;
  const auto& L = st.layout;
  const int d = cfg.dim;
  const int hd = d / cfg.heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto n = static_cast<Eigen::Index>(c.n);

  Mat<T> dx = layer_norm_backward(d_final, c.final_ln, pvec(ps, L.final_ln_g), gvec(grad, L.final_ln_g),
                                  gvec(grad, L.final_ln_b));
  for (std::size_t l = L.blocks.size(); l-- > 0;) {
    const auto& B = L.blocks[l];
    const auto& bc = c.blocks[l];
    // y = h + ff2(gelu(ff1(ln2(h))))
    Mat<T> dh = dx;
    gmat(grad, B.ff2_w, cfg.ffn_dim, d).noalias() += bc.g.transpose() * dx;
    gvec(grad, B.ff2_b) += dx.colwise().sum();
    Mat<T> dg = dx * pmat(ps, B.ff2_w, cfg.ffn_dim, d).transpose();
    Mat<T> df1 = dg.array() * bc.f1.unaryExpr([](T v) { return gelu_grad(v); }).array();
    gmat(grad, B.ff1_w, d, cfg.ffn_dim).noalias() += bc.bn.transpose() * df1;
    gvec(grad, B.ff1_b) += df1.colwise().sum();
    Mat<T> dbn = df1 * pmat(ps, B.ff1_w, d, cfg.ffn_dim).transpose();
    dh += layer_norm_backward(dbn, bc.ln2, pvec(ps, B.ln2_g), gvec(grad, B.ln2_g), gvec(grad, B.ln2_b));
    // h = x + out(attn(ln1(x)))
    Mat<T> dxin = dh;
    gmat(grad, B.out_w, d, d).noalias() += bc.attn.transpose() * dh;
    gvec(grad, B.out_b) += dh.colwise().sum();
    Mat<T> dattn = dh * pmat(ps, B.out_w, d, d).transpose();
    Mat<T> dqkv(n, 3 * d);
    for (int h = 0; h < cfg.heads; ++h) {
      const auto& p = bc.probs[static_cast<std::size_t>(h)];
      const auto q = bc.qkv.middleCols(Eigen::Index(h) * hd, hd);
      const auto k = bc.qkv.middleCols(Eigen::Index(d) + h * hd, hd);
      const auto v = bc.qkv.middleCols(Eigen::Index(2 * d) + h * hd, hd);
      const auto dout = dattn.middleCols(Eigen::Index(h) * hd, hd);
      Mat<T> dp = dout * v.transpose();
      dqkv.middleCols(Eigen::Index(2 * d) + h * hd, hd) = p.transpose() * dout;
      Mat<T> ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
      ds *= scale;
      dqkv.middleCols(Eigen::Index(h) * hd, hd) = ds * k;
      dqkv.middleCols(Eigen::Index(d) + h * hd, hd) = ds.transpose() * q;
    }
    gmat(grad, B.qkv_w, d, 3 * d).noalias() += bc.a.transpose() * dqkv;
    gvec(grad, B.qkv_b) += dqkv.colwise().sum();
    Mat<T> da = dqkv * pmat(ps, B.qkv_w, d, 3 * d).transpose();
    dxin += layer_norm_backward(da, bc.ln1, pvec(ps, B.ln1_g), gvec(grad, B.ln1_g), gvec(grad, B.ln1_b));
    dx = std::move(dxin);
  }
  gmat(grad, L.pos, cfg.max_frames, d).topRows(n) += dx;
  for (Eigen::Index t = 0; t < n; ++t) {
    if (c.masked[static_cast<std::size_t>(t)]) {
      gvec(grad, L.mask_emb) += dx.row(t);
      dx.row(t).setZero();
    }
  }
  Mat<T> dproj = layer_norm_backward(dx, c.in_ln, pvec(ps, L.in_ln_g), gvec(grad, L.in_ln_g), gvec(grad, L.in_ln_b));
  gmat(grad, L.proj_w, cfg.input_dim, d).noalias() += c.z.transpose() * dproj;
  gvec(grad, L.proj_b) += dproj.colwise().sum();
  return dx;
}

template <typename T>
void check_batch(const ModelState<T>& st, const FrameBatch& batch, const FrameMask* mask) {
  if (batch.dim != st.config.input_dim) {
    throw ContractError("encode: batch feature dim " + std::to_string(batch.dim) + " != model input_dim " +
                        std::to_string(st.config.input_dim));
  }
  if (batch.frames > st.config.max_frames) {
    throw ContractError("encode: " + std::to_string(batch.frames) + " frames exceeds max_frames " +
                        std::to_string(st.config.max_frames));
  }
  if (mask && (mask->batch != batch.batch || mask->frames != batch.frames)) {
    throw ContractError("encode: mask geometry does not match batch");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
struct StudentGraph<T>::Impl {
  const ModelState<T>& state;
  const FrameBatch& batch;
  std::vector<SampleCache<T>> samples;
  EncoderOutput<T> out;
  std::optional<Batch3<T>> recon;
  std::optional<LossVector<T>> predicted;

  Impl(const ModelState<T>& s, const FrameBatch& b, const FrameMask* mask, bool keep) : state(s), batch(b) {
    check_batch(s, b, mask);
    const int d = s.config.dim;
    out.final = Batch3<T>(b.batch, b.frames, d);
    out.per_layer.assign(static_cast<std::size_t>(s.config.layers), Batch3<T>(b.batch, b.frames, d));
    out.lengths = b.lengths;
    samples.resize(static_cast<std::size_t>(b.batch));
    for (int i = 0; i < b.batch; ++i) {
      const int n = b.lengths[static_cast<std::size_t>(i)];
      std::vector<std::uint8_t> masked(static_cast<std::size_t>(n), 0);
      if (mask) {
        for (int t = 0; t < n; ++t) masked[static_cast<std::size_t>(t)] = mask->at(i, t) ? 1 : 0;
      }
      Mat<T> z = b.row(i).topRows(n).template cast<T>();
      auto& c = samples[static_cast<std::size_t>(i)];
      encode_sample(s, z, masked, c, keep);
      out.final.row(i).topRows(n) = c.final;
      for (std::size_t l = 0; l < c.blocks.size(); ++l) {
        const Mat<T>& y = l + 1 < c.blocks.size() ? c.blocks[l + 1].x : c.last;
        out.per_layer[l].row(i).topRows(n) = y;
      }
    }
  }
};

template <typename T>
StudentGraph<T>::StudentGraph(const ModelState<T>& state, const FrameBatch& batch, const FrameMask* mask)
    : impl_(std::make_unique<Impl>(state, batch, mask, true)) {}

template <typename T>
StudentGraph<T>::~StudentGraph() = default;

template <typename T>
const EncoderOutput<T>& StudentGraph<T>::encoder_output() const {
  return impl_->out;
}

template <typename T>
const Batch3<T>& StudentGraph<T>::reconstruction() {
  auto& I = *impl_;
  if (!I.state.layout.decoder) throw ContractError("decode_reconstruction: teacher has no decoder");
  if (!I.recon) {
    const int d = I.state.config.dim;
    Batch3<T> r(I.batch.batch, I.batch.frames, d);
    for (int i = 0; i < I.batch.batch; ++i) {
      auto& c = I.samples[static_cast<std::size_t>(i)];
      r.row(i).topRows(c.n) = conv_stack_forward(I.state.config, I.state.params, *I.state.layout.decoder, c.final, d,
                                                 c.decoder);
    }
    I.recon = std::move(r);
  }
  return *I.recon;
}

template <typename T>
const LossVector<T>& StudentGraph<T>::predicted_losses() {
  auto& I = *impl_;
  if (!I.predicted) {
    LossVector<T> lv(I.batch.batch, I.batch.frames);
    std::fill(lv.values.begin(), lv.values.end(), -std::numeric_limits<T>::infinity());
    for (int i = 0; i < I.batch.batch; ++i) {
      auto& c = I.samples[static_cast<std::size_t>(i)];
      const Mat<T> p =
          conv_stack_forward(I.state.config, I.state.params, I.state.layout.predictor, c.final, 1, c.predictor);
      for (int t = 0; t < c.n; ++t) {
        lv.at(i, t) = p(t, 0);
        lv.defined[std::size_t(i) * lv.frames + t] = 1;
      }
    }
    I.predicted = std::move(lv);
  }
  return *I.predicted;
}

template <typename T>
void StudentGraph<T>::backward(const Batch3<T>* d_recon, const LossVector<T>* d_predicted,
                               bool detach_predictor_input, ParamSet<T>& grad) {
  auto& I = *impl_;
  const auto& cfg = I.state.config;
  if (d_recon && !I.recon) throw ContractError("backward: reconstruction was never computed");
  if (d_predicted && !I.predicted) throw ContractError("backward: predicted losses were never computed");
  if (grad.count() != I.state.params.count()) throw ContractError("backward: gradient layout mismatch");
  for (int i = 0; i < I.batch.batch; ++i) {
    const auto& c = I.samples[static_cast<std::size_t>(i)];
    Mat<T> d_final = Mat<T>::Zero(c.n, cfg.dim);
    bool any = false;
    if (d_recon) {
      const Mat<T> dr = d_recon->row(i).topRows(c.n);
      d_final += conv_stack_backward(cfg, I.state.params, *I.state.layout.decoder, c.decoder, dr, cfg.dim, grad);
      any = true;
    }
    if (d_predicted) {
      Mat<T> dp(c.n, 1);
      for (int t = 0; t < c.n; ++t) dp(t, 0) = d_predicted->at(i, t);
      Mat<T> dx = conv_stack_backward(cfg, I.state.params, I.state.layout.predictor, c.predictor, dp, 1, grad);
      if (!detach_predictor_input) {
        d_final += dx;
        any = true;
      }
    }
    if (any) encode_backward(I.state, c, d_final, grad);
  }
}

// ---------------------------------------------------------------------------

template <typename T>
EncoderOutput<T> encode(const ModelState<T>& state, const FrameBatch& batch, const FrameMask* mask) {
  StudentGraph<T> g(state, batch, mask);
  return g.encoder_output();
}

template <typename T>
LossVector<T> predict_frame_losses(const ModelState<T>& state, const EncoderOutput<T>& enc) {
  if (enc.final.dim != state.config.dim) throw ContractError("predict_frame_losses: dim mismatch");
  LossVector<T> lv(enc.final.batch, enc.final.frames);
  std::fill(lv.values.begin(), lv.values.end(), -std::numeric_limits<T>::infinity());
  for (int i = 0; i < enc.final.batch; ++i) {
    const int n = enc.lengths[static_cast<std::size_t>(i)];
    if (n == 0) continue;
    ConvStackCache<T> cache;
    const Mat<T> x = enc.final.row(i).topRows(n);
    const Mat<T> p = conv_stack_forward(state.config, state.params, state.layout.predictor, x, 1, cache);
    for (int t = 0; t < n; ++t) {
      lv.at(i, t) = p(t, 0);
      lv.defined[std::size_t(i) * lv.frames + t] = 1;
    }
  }
  return lv;
}

template <typename T>
Batch3<T> decode_reconstruction(const ModelState<T>& state, const EncoderOutput<T>& enc) {
  if (state.role != Role::kStudent || !state.layout.decoder) {
    throw ContractError("decode_reconstruction: only the student has a decoder");
  }
  if (enc.final.dim != state.config.dim) throw ContractError("decode_reconstruction: dim mismatch");
  Batch3<T> r(enc.final.batch, enc.final.frames, state.config.dim);
  for (int i = 0; i < enc.final.batch; ++i) {
    const int n = enc.lengths[static_cast<std::size_t>(i)];
    if (n == 0) continue;
    ConvStackCache<T> cache;
    const Mat<T> x = enc.final.row(i).topRows(n);
    r.row(i).topRows(n) =
        conv_stack_forward(state.config, state.params, *state.layout.decoder, x, state.config.dim, cache);
  }
  return r;
}

template <typename T>
Batch3<T> build_targets(const EncoderOutput<T>& teacher_out, int layers_to_average, double eps) {
  const int k_layers = static_cast<int>(teacher_out.per_layer.size());
  if (layers_to_average < 1 || layers_to_average > k_layers) {
    throw ContractError("build_targets: layers_to_average must be in [1, " + std::to_string(k_layers) + "], got " +
                        std::to_string(layers_to_average));
  }
  const auto& first = teacher_out.per_layer.front();
  Batch3<T> out(first.batch, first.frames, first.dim);
  const T e = static_cast<T>(eps);
  for (int l = k_layers - layers_to_average; l < k_layers; ++l) {
    const auto& layer = teacher_out.per_layer[static_cast<std::size_t>(l)];
    for (int b = 0; b < layer.batch; ++b) {
      const int n = teacher_out.lengths[static_cast<std::size_t>(b)];
      if (n == 0) continue;
      const Mat<T> y = layer.row(b).topRows(n);
      const RowVec<T> mu = y.colwise().mean();
      const Mat<T> centered = y.rowwise() - mu;
      const RowVec<T> var = centered.array().square().colwise().mean();
      const RowVec<T> inv = (var.array() + e).rsqrt();
      out.row(b).topRows(n) += (centered.array().rowwise() * inv.array()).matrix();
    }
  }
  for (auto& v : out.data) v /= static_cast<T>(layers_to_average);
  return out;
}

#define EHMAM_INSTANTIATE(T)                                                                              \
  template ParamLayout build_layout<T>(const ModelConfig&, Role, ParamSet<T>&);                          \
  template struct ModelState<T>;                                                                         \
  template class StudentGraph<T>;                                                                        \
  template EncoderOutput<T> encode<T>(const ModelState<T>&, const FrameBatch&, const FrameMask*);        \
  template LossVector<T> predict_frame_losses<T>(const ModelState<T>&, const EncoderOutput<T>&);         \
  template Batch3<T> decode_reconstruction<T>(const ModelState<T>&, const EncoderOutput<T>&);            \
  template Batch3<T> build_targets<T>(const EncoderOutput<T>&, int, double);

EHMAM_INSTANTIATE(float)
EHMAM_INSTANTIATE(double)

}  // namespace ehmam
