#pragma once

#include "racal/align.hpp"
#include "racal/geometry.hpp"
#include "racal/labelgen.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace racal {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RefinerConfig {
  int feature_dim = 16;                        // D
  int attention_dim = 16;                      // d_k
  int num_attention_layers = 2;
  std::vector<int> radar_mlp_widths = {32, 64};
  std::vector<int> patch_encoder_widths = {16};
  int patch_size = 35;                         // ROI side, odd
  int patch_grid = 5;                          // pooled cells per side
  int patch_channels = 1;
  int head_hidden = 16;
  double lambda_conf = 1.0;
  double lambda_disp = 1.0;
  double conf_threshold = 0.5;
  double learning_rate = 1e-2;
  int epochs = 200;
  std::uint64_t seed = 1;

  void validate() const {
    if (feature_dim <= 0 || attention_dim <= 0 || num_attention_layers <= 0 ||
        head_hidden <= 0 || patch_channels <= 0)
      throw std::invalid_argument("RefinerConfig: dimensions must be positive");
    if (lambda_conf < 0.0 || lambda_disp < 0.0)
      throw std::invalid_argument("RefinerConfig: loss weights must be >= 0");
    if (conf_threshold <= 0.0 || conf_threshold >= 1.0)
      throw std::invalid_argument("RefinerConfig: conf_threshold must be in (0,1)");
    if (patch_size <= 0 || patch_size % 2 == 0 || patch_grid <= 0 ||
        patch_size % patch_grid != 0)
      throw std::invalid_argument(
          "RefinerConfig: patch_size must be odd and divisible by patch_grid");
    for (int w : radar_mlp_widths)
      if (w <= 0) throw std::invalid_argument("RefinerConfig: bad radar width");
    for (int w : patch_encoder_widths)
      if (w <= 0) throw std::invalid_argument("RefinerConfig: bad patch width");
  }

  int n_img() const { return patch_grid * patch_grid; }
};

struct ParamEntry {
  std::string name;
  int rows = 0, cols = 0;
  long offset = 0;
};

/// Flat parameter vector with a named shape index. Matrices are stored
/// column-major in the order the entries were declared.
struct ParamLayout {
  std::vector<ParamEntry> entries;
  long total = 0;

  std::vector<int> radar_w, radar_b;
  std::vector<int> patch_w, patch_b;
  struct AttnWeights {
    int wq = -1, wk = -1, wv = -1, wo = -1;
  };
  std::vector<AttnWeights> sa, ca;
  int conf_w1 = -1, conf_b1 = -1, conf_w2 = -1, conf_b2 = -1;
  int disp_w1 = -1, disp_b1 = -1, disp_w2 = -1, disp_b2 = -1;

  int add(const std::string& name, int rows, int cols) {
    entries.push_back(ParamEntry{name, rows, cols, total});
    total += static_cast<long>(rows) * cols;
    return static_cast<int>(entries.size()) - 1;
  }

  static ParamLayout build(const RefinerConfig& cfg) {
    cfg.validate();
    ParamLayout l;
    std::vector<int> radar_dims = {3};
    for (int w : cfg.radar_mlp_widths) radar_dims.push_back(w);
    radar_dims.push_back(cfg.feature_dim);
    for (size_t i = 0; i + 1 < radar_dims.size(); ++i) {
      l.radar_w.push_back(l.add("radar." + std::to_string(i) + ".W",
                                radar_dims[i], radar_dims[i + 1]));
      l.radar_b.push_back(
          l.add("radar." + std::to_string(i) + ".b", 1, radar_dims[i + 1]));
    }
    std::vector<int> patch_dims = {cfg.patch_channels};
    for (int w : cfg.patch_encoder_widths) patch_dims.push_back(w);
    patch_dims.push_back(cfg.feature_dim);
    for (size_t i = 0; i + 1 < patch_dims.size(); ++i) {
      l.patch_w.push_back(l.add("patch." + std::to_string(i) + ".W",
                                patch_dims[i], patch_dims[i + 1]));
      l.patch_b.push_back(
          l.add("patch." + std::to_string(i) + ".b", 1, patch_dims[i + 1]));
    }
    const int D = cfg.feature_dim, dk = cfg.attention_dim;
    for (int a = 0; a < cfg.num_attention_layers; ++a) {
      const std::string p = "attn." + std::to_string(a) + ".";
      AttnWeights s;
      s.wq = l.add(p + "sa.Wq", D, dk);
      s.wk = l.add(p + "sa.Wk", D, dk);
      s.wv = l.add(p + "sa.Wv", D, dk);
      s.wo = l.add(p + "sa.Wo", dk, D);
      l.sa.push_back(s);
      AttnWeights c;
      c.wq = l.add(p + "ca.Wq", D, dk);
      c.wk = l.add(p + "ca.Wk", D, dk);
      c.wv = l.add(p + "ca.Wv", D, dk);
      c.wo = l.add(p + "ca.Wo", dk, D);
      l.ca.push_back(c);
    }
    const int H = cfg.head_hidden;
    l.conf_w1 = l.add("conf.W1", D, H);
    l.conf_b1 = l.add("conf.b1", 1, H);
    l.conf_w2 = l.add("conf.W2", H, 1);
    l.conf_b2 = l.add("conf.b2", 1, 1);
    l.disp_w1 = l.add("disp.W1", D, H);
    l.disp_b1 = l.add("disp.b1", 1, H);
    l.disp_w2 = l.add("disp.W2", H, 2);
    l.disp_b2 = l.add("disp.b2", 1, 2);
    return l;
  }
};

class RefinerParams {
 public:
  explicit RefinerParams(const RefinerConfig& cfg)
      : config_(cfg), layout_(ParamLayout::build(cfg)),
        flat_(Eigen::VectorXd::Zero(layout_.total)) {}

  const RefinerConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  Eigen::VectorXd& flat() { return flat_; }
  const Eigen::VectorXd& flat() const { return flat_; }

  Eigen::Map<Eigen::MatrixXd> mat(int idx) {
    const ParamEntry& e = layout_.entries[idx];
    return Eigen::Map<Eigen::MatrixXd>(flat_.data() + e.offset, e.rows, e.cols);
  }
  Eigen::Map<const Eigen::MatrixXd> mat(int idx) const {
    const ParamEntry& e = layout_.entries[idx];
    return Eigen::Map<const Eigen::MatrixXd>(flat_.data() + e.offset, e.rows,
                                             e.cols);
  }

  /// Uniform(-s, s) weight init with s = 1/sqrt(fan_in); biases stay zero.
  void randomize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (size_t i = 0; i < layout_.entries.size(); ++i) {
      const ParamEntry& e = layout_.entries[i];
      if (e.rows == 1 && e.name.find(".b") != std::string::npos) continue;  // bias
      const double s = 1.0 / std::sqrt(static_cast<double>(e.rows));
      std::uniform_real_distribution<double> dist(-s, s);
      auto m = mat(static_cast<int>(i));
      for (long c = 0; c < m.cols(); ++c)
        for (long r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
    }
  }

 private:
  RefinerConfig config_;
  ParamLayout layout_;
  Eigen::VectorXd flat_;
};

// ---------------------------------------------------------------------------
// Building blocks

struct MlpCache {
  std::vector<Eigen::MatrixXd> act;  // act[0] = input
  std::vector<Eigen::MatrixXd> pre;
};

/// Dense stack with ReLU between layers, linear final layer.
inline Eigen::MatrixXd mlp_forward(const Eigen::MatrixXd& input,
                                   const std::vector<Eigen::MatrixXd>& Ws,
                                   const std::vector<Eigen::MatrixXd>& bs,
                                   MlpCache* cache = nullptr) {
  Eigen::MatrixXd x = input;
  if (cache) {
    cache->act.clear();
    cache->pre.clear();
    cache->act.push_back(x);
  }
  for (size_t l = 0; l < Ws.size(); ++l) {
    Eigen::MatrixXd z = (x * Ws[l]).rowwise() + Eigen::RowVectorXd(bs[l].row(0));
    if (cache) cache->pre.push_back(z);
    x = (l + 1 < Ws.size()) ? z.cwiseMax(0.0) : z;
    if (cache) cache->act.push_back(x);
  }
  return x;
}

/// Backward pass for mlp_forward. Accumulates into dWs/dbs, returns dInput.
inline Eigen::MatrixXd mlp_backward(const MlpCache& cache,
                                    const std::vector<Eigen::MatrixXd>& Ws,
                                    const Eigen::MatrixXd& d_out,
                                    std::vector<Eigen::MatrixXd>* dWs,
                                    std::vector<Eigen::MatrixXd>* dbs) {
  Eigen::MatrixXd dx = d_out;
  for (int l = static_cast<int>(Ws.size()) - 1; l >= 0; --l) {
    Eigen::MatrixXd dz = dx;
    if (l + 1 < static_cast<int>(Ws.size()))
      dz = dz.cwiseProduct(
          (cache.pre[l].array() > 0.0).cast<double>().matrix());
    (*dWs)[l] += cache.act[l].transpose() * dz;
    (*dbs)[l] += dz.colwise().sum();
    dx = dz * Ws[l].transpose();
  }
  return dx;
}

inline Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& s) {
  Eigen::RowVectorXd e = (s.array() - s.maxCoeff()).exp();
  return e / e.sum();
}

/// d(loss)/d(scores) for one softmax row given d(loss)/d(weights).
inline Eigen::RowVectorXd softmax_row_backward(const Eigen::RowVectorXd& a,
                                               const Eigen::RowVectorXd& da) {
  const double dot = da.cwiseProduct(a).sum();
  return a.cwiseProduct(da.array().matrix() -
                        Eigen::RowVectorXd::Constant(a.size(), dot));
}

struct SelfAttentionCache {
  Eigen::MatrixXd X, Q, K, V, A, H;
};

/// softmax(Q K^T / sqrt(d_k)) V Wo over radar tokens (rows of X).
inline Eigen::MatrixXd self_attention(const Eigen::MatrixXd& X,
                                      const Eigen::MatrixXd& Wq,
                                      const Eigen::MatrixXd& Wk,
                                      const Eigen::MatrixXd& Wv,
                                      const Eigen::MatrixXd& Wo,
                                      SelfAttentionCache* cache = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(Wq.cols()));
  Eigen::MatrixXd Q = X * Wq, K = X * Wk, V = X * Wv;
  Eigen::MatrixXd S = Q * K.transpose() * scale;
  Eigen::MatrixXd A(S.rows(), S.cols());
  for (long i = 0; i < S.rows(); ++i) A.row(i) = softmax_row(S.row(i));
  Eigen::MatrixXd H = A * V;
  if (cache) *cache = SelfAttentionCache{X, Q, K, V, A, H};
  return H * Wo;
}

struct CrossAttentionCache {
  Eigen::RowVectorXd x;      // query token, 1 x D
  Eigen::MatrixXd P;         // image tokens, N x D
  Eigen::RowVectorXd q, a, h;
  Eigen::MatrixXd Km, Vm;
};

/// Radar token as query, image patch tokens as keys and values.
inline Eigen::RowVectorXd cross_attention(const Eigen::RowVectorXd& x,
                                          const Eigen::MatrixXd& P,
                                          const Eigen::MatrixXd& Wq,
                                          const Eigen::MatrixXd& Wk,
                                          const Eigen::MatrixXd& Wv,
                                          const Eigen::MatrixXd& Wo,
                                          CrossAttentionCache* cache = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(Wq.cols()));
  Eigen::RowVectorXd q = x * Wq;
  Eigen::MatrixXd Km = P * Wk, Vm = P * Wv;
  Eigen::RowVectorXd s = q * Km.transpose() * scale;
  Eigen::RowVectorXd a = softmax_row(s);
  Eigen::RowVectorXd h = a * Vm;
  if (cache) *cache = CrossAttentionCache{x, P, q, a, h, Km, Vm};
  return h * Wo;
}

// ---------------------------------------------------------------------------
// Batches and forward pass

/// One training frame: per-point features, pooled patch cells, and labels.
struct RefinerBatch {
  Eigen::MatrixXd features;                 // K x 3, normalized (u, v, depth)
  std::vector<Eigen::MatrixXd> patch_cells; // per point: N_img x C
  std::vector<int> conf_labels;
  Eigen::MatrixXd disp_labels;              // K x 2
  std::vector<uint8_t> valid;               // P_valid membership

  int size() const { return static_cast<int>(features.rows()); }
  int valid_count() const {
    int n = 0;
    for (uint8_t f : valid) n += f != 0;
    return n;
  }
};

/// Average-pool a patch onto a grid x grid cell lattice; one row per cell
/// (row-major cells), one column per channel.
inline Eigen::MatrixXd pool_patch(const Patch& patch, int grid) {
  if (patch.height % grid != 0 || patch.width % grid != 0)
    throw std::invalid_argument("pool_patch: patch size not divisible by grid");
  const int ph = patch.height / grid, pw = patch.width / grid;
  Eigen::MatrixXd cells(grid * grid, patch.channels);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      for (int c = 0; c < patch.channels; ++c) {
        double sum = 0.0;
        for (int y = gy * ph; y < (gy + 1) * ph; ++y)
          for (int x = gx * pw; x < (gx + 1) * pw; ++x) sum += patch.at(c, y, x);
        cells(gy * grid + gx, c) = sum / (ph * pw);
      }
    }
  }
  return cells;
}

/// Normalized per-point network inputs: (u/width, v/height, depth/100).
inline Eigen::RowVector3d radar_features(const RadarPoint& p,
                                         const CameraModel& camera) {
  return Eigen::RowVector3d(p.u / camera.width, p.v / camera.height,
                            p.range / 100.0);
}

inline RefinerBatch build_batch(const std::vector<RadarPoint>& points,
                                const PlanarImage& image,
                                const std::vector<PointLabels>& labels,
                                const CameraModel& camera,
                                const RefinerConfig& cfg) {
  if (labels.size() != points.size())
    throw std::invalid_argument("build_batch: label/point count mismatch");
  RefinerBatch b;
  const int k = static_cast<int>(points.size());
  b.features.resize(k, 3);
  b.disp_labels.resize(k, 2);
  for (int i = 0; i < k; ++i) {
    b.features.row(i) = radar_features(points[i], camera);
    const Patch patch = extract_patch(
        image, static_cast<int>(std::lround(points[i].u)),
        static_cast<int>(std::lround(points[i].v)), cfg.patch_size, cfg.patch_size);
    b.patch_cells.push_back(pool_patch(patch, cfg.patch_grid));
    b.conf_labels.push_back(labels[i].conf_label);
    b.disp_labels(i, 0) = labels[i].disp_u;
    b.disp_labels(i, 1) = labels[i].disp_v;
    b.valid.push_back(labels[i].is_valid ? 1 : 0);
  }
  return b;
}

struct ForwardCache {
  MlpCache radar;
  std::vector<MlpCache> patch;
  std::vector<Eigen::MatrixXd> patch_feats;       // per point: N_img x D
  std::vector<SelfAttentionCache> sa;             // per layer
  std::vector<std::vector<CrossAttentionCache>> ca;
  std::vector<Eigen::MatrixXd> layer_inputs;      // X entering each SA
  Eigen::MatrixXd fused;                          // K x D after all layers
  MlpCache conf_head, disp_head;
  Eigen::VectorXd logits;
  Eigen::VectorXd conf;                           // sigmoid outputs
  Eigen::MatrixXd disp;                           // K x 2
};

namespace detail {

inline std::vector<Eigen::MatrixXd> collect(const RefinerParams& p,
                                            const std::vector<int>& idx) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(p.mat(i));
  return out;
}

}  // namespace detail

/// Radar encoder: per-point MLP to D features.
inline Eigen::MatrixXd encode_radar(const RefinerParams& params,
                                    const Eigen::MatrixXd& features,
                                    MlpCache* cache = nullptr) {
  if (features.rows() < 1) throw std::invalid_argument("encode_radar: empty input");
  if (!features.allFinite())
    throw std::invalid_argument("encode_radar: non-finite input");
  return mlp_forward(features, detail::collect(params, params.layout().radar_w),
                     detail::collect(params, params.layout().radar_b), cache);
}

/// Patch encoder: pooled cells through a per-cell MLP, giving N_img x D tokens.
inline Eigen::MatrixXd encode_patch(const RefinerParams& params,
                                    const Eigen::MatrixXd& cells,
                                    MlpCache* cache = nullptr) {
  if (cells.rows() != params.config().n_img() ||
      cells.cols() != params.config().patch_channels)
    throw std::invalid_argument("encode_patch: cell shape mismatch");
  return mlp_forward(cells, detail::collect(params, params.layout().patch_w),
                     detail::collect(params, params.layout().patch_b), cache);
}

inline RefinerOutputs forward(const RefinerParams& params, const RefinerBatch& batch,
                              ForwardCache* cache = nullptr) {
  const RefinerConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const int k = batch.size();
  if (static_cast<int>(batch.patch_cells.size()) != k)
    throw std::invalid_argument("forward: one patch required per point");

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.patch.resize(k);
  c.patch_feats.resize(k);

  Eigen::MatrixXd X = encode_radar(params, batch.features, &c.radar);
  for (int i = 0; i < k; ++i)
    c.patch_feats[i] = encode_patch(params, batch.patch_cells[i], &c.patch[i]);

  c.sa.resize(cfg.num_attention_layers);
  c.ca.assign(cfg.num_attention_layers, std::vector<CrossAttentionCache>(k));
  c.layer_inputs.resize(cfg.num_attention_layers);
  // Residual composition: each attention block refines the radar tokens
  // rather than replacing them, so per-point information survives the stack.
  for (int a = 0; a < cfg.num_attention_layers; ++a) {
    c.layer_inputs[a] = X;
    X += self_attention(X, params.mat(L.sa[a].wq), params.mat(L.sa[a].wk),
                        params.mat(L.sa[a].wv), params.mat(L.sa[a].wo), &c.sa[a]);
    Eigen::MatrixXd fused(k, cfg.feature_dim);
    for (int i = 0; i < k; ++i)
      fused.row(i) =
          X.row(i) + cross_attention(X.row(i), c.patch_feats[i],
                                     params.mat(L.ca[a].wq), params.mat(L.ca[a].wk),
                                     params.mat(L.ca[a].wv), params.mat(L.ca[a].wo),
                                     &c.ca[a][i]);
    X = fused;
  }
  c.fused = X;

  const Eigen::VectorXd logits =
      mlp_forward(X, {params.mat(L.conf_w1), params.mat(L.conf_w2)},
                  {params.mat(L.conf_b1), params.mat(L.conf_b2)}, &c.conf_head);
  c.logits = logits;
  c.conf = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
  c.disp = mlp_forward(X, {params.mat(L.disp_w1), params.mat(L.disp_w2)},
                       {params.mat(L.disp_b1), params.mat(L.disp_b2)}, &c.disp_head);

  RefinerOutputs out;
  out.confidence.assign(c.conf.data(), c.conf.data() + k);
  out.disp_u.resize(k);
  out.disp_v.resize(k);
  for (int i = 0; i < k; ++i) {
    out.disp_u[i] = c.disp(i, 0);
    out.disp_v[i] = c.disp(i, 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy over P_valid, with the probability clamped away
/// from 0 and 1.
inline double loss_conf(const Eigen::VectorXd& conf, const std::vector<int>& labels,
                        const std::vector<uint8_t>& valid) {
  int n = 0;
  double sum = 0.0;
  for (long i = 0; i < conf.size(); ++i) {
    if (!valid[i]) continue;
    const double p = std::clamp(conf(i), kBceClamp, 1.0 - kBceClamp);
    sum += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("loss_conf: no valid point");
  return sum / n;
}

inline double smooth_l1(double r) {
  const double a = std::abs(r);
  return a < 1.0 ? 0.5 * r * r : a - 0.5;
}

/// Mean over P_valid of Smooth-L1 summed over the two displacement components.
inline double loss_disp(const Eigen::MatrixXd& disp, const Eigen::MatrixXd& labels,
                        const std::vector<uint8_t>& valid) {
  int n = 0;
  double sum = 0.0;
  for (long i = 0; i < disp.rows(); ++i) {
    if (!valid[i]) continue;
    sum += smooth_l1(disp(i, 0) - labels(i, 0)) +
           smooth_l1(disp(i, 1) - labels(i, 1));
    ++n;
  }
  if (n == 0) throw std::invalid_argument("loss_disp: no valid point");
  return sum / n;
}

inline double loss_total(double conf_loss, double disp_loss,
                         const RefinerConfig& cfg) {
  return cfg.lambda_conf * conf_loss + cfg.lambda_disp * disp_loss;
}

// ---------------------------------------------------------------------------
// Gradient

struct LossBreakdown {
  double conf = 0.0, disp = 0.0, total = 0.0;
};

namespace detail {

inline void self_attention_backward(const SelfAttentionCache& c,
                                    const Eigen::MatrixXd& Wq,
                                    const Eigen::MatrixXd& Wk,
                                    const Eigen::MatrixXd& Wv,
                                    const Eigen::MatrixXd& Wo,
                                    const Eigen::MatrixXd& d_out,
                                    Eigen::MatrixXd& dWq, Eigen::MatrixXd& dWk,
                                    Eigen::MatrixXd& dWv, Eigen::MatrixXd& dWo,
                                    Eigen::MatrixXd& dX) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(Wq.cols()));
  dWo += c.H.transpose() * d_out;
  const Eigen::MatrixXd dH = d_out * Wo.transpose();
  const Eigen::MatrixXd dA = dH * c.V.transpose();
  Eigen::MatrixXd dV = c.A.transpose() * dH;
  Eigen::MatrixXd dS(dA.rows(), dA.cols());
  for (long i = 0; i < dA.rows(); ++i)
    dS.row(i) = softmax_row_backward(c.A.row(i), dA.row(i));
  const Eigen::MatrixXd dQ = dS * c.K * scale;
  const Eigen::MatrixXd dK = dS.transpose() * c.Q * scale;
  dWq += c.X.transpose() * dQ;
  dWk += c.X.transpose() * dK;
  dWv += c.X.transpose() * dV;
  dX += dQ * Wq.transpose() + dK * Wk.transpose() + dV * Wv.transpose();
}

inline void cross_attention_backward(const CrossAttentionCache& c,
                                     const Eigen::MatrixXd& Wq,
                                     const Eigen::MatrixXd& Wk,
                                     const Eigen::MatrixXd& Wv,
                                     const Eigen::MatrixXd& Wo,
                                     const Eigen::RowVectorXd& d_out,
                                     Eigen::MatrixXd& dWq, Eigen::MatrixXd& dWk,
                                     Eigen::MatrixXd& dWv, Eigen::MatrixXd& dWo,
                                     Eigen::RowVectorXd& dx, Eigen::MatrixXd& dP) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(Wq.cols()));
  dWo += c.h.transpose() * d_out;
  const Eigen::RowVectorXd dh = d_out * Wo.transpose();
  const Eigen::RowVectorXd da = dh * c.Vm.transpose();
  Eigen::MatrixXd dVm = c.a.transpose() * dh;
  const Eigen::RowVectorXd ds = softmax_row_backward(c.a, da);
  const Eigen::RowVectorXd dq = ds * c.Km * scale;
  const Eigen::MatrixXd dKm = ds.transpose() * c.q * scale;
  dWq += c.x.transpose() * dq;
  dWk += c.P.transpose() * dKm;
  dWv += c.P.transpose() * dVm;
  dx += dq * Wq.transpose();
  dP += dKm * Wk.transpose() + dVm * Wv.transpose();
}

}  // namespace detail

/// Analytic gradient of the weighted total loss with respect to every
/// parameter, plus the loss values at the evaluation point.
inline Eigen::VectorXd gradient(const RefinerParams& params,
                                const RefinerBatch& batch,
                                LossBreakdown* losses = nullptr) {
  const RefinerConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const int k = batch.size();
  const int n_valid = batch.valid_count();
  if (k == 0 || n_valid == 0)
    throw std::invalid_argument("gradient: batch has no valid point");

  ForwardCache c;
  forward(params, batch, &c);

  const double lc = loss_conf(c.conf, batch.conf_labels, batch.valid);
  const double ld = loss_disp(c.disp, batch.disp_labels, batch.valid);
  if (losses) *losses = LossBreakdown{lc, ld, loss_total(lc, ld, cfg)};

  // Per-entry gradient accumulators.
  std::vector<Eigen::MatrixXd> g(L.entries.size());
  for (size_t i = 0; i < L.entries.size(); ++i)
    g[i] = Eigen::MatrixXd::Zero(L.entries[i].rows, L.entries[i].cols);

  // Head gradients.
  Eigen::VectorXd d_logit = Eigen::VectorXd::Zero(k);
  const double wc = cfg.lambda_conf / n_valid;
  for (int i = 0; i < k; ++i) {
    if (!batch.valid[i]) continue;
    const double s = c.conf(i);
    if (s <= kBceClamp || s >= 1.0 - kBceClamp) continue;  // clamp plateau
    const double y = batch.conf_labels[i];
    d_logit(i) = wc * (s - y);
  }
  Eigen::MatrixXd d_disp = Eigen::MatrixXd::Zero(k, 2);
  const double wd = cfg.lambda_disp / n_valid;
  for (int i = 0; i < k; ++i) {
    if (!batch.valid[i]) continue;
    for (int j = 0; j < 2; ++j) {
      const double r = c.disp(i, j) - batch.disp_labels(i, j);
      d_disp(i, j) = wd * (std::abs(r) < 1.0 ? r : (r > 0 ? 1.0 : -1.0));
    }
  }

  std::vector<Eigen::MatrixXd> conf_dW = {g[L.conf_w1], g[L.conf_w2]};
  std::vector<Eigen::MatrixXd> conf_db = {g[L.conf_b1], g[L.conf_b2]};
  Eigen::MatrixXd dX = mlp_backward(
      c.conf_head, {params.mat(L.conf_w1), params.mat(L.conf_w2)}, d_logit,
      &conf_dW, &conf_db);
  g[L.conf_w1] = conf_dW[0];
  g[L.conf_w2] = conf_dW[1];
  g[L.conf_b1] = conf_db[0];
  g[L.conf_b2] = conf_db[1];

  std::vector<Eigen::MatrixXd> disp_dW = {g[L.disp_w1], g[L.disp_w2]};
  std::vector<Eigen::MatrixXd> disp_db = {g[L.disp_b1], g[L.disp_b2]};
  dX += mlp_backward(c.disp_head, {params.mat(L.disp_w1), params.mat(L.disp_w2)},
                     d_disp, &disp_dW, &disp_db);
  g[L.disp_w1] = disp_dW[0];
  g[L.disp_w2] = disp_dW[1];
  g[L.disp_b1] = disp_db[0];
  g[L.disp_b2] = disp_db[1];

  // Attention stack, last layer first. Patch tokens feed every layer, so
  // their gradient accumulates across layers.
  std::vector<Eigen::MatrixXd> dPatchFeats(k);
  for (int i = 0; i < k; ++i)
    dPatchFeats[i] = Eigen::MatrixXd::Zero(cfg.n_img(), cfg.feature_dim);

  for (int a = cfg.num_attention_layers - 1; a >= 0; --a) {
    // Skip connections: the upstream gradient reaches both the block output
    // and its input directly.
    Eigen::MatrixXd d_sa_out = dX;
    for (int i = 0; i < k; ++i) {
      Eigen::RowVectorXd dxi = Eigen::RowVectorXd::Zero(cfg.feature_dim);
      detail::cross_attention_backward(
          c.ca[a][i], params.mat(L.ca[a].wq), params.mat(L.ca[a].wk),
          params.mat(L.ca[a].wv), params.mat(L.ca[a].wo), dX.row(i),
          g[L.ca[a].wq], g[L.ca[a].wk], g[L.ca[a].wv], g[L.ca[a].wo], dxi,
          dPatchFeats[i]);
      d_sa_out.row(i) += dxi;
    }
    Eigen::MatrixXd d_in = d_sa_out;
    detail::self_attention_backward(
        c.sa[a], params.mat(L.sa[a].wq), params.mat(L.sa[a].wk),
        params.mat(L.sa[a].wv), params.mat(L.sa[a].wo), d_sa_out, g[L.sa[a].wq],
        g[L.sa[a].wk], g[L.sa[a].wv], g[L.sa[a].wo], d_in);
    dX = d_in;
  }

  // Encoders.
  {
    std::vector<Eigen::MatrixXd> Ws = detail::collect(params, L.radar_w);
    std::vector<Eigen::MatrixXd> dW(Ws.size()), db(Ws.size());
    for (size_t l = 0; l < Ws.size(); ++l) {
      dW[l] = g[L.radar_w[l]];
      db[l] = g[L.radar_b[l]];
    }
    mlp_backward(c.radar, Ws, dX, &dW, &db);
    for (size_t l = 0; l < Ws.size(); ++l) {
      g[L.radar_w[l]] = dW[l];
      g[L.radar_b[l]] = db[l];
    }
  }
  {
    std::vector<Eigen::MatrixXd> Ws = detail::collect(params, L.patch_w);
    std::vector<Eigen::MatrixXd> dW(Ws.size()), db(Ws.size());
    for (size_t l = 0; l < Ws.size(); ++l) {
      dW[l] = g[L.patch_w[l]];
      db[l] = g[L.patch_b[l]];
    }
    for (int i = 0; i < k; ++i) mlp_backward(c.patch[i], Ws, dPatchFeats[i], &dW, &db);
    for (size_t l = 0; l < Ws.size(); ++l) {
      g[L.patch_w[l]] = dW[l];
      g[L.patch_b[l]] = db[l];
    }
  }

  Eigen::VectorXd flat = Eigen::VectorXd::Zero(L.total);
  for (size_t i = 0; i < L.entries.size(); ++i) {
    const ParamEntry& e = L.entries[i];
    Eigen::Map<Eigen::MatrixXd>(flat.data() + e.offset, e.rows, e.cols) = g[i];
  }
  if (!flat.allFinite()) throw std::runtime_error("gradient: non-finite gradient");
  return flat;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double conf_loss = 0.0, disp_loss = 0.0, total = 0.0;
};

struct TrainResult {
  RefinerParams params;
  std::vector<EpochRecord> history;
};

/// Adam (beta1 = 0.9, beta2 = 0.999) over the dataset; one step per frame,
/// fixed order, deterministic given the config seed.
inline TrainResult train(const std::vector<RefinerBatch>& dataset,
                         const RefinerConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  RefinerParams params(cfg);
  params.randomize(cfg.seed);

  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Eigen::VectorXd m = Eigen::VectorXd::Zero(params.flat().size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(params.flat().size());
  long t = 0;

  TrainResult result{std::move(params), {}};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lc = 0.0, ld = 0.0;
    for (const RefinerBatch& batch : dataset) {
      LossBreakdown losses;
      const Eigen::VectorXd grad = gradient(result.params, batch, &losses);
      if (!std::isfinite(losses.total))
        throw TrainingDiverged("train: loss became non-finite at epoch " +
                               std::to_string(epoch));
      lc += losses.conf;
      ld += losses.disp;
      ++t;
      m = beta1 * m + (1.0 - beta1) * grad;
      v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad).eval();
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
      result.params.flat() -=
          (cfg.learning_rate / bc1) *
          m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
    }
    const double n = static_cast<double>(dataset.size());
    result.history.push_back(
        EpochRecord{epoch, lc / n, ld / n, loss_total(lc / n, ld / n, cfg)});
  }
  return result;
}

/// Fraction of valid points whose thresholded confidence matches the label.
inline double confidence_accuracy(const RefinerParams& params,
                                  const std::vector<RefinerBatch>& batches,
                                  double threshold = 0.5) {
  long correct = 0, total = 0;
  for (const RefinerBatch& b : batches) {
    const RefinerOutputs out = forward(params, b);
    for (int i = 0; i < b.size(); ++i) {
      if (!b.valid[i]) continue;
      const int pred = out.confidence[i] >= threshold ? 1 : 0;
      correct += pred == b.conf_labels[i];
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("confidence_accuracy: no valid point");
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace racal
