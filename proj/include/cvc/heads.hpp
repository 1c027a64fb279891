#pragma once

#include <functional>

#include "cvc/model.hpp"
#include "cvc/pairs.hpp"

namespace cvc {

// Dense per-pixel displacement, image1 -> image2.
struct FlowField {
  TensorF u;  // [H, W]
  TensorF v;  // [H, W]

  int64_t height() const { return u.ndim() ? u.dim(0) : 0; }
  int64_t width() const { return u.ndim() ? u.dim(1) : 0; }
};

// Linear per-token regression head, dec_dim -> P*P*C values.
template <typename T>
struct DenseHeadParams {
  LinearParams<T> out;
  int64_t channels = 0;
  int64_t patch = 0;

  static DenseHeadParams create(ParamSet<T>& ps, const std::string& prefix,
                                int64_t dec_dim, int64_t patch, int64_t channels,
                                Init<T>& init) {
    DenseHeadParams h;
    h.channels = channels;
    h.patch = patch;
    h.out = LinearParams<T>::create(ps, prefix, dec_dim, patch * patch * channels, init);
    return h;
  }

  typename Graph<T>::Value forward(Graph<T>& g, typename Graph<T>::Value features) const {
    return out.forward(g, features);
  }

  // Token output unpatchified to a per-pixel map, flat [H, W, C].
  std::vector<T> to_map(const Tensor<T>& tokens, int64_t grid_rows,
                        int64_t grid_cols) const {
    return unpatchify_channels(tokens, grid_rows, grid_cols, patch, channels);
  }
};

// Model + dense two-channel head; the binocular regression used for flow.
template <typename T>
struct FlowRegressor {
  Model<T> model;
  ParamSet<T> head_params;
  DenseHeadParams<T> head;

  static FlowRegressor create(Model<T> m, uint64_t seed) {
    FlowRegressor fr{std::move(m), {}, {}};
    Init<T> init(derive_seed(seed, "flow_head", 0));
    fr.head = DenseHeadParams<T>::create(fr.head_params, "flow_head",
                                         fr.model.config().dec_dim,
                                         fr.model.config().patch, 2, init);
    return fr;
  }

  // Graph forward: both views unmasked, dense head on the decoder features.
  typename Graph<T>::Value forward(Graph<T>& g, const PatchSet<T>& ps1,
                                   const PatchSet<T>& ps2) const {
    auto enc1 = model.encode(g, ps1.tokens, nullptr);
    auto enc2 = model.encode(g, ps2.tokens, nullptr);
    MaskSpec none = sample_mask(model.config().n_tokens(), 0.0, 0);
    auto feats = model.decode_features(g, enc1, none, enc2);
    return head.forward(g, feats);
  }

  FlowField infer(const Image& img1, const Image& img2) const;
};

// Tile positions along one axis: 0, stride, 2*stride, ..., with the last
// tile clamped to end exactly at the image edge.
std::vector<int64_t> tile_positions(int64_t extent, int64_t tile, int64_t stride);

// Per-pixel tile assignment by nearest tile center (Euclidean), ties broken
// by lowest tile index in row-major placement order. Returns [H*W] indices
// into the row-major (ty, tx) tile list.
std::vector<int32_t> tile_assignment(int64_t height, int64_t width, int64_t tile,
                                     int64_t stride);

// Tile-and-stitch inference: the same tile grid is cut from both images, the
// regressor runs per tile pair, and each output pixel comes from its
// assigned tile.
FlowField flow_infer_tiled(
    const Image& img1, const Image& img2, int64_t tile, int64_t stride,
    const std::function<FlowField(const Image&, const Image&)>& regress_tile);

// ---- pose ----

// Nearest rotation in Frobenius norm via SVD; errors on rank-deficient or
// reflection-with-tied-singular-values inputs.
Mat3 procrustes_orthonormalize(const Mat3& m);

// Head from decoder tokens to a 12-d output reshaped to (M, t), with the
// rotation obtained by orthonormalizing M.
template <typename T>
struct PoseHeadParams {
  LinearParams<T> token_proj;  // dec_dim -> 64
  LinearParams<T> fc1;         // n_tokens*64 -> 1024
  LinearParams<T> fc2;         // 1024 -> 12

  static PoseHeadParams create(ParamSet<T>& ps, const std::string& prefix,
                               int64_t dec_dim, int64_t n_tokens, Init<T>& init) {
    PoseHeadParams h;
    h.token_proj = LinearParams<T>::create(ps, prefix + ".token_proj", dec_dim, 64, init);
    h.fc1 = LinearParams<T>::create(ps, prefix + ".fc1", n_tokens * 64, 1024, init);
    h.fc2 = LinearParams<T>::create(ps, prefix + ".fc2", 1024, 12, init);
    return h;
  }

  // features: [N, dec_dim] decoder tokens of the (query, reference) pair.
  // Returns (R [3,3], t [3]).
  std::pair<typename Graph<T>::Value, typename Graph<T>::Value> forward(
      Graph<T>& g, typename Graph<T>::Value features) const {
    auto x = token_proj.forward(g, features);
    x = g.reshape(x, {1, g.val(x).numel()});
    x = fc2.forward(g, g.relu(fc1.forward(g, x)));
    auto m = g.reshape(g.slice_rows(g.reshape(x, {4, 3}), 0, 3), {3, 3});
    auto t = g.reshape(g.slice_rows(g.reshape(x, {4, 3}), 3, 4), {3});
    return {g.nearest_rotation(m), t};
  }
};

// ||R - R_gt||_F^2 + lambda ||t - t_gt||^2
double relative_pose_loss(const Pose& pred, const Pose& gt, double lambda = 100.0);

template <typename T>
typename Graph<T>::Value relative_pose_loss(Graph<T>& g, typename Graph<T>::Value R,
                                            typename Graph<T>::Value t,
                                            const Pose& gt, T lambda = T(100)) {
  Tensor<T> Rg({3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) Rg.at(r, c) = static_cast<T>(gt.R(r, c));
  Tensor<T> tg({3}, {static_cast<T>(gt.t.x), static_cast<T>(gt.t.y), static_cast<T>(gt.t.z)});
  auto lr = g.sum_sq(g.sub(R, g.constant(Rg)));
  auto lt = g.sum_sq(g.sub(t, g.constant(tg)));
  return g.add(lr, g.scale(lt, lambda));
}

// ---- absolute pose regression loss ----

struct Quat {
  double w = 1, x = 0, y = 0, z = 0;
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
};

// Rotation-vector form of a unit quaternion, canonicalized to w >= 0.
Vec3 quat_log(const Quat& q);

// Learned balance weights (position / rotation), trained with the loss.
template <typename T>
struct AprWeights {
  Param<T>* beta = nullptr;
  Param<T>* gamma = nullptr;

  static AprWeights create(ParamSet<T>& ps, const std::string& prefix, Init<T>& init) {
    AprWeights w;
    w.beta = &ps.create(prefix + ".beta", init.zeros({}));
    w.gamma = &ps.create(prefix + ".gamma", Tensor<T>::full({}, T(-3)));
    return w;
  }
};

// e^{-beta} |p - p_gt|_1 + e^{-gamma} |log q - log q_gt|_1 + beta + gamma
template <typename T>
typename Graph<T>::Value apr_loss(Graph<T>& g, typename Graph<T>::Value p,
                                  typename Graph<T>::Value q,
                                  const Vec3& p_gt, const Quat& q_gt,
                                  const AprWeights<T>& w);

double apr_loss(const Vec3& p, const Quat& q, const Vec3& p_gt, const Quat& q_gt,
                double beta, double gamma);

// ---- stereo loss and metrics ----

// Mean over finite-gt pixels of (log(max(pred,eps)) - log(max(gt,eps)))^2.
double stereo_mse_log_loss(const TensorF& pred_disp, const TensorF& gt_disp,
                           double eps = 1e-3);

// Mean Euclidean endpoint error over valid pixels (empty mask = all valid).
double metric_aepe(const FlowField& pred, const FlowField& gt,
                   const std::vector<uint8_t>& valid = {});

// Fraction of gt>0 pixels with max(pred/gt, gt/pred) < threshold.
double metric_delta1(const TensorF& pred_depth, const TensorF& gt_depth,
                     double threshold = 1.25);

// Fraction of finite-gt pixels with |err| > 3 px and |err| > 5% of gt.
double metric_bad3(const TensorF& pred_disp, const TensorF& gt_disp);

// Mean absolute error over valid pixels, times 1000.
double metric_l1x1000(const TensorF& pred, const TensorF& gt,
                      const std::vector<uint8_t>& valid = {});

}  // namespace cvc
