#include "cvc/heads.hpp"

namespace cvc {

template <typename T>
FlowField FlowRegressor<T>::infer(const Image& img1, const Image& img2) const {
  const ModelConfig& cfg = model.config();
  check_dim(img1.height == cfg.image_size && img1.width == cfg.image_size &&
                img2.height == cfg.image_size && img2.width == cfg.image_size,
            "flow inference: images must match the model input size");
  Graph<T> g;
  auto tokens = forward(g, patchify<T>(img1, cfg.patch), patchify<T>(img2, cfg.patch));
  auto flat = head.to_map(g.val(tokens), cfg.grid(), cfg.grid());
  FlowField f;
  f.u = TensorF({cfg.image_size, cfg.image_size});
  f.v = TensorF({cfg.image_size, cfg.image_size});
  for (int64_t i = 0; i < cfg.image_size * cfg.image_size; ++i) {
    f.u.data[i] = static_cast<float>(flat[2 * i]);
    f.v.data[i] = static_cast<float>(flat[2 * i + 1]);
  }
  return f;
}

template struct FlowRegressor<float>;
template struct FlowRegressor<double>;

std::vector<int64_t> tile_positions(int64_t extent, int64_t tile, int64_t stride) {
  check_dim(tile > 0 && stride > 0, "tile and stride must be positive");
  if (extent < tile) throw DimError("image smaller than tile size");
  std::vector<int64_t> pos;
  for (int64_t p = 0;; p += stride) {
    if (p + tile >= extent) {
      pos.push_back(extent - tile);  // clamp the last tile to the edge
      break;
    }
    pos.push_back(p);
  }
  return pos;
}

std::vector<int32_t> tile_assignment(int64_t height, int64_t width, int64_t tile,
                                     int64_t stride) {
  const auto xs = tile_positions(width, tile, stride);
  const auto ys = tile_positions(height, tile, stride);
  struct Center {
    double cy, cx;
  };
  std::vector<Center> centers;
  centers.reserve(xs.size() * ys.size());
  for (int64_t ty : ys)
    for (int64_t tx : xs)
      centers.push_back({static_cast<double>(ty) + static_cast<double>(tile) / 2.0,
                         static_cast<double>(tx) + static_cast<double>(tile) / 2.0});
  std::vector<int32_t> assign(static_cast<size_t>(height * width), 0);
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      double best = std::numeric_limits<double>::infinity();
      int32_t best_i = 0;
      for (size_t i = 0; i < centers.size(); ++i) {
        const double dy = centers[i].cy - (static_cast<double>(y) + 0.5);
        const double dx = centers[i].cx - (static_cast<double>(x) + 0.5);
        const double d2 = dy * dy + dx * dx;
        if (d2 < best) {  // strict: ties keep the lowest row-major index
          best = d2;
          best_i = static_cast<int32_t>(i);
        }
      }
      assign[y * width + x] = best_i;
    }
  return assign;
}

FlowField flow_infer_tiled(
    const Image& img1, const Image& img2, int64_t tile, int64_t stride,
    const std::function<FlowField(const Image&, const Image&)>& regress_tile) {
  check_dim(img1.height == img2.height && img1.width == img2.width,
            "tiled inference: image sizes differ");
  check_dim(stride <= tile, "tiled inference: stride must not exceed tile size");
  const int64_t H = img1.height, W = img1.width;
  const auto xs = tile_positions(W, tile, stride);
  const auto ys = tile_positions(H, tile, stride);
  const auto assign = tile_assignment(H, W, tile, stride);

  auto crop = [tile](const Image& img, int64_t y0, int64_t x0) {
    Image out(tile, tile);
    for (int64_t y = 0; y < tile; ++y)
      for (int64_t x = 0; x < tile; ++x)
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
  };

  // tiles cut at the same positions in both images, row-major order
  std::vector<FlowField> tiles;
  tiles.reserve(xs.size() * ys.size());
  for (int64_t ty : ys)
    for (int64_t tx : xs)
      tiles.push_back(regress_tile(crop(img1, ty, tx), crop(img2, ty, tx)));

  FlowField out;
  out.u = TensorF({H, W});
  out.v = TensorF({H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const int32_t ti = assign[y * W + x];
      const int64_t ty = ys[ti / static_cast<int64_t>(xs.size())];
      const int64_t tx = xs[ti % static_cast<int64_t>(xs.size())];
      out.u.at(y, x) = tiles[ti].u.at(y - ty, x - tx);
      out.v.at(y, x) = tiles[ti].v.at(y - ty, x - tx);
    }
  return out;
}

Mat3 procrustes_orthonormalize(const Mat3& m) {
  GraphD g;
  TensorD t({3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.at(r, c) = m(r, c);
  auto r = g.nearest_rotation(g.constant(std::move(t)));
  Mat3 out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out(i, j) = g.val(r).at(i, j);
  return out;
}

double relative_pose_loss(const Pose& pred, const Pose& gt, double lambda) {
  if (!is_rotation(pred.R) || !is_rotation(gt.R))
    throw DataError("relative_pose_loss: rotation input is not in SO(3)");
  double fro = 0;
  for (int i = 0; i < 9; ++i) {
    const double d = pred.R.m[i] - gt.R.m[i];
    fro += d * d;
  }
  const Vec3 dt = pred.t - gt.t;
  return fro + lambda * dt.dot(dt);
}

Vec3 quat_log(const Quat& q_in) {
  if (std::abs(q_in.norm() - 1.0) > 1e-4)
    throw DataError("quat_log: quaternion not unit-norm");
  Quat q = q_in;
  if (q.w < 0) q = {-q.w, -q.x, -q.y, -q.z};
  const double s = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
  const double f = s < 1e-8 ? 2.0 / q.w : 2.0 * std::atan2(s, q.w) / s;
  return {f * q.x, f * q.y, f * q.z};
}

template <typename T>
typename Graph<T>::Value apr_loss(Graph<T>& g, typename Graph<T>::Value p,
                                  typename Graph<T>::Value q,
                                  const Vec3& p_gt, const Quat& q_gt,
                                  const AprWeights<T>& w) {
  const Vec3 lg = quat_log(q_gt);
  Tensor<T> pg({3}, {static_cast<T>(p_gt.x), static_cast<T>(p_gt.y), static_cast<T>(p_gt.z)});
  Tensor<T> lq({3}, {static_cast<T>(lg.x), static_cast<T>(lg.y), static_cast<T>(lg.z)});
  auto beta = g.param(*w.beta);
  auto gamma = g.param(*w.gamma);
  auto pos_term = g.mul(g.exp(g.scale(beta, T(-1))), g.l1(g.sub(p, g.constant(pg))));
  auto rot_term =
      g.mul(g.exp(g.scale(gamma, T(-1))), g.l1(g.sub(g.quat_log(q), g.constant(lq))));
  return g.add(g.add(pos_term, rot_term), g.add(beta, gamma));
}

template typename Graph<float>::Value apr_loss<float>(
    Graph<float>&, typename Graph<float>::Value, typename Graph<float>::Value,
    const Vec3&, const Quat&, const AprWeights<float>&);
template typename Graph<double>::Value apr_loss<double>(
    Graph<double>&, typename Graph<double>::Value, typename Graph<double>::Value,
    const Vec3&, const Quat&, const AprWeights<double>&);

double apr_loss(const Vec3& p, const Quat& q, const Vec3& p_gt, const Quat& q_gt,
                double beta, double gamma) {
  const Vec3 dp = p - p_gt;
  const Vec3 dl = quat_log(q) - quat_log(q_gt);
  const double l1p = std::abs(dp.x) + std::abs(dp.y) + std::abs(dp.z);
  const double l1r = std::abs(dl.x) + std::abs(dl.y) + std::abs(dl.z);
  return std::exp(-beta) * l1p + std::exp(-gamma) * l1r + beta + gamma;
}

double stereo_mse_log_loss(const TensorF& pred_disp, const TensorF& gt_disp, double eps) {
  check_dim(eps > 0, "stereo loss: eps must be > 0");
  check_dim(pred_disp.same_shape(gt_disp), "stereo loss: shape mismatch");
  double sum = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < gt_disp.numel(); ++i) {
    if (!std::isfinite(gt_disp.data[i])) continue;
    const double lp = std::log(std::max(static_cast<double>(pred_disp.data[i]), eps));
    const double lg = std::log(std::max(static_cast<double>(gt_disp.data[i]), eps));
    sum += (lp - lg) * (lp - lg);
    ++n;
  }
  if (n == 0) throw DataError("stereo loss undefined: no valid pixels");
  return sum / static_cast<double>(n);
}

double metric_aepe(const FlowField& pred, const FlowField& gt,
                   const std::vector<uint8_t>& valid) {
  check_dim(pred.u.same_shape(gt.u) && pred.v.same_shape(gt.v),
            "aepe: flow shapes differ");
  check_dim(valid.empty() || static_cast<int64_t>(valid.size()) == gt.u.numel(),
            "aepe: valid mask length mismatch");
  double sum = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < gt.u.numel(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    const double du = pred.u.data[i] - gt.u.data[i];
    const double dv = pred.v.data[i] - gt.v.data[i];
    sum += std::sqrt(du * du + dv * dv);
    ++n;
  }
  if (n == 0) throw DataError("aepe undefined: empty valid set");
  return sum / static_cast<double>(n);
}

double metric_delta1(const TensorF& pred_depth, const TensorF& gt_depth,
                     double threshold) {
  check_dim(pred_depth.same_shape(gt_depth), "delta1: shape mismatch");
  int64_t n = 0, good = 0;
  for (int64_t i = 0; i < gt_depth.numel(); ++i) {
    const double g = gt_depth.data[i];
    if (!(std::isfinite(g) && g > 0)) continue;
    ++n;
    const double p = pred_depth.data[i];
    if (p > 0 && std::max(p / g, g / p) < threshold) ++good;
  }
  if (n == 0) throw DataError("delta1 undefined: no valid pixels");
  return static_cast<double>(good) / static_cast<double>(n);
}

double metric_bad3(const TensorF& pred_disp, const TensorF& gt_disp) {
  check_dim(pred_disp.same_shape(gt_disp), "bad3: shape mismatch");
  int64_t n = 0, bad = 0;
  for (int64_t i = 0; i < gt_disp.numel(); ++i) {
    const double g = gt_disp.data[i];
    if (!std::isfinite(g)) continue;
    ++n;
    const double err = std::abs(pred_disp.data[i] - g);
    if (err > 3.0 && err > 0.05 * std::abs(g)) ++bad;
  }
  if (n == 0) throw DataError("bad3 undefined: no valid pixels");
  return static_cast<double>(bad) / static_cast<double>(n);
}

double metric_l1x1000(const TensorF& pred, const TensorF& gt,
                      const std::vector<uint8_t>& valid) {
  check_dim(pred.same_shape(gt), "l1: shape mismatch");
  check_dim(valid.empty() || static_cast<int64_t>(valid.size()) == gt.numel(),
            "l1: valid mask length mismatch");
  double sum = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    sum += std::abs(static_cast<double>(pred.data[i]) - static_cast<double>(gt.data[i]));
    ++n;
  }
  if (n == 0) throw DataError("l1 undefined: empty valid set");
  return 1000.0 * sum / static_cast<double>(n);
}

}  // namespace cvc
