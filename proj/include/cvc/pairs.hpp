#pragma once

#include <array>
#include <optional>

#include "cvc/patches.hpp"

namespace cvc {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
};

struct Mat3 {
  // row-major
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 rotation_x(double rad);
  static Mat3 rotation_y(double rad);
  static Mat3 rotation_z(double rad);

  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }
  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Vec3 apply_transposed(const Vec3& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }
  Mat3 mul(const Mat3& o) const;
  Mat3 transposed() const;
  double det() const;
};

// Rigid world-from-camera transform.
struct Pose {
  Mat3 R;
  Vec3 t;

  Vec3 cam_to_world(const Vec3& p) const { return R.apply(p) + t; }
  Vec3 world_to_cam(const Vec3& p) const { return R.apply_transposed(p - t); }
};

// RtR = I within tol and det R = +1.
bool is_rotation(const Mat3& R, double tol = 1e-6);

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;

  // Standard pinhole with +z forward; pixel (row, col) sits at continuous
  // coordinates (u=col, v=row).
  static Intrinsics from_fov(int64_t width, int64_t height, double hfov_rad);
};

// Posed RGB-D view; non-finite depth marks pixels without geometry.
struct CameraView {
  std::string id;       // path stem when loaded from disk
  Image image;
  TensorF depth;        // [H, W] meters, z-depth
  Intrinsics intr;
  Pose pose;            // world from camera

  void validate() const;
};

struct CovisResult {
  double v_ab = 0;   // fraction of a's geometry pixels visible in b
  double v_ba = 0;
  double covis = 0;  // min(v_ab, v_ba)
};

// Depth-reprojection visibility: a pixel of a counts as visible in b when its
// backprojected point lands in front of b, inside b's bounds, and within
// relative depth tolerance tau of b's nearest-pixel depth.
CovisResult covisibility_ratio(const CameraView& a, const CameraView& b,
                               double tau = 0.02);

struct PairManifestEntry {
  std::string path_view1;
  std::string path_view2;
  double covis = 0;
};

// Uniform sample (without replacement) of up to `cap` unordered view pairs
// with covis in [lo, hi]; output sorted by (path1, path2) for stable files.
std::vector<PairManifestEntry> sample_pairs(const std::vector<CameraView>& views,
                                            double lo, double hi, int64_t cap,
                                            uint64_t seed, double tau = 0.02);

void write_manifest(const std::string& path, const std::vector<PairManifestEntry>& entries);
std::vector<PairManifestEntry> read_manifest(const std::string& path);

// ---- homography pairs ----

struct Homography {
  std::array<double, 9> h{1, 0, 0, 0, 1, 0, 0, 0, 1};

  // maps source (x, y) to target coordinates
  std::pair<double, double> apply(double x, double y) const;
  std::optional<Homography> inverse() const;
};

// Direct linear transform from exactly four correspondences, with
// normalization for conditioning. Result scaled so h[8] = 1.
Homography solve_dlt(const std::array<std::pair<double, double>, 4>& src,
                     const std::array<std::pair<double, double>, 4>& dst);

// out(p) = img(H^-1 p), bilinear, coordinates clamped to the image edge.
Image warp_homography(const Image& img, const Homography& H);

// Second view = warp of the first under a random corner-perturbation
// homography plus color jitter (brightness/contrast/saturation factors in
// 1 +- jitter). strength bounds the corner shift as a fraction of image size.
std::pair<Image, Image> homography_pair(const Image& img, double strength,
                                        uint64_t seed, double jitter = 0.2);

// ---- toy scene renderer ----

// Axis-aligned textured rectangle: the `axis` coordinate is fixed at
// `offset`; lo/hi bound the remaining two axes in ascending axis order.
struct TexturedRect {
  int axis = 2;
  double offset = 0;
  double lo0 = 0, hi0 = 0, lo1 = 0, hi1 = 0;
  // checkerboard in world units, plus an optional image texture stretched
  // over the rectangle (overrides the checkerboard)
  float color_a[3] = {0.9f, 0.9f, 0.9f};
  float color_b[3] = {0.1f, 0.1f, 0.1f};
  double checker_size = 0.25;
  const Image* texture = nullptr;
};

struct Scene {
  std::vector<TexturedRect> rects;
  float background[3] = {0.f, 0.f, 0.f};
};

// Pinhole ray-cast with z-buffer ordering. Pixels that hit nothing get
// non-finite depth; hits closer than the 0.01 m near plane are ignored.
CameraView render_toy_scene(const Scene& scene, const Intrinsics& intr,
                            const Pose& pose, int64_t width, int64_t height);

// ---- raw float map I/O ----
// 16-byte header: magic "CRDP", u32 height, u32 width, u32 reserved
// (channel count for flow/disparity maps, 0 for plain depth), then
// little-endian float32, row-major, channel-interleaved.

void write_crdp(const std::string& path, int64_t height, int64_t width,
                int64_t channels, const std::vector<float>& data);

struct CrdpMap {
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 1;  // reserved==0 reads as 1
  std::vector<float> data;
};
CrdpMap read_crdp(const std::string& path);

}  // namespace cvc
