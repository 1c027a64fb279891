#include "cvc/pairs.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

namespace cvc {

Mat3 Mat3::rotation_x(double a) {
  Mat3 r;
  r.m = {1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a)};
  return r;
}
Mat3 Mat3::rotation_y(double a) {
  Mat3 r;
  r.m = {std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a)};
  return r;
}
Mat3 Mat3::rotation_z(double a) {
  Mat3 r;
  r.m = {std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1};
  return r;
}

Mat3 Mat3::mul(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
      r(i, j) = s;
    }
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
  return r;
}

double Mat3::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

bool is_rotation(const Mat3& R, double tol) {
  Mat3 g = R.transposed().mul(R);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (std::abs(g(i, j) - (i == j ? 1.0 : 0.0)) > tol) return false;
  return R.det() > 0;
}

Intrinsics Intrinsics::from_fov(int64_t width, int64_t height, double hfov_rad) {
  Intrinsics k;
  k.fx = static_cast<double>(width) / (2.0 * std::tan(hfov_rad / 2.0));
  k.fy = k.fx;
  k.cx = (static_cast<double>(width) - 1.0) / 2.0;
  k.cy = (static_cast<double>(height) - 1.0) / 2.0;
  return k;
}

void CameraView::validate() const {
  if (!is_rotation(pose.R)) throw DataError("camera pose rotation is not in SO(3)");
  check_dim(depth.ndim() == 2 && depth.dim(0) == image.height && depth.dim(1) == image.width,
            "depth map dims do not match image");
  for (float d : depth.data)
    if (std::isfinite(d) && d <= 0.f) throw DataError("non-positive finite depth value");
}

CovisResult covisibility_ratio(const CameraView& a, const CameraView& b, double tau) {
  check_dim(tau > 0, "covisibility tau must be > 0");
  auto directed = [tau](const CameraView& src, const CameraView& dst) {
    const int64_t H = src.depth.dim(0), W = src.depth.dim(1);
    const int64_t Hd = dst.depth.dim(0), Wd = dst.depth.dim(1);
    // precomposed src-camera -> dst-camera rigid transform
    const Mat3 R_rel = dst.pose.R.transposed().mul(src.pose.R);
    const Vec3 t_rel = dst.pose.R.apply_transposed(src.pose.t - dst.pose.t);
    int64_t n_geom = 0, n_vis = 0;
    for (int64_t v = 0; v < H; ++v)
      for (int64_t u = 0; u < W; ++u) {
        const double z = src.depth.at(v, u);
        if (!std::isfinite(z)) continue;
        ++n_geom;
        const Vec3 p_src{(static_cast<double>(u) - src.intr.cx) / src.intr.fx * z,
                         (static_cast<double>(v) - src.intr.cy) / src.intr.fy * z, z};
        const Vec3 p_dst = R_rel.apply(p_src) + t_rel;
        if (!(p_dst.z > 0)) continue;  // behind the destination camera
        const double ud = dst.intr.fx * p_dst.x / p_dst.z + dst.intr.cx;
        const double vd = dst.intr.fy * p_dst.y / p_dst.z + dst.intr.cy;
        const int64_t ui = std::llround(ud);
        const int64_t vi = std::llround(vd);
        if (ui < 0 || ui >= Wd || vi < 0 || vi >= Hd) continue;
        const double zd = dst.depth.at(vi, ui);
        if (!std::isfinite(zd)) continue;
        if (std::abs(p_dst.z - zd) <= tau * zd) ++n_vis;
      }
    if (n_geom == 0) throw DataError("covisibility undefined: view has no geometry pixels");
    return static_cast<double>(n_vis) / static_cast<double>(n_geom);
  };
  CovisResult r;
  r.v_ab = directed(a, b);
  r.v_ba = directed(b, a);
  r.covis = std::min(r.v_ab, r.v_ba);
  return r;
}

std::vector<PairManifestEntry> sample_pairs(const std::vector<CameraView>& views,
                                            double lo, double hi, int64_t cap,
                                            uint64_t seed, double tau) {
  check_dim(0.0 <= lo && lo < hi && hi <= 1.0, "sample_pairs: need 0 <= lo < hi <= 1");
  std::vector<PairManifestEntry> qualifying;
  for (size_t i = 0; i < views.size(); ++i)
    for (size_t j = i + 1; j < views.size(); ++j) {
      CovisResult c = covisibility_ratio(views[i], views[j], tau);
      if (c.covis >= lo && c.covis <= hi)
        qualifying.push_back({views[i].id, views[j].id, c.covis});
    }
  std::mt19937_64 rng(seed);
  std::shuffle(qualifying.begin(), qualifying.end(), rng);
  if (cap >= 0 && static_cast<int64_t>(qualifying.size()) > cap)
    qualifying.resize(static_cast<size_t>(cap));
  std::sort(qualifying.begin(), qualifying.end(), [](const auto& a, const auto& b) {
    return std::tie(a.path_view1, a.path_view2) < std::tie(b.path_view1, b.path_view2);
  });
  return qualifying;
}

void write_manifest(const std::string& path, const std::vector<PairManifestEntry>& entries) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path);
  for (const auto& e : entries) {
    nlohmann::json j = {{"path_view1", e.path_view1},
                        {"path_view2", e.path_view2},
                        {"covis", e.covis}};
    f << j.dump() << '\n';
  }
}

std::vector<PairManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  std::vector<PairManifestEntry> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw DataError("manifest " + path + ": bad JSON at line " + std::to_string(lineno));
    PairManifestEntry e;
    e.path_view1 = j.at("path_view1").get<std::string>();
    e.path_view2 = j.at("path_view2").get<std::string>();
    e.covis = j.at("covis").get<double>();
    out.push_back(std::move(e));
  }
  return out;
}

// ---- homographies ----

std::pair<double, double> Homography::apply(double x, double y) const {
  const double w = h[6] * x + h[7] * y + h[8];
  return {(h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w};
}

std::optional<Homography> Homography::inverse() const {
  Eigen::Matrix3d M;
  for (int i = 0; i < 9; ++i) M(i / 3, i % 3) = h[i];
  if (std::abs(M.determinant()) < 1e-12) return std::nullopt;
  Eigen::Matrix3d inv = M.inverse();
  Homography out;
  for (int i = 0; i < 9; ++i) out.h[i] = inv(i / 3, i % 3);
  if (std::abs(out.h[8]) > 1e-12)
    for (int i = 0; i < 9; ++i) out.h[i] /= inv(2, 2);
  return out;
}

Homography solve_dlt(const std::array<std::pair<double, double>, 4>& src,
                     const std::array<std::pair<double, double>, 4>& dst) {
  // Hartley normalization of both point sets
  auto normalize = [](const std::array<std::pair<double, double>, 4>& pts) {
    double mx = 0, my = 0;
    for (auto& p : pts) mx += p.first, my += p.second;
    mx /= 4, my /= 4;
    double md = 0;
    for (auto& p : pts) md += std::hypot(p.first - mx, p.second - my);
    md /= 4;
    const double s = md > 1e-12 ? std::sqrt(2.0) / md : 1.0;
    Eigen::Matrix3d T;
    T << s, 0, -s * mx, 0, s, -s * my, 0, 0, 1;
    return T;
  };
  const Eigen::Matrix3d Ts = normalize(src);
  const Eigen::Matrix3d Td = normalize(dst);
  Eigen::Matrix<double, 8, 9> A;
  for (int i = 0; i < 4; ++i) {
    const Eigen::Vector3d s = Ts * Eigen::Vector3d(src[i].first, src[i].second, 1.0);
    const Eigen::Vector3d d = Td * Eigen::Vector3d(dst[i].first, dst[i].second, 1.0);
    const double x = s.x() / s.z(), y = s.y() / s.z();
    const double xp = d.x() / d.z(), yp = d.y() / d.z();
    A.row(2 * i) << -x, -y, -1, 0, 0, 0, x * xp, y * xp, xp;
    A.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, x * yp, y * yp, yp;
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, 8, 9>> svd(A, Eigen::ComputeFullV);
  Eigen::Matrix<double, 9, 1> hvec = svd.matrixV().col(8);
  Eigen::Matrix3d Hn;
  Hn << hvec(0), hvec(1), hvec(2), hvec(3), hvec(4), hvec(5), hvec(6), hvec(7), hvec(8);
  Eigen::Matrix3d H = Td.inverse() * Hn * Ts;
  Homography out;
  if (std::abs(H(2, 2)) < 1e-12) throw NumericError("degenerate homography from DLT");
  for (int i = 0; i < 9; ++i) out.h[i] = H(i / 3, i % 3) / H(2, 2);
  return out;
}

namespace {
float sample_bilinear(const Image& img, double x, double y, int c) {
  // edge clamp
  x = std::min(std::max(x, 0.0), static_cast<double>(img.width - 1));
  y = std::min(std::max(y, 0.0), static_cast<double>(img.height - 1));
  const int64_t x0 = static_cast<int64_t>(std::floor(x));
  const int64_t y0 = static_cast<int64_t>(std::floor(y));
  const int64_t x1 = std::min(x0 + 1, img.width - 1);
  const int64_t y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double v = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                   fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
  return static_cast<float>(v);
}
}  // namespace

Image warp_homography(const Image& img, const Homography& H) {
  auto Hinv = H.inverse();
  if (!Hinv) throw NumericError("warp: homography is not invertible");
  Image out(img.height, img.width);
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x) {
      auto [sx, sy] = Hinv->apply(static_cast<double>(x), static_cast<double>(y));
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(img, sx, sy, c);
    }
  return out;
}

std::pair<Image, Image> homography_pair(const Image& img, double strength,
                                        uint64_t seed, double jitter) {
  std::mt19937_64 rng(seed);
  const double W = static_cast<double>(img.width - 1);
  const double Hh = static_cast<double>(img.height - 1);
  const std::array<std::pair<double, double>, 4> corners = {
      {{0, 0}, {W, 0}, {W, Hh}, {0, Hh}}};
  Homography H;
  for (int attempt = 0;; ++attempt) {
    std::array<std::pair<double, double>, 4> moved = corners;
    std::uniform_real_distribution<double> dx(-strength * W, strength * W);
    std::uniform_real_distribution<double> dy(-strength * Hh, strength * Hh);
    if (strength > 0)
      for (auto& p : moved) p = {p.first + dx(rng), p.second + dy(rng)};
    try {
      H = solve_dlt(corners, moved);
    } catch (const NumericError&) {
      if (attempt > 64) throw;
      continue;
    }
    if (H.inverse()) break;
    if (attempt > 64) throw NumericError("homography_pair: could not draw an invertible warp");
  }
  Image warped = warp_homography(img, H);
  if (jitter > 0) {
    std::uniform_real_distribution<double> jf(1.0 - jitter, 1.0 + jitter);
    const double fb = jf(rng), fc = jf(rng), fs = jf(rng);
    double mean_gray = 0;
    for (int64_t i = 0; i < warped.height * warped.width; ++i)
      mean_gray += 0.299 * warped.data[i * 3] + 0.587 * warped.data[i * 3 + 1] +
                   0.114 * warped.data[i * 3 + 2];
    mean_gray /= static_cast<double>(warped.height * warped.width);
    for (int64_t i = 0; i < warped.height * warped.width; ++i) {
      const double gray = 0.299 * warped.data[i * 3] + 0.587 * warped.data[i * 3 + 1] +
                          0.114 * warped.data[i * 3 + 2];
      for (int c = 0; c < 3; ++c) {
        double v = warped.data[i * 3 + c] * fb;           // brightness
        v = mean_gray + (v - mean_gray) * fc;             // contrast
        v = gray + (v - gray) * fs;                       // saturation
        warped.data[i * 3 + c] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
    }
  }
  return {img, std::move(warped)};
}

// ---- toy renderer ----

CameraView render_toy_scene(const Scene& scene, const Intrinsics& intr,
                            const Pose& pose, int64_t width, int64_t height) {
  constexpr double kNear = 0.01;
  CameraView view;
  view.image = Image(height, width);
  view.depth = TensorF({height, width});
  view.intr = intr;
  view.pose = pose;
  for (int64_t v = 0; v < height; ++v)
    for (int64_t u = 0; u < width; ++u) {
      // ray parameterized by camera z so the hit parameter is the z-depth
      const Vec3 dir_cam{(static_cast<double>(u) - intr.cx) / intr.fx,
                         (static_cast<double>(v) - intr.cy) / intr.fy, 1.0};
      const Vec3 dir = pose.R.apply(dir_cam);
      const Vec3& origin = pose.t;
      double best = std::numeric_limits<double>::infinity();
      const TexturedRect* hit = nullptr;
      double h0 = 0, h1 = 0;
      for (const auto& rect : scene.rects) {
        const double o_ax = rect.axis == 0 ? origin.x : rect.axis == 1 ? origin.y : origin.z;
        const double d_ax = rect.axis == 0 ? dir.x : rect.axis == 1 ? dir.y : dir.z;
        if (std::abs(d_ax) < 1e-15) continue;
        const double s = (rect.offset - o_ax) / d_ax;
        if (s < kNear || s >= best) continue;
        const Vec3 p = origin + dir * s;
        double c0, c1;
        switch (rect.axis) {
          case 0: c0 = p.y, c1 = p.z; break;
          case 1: c0 = p.x, c1 = p.z; break;
          default: c0 = p.x, c1 = p.y; break;
        }
        if (c0 < rect.lo0 || c0 > rect.hi0 || c1 < rect.lo1 || c1 > rect.hi1) continue;
        best = s;
        hit = &rect;
        h0 = c0, h1 = c1;
      }
      if (!hit) {
        view.depth.at(v, u) = std::numeric_limits<float>::quiet_NaN();
        for (int c = 0; c < 3; ++c) view.image.at(v, u, c) = scene.background[c];
        continue;
      }
      view.depth.at(v, u) = static_cast<float>(best);
      if (hit->texture) {
        const double tx = (h0 - hit->lo0) / (hit->hi0 - hit->lo0) *
                          static_cast<double>(hit->texture->width - 1);
        const double ty = (h1 - hit->lo1) / (hit->hi1 - hit->lo1) *
                          static_cast<double>(hit->texture->height - 1);
        for (int c = 0; c < 3; ++c)
          view.image.at(v, u, c) = sample_bilinear(*hit->texture, tx, ty, c);
      } else {
        const int64_t i0 = static_cast<int64_t>(std::floor(h0 / hit->checker_size));
        const int64_t i1 = static_cast<int64_t>(std::floor(h1 / hit->checker_size));
        const float* col = ((i0 + i1) & 1) == 0 ? hit->color_a : hit->color_b;
        for (int c = 0; c < 3; ++c) view.image.at(v, u, c) = col[c];
      }
    }
  return view;
}

// ---- CRDP I/O ----

void write_crdp(const std::string& path, int64_t height, int64_t width,
                int64_t channels, const std::vector<float>& data) {
  check_dim(height > 0 && width > 0 && channels >= 0, "crdp: bad dims");
  const int64_t c = channels == 0 ? 1 : channels;
  check_dim(static_cast<int64_t>(data.size()) == height * width * c,
            "crdp: data size does not match dims");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write map file: " + path);
  const char magic[4] = {'C', 'R', 'D', 'P'};
  f.write(magic, 4);
  auto put_u32 = [&f](uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(static_cast<uint32_t>(height));
  put_u32(static_cast<uint32_t>(width));
  put_u32(static_cast<uint32_t>(channels));
  static_assert(sizeof(float) == 4);
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!f) throw DataError("map write failed: " + path);
}

CrdpMap read_crdp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open map file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "CRDP", 4) != 0)
    throw DataError("bad map header (magic) at offset 0 in " + path);
  auto get_u32 = [&](const char* what, int64_t offset) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (f.gcount() != 4)
      throw DataError(std::string("bad map header (") + what + ") at offset " +
                      std::to_string(offset) + " in " + path);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  };
  CrdpMap m;
  m.height = get_u32("height", 4);
  m.width = get_u32("width", 8);
  const uint32_t reserved = get_u32("reserved", 12);
  m.channels = reserved == 0 ? 1 : static_cast<int64_t>(reserved);
  if (m.height <= 0 || m.width <= 0 || m.channels > 16)
    throw DataError("bad map header (dims) in " + path);
  m.data.resize(static_cast<size_t>(m.height * m.width * m.channels));
  f.read(reinterpret_cast<char*>(m.data.data()),
         static_cast<std::streamsize>(m.data.size() * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(m.data.size() * sizeof(float)))
    throw DataError("map payload truncated in " + path);
  return m;
}

}  // namespace cvc
