#pragma once

// Pinhole camera with radial-tangential distortion (k1, k2, p1, p2) applied to
// normalized image coordinates before the intrinsics.

#include <cmath>
#include <optional>

#include "costereo/errors.hpp"
#include "costereo/geometry.hpp"

namespace costereo {

using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat2 = Eigen::Matrix2d;

struct CameraIntrinsics {
  double fx = 320.0;
  double fy = 320.0;
  double cx = 320.0;
  double cy = 240.0;
  double width = 640.0;
  double height = 480.0;
  Eigen::Vector4d dist = Eigen::Vector4d::Zero();  // k1, k2, p1, p2
  double fov_alpha = 2.0 * std::atan(320.0 / 320.0);

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("camera: fx, fy must be > 0");
    if (!(cx > 0.0 && cx < width && cy > 0.0 && cy < height))
      throw ConfigError("camera: principal point outside image");
    if (!(fov_alpha > 0.0 && fov_alpha < kPi))
      throw ConfigError("camera: fov_alpha must lie in (0, pi)");
  }

  bool in_bounds(const Vec2& px) const {
    return px.x() >= 0.0 && px.x() < width && px.y() >= 0.0 && px.y() < height;
  }

  /// Horizontal field of view implied by fx and the image width.
  double horizontal_fov() const { return 2.0 * std::atan(0.5 * width / fx); }
};

/// Body-to-camera transform: p_C = q_bc * p_B + t_bc.
struct Extrinsic {
  Vec3 t_bc = Vec3::Zero();
  UnitQuaternion q_bc;

  Vec3 to_camera(const Vec3& p_body) const { return q_bc * p_body + t_bc; }
  Vec3 to_body(const Vec3& p_cam) const {
    return q_bc.inverse() * (p_cam - t_bc);
  }
};

inline constexpr double kMinDepth = 0.1;

inline Vec2 distort(const Eigen::Vector4d& d, const Vec2& n) {
  const double x = n.x(), y = n.y();
  const double r2 = x * x + y * y;
  const double rad = 1.0 + d[0] * r2 + d[1] * r2 * r2;
  return {x * rad + 2.0 * d[2] * x * y + d[3] * (r2 + 2.0 * x * x),
          y * rad + d[2] * (r2 + 2.0 * y * y) + 2.0 * d[3] * x * y};
}

inline Mat2 distort_jacobian(const Eigen::Vector4d& d, const Vec2& n) {
  const double x = n.x(), y = n.y();
  const double r2 = x * x + y * y;
  const double rad = 1.0 + d[0] * r2 + d[1] * r2 * r2;
  const double drad = d[0] + 2.0 * d[1] * r2;  // d(rad)/d(r2)
  Mat2 J;
  J(0, 0) = rad + 2.0 * x * x * drad + 2.0 * d[2] * y + 6.0 * d[3] * x;
  J(0, 1) = 2.0 * x * y * drad + 2.0 * d[2] * x + 2.0 * d[3] * y;
  J(1, 0) = 2.0 * x * y * drad + 2.0 * d[2] * x + 2.0 * d[3] * y;
  J(1, 1) = rad + 2.0 * y * y * drad + 6.0 * d[2] * y + 2.0 * d[3] * x;
  return J;
}

/// Inverts the distortion by fixed-point iteration.
inline Vec2 undistort(const Eigen::Vector4d& d, const Vec2& nd) {
  if (d.isZero(0.0)) return nd;
  Vec2 n = nd;
  for (int it = 0; it < 30; ++it) {
    const Vec2 err = distort(d, n) - nd;
    if (err.squaredNorm() < 1e-24) break;
    n -= distort_jacobian(d, n).lu().solve(err);
  }
  return n;
}

/// Camera-frame point to pixel (no visibility checks).
inline Vec2 pixel_from_camera(const CameraIntrinsics& K, const Vec3& p_c) {
  const Vec2 n(p_c.x() / p_c.z(), p_c.y() / p_c.z());
  const Vec2 nd = distort(K.dist, n);
  return {K.fx * nd.x() + K.cx, K.fy * nd.y() + K.cy};
}

/// d(pixel)/d(p_c).
inline Mat23 pixel_jacobian(const CameraIntrinsics& K, const Vec3& p_c) {
  const double iz = 1.0 / p_c.z();
  const Vec2 n(p_c.x() * iz, p_c.y() * iz);
  Mat23 dn;
  dn << iz, 0.0, -p_c.x() * iz * iz, 0.0, iz, -p_c.y() * iz * iz;
  Mat2 f = Mat2::Zero();
  f(0, 0) = K.fx;
  f(1, 1) = K.fy;
  return f * distort_jacobian(K.dist, n) * dn;
}

/// Pixel to unit-depth ray (z = 1) in the camera frame.
inline Vec3 ray_from_pixel(const CameraIntrinsics& K, const Vec2& px) {
  const Vec2 nd((px.x() - K.cx) / K.fx, (px.y() - K.cy) / K.fy);
  const Vec2 n = undistort(K.dist, nd);
  return {n.x(), n.y(), 1.0};
}

/// Projects a camera-frame point; nullopt when behind the depth floor or
/// outside the image.
inline std::optional<Vec2> project_camera_point(const CameraIntrinsics& K,
                                                const Vec3& p_c) {
  if (!(p_c.z() > kMinDepth)) return std::nullopt;
  const Vec2 px = pixel_from_camera(K, p_c);
  if (!px.allFinite() || !K.in_bounds(px)) return std::nullopt;
  return px;
}

}  // namespace costereo
