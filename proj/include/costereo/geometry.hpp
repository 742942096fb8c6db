#pragma once

// Quaternion / rigid-transform algebra shared by the simulator, the front-end
// and the relative pose filter.
//
// Conventions:
//  - Hamilton quaternions, scalar-first storage (w, x, y, z).
//  - A pose (t, q) of frame C in frame P maps child coordinates to parent
//    coordinates: p_P = q * p_C + t.
//  - Orientation errors are right-multiplicative: q = q_hat (x) exp(dtheta).

#include <array>
#include <cmath>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace costereo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Minimal orientation error / axis-angle vector [rad].
using RotVec = Eigen::Vector3d;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSmallAngle = 1e-7;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Unit quaternion with the norm invariant enforced on every construction.
class UnitQuaternion {
public:
  UnitQuaternion() : q_(1.0, 0.0, 0.0, 0.0) {}
  UnitQuaternion(double w, double x, double y, double z) : q_(w, x, y, z) {
    normalize();
  }
  explicit UnitQuaternion(const Eigen::Quaterniond& q) : q_(q) { normalize(); }

  static UnitQuaternion identity() { return {}; }

  static UnitQuaternion from_matrix(const Mat3& R) {
    return UnitQuaternion(Eigen::Quaterniond(R));
  }

  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }

  const Eigen::Quaterniond& eigen() const { return q_; }
  Mat3 matrix() const { return q_.toRotationMatrix(); }

  UnitQuaternion conjugate() const {
    return UnitQuaternion(w(), -x(), -y(), -z());
  }
  UnitQuaternion inverse() const { return conjugate(); }

  /// Representative with w >= 0 (double cover).
  UnitQuaternion canonical() const {
    return w() < 0.0 ? UnitQuaternion(-w(), -x(), -y(), -z()) : *this;
  }

  /// [w, x, y, z] of the canonical representative.
  std::array<double, 4> wxyz() const {
    const auto c = canonical();
    return {c.w(), c.x(), c.y(), c.z()};
  }

private:
  void normalize() {
    const double n = q_.norm();
    if (n > 0.0 && std::isfinite(n)) {
      q_.coeffs() /= n;
    } else {
      q_ = Eigen::Quaterniond::Identity();
    }
  }

  Eigen::Quaterniond q_;
};

/// Hamilton product a (x) b, renormalized.
inline UnitQuaternion quat_compose(const UnitQuaternion& a,
                                   const UnitQuaternion& b) {
  return UnitQuaternion(a.eigen() * b.eigen());
}

inline UnitQuaternion operator*(const UnitQuaternion& a,
                                const UnitQuaternion& b) {
  return quat_compose(a, b);
}

/// R(q) v.
inline Vec3 quat_rotate(const UnitQuaternion& q, const Vec3& v) {
  return q.eigen() * v;
}

inline Vec3 operator*(const UnitQuaternion& q, const Vec3& v) {
  return quat_rotate(q, v);
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

inline UnitQuaternion so3_exp(const RotVec& theta) {
  const double angle = theta.norm();
  if (angle < kSmallAngle) {
    return UnitQuaternion(1.0, 0.5 * theta.x(), 0.5 * theta.y(),
                          0.5 * theta.z());
  }
  const double half = 0.5 * angle;
  const Vec3 v = std::sin(half) / angle * theta;
  return UnitQuaternion(std::cos(half), v.x(), v.y(), v.z());
}

inline RotVec so3_log(const UnitQuaternion& q_in) {
  const UnitQuaternion q = q_in.canonical();
  const Vec3 v(q.x(), q.y(), q.z());
  const double vn = v.norm();
  if (vn < 0.5 * kSmallAngle) {
    return 2.0 * v / q.w();
  }
  const double angle = 2.0 * std::atan2(vn, q.w());
  return angle / vn * v;
}

/// Geodesic angle between two orientations [rad].
inline double angle_between(const UnitQuaternion& a, const UnitQuaternion& b) {
  return so3_log(a.inverse() * b).norm();
}

inline UnitQuaternion rot_x(double a) { return so3_exp(Vec3(a, 0, 0)); }
inline UnitQuaternion rot_y(double a) { return so3_exp(Vec3(0, a, 0)); }
inline UnitQuaternion rot_z(double a) { return so3_exp(Vec3(0, 0, a)); }

struct Pose {
  Vec3 t = Vec3::Zero();
  UnitQuaternion q;

  static Pose identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return q * p + t; }

  Pose inverse() const {
    const UnitQuaternion qi = q.inverse();
    return {-(qi * t), qi};
  }
};

/// a ∘ b: b expressed in a's parent frame.
inline Pose compose(const Pose& a, const Pose& b) {
  return {a.t + a.q * b.t, a.q * b.q};
}

inline Pose operator*(const Pose& a, const Pose& b) { return compose(a, b); }

/// T_i^{-1} ∘ T_j: pose of body j expressed in body i.
inline Pose relative_from_world(const Pose& pose_i, const Pose& pose_j) {
  const UnitQuaternion qi_inv = pose_i.q.inverse();
  return {qi_inv * (pose_j.t - pose_i.t), qi_inv * pose_j.q};
}

inline bool is_finite(const Pose& p) {
  return p.t.allFinite() && std::isfinite(p.q.w()) && std::isfinite(p.q.x()) &&
         std::isfinite(p.q.y()) && std::isfinite(p.q.z());
}

}  // namespace costereo
