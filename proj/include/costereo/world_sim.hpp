#pragma once

// Deterministic ground-truth world: formation trajectories for two UAVs, a
// planar landmark wall, camera observations, drifting VIO, and the
// overlapping-view geometry used to reason about spatial configurations.
//
// Frames: the world frame and every body frame are camera-aligned
// (x right, y down, z forward). The wall is the plane z = depth.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "costereo/camera.hpp"
#include "costereo/errors.hpp"
#include "costereo/geometry.hpp"
#include "costereo/rng.hpp"

namespace costereo {

enum class Uav { I = 0, J = 1 };

inline const char* to_string(Uav u) { return u == Uav::I ? "i" : "j"; }

struct Landmark {
  int id = 0;
  Vec3 p = Vec3::Zero();
};

/// Landmarks sorted by id.
using LandmarkSet = std::vector<Landmark>;

inline const Landmark* find_landmark(const LandmarkSet& set, int id) {
  auto it = std::lower_bound(set.begin(), set.end(), id,
                             [](const Landmark& l, int v) { return l.id < v; });
  if (it == set.end() || it->id != id) return nullptr;
  return &*it;
}

struct WallSpec {
  double width = 14.0;
  double height = 8.0;
  double spacing = 0.5;
  double depth = 5.0;
  double center_x = 0.0;
  double center_y = 0.0;
};

/// Grid of landmarks on the plane z = depth, ids assigned row-major from 0.
inline LandmarkSet make_landmark_wall(const WallSpec& w) {
  if (!(w.spacing > 0.0) || !(w.depth > 0.0))
    throw ConfigError("wall: spacing and depth must be > 0");
  const int nx = static_cast<int>(std::floor(w.width / w.spacing + 1e-9)) + 1;
  const int ny = static_cast<int>(std::floor(w.height / w.spacing + 1e-9)) + 1;
  const double x0 = w.center_x - 0.5 * (nx - 1) * w.spacing;
  const double y0 = w.center_y - 0.5 * (ny - 1) * w.spacing;
  LandmarkSet out;
  out.reserve(static_cast<std::size_t>(nx * ny));
  int id = 0;
  for (int r = 0; r < ny; ++r) {
    for (int c = 0; c < nx; ++c) {
      out.push_back({id++, Vec3(x0 + c * w.spacing, y0 + r * w.spacing, w.depth)});
    }
  }
  return out;
}

struct KeyPoint {
  int id = 0;
  Vec2 px = Vec2::Zero();
};

/// One camera frame of one UAV. `obs` holds the grid-sampled keypoints a
/// detector would extract; `visible` holds every in-view, unoccluded
/// projection (what a tracker can follow). Both sorted by id.
struct FrameObservation {
  Uav uav = Uav::I;
  double stamp = 0.0;
  std::vector<KeyPoint> obs;
  std::vector<KeyPoint> visible;

  static const KeyPoint* find_in(const std::vector<KeyPoint>& v, int id) {
    auto it = std::lower_bound(v.begin(), v.end(), id,
                               [](const KeyPoint& k, int x) { return k.id < x; });
    if (it == v.end() || it->id != id) return nullptr;
    return &*it;
  }
  const KeyPoint* keypoint(int id) const { return find_in(obs, id); }
  const KeyPoint* tracked(int id) const { return find_in(visible, id); }
};

struct PixelRect {
  double u0 = 0, v0 = 0, u1 = 0, v1 = 0;
  bool contains(const Vec2& px) const {
    return px.x() >= u0 && px.x() < u1 && px.y() >= v0 && px.y() < v1;
  }
};

/// Landmarks projecting inside any rectangle are hidden; the rest are
/// independently hidden with probability drop_prob.
struct OcclusionMask {
  std::vector<PixelRect> rects;
  double drop_prob = 0.0;

  bool empty() const { return rects.empty() && drop_prob <= 0.0; }

  static OcclusionMask full(const CameraIntrinsics& K) {
    return {{PixelRect{0, 0, K.width, K.height}}, 0.0};
  }
};

// ---------------------------------------------------------------- trajectories

enum class TrajectoryKind { Rectangle, Arc, Figure8, Lateral };

inline TrajectoryKind parse_trajectory_kind(const std::string& s) {
  if (s == "rectangle") return TrajectoryKind::Rectangle;
  if (s == "arc") return TrajectoryKind::Arc;
  if (s == "figure8") return TrajectoryKind::Figure8;
  if (s == "lateral") return TrajectoryKind::Lateral;
  throw ConfigError("unsupported trajectory kind '" + s + "'");
}

inline const char* to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::Rectangle: return "rectangle";
    case TrajectoryKind::Arc: return "arc";
    case TrajectoryKind::Figure8: return "figure8";
    case TrajectoryKind::Lateral: return "lateral";
  }
  return "?";
}

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::Rectangle;
  double extent = 2.0;          // m
  double speed = 0.5;           // m/s
  Vec3 baseline = Vec3(3, 0, 0);  // j relative to i, in i's body frame
  double yaw_theta = 0.0;       // rad, positive turns j's camera left
  double depth_d = 5.0;         // m, wall distance from i's start

  void validate() const {
    if (!(speed > 0.0)) throw ConfigError("trajectory: speed must be > 0");
    if (!(depth_d > 0.0)) throw ConfigError("trajectory: depth_d must be > 0");
    if (!(extent > 0.0)) throw ConfigError("trajectory: extent must be > 0");
  }

  /// Fixed offset of j's body in i's body frame.
  Pose formation_offset() const { return {baseline, rot_y(-yaw_theta)}; }
};

struct FormationSample {
  double stamp = 0.0;
  Pose i;
  Pose j;
};

namespace detail {

/// Position and orientation of UAV i after travelling arc length s.
class PathSampler {
public:
  explicit PathSampler(const TrajectorySpec& spec) : spec_(spec) {}

  Pose at(double s) const {
    switch (spec_.kind) {
      case TrajectoryKind::Rectangle: return rectangle(s);
      case TrajectoryKind::Arc: return arc(s);
      case TrajectoryKind::Figure8: return figure8(s);
      case TrajectoryKind::Lateral: return lateral(s);
    }
    throw ConfigError("unsupported trajectory kind");
  }

private:
  // Ping-pong parameter in [0, len].
  static double bounce(double s, double len) {
    const double m = std::fmod(s, 2.0 * len);
    return m <= len ? m : 2.0 * len - m;
  }

  // Rounded rectangle in the horizontal (x, z) plane, width extent and
  // depth extent/2, corner radius 0.15 extent; starts at the origin heading +x.
  Pose rectangle(double s) const {
    const double w = spec_.extent, h = 0.5 * spec_.extent;
    const double r = 0.15 * spec_.extent;
    const double lw = w - 2 * r, lh = h - 2 * r, la = 0.5 * kPi * r;
    const double perim = 2 * lw + 2 * lh + 4 * la;
    double u = std::fmod(s, perim);
    // Segments: bottom edge (z=0) +x, corner, right edge +z, corner, top -x,
    // corner, left -z, corner. Origin sits at the start of the bottom edge.
    const struct {
      double len;
      int type;  // 0 line, 1 corner
    } seg[8] = {{lw, 0}, {la, 1}, {lh, 0}, {la, 1}, {lw, 0}, {la, 1}, {lh, 0}, {la, 1}};
    const Vec3 corner_c[4] = {Vec3(lw, 0, r), Vec3(lw, 0, r + lh), Vec3(0, 0, r + lh),
                              Vec3(0, 0, r)};
    const Vec3 line_p0[4] = {Vec3(0, 0, 0), Vec3(lw + r, 0, r), Vec3(lw, 0, h),
                             Vec3(-r, 0, r + lh)};
    const Vec3 line_dir[4] = {Vec3(1, 0, 0), Vec3(0, 0, 1), Vec3(-1, 0, 0),
                              Vec3(0, 0, -1)};
    for (int k = 0; k < 8; ++k) {
      if (u <= seg[k].len || k == 7) {
        Vec3 p;
        if (seg[k].type == 0) {
          p = line_p0[k / 2] + u * line_dir[k / 2];
        } else {
          // Corner k/2: quarter circle starting perpendicular to the incoming edge.
          const double a = u / r;
          const Vec3 radial0 = -line_dir[(k / 2 + 1) % 4];  // centre -> corner start
          const Vec3 tangent0 = line_dir[k / 2];
          p = corner_c[k / 2] + r * (std::cos(a) * radial0 + std::sin(a) * tangent0);
        }
        return {p, UnitQuaternion::identity()};
      }
      u -= seg[k].len;
    }
    return {};
  }

  // Orbit of radius depth_d about the wall point straight ahead, camera kept
  // pointed at that point; sweeps +-extent/2 of arc length and bounces.
  Pose arc(double s) const {
    const double R = spec_.depth_d;
    const double half = 0.5 * spec_.extent;
    const double u = bounce(s + half, 2.0 * half) - half;
    const double phi = u / R;
    const Vec3 p(R * std::sin(phi), 0.0, R - R * std::cos(phi));
    return {p, rot_y(-phi)};
  }

  // Two tangent circles in the vertical (x, y) plane meeting at the origin.
  Pose figure8(double s) const {
    const double r = 0.25 * spec_.extent;
    const double circ = 2 * kPi * r;
    const double u = std::fmod(s, 2 * circ);
    Vec3 p;
    if (u < circ) {
      const double a = u / r;  // centre (r, 0), counter-clockwise from origin
      p = Vec3(r - r * std::cos(a), -r * std::sin(a), 0.0);
    } else {
      const double a = (u - circ) / r;  // centre (-r, 0), clockwise
      p = Vec3(-r + r * std::cos(a), -r * std::sin(a), 0.0);
    }
    return {p, UnitQuaternion::identity()};
  }

  // Straight line along -x (to the left), extent long, bouncing.
  Pose lateral(double s) const {
    const double u = bounce(s, spec_.extent);
    return {Vec3(-u, 0.0, 0.0), UnitQuaternion::identity()};
  }

  TrajectorySpec spec_;
};

}  // namespace detail

/// Formation trajectory sampled at `rate`; j = i ∘ (baseline, yaw).
inline std::vector<FormationSample> gen_trajectory(const TrajectorySpec& spec,
                                                   double rate, double duration) {
  spec.validate();
  if (!(rate > 0.0)) throw ConfigError("trajectory: rate must be > 0");
  std::vector<FormationSample> out;
  if (!(duration > 0.0)) return out;
  const auto n = static_cast<long>(std::floor(duration * rate + 1e-9));
  const detail::PathSampler path(spec);
  const Pose offset = spec.formation_offset();
  out.reserve(static_cast<std::size_t>(n));
  for (long k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) / rate;
    const Pose pi = path.at(spec.speed * t);
    out.push_back({t, pi, pi * offset});
  }
  return out;
}

// ----------------------------------------------------------------------- VIO

struct VioNoiseModel {
  double sigma_dt = 0.005;            // m per step
  double sigma_dq = deg2rad(0.05);    // rad per step
  double scale_drift = 1.0;

  void validate() const {
    if (sigma_dt < 0.0 || sigma_dq < 0.0) throw ConfigError("vio: sigmas must be >= 0");
    if (!(scale_drift > 0.0)) throw ConfigError("vio: scale_drift must be > 0");
  }
};

struct TimedPose {
  double stamp = 0.0;
  Pose pose;
};

/// Odometry in the UAV's home frame (first pose = identity), built by
/// composing noisy, scaled body-frame increments of the true motion.
inline std::vector<TimedPose> simulate_vio(const std::vector<TimedPose>& truth,
                                           const VioNoiseModel& noise,
                                           std::uint64_t seed) {
  noise.validate();
  std::vector<TimedPose> out;
  if (truth.empty()) return out;
  out.reserve(truth.size());
  Rng rng(seed);
  out.push_back({truth.front().stamp, Pose::identity()});
  for (std::size_t k = 1; k < truth.size(); ++k) {
    const Pose inc = relative_from_world(truth[k - 1].pose, truth[k].pose);
    Pose noisy;
    noisy.t = noise.scale_drift * inc.t + rng.normal3(noise.sigma_dt);
    noisy.q = inc.q * so3_exp(rng.normal3(noise.sigma_dq));
    out.push_back({truth[k].stamp, out.back().pose * noisy});
  }
  return out;
}

// ------------------------------------------------------------------ cameras

/// Pixel of a world point seen by the camera rigidly mounted on `body`, or
/// nullopt when behind the 0.1 m depth floor or outside the image.
inline std::optional<Vec2> project_point(const Pose& body, const CameraIntrinsics& K,
                                         const Vec3& p_world,
                                         const Extrinsic& ext = {}) {
  const Vec3 p_b = body.inverse().apply(p_world);
  return project_camera_point(K, ext.to_camera(p_b));
}

struct ObserveParams {
  double pixel_sigma = 1.0;
  double grid_px = 40.0;
  std::size_t max_features = 150;
};

inline FrameObservation observe_frame(Uav uav, double stamp, const Pose& body,
                                      const LandmarkSet& landmarks,
                                      const CameraIntrinsics& K, const Extrinsic& ext,
                                      const OcclusionMask& mask,
                                      const ObserveParams& params, std::uint64_t seed) {
  FrameObservation f;
  f.uav = uav;
  f.stamp = stamp;
  Rng rng(seed);
  const Pose world_to_body = body.inverse();
  for (const Landmark& l : landmarks) {
    const auto px = project_camera_point(K, ext.to_camera(world_to_body.apply(l.p)));
    if (!px) continue;
    bool hidden = false;
    for (const auto& r : mask.rects) hidden = hidden || r.contains(*px);
    if (hidden) continue;
    if (mask.drop_prob > 0.0 && rng.bernoulli(mask.drop_prob)) continue;
    const Vec2 noisy = *px + rng.normal2(params.pixel_sigma);
    if (!K.in_bounds(noisy)) continue;
    f.visible.push_back({l.id, noisy});
  }
  // Keypoints: one per grid cell (lowest id wins), capped.
  const int cols = static_cast<int>(std::ceil(K.width / params.grid_px));
  std::vector<char> taken;
  taken.assign(static_cast<std::size_t>(cols * std::ceil(K.height / params.grid_px) + 1), 0);
  for (const KeyPoint& kp : f.visible) {
    if (f.obs.size() >= params.max_features) break;
    const int cu = static_cast<int>(kp.px.x() / params.grid_px);
    const int cv = static_cast<int>(kp.px.y() / params.grid_px);
    const auto cell = static_cast<std::size_t>(cv * cols + cu);
    if (cell >= taken.size() || taken[cell]) continue;
    taken[cell] = 1;
    f.obs.push_back(kp);
  }
  return f;
}

/// Camera-frame depth of every tracked landmark in UAV i's frame, with
/// Gaussian noise. Each landmark's draw depends only on (seed, id).
inline std::map<int, double> sample_depth(const FrameObservation& frame_i,
                                          const Pose& body_i,
                                          const LandmarkSet& landmarks,
                                          const Extrinsic& ext, double depth_sigma,
                                          std::uint64_t seed) {
  std::map<int, double> out;
  const Pose world_to_body = body_i.inverse();
  for (const KeyPoint& kp : frame_i.visible) {
    const Landmark* l = find_landmark(landmarks, kp.id);
    if (!l) {
      throw std::logic_error("sample_depth: landmark " + std::to_string(kp.id) +
                             " missing from the world");
    }
    const double z = ext.to_camera(world_to_body.apply(l->p)).z();
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kp.id)));
    out[kp.id] = z + rng.normal(depth_sigma);
  }
  return out;
}

// --------------------------------------------------------- overlap geometry

struct OverlapMetrics {
  double v_ij = 0.0;  // overlapping span at depth d [m]
  double v_i = 0.0;   // UAV i's span at depth d [m]
  double vp_i = 0.0;  // v_ij / v_i
};

/// Overlap of the two views on a plane at depth d. j sits at (b_x, b_y)
/// (lateral, forward) from i with its camera yawed by theta towards i.
inline OverlapMetrics overlap_metrics(double alpha, double d, double b_x, double b_y,
                                      double theta) {
  if (!(d > 0.0)) throw DomainError("overlap: depth must be > 0");
  if (!(d > b_y)) throw DomainError("overlap: depth must exceed forward baseline");
  if (!(alpha > 0.0) || !(0.5 * alpha + std::abs(theta) < 0.5 * kPi))
    throw DomainError("overlap: alpha/2 + |theta| must be < pi/2");
  const double half = std::tan(0.5 * alpha);
  OverlapMetrics m;
  m.v_i = 2.0 * d * half;
  const double raw = d * half + (d - b_y) * std::tan(0.5 * alpha + theta) - b_x;
  m.v_ij = std::clamp(raw, 0.0, m.v_i);
  m.vp_i = m.v_ij / m.v_i;
  return m;
}

}  // namespace costereo
