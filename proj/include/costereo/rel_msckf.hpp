#pragma once

// Relative-pose sliding-window filter between two UAVs.
//
// State: a window of clones of the relative pose T_ij = T_i^{-1} T_j (pose of
// body j in body i), newest last. The newest clone is the active state that
// VIO increments propagate. Error state per clone is [dt (3), dtheta (3)]
// with t = t_hat + dt and q = q_hat (x) exp(dtheta).
//
// Measurements: UAV j's pixels of features whose position p_Oi is known in
// UAV i's odometry frame (back-projected from i's pixel and a depth sample).
// The feature error is removed by projecting onto the left nullspace of the
// stacked feature Jacobian, which also holds UAV i's own pixel and depth rows
// for the feature so that its position stays tied to what i measured.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include "costereo/camera.hpp"
#include "costereo/errors.hpp"
#include "costereo/geometry.hpp"

namespace costereo {

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat6x12 = Eigen::Matrix<double, 6, 12>;
using Mat12 = Eigen::Matrix<double, 12, 12>;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

// ------------------------------------------------------------ propagation

/// Body-frame odometry increments of both UAVs over one step.
struct VioIncrement {
  Vec3 dt_i = Vec3::Zero();
  UnitQuaternion dq_i;
  Vec3 dt_j = Vec3::Zero();
  UnitQuaternion dq_j;
};

inline VioIncrement vio_increment(const Pose& prev_i, const Pose& cur_i, const Pose& prev_j,
                                  const Pose& cur_j) {
  VioIncrement u;
  const Pose di = relative_from_world(prev_i, cur_i);
  const Pose dj = relative_from_world(prev_j, cur_j);
  u.dt_i = di.t;
  u.dq_i = di.q;
  u.dt_j = dj.t;
  u.dq_j = dj.q;
  return u;
}

/// Transformation loop: T_ij' = dT_i^{-1} T_ij dT_j.
inline Pose propagate_state(const Pose& rel, const VioIncrement& u) {
  const UnitQuaternion dqi_inv = u.dq_i.inverse();
  return {dqi_inv * (rel.t + rel.q * u.dt_j - u.dt_i), dqi_inv * rel.q * u.dq_j};
}

struct PropagationJacobians {
  Mat6 F;     // d(error') / d(error)
  Mat6x12 G;  // d(error') / d(input noise), input order [dt_i, eps_i, dt_j, eps_j]
};

/// Input noise enters as dt + n_t (additive) and dq (x) exp(n_q) (right).
inline PropagationJacobians propagation_jacobians(const Pose& rel, const VioIncrement& u) {
  const Mat3 Ri_T = u.dq_i.matrix().transpose();
  const Mat3 RD = (u.dq_i.inverse() * rel.q).matrix();
  const Pose next = propagate_state(rel, u);
  PropagationJacobians J;
  J.F.setZero();
  J.F.block<3, 3>(0, 0) = Ri_T;
  J.F.block<3, 3>(0, 3) = -RD * skew(u.dt_j);
  J.F.block<3, 3>(3, 3) = u.dq_j.matrix().transpose();
  J.G.setZero();
  J.G.block<3, 3>(0, 0) = -Ri_T;
  J.G.block<3, 3>(0, 3) = skew(next.t);
  J.G.block<3, 3>(0, 6) = RD;
  J.G.block<3, 3>(3, 3) = -next.q.matrix().transpose();
  J.G.block<3, 3>(3, 9) = Mat3::Identity();
  return J;
}

// ----------------------------------------------------------------- state

struct Clone {
  double stamp = 0.0;   // master (UAV i) stamp
  Pose rel;
  // Bookkeeping for measurements: UAV i's odometry pose at `stamp` and the
  // stamp of the slave frame the clone's relative pose refers to.
  Pose vio_i;
  double slave_stamp = 0.0;
};

struct HealthStats {
  double max_asymmetry = 0.0;
  double min_eigenvalue = 0.0;  // most negative seen (0 when always PSD)
  double max_nullspace_residual = 0.0;
  long checks = 0;
  long violations = 0;

  void merge(const HealthStats& o) {
    max_asymmetry = std::max(max_asymmetry, o.max_asymmetry);
    min_eigenvalue = std::min(min_eigenvalue, o.min_eigenvalue);
    max_nullspace_residual = std::max(max_nullspace_residual, o.max_nullspace_residual);
    checks += o.checks;
    violations += o.violations;
  }
};

inline constexpr double kSymmetryTol = 1e-9;
inline constexpr double kEigenFloor = -1e-9;
inline constexpr double kNullspaceTol = 1e-10;
inline constexpr double kHealthFatal = -1e-6;

/// Checks symmetry and PSD of P, recording into `h`. Throws when the
/// smallest eigenvalue falls below the fatal floor.
inline void check_covariance(const MatX& P, HealthStats& h, const char* where) {
  ++h.checks;
  const double asym = (P - P.transpose()).cwiseAbs().maxCoeff();
  h.max_asymmetry = std::max(h.max_asymmetry, asym);
  bool bad = asym > kSymmetryTol;
  const MatX shifted = P + (-kEigenFloor) * MatX::Identity(P.rows(), P.cols());
  Eigen::LLT<MatX> llt(shifted);
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<MatX> es(0.5 * (P + P.transpose()), Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    h.min_eigenvalue = std::min(h.min_eigenvalue, lo);
    if (lo < kEigenFloor) bad = true;
    if (lo < kHealthFatal)
      throw NumericalHealthError(std::string(where) + ": covariance not PSD (min eigenvalue " +
                                 std::to_string(lo) + ")");
  }
  if (bad) ++h.violations;
}

struct RelState {
  std::vector<Clone> clones;  // newest last
  MatX P;                     // 6|clones| square
  int window_m = 10;

  long dim() const { return 6 * static_cast<long>(clones.size()); }
  const Clone& active() const { return clones.back(); }
  Clone& active() { return clones.back(); }

  long index_of(double stamp) const {
    for (std::size_t k = 0; k < clones.size(); ++k)
      if (std::abs(clones[k].stamp - stamp) < 1e-9) return static_cast<long>(k);
    return -1;
  }
};

/// One clone with the given prior covariance.
inline RelState make_state(double stamp, const Pose& rel, const Mat6& P0, int window_m = 10) {
  if (window_m < 1) throw ConfigError("filter: window_m must be >= 1");
  RelState s;
  s.window_m = window_m;
  s.clones.push_back({stamp, rel, Pose::identity(), stamp});
  s.P = P0;
  return s;
}

/// Active block <- F P F^T + G Q G^T, active/clone cross blocks <- F P.
inline void propagate_covariance(RelState& s, const Mat6& F, const Mat6x12& G, const Mat12& Q,
                                 HealthStats* health = nullptr) {
  const long n = s.dim();
  const long a = n - 6;
  const Mat6 Paa = s.P.block<6, 6>(a, a);
  if (a > 0) {
    const MatX cross = F * s.P.block(a, 0, 6, a);
    s.P.block(a, 0, 6, a) = cross;
    s.P.block(0, a, a, 6) = cross.transpose();
  }
  s.P.block<6, 6>(a, a) = F * Paa * F.transpose() + G * Q * G.transpose();
  s.P = 0.5 * (s.P + s.P.transpose()).eval();
  if (health) check_covariance(s.P, *health, "propagate_covariance");
}

/// Duplicates the active pose as a new clone stamped `t`; the new rows and
/// columns copy the active ones (identity clone Jacobian).
inline void augment_clone(RelState& s, double t, HealthStats* health = nullptr) {
  if (static_cast<int>(s.clones.size()) > s.window_m)
    throw ContractError("augment_clone: window full, marginalize first");
  if (!s.clones.empty() && !(t > s.clones.back().stamp))
    throw ContractError("augment_clone: clone stamps must increase");
  const long n = s.dim();
  Clone c = s.clones.back();
  c.stamp = t;
  s.clones.push_back(c);
  MatX P(n + 6, n + 6);
  P.topLeftCorner(n, n) = s.P;
  P.block(n, 0, 6, n) = s.P.block(n - 6, 0, 6, n);
  P.block(0, n, n, 6) = s.P.block(0, n - 6, n, 6);
  P.block<6, 6>(n, n) = s.P.block<6, 6>(n - 6, n - 6);
  s.P = std::move(P);
  if (health) check_covariance(s.P, *health, "augment_clone");
}

/// Drops the oldest clone and its rows/columns.
inline void marginalize(RelState& s, HealthStats* health = nullptr) {
  if (s.clones.size() < 2) throw ContractError("marginalize: need at least two clones");
  s.clones.erase(s.clones.begin());
  const long n = s.dim();
  s.P = s.P.bottomRightCorner(n, n).eval();
  if (health) check_covariance(s.P, *health, "marginalize");
}

// ----------------------------------------------------------- measurement

/// UAV j's camera-frame point of a feature known in UAV i's odometry frame.
inline Vec3 feature_in_camera_j(const Pose& rel, const Pose& pose_i_odom, const Vec3& p_Oi,
                                const Extrinsic& ext) {
  const Vec3 p_Bi = pose_i_odom.q.inverse() * (p_Oi - pose_i_odom.t);
  const Vec3 p_Bj = rel.q.inverse() * (p_Bi - rel.t);
  return ext.to_camera(p_Bj);
}

/// Predicted pixel in UAV j; nullopt when the feature is not in front.
inline std::optional<Vec2> measurement_predict(const Pose& rel, const Pose& pose_i_odom,
                                               const Vec3& p_Oi, const CameraIntrinsics& K,
                                               const Extrinsic& ext = {}) {
  const Vec3 pc = feature_in_camera_j(rel, pose_i_odom, p_Oi, ext);
  if (!(pc.z() > kMinDepth)) return std::nullopt;
  return pixel_from_camera(K, pc);
}

struct MeasurementJacobians {
  Mat26 H_x;  // w.r.t. the clone error state [dt, dtheta]
  Mat23 H_f;  // w.r.t. p_Oi
};

inline MeasurementJacobians measurement_jacobians(const Pose& rel, const Pose& pose_i_odom,
                                                  const Vec3& p_Oi, const CameraIntrinsics& K,
                                                  const Extrinsic& ext = {}) {
  const Mat3 R = rel.q.matrix();
  const Mat3 R_Oi = pose_i_odom.q.matrix();
  const Vec3 p_Bi = R_Oi.transpose() * (p_Oi - pose_i_odom.t);
  const Vec3 p_Bj = R.transpose() * (p_Bi - rel.t);
  const Vec3 pc = ext.to_camera(p_Bj);
  const Mat23 Jc = pixel_jacobian(K, pc) * ext.q_bc.matrix();
  MeasurementJacobians J;
  J.H_x.block<2, 3>(0, 0) = -Jc * R.transpose();
  J.H_x.block<2, 3>(0, 3) = Jc * skew(p_Bj);
  J.H_f = Jc * R.transpose() * R_Oi.transpose();
  return J;
}

struct FeatureObs {
  double stamp = 0.0;  // clone stamp
  Vec2 px_j = Vec2::Zero();
  Vec2 px_i = Vec2::Zero();
  int hops = 0;
};

struct FeatureTrack {
  int landmark_id = 0;
  Vec3 p_Oi = Vec3::Zero();
  double anchor_depth = 0.0;  // depth sample at the first observation
  std::vector<FeatureObs> obs;
};

/// Back-projects UAV i's pixel at the sampled depth into i's odometry frame.
inline Vec3 feature_from_depth(const Vec2& px_i, double depth, const Pose& pose_i_odom,
                               const CameraIntrinsics& K, const Extrinsic& ext = {}) {
  const Vec3 pc = depth * ray_from_pixel(K, px_i);
  return pose_i_odom.apply(ext.to_body(pc));
}

struct Residuals {
  VecX r;
  MatX H_x;
  MatX H_f;
  int n_used = 0;  // observations contributing rows
};

/// j-pixel residuals z - z_hat of one track over every clone it was seen in.
/// Observations behind UAV j's camera are skipped.
inline std::optional<Residuals> build_residuals(const FeatureTrack& track, const RelState& s,
                                                const CameraIntrinsics& K,
                                                const Extrinsic& ext = {}) {
  std::vector<std::pair<long, const FeatureObs*>> used;
  for (const auto& o : track.obs) {
    const long c = s.index_of(o.stamp);
    if (c < 0) throw ContractError("build_residuals: observation stamp matches no clone");
    const Clone& cl = s.clones[static_cast<std::size_t>(c)];
    const Vec3 pc = feature_in_camera_j(cl.rel, cl.vio_i, track.p_Oi, ext);
    if (!(pc.z() > kMinDepth)) continue;
    used.emplace_back(c, &o);
  }
  if (used.empty()) return std::nullopt;
  Residuals res;
  const long m = 2 * static_cast<long>(used.size());
  res.r.resize(m);
  res.H_x = MatX::Zero(m, s.dim());
  res.H_f.resize(m, 3);
  long row = 0;
  for (const auto& [c, o] : used) {
    const Clone& cl = s.clones[static_cast<std::size_t>(c)];
    const Vec2 zhat = pixel_from_camera(K, feature_in_camera_j(cl.rel, cl.vio_i, track.p_Oi, ext));
    const auto J = measurement_jacobians(cl.rel, cl.vio_i, track.p_Oi, K, ext);
    res.r.segment<2>(row) = o->px_j - zhat;
    res.H_x.block<2, 6>(row, 6 * c) = J.H_x;
    res.H_f.block<2, 3>(row, 0) = J.H_f;
    row += 2;
  }
  res.n_used = static_cast<int>(used.size());
  return res;
}

/// UAV i's own measurements of the feature: its pixel at every observation and
/// the depth sample at the first. These do not depend on the relative state
/// (zero H_x); they constrain p_Oi. Rows are whitened by the given sigmas.
inline Residuals anchor_residuals(const FeatureTrack& track, const RelState& s,
                                  const CameraIntrinsics& K, const Extrinsic& ext,
                                  double pixel_sigma, double depth_sigma) {
  std::vector<std::pair<const Clone*, const FeatureObs*>> used;
  for (const auto& o : track.obs) {
    const long c = s.index_of(o.stamp);
    if (c < 0) throw ContractError("anchor_residuals: observation stamp matches no clone");
    used.emplace_back(&s.clones[static_cast<std::size_t>(c)], &o);
  }
  Residuals res;
  const long m = 2 * static_cast<long>(used.size()) + (used.empty() ? 0 : 1);
  res.r = VecX::Zero(m);
  res.H_x = MatX::Zero(m, s.dim());
  res.H_f = MatX::Zero(m, 3);
  long row = 0;
  for (const auto& [cl, o] : used) {
    const Mat3 R_Oi = cl->vio_i.q.matrix();
    const Vec3 pc = ext.to_camera(R_Oi.transpose() * (track.p_Oi - cl->vio_i.t));
    if (!(pc.z() > kMinDepth)) continue;
    const Mat23 Jc = pixel_jacobian(K, pc) * ext.q_bc.matrix() * R_Oi.transpose();
    res.r.segment<2>(row) = (o->px_i - pixel_from_camera(K, pc)) / pixel_sigma;
    res.H_f.block<2, 3>(row, 0) = Jc / pixel_sigma;
    row += 2;
  }
  if (!used.empty()) {
    const Clone* cl = used.front().first;
    const Mat3 R_Oi = cl->vio_i.q.matrix();
    const Vec3 pc = ext.to_camera(R_Oi.transpose() * (track.p_Oi - cl->vio_i.t));
    res.r(row) = (track.anchor_depth - pc.z()) / depth_sigma;
    res.H_f.row(row) = (ext.q_bc.matrix() * R_Oi.transpose()).row(2) / depth_sigma;
    ++row;
  }
  res.r.conservativeResize(row);
  res.H_x.conservativeResize(row, Eigen::NoChange);
  res.H_f.conservativeResize(row, Eigen::NoChange);
  res.n_used = static_cast<int>(used.size());
  return res;
}

/// Sensitivity of a track's predicted pixels to UAV i's odometry error at
/// each observation: 6 columns per observation ([dt in the odometry frame,
/// dtheta]). Rows follow build_residuals, then anchor_residuals.
/// `j_obs` / `i_obs` receive the observation index of each 2-row block.
inline MatX odometry_sensitivity(const FeatureTrack& track, const RelState& s,
                                 const CameraIntrinsics& K, const Extrinsic& ext = {},
                                 std::vector<long>* j_obs = nullptr,
                                 std::vector<long>* i_obs = nullptr) {
  const long n = static_cast<long>(track.obs.size());
  std::vector<Eigen::Matrix<double, 2, 6>> jrows, irows;
  std::vector<long> jcol, icol;
  for (long a = 0; a < n; ++a) {
    const auto& o = track.obs[static_cast<std::size_t>(a)];
    const long c = s.index_of(o.stamp);
    if (c < 0) throw ContractError("odometry_sensitivity: observation stamp matches no clone");
    const Clone& cl = s.clones[static_cast<std::size_t>(c)];
    const Mat3 R_Oi = cl.vio_i.q.matrix();
    const Vec3 p_Bi = R_Oi.transpose() * (track.p_Oi - cl.vio_i.t);
    Eigen::Matrix<double, 3, 6> dp;
    dp << -R_Oi.transpose(), skew(p_Bi);
    const Vec3 pc_j = feature_in_camera_j(cl.rel, cl.vio_i, track.p_Oi, ext);
    if (pc_j.z() > kMinDepth) {
      jrows.push_back(pixel_jacobian(K, pc_j) * ext.q_bc.matrix() * cl.rel.q.matrix().transpose() * dp);
      jcol.push_back(a);
    }
    const Vec3 pc_i = ext.to_camera(p_Bi);
    if (pc_i.z() > kMinDepth) {
      irows.push_back(pixel_jacobian(K, pc_i) * ext.q_bc.matrix() * dp);
      icol.push_back(a);
    }
  }
  const long rows = 2 * static_cast<long>(jrows.size() + irows.size()) + (n > 0 ? 1 : 0);
  MatX J = MatX::Zero(rows, 6 * n);
  long row = 0;
  for (std::size_t k = 0; k < jrows.size(); ++k, row += 2) J.block<2, 6>(row, 6 * jcol[k]) = jrows[k];
  for (std::size_t k = 0; k < irows.size(); ++k, row += 2) J.block<2, 6>(row, 6 * icol[k]) = irows[k];
  if (j_obs) *j_obs = std::move(jcol);
  if (i_obs) *i_obs = std::move(icol);
  return J;
}

struct Projected {
  VecX r;
  MatX H_x;
  int rank = 0;
  double basis_residual = 0.0;  // max |basis^T H_f|
  bool degenerate = false;      // H_f lost rank
};

/// Left-nullspace projection of H_f: rows go from m to m - rank(H_f).
inline Projected nullspace_project(const VecX& r, const MatX& H_x, const MatX& H_f) {
  const long m = H_f.rows();
  if (r.size() != m || H_x.rows() != m) throw ContractError("nullspace_project: row mismatch");
  Eigen::ColPivHouseholderQR<MatX> qr(H_f);
  qr.setThreshold(1e-10);
  const int rank = static_cast<int>(qr.rank());
  if (m <= rank) throw ContractError("nullspace_project: need more rows than rank(H_f)");
  MatX all(m, H_x.cols() + 1 + H_f.cols());
  all << H_x, r, H_f;
  all.applyOnTheLeft(qr.householderQ().transpose());
  Projected p;
  p.rank = rank;
  p.degenerate = rank < H_f.cols();
  const long k = m - rank;
  p.H_x = all.block(rank, 0, k, H_x.cols());
  p.r = all.block(rank, H_x.cols(), k, 1);
  const MatX rest = all.block(rank, H_x.cols() + 1, k, H_f.cols());
  const double scale = std::max(1.0, H_f.cwiseAbs().maxCoeff());
  p.basis_residual = rest.cwiseAbs().maxCoeff() / scale;
  return p;
}

/// Explicit orthonormal basis of the left nullspace of H_f (m x (m - rank)).
inline MatX left_nullspace_basis(const MatX& H_f) {
  Eigen::ColPivHouseholderQR<MatX> qr(H_f);
  qr.setThreshold(1e-10);
  const long m = H_f.rows();
  const MatX Q = qr.householderQ() * MatX::Identity(m, m);
  return Q.rightCols(m - qr.rank());
}

inline double chi2_quantile(double alpha, int dof) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("gate: alpha must lie in (0, 1)");
  if (dof < 1) throw ContractError("gate: dof must be >= 1");
  return boost::math::quantile(boost::math::chi_squared(dof), alpha);
}

struct GateResult {
  bool accept = false;
  bool singular = false;
  double statistic = 0.0;
  double threshold = 0.0;
};

inline GateResult gate_mahalanobis(const VecX& r, const MatX& H, const MatX& P, const MatX& R,
                                   double alpha) {
  GateResult g;
  g.threshold = chi2_quantile(alpha, static_cast<int>(r.size()));
  const MatX S = H * P * H.transpose() + R;
  Eigen::LDLT<MatX> ldlt(S);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
    g.singular = true;
    return g;
  }
  g.statistic = r.dot(ldlt.solve(r));
  g.accept = std::isfinite(g.statistic) && g.statistic <= g.threshold;
  return g;
}

struct KalmanResult {
  VecX dx;
  MatX P;
};

/// K = P H^T S^{-1}; P <- (I - K H) P (I - K H)^T + K R K^T, symmetrized.
inline KalmanResult kalman_update(const MatX& P, const VecX& r, const MatX& H, const MatX& R) {
  const MatX PHt = P * H.transpose();
  const MatX S = H * PHt + R;
  Eigen::LDLT<MatX> ldlt(S);
  if (ldlt.info() != Eigen::Success) throw NumericalHealthError("update: S not invertible");
  const MatX K = ldlt.solve(PHt.transpose()).transpose();
  const MatX U = MatX::Identity(P.rows(), P.cols()) - K * H;
  KalmanResult out;
  out.dx = K * r;
  out.P = U * P * U.transpose() + K * R * K.transpose();
  out.P = 0.5 * (out.P + out.P.transpose()).eval();
  return out;
}

/// Applies a Kalman correction to every clone.
inline void update(RelState& s, const VecX& r, const MatX& H, const MatX& R,
                   HealthStats* health = nullptr) {
  if (H.cols() != s.dim()) throw ContractError("update: H width does not match the state");
  auto k = kalman_update(s.P, r, H, R);
  for (std::size_t c = 0; c < s.clones.size(); ++c) {
    const auto seg = k.dx.segment<6>(6 * static_cast<long>(c));
    s.clones[c].rel.t += seg.head<3>();
    s.clones[c].rel.q = s.clones[c].rel.q * so3_exp(seg.tail<3>());
  }
  s.P = std::move(k.P);
  if (health) check_covariance(s.P, *health, "update");
}

/// Reduces a tall system [H | r] to at most dim rows with an orthonormal
/// transform (unit measurement noise is preserved).
inline void compress_rows(MatX& H, VecX& r) {
  const long n = H.cols();
  if (H.rows() <= n) return;
  MatX A(H.rows(), n + 1);
  A << H, r;
  Eigen::HouseholderQR<MatX> qr(A);
  const MatX T = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
  H = T.leftCols(n);
  r = T.col(n);
}

// --------------------------------------------------------- asynchrony

/// One slave-side odometry increment over [t0, t1].
struct SlaveIncrement {
  double t0 = 0.0;
  double t1 = 0.0;
  Vec3 dt = Vec3::Zero();
  UnitQuaternion dq;
};

/// Brings a relative pose that refers to an older slave stamp forward through
/// the slave's increments while the master is held fixed.
inline Pose fast_propagate_async(const Pose& rel_at_async,
                                 const std::vector<SlaveIncrement>& increments) {
  Pose rel = rel_at_async;
  for (std::size_t k = 0; k < increments.size(); ++k) {
    if (k > 0 && std::abs(increments[k].t0 - increments[k - 1].t1) > 1e-6)
      throw ContractError("fast_propagate_async: gap in increment stream");
    VioIncrement u;
    u.dt_j = increments[k].dt;
    u.dq_j = increments[k].dq;
    rel = propagate_state(rel, u);
  }
  return rel;
}

// -------------------------------------------------------- initialization

namespace detail {

/// Gauss-Newton on normalized reprojection error of p_c = R p + t.
inline bool refine_camera_pose(const std::vector<Vec3>& pts, const std::vector<Vec2>& obs,
                               Mat3& R, Vec3& t, int iterations = 10) {
  for (int it = 0; it < iterations; ++it) {
    Mat6 JtJ = Mat6::Zero();
    Eigen::Matrix<double, 6, 1> Jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const Vec3 pc = R * pts[k] + t;
      if (!(pc.z() > 1e-9)) return false;
      const double iz = 1.0 / pc.z();
      Mat23 dpi;
      dpi << iz, 0, -pc.x() * iz * iz, 0, iz, -pc.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> J;
      J.leftCols<3>() = dpi;
      J.rightCols<3>() = -dpi * R * skew(pts[k]);
      const Vec2 res = obs[k] - Vec2(pc.x() * iz, pc.y() * iz);
      JtJ += J.transpose() * J;
      Jtr += J.transpose() * res;
    }
    Eigen::FullPivLU<Mat6> lu(JtJ);
    if (lu.rank() < 6) return false;
    const Eigen::Matrix<double, 6, 1> dx = lu.solve(Jtr);
    if (!dx.allFinite()) return false;
    t += dx.head<3>();
    R = R * so3_exp(dx.tail<3>()).matrix();
    if (dx.norm() < 1e-14) break;
  }
  return true;
}

inline Mat3 nearest_rotation(const Mat3& M) {
  Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 R = svd.matrixU() * svd.matrixV().transpose();
  if (R.determinant() < 0) {
    Mat3 U = svd.matrixU();
    U.col(2) *= -1.0;
    R = U * svd.matrixV().transpose();
  }
  return R;
}

}  // namespace detail

/// Coarse relative pose from 3-D points in UAV i's body frame and their
/// pixels in UAV j: linear estimate (projective DLT, or a plane-induced
/// homography when the points are planar) refined by Gauss-Newton.
/// Returns nullopt on degenerate input; callers retry on a later frame.
inline std::optional<Pose> initialize_coarse(const std::vector<Vec3>& points_i,
                                             const std::vector<Vec2>& pixels_j,
                                             const CameraIntrinsics& K,
                                             const Extrinsic& ext = {}) {
  const std::size_t n = points_i.size();
  if (n < 6 || pixels_j.size() != n) return std::nullopt;
  std::vector<Vec2> b(n);
  for (std::size_t k = 0; k < n; ++k) b[k] = ray_from_pixel(K, pixels_j[k]).head<2>();

  Vec3 c = Vec3::Zero();
  for (const auto& p : points_i) c += p;
  c /= static_cast<double>(n);
  Mat3 M = Mat3::Zero();
  for (const auto& p : points_i) M += (p - c) * (p - c).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> es(M);
  const Vec3 ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();  // ascending
  if (!(ev(2) > 0.0) || ev(1) < 1e-6 * ev(2)) return std::nullopt;  // collinear
  const bool planar = ev(0) < 0.1 * ev(2);

  // Normalization of the image side.
  Vec2 bc = Vec2::Zero();
  for (const auto& x : b) bc += x;
  bc /= static_cast<double>(n);
  double bs = 0.0;
  for (const auto& x : b) bs += (x - bc).norm();
  bs = bs > 1e-12 ? std::sqrt(2.0) * static_cast<double>(n) / bs : 1.0;
  Mat3 Tb;
  Tb << bs, 0, -bs * bc.x(), 0, bs, -bs * bc.y(), 0, 0, 1;

  Mat3 R;
  Vec3 t;
  if (planar) {
    const Vec3 e1 = es.eigenvectors().col(2);
    const Vec3 e2 = es.eigenvectors().col(1);
    const Vec3 e3 = e1.cross(e2);
    double us = 0.0;
    std::vector<Vec2> uv(n);
    for (std::size_t k = 0; k < n; ++k) {
      uv[k] = Vec2((points_i[k] - c).dot(e1), (points_i[k] - c).dot(e2));
      us += uv[k].norm();
    }
    us = us > 1e-12 ? std::sqrt(2.0) * static_cast<double>(n) / us : 1.0;
    MatX A(2 * static_cast<long>(n), 9);
    for (std::size_t k = 0; k < n; ++k) {
      const Eigen::Vector3d X(us * uv[k].x(), us * uv[k].y(), 1.0);
      const Eigen::Vector3d x = Tb * b[k].homogeneous();
      const long r0 = 2 * static_cast<long>(k);
      A.row(r0) << X.transpose(), 0, 0, 0, -x.x() * X.transpose();
      A.row(r0 + 1) << 0, 0, 0, X.transpose(), -x.y() * X.transpose();
    }
    Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv(7) < 1e-9 * sv(0)) return std::nullopt;
    const VecX h = svd.matrixV().col(8);
    Mat3 H;
    H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
    Mat3 Tu = Mat3::Identity();
    Tu(0, 0) = Tu(1, 1) = us;
    H = Tb.inverse() * H * Tu;
    double lambda = 2.0 / (H.col(0).norm() + H.col(1).norm());
    if (H(2, 2) * lambda < 0.0) lambda = -lambda;  // plane centre in front
    H *= lambda;
    Mat3 W;
    W << H.col(0), H.col(1), H.col(0).cross(H.col(1));
    W = detail::nearest_rotation(W);
    Mat3 E;
    E << e1, e2, e3;
    R = W * E.transpose();
    t = H.col(2) - R * c;
  } else {
    double ps = 0.0;
    for (const auto& p : points_i) ps += (p - c).norm();
    ps = ps > 1e-12 ? std::sqrt(3.0) * static_cast<double>(n) / ps : 1.0;
    MatX A(2 * static_cast<long>(n), 12);
    for (std::size_t k = 0; k < n; ++k) {
      const Eigen::Vector4d X = (ps * (points_i[k] - c)).homogeneous();
      const Eigen::Vector3d x = Tb * b[k].homogeneous();
      const long r0 = 2 * static_cast<long>(k);
      A.row(r0) << X.transpose(), 0, 0, 0, 0, -x.x() * X.transpose();
      A.row(r0 + 1) << 0, 0, 0, 0, X.transpose(), -x.y() * X.transpose();
    }
    Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv(10) < 1e-9 * sv(0)) return std::nullopt;
    const VecX v = svd.matrixV().col(11);
    Eigen::Matrix<double, 3, 4> Pm;
    Pm << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8), v(9), v(10), v(11);
    Eigen::Matrix4d T3 = Eigen::Matrix4d::Identity();
    T3.topLeftCorner<3, 3>() *= ps;
    T3.topRightCorner<3, 1>() = -ps * c;
    Pm = Tb.inverse() * Pm * T3;
    Mat3 Mr = Pm.leftCols<3>();
    if (Mr.determinant() < 0.0) Pm = -Pm;
    Mr = Pm.leftCols<3>();
    Eigen::JacobiSVD<Mat3> s3(Mr);
    const double lambda = s3.singularValues().mean();
    if (!(lambda > 0.0)) return std::nullopt;
    R = detail::nearest_rotation(Mr / lambda);
    t = Pm.col(3) / lambda;
  }
  if (!R.allFinite() || !t.allFinite()) return std::nullopt;
  if (!detail::refine_camera_pose(points_i, b, R, t)) return std::nullopt;

  // One trimming pass against wrong associations, then refine on the rest.
  std::vector<double> err(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec3 pc = R * points_i[k] + t;
    err[k] = (pc.head<2>() / pc.z() - b[k]).norm();
  }
  std::vector<double> sorted = err;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(n / 2), sorted.end());
  const double cut = std::max(4.0 * sorted[n / 2], 3.0 / K.fx);
  std::vector<Vec3> kept_p;
  std::vector<Vec2> kept_b;
  for (std::size_t k = 0; k < n; ++k) {
    if (err[k] <= cut) {
      kept_p.push_back(points_i[k]);
      kept_b.push_back(b[k]);
    }
  }
  if (kept_p.size() >= 6 && kept_p.size() < n &&
      !detail::refine_camera_pose(kept_p, kept_b, R, t))
    return std::nullopt;

  // p_C = ext(T^{-1} p_Bi) = (R, t) p_Bi  =>  T = (R, t)^{-1} ext.
  const Pose cam_from_i{t, UnitQuaternion::from_matrix(R)};
  const Pose ext_pose{ext.t_bc, ext.q_bc};
  const Pose rel = cam_from_i.inverse() * ext_pose;
  if (!is_finite(rel)) return std::nullopt;
  return rel;
}

// --------------------------------------------------------------- filter

struct NoiseConfig {
  double sigma_dt = 0.005;           // m per step, per UAV
  double sigma_dq = deg2rad(0.05);   // rad per step, per UAV
  double pixel_sigma = 1.0;          // px
  double flow_sigma = 0.3;           // px per hop, random walk of flowed matches
  double depth_sigma = 0.05;         // m
  double mahalanobis_alpha = 0.95;

  void validate() const {
    if (sigma_dt < 0.0 || sigma_dq < 0.0) throw ConfigError("noise: sigmas must be >= 0");
    if (flow_sigma < 0.0) throw ConfigError("noise: flow_sigma must be >= 0");
    if (!(pixel_sigma > 0.0) || !(depth_sigma > 0.0))
      throw ConfigError("noise: pixel_sigma and depth_sigma must be > 0");
    if (!(mahalanobis_alpha > 0.0 && mahalanobis_alpha < 1.0))
      throw ConfigError("noise: mahalanobis_alpha must lie in (0, 1)");
  }

  /// Per-step input covariance, order [dt_i, eps_i, dt_j, eps_j], scaled by
  /// the number of odometry steps each increment spans.
  Mat12 Q_step(double steps_i = 1.0, double steps_j = 1.0) const {
    Mat12 Q = Mat12::Zero();
    const double vt = sigma_dt * sigma_dt, vq = sigma_dq * sigma_dq;
    Q.diagonal() << Vec3::Constant(vt * steps_i), Vec3::Constant(vq * steps_i),
        Vec3::Constant(vt * steps_j), Vec3::Constant(vq * steps_j);
    return Q;
  }

  double R_px() const { return pixel_sigma * pixel_sigma; }
};

struct FilterConfig {
  int window_m = 10;
  double init_sigma_pos = 0.5;             // m
  double init_sigma_rot = deg2rad(5.0);    // rad
  int max_iterations = 5;                  // 1 = single-pass EKF update
  NoiseConfig noise;

  void validate() const {
    if (window_m < 2) throw ConfigError("filter: window_m must be >= 2");
    if (max_iterations < 1) throw ConfigError("filter: max_iterations must be >= 1");
    if (!(init_sigma_pos > 0.0) || !(init_sigma_rot > 0.0))
      throw ConfigError("filter: initial sigmas must be > 0");
    noise.validate();
  }

  Mat6 P0() const {
    Mat6 P = Mat6::Zero();
    P.diagonal() << Vec3::Constant(init_sigma_pos * init_sigma_pos),
        Vec3::Constant(init_sigma_rot * init_sigma_rot);
    return P;
  }
};

/// A cross-camera match handed to the filter, with the depth UAV i sampled
/// for it (used only when the feature starts a new track).
struct MatchInput {
  int landmark_id = 0;
  Vec2 px_i = Vec2::Zero();
  Vec2 px_j = Vec2::Zero();
  double depth_i = std::numeric_limits<double>::quiet_NaN();
  int hops = 0;  // flow steps since the guided match
};

struct StepInput {
  double stamp = 0.0;        // master stamp
  double slave_stamp = 0.0;  // stamp the slave side of the clone refers to
  VioIncrement u;
  double steps_i = 1.0;      // odometry steps spanned by the increments
  double steps_j = 1.0;
  Pose vio_i;                // UAV i's odometry pose at `stamp`
  const std::vector<MatchInput>* matches = nullptr;  // null: prediction only
  // Clone the matches were measured at, when older than `stamp`.
  double match_stamp = std::numeric_limits<double>::quiet_NaN();
  // Landmarks the front end flagged as wrong associations; their tracks are
  // dropped without an update.
  const std::vector<int>* discard = nullptr;
};

struct StepReport {
  int n_tracks_used = 0;
  int n_gated_out = 0;
  long n_rows = 0;
};

class RelMsckf {
public:
  RelMsckf(FilterConfig cfg, CameraIntrinsics K, Extrinsic ext = {})
      : cfg_(std::move(cfg)), K_(std::move(K)), ext_(std::move(ext)) {
    cfg_.validate();
  }

  bool initialized() const { return !state_.clones.empty(); }

  void initialize(double stamp, double slave_stamp, const Pose& rel, const Pose& vio_i) {
    state_ = make_state(stamp, rel, cfg_.P0(), cfg_.window_m);
    state_.clones.back().vio_i = vio_i;
    state_.clones.back().slave_stamp = slave_stamp;
    tracks_.clear();
    check_covariance(state_.P, health_, "initialize");
  }

  StepReport step(const StepInput& in) {
    if (!initialized()) throw ContractError("filter: step before initialize");
    StepReport rep;
    if (static_cast<int>(state_.clones.size()) == cfg_.window_m + 1) {
      const double oldest = state_.clones.front().stamp;
      std::vector<int> due;
      for (const auto& [id, tr] : tracks_)
        if (!tr.obs.empty() && std::abs(tr.obs.front().stamp - oldest) < 1e-9) due.push_back(id);
      consume(due, rep);
      marginalize(state_, &health_);
    }

    const auto J = propagation_jacobians(state_.active().rel, in.u);
    augment_clone(state_, in.stamp, &health_);
    Clone& a = state_.active();
    a.rel = propagate_state(a.rel, in.u);
    a.vio_i = in.vio_i;
    a.slave_stamp = in.slave_stamp;
    propagate_covariance(state_, J.F, J.G, cfg_.noise.Q_step(in.steps_i, in.steps_j), &health_);

    if (in.discard)
      for (int id : *in.discard) tracks_.erase(id);

    const double obs_stamp = std::isfinite(in.match_stamp) ? in.match_stamp : in.stamp;
    const long obs_clone = state_.index_of(obs_stamp);
    if (in.matches && obs_clone >= 0) {
      const Pose& vio_obs = state_.clones[static_cast<std::size_t>(obs_clone)].vio_i;
      std::vector<int> due;
      std::map<int, char> seen;
      for (const MatchInput& m : *in.matches) {
        seen[m.landmark_id] = 1;
        auto it = tracks_.find(m.landmark_id);
        if (it == tracks_.end()) {
          if (!std::isfinite(m.depth_i) || !(m.depth_i > kMinDepth)) continue;
          FeatureTrack tr;
          tr.landmark_id = m.landmark_id;
          tr.anchor_depth = m.depth_i;
          tr.p_Oi = feature_from_depth(m.px_i, m.depth_i, vio_obs, K_, ext_);
          it = tracks_.emplace(m.landmark_id, std::move(tr)).first;
        }
        auto& obs = it->second.obs;
        if (!obs.empty() && obs.back().stamp >= obs_stamp - 1e-9) continue;
        obs.push_back({obs_stamp, m.px_j, m.px_i, m.hops});
      }
      for (const auto& [id, tr] : tracks_) {
        if (!seen.count(id) || static_cast<int>(tr.obs.size()) >= cfg_.window_m) due.push_back(id);
      }
      consume(due, rep);
    }
    return rep;
  }

  /// Relative pose referred to the newest clone's slave stamp.
  const Pose& estimate_async() const { return state_.active().rel; }
  double slave_stamp() const { return state_.active().slave_stamp; }

  const RelState& state() const { return state_; }
  const HealthStats& health() const { return health_; }
  const FilterConfig& config() const { return cfg_; }
  std::size_t n_tracks() const { return tracks_.size(); }

  /// 1-sigma position / orientation bounds of the active clone.
  Eigen::Matrix<double, 6, 1> active_sigma() const {
    const long a = state_.dim() - 6;
    return state_.P.block<6, 6>(a, a).diagonal().cwiseMax(0.0).cwiseSqrt();
  }

private:
  /// Whitened, nullspace-projected system of one track at linearization `x`.
  /// The noise covariance adds UAV i's odometry random walk since the first
  /// observation, since p_Oi is carried to later clones through that odometry.
  std::optional<Projected> project_track(const FeatureTrack& tr, const RelState& x) {
    auto res = build_residuals(tr, x, K_, ext_);
    if (!res || res->n_used < 2) return std::nullopt;
    const Residuals anchor = anchor_residuals(tr, x, K_, ext_, 1.0, 1.0);
    const long mj = res->r.size(), ma = anchor.r.size(), m = mj + ma;
    VecX r(m);
    MatX Hx(m, x.dim()), Hf(m, 3);
    r << res->r, anchor.r;
    Hx << res->H_x, anchor.H_x;
    Hf << res->H_f, anchor.H_f;
    if (m <= 3) return std::nullopt;

    const auto& nc = cfg_.noise;
    VecX d = VecX::Constant(m, nc.pixel_sigma * nc.pixel_sigma);
    d(m - 1) = nc.depth_sigma * nc.depth_sigma;
    MatX C = d.asDiagonal();
    std::vector<long> j_obs, i_obs;
    const MatX J = odometry_sensitivity(tr, x, K_, ext_, &j_obs, &i_obs);
    // Flowed pixels drift as a random walk; two observations of one match
    // share the drift accumulated up to the earlier one.
    const double vf = nc.flow_sigma * nc.flow_sigma;
    auto add_drift = [&](const std::vector<long>& idx, long off) {
      for (std::size_t a = 0; a < idx.size(); ++a)
        for (std::size_t b = 0; b < idx.size(); ++b) {
          const int ha = tr.obs[static_cast<std::size_t>(idx[a])].hops;
          const int hb = tr.obs[static_cast<std::size_t>(idx[b])].hops;
          const bool same_lineage = (idx[a] <= idx[b]) ? hb >= ha : ha >= hb;
          const double v = same_lineage ? vf * std::min(ha, hb) : 0.0;
          if (v == 0.0) continue;
          const long ra = off + 2 * static_cast<long>(a), rb = off + 2 * static_cast<long>(b);
          C(ra, rb) += v;
          C(ra + 1, rb + 1) += v;
        }
    };
    add_drift(j_obs, 0);
    add_drift(i_obs, mj);
    const long n = static_cast<long>(tr.obs.size());
    std::vector<long> steps(static_cast<std::size_t>(n));
    const long c0 = x.index_of(tr.obs.front().stamp);
    for (long a = 0; a < n; ++a)
      steps[static_cast<std::size_t>(a)] = x.index_of(tr.obs[static_cast<std::size_t>(a)].stamp) - c0;
    Mat6 Qi = Mat6::Zero();
    Qi.diagonal() << Vec3::Constant(nc.sigma_dt * nc.sigma_dt), Vec3::Constant(nc.sigma_dq * nc.sigma_dq);
    MatX S = MatX::Zero(6 * n, 6 * n);
    for (long a = 0; a < n; ++a)
      for (long b = 0; b < n; ++b)
        S.block<6, 6>(6 * a, 6 * b) =
            static_cast<double>(std::min(steps[static_cast<std::size_t>(a)], steps[static_cast<std::size_t>(b)])) * Qi;
    C.noalias() += J * S * J.transpose();
    Eigen::LLT<MatX> llt(C);
    if (llt.info() != Eigen::Success) return std::nullopt;
    llt.matrixL().solveInPlace(r);
    llt.matrixL().solveInPlace(Hx);
    llt.matrixL().solveInPlace(Hf);
    Projected p = nullspace_project(r, Hx, Hf);
    health_.max_nullspace_residual = std::max(health_.max_nullspace_residual, p.basis_residual);
    if (p.basis_residual > kNullspaceTol) ++health_.violations;
    if (p.r.size() == 0) return std::nullopt;
    return p;
  }

  /// Stacked, row-compressed system of `batch` linearized at `x`.
  bool stack_batch(const std::vector<FeatureTrack>& batch, const RelState& x, MatX& H, VecX& r) {
    std::vector<Projected> parts;
    long rows = 0;
    for (const auto& tr : batch) {
      auto p = project_track(tr, x);
      if (!p) continue;
      rows += p->r.size();
      parts.push_back(std::move(*p));
    }
    if (rows == 0) return false;
    H.resize(rows, x.dim());
    r.resize(rows);
    long row = 0;
    for (const auto& p : parts) {
      H.middleRows(row, p.H_x.rows()) = p.H_x;
      r.segment(row, p.r.size()) = p.r;
      row += p.r.size();
    }
    compress_rows(H, r);
    return true;
  }

  /// Error-state difference x (-) x0 over all clones.
  static VecX state_minus(const RelState& x, const RelState& x0) {
    VecX d(x0.dim());
    for (std::size_t c = 0; c < x0.clones.size(); ++c) {
      const long o = 6 * static_cast<long>(c);
      d.segment<3>(o) = x.clones[c].rel.t - x0.clones[c].rel.t;
      d.segment<3>(o + 3) = so3_log(x0.clones[c].rel.q.inverse() * x.clones[c].rel.q);
    }
    return d;
  }

  static RelState state_plus(const RelState& x0, const VecX& dx) {
    RelState x = x0;
    for (std::size_t c = 0; c < x.clones.size(); ++c) {
      const auto seg = dx.segment<6>(6 * static_cast<long>(c));
      x.clones[c].rel.t += seg.head<3>();
      x.clones[c].rel.q = x.clones[c].rel.q * so3_exp(seg.tail<3>());
    }
    return x;
  }

  /// Gates each track at the prior, then again against a running linear
  /// posterior of the tracks already accepted (most consistent first), so a
  /// wrong association cannot ride on a wide prior. The accepted batch gets an
  /// iterated update: relinearize at the current iterate and solve
  /// dx = K (r_i + H_i (x_i (-) x0)) against the prior covariance.
  void consume(const std::vector<int>& ids, StepReport& rep) {
    struct Candidate {
      double stat;
      FeatureTrack track;
      Projected p;
    };
    std::vector<Candidate> cands;
    const double alpha = cfg_.noise.mahalanobis_alpha;
    for (int id : ids) {
      auto it = tracks_.find(id);
      if (it == tracks_.end()) continue;
      FeatureTrack tr = std::move(it->second);
      tracks_.erase(it);
      if (tr.obs.size() < 2) continue;
      auto p = project_track(tr, state_);
      if (!p) continue;
      const auto g = gate_mahalanobis(p->r, p->H_x, state_.P,
                                      MatX::Identity(p->r.size(), p->r.size()), alpha);
      if (!g.accept) {
        ++rep.n_gated_out;
        continue;
      }
      cands.push_back({g.statistic, std::move(tr), std::move(*p)});
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.stat < b.stat; });
    std::vector<FeatureTrack> batch;
    VecX dx = VecX::Zero(state_.dim());
    MatX P = state_.P;
    for (auto& c : cands) {
      const MatX I = MatX::Identity(c.p.r.size(), c.p.r.size());
      const VecX y = c.p.r - c.p.H_x * dx;
      if (!batch.empty() && !gate_mahalanobis(y, c.p.H_x, P, I, alpha).accept) {
        ++rep.n_gated_out;
        continue;
      }
      // Only a gate reference: the cheap P - K S K^T form is enough here.
      const MatX PHt = P * c.p.H_x.transpose();
      const MatX S = c.p.H_x * PHt + I;
      Eigen::LLT<MatX> llt(S);
      if (llt.info() != Eigen::Success) {
        ++rep.n_gated_out;
        continue;
      }
      const MatX Kt = llt.solve(PHt.transpose());
      dx += Kt.transpose() * y;
      P -= PHt * Kt;
      P = 0.5 * (P + P.transpose()).eval();
      ++rep.n_tracks_used;
      batch.push_back(std::move(c.track));
    }
    if (batch.empty()) return;

    const RelState x0 = state_;
    RelState xi = x0;
    MatX H;
    VecX r;
    KalmanResult k;
    for (int it = 0; it < cfg_.max_iterations; ++it) {
      if (!stack_batch(batch, xi, H, r)) return;
      const VecX y = r + H * state_minus(xi, x0);
      k = kalman_update(x0.P, y, H, MatX::Identity(H.rows(), H.rows()));
      RelState next = state_plus(x0, k.dx);
      const double step = state_minus(next, xi).norm();
      xi = std::move(next);
      if (step < 1e-10) break;
    }
    rep.n_rows += H.rows();
    state_.clones = xi.clones;
    state_.P = std::move(k.P);
    check_covariance(state_.P, health_, "update");
  }

  FilterConfig cfg_;
  CameraIntrinsics K_;
  Extrinsic ext_;
  RelState state_;
  std::map<int, FeatureTrack> tracks_;
  HealthStats health_;
};

}  // namespace costereo
