#include <gtest/gtest.h>

#include <cmath>

#include "costereo/rel_msckf.hpp"
#include "costereo/rng.hpp"

using namespace costereo;

namespace {

using Vec6 = Eigen::Matrix<double, 6, 1>;

UnitQuaternion small_rot(Rng& rng, double sigma) { return so3_exp(rng.normal3(sigma)); }

Pose random_rel(Rng& rng) { return {Vec3(3, 0, 0) + rng.normal3(0.5), small_rot(rng, 0.3)}; }

VioIncrement random_increment(Rng& rng) {
  VioIncrement u;
  u.dt_i = rng.normal3(0.3);
  u.dq_i = small_rot(rng, 0.2);
  u.dt_j = rng.normal3(0.3);
  u.dq_j = small_rot(rng, 0.2);
  return u;
}

// Right-perturbation error between two poses: [t - t0, log(q0^-1 q)].
Vec6 pose_error(const Pose& x, const Pose& x0) {
  Vec6 e;
  e.head<3>() = x.t - x0.t;
  e.tail<3>() = so3_log(x0.q.inverse() * x.q);
  return e;
}

Pose perturb(const Pose& p, const Vec6& d) { return {p.t + d.head<3>(), p.q * so3_exp(d.tail<3>())}; }

double rel_err(const MatX& num, const MatX& ana) {
  return (num - ana).norm() / std::max(1.0, ana.norm());
}

constexpr double kEps = 1e-6;

MatX random_psd(Rng& rng, long n) {
  MatX A(n, n);
  for (long r = 0; r < n; ++r)
    for (long c = 0; c < n; ++c) A(r, c) = rng.normal();
  return A * A.transpose() + 1e-3 * MatX::Identity(n, n);
}

double min_eig(const MatX& P) {
  return Eigen::SelfAdjointEigenSolver<MatX>(P).eigenvalues().minCoeff();
}

}  // namespace

// ----------------------------------------------------------- propagation

TEST(VioIncrement, Examples) {
  const Pose a{Vec3(1, 2, 3), rot_z(0.3)};
  const auto same = vio_increment(a, a, a, a);
  EXPECT_LT(same.dt_i.norm(), 1e-12);
  EXPECT_LT(angle_between(same.dq_i, UnitQuaternion::identity()), 1e-7);

  const Pose o = Pose::identity();
  const Pose moved{Vec3(1, 0, 0), {}};
  EXPECT_TRUE(vio_increment(o, moved, o, o).dt_i.isApprox(Vec3(1, 0, 0)));

  const Pose yawed{Vec3::Zero(), rot_z(kPi / 2)};
  const Pose yawed_moved{Vec3(1, 0, 0), rot_z(kPi / 2)};
  const Vec3 oracle = rot_z(kPi / 2).matrix().transpose() * Vec3(1, 0, 0);
  const auto u = vio_increment(yawed, yawed_moved, o, o);
  EXPECT_LT((u.dt_i - oracle).norm(), 1e-12);
  EXPECT_LT((u.dt_i - Vec3(0, -1, 0)).norm(), 1e-12);
}

TEST(PropagateState, Examples) {
  Rng rng(1);
  const Pose rel = random_rel(rng);
  const Pose same = propagate_state(rel, VioIncrement{});
  EXPECT_LT(pose_error(same, rel).norm(), 1e-12);

  VioIncrement u;
  u.dt_i = Vec3(1, 0, 0);
  const Pose p = propagate_state({Vec3(0, 3, 0), {}}, u);
  EXPECT_LT((p.t - Vec3(-1, 3, 0)).norm(), 1e-12);
}

TEST(PropagateState, TransformationLoopMatchesWorldComposition) {
  Rng rng(2);
  Pose wi{rng.normal3(1.0), small_rot(rng, 1.0)};
  Pose wj{rng.normal3(1.0), small_rot(rng, 1.0)};
  Pose rel = relative_from_world(wi, wj);
  for (int k = 0; k < 1000; ++k) {
    const Pose ni{wi.t + rng.normal3(0.1), wi.q * small_rot(rng, 0.05)};
    const Pose nj{wj.t + rng.normal3(0.1), wj.q * small_rot(rng, 0.05)};
    rel = propagate_state(rel, vio_increment(wi, ni, wj, nj));
    wi = ni;
    wj = nj;
  }
  const Pose truth = relative_from_world(wi, wj);
  EXPECT_LT((rel.t - truth.t).norm(), 1e-9);
  EXPECT_LT(angle_between(rel.q, truth.q), 1e-9);
}

TEST(PropagationJacobians, IdentityIncrementGivesIdentityF) {
  Rng rng(3);
  const auto J = propagation_jacobians(random_rel(rng), VioIncrement{});
  EXPECT_LT((J.F - Mat6::Identity()).norm(), 1e-12);
}

TEST(PropagationJacobians, FMatchesFiniteDifferences) {
  Rng rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Pose rel = random_rel(rng);
    const VioIncrement u = random_increment(rng);
    const Pose nom = propagate_state(rel, u);
    Mat6 num;
    for (int c = 0; c < 6; ++c) {
      Vec6 d = Vec6::Zero();
      d(c) = kEps;
      const Vec6 ep = pose_error(propagate_state(perturb(rel, d), u), nom);
      const Vec6 em = pose_error(propagate_state(perturb(rel, -d), u), nom);
      num.col(c) = (ep - em) / (2 * kEps);
    }
    worst = std::max(worst, rel_err(num, propagation_jacobians(rel, u).F));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(PropagationJacobians, GMatchesFiniteDifferences) {
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Pose rel = random_rel(rng);
    const VioIncrement u = random_increment(rng);
    const Pose nom = propagate_state(rel, u);
    auto noisy = [&](int c, double e) {
      VioIncrement v = u;
      Vec3 n = Vec3::Zero();
      n(c % 3) = e;
      switch (c / 3) {
        case 0: v.dt_i += n; break;
        case 1: v.dq_i = v.dq_i * so3_exp(n); break;
        case 2: v.dt_j += n; break;
        default: v.dq_j = v.dq_j * so3_exp(n); break;
      }
      return pose_error(propagate_state(rel, v), nom);
    };
    Mat6x12 num;
    for (int c = 0; c < 12; ++c) num.col(c) = (noisy(c, kEps) - noisy(c, -kEps)) / (2 * kEps);
    worst = std::max(worst, rel_err(num, propagation_jacobians(rel, u).G));
  }
  EXPECT_LT(worst, 1e-5);
}

// ------------------------------------------------------------ covariance

TEST(PropagateCovariance, Examples) {
  Rng rng(6);
  RelState s = make_state(0.0, Pose::identity(), random_psd(rng, 6));
  augment_clone(s, 0.1);
  s.P = random_psd(rng, 12);
  const MatX before = s.P;
  Mat6x12 G;
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 12; ++c) G(r, c) = rng.normal();
  propagate_covariance(s, Mat6::Identity(), G, Mat12::Zero());
  EXPECT_LT((s.P - before).norm(), 1e-12);

  RelState z = make_state(0.0, Pose::identity(), Mat6::Zero());
  propagate_covariance(z, Mat6::Identity(), G, 0.01 * Mat12::Identity());
  EXPECT_LT((z.P - 0.01 * G * G.transpose()).norm(), 1e-12);
}

TEST(PropagateCovariance, CrossBlocksAndPsd) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    RelState s = make_state(0.0, Pose::identity(), Mat6::Identity());
    for (int c = 1; c < 4; ++c) augment_clone(s, 0.1 * c);
    s.P = random_psd(rng, s.dim());
    const MatX before = s.P;
    const auto J = propagation_jacobians(random_rel(rng), random_increment(rng));
    NoiseConfig nc;
    HealthStats h;
    propagate_covariance(s, J.F, J.G, nc.Q_step(), &h);
    EXPECT_LT((s.P.topLeftCorner(18, 18) - before.topLeftCorner(18, 18)).norm(), 1e-12);
    EXPECT_LT((s.P.block(18, 0, 6, 18) - J.F * before.block(18, 0, 6, 18)).norm(), 1e-9);
    EXPECT_LT((s.P - s.P.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(min_eig(s.P), -1e-9);
    EXPECT_EQ(h.violations, 0);
  }
}

TEST(AugmentClone, CopiesActiveBlock) {
  RelState s = make_state(0.0, Pose::identity(), Mat6::Identity());
  augment_clone(s, 0.1);
  ASSERT_EQ(s.clones.size(), 2u);
  MatX oracle(12, 12);
  oracle << Mat6::Identity(), Mat6::Identity(), Mat6::Identity(), Mat6::Identity();
  EXPECT_EQ(s.P, oracle);
  EXPECT_LT(s.clones[0].stamp, s.clones[1].stamp);
  EXPECT_THROW(augment_clone(s, 0.1), ContractError);

  RelState full = make_state(0.0, Pose::identity(), Mat6::Identity(), 2);
  augment_clone(full, 1.0);
  augment_clone(full, 2.0);
  EXPECT_THROW(augment_clone(full, 3.0), ContractError);
}

TEST(AugmentClone, StaysSymmetricPsd) {
  Rng rng(8);
  RelState s = make_state(0.0, Pose::identity(), MatX(random_psd(rng, 6)));
  HealthStats h;
  for (int c = 1; c <= 10; ++c) {
    augment_clone(s, c * 0.1, &h);
    EXPECT_GE(min_eig(s.P), -1e-9);
  }
  EXPECT_EQ(h.violations, 0);
}

TEST(Marginalize, DropsOldestBlock) {
  Rng rng(9);
  RelState s = make_state(0.0, Pose::identity(), Mat6::Identity());
  for (int c = 1; c <= 10; ++c) augment_clone(s, c * 0.1);
  s.P = random_psd(rng, 66);
  const MatX before = s.P;
  marginalize(s);
  EXPECT_EQ(s.clones.size(), 10u);
  EXPECT_EQ(s.P.rows(), 60);
  EXPECT_EQ(s.P, before.bottomRightCorner(60, 60));
  for (std::size_t c = 1; c < s.clones.size(); ++c) EXPECT_LT(s.clones[c - 1].stamp, s.clones[c].stamp);

  RelState one = make_state(0.0, Pose::identity(), Mat6::Identity());
  EXPECT_THROW(marginalize(one), ContractError);
}

// ----------------------------------------------------------- measurement

TEST(MeasurementPredict, Examples) {
  const CameraIntrinsics K;
  const auto axis = measurement_predict(Pose::identity(), Pose::identity(), Vec3(0, 0, 4), K);
  ASSERT_TRUE(axis);
  EXPECT_LT((*axis - Vec2(320, 240)).norm(), 1e-12);

  const auto px = measurement_predict({Vec3(0, 3, 0), {}}, Pose::identity(), Vec3(0, 3, 5), K);
  ASSERT_TRUE(px);
  EXPECT_LT((*px - Vec2(320, 240)).norm(), 1e-12);

  EXPECT_FALSE(measurement_predict(Pose::identity(), Pose::identity(), Vec3(0, 0, -2), K));
}

namespace {

struct MeasCase {
  Pose rel, pose_i;
  Vec3 p_Oi;
  Extrinsic ext;
};

MeasCase random_meas_case(Rng& rng) {
  MeasCase m;
  m.rel = random_rel(rng);
  m.pose_i = {rng.normal3(2.0), small_rot(rng, 0.5)};
  m.ext.t_bc = rng.normal3(0.05);
  m.ext.q_bc = small_rot(rng, 0.05);
  // A point a few metres in front of UAV j's camera.
  const Vec3 pc_j(rng.normal() * 1.0, rng.normal() * 1.0, 4.0 + 4.0 * rng.uniform());
  const Vec3 p_Bi = m.rel.apply(m.ext.to_body(pc_j));
  m.p_Oi = m.pose_i.apply(p_Bi);
  return m;
}

CameraIntrinsics distorted() {
  CameraIntrinsics K;
  K.dist << -0.05, 0.01, 0.001, -0.002;
  return K;
}

}  // namespace

TEST(MeasurementJacobians, MatchFiniteDifferences) {
  Rng rng(10);
  const CameraIntrinsics K = distorted();
  double worst_x = 0.0, worst_f = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_meas_case(rng);
    const auto J = measurement_jacobians(m.rel, m.pose_i, m.p_Oi, K, m.ext);
    Mat26 nx;
    for (int c = 0; c < 6; ++c) {
      Vec6 d = Vec6::Zero();
      d(c) = kEps;
      const auto a = measurement_predict(perturb(m.rel, d), m.pose_i, m.p_Oi, K, m.ext);
      const auto b = measurement_predict(perturb(m.rel, -d), m.pose_i, m.p_Oi, K, m.ext);
      ASSERT_TRUE(a && b);
      nx.col(c) = (*a - *b) / (2 * kEps);
    }
    Mat23 nf;
    for (int c = 0; c < 3; ++c) {
      Vec3 d = Vec3::Zero();
      d(c) = kEps;
      const auto a = measurement_predict(m.rel, m.pose_i, m.p_Oi + d, K, m.ext);
      const auto b = measurement_predict(m.rel, m.pose_i, m.p_Oi - d, K, m.ext);
      nf.col(c) = (*a - *b) / (2 * kEps);
    }
    worst_x = std::max(worst_x, rel_err(nx, J.H_x));
    worst_f = std::max(worst_f, rel_err(nf, J.H_f));
  }
  EXPECT_LT(worst_x, 1e-5);
  EXPECT_LT(worst_f, 1e-5);
}

namespace {

// A state with `n` clones observed by one feature along a short, noisy path.
struct TrackCase {
  RelState s;
  FeatureTrack track;
};

TrackCase make_track(Rng& rng, int n, const CameraIntrinsics& K, bool perfect = true) {
  TrackCase tc;
  const Pose rel0 = random_rel(rng);
  tc.s = make_state(0.0, rel0, Mat6::Identity(), 10);
  tc.s.clones[0].vio_i = Pose{rng.normal3(1.0), small_rot(rng, 0.2)};
  for (int c = 1; c < n; ++c) {
    augment_clone(tc.s, 0.1 * c);
    auto& cl = tc.s.clones.back();
    cl.rel = perturb(cl.rel, (Vec6() << rng.normal3(0.05), rng.normal3(0.02)).finished());
    cl.vio_i = perturb(cl.vio_i, (Vec6() << rng.normal3(0.05), rng.normal3(0.02)).finished());
  }
  const auto& c0 = tc.s.clones[0];
  const Vec3 pc(rng.normal() * 0.5, rng.normal() * 0.5, 5.0 + rng.uniform());
  tc.track.landmark_id = 7;
  tc.track.p_Oi = c0.vio_i.apply(c0.rel.apply(pc));
  for (const auto& cl : tc.s.clones) {
    FeatureObs o;
    o.stamp = cl.stamp;
    o.px_j = *measurement_predict(cl.rel, cl.vio_i, tc.track.p_Oi, K);
    if (!perfect) o.px_j += rng.normal2(1.0);
    o.px_i = pixel_from_camera(K, cl.vio_i.inverse().apply(tc.track.p_Oi));
    tc.track.obs.push_back(o);
  }
  tc.track.anchor_depth = (c0.vio_i.inverse().apply(tc.track.p_Oi)).z();
  return tc;
}

}  // namespace

TEST(BuildResiduals, PerfectDataGivesZeroAndShape) {
  Rng rng(11);
  const CameraIntrinsics K;
  for (int n : {2, 4, 7}) {
    const auto tc = make_track(rng, n, K);
    const auto res = build_residuals(tc.track, tc.s, K);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->r.size(), 2 * n);
    EXPECT_EQ(res->H_x.rows(), 2 * n);
    EXPECT_EQ(res->H_x.cols(), 6 * n);
    EXPECT_EQ(res->H_f.cols(), 3);
    EXPECT_LT(res->r.norm(), 1e-9);
  }
}

TEST(BuildResiduals, StackedJacobiansMatchFiniteDifferences) {
  Rng rng(12);
  const CameraIntrinsics K;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto tc = make_track(rng, 2 + static_cast<int>(rng.index(5)), K, false);
    const auto res = build_residuals(tc.track, tc.s, K);
    ASSERT_TRUE(res);
    MatX num(res->r.size(), tc.s.dim());
    for (long c = 0; c < tc.s.dim(); ++c) {
      RelState a = tc.s, b = tc.s;
      Vec6 d = Vec6::Zero();
      d(c % 6) = kEps;
      auto& ca = a.clones[static_cast<std::size_t>(c / 6)];
      auto& cb = b.clones[static_cast<std::size_t>(c / 6)];
      ca.rel = perturb(ca.rel, d);
      cb.rel = perturb(cb.rel, -d);
      // r = z - h(x): the Jacobian of h is minus the derivative of r.
      num.col(c) = -(build_residuals(tc.track, a, K)->r - build_residuals(tc.track, b, K)->r) / (2 * kEps);
    }
    worst = std::max(worst, rel_err(num, res->H_x));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(BuildResiduals, UnknownStampIsContractError) {
  Rng rng(13);
  const CameraIntrinsics K;
  auto tc = make_track(rng, 3, K);
  tc.track.obs[1].stamp = 42.0;
  EXPECT_THROW(build_residuals(tc.track, tc.s, K), ContractError);
}

TEST(NullspaceProject, EightRowsToFive) {
  Rng rng(14);
  const CameraIntrinsics K;
  const auto tc = make_track(rng, 4, K, false);
  const auto res = build_residuals(tc.track, tc.s, K);
  ASSERT_TRUE(res);
  const auto p = nullspace_project(res->r, res->H_x, res->H_f);
  EXPECT_EQ(p.r.size(), 5);
  EXPECT_EQ(p.H_x.rows(), 5);
  EXPECT_EQ(p.rank, 3);
  EXPECT_LT(p.basis_residual, 1e-10);
  EXPECT_LE(p.r.norm(), res->r.norm() + 1e-12);
}

TEST(NullspaceProject, BasisAnnihilatesRandomFullRankHf) {
  Rng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const long m = 4 + static_cast<long>(rng.index(16));
    MatX Hf(m, 3), Hx(m, 12);
    VecX r(m);
    for (long i = 0; i < m; ++i) {
      r(i) = rng.normal();
      for (long j = 0; j < 3; ++j) Hf(i, j) = 100.0 * rng.normal();
      for (long j = 0; j < 12; ++j) Hx(i, j) = rng.normal();
    }
    const MatX B = left_nullspace_basis(Hf);
    EXPECT_EQ(B.cols(), m - 3);
    EXPECT_LT((B.transpose() * Hf).cwiseAbs().maxCoeff() / Hf.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((B.transpose() * B - MatX::Identity(m - 3, m - 3)).norm(), 1e-10);
    const auto p = nullspace_project(r, Hx, Hf);
    EXPECT_LT(p.basis_residual, 1e-10);
    // Same subspace as the explicit basis: equal Gram matrices.
    EXPECT_LT((p.H_x.transpose() * p.H_x - Hx.transpose() * B * B.transpose() * Hx).norm(), 1e-8);
    EXPECT_LE(p.r.norm(), r.norm() + 1e-12);
  }
}

TEST(NullspaceProject, RankDeficientReducesByRank) {
  MatX Hf = MatX::Zero(6, 3);
  Hf.col(0).setOnes();
  Hf.col(1) = 2.0 * Hf.col(0);
  Hf(0, 2) = 1.0;
  const auto p = nullspace_project(VecX::Ones(6), MatX::Ones(6, 6), Hf);
  EXPECT_EQ(p.rank, 2);
  EXPECT_TRUE(p.degenerate);
  EXPECT_EQ(p.r.size(), 4);
  EXPECT_THROW(nullspace_project(VecX::Ones(3), MatX::Ones(3, 6), MatX::Identity(3, 3)), ContractError);
}

// ------------------------------------------------------- gate and update

TEST(GateMahalanobis, Examples) {
  EXPECT_NEAR(chi2_quantile(0.95, 2), 5.991, 1e-3);
  EXPECT_NEAR(chi2_quantile(0.95, 1), 3.841, 1e-3);
  const MatX P = MatX::Identity(6, 6);
  Rng rng(16);
  MatX H(2, 6);
  for (long i = 0; i < 12; ++i) H(i) = rng.normal();
  const MatX R = MatX::Identity(2, 2);
  EXPECT_TRUE(gate_mahalanobis(VecX::Zero(2), H, P, R, 0.95).accept);
  const VecX r = Vec2(0.3, -0.2);
  EXPECT_TRUE(gate_mahalanobis(r, H, P, R, 0.95).accept);
  EXPECT_FALSE(gate_mahalanobis(100.0 * r, H, P, R, 0.95).accept);
  const auto g = gate_mahalanobis(r, MatX::Zero(2, 6), P, MatX::Zero(2, 2), 0.95);
  EXPECT_TRUE(g.singular);
  EXPECT_FALSE(g.accept);
  EXPECT_THROW(chi2_quantile(1.0, 2), ConfigError);
}

TEST(KalmanUpdate, ScalarMatchesTextbookGain) {
  const MatX P = MatX::Constant(1, 1, 4.0), H = MatX::Ones(1, 1), R = MatX::Ones(1, 1);
  const auto k = kalman_update(P, VecX::Constant(1, 2.0), H, R);
  EXPECT_NEAR(k.dx(0), 4.0 / 5.0 * 2.0, 1e-12);
  EXPECT_NEAR(k.P(0, 0), 4.0 * 1.0 / 5.0, 1e-12);
}

TEST(KalmanUpdate, ZeroResidualKeepsStateAndShrinksCovariance) {
  Rng rng(17);
  RelState s = make_state(0.0, random_rel(rng), Mat6::Identity());
  augment_clone(s, 0.1);
  const RelState before = s;
  MatX H(4, 12);
  for (long i = 0; i < H.size(); ++i) H(i) = rng.normal();
  update(s, VecX::Zero(4), H, MatX::Identity(4, 4));
  for (std::size_t c = 0; c < s.clones.size(); ++c)
    EXPECT_LT(pose_error(s.clones[c].rel, before.clones[c].rel).norm(), 1e-15);
  EXPECT_LT(s.P.trace(), before.P.trace());
  EXPECT_THROW(update(s, VecX::Zero(4), MatX::Zero(4, 6), MatX::Identity(4, 4)), ContractError);
}

TEST(KalmanUpdate, TraceNonIncreasingAndPsd) {
  Rng rng(18);
  for (int trial = 0; trial < 1000; ++trial) {
    const long n = 6 + 6 * static_cast<long>(rng.index(3));
    const long m = 1 + static_cast<long>(rng.index(8));
    const MatX P = random_psd(rng, n);
    MatX H(m, n);
    for (long i = 0; i < H.size(); ++i) H(i) = rng.normal();
    VecX r(m);
    for (long i = 0; i < m; ++i) r(i) = rng.normal();
    const auto k = kalman_update(P, r, H, 0.5 * MatX::Identity(m, m));
    EXPECT_LE(k.P.trace(), P.trace() + 1e-9);
    EXPECT_GE(min_eig(k.P), -1e-9);
  }
}

TEST(CompressRows, PreservesNormalEquations) {
  Rng rng(19);
  MatX H(40, 12);
  VecX r(40);
  for (long i = 0; i < H.size(); ++i) H(i) = rng.normal();
  for (long i = 0; i < r.size(); ++i) r(i) = rng.normal();
  MatX Hc = H;
  VecX rc = r;
  compress_rows(Hc, rc);
  EXPECT_EQ(Hc.rows(), 12);
  EXPECT_LT((Hc.transpose() * Hc - H.transpose() * H).norm(), 1e-9);
  EXPECT_LT((Hc.transpose() * rc - H.transpose() * r).norm(), 1e-9);
}

// ------------------------------------------------------------- asynchrony

TEST(FastPropagateAsync, Examples) {
  Rng rng(20);
  const Pose rel = random_rel(rng);
  EXPECT_LT(pose_error(fast_propagate_async(rel, {}), rel).norm(), 1e-15);

  // Master frozen at t_m, slave frames every 1/30 s; pairing 0.16 s back
  // lands on the frame five steps earlier.
  std::vector<Pose> wj;
  for (int k = 0; k <= 30; ++k) wj.push_back({Vec3(0.1 * k, 0.02 * k * k, 0), rot_z(0.01 * k)});
  const Pose wi{Vec3(-1, 0, 0.5), rot_z(0.2)};
  const int m = 30;
  const int paired = static_cast<int>(std::llround((m / 30.0 - 0.16) * 30.0));
  std::vector<SlaveIncrement> inc;
  for (int k = paired; k < m; ++k) {
    const Pose d = relative_from_world(wj[k], wj[k + 1]);
    inc.push_back({k / 30.0, (k + 1) / 30.0, d.t, d.q});
  }
  EXPECT_EQ(inc.size(), 5u);
  const Pose out = fast_propagate_async(relative_from_world(wi, wj[paired]), inc);
  const Pose truth = relative_from_world(wi, wj[m]);
  EXPECT_LT((out.t - truth.t).norm(), 1e-9);
  EXPECT_LT(angle_between(out.q, truth.q), 1e-9);

  inc.erase(inc.begin() + 2);
  EXPECT_THROW(fast_propagate_async(rel, inc), ContractError);
}

// ---------------------------------------------------------- initialization

namespace {

std::vector<Vec2> pixels_in_j(const Pose& rel, const std::vector<Vec3>& pts, const CameraIntrinsics& K) {
  std::vector<Vec2> px;
  for (const auto& p : pts) px.push_back(*measurement_predict(rel, Pose::identity(), p, K));
  return px;
}

}  // namespace

TEST(InitializeCoarse, ExactCorrespondencesRecoverPose) {
  Rng rng(21);
  const CameraIntrinsics K;
  for (bool planar : {false, true}) {
    const Pose rel{Vec3(0, 3, 0), so3_exp(Vec3(0.02, -0.05, 0.01))};
    std::vector<Vec3> pts;
    for (int k = 0; k < 30; ++k)
      pts.emplace_back(-2 + 4 * rng.uniform(), 1 + 4 * rng.uniform(), planar ? 5.0 : 4 + 3 * rng.uniform());
    const auto est = initialize_coarse(pts, pixels_in_j(rel, pts, K), K);
    ASSERT_TRUE(est) << "planar " << planar;
    EXPECT_LT((est->t - rel.t).norm(), 1e-6);
    EXPECT_LT(angle_between(est->q, rel.q), 1e-6);
  }
}

TEST(InitializeCoarse, OnePixelNoiseWithinEightyCentimetres) {
  const CameraIntrinsics K;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const Pose rel{Vec3(3, 0, 0), so3_exp(rng.normal3(0.03))};
    std::vector<Vec3> pts;
    while (pts.size() < 50) {
      const Vec3 p(-1.5 + 6 * rng.uniform(), -2.5 + 5 * rng.uniform(), 5.0);
      if (measurement_predict(rel, Pose::identity(), p, K) &&
          K.in_bounds(*measurement_predict(rel, Pose::identity(), p, K)))
        pts.push_back(p);
    }
    auto px = pixels_in_j(rel, pts, K);
    for (auto& x : px) x += rng.normal2(1.0);
    const auto est = initialize_coarse(pts, px, K);
    ASSERT_TRUE(est) << seed;
    EXPECT_LT((est->t - rel.t).norm(), 0.8) << seed;
  }
}

TEST(InitializeCoarse, DegenerateInputFails) {
  const CameraIntrinsics K;
  const Pose rel{Vec3(3, 0, 0), {}};
  std::vector<Vec3> line;
  for (int k = 0; k < 20; ++k) line.emplace_back(0.1 * k, 0.05 * k, 5.0);
  EXPECT_FALSE(initialize_coarse(line, pixels_in_j(rel, line, K), K));
  std::vector<Vec3> few{{0, 0, 5}, {1, 0, 5}, {0, 1, 5}, {1, 1, 6}, {2, 1, 5}};
  EXPECT_FALSE(initialize_coarse(few, pixels_in_j(rel, few, K), K));
}

// ----------------------------------------------------------------- config

TEST(FilterConfig, Validation) {
  FilterConfig c;
  EXPECT_NO_THROW(c.validate());
  const Mat6 P0 = c.P0();
  EXPECT_NEAR(P0(0, 0), 0.25, 1e-12);
  EXPECT_NEAR(P0(3, 3), std::pow(deg2rad(5.0), 2), 1e-15);
  c.max_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = FilterConfig{};
  c.window_m = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = FilterConfig{};
  c.noise.pixel_sigma = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RelMsckf, StepBeforeInitializeIsContractError) {
  RelMsckf f(FilterConfig{}, CameraIntrinsics{});
  EXPECT_THROW(f.step(StepInput{}), ContractError);
}
