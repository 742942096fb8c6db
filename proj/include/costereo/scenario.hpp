#pragma once

// Scenario runner: ground truth -> link -> frame pairing -> dual-channel
// association -> relative pose filter, plus metrics, the pixel-perturbation
// study, and CSV/JSON report writers.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "costereo/association.hpp"
#include "costereo/camera.hpp"
#include "costereo/errors.hpp"
#include "costereo/geometry.hpp"
#include "costereo/netsim.hpp"
#include "costereo/rel_msckf.hpp"
#include "costereo/rng.hpp"
#include "costereo/world_sim.hpp"

namespace costereo {

using Json = nlohmann::json;

// ------------------------------------------------------------------ config

enum class InitMode { Pnp, Prior };

struct OcclusionEntry {
  double start = 0.0;  // [start, end)
  double end = 0.0;
  bool uav_i = true;
  bool uav_j = true;
  bool full = false;
  OcclusionMask mask;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  double duration = 10.0;
  double rate = 30.0;
  TrajectorySpec trajectory;
  WallSpec wall;
  CameraIntrinsics camera;
  Extrinsic extrinsic;
  ObserveParams observe;
  double depth_sigma = 0.05;  // simulated depth sample noise [m]
  VioNoiseModel vio;
  ChannelConfig channel;
  LinkConfig link;
  double keypoints_hz = 13.0;
  FilterConfig filter;
  InitMode init_mode = InitMode::Pnp;
  Vec3 init_error = Vec3::Zero();       // m, added to the initial estimate
  Vec3 init_rot_error = Vec3::Zero();   // rad, right-multiplied
  std::vector<OcclusionEntry> occlusions;
  double async_offset = 0.0;            // s, > 0 forces the pairing offset
  double converge_threshold = 0.2;      // m
  double converge_sustain = 0.5;        // s
  bool check_invariants = true;

  void validate() const {
    if (!(duration > 0.0)) throw ConfigError("duration must be > 0");
    if (!(rate > 0.0)) throw ConfigError("rate must be > 0");
    trajectory.validate();
    camera.validate();
    vio.validate();
    channel.validate();
    link.validate();
    filter.validate();
    if (!(depth_sigma >= 0.0)) throw ConfigError("observe: depth_sigma must be >= 0");
    if (!(keypoints_hz >= 0.0)) throw ConfigError("link: keypoints_hz must be >= 0");
    if (async_offset < 0.0) throw ConfigError("async_offset must be >= 0");
    if (std::abs(channel.rate - rate) > 1e-9) throw ConfigError("channel rate must equal rate");
    for (const auto& o : occlusions) {
      if (!(o.end > o.start)) throw ConfigError("occlusion: empty window");
      if (o.mask.drop_prob < 0.0 || o.mask.drop_prob > 1.0)
        throw ConfigError("occlusion: drop_prob must lie in [0, 1]");
    }
  }
};

namespace detail {

inline void reject_unknown(const Json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_vec3(const Json& j, const char* key, Vec3& out) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 3) throw ConfigError(std::string(key) + ": expected 3 numbers");
  out = Vec3(v[0], v[1], v[2]);
}

inline void read_deg(const Json& j, const char* key, double& out_rad) {
  if (j.contains(key)) out_rad = deg2rad(j.at(key).get<double>());
}

}  // namespace detail

/// Parses a scenario document; every field is optional.
inline ScenarioConfig parse_scenario(const Json& doc) {
  using detail::read;
  ScenarioConfig c;
  try {
    detail::reject_unknown(doc,
                           {"name", "seed", "duration", "rate", "trajectory", "wall", "camera",
                            "extrinsic", "observe", "vio", "channel", "link", "filter",
                            "init_mode", "init_error", "init_rot_error_deg", "occlusions",
                            "async_offset", "convergence", "check_invariants"},
                           "scenario");
    read(doc, "seed", c.seed);
    read(doc, "duration", c.duration);
    read(doc, "rate", c.rate);
    c.channel.rate = c.rate;

    if (doc.contains("trajectory")) {
      const auto& t = doc["trajectory"];
      detail::reject_unknown(t, {"kind", "extent", "speed", "baseline", "yaw_theta", "depth_d"},
                             "trajectory");
      if (t.contains("kind")) c.trajectory.kind = parse_trajectory_kind(t["kind"].get<std::string>());
      read(t, "extent", c.trajectory.extent);
      read(t, "speed", c.trajectory.speed);
      detail::read_vec3(t, "baseline", c.trajectory.baseline);
      read(t, "yaw_theta", c.trajectory.yaw_theta);
      read(t, "depth_d", c.trajectory.depth_d);
    }
    c.wall.depth = c.trajectory.depth_d;
    // Unless given, landmark spacing scales with depth so the wall keeps the
    // same texture density in the image at every distance.
    c.wall.spacing = 0.1 * c.wall.depth;
    if (doc.contains("wall")) {
      const auto& w = doc["wall"];
      detail::reject_unknown(w, {"width", "height", "spacing", "center"}, "wall");
      read(w, "width", c.wall.width);
      read(w, "height", c.wall.height);
      read(w, "spacing", c.wall.spacing);
      if (w.contains("center")) {
        const auto v = w["center"].get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError("wall.center: expected 2 numbers");
        c.wall.center_x = v[0];
        c.wall.center_y = v[1];
      }
    }
    if (doc.contains("camera")) {
      const auto& k = doc["camera"];
      detail::reject_unknown(k, {"fx", "fy", "cx", "cy", "width", "height", "dist"}, "camera");
      read(k, "fx", c.camera.fx);
      read(k, "fy", c.camera.fy);
      read(k, "cx", c.camera.cx);
      read(k, "cy", c.camera.cy);
      read(k, "width", c.camera.width);
      read(k, "height", c.camera.height);
      if (k.contains("dist")) {
        const auto v = k["dist"].get<std::vector<double>>();
        if (v.size() != 4) throw ConfigError("camera.dist: expected k1 k2 p1 p2");
        c.camera.dist = Eigen::Vector4d(v[0], v[1], v[2], v[3]);
      }
      c.camera.fov_alpha = c.camera.horizontal_fov();
    }
    if (doc.contains("extrinsic")) {
      const auto& e = doc["extrinsic"];
      detail::reject_unknown(e, {"t", "q_wxyz"}, "extrinsic");
      detail::read_vec3(e, "t", c.extrinsic.t_bc);
      if (e.contains("q_wxyz")) {
        const auto v = e["q_wxyz"].get<std::vector<double>>();
        if (v.size() != 4) throw ConfigError("extrinsic.q_wxyz: expected 4 numbers");
        c.extrinsic.q_bc = UnitQuaternion(v[0], v[1], v[2], v[3]);
      }
    }
    if (doc.contains("observe")) {
      const auto& o = doc["observe"];
      detail::reject_unknown(o, {"pixel_sigma", "grid_px", "max_features", "depth_sigma"},
                             "observe");
      read(o, "pixel_sigma", c.observe.pixel_sigma);
      read(o, "grid_px", c.observe.grid_px);
      read(o, "max_features", c.observe.max_features);
      read(o, "depth_sigma", c.depth_sigma);
    }
    if (doc.contains("vio")) {
      const auto& v = doc["vio"];
      detail::reject_unknown(v, {"sigma_dt", "sigma_dq_deg", "scale_drift"}, "vio");
      read(v, "sigma_dt", c.vio.sigma_dt);
      detail::read_deg(v, "sigma_dq_deg", c.vio.sigma_dq);
      read(v, "scale_drift", c.vio.scale_drift);
    }
    if (doc.contains("channel")) {
      const auto& ch = doc["channel"];
      detail::reject_unknown(ch,
                             {"mode", "latency_frames", "flow_sigma", "flow_drop_prob",
                              "inlier_rate", "grid_px", "ransac_thresh", "ransac_iterations",
                              "angle_thresh_deg", "imgdb_capacity"},
                             "channel");
      if (ch.contains("mode")) c.channel.mode = parse_channel_mode(ch["mode"].get<std::string>());
      read(ch, "latency_frames", c.channel.guidance_latency_frames);
      read(ch, "flow_sigma", c.channel.flow_sigma);
      read(ch, "flow_drop_prob", c.channel.flow_drop_prob);
      read(ch, "inlier_rate", c.channel.inlier_rate);
      read(ch, "grid_px", c.channel.grid_px);
      read(ch, "ransac_thresh", c.channel.ransac_thresh);
      read(ch, "ransac_iterations", c.channel.ransac_iterations);
      detail::read_deg(ch, "angle_thresh_deg", c.channel.angle_thresh);
      read(ch, "imgdb_capacity", c.channel.imgdb_capacity);
    }
    if (doc.contains("link")) {
      const auto& l = doc["link"];
      detail::reject_unknown(
          l, {"latency", "bandwidth_cap", "clock_skew", "dropout_windows", "keypoints_hz"}, "link");
      read(l, "latency", c.link.latency);
      read(l, "bandwidth_cap", c.link.bandwidth_cap);
      read(l, "clock_skew", c.link.clock_skew);
      read(l, "keypoints_hz", c.keypoints_hz);
      if (l.contains("dropout_windows")) {
        for (const auto& w : l["dropout_windows"]) {
          const auto v = w.get<std::vector<double>>();
          if (v.size() != 2) throw ConfigError("link.dropout_windows: expected [start, end]");
          c.link.dropout_windows.push_back({v[0], v[1]});
        }
      }
    }
    if (doc.contains("filter")) {
      const auto& f = doc["filter"];
      detail::reject_unknown(f,
                             {"window_m", "init_sigma_pos", "init_sigma_rot_deg", "sigma_dt",
                              "sigma_dq_deg", "pixel_sigma", "flow_sigma", "depth_sigma",
                              "mahalanobis_alpha", "max_iterations"},
                             "filter");
      read(f, "window_m", c.filter.window_m);
      read(f, "max_iterations", c.filter.max_iterations);
      read(f, "init_sigma_pos", c.filter.init_sigma_pos);
      detail::read_deg(f, "init_sigma_rot_deg", c.filter.init_sigma_rot);
      read(f, "sigma_dt", c.filter.noise.sigma_dt);
      detail::read_deg(f, "sigma_dq_deg", c.filter.noise.sigma_dq);
      read(f, "pixel_sigma", c.filter.noise.pixel_sigma);
      read(f, "flow_sigma", c.filter.noise.flow_sigma);
      read(f, "depth_sigma", c.filter.noise.depth_sigma);
      read(f, "mahalanobis_alpha", c.filter.noise.mahalanobis_alpha);
    }
    if (doc.contains("init_mode")) {
      const auto m = doc["init_mode"].get<std::string>();
      if (m == "pnp") c.init_mode = InitMode::Pnp;
      else if (m == "prior") c.init_mode = InitMode::Prior;
      else throw ConfigError("init_mode must be 'pnp' or 'prior'");
    }
    detail::read_vec3(doc, "init_error", c.init_error);
    if (doc.contains("init_rot_error_deg")) {
      Vec3 d;
      detail::read_vec3(doc, "init_rot_error_deg", d);
      c.init_rot_error = d * (kPi / 180.0);
    }
    if (doc.contains("occlusions")) {
      for (const auto& o : doc["occlusions"]) {
        detail::reject_unknown(o, {"start", "end", "uav", "full", "rects", "drop_prob"},
                               "occlusion");
        OcclusionEntry e;
        read(o, "start", e.start);
        read(o, "end", e.end);
        read(o, "full", e.full);
        const auto who = o.value("uav", std::string("both"));
        if (who == "i") e.uav_j = false;
        else if (who == "j") e.uav_i = false;
        else if (who != "both") throw ConfigError("occlusion.uav must be i, j or both");
        if (o.contains("rects")) {
          for (const auto& r : o["rects"]) {
            const auto v = r.get<std::vector<double>>();
            if (v.size() != 4) throw ConfigError("occlusion.rects: expected [u0, v0, u1, v1]");
            e.mask.rects.push_back({v[0], v[1], v[2], v[3]});
          }
        }
        read(o, "drop_prob", e.mask.drop_prob);
        c.occlusions.push_back(e);
      }
    }
    read(doc, "async_offset", c.async_offset);
    if (doc.contains("convergence")) {
      const auto& cv = doc["convergence"];
      detail::reject_unknown(cv, {"threshold", "sustain"}, "convergence");
      read(cv, "threshold", c.converge_threshold);
      read(cv, "sustain", c.converge_sustain);
    }
    read(doc, "check_invariants", c.check_invariants);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed scenario: ") + e.what());
  }
  c.validate();
  return c;
}

inline Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ----------------------------------------------------------------- metrics

struct StepRow {
  double stamp = 0.0;
  bool initialized = false;
  Pose est;
  Pose gt;
  double pos_err = std::numeric_limits<double>::quiet_NaN();
  double ori_err_deg = std::numeric_limits<double>::quiet_NaN();
  Eigen::Matrix<double, 6, 1> three_sigma = Eigen::Matrix<double, 6, 1>::Zero();
  int n_tracks_used = 0;
  int n_gated_out = 0;
  int n_matches = 0;
};

struct MetricsSummary {
  double pos_rmse = std::numeric_limits<double>::quiet_NaN();
  double ori_rmse_deg = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  double convergence_time = std::numeric_limits<double>::quiet_NaN();
  double init_time = std::numeric_limits<double>::quiet_NaN();
  double initial_error = std::numeric_limits<double>::quiet_NaN();
  double mean_matches = 0.0;
  double association_rate_hz = 0.0;
  long steps = 0;
  HealthStats health;
  BandwidthReport bandwidth;
};

struct MetricsRecord {
  std::vector<StepRow> rows;
  MetricsSummary summary;
};

struct TimedPoseSample {
  double stamp = 0.0;
  Pose pose;
};

struct RmseResult {
  double pos = 0.0;      // m
  double ori_deg = 0.0;  // degrees
  std::size_t n = 0;
};

/// RMSE of translation error norms and geodesic angles over samples with
/// stamp >= first stamp + skip, matched by stamp.
inline RmseResult compute_rmse(const std::vector<TimedPoseSample>& est,
                               const std::vector<TimedPoseSample>& gt, double skip) {
  std::map<long long, const Pose*> gt_at;
  auto key = [](double t) { return static_cast<long long>(std::llround(t * 1e6)); };
  for (const auto& g : gt) gt_at[key(g.stamp)] = &g.pose;
  RmseResult r;
  if (est.empty()) throw DomainError("compute_rmse: no samples");
  const double t0 = est.front().stamp + skip;
  double sp = 0.0, so = 0.0;
  for (const auto& e : est) {
    if (e.stamp < t0 - 1e-9) continue;
    auto it = gt_at.find(key(e.stamp));
    if (it == gt_at.end()) continue;
    const double dp = (e.pose.t - it->second->t).norm();
    const double da = rad2deg(angle_between(e.pose.q, it->second->q));
    sp += dp * dp;
    so += da * da;
    ++r.n;
  }
  if (r.n == 0) throw DomainError("compute_rmse: no overlapping samples");
  r.pos = std::sqrt(sp / static_cast<double>(r.n));
  r.ori_deg = std::sqrt(so / static_cast<double>(r.n));
  return r;
}

/// First time after which the error stays below `threshold` for `sustain`
/// seconds (nullopt if never).
inline std::optional<double> convergence_time(const std::vector<StepRow>& rows, double threshold,
                                              double sustain) {
  std::optional<double> start;
  for (const auto& r : rows) {
    const bool ok = r.initialized && std::isfinite(r.pos_err) && r.pos_err < threshold;
    if (!ok) {
      start.reset();
      continue;
    }
    if (!start) start = r.stamp;
    if (r.stamp - *start >= sustain - 1e-9) return *start;
  }
  return std::nullopt;
}

// ------------------------------------------------------------------ runner

namespace detail {

struct SlavePayload {
  long index = 0;
};

inline OcclusionMask active_mask(const ScenarioConfig& c, double t, Uav uav) {
  OcclusionMask m;
  for (const auto& o : c.occlusions) {
    if (!(t >= o.start && t < o.end)) continue;
    if ((uav == Uav::I && !o.uav_i) || (uav == Uav::J && !o.uav_j)) continue;
    if (o.full) return OcclusionMask::full(c.camera);
    m.rects.insert(m.rects.end(), o.mask.rects.begin(), o.mask.rects.end());
    m.drop_prob = std::max(m.drop_prob, o.mask.drop_prob);
  }
  return m;
}

}  // namespace detail

/// Runs one scenario end to end.
inline MetricsRecord run_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  const double dt = 1.0 / cfg.rate;
  const auto truth = gen_trajectory(cfg.trajectory, cfg.rate, cfg.duration);
  const long N = static_cast<long>(truth.size());
  MetricsRecord rec;
  if (N < 2) return rec;

  const LandmarkSet world = make_landmark_wall(cfg.wall);
  std::vector<TimedPose> ti(N), tj(N);
  for (long k = 0; k < N; ++k) {
    ti[k] = {truth[k].stamp, truth[k].i};
    tj[k] = {truth[k].stamp, truth[k].j};
  }
  const auto vio_i = simulate_vio(ti, cfg.vio, derive_seed(cfg.seed, 0x11));
  const auto vio_j = simulate_vio(tj, cfg.vio, derive_seed(cfg.seed, 0x22));

  std::vector<FrameObservation> frames_i(N), frames_j(N);
  for (long k = 0; k < N; ++k) {
    const double t = truth[k].stamp;
    const auto uk = static_cast<std::uint64_t>(k);
    frames_i[k] = observe_frame(Uav::I, t, truth[k].i, world, cfg.camera, cfg.extrinsic,
                                detail::active_mask(cfg, t, Uav::I), cfg.observe,
                                derive_seed(cfg.seed, 0x33, uk));
    frames_j[k] = observe_frame(Uav::J, t, truth[k].j, world, cfg.camera, cfg.extrinsic,
                                detail::active_mask(cfg, t, Uav::J), cfg.observe,
                                derive_seed(cfg.seed, 0x44, uk));
  }
  auto frame_index = [&](double stamp) {
    return static_cast<long>(std::llround(stamp * cfg.rate));
  };

  Link<detail::SlavePayload> link(cfg.link);
  PairBuffer<long> pairs(0.5 * dt, 60);
  DualChannel channel(cfg.channel, cfg.camera, derive_seed(cfg.seed, 0x55));
  RelMsckf filter(cfg.filter, cfg.camera, cfg.extrinsic);
  std::optional<double> forced;
  if (cfg.async_offset > 0.0) forced = cfg.async_offset;

  std::map<long, long> paired;  // master index -> slave index, awaiting processing
  std::vector<long> slave_of(N, -1);  // slave frame each processed master frame used
  long last_slave_vio = -1;  // newest slave odometry index received
  long last_clone_slave = -1;
  long last_clone_master = -1;
  long kp_slot = -1;
  std::size_t emissions = 0;
  long emission_ticks = 0;
  long first_emit_tick = -1, last_emit_tick = -1;
  double match_sum = 0.0;

  for (long k = 0; k < N; ++k) {
    const double t = truth[k].stamp;
    // Slave side: odometry pose and frame every tick, keypoints at their own rate.
    link.send(MessageKind::VioPose, kVioPoseBytes, t, {k});
    link.send(MessageKind::FrameStub, kFrameStubBytes, t, {k});
    if (cfg.keypoints_hz > 0.0) {
      const long slot = static_cast<long>(std::floor(t * cfg.keypoints_hz + 1e-9));
      if (slot != kp_slot) {
        kp_slot = slot;
        link.send(MessageKind::Keypoints, kKeypointBytes, t, {k});
      }
    }
    pairs.push_master(t, k);
    for (const auto& m : link.step(t)) {
      if (m.kind == MessageKind::VioPose) last_slave_vio = std::max(last_slave_vio, m.payload.index);
      if (m.kind == MessageKind::FrameStub) pairs.push_slave(truth[m.payload.index].stamp, m.payload.index);
    }
    const auto formed = pairs.pair_closest_frames(forced);
    if (k == 0) continue;

    // Master processes its previous frame, now that the slave data has landed.
    const long m = k - 1;
    const double tm = truth[m].stamp;
    for (const auto& p : formed) {
      paired[p.master] = p.slave;
      if (cfg.check_invariants && !forced &&
          std::abs(p.master_stamp - p.slave_stamp) > pairs.tolerance() + 1e-12)
        throw InvariantBreach(m, "netsim", "pair outside tolerance");
    }
    std::optional<long> s;
    if (auto it = paired.find(m); it != paired.end()) s = it->second;
    paired.erase(paired.begin(), paired.upper_bound(m));
    if (s) slave_of[m] = *s;

    std::optional<MatchSet> out;
    if (s) {
      FrameSet fs{tm, frames_i[m], frames_j[*s]};
      try {
        out = channel.tick(fs);
      } catch (const ContractError& e) {
        throw InvariantBreach(m, "association", e.what());
      }
      if (out) {
        if (first_emit_tick < 0) first_emit_tick = emission_ticks;
        last_emit_tick = emission_ticks;
        ++emissions;
        match_sum += static_cast<double>(out->size());
        if (cfg.check_invariants) {
          for (std::size_t q = 1; q < out->matches.size(); ++q)
            if (out->matches[q].landmark_id <= out->matches[q - 1].landmark_id)
              throw InvariantBreach(m, "association", "duplicate landmark id in match set");
        }
      }
      ++emission_ticks;
    }

    // Filter inputs.
    std::vector<MatchInput> inputs;
    double match_stamp = tm;
    if (out) {
      match_stamp = out->stamp;
      const long src = frame_index(out->stamp);
      const auto depth = sample_depth(frames_i[src], truth[src].i, world, cfg.extrinsic,
                                      cfg.depth_sigma, derive_seed(cfg.seed, 0x66, src));
      inputs.reserve(out->size());
      for (const auto& fm : out->matches) {
        MatchInput mi{fm.landmark_id, fm.px_i, fm.px_j, std::numeric_limits<double>::quiet_NaN(),
                      fm.hops};
        auto it = depth.find(fm.landmark_id);
        if (it != depth.end()) mi.depth_i = it->second;
        inputs.push_back(mi);
      }
    }

    const Pose gt = relative_from_world(truth[m].i, truth[m].j);
    StepRow row;
    row.stamp = tm;
    row.gt = gt;
    row.n_matches = out ? static_cast<int>(out->size()) : 0;

    if (!filter.initialized()) {
      std::optional<Pose> init;
      long init_slave = s.value_or(-1);
      if (cfg.init_mode == InitMode::Prior && s) {
        init = relative_from_world(truth[m].i, truth[*s].j);
      } else if (cfg.init_mode == InitMode::Pnp && out && s) {
        // Solve at the match stamp, then carry the pose to this frame on both
        // odometry streams (a no-op for matches at the current frame).
        const long src = frame_index(out->stamp);
        const long src_slave = slave_of[src];
        if (src_slave >= 0) {
          std::vector<Vec3> pts;
          std::vector<Vec2> pix;
          for (const auto& mi : inputs) {
            if (!std::isfinite(mi.depth_i)) continue;
            pts.push_back(cfg.extrinsic.to_body(mi.depth_i * ray_from_pixel(cfg.camera, mi.px_i)));
            pix.push_back(mi.px_j);
          }
          init = initialize_coarse(pts, pix, cfg.camera, cfg.extrinsic);
          if (init && src != m)
            init = relative_from_world(vio_i[m].pose, vio_i[src].pose) * *init *
                   relative_from_world(vio_j[src_slave].pose, vio_j[*s].pose);
        }
      }
      if (init) {
        Pose p0 = *init;
        p0.t += cfg.init_error;
        p0.q = p0.q * so3_exp(cfg.init_rot_error);
        filter.initialize(tm, truth[init_slave].stamp, p0, vio_i[m].pose);
        last_clone_master = m;
        last_clone_slave = init_slave;
        rec.summary.init_time = tm;
      }
    } else {
      // Slave side of the new clone: the paired frame, or the newest slave
      // odometry known when no pair exists.
      long sj = s ? *s : std::max(last_clone_slave, std::min(last_slave_vio, m));
      sj = std::max(sj, last_clone_slave);
      StepInput in;
      in.stamp = tm;
      in.slave_stamp = truth[sj].stamp;
      in.u = vio_increment(vio_i[last_clone_master].pose, vio_i[m].pose,
                           vio_j[last_clone_slave].pose, vio_j[sj].pose);
      in.steps_i = static_cast<double>(m - last_clone_master);
      in.steps_j = static_cast<double>(sj - last_clone_slave);
      in.vio_i = vio_i[m].pose;
      if (out) {
        in.matches = &inputs;
        in.match_stamp = match_stamp;
      }
      if (s) in.discard = &channel.last_stats().rejected_ids;
      StepReport rep;
      try {
        rep = filter.step(in);
      } catch (const NumericalHealthError& e) {
        throw InvariantBreach(m, "rel_msckf", e.what());
      } catch (const ContractError& e) {
        throw InvariantBreach(m, "rel_msckf", e.what());
      }
      if (cfg.check_invariants && filter.health().violations > 0)
        throw InvariantBreach(m, "rel_msckf", "covariance or nullspace health violated");
      row.n_tracks_used = rep.n_tracks_used;
      row.n_gated_out = rep.n_gated_out;
      last_clone_master = m;
      last_clone_slave = sj;
    }

    if (filter.initialized()) {
      // Bring the estimate from the clone's slave stamp to the master stamp.
      std::vector<SlaveIncrement> incs;
      const long to = std::min(last_slave_vio, m);
      for (long q = last_clone_slave; q < to; ++q) {
        const Pose d = relative_from_world(vio_j[q].pose, vio_j[q + 1].pose);
        incs.push_back({truth[q].stamp, truth[q + 1].stamp, d.t, d.q});
      }
      row.initialized = true;
      row.est = fast_propagate_async(filter.estimate_async(), incs);
      row.pos_err = (row.est.t - gt.t).norm();
      row.ori_err_deg = rad2deg(angle_between(row.est.q, gt.q));
      row.three_sigma = 3.0 * filter.active_sigma();
      if (!std::isfinite(rec.summary.initial_error)) rec.summary.initial_error = row.pos_err;
    }
    rec.rows.push_back(row);
  }

  auto& sm = rec.summary;
  sm.steps = static_cast<long>(rec.rows.size());
  sm.health = filter.health();
  sm.bandwidth = bandwidth_report(link.delivered_log(), cfg.duration);
  sm.mean_matches = emissions ? match_sum / static_cast<double>(emissions) : 0.0;
  // Steady-state output rate: emissions after the first, over the ticks they span.
  sm.association_rate_hz =
      last_emit_tick > first_emit_tick
          ? static_cast<double>(emissions - 1) * cfg.rate /
                static_cast<double>(last_emit_tick - first_emit_tick)
          : 0.0;
  const auto tc = convergence_time(rec.rows, cfg.converge_threshold, cfg.converge_sustain);
  sm.converged = tc.has_value();
  if (tc) sm.convergence_time = *tc;
  std::vector<TimedPoseSample> est, gt;
  for (const auto& r : rec.rows) {
    if (!r.initialized) continue;
    est.push_back({r.stamp, r.est});
    gt.push_back({r.stamp, r.gt});
  }
  if (!est.empty()) {
    const double skip = tc ? std::max(0.0, *tc - est.front().stamp) : 0.0;
    try {
      const auto rm = compute_rmse(est, gt, skip);
      sm.pos_rmse = rm.pos;
      sm.ori_rmse_deg = rm.ori_deg;
    } catch (const DomainError&) {
    }
  }
  return rec;
}

// ------------------------------------------------------------ perturbation

struct PerturbationCase {
  std::vector<Vec3> features;  // camera frame, Z > 0
  double sigma = 0.0;          // normalized image units
  int trials = 1000;
};

struct PerturbationStats {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Stacked 2n x 3 sensitivity of normalized image coordinates to a shift of
/// the camera-frame points.
inline MatX perturbation_matrix(const std::vector<Vec3>& features) {
  MatX A(2 * static_cast<long>(features.size()), 3);
  for (std::size_t k = 0; k < features.size(); ++k) {
    const Vec3& p = features[k];
    if (!(p.z() > 0.0)) throw DomainError("perturbation: features need Z > 0");
    const double iz = 1.0 / p.z();
    A.row(2 * static_cast<long>(k)) << iz, 0.0, -p.x() * iz * iz;
    A.row(2 * static_cast<long>(k) + 1) << 0.0, iz, -p.y() * iz * iz;
  }
  return A;
}

/// Minimum-norm least-squares solution of A x = b.
inline Vec3 perturbation_solve(const MatX& A, const VecX& b) {
  Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-12);
  return svd.solve(b);
}

/// Monte-Carlo statistics of ||x|| for Gaussian pixel errors. Each trial's
/// errors are drawn feature by feature from a trial-seeded stream, so cases
/// sharing a feature prefix see the same errors on that prefix.
inline PerturbationStats perturbation_analysis(const PerturbationCase& c, std::uint64_t seed) {
  if (c.features.empty()) throw DomainError("perturbation: need at least one feature");
  if (c.sigma < 0.0) throw DomainError("perturbation: sigma must be >= 0");
  if (c.trials < 1) throw DomainError("perturbation: trials must be >= 1");
  const MatX A = perturbation_matrix(c.features);
  Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-12);
  double s = 0.0, s2 = 0.0;
  VecX b(A.rows());
  for (int k = 0; k < c.trials; ++k) {
    Rng rng(derive_seed(seed, 0x9e7, static_cast<std::uint64_t>(k)));
    for (long r = 0; r < b.size(); ++r) b(r) = rng.normal(c.sigma);
    const double n = Vec3(svd.solve(b)).norm();
    s += n;
    s2 += n * n;
  }
  PerturbationStats st;
  st.mean = s / c.trials;
  st.stddev = std::sqrt(std::max(0.0, s2 / c.trials - st.mean * st.mean));
  return st;
}

/// Fixed normalized-coordinate layout of n features spread over the image,
/// scaled to depth Z (X = Z x_n, Y = Z y_n).
inline std::vector<Vec3> perturbation_features(int n, double depth, std::uint64_t seed) {
  std::vector<Vec3> out;
  Rng rng(seed);
  for (int k = 0; k < n; ++k) {
    const double x = -0.9 + 1.8 * rng.uniform();
    const double y = -0.7 + 1.4 * rng.uniform();
    out.emplace_back(depth * x, depth * y, depth);
  }
  return out;
}

// ----------------------------------------------------------------- writers

inline void write_steps_csv(const MetricsRecord& rec, std::ostream& os) {
  os << "stamp,est_tx,est_ty,est_tz,est_qw,est_qx,est_qy,est_qz,gt_tx,gt_ty,gt_tz,"
        "gt_qw,gt_qx,gt_qy,gt_qz,pos_err,ori_err_deg,sig3_tx,sig3_ty,sig3_tz,"
        "sig3_rx,sig3_ry,sig3_rz,n_tracks_used,n_gated_out,n_matches\n";
  os << std::setprecision(10);
  for (const auto& r : rec.rows) {
    os << r.stamp;
    auto pose = [&os](const Pose& p, bool valid) {
      const auto q = p.q.wxyz();
      for (int a = 0; a < 3; ++a) {
        os << ',';
        if (valid) os << p.t(a);
      }
      for (double v : q) {
        os << ',';
        if (valid) os << v;
      }
    };
    pose(r.est, r.initialized);
    pose(r.gt, true);
    os << ',';
    if (r.initialized) os << r.pos_err;
    os << ',';
    if (r.initialized) os << r.ori_err_deg;
    for (int a = 0; a < 6; ++a) {
      os << ',';
      if (r.initialized) os << r.three_sigma(a);
    }
    os << ',' << r.n_tracks_used << ',' << r.n_gated_out << ',' << r.n_matches << '\n';
  }
}

inline Json bandwidth_json(const BandwidthReport& b) {
  Json j;
  j["bytes_per_s"] = b.bytes_per_s;
  j["total_bytes_per_s"] = b.total;
  return j;
}

inline Json summary_json(const MetricsSummary& s) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  Json j;
  j["pos_rmse_m"] = num(s.pos_rmse);
  j["ori_rmse_deg"] = num(s.ori_rmse_deg);
  j["converged"] = s.converged;
  j["convergence_time_s"] = num(s.convergence_time);
  j["init_time_s"] = num(s.init_time);
  j["initial_error_m"] = num(s.initial_error);
  j["mean_matches_per_frame"] = s.mean_matches;
  j["association_rate_hz"] = s.association_rate_hz;
  j["steps"] = s.steps;
  j["health"] = {{"max_asymmetry", s.health.max_asymmetry},
                 {"min_eigenvalue", s.health.min_eigenvalue},
                 {"max_nullspace_residual", s.health.max_nullspace_residual},
                 {"checks", s.health.checks},
                 {"violations", s.health.violations}};
  return j;
}

/// Writes steps.csv, summary.json and bandwidth.json into `dir`.
inline void write_outputs(const MetricsRecord& rec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "steps.csv");
    write_steps_csv(rec, f);
  }
  {
    std::ofstream f(dir / "summary.json");
    f << summary_json(rec.summary).dump(2) << '\n';
  }
  {
    std::ofstream f(dir / "bandwidth.json");
    f << bandwidth_json(rec.summary.bandwidth).dump(2) << '\n';
  }
}

// ------------------------------------------------------------------ sweeps

/// Sets a dotted path ("trajectory.depth_d") inside a JSON document.
inline void set_dotted(Json& doc, const std::string& path, const Json& value) {
  Json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("grid: empty path segment in '" + path + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

/// Cartesian product of a grid {"a.b": [v1, v2], ...} applied to `base`.
inline std::vector<std::pair<Json, Json>> expand_grid(const Json& base, const Json& grid) {
  if (!grid.is_object()) throw ConfigError("grid: expected an object of value lists");
  std::vector<std::pair<Json, Json>> out{{base, Json::object()}};
  for (auto it = grid.begin(); it != grid.end(); ++it) {
    if (!it.value().is_array() || it.value().empty())
      throw ConfigError("grid: '" + it.key() + "' must be a non-empty list");
    std::vector<std::pair<Json, Json>> next;
    for (const auto& [doc, params] : out) {
      for (const auto& v : it.value()) {
        Json d = doc;
        Json p = params;
        set_dotted(d, it.key(), v);
        p[it.key()] = v;
        next.emplace_back(std::move(d), std::move(p));
      }
    }
    out = std::move(next);
  }
  return out;
}

}  // namespace costereo
