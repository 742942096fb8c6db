#pragma once

// Dual-channel cross-camera feature association.
//
// The guidance channel is a slow, high-quality matcher whose result arrives
// `guidance_latency_frames` frames after submission. The prediction channel
// keeps a club of live matches and moves it forward every frame with a flow
// tracker. When a guidance result lands it is first caught up to the previous
// frame through the image cache (fast-flow), grid-fused into the club,
// outlier-filtered, and then flowed to the current frame with the rest.
//
// Both channels are ground-truth-assisted noise models: guidance pairs
// co-visible landmark ids (a fraction of them deliberately wrong) and flow
// perturbs true projections with accumulating per-hop noise.

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "costereo/camera.hpp"
#include "costereo/errors.hpp"
#include "costereo/rng.hpp"
#include "costereo/world_sim.hpp"

namespace costereo {

struct FeatureMatch {
  int landmark_id = 0;   // match identity (landmark seen by UAV i)
  Vec2 px_i = Vec2::Zero();
  Vec2 px_j = Vec2::Zero();
  double origin_stamp = 0.0;  // stamp of the guidance source frames
  int hops = 0;               // flow predictions applied since guidance

  // Simulator bookkeeping: landmark whose projection px_j actually follows
  // (differs from landmark_id for a wrong association), and accumulated
  // tracker drift on each image.
  int partner_id = 0;
  Vec2 drift_i = Vec2::Zero();
  Vec2 drift_j = Vec2::Zero();

  bool correct() const { return partner_id == landmark_id; }
};

/// Matches sorted by landmark_id, ids unique.
struct MatchSet {
  double stamp = 0.0;
  std::vector<FeatureMatch> matches;

  std::size_t size() const { return matches.size(); }
  bool empty() const { return matches.empty(); }

  const FeatureMatch* find(int id) const {
    auto it = std::lower_bound(matches.begin(), matches.end(), id,
                               [](const FeatureMatch& m, int v) { return m.landmark_id < v; });
    if (it == matches.end() || it->landmark_id != id) return nullptr;
    return &*it;
  }

  double mean_hops() const {
    if (matches.empty()) return 0.0;
    double s = 0.0;
    for (const auto& m : matches) s += m.hops;
    return s / static_cast<double>(matches.size());
  }
};

/// Synchronized frames of both UAVs.
struct FrameSet {
  double stamp = 0.0;
  FrameObservation i;
  FrameObservation j;
};

/// Dual: guidance plus per-frame prediction. SingleBaseline: guidance only,
/// resubmitted on the frame its result lands on (one output every L frames).
/// SingleSlowMatcher: guidance only, the landing frame is spent on output and
/// the next job starts one frame later (one output every L+1 frames).
enum class ChannelMode { Dual, SingleBaseline, SingleSlowMatcher };

inline ChannelMode parse_channel_mode(const std::string& s) {
  if (s == "dual") return ChannelMode::Dual;
  if (s == "single") return ChannelMode::SingleBaseline;
  if (s == "single_slow") return ChannelMode::SingleSlowMatcher;
  throw ConfigError("unsupported channel mode '" + s + "'");
}

struct ChannelConfig {
  int guidance_latency_frames = 3;
  double flow_sigma = 0.3;        // px per hop
  double flow_drop_prob = 0.0;    // per hop
  double inlier_rate = 0.95;
  double grid_px = 40.0;
  double ransac_thresh = 3.0;     // px
  int ransac_iterations = 200;
  double angle_thresh = deg2rad(30.0);
  std::size_t imgdb_capacity = 30;
  ChannelMode mode = ChannelMode::Dual;
  double rate = 30.0;              // Hz

  void validate() const {
    if (guidance_latency_frames < 0) throw ConfigError("channel: latency must be >= 0");
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(flow_drop_prob) || !prob(inlier_rate))
      throw ConfigError("channel: probabilities must lie in [0, 1]");
    if (!(grid_px > 0.0)) throw ConfigError("channel: grid_px must be > 0");
    if (!(rate > 0.0)) throw ConfigError("channel: rate must be > 0");
    if (imgdb_capacity < 1) throw ConfigError("channel: imgdb_capacity must be >= 1");
    if (flow_sigma < 0.0 || ransac_thresh <= 0.0 || angle_thresh <= 0.0)
      throw ConfigError("channel: invalid thresholds");
  }

  double period() const { return 1.0 / rate; }
};

inline bool same_stamp(double a, double b) { return std::abs(a - b) < 1e-6; }

/// Bounded cache of recent frame pairs, stamps strictly increasing.
class ImgDB {
public:
  explicit ImgDB(std::size_t capacity = 30) : cap_(capacity) {}

  void push(FrameSet f) {
    if (!frames_.empty() && !(f.stamp > frames_.back().stamp + 1e-9))
      throw ContractError("ImgDB: stamps must be strictly increasing");
    frames_.push_back(std::move(f));
    while (frames_.size() > cap_) frames_.pop_front();
  }

  const FrameSet* find(double stamp) const {
    for (const auto& f : frames_)
      if (same_stamp(f.stamp, stamp)) return &f;
    return nullptr;
  }

  void clear() { frames_.clear(); }
  std::size_t size() const { return frames_.size(); }
  std::size_t capacity() const { return cap_; }
  const std::deque<FrameSet>& frames() const { return frames_; }

private:
  std::size_t cap_;
  std::deque<FrameSet> frames_;
};

struct GuidanceJob {
  double submitted_at = 0.0;
  double source_stamp = 0.0;
  int latency_frames = 0;
  double due_at = 0.0;
  MatchSet result;

  bool ready(double now) const { return due_at <= now + 1e-9; }
};

/// Runs the slow matcher on `frames`. The result completes inside
/// [t + (L-1)/rate, t + L/rate), i.e. it is consumed L frames later
/// (immediately available for L = 0).
inline GuidanceJob guidance_submit(double t, const FrameSet& frames, const ChannelConfig& cfg,
                                   std::uint64_t seed) {
  GuidanceJob job;
  job.submitted_at = t;
  job.source_stamp = frames.stamp;
  job.latency_frames = cfg.guidance_latency_frames;
  job.due_at = t + std::max(0.0, cfg.guidance_latency_frames - 0.5) * cfg.period();
  job.result.stamp = frames.stamp;

  Rng rng(seed);
  const auto& kj = frames.j.obs;
  for (const KeyPoint& a : frames.i.obs) {
    const KeyPoint* b = frames.j.keypoint(a.id);
    if (!b) continue;
    FeatureMatch m;
    m.landmark_id = a.id;
    m.partner_id = a.id;
    m.px_i = a.px;
    m.px_j = b->px;
    m.origin_stamp = frames.stamp;
    if (kj.size() > 1 && !rng.bernoulli(cfg.inlier_rate)) {
      // Wrong association: pair with another landmark visible to j.
      std::size_t k = rng.index(kj.size() - 1);
      const KeyPoint* other = &kj[k];
      if (other->id == a.id) other = &kj[kj.size() - 1];
      m.partner_id = other->id;
      m.px_j = other->px;
    }
    job.result.matches.push_back(m);
  }
  return job;
}

/// Moves every match to the next frame: pixels follow the landmark's new
/// projection plus accumulated Gaussian tracker drift. Matches whose landmark
/// left either image, or that the tracker loses, are removed.
inline MatchSet normal_flow(const MatchSet& ms, const FrameSet& next, const ChannelConfig& cfg,
                            const CameraIntrinsics& K, Rng& rng,
                            std::size_t* n_lost = nullptr) {
  MatchSet out;
  out.stamp = next.stamp;
  out.matches.reserve(ms.size());
  std::size_t lost = 0;
  for (const FeatureMatch& m : ms.matches) {
    const KeyPoint* a = next.i.tracked(m.landmark_id);
    const KeyPoint* b = next.j.tracked(m.partner_id);
    const Vec2 di = rng.normal2(cfg.flow_sigma);
    const Vec2 dj = rng.normal2(cfg.flow_sigma);
    const bool drop = rng.bernoulli(cfg.flow_drop_prob);
    if (!a || !b || drop) {
      ++lost;
      continue;
    }
    FeatureMatch n = m;
    n.drift_i += di;
    n.drift_j += dj;
    n.px_i = a->px + n.drift_i;
    n.px_j = b->px + n.drift_j;
    n.hops = m.hops + 1;
    if (!K.in_bounds(n.px_i) || !K.in_bounds(n.px_j)) {
      ++lost;
      continue;
    }
    out.matches.push_back(n);
  }
  if (n_lost) *n_lost += lost;
  return out;
}

/// Catches an outdated match set up to `to_stamp` by flowing it through every
/// cached frame in (ms.stamp, to_stamp].
inline MatchSet fast_flow(const MatchSet& ms, const ImgDB& db, double to_stamp,
                          const ChannelConfig& cfg, const CameraIntrinsics& K, Rng& rng,
                          std::size_t* n_lost = nullptr) {
  if (same_stamp(ms.stamp, to_stamp)) return ms;
  if (to_stamp < ms.stamp) throw ContractError("fast_flow: target precedes match stamp");
  const auto& frames = db.frames();
  if (frames.empty() || frames.front().stamp > ms.stamp + 1e-6)
    throw SyncError("fast_flow: source frames evicted from ImgDB");
  const double max_gap = 1.5 * cfg.period();
  MatchSet cur = ms;
  bool reached = false;
  for (const auto& f : frames) {
    if (f.stamp <= ms.stamp + 1e-6) continue;
    if (f.stamp > to_stamp + 1e-6) break;
    if (f.stamp - cur.stamp > max_gap) throw SyncError("fast_flow: missing cached frame");
    cur = normal_flow(cur, f, cfg, K, rng, n_lost);
    reached = same_stamp(f.stamp, to_stamp);
  }
  if (!reached) throw SyncError("fast_flow: target frame not cached");
  return cur;
}

struct FusionStats {
  std::size_t added = 0;
  std::size_t rejected = 0;
};

/// Grid-based fusion of new guided matches into the existing club. Cells
/// holding existing points are crowded on each image independently; a
/// guided match survives only if both its points landed in free cells
/// (cross-check). Existing matches are never removed.
inline MatchSet match_fusion(const MatchSet& guided, const MatchSet& existing, double grid_px,
                             FusionStats* stats = nullptr) {
  if (!same_stamp(guided.stamp, existing.stamp))
    throw ContractError("match_fusion: guided and existing stamps differ");
  auto cell = [grid_px](const Vec2& p) {
    return std::make_pair(static_cast<long>(std::floor(p.x() / grid_px)),
                          static_cast<long>(std::floor(p.y() / grid_px)));
  };
  struct PairHash {
    std::size_t operator()(const std::pair<long, long>& c) const {
      return std::hash<long>()(c.first * 100003L + c.second);
    }
  };
  using CellSet = std::unordered_set<std::pair<long, long>, PairHash>;
  CellSet crowded_i, crowded_j;
  for (const auto& m : existing.matches) {
    crowded_i.insert(cell(m.px_i));
    crowded_j.insert(cell(m.px_j));
  }
  const std::size_t n = guided.size();
  std::vector<char> ok_i(n, 0), ok_j(n, 0), dup(n, 0);
  for (std::size_t k = 0; k < n; ++k) {
    dup[k] = existing.find(guided.matches[k].landmark_id) != nullptr;
    if (dup[k]) continue;
    ok_i[k] = crowded_i.insert(cell(guided.matches[k].px_i)).second;
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (dup[k]) continue;
    ok_j[k] = crowded_j.insert(cell(guided.matches[k].px_j)).second;
  }
  MatchSet out = existing;
  FusionStats st;
  for (std::size_t k = 0; k < n; ++k) {
    if (ok_i[k] && ok_j[k]) {
      out.matches.push_back(guided.matches[k]);
      ++st.added;
    } else {
      ++st.rejected;
    }
  }
  std::sort(out.matches.begin(), out.matches.end(),
            [](const FeatureMatch& a, const FeatureMatch& b) { return a.landmark_id < b.landmark_id; });
  if (stats) *stats = st;
  return out;
}

namespace detail {

using Mat3x3 = Eigen::Matrix3d;

inline Mat3x3 hartley_normalizer(const std::vector<Vec2>& pts) {
  Vec2 c = Vec2::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double d = 0.0;
  for (const auto& p : pts) d += (p - c).norm();
  d /= static_cast<double>(pts.size());
  const double s = d > 1e-12 ? std::sqrt(2.0) / d : 1.0;
  Mat3x3 T;
  T << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return T;
}

/// Normalized eight-point fundamental matrix with x_jᵀ F x_i = 0.
inline std::optional<Mat3x3> eight_point(const std::vector<Vec2>& xi, const std::vector<Vec2>& xj) {
  const Mat3x3 Ti = hartley_normalizer(xi);
  const Mat3x3 Tj = hartley_normalizer(xj);
  Eigen::MatrixXd A(static_cast<long>(xi.size()), 9);
  for (std::size_t k = 0; k < xi.size(); ++k) {
    const Eigen::Vector3d a = Ti * xi[k].homogeneous();
    const Eigen::Vector3d b = Tj * xj[k].homogeneous();
    A.row(static_cast<long>(k)) << b.x() * a.x(), b.x() * a.y(), b.x(), b.y() * a.x(),
        b.y() * a.y(), b.y(), a.x(), a.y(), 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd f = svd.matrixV().col(8);
  Mat3x3 F;
  F << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);
  Eigen::JacobiSVD<Mat3x3> svdf(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = svdf.singularValues();
  s(2) = 0.0;
  F = svdf.matrixU() * s.asDiagonal() * svdf.matrixV().transpose();
  F = Tj.transpose() * F * Ti;
  const double n = F.norm();
  if (!(n > 0.0) || !F.allFinite()) return std::nullopt;
  return F / n;
}

/// First-order geometric (Sampson) distance in pixels.
inline double sampson_distance(const Mat3x3& F, const Vec2& xi, const Vec2& xj) {
  const Eigen::Vector3d a = xi.homogeneous();
  const Eigen::Vector3d b = xj.homogeneous();
  const Eigen::Vector3d Fa = F * a;
  const Eigen::Vector3d Ftb = F.transpose() * b;
  const double num = b.dot(Fa);
  const double den = Fa.x() * Fa.x() + Fa.y() * Fa.y() + Ftb.x() * Ftb.x() + Ftb.y() * Ftb.y();
  if (!(den > 0.0)) return std::numeric_limits<double>::infinity();
  return std::abs(num) / std::sqrt(den);
}

}  // namespace detail

/// Fundamental-matrix RANSAC (when at least 8 matches) followed by a
/// directional check of the i -> j displacement against its circular mean.
/// The output is a subset of the input.
inline MatchSet outlier_reject(const MatchSet& ms, const ChannelConfig& cfg, Rng& rng) {
  constexpr std::size_t kMinModel = 8;
  const std::size_t n = ms.size();
  std::vector<char> keep(n, 1);

  if (n >= kMinModel) {
    std::vector<Vec2> xi(n), xj(n);
    for (std::size_t k = 0; k < n; ++k) {
      xi[k] = ms.matches[k].px_i;
      xj[k] = ms.matches[k].px_j;
    }
    std::vector<std::size_t> idx(n);
    std::vector<char> best;
    std::size_t best_count = 0;
    std::vector<Vec2> si(kMinModel), sj(kMinModel);
    for (int it = 0; it < cfg.ransac_iterations; ++it) {
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      for (std::size_t k = 0; k < kMinModel; ++k) {
        const std::size_t r = k + rng.index(n - k);
        std::swap(idx[k], idx[r]);
        si[k] = xi[idx[k]];
        sj[k] = xj[idx[k]];
      }
      const auto F = detail::eight_point(si, sj);
      if (!F) continue;
      std::vector<char> inl(n, 0);
      std::size_t count = 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (detail::sampson_distance(*F, xi[k], xj[k]) <= cfg.ransac_thresh) {
          inl[k] = 1;
          ++count;
        }
      }
      if (count > best_count) {
        best_count = count;
        best = std::move(inl);
        if (best_count == n) break;
      }
    }
    if (best_count >= kMinModel) keep = best;
  }

  // Direction check; displacements shorter than the RANSAC threshold carry
  // no usable direction and are left alone.
  double sx = 0.0, sy = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!keep[k]) continue;
    const Vec2 d = ms.matches[k].px_j - ms.matches[k].px_i;
    if (d.norm() < cfg.ransac_thresh) continue;
    const double a = std::atan2(d.y(), d.x());
    sx += std::cos(a);
    sy += std::sin(a);
  }
  if (sx != 0.0 || sy != 0.0) {
    const double mean = std::atan2(sy, sx);
    for (std::size_t k = 0; k < n; ++k) {
      if (!keep[k]) continue;
      const Vec2 d = ms.matches[k].px_j - ms.matches[k].px_i;
      if (d.norm() < cfg.ransac_thresh) continue;
      const double dev = std::abs(std::remainder(std::atan2(d.y(), d.x()) - mean, 2.0 * kPi));
      if (dev > cfg.angle_thresh) keep[k] = 0;
    }
  }

  MatchSet out;
  out.stamp = ms.stamp;
  for (std::size_t k = 0; k < n; ++k)
    if (keep[k]) out.matches.push_back(ms.matches[k]);
  return out;
}

/// Per-tick counters for the match log.
struct TickStats {
  double stamp = 0.0;
  bool emitted = false;
  std::size_t n_matches = 0;
  std::size_t n_guided_new = 0;
  std::size_t n_dropped = 0;
  double mean_hops = 0.0;
  bool guidance_consumed = false;
  bool guidance_dropped = false;
  std::vector<int> rejected_ids;  // removed by outlier rejection this tick
};

/// Event-driven state machine over the synchronized frame stream.
class DualChannel {
public:
  DualChannel(ChannelConfig cfg, CameraIntrinsics K, std::uint64_t seed)
      : cfg_(std::move(cfg)), K_(std::move(K)), seed_(seed), db_(cfg_.imgdb_capacity),
        rng_(derive_seed(seed, 0xf10f)) {
    cfg_.validate();
  }

  /// Advances one frame. Returns the current fused match set when the
  /// channel has output for this frame. In single-channel mode the output is
  /// the finished guidance batch, stamped with its source frame.
  std::optional<MatchSet> tick(const FrameSet& frames) {
    const double t = frames.stamp;
    stats_ = TickStats{};
    stats_.stamp = t;
    if (last_stamp_ && t - *last_stamp_ > 1.5 * cfg_.period()) reset();
    if (last_stamp_ && t <= *last_stamp_ + 1e-9)
      throw ContractError("dual_channel_tick: frames out of order");
    db_.push(frames);

    std::optional<MatchSet> out;
    bool hold_submit = false;
    if (job_ && job_->ready(t)) {
      GuidanceJob done = std::move(*job_);
      job_.reset();
      stats_.guidance_consumed = true;
      out = cfg_.mode == ChannelMode::Dual ? absorb_guidance(done.result, frames)
                                           : single_channel_output(done.result);
      if (cfg_.mode == ChannelMode::SingleSlowMatcher) hold_submit = true;
    } else if (club_) {
      std::size_t lost = 0;
      club_ = normal_flow(*club_, frames, cfg_, K_, rng_, &lost);
      stats_.n_dropped += lost;
      out = club_;
    }
    if (!job_ && !hold_submit) {
      job_ = guidance_submit(t, frames, cfg_, derive_seed(seed_, 0x6d1d, submissions_++));
    }
    last_stamp_ = t;
    if (out) {
      stats_.emitted = true;
      stats_.n_matches = out->size();
      stats_.mean_hops = out->mean_hops();
      ++emitted_;
    }
    return out;
  }

  void reset() {
    db_.clear();
    club_.reset();
    job_.reset();
    last_stamp_.reset();
  }

  const TickStats& last_stats() const { return stats_; }
  std::size_t emitted_count() const { return emitted_; }
  const ChannelConfig& config() const { return cfg_; }
  const ImgDB& imgdb() const { return db_; }
  bool job_in_flight() const { return job_.has_value(); }

private:
  std::optional<MatchSet> absorb_guidance(const MatchSet& guided, const FrameSet& frames) {
    const double prev = last_stamp_.value_or(guided.stamp);
    MatchSet synced;
    try {
      synced = fast_flow(guided, db_, prev, cfg_, K_, rng_);
    } catch (const SyncError&) {
      stats_.guidance_dropped = true;
      if (!club_) return std::nullopt;
      std::size_t lost = 0;
      club_ = normal_flow(*club_, frames, cfg_, K_, rng_, &lost);
      stats_.n_dropped += lost;
      return club_;
    }
    MatchSet existing = club_ ? *club_ : MatchSet{prev, {}};
    existing.stamp = synced.stamp;
    FusionStats fs;
    MatchSet fused = match_fusion(synced, existing, cfg_.grid_px, &fs);
    MatchSet clean = outlier_reject(fused, cfg_, rng_);
    stats_.n_guided_new = fs.added;
    stats_.n_dropped += fused.size() - clean.size();
    for (const auto& m : fused.matches)
      if (!clean.find(m.landmark_id)) stats_.rejected_ids.push_back(m.landmark_id);
    if (same_stamp(clean.stamp, frames.stamp)) {
      club_ = clean;
    } else {
      std::size_t lost = 0;
      club_ = normal_flow(clean, frames, cfg_, K_, rng_, &lost);
      stats_.n_dropped += lost;
    }
    return club_;
  }

  MatchSet single_channel_output(const MatchSet& guided) {
    MatchSet clean = outlier_reject(guided, cfg_, rng_);
    stats_.n_guided_new = clean.size();
    stats_.n_dropped = guided.size() - clean.size();
    return clean;
  }

  ChannelConfig cfg_;
  CameraIntrinsics K_;
  std::uint64_t seed_;
  ImgDB db_;
  Rng rng_;
  std::optional<MatchSet> club_;
  std::optional<GuidanceJob> job_;
  std::optional<double> last_stamp_;
  std::uint64_t submissions_ = 0;
  std::size_t emitted_ = 0;
  TickStats stats_;
};

/// Free-function form of DualChannel::tick.
inline std::optional<MatchSet> dual_channel_tick(DualChannel& state, const FrameSet& frames) {
  return state.tick(frames);
}

}  // namespace costereo
