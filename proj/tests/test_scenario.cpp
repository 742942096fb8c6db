#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <set>
#include <tuple>

#include "costereo/scenario.hpp"

using namespace costereo;

namespace {

std::filesystem::path scenario_dir() {
  const char* env = std::getenv("COSTEREO_SCENARIOS");
  return env ? std::filesystem::path(env) : std::filesystem::path("scenarios");
}

Json load_scenario(const std::string& name) {
  return load_json_file((scenario_dir() / (name + ".json")).string());
}

MetricsRecord run(const Json& doc) { return run_scenario(parse_scenario(doc)); }

std::string steps_csv(const MetricsRecord& rec) {
  std::ostringstream os;
  write_steps_csv(rec, os);
  return os.str();
}

TimedPoseSample sample(double t, const Pose& p) { return {t, p}; }

// Independent geodesic angle between two rotations, in degrees.
double geodesic_deg(const UnitQuaternion& a, const UnitQuaternion& b) {
  const Eigen::Quaterniond qa(a.w(), a.x(), a.y(), a.z());
  const Eigen::Quaterniond qb(b.w(), b.x(), b.y(), b.z());
  return qa.angularDistance(qb) * 180.0 / kPi;
}

}  // namespace

// ------------------------------------------------------------------- rmse

TEST(ComputeRmse, IdenticalTrajectoriesGiveZero) {
  std::vector<TimedPoseSample> est, gt;
  for (int k = 0; k < 50; ++k) {
    const Pose p{Vec3(0.1 * k, 1.0, -2.0), rot_y(0.01 * k)};
    est.push_back(sample(k / 30.0, p));
    gt.push_back(sample(k / 30.0, p));
  }
  const auto r = compute_rmse(est, gt, 0.0);
  EXPECT_EQ(r.pos, 0.0);
  EXPECT_NEAR(r.ori_deg, 0.0, 1e-6);
  EXPECT_EQ(r.n, 50u);
}

TEST(ComputeRmse, ConstantTranslationOffset) {
  std::vector<TimedPoseSample> est, gt;
  for (int k = 0; k < 40; ++k) {
    const Pose g{Vec3(0.2 * k, -0.5, 3.0), UnitQuaternion::identity()};
    Pose e = g;
    e.t.x() += 0.1;
    est.push_back(sample(k / 30.0, e));
    gt.push_back(sample(k / 30.0, g));
  }
  const auto r = compute_rmse(est, gt, 0.0);
  EXPECT_NEAR(r.pos, 0.1, 1e-12);
  EXPECT_NEAR(r.ori_deg, 0.0, 1e-6);
}

TEST(ComputeRmse, ConstantYawOffsetMatchesGeodesicOracle) {
  std::vector<TimedPoseSample> est, gt;
  const auto off = rot_y(2.0 * kPi / 180.0);
  double oracle = 0.0;
  for (int k = 0; k < 40; ++k) {
    const Pose g{Vec3::Zero(), so3_exp(0.05 * k * Vec3(0.3, 1.0, -0.2).normalized())};
    const Pose e{g.t, g.q * off};
    oracle += std::pow(geodesic_deg(e.q, g.q), 2);
    est.push_back(sample(k / 30.0, e));
    gt.push_back(sample(k / 30.0, g));
  }
  const auto r = compute_rmse(est, gt, 0.0);
  EXPECT_NEAR(r.ori_deg, 2.0, 1e-9);
  EXPECT_NEAR(r.ori_deg, std::sqrt(oracle / 40.0), 1e-9);
  EXPECT_NEAR(r.pos, 0.0, 1e-15);
}

TEST(ComputeRmse, SkipDiscardsTransientAndMatchesByStamp) {
  std::vector<TimedPoseSample> est, gt;
  for (int k = 0; k < 60; ++k) {
    const double t = 1.0 + k / 30.0;
    const Pose g{Vec3::Zero(), UnitQuaternion::identity()};
    Pose e = g;
    e.t.z() = t < 1.5 ? 5.0 : 0.3;  // large error during the first half second
    est.push_back(sample(t, e));
    if (k % 2 == 0) gt.push_back(sample(t, g));  // only every other stamp has truth
  }
  const auto r = compute_rmse(est, gt, 0.5);
  EXPECT_NEAR(r.pos, 0.3, 1e-12);
  EXPECT_EQ(r.n, 22u);
}

TEST(ComputeRmse, EmptyOverlapIsAnError) {
  EXPECT_THROW(compute_rmse({}, {}, 0.0), DomainError);
  const Pose p{Vec3::Zero(), UnitQuaternion::identity()};
  EXPECT_THROW(compute_rmse({sample(0.0, p)}, {sample(1.0, p)}, 0.0), DomainError);
  EXPECT_THROW(compute_rmse({sample(0.0, p), sample(0.1, p)}, {sample(0.0, p)}, 1.0), DomainError);
}

TEST(ConvergenceTime, RequiresSustainedErrorBelowThreshold) {
  std::vector<StepRow> rows;
  const double errs[] = {1.0, 0.5, 0.1, 0.1, 0.3, 0.1, 0.15, 0.19, 0.05, 0.1};
  for (int k = 0; k < 10; ++k) {
    StepRow r;
    r.stamp = 0.1 * k;
    r.initialized = true;
    r.pos_err = errs[k];
    rows.push_back(r);
  }
  const auto tc = convergence_time(rows, 0.2, 0.3);
  ASSERT_TRUE(tc.has_value());
  EXPECT_NEAR(*tc, 0.5, 1e-12);
  EXPECT_FALSE(convergence_time(rows, 0.2, 0.5).has_value());
  rows[6].initialized = false;
  EXPECT_NEAR(*convergence_time(rows, 0.2, 0.2), 0.7, 1e-12);
}

// ----------------------------------------------------------------- runner

TEST(RunScenario, NoiselessConfigIsExact) {
  const auto rec = run(load_scenario("noiseless"));
  ASSERT_TRUE(rec.summary.converged);
  EXPECT_LT(rec.summary.pos_rmse, 1e-6);
  EXPECT_LT(rec.summary.ori_rmse_deg, 1e-6);
  EXPECT_EQ(rec.summary.health.violations, 0u);
}

TEST(RunScenario, RectangleWithLargeInitialErrorConvergesWithinBudget) {
  for (int seed = 1; seed <= 3; ++seed) {
    Json doc = load_scenario("rectangle");
    doc["init_error"] = {2.0, 2.0, 2.0};
    doc["seed"] = seed;
    const auto rec = run(doc);
    EXPECT_TRUE(rec.summary.converged) << "seed " << seed;
    EXPECT_LE(rec.summary.convergence_time, 1.5) << "seed " << seed;
    EXPECT_GT(rec.summary.initial_error, 3.0) << "seed " << seed;
  }
}

TEST(RunScenario, SameSeedGivesByteIdenticalOutputs) {
  Json doc = load_scenario("smoke");
  const auto a = run(doc);
  const auto b = run(doc);
  EXPECT_EQ(steps_csv(a), steps_csv(b));
  EXPECT_EQ(summary_json(a.summary).dump(), summary_json(b.summary).dump());
  doc["seed"] = 4;
  EXPECT_NE(steps_csv(a), steps_csv(run(doc)));
}

TEST(RunScenario, OutputsAndSummaryShape) {
  const auto rec = run(load_scenario("smoke"));
  ASSERT_FALSE(rec.rows.empty());
  EXPECT_EQ(rec.summary.steps, static_cast<long>(rec.rows.size()));
  EXPECT_GE(rec.summary.pos_rmse, 0.0);
  EXPECT_GE(rec.summary.ori_rmse_deg, 0.0);
  EXPECT_LE(rec.summary.convergence_time, 2.0);
  const auto dir = std::filesystem::temp_directory_path() / "costereo_outputs_test";
  std::filesystem::remove_all(dir);
  write_outputs(rec, dir);
  for (const char* f : {"steps.csv", "summary.json", "bandwidth.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::ifstream csv(dir / "steps.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header.rfind("stamp,est_tx", 0), 0u);
  std::size_t lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  EXPECT_EQ(lines, rec.rows.size());
  const Json s = load_json_file((dir / "summary.json").string());
  EXPECT_TRUE(s.contains("pos_rmse_m"));
  EXPECT_TRUE(s.contains("association_rate_hz"));
  std::filesystem::remove_all(dir);

  MetricsSummary empty;
  EXPECT_TRUE(summary_json(empty)["pos_rmse_m"].is_null());
}

TEST(RunScenario, AssociationRatePerMode) {
  EXPECT_DOUBLE_EQ(run(load_scenario("dual")).summary.association_rate_hz, 30.0);
  EXPECT_DOUBLE_EQ(run(load_scenario("single_latency3")).summary.association_rate_hz, 10.0);
  EXPECT_DOUBLE_EQ(run(load_scenario("single_latency5")).summary.association_rate_hz, 5.0);
}

TEST(RunScenario, SingleChannelModesInitializeFromDelayedMatches) {
  for (const char* name : {"single_latency3", "single_latency5"}) {
    const auto rec = run(load_scenario(name));
    EXPECT_TRUE(rec.summary.converged) << name;
    EXPECT_LT(rec.summary.pos_rmse, 0.2) << name;
  }
}

TEST(RunScenario, ScaleDriftIsCorrected) {
  double nominal = 0.0, drifted = 0.0;
  for (int seed = 0; seed < 3; ++seed) {
    Json doc = load_scenario("drift");
    doc["seed"] = seed;
    const auto d = run(doc);
    doc["vio"]["scale_drift"] = 1.0;
    const auto n = run(doc);
    ASSERT_TRUE(d.summary.converged && n.summary.converged) << "seed " << seed;
    drifted += d.summary.pos_rmse / 3.0;
    nominal += n.summary.pos_rmse / 3.0;
  }
  EXPECT_LT(drifted, 3.0 * nominal);
}

// The partial mask keeps only the bottom strip of both images.
TEST(RunScenario, OcclusionConvergenceOrdering) {
  constexpr int kSeeds = 10;
  std::map<std::string, double> mean_tc;
  for (const char* name : {"occlusion_none", "occlusion_partial", "occlusion_full"}) {
    double sum = 0.0;
    for (int s = 0; s < kSeeds; ++s) {
      Json doc = load_scenario(name);
      doc["seed"] = 300 + s;
      const auto rec = run(doc);
      ASSERT_TRUE(rec.summary.converged) << name << " seed " << s;
      sum += rec.summary.convergence_time;
      if (std::string(name) == "occlusion_full") {
        double min_err = 1e9;
        for (const auto& r : rec.rows)
          if (r.initialized && r.stamp < 10.0) min_err = std::min(min_err, r.pos_err);
        EXPECT_GE(min_err, 0.9 * rec.summary.initial_error) << "seed " << s;
        EXPECT_GE(rec.summary.convergence_time, 10.0) << "seed " << s;
      }
    }
    mean_tc[name] = sum / kSeeds;
  }
  EXPECT_LT(mean_tc["occlusion_none"], mean_tc["occlusion_partial"]);
  EXPECT_LT(mean_tc["occlusion_partial"], mean_tc["occlusion_full"]);
}

// --------------------------------------------------- lateral-flight grid

namespace {

struct CellResult {
  int converged = 0;
  double mean_rmse = 0.0;
};

// Mean RMSE over 10 seeds for one (baseline, depth, yaw) cell.
CellResult lateral_cell(double b, double d, double theta_deg) {
  static std::map<std::tuple<double, double, double>, CellResult> cache;
  const auto key = std::make_tuple(b, d, theta_deg);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  CellResult c;
  for (int s = 0; s < 10; ++s) {
    Json doc = load_scenario("lateral");
    doc["seed"] = 500 + s;
    doc["trajectory"]["baseline"] = {b, 0.0, 0.0};
    doc["trajectory"]["depth_d"] = d;
    doc["trajectory"]["yaw_theta"] = theta_deg * kPi / 180.0;
    const auto rec = run(doc);
    if (rec.summary.converged) {
      ++c.converged;
      c.mean_rmse += rec.summary.pos_rmse;
    }
  }
  if (c.converged) c.mean_rmse /= c.converged;
  cache[key] = c;
  return c;
}

}  // namespace

TEST(LateralGrid, SmallerDepthIsMoreAccurate) {
  for (double theta : {0.0, 20.0}) {
    const auto near = lateral_cell(2.0, 2.0, theta);
    const auto far = lateral_cell(2.0, 8.0, theta);
    ASSERT_EQ(near.converged, 10) << "theta " << theta;
    ASSERT_EQ(far.converged, 10) << "theta " << theta;
    EXPECT_LT(near.mean_rmse, far.mean_rmse) << "theta " << theta;
  }
}

// At +20 deg the 2 m formation over-converges (j's view crosses past i's) and
// loses overlap, so the baseline ordering is checked at forward and diverging yaw.
TEST(LateralGrid, ShorterBaselineIsAtLeastAsAccurate) {
  for (double theta : {0.0, -20.0}) {
    for (double d : {4.0, 6.0, 8.0}) {
      const auto b2 = lateral_cell(2.0, d, theta);
      const auto b4 = lateral_cell(4.0, d, theta);
      ASSERT_EQ(b2.converged, 10) << "theta " << theta << " d " << d;
      ASSERT_EQ(b4.converged, 10) << "theta " << theta << " d " << d;
      EXPECT_LE(b2.mean_rmse, b4.mean_rmse) << "theta " << theta << " d " << d;
    }
  }
}

TEST(LateralGrid, ZeroOverlapCellsDoNotConverge) {
  for (double theta : {-20.0, 0.0}) {
    const auto m = overlap_metrics(deg2rad(90.0), 2.0, 4.0, 0.0, deg2rad(theta));
    EXPECT_EQ(m.vp_i, 0.0);
    EXPECT_EQ(lateral_cell(4.0, 2.0, theta).converged, 0) << "theta " << theta;
  }
}

// ----------------------------------------------------------- perturbation

TEST(Perturbation, ZeroPixelErrorGivesZero) {
  PerturbationCase c{perturbation_features(30, 4.0, 1), 0.0, 50};
  const auto st = perturbation_analysis(c, 9);
  EXPECT_EQ(st.mean, 0.0);
  EXPECT_EQ(st.stddev, 0.0);
}

TEST(Perturbation, SingleFeatureScalesWithDepth) {
  // A feature on the optical axis: du = dX / Z, dv = dY / Z, dZ unobservable,
  // so the minimum-norm solution is (Z du, Z dv, 0).
  const Vec2 err(0.004, -0.0025);
  for (double z : {1.0, 2.0, 4.0, 8.0}) {
    const MatX A = perturbation_matrix({Vec3(0, 0, z)});
    VecX b(2);
    b << err.x(), err.y();
    const Vec3 x = perturbation_solve(A, b);
    EXPECT_NEAR(x.x(), z * err.x(), 1e-9);
    EXPECT_NEAR(x.y(), z * err.y(), 1e-9);
    EXPECT_NEAR(x.z(), 0.0, 1e-9);
    EXPECT_NEAR(x.norm(), z * err.norm(), 1e-9);
  }
  const double sigma = 5.0 / 320.0;
  const auto m2 = perturbation_analysis({{Vec3(0, 0, 2.0)}, sigma, 1000}, 3);
  const auto m4 = perturbation_analysis({{Vec3(0, 0, 4.0)}, sigma, 1000}, 3);
  EXPECT_NEAR(m4.mean, 2.0 * m2.mean, 1e-9);
}

TEST(Perturbation, MonotoneInFeatureCountAndDepth) {
  const double sigma = 5.0 / 320.0;
  const std::vector<int> counts{10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  const std::vector<double> depths{2.0, 4.0, 6.0, 8.0};
  std::map<std::pair<int, double>, double> mean;
  for (double z : depths) {
    const auto all = perturbation_features(100, z, 7);
    for (int n : counts) {
      PerturbationCase c{{all.begin(), all.begin() + n}, sigma, 1000};
      mean[{n, z}] = perturbation_analysis(c, 7).mean;
    }
  }
  for (double z : depths)
    for (std::size_t k = 1; k < counts.size(); ++k)
      EXPECT_LE((mean[{counts[k], z}]), (mean[{counts[k - 1], z}])) << "n " << counts[k] << " z " << z;
  for (int n : counts)
    for (std::size_t k = 1; k < depths.size(); ++k)
      EXPECT_GE((mean[{n, depths[k]}]), (mean[{n, depths[k - 1]}])) << "n " << n << " z " << depths[k];
}

TEST(Perturbation, Preconditions) {
  EXPECT_THROW(perturbation_analysis({{}, 0.01, 10}, 1), DomainError);
  EXPECT_THROW(perturbation_analysis({{Vec3(0, 0, -1)}, 0.01, 10}, 1), DomainError);
  EXPECT_THROW(perturbation_analysis({{Vec3(0, 0, 1)}, -0.01, 10}, 1), DomainError);
}

// ----------------------------------------------------------------- config

TEST(ParseScenario, EmptyDocumentRunsTheRectangle) {
  const auto c = parse_scenario(Json::object());
  EXPECT_EQ(c.trajectory.kind, TrajectoryKind::Rectangle);
  EXPECT_DOUBLE_EQ(c.wall.depth, c.trajectory.depth_d);
  EXPECT_DOUBLE_EQ(c.wall.spacing, 0.1 * c.wall.depth);
  EXPECT_EQ(c.init_mode, InitMode::Pnp);
}

TEST(ParseScenario, WallSpacingFollowsDepthUnlessGiven) {
  auto c = parse_scenario(Json{{"trajectory", {{"depth_d", 8.0}}}});
  EXPECT_DOUBLE_EQ(c.wall.spacing, 0.8);
  c = parse_scenario(Json{{"trajectory", {{"depth_d", 8.0}}}, {"wall", {{"spacing", 0.3}}}});
  EXPECT_DOUBLE_EQ(c.wall.spacing, 0.3);
}

TEST(ParseScenario, ReadsNestedFields) {
  const auto c = parse_scenario(Json::parse(R"({
    "seed": 42, "duration": 3.5,
    "trajectory": {"kind": "arc", "speed": 0.8, "baseline": [2, 0, 0], "yaw_theta": 0.1},
    "channel": {"mode": "single_slow", "latency_frames": 5},
    "link": {"dropout_windows": [[1.0, 2.0]]},
    "filter": {"flow_sigma": 0.5, "max_iterations": 3},
    "init_error": [0.1, 0.2, 0.3], "init_rot_error_deg": [0, 90, 0],
    "occlusions": [{"start": 0, "end": 1, "uav": "j", "rects": [[0, 0, 10, 10]]}],
    "async_offset": 0.06, "convergence": {"threshold": 0.3, "sustain": 0.2}
  })"));
  EXPECT_EQ(c.seed, 42u);
  EXPECT_DOUBLE_EQ(c.duration, 3.5);
  EXPECT_EQ(c.trajectory.kind, TrajectoryKind::Arc);
  EXPECT_DOUBLE_EQ(c.trajectory.baseline.x(), 2.0);
  EXPECT_EQ(c.channel.mode, ChannelMode::SingleSlowMatcher);
  EXPECT_EQ(c.channel.guidance_latency_frames, 5);
  ASSERT_EQ(c.link.dropout_windows.size(), 1u);
  EXPECT_DOUBLE_EQ(c.filter.noise.flow_sigma, 0.5);
  EXPECT_EQ(c.filter.max_iterations, 3);
  EXPECT_NEAR(c.init_rot_error.y(), kPi / 2, 1e-15);
  ASSERT_EQ(c.occlusions.size(), 1u);
  EXPECT_TRUE(c.occlusions[0].uav_j);
  EXPECT_FALSE(c.occlusions[0].uav_i);
  EXPECT_DOUBLE_EQ(c.async_offset, 0.06);
  EXPECT_DOUBLE_EQ(c.converge_threshold, 0.3);
}

TEST(ParseScenario, RejectsBadDocuments) {
  EXPECT_THROW(parse_scenario(Json{{"durration", 1.0}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"duration", -1.0}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"duration", "long"}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"init_mode", "magic"}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"init_error", {1.0, 2.0}}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"trajectory", {{"kind", "spiral"}}}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"channel", {{"mode", "triple"}}}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"filter", {{"flow_sigma", -1.0}}}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"occlusions", {{{"start", 2.0}, {"end", 1.0}}}}}), ConfigError);
  EXPECT_THROW(parse_scenario(Json{{"async_offset", -0.1}}), ConfigError);
  EXPECT_THROW(load_json_file("/nonexistent/scenario.json"), ConfigError);
  const auto bad = std::filesystem::temp_directory_path() / "costereo_bad.json";
  std::ofstream(bad) << "{ \"seed\": ";
  EXPECT_THROW(load_json_file(bad.string()), ConfigError);
  std::filesystem::remove(bad);
}

TEST(Sweep, SetDottedCreatesNestedKeys) {
  Json doc = {{"trajectory", {{"kind", "lateral"}}}};
  set_dotted(doc, "trajectory.depth_d", 6.0);
  set_dotted(doc, "filter.noise.x", 1);
  set_dotted(doc, "seed", 9);
  EXPECT_EQ(doc["trajectory"]["kind"], "lateral");
  EXPECT_EQ(doc["trajectory"]["depth_d"], 6.0);
  EXPECT_EQ(doc["filter"]["noise"]["x"], 1);
  EXPECT_EQ(doc["seed"], 9);
  EXPECT_THROW(set_dotted(doc, "a..b", 1), ConfigError);
}

TEST(Sweep, ExpandGridIsTheCartesianProduct) {
  const Json base = load_scenario("lateral");
  const Json grid = load_scenario("lateral_grid");
  const auto jobs = expand_grid(base, grid);
  ASSERT_EQ(jobs.size(), 24u);
  std::set<std::string> seen;
  for (const auto& [doc, params] : jobs) {
    EXPECT_EQ(params.size(), 3u);
    EXPECT_EQ(doc["trajectory"]["depth_d"], params["trajectory.depth_d"]);
    EXPECT_EQ(doc["trajectory"]["kind"], "lateral");
    EXPECT_NO_THROW(parse_scenario(doc));
    seen.insert(params.dump());
  }
  EXPECT_EQ(seen.size(), 24u);
  EXPECT_EQ(expand_grid(base, Json::object()).size(), 1u);
  EXPECT_THROW(expand_grid(base, Json{{"seed", Json::array()}}), ConfigError);
  EXPECT_THROW(expand_grid(base, Json{{"seed", 3}}), ConfigError);
  EXPECT_THROW(expand_grid(base, Json::array()), ConfigError);
}

TEST(Scenarios, EverySuiteFileParses) {
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(scenario_dir())) {
    const auto name = e.path().stem().string();
    if (e.path().extension() != ".json" || name.find("grid") != std::string::npos ||
        name == "perturbation")
      continue;
    EXPECT_NO_THROW(parse_scenario(load_json_file(e.path().string()))) << name;
    ++n;
  }
  EXPECT_GE(n, 10);
}
