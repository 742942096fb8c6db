// Command-line front end: run a scenario, sweep a parameter grid, or run the
// pixel-perturbation study.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "costereo/scenario.hpp"

namespace fs = std::filesystem;
using namespace costereo;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitInvariant = 2;

int cmd_run(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  Json doc = load_json_file(config);
  if (seed) doc["seed"] = *seed;
  const ScenarioConfig cfg = parse_scenario(doc);
  const MetricsRecord rec = run_scenario(cfg);
  write_outputs(rec, out);
  std::cout << summary_json(rec.summary).dump(2) << '\n';
  return 0;
}

int cmd_sweep(const std::string& config, const std::string& grid, const std::string& out) {
  const Json base = load_json_file(config);
  const auto jobs = expand_grid(base, load_json_file(grid));
  Json index = Json::array();
  int breaches = 0;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "job_%04zu", k);
    const fs::path dir = fs::path(out) / name;
    Json entry{{"job", name}, {"params", jobs[k].second}};
    try {
      const MetricsRecord rec = run_scenario(parse_scenario(jobs[k].first));
      write_outputs(rec, dir);
      entry["summary"] = summary_json(rec.summary);
    } catch (const InvariantBreach& e) {
      entry["error"] = e.what();
      ++breaches;
    }
    std::cerr << name << ' ' << jobs[k].second.dump() << '\n';
    index.push_back(entry);
  }
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "sweep.json") << index.dump(2) << '\n';
  return breaches ? kExitInvariant : 0;
}

int cmd_perturb(const std::string& config) {
  const Json doc = load_json_file(config);
  const Json p = doc.value("perturbation", Json::object());
  detail::reject_unknown(p, {"feature_counts", "depths", "sigma_px", "fx", "trials", "seed"},
                         "perturbation");
  const auto counts = p.value("feature_counts", std::vector<int>{10, 20, 40, 60, 80, 100});
  const auto depths = p.value("depths", std::vector<double>{2, 4, 6, 8});
  const double sigma_px = p.value("sigma_px", 5.0);
  const double fx = p.value("fx", 320.0);
  const int trials = p.value("trials", 1000);
  const auto seed = p.value("seed", std::uint64_t{7});
  if (counts.empty() || depths.empty() || !(fx > 0.0) || trials < 1)
    throw ConfigError("perturbation: invalid parameters");
  Json rows = Json::array();
  const int n_max = *std::max_element(counts.begin(), counts.end());
  for (double z : depths) {
    const auto all = perturbation_features(n_max, z, seed);
    for (int n : counts) {
      PerturbationCase c{{all.begin(), all.begin() + n}, sigma_px / fx, trials};
      const auto st = perturbation_analysis(c, seed);
      rows.push_back({{"depth", z}, {"features", n}, {"mean", st.mean}, {"stddev", st.stddev}});
    }
  }
  std::cout << rows.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative stereo relative pose simulator"};
  app.require_subcommand(1);

  std::string config, out, grid;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "Run one scenario");
  run->add_option("--config", config, "Scenario JSON")->required();
  run->add_option("--out", out, "Output directory")->required();
  run->add_option("--seed", seed, "Override the scenario seed");

  auto* sweep = app.add_subcommand("sweep", "Run a scenario over a parameter grid");
  sweep->add_option("--config", config, "Base scenario JSON")->required();
  sweep->add_option("--grid", grid, "Grid JSON: {\"dotted.path\": [values]}")->required();
  sweep->add_option("--out", out, "Output directory")->required();

  auto* perturb = app.add_subcommand("perturb", "Pixel-perturbation study");
  perturb->add_option("--config", config, "JSON with a 'perturbation' section")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config, out, seed);
    if (*sweep) return cmd_sweep(config, grid, out);
    if (*perturb) return cmd_perturb(config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InvariantBreach& e) {
    std::cerr << "invariant breach: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const Json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  return 0;
}
