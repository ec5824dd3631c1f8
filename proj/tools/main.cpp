// Command-line harness: train a single configuration, replicate it across
// solver seeds, or generate benchmark datasets as CSV.
//
// Exit codes: 0 success (train: stopping target reached), 2 budget exhausted
// before the target, 1 error.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <mltr/experiment.hpp>

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  bool print_config = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* solver_opt = nullptr;
  CLI::Option* levels_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  std::uint64_t seed = 0;
  std::string solver;
  int levels = 0;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "configuration file (key = value lines)")
      ->required();
  cmd->add_option("--set", o.sets,
                  "override any config key, e.g. --set tr.delta0=0.5");
  o.seed_opt = cmd->add_option("--seed", o.seed, "override the solver seed");
  o.solver_opt = cmd->add_option(
      "--solver", o.solver, "override the solver (TR, RMTR_V, RMTR_F, DSS_TR, DSS_RMTR)");
  o.levels_opt = cmd->add_option("--levels", o.levels, "override the level count");
  o.out_opt = cmd->add_option("--out", o.out, "override the output path prefix");
  cmd->add_flag("--print-config", o.print_config,
                "print the effective configuration and exit");
}

mltr::ExperimentConfig load_config(const CommonOpts& o) {
  mltr::ExperimentConfig cfg = mltr::parse_config_file(o.config_path);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got: " + kv);
    mltr::apply_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (*o.seed_opt) cfg.seed = o.seed;
  if (*o.solver_opt) cfg.solver = mltr::solver_from_string(o.solver);
  if (*o.levels_opt) cfg.levels = o.levels;
  if (*o.out_opt) cfg.out = o.out;
  return cfg;
}

// "a..b" inclusive, or a single seed "a".
std::pair<std::uint64_t, std::uint64_t> parse_seed_range(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) {
    const std::uint64_t v = std::stoull(s);
    return {v, v};
  }
  return {std::stoull(s.substr(0, dots)), std::stoull(s.substr(dots + 2))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilevel trust-region training for residual networks"};
  app.require_subcommand(1);

  CommonOpts train_opts;
  CLI::App* train = app.add_subcommand("train", "run one training experiment");
  add_common(train, train_opts);

  CommonOpts rep_opts;
  std::string seeds_range = "0";
  CLI::App* rep = app.add_subcommand(
      "replicate", "run one configuration across a range of solver seeds");
  add_common(rep, rep_opts);
  rep->add_option("--seeds", seeds_range, "inclusive seed range, e.g. 1..10")
      ->required();

  std::string gd_dataset = "smiley", gd_out;
  int gd_n = 7000;
  std::uint64_t gd_seed = 1;
  double gd_noise = 0.05;
  CLI::App* gd = app.add_subcommand("gen-data", "write a benchmark dataset as CSV");
  gd->add_option("--dataset", gd_dataset, "smiley | spiral | analytic")->required();
  gd->add_option("--n", gd_n, "sample count");
  gd->add_option("--seed", gd_seed, "generator seed");
  gd->add_option("--noise", gd_noise, "spiral noise standard deviation");
  gd->add_option("--out", gd_out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      mltr::ExperimentConfig cfg = load_config(train_opts);
      if (train_opts.print_config) {
        std::fputs(mltr::print_config(cfg).c_str(), stdout);
        return 0;
      }
      mltr::RunResult r = mltr::run_experiment(cfg);
      if (!cfg.out.empty()) mltr::write_outputs(r, cfg.out);
      std::puts(r.summary.dump(2).c_str());
      return r.exit_code;
    }
    if (*rep) {
      mltr::ExperimentConfig cfg = load_config(rep_opts);
      if (rep_opts.print_config) {
        std::fputs(mltr::print_config(cfg).c_str(), stdout);
        return 0;
      }
      const auto [lo, hi] = parse_seed_range(seeds_range);
      mltr::ReplicateReport report =
          mltr::run_replicates(cfg, lo, hi, cfg.out);
      std::fputs(report.csv.c_str(), stdout);
      if (!cfg.out.empty()) {
        std::ofstream c(cfg.out + ".replicates.csv", std::ios::binary);
        c << report.csv;
        nlohmann::ordered_json j;
        j["stats"] = report.stats;
        j["runs"] = report.per_seed;
        std::ofstream s(cfg.out + ".replicates.json", std::ios::binary);
        s << j.dump(2) << "\n";
      }
      return 0;
    }
    if (*gd) {
      mltr::Dataset d;
      if (gd_dataset == "smiley") d = mltr::gen_smiley(gd_n, gd_seed);
      else if (gd_dataset == "spiral") d = mltr::gen_spiral(gd_n, gd_seed, gd_noise);
      else if (gd_dataset == "analytic") d = mltr::gen_analytic_regression(gd_n, gd_seed);
      else throw std::invalid_argument("unknown dataset: " + gd_dataset);
      mltr::export_csv(d, gd_out);
      std::printf("wrote %d samples to %s\n", d.size(), gd_out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
