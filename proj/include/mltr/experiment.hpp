#pragma once

// Experiment harness: plain-text configuration, solver dispatch, JSONL run
// logs, work-unit accounting and replicate statistics.
//
// Run logs are bit-reproducible for a fixed configuration and seed: rows
// carry no timing, and every number is serialized with an exact shortest
// round-trip format. Wall-clock time lives in the separate summary file.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mltr/datasets.hpp"
#include "mltr/dss.hpp"
#include "mltr/rmtr.hpp"

namespace mltr {

enum class SolverKind { Tr, RmtrV, RmtrF, DssTr, DssRmtr };
enum class HessianKind { CauchyPoint, Lsr1Overlap, Lsr1Sampled };

inline std::string to_string(SolverKind s) {
  switch (s) {
    case SolverKind::Tr: return "TR";
    case SolverKind::RmtrV: return "RMTR_V";
    case SolverKind::RmtrF: return "RMTR_F";
    case SolverKind::DssTr: return "DSS_TR";
    case SolverKind::DssRmtr: return "DSS_RMTR";
  }
  return "?";
}
inline std::string to_string(HessianKind k) {
  switch (k) {
    case HessianKind::CauchyPoint: return "CP";
    case HessianKind::Lsr1Overlap: return "LSR1_overlap";
    case HessianKind::Lsr1Sampled: return "LSR1_sampled";
  }
  return "?";
}
inline std::string to_string(Activation a) {
  return a == Activation::Tanh ? "tanh" : "relu";
}
inline std::string to_string(Refinement r) {
  return r == Refinement::IntervalDoubling ? "interval" : "node";
}

inline SolverKind solver_from_string(const std::string& s) {
  if (s == "TR") return SolverKind::Tr;
  if (s == "RMTR_V") return SolverKind::RmtrV;
  if (s == "RMTR_F") return SolverKind::RmtrF;
  if (s == "DSS_TR") return SolverKind::DssTr;
  if (s == "DSS_RMTR") return SolverKind::DssRmtr;
  throw std::invalid_argument("unknown solver: " + s);
}
inline HessianKind hessian_from_string(const std::string& s) {
  if (s == "CP") return HessianKind::CauchyPoint;
  if (s == "LSR1_overlap") return HessianKind::Lsr1Overlap;
  if (s == "LSR1_sampled") return HessianKind::Lsr1Sampled;
  throw std::invalid_argument("unknown hessian: " + s);
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw std::invalid_argument("unknown activation: " + s);
}
inline Refinement refinement_from_string(const std::string& s) {
  if (s == "interval") return Refinement::IntervalDoubling;
  if (s == "node") return Refinement::NodeDoubling;
  throw std::invalid_argument("unknown refinement: " + s);
}

struct ExperimentConfig {
  std::string dataset = "smiley";  // smiley | spiral | analytic
  int dataset_n = 7000;
  std::uint64_t dataset_seed = 1;
  double train_fraction = 5.0 / 7.0;
  double dataset_noise = 0.05;  // spiral only
  std::string dataset_csv;      // when set, load this file instead
  bool standardize = true;

  int width = 10;
  int blocks = 7;  // residual blocks on the coarsest level
  double T = 1.0;
  Activation activation = Activation::Tanh;
  double beta1 = 1e-4;
  double beta2 = 1e-4;

  int levels = 3;
  Refinement refinement = Refinement::IntervalDoubling;
  SolverKind solver = SolverKind::RmtrV;
  HessianKind hessian = HessianKind::Lsr1Overlap;
  int memory0 = 1;

  TrustRegionParams trp;
  int mu1 = 1, mu2 = 1, mu_coarse = 1;
  int fcycle_cycles = 1;  // V-cycles per root below the finest
  bool fcycle_advance_on_stop = true;

  DssParams dss;

  double stop_accuracy = 0.98;
  double stop_wmax = 0.0;  // <= 0 means no work cap
  int epoch_max = 200;

  std::uint64_t seed = 0;  // solver stream: init, shuffles, sampling
  std::string out;         // output path prefix ("" = no files)
};

namespace detail {

// Shortest decimal string that parses back to exactly v.
inline std::string fmt_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected boolean, got: " + v);
}

inline nlohmann::ordered_json json_num(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

}  // namespace detail

// All keys in canonical order, values formatted for exact round-trip.
inline std::vector<std::pair<std::string, std::string>> config_items(
    const ExperimentConfig& c) {
  using detail::fmt_double;
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("dataset", c.dataset);
  kv.emplace_back("dataset.n", std::to_string(c.dataset_n));
  kv.emplace_back("dataset.seed", std::to_string(c.dataset_seed));
  kv.emplace_back("dataset.train_fraction", fmt_double(c.train_fraction));
  kv.emplace_back("dataset.noise", fmt_double(c.dataset_noise));
  kv.emplace_back("dataset.csv", c.dataset_csv);
  kv.emplace_back("standardize", c.standardize ? "true" : "false");
  kv.emplace_back("net.width", std::to_string(c.width));
  kv.emplace_back("net.blocks", std::to_string(c.blocks));
  kv.emplace_back("net.T", fmt_double(c.T));
  kv.emplace_back("net.activation", to_string(c.activation));
  kv.emplace_back("net.beta1", fmt_double(c.beta1));
  kv.emplace_back("net.beta2", fmt_double(c.beta2));
  kv.emplace_back("levels", std::to_string(c.levels));
  kv.emplace_back("refinement", to_string(c.refinement));
  kv.emplace_back("solver", to_string(c.solver));
  kv.emplace_back("hessian", to_string(c.hessian));
  kv.emplace_back("memory0", std::to_string(c.memory0));
  kv.emplace_back("tr.eta1", fmt_double(c.trp.eta1));
  kv.emplace_back("tr.eta2", fmt_double(c.trp.eta2));
  kv.emplace_back("tr.gamma1", fmt_double(c.trp.gamma1));
  kv.emplace_back("tr.gamma2", fmt_double(c.trp.gamma2));
  kv.emplace_back("tr.delta0", fmt_double(c.trp.delta0));
  kv.emplace_back("tr.delta_max", fmt_double(c.trp.delta_max));
  kv.emplace_back("cycle.mu1", std::to_string(c.mu1));
  kv.emplace_back("cycle.mu2", std::to_string(c.mu2));
  kv.emplace_back("cycle.mu_coarse", std::to_string(c.mu_coarse));
  kv.emplace_back("fcycle.cycles_per_level", std::to_string(c.fcycle_cycles));
  kv.emplace_back("fcycle.advance_on_stop",
                  c.fcycle_advance_on_stop ? "true" : "false");
  kv.emplace_back("dss.mbs0", std::to_string(c.dss.mbs0));
  kv.emplace_back("dss.overlap_fraction", fmt_double(c.dss.overlap_fraction));
  kv.emplace_back("dss.zeta1", fmt_double(c.dss.zeta1));
  kv.emplace_back("dss.zeta2", fmt_double(c.dss.zeta2));
  kv.emplace_back("dss.omega", fmt_double(c.dss.omega));
  kv.emplace_back("dss.global_period", std::to_string(c.dss.global_period));
  kv.emplace_back("stop.accuracy", fmt_double(c.stop_accuracy));
  kv.emplace_back("stop.wmax", fmt_double(c.stop_wmax));
  kv.emplace_back("stop.epoch_max", std::to_string(c.epoch_max));
  kv.emplace_back("seed", std::to_string(c.seed));
  kv.emplace_back("out", c.out);
  return kv;
}

inline std::string print_config(const ExperimentConfig& c) {
  std::string s;
  for (const auto& [k, v] : config_items(c)) s += k + " = " + v + "\n";
  return s;
}

// Applies one key/value setting. Unknown keys are errors.
inline void apply_kv(ExperimentConfig& c, const std::string& key,
                     const std::string& value) {
  const auto d = [&] { return std::stod(value); };
  const auto i = [&] { return std::stoi(value); };
  const auto u = [&] { return std::stoull(value); };
  if (key == "dataset") c.dataset = value;
  else if (key == "dataset.n") c.dataset_n = i();
  else if (key == "dataset.seed") c.dataset_seed = u();
  else if (key == "dataset.train_fraction") c.train_fraction = d();
  else if (key == "dataset.noise") c.dataset_noise = d();
  else if (key == "dataset.csv") c.dataset_csv = value;
  else if (key == "standardize") c.standardize = detail::parse_bool(value);
  else if (key == "net.width") c.width = i();
  else if (key == "net.blocks") c.blocks = i();
  else if (key == "net.T") c.T = d();
  else if (key == "net.activation") c.activation = activation_from_string(value);
  else if (key == "net.beta1") c.beta1 = d();
  else if (key == "net.beta2") c.beta2 = d();
  else if (key == "levels") c.levels = i();
  else if (key == "refinement") c.refinement = refinement_from_string(value);
  else if (key == "solver") c.solver = solver_from_string(value);
  else if (key == "hessian") c.hessian = hessian_from_string(value);
  else if (key == "memory0") c.memory0 = i();
  else if (key == "tr.eta1") c.trp.eta1 = d();
  else if (key == "tr.eta2") c.trp.eta2 = d();
  else if (key == "tr.gamma1") c.trp.gamma1 = d();
  else if (key == "tr.gamma2") c.trp.gamma2 = d();
  else if (key == "tr.delta0") c.trp.delta0 = d();
  else if (key == "tr.delta_max") c.trp.delta_max = d();
  else if (key == "cycle.mu1") c.mu1 = i();
  else if (key == "cycle.mu2") c.mu2 = i();
  else if (key == "cycle.mu_coarse") c.mu_coarse = i();
  else if (key == "fcycle.cycles_per_level") c.fcycle_cycles = i();
  else if (key == "fcycle.advance_on_stop")
    c.fcycle_advance_on_stop = detail::parse_bool(value);
  else if (key == "dss.mbs0") c.dss.mbs0 = i();
  else if (key == "dss.overlap_fraction") c.dss.overlap_fraction = d();
  else if (key == "dss.zeta1") c.dss.zeta1 = d();
  else if (key == "dss.zeta2") c.dss.zeta2 = d();
  else if (key == "dss.omega") c.dss.omega = d();
  else if (key == "dss.global_period") c.dss.global_period = i();
  else if (key == "stop.accuracy") c.stop_accuracy = d();
  else if (key == "stop.wmax") c.stop_wmax = d();
  else if (key == "stop.epoch_max") c.epoch_max = i();
  else if (key == "seed") c.seed = u();
  else if (key == "out") c.out = value;
  else throw std::invalid_argument("unknown config key: " + key);
}

// `key = value` lines; '#' starts a comment; blank lines ignored.
inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    apply_kv(c, detail::trim(line.substr(0, eq)),
             detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

struct PreparedData {
  MatX train_x, train_c, val_x, val_c;
  bool classification = true;
};

// Generation uses dataset.seed; the split permutation uses a stream derived
// from it so the two never share draws.
inline PreparedData prepare_data(const ExperimentConfig& c) {
  Dataset d;
  if (!c.dataset_csv.empty()) {
    d = import_csv(c.dataset_csv);
  } else if (c.dataset == "smiley") {
    d = gen_smiley(c.dataset_n, c.dataset_seed);
  } else if (c.dataset == "spiral") {
    d = gen_spiral(c.dataset_n, c.dataset_seed, c.dataset_noise);
  } else if (c.dataset == "analytic") {
    d = gen_analytic_regression(c.dataset_n, c.dataset_seed);
  } else {
    throw std::invalid_argument("unknown dataset: " + c.dataset);
  }
  Split s = split_dataset(d, c.train_fraction,
                          c.dataset_seed ^ 0x9e3779b97f4a7c15ull);
  PreparedData p;
  p.classification = d.classification;
  if (c.standardize) {
    const Standardizer st = Standardizer::fit(s.train_x);
    p.train_x = st.apply(s.train_x);
    p.val_x = s.val_x.rows() > 0 ? st.apply(s.val_x) : s.val_x;
  } else {
    p.train_x = std::move(s.train_x);
    p.val_x = std::move(s.val_x);
  }
  p.train_c = std::move(s.train_c);
  p.val_c = std::move(s.val_c);
  return p;
}

inline NetworkConfig make_net_config(const ExperimentConfig& c,
                                     const PreparedData& d) {
  NetworkConfig nc;
  nc.n_in = int(d.train_x.cols());
  nc.n_out = int(d.train_c.cols());
  nc.width = c.width;
  nc.blocks = c.blocks;
  nc.T = c.T;
  nc.activation = c.activation;
  nc.hypothesis = d.classification ? Hypothesis::Softmax : Hypothesis::Identity;
  nc.loss = d.classification ? LossKind::CrossEntropy : LossKind::LeastSquares;
  nc.beta1 = c.beta1;
  nc.beta2 = c.beta2;
  nc.validate();
  return nc;
}

struct RunMetrics {
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // data term only
  double train_acc = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

// Diagnostics only: evaluated outside the work ledger.
inline RunMetrics eval_metrics(const VecX& theta, const NetworkConfig& cfg,
                               const PreparedData& d) {
  RunMetrics m;
  m.train_loss = loss(theta, cfg, Batch{d.train_x, d.train_c});
  if (d.val_x.rows() > 0)
    m.val_loss =
        loss_breakdown(theta, cfg, Batch{d.val_x, d.val_c}, false).data;
  if (d.classification) {
    m.train_acc = accuracy(theta, cfg, d.train_x, d.train_c);
    if (d.val_x.rows() > 0) m.val_acc = accuracy(theta, cfg, d.val_x, d.val_c);
  }
  return m;
}

struct RunResult {
  int exit_code = 2;  // 0 target reached, 2 budget exhausted
  bool converged = false;
  nlohmann::ordered_json header;
  std::vector<nlohmann::ordered_json> rows;
  nlohmann::ordered_json summary;
  WorkLedger ledger;
  VecX theta;  // finest-level parameters at exit
  RunMetrics final_metrics;
  double wall_ms = 0.0;
};

namespace detail {

inline nlohmann::ordered_json make_row(int epoch, int level, double w,
                                       const RunMetrics& m, int mbs,
                                       double delta, double rho_g,
                                       bool has_rho, bool accepted) {
  nlohmann::ordered_json r;
  r["epoch"] = epoch;
  r["level"] = level;
  r["W"] = json_num(w);
  r["train_loss"] = json_num(m.train_loss);
  r["val_loss"] = json_num(m.val_loss);
  r["train_acc"] = json_num(m.train_acc);
  r["val_acc"] = json_num(m.val_acc);
  if (mbs > 0) r["mbs"] = mbs; else r["mbs"] = nullptr;
  r["delta"] = json_num(delta);
  r["rho_g"] = has_rho ? json_num(rho_g) : nlohmann::ordered_json(nullptr);
  r["accepted"] = accepted;
  return r;
}

}  // namespace detail

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();

  const PreparedData data = prepare_data(cfg);
  const NetworkConfig coarsest = make_net_config(cfg, data);
  const Hierarchy h_full =
      build_hierarchy(coarsest, cfg.levels, cfg.refinement);

  // Single-level solvers run on the finest network of the configured
  // hierarchy so that every solver optimizes the same model.
  const bool single_level =
      cfg.solver == SolverKind::Tr || cfg.solver == SolverKind::DssTr;
  Hierarchy h;
  h.rule = h_full.rule;
  if (single_level) {
    LevelSpec s = h_full.finest();
    s.level = 1;
    h.levels = {s};
  } else {
    h = h_full;
  }
  const int L = h.num_levels();

  std::vector<int> blocks_per_level;
  for (const auto& s : h.levels) blocks_per_level.push_back(s.blocks);
  RunResult res;
  res.ledger = WorkLedger(blocks_per_level, data.train_x.rows());

  CycleConfig cc;
  cc.tr.trp = cfg.trp;
  cc.tr.mode = cfg.hessian == HessianKind::CauchyPoint
                   ? SubproblemMode::CauchyPoint
                   : SubproblemMode::Lsr1;
  cc.tr.source = cfg.hessian == HessianKind::Lsr1Sampled
                     ? SecantSourceKind::Sampled
                     : SecantSourceKind::Overlap;
  cc.mu_pre = cfg.mu1;
  cc.mu_post = cfg.mu2;
  cc.mu_coarse = cfg.mu_coarse;

  Rng rng(cfg.seed);
  VecX theta = init_params(
      cfg.solver == SolverKind::RmtrF ? h.coarsest().cfg : h.finest().cfg,
      rng);

  res.header["schema"] = "mltr-run-v1";
  res.header["solver"] = to_string(cfg.solver);
  res.header["dataset"] = cfg.dataset;
  res.header["levels"] = L;
  res.header["seed"] = cfg.seed;
  nlohmann::ordered_json cj;
  for (const auto& [k, v] : config_items(cfg)) cj[k] = v;
  res.header["config"] = std::move(cj);

  const double wmax = cfg.stop_wmax;
  const double tau = cfg.stop_accuracy;
  const auto target_hit = [&](const RunMetrics& m) {
    return data.classification && (m.train_acc > tau || m.val_acc > tau);
  };
  const auto over_budget = [&] {
    return wmax > 0.0 && res.ledger.total() > wmax;
  };

  const Batch train{data.train_x, data.train_c};

  switch (cfg.solver) {
    case SolverKind::Tr: {
      BoundLoss obj(h.at(1).cfg, train, train, &res.ledger, 1, 0, 0);
      SecantMemory mem(cfg.memory0);
      double delta = cfg.trp.delta0;
      for (int it = 0; it < cfg.epoch_max; ++it) {
        TrOutcome o = tr_iterate(obj, theta, delta, mem, 1, cc.tr, &rng);
        const RunMetrics m = eval_metrics(theta, h.at(1).cfg, data);
        res.rows.push_back(detail::make_row(it, 1, res.ledger.total(), m, 0,
                                            delta, 0.0, false,
                                            o.accepted > 0));
        if (target_hit(m)) { res.converged = true; break; }
        if (over_budget()) break;
      }
      break;
    }
    case SolverKind::RmtrV: {
      std::vector<BoundLoss> losses;
      std::vector<SecantMemory> mems;
      for (int l = 1; l <= L; ++l) {
        losses.emplace_back(h.at(l).cfg, train, train, &res.ledger, l, 0, 0);
        mems.emplace_back(cfg.memory0);
      }
      double delta = cfg.trp.delta0;
      for (int it = 0; it < cfg.epoch_max; ++it) {
        VcycleStats st = rmtr_vcycle(L, losses, h, theta, delta, mems, cc, &rng);
        const RunMetrics m = eval_metrics(theta, h.finest().cfg, data);
        res.rows.push_back(detail::make_row(it, L, res.ledger.total(), m, 0,
                                            delta, 0.0, false,
                                            st.reduction > 0.0));
        if (target_hit(m)) { res.converged = true; break; }
        if (over_budget()) break;
      }
      break;
    }
    case SolverKind::RmtrF: {
      std::vector<BoundLoss> losses;
      std::vector<SecantMemory> mems;
      for (int l = 1; l <= L; ++l) {
        losses.emplace_back(h.at(l).cfg, train, train, &res.ledger, l, 0, 0);
        mems.emplace_back(cfg.memory0);
      }
      int total_cycles = 0;
      const auto cb = [&](int root, int cycle, const VecX& th, double,
                          double delta) -> FcycleSignal {
        (void)cycle;
        const RunMetrics m = eval_metrics(th, h.at(root).cfg, data);
        res.rows.push_back(detail::make_row(total_cycles, root,
                                            res.ledger.total(), m, 0, delta,
                                            0.0, false, true));
        ++total_cycles;
        if (target_hit(m)) {
          if (root == L) { res.converged = true; return FcycleSignal::StopAll; }
          if (cfg.fcycle_advance_on_stop) return FcycleSignal::Advance;
        }
        if (over_budget()) return FcycleSignal::StopAll;
        if (total_cycles >= cfg.epoch_max) return FcycleSignal::StopAll;
        return FcycleSignal::Continue;
      };
      FcycleResult fr = rmtr_fcycle(losses, h, std::move(theta), mems, cc,
                                    cfg.trp.delta0, cfg.fcycle_cycles, cb,
                                    &rng);
      theta = std::move(fr.theta);
      break;
    }
    case SolverKind::DssTr:
    case SolverKind::DssRmtr: {
      DssParams dp = cfg.dss;
      dp.memory0 = cfg.memory0;
      const auto on_epoch = [&](const DssEpochInfo& info,
                                const VecX& th) -> bool {
        const RunMetrics m = eval_metrics(th, h.finest().cfg, data);
        res.rows.push_back(detail::make_row(
            info.epoch, L, res.ledger.total(), m, info.mbs, info.delta,
            info.rho_g, info.global_evaluated, info.accepted));
        if (target_hit(m)) { res.converged = true; return true; }
        return over_budget();
      };
      DssResult dr = dss_rmtr(h, data.train_x, data.train_c, std::move(theta),
                              cc, dp, cfg.epoch_max, res.ledger, rng,
                              on_epoch);
      theta = std::move(dr.theta);
      break;
    }
  }

  res.exit_code = res.converged ? 0 : 2;
  res.theta = std::move(theta);
  res.final_metrics = eval_metrics(res.theta, h.finest().cfg, data);
  const auto t1 = std::chrono::steady_clock::now();
  res.wall_ms =
      std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(
          t1 - t0)
          .count();

  res.summary["schema"] = "mltr-summary-v1";
  res.summary["solver"] = to_string(cfg.solver);
  res.summary["exit"] = res.exit_code;
  res.summary["converged"] = res.converged;
  res.summary["rows"] = res.rows.size();
  res.summary["W"] = detail::json_num(res.ledger.total());
  res.summary["W_hvp"] = detail::json_num(res.ledger.total_hvp());
  res.summary["grad_calls"] = res.ledger.grad_calls();
  res.summary["fn_calls"] = res.ledger.fn_calls();
  res.summary["hvp_calls"] = res.ledger.hvp_calls();
  res.summary["train_loss"] = detail::json_num(res.final_metrics.train_loss);
  res.summary["val_loss"] = detail::json_num(res.final_metrics.val_loss);
  res.summary["train_acc"] = detail::json_num(res.final_metrics.train_acc);
  res.summary["val_acc"] = detail::json_num(res.final_metrics.val_acc);
  res.summary["wall_ms"] = res.wall_ms;
  return res;
}

// <prefix>.jsonl, <prefix>.summary.json, <prefix>.ledger.json.
inline void write_outputs(const RunResult& res, const std::string& prefix) {
  const std::filesystem::path p(prefix);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  {
    std::ofstream f(prefix + ".jsonl", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + prefix + ".jsonl");
    f << res.header.dump() << "\n";
    for (const auto& r : res.rows) f << r.dump() << "\n";
  }
  {
    std::ofstream f(prefix + ".summary.json", std::ios::binary);
    f << res.summary.dump(2) << "\n";
  }
  {
    std::ofstream f(prefix + ".ledger.json", std::ios::binary);
    f << res.ledger.to_json().dump(2) << "\n";
  }
}

struct ReplicateStats {
  double median = 0.0;
  double mean = 0.0;
  double stddev = 0.0;      // sample standard deviation, 0 for n == 1
  double relstd_pct = 0.0;  // 100 * stddev / |mean|
};

inline ReplicateStats compute_stats(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("compute_stats: empty");
  ReplicateStats s;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  for (double x : v) s.mean += x;
  s.mean /= double(n);
  if (n > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / double(n - 1));
  }
  s.relstd_pct = s.mean != 0.0
                     ? 100.0 * s.stddev / std::abs(s.mean)
                     : std::numeric_limits<double>::quiet_NaN();
  return s;
}

struct ReplicateReport {
  std::vector<nlohmann::ordered_json> per_seed;
  nlohmann::ordered_json stats;
  std::string csv;
};

// Runs the same configuration over consecutive solver seeds. Only the solver
// stream varies; data generation and split stay fixed.
inline ReplicateReport run_replicates(ExperimentConfig cfg,
                                      std::uint64_t seed_lo,
                                      std::uint64_t seed_hi,
                                      const std::string& out_prefix = "") {
  if (seed_hi < seed_lo)
    throw std::invalid_argument("run_replicates: empty seed range");
  ReplicateReport rep;
  std::vector<double> w, tl, vl, ta, va, ep;
  std::ostringstream csv;
  csv << "seed,exit,epochs,W,train_loss,val_loss,train_acc,val_acc,wall_ms\n";
  const auto cell = [](double x) {
    if (!std::isfinite(x)) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return std::string(buf);
  };
  for (std::uint64_t s = seed_lo; s <= seed_hi; ++s) {
    cfg.seed = s;
    RunResult r = run_experiment(cfg);
    if (!out_prefix.empty())
      write_outputs(r, out_prefix + "_s" + std::to_string(s));
    const auto& m = r.final_metrics;
    w.push_back(r.ledger.total());
    tl.push_back(m.train_loss);
    vl.push_back(m.val_loss);
    ta.push_back(m.train_acc);
    va.push_back(m.val_acc);
    ep.push_back(double(r.rows.size()));
    nlohmann::ordered_json row;
    row["seed"] = s;
    row["exit"] = r.exit_code;
    row["epochs"] = r.rows.size();
    row["W"] = detail::json_num(r.ledger.total());
    row["train_loss"] = detail::json_num(m.train_loss);
    row["val_loss"] = detail::json_num(m.val_loss);
    row["train_acc"] = detail::json_num(m.train_acc);
    row["val_acc"] = detail::json_num(m.val_acc);
    row["wall_ms"] = r.wall_ms;
    rep.per_seed.push_back(std::move(row));
    csv << s << "," << r.exit_code << "," << r.rows.size() << "," << cell(w.back())
        << "," << cell(tl.back()) << "," << cell(vl.back()) << ","
        << cell(ta.back()) << "," << cell(va.back()) << ","
        << cell(r.wall_ms) << "\n";
  }
  const auto put = [&](const char* name, const std::vector<double>& v) {
    // Aggregate only over finite entries (regression runs lack accuracies).
    std::vector<double> fin;
    for (double x : v)
      if (std::isfinite(x)) fin.push_back(x);
    if (fin.empty()) { rep.stats[name] = nullptr; return; }
    const ReplicateStats s = compute_stats(fin);
    nlohmann::ordered_json j;
    j["median"] = detail::json_num(s.median);
    j["mean"] = detail::json_num(s.mean);
    j["std"] = detail::json_num(s.stddev);
    j["relstd_pct"] = detail::json_num(s.relstd_pct);
    rep.stats[name] = std::move(j);
  };
  rep.stats["schema"] = "mltr-replicates-v1";
  rep.stats["seeds"] = nlohmann::ordered_json::array();
  for (std::uint64_t s = seed_lo; s <= seed_hi; ++s)
    rep.stats["seeds"].push_back(s);
  put("epochs", ep);
  put("W", w);
  put("train_loss", tl);
  put("val_loss", vl);
  put("train_acc", ta);
  put("val_acc", va);

  const auto agg_row = [&](const char* label, auto pick) {
    csv << label << ",,";
    const std::vector<const std::vector<double>*> cols = {&ep, &w,  &tl,
                                                          &vl, &ta, &va};
    for (const auto* col : cols) {
      std::vector<double> fin;
      for (double x : *col)
        if (std::isfinite(x)) fin.push_back(x);
      csv << (fin.empty() ? std::string() : cell(pick(compute_stats(fin))));
      csv << (col == cols.back() ? "" : ",");
    }
    csv << ",\n";
  };
  agg_row("median", [](const ReplicateStats& s) { return s.median; });
  agg_row("mean", [](const ReplicateStats& s) { return s.mean; });
  agg_row("std", [](const ReplicateStats& s) { return s.stddev; });
  agg_row("relstd%", [](const ReplicateStats& s) { return s.relstd_pct; });
  rep.csv = csv.str();
  return rep;
}

}  // namespace mltr
