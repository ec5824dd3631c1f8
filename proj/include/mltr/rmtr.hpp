#pragma once

// Recursive multilevel trust-region driver.
//
// A V-cycle rooted at level l runs mu_pre smoothing steps, restricts the
// iterate and builds the coarse objective
//   H^{l-1}(x) = L^{l-1}(x) + <dg, x - x0>,
//   dg = R grad H^l(theta) - grad L^{l-1}(x0),
// recurses (or solves with mu_coarse steps at level 1), prolongs the coarse
// correction, accepts it through the multilevel reduction ratio
//   rho = (H^l(theta) - H^l(theta + P s)) / (H^{l-1}(x0) - H^{l-1}(x_final)),
// and finishes with mu_post smoothing steps. The coarse entry radius equals
// the fine radius after pre-smoothing; the fine radius reacts to rho with
// the usual three-branch rule.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mltr/hierarchy.hpp"
#include "mltr/objective.hpp"
#include "mltr/trust_region.hpp"

namespace mltr {

struct CycleConfig {
  TrConfig tr;
  int mu_pre = 1;
  int mu_post = 1;
  int mu_coarse = 1;
  bool check_coherence = false;
  double coherence_tol = 1e-12;
};

struct VcycleStats {
  double reduction = 0.0;       // root-level objective decrease
  int coarse_steps = 0;         // coarse corrections accepted (all levels)
  int coarse_attempts = 0;
  double max_coherence_err = 0.0;
  int grad_calls = 0;
};

// Computes the multilevel acceptance ratio with the guarded denominator.
inline double multilevel_ratio(double fine_before, double fine_after,
                               double coarse_reduction) {
  if (!(coarse_reduction > kRatioGuard * (1.0 + std::abs(fine_before))))
    return -std::numeric_limits<double>::infinity();
  if (!std::isfinite(fine_after))
    return -std::numeric_limits<double>::infinity();
  return (fine_before - fine_after) / coarse_reduction;
}

namespace detail {

inline void rmtr_recurse(int level, ShiftedObjective H,
                         std::vector<BoundLoss>& losses, const Hierarchy& h,
                         VecX& theta, double& delta,
                         std::vector<SecantMemory>& mems,
                         const CycleConfig& cc, Rng* rng, VcycleStats& stats) {
  if (level == 1) {
    TrOutcome o = tr_iterate(H, theta, delta, mems[0], cc.mu_coarse, cc.tr, rng);
    stats.grad_calls += o.grad_calls;
    return;
  }

  TrOutcome pre =
      tr_iterate(H, theta, delta, mems[level - 1], cc.mu_pre, cc.tr, rng);
  stats.grad_calls += pre.grad_calls;

  const LevelSpec& fine = h.at(level);
  const LevelSpec& coarse = h.at(level - 1);

  VecX g_fine = H.gradient(theta);
  VecX x0 = restrict_params(theta, fine, coarse, h.rule);
  VecX gR = restrict_gradient(g_fine, fine, coarse, h.rule);
  VecX gc = losses[level - 2].gradient(x0);
  ShiftedObjective Hc(losses[level - 2], gR - gc, x0);

  if (cc.check_coherence) {
    // Re-derive the coarse gradient through the assembled objective; a
    // wiring error (sign, anchor, batch binding) shows up here.
    const double err = (Hc.gradient(x0) - gR).norm() /
                       std::max(1.0, gR.norm());
    stats.max_coherence_err = std::max(stats.max_coherence_err, err);
    if (err > cc.coherence_tol)
      throw std::runtime_error("rmtr: first-order coherence violated");
  }

  VecX xc = x0;
  double delta_c = delta;  // coarse entry radius
  double coarse_red;
  if (level - 1 == 1) {
    TrOutcome o =
        tr_iterate(Hc, xc, delta_c, mems[0], cc.mu_coarse, cc.tr, rng);
    stats.grad_calls += o.grad_calls;
    coarse_red = o.reduction;
  } else {
    const double before = Hc.value(xc);
    rmtr_recurse(level - 1, Hc, losses, h, xc, delta_c, mems, cc, rng, stats);
    coarse_red = before - Hc.value(xc);
  }

  VecX s = prolong(xc - x0, coarse, fine, h.rule);
  if (s.norm() > 0.0) {
    ++stats.coarse_attempts;
    const double fine_before = H.value(theta);
    double fine_after = std::numeric_limits<double>::quiet_NaN();
    try {
      fine_after = H.value(theta + s);
    } catch (const PropagationDiverged&) {
      fine_after = std::numeric_limits<double>::infinity();
    }
    const double rho = multilevel_ratio(fine_before, fine_after, coarse_red);
    const ControlDecision d = conv_control(rho, delta, cc.tr.trp);
    delta = d.delta;
    if (d.accepted) {
      theta += s;
      ++stats.coarse_steps;
    }
  }

  TrOutcome post =
      tr_iterate(H, theta, delta, mems[level - 1], cc.mu_post, cc.tr, rng);
  stats.grad_calls += post.grad_calls;
}

}  // namespace detail

// One V-cycle rooted at `level` (1-based; level 1 degenerates to mu_coarse
// plain TR steps). `losses` holds one BoundLoss per level, coarse to fine,
// all bound to the current batch; `mems` the per-level secant memories.
inline VcycleStats rmtr_vcycle(int level, std::vector<BoundLoss>& losses,
                               const Hierarchy& h, VecX& theta, double& delta,
                               std::vector<SecantMemory>& mems,
                               const CycleConfig& cc, Rng* rng = nullptr) {
  if (level < 1 || level > int(losses.size()) || level > h.num_levels())
    throw std::invalid_argument("rmtr_vcycle: bad level");
  if (mems.size() < losses.size())
    throw std::invalid_argument("rmtr_vcycle: memory stack too small");
  VcycleStats stats;
  ShiftedObjective H(losses[level - 1]);
  const double before = H.value(theta);
  detail::rmtr_recurse(level, H, losses, h, theta, delta, mems, cc, rng, stats);
  stats.reduction = before - H.value(theta);
  return stats;
}

enum class FcycleSignal { Continue, Advance, StopAll };

// Called after every V-cycle of the F-cycle with the root level, the cycle
// index within that root, the current iterate, the root-level objective
// value and the current radius. The return value advances to the next root
// early or stops the whole run; the per-root cycle budget advances
// regardless.
using FcycleCallback =
    std::function<FcycleSignal(int root, int cycle, const VecX&, double,
                               double)>;

struct FcycleResult {
  VecX theta;          // always at the finest level
  double delta = 0.0;
  int reached_root = 0;
  bool stopped_early = false;
};

// Nested iteration: optimize on level 1, prolong, run V-cycles rooted at
// each level in turn. Root levels below the finest advance after
// cycles_per_level V-cycles (or earlier via the callback); the finest root
// cycles until the callback stops the run.
inline FcycleResult rmtr_fcycle(std::vector<BoundLoss>& losses,
                                const Hierarchy& h, VecX theta1,
                                std::vector<SecantMemory>& mems,
                                const CycleConfig& cc, double delta0,
                                int cycles_per_level, FcycleCallback cb,
                                Rng* rng = nullptr) {
  const int L = h.num_levels();
  if (int(losses.size()) != L)
    throw std::invalid_argument("rmtr_fcycle: need one objective per level");
  if (cycles_per_level < 1)
    throw std::invalid_argument("rmtr_fcycle: cycles_per_level >= 1");

  FcycleResult res;
  VecX theta = std::move(theta1);
  bool stop_all = false;
  int root = 1;
  for (; root <= L; ++root) {
    if (root > 1) theta = prolong(theta, h.at(root - 1), h.at(root), h.rule);
    double delta = delta0;
    for (int cycle = 0;; ++cycle) {
      rmtr_vcycle(root, losses, h, theta, delta, mems, cc, rng);
      const double v = losses[root - 1].value(theta);
      const FcycleSignal sig = cb ? cb(root, cycle, theta, v, delta)
                                  : FcycleSignal::Continue;
      if (sig == FcycleSignal::StopAll) {
        stop_all = true;
        break;
      }
      if (sig == FcycleSignal::Advance) break;
      if ((root < L || !cb) && cycle + 1 >= cycles_per_level) break;
    }
    res.delta = delta;
    if (stop_all) break;
  }
  res.reached_root = std::min(root, L);
  res.stopped_early = stop_all && res.reached_root < L;
  // Reporting happens on the finest network; finish the prolongation chain
  // when the run stopped on a coarser root.
  for (int l = res.reached_root; l < L; ++l)
    theta = prolong(theta, h.at(l), h.at(l + 1), h.rule);
  res.theta = std::move(theta);
  return res;
}

}  // namespace mltr
