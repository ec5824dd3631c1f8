#pragma once

// Dynamic sample size strategy on top of the multilevel trust-region cycle.
//
// Each epoch reshuffles the training set and tiles it into overlapping
// mini-batches (stride mbs - o, consecutive batches sharing exactly o
// samples; the final batch absorbs the remainder). Every batch receives one
// V-cycle, warm-started from its predecessor. A global phase compares the
// full-loss reduction of the epoch against the mean local reduction and
// either accepts the epoch, or rejects it (restoring the entry iterate
// bit-exactly) and possibly enlarges the batch size. The trust-region radius
// carries across batches and epochs; once mbs reaches the dataset size the
// run is deterministic and epochs are accepted unconditionally.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mltr/rmtr.hpp"

namespace mltr {

struct MiniBatchPlan {
  std::vector<int> order;                  // shuffled sample indices
  std::vector<std::pair<int, int>> spans;  // (start, length) per batch
  int overlap = 0;                         // shared samples between neighbours

  int num_batches() const { return int(spans.size()); }
  int batch_size(int b) const { return spans.at(b).second; }

  std::vector<int> batch_indices(int b) const {
    const auto [start, len] = spans.at(b);
    return {order.begin() + start, order.begin() + start + len};
  }
  // Samples shared with the next batch: the last `overlap` of batch b, which
  // are also the first `overlap` of batch b+1.
  std::vector<int> overlap_with_next(int b) const {
    const auto [start, len] = spans.at(b);
    if (b + 1 >= num_batches() || overlap == 0) return {};
    const auto next_start = spans[b + 1].first;
    return {order.begin() + next_start, order.begin() + start + len};
  }
  std::vector<int> overlap_with_prev(int b) const {
    if (b == 0) return {};
    return overlap_with_next(b - 1);
  }
};

// Tiles [0, dataset_size) into batches of size mbs with overlap o after a
// seeded shuffle. mbs >= dataset_size yields a single full batch (o is
// ignored). Requires 0 <= o and 2*o <= mbs so that only consecutive batches
// intersect.
inline MiniBatchPlan gen_minibatches(int dataset_size, int mbs, int o,
                                     Rng& rng) {
  if (dataset_size < 1) throw std::invalid_argument("gen_minibatches: empty");
  if (mbs < 1) throw std::invalid_argument("gen_minibatches: mbs >= 1");
  MiniBatchPlan plan;
  plan.order.resize(dataset_size);
  for (int i = 0; i < dataset_size; ++i) plan.order[i] = i;
  rng.shuffle(plan.order);

  if (mbs >= dataset_size) {
    plan.overlap = 0;
    plan.spans.emplace_back(0, dataset_size);
    return plan;
  }
  if (o < 0 || 2 * o > mbs)
    throw std::invalid_argument("gen_minibatches: need 0 <= 2*o <= mbs");
  plan.overlap = o;
  const int stride = mbs - o;
  const int n = (dataset_size - mbs) / stride + 1;
  for (int j = 0; j < n; ++j) {
    const int start = j * stride;
    const int len = (j == n - 1) ? dataset_size - start : mbs;
    plan.spans.emplace_back(start, len);
  }
  return plan;
}

// Global reduction ratio: full-loss decrease over the mean local decrease,
// with the same guarded denominator as the multilevel ratio.
inline double global_ratio(double full_before, double full_after,
                           const std::vector<double>& local_reductions) {
  if (local_reductions.empty())
    return -std::numeric_limits<double>::infinity();
  double mean = 0.0;
  for (double r : local_reductions) mean += r;
  mean /= double(local_reductions.size());
  if (!(mean > kRatioGuard * (1.0 + std::abs(full_before))))
    return -std::numeric_limits<double>::infinity();
  if (!std::isfinite(full_after))
    return -std::numeric_limits<double>::infinity();
  return (full_before - full_after) / mean;
}

struct DssParams {
  int mbs0 = 250;
  double overlap_fraction = 0.2;  // o = round(fraction * mbs0), frozen
  double zeta1 = 0.1;             // epoch acceptance threshold
  double zeta2 = 0.0;             // batch growth threshold
  double omega = 2.0;             // batch growth factor
  int global_period = 1;          // epochs between global phases
  int memory0 = 1;                // initial secant memory capacity
};

struct GcontrolDecision {
  bool accepted = false;
  int mbs = 0;
  int memory = 0;
};

// Epoch acceptance and batch-size update. The batch grows by ceil(omega*mbs)
// capped at the dataset size; each actual growth raises the memory capacity
// by one.
inline GcontrolDecision gcontrol(double rho_g, int mbs, int memory,
                                 int dataset_size, const DssParams& p) {
  GcontrolDecision d;
  d.accepted = rho_g > p.zeta1;  // NaN compares false
  d.mbs = mbs;
  d.memory = memory;
  if (std::isnan(rho_g) || rho_g < p.zeta2) {
    const int grown = int(std::min<double>(
        dataset_size, std::ceil(p.omega * double(mbs))));
    if (grown > mbs) {
      d.mbs = grown;
      d.memory = memory + 1;
    }
  }
  return d;
}

// Overlap secant pair between two iterates: s from the step, z from the
// overlap-set gradient difference (full regularizer included).
inline std::pair<VecX, VecX> secant_pair_overlap(const VecX& theta_next,
                                                 const VecX& theta_cur,
                                                 const NetworkConfig& cfg,
                                                 const Batch& overlap) {
  VecX s = theta_next - theta_cur;
  VecX z = loss_gradient(theta_next, cfg, overlap).grad -
           loss_gradient(theta_cur, cfg, overlap).grad;
  return {std::move(s), std::move(z)};
}

// Sampled pairs: directions with U(0,1) entries paired with exact
// Hessian-vector products at theta.
inline std::vector<std::pair<VecX, VecX>> secant_pairs_sampled(
    const VecX& theta, const NetworkConfig& cfg, const Batch& batch, int count,
    Rng& rng) {
  std::vector<std::pair<VecX, VecX>> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    VecX s(theta.size());
    for (Eigen::Index k = 0; k < s.size(); ++k) s[k] = rng.uniform();
    VecX z = hvp(theta, cfg, batch, s);
    out.emplace_back(std::move(s), std::move(z));
  }
  return out;
}

struct DssEpochInfo {
  int epoch = 0;
  int mbs = 0;
  int num_batches = 0;
  int memory = 0;
  double delta = 0.0;
  bool deterministic = false;     // mbs covers the dataset
  bool global_evaluated = false;  // a global phase ran this epoch
  bool accepted = true;
  double rho_g = std::numeric_limits<double>::quiet_NaN();
};

// Return true to stop after this epoch.
using DssEpochCallback =
    std::function<bool(const DssEpochInfo&, const VecX& theta)>;
// Test/diagnostic probe: fires after each batch V-cycle.
using DssBatchProbe = std::function<void(int epoch, int batch,
                                         const VecX& theta_start,
                                         const VecX& theta_end)>;

struct DssResult {
  VecX theta;
  double delta = 0.0;
  int epochs_run = 0;
  int final_mbs = 0;
  int final_memory = 0;
};

// Runs the DSS loop on the hierarchy's finest level with V-cycles spanning
// all levels. Train features/targets are row-per-sample; the callback sees
// the iterate after each epoch's (possibly rejected) global phase.
inline DssResult dss_rmtr(const Hierarchy& h, const MatX& train_x,
                          const MatX& train_c, VecX theta0,
                          const CycleConfig& cc, const DssParams& dp,
                          int epoch_max, WorkLedger& ledger, Rng& rng,
                          const DssEpochCallback& on_epoch,
                          const DssBatchProbe& probe = nullptr) {
  const int L = h.num_levels();
  const int p = int(train_x.rows());
  if (p < 1) throw std::invalid_argument("dss_rmtr: empty training set");
  if (dp.mbs0 < 1) throw std::invalid_argument("dss_rmtr: mbs0 >= 1");

  const int o = int(std::lround(dp.overlap_fraction * double(dp.mbs0)));
  int mbs = dp.mbs0;
  int memory = dp.memory0;
  VecX theta = std::move(theta0);
  double delta = cc.tr.trp.delta0;

  std::vector<SecantMemory> mems;
  mems.reserve(L);
  for (int l = 0; l < L; ++l) mems.emplace_back(memory);

  const Batch full_batch{train_x, train_c};
  const auto gather = [&](const std::vector<int>& idx) {
    Batch b;
    b.features.resize(idx.size(), train_x.cols());
    b.targets.resize(idx.size(), train_c.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
      b.features.row(i) = train_x.row(idx[i]);
      b.targets.row(i) = train_c.row(idx[i]);
    }
    return b;
  };

  DssResult res;
  VecX period_start_theta = theta;
  std::vector<double> period_reds;
  int epochs_since_global = 0;

  for (int e = 0; e < epoch_max; ++e) {
    const bool deterministic = mbs >= p;
    MiniBatchPlan plan =
        gen_minibatches(p, std::min(mbs, p), deterministic ? 0 : o, rng);
    const int nb = plan.num_batches();

    std::optional<BoundLoss::Carry> carry;
    for (int b = 0; b < nb; ++b) {
      Batch batch = deterministic ? full_batch : gather(plan.batch_indices(b));
      // The overlap shared with the next batch sources this batch's secant
      // pairs; the last batch reuses the overlap with its predecessor, and a
      // single full batch is its own overlap set.
      Batch overlap_storage;
      const Batch* overlap = &batch;
      if (nb > 1) {
        overlap_storage = gather(b + 1 < nb ? plan.overlap_with_next(b)
                                            : plan.overlap_with_prev(b));
        overlap = &overlap_storage;
      }

      std::vector<BoundLoss> losses;
      losses.reserve(L);
      for (int l = 1; l <= L; ++l)
        losses.emplace_back(h.at(l).cfg, batch, *overlap, &ledger, l, e, b);
      if (carry) losses.back().set_carry(std::move(*carry));
      carry.reset();

      // Coarse memories belong to the previous batch's objective; only the
      // finest level's overlap-sourced pairs survive a batch change.
      if (nb > 1)
        for (int l = 0; l < L - 1; ++l) mems[l].clear();

      const VecX theta_before = probe ? theta : VecX();
      VcycleStats st =
          rmtr_vcycle(L, losses, h, theta, delta, mems, cc, &rng);
      period_reds.push_back(st.reduction);
      if (probe) probe(e, b, theta_before, theta);

      // Hand the overlap data gradient at the final iterate to the next
      // batch, whose first o samples are exactly this overlap set.
      if (b + 1 < nb && cc.tr.source == SecantSourceKind::Overlap) {
        if (const VecX* g = losses.back().overlap_data_gradient_at(theta)) {
          const auto next = plan.spans[b + 1];
          std::vector<int> rest(
              plan.order.begin() + next.first + plan.overlap,
              plan.order.begin() + next.first + next.second);
          carry = BoundLoss::Carry{theta, *g, gather(rest)};
        }
      }
    }

    DssEpochInfo info;
    info.epoch = e;
    info.mbs = std::min(mbs, p);
    info.num_batches = nb;
    info.memory = memory;
    info.deterministic = deterministic;
    ++epochs_since_global;

    if (!deterministic && epochs_since_global >= dp.global_period) {
      BoundLoss probe_loss(h.finest().cfg, full_batch, full_batch, &ledger, L,
                           e, -1);
      const double before = probe_loss.value(period_start_theta);
      const double after = probe_loss.value(theta);
      info.rho_g = global_ratio(before, after, period_reds);
      info.global_evaluated = true;
      const GcontrolDecision d = gcontrol(info.rho_g, mbs, memory, p, dp);
      info.accepted = d.accepted;
      if (!d.accepted) {
        theta = period_start_theta;  // bit-exact restore
        for (auto& m : mems) m.clear();
      }
      if (d.mbs > mbs) {
        mbs = d.mbs;
        memory = d.memory;
        for (auto& m : mems) m.set_capacity(memory);
      }
      period_start_theta = theta;
      period_reds.clear();
      epochs_since_global = 0;
    } else if (deterministic) {
      info.accepted = true;  // deterministic regime accepts unconditionally
      period_start_theta = theta;
      period_reds.clear();
      epochs_since_global = 0;
    }
    info.delta = delta;  // radius carries across batches and epochs

    res.epochs_run = e + 1;
    if (on_epoch && on_epoch(info, theta)) break;
  }

  res.theta = std::move(theta);
  res.delta = delta;
  res.final_mbs = std::min(mbs, p);
  res.final_memory = memory;
  return res;
}

}  // namespace mltr
