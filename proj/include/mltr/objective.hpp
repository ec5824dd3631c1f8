#pragma once

// Objective handles used by the smoothers and the multilevel driver.
//
// BoundLoss ties one level's network to one batch and routes every
// evaluation through the work ledger. Small exact-match memo caches absorb
// the re-evaluations the algorithms naturally produce (the gradient at an
// accepted trial point, the coarse-entry gradient used for the correction
// term, the overlap gradient at the current iterate), so recorded work
// reflects evaluations that actually ran.
//
// ShiftedObjective adds the first-order coherence term <dg, x - x0> of a
// coarse-level objective; with an empty dg it is the plain fine objective.

#include <optional>
#include <utility>

#include "mltr/network.hpp"
#include "mltr/work_ledger.hpp"

namespace mltr {

namespace detail {

// Two-slot exact-match cache (current iterate and trial point alternate).
struct VecMemo {
  std::optional<std::pair<VecX, VecX>> slot[2];
  int next = 0;

  const VecX* find(const VecX& x) const {
    for (const auto& s : slot)
      if (s && s->first.size() == x.size() && s->first == x) return &s->second;
    return nullptr;
  }
  void put(const VecX& x, VecX v) {
    slot[next] = std::make_pair(x, std::move(v));
    next = 1 - next;
  }
};

struct ValueMemo {
  std::optional<std::pair<VecX, double>> slot[2];
  int next = 0;

  const double* find(const VecX& x) const {
    for (const auto& s : slot)
      if (s && s->first.size() == x.size() && s->first == x) return &s->second;
    return nullptr;
  }
  void put(const VecX& x, double v) {
    slot[next] = std::make_pair(x, v);
    next = 1 - next;
  }
};

}  // namespace detail

class BoundLoss {
 public:
  // `overlap` may alias `batch` (deterministic regime): pair gradients then
  // share the full-gradient path. Ledger may be null (untracked probes).
  BoundLoss(const NetworkConfig& cfg, const Batch& batch, const Batch& overlap,
            WorkLedger* ledger, int level, int epoch, int batch_id)
      : cfg_(&cfg),
        batch_(&batch),
        overlap_(&overlap),
        ledger_(ledger),
        level_(level),
        epoch_(epoch),
        batch_id_(batch_id) {}

  const NetworkConfig& cfg() const { return *cfg_; }
  const Batch& batch() const { return *batch_; }
  Eigen::Index dim() const { return param_size(*cfg_); }
  int level() const { return level_; }

  double value(const VecX& x) {
    if (const double* v = value_memo_.find(x)) return *v;
    if (ledger_) ledger_->record_fn(epoch_, batch_id_, level_, batch_->size());
    const double v = loss(x, *cfg_, *batch_);
    value_memo_.put(x, v);
    return v;
  }

  VecX gradient(const VecX& x) {
    if (const VecX* g = grad_memo_.find(x)) return *g;
    EvalResult r;
    if (carry_ && carry_->theta.size() == x.size() && carry_->theta == x) {
      // Complete the full-batch data gradient from the carried overlap part;
      // only the non-overlap samples are propagated.
      r = loss_gradient(x, *cfg_, carry_->rest, /*include_reg=*/false);
      const double o = double(batch_->size() - carry_->rest.size());
      r.grad = (o * carry_->overlap_data_grad +
                double(carry_->rest.size()) * r.grad) /
               double(batch_->size());
      detail::add_reg_gradient(x, *cfg_, ParamLayout(*cfg_), r.grad);
      if (ledger_)
        ledger_->record_grad(epoch_, batch_id_, level_, carry_->rest.size());
    } else {
      r = loss_gradient(x, *cfg_, *batch_);
      if (ledger_) ledger_->record_grad(epoch_, batch_id_, level_, batch_->size());
      value_memo_.put(x, r.value.total);
    }
    grad_memo_.put(x, r.grad);
    return r.grad;
  }

  // Gradient over the overlap subset (full regularizer included): the z
  // source for overlap secant pairs.
  VecX pair_gradient(const VecX& x) {
    if (overlap_ == batch_ ||
        (overlap_->size() == batch_->size() &&
         overlap_->features.data() == batch_->features.data()))
      return gradient(x);
    if (const VecX* g = pair_memo_.find(x)) {
      VecX full = *g;
      detail::add_reg_gradient(x, *cfg_, ParamLayout(*cfg_), full);
      return full;
    }
    EvalResult r = loss_gradient(x, *cfg_, *overlap_, /*include_reg=*/false);
    if (ledger_) ledger_->record_grad(epoch_, batch_id_, level_, overlap_->size());
    pair_memo_.put(x, r.grad);  // data part only; reg re-added per call
    VecX full = r.grad;
    detail::add_reg_gradient(x, *cfg_, ParamLayout(*cfg_), full);
    return full;
  }

  VecX hvp(const VecX& x, const VecX& v) {
    if (ledger_) ledger_->record_hvp(epoch_, batch_id_, level_, batch_->size());
    return mltr::hvp(x, *cfg_, *batch_, v);
  }

  // Mean data gradient over the overlap set at theta, if it was evaluated
  // there (used to warm-start the next batch's first gradient).
  const VecX* overlap_data_gradient_at(const VecX& theta) const {
    return pair_memo_.find(theta);
  }

  struct Carry {
    VecX theta;               // iterate the carried gradient belongs to
    VecX overlap_data_grad;   // mean data gradient over the carried samples
    Batch rest;               // this batch minus the carried samples
  };
  void set_carry(Carry c) { carry_ = std::move(c); }

 private:
  const NetworkConfig* cfg_;
  const Batch* batch_;
  const Batch* overlap_;
  WorkLedger* ledger_;
  int level_, epoch_, batch_id_;
  detail::ValueMemo value_memo_;
  detail::VecMemo grad_memo_;
  detail::VecMemo pair_memo_;
  std::optional<Carry> carry_;
};

class ShiftedObjective {
 public:
  explicit ShiftedObjective(BoundLoss& base) : base_(&base) {}
  ShiftedObjective(BoundLoss& base, VecX delta_g, VecX anchor)
      : base_(&base), delta_g_(std::move(delta_g)), anchor_(std::move(anchor)) {}

  bool shifted() const { return delta_g_.size() > 0; }
  const VecX& delta_g() const { return delta_g_; }
  const VecX& anchor() const { return anchor_; }
  BoundLoss& base() { return *base_; }
  Eigen::Index dim() const { return base_->dim(); }

  double value(const VecX& x) {
    double v = base_->value(x);
    if (shifted()) v += delta_g_.dot(x - anchor_);
    return v;
  }
  VecX gradient(const VecX& x) {
    VecX g = base_->gradient(x);
    if (shifted()) g += delta_g_;
    return g;
  }
  // The linear term has no curvature and cancels in gradient differences, so
  // pair sources and Hessian products pass straight through.
  VecX pair_gradient(const VecX& x) { return base_->pair_gradient(x); }
  VecX hvp(const VecX& x, const VecX& v) { return base_->hvp(x, v); }

 private:
  BoundLoss* base_;
  VecX delta_g_;
  VecX anchor_;
};

}  // namespace mltr
