#pragma once

// Discretization hierarchy for the continuous-in-depth network and the
// parameter transfer operators between adjacent levels. Level 1 is the
// coarsest. Refinement halves the time step; block counts either double
// (interval rule, the default) or follow 2K-1 (node rule). Input and head
// dimensions never change across levels, so prolongation duplicates block
// controls in time and copies Q and the head verbatim.

#include <stdexcept>
#include <vector>

#include "mltr/network.hpp"

namespace mltr {

enum class Refinement { IntervalDoubling, NodeDoubling };

struct LevelSpec {
  int level = 1;  // 1-based, 1 = coarsest
  int blocks = 1;
  double dt = 1.0;
  NetworkConfig cfg;
};

struct Hierarchy {
  std::vector<LevelSpec> levels;  // coarse to fine
  Refinement rule = Refinement::IntervalDoubling;

  int num_levels() const { return int(levels.size()); }
  const LevelSpec& coarsest() const { return levels.front(); }
  const LevelSpec& finest() const { return levels.back(); }
  // 1-based accessor matching LevelSpec::level.
  const LevelSpec& at(int level) const { return levels.at(level - 1); }
};

// Builds L levels from the coarsest configuration. The time step halves at
// each refinement; the level horizon is blocks*dt, which preserves cfg.T
// exactly under the interval rule.
inline Hierarchy build_hierarchy(const NetworkConfig& coarsest, int num_levels,
                                 Refinement rule = Refinement::IntervalDoubling) {
  coarsest.validate();
  if (num_levels < 1)
    throw std::invalid_argument("build_hierarchy: need at least one level");
  Hierarchy h;
  h.rule = rule;
  int K = coarsest.blocks;
  double dt = coarsest.dt();
  for (int l = 1; l <= num_levels; ++l) {
    if (l > 1) {
      K = (rule == Refinement::IntervalDoubling) ? 2 * K : 2 * K - 1;
      dt *= 0.5;
    }
    LevelSpec s;
    s.level = l;
    s.blocks = K;
    s.dt = dt;
    s.cfg = coarsest;
    s.cfg.blocks = K;
    s.cfg.T = K * dt;
    h.levels.push_back(s);
  }
  return h;
}

namespace detail {

inline void check_adjacent(const LevelSpec& coarse, const LevelSpec& fine,
                           Refinement rule) {
  const int expect = (rule == Refinement::IntervalDoubling)
                         ? 2 * coarse.blocks
                         : 2 * coarse.blocks - 1;
  if (fine.blocks != expect || fine.level != coarse.level + 1)
    throw std::invalid_argument("transfer: levels are not adjacent");
}

// Number of fine blocks that have an odd-indexed sibling. Under the node
// rule the last coarse block maps to a single fine block.
inline int paired_blocks(const LevelSpec& coarse, Refinement rule) {
  return (rule == Refinement::IntervalDoubling) ? coarse.blocks
                                                : coarse.blocks - 1;
}

}  // namespace detail

// Coarse-to-fine parameter transfer: each coarse block control is copied to
// its two fine children (the unpaired last child is dropped under the node
// rule); Q and the head are copied bit-identically.
inline VecX prolong(const VecX& coarse_params, const LevelSpec& from,
                    const LevelSpec& to, Refinement rule) {
  detail::check_adjacent(from, to, rule);
  const ParamLayout Lc(from.cfg), Lf(to.cfg);
  if (coarse_params.size() != Lc.size())
    throw std::invalid_argument("prolong: wrong parameter length");
  VecX fine = VecX::Zero(Lf.size());
  fine.segment(Lf.q_off, Lf.block_off) =
      coarse_params.segment(Lc.q_off, Lc.block_off);
  const Eigen::Index bs = Lc.block_size();
  const int paired = detail::paired_blocks(from, rule);
  for (int k = 0; k < from.blocks; ++k) {
    const auto src = coarse_params.segment(Lc.block_begin(k), bs);
    fine.segment(Lf.block_begin(2 * k), bs) = src;
    if (k < paired) fine.segment(Lf.block_begin(2 * k + 1), bs) = src;
  }
  fine.segment(Lf.head_w_off, Lf.total - Lf.head_w_off) =
      coarse_params.segment(Lc.head_w_off, Lc.total - Lc.head_w_off);
  return fine;
}

// Fine-to-coarse gradient transfer: the exact transpose of prolong (children
// pair-sum onto their parent; Q and head copied).
inline VecX restrict_gradient(const VecX& fine_grad, const LevelSpec& from,
                              const LevelSpec& to, Refinement rule) {
  detail::check_adjacent(to, from, rule);
  const ParamLayout Lf(from.cfg), Lc(to.cfg);
  if (fine_grad.size() != Lf.size())
    throw std::invalid_argument("restrict_gradient: wrong parameter length");
  VecX coarse = VecX::Zero(Lc.size());
  coarse.segment(Lc.q_off, Lc.block_off) =
      fine_grad.segment(Lf.q_off, Lf.block_off);
  const Eigen::Index bs = Lc.block_size();
  const int paired = detail::paired_blocks(to, rule);
  for (int k = 0; k < to.blocks; ++k) {
    auto dst = coarse.segment(Lc.block_begin(k), bs);
    dst = fine_grad.segment(Lf.block_begin(2 * k), bs);
    if (k < paired) dst += fine_grad.segment(Lf.block_begin(2 * k + 1), bs);
  }
  coarse.segment(Lc.head_w_off, Lc.total - Lc.head_w_off) =
      fine_grad.segment(Lf.head_w_off, Lf.total - Lf.head_w_off);
  return coarse;
}

// Fine-to-coarse parameter transfer: children pairs average onto their
// parent, so restrict_params(prolong(x)) == x exactly.
inline VecX restrict_params(const VecX& fine_params, const LevelSpec& from,
                            const LevelSpec& to, Refinement rule) {
  detail::check_adjacent(to, from, rule);
  const ParamLayout Lf(from.cfg), Lc(to.cfg);
  if (fine_params.size() != Lf.size())
    throw std::invalid_argument("restrict_params: wrong parameter length");
  VecX coarse = VecX::Zero(Lc.size());
  coarse.segment(Lc.q_off, Lc.block_off) =
      fine_params.segment(Lf.q_off, Lf.block_off);
  const Eigen::Index bs = Lc.block_size();
  const int paired = detail::paired_blocks(to, rule);
  for (int k = 0; k < to.blocks; ++k) {
    auto dst = coarse.segment(Lc.block_begin(k), bs);
    if (k < paired)
      dst = 0.5 * (fine_params.segment(Lf.block_begin(2 * k), bs) +
                   fine_params.segment(Lf.block_begin(2 * k + 1), bs));
    else
      dst = fine_params.segment(Lf.block_begin(2 * k), bs);
  }
  coarse.segment(Lc.head_w_off, Lc.total - Lc.head_w_off) =
      fine_params.segment(Lf.head_w_off, Lf.total - Lf.head_w_off);
  return coarse;
}

}  // namespace mltr
