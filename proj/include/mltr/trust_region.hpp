#pragma once

// Trust-region smoother with a limited-memory SR1 Hessian in compact form.
//
// The model Hessian is B = gamma*I + Psi Mhat^+ Psi^T with Psi = Z - gamma*S
// and Mhat = tril(S^T Z) + tril(S^T Z, -1)^T - gamma*S^T S, built from at
// most M secant pairs (s_i, z_i). The trust-region subproblem
//   min  g^T s + 0.5 s^T B s   s.t.  ||s|| <= delta
// is solved exactly through the eigenstructure of the low-rank part
// (orthonormal-basis approach): B = gamma*I + P diag(lam) P^T with P^T P = I,
// which reduces the KKT conditions to a one-dimensional secular equation in
// the multiplier sigma, plus an explicit hard-case branch.

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>
#include <utility>

#include "mltr/network.hpp"
#include "mltr/rng.hpp"

namespace mltr {

struct TrustRegionParams {
  double eta1 = 0.1;       // acceptance threshold
  double eta2 = 0.75;      // expansion threshold
  double gamma1 = 0.5;     // shrink factor
  double gamma2 = 2.0;     // growth factor
  double delta0 = 1.0;     // initial radius
  double delta_max = 100;  // radius cap
};

inline constexpr double kSr1SkipTol = 1e-8;
inline constexpr double kGammaMin = 1e-6;
inline constexpr double kGammaMax = 1e6;
inline constexpr double kRatioGuard = 1e-15;

class SecantMemory {
 public:
  // Eigenstructure of the low-rank part: B = gamma*I + P diag(lam) P^T.
  struct Spectrum {
    MatX P;       // n x r, orthonormal columns (r = 0 when memory is empty)
    VecX lam;     // r eigenvalues of the low-rank correction
    double gamma = 1.0;
  };

  explicit SecantMemory(int capacity = 1) { set_capacity(capacity); }

  int capacity() const { return capacity_; }
  void set_capacity(int m) {
    if (m < 1) throw std::invalid_argument("SecantMemory: capacity >= 1");
    capacity_ = m;
    while (int(pairs_.size()) > capacity_) pairs_.pop_front();
    dirty_ = true;
  }

  int size() const { return int(pairs_.size()); }
  void clear() {
    pairs_.clear();
    dirty_ = true;
  }

  double gamma() const { return gamma_; }
  void set_gamma(double g) {
    if (!(g > 0.0)) throw std::invalid_argument("SecantMemory: gamma > 0");
    if (g != gamma_) {
      gamma_ = g;
      dirty_ = true;
    }
  }

  const std::deque<std::pair<VecX, VecX>>& pairs() const { return pairs_; }

  // SR1 safeguard: the pair is stored only if |s^T(z - Bs)| >= tol*|s||z - Bs|
  // with B built from the current memory; a pair with z == Bs is already
  // interpolated and is skipped without changing the memory. Returns whether
  // the pair was stored. The oldest pair is evicted when over capacity.
  bool update(const VecX& s, const VecX& z, double tol = kSr1SkipTol) {
    const double sn = s.norm();
    if (!(sn > 0.0) || !s.allFinite() || !z.allFinite()) return false;
    VecX r = z - apply(s);
    const double rn = r.norm();
    if (!(rn > 0.0) || std::abs(s.dot(r)) < tol * sn * rn) return false;
    pairs_.emplace_back(s, z);
    if (int(pairs_.size()) > capacity_) pairs_.pop_front();
    dirty_ = true;
    return true;
  }

  // B v through the eigenstructure, so the operator the subproblem solver
  // sees and the operator used for model values are identical.
  VecX apply(const VecX& v) const {
    const Spectrum& sp = spectrum();
    if (sp.P.cols() == 0) return gamma_ * v;
    VecX a = sp.P.transpose() * v;
    return gamma_ * v + sp.P * sp.lam.cwiseProduct(a);
  }

  const Spectrum& spectrum() const {
    if (dirty_) rebuild();
    return spectrum_;
  }

 private:
  void rebuild() const {
    dirty_ = false;
    spectrum_.gamma = gamma_;
    const int m = int(pairs_.size());
    if (m == 0) {
      spectrum_.P.resize(0, 0);
      spectrum_.lam.resize(0);
      return;
    }
    const Eigen::Index n = pairs_.front().first.size();
    MatX S(n, m), Z(n, m);
    for (int i = 0; i < m; ++i) {
      S.col(i) = pairs_[i].first;
      Z.col(i) = pairs_[i].second;
    }
    MatX Psi = Z - gamma_ * S;
    MatX StZ = S.transpose() * Z;
    MatX Mhat = StZ.triangularView<Eigen::Lower>();
    Mhat += MatX(StZ.triangularView<Eigen::StrictlyLower>()).transpose();
    Mhat -= gamma_ * (S.transpose() * S);

    // Orthonormal basis of range(Psi) from the small Gram eigenproblem.
    Eigen::SelfAdjointEigenSolver<MatX> gram(Psi.transpose() * Psi);
    const VecX& sig = gram.eigenvalues();
    const double sig_tol = std::max(sig.maxCoeff(), 0.0) * 1e-14;
    int r = 0;
    for (int i = 0; i < m; ++i)
      if (sig[i] > sig_tol) ++r;
    if (r == 0) {
      spectrum_.P.resize(n, 0);
      spectrum_.lam.resize(0);
      return;
    }
    MatX Vr(m, r);
    VecX sqrt_sig(r);
    for (int i = m - r, j = 0; i < m; ++i, ++j) {  // eigenvalues ascend
      Vr.col(j) = gram.eigenvectors().col(i);
      sqrt_sig[j] = std::sqrt(sig[i]);
    }
    MatX U = Psi * Vr;
    for (int j = 0; j < r; ++j) U.col(j) /= sqrt_sig[j];

    // Pseudo-inverse of Mhat restricted through the retained basis.
    Eigen::SelfAdjointEigenSolver<MatX> msolve(Mhat);
    const VecX& mu = msolve.eigenvalues();
    const double mu_tol = mu.cwiseAbs().maxCoeff() * 1e-12;
    MatX Minv = MatX::Zero(m, m);
    for (int i = 0; i < m; ++i)
      if (std::abs(mu[i]) > mu_tol)
        Minv += msolve.eigenvectors().col(i) *
                msolve.eigenvectors().col(i).transpose() / mu[i];

    MatX C = sqrt_sig.asDiagonal() * (Vr.transpose() * Minv * Vr) *
             sqrt_sig.asDiagonal();
    Eigen::SelfAdjointEigenSolver<MatX> ces(C);
    spectrum_.P.noalias() = U * ces.eigenvectors();
    spectrum_.lam = ces.eigenvalues();
  }

  int capacity_ = 1;
  std::deque<std::pair<VecX, VecX>> pairs_;
  double gamma_ = 1.0;
  mutable bool dirty_ = true;
  mutable Spectrum spectrum_;
};

// Scale for B0 = gamma*I from the generalized eigenvalue problem on the pair
// Gram matrices: the smallest eigenvalue lam_min of
//   0.5(S^T Z + Z^T S) v = lam S^T S v
// estimates the smallest curvature carried by the pairs; gamma = 0.9*lam_min
// stays strictly below it, which keeps the compact update well conditioned.
// Degenerate cases (empty memory, singular S^T S, lam_min <= 0) fall back to
// max(z^T z / s^T z, gamma_min) on the latest pair, or 1.
inline double init_gamma(const SecantMemory& mem, double gamma_min = kGammaMin,
                         double gamma_max = kGammaMax) {
  const auto clamp = [&](double g) {
    return std::min(gamma_max, std::max(gamma_min, g));
  };
  const int m = mem.size();
  if (m == 0) return 1.0;

  const Eigen::Index n = mem.pairs().front().first.size();
  MatX S(n, m), Z(n, m);
  for (int i = 0; i < m; ++i) {
    S.col(i) = mem.pairs()[i].first;
    Z.col(i) = mem.pairs()[i].second;
  }
  MatX G = S.transpose() * S;
  MatX StZ = S.transpose() * Z;
  MatX A = 0.5 * (StZ + StZ.transpose());

  Eigen::SelfAdjointEigenSolver<MatX> gchk(G);
  const double gmax = gchk.eigenvalues().maxCoeff();
  bool ok = gmax > 0.0 && gchk.eigenvalues().minCoeff() > 1e-14 * gmax;
  double lam_min = 0.0;
  if (ok) {
    Eigen::GeneralizedSelfAdjointEigenSolver<MatX> ges(A, G);
    ok = ges.info() == Eigen::Success;
    if (ok) lam_min = ges.eigenvalues().minCoeff();
  }
  if (ok && lam_min > 0.0 && std::isfinite(lam_min)) return clamp(0.9 * lam_min);

  const auto& [s, z] = mem.pairs().back();
  const double sz = s.dot(z);
  if (sz > 0.0) return clamp(std::max(z.dot(z) / sz, gamma_min));
  return 1.0;
}

// Classical Cauchy point for the model with Hessian action b_apply: the
// minimizer of the model along -g inside the ball of radius delta.
template <class BApply>
VecX cauchy_point(const VecX& g, BApply&& b_apply, double delta) {
  const double gn = g.norm();
  if (!(gn > 0.0) || !(delta > 0.0)) return VecX::Zero(g.size());
  const double gBg = g.dot(b_apply(g));
  double t = delta / gn;
  if (gBg > 0.0) t = std::min(t, gn * gn / gBg);
  return -t * g;
}

struct ObsSolution {
  VecX s;
  double sigma = 0.0;
  bool hard_case = false;
};

// Exact solution of  min g^T s + 0.5 s^T B s,  ||s|| <= delta  for the
// compact L-SR1 model in `mem`.
inline ObsSolution obs_solve(const VecX& g, const SecantMemory& mem,
                             double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("obs_solve: delta > 0");
  const auto& sp = mem.spectrum();
  const double gamma = sp.gamma;
  const int r = int(sp.P.cols());
  const Eigen::Index n = g.size();

  VecX a = r > 0 ? VecX(sp.P.transpose() * g) : VecX();
  VecX g_perp = g;
  if (r > 0) g_perp -= sp.P * a;
  const double perp2 = g_perp.squaredNorm();
  const bool has_perp_space = r < n;

  VecX lam(r);  // eigenvalues of B along P
  for (int i = 0; i < r; ++i) lam[i] = gamma + sp.lam[i];
  double lam_min = has_perp_space ? gamma
                                  : std::numeric_limits<double>::infinity();
  for (int i = 0; i < r; ++i) lam_min = std::min(lam_min, lam[i]);

  const auto step_norm2 = [&](double sigma) {
    double acc = 0.0;
    for (int i = 0; i < r; ++i) {
      const double d = lam[i] + sigma;
      acc += a[i] * a[i] / (d * d);
    }
    if (has_perp_space) {
      const double d = gamma + sigma;
      acc += perp2 / (d * d);
    }
    return acc;
  };
  const auto assemble = [&](double sigma) {
    VecX s = VecX::Zero(n);
    for (int i = 0; i < r; ++i) {
      const double d = lam[i] + sigma;
      if (d > 0.0 && a[i] != 0.0) s -= (a[i] / d) * sp.P.col(i);
    }
    if (has_perp_space && gamma + sigma > 0.0) s -= g_perp / (gamma + sigma);
    return s;
  };

  ObsSolution out;

  // Interior solution when B is positive definite.
  if (lam_min > 0.0 && std::sqrt(step_norm2(0.0)) <= delta) {
    out.s = assemble(0.0);
    out.sigma = 0.0;
    return out;
  }

  // Gradient mass on the minimal eigenspace decides whether the secular
  // equation has a root at the pole.
  const double eig_tol = 1e-12 * std::max(1.0, std::abs(lam_min));
  double min_mass = 0.0;
  for (int i = 0; i < r; ++i)
    if (lam[i] - lam_min <= eig_tol) min_mass += a[i] * a[i];
  if (has_perp_space && gamma - lam_min <= eig_tol) min_mass += perp2;

  const double lo = std::max(0.0, -lam_min);
  const double mass_tol = 1e-28 * std::max(1.0, g.squaredNorm());

  if (min_mass <= mass_tol) {
    // Evaluate the limit norm at the pole with the minimal eigenspace
    // excluded; if it is short of the boundary this is the hard case.
    double acc = 0.0;
    for (int i = 0; i < r; ++i) {
      const double d = lam[i] + lo;
      if (d > eig_tol) acc += a[i] * a[i] / (d * d);
    }
    if (has_perp_space && gamma + lo > eig_tol)
      acc += perp2 / ((gamma + lo) * (gamma + lo));
    if (std::sqrt(acc) < delta) {
      // Hard case: sigma = -lam_min; extend the pseudo-inverse step along a
      // minimal eigenvector to the boundary.
      VecX sp_step = VecX::Zero(n);
      for (int i = 0; i < r; ++i) {
        const double d = lam[i] + lo;
        if (d > eig_tol && a[i] != 0.0) sp_step -= (a[i] / d) * sp.P.col(i);
      }
      if (has_perp_space && gamma + lo > eig_tol)
        sp_step -= g_perp / (gamma + lo);

      VecX u;
      int min_idx = -1;
      for (int i = 0; i < r; ++i)
        if (lam[i] - lam_min <= eig_tol) {
          min_idx = i;
          break;
        }
      if (min_idx >= 0) {
        u = sp.P.col(min_idx);
      } else {
        // Minimal eigenvalue lives in the complement of range(P): build a
        // unit vector orthogonal to all P columns.
        Eigen::Index pick = 0;
        if (r > 0) {
          double best = std::numeric_limits<double>::infinity();
          for (Eigen::Index i = 0; i < n; ++i) {
            const double rn = sp.P.row(i).squaredNorm();
            if (rn < best) {
              best = rn;
              pick = i;
            }
          }
        }
        u = VecX::Zero(n);
        u[pick] = 1.0;
        if (r > 0) u -= sp.P * (sp.P.row(pick).transpose());
        u.normalize();
      }
      const double base2 = sp_step.squaredNorm();
      const double tau = std::sqrt(std::max(0.0, delta * delta - base2));
      out.s = sp_step + tau * u;
      out.sigma = lo;
      out.hard_case = true;
      return out;
    }
  }

  // Secular equation: phi(sigma) = 1/||s(sigma)|| - 1/delta, increasing on
  // (lo, inf). Bracket then safeguarded Newton.
  const auto phi = [&](double sigma) {
    return 1.0 / std::sqrt(step_norm2(sigma)) - 1.0 / delta;
  };
  const auto dphi = [&](double sigma) {
    double n2 = 0.0, d3 = 0.0;
    for (int i = 0; i < r; ++i) {
      const double d = lam[i] + sigma;
      n2 += a[i] * a[i] / (d * d);
      d3 += a[i] * a[i] / (d * d * d);
    }
    if (has_perp_space) {
      const double d = gamma + sigma;
      n2 += perp2 / (d * d);
      d3 += perp2 / (d * d * d);
    }
    return d3 / std::pow(n2, 1.5);
  };

  double lo_b = lo;
  double hi = lo + std::max(1.0, std::abs(lam_min));
  while (phi(hi) < 0.0) {
    lo_b = hi;
    hi = lo + 2.0 * (hi - lo);
    if (!std::isfinite(hi)) throw std::runtime_error("obs_solve: no bracket");
  }
  double sigma = 0.5 * (lo_b + hi);
  if (phi(lo_b) > 0.0) sigma = lo_b;  // root sits at the bracket edge
  for (int it = 0; it < 200; ++it) {
    const double f = phi(sigma);
    if (f > 0.0)
      hi = sigma;
    else
      lo_b = sigma;
    const double step = f / std::max(dphi(sigma), 1e-300);
    double next = sigma - step;
    if (!(next > lo_b) || !(next < hi)) next = 0.5 * (lo_b + hi);
    if (std::abs(next - sigma) <= 1e-15 * std::max(1.0, sigma)) {
      sigma = next;
      break;
    }
    sigma = next;
  }
  out.s = assemble(sigma);
  // Exact boundary placement guards the KKT complementarity residual.
  const double sn = out.s.norm();
  if (sn > 0.0) out.s *= delta / sn;
  out.sigma = sigma;
  return out;
}

struct ControlDecision {
  bool accepted = false;
  double delta = 0.0;
};

// Radius and acceptance update from the measured/model reduction ratio.
// rho = NaN or -inf behaves as a rejection with shrinkage.
inline ControlDecision conv_control(double rho, double delta,
                                    const TrustRegionParams& p) {
  ControlDecision d;
  d.accepted = rho > p.eta1;  // NaN compares false
  if (std::isnan(rho) || rho < p.eta1)
    d.delta = p.gamma1 * delta;
  else if (rho > p.eta2)
    d.delta = std::min(p.gamma2 * delta, p.delta_max);
  else
    d.delta = delta;
  return d;
}

enum class SubproblemMode { CauchyPoint, Lsr1 };
enum class SecantSourceKind { FullBatch, Overlap, Sampled };

struct TrConfig {
  TrustRegionParams trp;
  SubproblemMode mode = SubproblemMode::Lsr1;
  SecantSourceKind source = SecantSourceKind::Overlap;
};

struct TrOutcome {
  double reduction = 0.0;  // value at entry minus value at exit, >= 0
  double value_in = std::numeric_limits<double>::quiet_NaN();
  double value_out = std::numeric_limits<double>::quiet_NaN();
  int attempted = 0;
  int accepted = 0;
  int grad_calls = 0;
};

// Runs `iterations` trust-region steps on objective f, updating theta, delta
// and the secant memory in place. The objective must provide value(x) and
// gradient(x); pair_gradient(x) backs the Overlap secant source and hvp(x, v)
// the Sampled source. Stops early only when the subproblem returns a zero
// step (stationary model).
template <class Obj>
TrOutcome tr_iterate(Obj& f, VecX& theta, double& delta, SecantMemory& mem,
                     int iterations, const TrConfig& cfg, Rng* rng = nullptr) {
  TrOutcome out;
  if (iterations <= 0) return out;

  double H = f.value(theta);
  out.value_in = H;
  out.value_out = H;

  for (int it = 0; it < iterations; ++it) {
    VecX g = f.gradient(theta);
    ++out.grad_calls;

    if (cfg.mode == SubproblemMode::Lsr1 &&
        cfg.source == SecantSourceKind::Sampled) {
      if (rng == nullptr)
        throw std::invalid_argument("tr_iterate: sampled pairs need an rng");
      mem.clear();
      for (int i = 0; i < mem.capacity(); ++i) {
        VecX si(theta.size());
        for (Eigen::Index k = 0; k < si.size(); ++k) si[k] = rng->uniform();
        mem.update(si, f.hvp(theta, si));
      }
    }

    VecX s;
    double mdec;
    if (cfg.mode == SubproblemMode::CauchyPoint) {
      s = cauchy_point(g, [](const VecX& v) { return v; }, delta);
      mdec = -(g.dot(s) + 0.5 * s.squaredNorm());
    } else {
      mem.set_gamma(init_gamma(mem));
      s = obs_solve(g, mem, delta).s;
      mdec = -(g.dot(s) + 0.5 * s.dot(mem.apply(s)));
    }

    if (!(s.norm() > 0.0)) break;  // stationary model, nothing to attempt
    ++out.attempted;

    double rho;
    double H_trial = std::numeric_limits<double>::quiet_NaN();
    bool trial_ok = true;
    if (mdec <= kRatioGuard * (1.0 + std::abs(H))) {
      rho = -std::numeric_limits<double>::infinity();
      trial_ok = false;  // degenerate model decrease, do not even evaluate
    } else {
      try {
        H_trial = f.value(theta + s);
        rho = std::isfinite(H_trial)
                  ? (H - H_trial) / mdec
                  : -std::numeric_limits<double>::infinity();
      } catch (const PropagationDiverged&) {
        rho = -std::numeric_limits<double>::infinity();
        trial_ok = false;
      }
    }

    // Secant information from the attempted step is kept whether or not the
    // step is accepted.
    if (cfg.mode == SubproblemMode::Lsr1 && trial_ok) {
      if (cfg.source == SecantSourceKind::FullBatch) {
        VecX g_trial = f.gradient(theta + s);
        ++out.grad_calls;
        mem.update(s, g_trial - g);
      } else if (cfg.source == SecantSourceKind::Overlap) {
        VecX zp = f.pair_gradient(theta + s) - f.pair_gradient(theta);
        mem.update(s, zp);
      }
    }

    const ControlDecision d = conv_control(rho, delta, cfg.trp);
    delta = d.delta;
    if (d.accepted) {
      theta += s;
      H = H_trial;
      ++out.accepted;
    }
  }
  out.value_out = H;
  out.reduction = out.value_in - out.value_out;
  return out;
}

}  // namespace mltr
