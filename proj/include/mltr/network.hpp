#pragma once

// Continuous-in-depth residual network: forward-Euler propagation through K
// residual blocks plus a linear classification/regression head, with the
// associated regularized loss, reduced gradient (backpropagation) and exact
// Hessian-vector products (tangent-linear forward-over-reverse sweep).
//
// Parameter vector layout (flat, column-major segments):
//   [ Q | W_0 b_0 | W_1 b_1 | ... | W_{K-1} b_{K-1} | W_K b_K ]
// Q is width x n_in, each block W_k is width x width with bias b_k, the head
// W_K is n_out x width with bias b_K.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mltr/rng.hpp"

namespace mltr {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

enum class Activation { Tanh, Relu };
enum class Hypothesis { Softmax, Identity };
enum class LossKind { CrossEntropy, LeastSquares };

// Probability floor applied inside log() of the cross-entropy.
inline constexpr double kProbFloor = 1e-12;

struct NetworkConfig {
  int n_in = 2;
  int n_out = 2;
  int width = 5;
  int blocks = 4;  // K residual blocks, each covering one time interval
  double T = 1.0;
  Activation activation = Activation::Tanh;
  Hypothesis hypothesis = Hypothesis::Softmax;
  LossKind loss = LossKind::CrossEntropy;
  double beta1 = 1e-4;  // weight of the temporal smoothness term
  double beta2 = 1e-4;  // weight of the head Tikhonov term

  double dt() const { return T / blocks; }

  void validate() const {
    if (n_in < 1 || n_out < 1 || width < 1 || blocks < 1)
      throw std::invalid_argument("NetworkConfig: dimensions must be >= 1");
    if (!(T > 0.0))
      throw std::invalid_argument("NetworkConfig: T must be positive");
    if (beta1 < 0.0 || beta2 < 0.0)
      throw std::invalid_argument("NetworkConfig: beta must be >= 0");
    const bool sm = hypothesis == Hypothesis::Softmax;
    const bool ce = loss == LossKind::CrossEntropy;
    if (sm != ce)
      throw std::invalid_argument(
          "NetworkConfig: softmax pairs with cross-entropy, identity with "
          "least-squares");
  }
};

// Offsets into the flat parameter vector.
struct ParamLayout {
  int n_in, n_out, width, blocks;
  Eigen::Index q_off, block_off, block_stride, head_w_off, head_b_off, total;

  explicit ParamLayout(const NetworkConfig& c)
      : n_in(c.n_in), n_out(c.n_out), width(c.width), blocks(c.blocks) {
    q_off = 0;
    block_off = Eigen::Index(width) * n_in;
    block_stride = Eigen::Index(width) * width + width;
    head_w_off = block_off + blocks * block_stride;
    head_b_off = head_w_off + Eigen::Index(n_out) * width;
    total = head_b_off + n_out;
  }

  Eigen::Index size() const { return total; }
  Eigen::Index w_off(int k) const { return block_off + k * block_stride; }
  Eigen::Index b_off(int k) const {
    return block_off + k * block_stride + Eigen::Index(width) * width;
  }
  // One block's controls (W_k, b_k) as a contiguous segment.
  Eigen::Index block_begin(int k) const { return w_off(k); }
  Eigen::Index block_size() const { return block_stride; }
};

inline Eigen::Index param_size(const NetworkConfig& c) {
  return ParamLayout(c).size();
}

// Const/mutable matrix views into a flat parameter vector.
inline Eigen::Map<const MatX> view_Q(const VecX& th, const ParamLayout& L) {
  return {th.data() + L.q_off, L.width, L.n_in};
}
inline Eigen::Map<const MatX> view_W(const VecX& th, const ParamLayout& L, int k) {
  return {th.data() + L.w_off(k), L.width, L.width};
}
inline Eigen::Map<const VecX> view_b(const VecX& th, const ParamLayout& L, int k) {
  return {th.data() + L.b_off(k), L.width};
}
inline Eigen::Map<const MatX> view_head_W(const VecX& th, const ParamLayout& L) {
  return {th.data() + L.head_w_off, L.n_out, L.width};
}
inline Eigen::Map<const VecX> view_head_b(const VecX& th, const ParamLayout& L) {
  return {th.data() + L.head_b_off, L.n_out};
}
inline Eigen::Map<MatX> edit_Q(VecX& th, const ParamLayout& L) {
  return {th.data() + L.q_off, L.width, L.n_in};
}
inline Eigen::Map<MatX> edit_W(VecX& th, const ParamLayout& L, int k) {
  return {th.data() + L.w_off(k), L.width, L.width};
}
inline Eigen::Map<VecX> edit_b(VecX& th, const ParamLayout& L, int k) {
  return {th.data() + L.b_off(k), L.width};
}
inline Eigen::Map<MatX> edit_head_W(VecX& th, const ParamLayout& L) {
  return {th.data() + L.head_w_off, L.n_out, L.width};
}
inline Eigen::Map<VecX> edit_head_b(VecX& th, const ParamLayout& L) {
  return {th.data() + L.head_b_off, L.n_out};
}

// A set of samples: one row per sample.
struct Batch {
  MatX features;  // n x n_in
  MatX targets;   // n x n_out (one-hot rows for classification)

  Eigen::Index size() const { return features.rows(); }
  bool empty() const { return features.rows() == 0; }
};

class PropagationDiverged : public std::runtime_error {
 public:
  PropagationDiverged(int block_index, const std::string& what)
      : std::runtime_error(what), block(block_index) {}
  int block;  // residual block that produced the non-finite state; K = head
};

namespace detail {

inline void apply_activation(Activation a, const MatX& pre, MatX& act) {
  if (a == Activation::Tanh)
    act = pre.array().tanh();
  else
    act = pre.array().max(0.0);
}

// sigma'(a) expressed through the stored activation value.
inline MatX activation_slope(Activation a, const MatX& act) {
  if (a == Activation::Tanh) return 1.0 - act.array().square();
  return (act.array() > 0.0).cast<double>();
}

// sigma''(a) expressed through the stored activation value (0 a.e. for relu).
inline MatX activation_curvature(Activation a, const MatX& act) {
  if (a == Activation::Tanh)
    return -2.0 * act.array() * (1.0 - act.array().square());
  return MatX::Zero(act.rows(), act.cols());
}

}  // namespace detail

struct ForwardTrace {
  std::vector<MatX> states;  // K+1 entries, n x width
  std::vector<MatX> acts;    // K entries, sigma of the block pre-activations
  MatX head;                 // n x n_out, W_K q_K + b_K
  MatX out;                  // n x n_out, hypothesis applied rowwise
};

// Propagates a batch through the network. Throws PropagationDiverged naming
// the first block whose state turns non-finite.
inline ForwardTrace forward(const VecX& theta, const NetworkConfig& cfg,
                            const MatX& features) {
  const ParamLayout L(cfg);
  if (theta.size() != L.size())
    throw std::invalid_argument("forward: parameter vector has wrong length");
  if (features.cols() != cfg.n_in)
    throw std::invalid_argument("forward: feature width mismatch");

  const double dt = cfg.dt();
  const Eigen::Index n = features.rows();
  ForwardTrace t;
  t.states.resize(cfg.blocks + 1);
  t.acts.resize(cfg.blocks);

  t.states[0].noalias() = features * view_Q(theta, L).transpose();
  if (!t.states[0].allFinite())
    throw PropagationDiverged(0, "non-finite state entering block 0");

  MatX pre;
  for (int k = 0; k < cfg.blocks; ++k) {
    pre.noalias() = t.states[k] * view_W(theta, L, k).transpose();
    pre.rowwise() += view_b(theta, L, k).transpose();
    detail::apply_activation(cfg.activation, pre, t.acts[k]);
    t.states[k + 1] = t.states[k] + dt * t.acts[k];
    if (!t.states[k + 1].allFinite())
      throw PropagationDiverged(k, "non-finite state after block " +
                                       std::to_string(k));
  }

  t.head.noalias() = t.states[cfg.blocks] * view_head_W(theta, L).transpose();
  t.head.rowwise() += view_head_b(theta, L).transpose();
  if (!t.head.allFinite())
    throw PropagationDiverged(cfg.blocks, "non-finite head output");

  if (cfg.hypothesis == Hypothesis::Softmax) {
    t.out.resize(n, cfg.n_out);
    for (Eigen::Index s = 0; s < n; ++s) {
      const double m = t.head.row(s).maxCoeff();
      Eigen::RowVectorXd e = (t.head.row(s).array() - m).exp();
      t.out.row(s) = e / e.sum();
    }
  } else {
    t.out = t.head;
  }
  return t;
}

struct LossBreakdown {
  double total = 0.0;
  double data = 0.0;    // mean per-sample loss
  double smooth = 0.0;  // beta1 temporal smoothness term
  double head = 0.0;    // beta2 head Tikhonov term

  static LossBreakdown compose(double data, double smooth, double head) {
    LossBreakdown b;
    b.data = data;
    b.smooth = smooth;
    b.head = head;
    b.total = data + smooth + head;  // decomposition is exact by construction
    return b;
  }
};

namespace detail {

inline double data_loss_from_trace(const ForwardTrace& t,
                                   const NetworkConfig& cfg,
                                   const Batch& batch) {
  if (batch.empty()) return 0.0;
  const Eigen::Index n = batch.size();
  double acc = 0.0;
  if (cfg.loss == LossKind::CrossEntropy) {
    for (Eigen::Index s = 0; s < n; ++s)
      for (int j = 0; j < cfg.n_out; ++j)
        if (batch.targets(s, j) != 0.0)
          acc -= batch.targets(s, j) *
                 std::log(std::max(t.out(s, j), kProbFloor));
  } else {
    for (Eigen::Index s = 0; s < n; ++s)
      acc += (t.out.row(s) - batch.targets.row(s)).squaredNorm();
  }
  return acc / double(n);
}

inline double smooth_reg(const VecX& theta, const NetworkConfig& cfg,
                         const ParamLayout& L) {
  if (cfg.blocks < 2 || cfg.beta1 == 0.0) return 0.0;
  double ssq = 0.0;
  const Eigen::Index bs = L.block_size();
  for (int k = 1; k < cfg.blocks; ++k)
    ssq += (theta.segment(L.block_begin(k), bs) -
            theta.segment(L.block_begin(k - 1), bs))
               .squaredNorm();
  return 0.5 * cfg.beta1 * ssq / (2.0 * cfg.dt());
}

inline double head_reg(const VecX& theta, const NetworkConfig& cfg,
                       const ParamLayout& L) {
  if (cfg.beta2 == 0.0) return 0.0;
  const double ssq = theta.segment(L.head_w_off, L.total - L.head_w_off)
                         .squaredNorm();
  return 0.5 * cfg.beta2 * 0.5 * ssq;
}

// Adds the gradient of both regularizers to g.
inline void add_reg_gradient(const VecX& theta, const NetworkConfig& cfg,
                             const ParamLayout& L, VecX& g) {
  const Eigen::Index bs = L.block_size();
  const double c1 = 0.5 * cfg.beta1 / cfg.dt();
  if (cfg.beta1 != 0.0) {
    for (int k = 1; k < cfg.blocks; ++k) {
      VecX d = c1 * (theta.segment(L.block_begin(k), bs) -
                     theta.segment(L.block_begin(k - 1), bs));
      g.segment(L.block_begin(k), bs) += d;
      g.segment(L.block_begin(k - 1), bs) -= d;
    }
  }
  if (cfg.beta2 != 0.0) {
    const Eigen::Index h0 = L.head_w_off;
    g.segment(h0, L.total - h0) +=
        0.5 * cfg.beta2 * theta.segment(h0, L.total - h0);
  }
}

// Gradient of the per-sample loss with respect to the head output, stacked as
// rows; for softmax/cross-entropy this is p - c, for least squares 2(y - c).
inline MatX head_residual(const ForwardTrace& t, const NetworkConfig& cfg,
                          const Batch& batch) {
  if (cfg.loss == LossKind::CrossEntropy) return t.out - batch.targets;
  return 2.0 * (t.out - batch.targets);
}

}  // namespace detail

inline LossBreakdown loss_breakdown(const VecX& theta,
                                    const NetworkConfig& cfg,
                                    const Batch& batch,
                                    bool include_reg = true) {
  const ParamLayout L(cfg);
  double data = 0.0;
  if (!batch.empty()) {
    ForwardTrace t = forward(theta, cfg, batch.features);
    data = detail::data_loss_from_trace(t, cfg, batch);
  }
  if (!include_reg) return LossBreakdown::compose(data, 0.0, 0.0);
  return LossBreakdown::compose(data, detail::smooth_reg(theta, cfg, L),
                                detail::head_reg(theta, cfg, L));
}

inline double loss(const VecX& theta, const NetworkConfig& cfg,
                   const Batch& batch, bool include_reg = true) {
  return loss_breakdown(theta, cfg, batch, include_reg).total;
}

struct EvalResult {
  LossBreakdown value;
  VecX grad;
};

// Loss and reduced gradient in one forward/backward sweep.
inline EvalResult loss_gradient(const VecX& theta, const NetworkConfig& cfg,
                                const Batch& batch, bool include_reg = true) {
  const ParamLayout L(cfg);
  if (theta.size() != L.size())
    throw std::invalid_argument("loss_gradient: wrong parameter length");

  EvalResult r;
  r.grad = VecX::Zero(L.size());
  double data = 0.0;

  if (!batch.empty()) {
    const double dt = cfg.dt();
    const Eigen::Index n = batch.size();
    const double inv_n = 1.0 / double(n);
    ForwardTrace t = forward(theta, cfg, batch.features);
    data = detail::data_loss_from_trace(t, cfg, batch);

    MatX G = detail::head_residual(t, cfg, batch);  // n x n_out

    edit_head_W(r.grad, L).noalias() = inv_n * (G.transpose() * t.states[cfg.blocks]);
    edit_head_b(r.grad, L) = inv_n * G.colwise().sum().transpose();

    MatX lam;  // adjoint state, n x width
    lam.noalias() = G * view_head_W(theta, L);
    MatX u;
    for (int k = cfg.blocks - 1; k >= 0; --k) {
      u = detail::activation_slope(cfg.activation, t.acts[k]).cwiseProduct(lam);
      edit_W(r.grad, L, k).noalias() = (dt * inv_n) * (u.transpose() * t.states[k]);
      edit_b(r.grad, L, k) = (dt * inv_n) * u.colwise().sum().transpose();
      lam.noalias() += dt * (u * view_W(theta, L, k));
    }
    edit_Q(r.grad, L).noalias() = inv_n * (lam.transpose() * batch.features);
  }

  if (include_reg) {
    detail::add_reg_gradient(theta, cfg, L, r.grad);
    r.value = LossBreakdown::compose(data, detail::smooth_reg(theta, cfg, L),
                                     detail::head_reg(theta, cfg, L));
  } else {
    r.value = LossBreakdown::compose(data, 0.0, 0.0);
  }
  return r;
}

// Exact Hessian-vector product of the full loss (tangent-linear propagation
// of the forward and adjoint sweeps along v).
inline VecX hvp(const VecX& theta, const NetworkConfig& cfg,
                const Batch& batch, const VecX& v, bool include_reg = true) {
  const ParamLayout L(cfg);
  if (theta.size() != L.size() || v.size() != L.size())
    throw std::invalid_argument("hvp: wrong vector length");

  VecX out = VecX::Zero(L.size());

  if (!batch.empty()) {
    const double dt = cfg.dt();
    const Eigen::Index n = batch.size();
    const double inv_n = 1.0 / double(n);
    ForwardTrace t = forward(theta, cfg, batch.features);

    // Tangent forward sweep.
    std::vector<MatX> dstates(cfg.blocks + 1);
    std::vector<MatX> dpre(cfg.blocks);
    dstates[0].noalias() = batch.features * view_Q(v, L).transpose();
    std::vector<MatX> slope(cfg.blocks);
    for (int k = 0; k < cfg.blocks; ++k) {
      slope[k] = detail::activation_slope(cfg.activation, t.acts[k]);
      dpre[k].noalias() = t.states[k] * view_W(v, L, k).transpose();
      dpre[k].rowwise() += view_b(v, L, k).transpose();
      dpre[k].noalias() += dstates[k] * view_W(theta, L, k).transpose();
      dstates[k + 1] = dstates[k] + dt * slope[k].cwiseProduct(dpre[k]);
    }
    MatX dhead;
    dhead.noalias() = t.states[cfg.blocks] * view_head_W(v, L).transpose();
    dhead.rowwise() += view_head_b(v, L).transpose();
    dhead.noalias() += dstates[cfg.blocks] * view_head_W(theta, L).transpose();

    // Directional derivative of the head residual.
    MatX G = detail::head_residual(t, cfg, batch);
    MatX dG(G.rows(), G.cols());
    if (cfg.loss == LossKind::CrossEntropy) {
      for (Eigen::Index s = 0; s < n; ++s) {
        const auto p = t.out.row(s);
        const double pd = p.dot(dhead.row(s));
        dG.row(s) = p.cwiseProduct(dhead.row(s)) - pd * p;
      }
    } else {
      dG = 2.0 * dhead;
    }

    edit_head_W(out, L).noalias() =
        inv_n * (dG.transpose() * t.states[cfg.blocks] +
                 G.transpose() * dstates[cfg.blocks]);
    edit_head_b(out, L) = inv_n * dG.colwise().sum().transpose();

    // Tangent adjoint sweep.
    MatX lam, dlam;
    lam.noalias() = G * view_head_W(theta, L);
    dlam.noalias() = dG * view_head_W(theta, L) + G * view_head_W(v, L);
    MatX u, du;
    for (int k = cfg.blocks - 1; k >= 0; --k) {
      const MatX curv = detail::activation_curvature(cfg.activation, t.acts[k]);
      u = slope[k].cwiseProduct(lam);
      du = curv.cwiseProduct(dpre[k]).cwiseProduct(lam) +
           slope[k].cwiseProduct(dlam);
      edit_W(out, L, k).noalias() =
          (dt * inv_n) * (du.transpose() * t.states[k] + u.transpose() * dstates[k]);
      edit_b(out, L, k) = (dt * inv_n) * du.colwise().sum().transpose();
      dlam.noalias() += dt * (du * view_W(theta, L, k) + u * view_W(v, L, k));
      lam.noalias() += dt * (u * view_W(theta, L, k));
    }
    edit_Q(out, L).noalias() = inv_n * (dlam.transpose() * batch.features);
  }

  if (include_reg) {
    // Both regularizers are quadratic; their Hessian action is the same
    // linear map that produces their gradient.
    detail::add_reg_gradient(v, cfg, L, out);
  }
  return out;
}

// Seeded initialization: Q and all weight matrices N(0, 1/sqrt(width))
// entrywise in storage order, biases zero.
inline VecX init_params(const NetworkConfig& cfg, Rng& rng) {
  const ParamLayout L(cfg);
  VecX th = VecX::Zero(L.size());
  const double sd = 1.0 / std::sqrt(double(cfg.width));
  auto fill = [&](Eigen::Index off, Eigen::Index len) {
    for (Eigen::Index i = 0; i < len; ++i) th[off + i] = sd * rng.normal();
  };
  fill(L.q_off, Eigen::Index(L.width) * L.n_in);
  for (int k = 0; k < cfg.blocks; ++k)
    fill(L.w_off(k), Eigen::Index(L.width) * L.width);
  fill(L.head_w_off, Eigen::Index(L.n_out) * L.width);
  return th;
}

// Fraction of samples whose argmax prediction matches the argmax target.
inline double accuracy(const VecX& theta, const NetworkConfig& cfg,
                       const MatX& features, const MatX& targets) {
  if (features.rows() == 0) return 0.0;
  ForwardTrace t = forward(theta, cfg, features);
  Eigen::Index hits = 0;
  for (Eigen::Index s = 0; s < features.rows(); ++s) {
    Eigen::Index pi, ti;
    t.out.row(s).maxCoeff(&pi);
    targets.row(s).maxCoeff(&ti);
    hits += (pi == ti);
  }
  return double(hits) / double(features.rows());
}

}  // namespace mltr
