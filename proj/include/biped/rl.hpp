#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "biped/error.hpp"
#include "biped/sim.hpp"

namespace biped {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// ---------------------------------------------------------------- reward

/// Forward progress along the heading, floored at zero, plus an alive bonus.
inline double reward(const Vec2& p_t, const Vec2& p_prev, const Vec2& o, double k = 0.01) {
  return std::max((p_t - p_prev).dot(o), 0.0) + k;
}

// ---------------------------------------------------------------- GAE

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// dones[t] marks that the episode ended after step t. `last_value` bootstraps
/// the step after the final one when it is not terminal.
inline GaeResult gae(const std::vector<double>& rewards, const std::vector<double>& values,
                     const std::vector<bool>& dones, double last_value, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw Error("invalid-params", "gae: length mismatch");
  GaeResult r;
  r.advantages.assign(n, 0.0);
  r.returns.assign(n, 0.0);
  double acc = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double next_v = i + 1 < n ? values[i + 1] : last_value;
    const double delta = rewards[i] + gamma * next_v * live - values[i];
    acc = delta + gamma * lambda * live * acc;
    r.advantages[i] = acc;
    r.returns[i] = acc + values[i];
  }
  return r;
}

inline void normalize_in_place(std::vector<double>& a) {
  if (a.empty()) return;
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  double var = 0.0;
  for (double v : a) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(a.size()));
  for (double& v : a) v = (v - mean) / (sd + 1e-8);
}

// ---------------------------------------------------------------- surrogate

inline double clipped_objective(double ratio, double adv, double eps) {
  return std::min(ratio * adv, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv);
}

/// Mean clipped surrogate (to be maximized).
inline double clipped_loss(const std::vector<double>& ratio, const std::vector<double>& adv, double eps) {
  if (ratio.size() != adv.size() || ratio.empty()) throw Error("invalid-params", "clipped_loss: bad sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < ratio.size(); ++i) s += clipped_objective(ratio[i], adv[i], eps);
  return s / static_cast<double>(ratio.size());
}

// ---------------------------------------------------------------- MLP

/// Two tanh hidden layers and a linear output, parameters in a flat vector:
/// W1 (h x in), b1, W2 (h x h), b2, W3 (out x h), b3. Column-major.
struct MlpShape {
  int in = 0;
  int hidden = 64;
  int out = 0;

  int size() const { return hidden * in + hidden + hidden * hidden + hidden + out * hidden + out; }

  struct Cache {
    VecX x, h1, h2;
  };

  VecX forward(const double* p, const VecX& x, Cache* c = nullptr) const {
    using CMap = Eigen::Map<const MatX>;
    using VMap = Eigen::Map<const VecX>;
    CMap W1(p, hidden, in);
    p += hidden * in;
    VMap b1(p, hidden);
    p += hidden;
    CMap W2(p, hidden, hidden);
    p += hidden * hidden;
    VMap b2(p, hidden);
    p += hidden;
    CMap W3(p, out, hidden);
    p += out * hidden;
    VMap b3(p, out);
    VecX h1 = (W1 * x + b1).array().tanh().matrix();
    VecX h2 = (W2 * h1 + b2).array().tanh().matrix();
    VecX y = W3 * h2 + b3;
    if (c) {
      c->x = x;
      c->h1 = std::move(h1);
      c->h2 = std::move(h2);
    }
    return y;
  }

  /// Accumulates dL/dparams into g given dL/dy.
  void backward(const double* p, const Cache& c, const VecX& dy, double* g) const {
    using CMap = Eigen::Map<const MatX>;
    using Map = Eigen::Map<MatX>;
    using VMap = Eigen::Map<VecX>;
    const double* pW2 = p + hidden * in + hidden;
    const double* pW3 = pW2 + hidden * hidden + hidden;
    CMap W2(pW2, hidden, hidden);
    CMap W3(pW3, out, hidden);

    double* gW1 = g;
    double* gb1 = gW1 + hidden * in;
    double* gW2 = gb1 + hidden;
    double* gb2 = gW2 + hidden * hidden;
    double* gW3 = gb2 + hidden;
    double* gb3 = gW3 + out * hidden;

    Map(gW3, out, hidden).noalias() += dy * c.h2.transpose();
    VMap(gb3, out) += dy;
    const VecX d2 = ((W3.transpose() * dy).array() * (1.0 - c.h2.array().square())).matrix();
    Map(gW2, hidden, hidden).noalias() += d2 * c.h1.transpose();
    VMap(gb2, hidden) += d2;
    const VecX d1 = ((W2.transpose() * d2).array() * (1.0 - c.h1.array().square())).matrix();
    Map(gW1, hidden, in).noalias() += d1 * c.x.transpose();
    VMap(gb1, hidden) += d1;
  }

  /// Scaled normal init, fan-in scaling; `out_gain` scales the last layer.
  void init(double* p, Rng& rng, double out_gain) const {
    std::normal_distribution<double> n(0.0, 1.0);
    auto fill = [&](double*& q, int rows, int cols, double gain) {
      const double s = gain / std::sqrt(static_cast<double>(cols));
      for (int i = 0; i < rows * cols; ++i) *q++ = s * n(rng);
      for (int i = 0; i < rows; ++i) *q++ = 0.0;
    };
    fill(p, hidden, in, 1.0);
    fill(p, hidden, hidden, 1.0);
    fill(p, out, hidden, out_gain);
  }
};

// ---------------------------------------------------------------- policy

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Gaussian policy with a separate value network and a state-independent
/// log-std. Layout of `theta`: [policy MLP | value MLP | log_std].
struct PolicyNet {
  MlpShape pi, v;
  VecX theta;

  PolicyNet() = default;
  PolicyNet(int obs_dim, int act_dim, int hidden = 64)
      : pi{obs_dim, hidden, act_dim}, v{obs_dim, hidden, 1},
        theta(VecX::Zero(pi.size() + v.size() + act_dim)) {}

  int obs_dim() const { return pi.in; }
  int act_dim() const { return pi.out; }
  int size() const { return static_cast<int>(theta.size()); }
  double* pi_params() { return theta.data(); }
  const double* pi_params() const { return theta.data(); }
  const double* v_params() const { return theta.data() + pi.size(); }
  int log_std_offset() const { return pi.size() + v.size(); }
  VecX log_std() const {
    return theta.segment(log_std_offset(), act_dim()).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  }

  void init(Rng& rng, double init_log_std = 0.0, double out_gain = 0.01) {
    pi.init(theta.data(), rng, out_gain);
    v.init(theta.data() + pi.size(), rng, 1.0);
    theta.segment(log_std_offset(), act_dim()).setConstant(init_log_std);
  }

  void clamp_log_std() {
    auto ls = theta.segment(log_std_offset(), act_dim());
    ls = ls.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  }

  bool finite() const { return theta.allFinite(); }
};

struct PolicyOutput {
  VecX mean;
  VecX log_std;
  double value = 0.0;
};

inline PolicyOutput policy_forward(const PolicyNet& net, const VecX& obs) {
  if (obs.size() != net.obs_dim()) throw Error("invalid-params", "observation dimension mismatch");
  PolicyOutput o;
  o.mean = net.pi.forward(net.pi_params(), obs);
  o.value = net.v.forward(net.v_params(), obs)[0];
  o.log_std = net.log_std();
  return o;
}

inline double gaussian_log_prob(const VecX& a, const VecX& mean, const VecX& log_std) {
  const VecX z = ((a - mean).array() / log_std.array().exp()).matrix();
  return -0.5 * z.squaredNorm() - log_std.sum() -
         0.5 * static_cast<double>(a.size()) * std::log(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------- optimizer

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  VecX m, v;
  long t = 0;

  void step(VecX& theta, const VecX& grad, double lr) {
    if (m.size() != theta.size()) {
      m = VecX::Zero(theta.size());
      v = VecX::Zero(theta.size());
    }
    ++t;
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad.cwiseAbs2();
    const double c1 = 1 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1 - std::pow(beta2, static_cast<double>(t));
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

// ---------------------------------------------------------------- observation normalization

struct RunningNorm {
  VecX mean, var;
  double count = 0.0;
  double clip = 10.0;

  RunningNorm() = default;
  explicit RunningNorm(int dim) : mean(VecX::Zero(dim)), var(VecX::Ones(dim)) {}

  /// Parallel-variance merge of a batch of raw observations.
  void update(const std::vector<VecX>& batch) {
    if (batch.empty()) return;
    const double n = static_cast<double>(batch.size());
    VecX bm = VecX::Zero(mean.size());
    for (const auto& x : batch) bm += x;
    bm /= n;
    VecX bv = VecX::Zero(mean.size());
    for (const auto& x : batch) bv += (x - bm).cwiseAbs2();
    bv /= n;
    if (count == 0.0) {
      mean = bm;
      var = bv;
      count = n;
      return;
    }
    const double tot = count + n;
    const VecX delta = bm - mean;
    mean += delta * (n / tot);
    var = (var * count + bv * n + delta.cwiseAbs2() * (count * n / tot)) / tot;
    count = tot;
  }

  VecX normalize(const VecX& x) const {
    return ((x - mean).array() / (var.array() + 1e-8).sqrt()).cwiseMax(-clip).cwiseMin(clip).matrix();
  }
};

// ---------------------------------------------------------------- PPO

struct PpoConfig {
  double clip_eps = 0.2;
  int epochs = 10;
  int minibatches = 64;
  double lr = 2.5e-4;
  int batch = 4096;
  double gamma = 0.99;
  double lambda = 0.95;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double entropy_coef = 0.0;  // kept at zero, no entropy bonus
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int hidden = 64;
  double init_log_std = -1.0;
  int workers = 1;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(clip_eps > 0 && clip_eps < 1) || !(gamma > 0 && gamma <= 1) || !(lambda >= 0 && lambda <= 1) ||
        epochs < 0 || minibatches < 1 || batch < 1 || !(lr > 0) || workers < 1 || hidden < 1) {
      throw Error("invalid-params", "PPO configuration out of range");
    }
  }
};

struct RolloutBuffer {
  std::vector<VecX> obs;  // normalized
  std::vector<VecX> actions;
  std::vector<double> log_probs, rewards, values;
  std::vector<bool> dones;
  std::vector<double> advantages, returns;

  std::size_t size() const { return obs.size(); }
  void add(VecX o, VecX a, double lp, double r, double v, bool d) {
    obs.push_back(std::move(o));
    actions.push_back(std::move(a));
    log_probs.push_back(lp);
    rewards.push_back(r);
    values.push_back(v);
    dones.push_back(d);
  }
  void append(const RolloutBuffer& b) {
    obs.insert(obs.end(), b.obs.begin(), b.obs.end());
    actions.insert(actions.end(), b.actions.begin(), b.actions.end());
    log_probs.insert(log_probs.end(), b.log_probs.begin(), b.log_probs.end());
    rewards.insert(rewards.end(), b.rewards.begin(), b.rewards.end());
    values.insert(values.end(), b.values.begin(), b.values.end());
    dones.insert(dones.end(), b.dones.begin(), b.dones.end());
    advantages.insert(advantages.end(), b.advantages.begin(), b.advantages.end());
    returns.insert(returns.end(), b.returns.begin(), b.returns.end());
  }
};

struct LossParts {
  double total = 0.0;
  double policy = 0.0;  // clipped surrogate, maximized
  double value = 0.0;   // mean squared error
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
};

/// Loss = -surrogate + value_coef * MSE over the given sample indices, with
/// its gradient w.r.t. net.theta. Advantages are used as stored.
inline LossParts ppo_loss_and_grad(const PolicyNet& net, const RolloutBuffer& buf,
                                   const std::vector<std::size_t>& idx, const PpoConfig& cfg,
                                   VecX* grad) {
  LossParts L;
  if (grad) *grad = VecX::Zero(net.size());
  const double n = static_cast<double>(idx.size());
  const VecX ls = net.log_std();
  const VecX inv_var = (-2.0 * ls).array().exp().matrix();
  const int lo = net.log_std_offset();
  // Gradient flows to log_std only inside the clamp range.
  VecX ls_live(ls.size());
  for (int j = 0; j < ls.size(); ++j) {
    const double raw = net.theta[lo + j];
    ls_live[j] = (raw > kLogStdMin && raw < kLogStdMax) ? 1.0 : 0.0;
  }
  MlpShape::Cache cp, cv;
  for (std::size_t i : idx) {
    const VecX& o = buf.obs[i];
    const VecX& a = buf.actions[i];
    const VecX mu = net.pi.forward(net.pi_params(), o, &cp);
    const double val = net.v.forward(net.v_params(), o, &cv)[0];
    const double lp = gaussian_log_prob(a, mu, ls);
    const double ratio = std::exp(lp - buf.log_probs[i]);
    const double A = buf.advantages[i];
    const double unclipped = ratio * A;
    const double clipped = std::clamp(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * A;
    L.policy += std::min(unclipped, clipped) / n;
    const double err = val - buf.returns[i];
    L.value += err * err / n;
    L.mean_ratio += ratio / n;
    if (std::abs(ratio - 1.0) > cfg.clip_eps) L.clip_fraction += 1.0 / n;
    if (grad) {
      // d(-min)/d(lp): the unclipped branch carries the gradient when selected.
      const double dlp = unclipped <= clipped ? -A * ratio / n : 0.0;
      if (dlp != 0.0) {
        const VecX diff = a - mu;
        const VecX dmu = dlp * diff.cwiseProduct(inv_var);
        net.pi.backward(net.pi_params(), cp, dmu, grad->data());
        const VecX dls = dlp * (diff.cwiseAbs2().cwiseProduct(inv_var).array() - 1.0).matrix();
        grad->segment(lo, ls.size()) += dls.cwiseProduct(ls_live);
      }
      VecX dv(1);
      dv[0] = cfg.value_coef * 2.0 * err / n;
      net.v.backward(net.v_params(), cv, dv, grad->data() + net.pi.size());
    }
  }
  L.total = -L.policy + cfg.value_coef * L.value;
  return L;
}

struct PpoStats {
  double mean_ratio = 1.0;
  double clip_fraction = 0.0;
  double value_loss = 0.0;
  double policy_objective = 0.0;
  int steps = 0;
};

/// Epochs of shuffled minibatch Adam steps. Advantages in `buf` are
/// normalized here. Throws ppo-diverged on a non-finite loss.
inline PpoStats ppo_update(PolicyNet& net, Adam& opt, RolloutBuffer& buf, const PpoConfig& cfg, Rng& rng) {
  cfg.validate();
  PpoStats st;
  if (buf.size() == 0 || cfg.epochs == 0) return st;
  normalize_in_place(buf.advantages);
  opt.beta1 = cfg.adam_beta1;
  opt.beta2 = cfg.adam_beta2;
  opt.eps = cfg.adam_eps;
  std::vector<std::size_t> perm(buf.size());
  std::iota(perm.begin(), perm.end(), 0);
  const std::size_t mb = std::max<std::size_t>(1, buf.size() / static_cast<std::size_t>(cfg.minibatches));
  double ratio_sum = 0, clip_sum = 0, vl_sum = 0, pol_sum = 0;
  VecX g;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t start = 0; start + mb <= perm.size(); start += mb) {
      std::vector<std::size_t> idx(perm.begin() + static_cast<long>(start),
                                   perm.begin() + static_cast<long>(start + mb));
      const LossParts L = ppo_loss_and_grad(net, buf, idx, cfg, &g);
      if (!std::isfinite(L.total) || !g.allFinite()) {
        throw Error("ppo-diverged", "non-finite loss at epoch " + std::to_string(e) +
                                        " (policy " + std::to_string(L.policy) + ", value " +
                                        std::to_string(L.value) + ", ratio " +
                                        std::to_string(L.mean_ratio) + ")");
      }
      const double gn = g.norm();
      if (cfg.max_grad_norm > 0 && gn > cfg.max_grad_norm) g *= cfg.max_grad_norm / gn;
      opt.step(net.theta, g, cfg.lr);
      net.clamp_log_std();
      ratio_sum += L.mean_ratio;
      clip_sum += L.clip_fraction;
      vl_sum += L.value;
      pol_sum += L.policy;
      ++st.steps;
    }
  }
  if (st.steps > 0) {
    st.mean_ratio = ratio_sum / st.steps;
    st.clip_fraction = clip_sum / st.steps;
    st.value_loss = vl_sum / st.steps;
    st.policy_objective = pol_sum / st.steps;
  }
  return st;
}

// ---------------------------------------------------------------- residual walking task

/// Walk forward with the analytical engine; outside a square around the start
/// the command turns at a random rate until the heading points back inside.
struct ResidualTask {
  EngineConfig engine;
  PlantConfig plant;
  double step_len = 0.05;        // m per step
  double square_side = 2.0;      // m
  double turn_rate_min = 30.0;   // deg/s
  double turn_rate_max = 60.0;   // deg/s
  double max_time = 60.0;        // s, 0 disables the cap
  double reward_k = 0.01;

  static ResidualTask standard() {
    ResidualTask t;
    t.engine.variant = ModelVariant::TwoMass;
    t.plant.mismatch_range = 0.1;
    t.plant.random_pushes = {2.0, 0.5, 0.2, 0.6, 1.0};
    return t;
  }
};

inline constexpr int kObsDim = 16;
inline constexpr int kActDim = 3;

class ResidualEnv {
 public:
  ResidualEnv(const ResidualTask& task, std::uint64_t seed) : task_(task) { reset(seed); }

  void reset(std::uint64_t seed) {
    ep_.emplace(task_.engine, task_.plant, seed);
    rng_.seed(derive_seed(seed, 0x7A5C));
    center_ = ep_->com();
    turning_ = false;
    turn_deg_s_ = 0.0;
    ticks_ = 0;
  }

  const Episode& episode() const { return *ep_; }
  long ticks() const { return ticks_; }

  WalkCommand command() const {
    const double alpha = turning_ ? turn_deg_s_ * ep_->engine().step_time() : 0.0;
    return {task_.step_len, 0.0, alpha, true};
  }

  /// Observation in the support-foot heading frame.
  VecX observe() const {
    const auto& e = ep_->engine();
    const double psi = e.heading();
    const double c = std::cos(psi), s = std::sin(psi);
    auto rot = [&](double wx, double wy) { return std::pair{c * wx + s * wy, -s * wx + c * wy}; };
    const auto& est = ep_->estimate();
    const Vec2 mid = e.stance_center();
    VecX o(kObsDim);
    int k = 0;
    o[k++] = command().alpha;
    const auto [px, py] = rot(est[0].x_hat[0] - mid.x(), est[1].x_hat[0] - mid.y());
    o[k++] = px;
    o[k++] = py;
    for (int i = 1; i < 4; ++i) {
      const auto [a, b] = rot(est[0].x_hat[i], est[1].x_hat[i]);
      o[k++] = a;
      o[k++] = b;
    }
    const auto& u = e.last_input();
    const auto [zx, zy] = rot(u[0].zmp - mid.x(), u[1].zmp - mid.y());
    const auto [tx, ty] = rot(u[0].torso_accel, u[1].torso_accel);
    o[k++] = zx;
    o[k++] = zy;
    o[k++] = tx;
    o[k++] = ty;
    o[k++] = e.step_com_height() - e.config().gait.z_0;
    double ph = 0.0;
    if (e.phase().kind == PhaseKind::SingleSupport) ph = e.phase().timer / e.config().gait.T_ss;
    o[k++] = std::sin(2 * std::numbers::pi * ph);
    o[k++] = std::cos(2 * std::numbers::pi * ph);
    return o;
  }

  /// Policy action units: action * scale gives (dz m, heading-frame thetadd rad/s^2).
  Residual to_residual(const VecX& a) const {
    const auto& rb = task_.engine.residual;
    const double psi = ep_->engine().heading();
    const double c = std::cos(psi), s = std::sin(psi);
    const double fx = rb.dthetadd_max * a[1], fy = rb.dthetadd_max * a[2];
    Residual r;
    r.dz_com = rb.dz_max * a[0];
    r.dthetadd = {c * fx - s * fy, s * fx + c * fy};
    return r;
  }

  struct StepResult {
    double reward = 0.0;
    bool fell = false;
    bool truncated = false;
  };

  StepResult step(const VecX& action) {
    const Vec2 before = ep_->com();
    const auto out = ep_->step(command(), to_residual(action));
    ++ticks_;
    StepResult r;
    const double psi = ep_->engine().heading();
    r.reward = reward(ep_->com(), before, {std::cos(psi), std::sin(psi)}, task_.reward_k);
    r.fell = out.fell;
    if (!r.fell) update_turning(psi);
    r.truncated = !r.fell && task_.max_time > 0 && ep_->time() >= task_.max_time - 1e-9;
    return r;
  }

 private:
  void update_turning(double psi) {
    const Vec2 p = ep_->com() - center_;
    const double h = 0.5 * task_.square_side;
    const bool outside = std::abs(p.x()) > h || std::abs(p.y()) > h;
    const bool inward = Vec2(std::cos(psi), std::sin(psi)).dot(-p) > 0;
    if (!turning_ && outside && !inward) {
      std::uniform_real_distribution<double> rate(task_.turn_rate_min, task_.turn_rate_max);
      std::bernoulli_distribution sign(0.5);
      turn_deg_s_ = rate(rng_) * (sign(rng_) ? 1.0 : -1.0);
      turning_ = true;
    } else if (turning_ && (inward || !outside)) {
      turning_ = false;
    }
  }

  ResidualTask task_;
  std::optional<Episode> ep_;
  Rng rng_;
  Vec2 center_ = Vec2::Zero();
  bool turning_ = false;
  double turn_deg_s_ = 0.0;
  long ticks_ = 0;
};

// ---------------------------------------------------------------- training

struct CurvePoint {
  long timesteps = 0;
  double mean_return = 0.0;  // episodes finished in this batch; carried over when none did
  int episodes = 0;
  PpoStats stats;
};

struct TrainResult {
  PolicyNet net;
  RunningNorm norm;
  std::vector<CurvePoint> curve;
  int updates = 0;
};

namespace detail {

struct Worker {
  ResidualEnv env;
  std::uint64_t stream;
  long episodes = 0;
  double ep_return = 0.0;
  Rng rng;
  VecX raw_obs;

  Worker(const ResidualTask& t, std::uint64_t s)
      : env(t, derive_seed(s, 0)), stream(s), episodes(1), rng(derive_seed(s, 0xAC7)) {
    raw_obs = env.observe();
  }
};

struct WorkerBatch {
  RolloutBuffer buf;
  std::vector<VecX> raw;
  std::vector<double> finished;
};

inline WorkerBatch collect(Worker& w, const PolicyNet& net, const RunningNorm& norm, long steps,
                           const PpoConfig& cfg) {
  WorkerBatch out;
  std::normal_distribution<double> n01(0.0, 1.0);
  for (long k = 0; k < steps; ++k) {
    const VecX o = norm.normalize(w.raw_obs);
    const PolicyOutput po = policy_forward(net, o);
    VecX a = po.mean;
    for (int j = 0; j < a.size(); ++j) a[j] += std::exp(po.log_std[j]) * n01(w.rng);
    const double lp = gaussian_log_prob(a, po.mean, po.log_std);
    const auto sr = w.env.step(a);
    double r = sr.reward;
    w.ep_return += sr.reward;
    out.raw.push_back(w.raw_obs);
    const bool end = sr.fell || sr.truncated;
    if (sr.truncated) {
      // Time-cap cut: bootstrap from the state reached.
      r += cfg.gamma * policy_forward(net, norm.normalize(w.env.observe())).value;
    }
    out.buf.add(o, a, lp, r, po.value, end);
    if (end) {
      out.finished.push_back(w.ep_return);
      w.ep_return = 0.0;
      w.env.reset(derive_seed(w.stream, static_cast<std::uint64_t>(w.episodes++)));
    }
    w.raw_obs = w.env.observe();
  }
  const double last_v = policy_forward(net, norm.normalize(w.raw_obs)).value;
  auto g = gae(out.buf.rewards, out.buf.values, out.buf.dones, last_v, cfg.gamma, cfg.lambda);
  out.buf.advantages = std::move(g.advantages);
  out.buf.returns = std::move(g.returns);
  return out;
}

}  // namespace detail

inline PolicyNet make_policy(const PpoConfig& cfg) {
  PolicyNet net(kObsDim, kActDim, cfg.hidden);
  Rng rng(derive_seed(cfg.seed, 0x9E7));
  net.init(rng, cfg.init_log_std);
  return net;
}

/// PPO on the residual task. Worker w runs stream derive_seed(seed, w+1);
/// buffers are merged in worker order, so a fixed worker count reproduces.
inline TrainResult train(const ResidualTask& task, const PpoConfig& cfg, long total_timesteps,
                         const std::function<void(const CurvePoint&)>& on_update = {}) {
  cfg.validate();
  TrainResult res;
  res.net = make_policy(cfg);
  res.norm = RunningNorm(kObsDim);
  if (total_timesteps < cfg.batch) return res;

  std::vector<detail::Worker> workers;
  for (int w = 0; w < cfg.workers; ++w) {
    workers.emplace_back(task, derive_seed(cfg.seed, static_cast<std::uint64_t>(w + 1)));
  }
  // Normalizer starts from a warm-up with the initial policy's observations.
  {
    std::vector<VecX> warm;
    for (auto& w : workers) warm.push_back(w.raw_obs);
    res.norm.update(warm);
  }
  Adam opt;
  Rng urng(derive_seed(cfg.seed, 0x0B7));
  const long per_worker = (cfg.batch + cfg.workers - 1) / cfg.workers;
  long steps = 0;
  double last_mean = 0.0;
  while (steps + cfg.batch <= total_timesteps) {
    std::vector<detail::WorkerBatch> parts(workers.size());
    auto run = [&](std::size_t i) { parts[i] = detail::collect(workers[i], res.net, res.norm, per_worker, cfg); };
    if (workers.size() == 1) {
      run(0);
    } else {
      std::vector<std::thread> th;
      for (std::size_t i = 0; i < workers.size(); ++i) th.emplace_back(run, i);
      for (auto& t : th) t.join();
    }
    RolloutBuffer buf;
    std::vector<VecX> raw;
    std::vector<double> finished;
    for (auto& p : parts) {
      buf.append(p.buf);
      raw.insert(raw.end(), p.raw.begin(), p.raw.end());
      finished.insert(finished.end(), p.finished.begin(), p.finished.end());
    }
    steps += static_cast<long>(buf.size());
    CurvePoint cp;
    cp.timesteps = steps;
    cp.episodes = static_cast<int>(finished.size());
    if (!finished.empty()) {
      last_mean = std::accumulate(finished.begin(), finished.end(), 0.0) / static_cast<double>(finished.size());
    }
    cp.mean_return = last_mean;
    cp.stats = ppo_update(res.net, opt, buf, cfg, urng);
    res.norm.update(raw);
    ++res.updates;
    res.curve.push_back(cp);
    if (on_update) on_update(cp);
  }
  return res;
}

// ---------------------------------------------------------------- evaluation

struct EvalEpisode {
  double ret = 0.0;
  double length = 0.0;  // s
  bool fell = false;
};

struct EvalSummary {
  std::vector<EvalEpisode> episodes;
  double mean_return = 0.0;
  double median_length = 0.0;
  double fall_rate = 0.0;
};

/// Deterministic (mean action) rollouts, one stream per episode.
inline EvalSummary evaluate_policy(const PolicyNet& net, const RunningNorm& norm, const ResidualTask& task,
                                   int episodes, std::uint64_t seed, int workers = 1) {
  EvalSummary s;
  s.episodes.resize(static_cast<std::size_t>(episodes));
  auto job = [&](int w) {
    for (int i = w; i < episodes; i += workers) {
      ResidualEnv env(task, derive_seed(seed, static_cast<std::uint64_t>(i)));
      EvalEpisode e;
      while (true) {
        const auto sr = env.step(policy_forward(net, norm.normalize(env.observe())).mean);
        e.ret += sr.reward;
        if (sr.fell || sr.truncated) {
          e.fell = sr.fell;
          break;
        }
      }
      e.length = env.episode().time();
      s.episodes[static_cast<std::size_t>(i)] = e;
    }
  };
  if (workers <= 1) {
    job(0);
  } else {
    std::vector<std::thread> th;
    for (int w = 0; w < workers; ++w) th.emplace_back(job, w);
    for (auto& t : th) t.join();
  }
  std::vector<double> len;
  for (const auto& e : s.episodes) {
    s.mean_return += e.ret / episodes;
    s.fall_rate += (e.fell ? 1.0 : 0.0) / episodes;
    len.push_back(e.length);
  }
  if (!len.empty()) {
    std::sort(len.begin(), len.end());
    const std::size_t m = len.size() / 2;
    s.median_length = len.size() % 2 ? len[m] : 0.5 * (len[m - 1] + len[m]);
  }
  return s;
}

}  // namespace biped
