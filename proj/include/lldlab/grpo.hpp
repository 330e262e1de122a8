#pragma once

/**
 * Feedback-masked group-relative policy optimization.
 *
 * Rewards are normalized within each rollout group to per-token advantages;
 * the surrogate is the clipped importance-ratio objective summed over masked
 * (action) tokens only and normalized by the group's total masked token
 * count. Loss = negated objective, so minimizing it ascends the objective.
 */

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "lldlab/policy.hpp"
#include "lldlab/trajectory.hpp"

namespace lldlab {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

enum class StdGuard { discard_uniform, epsilon };

struct GrpoConfig {
  int group_size = 8;
  double clip_eps = 0.2;
  StdGuard std_guard = StdGuard::discard_uniform;
  double std_guard_eps = 1e-6;  // used when std_guard == epsilon
  int inner_epochs = 1;
};

inline void validate(const GrpoConfig& c) {
  if (c.group_size < 2) throw std::invalid_argument("group_size must be >= 2");
  if (!(c.clip_eps > 0.0 && c.clip_eps < 1.0))
    throw std::invalid_argument("clip_eps must be in (0,1)");
  if (c.inner_epochs < 1)
    throw std::invalid_argument("inner_epochs must be >= 1");
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

struct AdvantageResult {
  std::vector<double> advantages;
  bool degenerate = false;  // all rewards equal
};

/**
 * Group-relative normalization: A_i = (r_i - mean) / std with the population
 * standard deviation. Uniform-reward groups yield all-zero advantages and the
 * degenerate flag; under discard_uniform the trainer drops them, under the
 * epsilon guard they are kept (still contributing nothing to the surrogate).
 */
inline AdvantageResult compute_advantages(const std::vector<double>& rewards,
                                          const GrpoConfig& cfg) {
  if (static_cast<int>(rewards.size()) != cfg.group_size)
    throw std::invalid_argument("reward count != group_size");
  int g = static_cast<int>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= g;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= g;
  double sd = std::sqrt(var);

  AdvantageResult out;
  out.degenerate = sd == 0.0;
  out.advantages.resize(rewards.size(), 0.0);
  if (out.degenerate) return out;
  double denom = cfg.std_guard == StdGuard::epsilon
                     ? std::max(sd, cfg.std_guard_eps)
                     : sd;
  for (size_t i = 0; i < rewards.size(); ++i)
    out.advantages[i] = (rewards[i] - mean) / denom;
  return out;
}

// ---------------------------------------------------------------------------
// Surrogate
// ---------------------------------------------------------------------------

/// Per-trajectory masked contexts for a whole group, computed once per batch
/// and reused across inner epochs, losses, and finite-difference probes.
struct GroupContexts {
  std::vector<std::vector<TokenContext>> per_traj;
  int total_masked = 0;
};

inline GroupContexts make_group_contexts(const RolloutGroup& group,
                                         const FeatureMap& fm, const Vocab& v) {
  GroupContexts g;
  for (const auto& t : group.trajectories) {
    g.per_traj.push_back(masked_contexts(t, fm, v));
    g.total_masked += static_cast<int>(g.per_traj.back().size());
  }
  return g;
}

inline void check_alignment(const RolloutGroup& group, const GroupContexts& gctx) {
  if (group.old_logprobs.size() != gctx.per_traj.size())
    throw std::runtime_error("stale-group");
  for (size_t i = 0; i < gctx.per_traj.size(); ++i)
    if (group.old_logprobs[i].size() != gctx.per_traj[i].size())
      throw std::runtime_error("stale-group");
}

struct SurrogateResult {
  double loss = 0.0;
  double max_ratio = 0.0;
  double mean_ratio = 0.0;
};

/// Per-token surrogate contribution: min(ratio * adv, clip(ratio) * adv).
inline double surrogate_token_term(double ratio, double adv, double eps) {
  double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * adv, clipped * adv);
}

namespace detail {

/// True when the min() selects the branch through which gradient flows.
inline bool ratio_grad_active(double adv, double ratio, double eps) {
  if (adv > 0.0 && ratio > 1.0 + eps) return false;
  if (adv < 0.0 && ratio < 1.0 - eps) return false;
  return true;
}

}  // namespace detail

/**
 * Clipped surrogate loss over one group, optionally accumulating
 * scale * dLoss/dW into `grad`. Gradient flows through the new policy's
 * log-probabilities only; old log-probabilities are the frozen snapshot
 * values recorded at rollout time.
 */
inline SurrogateResult grpo_surrogate(const RolloutGroup& group,
                                      const GroupContexts& gctx,
                                      const PolicyParams& p,
                                      const GrpoConfig& cfg,
                                      Matrix* grad = nullptr,
                                      double scale = 1.0) {
  check_alignment(group, gctx);
  if (group.advantages.size() != gctx.per_traj.size())
    throw std::runtime_error("stale-group");
  int n_tokens = gctx.total_masked;
  SurrogateResult out;
  if (n_tokens == 0) return out;

  double objective = 0.0;
  double ratio_sum = 0.0;
  std::vector<double> z;
  for (size_t i = 0; i < gctx.per_traj.size(); ++i) {
    double adv = group.advantages[i];
    const auto& ctxs = gctx.per_traj[i];
    const auto& old_lp = group.old_logprobs[i];
    for (size_t k = 0; k < ctxs.size(); ++k) {
      logits_into(p, ctxs[k].feats, z);
      log_softmax_inplace(z);
      double lp_new = z[static_cast<size_t>(ctxs[k].token)];
      double ratio = std::exp(lp_new - old_lp[k]);
      objective += surrogate_token_term(ratio, adv, cfg.clip_eps);
      ratio_sum += ratio;
      out.max_ratio = std::max(out.max_ratio, ratio);

      if (grad && adv != 0.0 &&
          detail::ratio_grad_active(adv, ratio, cfg.clip_eps)) {
        // dLoss/dlp = -(1/N) * adv * ratio; chain through (e_y - pi) (x) phi.
        double coeff = -scale * adv * ratio / n_tokens;
        for (double& x : z) x = std::exp(x);  // z now holds probs
        accumulate_logprob_grad(*grad, coeff, ctxs[k].token, z, ctxs[k].feats);
      }
    }
  }
  out.loss = -objective / n_tokens;
  out.mean_ratio = ratio_sum / n_tokens;
  return out;
}

}  // namespace lldlab
