#pragma once

/**
 * Likelihood-preserving regularizers.
 *
 * All three variants penalize per-token likelihood drops relative to the
 * rollout snapshot, restricted to the preserving set (responses with
 * non-negative advantage):
 *
 *   lld      hinge on every masked token: max(0, lp_old - lp_new)
 *   llds     same hinge, gated per response: active only when the signed sum
 *            of (lp_old - lp_new) over the regularized tokens is > 0
 *   llds-ma  llds with the final action's answer span excluded from both the
 *            hinges and the gate argument
 *
 * The prefactor is 1 / (total masked tokens of preserving responses) for all
 * variants; answer masking shrinks only the numerator. Gate indicators are
 * constants under differentiation and hinges take subgradient 0 at the kink.
 */

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "lldlab/grpo.hpp"
#include "lldlab/policy.hpp"
#include "lldlab/trajectory.hpp"

namespace lldlab {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

enum class RegVariant { lld, llds, llds_ma };

inline const char* to_string(RegVariant v) {
  switch (v) {
    case RegVariant::lld: return "lld";
    case RegVariant::llds: return "llds";
    case RegVariant::llds_ma: return "llds-ma";
  }
  return "?";
}

inline RegVariant reg_variant_from_string(const std::string& s) {
  if (s == "lld") return RegVariant::lld;
  if (s == "llds") return RegVariant::llds;
  if (s == "llds-ma") return RegVariant::llds_ma;
  throw std::invalid_argument("unknown regularizer variant: " + s);
}

struct RegConfig {
  RegVariant variant = RegVariant::llds;
  double lambda = 0.1;
};

inline void validate(const RegConfig& c) {
  if (!(std::isfinite(c.lambda) && c.lambda >= 0.0))
    throw std::invalid_argument("lambda must be finite and >= 0");
}

// ---------------------------------------------------------------------------
// Preserving set
// ---------------------------------------------------------------------------

/// Indices of responses with non-negative advantage; zero-advantage
/// (untrained) responses are included.
inline std::vector<int> preserving_set(const RolloutGroup& group) {
  std::vector<int> out;
  for (size_t i = 0; i < group.advantages.size(); ++i)
    if (group.advantages[i] >= 0.0) out.push_back(static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Token drops
// ---------------------------------------------------------------------------

struct TokenDrop {
  int index = 0;     // position in the trajectory's masked-token order
  double drop = 0.0; // max(0, lp_old - lp_new), in nats
};

/// Mask over a trajectory's masked-token order: 1 where the token lies inside
/// the FINAL action's answer span. Earlier actions' spans are deliberately
/// not excluded; only the final answer is exempt under llds-ma.
inline std::vector<uint8_t> final_answer_token_mask(const Trajectory& t) {
  std::vector<uint8_t> mask(static_cast<size_t>(t.masked_token_count()), 0);
  if (t.segments.empty()) return mask;
  const Segment& last = t.segments.back();
  if (last.kind != SegmentKind::action || !last.answer_span) return mask;
  int base = t.masked_token_count() - last.length();
  for (int k = last.answer_span->lo; k <= last.answer_span->hi; ++k)
    mask[static_cast<size_t>(base + k)] = 1;
  return mask;
}

/// One entry per masked token whose likelihood decreased; with answer_masked,
/// tokens inside the final action's answer span are excluded.
inline std::vector<TokenDrop> token_drops(const Trajectory& traj,
                                          const std::vector<double>& old_lp,
                                          const std::vector<double>& new_lp,
                                          bool answer_masked) {
  size_t n = static_cast<size_t>(traj.masked_token_count());
  if (old_lp.size() != n || new_lp.size() != n)
    throw std::runtime_error("logprob-misalign");
  std::vector<uint8_t> excluded =
      answer_masked ? final_answer_token_mask(traj) : std::vector<uint8_t>(n, 0);
  std::vector<TokenDrop> out;
  for (size_t k = 0; k < n; ++k) {
    if (excluded[k]) continue;
    double d = old_lp[k] - new_lp[k];
    if (d > 0.0) out.push_back(TokenDrop{static_cast<int>(k), d});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Penalty
// ---------------------------------------------------------------------------

/**
 * Regularization penalty over one group, optionally accumulating
 * scale * dPenalty/dW into `grad`. Uses group.old_logprobs as the snapshot
 * reference (the same one the surrogate's ratios use). An empty preserving
 * set gives 0.
 */
inline double penalty(const RolloutGroup& group, const GroupContexts& gctx,
                      const PolicyParams& p, const RegConfig& cfg,
                      Matrix* grad = nullptr, double scale = 1.0) {
  check_alignment(group, gctx);
  std::vector<int> pre = preserving_set(group);
  int denom = 0;
  for (int i : pre)
    denom += static_cast<int>(gctx.per_traj[static_cast<size_t>(i)].size());
  if (denom == 0) return 0.0;

  bool answer_masked = cfg.variant == RegVariant::llds_ma;
  bool gated = cfg.variant != RegVariant::lld;

  double hinge_total = 0.0;
  std::vector<double> z;
  std::vector<double> lp_new;
  for (int i : pre) {
    const auto& ctxs = gctx.per_traj[static_cast<size_t>(i)];
    const auto& old_lp = group.old_logprobs[static_cast<size_t>(i)];
    const Trajectory& traj = group.trajectories[static_cast<size_t>(i)];
    size_t n = ctxs.size();
    std::vector<uint8_t> excluded = answer_masked
                                        ? final_answer_token_mask(traj)
                                        : std::vector<uint8_t>(n, 0);
    lp_new.resize(n);
    for (size_t k = 0; k < n; ++k) {
      logits_into(p, ctxs[k].feats, z);
      log_softmax_inplace(z);
      lp_new[k] = z[static_cast<size_t>(ctxs[k].token)];
    }

    double signed_sum = 0.0;  // over regularized tokens only
    for (size_t k = 0; k < n; ++k)
      if (!excluded[k]) signed_sum += old_lp[k] - lp_new[k];
    bool gate = !gated || signed_sum > 0.0;
    if (!gate) continue;

    for (size_t k = 0; k < n; ++k) {
      if (excluded[k]) continue;
      double d = old_lp[k] - lp_new[k];
      if (d <= 0.0) continue;
      hinge_total += d;
      if (grad) {
        // dPenalty/dlp_k = -1/denom on dropped tokens (gate held constant).
        double coeff = -scale / denom;
        probs_into(p, ctxs[k].feats, z);
        accumulate_logprob_grad(*grad, coeff, ctxs[k].token, z, ctxs[k].feats);
      }
    }
  }
  return hinge_total / denom;
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

struct TotalLossResult {
  double total = 0.0;
  SurrogateResult surrogate;
  double penalty = 0.0;
};

/// L_total = L_grpo + lambda * penalty, with gradient accumulation through
/// both terms when `grad` is given.
inline TotalLossResult total_loss(const RolloutGroup& group,
                                  const GroupContexts& gctx,
                                  const PolicyParams& p, const GrpoConfig& gcfg,
                                  const RegConfig& rcfg, Matrix* grad = nullptr,
                                  double scale = 1.0) {
  TotalLossResult out;
  out.surrogate = grpo_surrogate(group, gctx, p, gcfg, grad, scale);
  if (rcfg.lambda > 0.0)
    out.penalty = penalty(group, gctx, p, rcfg, grad, scale * rcfg.lambda);
  else
    out.penalty = penalty(group, gctx, p, rcfg, nullptr, 0.0);
  out.total = out.surrogate.loss + rcfg.lambda * out.penalty;
  return out;
}

}  // namespace lldlab
