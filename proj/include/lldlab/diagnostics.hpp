#pragma once

/**
 * Measurement suite: action/response likelihood deltas, the per-sample
 * single-update probe, search/observation metrics, training-phase tagging,
 * and the gradient-interaction (gwhes) score that predicts when a correct
 * action's likelihood will fall.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "lldlab/env.hpp"
#include "lldlab/grpo.hpp"
#include "lldlab/lldreg.hpp"
#include "lldlab/policy.hpp"
#include "lldlab/trajectory.hpp"

namespace lldlab {

// ---------------------------------------------------------------------------
// Likelihood deltas
// ---------------------------------------------------------------------------

/// Log-likelihood change of action t between two parameter sets, both
/// conditioned on the identical recorded context (feedback included).
inline double action_delta(const PolicyParams& p_old, const PolicyParams& p_fin,
                           const std::vector<TokenContext>& contexts, int t) {
  return action_log_prob(p_fin, contexts, t) - action_log_prob(p_old, contexts, t);
}

struct LldRecord {
  std::vector<double> action_deltas;  // one per action segment
  double response_delta = 0.0;        // sum of action deltas
  bool lld_flag = false;              // response_delta <= threshold
};

inline LldRecord lld_record(const PolicyParams& p_old,
                            const PolicyParams& p_fin,
                            const std::vector<TokenContext>& contexts,
                            int turn_count, double epsilon_threshold = 0.0) {
  LldRecord r;
  for (int t = 0; t < turn_count; ++t) {
    double d = action_delta(p_old, p_fin, contexts, t);
    r.action_deltas.push_back(d);
    r.response_delta += d;
  }
  r.lld_flag = r.response_delta <= epsilon_threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Search metrics
// ---------------------------------------------------------------------------

/// Number of action segments that parse as a search AND received information
/// feedback (a trailing search cut off by the turn budget does not count).
inline int valid_search_count(const Trajectory& traj, const Vocab& v) {
  int count = 0;
  for (size_t i = 0; i < traj.segments.size(); ++i) {
    const Segment& s = traj.segments[i];
    if (s.kind != SegmentKind::action) continue;
    if (i + 1 >= traj.segments.size()) continue;
    if (traj.segments[i + 1].kind != SegmentKind::feedback) continue;
    if (parse_action(s, v).kind == ParsedAction::Kind::search) ++count;
  }
  return count;
}

/// Documents of the feedback following the first search action, if any.
inline std::optional<std::array<int, kDocsPerQuery>> first_search_docs(
    const Trajectory& traj, const Vocab& v) {
  for (size_t i = 0; i < traj.segments.size(); ++i) {
    const Segment& s = traj.segments[i];
    if (s.kind != SegmentKind::action) continue;
    if (parse_action(s, v).kind != ParsedAction::Kind::search) continue;
    if (i + 1 < traj.segments.size())
      return info_docs(traj.segments[i + 1], v);
    return std::nullopt;
  }
  return std::nullopt;
}

/**
 * Fraction of incorrect responses whose first retrieved document set equals
 * (as a set of three) that of some correct response in the group. Throws
 * "no-reference" when the group has no correct response.
 */
inline double obs_match_ratio(const RolloutGroup& group, const Vocab& v) {
  std::vector<std::array<int, kDocsPerQuery>> reference;
  int incorrect = 0;
  int matched = 0;
  auto sorted = [](std::array<int, kDocsPerQuery> d) {
    std::sort(d.begin(), d.end());
    return d;
  };
  for (size_t i = 0; i < group.trajectories.size(); ++i) {
    if (group.rewards[i] != 1.0) continue;
    if (auto docs = first_search_docs(group.trajectories[i], v))
      reference.push_back(sorted(*docs));
  }
  bool any_correct = false;
  for (double r : group.rewards) any_correct |= r == 1.0;
  if (!any_correct) throw std::runtime_error("no-reference");
  for (size_t i = 0; i < group.trajectories.size(); ++i) {
    if (group.rewards[i] == 1.0) continue;
    ++incorrect;
    auto docs = first_search_docs(group.trajectories[i], v);
    if (!docs) continue;
    auto key = sorted(*docs);
    for (const auto& ref : reference)
      if (ref == key) {
        ++matched;
        break;
      }
  }
  return incorrect == 0 ? 0.0 : static_cast<double>(matched) / incorrect;
}

// ---------------------------------------------------------------------------
// Phase tagging
// ---------------------------------------------------------------------------

enum class Phase { none, I, II, III };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::none: return "none";
    case Phase::I: return "I";
    case Phase::II: return "II";
    case Phase::III: return "III";
  }
  return "?";
}

struct PhaseConfig {
  int window = 25;
  double s0 = 1e-3;          // nats/step per token: stagnation bound
  double s1 = 1e-2;          // nats/step per token: acceleration bound
  double spike_factor = 2.0; // grad-norm spike vs window median
};

/// Least-squares slope of y against 0..n-1.
inline double ols_slope(const std::vector<double>& y) {
  int n = static_cast<int>(y.size());
  if (n < 2) return 0.0;
  double xm = (n - 1) / 2.0;
  double ym = 0.0;
  for (double v : y) ym += v;
  ym /= n;
  double num = 0.0, den = 0.0;
  for (int i = 0; i < n; ++i) {
    num += (i - xm) * (y[static_cast<size_t>(i)] - ym);
    den += (i - xm) * (i - xm);
  }
  return num / den;
}

/**
 * Tag the current training phase from the trailing window of per-token mean
 * correct log-likelihood and gradient norms:
 *
 *   III  likelihood slope < -s1, or the latest gradient norm spikes above
 *        spike_factor x window median
 *   II   slope in [-s1, -s0]
 *   I    |slope| < s0
 *   none otherwise, or window not yet full
 */
inline Phase phase_tag(const std::vector<double>& loglik_history,
                       const std::vector<double>& grad_norm_history,
                       const PhaseConfig& cfg) {
  int n = static_cast<int>(loglik_history.size());
  if (n < cfg.window || static_cast<int>(grad_norm_history.size()) < cfg.window)
    return Phase::none;
  std::vector<double> lik(loglik_history.end() - cfg.window,
                          loglik_history.end());
  std::vector<double> grad(grad_norm_history.end() - cfg.window,
                           grad_norm_history.end());
  double slope = ols_slope(lik);
  std::vector<double> sorted_grad = grad;
  std::sort(sorted_grad.begin(), sorted_grad.end());
  double median = sorted_grad[static_cast<size_t>(cfg.window / 2)];
  bool spike = median > 0.0 && grad.back() > cfg.spike_factor * median;
  if (slope < -cfg.s1 || spike) return Phase::III;
  if (slope <= -cfg.s0) return Phase::II;
  if (std::abs(slope) < cfg.s0) return Phase::I;
  return Phase::none;
}

// ---------------------------------------------------------------------------
// Per-sample probe
// ---------------------------------------------------------------------------

struct ProbeResult {
  double delta_x = 0.0;
  int n_correct = 0;
  int n_incorrect = 0;
};

/**
 * Single-update likelihood probe: starting from `p` (which must be the
 * snapshot the group was collected under), apply exactly one plain gradient
 * step on the combined objective from this group alone and return the mean
 * masked-total log-likelihood change of the correct responses. Works on a
 * copy; `p` is untouched. Throws "uniform-group" unless the group mixes
 * correct and incorrect responses.
 */
inline ProbeResult probe_delta_x(const RolloutGroup& group,
                                 const GroupContexts& gctx,
                                 const PolicyParams& p, const GrpoConfig& gcfg,
                                 const RegConfig& rcfg, double learning_rate) {
  ProbeResult out;
  for (double r : group.rewards) {
    if (r == 1.0)
      ++out.n_correct;
    else
      ++out.n_incorrect;
  }
  if (out.n_correct == 0 || out.n_incorrect == 0)
    throw std::runtime_error("uniform-group");
  if (group.params_version != p.version)
    throw std::runtime_error("stale-group");

  Matrix grad(p.weights.rows, p.weights.cols);
  total_loss(group, gctx, p, gcfg, rcfg, &grad);

  PolicyParams stepped;
  stepped.weights = p.weights;
  stepped.version = p.version + 1;
  for (size_t i = 0; i < grad.data.size(); ++i)
    stepped.weights.data[i] -= learning_rate * grad.data[i];

  double delta_sum = 0.0;
  for (size_t i = 0; i < group.trajectories.size(); ++i) {
    if (group.rewards[i] != 1.0) continue;
    double before = log_prob(p, gctx.per_traj[i]).total;
    double after = log_prob(stepped, gctx.per_traj[i]).total;
    delta_sum += after - before;
  }
  out.delta_x = delta_sum / out.n_correct;
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-interaction score
// ---------------------------------------------------------------------------

struct GwhesPair {
  bool negative_side = false;  // pair against an incorrect response
  int other_traj = 0;
  int other_action = 0;
  int other_token = 0;   // masked-order index within the other trajectory
  int target_token = 0;  // masked-order index within the target action
  double alpha = 0.0;    // prediction-error similarity weight
  double feat_dot = 0.0; // context feature inner product
};

struct GwhesReport {
  int target_traj = 0;
  int target_action = 0;
  double p_plus = 0.0;
  double p_minus = 0.0;
  std::string p_weights_source;  // how p_plus/p_minus were chosen
  double negative_term = 0.0;
  double positive_term = 0.0;
  double g_value = 0.0;  // negative_term - positive_term
  std::vector<GwhesPair> pairs;
};

/// Default pair weights: mean |advantage| over the correct / incorrect sets.
inline std::pair<double, double> default_p_weights(const RolloutGroup& group) {
  double pp = 0.0, pm = 0.0;
  int np = 0, nm = 0;
  for (size_t i = 0; i < group.rewards.size(); ++i) {
    if (group.rewards[i] == 1.0) {
      pp += std::abs(group.advantages[i]);
      ++np;
    } else {
      pm += std::abs(group.advantages[i]);
      ++nm;
    }
  }
  return {np ? pp / np : 0.0, nm ? pm / nm : 0.0};
}

/**
 * Gradient-interaction score for a target correct action (traj i, action t):
 *
 *   G = p_minus * sum over incorrect tokens of alpha * <phi, phi'>
 *     - p_plus  * sum over correct  tokens of alpha * <phi, phi'>
 *
 * where alpha is the inner product of the one-hot-minus-softmax prediction
 * error vectors at the two contexts. For this linear-softmax model, -G scaled
 * by the group token count is exactly the first-order change of the target
 * action's log-likelihood under one unclipped ascent step when p_plus/p_minus
 * equal the (shared) advantage magnitudes.
 */
inline GwhesReport gwhes_score(const RolloutGroup& group,
                               const GroupContexts& gctx, int target_traj,
                               int target_action, const PolicyParams& p,
                               double p_plus, double p_minus,
                               const std::string& p_weights_source =
                                   "mean-abs-advantage") {
  GwhesReport rep;
  rep.target_traj = target_traj;
  rep.target_action = target_action;
  rep.p_plus = p_plus;
  rep.p_minus = p_minus;
  rep.p_weights_source = p_weights_source;

  const auto& target_ctxs = gctx.per_traj[static_cast<size_t>(target_traj)];
  // Prediction-error vectors e_y - pi for the target action's tokens.
  std::vector<std::vector<double>> target_err;
  std::vector<int> target_idx;
  std::vector<double> buf;
  for (size_t k = 0; k < target_ctxs.size(); ++k) {
    if (target_ctxs[k].action_index != target_action) continue;
    probs_into(p, target_ctxs[k].feats, buf);
    for (double& x : buf) x = -x;
    buf[static_cast<size_t>(target_ctxs[k].token)] += 1.0;
    target_err.push_back(buf);
    target_idx.push_back(static_cast<int>(k));
  }

  std::vector<double> other_err;
  for (size_t j = 0; j < gctx.per_traj.size(); ++j) {
    bool neg = group.rewards[j] != 1.0;
    double weight = neg ? p_minus : p_plus;
    const auto& ctxs = gctx.per_traj[j];
    for (size_t k2 = 0; k2 < ctxs.size(); ++k2) {
      probs_into(p, ctxs[k2].feats, other_err);
      for (double& x : other_err) x = -x;
      other_err[static_cast<size_t>(ctxs[k2].token)] += 1.0;
      for (size_t m = 0; m < target_err.size(); ++m) {
        double fd = feature_dot(
            target_ctxs[static_cast<size_t>(target_idx[m])].feats,
            ctxs[k2].feats);
        if (fd == 0.0) continue;
        double alpha = 0.0;
        for (size_t v = 0; v < other_err.size(); ++v)
          alpha += target_err[m][v] * other_err[v];
        GwhesPair pair;
        pair.negative_side = neg;
        pair.other_traj = static_cast<int>(j);
        pair.other_action = ctxs[k2].action_index;
        pair.other_token = static_cast<int>(k2);
        pair.target_token = target_idx[m];
        pair.alpha = alpha;
        pair.feat_dot = fd;
        rep.pairs.push_back(pair);
        if (neg)
          rep.negative_term += weight * alpha * fd;
        else
          rep.positive_term += weight * alpha * fd;
      }
    }
  }
  rep.g_value = rep.negative_term - rep.positive_term;
  return rep;
}

inline nlohmann::ordered_json to_json(const GwhesReport& r) {
  nlohmann::ordered_json pairs = nlohmann::ordered_json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"side", p.negative_side ? "neg" : "pos"},
                     {"other_traj", p.other_traj},
                     {"other_action", p.other_action},
                     {"other_token", p.other_token},
                     {"target_token", p.target_token},
                     {"alpha", p.alpha},
                     {"feat_dot", p.feat_dot}});
  }
  nlohmann::ordered_json j;
  j["target_traj"] = r.target_traj;
  j["target_action"] = r.target_action;
  j["p_plus"] = r.p_plus;
  j["p_minus"] = r.p_minus;
  j["p_weights_source"] = r.p_weights_source;
  j["negative_term"] = r.negative_term;
  j["positive_term"] = r.positive_term;
  j["g_value"] = r.g_value;
  j["pairs"] = pairs;
  return j;
}

// ---------------------------------------------------------------------------
// Step metrics
// ---------------------------------------------------------------------------

/**
 * One training step's diagnostics. frac_probe_delta_neg is -1 on steps where
 * no probe ran; mean_correct_loglik carries the last defined value when a
 * batch has no correct responses (the JSONL contract keeps every field
 * finite).
 */
struct StepMetrics {
  int step = 0;
  double mean_reward = 0.0;
  double mean_correct_loglik = 0.0;  // per masked token, correct responses
  double mean_token_entropy = 0.0;
  double grad_norm = 0.0;
  double max_ratio = 1.0;
  double mean_ratio = 1.0;
  double mean_response_length = 0.0;  // action tokens only
  double mean_valid_search = 0.0;
  double frac_probe_delta_neg = -1.0;
  Phase phase = Phase::none;
  // Step-level displacement bookkeeping (snapshot -> updated params).
  double mean_correct_delta = 0.0;
  double preserving_signed_drop = 0.0;
  int degenerate_groups = 0;
  std::string event;
};

inline nlohmann::ordered_json to_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["mean_reward"] = m.mean_reward;
  j["mean_correct_loglik"] = m.mean_correct_loglik;
  j["mean_token_entropy"] = m.mean_token_entropy;
  j["grad_norm"] = m.grad_norm;
  j["max_ratio"] = m.max_ratio;
  j["mean_ratio"] = m.mean_ratio;
  j["mean_response_length"] = m.mean_response_length;
  j["mean_valid_search"] = m.mean_valid_search;
  j["frac_probe_delta_neg"] = m.frac_probe_delta_neg;
  j["phase"] = to_string(m.phase);
  j["mean_correct_delta"] = m.mean_correct_delta;
  j["preserving_signed_drop"] = m.preserving_signed_drop;
  j["degenerate_groups"] = m.degenerate_groups;
  j["event"] = m.event;
  return j;
}

inline StepMetrics step_metrics_from_json(const nlohmann::json& j) {
  StepMetrics m;
  m.step = j.at("step").get<int>();
  m.mean_reward = j.at("mean_reward").get<double>();
  m.mean_correct_loglik = j.at("mean_correct_loglik").get<double>();
  m.mean_token_entropy = j.at("mean_token_entropy").get<double>();
  m.grad_norm = j.at("grad_norm").get<double>();
  m.max_ratio = j.at("max_ratio").get<double>();
  m.mean_ratio = j.at("mean_ratio").get<double>();
  m.mean_response_length = j.at("mean_response_length").get<double>();
  m.mean_valid_search = j.at("mean_valid_search").get<double>();
  m.frac_probe_delta_neg = j.at("frac_probe_delta_neg").get<double>();
  std::string ph = j.at("phase").get<std::string>();
  if (ph == "I")
    m.phase = Phase::I;
  else if (ph == "II")
    m.phase = Phase::II;
  else if (ph == "III")
    m.phase = Phase::III;
  else
    m.phase = Phase::none;
  m.mean_correct_delta = j.at("mean_correct_delta").get<double>();
  m.preserving_signed_drop = j.at("preserving_signed_drop").get<double>();
  m.degenerate_groups = j.at("degenerate_groups").get<int>();
  m.event = j.at("event").get<std::string>();
  return m;
}

}  // namespace lldlab
