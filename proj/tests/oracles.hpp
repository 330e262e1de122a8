#pragma once

/**
 * Independent oracles for the test suite.
 *
 * Everything here recomputes expected values through a path deliberately
 * different from the library: dense feature vectors instead of active-index
 * sparsity, probability-domain normalization in long double instead of
 * max-subtracted logsumexp, an independent context walker, and direct
 * transcriptions of the loss formulas. Oracles must stay independent of the
 * implementation they check.
 */

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lldlab/env.hpp"
#include "lldlab/grpo.hpp"
#include "lldlab/policy.hpp"
#include "lldlab/rng.hpp"
#include "lldlab/trajectory.hpp"
#include "lldlab/vocab.hpp"

namespace oracle {

using lldlab::Corpus;
using lldlab::FeatureMap;
using lldlab::Matrix;
using lldlab::PolicyParams;
using lldlab::RolloutGroup;
using lldlab::Segment;
using lldlab::SegmentKind;
using lldlab::Task;
using lldlab::Trajectory;
using lldlab::Vocab;

// ---------------------------------------------------------------------------
// Independent context walking and softmax
// ---------------------------------------------------------------------------

struct DenseContext {
  int token = 0;
  int action_index = 0;
  std::vector<double> phi;  // dense feature vector
};

/// Walk a trajectory and build dense context features for every action token,
/// without using the library's featurize/masked_contexts.
inline std::vector<DenseContext> dense_contexts(const Trajectory& traj,
                                                int window,
                                                bool includes_turn_index,
                                                int vocab_size, int max_turns,
                                                int pad_id) {
  int dim = window * vocab_size + (includes_turn_index ? max_turns : 0);
  std::vector<int> history;
  std::vector<DenseContext> out;
  int action_index = -1;
  for (const auto& seg : traj.segments) {
    if (seg.kind == SegmentKind::action) ++action_index;
    for (int tok : seg.token_ids) {
      if (seg.kind == SegmentKind::action) {
        DenseContext dc;
        dc.token = tok;
        dc.action_index = action_index;
        dc.phi.assign(static_cast<size_t>(dim), 0.0);
        for (int slot = 0; slot < window; ++slot) {
          int pos = static_cast<int>(history.size()) - window + slot;
          int ctx_tok = pos >= 0 ? history[static_cast<size_t>(pos)] : pad_id;
          dc.phi[static_cast<size_t>(slot * vocab_size + ctx_tok)] = 1.0;
        }
        if (includes_turn_index) {
          int t = action_index < max_turns ? action_index : max_turns - 1;
          dc.phi[static_cast<size_t>(window * vocab_size + t)] = 1.0;
        }
        out.push_back(std::move(dc));
      }
      history.push_back(tok);
    }
  }
  return out;
}

/// Probability-domain softmax with explicit normalization in long double.
inline std::vector<double> softmax_probs(const Matrix& w,
                                         const std::vector<double>& phi) {
  std::vector<long double> expz(static_cast<size_t>(w.rows));
  long double total = 0.0L;
  for (int v = 0; v < w.rows; ++v) {
    long double z = 0.0L;
    for (int f = 0; f < w.cols; ++f)
      z += static_cast<long double>(w.at(v, f)) * phi[static_cast<size_t>(f)];
    expz[static_cast<size_t>(v)] = std::exp(z);
    total += expz[static_cast<size_t>(v)];
  }
  std::vector<double> probs(static_cast<size_t>(w.rows));
  for (int v = 0; v < w.rows; ++v)
    probs[static_cast<size_t>(v)] =
        static_cast<double>(expz[static_cast<size_t>(v)] / total);
  return probs;
}

inline double log_prob_token(const Matrix& w, const std::vector<double>& phi,
                             int token) {
  return std::log(softmax_probs(w, phi)[static_cast<size_t>(token)]);
}

inline double entropy(const Matrix& w, const std::vector<double>& phi) {
  double h = 0.0;
  for (double p : softmax_probs(w, phi))
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

/// Total masked log-likelihood of a trajectory by direct enumeration.
inline double trajectory_log_prob(const Matrix& w,
                                  const std::vector<DenseContext>& ctxs) {
  double total = 0.0;
  for (const auto& c : ctxs) total += log_prob_token(w, c.phi, c.token);
  return total;
}

// ---------------------------------------------------------------------------
// Greedy decoding
// ---------------------------------------------------------------------------

/// Explicit argmax decoder with lowest-id tie-break.
inline int argmax_token(const Matrix& w, const std::vector<double>& phi) {
  int best = 0;
  double best_z = -1e300;
  for (int v = 0; v < w.rows; ++v) {
    double z = 0.0;
    for (int f = 0; f < w.cols; ++f)
      z += w.at(v, f) * phi[static_cast<size_t>(f)];
    if (z > best_z) {
      best_z = z;
      best = v;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

/// Direct arithmetic: (r - mean) / population std; zeros when uniform.
inline std::vector<double> advantages(const std::vector<double>& rewards) {
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  var /= static_cast<double>(rewards.size());
  if (var == 0.0) return std::vector<double>(rewards.size(), 0.0);
  double sd = std::sqrt(var);
  std::vector<double> out;
  for (double r : rewards) out.push_back((r - mu) / sd);
  return out;
}

// ---------------------------------------------------------------------------
// Loss formulas, transcribed directly
// ---------------------------------------------------------------------------

struct GroupDense {
  std::vector<std::vector<DenseContext>> per_traj;
  int total_masked = 0;
};

inline GroupDense dense_group(const RolloutGroup& g, int window,
                              bool includes_turn_index, int vocab_size,
                              int max_turns, int pad_id) {
  GroupDense out;
  for (const auto& t : g.trajectories) {
    out.per_traj.push_back(dense_contexts(t, window, includes_turn_index,
                                          vocab_size, max_turns, pad_id));
    out.total_masked += static_cast<int>(out.per_traj.back().size());
  }
  return out;
}

/// Clipped-surrogate loss by per-token enumeration.
inline double grpo_loss(const RolloutGroup& g, const GroupDense& gd,
                        const Matrix& w, double eps) {
  double objective = 0.0;
  for (size_t i = 0; i < gd.per_traj.size(); ++i) {
    double adv = g.advantages[i];
    for (size_t k = 0; k < gd.per_traj[i].size(); ++k) {
      const DenseContext& c = gd.per_traj[i][k];
      double lp_new = log_prob_token(w, c.phi, c.token);
      double ratio = std::exp(lp_new - g.old_logprobs[i][k]);
      double clipped = ratio < 1.0 - eps ? 1.0 - eps
                       : ratio > 1.0 + eps ? 1.0 + eps
                                           : ratio;
      objective += std::min(ratio * adv, clipped * adv);
    }
  }
  return -objective / gd.total_masked;
}

enum class RegKind { lld, llds, llds_ma };

/// Indices (masked order) of the final action's answer span.
inline std::vector<bool> answer_mask(const Trajectory& t, int masked_count) {
  std::vector<bool> mask(static_cast<size_t>(masked_count), false);
  const Segment& last = t.segments.back();
  if (last.kind == SegmentKind::action && last.answer_span) {
    int base = masked_count - last.length();
    for (int k = last.answer_span->lo; k <= last.answer_span->hi; ++k)
      mask[static_cast<size_t>(base + k)] = true;
  }
  return mask;
}

/// Likelihood-preservation penalty by direct transcription: preserving set =
/// non-negative advantages; optional response gate on the signed sum over
/// regularized tokens; optional final-answer exclusion; denominator counts
/// every masked token of preserving responses.
inline double reg_penalty(const RolloutGroup& g, const GroupDense& gd,
                          const Matrix& w, RegKind kind) {
  double denom = 0.0;
  double total = 0.0;
  for (size_t i = 0; i < gd.per_traj.size(); ++i) {
    if (g.advantages[i] < 0.0) continue;
    const auto& ctxs = gd.per_traj[i];
    denom += static_cast<double>(ctxs.size());
    std::vector<bool> excluded(ctxs.size(), false);
    if (kind == RegKind::llds_ma)
      excluded = answer_mask(g.trajectories[i], static_cast<int>(ctxs.size()));
    double signed_sum = 0.0;
    double hinge_sum = 0.0;
    for (size_t k = 0; k < ctxs.size(); ++k) {
      if (excluded[k]) continue;
      double diff =
          g.old_logprobs[i][k] - log_prob_token(w, ctxs[k].phi, ctxs[k].token);
      signed_sum += diff;
      if (diff > 0.0) hinge_sum += diff;
    }
    bool gate = kind == RegKind::lld || signed_sum > 0.0;
    if (gate) total += hinge_sum;
  }
  return denom > 0.0 ? total / denom : 0.0;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Central finite differences of an arbitrary scalar functional of the
/// weights. h defaults to the grid every gradient claim is pinned to.
template <typename LossFn>
inline Matrix finite_difference_grad(const PolicyParams& p, LossFn&& loss,
                                     double h = 1e-5) {
  Matrix grad(p.weights.rows, p.weights.cols);
  PolicyParams probe = p;
  for (size_t i = 0; i < p.weights.data.size(); ++i) {
    double w0 = p.weights.data[i];
    probe.weights.data[i] = w0 + h;
    double up = loss(probe);
    probe.weights.data[i] = w0 - h;
    double down = loss(probe);
    probe.weights.data[i] = w0;
    grad.data[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Max relative error between two gradients with an absolute floor on the
/// denominator (finite-difference noise dominates entries near zero).
inline double max_rel_error(const Matrix& a, const Matrix& b,
                            double floor = 1e-4) {
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double denom = std::max({std::abs(a.data[i]), std::abs(b.data[i]), floor});
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
  }
  return worst;
}

/// Score-function (baseline-normalized) policy-gradient direction:
/// grad of -(1/N) sum_i A_i sum_k lp_ik, via dense outer products.
inline Matrix reinforce_grad(const RolloutGroup& g, const GroupDense& gd,
                             const Matrix& w) {
  Matrix grad(w.rows, w.cols);
  for (size_t i = 0; i < gd.per_traj.size(); ++i) {
    double adv = g.advantages[i];
    if (adv == 0.0) continue;
    for (const auto& c : gd.per_traj[i]) {
      std::vector<double> probs = softmax_probs(w, c.phi);
      double coeff = -adv / gd.total_masked;
      for (int v = 0; v < w.rows; ++v) {
        double err = (v == c.token ? 1.0 : 0.0) - probs[static_cast<size_t>(v)];
        for (int f = 0; f < w.cols; ++f)
          grad.at(v, f) += coeff * err * c.phi[static_cast<size_t>(f)];
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Scripted environment solver
// ---------------------------------------------------------------------------

/// Demonstrates a reward-1 action sequence for a task (searches the query
/// entity, follows one hop if needed, answers the gold once retrievable).
/// Returns the finished trajectory so tests can assert reward == 1.
inline Trajectory solve_task(const Task& task, const Corpus& corpus,
                             const Vocab& v) {
  Trajectory traj;
  traj.query_id = task.id;
  Segment prompt;
  prompt.kind = SegmentKind::prompt;
  prompt.token_ids = task.query;
  traj.segments.push_back(prompt);

  int search_target = -1;
  for (int tok : task.query)
    if (corpus.find(tok)) search_target = tok;

  // Search once per hop (following the first retrieved document down the
  // chain), then answer. The gold must be visible in the last feedback, so
  // the demonstrated sequence relies only on retrievable information.
  bool gold_retrieved = false;
  for (int turn = 0; turn < task.max_turns; ++turn) {
    Segment action;
    action.kind = SegmentKind::action;
    if (turn < task.hops) {
      action.token_ids = {v.search_open, search_target, v.search_close};
    } else {
      if (!gold_retrieved) throw std::runtime_error("gold not retrievable");
      action.token_ids = {v.answer_open, task.gold, v.answer_close};
    }
    lldlab::StepResult sr =
        lldlab::env_step(task, corpus, v, turn, action);
    traj.segments.push_back(action);
    if (sr.terminal) {
      traj.terminal_reason = sr.reason;
      break;
    }
    for (size_t d = 1; d + 1 < sr.feedback.token_ids.size(); ++d)
      gold_retrieved |= sr.feedback.token_ids[d] == task.gold;
    search_target = sr.feedback.token_ids[1];
    traj.segments.push_back(sr.feedback);
  }
  finalize_trajectory(traj);
  return traj;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

inline double pearson(const std::vector<double>& x,
                      const std::vector<double>& y) {
  double mx = 0.0, my = 0.0;
  int n = static_cast<int>(x.size());
  for (int i = 0; i < n; ++i) {
    mx += x[static_cast<size_t>(i)];
    my += y[static_cast<size_t>(i)];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (int i = 0; i < n; ++i) {
    double dx = x[static_cast<size_t>(i)] - mx;
    double dy = y[static_cast<size_t>(i)] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return sxy / std::sqrt(sxx * syy);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace oracle
