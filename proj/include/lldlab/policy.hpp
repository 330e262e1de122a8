#pragma once

/**
 * Analytic autoregressive policy.
 *
 * A linear-softmax model over fixed one-hot context features: the logit of
 * token v given a context is the sum of the weight columns selected by the
 * active features. The feature map is a sliding window of the last `window`
 * tokens (left-padded with the pad id) plus an optional one-hot turn-index
 * block. Because the model is linear in its weights,
 *
 *     d log pi(y | ctx) / dW = (e_y - pi(.|ctx)) (x) phi(ctx)
 *
 * holds exactly, which makes finite-difference checks and first-order
 * kernel analyses hard tests rather than approximations.
 *
 * All arithmetic is log-domain with max-subtracted logsumexp; probabilities
 * are only ever formed by exponentiating normalized log-probabilities.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "lldlab/rng.hpp"
#include "lldlab/trajectory.hpp"
#include "lldlab/vocab.hpp"

namespace lldlab {

// ---------------------------------------------------------------------------
// Feature map
// ---------------------------------------------------------------------------

struct FeatureMap {
  int window = 2;
  bool includes_turn_index = true;
  int vocab_size = 0;
  int turn_blocks = 0;  // size of the turn one-hot block (max turns)

  int dim() const {
    return window * vocab_size + (includes_turn_index ? turn_blocks : 0);
  }

  int active_count() const { return window + (includes_turn_index ? 1 : 0); }
};

inline FeatureMap make_feature_map(int window, bool includes_turn_index,
                                   int vocab_size, int max_turns) {
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  if (includes_turn_index && max_turns < 1)
    throw std::invalid_argument("max_turns must be >= 1 for turn features");
  return FeatureMap{window, includes_turn_index, vocab_size, max_turns};
}

/**
 * Active feature indices for a context. The context is the full token history;
 * only the trailing `window` tokens matter, with pad filling missing slots.
 * Slot 0 is the oldest window position. One index per one-hot block, so the
 * dense vector has unit entries at exactly these positions and L2 norm
 * sqrt(active_count).
 */
inline std::vector<int> featurize(const FeatureMap& fm, const Vocab& v,
                                  const std::vector<int>& context, int turn) {
  std::vector<int> active;
  active.reserve(static_cast<size_t>(fm.active_count()));
  int n = static_cast<int>(context.size());
  for (int slot = 0; slot < fm.window; ++slot) {
    int pos = n - fm.window + slot;
    int tok = pos >= 0 ? context[static_cast<size_t>(pos)] : v.pad;
    if (tok < 0 || tok >= fm.vocab_size)
      throw std::out_of_range("token-out-of-vocab");
    active.push_back(slot * fm.vocab_size + tok);
  }
  if (fm.includes_turn_index) {
    int t = std::clamp(turn, 0, fm.turn_blocks - 1);
    active.push_back(fm.window * fm.vocab_size + t);
  }
  return active;
}

/// Dense feature vector; handy for norm checks and kernel computations.
inline std::vector<double> dense_features(const FeatureMap& fm,
                                          const std::vector<int>& active) {
  std::vector<double> out(static_cast<size_t>(fm.dim()), 0.0);
  for (int f : active) out[static_cast<size_t>(f)] = 1.0;
  return out;
}

/// Inner product of two active-index feature vectors (= number of shared
/// active indices, since entries are unit).
inline double feature_dot(const std::vector<int>& a, const std::vector<int>& b) {
  double dot = 0.0;
  for (int fa : a)
    for (int fb : b)
      if (fa == fb) dot += 1.0;
  return dot;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const {
    return data[static_cast<size_t>(r) * cols + c];
  }

  void fill(double x) { std::fill(data.begin(), data.end(), x); }

  double frobenius_norm() const {
    double s = 0.0;
    for (double x : data) s += x * x;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

struct PolicyParams {
  Matrix weights;        // vocab_size x fm.dim()
  uint64_t version = 0;  // bumped on every optimizer update

  static PolicyParams zeros(const FeatureMap& fm) {
    PolicyParams p;
    p.weights = Matrix(fm.vocab_size, fm.dim());
    return p;
  }

  static PolicyParams random(const FeatureMap& fm, double scale, Rng& rng) {
    PolicyParams p = zeros(fm);
    for (double& w : p.weights.data) w = scale * rng.next_gauss();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Log-probabilities
// ---------------------------------------------------------------------------

/// logits[v] = sum of the active weight columns for row v.
inline void logits_into(const PolicyParams& p, const std::vector<int>& active,
                        std::vector<double>& out) {
  out.assign(static_cast<size_t>(p.weights.rows), 0.0);
  for (int f : active) {
    const double* col = p.weights.data.data() + f;
    for (int v = 0; v < p.weights.rows; ++v)
      out[static_cast<size_t>(v)] += col[static_cast<size_t>(v) * p.weights.cols];
  }
}

/// In-place logits -> log-softmax. Throws "numeric-overflow" on non-finite
/// input so callers can abort the step instead of propagating NaNs.
inline void log_softmax_inplace(std::vector<double>& z) {
  double mx = z[0];
  for (double x : z) {
    if (!std::isfinite(x)) throw std::runtime_error("numeric-overflow");
    mx = std::max(mx, x);
  }
  double sum = 0.0;
  for (double x : z) sum += std::exp(x - mx);
  double lse = mx + std::log(sum);
  for (double& x : z) x -= lse;
}

/// Token entropy in nats for the softmax at a context; always in [0, log V].
inline double entropy(const PolicyParams& p, const std::vector<int>& active) {
  std::vector<double> lp;
  logits_into(p, active, lp);
  log_softmax_inplace(lp);
  double h = 0.0;
  for (double l : lp) h -= std::exp(l) * l;
  return std::max(0.0, h);
}

/**
 * One masked token on the likelihood axis: its id, flat position, the index
 * of the action segment it belongs to (the turn), and its context features.
 * Contexts depend only on the recorded trajectory, so they are computed once
 * and reused across parameter settings.
 */
struct TokenContext {
  int token = 0;
  int flat_pos = 0;
  int action_index = 0;
  std::vector<int> feats;
};

inline std::vector<TokenContext> masked_contexts(const Trajectory& traj,
                                                 const FeatureMap& fm,
                                                 const Vocab& v) {
  std::vector<TokenContext> out;
  std::vector<int> history;
  history.reserve(static_cast<size_t>(traj.total_tokens()));
  int action_index = -1;
  int flat = 0;
  for (const auto& seg : traj.segments) {
    if (seg.kind == SegmentKind::action) ++action_index;
    for (int tok : seg.token_ids) {
      if (seg.kind == SegmentKind::action) {
        TokenContext tc;
        tc.token = tok;
        tc.flat_pos = flat;
        tc.action_index = action_index;
        tc.feats = featurize(fm, v, history, action_index);
        out.push_back(std::move(tc));
      }
      history.push_back(tok);
      ++flat;
    }
  }
  return out;
}

struct LogProbResult {
  std::vector<double> per_token;  // aligned to masked_contexts order
  double total = 0.0;
};

inline LogProbResult log_prob(const PolicyParams& p,
                              const std::vector<TokenContext>& contexts) {
  LogProbResult r;
  r.per_token.reserve(contexts.size());
  std::vector<double> lp;
  for (const auto& tc : contexts) {
    logits_into(p, tc.feats, lp);
    log_softmax_inplace(lp);
    double l = lp[static_cast<size_t>(tc.token)];
    r.per_token.push_back(l);
    r.total += l;
  }
  return r;
}

/// Per-token log-probabilities over the masked tokens of a trajectory plus
/// their sum. Feedback tokens contribute no entry but shift the contexts of
/// everything after them.
inline LogProbResult log_prob(const PolicyParams& p, const FeatureMap& fm,
                              const Vocab& v, const Trajectory& traj) {
  return log_prob(p, masked_contexts(traj, fm, v));
}

/// Total log-probability of one action segment (action index t).
inline double action_log_prob(const PolicyParams& p,
                              const std::vector<TokenContext>& contexts,
                              int action_index) {
  std::vector<double> lp;
  double total = 0.0;
  for (const auto& tc : contexts) {
    if (tc.action_index != action_index) continue;
    logits_into(p, tc.feats, lp);
    log_softmax_inplace(lp);
    total += lp[static_cast<size_t>(tc.token)];
  }
  return total;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// probs[v] = pi(v | ctx); also returns log-probs if wanted via out param.
inline void probs_into(const PolicyParams& p, const std::vector<int>& active,
                       std::vector<double>& out) {
  logits_into(p, active, out);
  log_softmax_inplace(out);
  for (double& x : out) x = std::exp(x);
}

/// grad += coeff * d log pi(token|ctx) / dW, using the closed form
/// (e_token - pi) (x) phi. phi is one-hot-block sparse, so this touches
/// active_count columns.
inline void accumulate_logprob_grad(Matrix& grad, double coeff, int token,
                                    const std::vector<double>& probs,
                                    const std::vector<int>& feats) {
  for (int f : feats) {
    double* col = grad.data.data() + f;
    for (int v = 0; v < grad.rows; ++v)
      col[static_cast<size_t>(v) * grad.cols] -= coeff * probs[static_cast<size_t>(v)];
    col[static_cast<size_t>(token) * grad.cols] += coeff;
  }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/**
 * Autoregressively sample one action segment. Generation halts after emitting
 * a stop token or at max_len. temperature <= 0 selects greedy decoding with
 * lowest-id tie-break; the tau -> 0 limit of sampling agrees with it whenever
 * the argmax is unique.
 */
inline Segment sample_action(const PolicyParams& p, const FeatureMap& fm,
                             const Vocab& v, const std::vector<int>& context,
                             int turn, const std::vector<int>& stops,
                             int max_len, double temperature, Rng& rng) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  Segment seg;
  seg.kind = SegmentKind::action;
  std::vector<int> history = context;
  std::vector<double> z;
  std::vector<double> probs;
  for (int step = 0; step < max_len; ++step) {
    auto feats = featurize(fm, v, history, turn);
    int tok;
    if (temperature <= 0.0) {
      logits_into(p, feats, z);
      tok = 0;
      for (int i = 1; i < static_cast<int>(z.size()); ++i)
        if (z[static_cast<size_t>(i)] > z[static_cast<size_t>(tok)]) tok = i;
    } else {
      logits_into(p, feats, z);
      for (double& x : z) x /= temperature;
      log_softmax_inplace(z);
      probs.resize(z.size());
      for (size_t i = 0; i < z.size(); ++i) probs[i] = std::exp(z[i]);
      tok = rng.next_categorical(probs);
    }
    seg.token_ids.push_back(tok);
    history.push_back(tok);
    if (std::find(stops.begin(), stops.end(), tok) != stops.end()) break;
  }
  return seg;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  Vocab vocab;
  FeatureMap feature_map;
  PolicyParams params;
};

inline nlohmann::ordered_json to_json(const Checkpoint& c) {
  nlohmann::ordered_json j;
  j["vocab"] = to_json(c.vocab);
  j["feature_map"] = {{"window", c.feature_map.window},
                      {"includes_turn_index", c.feature_map.includes_turn_index},
                      {"turn_blocks", c.feature_map.turn_blocks}};
  j["weights"] = c.params.weights.data;
  j["version"] = c.params.version;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  c.vocab = vocab_from_json(j.at("vocab"));
  const auto& f = j.at("feature_map");
  c.feature_map = make_feature_map(f.at("window").get<int>(),
                                   f.at("includes_turn_index").get<bool>(),
                                   c.vocab.size(), f.at("turn_blocks").get<int>());
  c.params.weights = Matrix(c.vocab.size(), c.feature_map.dim());
  auto w = j.at("weights").get<std::vector<double>>();
  if (w.size() != c.params.weights.data.size())
    throw std::runtime_error("checkpoint weight size mismatch");
  c.params.weights.data = std::move(w);
  c.params.version = j.at("version").get<uint64_t>();
  return c;
}

}  // namespace lldlab
