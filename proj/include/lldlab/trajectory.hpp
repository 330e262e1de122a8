#pragma once

/**
 * Trajectory data model.
 *
 * A trajectory is one prompt segment followed by alternating action/feedback
 * segments (the final action has no feedback). The flat concatenation of all
 * segment tokens is the single likelihood axis; the loss mask is true exactly
 * on action tokens, so feedback shapes the conditioning context but never
 * contributes a loss entry.
 *
 * Types are immutable after construction by convention: rollout code builds
 * them once, every later consumer reads them.
 */

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "lldlab/vocab.hpp"

namespace lldlab {

enum class SegmentKind { prompt, action, feedback };

inline const char* to_string(SegmentKind k) {
  switch (k) {
    case SegmentKind::prompt: return "prompt";
    case SegmentKind::action: return "action";
    case SegmentKind::feedback: return "feedback";
  }
  return "?";
}

/// Closed index range [lo, hi] within a segment.
struct Span {
  int lo = 0;
  int hi = 0;
};

struct Segment {
  SegmentKind kind = SegmentKind::prompt;
  std::vector<int> token_ids;
  std::optional<Span> answer_span;  // action segments only

  int length() const { return static_cast<int>(token_ids.size()); }
};

enum class TerminalReason { answered, max_turns, invalid };

inline const char* to_string(TerminalReason r) {
  switch (r) {
    case TerminalReason::answered: return "answered";
    case TerminalReason::max_turns: return "max_turns";
    case TerminalReason::invalid: return "invalid";
  }
  return "?";
}

struct Trajectory {
  int64_t query_id = 0;
  std::vector<Segment> segments;  // [prompt, action, feedback, ..., action]
  std::vector<uint8_t> loss_mask; // over the flat concatenation
  int turn_count = 0;             // number of action segments
  TerminalReason terminal_reason = TerminalReason::max_turns;

  int total_tokens() const {
    int n = 0;
    for (const auto& s : segments) n += s.length();
    return n;
  }

  int masked_token_count() const {
    int n = 0;
    for (uint8_t m : loss_mask) n += m;
    return n;
  }

  std::vector<int> flat_tokens() const {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(total_tokens()));
    for (const auto& s : segments)
      out.insert(out.end(), s.token_ids.begin(), s.token_ids.end());
    return out;
  }

  /// Flat offset of the first token of segment `si`.
  int segment_offset(size_t si) const {
    int off = 0;
    for (size_t i = 0; i < si; ++i) off += segments[i].length();
    return off;
  }
};

/// Derive the canonical loss mask (true exactly on action tokens) and turn
/// count from the segment list.
inline void finalize_trajectory(Trajectory& t) {
  t.loss_mask.clear();
  t.turn_count = 0;
  for (const auto& s : t.segments) {
    bool on = s.kind == SegmentKind::action;
    if (on) ++t.turn_count;
    t.loss_mask.insert(t.loss_mask.end(), static_cast<size_t>(s.length()),
                       on ? 1 : 0);
  }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Check every trajectory invariant. Violations are data, not failures: the
/// returned strings name the broken invariant and, where applicable, the flat
/// token index.
inline std::vector<std::string> validate_trajectory(const Trajectory& t,
                                                    const Vocab& v) {
  std::vector<std::string> out;
  if (t.segments.empty() || t.segments.front().kind != SegmentKind::prompt) {
    out.push_back("missing-leading-prompt");
  }
  int prompt_count = 0;
  int action_count = 0;
  SegmentKind prev = SegmentKind::feedback;
  for (size_t i = 0; i < t.segments.size(); ++i) {
    const Segment& s = t.segments[i];
    if (s.kind == SegmentKind::prompt) {
      ++prompt_count;
      if (i != 0) out.push_back("prompt-not-leading @ seg " + std::to_string(i));
    }
    if (s.kind == SegmentKind::action) {
      ++action_count;
      if (i != 0 && prev == SegmentKind::action)
        out.push_back("action-follows-action @ seg " + std::to_string(i));
    }
    if (s.kind == SegmentKind::feedback) {
      if (prev != SegmentKind::action)
        out.push_back("feedback-without-action @ seg " + std::to_string(i));
      if (s.answer_span) out.push_back("span-on-feedback");
      if (i + 1 == t.segments.size())
        out.push_back("trailing-feedback @ seg " + std::to_string(i));
    }
    if (s.kind == SegmentKind::prompt && s.answer_span)
      out.push_back("span-on-prompt");
    if (s.answer_span) {
      if (s.answer_span->lo < 0 || s.answer_span->hi >= s.length() ||
          s.answer_span->lo > s.answer_span->hi)
        out.push_back("span-out-of-bounds @ seg " + std::to_string(i));
    }
    for (int k = 0; k < s.length(); ++k) {
      if (!v.contains(s.token_ids[static_cast<size_t>(k)]))
        out.push_back("token-out-of-vocab @ idx " +
                      std::to_string(t.segment_offset(i) + k));
    }
    prev = s.kind;
  }
  if (prompt_count > 1) out.push_back("multiple-prompts");
  if (t.turn_count != action_count) out.push_back("turn-count-mismatch");

  if (static_cast<int>(t.loss_mask.size()) != t.total_tokens()) {
    out.push_back("mask-length-mismatch");
  } else {
    int pos = 0;
    for (const auto& s : t.segments) {
      bool should = s.kind == SegmentKind::action;
      for (int k = 0; k < s.length(); ++k, ++pos) {
        bool is = t.loss_mask[static_cast<size_t>(pos)] != 0;
        if (is && !should) {
          out.push_back(std::string("mask-on-") + to_string(s.kind) + " @ idx " +
                        std::to_string(pos));
        } else if (!is && should) {
          out.push_back("mask-off-action @ idx " + std::to_string(pos));
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rollout groups
// ---------------------------------------------------------------------------

/**
 * G trajectories for one query with rewards, group-normalized advantages and
 * the per-token log-probabilities recorded under the parameter snapshot the
 * rollouts were sampled from. old_logprobs[i] is aligned to trajectory i's
 * masked tokens in flat order.
 */
struct RolloutGroup {
  int64_t query_id = 0;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<std::vector<double>> old_logprobs;
  bool degenerate = false;   // all rewards equal
  uint64_t params_version = 0;  // snapshot the rollouts/old_logprobs came from

  int size() const { return static_cast<int>(trajectories.size()); }

  int total_masked_tokens() const {
    int n = 0;
    for (const auto& t : trajectories) n += t.masked_token_count();
    return n;
  }
};

// ---------------------------------------------------------------------------
// JSON (schema: {query_id, segments:[{kind, tokens, answer_span}], terminal_reason})
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const Trajectory& t) {
  nlohmann::ordered_json segs = nlohmann::ordered_json::array();
  for (const auto& s : t.segments) {
    nlohmann::ordered_json js;
    js["kind"] = to_string(s.kind);
    js["tokens"] = s.token_ids;
    if (s.answer_span)
      js["answer_span"] = {s.answer_span->lo, s.answer_span->hi};
    else
      js["answer_span"] = nullptr;
    segs.push_back(js);
  }
  nlohmann::ordered_json j;
  j["query_id"] = t.query_id;
  j["segments"] = segs;
  j["terminal_reason"] = to_string(t.terminal_reason);
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.query_id = j.at("query_id").get<int64_t>();
  for (const auto& js : j.at("segments")) {
    Segment s;
    std::string kind = js.at("kind").get<std::string>();
    if (kind == "prompt")
      s.kind = SegmentKind::prompt;
    else if (kind == "action")
      s.kind = SegmentKind::action;
    else if (kind == "feedback")
      s.kind = SegmentKind::feedback;
    else
      throw std::runtime_error("unknown segment kind: " + kind);
    s.token_ids = js.at("tokens").get<std::vector<int>>();
    if (!js.at("answer_span").is_null()) {
      auto span = js.at("answer_span").get<std::vector<int>>();
      if (span.size() != 2) throw std::runtime_error("bad answer_span");
      s.answer_span = Span{span[0], span[1]};
    }
    t.segments.push_back(std::move(s));
  }
  std::string reason = j.at("terminal_reason").get<std::string>();
  if (reason == "answered")
    t.terminal_reason = TerminalReason::answered;
  else if (reason == "max_turns")
    t.terminal_reason = TerminalReason::max_turns;
  else if (reason == "invalid")
    t.terminal_reason = TerminalReason::invalid;
  else
    throw std::runtime_error("unknown terminal_reason: " + reason);
  finalize_trajectory(t);
  return t;
}

}  // namespace lldlab
