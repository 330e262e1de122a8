#pragma once

/**
 * Synthetic search-then-answer environment.
 *
 * A corpus maps entity tokens to fact tokens; retrieval for a query containing
 * a known entity returns that entity's fact plus its two decoy facts, always
 * in the same order. A task is a prompt (aspect marker + entity), a gold
 * answer token, and a turn budget. The protocol:
 *
 *   <search> q... </search>   -> <information> doc1 doc2 doc3 </information>
 *   <answer> a... </answer>   -> terminal; exact match against [gold]
 *   anything else             -> corrective feedback (fixed reserved message
 *                                 wrapped in information tags)
 *
 * Everything is deterministic in (corpus seed, task, action sequence).
 *
 * The aspect marker selects WHICH of the three retrieved documents is gold,
 * so tasks generated on the same entity with different aspects share the same
 * correct first search query while disagreeing on the answer. The
 * prefix_share knob controls how much of a task set is generated this way.
 */

#include <array>
#include <optional>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "lldlab/rng.hpp"
#include "lldlab/trajectory.hpp"
#include "lldlab/vocab.hpp"

namespace lldlab {

constexpr int kDocsPerQuery = 3;
constexpr int kAspectCount = 3;

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct CorpusEntry {
  int entity = -1;
  int fact = -1;
  std::array<int, 2> distractors = {-1, -1};
  int hop_link = -1;  // entity this one chains to, or -1
};

struct Corpus {
  std::vector<CorpusEntry> entries;       // ordered by entity id
  std::array<int, kAspectCount> aspects;  // prompt marker tokens

  const CorpusEntry* find(int entity) const {
    for (const auto& e : entries)
      if (e.entity == entity) return &e;
    return nullptr;
  }
};

/**
 * Generate a corpus over the pool tokens of `v`. Layout: the first three pool
 * tokens are aspect markers, the next `entities` are entity tokens, the rest
 * is the fact pool. Each entity gets one fact and two decoys drawn from the
 * fact pool; decoys never equal the entity's own fact. With hop_fraction > 0,
 * a prefix of the entities is chained to strictly higher-indexed entities
 * (hence acyclic), and a chained entity's "fact" is its link target so that a
 * first search reveals the entity to search next.
 */
inline Corpus make_corpus(const Vocab& v, int entities, double hop_fraction,
                          uint64_t seed) {
  int pool_begin = v.first_pool_id();
  int pool_size = v.size() - pool_begin;
  if (pool_size < kAspectCount + entities + entities + 2)
    throw std::invalid_argument("vocab too small for requested corpus");
  Rng rng(mix_seed(seed, {static_cast<uint64_t>(Stream::corpus)}));

  Corpus c;
  for (int a = 0; a < kAspectCount; ++a)
    c.aspects[static_cast<size_t>(a)] = pool_begin + a;
  int entity_begin = pool_begin + kAspectCount;
  int fact_begin = entity_begin + entities;
  int fact_count = v.size() - fact_begin;

  int hop_sources = static_cast<int>(hop_fraction * entities);
  hop_sources = std::min(hop_sources, entities - 1);

  for (int i = 0; i < entities; ++i) {
    CorpusEntry e;
    e.entity = entity_begin + i;
    if (i < hop_sources) {
      // Chain forward; the fact IS the linked entity token.
      e.hop_link = entity_begin + i + 1 + rng.next_below(entities - i - 1);
      e.fact = e.hop_link;
    } else {
      e.fact = fact_begin + rng.next_below(fact_count);
    }
    do {
      e.distractors[0] = fact_begin + rng.next_below(fact_count);
    } while (e.distractors[0] == e.fact);
    do {
      e.distractors[1] = fact_begin + rng.next_below(fact_count);
    } while (e.distractors[1] == e.fact || e.distractors[1] == e.distractors[0]);
    c.entries.push_back(e);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

struct Task {
  int64_t id = 0;
  std::vector<int> query;  // prompt tokens: [aspect, entity]
  int gold = -1;
  int hops = 1;  // 1 or 2
  int max_turns = 2;
};

/// Retrieval: first known entity in the query wins; misses return three
/// no-hit tokens. Fixed order [fact, decoy1, decoy2].
inline std::array<int, kDocsPerQuery> retrieve(const Corpus& c, const Vocab& v,
                                               const std::vector<int>& query) {
  for (int tok : query) {
    const CorpusEntry* e = c.find(tok);
    if (e) return {e->fact, e->distractors[0], e->distractors[1]};
  }
  return {v.nohit, v.nohit, v.nohit};
}

struct TaskGenConfig {
  int num_tasks = 64;
  double hops_mix = 0.0;      // fraction of 2-hop tasks
  double prefix_share = 0.0;  // fraction with a non-default aspect draw
  int max_turns = 2;
};

/**
 * Generate tasks. Entities are cycled so that any set larger than the corpus
 * guarantees same-entity collisions; a prefix_share draw picks the aspect
 * uniformly (so colliding tasks disagree on gold), otherwise aspect 0 (gold =
 * the entity's fact). Two-hop tasks start from a chained entity and their
 * gold lives one link away.
 */
inline std::vector<Task> make_tasks(const Corpus& c, const Vocab&,
                                    const TaskGenConfig& cfg, uint64_t seed,
                                    Stream stream = Stream::tasks) {
  Rng rng(mix_seed(seed, {static_cast<uint64_t>(stream)}));
  std::vector<int> hop_sources;
  for (size_t i = 0; i < c.entries.size(); ++i)
    if (c.entries[i].hop_link >= 0) hop_sources.push_back(static_cast<int>(i));

  std::vector<Task> out;
  for (int i = 0; i < cfg.num_tasks; ++i) {
    Task t;
    t.id = i;
    t.max_turns = cfg.max_turns;
    bool two_hop = !hop_sources.empty() && rng.next_double() < cfg.hops_mix;
    int ei;
    if (two_hop) {
      ei = hop_sources[static_cast<size_t>(
          rng.next_below(static_cast<int>(hop_sources.size())))];
      t.hops = 2;
    } else {
      ei = i % static_cast<int>(c.entries.size());
      t.hops = 1;
    }
    int aspect = rng.next_double() < cfg.prefix_share
                     ? rng.next_below(kAspectCount)
                     : 0;
    const CorpusEntry& e = c.entries[static_cast<size_t>(ei)];
    t.query = {c.aspects[static_cast<size_t>(aspect)], e.entity};
    const CorpusEntry* target = &e;
    if (two_hop) {
      target = c.find(e.hop_link);
      if (!target) throw std::logic_error("dangling hop link");
    }
    std::array<int, kDocsPerQuery> docs = {target->fact, target->distractors[0],
                                           target->distractors[1]};
    t.gold = docs[static_cast<size_t>(aspect)];
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Action parsing
// ---------------------------------------------------------------------------

struct ParsedAction {
  enum class Kind { search, answer, invalid };
  Kind kind = Kind::invalid;
  std::vector<int> payload;        // query or answer tokens
  std::optional<Span> answer_span; // enclosed range, answers only
};

/**
 * First well-formed tag pair wins: scan left to right, and at the first
 * opening tag whose matching closer appears later, classify by that tag.
 * Anything else, including bare tokens and unclosed tags, is invalid.
 */
inline ParsedAction parse_action(const Segment& seg, const Vocab& v) {
  if (seg.kind != SegmentKind::action)
    throw std::invalid_argument("parse_action expects an action segment");
  const auto& toks = seg.token_ids;
  int n = static_cast<int>(toks.size());
  for (int i = 0; i < n; ++i) {
    int open = toks[static_cast<size_t>(i)];
    int close;
    ParsedAction::Kind kind;
    if (open == v.search_open) {
      close = v.search_close;
      kind = ParsedAction::Kind::search;
    } else if (open == v.answer_open) {
      close = v.answer_close;
      kind = ParsedAction::Kind::answer;
    } else {
      continue;
    }
    for (int j = i + 1; j < n; ++j) {
      if (toks[static_cast<size_t>(j)] != close) continue;
      ParsedAction p;
      p.kind = kind;
      p.payload.assign(toks.begin() + i + 1, toks.begin() + j);
      if (kind == ParsedAction::Kind::answer && j > i + 1)
        p.answer_span = Span{i + 1, j - 1};
      return p;
    }
    // Opening tag without closer: keep scanning for a later well-formed pair.
  }
  return ParsedAction{};
}

// ---------------------------------------------------------------------------
// Transition
// ---------------------------------------------------------------------------

struct StepResult {
  bool terminal = false;
  TerminalReason reason = TerminalReason::max_turns;
  Segment feedback;  // valid when !terminal
};

/**
 * Environment transition for the action at turn index `turn` (0-based,
 * pre: turn < task.max_turns). Applies the answer span to the segment when
 * the action parses as an answer.
 */
inline StepResult env_step(const Task& task, const Corpus& c, const Vocab& v,
                           int turn, Segment& action) {
  if (turn >= task.max_turns)
    throw std::invalid_argument("env_step past turn budget");
  ParsedAction pa = parse_action(action, v);
  StepResult r;
  if (pa.kind == ParsedAction::Kind::answer) {
    action.answer_span = pa.answer_span;
    r.terminal = true;
    r.reason = TerminalReason::answered;
    return r;
  }
  bool last_turn = turn + 1 >= task.max_turns;
  if (last_turn) {
    r.terminal = true;
    r.reason = pa.kind == ParsedAction::Kind::invalid ? TerminalReason::invalid
                                                      : TerminalReason::max_turns;
    return r;
  }
  r.terminal = false;
  r.feedback.kind = SegmentKind::feedback;
  if (pa.kind == ParsedAction::Kind::search) {
    auto docs = retrieve(c, v, pa.payload);
    r.feedback.token_ids = {v.info_open, docs[0], docs[1], docs[2], v.info_close};
  } else {
    r.feedback.token_ids = v.invalid_feedback();
  }
  return r;
}

/// Exact-match reward: 1 iff the trajectory answered and the final action's
/// answer span is exactly [gold].
inline double reward(const Trajectory& t, const Task& task) {
  if (t.terminal_reason != TerminalReason::answered) return 0.0;
  if (t.segments.empty()) return 0.0;
  const Segment& last = t.segments.back();
  if (last.kind != SegmentKind::action || !last.answer_span) return 0.0;
  const Span& s = *last.answer_span;
  if (s.hi != s.lo) return 0.0;
  return last.token_ids[static_cast<size_t>(s.lo)] == task.gold ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// Feedback inspection helpers (used by diagnostics)
// ---------------------------------------------------------------------------

/// Document tokens of an information feedback segment, if it has the
/// canonical <information> d1 d2 d3 </information> shape.
inline std::optional<std::array<int, kDocsPerQuery>> info_docs(
    const Segment& seg, const Vocab& v) {
  if (seg.kind != SegmentKind::feedback) return std::nullopt;
  if (seg.length() != kDocsPerQuery + 2) return std::nullopt;
  if (seg.token_ids.front() != v.info_open ||
      seg.token_ids.back() != v.info_close)
    return std::nullopt;
  return std::array<int, kDocsPerQuery>{seg.token_ids[1], seg.token_ids[2],
                                        seg.token_ids[3]};
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const Corpus& c) {
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const auto& e : c.entries) {
    entries.push_back({{"entity", e.entity},
                       {"fact", e.fact},
                       {"distractors", e.distractors},
                       {"hop_link", e.hop_link}});
  }
  return nlohmann::ordered_json{{"aspects", c.aspects}, {"entries", entries}};
}

inline Corpus corpus_from_json(const nlohmann::json& j) {
  Corpus c;
  auto a = j.at("aspects").get<std::vector<int>>();
  if (a.size() != kAspectCount) throw std::runtime_error("bad aspects");
  std::copy(a.begin(), a.end(), c.aspects.begin());
  for (const auto& je : j.at("entries")) {
    CorpusEntry e;
    e.entity = je.at("entity").get<int>();
    e.fact = je.at("fact").get<int>();
    auto d = je.at("distractors").get<std::vector<int>>();
    if (d.size() != 2) throw std::runtime_error("bad distractors");
    e.distractors = {d[0], d[1]};
    e.hop_link = je.at("hop_link").get<int>();
    c.entries.push_back(e);
  }
  return c;
}

inline nlohmann::ordered_json to_json(const Task& t) {
  return nlohmann::ordered_json{{"id", t.id},
                                {"query", t.query},
                                {"gold", t.gold},
                                {"hops", t.hops},
                                {"max_turns", t.max_turns}};
}

inline Task task_from_json(const nlohmann::json& j) {
  Task t;
  t.id = j.at("id").get<int64_t>();
  t.query = j.at("query").get<std::vector<int>>();
  t.gold = j.at("gold").get<int>();
  t.hops = j.at("hops").get<int>();
  t.max_turns = j.at("max_turns").get<int>();
  return t;
}

}  // namespace lldlab
