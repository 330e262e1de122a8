#include "doctest.h"

#include "lldlab/rng.hpp"
#include "lldlab/trajectory.hpp"
#include "lldlab/vocab.hpp"

#include "instances.hpp"

using namespace lldlab;

namespace {

Trajectory well_formed(const Vocab& v) {
  Trajectory t;
  Segment prompt;
  prompt.kind = SegmentKind::prompt;
  prompt.token_ids = {v.first_pool_id(), v.first_pool_id() + 1};
  Segment action;
  action.kind = SegmentKind::action;
  action.token_ids = {v.answer_open, v.first_pool_id() + 2, v.answer_close};
  action.answer_span = Span{1, 1};
  t.segments = {prompt, action};
  t.terminal_reason = TerminalReason::answered;
  finalize_trajectory(t);
  return t;
}

}  // namespace

TEST_CASE("vocab reserves distinct roles") {
  Vocab v = make_vocab(64);
  CHECK(v.size() == 64);
  auto ids = v.reserved_ids();
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t j = i + 1; j < ids.size(); ++j) CHECK(ids[i] != ids[j]);
  for (int id : ids) CHECK(v.contains(id));
  CHECK(v.invalid_feedback().size() == 4);
  CHECK_THROWS(make_vocab(8));
}

TEST_CASE("validate_trajectory") {
  Vocab v = make_vocab(32);

  SUBCASE("well-formed prompt+action trajectory has no violations") {
    CHECK(validate_trajectory(well_formed(v), v).empty());
  }

  SUBCASE("mask set on a feedback token is reported with its index") {
    Trajectory t = well_formed(v);
    Segment fb;
    fb.kind = SegmentKind::feedback;
    fb.token_ids = {v.info_open, v.nohit, v.info_close};
    Segment next;
    next.kind = SegmentKind::action;
    next.token_ids = {v.eoa};
    t.segments.push_back(fb);
    t.segments.push_back(next);
    finalize_trajectory(t);
    t.loss_mask[5] = 1;  // first feedback token (after 2 prompt + 3 action)
    auto violations = validate_trajectory(t, v);
    REQUIRE(!violations.empty());
    CHECK(violations[0] == "mask-on-feedback @ idx 5");
  }

  SUBCASE("answer span on a feedback segment is a violation") {
    Trajectory t = well_formed(v);
    Segment fb;
    fb.kind = SegmentKind::feedback;
    fb.token_ids = {v.info_open, v.nohit, v.info_close};
    fb.answer_span = Span{1, 1};
    Segment next;
    next.kind = SegmentKind::action;
    next.token_ids = {v.eoa};
    t.segments.push_back(fb);
    t.segments.push_back(next);
    finalize_trajectory(t);
    auto violations = validate_trajectory(t, v);
    bool found = false;
    for (const auto& viol : violations) found |= viol == "span-on-feedback";
    CHECK(found);
  }

  SUBCASE("turn count mismatch is a violation") {
    Trajectory t = well_formed(v);
    t.turn_count = 5;
    auto violations = validate_trajectory(t, v);
    bool found = false;
    for (const auto& viol : violations) found |= viol == "turn-count-mismatch";
    CHECK(found);
  }

  SUBCASE("out-of-vocab token names the flat index") {
    Trajectory t = well_formed(v);
    t.segments[1].token_ids[1] = v.size() + 3;
    auto violations = validate_trajectory(t, v);
    bool found = false;
    for (const auto& viol : violations)
      found |= viol == "token-out-of-vocab @ idx 3";
    CHECK(found);
  }
}

TEST_CASE("mask totality and length follow the segments") {
  Rng rng(11);
  Vocab v = make_vocab(16);
  for (int trial = 0; trial < 50; ++trial) {
    Trajectory t = testutil::random_trajectory(rng, v, 3, trial % 2 == 0);
    CHECK(static_cast<int>(t.loss_mask.size()) == t.total_tokens());
    // Every token classified exactly once, and the mask is on iff action.
    int pos = 0;
    for (const auto& s : t.segments)
      for (int k = 0; k < s.length(); ++k, ++pos)
        CHECK(static_cast<bool>(t.loss_mask[pos]) ==
              (s.kind == SegmentKind::action));
    CHECK(validate_trajectory(t, v).empty());
  }
}

TEST_CASE("trajectory json round-trip is the identity") {
  Rng rng(23);
  Vocab v = make_vocab(16);
  for (int trial = 0; trial < 50; ++trial) {
    Trajectory t = testutil::random_trajectory(rng, v, 3, trial % 3 == 0);
    t.query_id = trial;
    Trajectory back = trajectory_from_json(to_json(t));
    CHECK(back.query_id == t.query_id);
    CHECK(back.terminal_reason == t.terminal_reason);
    CHECK(back.turn_count == t.turn_count);
    CHECK(back.loss_mask == t.loss_mask);
    REQUIRE(back.segments.size() == t.segments.size());
    for (size_t i = 0; i < t.segments.size(); ++i) {
      CHECK(back.segments[i].kind == t.segments[i].kind);
      CHECK(back.segments[i].token_ids == t.segments[i].token_ids);
      CHECK(back.segments[i].answer_span.has_value() ==
            t.segments[i].answer_span.has_value());
      if (t.segments[i].answer_span) {
        CHECK(back.segments[i].answer_span->lo == t.segments[i].answer_span->lo);
        CHECK(back.segments[i].answer_span->hi == t.segments[i].answer_span->hi);
      }
    }
    // Re-encoding gives the same bytes.
    CHECK(to_json(back).dump() == to_json(t).dump());
  }
}

TEST_CASE("vocab json round-trip") {
  Vocab v = make_vocab(24);
  Vocab back = vocab_from_json(to_json(v));
  CHECK(back.tokens == v.tokens);
  CHECK(back.reserved_ids() == v.reserved_ids());
}
