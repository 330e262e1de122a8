#pragma once

/**
 * Token alphabet.
 *
 * Tokens are opaque symbols; there is no natural-language tokenizer. A small
 * set of reserved ids carries the interaction protocol (search/answer/
 * information tags, end-of-action sentinel, padding, retrieval miss, and the
 * two-token body of the invalid-action message). Everything else is a plain
 * pool token available to the corpus generator.
 */

#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace lldlab {

struct Vocab {
  std::vector<std::string> tokens;

  // Reserved role ids. All distinct, all < tokens.size().
  int search_open = -1;
  int search_close = -1;
  int answer_open = -1;
  int answer_close = -1;
  int info_open = -1;
  int info_close = -1;
  int eoa = -1;  // end-of-action sentinel
  int pad = -1;
  int nohit = -1;
  int invalid_a = -1;
  int invalid_b = -1;

  int size() const { return static_cast<int>(tokens.size()); }

  bool contains(int id) const { return id >= 0 && id < size(); }

  const std::string& name(int id) const {
    if (!contains(id)) throw std::out_of_range("token-out-of-vocab");
    return tokens[static_cast<size_t>(id)];
  }

  std::vector<int> reserved_ids() const {
    return {search_open, search_close, answer_open, answer_close,
            info_open,   info_close,   eoa,         pad,
            nohit,       invalid_a,    invalid_b};
  }

  /// First id that is not reserved; pool tokens are the contiguous range
  /// [first_pool_id, size).
  int first_pool_id() const { return invalid_b + 1; }

  bool is_reserved(int id) const { return id < first_pool_id(); }

  /// The invalid-action feedback: a fixed 4-token reserved sequence wrapped in
  /// information tags, mirroring the corrective message an agent sees after a
  /// malformed action.
  std::vector<int> invalid_feedback() const {
    return {info_open, invalid_a, invalid_b, info_close};
  }
};

/// Build a vocabulary of `size` tokens: 11 reserved protocol tokens followed
/// by pool tokens named w00, w01, ...
inline Vocab make_vocab(int size) {
  if (size < 16) throw std::invalid_argument("vocab size must be >= 16");
  Vocab v;
  v.tokens = {"<search>", "</search>",      "<answer>", "</answer>",
              "<information>", "</information>", "<eoa>",    "<pad>",
              "<nohit>",  "<inv-a>",        "<inv-b>"};
  v.search_open = 0;
  v.search_close = 1;
  v.answer_open = 2;
  v.answer_close = 3;
  v.info_open = 4;
  v.info_close = 5;
  v.eoa = 6;
  v.pad = 7;
  v.nohit = 8;
  v.invalid_a = 9;
  v.invalid_b = 10;
  for (int i = static_cast<int>(v.tokens.size()); i < size; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "w%02d", i - 11);
    v.tokens.push_back(buf);
  }
  return v;
}

inline nlohmann::json to_json(const Vocab& v) {
  return nlohmann::json{{"tokens", v.tokens},
                        {"reserved",
                         {{"search_open", v.search_open},
                          {"search_close", v.search_close},
                          {"answer_open", v.answer_open},
                          {"answer_close", v.answer_close},
                          {"info_open", v.info_open},
                          {"info_close", v.info_close},
                          {"eoa", v.eoa},
                          {"pad", v.pad},
                          {"nohit", v.nohit},
                          {"invalid_a", v.invalid_a},
                          {"invalid_b", v.invalid_b}}}};
}

inline Vocab vocab_from_json(const nlohmann::json& j) {
  Vocab v;
  v.tokens = j.at("tokens").get<std::vector<std::string>>();
  const auto& r = j.at("reserved");
  v.search_open = r.at("search_open").get<int>();
  v.search_close = r.at("search_close").get<int>();
  v.answer_open = r.at("answer_open").get<int>();
  v.answer_close = r.at("answer_close").get<int>();
  v.info_open = r.at("info_open").get<int>();
  v.info_close = r.at("info_close").get<int>();
  v.eoa = r.at("eoa").get<int>();
  v.pad = r.at("pad").get<int>();
  v.nohit = r.at("nohit").get<int>();
  v.invalid_a = r.at("invalid_a").get<int>();
  v.invalid_b = r.at("invalid_b").get<int>();
  return v;
}

}  // namespace lldlab
