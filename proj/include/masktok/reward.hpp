#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include "masktok/mask_words.hpp"

namespace masktok {

/// Answer-matching reward breakdown for one rollout.
///   n_pred  — well-formed predicted words, duplicates counted, so repeating
///             the same word drags the reward down;
///   n_gt    — well-formed words in the ground-truth answer;
///   n_tp    — distinct predicted words whose full rendered text occurs in
///             the ground-truth string;
///   reward  — n_tp / max(n_pred, n_gt), or 1 when both counts are zero.
struct RewardBreakdown {
  int n_tp = 0;
  int n_pred = 0;
  int n_gt = 0;
  double reward = 0.0;
  std::vector<std::string> matched_words;
  std::vector<std::string> unmatched_words;
};

inline RewardBreakdown mask_reward(std::string_view pred_text, std::string_view gt_text,
                                   const Vocab& v) {
  const ParseResult pred = parse_mask_words(pred_text, v);
  const ParseResult gt = parse_mask_words(gt_text, v);
  RewardBreakdown b;
  b.n_pred = static_cast<int>(pred.words.size());
  b.n_gt = static_cast<int>(gt.words.size());
  std::vector<std::string> distinct;
  for (const MaskWord& w : pred.words) {
    if (std::find(distinct.begin(), distinct.end(), w.text) == distinct.end()) {
      distinct.push_back(w.text);
    }
  }
  for (const std::string& text : distinct) {
    if (gt_text.find(text) != std::string_view::npos) {
      ++b.n_tp;
      b.matched_words.push_back(text);
    } else {
      b.unmatched_words.push_back(text);
    }
  }
  const int denom = std::max(b.n_pred, b.n_gt);
  b.reward = denom == 0 ? 1.0 : static_cast<double>(b.n_tp) / denom;
  return b;
}

namespace detail {

/// Token walker for the oracle, deliberately written against the raw token
/// grammar with plain string operations and no shared parsing helpers.
inline bool oracle_take_token(std::string_view text, std::size_t& pos, int width, int& id_out) {
  const std::string_view prefix = "<|mt_";
  if (text.size() - pos < prefix.size() + static_cast<std::size_t>(width) + 2) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (text[pos + i] != prefix[i]) return false;
  }
  long id = 0;
  for (int i = 0; i < width; ++i) {
    const char c = text[pos + prefix.size() + static_cast<std::size_t>(i)];
    if (c < '0' || c > '9') return false;
    id = id * 10 + (c - '0');
  }
  const std::size_t tail = pos + prefix.size() + static_cast<std::size_t>(width);
  if (text[tail] != '|' || text[tail + 1] != '>') return false;
  pos = tail + 2;
  id_out = static_cast<int>(id);
  return true;
}

inline std::vector<std::string> oracle_scan_words(std::string_view text, const Vocab& v) {
  const std::string start{Vocab::kStart};
  const std::string end{Vocab::kEnd};
  const int width = v.index_width();
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i + start.size() <= text.size()) {
    if (text.compare(i, start.size(), start) != 0) {
      ++i;
      continue;
    }
    std::size_t pos = i + start.size();
    bool ok = true;
    for (int level = 0; level < v.steps && ok; ++level) {
      int id = -1;
      ok = oracle_take_token(text, pos, width, id) && id >= level * v.codebook_size &&
           id < (level + 1) * v.codebook_size;
    }
    if (ok && text.compare(pos, end.size(), end) == 0) {
      pos += end.size();
      words.emplace_back(text.substr(i, pos - i));
      i = pos;
    } else {
      i += start.size();
    }
  }
  return words;
}

}  // namespace detail

/// Brute-force reference for mask_reward: rescans both strings with a naive
/// positional walker and recounts everything from the definitions.
inline RewardBreakdown reward_oracle(std::string_view pred_text, std::string_view gt_text,
                                     const Vocab& v) {
  v.validate();
  const std::vector<std::string> pred_words = detail::oracle_scan_words(pred_text, v);
  const std::vector<std::string> gt_words = detail::oracle_scan_words(gt_text, v);
  RewardBreakdown b;
  b.n_pred = static_cast<int>(pred_words.size());
  b.n_gt = static_cast<int>(gt_words.size());
  std::vector<std::string> distinct;
  for (const std::string& w : pred_words) {
    bool seen = false;
    for (const std::string& d : distinct) seen = seen || d == w;
    if (!seen) distinct.push_back(w);
  }
  for (const std::string& w : distinct) {
    bool hit = false;
    if (w.size() <= gt_text.size()) {
      for (std::size_t i = 0; i + w.size() <= gt_text.size() && !hit; ++i) {
        hit = gt_text.compare(i, w.size(), w) == 0;
      }
    }
    if (hit) {
      ++b.n_tp;
      b.matched_words.push_back(w);
    } else {
      b.unmatched_words.push_back(w);
    }
  }
  const int denom = b.n_pred > b.n_gt ? b.n_pred : b.n_gt;
  b.reward = denom == 0 ? 1.0 : static_cast<double>(b.n_tp) / denom;
  return b;
}

}  // namespace masktok
