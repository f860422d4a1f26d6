#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace masktok {

/// Mask-token vocabulary. Level l of a K-entry codebook owns the contiguous
/// token id band [l*K, (l+1)*K); code k at level l renders as token id
/// l*K + k. Indices are zero-padded decimal, at least four digits wide,
/// growing to as many digits as K*S - 1 needs.
struct Vocab {
  int codebook_size = 256;
  int steps = 2;

  static constexpr std::string_view kStart = "<|mt_start|>";
  static constexpr std::string_view kEnd = "<|mt_end|>";

  int total_mask_tokens() const { return codebook_size * steps; }

  int index_width() const {
    int digits = 1, max_id = total_mask_tokens() - 1;
    while (max_id >= 10) {
      max_id /= 10;
      ++digits;
    }
    return digits < 4 ? 4 : digits;
  }

  std::string token(int id) const {
    if (id < 0 || id >= total_mask_tokens()) {
      throw std::invalid_argument("Vocab::token: id " + std::to_string(id) + " out of range");
    }
    std::string digits = std::to_string(id);
    digits.insert(0, static_cast<std::size_t>(index_width()) - digits.size(), '0');
    return "<|mt_" + digits + "|>";
  }

  void validate() const {
    if (codebook_size <= 0 || steps <= 0) {
      throw std::invalid_argument("Vocab: codebook_size and steps must be positive");
    }
  }
};

/// One parsed mask word: per-level codes, the exact rendered text, and the
/// [begin, end) character span within the host string.
struct MaskWord {
  std::vector<int> codes;
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct ParseDiagnostic {
  std::size_t position = 0;
  std::string reason;
};

struct ParseResult {
  std::vector<MaskWord> words;
  std::vector<ParseDiagnostic> diagnostics;
};

/// Render per-level codes as a mask word: start token, one token per level
/// in band order, end token, with no separators.
inline std::string format_mask_word(const std::vector<int>& codes, const Vocab& v) {
  v.validate();
  if (static_cast<int>(codes.size()) != v.steps) {
    throw std::invalid_argument("format_mask_word: expected " + std::to_string(v.steps) +
                                " codes, got " + std::to_string(codes.size()));
  }
  std::string out{v.kStart};
  for (int level = 0; level < v.steps; ++level) {
    const int code = codes[static_cast<std::size_t>(level)];
    if (code < 0 || code >= v.codebook_size) {
      throw std::invalid_argument("format_mask_word: code " + std::to_string(code) +
                                  " out of range at level " + std::to_string(level));
    }
    out += v.token(level * v.codebook_size + code);
  }
  out += v.kEnd;
  return out;
}

namespace detail {

/// Match one "<|mt_NNNN|>" mask token at `pos`. Returns the token id and
/// advances `pos` past it, or returns -1 leaving `pos` untouched.
inline int match_mask_token(std::string_view text, std::size_t& pos, const Vocab& v) {
  constexpr std::string_view prefix = "<|mt_";
  const int width = v.index_width();
  const std::size_t need = prefix.size() + static_cast<std::size_t>(width) + 2;
  if (pos + need > text.size()) return -1;
  if (text.substr(pos, prefix.size()) != prefix) return -1;
  int id = 0;
  for (int i = 0; i < width; ++i) {
    const char c = text[pos + prefix.size() + static_cast<std::size_t>(i)];
    if (c < '0' || c > '9') return -1;
    id = id * 10 + (c - '0');
  }
  if (text.substr(pos + prefix.size() + static_cast<std::size_t>(width), 2) != "|>") return -1;
  pos += need;
  return id;
}

}  // namespace detail

/// Extract every well-formed mask word from arbitrary text, in order of
/// appearance. A well-formed word is the start token, exactly one mask token
/// per level band in ascending band order, and the end token, all adjacent.
/// A failed attempt yields one diagnostic covering the whole fragment (the
/// start token plus any adjacent mask tokens and end token); scanning then
/// resumes just past the offending start token, so a valid word nested
/// inside a malformed prefix is still found. Mask or end tokens floating
/// outside any word or fragment are reported individually.
inline ParseResult parse_mask_words(std::string_view text, const Vocab& v) {
  v.validate();
  ParseResult result;
  std::vector<std::pair<std::size_t, std::size_t>> covered;
  std::size_t search = 0;
  while (true) {
    const std::size_t start = text.find(Vocab::kStart, search);
    if (start == std::string_view::npos) break;
    std::size_t pos = start + Vocab::kStart.size();
    std::vector<int> codes;
    std::string fail;
    for (int level = 0; level < v.steps; ++level) {
      const int id = detail::match_mask_token(text, pos, v);
      if (id < 0) {
        fail = "expected mask token for level " + std::to_string(level);
        break;
      }
      if (id >= v.total_mask_tokens()) {
        fail = "token id " + std::to_string(id) + " beyond vocabulary";
        break;
      }
      if (id / v.codebook_size != level) {
        fail = "token id " + std::to_string(id) + " outside level-" + std::to_string(level) +
               " band";
        break;
      }
      codes.push_back(id % v.codebook_size);
    }
    if (fail.empty() && text.substr(pos, Vocab::kEnd.size()) != Vocab::kEnd) {
      fail = "missing end token";
    }
    if (!fail.empty()) {
      // Fragment extent: the start token plus the maximal adjacent run of
      // mask tokens, plus one adjacent end token if present.
      std::size_t extent = start + Vocab::kStart.size();
      while (detail::match_mask_token(text, extent, v) >= 0) {
      }
      if (text.substr(extent, Vocab::kEnd.size()) == Vocab::kEnd) extent += Vocab::kEnd.size();
      result.diagnostics.push_back({start, fail});
      covered.emplace_back(start, extent);
      search = start + Vocab::kStart.size();
      continue;
    }
    pos += Vocab::kEnd.size();
    MaskWord w;
    w.codes = std::move(codes);
    w.text = std::string(text.substr(start, pos - start));
    w.begin = start;
    w.end = pos;
    result.words.push_back(std::move(w));
    covered.emplace_back(start, pos);
    search = pos;
  }

  // Report stray tokens outside all words and failed fragments.
  auto is_covered = [&](std::size_t p) {
    for (const auto& [b, e] : covered) {
      if (p >= b && p < e) return true;
    }
    return false;
  };
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (is_covered(pos)) {
      ++pos;
      continue;
    }
    if (text.substr(pos, Vocab::kEnd.size()) == Vocab::kEnd) {
      result.diagnostics.push_back({pos, "end token without matching start"});
      pos += Vocab::kEnd.size();
      continue;
    }
    std::size_t probe = pos;
    if (text.substr(pos, Vocab::kStart.size()) != Vocab::kStart &&
        detail::match_mask_token(text, probe, v) >= 0) {
      result.diagnostics.push_back({pos, "mask token outside any word"});
      pos = probe;
      continue;
    }
    ++pos;
  }
  std::sort(result.diagnostics.begin(), result.diagnostics.end(),
            [](const ParseDiagnostic& a, const ParseDiagnostic& b) {
              return a.position < b.position;
            });
  return result;
}

/// All special-token strings, mask tokens first in id order, then the start
/// and end markers. One line per token when joined: the export format for
/// extending an external tokenizer vocabulary.
inline std::vector<std::string> vocab_manifest(const Vocab& v) {
  v.validate();
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(v.total_mask_tokens()) + 2);
  for (int id = 0; id < v.total_mask_tokens(); ++id) out.push_back(v.token(id));
  out.emplace_back(Vocab::kStart);
  out.emplace_back(Vocab::kEnd);
  return out;
}

/// Delete every well-formed mask word from the text, leaving everything else
/// byte-identical.
inline std::string strip_mask_words(std::string_view text, const Vocab& v) {
  const ParseResult parsed = parse_mask_words(text, v);
  std::string out;
  std::size_t pos = 0;
  for (const MaskWord& w : parsed.words) {
    out.append(text.substr(pos, w.begin - pos));
    pos = w.end;
  }
  out.append(text.substr(pos));
  return out;
}

}  // namespace masktok
