#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "masktok/mask.hpp"
#include "masktok/mask_words.hpp"

namespace masktok {

enum class SampleKind { kRegionCaption, kGcg, kRes };

inline std::string sample_kind_name(SampleKind k) {
  switch (k) {
    case SampleKind::kRegionCaption: return "region_caption";
    case SampleKind::kGcg: return "gcg";
    case SampleKind::kRes: return "res";
  }
  throw std::invalid_argument("unknown sample kind");
}

inline SampleKind sample_kind_from_name(const std::string& name) {
  if (name == "region_caption") return SampleKind::kRegionCaption;
  if (name == "gcg") return SampleKind::kGcg;
  if (name == "res") return SampleKind::kRes;
  throw std::invalid_argument("unknown sample kind '" + name + "'");
}

/// Caption span [begin, end) that a mask is aligned to.
struct PhraseAlign {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string mask_name;
};

/// One mask-annotated input record. The fields used depend on `kind`:
/// region captioning uses caption (and the first mask), grounded
/// conversation uses caption plus alignments, referring segmentation uses
/// expression plus targets (an empty target list marks a no-target sample).
struct AnnotatedSample {
  SampleKind kind = SampleKind::kRegionCaption;
  std::string id;
  std::string image_ref;
  std::vector<std::pair<std::string, RleMask>> masks;
  std::string caption;
  std::vector<PhraseAlign> alignments;
  std::string expression;
  std::vector<std::string> targets;
};

struct DialogueTurn {
  std::string role;  // "user" or "assistant"
  std::string text;
};

struct Dialogue {
  std::vector<DialogueTurn> turns;
  std::string provenance;
};

// Record schemas (JSON Lines, one record per line):
//   annotated_sample/v1: kind, id, image_ref, masks [{name,width,height,
//     rle_runs}], caption?, alignments? [{begin,end,mask}], expression?,
//     targets?
//   dialogue/v1: provenance, turns [{role,text}]

inline nlohmann::json sample_to_json(const AnnotatedSample& s) {
  nlohmann::json j{{"schema", "annotated_sample/v1"},
                   {"kind", sample_kind_name(s.kind)},
                   {"id", s.id},
                   {"image_ref", s.image_ref}};
  nlohmann::json masks = nlohmann::json::array();
  for (const auto& [name, rle] : s.masks) {
    nlohmann::json m = rle_to_json(rle);
    m["name"] = name;
    masks.push_back(std::move(m));
  }
  j["masks"] = std::move(masks);
  switch (s.kind) {
    case SampleKind::kRegionCaption:
      j["caption"] = s.caption;
      break;
    case SampleKind::kGcg: {
      j["caption"] = s.caption;
      nlohmann::json aligns = nlohmann::json::array();
      for (const PhraseAlign& a : s.alignments) {
        aligns.push_back({{"begin", a.begin}, {"end", a.end}, {"mask", a.mask_name}});
      }
      j["alignments"] = std::move(aligns);
      break;
    }
    case SampleKind::kRes:
      j["expression"] = s.expression;
      j["targets"] = s.targets;
      break;
  }
  return j;
}

inline AnnotatedSample sample_from_json(const nlohmann::json& j) {
  AnnotatedSample s;
  if (j.value("schema", "annotated_sample/v1") != "annotated_sample/v1") {
    throw std::invalid_argument("sample_from_json: unsupported schema");
  }
  s.kind = sample_kind_from_name(j.at("kind").get<std::string>());
  s.id = j.value("id", "");
  s.image_ref = j.value("image_ref", "");
  for (const nlohmann::json& m : j.value("masks", nlohmann::json::array())) {
    s.masks.emplace_back(m.at("name").get<std::string>(), rle_from_json(m));
  }
  s.caption = j.value("caption", "");
  for (const nlohmann::json& a : j.value("alignments", nlohmann::json::array())) {
    s.alignments.push_back({a.at("begin").get<std::size_t>(), a.at("end").get<std::size_t>(),
                            a.at("mask").get<std::string>()});
  }
  s.expression = j.value("expression", "");
  if (j.contains("targets")) s.targets = j.at("targets").get<std::vector<std::string>>();
  return s;
}

inline nlohmann::json dialogue_to_json(const Dialogue& d) {
  nlohmann::json turns = nlohmann::json::array();
  for (const DialogueTurn& t : d.turns) {
    turns.push_back({{"role", t.role}, {"text", t.text}});
  }
  return nlohmann::json{
      {"schema", "dialogue/v1"}, {"provenance", d.provenance}, {"turns", std::move(turns)}};
}

inline Dialogue dialogue_from_json(const nlohmann::json& j) {
  Dialogue d;
  d.provenance = j.value("provenance", "");
  for (const nlohmann::json& t : j.at("turns")) {
    d.turns.push_back({t.at("role").get<std::string>(), t.at("text").get<std::string>()});
  }
  return d;
}

/// Instruction templates, loaded from plain-text files so prompt variants
/// can be swapped without a rebuild. "{mask}" and "{expression}" are the
/// substitution slots.
struct PromptTemplates {
  std::string region_caption_user = "Describe the region {mask}.";
  std::string gcg_user =
      "Describe the image in detail and append the mask word of each mentioned object.";
  std::string res_user = "Segment the region this refers to: {expression}";
  std::string res_no_target = "There is no target.";

  static PromptTemplates load(const std::string& dir) {
    auto read_file = [](const std::string& path) {
      std::ifstream is(path);
      if (!is) throw std::runtime_error("PromptTemplates: cannot open " + path);
      std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
      while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
      return text;
    };
    PromptTemplates t;
    t.region_caption_user = read_file(dir + "/region_caption.txt");
    t.gcg_user = read_file(dir + "/gcg.txt");
    t.res_user = read_file(dir + "/res.txt");
    t.res_no_target = read_file(dir + "/res_no_target.txt");
    return t;
  }
};

namespace detail {

inline std::string replace_slot(std::string text, const std::string& slot,
                                const std::string& value) {
  const std::size_t pos = text.find(slot);
  if (pos == std::string::npos) {
    throw std::invalid_argument("template is missing the " + slot + " slot");
  }
  text.replace(pos, slot.size(), value);
  return text;
}

}  // namespace detail

/// Maps a decoded mask to its per-level quantization codes. Backed by a
/// trained checkpoint in production; tests may substitute any deterministic
/// mapping.
using MaskTokenizerFn = std::function<std::vector<int>(const Mask&)>;

inline std::string render_mask_word(const RleMask& rle, const Vocab& v,
                                    const MaskTokenizerFn& tok, const std::string& mask_name) {
  std::vector<int> codes;
  try {
    codes = tok(rle_decode(rle));
  } catch (const std::exception& e) {
    throw std::runtime_error("tokenizer failed on mask '" + mask_name + "': " + e.what());
  }
  return format_mask_word(codes, v);
}

inline Dialogue convert_region_caption(const AnnotatedSample& s, const Vocab& v,
                                       const MaskTokenizerFn& tok, const PromptTemplates& tpl) {
  if (s.kind != SampleKind::kRegionCaption) {
    throw std::invalid_argument("convert_region_caption: sample kind mismatch");
  }
  if (s.masks.empty()) {
    throw std::invalid_argument("convert_region_caption: sample '" + s.id + "' has no masks");
  }
  const std::string word = render_mask_word(s.masks[0].second, v, tok, s.masks[0].first);
  Dialogue d;
  d.provenance = s.id;
  d.turns.push_back({"user", detail::replace_slot(tpl.region_caption_user, "{mask}", word)});
  d.turns.push_back({"assistant", s.caption});
  return d;
}

/// Grounded-conversation conversion: each aligned phrase gets its mask word
/// spliced in immediately after it. Insertion only, so deleting the words
/// recovers the caption byte for byte.
inline Dialogue convert_gcg(const AnnotatedSample& s, const Vocab& v, const MaskTokenizerFn& tok,
                            const PromptTemplates& tpl) {
  if (s.kind != SampleKind::kGcg) throw std::invalid_argument("convert_gcg: sample kind mismatch");
  std::size_t prev_end = 0;
  for (std::size_t i = 0; i < s.alignments.size(); ++i) {
    const PhraseAlign& a = s.alignments[i];
    if (a.begin > a.end || a.end > s.caption.size()) {
      throw std::invalid_argument("convert_gcg: alignment span out of bounds in sample '" + s.id +
                                  "'");
    }
    if (i > 0 && a.begin < prev_end) {
      throw std::invalid_argument("convert_gcg: overlapping or unsorted spans in sample '" + s.id +
                                  "'");
    }
    prev_end = a.end;
  }
  auto find_mask = [&](const std::string& name) -> const RleMask& {
    for (const auto& [n, rle] : s.masks) {
      if (n == name) return rle;
    }
    throw std::invalid_argument("convert_gcg: unknown mask name '" + name + "' in sample '" +
                                s.id + "'");
  };
  std::string out;
  std::size_t pos = 0;
  for (const PhraseAlign& a : s.alignments) {
    out.append(s.caption, pos, a.end - pos);
    out += render_mask_word(find_mask(a.mask_name), v, tok, a.mask_name);
    pos = a.end;
  }
  out.append(s.caption, pos, s.caption.size() - pos);
  Dialogue d;
  d.provenance = s.id;
  d.turns.push_back({"user", tpl.gcg_user});
  d.turns.push_back({"assistant", std::move(out)});
  return d;
}

/// Referring-segmentation conversion. Multi-target answers concatenate the
/// mask words back to back in target order; a no-target sample answers with
/// the fixed no-target sentence.
inline Dialogue convert_res(const AnnotatedSample& s, const Vocab& v, const MaskTokenizerFn& tok,
                            const PromptTemplates& tpl) {
  if (s.kind != SampleKind::kRes) throw std::invalid_argument("convert_res: sample kind mismatch");
  Dialogue d;
  d.provenance = s.id;
  d.turns.push_back(
      {"user", detail::replace_slot(tpl.res_user, "{expression}", s.expression)});
  if (s.targets.empty()) {
    d.turns.push_back({"assistant", tpl.res_no_target});
    return d;
  }
  std::string answer;
  for (const std::string& name : s.targets) {
    const RleMask* rle = nullptr;
    for (const auto& [n, r] : s.masks) {
      if (n == name) rle = &r;
    }
    if (rle == nullptr) {
      throw std::invalid_argument("convert_res: unknown target mask '" + name + "' in sample '" +
                                  s.id + "'");
    }
    answer += render_mask_word(*rle, v, tok, name);
  }
  d.turns.push_back({"assistant", std::move(answer)});
  return d;
}

inline Dialogue convert_sample(const AnnotatedSample& s, const Vocab& v, const MaskTokenizerFn& tok,
                               const PromptTemplates& tpl) {
  switch (s.kind) {
    case SampleKind::kRegionCaption: return convert_region_caption(s, v, tok, tpl);
    case SampleKind::kGcg: return convert_gcg(s, v, tok, tpl);
    case SampleKind::kRes: return convert_res(s, v, tok, tpl);
  }
  throw std::invalid_argument("convert_sample: unknown kind");
}

/// Dialogue invariant check: roles must alternate starting with "user", and
/// every token-like fragment in every turn must parse as a well-formed mask
/// word. Returns human-readable violations; empty means the dialogue is
/// clean.
inline std::vector<std::string> lint_dialogue(const Dialogue& d, const Vocab& v) {
  std::vector<std::string> violations;
  if (d.turns.empty()) violations.push_back("dialogue has no turns");
  for (std::size_t i = 0; i < d.turns.size(); ++i) {
    const std::string expected = i % 2 == 0 ? "user" : "assistant";
    if (d.turns[i].role != expected) {
      violations.push_back("turn " + std::to_string(i) + " role '" + d.turns[i].role +
                           "', expected '" + expected + "'");
    }
    const ParseResult parsed = parse_mask_words(d.turns[i].text, v);
    for (const ParseDiagnostic& diag : parsed.diagnostics) {
      violations.push_back("turn " + std::to_string(i) + " offset " +
                           std::to_string(diag.position) + ": " + diag.reason);
    }
  }
  return violations;
}

// ---- Synthetic shape dataset ----

struct ShapeGenConfig {
  int count = 1000;
  int width = 32;
  int height = 32;
  double w_rectangle = 1.0;
  double w_ellipse = 1.0;
  double w_triangle = 1.0;
  double w_union = 1.0;
  double w_ring = 1.0;
  double min_frac = 0.25;  // shape extent as a fraction of the grid
  double max_frac = 0.8;
  std::uint64_t seed = 1;

  void validate() const {
    if (count < 0) throw std::invalid_argument("ShapeGenConfig: count must be non-negative");
    if (width <= 0 || height <= 0) {
      throw std::invalid_argument("ShapeGenConfig: grid dimensions must be positive");
    }
    const double ws[] = {w_rectangle, w_ellipse, w_triangle, w_union, w_ring};
    double total = 0.0;
    for (double w : ws) {
      if (w < 0) throw std::invalid_argument("ShapeGenConfig: weights must be non-negative");
      total += w;
    }
    if (total <= 0) throw std::invalid_argument("ShapeGenConfig: at least one weight must be positive");
    if (!(min_frac > 0 && min_frac <= max_frac && max_frac <= 1.0)) {
      throw std::invalid_argument("ShapeGenConfig: need 0 < min_frac <= max_frac <= 1");
    }
  }
};

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

inline void fill_rectangle(Mask& m, std::mt19937_64& rng, double min_frac, double max_frac) {
  const double w = uniform(rng, min_frac, max_frac) * m.width;
  const double h = uniform(rng, min_frac, max_frac) * m.height;
  const double x0 = uniform(rng, 0.0, m.width - w);
  const double y0 = uniform(rng, 0.0, m.height - h);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (x + 0.5 >= x0 && x + 0.5 <= x0 + w && y + 0.5 >= y0 && y + 0.5 <= y0 + h) m.set(x, y, 1);
    }
  }
}

inline void fill_ellipse(Mask& m, std::mt19937_64& rng, double min_frac, double max_frac) {
  const double rx = uniform(rng, min_frac, max_frac) * m.width / 2.0;
  const double ry = uniform(rng, min_frac, max_frac) * m.height / 2.0;
  const double cx = uniform(rng, rx, m.width - rx);
  const double cy = uniform(rng, ry, m.height - ry);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) m.set(x, y, 1);
    }
  }
}

inline void fill_triangle(Mask& m, std::mt19937_64& rng, double min_frac, double max_frac) {
  const double extent = uniform(rng, min_frac, max_frac);
  const double bw = extent * m.width, bh = extent * m.height;
  const double ox = uniform(rng, 0.0, m.width - bw), oy = uniform(rng, 0.0, m.height - bh);
  double px[3], py[3];
  // Vertices near three different corners of the bounding box keep the area
  // from degenerating.
  px[0] = ox + uniform(rng, 0.0, 0.3) * bw;
  py[0] = oy + uniform(rng, 0.0, 0.3) * bh;
  px[1] = ox + uniform(rng, 0.7, 1.0) * bw;
  py[1] = oy + uniform(rng, 0.0, 0.3) * bh;
  px[2] = ox + uniform(rng, 0.2, 0.8) * bw;
  py[2] = oy + uniform(rng, 0.7, 1.0) * bh;
  auto edge = [](double ax, double ay, double bx, double by, double cx, double cy) {
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
  };
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const double e0 = edge(px[0], py[0], px[1], py[1], cx, cy);
      const double e1 = edge(px[1], py[1], px[2], py[2], cx, cy);
      const double e2 = edge(px[2], py[2], px[0], py[0], cx, cy);
      if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) m.set(x, y, 1);
    }
  }
}

inline void fill_ring(Mask& m, std::mt19937_64& rng, double min_frac, double max_frac) {
  const double r_out =
      uniform(rng, min_frac, max_frac) * std::min(m.width, m.height) / 2.0;
  const double r_in = uniform(rng, 0.3, 0.7) * r_out;
  const double cx = uniform(rng, r_out, m.width - r_out);
  const double cy = uniform(rng, r_out, m.height - r_out);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double d2 = dx * dx + dy * dy;
      if (d2 <= r_out * r_out && d2 >= r_in * r_in) m.set(x, y, 1);
    }
  }
}

}  // namespace detail

/// Deterministic synthetic mask dataset drawn from the configured shape mix.
/// Every emitted mask is non-empty.
inline std::vector<Mask> gen_synthetic(const ShapeGenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const double weights[] = {cfg.w_rectangle, cfg.w_ellipse, cfg.w_triangle, cfg.w_union,
                            cfg.w_ring};
  double total = 0.0;
  for (double w : weights) total += w;

  auto fill_one = [&](Mask& m, int kind) {
    switch (kind) {
      case 0: detail::fill_rectangle(m, rng, cfg.min_frac, cfg.max_frac); break;
      case 1: detail::fill_ellipse(m, rng, cfg.min_frac, cfg.max_frac); break;
      case 2: detail::fill_triangle(m, rng, cfg.min_frac, cfg.max_frac); break;
      case 3: {
        const double sub_min = cfg.min_frac * 0.6, sub_max = cfg.max_frac * 0.7;
        if (detail::uniform(rng, 0.0, 1.0) < 0.5) {
          detail::fill_rectangle(m, rng, sub_min, sub_max);
          detail::fill_ellipse(m, rng, sub_min, sub_max);
        } else {
          detail::fill_ellipse(m, rng, sub_min, sub_max);
          detail::fill_rectangle(m, rng, sub_min, sub_max);
        }
        break;
      }
      case 4: detail::fill_ring(m, rng, cfg.min_frac, cfg.max_frac); break;
      default: break;
    }
  };

  std::vector<Mask> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    Mask m;
    for (int attempt = 0; attempt < 16; ++attempt) {
      m = Mask::zeros(cfg.width, cfg.height);
      double pick = detail::uniform(rng, 0.0, total);
      int kind = 0;
      for (; kind < 4; ++kind) {
        if (pick < weights[kind]) break;
        pick -= weights[kind];
      }
      fill_one(m, kind);
      if (m.area() > 0) break;
    }
    if (m.area() == 0) m.set(m.width / 2, m.height / 2, 1);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace masktok
