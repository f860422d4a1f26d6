#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace masktok {

/// Binary 2D region mask. Bits are row-major, one byte per cell, each 0 or 1.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  static Mask zeros(int width, int height) {
    if (width <= 0 || height <= 0) {
      throw std::invalid_argument("Mask::zeros: dimensions must be positive, got " +
                                  std::to_string(width) + "x" + std::to_string(height));
    }
    Mask m;
    m.width = width;
    m.height = height;
    m.bits.assign(static_cast<std::size_t>(width) * height, 0);
    return m;
  }

  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  void set(int x, int y, std::uint8_t v) { bits[static_cast<std::size_t>(y) * width + x] = v; }

  std::int64_t area() const {
    std::int64_t a = 0;
    for (std::uint8_t b : bits) a += b;
    return a;
  }

  bool operator==(const Mask&) const = default;
};

inline std::string shape_string(int w, int h) {
  return std::to_string(w) + "x" + std::to_string(h);
}

inline void validate_mask(const Mask& m) {
  if (m.width <= 0 || m.height <= 0) {
    throw std::invalid_argument("mask dimensions must be positive, got " +
                                shape_string(m.width, m.height));
  }
  if (m.bits.size() != static_cast<std::size_t>(m.width) * m.height) {
    throw std::invalid_argument("mask bit count " + std::to_string(m.bits.size()) +
                                " does not match " + shape_string(m.width, m.height));
  }
  for (std::uint8_t b : m.bits) {
    if (b > 1) throw std::invalid_argument("mask cells must be 0 or 1");
  }
}

/// Intersection-over-union of two same-sized masks. Empty vs empty is 1.0.
inline double iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) {
    throw std::invalid_argument("iou: shape mismatch " + shape_string(a.width, a.height) +
                                " vs " + shape_string(b.width, b.height));
  }
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool av = a.bits[i] != 0, bv = b.bits[i] != 0;
    inter += (av && bv);
    uni += (av || bv);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Run-length encoded mask, column-major (COCO convention): runs alternate
/// 0-runs and 1-runs and always start with the count of leading zeros, which
/// may itself be zero. All other runs must be positive.
struct RleMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> runs;

  bool operator==(const RleMask&) const = default;
};

inline RleMask rle_encode(const Mask& m) {
  validate_mask(m);
  RleMask r;
  r.width = m.width;
  r.height = m.height;
  std::uint8_t cur = 0;
  std::uint32_t count = 0;
  for (int x = 0; x < m.width; ++x) {
    for (int y = 0; y < m.height; ++y) {
      const std::uint8_t v = m.at(x, y);
      if (v != cur) {
        r.runs.push_back(count);
        count = 0;
        cur = v;
      }
      ++count;
    }
  }
  r.runs.push_back(count);
  return r;
}

inline Mask rle_decode(const RleMask& r) {
  if (r.width <= 0 || r.height <= 0) {
    throw std::invalid_argument("rle_decode: dimensions must be positive, got " +
                                shape_string(r.width, r.height));
  }
  const std::uint64_t total = static_cast<std::uint64_t>(r.width) * r.height;
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    if (i > 0 && r.runs[i] == 0) {
      throw std::invalid_argument("rle_decode: interior run of length zero at position " +
                                  std::to_string(i));
    }
    sum += r.runs[i];
  }
  if (sum != total) {
    throw std::invalid_argument("rle_decode: runs sum to " + std::to_string(sum) +
                                ", expected " + std::to_string(total) + " for " +
                                shape_string(r.width, r.height));
  }
  Mask m = Mask::zeros(r.width, r.height);
  std::uint64_t pos = 0;
  std::uint8_t v = 0;
  for (std::uint32_t run : r.runs) {
    if (v != 0) {
      for (std::uint32_t i = 0; i < run; ++i) {
        const std::uint64_t p = pos + i;
        const int x = static_cast<int>(p / r.height);
        const int y = static_cast<int>(p % r.height);
        m.set(x, y, 1);
      }
    }
    pos += run;
    v = static_cast<std::uint8_t>(1 - v);
  }
  return m;
}

/// Real-valued grid with every cell in [0, 1]. Row-major like Mask.
struct SoftGrid {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  static SoftGrid zeros(int width, int height) {
    SoftGrid g;
    g.width = width;
    g.height = height;
    g.values.assign(static_cast<std::size_t>(width) * height, 0.0);
    return g;
  }

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

/// Area-weighted box-filter resampling to an arbitrary target size. Each
/// output cell is the mean of the input cells it covers, with fractional
/// cells weighted by overlap area.
inline SoftGrid area_resample(const Mask& m, int out_w, int out_h) {
  SoftGrid g = SoftGrid::zeros(out_w, out_h);
  const double sx = static_cast<double>(m.width) / out_w;
  const double sy = static_cast<double>(m.height) / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    const int iy0 = static_cast<int>(std::floor(y0));
    const int iy1 = std::min(m.height, static_cast<int>(std::ceil(y1)));
    for (int ox = 0; ox < out_w; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      const int ix0 = static_cast<int>(std::floor(x0));
      const int ix1 = std::min(m.width, static_cast<int>(std::ceil(x1)));
      double acc = 0.0;
      for (int iy = iy0; iy < iy1; ++iy) {
        const double wy = std::min<double>(y1, iy + 1) - std::max<double>(y0, iy);
        if (wy <= 0) continue;
        for (int ix = ix0; ix < ix1; ++ix) {
          const double wx = std::min<double>(x1, ix + 1) - std::max<double>(x0, ix);
          if (wx <= 0) continue;
          if (m.at(ix, iy)) acc += wx * wy;
        }
      }
      g.values[static_cast<std::size_t>(oy) * out_w + ox] =
          std::clamp(acc / (sx * sy), 0.0, 1.0);
    }
  }
  return g;
}

}  // namespace detail

/// Downsample a mask to a coarser soft grid by area averaging. Total mass is
/// preserved exactly when the dimensions divide evenly.
inline SoftGrid downsample(const Mask& m, int out_w, int out_h) {
  validate_mask(m);
  if (out_w <= 0 || out_h <= 0) {
    throw std::invalid_argument("downsample: target dimensions must be positive, got " +
                                shape_string(out_w, out_h));
  }
  if (out_w > m.width || out_h > m.height) {
    throw std::invalid_argument("downsample: target " + shape_string(out_w, out_h) +
                                " exceeds source " + shape_string(m.width, m.height));
  }
  return detail::area_resample(m, out_w, out_h);
}

/// Nearest-neighbor upsample to out_w x out_h, then threshold with a strict
/// greater-than rule (a cell exactly at the threshold maps to 0).
inline Mask binarize(const SoftGrid& g, double threshold, int out_w, int out_h) {
  if (g.width <= 0 || g.height <= 0 ||
      g.values.size() != static_cast<std::size_t>(g.width) * g.height) {
    throw std::invalid_argument("binarize: malformed grid");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("binarize: threshold must lie in (0,1), got " +
                                std::to_string(threshold));
  }
  if (out_w <= 0 || out_h <= 0) {
    throw std::invalid_argument("binarize: output dimensions must be positive, got " +
                                shape_string(out_w, out_h));
  }
  Mask m = Mask::zeros(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(g.height - 1, static_cast<int>((y + 0.5) * g.height / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(g.width - 1, static_cast<int>((x + 0.5) * g.width / out_w));
      m.set(x, y, g.at(sx, sy) > threshold ? 1 : 0);
    }
  }
  return m;
}

// ---- Portable bitmap (P1) text serialization ----

/// Canonical P1 writer: header line, dimension line, then one row of bare
/// 0/1 digits per line. Parsing any P1 and re-writing it is byte-stable.
inline std::string to_pbm(const Mask& m) {
  validate_mask(m);
  std::string out = "P1\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n";
  out.reserve(out.size() + static_cast<std::size_t>(m.height) * (m.width + 1));
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) out.push_back(m.at(x, y) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

inline Mask from_pbm(std::string_view text) {
  std::size_t i = 0;
  auto skip_ws = [&] {
    while (i < text.size()) {
      if (text[i] == '#') {
        while (i < text.size() && text[i] != '\n') ++i;
      } else if (std::isspace(static_cast<unsigned char>(text[i]))) {
        ++i;
      } else {
        break;
      }
    }
  };
  auto next_int = [&]() -> int {
    skip_ws();
    std::size_t start = i;
    while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
    if (i == start) throw std::invalid_argument("from_pbm: expected integer");
    return std::stoi(std::string(text.substr(start, i - start)));
  };
  skip_ws();
  if (text.substr(i, 2) != "P1") throw std::invalid_argument("from_pbm: missing P1 magic");
  i += 2;
  const int w = next_int();
  const int h = next_int();
  Mask m = Mask::zeros(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      skip_ws();
      if (i >= text.size() || (text[i] != '0' && text[i] != '1')) {
        throw std::invalid_argument("from_pbm: truncated pixel data");
      }
      m.set(x, y, static_cast<std::uint8_t>(text[i] - '0'));
      ++i;
    }
  }
  return m;
}

// ---- Line-delimited structured records ----
// Mask record schema v1: {"width": W, "height": H, "rle_runs": [..]} with an
// optional "id" string carried through untouched.

inline nlohmann::json rle_to_json(const RleMask& r) {
  return nlohmann::json{{"width", r.width}, {"height", r.height}, {"rle_runs", r.runs}};
}

inline RleMask rle_from_json(const nlohmann::json& j) {
  RleMask r;
  r.width = j.at("width").get<int>();
  r.height = j.at("height").get<int>();
  r.runs = j.at("rle_runs").get<std::vector<std::uint32_t>>();
  return r;
}

inline nlohmann::json mask_record_to_json(const Mask& m) { return rle_to_json(rle_encode(m)); }

inline Mask mask_record_from_json(const nlohmann::json& j) { return rle_decode(rle_from_json(j)); }

}  // namespace masktok
