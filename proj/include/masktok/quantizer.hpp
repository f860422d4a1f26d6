#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "masktok/serialize.hpp"

namespace masktok {

enum class QuantScheme : std::uint8_t { kVQ = 0, kFSQ = 1, kRQ = 2 };

inline std::string scheme_name(QuantScheme s) {
  switch (s) {
    case QuantScheme::kVQ: return "vq";
    case QuantScheme::kFSQ: return "fsq";
    case QuantScheme::kRQ: return "rq";
  }
  throw std::invalid_argument("unknown quantization scheme");
}

inline QuantScheme scheme_from_name(const std::string& name) {
  if (name == "vq") return QuantScheme::kVQ;
  if (name == "fsq") return QuantScheme::kFSQ;
  if (name == "rq") return QuantScheme::kRQ;
  throw std::invalid_argument("unknown quantization scheme '" + name + "'");
}

/// Learnable codebook. `vectors` holds one code vector per row. The EMA
/// accumulators drive the update rule in ema_update; `stale_batches` counts
/// consecutive updates in which a code received no assignment.
/// `recent_inputs` is a small reservoir of recently assigned input vectors
/// used to reseed dead codes; it is training-time state and is not
/// serialized.
struct Codebook {
  Eigen::MatrixXd vectors;     // K x d
  Eigen::VectorXd ema_counts;  // K
  Eigen::MatrixXd ema_sums;    // K x d
  std::vector<std::uint32_t> stale_batches;
  std::vector<Eigen::VectorXd> recent_inputs;

  int size() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }

  static Codebook random_init(int size, int dim, std::mt19937_64& rng, double scale = 0.05) {
    if (size <= 0 || dim <= 0) {
      throw std::invalid_argument("Codebook: size and dim must be positive");
    }
    Codebook b;
    b.vectors.resize(size, dim);
    std::normal_distribution<double> dist(0.0, scale);
    for (int k = 0; k < size; ++k) {
      for (int j = 0; j < dim; ++j) b.vectors(k, j) = dist(rng);
    }
    b.ema_counts = Eigen::VectorXd::Zero(size);
    b.ema_sums = Eigen::MatrixXd::Zero(size, dim);
    b.stale_batches.assign(static_cast<std::size_t>(size), 0);
    return b;
  }
};

struct QuantConfig {
  QuantScheme scheme = QuantScheme::kRQ;
  int codebook_size = 256;
  int steps = 2;
  bool shared_codebooks = false;
  double commit_weight = 0.25;
  std::vector<int> fsq_levels = {16, 16, 16, 16};
  double ema_decay = 0.99;
  int reseed_window = 256;

  void validate() const {
    if (codebook_size <= 0) throw std::invalid_argument("QuantConfig: codebook_size must be positive");
    if (steps < 1) throw std::invalid_argument("QuantConfig: steps must be at least 1");
    if (commit_weight < 0) throw std::invalid_argument("QuantConfig: commit_weight must be >= 0");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) {
      throw std::invalid_argument("QuantConfig: ema_decay must lie in (0,1)");
    }
    if (reseed_window <= 0) throw std::invalid_argument("QuantConfig: reseed_window must be positive");
    if (scheme == QuantScheme::kFSQ) {
      if (fsq_levels.empty()) throw std::invalid_argument("QuantConfig: fsq_levels must be non-empty");
      for (int l : fsq_levels) {
        if (l < 2) throw std::invalid_argument("QuantConfig: every FSQ level count must be >= 2");
      }
    }
    if (scheme != QuantScheme::kRQ && steps != 1) {
      throw std::invalid_argument("QuantConfig: steps must be 1 for VQ/FSQ");
    }
  }

  /// Number of distinct codes addressable at one quantization level.
  int level_code_count() const {
    if (scheme != QuantScheme::kFSQ) return codebook_size;
    std::int64_t n = 1;
    for (int l : fsq_levels) {
      n *= l;
      if (n > std::numeric_limits<int>::max()) {
        throw std::invalid_argument("QuantConfig: FSQ level product overflows");
      }
    }
    return static_cast<int>(n);
  }
};

/// Quantization trace for one input vector: the selected code per level, the
/// retrieved code vectors e_i, the running residuals r_i = r_{i-1} - e_i
/// (with r_0 = input), the reconstructed vector q = sum of retrieved, and the
/// commitment term sum_i ||r_{i-1} - e_i||^2 = sum_i ||r_i||^2.
struct QuantResult {
  std::vector<int> codes;
  std::vector<Eigen::VectorXd> retrieved;
  std::vector<Eigen::VectorXd> residuals;
  Eigen::VectorXd quantized;
  double commit_loss = 0.0;
};

/// Index of the codebook entry with minimum squared distance to z.
/// Sequential scan with strict improvement, so ties go to the lowest index.
inline int nearest_code(const Codebook& book, const Eigen::VectorXd& z) {
  if (book.size() == 0) throw std::invalid_argument("nearest_code: empty codebook");
  if (z.size() != book.dim()) {
    throw std::invalid_argument("nearest_code: input dim " + std::to_string(z.size()) +
                                " does not match codebook dim " + std::to_string(book.dim()));
  }
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  const int K = book.size(), d = book.dim();
  for (int k = 0; k < K; ++k) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = z[j] - book.vectors(k, j);
      s += diff * diff;
    }
    if (s < best_dist) {
      best_dist = s;
      best = k;
    }
  }
  return best;
}

inline QuantResult vq_quantize(const Eigen::VectorXd& z, const Codebook& book) {
  const int code = nearest_code(book, z);
  QuantResult r;
  r.codes = {code};
  r.retrieved = {book.vectors.row(code).transpose()};
  r.residuals = {z - r.retrieved[0]};
  r.quantized = r.retrieved[0];
  r.commit_loss = r.residuals[0].squaredNorm();
  return r;
}

/// Residual quantization over a per-level codebook list: level i quantizes
/// the residual left by levels 0..i-1.
inline QuantResult rq_quantize(const Eigen::VectorXd& z, const std::vector<Codebook>& books) {
  if (books.empty()) throw std::invalid_argument("rq_quantize: need at least one codebook");
  QuantResult r;
  r.quantized = Eigen::VectorXd::Zero(z.size());
  Eigen::VectorXd residual = z;
  for (const Codebook& book : books) {
    const int code = nearest_code(book, residual);
    const Eigen::VectorXd e = book.vectors.row(code).transpose();
    residual -= e;
    r.codes.push_back(code);
    r.retrieved.push_back(e);
    r.residuals.push_back(residual);
    r.quantized += e;
    r.commit_loss += residual.squaredNorm();
  }
  return r;
}

// ---- Finite scalar quantization ----
// Coordinates are squashed with tanh to [-1,1] and snapped to L_i uniformly
// spaced levels per dimension. The composite code is the mixed-radix
// combination with dimension 0 as the least significant digit.

inline int fsq_level_index(double bounded, int levels) {
  const double t = (bounded + 1.0) * 0.5 * (levels - 1);
  const int idx = static_cast<int>(std::lround(t));
  return std::clamp(idx, 0, levels - 1);
}

inline double fsq_level_value(int index, int levels) {
  return -1.0 + 2.0 * index / (levels - 1);
}

inline int fsq_composite_code(const std::vector<int>& digits, const std::vector<int>& levels) {
  std::int64_t code = 0, stride = 1;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    code += digits[i] * stride;
    stride *= levels[i];
  }
  return static_cast<int>(code);
}

inline std::vector<int> fsq_digits_from_code(int code, const std::vector<int>& levels) {
  std::vector<int> digits(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    digits[i] = code % levels[i];
    code /= levels[i];
  }
  return digits;
}

/// FSQ over an already-projected vector (one coordinate per configured
/// level count). Carries no commitment term: the bottleneck has nothing to
/// commit to, so commit_loss is fixed at 0.
inline QuantResult fsq_quantize(const Eigen::VectorXd& z_proj, const QuantConfig& cfg) {
  if (cfg.fsq_levels.empty()) throw std::invalid_argument("fsq_quantize: fsq_levels empty");
  for (int l : cfg.fsq_levels) {
    if (l < 2) throw std::invalid_argument("fsq_quantize: every level count must be >= 2");
  }
  if (z_proj.size() != static_cast<Eigen::Index>(cfg.fsq_levels.size())) {
    throw std::invalid_argument("fsq_quantize: input dim " + std::to_string(z_proj.size()) +
                                " does not match fsq_levels size " +
                                std::to_string(cfg.fsq_levels.size()));
  }
  const std::size_t n = cfg.fsq_levels.size();
  std::vector<int> digits(n);
  Eigen::VectorXd values(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double bounded = std::tanh(z_proj[static_cast<Eigen::Index>(i)]);
    digits[i] = fsq_level_index(bounded, cfg.fsq_levels[i]);
    values[static_cast<Eigen::Index>(i)] = fsq_level_value(digits[i], cfg.fsq_levels[i]);
  }
  QuantResult r;
  r.codes = {fsq_composite_code(digits, cfg.fsq_levels)};
  r.retrieved = {values};
  r.residuals = {z_proj - values};
  r.quantized = values;
  r.commit_loss = 0.0;
  return r;
}

/// Level values for a composite FSQ code, for decoding codes back to vectors.
inline Eigen::VectorXd fsq_values_from_code(int code, const QuantConfig& cfg) {
  if (code < 0 || code >= cfg.level_code_count()) {
    throw std::invalid_argument("fsq_values_from_code: code " + std::to_string(code) +
                                " out of range");
  }
  const std::vector<int> digits = fsq_digits_from_code(code, cfg.fsq_levels);
  Eigen::VectorXd values(static_cast<Eigen::Index>(digits.size()));
  for (std::size_t i = 0; i < digits.size(); ++i) {
    values[static_cast<Eigen::Index>(i)] = fsq_level_value(digits[i], cfg.fsq_levels[i]);
  }
  return values;
}

/// Scheme dispatcher used by the training and decoding pipelines. For shared
/// residual codebooks, `books` holds a single entry reused at every level.
inline QuantResult quantize(const Eigen::VectorXd& z, const QuantConfig& cfg,
                            const std::vector<Codebook>& books) {
  switch (cfg.scheme) {
    case QuantScheme::kVQ:
      return vq_quantize(z, books.at(0));
    case QuantScheme::kFSQ:
      return fsq_quantize(z, cfg);
    case QuantScheme::kRQ: {
      if (cfg.shared_codebooks) {
        std::vector<Codebook> expanded(static_cast<std::size_t>(cfg.steps), books.at(0));
        return rq_quantize(z, expanded);
      }
      if (static_cast<int>(books.size()) != cfg.steps) {
        throw std::invalid_argument("quantize: expected " + std::to_string(cfg.steps) +
                                    " codebooks, got " + std::to_string(books.size()));
      }
      return rq_quantize(z, books);
    }
  }
  throw std::invalid_argument("quantize: unknown scheme");
}

/// Sum of the code vectors addressed by per-level codes: the reconstruction
/// path from parsed mask words back to an embedding.
inline Eigen::VectorXd lookup(const std::vector<int>& codes, const QuantConfig& cfg,
                              const std::vector<Codebook>& books) {
  if (cfg.scheme == QuantScheme::kFSQ) {
    if (codes.size() != 1) throw std::invalid_argument("lookup: FSQ expects one code");
    return fsq_values_from_code(codes[0], cfg);
  }
  if (codes.empty()) throw std::invalid_argument("lookup: empty code list");
  Eigen::VectorXd q;
  for (std::size_t level = 0; level < codes.size(); ++level) {
    const Codebook& book = cfg.shared_codebooks ? books.at(0) : books.at(level);
    if (codes[level] < 0 || codes[level] >= book.size()) {
      throw std::invalid_argument("lookup: code " + std::to_string(codes[level]) +
                                  " out of range at level " + std::to_string(level));
    }
    const Eigen::VectorXd e = book.vectors.row(codes[level]).transpose();
    q = level == 0 ? e : Eigen::VectorXd(q + e);
  }
  return q;
}

/// One EMA codebook update from a batch of (code, input vector) assignments.
/// Only assigned rows are recomputed, so an idle code keeps its vector
/// bit-identical while its staleness counter advances. Codes stale for more
/// than `reseed_window` consecutive updates are reseeded to a recent input
/// plus small noise with their EMA mass reset to one sample.
inline Codebook ema_update(Codebook book,
                           std::span<const std::pair<int, Eigen::VectorXd>> assignments,
                           double decay, int reseed_window, std::mt19937_64& rng) {
  if (!(decay > 0.0 && decay < 1.0)) {
    throw std::invalid_argument("ema_update: decay must lie in (0,1)");
  }
  if (reseed_window <= 0) throw std::invalid_argument("ema_update: reseed_window must be positive");
  const int K = book.size(), d = book.dim();
  Eigen::VectorXd batch_counts = Eigen::VectorXd::Zero(K);
  Eigen::MatrixXd batch_sums = Eigen::MatrixXd::Zero(K, d);
  constexpr std::size_t kRecentCap = 64;
  for (const auto& [code, z] : assignments) {
    if (code < 0 || code >= K) {
      throw std::invalid_argument("ema_update: assignment code " + std::to_string(code) +
                                  " out of range");
    }
    if (z.size() != d) throw std::invalid_argument("ema_update: assignment dim mismatch");
    batch_counts[code] += 1.0;
    batch_sums.row(code) += z.transpose();
    if (book.recent_inputs.size() < kRecentCap) {
      book.recent_inputs.push_back(z);
    } else {
      book.recent_inputs[rng() % kRecentCap] = z;
    }
  }
  constexpr double kCountFloor = 1e-6;
  for (int k = 0; k < K; ++k) {
    book.ema_counts[k] = decay * book.ema_counts[k] + (1.0 - decay) * batch_counts[k];
    book.ema_sums.row(k) = decay * book.ema_sums.row(k) + (1.0 - decay) * batch_sums.row(k);
    if (batch_counts[k] > 0.0) {
      book.stale_batches[static_cast<std::size_t>(k)] = 0;
      book.vectors.row(k) = book.ema_sums.row(k) / std::max(book.ema_counts[k], kCountFloor);
    } else {
      ++book.stale_batches[static_cast<std::size_t>(k)];
      if (book.stale_batches[static_cast<std::size_t>(k)] >
              static_cast<std::uint32_t>(reseed_window) &&
          !book.recent_inputs.empty()) {
        const auto& source =
            book.recent_inputs[rng() % book.recent_inputs.size()];
        std::normal_distribution<double> noise(0.0, 0.01);
        for (int j = 0; j < d; ++j) book.vectors(k, j) = source[j] + noise(rng);
        book.ema_counts[k] = 1.0;
        book.ema_sums.row(k) = book.vectors.row(k);
        book.stale_batches[static_cast<std::size_t>(k)] = 0;
      }
    }
    for (int j = 0; j < d; ++j) {
      if (!std::isfinite(book.vectors(k, j))) {
        throw std::runtime_error("ema_update: non-finite codebook entry at row " +
                                 std::to_string(k));
      }
    }
  }
  return book;
}

/// Fraction of codebook entries that appear at least once in `codes`.
inline double utilization(const Codebook& book, std::span<const int> codes) {
  std::vector<bool> seen(static_cast<std::size_t>(book.size()), false);
  for (int c : codes) {
    if (c < 0 || c >= book.size()) {
      throw std::invalid_argument("utilization: code " + std::to_string(c) + " out of range");
    }
    seen[static_cast<std::size_t>(c)] = true;
  }
  std::size_t distinct = 0;
  for (bool s : seen) distinct += s;
  return static_cast<double>(distinct) / book.size();
}

// ---- Codebook file format ----
//
// Little-endian binary, exact layout (version 1):
//   u32 magic            0x4D544342 ("MTCB")
//   u32 version          1
//   u8  scheme           0 = VQ, 1 = FSQ, 2 = RQ
//   u8  shared flag      0 / 1
//   u16 reserved         0
//   u32 K (codebook size), u32 d (vector dim), u32 S (stored levels)
//   S * (K*d f32)        code vectors, level by level, row-major
//   S * (K f32, K*d f32, K u32)
//                        EMA state per level: counts, sums (row-major),
//                        staleness counters
// Vectors are stored as f32; loading and re-saving a file reproduces it
// byte for byte.

inline constexpr std::uint32_t kCodebookMagic = 0x4D544342;
inline constexpr std::uint32_t kCodebookVersion = 1;

inline void write_codebooks(std::ostream& os, QuantScheme scheme, bool shared,
                            const std::vector<Codebook>& books) {
  if (books.empty()) throw std::invalid_argument("write_codebooks: no codebooks");
  const int K = books[0].size(), d = books[0].dim();
  for (const Codebook& b : books) {
    if (b.size() != K || b.dim() != d) {
      throw std::invalid_argument("write_codebooks: codebooks must share K and d");
    }
  }
  using detail::write_raw;
  write_raw<std::uint32_t>(os, kCodebookMagic);
  write_raw<std::uint32_t>(os, kCodebookVersion);
  write_raw<std::uint8_t>(os, static_cast<std::uint8_t>(scheme));
  write_raw<std::uint8_t>(os, shared ? 1 : 0);
  write_raw<std::uint16_t>(os, 0);
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(K));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(books.size()));
  for (const Codebook& b : books) {
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < d; ++j) write_raw<float>(os, static_cast<float>(b.vectors(k, j)));
    }
  }
  for (const Codebook& b : books) {
    for (int k = 0; k < K; ++k) write_raw<float>(os, static_cast<float>(b.ema_counts[k]));
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < d; ++j) write_raw<float>(os, static_cast<float>(b.ema_sums(k, j)));
    }
    for (int k = 0; k < K; ++k) write_raw<std::uint32_t>(os, b.stale_batches[static_cast<std::size_t>(k)]);
  }
}

struct CodebookFile {
  QuantScheme scheme;
  bool shared;
  std::vector<Codebook> books;
};

inline CodebookFile read_codebooks(std::istream& is) {
  using detail::read_raw;
  if (read_raw<std::uint32_t>(is) != kCodebookMagic) {
    throw std::runtime_error("read_codebooks: bad magic, not a codebook file");
  }
  const auto version = read_raw<std::uint32_t>(is);
  if (version != kCodebookVersion) {
    throw std::runtime_error("read_codebooks: unsupported version " + std::to_string(version));
  }
  CodebookFile f;
  f.scheme = static_cast<QuantScheme>(read_raw<std::uint8_t>(is));
  f.shared = read_raw<std::uint8_t>(is) != 0;
  read_raw<std::uint16_t>(is);
  const int K = static_cast<int>(read_raw<std::uint32_t>(is));
  const int d = static_cast<int>(read_raw<std::uint32_t>(is));
  const int S = static_cast<int>(read_raw<std::uint32_t>(is));
  if (K <= 0 || d <= 0 || S <= 0) throw std::runtime_error("read_codebooks: bad dimensions");
  f.books.resize(static_cast<std::size_t>(S));
  for (Codebook& b : f.books) {
    b.vectors.resize(K, d);
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < d; ++j) b.vectors(k, j) = read_raw<float>(is);
    }
  }
  for (Codebook& b : f.books) {
    b.ema_counts.resize(K);
    for (int k = 0; k < K; ++k) b.ema_counts[k] = read_raw<float>(is);
    b.ema_sums.resize(K, d);
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < d; ++j) b.ema_sums(k, j) = read_raw<float>(is);
    }
    b.stale_batches.resize(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) b.stale_batches[static_cast<std::size_t>(k)] = read_raw<std::uint32_t>(is);
  }
  return f;
}

inline void save_codebooks(const std::string& path, QuantScheme scheme, bool shared,
                           const std::vector<Codebook>& books) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_codebooks: cannot open " + path);
  write_codebooks(os, scheme, shared, books);
}

inline CodebookFile load_codebooks(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_codebooks: cannot open " + path);
  return read_codebooks(is);
}

}  // namespace masktok
