#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "masktok/mask.hpp"
#include "masktok/quantizer.hpp"
#include "masktok/serialize.hpp"

namespace masktok {

struct TrainConfig {
  int grid_w = 32;
  int grid_h = 32;
  int embed_dim = 64;
  int hidden = 256;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int epochs = 12;
  std::uint64_t seed = 1;
  QuantConfig quant;

  int grid_cells() const { return grid_w * grid_h; }

  void validate() const {
    if (grid_w <= 0 || grid_h <= 0) throw std::invalid_argument("TrainConfig: grid must be positive");
    if (embed_dim <= 0) throw std::invalid_argument("TrainConfig: embed_dim must be positive");
    if (hidden <= 0) throw std::invalid_argument("TrainConfig: hidden must be positive");
    if (learning_rate <= 0) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    if (!(adam_beta1 > 0 && adam_beta1 < 1) || !(adam_beta2 > 0 && adam_beta2 < 1)) {
      throw std::invalid_argument("TrainConfig: adam betas must lie in (0,1)");
    }
    if (adam_eps <= 0) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
    if (batch_size <= 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be non-negative");
    quant.validate();
  }
};

inline nlohmann::json quant_config_to_json(const QuantConfig& q) {
  return nlohmann::json{{"scheme", scheme_name(q.scheme)},
                        {"codebook_size", q.codebook_size},
                        {"steps", q.steps},
                        {"shared_codebooks", q.shared_codebooks},
                        {"commit_weight", q.commit_weight},
                        {"fsq_levels", q.fsq_levels},
                        {"ema_decay", q.ema_decay},
                        {"reseed_window", q.reseed_window}};
}

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool found = false;
    for (const char* k : known) {
      if (it.key() == k) {
        found = true;
        break;
      }
    }
    if (!found) throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
  }
}

inline QuantConfig quant_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"scheme", "codebook_size", "steps", "shared_codebooks", "commit_weight",
                       "fsq_levels", "ema_decay", "reseed_window"},
                      "quant config");
  QuantConfig q;
  if (j.contains("scheme")) q.scheme = scheme_from_name(j.at("scheme").get<std::string>());
  if (j.contains("codebook_size")) q.codebook_size = j.at("codebook_size").get<int>();
  if (j.contains("steps")) q.steps = j.at("steps").get<int>();
  if (j.contains("shared_codebooks")) q.shared_codebooks = j.at("shared_codebooks").get<bool>();
  if (j.contains("commit_weight")) q.commit_weight = j.at("commit_weight").get<double>();
  if (j.contains("fsq_levels")) q.fsq_levels = j.at("fsq_levels").get<std::vector<int>>();
  if (j.contains("ema_decay")) q.ema_decay = j.at("ema_decay").get<double>();
  if (j.contains("reseed_window")) q.reseed_window = j.at("reseed_window").get<int>();
  q.validate();
  return q;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"grid_w", c.grid_w},
                        {"grid_h", c.grid_h},
                        {"embed_dim", c.embed_dim},
                        {"hidden", c.hidden},
                        {"learning_rate", c.learning_rate},
                        {"adam_beta1", c.adam_beta1},
                        {"adam_beta2", c.adam_beta2},
                        {"adam_eps", c.adam_eps},
                        {"batch_size", c.batch_size},
                        {"epochs", c.epochs},
                        {"seed", c.seed},
                        {"quant", quant_config_to_json(c.quant)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"grid_w", "grid_h", "embed_dim", "hidden", "learning_rate", "adam_beta1",
                       "adam_beta2", "adam_eps", "batch_size", "epochs", "seed", "quant"},
                      "train config");
  TrainConfig c;
  if (j.contains("grid_w")) c.grid_w = j.at("grid_w").get<int>();
  if (j.contains("grid_h")) c.grid_h = j.at("grid_h").get<int>();
  if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<int>();
  if (j.contains("hidden")) c.hidden = j.at("hidden").get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("adam_beta1")) c.adam_beta1 = j.at("adam_beta1").get<double>();
  if (j.contains("adam_beta2")) c.adam_beta2 = j.at("adam_beta2").get<double>();
  if (j.contains("adam_eps")) c.adam_eps = j.at("adam_eps").get<double>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("quant")) c.quant = quant_config_from_json(j.at("quant"));
  c.validate();
  return c;
}

/// Dense two-layer encoder and decoder weights. The encoder maps a flattened
/// grid through one tanh layer to the embedding; the decoder mirrors it back
/// to per-cell logits. The fsq matrices project the embedding into the FSQ
/// coordinate space and back; they stay 0x0 for VQ/RQ.
struct NetParams {
  int grid_w = 0;
  int grid_h = 0;
  Eigen::MatrixXd enc_w1;  // hidden x in
  Eigen::VectorXd enc_b1;
  Eigen::MatrixXd enc_w2;  // d x hidden
  Eigen::VectorXd enc_b2;
  Eigen::MatrixXd dec_w1;  // hidden x d
  Eigen::VectorXd dec_b1;
  Eigen::MatrixXd dec_w2;  // out x hidden
  Eigen::VectorXd dec_b2;
  Eigen::MatrixXd fsq_proj;    // d_f x d
  Eigen::MatrixXd fsq_deproj;  // d x d_f

  int input_cells() const { return static_cast<int>(enc_w1.cols()); }
  int embed_dim() const { return static_cast<int>(enc_w2.rows()); }
};

namespace detail {

inline Eigen::MatrixXd random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

}  // namespace detail

inline NetParams init_params(const TrainConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  NetParams p;
  p.grid_w = cfg.grid_w;
  p.grid_h = cfg.grid_h;
  const int in = cfg.grid_cells();
  p.enc_w1 = detail::random_matrix(cfg.hidden, in, rng);
  p.enc_b1 = Eigen::VectorXd::Zero(cfg.hidden);
  p.enc_w2 = detail::random_matrix(cfg.embed_dim, cfg.hidden, rng);
  p.enc_b2 = Eigen::VectorXd::Zero(cfg.embed_dim);
  p.dec_w1 = detail::random_matrix(cfg.hidden, cfg.embed_dim, rng);
  p.dec_b1 = Eigen::VectorXd::Zero(cfg.hidden);
  p.dec_w2 = detail::random_matrix(in, cfg.hidden, rng);
  p.dec_b2 = Eigen::VectorXd::Zero(in);
  if (cfg.quant.scheme == QuantScheme::kFSQ) {
    const int df = static_cast<int>(cfg.quant.fsq_levels.size());
    p.fsq_proj = detail::random_matrix(df, cfg.embed_dim, rng);
    p.fsq_deproj = detail::random_matrix(cfg.embed_dim, df, rng);
  }
  return p;
}

/// Encoder forward pass for one grid.
inline Eigen::VectorXd encode(const SoftGrid& g, const NetParams& p) {
  if (g.width != p.grid_w || g.height != p.grid_h) {
    throw std::invalid_argument("encode: grid " + shape_string(g.width, g.height) +
                                " does not match network grid " +
                                shape_string(p.grid_w, p.grid_h));
  }
  Eigen::Map<const Eigen::VectorXd> x(g.values.data(), static_cast<Eigen::Index>(g.values.size()));
  const Eigen::VectorXd h = ((p.enc_w1 * x) + p.enc_b1).array().tanh();
  return (p.enc_w2 * h) + p.enc_b2;
}

/// Decoder forward pass: embedding to per-cell probabilities via the
/// logistic function, so every output lies strictly inside (0,1).
inline SoftGrid decode(const Eigen::VectorXd& q, const NetParams& p) {
  if (q.size() != p.embed_dim()) {
    throw std::invalid_argument("decode: embedding dim " + std::to_string(q.size()) +
                                " does not match network dim " + std::to_string(p.embed_dim()));
  }
  const Eigen::VectorXd h = ((p.dec_w1 * q) + p.dec_b1).array().tanh();
  const Eigen::VectorXd logits = (p.dec_w2 * h) + p.dec_b2;
  SoftGrid g = SoftGrid::zeros(p.grid_w, p.grid_h);
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    g.values[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-logits[i]));
  }
  return g;
}

constexpr double kDiceSmoothing = 1.0;

/// Dice loss 1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps) with eps = 1.
inline double dice_loss(const SoftGrid& pred, const Mask& truth) {
  if (pred.width != truth.width || pred.height != truth.height) {
    throw std::invalid_argument("dice_loss: shape mismatch " +
                                shape_string(pred.width, pred.height) + " vs " +
                                shape_string(truth.width, truth.height));
  }
  double pt = 0.0, ps = 0.0, ts = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    pt += pred.values[i] * truth.bits[i];
    ps += pred.values[i];
    ts += truth.bits[i];
  }
  return 1.0 - (2.0 * pt + kDiceSmoothing) / (ps + ts + kDiceSmoothing);
}

namespace detail {

/// Stable binary cross entropy from a logit: max(x,0) - x*t + log1p(exp(-|x|)).
inline double bce_from_logit(double logit, double target) {
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace detail

/// Mean binary cross entropy. Probabilities are converted back to logits and
/// evaluated in the stable form, matching the training-path computation.
inline double bce_loss(const SoftGrid& pred, const Mask& truth) {
  if (pred.width != truth.width || pred.height != truth.height) {
    throw std::invalid_argument("bce_loss: shape mismatch " +
                                shape_string(pred.width, pred.height) + " vs " +
                                shape_string(truth.width, truth.height));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double p = pred.values[i];
    if (!(p > 0.0 && p < 1.0)) {
      throw std::invalid_argument("bce_loss: probabilities must lie strictly inside (0,1)");
    }
    const double logit = std::log(p) - std::log1p(-p);
    sum += detail::bce_from_logit(logit, truth.bits[i]);
  }
  return sum / static_cast<double>(pred.values.size());
}

/// Frozen quantization trace for straight-through gradient checking: the
/// quantizer is replayed as out = in + (base_out - base_in), which is the
/// smooth function whose true derivative equals the straight-through
/// estimate. For VQ/RQ base_in is the embedding z; for FSQ it is the
/// tanh-bounded projection. `retrieved` keeps the frozen code vectors for
/// recomputing the commitment term around the perturbed point.
struct PinnedQuant {
  Eigen::VectorXd base_in;
  Eigen::VectorXd base_out;
  std::vector<Eigen::VectorXd> retrieved;
};

/// How the bottleneck behaves during a forward pass.
enum class BottleneckMode {
  kHard,      // real quantization
  kPinned,    // straight-through replay around a frozen trace
  kIdentity,  // debug mode: bottleneck bypassed, plain autoencoder
};

struct ForwardState {
  Eigen::MatrixXd grids;    // n x in
  Eigen::MatrixXd targets;  // n x in, binary
  Eigen::MatrixXd h_enc;    // n x hidden
  Eigen::MatrixXd z;        // n x d
  std::vector<QuantResult> traces;
  Eigen::MatrixXd fsq_p;   // n x d_f (FSQ only)
  Eigen::MatrixXd fsq_t;   // n x d_f
  Eigen::MatrixXd fsq_q;   // n x d_f
  Eigen::MatrixXd q;       // n x d, decoder input
  Eigen::MatrixXd h_dec;   // n x hidden
  Eigen::MatrixXd logits;  // n x in
  Eigen::MatrixXd probs;   // n x in
  double ce = 0.0;
  double dice = 0.0;
  double commit = 0.0;

  double recon() const { return ce + dice; }
  double total(double commit_weight) const { return ce + dice + commit_weight * commit; }
};

namespace detail {

/// Resample a mask onto the network grid. Shrinking uses area averaging;
/// growing (or growing on one axis) falls back to the generic resampler.
inline SoftGrid to_grid(const Mask& m, int gw, int gh) {
  validate_mask(m);
  if (m.width == gw && m.height == gh) {
    SoftGrid g = SoftGrid::zeros(gw, gh);
    for (std::size_t i = 0; i < m.bits.size(); ++i) g.values[i] = m.bits[i];
    return g;
  }
  return area_resample(m, gw, gh);
}

inline Eigen::MatrixXd batch_grids(std::span<const Mask> batch, const TrainConfig& cfg) {
  Eigen::MatrixXd g(static_cast<Eigen::Index>(batch.size()), cfg.grid_cells());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SoftGrid grid = to_grid(batch[i], cfg.grid_w, cfg.grid_h);
    for (int j = 0; j < cfg.grid_cells(); ++j) {
      g(static_cast<Eigen::Index>(i), j) = grid.values[static_cast<std::size_t>(j)];
    }
  }
  return g;
}

/// Training target at grid resolution: the mask itself when sizes match,
/// otherwise the resampled grid thresholded at 0.5.
inline Eigen::MatrixXd batch_targets(const Eigen::MatrixXd& grids, std::span<const Mask> batch,
                                     const TrainConfig& cfg) {
  Eigen::MatrixXd t = grids;
  bool all_native = true;
  for (const Mask& m : batch) {
    if (m.width != cfg.grid_w || m.height != cfg.grid_h) all_native = false;
  }
  if (!all_native) {
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = t(i, j) > 0.5 ? 1.0 : 0.0;
    }
  }
  return t;
}

}  // namespace detail

/// Full forward pass over a batch of grids. `pinned` must hold one trace per
/// row when mode is kPinned.
inline ForwardState forward_batch(const Eigen::MatrixXd& grids, const Eigen::MatrixXd& targets,
                                  const NetParams& p, const std::vector<Codebook>& books,
                                  const TrainConfig& cfg,
                                  BottleneckMode mode = BottleneckMode::kHard,
                                  const std::vector<PinnedQuant>* pinned = nullptr) {
  const Eigen::Index n = grids.rows();
  ForwardState s;
  s.grids = grids;
  s.targets = targets;
  s.h_enc = ((grids * p.enc_w1.transpose()).rowwise() + p.enc_b1.transpose()).array().tanh();
  s.z = (s.h_enc * p.enc_w2.transpose()).rowwise() + p.enc_b2.transpose();

  const bool fsq = cfg.quant.scheme == QuantScheme::kFSQ;
  if (mode == BottleneckMode::kIdentity) {
    s.q = s.z;
  } else if (fsq) {
    s.fsq_p = (s.z * p.fsq_proj.transpose());
    s.fsq_t = s.fsq_p.array().tanh();
    s.fsq_q.resize(n, s.fsq_t.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mode == BottleneckMode::kPinned) {
        const PinnedQuant& pin = (*pinned)[static_cast<std::size_t>(i)];
        s.fsq_q.row(i) = s.fsq_t.row(i) + (pin.base_out - pin.base_in).transpose();
      } else {
        QuantResult r = fsq_quantize(s.fsq_p.row(i).transpose(), cfg.quant);
        s.fsq_q.row(i) = r.quantized.transpose();
        s.traces.push_back(std::move(r));
      }
    }
    s.q = s.fsq_q * p.fsq_deproj.transpose();
  } else {
    s.q.resize(n, s.z.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd zi = s.z.row(i).transpose();
      if (mode == BottleneckMode::kPinned) {
        const PinnedQuant& pin = (*pinned)[static_cast<std::size_t>(i)];
        s.q.row(i) = (zi + (pin.base_out - pin.base_in)).transpose();
        Eigen::VectorXd residual = zi;
        for (const Eigen::VectorXd& e : pin.retrieved) {
          residual -= e;
          s.commit += residual.squaredNorm();
        }
      } else {
        QuantResult r = quantize(zi, cfg.quant, books);
        s.q.row(i) = r.quantized.transpose();
        s.commit += r.commit_loss;
        s.traces.push_back(std::move(r));
      }
    }
  }
  s.commit /= static_cast<double>(n);

  s.h_dec = ((s.q * p.dec_w1.transpose()).rowwise() + p.dec_b1.transpose()).array().tanh();
  s.logits = (s.h_dec * p.dec_w2.transpose()).rowwise() + p.dec_b2.transpose();
  s.probs = s.logits.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });

  const Eigen::Index cells = s.logits.cols();
  double ce_sum = 0.0, dice_sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double pt = 0.0, ps = 0.0, ts = 0.0;
    for (Eigen::Index j = 0; j < cells; ++j) {
      ce_sum += detail::bce_from_logit(s.logits(i, j), s.targets(i, j));
      pt += s.probs(i, j) * s.targets(i, j);
      ps += s.probs(i, j);
      ts += s.targets(i, j);
    }
    dice_sum += 1.0 - (2.0 * pt + kDiceSmoothing) / (ps + ts + kDiceSmoothing);
  }
  s.ce = ce_sum / static_cast<double>(n * cells);
  s.dice = dice_sum / static_cast<double>(n);
  return s;
}

/// Capture the frozen traces of a hard forward pass for pinned replay.
inline std::vector<PinnedQuant> capture_pinned(const ForwardState& s, const TrainConfig& cfg) {
  std::vector<PinnedQuant> pins;
  const bool fsq = cfg.quant.scheme == QuantScheme::kFSQ;
  for (std::size_t i = 0; i < s.traces.size(); ++i) {
    PinnedQuant pin;
    if (fsq) {
      pin.base_in = s.fsq_t.row(static_cast<Eigen::Index>(i)).transpose();
      pin.base_out = s.traces[i].quantized;
    } else {
      pin.base_in = s.z.row(static_cast<Eigen::Index>(i)).transpose();
      pin.base_out = s.traces[i].quantized;
      pin.retrieved = s.traces[i].retrieved;
    }
    pins.push_back(std::move(pin));
  }
  return pins;
}

struct NetGrads {
  Eigen::MatrixXd enc_w1, enc_w2, dec_w1, dec_w2, fsq_proj, fsq_deproj;
  Eigen::VectorXd enc_b1, enc_b2, dec_b1, dec_b2;

  double squared_norm() const {
    double s = enc_w1.squaredNorm() + enc_w2.squaredNorm() + dec_w1.squaredNorm() +
               dec_w2.squaredNorm() + enc_b1.squaredNorm() + enc_b2.squaredNorm() +
               dec_b1.squaredNorm() + dec_b2.squaredNorm();
    if (fsq_proj.size() > 0) s += fsq_proj.squaredNorm() + fsq_deproj.squaredNorm();
    return s;
  }
};

/// Backward pass for the total loss ce + dice + commit_weight * commit.
/// The bottleneck uses straight-through estimation: the reconstruction
/// gradient reaching the quantized vector is passed to the embedding
/// unchanged, and the commitment term contributes 2 * sum of residuals.
inline NetGrads backward_batch(const ForwardState& s, const NetParams& p, const TrainConfig& cfg,
                               BottleneckMode mode = BottleneckMode::kHard,
                               const std::vector<PinnedQuant>* pinned = nullptr) {
  const Eigen::Index n = s.grids.rows();
  const Eigen::Index cells = s.logits.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  // d(total)/d(logits): cross-entropy plus dice through the logistic map.
  Eigen::MatrixXd dlogits = (s.probs - s.targets) / static_cast<double>(n * cells);
  for (Eigen::Index i = 0; i < n; ++i) {
    double pt = 0.0, ps = 0.0, ts = 0.0;
    for (Eigen::Index j = 0; j < cells; ++j) {
      pt += s.probs(i, j) * s.targets(i, j);
      ps += s.probs(i, j);
      ts += s.targets(i, j);
    }
    const double s1 = ps + ts + kDiceSmoothing;
    const double s2 = 2.0 * pt + kDiceSmoothing;
    for (Eigen::Index j = 0; j < cells; ++j) {
      const double ddice_dp = -(2.0 * s.targets(i, j) * s1 - s2) / (s1 * s1);
      const double dp_dx = s.probs(i, j) * (1.0 - s.probs(i, j));
      dlogits(i, j) += inv_n * ddice_dp * dp_dx;
    }
  }

  NetGrads g;
  g.dec_w2 = dlogits.transpose() * s.h_dec;
  g.dec_b2 = dlogits.colwise().sum().transpose();
  Eigen::MatrixXd dh_dec = dlogits * p.dec_w2;
  Eigen::MatrixXd da_dec = dh_dec.array() * (1.0 - s.h_dec.array().square());
  g.dec_w1 = da_dec.transpose() * s.q;
  g.dec_b1 = da_dec.colwise().sum().transpose();
  Eigen::MatrixXd dq = da_dec * p.dec_w1;  // n x d

  Eigen::MatrixXd dz;
  const bool fsq = cfg.quant.scheme == QuantScheme::kFSQ;
  if (mode == BottleneckMode::kIdentity) {
    dz = dq;
  } else if (fsq) {
    Eigen::MatrixXd dqf = dq * p.fsq_deproj;  // n x d_f
    g.fsq_deproj = dq.transpose() * s.fsq_q;
    Eigen::MatrixXd dt = dqf;  // straight-through across the rounding
    Eigen::MatrixXd dp_fsq = dt.array() * (1.0 - s.fsq_t.array().square());
    g.fsq_proj = dp_fsq.transpose() * s.z;
    dz = dp_fsq * p.fsq_proj;
  } else {
    dz = dq;  // straight-through
    const double cscale = 2.0 * cfg.quant.commit_weight * inv_n;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mode == BottleneckMode::kPinned) {
        const PinnedQuant& pin = (*pinned)[static_cast<std::size_t>(i)];
        Eigen::VectorXd residual = s.z.row(i).transpose();
        for (const Eigen::VectorXd& e : pin.retrieved) {
          residual -= e;
          dz.row(i) += cscale * residual.transpose();
        }
      } else {
        for (const Eigen::VectorXd& r : s.traces[static_cast<std::size_t>(i)].residuals) {
          dz.row(i) += cscale * r.transpose();
        }
      }
    }
  }

  g.enc_w2 = dz.transpose() * s.h_enc;
  g.enc_b2 = dz.colwise().sum().transpose();
  Eigen::MatrixXd dh_enc = dz * p.enc_w2;
  Eigen::MatrixXd da_enc = dh_enc.array() * (1.0 - s.h_enc.array().square());
  g.enc_w1 = da_enc.transpose() * s.grids;
  g.enc_b1 = da_enc.colwise().sum().transpose();
  return g;
}

namespace detail {

inline void check_finite(const Eigen::MatrixXd& m, const char* name) {
  if (!m.allFinite()) {
    throw std::runtime_error(std::string("non-finite gradient in tensor ") + name);
  }
}

inline void check_finite(const Eigen::VectorXd& v, const char* name) {
  if (!v.allFinite()) {
    throw std::runtime_error(std::string("non-finite gradient in tensor ") + name);
  }
}

}  // namespace detail

inline void check_grads_finite(const NetGrads& g) {
  detail::check_finite(g.enc_w1, "enc_w1");
  detail::check_finite(g.enc_b1, "enc_b1");
  detail::check_finite(g.enc_w2, "enc_w2");
  detail::check_finite(g.enc_b2, "enc_b2");
  detail::check_finite(g.dec_w1, "dec_w1");
  detail::check_finite(g.dec_b1, "dec_b1");
  detail::check_finite(g.dec_w2, "dec_w2");
  detail::check_finite(g.dec_b2, "dec_b2");
  if (g.fsq_proj.size() > 0) {
    detail::check_finite(g.fsq_proj, "fsq_proj");
    detail::check_finite(g.fsq_deproj, "fsq_deproj");
  }
}

struct AdamState {
  std::int64_t t = 0;
  NetGrads m;
  NetGrads v;
  bool initialized = false;
};

namespace detail {

inline void adam_tensor(Eigen::MatrixXd& theta, const Eigen::MatrixXd& grad, Eigen::MatrixXd& m,
                        Eigen::MatrixXd& v, const TrainConfig& cfg, double bc1, double bc2) {
  if (theta.size() == 0) return;
  m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
  v = (cfg.adam_beta2 * v.array() + (1.0 - cfg.adam_beta2) * grad.array().square()).matrix();
  theta.array() -=
      cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
}

inline void adam_tensor(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, Eigen::VectorXd& m,
                        Eigen::VectorXd& v, const TrainConfig& cfg, double bc1, double bc2) {
  if (theta.size() == 0) return;
  m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
  v = (cfg.adam_beta2 * v.array() + (1.0 - cfg.adam_beta2) * grad.array().square()).matrix();
  theta.array() -=
      cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
}

inline NetGrads zero_like(const NetParams& p) {
  NetGrads g;
  g.enc_w1 = Eigen::MatrixXd::Zero(p.enc_w1.rows(), p.enc_w1.cols());
  g.enc_b1 = Eigen::VectorXd::Zero(p.enc_b1.size());
  g.enc_w2 = Eigen::MatrixXd::Zero(p.enc_w2.rows(), p.enc_w2.cols());
  g.enc_b2 = Eigen::VectorXd::Zero(p.enc_b2.size());
  g.dec_w1 = Eigen::MatrixXd::Zero(p.dec_w1.rows(), p.dec_w1.cols());
  g.dec_b1 = Eigen::VectorXd::Zero(p.dec_b1.size());
  g.dec_w2 = Eigen::MatrixXd::Zero(p.dec_w2.rows(), p.dec_w2.cols());
  g.dec_b2 = Eigen::VectorXd::Zero(p.dec_b2.size());
  g.fsq_proj = Eigen::MatrixXd::Zero(p.fsq_proj.rows(), p.fsq_proj.cols());
  g.fsq_deproj = Eigen::MatrixXd::Zero(p.fsq_deproj.rows(), p.fsq_deproj.cols());
  return g;
}

}  // namespace detail

inline void adam_update(NetParams& p, const NetGrads& g, AdamState& st, const TrainConfig& cfg) {
  if (!st.initialized) {
    st.m = detail::zero_like(p);
    st.v = detail::zero_like(p);
    st.initialized = true;
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.t));
  detail::adam_tensor(p.enc_w1, g.enc_w1, st.m.enc_w1, st.v.enc_w1, cfg, bc1, bc2);
  detail::adam_tensor(p.enc_b1, g.enc_b1, st.m.enc_b1, st.v.enc_b1, cfg, bc1, bc2);
  detail::adam_tensor(p.enc_w2, g.enc_w2, st.m.enc_w2, st.v.enc_w2, cfg, bc1, bc2);
  detail::adam_tensor(p.enc_b2, g.enc_b2, st.m.enc_b2, st.v.enc_b2, cfg, bc1, bc2);
  detail::adam_tensor(p.dec_w1, g.dec_w1, st.m.dec_w1, st.v.dec_w1, cfg, bc1, bc2);
  detail::adam_tensor(p.dec_b1, g.dec_b1, st.m.dec_b1, st.v.dec_b1, cfg, bc1, bc2);
  detail::adam_tensor(p.dec_w2, g.dec_w2, st.m.dec_w2, st.v.dec_w2, cfg, bc1, bc2);
  detail::adam_tensor(p.dec_b2, g.dec_b2, st.m.dec_b2, st.v.dec_b2, cfg, bc1, bc2);
  if (p.fsq_proj.size() > 0 && g.fsq_proj.size() > 0) {
    detail::adam_tensor(p.fsq_proj, g.fsq_proj, st.m.fsq_proj, st.v.fsq_proj, cfg, bc1, bc2);
    detail::adam_tensor(p.fsq_deproj, g.fsq_deproj, st.m.fsq_deproj, st.v.fsq_deproj, cfg, bc1,
                        bc2);
  }
}

struct TrainStepReport {
  double recon_loss = 0.0;
  double ce_loss = 0.0;
  double dice_loss = 0.0;
  double commit_loss = 0.0;
  double total_loss = 0.0;
  double grad_norm = 0.0;
  double codebook_utilization = 0.0;
};

inline nlohmann::json report_to_json(const TrainStepReport& r) {
  return nlohmann::json{{"recon", r.recon_loss},       {"ce", r.ce_loss},
                        {"dice", r.dice_loss},         {"commit", r.commit_loss},
                        {"total", r.total_loss},       {"grad_norm", r.grad_norm},
                        {"utilization", r.codebook_utilization}};
}

/// One optimization step: forward with hard quantization, straight-through
/// backward, Adam update of the network, EMA update of the codebooks.
inline TrainStepReport train_step(std::span<const Mask> batch, NetParams& params,
                                  std::vector<Codebook>& books, AdamState& adam,
                                  const TrainConfig& cfg, std::mt19937_64& rng) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const Eigen::MatrixXd grids = detail::batch_grids(batch, cfg);
  const Eigen::MatrixXd targets = detail::batch_targets(grids, batch, cfg);
  ForwardState s = forward_batch(grids, targets, params, books, cfg);
  NetGrads g = backward_batch(s, params, cfg);
  check_grads_finite(g);
  adam_update(params, g, adam, cfg);

  const int level_codes = cfg.quant.level_code_count();
  std::vector<bool> used(static_cast<std::size_t>(level_codes) *
                             static_cast<std::size_t>(cfg.quant.steps),
                         false);
  if (cfg.quant.scheme != QuantScheme::kFSQ) {
    const std::size_t levels = cfg.quant.shared_codebooks ? 1 : books.size();
    std::vector<std::vector<std::pair<int, Eigen::VectorXd>>> assignments(levels);
    for (const QuantResult& t : s.traces) {
      for (std::size_t level = 0; level < t.codes.size(); ++level) {
        const Eigen::VectorXd level_input = t.residuals[level] + t.retrieved[level];
        assignments[cfg.quant.shared_codebooks ? 0 : level].emplace_back(t.codes[level],
                                                                         level_input);
        used[level * static_cast<std::size_t>(level_codes) +
             static_cast<std::size_t>(t.codes[level])] = true;
      }
    }
    for (std::size_t level = 0; level < levels; ++level) {
      books[level] = ema_update(std::move(books[level]), assignments[level], cfg.quant.ema_decay,
                                cfg.quant.reseed_window, rng);
    }
  } else {
    for (const QuantResult& t : s.traces) {
      used[static_cast<std::size_t>(t.codes[0])] = true;
    }
  }
  std::size_t distinct = 0;
  for (bool u : used) distinct += u;

  TrainStepReport r;
  r.ce_loss = s.ce;
  r.dice_loss = s.dice;
  r.commit_loss = s.commit;
  r.recon_loss = s.ce + s.dice;
  r.total_loss = s.ce + s.dice + cfg.quant.commit_weight * s.commit;
  r.grad_norm = std::sqrt(g.squared_norm());
  r.codebook_utilization = static_cast<double>(distinct) / static_cast<double>(used.size());
  return r;
}

/// Tokenize-then-detokenize a single mask: resample to the network grid,
/// encode, quantize, decode, and binarize back at the input resolution.
inline std::pair<Mask, QuantResult> reconstruct(const Mask& m, const NetParams& params,
                                                const std::vector<Codebook>& books,
                                                const TrainConfig& cfg) {
  const SoftGrid grid = detail::to_grid(m, cfg.grid_w, cfg.grid_h);
  const Eigen::VectorXd z = encode(grid, params);
  QuantResult trace;
  Eigen::VectorXd q;
  if (cfg.quant.scheme == QuantScheme::kFSQ) {
    const Eigen::VectorXd proj = params.fsq_proj * z;
    trace = fsq_quantize(proj, cfg.quant);
    q = params.fsq_deproj * trace.quantized;
  } else {
    trace = quantize(z, cfg.quant, books);
    q = trace.quantized;
  }
  const SoftGrid probs = decode(q, params);
  return {binarize(probs, 0.5, m.width, m.height), std::move(trace)};
}

/// Decode quantization codes straight to a mask at the requested resolution:
/// the text-side detokenization path.
inline Mask decode_codes(const std::vector<int>& codes, const NetParams& params,
                         const std::vector<Codebook>& books, const TrainConfig& cfg, int out_w,
                         int out_h) {
  Eigen::VectorXd q = lookup(codes, cfg.quant, books);
  if (cfg.quant.scheme == QuantScheme::kFSQ) q = params.fsq_deproj * q;
  return binarize(decode(q, params), 0.5, out_w, out_h);
}

/// Mean reconstruction IoU over a dataset (the r-Acc metric).
inline double eval_r_acc(std::span<const Mask> dataset, const NetParams& params,
                         const std::vector<Codebook>& books, const TrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("eval_r_acc: empty dataset");
  double sum = 0.0;
  for (const Mask& m : dataset) {
    sum += iou(m, reconstruct(m, params, books, cfg).first);
  }
  return sum / static_cast<double>(dataset.size());
}

/// Owns the full training state and provides the deterministic epoch loop.
/// Codebooks are seeded from the first batch of encoder outputs (and their
/// residuals for the deeper levels) before the first step.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    params_ = init_params(cfg_, rng_);
    if (cfg_.quant.scheme != QuantScheme::kFSQ) {
      const int levels =
          cfg_.quant.scheme == QuantScheme::kVQ || cfg_.quant.shared_codebooks ? 1 : cfg_.quant.steps;
      for (int i = 0; i < levels; ++i) {
        books_.push_back(Codebook::random_init(cfg_.quant.codebook_size, cfg_.embed_dim, rng_));
      }
    }
  }

  const TrainConfig& config() const { return cfg_; }
  const NetParams& params() const { return params_; }
  const std::vector<Codebook>& books() const { return books_; }
  std::uint64_t step_count() const { return step_; }

  TrainStepReport step(std::span<const Mask> batch) {
    if (!books_seeded_) seed_books(batch);
    TrainStepReport r = train_step(batch, params_, books_, adam_, cfg_, rng_);
    ++step_;
    return r;
  }

  /// Epoch loop with seed-derived shuffling. The callback receives the
  /// 1-based step index and the step report.
  void fit(const std::vector<Mask>& data,
           const std::function<void(std::uint64_t, const TrainStepReport&)>& on_step = {}) {
    if (data.empty()) throw std::invalid_argument("Trainer::fit: empty dataset");
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<Mask> batch;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng_);
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg_.batch_size)) {
        const std::size_t end =
            std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
        batch.clear();
        for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
        const TrainStepReport r = step(batch);
        if (on_step) on_step(step_, r);
      }
    }
  }

  double evaluate(std::span<const Mask> dataset) const {
    return eval_r_acc(dataset, params_, books_, cfg_);
  }

 private:
  void seed_books(std::span<const Mask> batch) {
    books_seeded_ = true;
    if (books_.empty()) return;
    const Eigen::MatrixXd grids = detail::batch_grids(batch, cfg_);
    Eigen::MatrixXd residuals =
        ((grids * params_.enc_w1.transpose()).rowwise() + params_.enc_b1.transpose())
            .array()
            .tanh()
            .matrix() *
            params_.enc_w2.transpose();
    residuals.rowwise() += params_.enc_b2.transpose();
    std::normal_distribution<double> noise(0.0, 0.02);
    for (Codebook& book : books_) {
      for (int k = 0; k < book.size(); ++k) {
        const Eigen::Index row = static_cast<Eigen::Index>(rng_() % residuals.rows());
        for (int j = 0; j < book.dim(); ++j) book.vectors(k, j) = residuals(row, j) + noise(rng_);
      }
      for (Eigen::Index i = 0; i < residuals.rows(); ++i) {
        const int code = nearest_code(book, residuals.row(i).transpose());
        residuals.row(i) -= book.vectors.row(code);
      }
    }
  }

  TrainConfig cfg_;
  std::mt19937_64 rng_;
  NetParams params_;
  std::vector<Codebook> books_;
  AdamState adam_;
  std::uint64_t step_ = 0;
  bool books_seeded_ = false;
};

// ---- Checkpoint format ----
//
// Little-endian binary, exact layout (version 1):
//   u32 magic            0x4D54434B ("MTCK")
//   u32 version          1
//   u64 length + bytes   train config echo, canonical JSON
//   u64 step counter
//   u32 grid_w, u32 grid_h
//   10 tensors, each as u32 rows, u32 cols, then rows*cols f64 row-major:
//     enc_w1, enc_b1, enc_w2, enc_b2, dec_w1, dec_b1, dec_w2, dec_b2,
//     fsq_proj, fsq_deproj (0x0 when unused)
//   u8 has_codebooks, then the codebook stream documented in quantizer.hpp

inline constexpr std::uint32_t kCheckpointMagic = 0x4D54434B;
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig cfg;
  NetParams params;
  std::vector<Codebook> books;
  std::uint64_t step = 0;
};

namespace detail {

inline void write_tensor(std::ostream& os, const Eigen::MatrixXd& m) {
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) write_raw<double>(os, m(i, j));
  }
}

inline void write_tensor(std::ostream& os, const Eigen::VectorXd& v) {
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
  write_raw<std::uint32_t>(os, 1);
  for (Eigen::Index i = 0; i < v.size(); ++i) write_raw<double>(os, v[i]);
}

inline Eigen::MatrixXd read_matrix(std::istream& is) {
  const auto rows = read_raw<std::uint32_t>(is);
  const auto cols = read_raw<std::uint32_t>(is);
  Eigen::MatrixXd m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = read_raw<double>(is);
  }
  return m;
}

inline Eigen::VectorXd read_vector(std::istream& is) {
  const Eigen::MatrixXd m = read_matrix(is);
  if (m.cols() != 1 && m.size() != 0) throw std::runtime_error("checkpoint: expected column vector");
  return m.col(0);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  using detail::write_raw;
  write_raw<std::uint32_t>(os, kCheckpointMagic);
  write_raw<std::uint32_t>(os, kCheckpointVersion);
  detail::write_bytes(os, train_config_to_json(c.cfg).dump());
  write_raw<std::uint64_t>(os, c.step);
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.params.grid_w));
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.params.grid_h));
  detail::write_tensor(os, c.params.enc_w1);
  detail::write_tensor(os, c.params.enc_b1);
  detail::write_tensor(os, c.params.enc_w2);
  detail::write_tensor(os, c.params.enc_b2);
  detail::write_tensor(os, c.params.dec_w1);
  detail::write_tensor(os, c.params.dec_b1);
  detail::write_tensor(os, c.params.dec_w2);
  detail::write_tensor(os, c.params.dec_b2);
  detail::write_tensor(os, c.params.fsq_proj);
  detail::write_tensor(os, c.params.fsq_deproj);
  write_raw<std::uint8_t>(os, c.books.empty() ? 0 : 1);
  if (!c.books.empty()) {
    write_codebooks(os, c.cfg.quant.scheme, c.cfg.quant.shared_codebooks, c.books);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  using detail::read_raw;
  if (read_raw<std::uint32_t>(is) != kCheckpointMagic) {
    throw std::runtime_error("read_checkpoint: bad magic, not a checkpoint file");
  }
  const auto version = read_raw<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("read_checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  c.cfg = train_config_from_json(nlohmann::json::parse(detail::read_bytes(is)));
  c.step = read_raw<std::uint64_t>(is);
  c.params.grid_w = static_cast<int>(read_raw<std::uint32_t>(is));
  c.params.grid_h = static_cast<int>(read_raw<std::uint32_t>(is));
  c.params.enc_w1 = detail::read_matrix(is);
  c.params.enc_b1 = detail::read_vector(is);
  c.params.enc_w2 = detail::read_matrix(is);
  c.params.enc_b2 = detail::read_vector(is);
  c.params.dec_w1 = detail::read_matrix(is);
  c.params.dec_b1 = detail::read_vector(is);
  c.params.dec_w2 = detail::read_matrix(is);
  c.params.dec_b2 = detail::read_vector(is);
  c.params.fsq_proj = detail::read_matrix(is);
  c.params.fsq_deproj = detail::read_matrix(is);
  if (read_raw<std::uint8_t>(is) != 0) {
    c.books = read_codebooks(is).books;
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace masktok
