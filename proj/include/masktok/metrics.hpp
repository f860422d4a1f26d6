#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "masktok/mask.hpp"

namespace masktok {

/// Aggregated segmentation metrics. Fields are absent when the corresponding
/// metric is undefined for the given inputs (e.g. n_acc without any
/// empty-truth samples). precision_50 stands in for AP@0.5 under uniform
/// confidence: the masks carry no scores, so ranking-based AP degenerates to
/// precision at the matching threshold.
struct MetricReport {
  std::optional<double> g_iou;
  std::optional<double> c_iou;
  std::optional<double> n_acc;
  std::optional<double> precision_50;
  std::optional<double> recall_50;
  std::optional<double> mean_matched_iou;
  std::size_t sample_count = 0;
};

inline nlohmann::json metric_report_to_json(const MetricReport& r) {
  nlohmann::json j;
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) j[k] = *v;
  };
  put("g_iou", r.g_iou);
  put("c_iou", r.c_iou);
  put("n_acc", r.n_acc);
  put("precision_50", r.precision_50);
  put("recall_50", r.recall_50);
  put("mean_matched_iou", r.mean_matched_iou);
  j["sample_count"] = r.sample_count;
  return j;
}

/// One evaluation sample: predicted mask (absent = "no target" answer) and
/// ground-truth mask (absent = no-target sample).
using MaskPair = std::pair<std::optional<Mask>, std::optional<Mask>>;

/// Generalized referring-segmentation metrics over (prediction, truth) pairs.
///   gIoU  — mean per-sample IoU; empty-vs-empty scores 1, empty-vs-nonempty 0.
///   cIoU  — sum of intersections over sum of unions, restricted to samples
///           with a non-empty truth; absent when there are none.
///   N-acc — fraction of empty-truth samples answered with an empty
///           prediction; absent when there are none.
inline MetricReport gres_metrics(const std::vector<MaskPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("gres_metrics: empty pair list");
  double giou_sum = 0.0;
  std::int64_t inter_sum = 0, union_sum = 0;
  std::size_t nonempty_truth = 0, empty_truth = 0, empty_truth_hits = 0;
  for (const auto& [pred, truth] : pairs) {
    if (!truth.has_value()) {
      ++empty_truth;
      if (!pred.has_value()) {
        ++empty_truth_hits;
        giou_sum += 1.0;
      }
      continue;
    }
    validate_mask(*truth);
    ++nonempty_truth;
    std::int64_t inter = 0, uni = 0;
    if (pred.has_value()) {
      if (pred->width != truth->width || pred->height != truth->height) {
        throw std::invalid_argument("gres_metrics: shape mismatch " +
                                    shape_string(pred->width, pred->height) + " vs " +
                                    shape_string(truth->width, truth->height));
      }
      for (std::size_t i = 0; i < truth->bits.size(); ++i) {
        const bool pv = pred->bits[i] != 0, tv = truth->bits[i] != 0;
        inter += (pv && tv);
        uni += (pv || tv);
      }
      giou_sum += uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
    } else {
      uni = truth->area();
    }
    inter_sum += inter;
    union_sum += uni;
  }
  MetricReport r;
  r.sample_count = pairs.size();
  r.g_iou = giou_sum / pairs.size();
  if (nonempty_truth > 0) {
    r.c_iou = union_sum == 0 ? 1.0 : static_cast<double>(inter_sum) / union_sum;
  }
  if (empty_truth > 0) {
    r.n_acc = static_cast<double>(empty_truth_hits) / empty_truth;
  }
  return r;
}

/// Greedy one-to-one matching between prediction and truth sets by descending
/// pairwise IoU (ties resolved by lower prediction index, then lower truth
/// index). Every pair down to IoU 0 is matched, so min(|pred|,|truth|) pairs
/// are always formed; the threshold only gates precision/recall counting.
inline MetricReport matchset_metrics(const std::vector<Mask>& pred,
                                     const std::vector<Mask>& truth,
                                     double iou_threshold = 0.5) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("matchset_metrics: threshold must lie in (0,1)");
  }
  struct Cand {
    double score;
    std::size_t pi, ti;
  };
  std::vector<Cand> cands;
  cands.reserve(pred.size() * truth.size());
  for (std::size_t pi = 0; pi < pred.size(); ++pi) {
    for (std::size_t ti = 0; ti < truth.size(); ++ti) {
      cands.push_back({iou(pred[pi], truth[ti]), pi, ti});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.pi != b.pi) return a.pi < b.pi;
    return a.ti < b.ti;
  });
  std::vector<bool> pred_used(pred.size(), false), truth_used(truth.size(), false);
  double matched_iou_sum = 0.0;
  std::size_t matched = 0, matched_above = 0;
  for (const Cand& c : cands) {
    if (pred_used[c.pi] || truth_used[c.ti]) continue;
    pred_used[c.pi] = truth_used[c.ti] = true;
    ++matched;
    matched_iou_sum += c.score;
    if (c.score >= iou_threshold) ++matched_above;
  }
  MetricReport r;
  r.sample_count = truth.size();
  r.precision_50 = pred.empty() ? 0.0 : static_cast<double>(matched_above) / pred.size();
  r.recall_50 = truth.empty() ? 0.0 : static_cast<double>(matched_above) / truth.size();
  r.mean_matched_iou = matched == 0 ? 0.0 : matched_iou_sum / matched;
  return r;
}

}  // namespace masktok
