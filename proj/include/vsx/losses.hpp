#pragma once

// Segmentation overlap scores, classification metrics and the differentiable
// training losses (soft dice, binary cross-entropy and their sum).
//
// Conventions, applied uniformly:
//   - both-empty masks score 1.0 for dice and jaccard (perfect agreement);
//   - zero-denominator precision/recall evaluate to 0 and raise a flag on
//     the report entry; f1 is 0 whenever either factor is 0;
//   - the smoothing constant (1.0) appears only in the differentiable loss,
//     reported scores always use raw counts;
//   - aggregation is per-volume first, then mean over volumes.

#include <cstdio>
#include <string>
#include <vector>

#include "vsx/ops.hpp"

namespace vsx {

// ---------------------------------------------------------------------------
// Confusion counting

struct ConfusionCounts {
  i64 tp = 0;
  i64 fp = 0;
  i64 fn = 0;
  i64 tn = 0;
  i64 total() const { return tp + fp + fn + tn; }
};

namespace detail {

template <typename S>
inline bool mask_on(S v) {
  return v > S(0.5);
}

}  // namespace detail

template <typename S>
ConfusionCounts confusion_counts(const Tensor<S>& pred, const Tensor<S>& truth) {
  require_shape(pred.shape() == truth.shape(), "confusion_counts: shape mismatch " +
                                                   shape_str(pred.shape()) + " vs " +
                                                   shape_str(truth.shape()));
  const auto& p = pred.vals();
  const auto& g = truth.vals();
  ConfusionCounts c;
  for (size_t i = 0; i < p.size(); ++i) {
    bool pi = detail::mask_on(p[i]);
    bool gi = detail::mask_on(g[i]);
    if (pi && gi)
      c.tp++;
    else if (pi && !gi)
      c.fp++;
    else if (!pi && gi)
      c.fn++;
    else
      c.tn++;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Hard overlap scores

inline double dice_from_counts(const ConfusionCounts& c) {
  i64 den = 2 * c.tp + c.fp + c.fn;
  if (den == 0) return 1.0;  // both masks empty
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

inline double jaccard_from_counts(const ConfusionCounts& c) {
  i64 den = c.tp + c.fp + c.fn;
  if (den == 0) return 1.0;  // both masks empty
  return static_cast<double>(c.tp) / static_cast<double>(den);
}

template <typename S>
double dice_score(const Tensor<S>& pred, const Tensor<S>& truth) {
  return dice_from_counts(confusion_counts(pred, truth));
}

template <typename S>
double jaccard_score(const Tensor<S>& pred, const Tensor<S>& truth) {
  return jaccard_from_counts(confusion_counts(pred, truth));
}

// Soft dice: voxel counts replaced by sums of probabilities.
template <typename S>
double dice_score_soft(const Tensor<S>& probs, const Tensor<S>& truth) {
  require_shape(probs.shape() == truth.shape(), "dice_score_soft: shape mismatch " +
                                                    shape_str(probs.shape()) + " vs " +
                                                    shape_str(truth.shape()));
  const auto& p = probs.vals();
  const auto& g = truth.vals();
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    double pv = static_cast<double>(p[i]);
    double gv = static_cast<double>(g[i]);
    inter += pv * gv;
    sp += pv;
    sg += gv;
  }
  double den = sp + sg;
  if (den == 0.0) return 1.0;
  return 2.0 * inter / den;
}

// ---------------------------------------------------------------------------
// Differentiable losses

// 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), s = 1.0, global sums.
template <typename S>
Tensor<S> dice_loss(const Tensor<S>& probs, const Tensor<S>& truth) {
  require_shape(probs.shape() == truth.shape(), "dice_loss: shape mismatch " +
                                                    shape_str(probs.shape()) + " vs " +
                                                    shape_str(truth.shape()));
  const S smooth = S(1);
  Tensor<S> num = add_scalar(mul_scalar(sum(mul(probs, truth)), S(2)), smooth);
  Tensor<S> den = add_scalar(add(sum(probs), sum(truth)), smooth);
  return add_scalar(neg(div(num, den)), S(1));
}

// -mean(y*log(p) + (1-y)*log(1-p)) with p clipped to [eps, 1-eps], eps = 1e-7.
template <typename S>
Tensor<S> bce_loss(const Tensor<S>& probs, const Tensor<S>& truth) {
  require_shape(probs.shape() == truth.shape(), "bce_loss: shape mismatch " +
                                                    shape_str(probs.shape()) + " vs " +
                                                    shape_str(truth.shape()));
  const S eps = S(1e-7);
  Tensor<S> p = clamp(probs, eps, S(1) - eps);
  Tensor<S> one_minus_p = add_scalar(neg(p), S(1));
  Tensor<S> one_minus_y = add_scalar(neg(truth), S(1));
  Tensor<S> term = add(mul(truth, log(p)), mul(one_minus_y, log(one_minus_p)));
  return neg(mean(term));
}

// Unweighted sum; gradient flows through both terms.
template <typename S>
Tensor<S> bce_dice_loss(const Tensor<S>& probs, const Tensor<S>& truth) {
  return add(bce_loss(probs, truth), dice_loss(probs, truth));
}

// ---------------------------------------------------------------------------
// Score reports

struct ScoreEntry {
  std::string class_name;
  double dice = 0.0;
  double jaccard = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Raised when the corresponding denominator (tp+fp, tp+fn) was zero and
  // the score was defined as 0 by convention.
  bool precision_zero_denominator = false;
  bool recall_zero_denominator = false;
};

struct ScoreReport {
  std::vector<ScoreEntry> per_class;

  // Arithmetic mean over classes, named "mean". Flags are OR-ed.
  ScoreEntry aggregate() const {
    ScoreEntry m;
    m.class_name = "mean";
    if (per_class.empty()) return m;
    for (const auto& e : per_class) {
      m.dice += e.dice;
      m.jaccard += e.jaccard;
      m.accuracy += e.accuracy;
      m.precision += e.precision;
      m.recall += e.recall;
      m.f1 += e.f1;
      m.precision_zero_denominator |= e.precision_zero_denominator;
      m.recall_zero_denominator |= e.recall_zero_denominator;
    }
    double n = static_cast<double>(per_class.size());
    m.dice /= n;
    m.jaccard /= n;
    m.accuracy /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    return m;
  }

  const ScoreEntry& cls(const std::string& name) const {
    for (const auto& e : per_class)
      if (e.class_name == name) return e;
    throw ArgumentError("ScoreReport: no class named '" + name + "'");
  }
};

inline ScoreEntry scores_from_counts(const ConfusionCounts& c, std::string class_name) {
  ScoreEntry e;
  e.class_name = std::move(class_name);
  require(c.total() > 0, "scores_from_counts: empty mask pair");
  e.dice = dice_from_counts(c);
  e.jaccard = jaccard_from_counts(c);
  e.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  if (c.tp + c.fp == 0) {
    e.precision = 0.0;
    e.precision_zero_denominator = true;
  } else {
    e.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  }
  if (c.tp + c.fn == 0) {
    e.recall = 0.0;
    e.recall_zero_denominator = true;
  } else {
    e.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  }
  e.f1 = (e.precision == 0.0 || e.recall == 0.0)
             ? 0.0
             : 2.0 * e.precision * e.recall / (e.precision + e.recall);
  return e;
}

template <typename S>
ScoreReport classification_metrics(const Tensor<S>& pred, const Tensor<S>& truth,
                                   const std::string& class_name = "all") {
  ScoreReport r;
  r.per_class.push_back(scores_from_counts(confusion_counts(pred, truth), class_name));
  return r;
}

inline const std::vector<std::string>& tumor_class_names() {
  static const std::vector<std::string> names = {"WT", "TC", "ET"};
  return names;
}

// Per-channel report. pred/truth are binary masks shaped [C,D,H,W] or
// [N,C,D,H,W]; channel c is scored independently. With 3 channels the rows
// are named WT/TC/ET, otherwise class0, class1, ...
template <typename S>
ScoreReport per_class_report(const Tensor<S>& pred, const Tensor<S>& truth) {
  require_shape(pred.shape() == truth.shape(), "per_class_report: shape mismatch " +
                                                   shape_str(pred.shape()) + " vs " +
                                                   shape_str(truth.shape()));
  const Shape& s = pred.shape();
  require_shape(s.size() == 4 || s.size() == 5,
                "per_class_report: expected [C,D,H,W] or [N,C,D,H,W], got " + shape_str(s));
  i64 batch = s.size() == 5 ? s[0] : 1;
  i64 channels = s.size() == 5 ? s[1] : s[0];
  i64 voxels = s[s.size() - 3] * s[s.size() - 2] * s[s.size() - 1];
  const auto& p = pred.vals();
  const auto& g = truth.vals();

  ScoreReport r;
  for (i64 c = 0; c < channels; ++c) {
    ConfusionCounts counts;
    for (i64 n = 0; n < batch; ++n) {
      i64 base = (n * channels + c) * voxels;
      for (i64 v = 0; v < voxels; ++v) {
        bool pi = detail::mask_on(p[base + v]);
        bool gi = detail::mask_on(g[base + v]);
        if (pi && gi)
          counts.tp++;
        else if (pi)
          counts.fp++;
        else if (gi)
          counts.fn++;
        else
          counts.tn++;
      }
    }
    std::string name = channels == 3 ? tumor_class_names()[static_cast<size_t>(c)]
                                     : "class" + std::to_string(c);
    r.per_class.push_back(scores_from_counts(counts, name));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Aggregation over volumes & CSV serialization

struct MeanSE {
  double mean = 0.0;
  double se = 0.0;  // sd / sqrt(n), sample standard deviation
  i64 n = 0;
};

inline MeanSE mean_se(const std::vector<double>& xs) {
  MeanSE m;
  m.n = static_cast<i64>(xs.size());
  if (m.n == 0) return m;
  double s = 0.0;
  for (double x : xs) s += x;
  m.mean = s / static_cast<double>(m.n);
  if (m.n < 2) return m;
  double q = 0.0;
  for (double x : xs) q += (x - m.mean) * (x - m.mean);
  double sd = std::sqrt(q / static_cast<double>(m.n - 1));
  m.se = sd / std::sqrt(static_cast<double>(m.n));
  return m;
}

inline std::string score_csv_header() {
  return "model,phase,volume_id,class,dice,jaccard,accuracy,precision,recall,f1";
}

namespace detail {

inline std::string csv_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

inline std::string score_csv_row(const std::string& model, const std::string& phase,
                                 const std::string& volume_id, const ScoreEntry& e) {
  std::string row = model + "," + phase + "," + volume_id + "," + e.class_name;
  for (double v : {e.dice, e.jaccard, e.accuracy, e.precision, e.recall, e.f1}) {
    row += "," + detail::csv_num(v);
  }
  return row;
}

// One row per class; volume-level rows for a single report.
inline std::vector<std::string> score_csv_rows(const std::string& model,
                                               const std::string& phase,
                                               const std::string& volume_id,
                                               const ScoreReport& report) {
  std::vector<std::string> rows;
  rows.reserve(report.per_class.size());
  for (const auto& e : report.per_class) {
    rows.push_back(score_csv_row(model, phase, volume_id, e));
  }
  return rows;
}

}  // namespace vsx
