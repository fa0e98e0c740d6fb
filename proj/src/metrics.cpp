#include "prodet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

namespace prodet {

double box_area(const BBox& b) {
  const double w = b.x2 - b.x1, h = b.y2 - b.y1;
  return (w > 0 && h > 0) ? w * h : 0.0;
}

double iou(const BBox& a, const BBox& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = box_area(a) + box_area(b) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

// AP for one class: detections sorted by descending score (stable on ties),
// each greedily matched to the highest-IoU unmatched ground truth in the same
// image, then all-point interpolation over the precision envelope.
double class_ap(std::vector<Detection> dets,
                const std::vector<GroundTruth>& gts, double thr) {
  if (gts.empty()) return 0.0;  // detections with no ground truths
  if (dets.empty()) return 0.0;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  std::vector<bool> taken(gts.size(), false);
  const std::size_t n = dets.size();
  std::vector<double> recall(n), precision(n);
  std::size_t tp = 0;
  for (std::size_t d = 0; d < n; ++d) {
    double best = 0.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].image_id != dets[d].image_id) continue;
      const double v = iou(dets[d].box, gts[g].box);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best >= thr) {
      taken[best_g] = true;
      ++tp;
    }
    recall[d] = double(tp) / double(gts.size());
    precision[d] = double(tp) / double(d + 1);
  }
  // monotone envelope from the right
  for (std::size_t d = n - 1; d-- > 0;)
    precision[d] = std::max(precision[d], precision[d + 1]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t d = 0; d < n; ++d) {
    ap += (recall[d] - prev_r) * precision[d];
    prev_r = recall[d];
  }
  return ap;
}

}  // namespace

double average_precision(const std::vector<Detection>& detections,
                         const std::vector<GroundTruth>& ground_truths,
                         double iou_threshold) {
  std::map<int, std::vector<Detection>> dets_by_class;
  std::map<int, std::vector<GroundTruth>> gts_by_class;
  for (const auto& d : detections) dets_by_class[d.class_id].push_back(d);
  for (const auto& g : ground_truths) gts_by_class[g.class_id].push_back(g);

  std::map<int, bool> classes;
  for (const auto& [c, v] : dets_by_class) classes[c] = true;
  for (const auto& [c, v] : gts_by_class) classes[c] = true;
  if (classes.empty()) return 0.0;

  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& [c, present] : classes) {
    (void)present;
    const auto& gts = gts_by_class[c];
    const auto& dets = dets_by_class[c];
    if (gts.empty() && dets.empty()) continue;  // class skipped
    total += class_ap(dets, gts, iou_threshold);
    ++counted;
  }
  return counted ? total / double(counted) : 0.0;
}

ApSummary mean_ap(const std::vector<Detection>& detections,
                  const std::vector<GroundTruth>& ground_truths) {
  ApSummary s;
  double acc = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double thr = double(50 + 5 * i) / 100.0;
    const double ap = average_precision(detections, ground_truths, thr);
    acc += ap;
    if (i == 0) s.ap50 = ap;
    if (i == 5) s.ap75 = ap;
  }
  s.ap = acc / 10.0;
  return s;
}

double mae(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("mae: size mismatch " +
                                std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()));
  if (pred.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    acc += std::abs(pred[i] - gt[i]);
  return acc / double(pred.size());
}

double f_beta(const std::vector<double>& pred, const std::vector<double>& gt,
              double beta_squared) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("f_beta: size mismatch " +
                                std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()));
  double gt_pos = 0.0;
  for (double v : gt) gt_pos += (v > 0.5) ? 1.0 : 0.0;
  if (gt_pos == 0.0)
    throw std::invalid_argument("f_beta: ground truth has no positive pixel");
  const double mean_pred =
      std::accumulate(pred.begin(), pred.end(), 0.0) / double(pred.size());
  const double thr = std::min(1.0, 2.0 * mean_pred);
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= thr;
    const bool g = gt[i] > 0.5;
    if (p && g)
      ++tp;
    else if (p && !g)
      ++fp;
    else if (!p && g)
      ++fn;
  }
  const double prec = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
  const double rec = tp / (tp + fn);
  const double denom = beta_squared * prec + rec;
  if (denom == 0.0) return 0.0;
  return (1.0 + beta_squared) * prec * rec / denom;
}

}  // namespace prodet
