#pragma once
// Box IoU, average precision over an IoU-threshold grid, and segmentation-map
// metrics (MAE, F-beta). Pure functions; brute-force oracles live in tests.

#include <cstddef>
#include <vector>

namespace prodet {

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

double box_area(const BBox& b);

// Intersection over union; disjoint or degenerate boxes score 0.
double iou(const BBox& a, const BBox& b);

struct Detection {
  BBox box;
  int class_id = 0;
  double score = 0.0;
  int image_id = 0;
};

struct GroundTruth {
  BBox box;
  int class_id = 0;
  int image_id = 0;
};

// Greedy score-ordered matching per (class, image); all-point interpolated
// area under the monotone precision envelope, averaged over classes present.
// A class with detections but no ground truths contributes AP 0; a class with
// neither is skipped.
double average_precision(const std::vector<Detection>& detections,
                         const std::vector<GroundTruth>& ground_truths,
                         double iou_threshold);

struct ApSummary {
  double ap = 0.0;    // mean over thresholds 0.50:0.05:0.95
  double ap50 = 0.0;  // threshold 0.50
  double ap75 = 0.0;  // threshold 0.75
};

ApSummary mean_ap(const std::vector<Detection>& detections,
                  const std::vector<GroundTruth>& ground_truths);

// Mean absolute error between two same-length maps.
double mae(const std::vector<double>& pred, const std::vector<double>& gt);

// F-beta with adaptive binarization threshold min(1, 2*mean(pred)).
// Throws std::invalid_argument when gt has no positive pixel.
double f_beta(const std::vector<double>& pred, const std::vector<double>& gt,
              double beta_squared = 0.3);

}  // namespace prodet
