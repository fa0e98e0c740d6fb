#pragma once

// Single-scale grid detector. Boxes head: G x G cells, each carrying an
// objectness logit, four box offsets (sigmoid center within the cell,
// log-scale width and height), and per-class logits. Segmentation head: a
// full-resolution sigmoid map. Includes target assignment, the training
// losses, and score-threshold + greedy-NMS decoding.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodet/metrics.hpp"
#include "prodet/nn.hpp"
#include "prodet/synth.hpp"
#include "prodet/tape.hpp"
#include "prodet/tensor.hpp"
#include "prodet/wrapper.hpp"

namespace prodet {

enum class DetectorHead { Boxes, Segmentation };
const char* head_name(DetectorHead h);

struct DetectorConfig {
  DetectorHead head = DetectorHead::Boxes;
  std::size_t image_size = 64;
  std::size_t grid = 8;         // Boxes head only
  std::size_t num_classes = 3;  // Boxes head only
  std::vector<std::size_t> trunk_widths = {16, 32, 32, 32};
  double score_threshold = 0.25;
  double nms_iou = 0.5;

  std::size_t pred_channels() const { return 1 + 4 + num_classes; }
};

void validate(const DetectorConfig& cfg);  // throws std::invalid_argument

// Trunk of 3x3 conv blocks. The Boxes head downsamples by average pooling
// until the feature map matches the grid, then a plain conv emits
// [N, 1+4+C, G, G] logits. The Segmentation head stays at full resolution
// and emits a sigmoid [N, 1, S, S] map.
class DetectorNet {
 public:
  DetectorNet(StoreF& store, const DetectorConfig& cfg, Rng& rng);

  Var forward(TapeF& t, Var images, bool training);

  const DetectorConfig& config() const { return cfg_; }

 private:
  DetectorConfig cfg_;
  std::vector<ConvInReluT<float>> blocks_;
  std::vector<bool> pool_before_;
  ConvT<float> head_;
};

// ---- target assignment ----

struct CellTarget {
  std::size_t cell_x = 0;  // column
  std::size_t cell_y = 0;  // row
  BBox box;
  int class_id = 0;
};

struct AssignResult {
  std::vector<CellTarget> targets;
  bool collision = false;  // two box centers landed in one cell
};

// The cell containing a box center is responsible for that box; when two
// centers land in the same cell the larger box wins and the scene is flagged.
AssignResult assign_targets(const std::vector<SceneBox>& annotations,
                            std::size_t image_size, std::size_t grid);

// ---- box offset codec ----

// (tx, ty, tw, th): center = (cell + sigmoid(txy)) * cell_size,
// size = exp(twh) * cell_size.
std::array<double, 4> encode_box(const BBox& box, std::size_t image_size,
                                 std::size_t grid, std::size_t cell_x,
                                 std::size_t cell_y);
BBox decode_box(const std::array<double, 4>& enc, std::size_t image_size,
                std::size_t grid, std::size_t cell_x, std::size_t cell_y,
                bool clamp_to_image);

// ---- losses ----

template <class T>
struct DetLossPartsT {
  typename TapeT<T>::Var total;
  typename TapeT<T>::Var box;
  typename TapeT<T>::Var cls;
  typename TapeT<T>::Var obj;
  std::size_t responsible = 0;
};

using DetLossParts = DetLossPartsT<float>;

// J_OBJ = sum_resp |decoded - gt|_2 / N  (corners normalized by image size)
//       + sum_resp CE(class logits, label) / N
//       + BCE(objectness logits, responsibility) over all cells.
template <class T>
DetLossPartsT<T> detection_loss(TapeT<T>& t, typename TapeT<T>::Var pred,
                                const std::vector<AssignResult>& targets,
                                const DetectorConfig& cfg) {
  using Tape = TapeT<T>;
  const auto shape = t.val(pred).shape;
  const std::size_t g = cfg.grid, c = cfg.num_classes;
  if (shape.size() != 4 || shape[1] != cfg.pred_channels() || shape[2] != g ||
      shape[3] != g)
    throw std::invalid_argument("detection loss: bad prediction shape");
  const std::size_t n = shape[0];
  if (n != targets.size() || n == 0)
    throw std::invalid_argument("detection loss: batch mismatch");
  const double s = static_cast<double>(cfg.image_size);

  // objectness targets over every cell, row order (image, row, col)
  std::vector<typename Tape::CellIndex> all_cells;
  all_cells.reserve(n * g * g);
  TensorT<T> obj_targets({n * g * g, 1});
  std::size_t total_resp = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < g; ++y)
      for (std::size_t x = 0; x < g; ++x) all_cells.push_back({i, y, x});
  for (std::size_t i = 0; i < n; ++i)
    for (const CellTarget& ct : targets[i].targets) {
      obj_targets[(i * g + ct.cell_y) * g + ct.cell_x] = T(1);
      ++total_resp;
    }

  // responsible rows: encoded ground truth and labels
  std::vector<typename Tape::CellIndex> resp;
  resp.reserve(total_resp);
  TensorT<T> gt_corners({total_resp, 4});
  TensorT<T> center_mul({total_resp, 2});
  TensorT<T> center_add({total_resp, 2});
  std::vector<int> labels;
  labels.reserve(total_resp);
  std::size_t r = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (const CellTarget& ct : targets[i].targets) {
      if (ct.class_id < 0 || static_cast<std::size_t>(ct.class_id) >= c)
        throw std::invalid_argument("detection loss: class out of range");
      resp.push_back({i, ct.cell_y, ct.cell_x});
      gt_corners[r * 4 + 0] = static_cast<T>(ct.box.x1 / s);
      gt_corners[r * 4 + 1] = static_cast<T>(ct.box.y1 / s);
      gt_corners[r * 4 + 2] = static_cast<T>(ct.box.x2 / s);
      gt_corners[r * 4 + 3] = static_cast<T>(ct.box.y2 / s);
      const T inv_g = T(1) / static_cast<T>(g);
      center_mul[r * 2 + 0] = inv_g;
      center_mul[r * 2 + 1] = inv_g;
      center_add[r * 2 + 0] = static_cast<T>(ct.cell_x) * inv_g;
      center_add[r * 2 + 1] = static_cast<T>(ct.cell_y) * inv_g;
      labels.push_back(ct.class_id);
      ++r;
    }

  DetLossPartsT<T> parts;
  parts.responsible = total_resp;

  auto obj_rows = t.slice_cols(t.gather_cells(pred, std::move(all_cells)), 0, 1);
  parts.obj = t.bce_logits_mean(obj_rows, std::move(obj_targets));

  if (total_resp == 0) {
    parts.box = t.leaf(TensorT<T>::scalar(T(0)));
    parts.cls = t.leaf(TensorT<T>::scalar(T(0)));
  } else {
    auto rows = t.gather_cells(pred, std::move(resp));
    auto centers = t.affine_const(t.sigmoid(t.slice_cols(rows, 1, 3)),
                                  std::move(center_mul), std::move(center_add));
    auto half = t.scale(t.exp_(t.slice_cols(rows, 3, 5)),
                        T(0.5) / static_cast<T>(g));
    auto corners = t.concat_cols({t.sub(centers, half), t.add(centers, half)});
    auto dist = t.rows_l2(t.sub(corners, t.leaf(std::move(gt_corners))), T(0));
    parts.box = t.scale(t.sum_all(dist), T(1) / static_cast<T>(n));
    parts.cls = t.scale(t.ce_rows_sum(t.slice_cols(rows, 5, 5 + c),
                                      std::move(labels)),
                        T(1) / static_cast<T>(n));
  }
  parts.total = t.add(t.add(parts.box, parts.cls), parts.obj);
  return parts;
}

// Mean over the batch of per-image RMS differences:
// sqrt(sum((pred - gt)^2) / HW) per image.
template <class T>
typename TapeT<T>::Var segmentation_loss(TapeT<T>& t,
                                         typename TapeT<T>::Var pred_n1hw,
                                         const TensorT<T>& gt_n1hw) {
  const auto shape = t.val(pred_n1hw).shape;
  if (shape.size() != 4 || shape[1] != 1 || shape != gt_n1hw.shape)
    throw std::invalid_argument("segmentation loss: shape mismatch");
  const std::size_t n = shape[0], hw = shape[2] * shape[3];
  TensorT<T> gt = gt_n1hw;
  auto diff = t.sub(pred_n1hw, t.leaf(std::move(gt)));
  auto per_image = t.rows_l2(t.reshape(diff, {n, hw}), T(0));
  return t.mean_all(
      t.scale(per_image, T(1) / std::sqrt(static_cast<T>(hw))));
}

// ---- decoding ----

// Single image [1+4+C, G, G] -> detections above score_threshold after
// per-class greedy NMS. Candidates are ranked by descending score with ties
// broken by lower cell index; suppression removes same-class boxes with
// IoU > nms_iou against a kept box. Boxes are clamped to image bounds.
// image_id of the returned detections is 0; callers stamp their own.
std::vector<Detection> decode_predictions(const Tensor& pred_chw,
                                          const DetectorConfig& cfg,
                                          double score_threshold,
                                          double nms_iou);

}  // namespace prodet
