#include "prodet/detector.hpp"

#include <algorithm>
#include <cmath>

namespace prodet {

const char* head_name(DetectorHead h) {
  return h == DetectorHead::Boxes ? "boxes" : "segmentation";
}

void validate(const DetectorConfig& cfg) {
  if (cfg.image_size < 8)
    throw std::invalid_argument("detector: image size too small");
  if (cfg.trunk_widths.empty())
    throw std::invalid_argument("detector: empty trunk");
  for (std::size_t w : cfg.trunk_widths)
    if (w == 0) throw std::invalid_argument("detector: zero trunk width");
  if (cfg.score_threshold < 0 || cfg.score_threshold > 1)
    throw std::invalid_argument("detector: score threshold out of range");
  if (cfg.nms_iou < 0 || cfg.nms_iou > 1)
    throw std::invalid_argument("detector: nms iou out of range");
  if (cfg.head == DetectorHead::Boxes) {
    if (cfg.grid == 0 || cfg.image_size % cfg.grid != 0)
      throw std::invalid_argument("detector: grid must divide image size");
    std::size_t q = cfg.image_size / cfg.grid;
    while (q % 2 == 0) q /= 2;
    if (q != 1)
      throw std::invalid_argument(
          "detector: image/grid ratio must be a power of two");
    if (cfg.num_classes == 0)
      throw std::invalid_argument("detector: need at least one class");
  }
}

DetectorNet::DetectorNet(StoreF& store, const DetectorConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  validate(cfg);
  std::size_t pools = 0;
  if (cfg.head == DetectorHead::Boxes)
    for (std::size_t q = cfg.image_size / cfg.grid; q > 1; q /= 2) ++pools;
  const std::size_t n_blocks = std::max(cfg.trunk_widths.size(), pools + 1);
  std::size_t in_c = 3;
  for (std::size_t i = 0; i < n_blocks; ++i) {
    const std::size_t width =
        cfg.trunk_widths[std::min(i, cfg.trunk_widths.size() - 1)];
    pool_before_.push_back(i >= 1 && i <= pools);
    blocks_.emplace_back(store, "detector.b" + std::to_string(i), in_c, width,
                         rng);
    in_c = width;
  }
  const std::size_t out_c =
      cfg.head == DetectorHead::Boxes ? cfg.pred_channels() : 1;
  head_ = ConvT<float>(store, "detector.head", in_c, out_c, rng);
  // most cells are background, so start objectness pessimistic
  if (cfg.head == DetectorHead::Boxes) head_.b->value[0] = -2.0f;
}

Var DetectorNet::forward(TapeF& t, Var images, bool training) {
  const auto shape = t.val(images).shape;
  if (shape.size() != 4 || shape[1] != 3 || shape[2] != cfg_.image_size ||
      shape[3] != cfg_.image_size)
    throw std::invalid_argument("detector: bad input shape");
  Var h = images;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (pool_before_[i]) h = t.avgpool2(h);
    h = blocks_[i].forward(t, h, training);
  }
  Var y = head_.forward(t, h);
  if (cfg_.head == DetectorHead::Segmentation) y = t.sigmoid(y);
  return y;
}

AssignResult assign_targets(const std::vector<SceneBox>& annotations,
                            std::size_t image_size, std::size_t grid) {
  if (grid == 0 || image_size == 0)
    throw std::invalid_argument("assign: empty grid");
  const double cs = static_cast<double>(image_size) / static_cast<double>(grid);
  AssignResult res;
  std::vector<int> owner(grid * grid, -1);
  for (const SceneBox& sb : annotations) {
    const double cx = 0.5 * (sb.box.x1 + sb.box.x2);
    const double cy = 0.5 * (sb.box.y1 + sb.box.y2);
    const auto clamp_cell = [&](double v) {
      const double f = std::floor(v / cs);
      if (f < 0) return std::size_t{0};
      return std::min(grid - 1, static_cast<std::size_t>(f));
    };
    const std::size_t gx = clamp_cell(cx), gy = clamp_cell(cy);
    int& slot = owner[gy * grid + gx];
    if (slot < 0) {
      slot = static_cast<int>(res.targets.size());
      res.targets.push_back({gx, gy, sb.box, sb.class_id});
    } else {
      res.collision = true;
      CellTarget& held = res.targets[static_cast<std::size_t>(slot)];
      if (box_area(sb.box) > box_area(held.box))
        held = {gx, gy, sb.box, sb.class_id};
    }
  }
  return res;
}

std::array<double, 4> encode_box(const BBox& box, std::size_t image_size,
                                 std::size_t grid, std::size_t cell_x,
                                 std::size_t cell_y) {
  const double cs = static_cast<double>(image_size) / static_cast<double>(grid);
  const double w = box.x2 - box.x1, h = box.y2 - box.y1;
  if (w <= 0 || h <= 0)
    throw std::invalid_argument("encode: degenerate box");
  const double cx = 0.5 * (box.x1 + box.x2), cy = 0.5 * (box.y1 + box.y2);
  const auto logit = [](double f) {
    f = std::clamp(f, 1e-6, 1.0 - 1e-6);
    return std::log(f / (1.0 - f));
  };
  return {logit(cx / cs - static_cast<double>(cell_x)),
          logit(cy / cs - static_cast<double>(cell_y)), std::log(w / cs),
          std::log(h / cs)};
}

BBox decode_box(const std::array<double, 4>& enc, std::size_t image_size,
                std::size_t grid, std::size_t cell_x, std::size_t cell_y,
                bool clamp_to_image) {
  const double cs = static_cast<double>(image_size) / static_cast<double>(grid);
  const auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  const double cx = (static_cast<double>(cell_x) + sig(enc[0])) * cs;
  const double cy = (static_cast<double>(cell_y) + sig(enc[1])) * cs;
  const double w = std::exp(enc[2]) * cs;
  const double h = std::exp(enc[3]) * cs;
  BBox b{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  if (clamp_to_image) {
    const double s = static_cast<double>(image_size);
    b.x1 = std::clamp(b.x1, 0.0, s);
    b.y1 = std::clamp(b.y1, 0.0, s);
    b.x2 = std::clamp(b.x2, 0.0, s);
    b.y2 = std::clamp(b.y2, 0.0, s);
  }
  return b;
}

std::vector<Detection> decode_predictions(const Tensor& pred_chw,
                                          const DetectorConfig& cfg,
                                          double score_threshold,
                                          double nms_iou) {
  const std::size_t ch = cfg.pred_channels(), g = cfg.grid;
  const float* p = pred_chw.ptr();
  if (pred_chw.rank() == 4 && pred_chw.shape[0] == 1) {
    if (pred_chw.shape[1] != ch || pred_chw.shape[2] != g ||
        pred_chw.shape[3] != g)
      throw std::invalid_argument("decode: bad prediction shape");
  } else if (pred_chw.rank() != 3 || pred_chw.shape[0] != ch ||
             pred_chw.shape[1] != g || pred_chw.shape[2] != g) {
    throw std::invalid_argument("decode: bad prediction shape");
  }
  const auto at = [&](std::size_t c, std::size_t y, std::size_t x) {
    return static_cast<double>(p[(c * g + y) * g + x]);
  };
  const auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };

  struct Cand {
    Detection det;
    std::size_t cell;
  };
  std::vector<Cand> cands;
  for (std::size_t y = 0; y < g; ++y)
    for (std::size_t x = 0; x < g; ++x) {
      const double obj = sig(at(0, y, x));
      double mx = at(5, y, x);
      for (std::size_t k = 1; k < cfg.num_classes; ++k)
        mx = std::max(mx, at(5 + k, y, x));
      double denom = 0.0;
      double best = -1.0;
      int best_k = 0;
      for (std::size_t k = 0; k < cfg.num_classes; ++k) {
        const double e = std::exp(at(5 + k, y, x) - mx);
        denom += e;
        if (e > best) {
          best = e;
          best_k = static_cast<int>(k);
        }
      }
      const double score = obj * (best / denom);
      if (!(score > score_threshold)) continue;
      const std::array<double, 4> enc{at(1, y, x), at(2, y, x), at(3, y, x),
                                      at(4, y, x)};
      Cand cand;
      cand.det.box = decode_box(enc, cfg.image_size, cfg.grid, x, y, true);
      cand.det.class_id = best_k;
      cand.det.score = score;
      cand.cell = y * g + x;
      cands.push_back(cand);
    }

  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.det.score != b.det.score) return a.det.score > b.det.score;
    return a.cell < b.cell;
  });

  std::vector<bool> dead(cands.size(), false);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (dead[i]) continue;
    out.push_back(cands[i].det);
    for (std::size_t j = i + 1; j < cands.size(); ++j) {
      if (dead[j] || cands[j].det.class_id != cands[i].det.class_id) continue;
      if (iou(cands[i].det.box, cands[j].det.box) > nms_iou) dead[j] = true;
    }
  }
  return out;
}

}  // namespace prodet
