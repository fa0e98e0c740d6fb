#pragma once

// Deterministic synthetic scene generator: textured-noise backgrounds with
// filled rectangle objects whose contrast against the local background is
// controlled by a camouflage level, plus box-union segmentation maps and a
// lossless dataset container.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodet/metrics.hpp"
#include "prodet/tensor.hpp"

namespace prodet {

struct DatasetSpec {
  std::size_t image_size = 64;  // square images
  std::size_t channels = 3;
  std::size_t num_classes = 3;
  std::size_t objects_min = 1;
  std::size_t objects_max = 3;
  double camouflage_level = 0.0;  // 0 = full contrast, 1 = background-matched
  double background_noise_sigma = 0.02;
  std::size_t count = 100;
  std::uint64_t seed = 1;
};

void validate(const DatasetSpec& spec);  // throws std::invalid_argument

struct SceneBox {
  BBox box;
  int class_id = 0;
};

struct Scene {
  Tensor image;  // [3, H, W], values in [0, 1]
  std::vector<SceneBox> annotations;
  std::vector<std::uint8_t> seg_map;  // H*W row-major, 0/1
};

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// binary union map with inclusive bounds on both ends:
// map(n*w + m) = 1 iff some box has x1 <= m <= x2 and y1 <= n <= y2,
// where m indexes columns (x) and n indexes rows (y).
std::vector<std::uint8_t> pseudo_seg_from_boxes(const std::vector<BBox>& boxes,
                                                std::size_t height,
                                                std::size_t width);

// distinct saturated fill color per class id
void class_color(int class_id, float rgb[3]);

// pure function of (spec.seed, index)
Scene generate_scene(const DatasetSpec& spec, std::uint64_t index);

struct SynthDataset {
  DatasetSpec spec;
  std::vector<Scene> scenes;
};

SynthDataset generate_dataset(const DatasetSpec& spec);

std::string serialize_dataset(const SynthDataset& ds);
SynthDataset parse_dataset(const std::string& bytes);

void save_dataset(const SynthDataset& ds, const std::string& path);
SynthDataset read_dataset(const std::string& path);
// generate + save in one step
void write_dataset(const DatasetSpec& spec, const std::string& path);

}  // namespace prodet
