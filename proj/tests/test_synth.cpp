#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstring>
#include <numeric>

#include "doctest.h"
#include "prodet/checkpoint.hpp"
#include "prodet/rng.hpp"
#include "prodet/synth.hpp"

using namespace prodet;

namespace {

DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.image_size = 32;
  spec.num_classes = 3;
  spec.objects_min = 1;
  spec.objects_max = 3;
  spec.background_noise_sigma = 0.05;
  spec.count = 10;
  spec.seed = 77;
  return spec;
}

double scene_contrast(const Scene& scene) {
  const std::size_t hw = scene.seg_map.size();
  double contrast = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double obj = 0.0, bg = 0.0;
    std::size_t nobj = 0, nbg = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = scene.image.data[c * hw + i];
      if (scene.seg_map[i]) {
        obj += v;
        ++nobj;
      } else {
        bg += v;
        ++nbg;
      }
    }
    if (nobj == 0 || nbg == 0) return 0.0;
    contrast += std::abs(obj / double(nobj) - bg / double(nbg));
  }
  return contrast / 3.0;
}

}  // namespace

TEST_CASE("pseudo segmentation map instances") {
  CHECK(pseudo_seg_from_boxes({}, 8, 8) == std::vector<std::uint8_t>(64, 0));

  auto full = pseudo_seg_from_boxes({BBox{0, 0, 7, 7}}, 8, 8);
  CHECK(std::accumulate(full.begin(), full.end(), 0) == 64);

  auto nine = pseudo_seg_from_boxes({BBox{2, 2, 4, 4}}, 8, 8);
  CHECK(std::accumulate(nine.begin(), nine.end(), 0) == 9);
  // inclusive on both ends: columns 2,3,4 and rows 2,3,4
  CHECK(nine[2 * 8 + 2] == 1);
  CHECK(nine[4 * 8 + 4] == 1);
  CHECK(nine[1 * 8 + 2] == 0);
  CHECK(nine[2 * 8 + 5] == 0);
}

TEST_CASE("pseudo map equals per-pixel inclusive membership") {
  Rng rng(909);
  const std::size_t h = 16, w = 16;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t nb = rng.uniform_int(0, 4);
    std::vector<BBox> boxes;
    for (std::size_t i = 0; i < nb; ++i) {
      BBox b;
      b.x1 = rng.uniform(-2.0, double(w));
      b.y1 = rng.uniform(-2.0, double(h));
      b.x2 = b.x1 + rng.uniform(0.0, 10.0);
      b.y2 = b.y1 + rng.uniform(0.0, 10.0);
      boxes.push_back(b);
    }
    const auto map = pseudo_seg_from_boxes(boxes, h, w);
    for (std::size_t n = 0; n < h; ++n)
      for (std::size_t m = 0; m < w; ++m) {
        std::uint8_t want = 0;
        for (const BBox& b : boxes)
          if (double(m) >= b.x1 && double(m) <= b.x2 && double(n) >= b.y1 &&
              double(n) <= b.y2)
            want = 1;
        REQUIRE(map[n * w + m] == want);
      }
  }
}

TEST_CASE("scene generation is deterministic per seed and index") {
  const DatasetSpec spec = small_spec();
  const Scene a = generate_scene(spec, 4);
  const Scene b = generate_scene(spec, 4);
  CHECK(std::memcmp(a.image.data.data(), b.image.data.data(),
                    a.image.numel() * sizeof(float)) == 0);
  REQUIRE(a.annotations.size() == b.annotations.size());
  for (std::size_t i = 0; i < a.annotations.size(); ++i) {
    CHECK(a.annotations[i].box.x1 == b.annotations[i].box.x1);
    CHECK(a.annotations[i].class_id == b.annotations[i].class_id);
  }
  CHECK(a.seg_map == b.seg_map);

  const Scene c = generate_scene(spec, 5);
  CHECK(std::memcmp(a.image.data.data(), c.image.data.data(),
                    a.image.numel() * sizeof(float)) != 0);
}

TEST_CASE("scene invariants hold across many scenes") {
  DatasetSpec spec = small_spec();
  spec.count = 200;
  for (std::uint64_t i = 0; i < spec.count; ++i) {
    const Scene scene = generate_scene(spec, i);
    const double s = double(spec.image_size);
    CHECK(scene.annotations.size() >= spec.objects_min);
    CHECK(scene.annotations.size() <= spec.objects_max);
    for (const auto& a : scene.annotations) {
      CHECK(a.box.x1 < a.box.x2);
      CHECK(a.box.y1 < a.box.y2);
      CHECK(a.box.x1 >= 0.0);
      CHECK(a.box.y1 >= 0.0);
      CHECK(a.box.x2 <= s);
      CHECK(a.box.y2 <= s);
      CHECK(a.class_id >= 0);
      CHECK(a.class_id < int(spec.num_classes));
    }
    for (std::size_t p = 0; p < scene.annotations.size(); ++p)
      for (std::size_t q = p + 1; q < scene.annotations.size(); ++q)
        CHECK(iou(scene.annotations[p].box, scene.annotations[q].box) < 0.5);
    for (float v : scene.image.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    std::vector<BBox> boxes;
    for (const auto& a : scene.annotations) boxes.push_back(a.box);
    CHECK(scene.seg_map ==
          pseudo_seg_from_boxes(boxes, spec.image_size, spec.image_size));
  }
}

TEST_CASE("camouflage level controls object contrast") {
  DatasetSpec spec = small_spec();
  spec.count = 100;

  spec.camouflage_level = 0.0;
  double mean_contrast = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i)
    mean_contrast += scene_contrast(generate_scene(spec, i));
  mean_contrast /= 100.0;
  MESSAGE("chi=0 contrast ", mean_contrast);
  CHECK(mean_contrast >= 0.2);

  spec.camouflage_level = 1.0;
  mean_contrast = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i)
    mean_contrast += scene_contrast(generate_scene(spec, i));
  mean_contrast /= 100.0;
  MESSAGE("chi=1 contrast ", mean_contrast);
  CHECK(mean_contrast <= 0.05);
}

TEST_CASE("class frequencies are uniform within three sigma") {
  DatasetSpec spec = small_spec();
  spec.count = 1000;
  std::vector<std::size_t> counts(spec.num_classes, 0);
  std::size_t total = 0;
  for (std::uint64_t i = 0; i < spec.count; ++i) {
    const Scene scene = generate_scene(spec, i);
    for (const auto& a : scene.annotations) {
      counts[std::size_t(a.class_id)]++;
      ++total;
    }
  }
  const double p = 1.0 / double(spec.num_classes);
  const double expect = double(total) * p;
  const double sigma = std::sqrt(double(total) * p * (1.0 - p));
  for (std::size_t c = 0; c < counts.size(); ++c) {
    MESSAGE("class ", c, ": ", counts[c], " expect ", expect);
    CHECK(std::abs(double(counts[c]) - expect) <= 3.0 * sigma);
  }
}

TEST_CASE("dataset file round trip is lossless and byte-exact") {
  DatasetSpec spec = small_spec();
  spec.camouflage_level = 0.9;
  const SynthDataset ds = generate_dataset(spec);
  const std::string bytes = serialize_dataset(ds);
  const SynthDataset rt = parse_dataset(bytes);

  CHECK(rt.spec.image_size == spec.image_size);
  CHECK(rt.spec.camouflage_level == spec.camouflage_level);
  CHECK(rt.spec.seed == spec.seed);
  REQUIRE(rt.scenes.size() == ds.scenes.size());
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    CHECK(std::memcmp(rt.scenes[i].image.data.data(),
                      ds.scenes[i].image.data.data(),
                      ds.scenes[i].image.numel() * sizeof(float)) == 0);
    REQUIRE(rt.scenes[i].annotations.size() ==
            ds.scenes[i].annotations.size());
    for (std::size_t j = 0; j < ds.scenes[i].annotations.size(); ++j) {
      CHECK(rt.scenes[i].annotations[j].box.x1 ==
            ds.scenes[i].annotations[j].box.x1);
      CHECK(rt.scenes[i].annotations[j].box.y2 ==
            ds.scenes[i].annotations[j].box.y2);
      CHECK(rt.scenes[i].annotations[j].class_id ==
            ds.scenes[i].annotations[j].class_id);
    }
    CHECK(rt.scenes[i].seg_map == ds.scenes[i].seg_map);
  }
  CHECK(serialize_dataset(rt) == bytes);
}

TEST_CASE("dataset files are reproducible across runs") {
  const DatasetSpec spec = small_spec();
  write_dataset(spec, "/tmp/prodet_ds_a.bin");
  write_dataset(spec, "/tmp/prodet_ds_b.bin");
  CHECK(sha256_file("/tmp/prodet_ds_a.bin") ==
        sha256_file("/tmp/prodet_ds_b.bin"));
  std::remove("/tmp/prodet_ds_a.bin");
  std::remove("/tmp/prodet_ds_b.bin");
}

TEST_CASE("dataset corruption failures are distinct") {
  DatasetSpec spec = small_spec();
  spec.count = 4;
  const std::string good = serialize_dataset(generate_dataset(spec));

  SUBCASE("wrong magic") {
    std::string bad = good;
    bad[0] = 'Z';
    try {
      parse_dataset(bad);
      FAIL("expected version error");
    } catch (const ContainerError& e) {
      CHECK(e.kind == ContainerError::Kind::Version);
    }
  }
  SUBCASE("truncated payload") {
    std::string bad = good.substr(0, good.size() - 9);
    CHECK_THROWS_AS(parse_dataset(bad), ContainerError);
  }
  SUBCASE("header count exceeds records") {
    // count 5 with 4 records: record parsing runs off the payload end
    std::string bad = good;
    const auto at = bad.find("count 4");
    REQUIRE(at != std::string::npos);
    bad.replace(at, 7, "count 5");
    try {
      parse_dataset(bad);
      FAIL("expected truncation error");
    } catch (const ContainerError& e) {
      CHECK(e.kind == ContainerError::Kind::Truncated);
    }
  }
  SUBCASE("flipped payload byte") {
    std::string bad = good;
    bad[bad.size() - 2] = char(bad[bad.size() - 2] ^ 0x10);
    try {
      parse_dataset(bad);
      FAIL("expected checksum error");
    } catch (const ContainerError& e) {
      CHECK(e.kind == ContainerError::Kind::Checksum);
    }
  }
  SUBCASE("unknown header key") {
    std::string bad = good;
    const auto at = bad.find("crc32");
    bad.insert(at, "mystery 1\n");
    try {
      parse_dataset(bad);
      FAIL("expected format error");
    } catch (const ContainerError& e) {
      CHECK(e.kind == ContainerError::Kind::Format);
    }
  }
}

TEST_CASE("impossible placement raises a sampling error") {
  DatasetSpec spec = small_spec();
  spec.image_size = 8;
  spec.objects_min = 64;
  spec.objects_max = 64;
  CHECK_THROWS_AS((void)generate_scene(spec, 0), SamplingError);
}

TEST_CASE("spec validation rejects bad fields") {
  DatasetSpec spec = small_spec();
  spec.camouflage_level = 1.5;
  CHECK_THROWS_AS(validate(spec), std::invalid_argument);
  spec = small_spec();
  spec.channels = 4;
  CHECK_THROWS_AS(validate(spec), std::invalid_argument);
  spec = small_spec();
  spec.objects_min = 5;
  spec.objects_max = 2;
  CHECK_THROWS_AS(validate(spec), std::invalid_argument);
  spec = small_spec();
  spec.count = 0;
  CHECK_THROWS_AS(validate(spec), std::invalid_argument);
  spec = small_spec();
  spec.image_size = 4;
  CHECK_THROWS_AS(validate(spec), std::invalid_argument);
}

TEST_CASE("class colors are distinct and in range") {
  float a[3], b[3], c[3];
  class_color(0, a);
  class_color(1, b);
  class_color(2, c);
  CHECK(a[0] > a[1]);
  CHECK(b[1] > b[0]);
  CHECK(c[2] > c[0]);
  for (int id = 0; id < 8; ++id) {
    float rgb[3];
    class_color(id, rgb);
    for (int k = 0; k < 3; ++k) {
      CHECK(rgb[k] >= 0.0f);
      CHECK(rgb[k] <= 1.0f);
    }
  }
}
