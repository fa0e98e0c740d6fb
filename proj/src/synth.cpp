#include "prodet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "prodet/checkpoint.hpp"
#include "prodet/rng.hpp"

namespace prodet {

namespace {

constexpr const char* kMagic = "PRODET-DATA";
constexpr int kVersion = 1;
constexpr std::uint64_t kStreamScene = 0;

void add_octave(std::vector<float>& acc, std::size_t s, std::size_t cells,
                float weight, Rng& rng) {
  const std::size_t g = cells + 1;
  std::vector<float> grid(g * g);
  for (auto& v : grid) v = float(rng.uniform(0.0, 1.0));
  for (std::size_t n = 0; n < s; ++n) {
    const double v = double(n) * double(cells) / double(s);
    const std::size_t j0 = std::min(std::size_t(v), cells - 1);
    const double fy = v - double(j0);
    for (std::size_t m = 0; m < s; ++m) {
      const double u = double(m) * double(cells) / double(s);
      const std::size_t i0 = std::min(std::size_t(u), cells - 1);
      const double fx = u - double(i0);
      const double a = grid[j0 * g + i0];
      const double b = grid[j0 * g + i0 + 1];
      const double c = grid[(j0 + 1) * g + i0];
      const double d = grid[(j0 + 1) * g + i0 + 1];
      const double top = a + (b - a) * fx;
      const double bot = c + (d - c) * fx;
      acc[n * s + m] += weight * float(top + (bot - top) * fy);
    }
  }
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void append_raw(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

}  // namespace

void validate(const DatasetSpec& spec) {
  if (spec.image_size < 8)
    throw std::invalid_argument("image_size must be at least 8");
  if (spec.channels != 3)
    throw std::invalid_argument("channels must be 3");
  if (spec.num_classes < 1)
    throw std::invalid_argument("num_classes must be positive");
  if (spec.objects_min > spec.objects_max)
    throw std::invalid_argument("objects_min exceeds objects_max");
  if (spec.camouflage_level < 0.0 || spec.camouflage_level > 1.0)
    throw std::invalid_argument("camouflage_level must lie in [0,1]");
  if (spec.background_noise_sigma < 0.0)
    throw std::invalid_argument("background_noise_sigma must be nonnegative");
  if (spec.count < 1) throw std::invalid_argument("count must be positive");
}

std::vector<std::uint8_t> pseudo_seg_from_boxes(const std::vector<BBox>& boxes,
                                                std::size_t height,
                                                std::size_t width) {
  std::vector<std::uint8_t> map(height * width, 0);
  for (const BBox& b : boxes) {
    const long m0 = std::max(0L, long(std::ceil(b.x1)));
    const long m1 = std::min(long(width) - 1, long(std::floor(b.x2)));
    const long n0 = std::max(0L, long(std::ceil(b.y1)));
    const long n1 = std::min(long(height) - 1, long(std::floor(b.y2)));
    for (long n = n0; n <= n1; ++n)
      for (long m = m0; m <= m1; ++m)
        map[std::size_t(n) * width + std::size_t(m)] = 1;
  }
  return map;
}

void class_color(int class_id, float rgb[3]) {
  static const float base[3][3] = {
      {0.9f, 0.1f, 0.1f}, {0.1f, 0.9f, 0.1f}, {0.1f, 0.1f, 0.9f}};
  if (class_id >= 0 && class_id < 3) {
    rgb[0] = base[class_id][0];
    rgb[1] = base[class_id][1];
    rgb[2] = base[class_id][2];
    return;
  }
  const std::uint64_t h = mix64(std::uint64_t(class_id) + 11);
  for (int c = 0; c < 3; ++c)
    rgb[c] = 0.1f + 0.8f * float((h >> (16 * c)) & 0xffff) / 65535.0f;
}

Scene generate_scene(const DatasetSpec& spec, std::uint64_t index) {
  validate(spec);
  Rng rng = Rng::substream(spec.seed, kStreamScene, index);
  const std::size_t s = spec.image_size;

  // layered value-noise background in [.2,.8]; one luminance stack shared
  // by all channels, so texture varies in brightness but stays neutral
  Tensor background({3, s, s});
  {
    std::vector<float> acc(s * s, 0.0f);
    add_octave(acc, s, std::max<std::size_t>(1, s / 8), 0.5f, rng);
    add_octave(acc, s, std::max<std::size_t>(1, s / 4), 0.3f, rng);
    add_octave(acc, s, std::max<std::size_t>(1, s / 2), 0.2f, rng);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < s * s; ++i)
        background.data[c * s * s + i] = 0.2f + 0.6f * acc[i];
  }

  Scene scene;
  scene.image = background;

  // rectangle objects, pairwise IoU < 0.5, fully inside the image
  const long wmin = std::max<long>(3, long((3 * s) / 16));
  const long wmax = std::max<long>(wmin + 1, long(s / 2));
  const std::size_t n_objects =
      std::size_t(rng.uniform_int(long(spec.objects_min),
                                  long(spec.objects_max)));
  const double chi = spec.camouflage_level;
  for (std::size_t obj = 0; obj < n_objects; ++obj) {
    const int cls = int(rng.uniform_int(0, long(spec.num_classes) - 1));
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const long w = rng.uniform_int(wmin, wmax);
      const long h = rng.uniform_int(wmin, wmax);
      const long x1 = rng.uniform_int(0, long(s) - 1 - w);
      const long y1 = rng.uniform_int(0, long(s) - 1 - h);
      const BBox box{double(x1), double(y1), double(x1 + w), double(y1 + h)};
      bool ok = true;
      for (const auto& prev : scene.annotations)
        if (iou(box, prev.box) >= 0.5) {
          ok = false;
          break;
        }
      if (!ok) continue;
      float rgb[3];
      class_color(cls, rgb);
      for (long n = y1; n <= y1 + h; ++n)
        for (long m = x1; m <= x1 + w; ++m)
          for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t at =
                c * s * s + std::size_t(n) * s + std::size_t(m);
            const float local = background.data[at] + 0.02f;
            scene.image.data[at] =
                float((1.0 - chi) * rgb[c] + chi * local);
          }
      scene.annotations.push_back({box, cls});
      placed = true;
    }
    if (!placed)
      throw SamplingError(
          "object placement failed after 100 attempts (overlap constraint)");
  }

  if (spec.background_noise_sigma > 0.0) {
    const float sigma = float(spec.background_noise_sigma);
    for (auto& v : scene.image.data) {
      v += sigma * float(rng.normal());
      v = std::min(1.0f, std::max(0.0f, v));
    }
  }

  std::vector<BBox> boxes;
  for (const auto& a : scene.annotations) boxes.push_back(a.box);
  scene.seg_map = pseudo_seg_from_boxes(boxes, s, s);
  return scene;
}

SynthDataset generate_dataset(const DatasetSpec& spec) {
  validate(spec);
  SynthDataset ds;
  ds.spec = spec;
  ds.scenes.reserve(spec.count);
  for (std::uint64_t i = 0; i < spec.count; ++i)
    ds.scenes.push_back(generate_scene(spec, i));
  return ds;
}

std::string serialize_dataset(const SynthDataset& ds) {
  validate(ds.spec);
  if (ds.scenes.size() != ds.spec.count)
    throw ContainerError(ContainerError::Kind::Format,
                         "scene count does not match spec count");
  const std::size_t s = ds.spec.image_size;

  std::string payload;
  for (const Scene& scene : ds.scenes) {
    if (scene.image.shape != std::vector<std::size_t>{3, s, s})
      throw ContainerError(ContainerError::Kind::Format,
                           "scene image shape mismatch");
    if (scene.seg_map.size() != s * s)
      throw ContainerError(ContainerError::Kind::Format,
                           "scene seg map size mismatch");
    append_raw(payload, scene.image.data.data(), 3 * s * s * sizeof(float));
    const std::uint32_t nb = std::uint32_t(scene.annotations.size());
    append_raw(payload, &nb, 4);
    for (const SceneBox& a : scene.annotations) {
      const double coords[4] = {a.box.x1, a.box.y1, a.box.x2, a.box.y2};
      append_raw(payload, coords, 32);
      const std::uint32_t cls = std::uint32_t(a.class_id);
      append_raw(payload, &cls, 4);
    }
    std::vector<std::uint8_t> packed((s * s + 7) / 8, 0);
    for (std::size_t i = 0; i < s * s; ++i)
      if (scene.seg_map[i]) packed[i / 8] |= std::uint8_t(1u << (i % 8));
    append_raw(payload, packed.data(), packed.size());
  }

  std::ostringstream head;
  head << kMagic << ' ' << kVersion << '\n';
  head << "image_size " << s << '\n';
  head << "channels " << ds.spec.channels << '\n';
  head << "num_classes " << ds.spec.num_classes << '\n';
  head << "objects_min " << ds.spec.objects_min << '\n';
  head << "objects_max " << ds.spec.objects_max << '\n';
  head << "camouflage_level " << fmt_real(ds.spec.camouflage_level) << '\n';
  head << "background_noise_sigma " << fmt_real(ds.spec.background_noise_sigma)
       << '\n';
  head << "count " << ds.spec.count << '\n';
  head << "seed " << ds.spec.seed << '\n';
  char crc[16];
  std::snprintf(crc, sizeof(crc), "%08x",
                crc32_bytes(payload.data(), payload.size()));
  head << "crc32 " << crc << '\n';
  head << "payload\n";
  return head.str() + payload;
}

SynthDataset parse_dataset(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos)
      throw ContainerError(ContainerError::Kind::Truncated,
                           "header ended before payload marker");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  {
    std::istringstream first(next_line());
    std::string magic;
    int version = -1;
    first >> magic >> version;
    if (magic != kMagic)
      throw ContainerError(ContainerError::Kind::Version,
                           "not a dataset container (magic '" + magic + "')");
    if (version != kVersion)
      throw ContainerError(
          ContainerError::Kind::Version,
          "unsupported dataset version " + std::to_string(version));
  }

  SynthDataset ds;
  bool have_crc = false;
  std::uint32_t crc_expect = 0;
  for (;;) {
    std::string line = next_line();
    if (line == "payload") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "image_size")
      ls >> ds.spec.image_size;
    else if (key == "channels")
      ls >> ds.spec.channels;
    else if (key == "num_classes")
      ls >> ds.spec.num_classes;
    else if (key == "objects_min")
      ls >> ds.spec.objects_min;
    else if (key == "objects_max")
      ls >> ds.spec.objects_max;
    else if (key == "camouflage_level")
      ls >> ds.spec.camouflage_level;
    else if (key == "background_noise_sigma")
      ls >> ds.spec.background_noise_sigma;
    else if (key == "count")
      ls >> ds.spec.count;
    else if (key == "seed")
      ls >> ds.spec.seed;
    else if (key == "crc32") {
      std::string hex;
      ls >> hex;
      crc_expect = std::uint32_t(std::stoul(hex, nullptr, 16));
      have_crc = true;
    } else {
      throw ContainerError(ContainerError::Kind::Format,
                           "unknown header line: " + line);
    }
    if (!ls)
      throw ContainerError(ContainerError::Kind::Format,
                           "bad header line: " + line);
  }
  if (!have_crc)
    throw ContainerError(ContainerError::Kind::Format, "missing crc32 line");
  validate(ds.spec);

  const std::size_t payload_size = bytes.size() - pos;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n)
      throw ContainerError(
          ContainerError::Kind::Truncated,
          "payload ends inside a scene record (header count " +
              std::to_string(ds.spec.count) + ")");
  };
  if (crc32_bytes(bytes.data() + pos, payload_size) != crc_expect)
    throw ContainerError(ContainerError::Kind::Checksum,
                         "payload crc mismatch");

  const std::size_t s = ds.spec.image_size;
  ds.scenes.reserve(ds.spec.count);
  for (std::size_t r = 0; r < ds.spec.count; ++r) {
    Scene scene;
    scene.image = Tensor({3, s, s});
    need(3 * s * s * sizeof(float));
    std::memcpy(scene.image.data.data(), bytes.data() + pos,
                3 * s * s * sizeof(float));
    pos += 3 * s * s * sizeof(float);
    need(4);
    std::uint32_t nb = 0;
    std::memcpy(&nb, bytes.data() + pos, 4);
    pos += 4;
    for (std::uint32_t i = 0; i < nb; ++i) {
      need(36);
      double coords[4];
      std::memcpy(coords, bytes.data() + pos, 32);
      pos += 32;
      std::uint32_t cls = 0;
      std::memcpy(&cls, bytes.data() + pos, 4);
      pos += 4;
      scene.annotations.push_back(
          {BBox{coords[0], coords[1], coords[2], coords[3]}, int(cls)});
    }
    const std::size_t packed_size = (s * s + 7) / 8;
    need(packed_size);
    scene.seg_map.assign(s * s, 0);
    for (std::size_t i = 0; i < s * s; ++i)
      scene.seg_map[i] =
          (std::uint8_t(bytes[pos + i / 8]) >> (i % 8)) & 1u;
    pos += packed_size;
    ds.scenes.push_back(std::move(scene));
  }
  if (pos != bytes.size())
    throw ContainerError(ContainerError::Kind::Format,
                         "trailing bytes after the last scene record");
  return ds;
}

void save_dataset(const SynthDataset& ds, const std::string& path) {
  write_file_bytes(path, serialize_dataset(ds));
}

SynthDataset read_dataset(const std::string& path) {
  return parse_dataset(read_file_bytes(path));
}

void write_dataset(const DatasetSpec& spec, const std::string& path) {
  save_dataset(generate_dataset(spec), path);
}

}  // namespace prodet
