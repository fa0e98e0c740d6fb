#pragma once

// Parameter/dataset container primitives: a textual header describing the
// payload followed by raw little-endian bytes, with a CRC over the payload.
// Round trips are byte-exact so artifact hashes are stable across runs.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace prodet {

struct ContainerError : std::runtime_error {
  enum class Kind { Io, Version, Format, Truncated, Checksum };
  Kind kind;
  ContainerError(Kind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
};

struct CheckpointEntry {
  std::string name;  // dotted path, no whitespace
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string config_hash;  // hex digest of the producing config, "-" if none
  std::vector<CheckpointEntry> entries;
};

// serialized container bytes (deterministic for equal inputs)
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// content hashes
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);
std::uint32_t crc32_bytes(const void* data, std::size_t size);

// whole-file helpers shared by the container formats
std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace prodet
