#include "prodet/checkpoint.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "container payloads are little-endian");

namespace prodet {

namespace {

constexpr const char* kMagic = "PRODET-CKPT";
constexpr int kVersion = 1;

std::size_t entry_numel(const CheckpointEntry& e) {
  std::size_t n = 1;
  for (std::size_t d : e.shape) n *= d;
  return n;
}

bool plain_token(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (c <= ' ' || c == 0x7f) return false;
  return true;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out(std::size_t(len) * 2, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = hex[digest[i] >> 4];
    out[2 * i + 1] = hex[digest[i] & 0xf];
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) {
  return sha256_hex(bytes.data(), bytes.size());
}

std::string sha256_file(const std::string& path) {
  return sha256_hex(read_file_bytes(path));
}

std::uint32_t crc32_bytes(const void* data, std::size_t size) {
  return std::uint32_t(
      ::crc32(0L, static_cast<const Bytef*>(data), uInt(size)));
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ContainerError(ContainerError::Kind::Io, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (!in.good() && !in.eof())
    throw ContainerError(ContainerError::Kind::Io, "read failed on " + path);
  return buf.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw ContainerError(ContainerError::Kind::Io, "cannot create " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  out.flush();
  if (!out.good())
    throw ContainerError(ContainerError::Kind::Io, "write failed on " + path);
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string payload;
  for (const auto& e : ckpt.entries) {
    if (!plain_token(e.name))
      throw ContainerError(ContainerError::Kind::Format,
                           "entry name not serializable: '" + e.name + "'");
    if (e.data.size() != entry_numel(e))
      throw ContainerError(ContainerError::Kind::Format,
                           "entry " + e.name + " shape/data mismatch");
    const std::size_t off = payload.size();
    payload.resize(off + e.data.size() * sizeof(float));
    std::memcpy(payload.data() + off, e.data.data(),
                e.data.size() * sizeof(float));
  }

  std::ostringstream head;
  head << kMagic << ' ' << kVersion << '\n';
  head << "config_hash " << (ckpt.config_hash.empty() ? "-" : ckpt.config_hash)
       << '\n';
  head << "entries " << ckpt.entries.size() << '\n';
  for (const auto& e : ckpt.entries) {
    head << "entry " << e.name << " f32 " << e.shape.size();
    for (std::size_t d : e.shape) head << ' ' << d;
    head << '\n';
  }
  char crc[16];
  std::snprintf(crc, sizeof(crc), "%08x",
                crc32_bytes(payload.data(), payload.size()));
  head << "crc32 " << crc << '\n';
  head << "payload\n";
  return head.str() + payload;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
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
                           "not a checkpoint container (magic '" + magic +
                               "')");
    if (version != kVersion)
      throw ContainerError(
          ContainerError::Kind::Version,
          "unsupported checkpoint version " + std::to_string(version));
  }

  Checkpoint ckpt;
  std::size_t entry_count = 0;
  bool have_crc = false;
  std::uint32_t crc_expect = 0;
  for (;;) {
    std::string line = next_line();
    if (line == "payload") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "config_hash") {
      ls >> ckpt.config_hash;
      if (ckpt.config_hash == "-") ckpt.config_hash.clear();
    } else if (key == "entries") {
      ls >> entry_count;
    } else if (key == "entry") {
      CheckpointEntry e;
      std::string dtype;
      std::size_t ndim = 0;
      ls >> e.name >> dtype >> ndim;
      if (!ls || dtype != "f32")
        throw ContainerError(ContainerError::Kind::Format,
                             "bad entry line: " + line);
      e.shape.resize(ndim);
      for (std::size_t i = 0; i < ndim; ++i) ls >> e.shape[i];
      if (!ls)
        throw ContainerError(ContainerError::Kind::Format,
                             "bad entry dims: " + line);
      ckpt.entries.push_back(std::move(e));
    } else if (key == "crc32") {
      std::string hex;
      ls >> hex;
      crc_expect = std::uint32_t(std::stoul(hex, nullptr, 16));
      have_crc = true;
    } else {
      throw ContainerError(ContainerError::Kind::Format,
                           "unknown header line: " + line);
    }
  }
  if (ckpt.entries.size() != entry_count)
    throw ContainerError(ContainerError::Kind::Format,
                         "header declares " + std::to_string(entry_count) +
                             " entries, lists " +
                             std::to_string(ckpt.entries.size()));
  if (!have_crc)
    throw ContainerError(ContainerError::Kind::Format, "missing crc32 line");

  std::size_t need = 0;
  for (const auto& e : ckpt.entries) need += entry_numel(e) * sizeof(float);
  const std::size_t have = bytes.size() - pos;
  if (have < need)
    throw ContainerError(ContainerError::Kind::Truncated,
                         "payload holds " + std::to_string(have) +
                             " bytes, header requires " +
                             std::to_string(need));
  if (have > need)
    throw ContainerError(ContainerError::Kind::Format,
                         "trailing bytes after payload");
  if (crc32_bytes(bytes.data() + pos, need) != crc_expect)
    throw ContainerError(ContainerError::Kind::Checksum,
                         "payload crc mismatch");

  for (auto& e : ckpt.entries) {
    const std::size_t n = entry_numel(e);
    e.data.resize(n);
    std::memcpy(e.data.data(), bytes.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  write_file_bytes(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file_bytes(path));
}

}  // namespace prodet
