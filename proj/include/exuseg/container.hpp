#pragma once

// Shared binary container for checkpoints and patch archives:
//
//   magic      4 bytes  ("EXSG" / "EXPS")
//   version    u32 LE
//   manifest   u64 LE length, then UTF-8 JSON
//   payload    u64 LE length, then raw bytes
//   crc32      u32 LE, zlib CRC-32 of every preceding byte
//
// All multi-byte payload values are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "exuseg/error.hpp"

namespace exuseg {

class ByteWriter {
public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void reserve(std::size_t n) { buf_.reserve(n); }
  std::vector<std::uint8_t>& buffer() { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
  ByteReader(const std::uint8_t* data, std::size_t size) : p_(data), n_(size) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* out = p_ + pos_;
    pos_ += n;
    return out;
  }
  std::size_t remaining() const { return n_ - pos_; }

private:
  void need(std::size_t n) const {
    if (n > n_ - pos_) throw CorruptionError("payload truncated");
  }
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{p_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

struct Container {
  std::string magic;
  std::uint32_t version = 0;
  nlohmann::json manifest;
  std::vector<std::uint8_t> payload;
};

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  if (c.magic.size() != 4) throw Error("container magic must be 4 bytes");
  const std::string manifest = c.manifest.dump();
  ByteWriter w;
  w.reserve(4 + 4 + 8 + manifest.size() + 8 + c.payload.size() + 4);
  w.bytes(c.magic.data(), 4);
  w.u32(c.version);
  w.u64(manifest.size());
  w.bytes(manifest.data(), manifest.size());
  w.u64(c.payload.size());
  w.bytes(c.payload.data(), c.payload.size());
  const std::uint32_t crc = crc32_of(w.buffer().data(), w.buffer().size());
  w.u32(crc);
  return w.take();
}

// Validates magic, version (<= max_version), framing and checksum.
inline Container decode_container(const std::vector<std::uint8_t>& bytes, std::string_view magic,
                                  std::uint32_t max_version, const std::string& origin) {
  if (bytes.size() < 4 + 4) throw CorruptionError(origin + ": file too short to be a container");
  if (std::memcmp(bytes.data(), magic.data(), 4) != 0)
    throw FormatError(origin + ": bad magic, expected '" + std::string(magic) + "'");
  Container c;
  c.magic = std::string(magic);
  ByteReader hdr(bytes.data() + 4, 4);
  c.version = hdr.u32();
  if (c.version == 0 || c.version > max_version)
    throw VersionError(origin + ": format version " + std::to_string(c.version) + " not supported (max " +
                       std::to_string(max_version) + ")");
  if (bytes.size() < 4 + 4 + 8 + 8 + 4) throw CorruptionError(origin + ": truncated container");
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.data() + body, 4);
  const std::uint32_t stored = tail.u32();
  if (crc32_of(bytes.data(), body) != stored) throw CorruptionError(origin + ": CRC-32 mismatch (file corrupted or truncated)");
  try {
    ByteReader r(bytes.data() + 8, body - 8);
    const std::uint64_t mlen = r.u64();
    if (mlen > r.remaining()) throw CorruptionError("manifest length out of range");
    const std::uint8_t* m = r.take(static_cast<std::size_t>(mlen));
    c.manifest = nlohmann::json::parse(m, m + mlen);
    const std::uint64_t plen = r.u64();
    if (plen != r.remaining()) throw CorruptionError("payload length mismatch");
    const std::uint8_t* p = r.take(static_cast<std::size_t>(plen));
    c.payload.assign(p, p + plen);
  } catch (const CorruptionError& e) {
    throw CorruptionError(origin + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(origin + ": malformed manifest: " + e.what());
  }
  return c;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

// Writes through a temporary sibling and renames, so readers never see a
// partially written file.
inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

}  // namespace exuseg
