#include "evtrack/bytes.hpp"

#include <zlib.h>

#include <fstream>
#include <iterator>

namespace evtrack {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::Io, "read failed: " + path);
  return data;
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path);
}

void write_text_file(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::uint32_t crc32(std::span<const std::uint8_t> data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t off = 0;
  while (off < data.size()) {
    const std::size_t n = std::min<std::size_t>(data.size() - off, 1u << 30);
    crc = ::crc32(crc, data.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint16_t crc16_ccitt(std::span<const std::uint8_t> data) {
  std::uint16_t crc = 0xFFFF;
  for (std::uint8_t byte : data) {
    crc ^= static_cast<std::uint16_t>(byte) << 8;
    for (int bit = 0; bit < 8; ++bit)
      crc = (crc & 0x8000) ? static_cast<std::uint16_t>((crc << 1) ^ 0x1021)
                           : static_cast<std::uint16_t>(crc << 1);
  }
  return crc;
}

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::BadMagic: return "bad magic";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::NonMonotonic: return "non-monotonic timestamp";
    case ErrorCode::OutOfBounds: return "out of bounds";
    case ErrorCode::ParseError: return "parse error";
    case ErrorCode::UnsupportedVersion: return "unsupported version";
    case ErrorCode::ChecksumMismatch: return "checksum mismatch";
    case ErrorCode::StructureMismatch: return "structure mismatch";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::NonFinite: return "non-finite value";
    case ErrorCode::MissingParams: return "missing parameters";
    case ErrorCode::EmptyInput: return "empty input";
    case ErrorCode::Io: return "i/o error";
  }
  return "unknown error";
}

}  // namespace evtrack
