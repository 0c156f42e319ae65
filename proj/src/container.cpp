#include "evtrack/container.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "evtrack/bytes.hpp"
#include "evtrack/error.hpp"

namespace evtrack {

std::vector<std::uint8_t> seal_container(const std::string& manifest,
                                         std::span<const std::uint8_t> blob) {
  std::vector<std::uint8_t> out;
  const std::string head = std::string(kContainerMagic) + "\nversion " +
                           std::to_string(kContainerVersion) + "\n" + manifest + "end\n";
  out.reserve(head.size() + blob.size() + 4);
  out.insert(out.end(), head.begin(), head.end());
  out.insert(out.end(), blob.begin(), blob.end());
  put_u32(out, crc32(out));
  return out;
}

OpenedContainer open_container(std::span<const std::uint8_t> bytes) {
  const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  const std::string magic_line = std::string(kContainerMagic) + "\n";
  if (text.substr(0, magic_line.size()) != magic_line)
    throw Error(ErrorCode::BadMagic, "not a model container");

  std::size_t pos = magic_line.size();
  const auto version_end = text.find('\n', pos);
  if (version_end == std::string_view::npos) throw Error(ErrorCode::Truncated, "missing version line");
  const auto version_tokens = split_tokens(std::string(text.substr(pos, version_end - pos)));
  if (version_tokens.size() != 2 || version_tokens[0] != "version")
    throw Error(ErrorCode::StructureMismatch, "missing version line");
  const int version = parse_int(version_tokens[1]);
  if (version != kContainerVersion)
    throw Error(ErrorCode::UnsupportedVersion, "container version " + std::to_string(version));
  pos = version_end + 1;

  if (bytes.size() < pos + 4) throw Error(ErrorCode::ChecksumMismatch, "file too short for CRC");
  ByteReader trailer(bytes.subspan(bytes.size() - 4));
  const std::uint32_t stored = trailer.u32();
  if (crc32(bytes.first(bytes.size() - 4)) != stored)
    throw Error(ErrorCode::ChecksumMismatch, "CRC32 mismatch");

  OpenedContainer result;
  const std::size_t body_end = bytes.size() - 4;
  while (true) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos || nl >= body_end)
      throw Error(ErrorCode::StructureMismatch, "manifest not terminated");
    std::string line(text.substr(pos, nl - pos));
    pos = nl + 1;
    if (line == "end") break;
    result.lines.push_back(std::move(line));
  }
  result.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(body_end));
  return result;
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string expect_kv(const std::string& token, const std::string& key) {
  const auto eq = token.find('=');
  if (eq == std::string::npos || token.substr(0, eq) != key)
    throw Error(ErrorCode::StructureMismatch, "expected " + key + "=..., got '" + token + "'");
  return token.substr(eq + 1);
}

int parse_int(const std::string& text) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw Error(ErrorCode::ParseError, "bad integer '" + text + "'");
  return v;
}

double parse_double(const std::string& text) {
  // from_chars for double is not available in libstdc++ 11 for all targets; strtod is exact.
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size())
    throw Error(ErrorCode::ParseError, "bad number '" + text + "'");
  return v;
}

std::string format_double(double v) {
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace evtrack
