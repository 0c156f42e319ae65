#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace evtrack {

// Model container: a textual manifest terminated by an "end" line, a binary
// blob of tensors in manifest order, and a CRC32 trailer over both.
inline constexpr const char* kContainerMagic = "EVTRACK-MODEL";
inline constexpr int kContainerVersion = 1;

std::vector<std::uint8_t> seal_container(const std::string& manifest,
                                         std::span<const std::uint8_t> blob);

struct OpenedContainer {
  std::vector<std::string> lines;  // manifest lines after the version line, without "end"
  std::vector<std::uint8_t> blob;
};

// Checks magic, version and CRC, in that order.
OpenedContainer open_container(std::span<const std::uint8_t> bytes);

// Whitespace tokenizer for manifest lines.
std::vector<std::string> split_tokens(const std::string& line);

// Splits "key=value"; throws StructureMismatch if the key does not match.
std::string expect_kv(const std::string& token, const std::string& key);

int parse_int(const std::string& text);
double parse_double(const std::string& text);

// Shortest decimal string that round-trips the double exactly.
std::string format_double(double v);

}  // namespace evtrack
