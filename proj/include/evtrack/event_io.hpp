#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace evtrack {

enum class Polarity : std::uint8_t { Off = 0, On = 1 };

struct Event {
  std::uint64_t t_us = 0;
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  Polarity polarity = Polarity::Off;

  friend bool operator==(const Event&, const Event&) = default;
};

struct StreamHeader {
  std::uint16_t sensor_width = 640;
  std::uint16_t sensor_height = 480;
  std::uint16_t version = 1;

  friend bool operator==(const StreamHeader&, const StreamHeader&) = default;
};

struct EventStream {
  StreamHeader header;
  std::vector<Event> events;
};

enum class EventFormat { Evt1, Csv };

struct ReadOptions {
  // Stable-sorts out-of-order input instead of rejecting it.
  bool tolerate_unordered = false;
  // CSV carries no geometry; these bound-check its coordinates.
  std::uint16_t csv_width = 640;
  std::uint16_t csv_height = 480;
};

inline constexpr std::size_t kEvt1HeaderBytes = 16;
inline constexpr std::size_t kEvt1RecordBytes = 16;

EventStream read_events(std::span<const std::uint8_t> bytes, EventFormat format,
                        const ReadOptions& options = {});
EventStream read_events_file(const std::string& path, EventFormat format,
                             const ReadOptions& options = {});
// Picks the format from the extension: ".csv" is CSV, anything else EVT1.
EventStream read_events_file(const std::string& path, const ReadOptions& options = {});

std::vector<std::uint8_t> write_events(const StreamHeader& header, std::span<const Event> events,
                                       EventFormat format);
void write_events_file(const std::string& path, const StreamHeader& header,
                       std::span<const Event> events, EventFormat format);

// Throws OutOfBounds / NonMonotonic for the first offending event.
void validate_events(const StreamHeader& header, std::span<const Event> events);

struct WindowStats {
  std::uint64_t window_us = 0;
  std::uint64_t t0_us = 0;
  std::vector<std::uint64_t> counts;
};

/// Event counts over consecutive windows starting at the first timestamp.
WindowStats stream_stats(std::span<const Event> events, std::uint64_t window_us);

std::string stats_csv(const WindowStats& stats);

}  // namespace evtrack
