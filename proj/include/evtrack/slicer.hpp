#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evtrack/event_io.hpp"

namespace evtrack {

inline constexpr std::size_t kDefaultEventsPerSlice = 1000;
inline constexpr std::size_t kBenchEventsPerSlice = 1500;

/// A contiguous run of exactly N events. Views into the parent stream, which
/// must outlive the slice.
struct EventSlice {
  std::span<const Event> events;
  std::uint64_t t_start_us = 0;
  std::uint64_t t_end_us = 0;
  std::size_t slice_index = 0;
};

/// Fixed-count partition; the trailing remainder shorter than n_events is dropped.
std::vector<EventSlice> slice_by_count(std::span<const Event> events, std::size_t n_events);

std::vector<std::uint64_t> slice_durations(std::span<const EventSlice> slices);

std::string durations_csv(std::span<const std::uint64_t> durations);

}  // namespace evtrack
