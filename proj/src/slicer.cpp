#include "evtrack/slicer.hpp"

#include <sstream>

#include "evtrack/error.hpp"

namespace evtrack {

std::vector<EventSlice> slice_by_count(std::span<const Event> events, std::size_t n_events) {
  if (n_events == 0) throw Error(ErrorCode::InvalidArgument, "events per slice must be >= 1");
  const std::size_t n_slices = events.size() / n_events;
  std::vector<EventSlice> slices;
  slices.reserve(n_slices);
  for (std::size_t i = 0; i < n_slices; ++i) {
    EventSlice s;
    s.events = events.subspan(i * n_events, n_events);
    s.t_start_us = s.events.front().t_us;
    s.t_end_us = s.events.back().t_us;
    s.slice_index = i;
    slices.push_back(s);
  }
  return slices;
}

std::vector<std::uint64_t> slice_durations(std::span<const EventSlice> slices) {
  std::vector<std::uint64_t> out;
  out.reserve(slices.size());
  for (const auto& s : slices) out.push_back(s.t_end_us - s.t_start_us);
  return out;
}

std::string durations_csv(std::span<const std::uint64_t> durations) {
  std::ostringstream out;
  out << "slice_index,duration_us\n";
  for (std::size_t i = 0; i < durations.size(); ++i) out << i << ',' << durations[i] << '\n';
  return out.str();
}

}  // namespace evtrack
