#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "evtrack/event_io.hpp"
#include "evtrack/slicer.hpp"

namespace evtrack {

inline constexpr int kFrameSize = 64;
inline constexpr int kBinFactor = 4;
inline constexpr float kSaturation = 255.0f;

/// Full-resolution per-polarity count grid, channels-first (OFF=0, ON=1).
struct CountGrid {
  int channels = 2;
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;

  std::uint32_t at(int c, int y, int x) const {
    return counts[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

/// Network input: channels x 64 x 64 saturated counts stored as float.
struct EventFrame {
  int channels = 2;
  std::size_t slice_index = 0;
  std::vector<float> data;

  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * kFrameSize + y) * kFrameSize + x];
  }
};

/// Crop origin inside the binned grid, centered.
struct CropGeometry {
  int bin = kBinFactor;
  int offset_x = 0;
  int offset_y = 0;
};

CropGeometry crop_geometry(const StreamHeader& header);

CountGrid accumulate(std::span<const Event> events, const StreamHeader& header);

EventFrame scale_and_crop(const CountGrid& grid);

EventFrame merge_polarities(const EventFrame& frame);

/// accumulate -> scale_and_crop -> (optional) merge, in one pass without the
/// full-resolution grid. Bit-identical to the composed route.
EventFrame make_frame(std::span<const Event> events, const StreamHeader& header, int channels,
                      std::size_t slice_index = 0);

/// Frame dump: per frame slice_index u32, channels u8, channels*64*64 f32 LE.
std::vector<std::uint8_t> encode_frames(std::span<const EventFrame> frames);
std::vector<EventFrame> decode_frames(std::span<const std::uint8_t> bytes);

}  // namespace evtrack
