#include "evtrack/framer.hpp"

#include <algorithm>

#include "evtrack/bytes.hpp"
#include "evtrack/error.hpp"

namespace evtrack {

CropGeometry crop_geometry(const StreamHeader& header) {
  if (header.sensor_width % kBinFactor != 0 || header.sensor_height % kBinFactor != 0)
    throw Error(ErrorCode::InvalidArgument, "sensor dimensions must be divisible by 4");
  const int bw = header.sensor_width / kBinFactor;
  const int bh = header.sensor_height / kBinFactor;
  if (bw < kFrameSize || bh < kFrameSize)
    throw Error(ErrorCode::InvalidArgument, "binned sensor smaller than 64x64");
  return {kBinFactor, (bw - kFrameSize) / 2, (bh - kFrameSize) / 2};
}

CountGrid accumulate(std::span<const Event> events, const StreamHeader& header) {
  CountGrid grid;
  grid.channels = 2;
  grid.height = header.sensor_height;
  grid.width = header.sensor_width;
  grid.counts.assign(static_cast<std::size_t>(2) * grid.height * grid.width, 0);
  for (const Event& e : events) {
    if (e.x >= grid.width || e.y >= grid.height)
      throw Error(ErrorCode::OutOfBounds, "event outside sensor");
    const int c = e.polarity == Polarity::On ? 1 : 0;
    ++grid.counts[(static_cast<std::size_t>(c) * grid.height + e.y) * grid.width + e.x];
  }
  return grid;
}

EventFrame scale_and_crop(const CountGrid& grid) {
  if (grid.width <= 0 || grid.height <= 0 || grid.width % kBinFactor || grid.height % kBinFactor)
    throw Error(ErrorCode::InvalidArgument, "grid dimensions must be divisible by 4");
  if (grid.counts.size() != static_cast<std::size_t>(grid.channels) * grid.height * grid.width)
    throw Error(ErrorCode::InvalidArgument, "grid storage does not match dimensions");
  StreamHeader h;
  h.sensor_width = static_cast<std::uint16_t>(grid.width);
  h.sensor_height = static_cast<std::uint16_t>(grid.height);
  const CropGeometry geo = crop_geometry(h);

  EventFrame frame;
  frame.channels = grid.channels;
  frame.data.assign(static_cast<std::size_t>(grid.channels) * kFrameSize * kFrameSize, 0.0f);
  for (int c = 0; c < grid.channels; ++c)
    for (int fy = 0; fy < kFrameSize; ++fy)
      for (int fx = 0; fx < kFrameSize; ++fx) {
        const int y0 = (fy + geo.offset_y) * kBinFactor;
        const int x0 = (fx + geo.offset_x) * kBinFactor;
        std::uint64_t sum = 0;
        for (int dy = 0; dy < kBinFactor; ++dy)
          for (int dx = 0; dx < kBinFactor; ++dx) sum += grid.at(c, y0 + dy, x0 + dx);
        frame.data[(static_cast<std::size_t>(c) * kFrameSize + fy) * kFrameSize + fx] =
            static_cast<float>(std::min<std::uint64_t>(sum, 255));
      }
  return frame;
}

EventFrame merge_polarities(const EventFrame& frame) {
  if (frame.channels != 2) throw Error(ErrorCode::InvalidArgument, "merge needs a 2-channel frame");
  EventFrame out;
  out.channels = 1;
  out.slice_index = frame.slice_index;
  constexpr std::size_t plane = kFrameSize * kFrameSize;
  out.data.resize(plane);
  for (std::size_t i = 0; i < plane; ++i)
    out.data[i] = std::min(frame.data[i] + frame.data[plane + i], kSaturation);
  return out;
}

EventFrame make_frame(std::span<const Event> events, const StreamHeader& header, int channels,
                      std::size_t slice_index) {
  if (channels != 1 && channels != 2)
    throw Error(ErrorCode::InvalidArgument, "channels must be 1 or 2");
  const CropGeometry geo = crop_geometry(header);
  constexpr std::size_t plane = kFrameSize * kFrameSize;
  // Unsaturated per-polarity counts inside the crop, then saturate (and merge).
  std::vector<std::uint32_t> counts(2 * plane, 0);
  for (const Event& e : events) {
    if (e.x >= header.sensor_width || e.y >= header.sensor_height)
      throw Error(ErrorCode::OutOfBounds, "event outside sensor");
    const int fx = e.x / kBinFactor - geo.offset_x;
    const int fy = e.y / kBinFactor - geo.offset_y;
    if (fx < 0 || fy < 0 || fx >= kFrameSize || fy >= kFrameSize) continue;
    const int c = e.polarity == Polarity::On ? 1 : 0;
    ++counts[c * plane + static_cast<std::size_t>(fy) * kFrameSize + fx];
  }
  EventFrame frame;
  frame.channels = channels;
  frame.slice_index = slice_index;
  frame.data.resize(channels * plane);
  if (channels == 2) {
    for (std::size_t i = 0; i < 2 * plane; ++i)
      frame.data[i] = static_cast<float>(std::min<std::uint32_t>(counts[i], 255));
  } else {
    for (std::size_t i = 0; i < plane; ++i) {
      const float off = static_cast<float>(std::min<std::uint32_t>(counts[i], 255));
      const float on = static_cast<float>(std::min<std::uint32_t>(counts[plane + i], 255));
      frame.data[i] = std::min(off + on, kSaturation);
    }
  }
  return frame;
}

std::vector<std::uint8_t> encode_frames(std::span<const EventFrame> frames) {
  std::vector<std::uint8_t> out;
  for (const auto& f : frames) {
    put_u32(out, static_cast<std::uint32_t>(f.slice_index));
    put_u8(out, static_cast<std::uint8_t>(f.channels));
    for (float v : f.data) put_f32(out, v);
  }
  return out;
}

std::vector<EventFrame> decode_frames(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  std::vector<EventFrame> frames;
  while (in.remaining() > 0) {
    EventFrame f;
    f.slice_index = in.u32();
    f.channels = in.u8();
    if (f.channels != 1 && f.channels != 2)
      throw Error(ErrorCode::ParseError, "frame channel count " + std::to_string(f.channels));
    f.data.resize(static_cast<std::size_t>(f.channels) * kFrameSize * kFrameSize);
    for (auto& v : f.data) v = in.f32();
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace evtrack
