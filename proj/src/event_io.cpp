#include "evtrack/event_io.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>
#include <string_view>

#include "evtrack/bytes.hpp"
#include "evtrack/error.hpp"

namespace evtrack {

namespace {

constexpr std::uint8_t kMagic[4] = {'E', 'V', 'T', '1'};

void check_event(const StreamHeader& header, const Event& e, const Event* prev, std::size_t index) {
  if (e.x >= header.sensor_width || e.y >= header.sensor_height)
    throw Error(ErrorCode::OutOfBounds, "event " + std::to_string(index) + " at (" +
                                            std::to_string(e.x) + "," + std::to_string(e.y) +
                                            ") outside sensor");
  if (prev && e.t_us < prev->t_us)
    throw Error(ErrorCode::NonMonotonic, "event " + std::to_string(index) + " at t=" +
                                             std::to_string(e.t_us) + " precedes t=" +
                                             std::to_string(prev->t_us));
}

void finish_order(EventStream& stream, const ReadOptions& options) {
  if (options.tolerate_unordered)
    std::stable_sort(stream.events.begin(), stream.events.end(),
                     [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
}

EventStream read_evt1(std::span<const std::uint8_t> bytes, const ReadOptions& options) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin()))
    throw Error(ErrorCode::BadMagic, "not an EVT1 stream");
  ByteReader in(bytes);
  in.skip(4);
  EventStream stream;
  stream.header.version = in.u16();
  if (stream.header.version != 1)
    throw Error(ErrorCode::UnsupportedVersion,
                "EVT1 version " + std::to_string(stream.header.version));
  stream.header.sensor_width = in.u16();
  stream.header.sensor_height = in.u16();
  in.skip(6);  // reserved, pads the header to 16 bytes
  if (stream.header.sensor_width == 0 || stream.header.sensor_height == 0)
    throw Error(ErrorCode::OutOfBounds, "zero sensor dimension");
  if (in.remaining() % kEvt1RecordBytes != 0)
    throw Error(ErrorCode::Truncated, "partial trailing record");

  const std::size_t n = in.remaining() / kEvt1RecordBytes;
  stream.events.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Event& e = stream.events[i];
    e.t_us = in.u64();
    e.x = in.u16();
    e.y = in.u16();
    const std::uint8_t p = in.u8();
    if (p > 1) throw Error(ErrorCode::ParseError, "polarity byte " + std::to_string(p));
    e.polarity = static_cast<Polarity>(p);
    in.skip(3);
    check_event(stream.header, e, (i > 0 && !options.tolerate_unordered) ? &stream.events[i - 1] : nullptr, i);
  }
  finish_order(stream, options);
  return stream;
}

template <typename T>
T parse_field(std::string_view field, std::size_t line_no) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
    field.remove_suffix(1);
  T value{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size())
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": bad field '" +
                                           std::string(field) + "'");
  return value;
}

EventStream read_csv(std::span<const std::uint8_t> bytes, const ReadOptions& options) {
  EventStream stream;
  stream.header.sensor_width = options.csv_width;
  stream.header.sensor_height = options.csv_height;
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (line_no == 1 && !line.empty() && (line[0] < '0' || line[0] > '9')) continue;  // header

    std::string_view fields[4];
    std::size_t count = 0;
    while (count < 4) {
      const auto comma = line.find(',');
      fields[count++] = line.substr(0, comma);
      if (comma == std::string_view::npos) {
        line = {};
        break;
      }
      line = line.substr(comma + 1);
    }
    if (count != 4 || !line.empty())
      throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected 4 fields");
    Event e;
    e.t_us = parse_field<std::uint64_t>(fields[0], line_no);
    e.x = parse_field<std::uint16_t>(fields[1], line_no);
    e.y = parse_field<std::uint16_t>(fields[2], line_no);
    const auto p = parse_field<unsigned>(fields[3], line_no);
    if (p > 1) throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": polarity");
    e.polarity = static_cast<Polarity>(p);
    check_event(stream.header, e,
                (!stream.events.empty() && !options.tolerate_unordered) ? &stream.events.back() : nullptr,
                stream.events.size());
    stream.events.push_back(e);
  }
  finish_order(stream, options);
  return stream;
}

}  // namespace

void validate_events(const StreamHeader& header, std::span<const Event> events) {
  for (std::size_t i = 0; i < events.size(); ++i)
    check_event(header, events[i], i > 0 ? &events[i - 1] : nullptr, i);
}

EventStream read_events(std::span<const std::uint8_t> bytes, EventFormat format,
                        const ReadOptions& options) {
  return format == EventFormat::Evt1 ? read_evt1(bytes, options) : read_csv(bytes, options);
}

EventStream read_events_file(const std::string& path, EventFormat format,
                             const ReadOptions& options) {
  const auto bytes = read_file(path);
  return read_events(bytes, format, options);
}

EventStream read_events_file(const std::string& path, const ReadOptions& options) {
  const bool csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
  return read_events_file(path, csv ? EventFormat::Csv : EventFormat::Evt1, options);
}

std::vector<std::uint8_t> write_events(const StreamHeader& header, std::span<const Event> events,
                                       EventFormat format) {
  std::vector<std::uint8_t> out;
  if (format == EventFormat::Evt1) {
    out.reserve(kEvt1HeaderBytes + kEvt1RecordBytes * events.size());
    for (std::uint8_t b : kMagic) put_u8(out, b);
    put_u16(out, header.version);
    put_u16(out, header.sensor_width);
    put_u16(out, header.sensor_height);
    put_u32(out, 0);
    put_u16(out, 0);
    for (const Event& e : events) {
      put_u64(out, e.t_us);
      put_u16(out, e.x);
      put_u16(out, e.y);
      put_u8(out, static_cast<std::uint8_t>(e.polarity));
      put_u8(out, 0);
      put_u16(out, 0);
    }
    return out;
  }
  std::string text = "t_us,x,y,p\n";
  text.reserve(text.size() + events.size() * 20);
  for (const Event& e : events) {
    text += std::to_string(e.t_us);
    text += ',';
    text += std::to_string(e.x);
    text += ',';
    text += std::to_string(e.y);
    text += ',';
    text += e.polarity == Polarity::On ? '1' : '0';
    text += '\n';
  }
  out.assign(text.begin(), text.end());
  return out;
}

void write_events_file(const std::string& path, const StreamHeader& header,
                       std::span<const Event> events, EventFormat format) {
  write_file(path, write_events(header, events, format));
}

WindowStats stream_stats(std::span<const Event> events, std::uint64_t window_us) {
  if (window_us == 0) throw Error(ErrorCode::InvalidArgument, "window_us must be positive");
  WindowStats stats;
  stats.window_us = window_us;
  if (events.empty()) return stats;
  stats.t0_us = events.front().t_us;
  const std::uint64_t span = events.back().t_us - stats.t0_us;
  stats.counts.assign(span / window_us + 1, 0);
  for (const Event& e : events) {
    if (e.t_us < stats.t0_us)
      throw Error(ErrorCode::NonMonotonic, "event before stream start");
    const std::uint64_t idx = (e.t_us - stats.t0_us) / window_us;
    if (idx >= stats.counts.size()) throw Error(ErrorCode::NonMonotonic, "event past stream end");
    ++stats.counts[idx];
  }
  return stats;
}

std::string stats_csv(const WindowStats& stats) {
  std::ostringstream out;
  out << "window_index,count\n";
  for (std::size_t i = 0; i < stats.counts.size(); ++i) out << i << ',' << stats.counts[i] << '\n';
  return out.str();
}

}  // namespace evtrack
