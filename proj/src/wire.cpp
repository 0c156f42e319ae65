#include "evtrack/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <limits>

#include "evtrack/bytes.hpp"
#include "evtrack/error.hpp"
#include "evtrack/framer.hpp"
#include "evtrack/slicer.hpp"

namespace evtrack {

namespace {

constexpr std::size_t kMaxEventsPayload = kEventsPrefixSize + kMaxEventsPerPacket * kWireEventSize;
constexpr std::uint16_t kPolarityBit = 0x8000;

bool known_kind(std::uint8_t k) {
  return k == static_cast<std::uint8_t>(PacketKind::Events) || k == static_cast<std::uint8_t>(PacketKind::Prediction);
}

std::uint16_t read_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

bool length_fits(std::uint8_t kind, std::size_t len) {
  if (kind == static_cast<std::uint8_t>(PacketKind::Prediction)) return len == kPredictionPayloadSize;
  return len >= kEventsPrefixSize && len <= kMaxEventsPayload && (len - kEventsPrefixSize) % kWireEventSize == 0;
}

}  // namespace

std::vector<std::uint8_t> encode_packet(const Packet& packet) {
  if (packet.payload.size() > std::numeric_limits<std::uint16_t>::max())
    throw Error(ErrorCode::InvalidArgument, "payload longer than 65535 bytes");
  std::vector<std::uint8_t> out;
  out.reserve(packet.payload.size() + kWireOverhead);
  put_u8(out, kWireMagic0);
  put_u8(out, kWireMagic1);
  put_u8(out, static_cast<std::uint8_t>(packet.kind));
  put_u16(out, static_cast<std::uint16_t>(packet.payload.size()));
  out.insert(out.end(), packet.payload.begin(), packet.payload.end());
  put_u16(out, crc16_ccitt(std::span<const std::uint8_t>(out).subspan(2)));
  return out;
}

std::vector<std::uint8_t> encode_events(std::span<const Event> events) {
  if (events.size() > kMaxEventsPerPacket)
    throw Error(ErrorCode::InvalidArgument, "fragment holds " + std::to_string(events.size()) + " events, limit 512");
  Packet p;
  p.kind = PacketKind::Events;
  const std::uint64_t base = events.empty() ? 0 : events.front().t_us;
  put_u64(p.payload, base);
  put_u16(p.payload, static_cast<std::uint16_t>(events.size()));
  std::uint64_t prev = base;
  for (const Event& e : events) {
    if (e.t_us < prev) throw Error(ErrorCode::NonMonotonic, "fragment events are not time-ordered");
    if (e.t_us - prev > std::numeric_limits<std::uint32_t>::max())
      throw Error(ErrorCode::InvalidArgument, "event gap does not fit 32 bits");
    if (e.x >= kPolarityBit || e.y >= kPolarityBit)
      throw Error(ErrorCode::OutOfBounds, "event coordinate does not fit 15 bits");
    put_u32(p.payload, static_cast<std::uint32_t>(e.t_us - prev));
    put_u16(p.payload, static_cast<std::uint16_t>(e.x | (e.polarity == Polarity::On ? kPolarityBit : 0)));
    put_u16(p.payload, e.y);
    prev = e.t_us;
  }
  return encode_packet(p);
}

std::vector<std::uint8_t> encode_event_stream(std::span<const Event> events, std::size_t per_packet) {
  if (per_packet == 0 || per_packet > kMaxEventsPerPacket)
    throw Error(ErrorCode::InvalidArgument, "events per packet must be in [1, 512]");
  std::vector<std::uint8_t> out;
  std::size_t i = 0;
  while (i < events.size()) {
    std::size_t j = i + 1;
    while (j < events.size() && j - i < per_packet &&
           events[j].t_us >= events[j - 1].t_us &&
           events[j].t_us - events[j - 1].t_us <= std::numeric_limits<std::uint32_t>::max())
      ++j;
    const auto bytes = encode_events(events.subspan(i, j - i));
    out.insert(out.end(), bytes.begin(), bytes.end());
    i = j;
  }
  return out;
}

std::vector<Event> decode_events(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  std::uint64_t t = r.u64();
  const std::uint16_t count = r.u16();
  if (r.remaining() != static_cast<std::size_t>(count) * kWireEventSize)
    throw Error(ErrorCode::StructureMismatch, "event count does not match payload length");
  std::vector<Event> out(count);
  for (Event& e : out) {
    t += r.u32();
    const std::uint16_t xp = r.u16();
    e.t_us = t;
    e.x = static_cast<std::uint16_t>(xp & ~kPolarityBit);
    e.polarity = (xp & kPolarityBit) ? Polarity::On : Polarity::Off;
    e.y = r.u16();
  }
  return out;
}

std::vector<std::uint8_t> encode_prediction(const Prediction& p) {
  Packet packet;
  packet.kind = PacketKind::Prediction;
  put_u32(packet.payload, p.frame_id);
  for (float v : p.box) put_f32(packet.payload, v);
  put_u64(packet.payload, p.t_end_us);
  return encode_packet(packet);
}

Prediction decode_prediction(std::span<const std::uint8_t> payload) {
  if (payload.size() != kPredictionPayloadSize)
    throw Error(ErrorCode::StructureMismatch, "prediction payload must be 28 bytes");
  ByteReader r(payload);
  Prediction p;
  p.frame_id = r.u32();
  for (float& v : p.box) v = r.f32();
  p.t_end_us = r.u64();
  return p;
}

void PacketDecoder::feed(std::span<const std::uint8_t> bytes) {
  if (pos_ > 0 && pos_ * 2 >= buf_.size()) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  scan(false);
}

void PacketDecoder::finish() { scan(true); }

Packet PacketDecoder::pop() {
  if (ready_.empty()) throw Error(ErrorCode::EmptyInput, "no decoded packet available");
  Packet p = std::move(ready_.front());
  ready_.pop_front();
  return p;
}

std::vector<Packet> PacketDecoder::drain() {
  std::vector<Packet> out(std::make_move_iterator(ready_.begin()), std::make_move_iterator(ready_.end()));
  ready_.clear();
  return out;
}

void PacketDecoder::scan(bool final) {
  const std::size_t size = buf_.size();
  auto resync = [&] {
    ++pos_;
    ++counters_.skipped_bytes;
  };
  while (pos_ < size) {
    if (buf_[pos_] != kWireMagic0 || (pos_ + 1 < size && buf_[pos_ + 1] != kWireMagic1)) {
      resync();
      continue;
    }
    const std::size_t avail = size - pos_;
    if (avail < kWireHeaderSize) {
      if (!final) return;
      resync();
      continue;
    }
    const std::uint8_t* h = buf_.data() + pos_;
    const std::uint8_t kind = h[2];
    const std::size_t len = read_u16(h + 3);
    if (!known_kind(kind)) {
      ++counters_.unknown_kind;
      resync();
      continue;
    }
    if (!length_fits(kind, len)) {
      ++counters_.length_overrun;
      resync();
      continue;
    }
    const std::size_t total = kWireOverhead + len;
    if (avail < total) {
      if (!final) return;
      ++counters_.length_overrun;
      resync();
      continue;
    }
    const std::uint16_t crc = crc16_ccitt(std::span<const std::uint8_t>(h + 2, 3 + len));
    if (crc != read_u16(h + kWireHeaderSize + len)) {
      ++counters_.crc_mismatch;
      resync();
      continue;
    }
    Packet p;
    p.kind = static_cast<PacketKind>(kind);
    p.payload.assign(h + kWireHeaderSize, h + kWireHeaderSize + len);
    if (p.kind == PacketKind::Events &&
        read_u16(p.payload.data() + 8) * kWireEventSize + kEventsPrefixSize != len) {
      ++counters_.length_overrun;
      resync();
      continue;
    }
    ++counters_.packets;
    ready_.push_back(std::move(p));
    pos_ += total;
  }
}

std::vector<Packet> decode_all(std::span<const std::uint8_t> bytes, DecoderCounters* counters) {
  PacketDecoder d;
  d.feed(bytes);
  d.finish();
  if (counters) *counters = d.counters();
  return d.drain();
}

std::size_t MemoryStream::read(std::uint8_t* dst, std::size_t cap) {
  const std::size_t n = std::min({cap, chunk_, input_.size() - pos_});
  std::memcpy(dst, input_.data() + pos_, n);
  pos_ += n;
  return n;
}

void MemoryStream::write(std::span<const std::uint8_t> bytes) { output_.insert(output_.end(), bytes.begin(), bytes.end()); }

FdStream::~FdStream() {
  if (!owns_) return;
  ::close(in_);
  if (out_ != in_) ::close(out_);
}

std::size_t FdStream::read(std::uint8_t* dst, std::size_t cap) {
  for (;;) {
    const ssize_t n = ::read(in_, dst, cap);
    if (n >= 0) return static_cast<std::size_t>(n);
    if (errno == EINTR) continue;
    if (errno == ECONNRESET) return 0;
    throw Error(ErrorCode::Io, std::string("read failed: ") + std::strerror(errno));
  }
}

void FdStream::write(std::span<const std::uint8_t> bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(out_, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::Io, std::string("write failed: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

namespace {

// Accumulates events into slices and answers each one as soon as it is full.
class SliceAssembler {
 public:
  SliceAssembler(const Predictor& predictor, const RelayOptions& options) : predictor_(predictor), options_(options) {
    if (options.events_per_slice == 0) throw Error(ErrorCode::InvalidArgument, "events per slice must be positive");
    pending_.reserve(options.events_per_slice);
  }

  // Returns false if the event was rejected.
  bool push(const Event& e, std::vector<Prediction>& out) {
    if ((have_last_ && e.t_us < last_t_) || e.x >= options_.header.sensor_width ||
        e.y >= options_.header.sensor_height)
      return false;
    have_last_ = true;
    last_t_ = e.t_us;
    pending_.push_back(e);
    if (pending_.size() == options_.events_per_slice) {
      const EventFrame frame = make_frame(pending_, options_.header, predictor_.channels(), next_id_);
      out.push_back({static_cast<std::uint32_t>(next_id_), predictor_(frame), pending_.back().t_us});
      ++next_id_;
      pending_.clear();
    }
    return true;
  }

 private:
  const Predictor& predictor_;
  const RelayOptions& options_;
  std::vector<Event> pending_;
  std::size_t next_id_ = 0;
  std::uint64_t last_t_ = 0;
  bool have_last_ = false;
};

}  // namespace

RelayStats relay_serve(ByteStream& stream, const Predictor& predictor, const RelayOptions& options) {
  RelayStats stats;
  SliceAssembler assembler(predictor, options);
  PacketDecoder decoder;
  std::vector<std::uint8_t> chunk(1 << 16);
  std::vector<Prediction> predictions;
  bool open = true;
  while (open) {
    const std::size_t n = stream.read(chunk.data(), chunk.size());
    if (n == 0) {
      decoder.finish();
      open = false;
    } else {
      decoder.feed(std::span<const std::uint8_t>(chunk.data(), n));
    }
    while (decoder.has_packet()) {
      const Packet p = decoder.pop();
      if (p.kind != PacketKind::Events) continue;
      for (const Event& e : decode_events(p.payload)) {
        ++stats.events;
        if (!assembler.push(e, predictions)) ++stats.rejected_events;
      }
    }
    if (!predictions.empty()) {
      std::vector<std::uint8_t> out;
      for (const Prediction& pr : predictions) {
        const auto bytes = encode_prediction(pr);
        out.insert(out.end(), bytes.begin(), bytes.end());
      }
      stream.write(out);
      stream.flush();
      stats.predictions += predictions.size();
      predictions.clear();
    }
  }
  stats.decoder = decoder.counters();
  return stats;
}

std::vector<Prediction> offline_predictions(std::span<const Event> events, const Predictor& predictor,
                                            const RelayOptions& options) {
  std::vector<Prediction> out;
  for (const EventSlice& s : slice_by_count(events, options.events_per_slice)) {
    const EventFrame frame = make_frame(s.events, options.header, predictor.channels(), s.slice_index);
    out.push_back({static_cast<std::uint32_t>(s.slice_index), predictor(frame), s.t_end_us});
  }
  return out;
}

std::unique_ptr<ByteStream> open_endpoint(const std::string& endpoint) {
  if (endpoint == "-") return std::make_unique<FdStream>(STDIN_FILENO, STDOUT_FILENO);
  const std::string prefix = "tcp://";
  if (endpoint.rfind(prefix, 0) != 0)
    throw Error(ErrorCode::InvalidArgument, "endpoint must be '-' or tcp://host:port");
  const std::string rest = endpoint.substr(prefix.size());
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::InvalidArgument, "endpoint has no port");
  const std::string host = rest.substr(0, colon);
  const std::string port = rest.substr(colon + 1);

  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), port.c_str(), &hints, &res); rc != 0)
    throw Error(ErrorCode::Io, std::string("cannot resolve endpoint: ") + ::gai_strerror(rc));
  int listener = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (listener < 0) {
    ::freeaddrinfo(res);
    throw Error(ErrorCode::Io, std::string("socket failed: ") + std::strerror(errno));
  }
  const int one = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const bool ok = ::bind(listener, res->ai_addr, res->ai_addrlen) == 0 && ::listen(listener, 1) == 0;
  ::freeaddrinfo(res);
  if (!ok) {
    const std::string why = std::strerror(errno);
    ::close(listener);
    throw Error(ErrorCode::Io, "cannot listen on " + endpoint + ": " + why);
  }
  const int client = ::accept(listener, nullptr, nullptr);
  const int accept_errno = errno;
  ::close(listener);
  if (client < 0) throw Error(ErrorCode::Io, std::string("accept failed: ") + std::strerror(accept_errno));
  return std::make_unique<FdStream>(client, client, true);
}

}  // namespace evtrack
