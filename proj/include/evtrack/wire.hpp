#pragma once

// Framed byte-stream protocol between an event source and the tracker.
//
//   0xAA 0x55 | kind u8 | payload_len u16 | payload | crc16 u16
//
// The CRC (CCITT-FALSE) covers kind, length and payload. All integers are
// little-endian.
//
//   EVENTS:     base_t u64, count u16, count x {dt u32, x u16 (bit15 = ON), y u16}
//               dt is relative to the previous event; the first to base_t.
//   PREDICTION: frame_id u32, cx f32, cy f32, w f32, h f32, t_end u64

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evtrack/event_io.hpp"
#include "evtrack/predictor.hpp"

namespace evtrack {

enum class PacketKind : std::uint8_t { Events = 0x01, Prediction = 0x02 };

inline constexpr std::uint8_t kWireMagic0 = 0xAA;
inline constexpr std::uint8_t kWireMagic1 = 0x55;
inline constexpr std::size_t kWireHeaderSize = 5;  // magic, kind, length
inline constexpr std::size_t kWireOverhead = kWireHeaderSize + 2;
inline constexpr std::size_t kMaxEventsPerPacket = 512;
inline constexpr std::size_t kEventsPrefixSize = 10;
inline constexpr std::size_t kWireEventSize = 8;
inline constexpr std::size_t kPredictionPayloadSize = 28;

struct Packet {
  PacketKind kind = PacketKind::Events;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const Packet&, const Packet&) = default;
};

struct Prediction {
  std::uint32_t frame_id = 0;
  std::array<float, 4> box{};  // cx, cy, w, h
  std::uint64_t t_end_us = 0;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

std::vector<std::uint8_t> encode_packet(const Packet& packet);

/// One EVENTS packet; at most 512 time-ordered events with 15-bit coordinates.
std::vector<std::uint8_t> encode_events(std::span<const Event> events);

// Splits a stream into EVENTS packets of up to `per_packet` events.
std::vector<std::uint8_t> encode_event_stream(std::span<const Event> events,
                                              std::size_t per_packet = kMaxEventsPerPacket);

std::vector<Event> decode_events(std::span<const std::uint8_t> payload);

std::vector<std::uint8_t> encode_prediction(const Prediction& p);
Prediction decode_prediction(std::span<const std::uint8_t> payload);

struct DecoderCounters {
  std::uint64_t packets = 0;
  std::uint64_t crc_mismatch = 0;
  std::uint64_t unknown_kind = 0;
  std::uint64_t length_overrun = 0;
  std::uint64_t skipped_bytes = 0;  // bytes discarded while hunting for magic

  friend bool operator==(const DecoderCounters&, const DecoderCounters&) = default;
};

/// Streaming decoder. Bytes may arrive in arbitrary chunks; on any framing
/// failure it rescans from one byte past the failed magic, so a corrupted
/// region costs at most the packet it hit.
class PacketDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  // Flushes what can still be decoded once no more input will arrive.
  void finish();

  bool has_packet() const { return !ready_.empty(); }
  Packet pop();
  std::vector<Packet> drain();

  const DecoderCounters& counters() const { return counters_; }
  std::size_t buffered() const { return buf_.size() - pos_; }

 private:
  void scan(bool final);

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::deque<Packet> ready_;
  DecoderCounters counters_;
};

// Decodes a complete byte buffer.
std::vector<Packet> decode_all(std::span<const std::uint8_t> bytes, DecoderCounters* counters = nullptr);

/// Minimal duplex byte transport.
class ByteStream {
 public:
  virtual ~ByteStream() = default;
  // Blocks until some bytes arrive; returns 0 once the peer has closed.
  virtual std::size_t read(std::uint8_t* dst, std::size_t cap) = 0;
  virtual void write(std::span<const std::uint8_t> bytes) = 0;
  virtual void flush() {}
};

class MemoryStream : public ByteStream {
 public:
  explicit MemoryStream(std::vector<std::uint8_t> input, std::size_t chunk = 4096)
      : input_(std::move(input)), chunk_(chunk) {}
  std::size_t read(std::uint8_t* dst, std::size_t cap) override;
  void write(std::span<const std::uint8_t> bytes) override;
  const std::vector<std::uint8_t>& output() const { return output_; }

 private:
  std::vector<std::uint8_t> input_;
  std::size_t pos_ = 0;
  std::size_t chunk_;
  std::vector<std::uint8_t> output_;
};

// POSIX file descriptors; the stream does not own them unless told to.
class FdStream : public ByteStream {
 public:
  FdStream(int in_fd, int out_fd, bool owns = false) : in_(in_fd), out_(out_fd), owns_(owns) {}
  ~FdStream() override;
  FdStream(const FdStream&) = delete;
  FdStream& operator=(const FdStream&) = delete;
  std::size_t read(std::uint8_t* dst, std::size_t cap) override;
  void write(std::span<const std::uint8_t> bytes) override;

 private:
  int in_, out_;
  bool owns_;
};

struct RelayOptions {
  std::size_t events_per_slice = 1000;
  StreamHeader header;
};

struct RelayStats {
  std::uint64_t events = 0;
  std::uint64_t predictions = 0;
  std::uint64_t rejected_events = 0;  // out of order or outside the sensor
  DecoderCounters decoder;
};

/// Reads EVENTS packets until the stream closes and answers every completed
/// slice with a PREDICTION packet. A trailing partial slice is dropped.
RelayStats relay_serve(ByteStream& stream, const Predictor& predictor, const RelayOptions& options);

/// The same predictions computed offline from an event list.
std::vector<Prediction> offline_predictions(std::span<const Event> events, const Predictor& predictor,
                                            const RelayOptions& options);

/// Opens "-" (stdin/stdout) or "tcp://host:port" (listen, accept one client).
std::unique_ptr<ByteStream> open_endpoint(const std::string& endpoint);

}  // namespace evtrack
