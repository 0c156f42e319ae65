#pragma once

#include <set>
#include <vector>

#include "evtrack/rng.hpp"
#include "evtrack/wire.hpp"

namespace oracle {

struct PacketCorpus {
  std::vector<evtrack::Packet> packets;
  std::vector<std::size_t> offsets;  // start of each packet in bytes
  std::vector<std::uint8_t> bytes;
};

// Mixed EVENTS / PREDICTION packets with random contents.
inline PacketCorpus random_corpus(std::size_t n, std::uint64_t seed) {
  evtrack::Rng r(seed);
  PacketCorpus c;
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> enc;
    if (r.below(4) == 0) {
      evtrack::Prediction p;
      p.frame_id = static_cast<std::uint32_t>(i);
      for (auto& v : p.box) v = static_cast<float>(r.uniform());
      p.t_end_us = r.next() >> 8;
      enc = evtrack::encode_prediction(p);
    } else {
      std::vector<evtrack::Event> ev(r.below(40));
      for (auto& e : ev) {
        t += r.below(300);
        e = {t, static_cast<std::uint16_t>(r.below(640)), static_cast<std::uint16_t>(r.below(480)),
             r.below(2) ? evtrack::Polarity::On : evtrack::Polarity::Off};
      }
      enc = evtrack::encode_events(ev);
    }
    c.offsets.push_back(c.bytes.size());
    c.packets.push_back(evtrack::decode_all(enc).at(0));
    c.bytes.insert(c.bytes.end(), enc.begin(), enc.end());
  }
  return c;
}

struct FlipOutcome {
  std::size_t sites = 0;
  std::size_t lost = 0;
  std::size_t worst_loss_per_site = 0;
  bool spurious = false;  // a decoded packet that was never sent
};

// Flips one bit in each of `sites` distinct packets, decodes the whole stream
// and attributes every missing packet to the corruption site it belongs to.
inline FlipOutcome flip_and_decode(const PacketCorpus& c, std::size_t sites, std::uint64_t seed) {
  evtrack::Rng r(seed);
  std::set<std::size_t> hit;
  while (hit.size() < sites) hit.insert(r.below(c.packets.size()));
  auto bytes = c.bytes;
  for (std::size_t idx : hit) {
    const std::size_t end = idx + 1 < c.offsets.size() ? c.offsets[idx + 1] : bytes.size();
    const std::size_t pos = c.offsets[idx] + r.below(end - c.offsets[idx]);
    bytes[pos] ^= static_cast<std::uint8_t>(1u << r.below(8));
  }
  const auto got = evtrack::decode_all(bytes);
  FlipOutcome out;
  out.sites = sites;
  // Greedy in-order match of decoded packets against the originals.
  std::size_t j = 0;
  std::vector<std::size_t> lost_at;
  for (const auto& p : got) {
    while (j < c.packets.size() && !(c.packets[j] == p)) lost_at.push_back(j++);
    if (j == c.packets.size()) {
      out.spurious = true;
      break;
    }
    ++j;
  }
  while (j < c.packets.size()) lost_at.push_back(j++);
  out.lost = lost_at.size();
  // Identical consecutive packets cannot be told apart, so a loss inside such
  // a run is charged to a corrupted member of the run when one was delivered.
  std::set<std::size_t> lost_set(lost_at.begin(), lost_at.end());
  for (std::size_t& idx : lost_at) {
    if (hit.count(idx)) continue;
    std::size_t lo = idx, hi = idx;
    while (lo > 0 && c.packets[lo - 1] == c.packets[idx]) --lo;
    while (hi + 1 < c.packets.size() && c.packets[hi + 1] == c.packets[idx]) ++hi;
    for (std::size_t k = lo; k <= hi; ++k) {
      if (hit.count(k) && !lost_set.count(k)) {
        lost_set.erase(idx);
        lost_set.insert(k);
        idx = k;
        break;
      }
    }
  }
  std::size_t per_site = 0;
  for (std::size_t idx : lost_at) {
    if (!hit.count(idx)) {
      // An intact packet went missing: charge it to the site before it.
      per_site = std::max<std::size_t>(per_site, 2);
    } else {
      per_site = std::max<std::size_t>(per_site, 1);
    }
  }
  out.worst_loss_per_site = per_site;
  return out;
}

}  // namespace oracle
