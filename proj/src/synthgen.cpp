#include "evtrack/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "evtrack/bytes.hpp"
#include "evtrack/container.hpp"
#include "evtrack/error.hpp"
#include "evtrack/framer.hpp"
#include "evtrack/slicer.hpp"

namespace evtrack {

namespace {

constexpr double kTwoPi = 6.283185307179586;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b * 0x9E3779B97F4A7C15ull);
  return splitmix64(s);
}

double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

// Knuth's method; means here are small (rate * timestep).
std::uint64_t poisson(Rng& rng, double mean) {
  if (mean <= 0) return 0;
  const double limit = std::exp(-mean);
  std::uint64_t k = 0;
  double p = rng.uniform();
  while (p > limit) {
    ++k;
    p *= rng.uniform();
  }
  return k;
}

}  // namespace

Trajectory::Trajectory(const SceneConfig& cfg) : cfg_(cfg) {
  if (cfg.saccade_rate_hz <= 0) return;
  Rng rng(mix_seed(cfg.seed, 0x5ACCADE));
  double t = 0;
  while (true) {
    t += rng.exponential(cfg.saccade_rate_hz) * 1e6;
    // Overlapping saccades are deferred until the previous one lands.
    if (!starts_.empty()) t = std::max(t, starts_.back() + cfg.saccade_duration_us);
    if (t >= static_cast<double>(cfg.duration_us)) break;
    starts_.push_back(t);
    target_x_.push_back(rng.uniform(-cfg.saccade_amplitude_px, cfg.saccade_amplitude_px));
    target_y_.push_back(rng.uniform(-cfg.saccade_amplitude_px, cfg.saccade_amplitude_px));
  }
}

void Trajectory::center(double t_us, double& cx, double& cy) const {
  const double ts = t_us * 1e-6;
  cx = cfg_.base_x;
  cy = cfg_.base_y;
  for (const auto& s : cfg_.drift) {
    const double v = std::sin(kTwoPi * s.freq_hz * ts + s.phase);
    cx += s.amp_x * v;
    cy += s.amp_y * v;
  }
  double ox = 0, oy = 0;
  for (std::size_t k = 0; k < starts_.size() && starts_[k] <= t_us; ++k) {
    const double u = (t_us - starts_[k]) / std::max<double>(cfg_.saccade_duration_us, 1.0);
    if (u < 1.0) {
      const double s = smoothstep(u);
      ox += (target_x_[k] - ox) * s;
      oy += (target_y_[k] - oy) * s;
      break;
    }
    ox = target_x_[k];
    oy = target_y_[k];
  }
  cx = std::clamp(cx + ox, 0.0, static_cast<double>(cfg_.width) - 1e-9);
  cy = std::clamp(cy + oy, 0.0, static_cast<double>(cfg_.height) - 1e-9);
}

EventSimulator::EventSimulator(const SceneConfig& cfg, double cx, double cy, std::uint64_t t_us)
    : cfg_(cfg), cx_(cx), cy_(cy), t_us_(t_us) {
  if (!(cfg.contrast_threshold > 0) || !(cfg.pupil_radius_px > 0))
    throw Error(ErrorCode::InvalidArgument, "scene needs positive threshold and radius");
  reference_.assign(static_cast<std::size_t>(cfg.width) * cfg.height, cfg.log_background);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x)
      reference_[static_cast<std::size_t>(y) * cfg.width + x] = log_intensity(x, y, cx, cy);
}

double EventSimulator::log_intensity(int x, int y, double cx, double cy) const {
  const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
  const double cov = std::clamp(cfg_.pupil_radius_px - d + 0.5, 0.0, 1.0);
  if (cov == 0.0) return cfg_.log_background;
  if (cov == 1.0) return cfg_.log_pupil;
  return std::log((1.0 - cov) * std::exp(cfg_.log_background) + cov * std::exp(cfg_.log_pupil));
}

void EventSimulator::advance(double cx, double cy, std::uint64_t t_us, std::vector<Event>& out) {
  if (t_us < t_us_) throw Error(ErrorCode::InvalidArgument, "simulator time moved backwards");
  const double r = cfg_.pupil_radius_px;
  const double inner2 = std::max(0.0, r - 0.5) * std::max(0.0, r - 0.5);
  const double outer2 = (r + 0.5) * (r + 0.5);
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(cx_, cx) - r - 2)));
  const int x1 = std::min<int>(cfg_.width - 1, static_cast<int>(std::ceil(std::max(cx_, cx) + r + 2)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(cy_, cy) - r - 2)));
  const int y1 = std::min<int>(cfg_.height - 1, static_cast<int>(std::ceil(std::max(cy_, cy) + r + 2)));
  const double span = static_cast<double>(t_us - t_us_);
  const double c = cfg_.contrast_threshold;

  struct Pending {
    std::uint64_t t;
    std::uint32_t pixel;
    Event e;
  };
  std::vector<Pending> pending;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dp2 = (x + 0.5 - cx_) * (x + 0.5 - cx_) + (y + 0.5 - cy_) * (y + 0.5 - cy_);
      const double dc2 = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
      if ((dp2 <= inner2 && dc2 <= inner2) || (dp2 >= outer2 && dc2 >= outer2)) continue;
      const double l_prev = log_intensity(x, y, cx_, cy_);
      const double l_cur = log_intensity(x, y, cx, cy);
      if (l_prev == l_cur) continue;
      const std::uint32_t pixel = static_cast<std::uint32_t>(y) * cfg_.width + x;
      double& ref = reference_[pixel];
      auto emit = [&](Polarity p) {
        const double frac = std::clamp((ref - l_prev) / (l_cur - l_prev), 0.0, 1.0);
        const auto t = t_us_ + static_cast<std::uint64_t>(std::llround(frac * span));
        pending.push_back({t, pixel, Event{t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), p}});
      };
      while (l_cur - ref >= c) {
        ref += c;
        emit(Polarity::On);
      }
      while (ref - l_cur >= c) {
        ref -= c;
        emit(Polarity::Off);
      }
    }
  std::stable_sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
    return a.t != b.t ? a.t < b.t : a.pixel < b.pixel;
  });
  for (const auto& p : pending) out.push_back(p.e);
  cx_ = cx;
  cy_ = cy;
  t_us_ = t_us;
}

SyntheticSequence generate(const SceneConfig& cfg) {
  if (cfg.timestep_us == 0) throw Error(ErrorCode::InvalidArgument, "timestep must be positive");
  if (cfg.noise_rate_hz < 0 || cfg.saccade_rate_hz < 0)
    throw Error(ErrorCode::InvalidArgument, "rates must be non-negative");
  SyntheticSequence seq;
  seq.header.sensor_width = cfg.width;
  seq.header.sensor_height = cfg.height;
  const Trajectory traj(cfg);
  double cx, cy;
  traj.center(0, cx, cy);
  EventSimulator sim(cfg, cx, cy, 0);
  Rng noise(mix_seed(cfg.seed, 0x701CE));
  const double noise_per_step = cfg.noise_rate_hz * cfg.timestep_us * 1e-6;

  std::vector<Event> step_events;
  for (std::uint64_t t = cfg.timestep_us; t <= cfg.duration_us; t += cfg.timestep_us) {
    traj.center(static_cast<double>(t), cx, cy);
    step_events.clear();
    sim.advance(cx, cy, t, step_events);
    const std::uint64_t n_noise = poisson(noise, noise_per_step);
    if (n_noise > 0) {
      for (std::uint64_t k = 0; k < n_noise; ++k) {
        Event e;
        e.t_us = t - cfg.timestep_us + 1 + noise.below(cfg.timestep_us);
        e.x = static_cast<std::uint16_t>(noise.below(cfg.width));
        e.y = static_cast<std::uint16_t>(noise.below(cfg.height));
        e.polarity = noise.below(2) ? Polarity::On : Polarity::Off;
        step_events.push_back(e);
      }
      std::stable_sort(step_events.begin(), step_events.end(), [&](const Event& a, const Event& b) {
        if (a.t_us != b.t_us) return a.t_us < b.t_us;
        return static_cast<std::uint32_t>(a.y) * cfg.width + a.x < static_cast<std::uint32_t>(b.y) * cfg.width + b.x;
      });
    }
    seq.events.insert(seq.events.end(), step_events.begin(), step_events.end());
  }
  for (std::uint64_t t = 0; t <= cfg.duration_us; t += 1000) {
    traj.center(static_cast<double>(t), cx, cy);
    seq.truth.push_back({t, cx, cy});
  }
  return seq;
}

std::string ground_truth_csv(const GroundTruth& truth) {
  std::string out = "t_us,cx_px,cy_px\n";
  for (const auto& s : truth)
    out += std::to_string(s.t_us) + "," + format_double(s.cx_px) + "," + format_double(s.cy_px) + "\n";
  return out;
}

GroundTruth parse_ground_truth_csv(const std::string& text) {
  GroundTruth truth;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && !std::isdigit(static_cast<unsigned char>(line[0])))) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos) throw Error(ErrorCode::ParseError, "labels line " + std::to_string(line_no));
    CenterSample s;
    s.t_us = std::stoull(line.substr(0, c1));
    s.cx_px = parse_double(line.substr(c1 + 1, c2 - c1 - 1));
    s.cy_px = parse_double(line.substr(c2 + 1));
    if (!truth.empty() && s.t_us < truth.back().t_us)
      throw Error(ErrorCode::NonMonotonic, "labels line " + std::to_string(line_no));
    truth.push_back(s);
  }
  return truth;
}

void sensor_to_normalized(const StreamHeader& header, double x, double y, double& u, double& v) {
  const CropGeometry geo = crop_geometry(header);
  u = (x / geo.bin - geo.offset_x) / kFrameSize;
  v = (y / geo.bin - geo.offset_y) / kFrameSize;
}

LabelingResult label_frames(const StreamHeader& header, std::span<const Event> events,
                            const GroundTruth& truth, const LabelOptions& options) {
  LabelingResult result;
  const auto slices = slice_by_count(events, options.events_per_slice);
  if (truth.empty()) {
    result.dropped_gap = slices.size();
    return result;
  }
  for (const auto& slice : slices) {
    auto it = std::lower_bound(truth.begin(), truth.end(), slice.t_end_us,
                               [](const CenterSample& s, std::uint64_t t) { return s.t_us < t; });
    const CenterSample* best = nullptr;
    if (it != truth.end()) best = &*it;
    if (it != truth.begin()) {
      const CenterSample* prev = &*(it - 1);
      if (!best || slice.t_end_us - prev->t_us <= best->t_us - slice.t_end_us) best = prev;
    }
    const std::uint64_t gap = best->t_us > slice.t_end_us ? best->t_us - slice.t_end_us : slice.t_end_us - best->t_us;
    if (gap > options.max_label_gap_us) {
      ++result.dropped_gap;
      continue;
    }
    double u, v;
    sensor_to_normalized(header, best->cx_px, best->cy_px, u, v);
    if (u < 0 || u >= 1 || v < 0 || v >= 1) {
      ++result.dropped_outside;
      continue;
    }
    LabeledSample s;
    s.frame = make_frame(slice.events, header, options.channels, slice.slice_index);
    s.target = BBox{u, v, options.box_side, options.box_side};
    s.participant_id = options.participant_id;
    s.t_us = slice.t_end_us;
    result.samples.push_back(std::move(s));
  }
  return result;
}

std::string participant_name(int participant) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "P%02d", participant + 1);
  return buf;
}

SceneConfig participant_scene(const DatasetSpec& spec, int participant, int sequence) {
  Rng who(mix_seed(spec.seed, 1000 + static_cast<std::uint64_t>(participant)));
  Rng when(mix_seed(spec.seed, (static_cast<std::uint64_t>(participant) << 20) + 77 + sequence));
  SceneConfig cfg;
  cfg.pupil_radius_px = who.uniform(32, 46);
  cfg.base_x = 320 + who.uniform(-20, 20);
  cfg.base_y = 240 + who.uniform(-15, 15);
  cfg.log_background = std::log(who.uniform(0.6, 0.9));
  cfg.log_pupil = std::log(who.uniform(0.06, 0.15));
  cfg.drift = {{who.uniform(25, 45), 0, who.uniform(0.4, 0.9), when.uniform(0, kTwoPi)},
               {0, who.uniform(15, 30), who.uniform(0.3, 0.7), when.uniform(0, kTwoPi)}};
  cfg.saccade_rate_hz = who.uniform(1.0, 2.0);
  cfg.saccade_amplitude_px = 45;
  cfg.noise_rate_hz = when.uniform(1000, 3000);
  cfg.duration_us = spec.duration_us;
  cfg.seed = mix_seed(spec.seed, (static_cast<std::uint64_t>(participant) << 32) + sequence + 1);
  return cfg;
}

std::string manifest_csv(std::span<const ManifestEntry> entries) {
  std::string out = "sequence,participant_id,events,labels\n";
  for (const auto& e : entries)
    out += e.sequence + "," + e.participant_id + "," + e.events_path + "," + e.labels_path + "\n";
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  const auto bytes = read_file(path);
  const std::string text(bytes.begin(), bytes.end());
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line_no == 1) continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    if (fields.size() != 4) throw Error(ErrorCode::ParseError, "manifest line " + std::to_string(line_no));
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path fp(p);
      return fp.is_absolute() ? p : (base / fp).string();
    };
    entries.push_back({fields[0], fields[1], resolve(fields[2]), resolve(fields[3])});
  }
  return entries;
}

std::vector<ManifestEntry> write_dataset(const DatasetSpec& spec, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<ManifestEntry> entries;
  for (int p = 0; p < spec.participants; ++p)
    for (int s = 0; s < spec.sequences_per_participant; ++s) {
      const auto seq = generate(participant_scene(spec, p, s));
      char name[32];
      std::snprintf(name, sizeof name, "p%02d_s%d", p + 1, s);
      const std::string events = std::string(name) + ".evt1";
      const std::string labels = std::string(name) + "_labels.csv";
      write_events_file((std::filesystem::path(out_dir) / events).string(), seq.header, seq.events, EventFormat::Evt1);
      write_text_file((std::filesystem::path(out_dir) / labels).string(), ground_truth_csv(seq.truth));
      entries.push_back({name, participant_name(p), events, labels});
    }
  write_text_file((std::filesystem::path(out_dir) / "manifest.csv").string(), manifest_csv(entries));
  return entries;
}

std::vector<LabeledSample> load_labeled(const std::vector<ManifestEntry>& entries,
                                        const LabelOptions& options, std::size_t* dropped) {
  std::vector<LabeledSample> all;
  std::size_t n_dropped = 0;
  for (const auto& e : entries) {
    const auto stream = read_events_file(e.events_path);
    const auto label_bytes = read_file(e.labels_path);
    const auto truth = parse_ground_truth_csv(std::string(label_bytes.begin(), label_bytes.end()));
    LabelOptions opts = options;
    opts.participant_id = e.participant_id;
    auto r = label_frames(stream.header, stream.events, truth, opts);
    n_dropped += r.dropped_gap + r.dropped_outside;
    for (auto& s : r.samples) all.push_back(std::move(s));
  }
  if (dropped) *dropped = n_dropped;
  return all;
}

std::vector<LabeledSample> synthesize_labeled(const DatasetSpec& spec, const LabelOptions& options) {
  std::vector<LabeledSample> all;
  for (int p = 0; p < spec.participants; ++p)
    for (int s = 0; s < spec.sequences_per_participant; ++s) {
      const auto seq = generate(participant_scene(spec, p, s));
      LabelOptions opts = options;
      opts.participant_id = participant_name(p);
      auto r = label_frames(seq.header, seq.events, seq.truth, opts);
      for (auto& sample : r.samples) all.push_back(std::move(sample));
    }
  return all;
}

}  // namespace evtrack
