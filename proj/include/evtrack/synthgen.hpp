#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evtrack/event_io.hpp"
#include "evtrack/rng.hpp"
#include "evtrack/train.hpp"

namespace evtrack {

struct Sinusoid {
  double amp_x = 0;  // px
  double amp_y = 0;  // px
  double freq_hz = 0;
  double phase = 0;  // radians
};

struct SceneConfig {
  std::uint16_t width = 640;
  std::uint16_t height = 480;
  double pupil_radius_px = 40;
  double log_background = -0.2231435513142097;  // ln 0.8
  double log_pupil = -2.3025850929940455;        // ln 0.1
  double contrast_threshold = 0.4;
  std::uint32_t timestep_us = 200;
  double base_x = 320;
  double base_y = 240;
  std::vector<Sinusoid> drift{{40, 0, 0.7, 0.0}, {0, 25, 0.45, 1.3}};
  double saccade_rate_hz = 1.5;
  double saccade_amplitude_px = 50;  // targets uniform in +-amplitude box
  std::uint32_t saccade_duration_us = 40000;
  double noise_rate_hz = 2000;  // uniform background activity over the sensor
  std::uint64_t duration_us = 5'000'000;
  std::uint64_t seed = 0;
};

struct CenterSample {
  std::uint64_t t_us = 0;
  double cx_px = 0;
  double cy_px = 0;
};

using GroundTruth = std::vector<CenterSample>;

/// Pupil center path: base + sum of sinusoids + smoothed Poisson saccades.
class Trajectory {
 public:
  explicit Trajectory(const SceneConfig& cfg);

  void center(double t_us, double& cx, double& cy) const;
  const std::vector<double>& saccade_starts_us() const { return starts_; }

 private:
  SceneConfig cfg_;
  std::vector<double> starts_;
  std::vector<double> target_x_, target_y_;
};

/// Per-pixel log-intensity change detector over a rendered disk scene.
class EventSimulator {
 public:
  EventSimulator(const SceneConfig& cfg, double cx, double cy, std::uint64_t t_us);

  // Moves the pupil linearly to (cx, cy) at t_us, appending emitted events in
  // timestamp order (ties by pixel index).
  void advance(double cx, double cy, std::uint64_t t_us, std::vector<Event>& out);

  double log_intensity(int x, int y, double cx, double cy) const;

 private:
  SceneConfig cfg_;
  double cx_, cy_;
  std::uint64_t t_us_;
  std::vector<double> reference_;  // log intensity at each pixel's last event
};

struct SyntheticSequence {
  StreamHeader header;
  std::vector<Event> events;
  GroundTruth truth;
};

SyntheticSequence generate(const SceneConfig& cfg);

std::string ground_truth_csv(const GroundTruth& truth);
GroundTruth parse_ground_truth_csv(const std::string& text);

struct LabelOptions {
  std::size_t events_per_slice = 1000;
  double box_side = 8.0 / 64.0;
  int channels = 2;
  std::uint64_t max_label_gap_us = 10'000;
  std::string participant_id;
};

struct LabelingResult {
  std::vector<LabeledSample> samples;
  std::size_t dropped_gap = 0;
  std::size_t dropped_outside = 0;
};

/// Pairs each slice with the ground-truth center nearest its last event and
/// maps it into normalized 64x64 crop coordinates.
LabelingResult label_frames(const StreamHeader& header, std::span<const Event> events,
                            const GroundTruth& truth, const LabelOptions& options);

// Sensor pixel coordinates -> normalized crop coordinates.
void sensor_to_normalized(const StreamHeader& header, double x, double y, double& u, double& v);

struct DatasetSpec {
  int participants = 6;
  int sequences_per_participant = 1;
  std::uint64_t duration_us = 5'000'000;
  std::uint64_t seed = 0;
};

// Scene for one participant/sequence: geometry, contrast and motion vary per
// participant; motion phases and noise vary per sequence.
SceneConfig participant_scene(const DatasetSpec& spec, int participant, int sequence);

std::string participant_name(int participant);

struct ManifestEntry {
  std::string sequence;
  std::string participant_id;
  std::string events_path;
  std::string labels_path;
};

std::string manifest_csv(std::span<const ManifestEntry> entries);
// Relative paths are resolved against base_dir.
std::vector<ManifestEntry> read_manifest(const std::string& path);

/// Writes every sequence (EVT1 + labels CSV) and manifest.csv into out_dir.
std::vector<ManifestEntry> write_dataset(const DatasetSpec& spec, const std::string& out_dir);

/// Loads and labels every sequence listed in a manifest.
std::vector<LabeledSample> load_labeled(const std::vector<ManifestEntry>& entries,
                                        const LabelOptions& options, std::size_t* dropped = nullptr);

/// In-memory equivalent of write_dataset + load_labeled.
std::vector<LabeledSample> synthesize_labeled(const DatasetSpec& spec, const LabelOptions& options);

}  // namespace evtrack
