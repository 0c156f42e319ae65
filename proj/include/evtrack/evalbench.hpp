#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "evtrack/event_io.hpp"
#include "evtrack/predictor.hpp"
#include "evtrack/quant.hpp"
#include "evtrack/train.hpp"

namespace evtrack {

// Euclidean distance between box centers in grid pixels.
double centroid_error(const BBox& pred, const BBox& truth, int grid = kFrameSize);

/// Linear interpolation between order statistics; `sorted` must be ascending.
double percentile(std::span<const double> sorted, double p);

struct ErrorSummary {
  std::vector<double> errors;  // per sample, input order
  double mean = 0;
  double median = 0;
  double p25 = 0;
  double p75 = 0;
  double iqr = 0;
  double min = 0;
  double max = 0;
};

ErrorSummary summarize(std::span<const double> errors);

std::string errors_csv(const ErrorSummary& s);
// Fixed-width bins from 0 up to the largest error.
std::string histogram_csv(const ErrorSummary& s, double bin_width = 1.0);

std::vector<double> evaluate_errors(const Predictor& predictor, std::span<const LabeledSample> samples);

// (float - reference) / reference, or 0 when both are 0.
double relative_gap(double value, double reference);

struct Fold {
  int index = 0;
  std::vector<std::string> held_out;
};

/// Sorted participant ids paired consecutively; an odd one out joins the last fold.
std::vector<Fold> make_folds(std::vector<std::string> participant_ids);

// True if no training sample belongs to a held-out participant.
bool audit_split(std::span<const LabeledSample> train, const Fold& fold);

// `count` frames spread evenly over the samples.
std::vector<EventFrame> calibration_subset(std::span<const LabeledSample> samples, std::size_t count);

struct CvConfig {
  TrainConfig train;
  std::uint64_t model_seed = 0;
  bool quantize = true;
  QuantOptions quant;
  std::size_t calibration_frames = 128;
  std::function<void(const std::string&)> log;
};

struct FoldResult {
  Fold fold;
  std::size_t train_samples = 0;
  ErrorSummary float_errors;
  ErrorSummary int8_errors;  // empty when quantization is off
};

struct CvResult {
  std::vector<FoldResult> folds;
  ErrorSummary pooled_float;
  ErrorSummary pooled_int8;
  double mean_of_fold_means_float = 0;
  double mean_of_fold_means_int8 = 0;
};

/// Leave-two-participants-out: for each fold, trains on everyone else and
/// evaluates the held-out pair with the float model and its INT8 version.
CvResult cross_validate(std::span<const LabeledSample> samples, const CvConfig& cfg);

// "fold,mean,median,iqr" with one row per fold and a final "pooled" row.
std::string cv_csv(const CvResult& result, bool int8);

struct StageTiming {
  std::string stage;
  std::size_t repetitions = 0;
  double median_us = 0;
  double p95_us = 0;
  std::uint64_t macs = 0;
  double macs_per_second = 0;
  // On-device reference figures; not measurable on the host.
  double device_us = 0;
  double device_uj = 0;
};

struct BenchInputs {
  std::span<const Event> events;  // at least one slice worth
  StreamHeader header;
  std::size_t events_per_slice = 1500;
  const Model* float_model = nullptr;
  const QuantizedModel* int8_model = nullptr;
  std::size_t repetitions = 30;
};

/// Host wall-time for preprocessing, model loading, float and INT8 forward.
std::vector<StageTiming> bench(const BenchInputs& inputs);

std::string bench_csv(std::span<const StageTiming> stages);

struct EnergyModel {
  double e_active_j = 259e-6;
  double rate_hz = 120;
  double idle_power_w = 2e-3;
  double idle_fraction = 0.954;
  double capacity_j = 0;
};

double battery_capacity_j(double capacity_mah, double voltage);
double average_power_w(const EnergyModel& m);
double battery_life_hours(const EnergyModel& m);

EnergyModel smart_glasses_energy();  // 150 mAh at 3.7 V
EnergyModel headset_energy();        // 4000 mAh at 3.7 V

// Keys: e_active_uj, rate_hz, idle_mw, idle_fraction, capacity_mah, voltage.
EnergyModel energy_from_config(const std::map<std::string, std::string>& kv, EnergyModel base = smart_glasses_energy());

}  // namespace evtrack
