#include "evtrack/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "evtrack/container.hpp"
#include "evtrack/error.hpp"
#include "evtrack/framer.hpp"

namespace evtrack {

double centroid_error(const BBox& pred, const BBox& truth, int grid) {
  return grid * std::hypot(pred.cx - truth.cx, pred.cy - truth.cy);
}

double percentile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error(ErrorCode::EmptyInput, "percentile of an empty set");
  const double k = p * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(k));
  if (i + 1 >= sorted.size()) return sorted.back();
  const double f = k - static_cast<double>(i);
  return sorted[i] + f * (sorted[i + 1] - sorted[i]);
}

ErrorSummary summarize(std::span<const double> errors) {
  if (errors.empty()) throw Error(ErrorCode::EmptyInput, "no errors to summarize");
  ErrorSummary s;
  s.errors.assign(errors.begin(), errors.end());
  std::vector<double> sorted = s.errors;
  std::sort(sorted.begin(), sorted.end());
  s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  s.median = percentile(sorted, 0.5);
  s.p25 = percentile(sorted, 0.25);
  s.p75 = percentile(sorted, 0.75);
  s.iqr = s.p75 - s.p25;
  s.min = sorted.front();
  s.max = sorted.back();
  return s;
}

std::string errors_csv(const ErrorSummary& s) {
  std::ostringstream out;
  out << "sample,error_px\n";
  for (std::size_t i = 0; i < s.errors.size(); ++i) out << i << ',' << format_double(s.errors[i]) << '\n';
  return out.str();
}

std::string histogram_csv(const ErrorSummary& s, double bin_width) {
  if (!(bin_width > 0)) throw Error(ErrorCode::InvalidArgument, "bin width must be positive");
  const auto bins = static_cast<std::size_t>(std::floor(s.max / bin_width)) + 1;
  std::vector<std::size_t> counts(bins, 0);
  for (double e : s.errors) ++counts[std::min(bins - 1, static_cast<std::size_t>(std::floor(e / bin_width)))];
  std::ostringstream out;
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < bins; ++b)
    out << format_double(b * bin_width) << ',' << format_double((b + 1) * bin_width) << ',' << counts[b] << '\n';
  return out.str();
}

std::vector<double> evaluate_errors(const Predictor& predictor, std::span<const LabeledSample> samples) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto o = predictor(s.frame);
    out.push_back(centroid_error({o[0], o[1], o[2], o[3]}, s.target));
  }
  return out;
}

double relative_gap(double value, double reference) {
  if (reference == 0) return value == 0 ? 0 : std::numeric_limits<double>::infinity();
  return (value - reference) / reference;
}

std::vector<Fold> make_folds(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 4) throw Error(ErrorCode::InvalidArgument, "cross-validation needs at least 4 participants");
  std::vector<Fold> folds;
  for (std::size_t i = 0; i + 1 < ids.size(); i += 2)
    folds.push_back({static_cast<int>(folds.size()), {ids[i], ids[i + 1]}});
  if (ids.size() % 2 == 1) folds.back().held_out.push_back(ids.back());
  return folds;
}

bool audit_split(std::span<const LabeledSample> train, const Fold& fold) {
  const std::set<std::string> held(fold.held_out.begin(), fold.held_out.end());
  return std::none_of(train.begin(), train.end(), [&](const LabeledSample& s) { return held.count(s.participant_id); });
}

std::vector<EventFrame> calibration_subset(std::span<const LabeledSample> samples, std::size_t count) {
  if (samples.empty()) throw Error(ErrorCode::EmptyInput, "no samples to calibrate on");
  count = std::min(count, samples.size());
  std::vector<EventFrame> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(samples[i * samples.size() / count].frame);
  return out;
}

CvResult cross_validate(std::span<const LabeledSample> samples, const CvConfig& cfg) {
  if (samples.empty()) throw Error(ErrorCode::EmptyInput, "no labeled samples");
  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.participant_id);
  const std::vector<Fold> folds = make_folds(ids);
  const int channels = samples.front().frame.channels;

  CvResult result;
  std::vector<double> pooled_f, pooled_q;
  for (const Fold& fold : folds) {
    const std::set<std::string> held(fold.held_out.begin(), fold.held_out.end());
    std::vector<LabeledSample> train_set, test_set;
    for (const auto& s : samples) (held.count(s.participant_id) ? test_set : train_set).push_back(s);
    if (!audit_split(train_set, fold)) throw Error(ErrorCode::StructureMismatch, "held-out participant leaked into training");
    if (train_set.empty() || test_set.empty())
      throw Error(ErrorCode::EmptyInput, "fold " + std::to_string(fold.index) + " has an empty split");
    if (cfg.log) {
      std::string who;
      for (const auto& id : fold.held_out) who += (who.empty() ? "" : ",") + id;
      cfg.log("fold " + std::to_string(fold.index) + ": held out " + who + ", training on " +
              std::to_string(train_set.size()) + " samples");
    }

    TrainResult trained = train(build_default_model(channels, cfg.model_seed), train_set, cfg.train);
    FoldResult fr;
    fr.fold = fold;
    fr.train_samples = train_set.size();
    fr.float_errors = summarize(evaluate_errors(Predictor(trained.model), test_set));
    pooled_f.insert(pooled_f.end(), fr.float_errors.errors.begin(), fr.float_errors.errors.end());
    if (cfg.quantize) {
      const Model folded = fold_batchnorm(trained.model);
      const auto calib = calibrate(folded, calibration_subset(train_set, cfg.calibration_frames), cfg.quant);
      fr.int8_errors = summarize(evaluate_errors(Predictor(quantize_model(folded, calib, cfg.quant)), test_set));
      pooled_q.insert(pooled_q.end(), fr.int8_errors.errors.begin(), fr.int8_errors.errors.end());
    }
    result.folds.push_back(std::move(fr));
  }
  result.pooled_float = summarize(pooled_f);
  for (const auto& f : result.folds) result.mean_of_fold_means_float += f.float_errors.mean / result.folds.size();
  if (cfg.quantize) {
    result.pooled_int8 = summarize(pooled_q);
    for (const auto& f : result.folds) result.mean_of_fold_means_int8 += f.int8_errors.mean / result.folds.size();
  }
  return result;
}

std::string cv_csv(const CvResult& result, bool int8) {
  std::ostringstream out;
  out << "fold,mean,median,iqr\n";
  auto row = [&](const std::string& name, const ErrorSummary& s) {
    out << name << ',' << format_double(s.mean) << ',' << format_double(s.median) << ',' << format_double(s.iqr) << '\n';
  };
  for (const auto& f : result.folds) row(std::to_string(f.fold.index), int8 ? f.int8_errors : f.float_errors);
  row("pooled", int8 ? result.pooled_int8 : result.pooled_float);
  return out.str();
}

namespace {

template <typename F>
StageTiming time_stage(const std::string& name, std::size_t reps, F&& fn) {
  using clock = std::chrono::steady_clock;
  fn();  // warm-up
  std::vector<double> us;
  us.reserve(reps);
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = clock::now();
    fn();
    us.push_back(std::chrono::duration<double, std::micro>(clock::now() - t0).count());
  }
  std::sort(us.begin(), us.end());
  StageTiming t;
  t.stage = name;
  t.repetitions = reps;
  t.median_us = percentile(us, 0.5);
  t.p95_us = percentile(us, 0.95);
  return t;
}

// Keeps results observable so the timed work is not optimized away.
volatile float g_sink = 0;

}  // namespace

std::vector<StageTiming> bench(const BenchInputs& in) {
  if (in.repetitions < 30) throw Error(ErrorCode::InvalidArgument, "bench needs at least 30 repetitions");
  if (in.events.size() < in.events_per_slice || in.events_per_slice == 0)
    throw Error(ErrorCode::InvalidArgument, "bench needs at least one full slice of events");
  if (!in.float_model || !in.int8_model) throw Error(ErrorCode::InvalidArgument, "bench needs both models");
  const auto slice = in.events.first(in.events_per_slice);
  const int channels = in.float_model->in_channels;
  std::vector<StageTiming> out;

  StageTiming pre = time_stage("preprocessing", in.repetitions, [&] {
    g_sink = make_frame(slice, in.header, channels, 0).data[0];
  });
  pre.device_us = 119;
  pre.device_uj = 69;
  out.push_back(pre);

  const std::vector<std::uint8_t> qbytes = serialize_qmodel(*in.int8_model);
  StageTiming load = time_stage("loading", in.repetitions, [&] {
    g_sink = static_cast<float>(deserialize_qmodel(qbytes).ops.size());
  });
  load.device_us = 62;
  load.device_uj = 35;
  out.push_back(load);

  const EventFrame frame = make_frame(slice, in.header, channels, 0);
  const std::uint64_t macs = count_macs(*in.float_model);
  StageTiming nn_f = time_stage("nn_float", in.repetitions, [&] { g_sink = predict(*in.float_model, frame)[0]; });
  nn_f.macs = macs;
  nn_f.macs_per_second = macs / (nn_f.median_us * 1e-6);
  nn_f.device_us = 204;
  nn_f.device_uj = 155;
  out.push_back(nn_f);

  MacCounter counter;
  quantized_forward(*in.int8_model, frame, nullptr, &counter);
  StageTiming nn_q = time_stage("nn_int8", in.repetitions, [&] { g_sink = quantized_forward(*in.int8_model, frame)[0]; });
  nn_q.macs = counter.macs;
  nn_q.macs_per_second = counter.macs / (nn_q.median_us * 1e-6);
  nn_q.device_us = 204;
  nn_q.device_uj = 155;
  out.push_back(nn_q);
  return out;
}

std::string bench_csv(std::span<const StageTiming> stages) {
  std::ostringstream out;
  out << "stage,repetitions,host_median_us,host_p95_us,macs,host_macs_per_s,device_ref_us,device_ref_uj\n";
  for (const auto& s : stages)
    out << s.stage << ',' << s.repetitions << ',' << format_double(s.median_us) << ',' << format_double(s.p95_us)
        << ',' << s.macs << ',' << format_double(s.macs_per_second) << ',' << format_double(s.device_us) << ','
        << format_double(s.device_uj) << '\n';
  return out.str();
}

double battery_capacity_j(double capacity_mah, double voltage) { return capacity_mah * 3.6 * voltage; }

double average_power_w(const EnergyModel& m) {
  return m.rate_hz * m.e_active_j + m.idle_power_w * m.idle_fraction;
}

double battery_life_hours(const EnergyModel& m) {
  for (double v : {m.e_active_j, m.rate_hz, m.idle_power_w, m.idle_fraction, m.capacity_j})
    if (!(v >= 0) || !std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "energy model fields must be non-negative");
  const double p = average_power_w(m);
  if (p <= 0) throw Error(ErrorCode::NonFinite, "average power is zero");
  return m.capacity_j / p / 3600.0;
}

EnergyModel smart_glasses_energy() {
  EnergyModel m;
  m.capacity_j = battery_capacity_j(150, 3.7);
  return m;
}

EnergyModel headset_energy() {
  EnergyModel m;
  m.capacity_j = battery_capacity_j(4000, 3.7);
  return m;
}

EnergyModel energy_from_config(const std::map<std::string, std::string>& kv, EnergyModel m) {
  double mah = -1, volts = 3.7;
  for (const auto& [key, value] : kv) {
    const double v = parse_double(value);
    if (key == "e_active_uj") m.e_active_j = v * 1e-6;
    else if (key == "rate_hz") m.rate_hz = v;
    else if (key == "idle_mw") m.idle_power_w = v * 1e-3;
    else if (key == "idle_fraction") m.idle_fraction = v;
    else if (key == "capacity_mah") mah = v;
    else if (key == "voltage") volts = v;
    else throw Error(ErrorCode::InvalidArgument, "unknown energy key '" + key + "'");
  }
  if (mah >= 0) m.capacity_j = battery_capacity_j(mah, volts);
  else if (kv.count("voltage")) throw Error(ErrorCode::InvalidArgument, "voltage needs capacity_mah");
  return m;
}

}  // namespace evtrack
