#include "evtrack/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <csignal>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "evtrack/bytes.hpp"
#include "evtrack/container.hpp"
#include "evtrack/evalbench.hpp"
#include "evtrack/event_io.hpp"
#include "evtrack/framer.hpp"
#include "evtrack/predictor.hpp"
#include "evtrack/quant.hpp"
#include "evtrack/slicer.hpp"
#include "evtrack/synthgen.hpp"
#include "evtrack/train.hpp"
#include "evtrack/wire.hpp"

namespace evtrack {

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
      return kExitUsage;
    case ErrorCode::NonFinite:
      return kExitNumeric;
    case ErrorCode::Io:
      return kExitIo;
    default:
      return kExitFormat;
  }
}

std::map<std::string, std::string> parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::ParseError, "config line " + std::to_string(lineno) + " is not key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(ErrorCode::ParseError, "config line " + std::to_string(lineno) + " has no key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace {

void write_output(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
  } else {
    write_text_file(path, text);
  }
}

std::string fmt(double v) { return format_double(v); }

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "yes" || v == "on"; }

void print_summary(std::ostream& out, const std::string& label, const ErrorSummary& s) {
  out << label << ": n=" << s.errors.size() << " mean=" << fixed(s.mean, 4) << " median=" << fixed(s.median, 4)
      << " iqr=" << fixed(s.iqr, 4) << " px\n";
}

std::vector<LabeledSample> load_dataset(const std::string& manifest, std::size_t events_per_slice, int channels,
                                        const std::vector<std::string>& exclude,
                                        const std::vector<std::string>& only = {}) {
  std::vector<ManifestEntry> entries;
  for (const auto& e : read_manifest(manifest)) {
    if (std::find(exclude.begin(), exclude.end(), e.participant_id) != exclude.end()) continue;
    if (!only.empty() && std::find(only.begin(), only.end(), e.participant_id) == only.end()) continue;
    entries.push_back(e);
  }
  if (entries.empty()) throw Error(ErrorCode::EmptyInput, "no sequences selected from " + manifest);
  LabelOptions lo;
  lo.events_per_slice = events_per_slice;
  lo.channels = channels;
  auto samples = load_labeled(entries, lo);
  if (samples.empty()) throw Error(ErrorCode::EmptyInput, "no labeled slices in " + manifest);
  return samples;
}

struct Options {
  // global
  std::uint64_t seed = 0;
  int threads = 1;
  std::string config;
  // shared
  std::string events, manifest, model, out;
  std::size_t events_per_slice = kDefaultEventsPerSlice;
  int channels = 2;
  bool tolerate_unordered = false;
  int width = 640, height = 480;
  std::vector<std::string> holdout, only;
  // synth
  int participants = 6, sequences = 1;
  double duration_s = 5;
  // stats / slice
  double window_ms = 100;
  std::string durations;
  // train
  int epochs = 1, batch = 32, step = 500;
  double lr = 1e-3, gamma = 0.1, iou_weight = 7.5, dist_weight = 1.0;
  std::string curve, optimizer_out, init_model;
  // calibrate / quantize
  std::size_t calibration_frames = 128;
  bool reduce_range = false;
  std::string calibration;
  // infer / eval
  std::string labels, errors, histogram, reference;
  // cv
  bool no_quantize = false;
  std::string out_dir;
  // bench
  std::string qmodel;
  std::size_t reps = 30;
  double e_active_uj = 259, rate_hz = 120, idle_mw = 2, idle_fraction = 0.954, capacity_mah = 150, voltage = 3.7;
  // relay
  std::string listen;
};

TrainConfig train_config(const Options& o) {
  TrainConfig c;
  c.lr = o.lr;
  c.batch_size = o.batch;
  c.epochs = o.epochs;
  c.step_size_iters = o.step;
  c.gamma = o.gamma;
  c.iou_weight = o.iou_weight;
  c.dist_weight = o.dist_weight;
  c.seed = o.seed;
  return c;
}

StreamHeader sensor(const Options& o) {
  StreamHeader h;
  h.sensor_width = static_cast<std::uint16_t>(o.width);
  h.sensor_height = static_cast<std::uint16_t>(o.height);
  return h;
}

EventStream load_events(const Options& o) {
  ReadOptions ro;
  ro.tolerate_unordered = o.tolerate_unordered;
  ro.csv_width = static_cast<std::uint16_t>(o.width);
  ro.csv_height = static_cast<std::uint16_t>(o.height);
  return read_events_file(o.events, ro);
}

int run_synth(const Options& o, std::ostream& out) {
  DatasetSpec spec;
  spec.participants = o.participants;
  spec.sequences_per_participant = o.sequences;
  if (!(o.duration_s > 0)) throw Error(ErrorCode::InvalidArgument, "--duration-s must be positive");
  spec.duration_us = static_cast<std::uint64_t>(std::llround(o.duration_s * 1e6));
  spec.seed = o.seed;
  const auto entries = write_dataset(spec, o.out);
  out << "wrote " << entries.size() << " sequences to " << o.out << '\n';
  return kExitOk;
}

int run_stats(const Options& o, std::ostream& out) {
  const EventStream s = load_events(o);
  if (!(o.window_ms > 0)) throw Error(ErrorCode::InvalidArgument, "--window-ms must be positive");
  const auto stats = stream_stats(s.events, static_cast<std::uint64_t>(std::llround(o.window_ms * 1000)));
  write_output(o.out, stats_csv(stats), out);
  return kExitOk;
}

int run_slice(const Options& o, std::ostream& out) {
  const EventStream s = load_events(o);
  const auto slices = slice_by_count(s.events, o.events_per_slice);
  if (!o.durations.empty()) write_output(o.durations, durations_csv(slice_durations(slices)), out);
  if (!o.out.empty()) {
    std::vector<EventFrame> frames;
    frames.reserve(slices.size());
    for (const auto& sl : slices) frames.push_back(make_frame(sl.events, s.header, o.channels, sl.slice_index));
    write_file(o.out, encode_frames(frames));
  }
  if (o.out.empty() && o.durations.empty()) write_output("-", durations_csv(slice_durations(slices)), out);
  return kExitOk;
}

int run_train(const Options& o, std::ostream& out) {
  const auto data = load_dataset(o.manifest, o.events_per_slice, o.channels, o.holdout);
  Model model = o.init_model.empty() ? build_default_model(o.channels, o.seed) : load_model(o.init_model);
  const TrainConfig cfg = train_config(o);
  out << "training on " << data.size() << " samples, " << cfg.epochs << " epochs\n";
  TrainResult r = train(std::move(model), data, cfg);
  save_model(r.model, o.out);
  if (!o.curve.empty()) write_output(o.curve, loss_curve_csv(r.curve), out);
  if (!o.optimizer_out.empty()) save_optimizer_state(r.optimizer, o.optimizer_out);
  if (!r.curve.empty())
    out << "final loss " << fixed(r.curve.back().loss, 6) << " after " << r.curve.size() << " iterations\n";
  return kExitOk;
}

int run_calibrate(const Options& o, std::ostream& out) {
  const Model folded = fold_batchnorm(load_model(o.model));
  const auto data = load_dataset(o.manifest, o.events_per_slice, folded.in_channels, o.holdout);
  QuantOptions qo;
  qo.reduce_range = o.reduce_range;
  const auto bounds = calibrate(folded, calibration_subset(data, o.calibration_frames), qo);
  write_output(o.out, calibration_csv(bounds), out);
  return kExitOk;
}

int run_quantize(const Options& o, std::ostream& out) {
  const Model folded = fold_batchnorm(load_model(o.model));
  QuantOptions qo;
  qo.reduce_range = o.reduce_range;
  const std::vector<std::uint8_t> text = read_file(o.calibration);
  const auto bounds = parse_calibration_csv(folded, std::string(text.begin(), text.end()), qo);
  const QuantizedModel q = quantize_model(folded, bounds, qo);
  save_qmodel(q, o.out);
  out << "quantized " << q.ops.size() << " ops to " << o.out << '\n';
  return kExitOk;
}

int run_infer(const Options& o, std::ostream& out) {
  const Predictor predictor = Predictor::load(o.model);
  const EventStream s = load_events(o);
  std::map<std::size_t, BBox> truth;
  if (!o.labels.empty()) {
    const auto bytes = read_file(o.labels);
    LabelOptions lo;
    lo.events_per_slice = o.events_per_slice;
    lo.channels = predictor.channels();
    for (const auto& sample : label_frames(s.header, s.events, parse_ground_truth_csv({bytes.begin(), bytes.end()}), lo).samples)
      truth[sample.frame.slice_index] = sample.target;
  }
  RelayOptions ro;
  ro.events_per_slice = o.events_per_slice;
  ro.header = s.header;
  std::ostringstream csv;
  csv << "frame_id,cx,cy,w,h,err_px\n";
  for (const Prediction& p : offline_predictions(s.events, predictor, ro)) {
    csv << p.frame_id;
    for (float v : p.box) csv << ',' << fmt(v);
    csv << ',';
    if (const auto it = truth.find(p.frame_id); it != truth.end())
      csv << fmt(centroid_error({p.box[0], p.box[1], p.box[2], p.box[3]}, it->second));
    csv << '\n';
  }
  write_output(o.out, csv.str(), out);
  return kExitOk;
}

int run_eval(const Options& o, std::ostream& out) {
  const Predictor predictor = Predictor::load(o.model);
  const auto data = load_dataset(o.manifest, o.events_per_slice, predictor.channels(), o.holdout, o.only);
  const ErrorSummary s = summarize(evaluate_errors(predictor, data));
  print_summary(out, predictor.quantized() ? "int8" : "float", s);
  if (!o.errors.empty()) write_output(o.errors, errors_csv(s), out);
  if (!o.histogram.empty()) write_output(o.histogram, histogram_csv(s), out);
  if (!o.reference.empty()) {
    const Predictor ref = Predictor::load(o.reference);
    const ErrorSummary r = summarize(evaluate_errors(ref, data));
    print_summary(out, std::string("reference ") + (ref.quantized() ? "int8" : "float"), r);
    out << "relative gap: mean " << fixed(100 * relative_gap(s.mean, r.mean), 3) << "% median "
        << fixed(100 * relative_gap(s.median, r.median), 3) << "% iqr " << fixed(100 * relative_gap(s.iqr, r.iqr), 3)
        << "%\n";
  }
  return kExitOk;
}

int run_cv(const Options& o, std::ostream& out) {
  const auto data = load_dataset(o.manifest, o.events_per_slice, o.channels, o.holdout);
  CvConfig cfg;
  cfg.train = train_config(o);
  cfg.model_seed = o.seed;
  cfg.quantize = !o.no_quantize;
  cfg.quant.reduce_range = o.reduce_range;
  cfg.calibration_frames = o.calibration_frames;
  cfg.log = [&](const std::string& msg) { out << msg << std::endl; };
  const CvResult r = cross_validate(data, cfg);
  for (const auto& f : r.folds) {
    print_summary(out, "fold " + std::to_string(f.fold.index) + " float", f.float_errors);
    if (cfg.quantize) print_summary(out, "fold " + std::to_string(f.fold.index) + " int8", f.int8_errors);
  }
  print_summary(out, "pooled float", r.pooled_float);
  out << "mean of fold means float: " << fixed(r.mean_of_fold_means_float, 4) << " px\n";
  if (cfg.quantize) {
    print_summary(out, "pooled int8", r.pooled_int8);
    out << "mean of fold means int8: " << fixed(r.mean_of_fold_means_int8, 4) << " px\n";
  }
  if (!o.out_dir.empty()) {
    std::filesystem::create_directories(o.out_dir);
    const std::filesystem::path d(o.out_dir);
    write_text_file((d / "cv_float.csv").string(), cv_csv(r, false));
    write_text_file((d / "errors_float.csv").string(), errors_csv(r.pooled_float));
    write_text_file((d / "histogram_float.csv").string(), histogram_csv(r.pooled_float));
    if (cfg.quantize) {
      write_text_file((d / "cv_int8.csv").string(), cv_csv(r, true));
      write_text_file((d / "errors_int8.csv").string(), errors_csv(r.pooled_int8));
      write_text_file((d / "histogram_int8.csv").string(), histogram_csv(r.pooled_int8));
    }
  }
  return kExitOk;
}

int run_bench(const Options& o, std::ostream& out) {
  if (!o.model.empty() || !o.qmodel.empty() || !o.events.empty()) {
    if (o.model.empty() || o.qmodel.empty() || o.events.empty())
      throw Error(ErrorCode::InvalidArgument, "timing needs --model, --qmodel and --events together");
    const Model fm = load_model(o.model);
    const QuantizedModel qm = load_qmodel(o.qmodel);
    const EventStream s = load_events(o);
    BenchInputs in;
    in.events = s.events;
    in.header = s.header;
    in.events_per_slice = o.events_per_slice == kDefaultEventsPerSlice ? kBenchEventsPerSlice : o.events_per_slice;
    in.float_model = &fm;
    in.int8_model = &qm;
    in.repetitions = o.reps;
    const auto stages = bench(in);
    out << "host wall-time (this machine; device_ref columns are on-device reference figures, not measured here)\n";
    out << "stage          median_us   p95_us      MAC/s        device_ref_us device_ref_uj\n";
    for (const auto& st : stages) {
      std::ostringstream line;
      line << st.stage << std::string(15 - std::min<std::size_t>(14, st.stage.size()), ' ') << fixed(st.median_us, 1)
           << "\t" << fixed(st.p95_us, 1) << "\t" << (st.macs ? fmt(std::round(st.macs_per_second)) : "-") << "\t"
           << fmt(st.device_us) << "\t" << fmt(st.device_uj);
      out << line.str() << '\n';
    }
    out << "MACs per inference: " << count_macs(fm) << " (reference: 10.2M); params: " << count_params(fm)
        << " (reference: 59.57k); device reference throughput 52 MAC/cycle\n";
    if (!o.out.empty()) write_output(o.out, bench_csv(stages), out);
  }
  EnergyModel m;
  m.e_active_j = o.e_active_uj * 1e-6;
  m.rate_hz = o.rate_hz;
  m.idle_power_w = o.idle_mw * 1e-3;
  m.idle_fraction = o.idle_fraction;
  m.capacity_j = battery_capacity_j(o.capacity_mah, o.voltage);
  const double hours = battery_life_hours(m);
  out << "energy model: " << fmt(o.e_active_uj) << " uJ x " << fmt(o.rate_hz) << " Hz + " << fmt(o.idle_mw)
      << " mW x " << fmt(o.idle_fraction) << " idle, " << fmt(o.capacity_mah) << " mAh at " << fmt(o.voltage)
      << " V -> " << fixed(hours, 2) << " h (" << fixed(hours / 24, 2) << " days)\n";
  return kExitOk;
}

int run_relay(const Options& o, std::ostream& err) {
  const Predictor predictor = Predictor::load(o.model);
  RelayOptions ro;
  ro.events_per_slice = o.events_per_slice;
  ro.header = sensor(o);
  std::signal(SIGPIPE, SIG_IGN);
  auto stream = open_endpoint(o.listen);
  const RelayStats st = relay_serve(*stream, predictor, ro);
  err << "relay: " << st.events << " events, " << st.predictions << " predictions, " << st.rejected_events
      << " rejected, crc_mismatch=" << st.decoder.crc_mismatch << " unknown_kind=" << st.decoder.unknown_kind
      << " length_overrun=" << st.decoder.length_overrun << '\n';
  return kExitOk;
}

std::string option_name(const std::string& key) {
  std::string n = key;
  std::replace(n.begin(), n.end(), '_', '-');
  return "--" + n;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Event-camera pupil tracking: synthesis, training, INT8 quantization, evaluation, relay.", "evtrack"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", o.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", o.threads, "Worker threads for the kernels")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--config", o.config, "key=value file merged under the command-line flags");

  auto events_opt = [&](CLI::App* s, bool required) {
    auto* opt = s->add_option("--events", o.events, "Event stream (.evt1, or .csv with --width/--height)");
    if (required) opt->required();
    s->add_flag("--tolerate-unordered", o.tolerate_unordered, "Sort out-of-order input instead of rejecting it");
    s->add_option("--width", o.width, "Sensor width for CSV input")->capture_default_str()->check(CLI::Range(1, 32767));
    s->add_option("--height", o.height, "Sensor height for CSV input")->capture_default_str()->check(CLI::Range(1, 32767));
  };
  auto slicing_opt = [&](CLI::App* s) {
    s->add_option("--events-per-slice", o.events_per_slice, "Events per slice")->capture_default_str()->check(CLI::PositiveNumber);
  };
  auto channels_opt = [&](CLI::App* s) {
    s->add_option("--channels", o.channels, "Frame channels (2 = OFF/ON, 1 = merged)")->capture_default_str()->check(CLI::IsMember({1, 2}));
  };
  auto train_opts = [&](CLI::App* s) {
    s->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--batch", o.batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--lr", o.lr, "Initial learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--step", o.step, "Iterations per learning-rate step")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--gamma", o.gamma, "Learning-rate decay per step")->capture_default_str();
    s->add_option("--iou-weight", o.iou_weight, "Weight of the 1 - IoU term")->capture_default_str();
    s->add_option("--dist-weight", o.dist_weight, "Weight of the center-distance term")->capture_default_str();
  };
  auto holdout_opt = [&](CLI::App* s) {
    s->add_option("--holdout", o.holdout, "Participant ids to leave out (comma separated)")
        ->delimiter(',')
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-participant dataset");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--participants", o.participants, "Participants")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--sequences", o.sequences, "Sequences per participant")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--duration-s", o.duration_s, "Seconds per sequence")->capture_default_str();

  auto* stats = app.add_subcommand("stats", "Event counts per time window (window_index,count)");
  events_opt(stats, true);
  stats->add_option("--window-ms", o.window_ms, "Window length")->capture_default_str();
  stats->add_option("--out", o.out, "Output CSV (default stdout)");

  auto* slice = app.add_subcommand("slice", "Slice a stream and dump frames and slice durations");
  events_opt(slice, true);
  slicing_opt(slice);
  channels_opt(slice);
  slice->add_option("--out", o.out, "Frame dump file");
  slice->add_option("--durations", o.durations, "Durations CSV (slice_index,duration_us)");

  auto* trn = app.add_subcommand("train", "Train the float model on a dataset manifest");
  trn->add_option("--manifest", o.manifest, "Dataset manifest.csv")->required();
  trn->add_option("--out", o.out, "Model output path")->required();
  slicing_opt(trn);
  channels_opt(trn);
  train_opts(trn);
  holdout_opt(trn);
  trn->add_option("--curve", o.curve, "Loss curve CSV (iter,lr,loss)");
  trn->add_option("--optimizer-out", o.optimizer_out, "Save the Adam state here");
  trn->add_option("--init", o.init_model, "Start from this float model instead of a fresh one");

  auto* cal = app.add_subcommand("calibrate", "MinMax-calibrate activation ranges of a float model");
  cal->add_option("--model", o.model, "Float model")->required();
  cal->add_option("--manifest", o.manifest, "Dataset manifest.csv")->required();
  cal->add_option("--out", o.out, "Calibration CSV (default stdout)");
  cal->add_option("--frames", o.calibration_frames, "Calibration frames")->capture_default_str()->check(CLI::PositiveNumber);
  cal->add_flag("--reduce-range", o.reduce_range, "Use the 7-bit range [-64, 63]");
  slicing_opt(cal);
  holdout_opt(cal);

  auto* quant = app.add_subcommand("quantize", "Build the INT8 model from a float model and calibration");
  quant->add_option("--model", o.model, "Float model")->required();
  quant->add_option("--calibration", o.calibration, "Calibration CSV")->required();
  quant->add_option("--out", o.out, "Quantized model output path")->required();
  quant->add_flag("--reduce-range", o.reduce_range, "Use the 7-bit range [-64, 63]");

  auto* infer = app.add_subcommand("infer", "Predict one box per slice (frame_id,cx,cy,w,h,err_px)");
  infer->add_option("--model", o.model, "Float or quantized model")->required();
  events_opt(infer, true);
  slicing_opt(infer);
  infer->add_option("--labels", o.labels, "Ground-truth CSV (t_us,cx_px,cy_px) to fill err_px");
  infer->add_option("--out", o.out, "Predictions CSV (default stdout)");

  auto* eval = app.add_subcommand("eval", "Centroid error of a model on a dataset");
  eval->add_option("--model", o.model, "Float or quantized model")->required();
  eval->add_option("--manifest", o.manifest, "Dataset manifest.csv")->required();
  slicing_opt(eval);
  holdout_opt(eval);
  eval->add_option("--only", o.only, "Evaluate only these participants (comma separated)")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  eval->add_option("--errors", o.errors, "Per-sample CSV (sample,error_px)");
  eval->add_option("--histogram", o.histogram, "Histogram CSV");
  eval->add_option("--reference", o.reference, "Second model to compare against");

  auto* cv = app.add_subcommand("cv", "Leave-two-participants-out cross-validation, float and INT8");
  cv->add_option("--manifest", o.manifest, "Dataset manifest.csv")->required();
  slicing_opt(cv);
  channels_opt(cv);
  train_opts(cv);
  holdout_opt(cv);
  cv->add_flag("--no-quantize", o.no_quantize, "Skip the INT8 evaluation");
  cv->add_flag("--reduce-range", o.reduce_range, "Use the 7-bit range [-64, 63]");
  cv->add_option("--calibration-frames", o.calibration_frames, "Calibration frames per fold")->capture_default_str();
  cv->add_option("--out-dir", o.out_dir, "Directory for fold and error CSVs");

  auto* bnch = app.add_subcommand("bench", "Host wall-time per stage and battery-life estimate");
  bnch->add_option("--model", o.model, "Float model");
  bnch->add_option("--qmodel", o.qmodel, "Quantized model");
  events_opt(bnch, false);
  bnch->add_option("--events-per-slice", o.events_per_slice, "Events per preprocessing slice (default 1500)")
      ->check(CLI::PositiveNumber);
  bnch->add_option("--reps", o.reps, "Repetitions per stage")->capture_default_str()->check(CLI::Range(30, 1000000));
  bnch->add_option("--out", o.out, "Bench CSV");
  bnch->add_option("--e-active-uj", o.e_active_uj, "Energy per inference")->capture_default_str();
  bnch->add_option("--rate-hz", o.rate_hz, "Inference rate")->capture_default_str();
  bnch->add_option("--idle-mw", o.idle_mw, "Idle power")->capture_default_str();
  bnch->add_option("--idle-fraction", o.idle_fraction, "Fraction of each cycle spent idle")->capture_default_str();
  bnch->add_option("--capacity-mah", o.capacity_mah, "Battery capacity")->capture_default_str();
  bnch->add_option("--voltage", o.voltage, "Battery voltage")->capture_default_str();

  auto* relay = app.add_subcommand("relay", "Serve predictions for framed events over a byte stream");
  relay->add_option("--listen", o.listen, "'-' for stdin/stdout or tcp://host:port")->required();
  relay->add_option("--model", o.model, "Float or quantized model")->required();
  slicing_opt(relay);
  relay->add_option("--width", o.width, "Sensor width")->capture_default_str()->check(CLI::Range(1, 32767));
  relay->add_option("--height", o.height, "Sensor height")->capture_default_str()->check(CLI::Range(1, 32767));

  try {
    std::vector<std::string> argv = args;
    // Config values are injected ahead of the user's flags so the flags win.
    const auto cfg_it = std::find(args.begin(), args.end(), "--config");
    if (cfg_it != args.end() && cfg_it + 1 != args.end()) {
      const auto sub_it = std::find_if(args.begin(), args.end(), [&](const std::string& a) {
        return app.get_subcommand_no_throw(a) != nullptr;
      });
      if (sub_it != args.end()) {
        CLI::App* sub = app.get_subcommand(*sub_it);
        const auto bytes = read_file(*(cfg_it + 1));
        std::vector<std::string> injected;
        for (const auto& [key, value] : parse_config({bytes.begin(), bytes.end()})) {
          const std::string name = option_name(key);
          const CLI::Option* opt = sub->get_option_no_throw(name);
          if (!opt) opt = app.get_option_no_throw(name);
          if (!opt || name == "--config") throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "' for " + *sub_it);
          if (opt->get_expected_min() == 0) {
            if (truthy(value)) injected.push_back(name);
          } else {
            injected.push_back(name);
            injected.push_back(value);
          }
        }
        argv.clear();
        argv.push_back(*sub_it);
        argv.insert(argv.end(), injected.begin(), injected.end());
        for (auto it = args.begin(); it != args.end(); ++it)
          if (it != sub_it) argv.push_back(*it);
      }
    }
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const Error& e) {
    err << "evtrack: " << e.what() << '\n';
    return exit_code_for(e.code());
  }

  try {
    omp_set_num_threads(o.threads);
    if (app.got_subcommand(synth)) return run_synth(o, out);
    if (app.got_subcommand(stats)) return run_stats(o, out);
    if (app.got_subcommand(slice)) return run_slice(o, out);
    if (app.got_subcommand(trn)) return run_train(o, out);
    if (app.got_subcommand(cal)) return run_calibrate(o, out);
    if (app.got_subcommand(quant)) return run_quantize(o, out);
    if (app.got_subcommand(infer)) return run_infer(o, out);
    if (app.got_subcommand(eval)) return run_eval(o, out);
    if (app.got_subcommand(cv)) return run_cv(o, out);
    if (app.got_subcommand(bnch)) return run_bench(o, out);
    if (app.got_subcommand(relay)) return run_relay(o, err);
  } catch (const Error& e) {
    err << "evtrack: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "evtrack: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::bad_alloc&) {
    err << "evtrack: out of memory\n";
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace evtrack
