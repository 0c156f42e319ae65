#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "evtrack/evalbench.hpp"
#include "evtrack/predictor.hpp"
#include "evtrack/synthgen.hpp"
#include "test_util.hpp"

using namespace evtrack;

TEST(Evalbench, CentroidErrorExamples) {
  const BBox a{0.5, 0.5, 0.1, 0.1};
  EXPECT_DOUBLE_EQ(centroid_error(a, a), 0.0);
  EXPECT_NEAR(centroid_error(BBox{0.5 + 3.0 / 64, 0.5 + 4.0 / 64, 0.1, 0.1}, a), 5.0, 1e-12);
  EXPECT_NEAR(centroid_error(BBox{1, 0, 0, 0}, BBox{0, 0, 0.3, 0.3}), 64.0, 1e-12);
}

TEST(Evalbench, CentroidErrorIsAMetric) {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const BBox a{r.uniform(), r.uniform(), r.uniform(), r.uniform()};
    const BBox b{r.uniform(), r.uniform(), r.uniform(), r.uniform()};
    const BBox c{r.uniform(), r.uniform(), r.uniform(), r.uniform()};
    EXPECT_DOUBLE_EQ(centroid_error(a, b), centroid_error(b, a));
    EXPECT_LE(centroid_error(a, c), centroid_error(a, b) + centroid_error(b, c) + 1e-12);
  }
}

TEST(Evalbench, SummaryExamples) {
  const std::vector<double> same{5, 5, 5};
  const auto s = summarize(same);
  EXPECT_DOUBLE_EQ(s.mean, 5);
  EXPECT_DOUBLE_EQ(s.median, 5);
  EXPECT_DOUBLE_EQ(s.iqr, 0);

  const std::vector<double> four{4, 1, 3, 2};
  const auto t = summarize(four);
  EXPECT_DOUBLE_EQ(t.median, 2.5);
  EXPECT_DOUBLE_EQ(t.p25, 1.75);
  EXPECT_DOUBLE_EQ(t.p75, 3.25);
  EXPECT_DOUBLE_EQ(t.iqr, 1.5);
  EXPECT_EQ(t.errors, four);
  EXPECT_ERROR_CODE(summarize(std::vector<double>{}), ErrorCode::EmptyInput);
}

TEST(Evalbench, PercentilesBracket) {
  Rng r(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + r.below(50));
    for (auto& x : v) x = r.uniform(0, 10);
    const auto s = summarize(v);
    EXPECT_LE(s.min, s.p25);
    EXPECT_LE(s.p25, s.median);
    EXPECT_LE(s.median, s.p75);
    EXPECT_LE(s.p75, s.max);
    EXPECT_NEAR(s.iqr, s.p75 - s.p25, 1e-12);
  }
}

TEST(Evalbench, CsvOutputs) {
  const std::vector<double> v{0.5, 1.5, 1.7, 3.2};
  const auto s = summarize(v);
  EXPECT_EQ(errors_csv(s).rfind("sample,error_px\n0,", 0), 0u);
  const auto h = histogram_csv(s);
  EXPECT_EQ(h.rfind("bin_lo,bin_hi,count\n", 0), 0u);
  EXPECT_NE(h.find("1,2,2\n"), std::string::npos);
  EXPECT_NEAR(relative_gap(5.76, 5.73), 0.03 / 5.73, 1e-12);
  EXPECT_EQ(relative_gap(0, 0), 0.0);
}

TEST(Evalbench, FoldsPairSortedParticipants) {
  const auto folds = make_folds({"P05", "P02", "P01", "P06", "P04", "P03"});
  ASSERT_EQ(folds.size(), 3u);
  EXPECT_EQ(folds[0].held_out, (std::vector<std::string>{"P01", "P02"}));
  EXPECT_EQ(folds[1].held_out, (std::vector<std::string>{"P03", "P04"}));
  EXPECT_EQ(folds[2].held_out, (std::vector<std::string>{"P05", "P06"}));
  EXPECT_EQ(make_folds({"P01", "P02", "P03", "P04", "P05", "P06"})[1].held_out, folds[1].held_out);

  const auto odd = make_folds({"a", "b", "c", "d", "e"});
  ASSERT_EQ(odd.size(), 2u);
  EXPECT_EQ(odd[1].held_out.size(), 3u);
  EXPECT_THROW(make_folds({"a", "b", "c"}), Error);
}

TEST(Evalbench, FoldsPartitionParticipants) {
  for (int n = 4; n < 12; ++n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back(participant_name(i));
    std::multiset<std::string> seen;
    for (const auto& f : make_folds(ids)) seen.insert(f.held_out.begin(), f.held_out.end());
    EXPECT_EQ(seen, std::multiset<std::string>(ids.begin(), ids.end()));
  }
}

TEST(Evalbench, AuditCatchesLeak) {
  std::vector<LabeledSample> s(3);
  s[0].participant_id = "P01";
  s[1].participant_id = "P03";
  s[2].participant_id = "P04";
  Fold f{0, {"P01", "P02"}};
  EXPECT_FALSE(audit_split(s, f));
  EXPECT_TRUE(audit_split(std::span(s).subspan(1), f));
}

TEST(Evalbench, CalibrationSubsetIsEvenlySpread) {
  std::vector<LabeledSample> s(10);
  for (std::size_t i = 0; i < s.size(); ++i) s[i].frame.slice_index = i;
  const auto sub = calibration_subset(s, 5);
  ASSERT_EQ(sub.size(), 5u);
  EXPECT_EQ(sub[0].slice_index, 0u);
  EXPECT_EQ(sub[1].slice_index, 2u);
  EXPECT_EQ(sub[4].slice_index, 8u);
  EXPECT_EQ(calibration_subset(s, 50).size(), 10u);
}

TEST(Evalbench, BatteryLifeFigures) {
  EnergyModel m;
  m.capacity_j = 2000;
  EXPECT_NEAR(battery_life_hours(m), 2000.0 / (120 * 259e-6 + 2e-3 * 0.954) / 3600, 1e-9);
  EXPECT_NEAR(battery_life_hours(m), 16.8, 0.05);
  EXPECT_NEAR(battery_life_hours(smart_glasses_energy()), 16.82, 0.01);
  EXPECT_NEAR(battery_life_hours(headset_energy()), 448.6, 0.1);
  EXPECT_GT(battery_life_hours(headset_energy()) / 24, 14);

  EnergyModel idle;
  idle.rate_hz = 0;
  idle.idle_fraction = 1;
  idle.capacity_j = 2000;
  EXPECT_NEAR(battery_life_hours(idle), 277.8, 0.05);

  EnergyModel zero = idle;
  zero.idle_power_w = 0;
  EXPECT_ERROR_CODE(battery_life_hours(zero), ErrorCode::NonFinite);
  EnergyModel negative = m;
  negative.rate_hz = -1;
  EXPECT_ERROR_CODE(battery_life_hours(negative), ErrorCode::InvalidArgument);
}

TEST(Evalbench, BatteryLifeMonotone) {
  EnergyModel m = smart_glasses_energy();
  double prev = battery_life_hours(m);
  for (int i = 0; i < 20; ++i) {
    m.rate_hz += 10;
    const double h = battery_life_hours(m);
    EXPECT_LT(h, prev);
    prev = h;
  }
  m = smart_glasses_energy();
  prev = battery_life_hours(m);
  for (int i = 0; i < 20; ++i) {
    m.idle_power_w += 1e-3;
    const double h = battery_life_hours(m);
    EXPECT_LT(h, prev);
    prev = h;
  }
}

TEST(Evalbench, EnergyFromConfig) {
  const auto m = energy_from_config({{"capacity_mah", "4000"}, {"voltage", "3.7"}, {"idle_mw", "2"}});
  EXPECT_NEAR(m.capacity_j, 4000 * 3.6 * 3.7, 1e-9);
  EXPECT_NEAR(battery_life_hours(m), 448.6, 0.1);
  EXPECT_THROW(energy_from_config({{"watts", "1"}}), Error);
  EXPECT_THROW(energy_from_config({{"voltage", "5"}}), Error);
}

TEST(Evalbench, BenchReportsOrderedStats) {
  const auto ev = testutil::random_events(4000, 1);
  const Model m = build_default_model(2, 1);
  const Model folded = fold_batchnorm(m);
  const std::vector<EventFrame> frames{make_frame(std::span(ev).first(1500), StreamHeader{}, 2)};
  const QuantizedModel q = quantize_model(folded, calibrate(folded, frames));
  BenchInputs in;
  in.events = ev;
  in.float_model = &m;
  in.int8_model = &q;
  in.repetitions = 30;
  const auto stages = bench(in);
  ASSERT_EQ(stages.size(), 4u);
  EXPECT_EQ(stages[0].stage, "preprocessing");
  EXPECT_EQ(stages[2].macs, count_macs(m));
  EXPECT_EQ(stages[3].macs, stages[2].macs);
  for (const auto& s : stages) {
    EXPECT_EQ(s.repetitions, 30u);
    EXPECT_GE(s.p95_us, s.median_us);
    EXPECT_GT(s.median_us, 0);
  }
  EXPECT_EQ(bench_csv(stages).rfind("stage,repetitions,host_median_us,host_p95_us,", 0), 0u);
  in.repetitions = 10;
  EXPECT_THROW(bench(in), Error);
}

TEST(Evalbench, CrossValidationHoldsOutPairs) {
  DatasetSpec spec;
  spec.participants = 4;
  spec.duration_us = 500'000;
  spec.seed = 3;
  const auto samples = synthesize_labeled(spec, LabelOptions{});
  CvConfig cfg;
  cfg.calibration_frames = 16;
  const auto res = cross_validate(samples, cfg);
  ASSERT_EQ(res.folds.size(), 2u);
  std::size_t total = 0;
  for (const auto& f : res.folds) {
    total += f.float_errors.errors.size();
    EXPECT_EQ(f.float_errors.errors.size(), f.int8_errors.errors.size());
    EXPECT_EQ(f.train_samples + f.float_errors.errors.size(), samples.size());
  }
  EXPECT_EQ(total, samples.size());
  EXPECT_EQ(res.pooled_float.errors.size(), samples.size());
  const auto csv = cv_csv(res, false);
  EXPECT_EQ(csv.rfind("fold,mean,median,iqr\n", 0), 0u);
  EXPECT_NE(csv.find("\npooled,"), std::string::npos);
}
