#include "tpfuse/experiment.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

namespace {

using tpfuse::ExperimentConfig;
using tpfuse::LayerKind;
using tpfuse::ModelGrid;
using tpfuse::run_bench_collect;
using tpfuse::run_model;
using tpfuse::run_verify;
using tpfuse::ScheduleKind;
using tpfuse::Strategy;
using tpfuse::UsageError;
using tpfuse::VerifyOptions;

ExperimentConfig desk_config(LayerKind layer) {
  ExperimentConfig cfg;
  cfg.layer = layer;
  cfg.tp_size = 4;
  cfg.batch = 2;
  cfg.seq = 64;
  cfg.d_model = 32;
  cfg.heads = 8;
  cfg.seed = 7;
  return cfg;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST(Config, ParsesKindNames) {
  EXPECT_EQ(tpfuse::layer_kind_from_string("ulysses"), LayerKind::Ulysses);
  EXPECT_EQ(tpfuse::schedule_kind_from_string("circular-slices"),
            ScheduleKind::CircularSlices);
  EXPECT_THROW(tpfuse::layer_kind_from_string("conv"), UsageError);
  EXPECT_THROW(tpfuse::schedule_kind_from_string("mesh"), UsageError);
}

TEST(Config, ValidationNamesTheViolatedInvariant) {
  ExperimentConfig cfg = desk_config(LayerKind::Mlp);
  cfg.seq = 63;
  try {
    cfg.validate();
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }

  ExperimentConfig odd = desk_config(LayerKind::Mlp);
  odd.tp_size = 3;
  odd.seq = 66;  // keep divisibility; pairwise is the violation
  odd.d_model = 33;
  odd.schedule = ScheduleKind::PairwiseBidirectional;
  EXPECT_THROW(odd.validate(), UsageError);

  ExperimentConfig heads = desk_config(LayerKind::Attention);
  heads.heads = 6;
  EXPECT_THROW(heads.validate(), UsageError);

  ExperimentConfig reps = desk_config(LayerKind::Mlp);
  reps.reps = 0;
  EXPECT_THROW(reps.validate(), UsageError);

  ExperimentConfig delay = desk_config(LayerKind::Mlp);
  delay.delay_ms = -1.0;
  EXPECT_THROW(delay.validate(), UsageError);
}

TEST(Config, ReadsKeyValuePairsAndAppliesThem) {
  std::istringstream file(
      "# comment line\n"
      "tp-size = 2\n"
      "layer=rs\n"
      "\n"
      "seq=32   # trailing comment\n"
      "delay-ms=1.5\n");
  const auto pairs = tpfuse::read_key_value_pairs(file);
  ASSERT_EQ(pairs.size(), 4u);
  EXPECT_EQ(pairs[0], (std::pair<std::string, std::string>{"tp-size", "2"}));

  ExperimentConfig cfg;
  for (const auto& [key, value] : pairs)
    tpfuse::apply_config_entry(cfg, key, value);
  EXPECT_EQ(cfg.tp_size, 2);
  EXPECT_EQ(cfg.layer, LayerKind::ReduceScatter);
  EXPECT_EQ(cfg.seq, 32);
  EXPECT_DOUBLE_EQ(cfg.delay_ms, 1.5);
}

TEST(Config, RejectsMalformedFileEntries) {
  std::istringstream nokey("this is not a pair\n");
  EXPECT_THROW(tpfuse::read_key_value_pairs(nokey), UsageError);

  ExperimentConfig cfg;
  EXPECT_THROW(tpfuse::apply_config_entry(cfg, "colour", "blue"), UsageError);
  EXPECT_THROW(tpfuse::apply_config_entry(cfg, "tp-size", "lots"), UsageError);
  EXPECT_THROW(tpfuse::apply_config_entry(cfg, "layer", "conv"), UsageError);
}

TEST(Verify, SingletonGroupPassesTrivially) {
  for (LayerKind layer : {LayerKind::Mlp, LayerKind::Attention,
                          LayerKind::Ulysses, LayerKind::ReduceScatter,
                          LayerKind::AllGather}) {
    ExperimentConfig cfg = desk_config(layer);
    cfg.tp_size = 1;
    std::ostringstream report;
    EXPECT_EQ(run_verify(cfg, report), 0) << report.str();
  }
}

TEST(Verify, MlpPassesWithZeroDeviation) {
  std::ostringstream report;
  EXPECT_EQ(run_verify(desk_config(LayerKind::Mlp), report), 0);
  const std::string text = report.str();
  EXPECT_NE(text.find("PASS"), std::string::npos);
  EXPECT_EQ(text.find("FAIL"), std::string::npos);
  EXPECT_NE(text.find("max_deviation=0 "), std::string::npos) << text;
}

TEST(Verify, AllLayersPass) {
  for (LayerKind layer : {LayerKind::Attention, LayerKind::Ulysses,
                          LayerKind::ReduceScatter, LayerKind::AllGather}) {
    ExperimentConfig cfg = desk_config(layer);
    cfg.seq = 16;  // attention-sized
    std::ostringstream report;
    EXPECT_EQ(run_verify(cfg, report), 0)
        << to_string(layer) << "\n" << report.str();
  }
}

TEST(Verify, GranularityTwoStillPasses) {
  ExperimentConfig cfg = desk_config(LayerKind::Mlp);
  cfg.granularity = 2;
  std::ostringstream report;
  EXPECT_EQ(run_verify(cfg, report), 0) << report.str();
}

TEST(Verify, CorruptedShardFailsWithNonzeroDeviation) {
  for (LayerKind layer : {LayerKind::Mlp, LayerKind::ReduceScatter}) {
    ExperimentConfig cfg = desk_config(layer);
    std::ostringstream report;
    EXPECT_EQ(run_verify(cfg, report, VerifyOptions{true}), 1);
    int fail_lines = 0;
    for (const std::string& line : split_lines(report.str())) {
      if (line.rfind("FAIL", 0) != 0) continue;
      ++fail_lines;
      EXPECT_EQ(line.find("max_deviation=0 "), std::string::npos) << line;
    }
    EXPECT_GT(fail_lines, 0) << report.str();
  }
}

TEST(Verify, ReportIsDeterministicForSeedAndConfig) {
  std::ostringstream a, b;
  run_verify(desk_config(LayerKind::Mlp), a);
  run_verify(desk_config(LayerKind::Mlp), b);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Bench, ThreeStrategiesWithCsvSchema) {
  ExperimentConfig cfg = desk_config(LayerKind::Mlp);
  cfg.reps = 2;
  cfg.delay_ms = 0.0;

  const auto result = run_bench_collect(cfg);
  ASSERT_EQ(result.measurements.size(), 3u);
  EXPECT_EQ(result.measurements[0].strategy, Strategy::Baseline);
  EXPECT_EQ(result.measurements[2].strategy, Strategy::Fused);
  for (const auto& m : result.measurements) EXPECT_GT(m.mean_ms, 0.0);
  EXPECT_GT(result.chunk_compute_ms, 0.0);

  std::ostringstream csv;
  EXPECT_EQ(tpfuse::run_bench(cfg, csv), 0);
  const auto lines = split_lines(csv.str());
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], tpfuse::kBenchCsvHeader);
  EXPECT_EQ(lines[1].rfind("baseline,mlp,4,2,64,32,", 0), 0) << lines[1];
  EXPECT_EQ(lines[3].rfind("fused,mlp,4,", 0), 0) << lines[3];

  // With nothing to hide, the strategies stay in the same ballpark.
  double lo = 1e300, hi = 0.0;
  for (const auto& m : result.measurements) {
    lo = std::min(lo, m.mean_ms);
    hi = std::max(hi, m.mean_ms);
  }
  EXPECT_LE(hi, 5.0 * lo);
}

TEST(Bench, WorksForEveryLayerKind) {
  for (LayerKind layer : {LayerKind::Attention, LayerKind::Ulysses,
                          LayerKind::ReduceScatter, LayerKind::AllGather}) {
    ExperimentConfig cfg = desk_config(layer);
    cfg.seq = 16;
    cfg.reps = 1;
    const auto result = run_bench_collect(cfg);
    ASSERT_EQ(result.measurements.size(), 3u) << to_string(layer);
  }
}

TEST(Bench, FusedAdvantageHoldsAcrossInputSweep) {
  // Desk-scale version of the doubling-sequence / halving-batch sweep:
  // B*S stays constant, so the per-chunk compute (and the injected delay)
  // is comparable at each point.
  struct Point {
    int64_t batch, seq;
  };
  double advantage_sum = 0.0;
  for (const Point& point : {Point{8, 128}, Point{4, 256}, Point{2, 512}}) {
    ExperimentConfig cfg;
    cfg.layer = LayerKind::Mlp;
    cfg.tp_size = 4;
    cfg.batch = point.batch;
    cfg.seq = point.seq;
    cfg.d_model = 192;
    cfg.seed = 5;
    cfg.reps = 5;
    const double chunk_ms = tpfuse::measure_chunk_compute_ms(cfg);
    cfg.delay_ms = 0.5 * chunk_ms;

    const auto result = run_bench_collect(cfg);
    const double baseline = result.measurements[0].mean_ms;
    const double fused = result.measurements[2].mean_ms;
    // Allow a small noise floor per point; the advantage must hold overall.
    EXPECT_LT(fused, baseline * 1.05)
        << "B=" << point.batch << " S=" << point.seq;
    advantage_sum += baseline - fused;
  }
  EXPECT_GT(advantage_sum, 0.0);
}

TEST(Model, FreeCommunicationRowsShowZeroOverhead) {
  ModelGrid grid;
  grid.d_values = {0.0};
  grid.include_calibration = false;
  std::ostringstream csv;
  EXPECT_EQ(run_model(grid, csv), 0);
  const auto lines = split_lines(csv.str());
  ASSERT_EQ(lines.size(), 4u);  // header + 3 strategies
  for (size_t i = 1; i < lines.size(); ++i)
    EXPECT_NE(lines[i].find(",78.5,0,78.5,"), std::string::npos) << lines[i];
}

TEST(Model, CalibrationRowAppendedOnceAndBandsHold) {
  ModelGrid grid;  // defaults are the calibration point
  std::ostringstream csv;
  EXPECT_EQ(run_model(grid, csv), 0);
  const auto lines = split_lines(csv.str());
  ASSERT_EQ(lines.size(), 4u);  // no duplicate calibration rows

  // fused reduction >= 99 %, slicing within [75, 90] %.
  for (const std::string& line : lines) {
    if (line.rfind("fused,", 0) == 0) {
      EXPECT_NE(line.find(",100,"), std::string::npos) << line;
    }
    if (line.rfind("data-slicing,", 0) == 0) {
      std::istringstream fields(line);
      std::string field;
      std::vector<std::string> cols;
      while (std::getline(fields, field, ',')) cols.push_back(field);
      const double reduction = std::stod(cols[8]);
      EXPECT_GE(reduction, 75.0);
      EXPECT_LE(reduction, 90.0);
    }
  }
}

TEST(Model, DegenerateChunkingEqualsBaseline) {
  ModelGrid grid;
  grid.chunk_values = {1};
  grid.include_calibration = false;
  std::ostringstream csv;
  run_model(grid, csv);
  const auto lines = split_lines(csv.str());
  std::string baseline_tail, slicing_tail;
  for (const std::string& line : lines) {
    const auto cut = line.find(',');
    if (line.rfind("baseline,", 0) == 0) baseline_tail = line.substr(cut);
    if (line.rfind("data-slicing,", 0) == 0) slicing_tail = line.substr(cut);
  }
  // Identical parameters and identical latency columns.
  ASSERT_FALSE(baseline_tail.empty());
  std::istringstream b(baseline_tail), s(slicing_tail);
  std::string bf, sf;
  for (int col = 0; std::getline(b, bf, ',') && std::getline(s, sf, ','); ++col)
    if (col >= 5) EXPECT_EQ(bf, sf) << "column " << col;
}

TEST(Model, RejectsInvalidGrid) {
  ModelGrid grid;
  grid.n_values = {0};
  std::ostringstream csv;
  EXPECT_THROW(run_model(grid, csv), UsageError);
}
