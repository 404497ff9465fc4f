#include "tpfuse/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <utility>

namespace tpfuse {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Mlp:
      return "mlp";
    case LayerKind::Attention:
      return "attention";
    case LayerKind::Ulysses:
      return "ulysses";
    case LayerKind::ReduceScatter:
      return "rs";
    case LayerKind::AllGather:
      return "ag";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "mlp") return LayerKind::Mlp;
  if (name == "attention") return LayerKind::Attention;
  if (name == "ulysses") return LayerKind::Ulysses;
  if (name == "rs") return LayerKind::ReduceScatter;
  if (name == "ag") return LayerKind::AllGather;
  throw UsageError("unknown layer kind '" + name +
                   "' (expected mlp|attention|ulysses|rs|ag)");
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "ring") return ScheduleKind::Ring;
  if (name == "pairwise") return ScheduleKind::PairwiseBidirectional;
  if (name == "circular-slices") return ScheduleKind::CircularSlices;
  throw UsageError("unknown schedule '" + name +
                   "' (expected ring|pairwise|circular-slices)");
}

void ExperimentConfig::validate() const {
  if (tp_size < 1) throw UsageError("tp_size must be >= 1");
  if (batch < 1) throw UsageError("batch must be >= 1");
  if (seq < 1) throw UsageError("seq must be >= 1");
  if (d_model < 1) throw UsageError("d_model must be >= 1");
  if (heads < 1) throw UsageError("heads must be >= 1");
  if (granularity < 1) throw UsageError("granularity must be >= 1");
  if (reps < 1) throw UsageError("reps must be >= 1");
  if (delay_ms < 0.0) throw UsageError("delay-ms must be >= 0");
  if (seq % (static_cast<int64_t>(tp_size) * granularity) != 0) {
    std::ostringstream os;
    os << "seq (" << seq << ") must be divisible by tp_size*granularity ("
       << tp_size * granularity << ")";
    throw UsageError(os.str());
  }
  if (schedule == ScheduleKind::PairwiseBidirectional && tp_size % 2 != 0 &&
      tp_size != 1) {
    throw UsageError("pairwise schedule requires an even tp_size");
  }
  const bool attention_like =
      layer == LayerKind::Attention || layer == LayerKind::Ulysses;
  if (attention_like) {
    if (heads % tp_size != 0) {
      std::ostringstream os;
      os << "heads (" << heads << ") must be divisible by tp_size (" << tp_size
         << ")";
      throw UsageError(os.str());
    }
    if (d_model % heads != 0) {
      std::ostringstream os;
      os << "d_model (" << d_model << ") must be divisible by heads (" << heads
         << ")";
      throw UsageError(os.str());
    }
    if (granularity != 1)
      throw UsageError("attention layers support granularity = 1 only");
  }
  if (layer == LayerKind::Mlp && d_model % tp_size != 0) {
    std::ostringstream os;
    os << "d_model (" << d_model << ") must be divisible by tp_size ("
       << tp_size << ")";
    throw UsageError(os.str());
  }
}

std::vector<std::pair<std::string, std::string>> read_key_value_pairs(
    std::istream& in) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line.erase(comment);
    const auto strip = [](std::string s) {
      const auto begin = s.find_first_not_of(" \t\r");
      if (begin == std::string::npos) return std::string();
      const auto end = s.find_last_not_of(" \t\r");
      return s.substr(begin, end - begin + 1);
    };
    if (strip(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config file line " + std::to_string(line_no) +
                       ": expected key=value, got '" + strip(line) + "'");
    }
    pairs.emplace_back(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  return pairs;
}

void apply_config_entry(ExperimentConfig& config, const std::string& key,
                        const std::string& value) {
  const auto bad_value = [&]() {
    return UsageError("config file: bad value '" + value + "' for key '" +
                      key + "'");
  };
  try {
    if (key == "tp-size") {
      config.tp_size = std::stoi(value);
    } else if (key == "batch") {
      config.batch = std::stoll(value);
    } else if (key == "seq") {
      config.seq = std::stoll(value);
    } else if (key == "d-model") {
      config.d_model = std::stoll(value);
    } else if (key == "heads") {
      config.heads = std::stoi(value);
    } else if (key == "granularity") {
      config.granularity = std::stoi(value);
    } else if (key == "schedule") {
      config.schedule = schedule_kind_from_string(value);
    } else if (key == "layer") {
      config.layer = layer_kind_from_string(value);
    } else if (key == "seed") {
      config.seed = std::stoull(value);
    } else if (key == "delay-ms") {
      config.delay_ms = std::stod(value);
    } else if (key == "reps") {
      config.reps = std::stoi(value);
    } else {
      throw UsageError("config file: unknown key '" + key + "'");
    }
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const UsageError*>(&e)) throw;
    throw bad_value();
  } catch (const std::out_of_range&) {
    throw bad_value();
  }
}

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor identity_fn(const Tensor& t) { return t; }

double square_fn(double v) { return v * v; }

/// (B*heads_total, S, Dh) -> (B*block_len, S, Dh), heads [begin, begin+len).
Tensor head_block(const Tensor& folded, int batch, int heads_total, int begin,
                  int len) {
  Tensor out(static_cast<int64_t>(batch) * len, folded.seq(), folded.feat());
  for (int64_t b = 0; b < batch; ++b)
    for (int h = 0; h < len; ++h)
      for (int64_t s = 0; s < folded.seq(); ++s)
        for (int64_t d = 0; d < folded.feat(); ++d)
          out(b * len + h, s, d) = folded(b * heads_total + begin + h, s, d);
  return out;
}

/// Feature columns [begin, begin+len) of x.
Tensor feat_block(const Tensor& x, int64_t begin, int64_t len) {
  Tensor out(x.batch(), x.seq(), len);
  for (int64_t b = 0; b < x.batch(); ++b)
    for (int64_t s = 0; s < x.seq(); ++s)
      for (int64_t d = 0; d < len; ++d) out(b, s, d) = x(b, s, begin + d);
  return out;
}

/// Integer lattice "real" data: values in [-1, 1) with step 1/8,
/// deterministic and exactly representable.
Tensor real_fill(int64_t batch, int64_t seq, int64_t feat, uint64_t seed) {
  return scaled(randint_fill(batch, seq, feat, -8, 8, seed), 0.125);
}

Matrix real_matrix(int64_t rows, int64_t cols, uint64_t seed) {
  Matrix m = randint_matrix(rows, cols, -8, 8, seed);
  for (double& v : m.raw()) v *= 0.125;
  return m;
}

struct Check {
  std::string name;
  double deviation = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

Check make_check(std::string name, double deviation, double tolerance) {
  Check c;
  c.name = std::move(name);
  c.deviation = deviation;
  c.tolerance = tolerance;
  c.pass = deviation <= tolerance;
  return c;
}

std::vector<ScheduleKind> applicable_schedules(int tp) {
  if (tp == 1) return {ScheduleKind::Ring};
  std::vector<ScheduleKind> kinds{ScheduleKind::Ring,
                                  ScheduleKind::CircularSlices};
  if (tp % 2 == 0) kinds.push_back(ScheduleKind::PairwiseBidirectional);
  return kinds;
}

int ring_granularity(ScheduleKind kind, int granularity) {
  return kind == ScheduleKind::Ring ? granularity : 1;
}

double worst_deviation(const std::vector<Tensor>& got,
                       const std::vector<Tensor>& want, bool relative) {
  double worst = 0.0;
  for (size_t r = 0; r < got.size(); ++r)
    worst = std::max(worst, relative ? rel_deviation(got[r], want[r])
                                     : max_abs_diff(got[r], want[r]));
  return worst;
}

// ---------------------------------------------------------------------------
// verify suites
// ---------------------------------------------------------------------------

std::vector<Check> verify_reduce_scatter(const ExperimentConfig& cfg,
                                         bool inject_fault) {
  const int t = cfg.tp_size;
  std::vector<Tensor> inputs;
  for (int q = 0; q < t; ++q)
    inputs.push_back(randint_fill(cfg.batch, cfg.seq, cfg.d_model, 0, 5,
                                  mix_seed(cfg.seed, static_cast<uint64_t>(q))));

  // Central oracle: sum slice s across all ranks.
  std::vector<Tensor> expected;
  for (int s = 0; s < t; ++s) {
    Tensor acc = split_seq(inputs[0], t)[static_cast<size_t>(s)];
    for (int q = 1; q < t; ++q)
      accumulate(acc, split_seq(inputs[static_cast<size_t>(q)], t)[static_cast<size_t>(s)]);
    expected.push_back(std::move(acc));
  }

  if (inject_fault) inputs[0](0, 0, 0) += 1.0;

  std::vector<Check> checks;
  for (ScheduleKind kind : applicable_schedules(t)) {
    const Schedule schedule = build_schedule(kind, t);
    const int m = ring_granularity(kind, cfg.granularity);
    auto outs = spawn_group(t, [&](RankEndpoint& ep) {
      return fuse_reduce_scatter(ep, inputs[static_cast<size_t>(ep.rank())],
                                 identity_fn, schedule, m);
    });
    checks.push_back(make_check("reduce-scatter/" + to_string(kind),
                                worst_deviation(outs, expected, false), 0.0));
  }
  return checks;
}

std::vector<Check> verify_all_gather(const ExperimentConfig& cfg,
                                     bool inject_fault) {
  const int t = cfg.tp_size;
  const int64_t slice_len = cfg.seq / t;
  std::vector<Tensor> inputs;
  for (int q = 0; q < t; ++q)
    inputs.push_back(randint_fill(cfg.batch, slice_len, cfg.d_model, 0, 5,
                                  mix_seed(cfg.seed, static_cast<uint64_t>(q))));
  const Tensor full = concat_seq(inputs);
  std::vector<Tensor> expected(static_cast<size_t>(t), full);

  if (inject_fault) inputs[0](0, 0, 0) += 1.0;

  auto outs = spawn_group(t, [&](RankEndpoint& ep) {
    return fuse_all_gather(ep, inputs[static_cast<size_t>(ep.rank())],
                           identity_fn, cfg.granularity);
  });
  return {make_check("all-gather/ring", worst_deviation(outs, expected, false),
                     0.0)};
}

std::vector<Check> verify_mlp(const ExperimentConfig& cfg, bool inject_fault) {
  const int t = cfg.tp_size;
  const int64_t hidden = 2 * cfg.d_model;
  const Tensor x_full =
      randint_fill(cfg.batch, cfg.seq, cfg.d_model, 0, 5, mix_seed(cfg.seed, 0));
  const Matrix up_full =
      randint_matrix(cfg.d_model, hidden, -2, 2, mix_seed(cfg.seed, 1));
  const Matrix down_full =
      randint_matrix(hidden, cfg.d_model, -2, 2, mix_seed(cfg.seed, 2));

  ShardedLinear up = ShardedLinear::split_columns(up_full, t);
  ShardedLinear down = ShardedLinear::split_rows(down_full, t);
  if (inject_fault) down.shard(0)(0, 0) += 1.0;

  const std::vector<Tensor> x_slices = split_seq(x_full, t);
  const Tensor mlp_oracle_full =
      reference_mlp(x_full, up_full, down_full, square_fn);
  const std::vector<Tensor> mlp_expected = split_seq(mlp_oracle_full, t);

  std::vector<Check> checks;
  for (ScheduleKind kind : applicable_schedules(t)) {
    const Schedule schedule = build_schedule(kind, t);
    const int m = ring_granularity(kind, cfg.granularity);
    auto outs = spawn_group(t, [&](RankEndpoint& ep) {
      return tpsp_mlp_forward(ep, x_slices[static_cast<size_t>(ep.rank())], up,
                              down, square_fn, schedule, m);
    });
    checks.push_back(make_check("mlp/" + to_string(kind),
                                worst_deviation(outs, mlp_expected, false), 0.0));
  }

  // Column projection alone: fused all-gather + up shard.
  {
    const Tensor col_full = matmul(x_full, up_full);
    std::vector<Tensor> expected;
    const int64_t cols = hidden / t;
    for (int r = 0; r < t; ++r)
      expected.push_back(feat_block(col_full, r * cols, cols));
    auto outs = spawn_group(t, [&](RankEndpoint& ep) {
      return column_parallel_forward(ep, x_slices[static_cast<size_t>(ep.rank())],
                                     up, cfg.granularity);
    });
    checks.push_back(make_check("column-parallel/ring",
                                worst_deviation(outs, expected, false), 0.0));
  }

  // Row projection alone: feature-sharded input through the fused
  // reduce-scatter.
  {
    const Tensor x2_full =
        randint_fill(cfg.batch, cfg.seq, cfg.d_model, 0, 5, mix_seed(cfg.seed, 3));
    const Matrix w2_full =
        randint_matrix(cfg.d_model, cfg.d_model, -2, 2, mix_seed(cfg.seed, 4));
    ShardedLinear w2 = ShardedLinear::split_rows(w2_full, t);
    if (inject_fault) w2.shard(0)(0, 0) += 1.0;
    const std::vector<Tensor> expected = split_seq(matmul(x2_full, w2_full), t);
    const int64_t cols = cfg.d_model / t;
    for (ScheduleKind kind : applicable_schedules(t)) {
      const Schedule schedule = build_schedule(kind, t);
      const int m = ring_granularity(kind, cfg.granularity);
      auto outs = spawn_group(t, [&](RankEndpoint& ep) {
        const Tensor x_r = feat_block(x2_full, ep.rank() * cols, cols);
        return row_parallel_forward(ep, x_r, w2, schedule, m);
      });
      checks.push_back(make_check("row-parallel/" + to_string(kind),
                                  worst_deviation(outs, expected, false), 0.0));
    }
  }
  return checks;
}

struct AttentionData {
  Tensor q, k, v;  // folded (batch * heads_total, seq, head_dim)
  Matrix w_o;      // (d_model, d_model)
};

AttentionData build_attention_data(const ExperimentConfig& cfg) {
  const int64_t head_dim = cfg.d_model / cfg.heads;
  const int64_t folded = cfg.batch * cfg.heads;
  AttentionData data;
  data.q = real_fill(folded, cfg.seq, head_dim, mix_seed(cfg.seed, 10));
  data.k = real_fill(folded, cfg.seq, head_dim, mix_seed(cfg.seed, 11));
  data.v = real_fill(folded, cfg.seq, head_dim, mix_seed(cfg.seed, 12));
  data.w_o = real_matrix(cfg.d_model, cfg.d_model, mix_seed(cfg.seed, 13));
  return data;
}

AttentionInputs rank_attention_inputs(const AttentionData& data,
                                      const ExperimentConfig& cfg, int rank) {
  const int local = cfg.heads / cfg.tp_size;
  const int begin = rank * local;
  return make_attention_inputs(
      static_cast<int>(cfg.batch), local,
      head_block(data.q, static_cast<int>(cfg.batch), cfg.heads, begin, local),
      head_block(data.k, static_cast<int>(cfg.batch), cfg.heads, begin, local),
      head_block(data.v, static_cast<int>(cfg.batch), cfg.heads, begin, local));
}

std::vector<Check> verify_attention(const ExperimentConfig& cfg,
                                    bool inject_fault) {
  const int t = cfg.tp_size;
  const AttentionData data = build_attention_data(cfg);
  const AttentionOptions options;

  const AttentionInputs full = make_attention_inputs(
      static_cast<int>(cfg.batch), cfg.heads, data.q, data.k, data.v);
  const std::vector<Tensor> expected =
      split_seq(matmul(reference_attention(full, options), data.w_o), t);

  ShardedLinear w_o = ShardedLinear::split_rows(data.w_o, t);
  if (inject_fault) w_o.shard(0)(0, 0) += 1.0;

  std::vector<AttentionInputs> per_rank;
  for (int r = 0; r < t; ++r)
    per_rank.push_back(rank_attention_inputs(data, cfg, r));

  std::vector<Check> checks;
  for (ScheduleKind kind : applicable_schedules(t)) {
    const Schedule schedule = build_schedule(kind, t);
    auto outs = spawn_group(t, [&](RankEndpoint& ep) {
      return query_split_attention(ep, per_rank[static_cast<size_t>(ep.rank())],
                                   w_o, schedule, options);
    });
    checks.push_back(make_check("query-split-attention/" + to_string(kind),
                                worst_deviation(outs, expected, true), 1e-10));
  }

  // The same reduce-scatter embodied two ways: query-split attention vs the
  // attention context fed through the row-parallel projection.
  {
    const Schedule schedule = build_schedule(ScheduleKind::Ring, t);
    auto qsa = spawn_group(t, [&](RankEndpoint& ep) {
      return query_split_attention(ep, per_rank[static_cast<size_t>(ep.rank())],
                                   w_o, schedule, options);
    });
    auto row = spawn_group(t, [&](RankEndpoint& ep) {
      const AttentionInputs& mine = per_rank[static_cast<size_t>(ep.rank())];
      const Tensor context = reference_attention(mine, options);
      return row_parallel_forward(ep, context, w_o, schedule);
    });
    checks.push_back(make_check("attention/embodiment-agreement",
                                worst_deviation(qsa, row, false), 0.0));
  }
  return checks;
}

std::vector<Check> verify_ulysses(const ExperimentConfig& cfg,
                                  bool inject_fault) {
  const int t = cfg.tp_size;
  const AttentionData data = build_attention_data(cfg);
  const AttentionOptions options;

  std::vector<AttentionInputs> per_rank;
  for (int r = 0; r < t; ++r)
    per_rank.push_back(rank_attention_inputs(data, cfg, r));

  // Central oracle: per-source head-group attention, sequence slice r of
  // each, concatenated along features in source-rank order.
  std::vector<std::vector<Tensor>> context_slices;
  for (int q = 0; q < t; ++q)
    context_slices.push_back(
        split_seq(reference_attention(per_rank[static_cast<size_t>(q)], options), t));
  std::vector<Tensor> expected;
  for (int r = 0; r < t; ++r) {
    std::vector<Tensor> parts;
    for (int q = 0; q < t; ++q)
      parts.push_back(context_slices[static_cast<size_t>(q)][static_cast<size_t>(r)]);
    expected.push_back(concat_feat(parts));
  }

  if (inject_fault) per_rank[0].q(0, 0, 0) += 1.0;

  auto outs = spawn_group(t, [&](RankEndpoint& ep) {
    return fuse_all_to_all_attention(
        ep, per_rank[static_cast<size_t>(ep.rank())], options);
  });
  return {make_check("ulysses-all-to-all",
                     worst_deviation(outs, expected, true), 1e-10)};
}

}  // namespace

int run_verify(const ExperimentConfig& config, std::ostream& report,
               const VerifyOptions& options) {
  config.validate();

  std::vector<Check> checks;
  switch (config.layer) {
    case LayerKind::ReduceScatter:
      checks = verify_reduce_scatter(config, options.inject_fault);
      break;
    case LayerKind::AllGather:
      checks = verify_all_gather(config, options.inject_fault);
      break;
    case LayerKind::Mlp:
      checks = verify_mlp(config, options.inject_fault);
      break;
    case LayerKind::Attention:
      checks = verify_attention(config, options.inject_fault);
      break;
    case LayerKind::Ulysses:
      checks = verify_ulysses(config, options.inject_fault);
      break;
  }

  int failed = 0;
  for (const Check& c : checks) {
    if (!c.pass) ++failed;
    char line[160];
    std::snprintf(line, sizeof(line), "%s  %-46s max_deviation=%.3g tolerance=%.3g",
                  c.pass ? "PASS" : "FAIL", c.name.c_str(), c.deviation,
                  c.tolerance);
    report << line << "\n";
  }
  report << "verification " << (failed == 0 ? "PASSED" : "FAILED") << " ("
         << checks.size() - failed << "/" << checks.size() << " checks)\n";
  return failed == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

namespace {

double smooth_activation(double v) { return std::tanh(v); }

/// Conventional chunked overlap: compute output slices in natural order,
/// ship each contribution to its owner as soon as it is ready, and settle
/// all inbound contributions at the end. The final chunk's transfer is the
/// exposed tail.
Tensor sliced_row_parallel(RankEndpoint& ep, const Tensor& x, const Matrix& w) {
  const int t = ep.group_size();
  if (t == 1) return matmul(x, w);
  const std::vector<Tensor> slices = split_seq(x, t);
  const int r = ep.rank();

  std::vector<Tensor> inbox(static_cast<size_t>(t));
  std::vector<PendingOp> recvs;
  recvs.reserve(static_cast<size_t>(t - 1));
  for (int q = 0; q < t; ++q)
    if (q != r) recvs.push_back(ep.recv_async(q, inbox[static_cast<size_t>(q)]));

  Tensor own;
  for (int s = 0; s < t; ++s) {
    Tensor y = matmul(slices[static_cast<size_t>(s)], w);
    if (s == r) {
      own = std::move(y);
    } else {
      ep.send_async(s, y).wait();
    }
  }
  for (PendingOp& op : recvs) op.wait();
  for (int q = 0; q < t; ++q)
    if (q != r) accumulate(own, inbox[static_cast<size_t>(q)]);
  return own;
}

struct BenchSetup {
  // Returns the per-rank body for one strategy.
  std::function<std::function<Tensor(RankEndpoint&)>(Strategy)> body_for;
  // One partial-output compute, for calibrating the injected delay.
  std::function<Tensor()> chunk_compute;
};

BenchSetup make_bench_setup(const ExperimentConfig& cfg) {
  const int t = cfg.tp_size;
  const Schedule ring = build_schedule(ScheduleKind::Ring, t);
  const Schedule chosen = build_schedule(cfg.schedule, t);
  BenchSetup setup;

  switch (cfg.layer) {
    case LayerKind::Mlp: {
      const int64_t hidden = 2 * cfg.d_model;
      auto x_full = std::make_shared<Tensor>(
          randint_fill(cfg.batch, cfg.seq, cfg.d_model, 0, 3, mix_seed(cfg.seed, 0)));
      auto up = std::make_shared<ShardedLinear>(ShardedLinear::split_columns(
          randint_matrix(cfg.d_model, hidden, -2, 2, mix_seed(cfg.seed, 1)), t));
      auto down = std::make_shared<ShardedLinear>(ShardedLinear::split_rows(
          randint_matrix(hidden, cfg.d_model, -2, 2, mix_seed(cfg.seed, 2)), t));
      auto slices = std::make_shared<std::vector<Tensor>>(split_seq(*x_full, t));

      setup.body_for = [=, m = cfg.granularity](Strategy strategy) {
        return [=](RankEndpoint& ep) -> Tensor {
          const int r = ep.rank();
          // Up projection stays conventional so the strategies differ only
          // in how the reduce-scatter half behaves.
          const Tensor gathered =
              ref_all_gather(ep, (*slices)[static_cast<size_t>(r)]);
          const Tensor activated = map_elements(
              matmul(gathered, up->shard(r)), smooth_activation);
          switch (strategy) {
            case Strategy::Baseline:
              return fuse_reduce_scatter(ep, matmul(activated, down->shard(r)),
                                         identity_fn, ring);
            case Strategy::DataSlicing:
              return sliced_row_parallel(ep, activated, down->shard(r));
            case Strategy::Fused:
              return row_parallel_forward(ep, activated, *down, chosen, m);
          }
          return Tensor{};
        };
      };
      setup.chunk_compute = [=]() {
        const Tensor chunk = randint_fill(cfg.batch, cfg.seq / t, hidden / t, 0,
                                          3, mix_seed(cfg.seed, 7));
        return matmul(chunk, down->shard(0));
      };
      break;
    }
    case LayerKind::Attention: {
      auto data = std::make_shared<AttentionData>(build_attention_data(cfg));
      auto w_o = std::make_shared<ShardedLinear>(
          ShardedLinear::split_rows(data->w_o, t));
      auto per_rank = std::make_shared<std::vector<AttentionInputs>>();
      for (int r = 0; r < t; ++r)
        per_rank->push_back(rank_attention_inputs(*data, cfg, r));
      const AttentionOptions options;

      setup.body_for = [=](Strategy strategy) {
        return [=](RankEndpoint& ep) -> Tensor {
          const int r = ep.rank();
          const AttentionInputs& mine = (*per_rank)[static_cast<size_t>(r)];
          switch (strategy) {
            case Strategy::Baseline: {
              const Tensor context = reference_attention(mine, options);
              return fuse_reduce_scatter(ep, matmul(context, w_o->shard(r)),
                                         identity_fn, ring);
            }
            case Strategy::DataSlicing: {
              const Tensor context = reference_attention(mine, options);
              return sliced_row_parallel(ep, context, w_o->shard(r));
            }
            case Strategy::Fused:
              return query_split_attention(ep, mine, *w_o, chosen, options);
          }
          return Tensor{};
        };
      };
      setup.chunk_compute = [=]() {
        const AttentionInputs& mine = (*per_rank)[0];
        const Tensor context = attention_context(split_seq(mine.q, t)[0],
                                                 mine.k, mine.v, options);
        return matmul(merge_heads(context, mine.heads), w_o->shard(0));
      };
      break;
    }
    case LayerKind::Ulysses: {
      auto data = std::make_shared<AttentionData>(build_attention_data(cfg));
      auto per_rank = std::make_shared<std::vector<AttentionInputs>>();
      for (int r = 0; r < t; ++r)
        per_rank->push_back(rank_attention_inputs(*data, cfg, r));
      const AttentionOptions options;

      setup.body_for = [=](Strategy strategy) {
        return [=](RankEndpoint& ep) -> Tensor {
          const int r = ep.rank();
          const AttentionInputs& mine = (*per_rank)[static_cast<size_t>(r)];
          switch (strategy) {
            case Strategy::Baseline: {
              const Tensor context = reference_attention(mine, options);
              const std::vector<Tensor> redistributed =
                  ref_all_to_all(ep, split_seq(context, t));
              return concat_feat(redistributed);
            }
            case Strategy::DataSlicing: {
              // Natural slice order; each slice ships straight to its owner.
              std::vector<Tensor> inbox(static_cast<size_t>(t));
              std::vector<PendingOp> recvs;
              for (int q = 0; q < t; ++q)
                if (q != r)
                  recvs.push_back(ep.recv_async(q, inbox[static_cast<size_t>(q)]));
              const std::vector<Tensor> q_slices = split_seq(mine.q, t);
              for (int s = 0; s < t; ++s) {
                Tensor out = merge_heads(
                    attention_context(q_slices[static_cast<size_t>(s)], mine.k,
                                      mine.v, options),
                    mine.heads);
                if (s == r) {
                  inbox[static_cast<size_t>(s)] = std::move(out);
                } else {
                  ep.send_async(s, out).wait();
                }
              }
              for (PendingOp& op : recvs) op.wait();
              return concat_feat(inbox);
            }
            case Strategy::Fused:
              return fuse_all_to_all_attention(ep, mine, options);
          }
          return Tensor{};
        };
      };
      setup.chunk_compute = [=]() {
        const AttentionInputs& mine = (*per_rank)[0];
        return merge_heads(attention_context(split_seq(mine.q, t)[0], mine.k,
                                             mine.v, options),
                           mine.heads);
      };
      break;
    }
    case LayerKind::ReduceScatter: {
      auto inputs = std::make_shared<std::vector<Tensor>>();
      for (int q = 0; q < t; ++q)
        inputs->push_back(randint_fill(cfg.batch, cfg.seq, cfg.d_model, 0, 3,
                                       mix_seed(cfg.seed, static_cast<uint64_t>(q))));
      setup.body_for = [=, m = cfg.granularity](Strategy strategy) {
        return [=](RankEndpoint& ep) -> Tensor {
          const Tensor& mine = (*inputs)[static_cast<size_t>(ep.rank())];
          switch (strategy) {
            case Strategy::Baseline:
              return fuse_reduce_scatter(ep, mine, identity_fn, ring);
            case Strategy::DataSlicing:
              return sliced_row_parallel(
                  ep, mine, Matrix::identity(cfg.d_model));
            case Strategy::Fused:
              return fuse_reduce_scatter(ep, mine, identity_fn, chosen, m);
          }
          return Tensor{};
        };
      };
      setup.chunk_compute = [=]() {
        return split_seq((*inputs)[0], t)[0];
      };
      break;
    }
    case LayerKind::AllGather: {
      auto inputs = std::make_shared<std::vector<Tensor>>();
      for (int q = 0; q < t; ++q)
        inputs->push_back(randint_fill(cfg.batch, cfg.seq / t, cfg.d_model, 0,
                                       3, mix_seed(cfg.seed, static_cast<uint64_t>(q))));
      setup.body_for = [=, m = cfg.granularity](Strategy strategy) {
        return [=](RankEndpoint& ep) -> Tensor {
          const Tensor& mine = (*inputs)[static_cast<size_t>(ep.rank())];
          switch (strategy) {
            case Strategy::Baseline:
            case Strategy::DataSlicing:
              return ref_all_gather(ep, mine);
            case Strategy::Fused:
              return fuse_all_gather(ep, mine, identity_fn, m);
          }
          return Tensor{};
        };
      };
      setup.chunk_compute = [=]() {
        return (*inputs)[0];
      };
      break;
    }
  }
  return setup;
}

double time_spawn_ms(int t, const std::function<Tensor(RankEndpoint&)>& body,
                     const FabricOptions& options,
                     std::vector<Tensor>* outputs = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  auto outs = spawn_group(t, body, options);
  const auto t1 = std::chrono::steady_clock::now();
  if (outputs) *outputs = std::move(outs);
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

double measure_chunk_compute_ms(const ExperimentConfig& config) {
  config.validate();
  BenchSetup setup = make_bench_setup(config);
  // Run tp_size copies concurrently: overlap has to hide hops under chunk
  // compute as it proceeds in the group, contention included.
  auto medians = spawn_group(config.tp_size, [&](RankEndpoint&) {
    std::vector<double> samples;
    setup.chunk_compute();  // warm up caches/allocator
    for (int i = 0; i < 5; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      setup.chunk_compute();
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
  });
  double total = 0.0;
  for (double m : medians) total += m;
  return total / static_cast<double>(medians.size());
}

BenchResult run_bench_collect(const ExperimentConfig& config) {
  config.validate();
  BenchSetup setup = make_bench_setup(config);
  const FabricOptions fabric{config.delay_ms};

  BenchResult result;
  result.chunk_compute_ms = measure_chunk_compute_ms(config);

  const Strategy strategies[] = {Strategy::Baseline, Strategy::DataSlicing,
                                 Strategy::Fused};
  std::vector<std::function<Tensor(RankEndpoint&)>> bodies;
  for (Strategy strategy : strategies) bodies.push_back(setup.body_for(strategy));

  // Warm-up round, discarded; also checks the strategies agree on the math
  // they time.
  std::vector<Tensor> baseline_out;
  for (size_t k = 0; k < bodies.size(); ++k) {
    std::vector<Tensor> outs;
    time_spawn_ms(config.tp_size, bodies[k], fabric, &outs);
    if (k == 0) {
      baseline_out = std::move(outs);
    } else {
      for (size_t r = 0; r < outs.size(); ++r) {
        if (rel_deviation(outs[r], baseline_out[r]) > 1e-9)
          throw std::logic_error("bench strategies disagree on layer output");
      }
    }
  }

  // Interleave the strategies round-robin so machine drift over the run
  // lands on all means equally.
  std::vector<double> totals(bodies.size(), 0.0);
  for (int rep = 0; rep < config.reps; ++rep)
    for (size_t k = 0; k < bodies.size(); ++k)
      totals[k] += time_spawn_ms(config.tp_size, bodies[k], fabric);

  for (size_t k = 0; k < bodies.size(); ++k) {
    BenchMeasurement m;
    m.strategy = strategies[k];
    m.mean_ms = totals[k] / config.reps;
    result.measurements.push_back(m);
  }
  const double base = result.measurements[0].mean_ms;
  for (BenchMeasurement& m : result.measurements)
    m.latency_reduction_pct =
        base > 0.0 ? (base - m.mean_ms) / base * 100.0 : 0.0;
  return result;
}

const char* const kBenchCsvHeader =
    "strategy,layer,tp_size,batch,seq,d_model,heads,granularity,schedule,seed,"
    "delay_ms,reps,chunk_compute_ms,mean_ms,latency_reduction_pct";

int run_bench(const ExperimentConfig& config, std::ostream& csv) {
  const BenchResult result = run_bench_collect(config);
  csv << kBenchCsvHeader << "\n";
  for (const BenchMeasurement& m : result.measurements) {
    char row[384];
    std::snprintf(row, sizeof(row),
                  "%s,%s,%d,%lld,%lld,%lld,%d,%d,%s,%llu,%.10g,%d,%.10g,%.10g,%.10g",
                  to_string(m.strategy).c_str(), to_string(config.layer).c_str(),
                  config.tp_size, static_cast<long long>(config.batch),
                  static_cast<long long>(config.seq),
                  static_cast<long long>(config.d_model), config.heads,
                  config.granularity, to_string(config.schedule).c_str(),
                  static_cast<unsigned long long>(config.seed), config.delay_ms,
                  config.reps, result.chunk_compute_ms, m.mean_ms,
                  m.latency_reduction_pct);
    csv << row << "\n";
  }
  return 0;
}

void ModelGrid::validate() const {
  if (n_values.empty() || c_values.empty() || d_values.empty() ||
      chunk_values.empty())
    throw UsageError("model grid must have at least one n, c, d and chunks value");
  for (int n : n_values)
    if (n < 1) throw UsageError("model grid: n must be >= 1");
  for (int ch : chunk_values)
    if (ch < 1) throw UsageError("model grid: chunks must be >= 1");
  for (double v : c_values)
    if (v < 0) throw UsageError("model grid: c must be >= 0");
  for (double v : d_values)
    if (v < 0) throw UsageError("model grid: d must be >= 0");
}

int run_model(const ModelGrid& grid, std::ostream& csv) {
  grid.validate();
  csv << kCostReportCsvHeader << "\n";

  std::vector<CostParams> points;
  for (int n : grid.n_values)
    for (double c : grid.c_values)
      for (double d : grid.d_values)
        for (int chunks : grid.chunk_values)
          points.push_back(CostParams{n, c, d, chunks});

  if (grid.include_calibration) {
    const CostParams calibration{4, 19.625, 14.6, 6};
    const bool present =
        std::any_of(points.begin(), points.end(), [&](const CostParams& p) {
          return p.n == calibration.n && p.c == calibration.c &&
                 p.d == calibration.d && p.chunks == calibration.chunks;
        });
    if (!present) points.push_back(calibration);
  }

  for (const CostParams& p : points)
    for (Strategy strategy :
         {Strategy::Baseline, Strategy::DataSlicing, Strategy::Fused})
      csv << to_csv_row(analytic_latency(strategy, p)) << "\n";
  return 0;
}

}  // namespace tpfuse
