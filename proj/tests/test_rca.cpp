#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cyclescope/errors.hpp"
#include "cyclescope/rca.hpp"
#include "cyclescope/rng.hpp"
#include "cyclescope/simkit.hpp"
#include "oracles.hpp"

using namespace cyclescope;

namespace {

CounterSeries series_of(std::vector<CounterSample> samples) {
  CounterSeries s;
  s.metric = "m";
  s.samples = std::move(samples);
  return s;
}

}  // namespace

TEST_CASE("interpolated mean over a rising segment is the midpoint value") {
  const auto s = series_of({{0, 10.0}, {10, 30.0}});
  CHECK(interpolate_mean(s, 2, 8) == doctest::Approx(20.0));
  // narrower asymmetric span
  CHECK(interpolate_mean(s, 2, 3) == doctest::Approx(15.0));
}

TEST_CASE("constant series yields its value over any span") {
  const auto s = series_of({{0, 5.0}, {100, 5.0}});
  CHECK(interpolate_mean(s, -50, 20) == doctest::Approx(5.0));
  CHECK(interpolate_mean(s, 40, 60) == doctest::Approx(5.0));
}

TEST_CASE("spans beyond the samples clamp to the nearest value") {
  const auto s = series_of({{0, 3.0}, {10, 7.0}});
  CHECK(interpolate_mean(s, 20, 30) == doctest::Approx(7.0));
  CHECK(interpolate_mean(s, -20, -10) == doctest::Approx(3.0));
}

TEST_CASE("empty series and empty span are errors") {
  CounterSeries empty;
  empty.metric = "m";
  CHECK_THROWS_AS(interpolate_mean(empty, 0, 10), EmptySeries);
  const auto s = series_of({{0, 1.0}});
  CHECK_THROWS_AS(interpolate_mean(s, 10, 10), EmptySeries);
}

TEST_CASE("interpolated mean matches a dense Riemann sum on random series") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    CounterSeries s;
    s.metric = "m";
    Nanos t = 0;
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 30));
    for (int i = 0; i < n; ++i) {
      t += static_cast<Nanos>(rng.uniform_int(1, 1000));
      s.samples.push_back({t, rng.uniform(0.0, 100.0)});
    }
    const Nanos lo = -100 + static_cast<Nanos>(rng.uniform_int(0, t));
    const Nanos hi = lo + 1 + static_cast<Nanos>(rng.uniform_int(1, 800));
    const double exact = interpolate_mean(s, lo, hi);
    const double approx = cyclescope::testing::riemann_mean(s, lo, hi, 20000);
    CAPTURE(trial);
    CHECK(exact == doctest::Approx(approx).epsilon(1e-4));
  }
}

namespace {

Trace single_cycle_trace(std::vector<TraceEvent> extra) {
  Trace trace;
  EventId id = 1;
  auto add_span = [&](const char* name, Nanos start, Nanos dur,
                      EventCategory cat) {
    TraceEvent e;
    e.event_id = id++;
    e.kind = EventKind::Span;
    e.name = name;
    e.category = cat;
    e.start_ts = start;
    e.duration = dur;
    trace.events.push_back(e);
  };
  add_span("run_batch", 0, 9'800'000, EventCategory::PythonCall);
  add_span("run_batch", 10'000'000, 9'800'000, EventCategory::PythonCall);
  for (auto& e : extra) {
    e.event_id = id++;
    trace.events.push_back(e);
  }
  trace.sort_events();
  return trace;
}

}  // namespace

TEST_CASE("beta sums class spans over the cycle duration") {
  TraceEvent a, b;
  a.kind = b.kind = EventKind::Span;
  a.category = b.category = EventCategory::OsSched;
  a.name = b.name = "oncpu";
  a.start_ts = 1'000'000;
  a.duration = 900'000;
  b.start_ts = 5'000'000;
  b.duration = 2'000'000;
  const auto trace = single_cycle_trace({a, b});

  CycleConfig config;
  auto cycles = segment(trace, "run_batch", config);
  REQUIRE(cycles.size() == 1);
  const auto stats = cycle_stats(cycles[0], trace, CounterTable{}, MetricMap{});
  REQUIRE(stats.classes.count("oncpu") == 1);
  CHECK(stats.classes.at("oncpu").beta == doctest::Approx(0.29));
  CHECK(!stats.classes.at("oncpu").mu.has_value());  // no metric mapped
  CHECK(stats.classes.count("absent") == 0);
}

TEST_CASE("mu weights interpolated counter means by span duration") {
  // two spans: 1 ms where the counter reads 10, 3 ms where it reads 30
  TraceEvent a, b;
  a.kind = b.kind = EventKind::Span;
  a.category = b.category = EventCategory::OsSched;
  a.name = b.name = "oncpu";
  a.start_ts = 1'000'000;
  a.duration = 1'000'000;
  b.start_ts = 5'000'000;
  b.duration = 3'000'000;

  TraceEvent c1, c2;
  c1.kind = c2.kind = EventKind::Counter;
  c1.category = c2.category = EventCategory::CounterTelemetry;
  c1.name = c2.name = "cpu_usage";
  c1.start_ts = 0;
  c1.args["value"] = 10.0;
  c2.start_ts = 4'000'000;
  c2.args["value"] = 30.0;
  // flat at 10 through span a; flat at 30 through span b
  TraceEvent c15 = c1;
  c15.start_ts = 3'000'000;
  c15.args["value"] = 10.0;

  const auto trace = single_cycle_trace({a, b, c1, c15, c2});
  const auto counters = CounterTable::from_trace(trace);

  CycleConfig config;
  auto cycles = segment(trace, "run_batch", config);
  const auto stats =
      cycle_stats(cycles[0], trace, counters, MetricMap::defaults());
  REQUIRE(stats.classes.at("oncpu").mu.has_value());
  // weighted: (1ms * 10 + 3ms * 30) / 4ms = 25
  CHECK(*stats.classes.at("oncpu").mu == doctest::Approx(25.0).epsilon(0.02));
}

namespace {

// windows with exact sample statistics: values mean +- d give sample sigma
// exactly `sigma` when d = sigma * sqrt((n-1)/n)
std::vector<CycleClassStats> window_with(const std::string& cls, std::size_t n,
                                         double beta_mean, double beta_sigma,
                                         double mu_value) {
  std::vector<CycleClassStats> cycles;
  const double d =
      beta_sigma * std::sqrt(static_cast<double>(n - 1) / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    CycleClassStats c;
    c.cycle_index = i;
    c.cycle_duration = 1'000'000;
    ClassStat stat;
    stat.beta = beta_mean + ((i % 2 == 0) ? d : -d);
    stat.mu = mu_value;
    stat.metric = "m";
    c.classes[cls] = stat;
    cycles.push_back(std::move(c));
  }
  return cycles;
}

}  // namespace

TEST_CASE("suspicion score matches the hand-evaluated formula") {
  // beta: norm mean 0.10 sigma 0.02, abn mean 0.20 -> Z_beta = 5
  // mu: norm constant m, abn shifted so Z_logmu = 3 via the sigma floor
  const double m = 100.0;
  const double log_norm = std::log1p(m);
  const double mu_abn = std::exp(log_norm * 1.03) - 1.0;  // +3% in log space

  auto norm = window_with("x", 20, 0.10, 0.02, m);
  auto abn = window_with("x", 10, 0.20, 0.0, mu_abn);

  const auto entries = suspicion_rank(norm, abn);
  REQUIRE(entries.size() == 1);
  const auto& e = entries[0];
  CHECK(e.z_beta == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(e.z_log_mu == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(e.delta_beta == doctest::Approx(0.10).epsilon(1e-9));
  CHECK(e.score == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(e.metric == "m");
  CHECK(e.welch_p < 1e-6);
}

TEST_CASE("identical windows produce near-zero scores") {
  auto norm = window_with("x", 20, 0.10, 0.02, 50.0);
  auto abn = window_with("x", 10, 0.10, 0.02, 50.0);
  const auto entries = suspicion_rank(norm, abn);
  REQUIRE(entries.size() == 1);
  CHECK(std::abs(entries[0].score) < 1e-6);
  CHECK(entries[0].welch_p > 0.5);
}

TEST_CASE("window size preconditions") {
  auto norm = window_with("x", 9, 0.1, 0.02, 1.0);
  auto abn = window_with("x", 3, 0.2, 0.02, 1.0);
  CHECK_THROWS_AS(suspicion_rank(norm, abn), InsufficientCycles);
  auto norm10 = window_with("x", 10, 0.1, 0.02, 1.0);
  auto abn2 = window_with("x", 2, 0.2, 0.02, 1.0);
  CHECK_THROWS_AS(suspicion_rank(norm10, abn2), InsufficientCycles);
}

TEST_CASE("score zero when beta is unchanged, regardless of mu shifts") {
  auto norm = window_with("x", 16, 0.25, 0.01, 10.0);
  auto abn = window_with("x", 6, 0.25, 0.0, 500.0);  // huge mu move only
  // make abn beta mean exactly equal to norm's
  const auto entries = suspicion_rank(norm, abn);
  REQUIRE(entries.size() == 1);
  CHECK(entries[0].delta_beta == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(entries[0].score == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("ranking is deterministic with lexicographic tie-break") {
  auto norm_a = window_with("alpha", 12, 0.1, 0.01, 1.0);
  auto norm_b = window_with("beta", 12, 0.1, 0.01, 1.0);
  std::vector<CycleClassStats> norm;
  for (std::size_t i = 0; i < norm_a.size(); ++i) {
    CycleClassStats merged = norm_a[i];
    merged.classes.insert(norm_b[i].classes.begin(), norm_b[i].classes.end());
    norm.push_back(std::move(merged));
  }
  auto abn_a = window_with("alpha", 4, 0.3, 0.0, 1.0);
  auto abn_b = window_with("beta", 4, 0.3, 0.0, 1.0);
  std::vector<CycleClassStats> abn;
  for (std::size_t i = 0; i < abn_a.size(); ++i) {
    CycleClassStats merged = abn_a[i];
    merged.classes.insert(abn_b[i].classes.begin(), abn_b[i].classes.end());
    abn.push_back(std::move(merged));
  }
  const auto entries = suspicion_rank(norm, abn);
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].score == doctest::Approx(entries[1].score));
  CHECK(entries[0].event_class == "alpha");
}

TEST_CASE("welch p-value agrees with t-distribution reference points") {
  // equal-variance, equal-n case: t = 2.228 at df = 10 -> p = 0.05 two-sided
  // construct two n=6 samples with the right means/variances
  const double t_ref = 2.228, df = 10.0, n = 6.0;
  // choose var = 1 for both: t = delta / sqrt(2/n) -> delta = t*sqrt(2/n)
  const double delta = t_ref * std::sqrt(2.0 / n);
  const double p = welch_p_value(delta, 1.0, 6, 0.0, 1.0, 6);
  CHECK(p == doctest::Approx(0.05).epsilon(0.01));
  (void)df;

  CHECK(welch_p_value(0.0, 1.0, 10, 0.0, 1.0, 10) == doctest::Approx(1.0));
  CHECK(welch_p_value(10.0, 0.1, 30, 0.0, 0.1, 30) < 1e-9);
}

TEST_CASE("straggler attribution points at the deviating rank") {
  // 4-rank group; rank 2's reduce occupancy inflates 5x in the abnormal window
  auto make_window = [&](std::size_t n, double straggler_beta) {
    std::vector<CycleClassStats> cycles;
    for (std::size_t i = 0; i < n; ++i) {
      CycleClassStats c;
      c.cycle_index = i;
      c.cycle_duration = 1'000'000;
      ClassStat stat;
      stat.beta = 0.1;
      c.classes["reduce"] = stat;
      for (int r = 0; r < 4; ++r)
        c.collective_rank_beta[{"reduce", "comm0", r}] =
            r == 2 ? straggler_beta : 0.1;
      cycles.push_back(std::move(c));
    }
    return cycles;
  };
  const auto norm = make_window(12, 0.1);
  const auto abn = make_window(5, 0.5);

  TopologyMap topology;
  for (int r = 0; r < 4; ++r)
    topology.insert("comm0", r, {"node-0" + std::to_string(r / 2), r % 2});

  auto entries = suspicion_rank(norm, abn);
  attribute_straggler(entries, topology, norm, abn);
  REQUIRE(!entries.empty());
  const auto* reduce_entry = &entries[0];
  for (const auto& e : entries)
    if (e.event_class == "reduce") reduce_entry = &e;
  REQUIRE(reduce_entry->attribution.has_value());
  CHECK(reduce_entry->attribution->rank == 2);
  REQUIRE(reduce_entry->attribution->location.has_value());
  CHECK(reduce_entry->attribution->location->label() == "node-01/gpu0");
}

TEST_CASE("single-rank groups get no attribution; unmapped ranks stay annotated") {
  auto make_window = [&](std::size_t n, double b, int ranks) {
    std::vector<CycleClassStats> cycles;
    for (std::size_t i = 0; i < n; ++i) {
      CycleClassStats c;
      c.cycle_duration = 1'000'000;
      ClassStat stat;
      stat.beta = b;
      c.classes["reduce"] = stat;
      for (int r = 0; r < ranks; ++r)
        c.collective_rank_beta[{"reduce", "comm0", r}] = b * (r == 1 ? 3 : 1);
      cycles.push_back(std::move(c));
    }
    return cycles;
  };

  // degenerate group of one: nothing to attribute
  {
    const auto norm = make_window(12, 0.1, 1);
    const auto abn = make_window(5, 0.4, 1);
    auto entries = suspicion_rank(norm, abn);
    attribute_straggler(entries, TopologyMap{}, norm, abn);
    for (const auto& e : entries) CHECK(!e.attribution.has_value());
  }

  // rank missing from the topology map: annotated, not dropped
  {
    const auto norm = make_window(12, 0.1, 4);
    const auto abn = make_window(5, 0.4, 4);
    auto entries = suspicion_rank(norm, abn);
    TopologyMap sparse;
    sparse.insert("comm0", 0, {"n0", 0});  // rank 1 unmapped
    attribute_straggler(entries, sparse, norm, abn);
    const SuspicionEntry* reduce_entry = nullptr;
    for (const auto& e : entries)
      if (e.event_class == "reduce") reduce_entry = &e;
    REQUIRE(reduce_entry != nullptr);
    REQUIRE(reduce_entry->attribution.has_value());
    CHECK(reduce_entry->attribution->rank == 1);
    CHECK(!reduce_entry->attribution->location.has_value());
  }
}

TEST_CASE("scores are invariant under uniform time rescaling") {
  // same trace with all timestamps and durations doubled: betas are ratios
  // and mu values are unchanged, so the ranking must be identical
  auto workloads = generate_workload(WorkloadProfile{}, 260, 5);
  FaultSpec fault;
  fault.family = FaultFamily::CpuContention;
  fault.onset = 150;
  fault.duration = 60;
  fault.severity = 7.0;
  auto dataset =
      synthesize_trace(workloads, GroundTruthModel{}, {&fault, 1}, {}, 3);

  auto compute_entries = [](const Trace& trace) {
    CycleConfig config;
    auto cycles = segment_and_classify(trace, config);
    const auto counters = CounterTable::from_trace(trace);
    const auto metric_map = MetricMap::defaults();
    std::vector<CycleClassStats> norm, abn;
    for (const auto& c : cycles) {
      if (c.stage == Stage::Prefill) continue;
      if (c.index >= 150 && c.index < 210)
        abn.push_back(cycle_stats(c, trace, counters, metric_map));
      else if (c.index < 150)
        norm.push_back(cycle_stats(c, trace, counters, metric_map));
    }
    return suspicion_rank(norm, abn);
  };

  const auto base_entries = compute_entries(dataset.trace);

  Trace scaled = dataset.trace;
  for (auto& e : scaled.events) {
    e.start_ts *= 2;
    e.duration *= 2;
  }
  const auto scaled_entries = compute_entries(scaled);

  REQUIRE(base_entries.size() == scaled_entries.size());
  for (std::size_t i = 0; i < base_entries.size(); ++i) {
    CHECK(base_entries[i].event_class == scaled_entries[i].event_class);
    CHECK(base_entries[i].score ==
          doctest::Approx(scaled_entries[i].score).epsilon(1e-6));
  }
  CHECK(base_entries.front().event_class == "oncpu");
}
