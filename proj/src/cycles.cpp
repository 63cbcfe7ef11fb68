#include "cyclescope/cycles.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <deque>

#include "cyclescope/errors.hpp"

namespace cyclescope {

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::Prefill: return "prefill";
    case Stage::Decode: return "decode";
    case Stage::Unknown: return "unknown";
  }
  return "?";
}

namespace {

struct NameStats {
  std::size_t count = 0;
  double sum = 0.0;
  double sum_sq = 0.0;
  std::vector<Nanos> starts;
};

double gap_cv(const std::vector<Nanos>& starts) {
  if (starts.size() < 3) return 0.0;
  double sum = 0.0, sum_sq = 0.0;
  const auto n = starts.size() - 1;
  for (std::size_t i = 1; i < starts.size(); ++i) {
    const double gap = static_cast<double>(starts[i] - starts[i - 1]);
    sum += gap;
    sum_sq += gap * gap;
  }
  const double mean = sum / static_cast<double>(n);
  if (mean <= 0.0) return 0.0;
  const double var = std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean);
  return std::sqrt(var) / mean;
}

}  // namespace

std::vector<AnchorCandidate> rank_anchor_candidates(const Trace& trace,
                                                    const CycleConfig& config) {
  std::map<std::string, NameStats> stats;
  for (const auto& e : trace.events) {
    if (e.kind != EventKind::Span || e.category != EventCategory::PythonCall)
      continue;
    auto& s = stats[e.name];
    s.count++;
    const double d = static_cast<double>(e.duration);
    s.sum += d;
    s.sum_sq += d * d;
    s.starts.push_back(e.start_ts);
  }

  std::vector<AnchorCandidate> candidates;
  for (const auto& [name, s] : stats) {
    if (s.count < config.min_anchor_calls) continue;
    AnchorCandidate c;
    c.name = name;
    c.call_count = s.count;
    c.mean_duration_ns = s.sum / static_cast<double>(s.count);
    double cv = 0.0;
    if (c.mean_duration_ns > 0.0) {
      const double var = std::max(
          0.0, s.sum_sq / static_cast<double>(s.count) -
                   c.mean_duration_ns * c.mean_duration_ns);
      cv = std::sqrt(var) / c.mean_duration_ns;
    }
    c.duration_cv = cv;
    c.periodicity = 1.0 / (1.0 + gap_cv(s.starts));
    c.score = static_cast<double>(s.count) / (1.0 + cv);
    candidates.push_back(std::move(c));
  }

  std::sort(candidates.begin(), candidates.end(),
            [](const AnchorCandidate& a, const AnchorCandidate& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.name < b.name;
            });
  return candidates;
}

AnchorCandidate discover_anchor(const Trace& trace, const CycleConfig& config) {
  if (!config.anchor_hint.empty()) {
    auto all = rank_anchor_candidates(trace, config);
    for (auto& c : all)
      if (c.name == config.anchor_hint) return c;
    // honor the hint even when the function is rare
    AnchorCandidate c;
    c.name = config.anchor_hint;
    for (const auto& e : trace.events)
      if (e.kind == EventKind::Span && e.name == config.anchor_hint)
        c.call_count++;
    if (c.call_count == 0)
      throw NoAnchorFound("anchor hint '" + config.anchor_hint +
                          "' never occurs in the trace");
    return c;
  }
  auto candidates = rank_anchor_candidates(trace, config);
  if (candidates.empty())
    throw NoAnchorFound("no python call exceeds the minimum call count of " +
                        std::to_string(config.min_anchor_calls));
  return candidates.front();
}

std::vector<EventId> Cycle::contained_ids(const Trace& trace) const {
  std::vector<EventId> ids;
  ids.reserve(last_event - first_event);
  for (std::size_t i = first_event; i < last_event; ++i)
    ids.push_back(trace.events[i].event_id);
  return ids;
}

std::vector<Cycle> segment(const Trace& trace, const std::string& anchor_name,
                           const CycleConfig& config) {
  struct AnchorOccurrence {
    Nanos start;
    Nanos end;
    EventId id;
  };
  std::vector<AnchorOccurrence> anchors;
  for (const auto& e : trace.events) {
    if (e.kind == EventKind::Span && e.name == anchor_name)
      anchors.push_back({e.start_ts, e.end_ts(), e.event_id});
  }
  std::vector<Cycle> cycles;
  if (anchors.size() < 2) return cycles;

  // events are in canonical order, so containment is a contiguous index range
  const auto& events = trace.events;
  auto lower_index = [&](Nanos ts) {
    return static_cast<std::size_t>(
        std::lower_bound(events.begin(), events.end(), ts,
                         [](const TraceEvent& e, Nanos t) {
                           return e.start_ts < t;
                         }) -
        events.begin());
  };

  cycles.reserve(anchors.size() - 1);
  for (std::size_t i = 0; i + 1 < anchors.size(); ++i) {
    Cycle c;
    c.index = i;
    c.start_ts = anchors[i].start;
    c.end_ts = anchors[i + 1].start;
    c.anchor_event_id = anchors[i].id;
    c.anchor_span_end = anchors[i].end;
    c.first_event = lower_index(c.start_ts);
    c.last_event = lower_index(c.end_ts);

    for (const auto& phase : config.phase_functions)
      c.component_durations[phase] = 0;
    for (std::size_t j = c.first_event; j < c.last_event; ++j) {
      const auto& e = events[j];
      if (e.kind != EventKind::Span) continue;
      auto it = c.component_durations.find(e.name);
      if (it == c.component_durations.end()) continue;
      const Nanos clipped_end = std::min(e.end_ts(), c.end_ts);
      it->second += std::max<Nanos>(0, clipped_end - e.start_ts);
    }
    cycles.push_back(std::move(c));
  }
  return cycles;
}

namespace {

bool name_matches(const std::string& name,
                  const std::vector<std::string>& keywords) {
  for (const auto& kw : keywords)
    if (name.find(kw) != std::string::npos) return true;
  return false;
}

double median(std::deque<double> values) {
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 == 1 ? values[n / 2]
                    : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

void classify_stages(std::vector<Cycle>& cycles, const Trace& trace,
                     const CycleConfig& config) {
  std::deque<double> decode_durations;
  std::deque<double> decode_gaps;

  Nanos prev_anchor_end = 0;
  bool have_prev = false;

  for (auto& cycle : cycles) {
    const double idle_gap =
        have_prev ? static_cast<double>(cycle.start_ts - prev_anchor_end) : -1.0;

    Stage stage = Stage::Unknown;
    bool prefill_kw = false, decode_kw = false;
    std::optional<std::string> forward_mode;
    for (std::size_t j = cycle.first_event; j < cycle.last_event && !forward_mode;
         ++j) {
      const auto& e = trace.events[j];
      if (auto mode = arg_string(e, config.forward_mode_key)) forward_mode = mode;
    }
    if (forward_mode) {
      std::string mode = *forward_mode;
      std::transform(mode.begin(), mode.end(), mode.begin(),
                     [](unsigned char c) { return std::tolower(c); });
      if (mode.find("prefill") != std::string::npos ||
          mode.find("extend") != std::string::npos) {
        stage = Stage::Prefill;
      } else if (mode.find("decode") != std::string::npos) {
        stage = Stage::Decode;
      }
    }
    if (stage == Stage::Unknown) {
      for (std::size_t j = cycle.first_event; j < cycle.last_event; ++j) {
        const auto& e = trace.events[j];
        if (e.kind != EventKind::Span) continue;
        prefill_kw = prefill_kw || name_matches(e.name, config.prefill_keywords);
        decode_kw = decode_kw || name_matches(e.name, config.decode_keywords);
      }
      if (prefill_kw != decode_kw) stage = prefill_kw ? Stage::Prefill : Stage::Decode;
    }
    if (stage == Stage::Unknown && decode_durations.size() >= config.stage_min_history &&
        idle_gap >= 0.0) {
      const double med_dur = median(decode_durations);
      const double med_gap = std::max(1.0, median(decode_gaps));
      const bool long_cycle =
          static_cast<double>(cycle.duration()) >
          config.prefill_duration_factor * med_dur;
      const bool long_gap = idle_gap > config.prefill_gap_factor * med_gap;
      stage = (long_cycle && long_gap) ? Stage::Prefill : Stage::Decode;
    }

    cycle.stage = stage;
    // unknown cycles feed the trailing stats as presumed decodes, otherwise
    // a trace without name/args signals could never bootstrap the heuristic
    if (stage != Stage::Prefill) {
      decode_durations.push_back(static_cast<double>(cycle.duration()));
      if (idle_gap >= 0.0) decode_gaps.push_back(idle_gap);
      while (decode_durations.size() > config.stage_window)
        decode_durations.pop_front();
      while (decode_gaps.size() > config.stage_window) decode_gaps.pop_front();
    }
    prev_anchor_end = cycle.anchor_span_end;
    have_prev = true;
  }
}

WorkloadFeatures extract_workload(const Cycle& cycle, const Trace& trace,
                                  const CycleConfig& config) {
  for (std::size_t j = cycle.first_event; j < cycle.last_event; ++j) {
    const auto& e = trace.events[j];
    auto batch = arg_int(e, config.batch_size_key);
    if (!batch) continue;
    auto input_len = arg_int(e, config.input_len_key);
    auto output_len = arg_int(e, config.output_len_key);
    if (!input_len || !output_len)
      throw MissingWorkloadArgs("cycle " + std::to_string(cycle.index) +
                                ": event carries " + config.batch_size_key +
                                " but lacks length args");
    if (*batch < 0 || *input_len < 0 || *output_len < 0)
      throw MissingWorkloadArgs("cycle " + std::to_string(cycle.index) +
                                ": negative workload args");
    WorkloadFeatures w;
    w.batch = *batch;
    w.input_len = *input_len;
    w.output_len = *output_len;
    w.stage = cycle.stage;
    return w;
  }
  throw MissingWorkloadArgs("cycle " + std::to_string(cycle.index) +
                            ": no event carries '" + config.batch_size_key +
                            "'");
}

std::vector<Cycle> segment_by_frequency(const Trace& trace,
                                        const CycleConfig& config) {
  std::vector<Nanos> starts;
  for (const auto& e : trace.events)
    if (e.kind == EventKind::Span && e.category == EventCategory::GpuKernel)
      starts.push_back(e.start_ts);
  std::vector<Cycle> cycles;
  if (starts.size() < 4) return cycles;

  const Nanos t0 = starts.front();
  const Nanos t1 = starts.back();
  const auto bins =
      static_cast<std::size_t>((t1 - t0) / config.frequency_bin_ns) + 1;
  if (bins < 4) return cycles;
  std::vector<double> hist(bins, 0.0);
  for (const auto ts : starts)
    hist[static_cast<std::size_t>((ts - t0) / config.frequency_bin_ns)] += 1.0;

  double mean = 0.0;
  for (double h : hist) mean += h;
  mean /= static_cast<double>(bins);
  for (double& h : hist) h -= mean;

  // autocorrelation peak over lags >= 1 picks the fundamental period
  const std::size_t max_lag = bins / 2;
  double best = 0.0;
  std::size_t best_lag = 0;
  for (std::size_t lag = 1; lag <= max_lag; ++lag) {
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < bins; ++i) acc += hist[i] * hist[i + lag];
    if (acc > best) {
      best = acc;
      best_lag = lag;
    }
  }
  if (best_lag == 0) return cycles;

  const Nanos period = static_cast<Nanos>(best_lag) * config.frequency_bin_ns;
  const auto& events = trace.events;
  auto lower_index = [&](Nanos ts) {
    return static_cast<std::size_t>(
        std::lower_bound(events.begin(), events.end(), ts,
                         [](const TraceEvent& e, Nanos t) {
                           return e.start_ts < t;
                         }) -
        events.begin());
  };
  std::size_t index = 0;
  for (Nanos start = t0; start + period <= t1; start += period) {
    Cycle c;
    c.index = index++;
    c.start_ts = start;
    c.end_ts = start + period;
    c.stage = Stage::Unknown;
    c.first_event = lower_index(c.start_ts);
    c.last_event = lower_index(c.end_ts);
    c.anchor_span_end = start;
    cycles.push_back(std::move(c));
  }
  return cycles;
}

std::vector<Cycle> segment_and_classify(const Trace& trace,
                                        const CycleConfig& config) {
  std::vector<Cycle> cycles;
  try {
    const auto anchor = discover_anchor(trace, config);
    cycles = segment(trace, anchor.name, config);
  } catch (const NoAnchorFound&) {
    cycles = segment_by_frequency(trace, config);
    if (cycles.empty()) throw;
  }
  classify_stages(cycles, trace, config);
  return cycles;
}

std::vector<CycleRecord> build_cycle_records(const Trace& trace,
                                             const CycleConfig& config,
                                             const PipelineOptions& options) {
  const auto cycles = segment_and_classify(trace, config);
  return build_cycle_records(trace, cycles, config, options);
}

std::vector<CycleRecord> build_cycle_records(const Trace& trace,
                                             std::span<const Cycle> cycles,
                                             const CycleConfig& config,
                                             const PipelineOptions& options) {
  std::vector<CycleRecord> records;
  records.reserve(cycles.size());
  for (const auto& cycle : cycles) {
    if (!options.include_prefill && cycle.stage == Stage::Prefill) continue;
    CycleRecord rec;
    rec.cycle_index = cycle.index;
    rec.start_ts = cycle.start_ts;
    rec.stage = cycle.stage;
    try {
      rec.workload = extract_workload(cycle, trace, config);
    } catch (const MissingWorkloadArgs&) {
      continue;  // unmodelable cycle (e.g. idle filler), skip
    }

    Nanos target = cycle.duration();
    if (!options.latency_component.empty()) {
      auto it = cycle.component_durations.find(options.latency_component);
      if (it != cycle.component_durations.end() && it->second > 0)
        target = it->second;
    }
    rec.latency_s = static_cast<double>(target) * 1e-9;

    if (!options.extra_args_prefix.empty()) {
      for (std::size_t j = cycle.first_event; j < cycle.last_event; ++j) {
        const auto& e = trace.events[j];
        for (const auto& [key, value] : e.args) {
          if (key.rfind(options.extra_args_prefix, 0) != 0) continue;
          if (const auto* d = std::get_if<double>(&value))
            rec.extra[key] = *d;
          else if (const auto* i = std::get_if<std::int64_t>(&value))
            rec.extra[key] = static_cast<double>(*i);
          else if (const auto* b = std::get_if<bool>(&value))
            rec.extra[key] = *b ? 1.0 : 0.0;
        }
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace cyclescope
