#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace cyclescope {

using EventId = std::uint64_t;

// Timeline position in integer nanoseconds, relative to trace start.
using Nanos = std::int64_t;

enum class EventKind { Span, Instant, Counter, Flow };

enum class EventCategory {
  PythonCall,
  RuntimeApi,
  GpuKernel,
  MemCopy,
  OsSched,
  NetIo,
  CounterTelemetry,
  CollectiveComm,
};

enum class Collector { AppProbe, KernelProbe, DeviceProbe, Telemetry };

const char* to_string(EventKind kind);
const char* to_string(EventCategory category);
const char* to_string(Collector collector);
std::optional<EventKind> kind_from_phase(std::string_view ph);
std::optional<EventCategory> category_from_string(std::string_view s);
std::optional<Collector> collector_from_string(std::string_view s);

struct SourceId {
  std::string node = "local";
  Collector collector = Collector::AppProbe;
  std::string clock_domain = "reference";

  bool is_default() const {
    return node == "local" && collector == Collector::AppProbe &&
           clock_domain == "reference";
  }
  bool operator==(const SourceId&) const = default;
  auto operator<=>(const SourceId&) const = default;
};

// args values are restricted to scalars; nested input structures are
// flattened with dotted keys at parse time.
using ArgValue = std::variant<std::string, std::int64_t, double, bool>;
using ArgMap = std::map<std::string, ArgValue>;

struct Track {
  std::int64_t pid = 0;
  std::int64_t tid = 0;  // thread or device stream id

  bool operator==(const Track&) const = default;
  auto operator<=>(const Track&) const = default;
};

struct TraceEvent {
  EventId event_id = 0;
  EventKind kind = EventKind::Span;
  std::string name;
  EventCategory category = EventCategory::PythonCall;
  SourceId source;
  Nanos start_ts = 0;
  Nanos duration = 0;  // Span only; zero for Instant/Counter/Flow
  Track track;
  std::optional<std::uint64_t> correlation_id;
  ArgMap args;

  Nanos end_ts() const { return start_ts + duration; }
  bool operator==(const TraceEvent&) const = default;
};

// Typed args accessors; integers widen to double via arg_number.
std::optional<std::int64_t> arg_int(const TraceEvent& e, const std::string& key);
std::optional<double> arg_number(const TraceEvent& e, const std::string& key);
std::optional<std::string> arg_string(const TraceEvent& e, const std::string& key);

struct CounterSample {
  Nanos ts = 0;
  double value = 0.0;
  bool operator==(const CounterSample&) const = default;
};

struct CounterSeries {
  std::string metric;
  SourceId source;
  std::vector<CounterSample> samples;  // strictly increasing timestamps
};

// Events immutable after construction; ordering by (start_ts, event_id) is
// the canonical total order everywhere downstream.
struct Trace {
  std::vector<TraceEvent> events;
  bool calibrated = false;

  void sort_events();
  bool is_sorted() const;
};

inline bool event_order(const TraceEvent& a, const TraceEvent& b) {
  if (a.start_ts != b.start_ts) return a.start_ts < b.start_ts;
  return a.event_id < b.event_id;
}

// Counter series extracted per metric name. Samples from all sources carrying
// the same metric are merged in timestamp order; metric names match
// case-sensitively.
class CounterTable {
public:
  static CounterTable from_trace(const Trace& trace);

  const CounterSeries* find(const std::string& metric) const;
  const std::map<std::string, CounterSeries>& all() const { return series_; }

private:
  std::map<std::string, CounterSeries> series_;
};

struct ValidationIssue {
  enum class Severity { Error, Warning };

  Severity severity = Severity::Error;
  std::string code;     // stable identifier, e.g. "non_monotone_counter"
  std::string message;
  std::optional<std::size_t> byte_offset;  // for malformed input records
  std::optional<EventId> event_id;
};

struct ValidationReport {
  std::size_t event_count = 0;
  std::map<EventCategory, std::size_t> category_counts;
  std::vector<ValidationIssue> issues;

  std::size_t error_count() const;
  std::size_t warning_count() const;
  bool ok() const { return error_count() == 0; }
  std::string summary() const;
};

// Structural validation: per-category counts, unmatched correlation ids,
// non-monotone counter series, malformed args. Never throws; a report with
// zero errors means the trace is accepted by every downstream module.
ValidationReport validate_trace(const Trace& trace);
ValidationReport validate_trace(const Trace& trace,
                                std::vector<ValidationIssue> parse_issues);

}  // namespace cyclescope
