#include "cyclescope/trace.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace cyclescope {

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::Span: return "span";
    case EventKind::Instant: return "instant";
    case EventKind::Counter: return "counter";
    case EventKind::Flow: return "flow";
  }
  return "?";
}

const char* to_string(EventCategory category) {
  switch (category) {
    case EventCategory::PythonCall: return "python_call";
    case EventCategory::RuntimeApi: return "runtime_api";
    case EventCategory::GpuKernel: return "gpu_kernel";
    case EventCategory::MemCopy: return "mem_copy";
    case EventCategory::OsSched: return "os_sched";
    case EventCategory::NetIo: return "net_io";
    case EventCategory::CounterTelemetry: return "counter_telemetry";
    case EventCategory::CollectiveComm: return "collective_comm";
  }
  return "?";
}

const char* to_string(Collector collector) {
  switch (collector) {
    case Collector::AppProbe: return "app_probe";
    case Collector::KernelProbe: return "kernel_probe";
    case Collector::DeviceProbe: return "device_probe";
    case Collector::Telemetry: return "telemetry";
  }
  return "?";
}

std::optional<EventKind> kind_from_phase(std::string_view ph) {
  if (ph == "X") return EventKind::Span;
  if (ph == "i" || ph == "I") return EventKind::Instant;
  if (ph == "C") return EventKind::Counter;
  if (ph == "s" || ph == "f" || ph == "t") return EventKind::Flow;
  return std::nullopt;
}

std::optional<EventCategory> category_from_string(std::string_view s) {
  static const std::unordered_map<std::string_view, EventCategory> table = {
      {"python_call", EventCategory::PythonCall},
      {"runtime_api", EventCategory::RuntimeApi},
      {"gpu_kernel", EventCategory::GpuKernel},
      {"mem_copy", EventCategory::MemCopy},
      {"os_sched", EventCategory::OsSched},
      {"net_io", EventCategory::NetIo},
      {"counter_telemetry", EventCategory::CounterTelemetry},
      {"collective_comm", EventCategory::CollectiveComm},
  };
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::optional<Collector> collector_from_string(std::string_view s) {
  if (s == "app_probe") return Collector::AppProbe;
  if (s == "kernel_probe") return Collector::KernelProbe;
  if (s == "device_probe") return Collector::DeviceProbe;
  if (s == "telemetry") return Collector::Telemetry;
  return std::nullopt;
}

std::optional<std::int64_t> arg_int(const TraceEvent& e, const std::string& key) {
  auto it = e.args.find(key);
  if (it == e.args.end()) return std::nullopt;
  if (const auto* v = std::get_if<std::int64_t>(&it->second)) return *v;
  if (const auto* v = std::get_if<double>(&it->second))
    return static_cast<std::int64_t>(*v);
  if (const auto* v = std::get_if<bool>(&it->second)) return *v ? 1 : 0;
  return std::nullopt;
}

std::optional<double> arg_number(const TraceEvent& e, const std::string& key) {
  auto it = e.args.find(key);
  if (it == e.args.end()) return std::nullopt;
  if (const auto* v = std::get_if<double>(&it->second)) return *v;
  if (const auto* v = std::get_if<std::int64_t>(&it->second))
    return static_cast<double>(*v);
  if (const auto* v = std::get_if<bool>(&it->second)) return *v ? 1.0 : 0.0;
  return std::nullopt;
}

std::optional<std::string> arg_string(const TraceEvent& e, const std::string& key) {
  auto it = e.args.find(key);
  if (it == e.args.end()) return std::nullopt;
  if (const auto* v = std::get_if<std::string>(&it->second)) return *v;
  return std::nullopt;
}

void Trace::sort_events() {
  std::stable_sort(events.begin(), events.end(), event_order);
}

bool Trace::is_sorted() const {
  return std::is_sorted(events.begin(), events.end(), event_order);
}

CounterTable CounterTable::from_trace(const Trace& trace) {
  CounterTable table;
  for (const auto& e : trace.events) {
    if (e.kind != EventKind::Counter) continue;
    auto value = arg_number(e, "value");
    if (!value) continue;  // validation reports this separately
    auto& series = table.series_[e.name];
    if (series.metric.empty()) {
      series.metric = e.name;
      series.source = e.source;
    }
    series.samples.push_back({e.start_ts, *value});
  }
  for (auto& [metric, series] : table.series_) {
    std::stable_sort(series.samples.begin(), series.samples.end(),
                     [](const CounterSample& a, const CounterSample& b) {
                       return a.ts < b.ts;
                     });
  }
  return table;
}

const CounterSeries* CounterTable::find(const std::string& metric) const {
  auto it = series_.find(metric);
  return it == series_.end() ? nullptr : &it->second;
}

std::size_t ValidationReport::error_count() const {
  std::size_t n = 0;
  for (const auto& issue : issues)
    if (issue.severity == ValidationIssue::Severity::Error) ++n;
  return n;
}

std::size_t ValidationReport::warning_count() const {
  return issues.size() - error_count();
}

std::string ValidationReport::summary() const {
  std::ostringstream os;
  os << event_count << " events, " << error_count() << " errors, "
     << warning_count() << " warnings";
  return os.str();
}

namespace {

void check_correlations(const Trace& trace, ValidationReport& report) {
  // host side = RuntimeApi; device side = GpuKernel or MemCopy
  std::unordered_map<std::uint64_t, int> host_count;
  std::unordered_map<std::uint64_t, int> device_count;
  for (const auto& e : trace.events) {
    if (!e.correlation_id) continue;
    if (e.category == EventCategory::RuntimeApi) {
      host_count[*e.correlation_id]++;
    } else if (e.category == EventCategory::GpuKernel ||
               e.category == EventCategory::MemCopy) {
      device_count[*e.correlation_id]++;
    }
  }
  for (const auto& e : trace.events) {
    if (!e.correlation_id) continue;
    const auto id = *e.correlation_id;
    const bool device_side = e.category == EventCategory::GpuKernel ||
                             e.category == EventCategory::MemCopy;
    const bool host_side = e.category == EventCategory::RuntimeApi;
    if (device_side) {
      if (device_count[id] > 1) {
        report.issues.push_back({ValidationIssue::Severity::Error,
                                 "duplicate_correlation",
                                 "correlation id " + std::to_string(id) +
                                     " appears on multiple device events",
                                 std::nullopt, e.event_id});
      } else if (host_count.find(id) == host_count.end()) {
        report.issues.push_back({ValidationIssue::Severity::Warning,
                                 "unmatched_correlation",
                                 "device event '" + e.name +
                                     "' has correlation id " +
                                     std::to_string(id) +
                                     " with no runtime-api partner",
                                 std::nullopt, e.event_id});
      }
    } else if (host_side && host_count[id] > 1) {
      report.issues.push_back({ValidationIssue::Severity::Error,
                               "duplicate_correlation",
                               "correlation id " + std::to_string(id) +
                                   " appears on multiple host events",
                               std::nullopt, e.event_id});
    }
  }
}

void check_counters(const Trace& trace, ValidationReport& report) {
  // per-metric monotonicity over the merged sample order
  std::map<std::string, Nanos> last_ts;
  std::map<std::string, bool> flagged;
  for (const auto& e : trace.events) {
    if (e.kind != EventKind::Counter) continue;
    auto value = arg_number(e, "value");
    if (!value) {
      report.issues.push_back({ValidationIssue::Severity::Error,
                               "malformed_args",
                               "counter '" + e.name +
                                   "' lacks a numeric args value under key "
                                   "\"value\"",
                               std::nullopt, e.event_id});
      continue;
    }
    if (!std::isfinite(*value)) {
      report.issues.push_back({ValidationIssue::Severity::Error,
                               "malformed_args",
                               "counter '" + e.name + "' has non-finite value",
                               std::nullopt, e.event_id});
    }
    auto it = last_ts.find(e.name);
    if (it != last_ts.end() && e.start_ts <= it->second && !flagged[e.name]) {
      report.issues.push_back(
          {ValidationIssue::Severity::Error, "non_monotone_counter",
           "counter series '" + e.name + "' has non-increasing timestamps",
           std::nullopt, e.event_id});
      flagged[e.name] = true;
    }
    last_ts[e.name] = e.start_ts;
  }
}

}  // namespace

ValidationReport validate_trace(const Trace& trace) {
  return validate_trace(trace, {});
}

ValidationReport validate_trace(const Trace& trace,
                                std::vector<ValidationIssue> parse_issues) {
  ValidationReport report;
  report.issues = std::move(parse_issues);
  report.event_count = trace.events.size();

  std::unordered_map<EventId, int> id_seen;
  for (const auto& e : trace.events) {
    report.category_counts[e.category]++;
    if (++id_seen[e.event_id] == 2) {
      report.issues.push_back({ValidationIssue::Severity::Error,
                               "duplicate_event_id",
                               "event id " + std::to_string(e.event_id) +
                                   " appears more than once",
                               std::nullopt, e.event_id});
    }
    if (e.kind == EventKind::Span && e.duration < 0) {
      report.issues.push_back({ValidationIssue::Severity::Error,
                               "negative_duration",
                               "span '" + e.name + "' has negative duration",
                               std::nullopt, e.event_id});
    }
    if (e.kind != EventKind::Span && e.duration != 0) {
      report.issues.push_back({ValidationIssue::Severity::Error,
                               "malformed_event",
                               "non-span '" + e.name + "' carries a duration",
                               std::nullopt, e.event_id});
    }
  }

  check_correlations(trace, report);
  check_counters(trace, report);
  return report;
}

}  // namespace cyclescope
