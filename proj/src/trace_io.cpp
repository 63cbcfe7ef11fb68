#include "cyclescope/trace_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "cyclescope/errors.hpp"

namespace cyclescope {

using nlohmann::json;

namespace {

constexpr double kNsPerUs = 1000.0;

Nanos us_to_ns(double us) {
  return static_cast<Nanos>(std::llround(us * kNsPerUs));
}

double ns_to_us(Nanos ns) { return static_cast<double>(ns) / kNsPerUs; }

void flatten_args(const std::string& prefix, const json& value, ArgMap& out,
                  std::vector<std::string>& dropped) {
  switch (value.type()) {
    case json::value_t::string:
      out[prefix] = value.get<std::string>();
      break;
    case json::value_t::boolean:
      out[prefix] = value.get<bool>();
      break;
    case json::value_t::number_integer:
    case json::value_t::number_unsigned:
      out[prefix] = value.get<std::int64_t>();
      break;
    case json::value_t::number_float:
      out[prefix] = value.get<double>();
      break;
    case json::value_t::object:
      for (const auto& [k, v] : value.items())
        flatten_args(prefix.empty() ? k : prefix + "." + k, v, out, dropped);
      break;
    case json::value_t::array: {
      std::size_t i = 0;
      for (const auto& v : value.items())
        flatten_args(prefix + "." + std::to_string(i++), v.value(), out, dropped);
      break;
    }
    default:
      dropped.push_back(prefix);
      break;
  }
}

json args_to_json(const ArgMap& args) {
  json j = json::object();
  for (const auto& [key, value] : args) {
    std::visit([&](const auto& v) { j[key] = v; }, value);
  }
  return j;
}

std::string phase_for(const TraceEvent& e) {
  switch (e.kind) {
    case EventKind::Span: return "X";
    case EventKind::Instant: return "i";
    case EventKind::Counter: return "C";
    case EventKind::Flow: {
      auto flow = e.args.find("flow");
      if (flow != e.args.end())
        if (const auto* s = std::get_if<std::string>(&flow->second)) return *s;
      return "s";
    }
  }
  return "X";
}

EventCategory default_category(EventKind kind) {
  return kind == EventKind::Counter ? EventCategory::CounterTelemetry
                                    : EventCategory::PythonCall;
}

bool parse_record(const json& rec, EventId fallback_id, TraceEvent& out,
                  std::vector<ValidationIssue>& issues) {
  if (!rec.is_object() || !rec.contains("ph")) {
    issues.push_back({ValidationIssue::Severity::Error, "malformed_event",
                      "record is not an event object", std::nullopt,
                      std::nullopt});
    return false;
  }
  const std::string ph = rec.value("ph", "");
  if (ph == "M") return false;  // metadata records are ignored
  auto kind = kind_from_phase(ph);
  if (!kind) {
    issues.push_back({ValidationIssue::Severity::Warning, "malformed_event",
                      "unsupported phase '" + ph + "', record skipped",
                      std::nullopt, std::nullopt});
    return false;
  }

  out.kind = *kind;
  out.event_id = rec.contains("eid") ? rec["eid"].get<EventId>() : fallback_id;
  out.name = rec.value("name", "");
  out.start_ts = us_to_ns(rec.value("ts", 0.0));
  out.duration = out.kind == EventKind::Span ? us_to_ns(rec.value("dur", 0.0)) : 0;
  out.track.pid = rec.value("pid", std::int64_t{0});
  out.track.tid = rec.value("tid", std::int64_t{0});

  if (rec.contains("cat")) {
    auto cat = category_from_string(rec["cat"].get<std::string>());
    if (!cat) {
      issues.push_back({ValidationIssue::Severity::Warning, "malformed_event",
                        "unknown category '" + rec["cat"].get<std::string>() +
                            "' on '" + out.name + "'",
                        std::nullopt, out.event_id});
      out.category = default_category(out.kind);
    } else {
      out.category = *cat;
    }
  } else {
    out.category = default_category(out.kind);
  }

  if (rec.contains("src") && rec["src"].is_object()) {
    const auto& src = rec["src"];
    out.source.node = src.value("node", "local");
    out.source.clock_domain = src.value("clock", "reference");
    if (src.contains("collector")) {
      auto c = collector_from_string(src["collector"].get<std::string>());
      if (c) out.source.collector = *c;
    }
  }

  if (rec.contains("args")) {
    std::vector<std::string> dropped;
    flatten_args("", rec["args"], out.args, dropped);
    for (const auto& key : dropped) {
      issues.push_back({ValidationIssue::Severity::Warning, "malformed_args",
                        "args key '" + key + "' on '" + out.name +
                            "' has unsupported type, dropped",
                        std::nullopt, out.event_id});
    }
  }
  if (out.kind == EventKind::Flow && !out.args.count("flow")) {
    out.args["flow"] = ph;
  }
  if (auto corr = out.args.find("correlation_id"); corr != out.args.end()) {
    if (const auto* v = std::get_if<std::int64_t>(&corr->second)) {
      out.correlation_id = static_cast<std::uint64_t>(*v);
      out.args.erase(corr);
    }
  }
  return true;
}

}  // namespace

ParsedTrace parse_trace_json(const std::string& text) {
  ParsedTrace result;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& err) {
    result.issues.push_back({ValidationIssue::Severity::Error,
                             "malformed_event", err.what(), err.byte,
                             std::nullopt});
    return result;
  }

  const json* events = nullptr;
  if (doc.is_array()) {
    events = &doc;
  } else if (doc.is_object() && doc.contains("traceEvents") &&
             doc["traceEvents"].is_array()) {
    events = &doc["traceEvents"];
  } else {
    result.issues.push_back({ValidationIssue::Severity::Error,
                             "malformed_event",
                             "document is neither an event array nor an "
                             "object with traceEvents",
                             0, std::nullopt});
    return result;
  }

  EventId next_id = 1;
  result.trace.events.reserve(events->size());
  for (const auto& rec : *events) {
    TraceEvent event;
    try {
      if (parse_record(rec, next_id, event, result.issues)) {
        next_id = std::max(next_id, event.event_id) + 1;
        result.trace.events.push_back(std::move(event));
      }
    } catch (const json::exception& err) {
      result.issues.push_back({ValidationIssue::Severity::Error,
                               "malformed_event", err.what(), std::nullopt,
                               std::nullopt});
    }
  }
  result.trace.sort_events();
  return result;
}

std::string serialize_trace_json(const Trace& trace) {
  // one record per line, canonical order; output is byte-stable for a given
  // trace so fixtures can be compared by hash
  std::string out = "[\n";
  bool first = true;
  for (const auto& e : trace.events) {
    json rec = json::object();
    rec["eid"] = e.event_id;
    rec["ph"] = phase_for(e);
    rec["name"] = e.name;
    rec["cat"] = to_string(e.category);
    rec["ts"] = ns_to_us(e.start_ts);
    if (e.kind == EventKind::Span) rec["dur"] = ns_to_us(e.duration);
    rec["pid"] = e.track.pid;
    rec["tid"] = e.track.tid;
    if (!e.source.is_default()) {
      rec["src"] = {{"node", e.source.node},
                    {"collector", to_string(e.source.collector)},
                    {"clock", e.source.clock_domain}};
    }
    ArgMap args = e.args;
    if (e.correlation_id)
      args["correlation_id"] = static_cast<std::int64_t>(*e.correlation_id);
    if (!args.empty()) rec["args"] = args_to_json(args);

    if (!first) out += ",\n";
    first = false;
    out += rec.dump();
  }
  out += "\n]\n";
  return out;
}

namespace {

bool has_gz_extension(const std::filesystem::path& path) {
  return path.extension() == ".gz";
}

std::string gz_read(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::string data;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) data.append(buf, n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw IoError("gzip read failed on " + path.string());
  return data;
}

void gz_write(const std::filesystem::path& path, const std::string& data) {
  gzFile f = gzopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const int written = gzwrite(f, data.data(), static_cast<unsigned>(data.size()));
  gzclose(f);
  if (written != static_cast<int>(data.size()))
    throw IoError("gzip write failed on " + path.string());
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  if (has_gz_extension(path)) return gz_read(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& data) {
  if (has_gz_extension(path)) {
    gz_write(path, data);
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << data;
  if (!out) throw IoError("write failed on " + path.string());
}

ParsedTrace load_trace(const std::filesystem::path& path) {
  return parse_trace_json(read_file(path));
}

void save_trace(const Trace& trace, const std::filesystem::path& path) {
  write_file(path, serialize_trace_json(trace));
}

}  // namespace cyclescope
