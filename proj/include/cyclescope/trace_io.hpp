#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cyclescope/trace.hpp"

namespace cyclescope {

struct ParsedTrace {
  Trace trace;
  std::vector<ValidationIssue> issues;  // syntactic problems found while parsing
};

// Chrome Trace Event Format dialect used on disk:
//   - a JSON array of event records, or an object with a "traceEvents" array
//   - ph "X" span, "i" instant, "C" counter, "s"/"f" flow
//   - ts/dur in microseconds as floats; internal representation is integer
//     nanoseconds (sub-microsecond fractions preserved by scaling)
//   - custom keys: "eid" event id, "src" {node, collector, clock} source
//     descriptor (omitted when default)
//   - args are scalar-valued; nested objects flatten to dotted keys;
//     args.correlation_id surfaces as TraceEvent::correlation_id
// A syntactically unparseable document yields a single malformed_event issue
// carrying the byte offset; parsing never throws on bad input.
ParsedTrace parse_trace_json(const std::string& text);

std::string serialize_trace_json(const Trace& trace);

// Extension sniffing: paths ending in .gz read/write gzip-compressed JSON.
ParsedTrace load_trace(const std::filesystem::path& path);
void save_trace(const Trace& trace, const std::filesystem::path& path);

// Raw file helpers with the same .gz sniffing (used for fixtures and goldens).
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& data);

}  // namespace cyclescope
