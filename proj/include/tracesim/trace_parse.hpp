#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "tracesim/types.hpp"

namespace tracesim {

// Maps Chrome-trace "cat" strings onto EventCategory. Unknown categories fall
// back to Metadata and are never fatal. User-extensible via JSON config.
class CategoryTable {
 public:
  CategoryTable();  // kineto-style defaults

  void set(const std::string& cat, EventCategory value);
  EventCategory lookup(const std::string& cat) const;

  // Accepts {"cat_string": "CpuOp"|"CudaRuntime"|...} entries, merged over the
  // defaults. Unknown enum names raise ParseError.
  static CategoryTable from_json(const std::string& json_text);

 private:
  std::map<std::string, EventCategory> map_;
};

// Parses Chrome trace-event JSON ({"traceEvents": [...]} or a bare array).
//
// Keeps ph:"X" duration events; instantaneous/flow records are kept (with
// duration 0) only when they carry event-record/wait or correlation payload.
// Output is sorted by (process_id, timestamp, thread_id), stable within ties.
//
// Throws ParseError on malformed JSON (with byte offset), on a duration event
// missing ts or dur, and on invariant violations (negative times, launch-class
// runtime event without a correlation id), naming the record index.
std::vector<TraceEvent> parse_trace(const std::string& json_text,
                                    const CategoryTable& categories = CategoryTable());
std::vector<TraceEvent> parse_trace(std::istream& in,
                                    const CategoryTable& categories = CategoryTable());

// Serializes events back to Chrome trace-event JSON. parse_trace(chrome_json(e))
// is the identity on every retained field; used by tests and the generator.
std::string chrome_json(const std::vector<TraceEvent>& events);

// Loads one trace file per rank. The rank index comes from a "rank_<N>" (or
// "rank<N>") component of the filename. Duplicate ranks, unreadable files and
// filenames without a rank marker raise ParseError naming the path.
std::map<int, std::vector<TraceEvent>> load_multirank(
    const std::vector<std::string>& paths, const CategoryTable& categories = CategoryTable());

// Manifest alternative: a JSON object {"0": "path/to/trace.json", ...} whose
// keys override any filename-derived rank.
std::map<int, std::vector<TraceEvent>> load_multirank_manifest(
    const std::string& manifest_path, const CategoryTable& categories = CategoryTable());

struct IterationWindow {
  Micros start = 0;
  Micros end = 0;  // half-open [start, end)
};

// Picks one iteration out of a multi-iteration trace: boundaries are the
// inter-event gaps on the busiest CPU thread that reach at least half of the
// largest such gap; the segment with the most main-thread events wins (ties:
// earliest). Returns the full span when no gap splits the trace.
IterationWindow detect_iteration_window(const std::vector<TraceEvent>& events);

// Restricts events to [window.start, window.end). GPU events outside the
// window are kept when their correlation id matches a retained launch, since
// kernels of the chosen iteration may finish after its last CPU event.
std::vector<TraceEvent> filter_window(const std::vector<TraceEvent>& events,
                                      const IterationWindow& window);

}  // namespace tracesim
