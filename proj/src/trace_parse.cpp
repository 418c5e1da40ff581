#include "tracesim/trace_parse.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tracesim {

using nlohmann::json;

namespace {

// Launch-class runtime calls must carry a correlation id (that is the only
// link between a launch and its kernel).
bool is_launch_name(const std::string& name) {
  static const char* kNames[] = {
      "cudaLaunchKernel",       "cudaLaunchKernelExC",
      "cuLaunchKernel",         "cudaLaunchCooperativeKernel",
      "cudaMemcpyAsync",        "cudaMemsetAsync",
  };
  for (const char* n : kNames)
    if (name == n) return true;
  return false;
}

bool keeps_zero_duration_event(const json& ev) {
  // Non-X records are interesting only when they encode record/wait pairing
  // or correlation metadata; everything else (metadata, counters, flow) goes.
  if (ev.contains("name") && ev["name"].is_string()) {
    const std::string& n = ev["name"].get_ref<const std::string&>();
    if (n.find("EventRecord") != std::string::npos) return true;
    if (n.find("WaitEvent") != std::string::npos) return true;
  }
  if (ev.contains("args") && ev["args"].is_object() &&
      (ev["args"].contains("correlation") || ev["args"].contains("correlation_id")))
    return true;
  return false;
}

Micros round_half_up(double v) {
  return static_cast<Micros>(std::llround(v));
}

// ts/dur may arrive as integers or floats (some profilers emit fractional µs).
Micros to_micros(const json& v) {
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_number_unsigned()) return static_cast<Micros>(v.get<std::uint64_t>());
  if (v.is_number_float()) return round_half_up(v.get<double>());
  throw ParseError("expected a numeric time value");
}

std::string arg_to_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

std::optional<std::int64_t> arg_to_int(const json& args, const char* key) {
  if (!args.contains(key)) return std::nullopt;
  const json& v = args[key];
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_number_unsigned()) return static_cast<std::int64_t>(v.get<std::uint64_t>());
  if (v.is_string()) {
    try {
      return std::stoll(v.get<std::string>());
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  return std::nullopt;
}

std::vector<TraceEvent> parse_dom(const json& root, const CategoryTable& categories) {
  const json* list = nullptr;
  if (root.is_array()) {
    list = &root;
  } else if (root.is_object() && root.contains("traceEvents") && root["traceEvents"].is_array()) {
    list = &root["traceEvents"];
  } else {
    throw ParseError("trace JSON must be an event array or an object with traceEvents");
  }

  std::vector<TraceEvent> out;
  out.reserve(list->size());

  for (std::size_t idx = 0; idx < list->size(); ++idx) {
    const json& ev = (*list)[idx];
    if (!ev.is_object())
      throw ParseError("record " + std::to_string(idx) + ": event is not an object");

    const std::string ph = ev.value("ph", "X");
    const bool duration_event = ph == "X";
    if (!duration_event && !keeps_zero_duration_event(ev)) continue;
    if (ph == "M") continue;  // metadata records never become events

    TraceEvent e;
    e.name = ev.value("name", "");
    e.category = categories.lookup(ev.value("cat", ""));

    if (!ev.contains("ts"))
      throw ParseError("record " + std::to_string(idx) + ": missing ts");
    e.timestamp = to_micros(ev["ts"]);
    if (e.timestamp < 0)
      throw ParseError("record " + std::to_string(idx) + ": negative ts");

    if (duration_event) {
      if (!ev.contains("dur"))
        throw ParseError("record " + std::to_string(idx) +
                         ": ph:\"X\" event missing dur (truncated trace?)");
      e.duration = to_micros(ev["dur"]);
      if (e.duration < 0)
        throw ParseError("record " + std::to_string(idx) + ": negative dur");
    } else {
      e.duration = 0;
    }

    e.process_id = ev.value("pid", 0);
    e.thread_id = ev.value("tid", 0);

    if (ev.contains("args") && ev["args"].is_object()) {
      const json& args = ev["args"];
      if (auto corr = arg_to_int(args, "correlation")) e.correlation_id = *corr;
      else if (auto corr2 = arg_to_int(args, "correlation_id")) e.correlation_id = *corr2;
      if (auto stream = arg_to_int(args, "stream")) e.stream_id = static_cast<int>(*stream);
      for (auto it = args.begin(); it != args.end(); ++it)
        e.args.emplace(it.key(), arg_to_string(it.value()));
    }

    const bool gpu = e.category == EventCategory::GpuKernel ||
                     e.category == EventCategory::GpuMemcpy ||
                     e.category == EventCategory::GpuMemset;
    if (gpu && !e.stream_id) e.stream_id = e.thread_id;  // kineto puts the stream in tid

    if (e.category == EventCategory::CudaRuntime && is_launch_name(e.name) &&
        !e.correlation_id)
      throw ParseError("record " + std::to_string(idx) + ": launch-class runtime event '" +
                       e.name + "' without a correlation id");

    out.push_back(std::move(e));
  }

  std::stable_sort(out.begin(), out.end(), [](const TraceEvent& a, const TraceEvent& b) {
    if (a.process_id != b.process_id) return a.process_id < b.process_id;
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.thread_id < b.thread_id;
  });
  return out;
}

}  // namespace

CategoryTable::CategoryTable() {
  map_ = {
      {"cpu_op", EventCategory::CpuOp},
      {"cpu_instant_event", EventCategory::Metadata},
      {"user_annotation", EventCategory::Metadata},
      {"gpu_user_annotation", EventCategory::Metadata},
      {"python_function", EventCategory::Metadata},
      {"cuda_runtime", EventCategory::CudaRuntime},
      {"cuda_driver", EventCategory::CudaRuntime},
      {"runtime", EventCategory::CudaRuntime},
      {"kernel", EventCategory::GpuKernel},
      {"gpu_kernel", EventCategory::GpuKernel},
      {"gpu_memcpy", EventCategory::GpuMemcpy},
      {"gpu_memset", EventCategory::GpuMemset},
  };
}

void CategoryTable::set(const std::string& cat, EventCategory value) {
  map_[cat] = value;
}

EventCategory CategoryTable::lookup(const std::string& cat) const {
  auto it = map_.find(cat);
  if (it != map_.end()) return it->second;
  std::string lower = cat;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  it = map_.find(lower);
  return it != map_.end() ? it->second : EventCategory::Metadata;
}

CategoryTable CategoryTable::from_json(const std::string& json_text) {
  CategoryTable table;
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("category table: ") + e.what(), e.byte);
  }
  if (!root.is_object()) throw ParseError("category table must be a JSON object");
  for (auto it = root.begin(); it != root.end(); ++it) {
    const std::string v = it.value().get<std::string>();
    EventCategory cat;
    if (v == "CpuOp") cat = EventCategory::CpuOp;
    else if (v == "CudaRuntime") cat = EventCategory::CudaRuntime;
    else if (v == "GpuKernel") cat = EventCategory::GpuKernel;
    else if (v == "GpuMemcpy") cat = EventCategory::GpuMemcpy;
    else if (v == "GpuMemset") cat = EventCategory::GpuMemset;
    else if (v == "Metadata") cat = EventCategory::Metadata;
    else throw ParseError("category table: unknown category '" + v + "'");
    table.set(it.key(), cat);
  }
  return table;
}

std::vector<TraceEvent> parse_trace(const std::string& json_text,
                                    const CategoryTable& categories) {
  try {
    return parse_dom(json::parse(json_text), categories);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed trace JSON: ") + e.what(), e.byte);
  }
}

std::vector<TraceEvent> parse_trace(std::istream& in, const CategoryTable& categories) {
  try {
    return parse_dom(json::parse(in), categories);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed trace JSON: ") + e.what(), e.byte);
  }
}

std::string chrome_json(const std::vector<TraceEvent>& events) {
  std::ostringstream out;
  out << "{\"schema_version\":1,\"traceEvents\":[";
  const char* cat_names[] = {"cpu_op", "cuda_runtime", "kernel", "gpu_memcpy", "gpu_memset", ""};
  bool first = true;
  for (const TraceEvent& e : events) {
    if (!first) out << ",";
    first = false;
    json j;
    j["name"] = e.name;
    j["cat"] = cat_names[static_cast<int>(e.category)];
    j["ph"] = "X";
    j["ts"] = e.timestamp;
    j["dur"] = e.duration;
    j["pid"] = e.process_id;
    j["tid"] = e.thread_id;
    json args = json::object();
    for (const auto& [k, v] : e.args) args[k] = v;
    if (e.correlation_id && !args.contains("correlation")) args["correlation"] = *e.correlation_id;
    if (e.stream_id && !args.contains("stream")) args["stream"] = *e.stream_id;
    if (!args.empty()) j["args"] = std::move(args);
    out << j.dump();
    out << "\n";
  }
  out << "]}\n";
  return out.str();
}

namespace {

int rank_from_filename(const std::string& path) {
  static const std::regex re("rank_?(\\d+)");
  std::smatch m;
  std::string best;
  auto begin = std::sregex_iterator(path.begin(), path.end(), re);
  for (auto it = begin; it != std::sregex_iterator(); ++it) best = (*it)[1].str();
  if (best.empty())
    throw ParseError("cannot derive a rank from filename '" + path +
                     "' (expected a rank_<N> component or a manifest)");
  return std::stoi(best);
}

std::vector<TraceEvent> parse_file(const std::string& path, const CategoryTable& categories) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open trace file '" + path + "'");
  try {
    return parse_trace(in, categories);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.byte_offset());
  }
}

}  // namespace

std::map<int, std::vector<TraceEvent>> load_multirank(const std::vector<std::string>& paths,
                                                      const CategoryTable& categories) {
  std::map<int, std::vector<TraceEvent>> out;
  for (const std::string& path : paths) {
    int rank = rank_from_filename(path);
    if (out.count(rank))
      throw ParseError("duplicate rank " + std::to_string(rank) + " from '" + path + "'");
    out.emplace(rank, parse_file(path, categories));
  }
  return out;
}

std::map<int, std::vector<TraceEvent>> load_multirank_manifest(const std::string& manifest_path,
                                                               const CategoryTable& categories) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw ParseError("cannot open manifest '" + manifest_path + "'");
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(manifest_path + ": " + e.what(), e.byte);
  }
  if (!root.is_object()) throw ParseError(manifest_path + ": manifest must map rank -> path");

  // Relative paths resolve against the manifest's directory.
  std::string dir;
  if (auto slash = manifest_path.find_last_of('/'); slash != std::string::npos)
    dir = manifest_path.substr(0, slash + 1);

  std::map<int, std::vector<TraceEvent>> out;
  for (auto it = root.begin(); it != root.end(); ++it) {
    int rank;
    try {
      rank = std::stoi(it.key());
    } catch (const std::exception&) {
      throw ParseError(manifest_path + ": manifest key '" + it.key() + "' is not a rank");
    }
    if (out.count(rank))
      throw ParseError(manifest_path + ": duplicate rank " + std::to_string(rank));
    std::string path = it.value().get<std::string>();
    if (!path.empty() && path[0] != '/') path = dir + path;
    out.emplace(rank, parse_file(path, categories));
  }
  return out;
}

IterationWindow detect_iteration_window(const std::vector<TraceEvent>& events) {
  IterationWindow full;
  if (events.empty()) return full;
  full.start = events.front().timestamp;
  full.end = full.start;
  for (const TraceEvent& e : events) {
    full.start = std::min(full.start, e.timestamp);
    full.end = std::max(full.end, e.timestamp + e.duration);
  }

  // Busiest CPU thread = main thread.
  std::map<std::pair<int, int>, int> counts;
  for (const TraceEvent& e : events)
    if (e.category == EventCategory::CpuOp || e.category == EventCategory::CudaRuntime)
      counts[{e.process_id, e.thread_id}]++;
  if (counts.empty()) return full;
  auto main_it = std::max_element(counts.begin(), counts.end(),
                                  [](const auto& a, const auto& b) {
                                    if (a.second != b.second) return a.second < b.second;
                                    return b.first < a.first;  // tie: smaller (pid,tid) wins
                                  });
  const auto main_key = main_it->first;

  std::vector<std::pair<Micros, Micros>> spans;  // (start, end) on the main thread
  for (const TraceEvent& e : events)
    if ((e.category == EventCategory::CpuOp || e.category == EventCategory::CudaRuntime) &&
        std::pair{e.process_id, e.thread_id} == main_key)
      spans.emplace_back(e.timestamp, e.timestamp + e.duration);
  std::sort(spans.begin(), spans.end());

  std::vector<Micros> gaps;
  gaps.reserve(spans.size());
  for (std::size_t i = 1; i < spans.size(); ++i)
    gaps.push_back(std::max<Micros>(0, spans[i].first - spans[i - 1].second));
  if (gaps.empty()) return full;
  Micros max_gap = *std::max_element(gaps.begin(), gaps.end());
  if (max_gap <= 0) return full;

  // A gap only counts as iteration structure when it dwarfs the typical
  // spacing; otherwise evenly spread ops would each become their own segment.
  std::vector<Micros> sorted_gaps = gaps;
  std::nth_element(sorted_gaps.begin(), sorted_gaps.begin() + sorted_gaps.size() / 2,
                   sorted_gaps.end());
  Micros median_gap = sorted_gaps[sorted_gaps.size() / 2];
  if (max_gap < 8 * std::max<Micros>(median_gap, 1)) return full;

  // Segment boundaries: gaps reaching half the dominant gap.
  std::vector<std::size_t> seg_start = {0};
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first - spans[i - 1].second >= (max_gap + 1) / 2)
      seg_start.push_back(i);
  if (seg_start.size() == 1) return full;

  std::size_t best = 0, best_count = 0;
  for (std::size_t s = 0; s < seg_start.size(); ++s) {
    std::size_t end = s + 1 < seg_start.size() ? seg_start[s + 1] : spans.size();
    std::size_t count = end - seg_start[s];
    if (count > best_count) {
      best_count = count;
      best = s;
    }
  }
  std::size_t lo = seg_start[best];
  std::size_t hi = (best + 1 < seg_start.size() ? seg_start[best + 1] : spans.size()) - 1;

  IterationWindow w;
  w.start = spans[lo].first;
  w.end = spans[hi].second;
  return w;
}

std::vector<TraceEvent> filter_window(const std::vector<TraceEvent>& events,
                                      const IterationWindow& window) {
  std::set<CorrelationId> kept_correlations;
  for (const TraceEvent& e : events)
    if (e.category == EventCategory::CudaRuntime && e.correlation_id &&
        e.timestamp >= window.start && e.timestamp < window.end)
      kept_correlations.insert(*e.correlation_id);

  std::vector<TraceEvent> out;
  for (const TraceEvent& e : events) {
    const bool inside = e.timestamp >= window.start && e.timestamp < window.end;
    const bool gpu = e.category == EventCategory::GpuKernel ||
                     e.category == EventCategory::GpuMemcpy ||
                     e.category == EventCategory::GpuMemset;
    if (inside || (gpu && e.correlation_id && kept_correlations.count(*e.correlation_id)))
      out.push_back(e);
  }
  return out;
}

}  // namespace tracesim
