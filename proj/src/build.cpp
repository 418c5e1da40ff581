#include "tracesim/build.hpp"

#include <algorithm>
#include <cctype>
#include <queue>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace tracesim {

using nlohmann::json;

namespace {

std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool is_gpu_category(EventCategory c) {
  return c == EventCategory::GpuKernel || c == EventCategory::GpuMemcpy ||
         c == EventCategory::GpuMemset;
}

std::optional<std::int64_t> meta_int(const Task& t, const char* key) {
  auto it = t.meta.find(key);
  if (it == t.meta.end()) return std::nullopt;
  try {
    return std::stoll(it->second);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

BuildPolicy BuildPolicy::from_json(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("build policy: ") + e.what(), e.byte);
  }
  BuildPolicy p;
  if (root.contains("gap_threshold_us")) p.gap_threshold_us = root["gap_threshold_us"].get<Micros>();
  if (p.gap_threshold_us < 0) throw ParseError("build policy: gap_threshold_us must be >= 0");
  if (root.contains("launch_names"))
    p.launch_names = root["launch_names"].get<std::vector<std::string>>();
  if (root.contains("sync_names"))
    p.sync_names = root["sync_names"].get<std::map<std::string, std::string>>();
  if (root.contains("record_names"))
    p.record_names = root["record_names"].get<std::vector<std::string>>();
  if (root.contains("wait_names"))
    p.wait_names = root["wait_names"].get<std::vector<std::string>>();
  if (root.contains("comm_patterns"))
    p.comm_patterns = root["comm_patterns"].get<std::vector<std::string>>();
  for (const auto& [name, flavor] : p.sync_names)
    if (flavor != "device" && flavor != "stream" && flavor != "event")
      throw ParseError("build policy: sync flavor for '" + name +
                       "' must be device|stream|event");
  return p;
}

bool BuildPolicy::is_launch(const std::string& name) const {
  return std::find(launch_names.begin(), launch_names.end(), name) != launch_names.end();
}

bool BuildPolicy::is_record(const std::string& name) const {
  return std::find(record_names.begin(), record_names.end(), name) != record_names.end();
}

bool BuildPolicy::is_wait(const std::string& name) const {
  return std::find(wait_names.begin(), wait_names.end(), name) != wait_names.end();
}

std::optional<std::string> BuildPolicy::sync_flavor(const std::string& name) const {
  auto it = sync_names.find(name);
  if (it == sync_names.end()) return std::nullopt;
  return it->second;
}

bool BuildPolicy::is_comm_name(const std::string& name) const {
  const std::string l = lower(name);
  for (const std::string& pat : comm_patterns)
    if (l.find(pat) != std::string::npos) return true;
  return false;
}

OpClass classify_task(const TraceEvent& event, const BuildPolicy& policy) {
  // copies move data between host and device, so they count as communication
  // no matter what the kernel is called
  if (event.category == EventCategory::GpuMemcpy) return OpClass::Communication;
  if (is_gpu_category(event.category))
    return policy.is_comm_name(event.name) ? OpClass::Communication : OpClass::Compute;
  if (policy.is_launch(event.name)) return OpClass::Launch;
  if (policy.sync_flavor(event.name)) return OpClass::Sync;
  if (policy.is_record(event.name)) return OpClass::EventRecord;
  if (policy.is_wait(event.name)) return OpClass::EventWait;
  return OpClass::Other;
}

std::vector<Edge> infer_cpu_cpu(const std::vector<Task>& tasks, const BuildPolicy& policy,
                                Micros window_start, std::vector<Diagnostic>* diagnostics) {
  // Candidate releasers, ordered by end time: any CPU task can explain a gap
  // on another thread.
  struct Candidate {
    Micros end;
    Micros start;
    TaskId id;
    int lane;
  };
  std::vector<Candidate> cpu_by_end;
  std::map<int, std::vector<const Task*>> by_thread;
  for (const Task& t : tasks) {
    if (t.kind != TaskKind::Cpu) continue;
    by_thread[t.processor.lane].push_back(&t);
    cpu_by_end.push_back({t.original_start + t.duration, t.original_start, t.id, t.processor.lane});
  }
  std::sort(cpu_by_end.begin(), cpu_by_end.end(), [](const Candidate& a, const Candidate& b) {
    if (a.end != b.end) return a.end < b.end;
    if (a.start != b.start) return a.start < b.start;
    return a.id < b.id;
  });

  std::vector<Edge> edges;
  if (by_thread.size() < 2) return edges;

  for (auto& [lane, list] : by_thread) {
    std::sort(list.begin(), list.end(), [](const Task* a, const Task* b) {
      if (a->original_start != b->original_start) return a->original_start < b->original_start;
      return a->id < b->id;
    });
    Micros prev_end = window_start;
    for (const Task* t : list) {
      const Micros gap = t->original_start - prev_end;
      if (gap >= policy.gap_threshold_us) {
        // Latest completion on another thread that falls inside the idle gap.
        auto it = std::upper_bound(cpu_by_end.begin(), cpu_by_end.end(), t->original_start,
                                   [](Micros v, const Candidate& c) { return v < c.end; });
        const Candidate* found = nullptr;
        while (it != cpu_by_end.begin()) {
          --it;
          if (it->end < prev_end) break;  // left the gap; nothing can explain it
          if (it->lane != lane && it->id != t->id) {
            found = &*it;
            break;
          }
        }
        if (found) {
          edges.emplace_back(found->id, t->id);
          if (diagnostics)
            diagnostics->push_back({Diagnostic::Kind::InterThreadEdge,
                                    "thread " + std::to_string(lane) + " idle " +
                                        std::to_string(gap) + "us; bound to task " +
                                        std::to_string(found->id),
                                    {found->id, t->id}});
        }
      }
      prev_end = std::max(prev_end, t->original_start + t->duration);
    }
  }
  return edges;
}

std::vector<RuntimeRule> infer_gpu_cpu(const std::vector<Task>& tasks,
                                       const std::set<ProcessorId>& processors,
                                       const BuildPolicy& policy, const RecordTimeline& records,
                                       std::vector<Diagnostic>* diagnostics) {
  std::vector<RuntimeRule> rules;
  for (const Task& t : tasks) {
    if (t.kind != TaskKind::Cpu || t.op_class != OpClass::Sync) continue;
    auto flavor = policy.sync_flavor(t.name);
    if (!flavor) continue;

    RuntimeRule rule;
    rule.waiting_task = t.id;
    if (*flavor == "device") {
      rule.kind = RuntimeRule::Kind::DeviceSync;
      for (const ProcessorId& p : processors)
        if (p.kind == LaneKind::CudaStream && p.rank == t.processor.rank)
          rule.watched.push_back(p);
    } else if (*flavor == "stream") {
      rule.kind = RuntimeRule::Kind::StreamSync;
      auto stream = meta_int(t, "stream");
      ProcessorId target{t.processor.rank, LaneKind::CudaStream,
                         static_cast<int>(stream.value_or(-1))};
      if (stream && processors.count(target)) {
        rule.watched.push_back(target);
      } else if (diagnostics) {
        diagnostics->push_back({Diagnostic::Kind::UnknownStream,
                                "stream sync task " + std::to_string(t.id) +
                                    " names a stream with no tasks; completes immediately",
                                {t.id}});
      }
    } else {  // event
      rule.kind = RuntimeRule::Kind::EventSync;
      auto ev = meta_int(t, "event");
      if (ev) {
        rule.event_id = *ev;
        auto it = records.find(*ev);
        if (it != records.end()) {
          // Most recent record strictly before this sync.
          TaskId bound = -1;
          for (const auto& [ts, pred] : it->second) {
            if (ts >= t.original_start) break;
            bound = pred;
          }
          if (bound >= 0) rule.bound_task = bound;
        }
      }
      if (!rule.bound_task && diagnostics)
        diagnostics->push_back({Diagnostic::Kind::UnmatchedWait,
                                "event sync task " + std::to_string(t.id) +
                                    " has no bound record; completes immediately",
                                {t.id}});
    }
    rules.push_back(std::move(rule));
  }
  return rules;
}

namespace {

// Keeps only leaf CPU events: a span strictly enclosing another event on the
// same thread is profiler nesting, not schedulable work.
std::vector<const TraceEvent*> drop_enclosing_spans(const std::vector<TraceEvent>& events,
                                                    std::vector<Diagnostic>* diagnostics) {
  struct Indexed {
    const TraceEvent* ev;
    std::size_t pos;
  };
  std::map<int, std::vector<Indexed>> by_thread;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const TraceEvent& e = events[i];
    if (e.category == EventCategory::CpuOp || e.category == EventCategory::CudaRuntime)
      by_thread[e.thread_id].push_back({&e, i});
  }

  std::vector<bool> enclosing(events.size(), false);
  for (auto& [tid, list] : by_thread) {
    std::sort(list.begin(), list.end(), [](const Indexed& a, const Indexed& b) {
      if (a.ev->timestamp != b.ev->timestamp) return a.ev->timestamp < b.ev->timestamp;
      if (a.ev->duration != b.ev->duration) return a.ev->duration > b.ev->duration;
      return a.pos < b.pos;
    });
    std::vector<const Indexed*> open;
    for (const Indexed& item : list) {
      const Micros ts = item.ev->timestamp;
      while (!open.empty() &&
             open.back()->ev->timestamp + open.back()->ev->duration <= ts)
        open.pop_back();
      if (!open.empty()) {
        // The innermost open span contains this event's start; it is nesting.
        enclosing[open.back()->pos] = true;
      }
      open.push_back(&item);
    }
  }

  std::vector<const TraceEvent*> kept;
  kept.reserve(events.size());
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].category == EventCategory::Metadata) continue;
    if (enclosing[i]) {
      ++dropped;
      continue;
    }
    kept.push_back(&events[i]);
  }
  if (dropped && diagnostics)
    diagnostics->push_back({Diagnostic::Kind::DroppedEnclosingOp,
                            std::to_string(dropped) + " nested CPU span(s) dropped",
                            {}});
  return kept;
}

void check_acyclic(const ExecutionGraph& g) {
  const std::size_t n = g.tasks.size();
  std::vector<int> indeg(n, 0);
  std::vector<std::vector<TaskId>> out(n);
  for (const Edge& e : g.fixed_edges) {
    out[static_cast<std::size_t>(e.first)].push_back(e.second);
    indeg[static_cast<std::size_t>(e.second)]++;
  }
  std::queue<TaskId> q;
  for (std::size_t i = 0; i < n; ++i)
    if (indeg[i] == 0) q.push(static_cast<TaskId>(i));
  std::size_t seen = 0;
  while (!q.empty()) {
    TaskId t = q.front();
    q.pop();
    ++seen;
    for (TaskId d : out[static_cast<std::size_t>(t)])
      if (--indeg[static_cast<std::size_t>(d)] == 0) q.push(d);
  }
  if (seen == n) return;

  // Witness: walk unmet predecessors until a task repeats.
  std::vector<std::vector<TaskId>> in(n);
  for (const Edge& e : g.fixed_edges)
    if (indeg[static_cast<std::size_t>(e.second)] > 0)
      in[static_cast<std::size_t>(e.second)].push_back(e.first);
  TaskId start = -1;
  for (std::size_t i = 0; i < n; ++i)
    if (indeg[i] > 0) {
      start = static_cast<TaskId>(i);
      break;
    }
  std::vector<TaskId> path;
  std::vector<int> pos_in_path(n, -1);
  TaskId cur = start;
  while (pos_in_path[static_cast<std::size_t>(cur)] < 0) {
    pos_in_path[static_cast<std::size_t>(cur)] = static_cast<int>(path.size());
    path.push_back(cur);
    TaskId next = -1;
    for (TaskId p : in[static_cast<std::size_t>(cur)])
      if (indeg[static_cast<std::size_t>(p)] > 0) {
        next = p;
        break;
      }
    cur = next;
  }
  std::ostringstream msg;
  msg << "dependency cycle:";
  for (std::size_t i = static_cast<std::size_t>(pos_in_path[static_cast<std::size_t>(cur)]);
       i < path.size(); ++i)
    msg << " " << path[i];
  throw GraphError(msg.str());
}

}  // namespace

ExecutionGraph build_graph(const std::vector<TraceEvent>& events, const BuildPolicy& policy,
                           std::optional<int> rank_override) {
  ExecutionGraph g;
  if (events.empty()) return g;

  const int rank = rank_override.value_or(events.front().process_id);
  std::vector<const TraceEvent*> retained = drop_enclosing_spans(events, &g.diagnostics);

  g.tasks.reserve(retained.size());
  for (const TraceEvent* ev : retained) {
    Task t;
    t.id = static_cast<TaskId>(g.tasks.size());
    t.kind = is_gpu_category(ev->category) ? TaskKind::Gpu : TaskKind::Cpu;
    t.op_class = classify_task(*ev, policy);
    t.name = ev->name;
    t.duration = ev->duration;
    t.original_start = ev->timestamp;
    t.correlation_id = ev->correlation_id;
    if (t.kind == TaskKind::Gpu) {
      if (!ev->stream_id)
        throw GraphError("GPU event '" + ev->name + "' has no stream id");
      t.processor = {rank, LaneKind::CudaStream, *ev->stream_id};
    } else {
      t.processor = {rank, LaneKind::CpuThread, ev->thread_id};
    }
    t.meta = ev->args;
    g.processors.insert(t.processor);
    g.tasks.push_back(std::move(t));
  }

  g.iteration_window.start = g.tasks.front().original_start;
  g.iteration_window.end = g.iteration_window.start;
  for (const Task& t : g.tasks) {
    g.iteration_window.start = std::min(g.iteration_window.start, t.original_start);
    g.iteration_window.end = std::max(g.iteration_window.end, t.original_start + t.duration);
  }

  // Intra-lane chains: consecutive tasks on one processor.
  std::map<ProcessorId, std::vector<TaskId>> lane_tasks;
  for (const Task& t : g.tasks) lane_tasks[t.processor].push_back(t.id);
  for (auto& [proc, ids] : lane_tasks) {
    std::sort(ids.begin(), ids.end(), [&](TaskId a, TaskId b) {
      const Task& ta = g.tasks[static_cast<std::size_t>(a)];
      const Task& tb = g.tasks[static_cast<std::size_t>(b)];
      if (ta.original_start != tb.original_start) return ta.original_start < tb.original_start;
      return a < b;
    });
    for (std::size_t i = 1; i < ids.size(); ++i) g.fixed_edges.emplace_back(ids[i - 1], ids[i]);
  }

  // CPU->GPU launch edges via correlation ids.
  std::unordered_map<CorrelationId, TaskId> launches;
  for (const Task& t : g.tasks)
    if (t.kind == TaskKind::Cpu && t.op_class == OpClass::Launch && t.correlation_id)
      launches[*t.correlation_id] = t.id;

  std::unordered_map<CorrelationId, bool> launch_used;
  std::map<ProcessorId, std::vector<std::pair<Micros, TaskId>>> enqueue_order;  // per stream
  for (const Task& t : g.tasks) {
    if (t.kind != TaskKind::Gpu) continue;
    Micros launch_ts = t.original_start;  // orphan fallback: its own start
    bool found_launch = false;
    if (t.correlation_id) {
      auto it = launches.find(*t.correlation_id);
      if (it != launches.end()) {
        g.fixed_edges.emplace_back(it->second, t.id);
        launch_ts = g.tasks[static_cast<std::size_t>(it->second)].original_start;
        launch_used[*t.correlation_id] = true;
        found_launch = true;
      }
    }
    if (!found_launch)
      g.diagnostics.push_back({Diagnostic::Kind::OrphanKernel,
                               "GPU task " + std::to_string(t.id) + " ('" + t.name +
                                   "') has no matching launch",
                               {t.id}});
    enqueue_order[t.processor].emplace_back(launch_ts, t.id);
  }
  for (const auto& [corr, id] : launches)
    if (!launch_used.count(corr))
      g.diagnostics.push_back({Diagnostic::Kind::UnmatchedLaunch,
                               "launch task " + std::to_string(id) + " correlation " +
                                   std::to_string(corr) + " matches no kernel",
                               {id}});
  for (auto& [proc, order] : enqueue_order) std::sort(order.begin(), order.end());

  // Event record/wait pairing -> GPU->GPU inter-stream fixed edges.
  RecordTimeline records;
  std::vector<const Task*> record_tasks, wait_tasks;
  for (const Task& t : g.tasks) {
    if (t.op_class == OpClass::EventRecord) record_tasks.push_back(&t);
    if (t.op_class == OpClass::EventWait) wait_tasks.push_back(&t);
  }
  auto by_start = [](const Task* a, const Task* b) {
    if (a->original_start != b->original_start) return a->original_start < b->original_start;
    return a->id < b->id;
  };
  std::sort(record_tasks.begin(), record_tasks.end(), by_start);
  std::sort(wait_tasks.begin(), wait_tasks.end(), by_start);

  auto last_enqueued_before = [&](int stream, Micros ts) -> TaskId {
    ProcessorId proc{rank, LaneKind::CudaStream, stream};
    auto it = enqueue_order.find(proc);
    if (it == enqueue_order.end()) return -1;
    const auto& order = it->second;
    auto pos = std::lower_bound(order.begin(), order.end(), std::make_pair(ts, TaskId{-1}));
    if (pos == order.begin()) return -1;
    return std::prev(pos)->second;
  };
  auto first_enqueued_after = [&](int stream, Micros ts) -> TaskId {
    ProcessorId proc{rank, LaneKind::CudaStream, stream};
    auto it = enqueue_order.find(proc);
    if (it == enqueue_order.end()) return -1;
    const auto& order = it->second;
    auto pos = std::upper_bound(
        order.begin(), order.end(), ts,
        [](Micros v, const std::pair<Micros, TaskId>& e) { return v < e.first; });
    if (pos == order.end()) return -1;
    return pos->second;
  };

  for (const Task* t : record_tasks) {
    auto ev = meta_int(*t, "event");
    auto stream = meta_int(*t, "stream");
    if (!ev || !stream) continue;
    TaskId pred = last_enqueued_before(static_cast<int>(*stream), t->original_start);
    if (pred < 0)
      g.diagnostics.push_back({Diagnostic::Kind::UnmatchedRecord,
                               "event record task " + std::to_string(t->id) +
                                   " precedes any kernel on stream " + std::to_string(*stream),
                               {t->id}});
    records[*ev].emplace_back(t->original_start, pred);
    if (pred >= 0) g.event_bindings[*ev] = pred;
  }
  for (const Task* t : wait_tasks) {
    auto ev = meta_int(*t, "event");
    auto stream = meta_int(*t, "stream");
    if (!ev || !stream) continue;
    auto it = records.find(*ev);
    TaskId pred = -1;
    if (it != records.end())
      for (const auto& [ts, p] : it->second) {
        if (ts >= t->original_start) break;
        pred = p;
      }
    if (pred < 0) {
      g.diagnostics.push_back({Diagnostic::Kind::UnmatchedWait,
                               "stream wait task " + std::to_string(t->id) + " on event " +
                                   std::to_string(*ev) + " has no earlier record; no-op",
                               {t->id}});
      continue;
    }
    TaskId succ = first_enqueued_after(static_cast<int>(*stream), t->original_start);
    if (succ >= 0 && succ != pred) g.fixed_edges.emplace_back(pred, succ);
  }

  // Cross-thread CPU edges from the gap heuristic.
  auto gap_edges = infer_cpu_cpu(g.tasks, policy, g.iteration_window.start, &g.diagnostics);
  g.fixed_edges.insert(g.fixed_edges.end(), gap_edges.begin(), gap_edges.end());

  // GPU->CPU sync rules.
  g.rules = infer_gpu_cpu(g.tasks, g.processors, policy, records, &g.diagnostics);

  std::sort(g.fixed_edges.begin(), g.fixed_edges.end());
  g.fixed_edges.erase(std::unique(g.fixed_edges.begin(), g.fixed_edges.end()),
                      g.fixed_edges.end());
  g.fixed_edges.erase(std::remove_if(g.fixed_edges.begin(), g.fixed_edges.end(),
                                     [](const Edge& e) { return e.first == e.second; }),
                      g.fixed_edges.end());

  check_acyclic(g);
  return g;
}

ExecutionGraph merge_ranks(const std::map<int, ExecutionGraph>& per_rank) {
  ExecutionGraph g;
  bool first = true;
  for (const auto& [rank, src] : per_rank) {
    const TaskId base = static_cast<TaskId>(g.tasks.size());
    for (Task t : src.tasks) {
      t.id += base;
      g.processors.insert(t.processor);
      g.tasks.push_back(std::move(t));
    }
    for (Edge e : src.fixed_edges) g.fixed_edges.emplace_back(e.first + base, e.second + base);
    for (RuntimeRule r : src.rules) {
      r.waiting_task += base;
      if (r.bound_task) *r.bound_task += base;
      g.rules.push_back(std::move(r));
    }
    for (const Diagnostic& d : src.diagnostics) {
      Diagnostic copy = d;
      for (TaskId& id : copy.tasks) id += base;
      g.diagnostics.push_back(std::move(copy));
    }
    if (first) {
      g.iteration_window = src.iteration_window;
      first = false;
    } else {
      g.iteration_window.start = std::min(g.iteration_window.start, src.iteration_window.start);
      g.iteration_window.end = std::max(g.iteration_window.end, src.iteration_window.end);
    }
  }
  return g;
}

ExecutionGraph slice_rank(const ExecutionGraph& graph, int rank) {
  ExecutionGraph g;
  std::vector<TaskId> remap(graph.tasks.size(), -1);
  for (const Task& t : graph.tasks) {
    if (t.processor.rank != rank) continue;
    Task copy = t;
    remap[static_cast<std::size_t>(t.id)] = static_cast<TaskId>(g.tasks.size());
    copy.id = static_cast<TaskId>(g.tasks.size());
    g.processors.insert(copy.processor);
    g.tasks.push_back(std::move(copy));
  }
  for (const Edge& e : graph.fixed_edges) {
    TaskId a = remap[static_cast<std::size_t>(e.first)];
    TaskId b = remap[static_cast<std::size_t>(e.second)];
    if (a >= 0 && b >= 0) g.fixed_edges.emplace_back(a, b);
  }
  for (const RuntimeRule& r : graph.rules) {
    TaskId w = remap[static_cast<std::size_t>(r.waiting_task)];
    if (w < 0) continue;
    RuntimeRule copy = r;
    copy.waiting_task = w;
    if (copy.bound_task) {
      TaskId b = remap[static_cast<std::size_t>(*copy.bound_task)];
      if (b < 0) copy.bound_task.reset();
      else copy.bound_task = b;
    }
    g.rules.push_back(std::move(copy));
  }
  if (!g.tasks.empty()) {
    g.iteration_window.start = g.tasks.front().original_start;
    g.iteration_window.end = g.iteration_window.start;
    for (const Task& t : g.tasks) {
      g.iteration_window.start = std::min(g.iteration_window.start, t.original_start);
      g.iteration_window.end = std::max(g.iteration_window.end, t.original_start + t.duration);
    }
  }
  return g;
}

std::vector<int> ranks_in(const ExecutionGraph& graph) {
  std::vector<int> ranks;
  for (const ProcessorId& p : graph.processors)
    if (ranks.empty() || ranks.back() != p.rank) ranks.push_back(p.rank);
  std::sort(ranks.begin(), ranks.end());
  ranks.erase(std::unique(ranks.begin(), ranks.end()), ranks.end());
  return ranks;
}

}  // namespace tracesim
