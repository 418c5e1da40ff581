#include "tracesim/simulate.hpp"

#include <algorithm>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include "tracesim/trace_parse.hpp"

namespace tracesim {

namespace {

std::string join_ids(const std::vector<TaskId>& ids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) os << " ";
    os << ids[i];
  }
  return os.str();
}

}  // namespace

std::vector<ValidationIssue> validate_graph(const ExecutionGraph& graph) {
  std::vector<ValidationIssue> issues;
  const auto n = static_cast<TaskId>(graph.tasks.size());

  for (const auto& t : graph.tasks) {
    if (t.duration < 0) {
      issues.push_back({ValidationIssue::Kind::NegativeDuration, true,
                        "task " + std::to_string(t.id) + " has negative duration", {t.id}});
    }
  }

  bool edges_ok = true;
  for (const auto& [u, v] : graph.fixed_edges) {
    if (u < 0 || u >= n || v < 0 || v >= n || u == v) {
      issues.push_back({ValidationIssue::Kind::BadEdge, true,
                        "edge " + std::to_string(u) + "->" + std::to_string(v) +
                            " references an invalid task",
                        {u, v}});
      edges_ok = false;
    }
  }

  for (const auto& r : graph.rules) {
    if (r.waiting_task < 0 || r.waiting_task >= n ||
        (r.bound_task >= 0 && r.bound_task >= n)) {
      issues.push_back({ValidationIssue::Kind::BadRule, true,
                        "rule on task " + std::to_string(r.waiting_task) +
                            " references an invalid task",
                        {r.waiting_task}});
    } else if (r.kind != RuntimeRule::Kind::EventSync && r.watched.empty()) {
      issues.push_back({ValidationIssue::Kind::EmptyScope, false,
                        "sync task " + std::to_string(r.waiting_task) +
                            " watches no lanes and will not block",
                        {r.waiting_task}});
    }
  }

  if (edges_ok && n > 0) {
    // chain-order sanity: same-lane edges should not point backwards in time
    for (const auto& [u, v] : graph.fixed_edges) {
      const Task& a = graph.tasks[u];
      const Task& b = graph.tasks[v];
      if (a.processor == b.processor && a.original_start > b.original_start) {
        issues.push_back({ValidationIssue::Kind::ChainOrder, false,
                          "edge " + std::to_string(u) + "->" + std::to_string(v) +
                              " runs against original start order on " +
                              to_string(a.processor),
                          {u, v}});
      }
    }

    std::vector<int> indeg(n, 0);
    std::vector<std::vector<TaskId>> adj(n);
    for (const auto& [u, v] : graph.fixed_edges) {
      adj[u].push_back(v);
      ++indeg[v];
    }
    std::queue<TaskId> q;
    for (TaskId i = 0; i < n; ++i)
      if (indeg[i] == 0) q.push(i);
    TaskId seen = 0;
    std::vector<int> left = indeg;
    while (!q.empty()) {
      TaskId u = q.front();
      q.pop();
      ++seen;
      for (TaskId v : adj[u])
        if (--left[v] == 0) q.push(v);
    }
    if (seen != n) {
      // walk unmet predecessors from any stuck task until one repeats
      TaskId cur = -1;
      for (TaskId i = 0; i < n && cur < 0; ++i)
        if (left[i] > 0) cur = i;
      std::vector<std::vector<TaskId>> preds(n);
      for (const auto& [u, v] : graph.fixed_edges)
        if (left[u] > 0 && left[v] > 0) preds[v].push_back(u);
      std::vector<TaskId> path;
      std::vector<char> on_path(n, 0);
      while (cur >= 0 && !on_path[cur]) {
        on_path[cur] = 1;
        path.push_back(cur);
        TaskId next = -1;
        for (TaskId p : preds[cur])
          if (next < 0 || p < next) next = p;
        cur = next;
      }
      std::vector<TaskId> cycle;
      if (cur >= 0) {
        auto it = std::find(path.begin(), path.end(), cur);
        cycle.assign(it, path.end());
        std::reverse(cycle.begin(), cycle.end());
      }
      issues.push_back({ValidationIssue::Kind::Cycle, true,
                        "dependency cycle: " + join_ids(cycle), cycle});
    }
  }

  return issues;
}

TaskId pick_ready(const ExecutionGraph& graph, std::span<const TaskId> ready) {
  TaskId best = -1;
  for (TaskId id : ready) {
    if (best < 0) {
      best = id;
      continue;
    }
    const Task& a = graph.tasks[id];
    const Task& b = graph.tasks[best];
    if (std::pair(a.original_start, a.id) < std::pair(b.original_start, b.id)) best = id;
  }
  return best;
}

namespace {

using Key = std::pair<Micros, TaskId>;  // (original_start, id)

struct Engine {
  const ExecutionGraph& graph;
  TaskId n;
  std::vector<ProcessorId> lanes;
  std::vector<int> lane_of;          // task -> lane index
  std::vector<Micros> clock;         // lane -> busy-until
  std::vector<std::set<Key>> ready;  // lane -> ready, unstarted tasks
  std::vector<int> indeg;
  std::vector<std::vector<TaskId>> adj;
  std::vector<int> rule_of;  // task -> rule index or -1
  std::vector<std::vector<int>> watched_lanes;
  std::vector<char> started;
  std::vector<Micros> sim_start, sim_end;
  TaskId unstarted;
  std::priority_queue<Key, std::vector<Key>, std::greater<>> completions;  // (end, id)
  Micros now;

  explicit Engine(const ExecutionGraph& g)
      : graph(g), n(static_cast<TaskId>(g.tasks.size())) {
    std::map<ProcessorId, int> index;
    for (const auto& t : g.tasks) index.emplace(t.processor, 0);
    for (auto& [proc, idx] : index) {
      idx = static_cast<int>(lanes.size());
      lanes.push_back(proc);
    }
    lane_of.resize(n);
    for (const auto& t : g.tasks) lane_of[t.id] = index.at(t.processor);
    now = g.iteration_window.start;
    clock.assign(lanes.size(), now);
    ready.resize(lanes.size());
    indeg.assign(n, 0);
    adj.resize(n);
    for (const auto& [u, v] : g.fixed_edges) {
      adj[u].push_back(v);
      ++indeg[v];
    }
    rule_of.assign(n, -1);
    watched_lanes.resize(g.rules.size());
    for (std::size_t r = 0; r < g.rules.size(); ++r) {
      rule_of[g.rules[r].waiting_task] = static_cast<int>(r);
      for (const auto& proc : g.rules[r].watched) {
        auto it = index.find(proc);
        if (it != index.end()) watched_lanes[r].push_back(it->second);
      }
    }
    started.assign(n, 0);
    sim_start.assign(n, 0);
    sim_end.assign(n, 0);
    unstarted = n;
    for (TaskId i = 0; i < n; ++i)
      if (indeg[i] == 0) mark_ready(i);
  }

  void mark_ready(TaskId t) {
    ready[lane_of[t]].insert({graph.tasks[t].original_start, t});
  }

  bool rule_ok(TaskId t) const {
    int r = rule_of[t];
    if (r < 0) return true;
    const RuntimeRule& rule = graph.rules[r];
    if (rule.kind == RuntimeRule::Kind::EventSync) {
      if (!rule.bound_task || *rule.bound_task < 0) return true;
      return started[*rule.bound_task] && sim_end[*rule.bound_task] <= now;
    }
    int own = lane_of[t];
    for (int lw : watched_lanes[r]) {
      if (clock[lw] > now) return false;
      auto pending = ready[lw].size() - (lw == own ? 1u : 0u);
      if (pending > 0) return false;
    }
    return true;
  }

  void complete(TaskId t) {
    for (TaskId d : adj[t])
      if (--indeg[d] == 0) mark_ready(d);
  }

  void start(TaskId t) {
    ready[lane_of[t]].erase({graph.tasks[t].original_start, t});
    started[t] = 1;
    sim_start[t] = now;
    sim_end[t] = now + graph.tasks[t].duration;
    --unstarted;
    if (graph.tasks[t].duration == 0) {
      complete(t);
    } else {
      clock[lane_of[t]] = sim_end[t];
      completions.push({sim_end[t], t});
    }
  }

  // start every task that can run at the current time, lowest key first
  void drain_startable() {
    for (;;) {
      TaskId best = -1;
      Key best_key{};
      for (std::size_t l = 0; l < lanes.size(); ++l) {
        if (clock[l] > now || ready[l].empty()) continue;
        const Key& head = *ready[l].begin();
        if (!rule_ok(head.second)) continue;  // lane stalls behind its sync
        if (best < 0 || head < best_key) {
          best = head.second;
          best_key = head;
        }
      }
      if (best < 0) return;
      start(best);
    }
  }

  [[noreturn]] void report_deadlock() {
    // every started task has finished here, so blockers are all unstarted
    std::vector<std::vector<TaskId>> preds(n);
    for (const auto& [u, v] : graph.fixed_edges)
      if (!started[u] && !started[v]) preds[v].push_back(u);
    auto blocker_of = [&](TaskId t) -> TaskId {
      if (indeg[t] > 0) {
        TaskId b = -1;
        for (TaskId p : preds[t])
          if (b < 0 || p < b) b = p;
        return b;
      }
      int own = lane_of[t];
      const Key mine{graph.tasks[t].original_start, t};
      if (*ready[own].begin() < mine) return ready[own].begin()->second;
      int r = rule_of[t];
      if (r >= 0) {
        const RuntimeRule& rule = graph.rules[r];
        if (rule.kind == RuntimeRule::Kind::EventSync) return rule.bound_task.value_or(-1);
        for (int lw : watched_lanes[r]) {
          for (const auto& [key, id] : ready[lw])
            if (id != t) return id;
        }
      }
      return -1;
    };
    TaskId cur = -1;
    for (TaskId i = 0; i < n && cur < 0; ++i)
      if (!started[i]) cur = i;
    std::vector<TaskId> path;
    std::vector<char> on_path(n, 0);
    while (cur >= 0 && !on_path[cur]) {
      on_path[cur] = 1;
      path.push_back(cur);
      cur = blocker_of(cur);
    }
    std::vector<TaskId> cycle;
    if (cur >= 0) {
      auto it = std::find(path.begin(), path.end(), cur);
      cycle.assign(it, path.end());
    } else {
      cycle = path;  // blocked chain with no resolvable cycle witness
    }
    throw SimulationError("deadlock with " + std::to_string(unstarted) +
                          " tasks blocked: " + join_ids(cycle));
  }

  SimulatedTrace run() {
    for (;;) {
      drain_startable();
      if (completions.empty()) {
        if (unstarted == 0) break;
        report_deadlock();
      }
      Micros t2 = completions.top().first;
      while (!completions.empty() && completions.top().first == t2) {
        TaskId done = completions.top().second;
        completions.pop();
        complete(done);
      }
      now = t2;
    }

    SimulatedTrace out;
    out.entries.reserve(n);
    for (TaskId i = 0; i < n; ++i)
      out.entries.push_back({i, sim_start[i], sim_end[i], graph.tasks[i].processor});
    std::sort(out.entries.begin(), out.entries.end(), [](const SimEntry& a, const SimEntry& b) {
      return std::pair(a.sim_start, a.task_id) < std::pair(b.sim_start, b.task_id);
    });
    if (out.entries.empty()) {
      out.start = out.end = graph.iteration_window.start;
    } else {
      out.start = out.entries.front().sim_start;
      out.end = out.start;
      for (const auto& e : out.entries) out.end = std::max(out.end, e.sim_end);
    }
    out.makespan = out.end - out.start;
    return out;
  }
};

}  // namespace

SimulatedTrace simulate(const ExecutionGraph& graph) {
  for (const auto& issue : validate_graph(graph)) {
    if (issue.error) throw SimulationError("invalid graph: " + issue.message);
  }
  Engine engine(graph);
  return engine.run();
}

std::string simulated_to_chrome_json(const ExecutionGraph& graph, const SimulatedTrace& sim) {
  std::vector<TraceEvent> events;
  events.reserve(sim.entries.size());
  for (const auto& e : sim.entries) {
    const Task& t = graph.tasks[e.task_id];
    TraceEvent ev;
    ev.name = t.name;
    if (t.kind == TaskKind::Gpu) {
      ev.category = EventCategory::GpuKernel;
      ev.stream_id = t.processor.lane;
    } else {
      switch (t.op_class) {
        case OpClass::Launch:
        case OpClass::Sync:
        case OpClass::EventRecord:
        case OpClass::EventWait:
          ev.category = EventCategory::CudaRuntime;
          break;
        default:
          ev.category = EventCategory::CpuOp;
      }
    }
    ev.timestamp = e.sim_start;
    ev.duration = e.sim_end - e.sim_start;
    ev.process_id = t.processor.rank;
    ev.thread_id = t.processor.lane;
    ev.correlation_id = t.correlation_id;
    ev.args = t.meta;
    if (t.layer_tag) ev.args["layer"] = std::to_string(*t.layer_tag);
    if (t.microbatch_tag) ev.args["microbatch"] = std::to_string(*t.microbatch_tag);
    events.push_back(std::move(ev));
  }
  return chrome_json(events);
}

}  // namespace tracesim
