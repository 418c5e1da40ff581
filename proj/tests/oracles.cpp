#include "oracles.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace tracesim::oracle {

SimulatedTrace tick_simulate(const ExecutionGraph& graph) {
  const auto n = static_cast<TaskId>(graph.tasks.size());
  std::map<ProcessorId, std::vector<TaskId>> lane_tasks;
  for (const auto& t : graph.tasks) lane_tasks[t.processor].push_back(t.id);
  std::map<ProcessorId, Micros> lane_free;
  for (const auto& [proc, ids] : lane_tasks) lane_free[proc] = graph.iteration_window.start;

  std::vector<char> started(n, 0), done(n, 0);
  std::vector<Micros> sim_start(n, 0), sim_end(n, 0);
  std::vector<int> rule_of(n, -1);
  for (std::size_t r = 0; r < graph.rules.size(); ++r)
    rule_of[graph.rules[r].waiting_task] = static_cast<int>(r);

  auto preds_done = [&](TaskId t) {
    for (const auto& [u, v] : graph.fixed_edges)
      if (v == t && !done[u]) return false;
    return true;
  };
  auto is_ready = [&](TaskId t) { return !started[t] && preds_done(t); };
  auto pending_on = [&](const ProcessorId& lane, TaskId self) {
    int count = 0;
    for (TaskId t : lane_tasks.at(lane))
      if (t != self && is_ready(t)) ++count;
    return count;
  };
  auto rule_ok = [&](TaskId t, Micros tau) {
    int r = rule_of[t];
    if (r < 0) return true;
    const RuntimeRule& rule = graph.rules[r];
    if (rule.kind == RuntimeRule::Kind::EventSync) {
      if (!rule.bound_task || *rule.bound_task < 0) return true;
      return started[*rule.bound_task] != 0 && sim_end[*rule.bound_task] <= tau;
    }
    for (const auto& proc : rule.watched) {
      auto it = lane_free.find(proc);
      if (it == lane_free.end()) continue;  // no tasks on that lane
      if (it->second > tau) return false;
      if (pending_on(proc, t) > 0) return false;
    }
    return true;
  };
  auto lane_head = [&](const ProcessorId& lane) -> TaskId {
    TaskId best = -1;
    for (TaskId t : lane_tasks.at(lane)) {
      if (!is_ready(t)) continue;
      if (best < 0 || std::pair(graph.tasks[t].original_start, t) <
                          std::pair(graph.tasks[best].original_start, best))
        best = t;
    }
    return best;
  };

  Micros horizon = graph.iteration_window.start + 5;
  for (const auto& t : graph.tasks) horizon += t.duration + 1;

  TaskId remaining = n;
  Micros tau = graph.iteration_window.start;
  while (remaining > 0) {
    if (tau > horizon)
      throw SimulationError("oracle deadlock: " + std::to_string(remaining) + " tasks blocked");
    for (TaskId t = 0; t < n; ++t)
      if (started[t] && !done[t] && sim_end[t] <= tau) done[t] = 1;
    for (;;) {
      TaskId best = -1;
      for (const auto& [proc, free_at] : lane_free) {
        if (free_at > tau) continue;
        TaskId head = lane_head(proc);
        if (head < 0 || !rule_ok(head, tau)) continue;
        if (best < 0 || std::pair(graph.tasks[head].original_start, head) <
                            std::pair(graph.tasks[best].original_start, best))
          best = head;
      }
      if (best < 0) break;
      started[best] = 1;
      sim_start[best] = tau;
      sim_end[best] = tau + graph.tasks[best].duration;
      --remaining;
      if (graph.tasks[best].duration == 0) {
        done[best] = 1;
      } else {
        lane_free[graph.tasks[best].processor] = sim_end[best];
      }
    }
    ++tau;
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

Breakdown tick_breakdown(const std::vector<MetricInterval>& intervals, IterationWindow window) {
  Breakdown b;
  b.total = window.end - window.start;
  for (Micros us = window.start; us < window.end; ++us) {
    bool compute = false, comm = false;
    for (const auto& iv : intervals) {
      if (iv.lane_kind != LaneKind::CudaStream) continue;
      if (iv.start <= us && us < iv.end) (iv.is_comm ? comm : compute) = true;
    }
    if (compute && comm)
      ++b.overlapped;
    else if (compute)
      ++b.exposed_compute;
    else if (comm)
      ++b.exposed_comm;
    else
      ++b.other;
  }
  return b;
}

std::map<int, UtilizationSeries> tick_utilization(const std::vector<MetricInterval>& intervals,
                                                  IterationWindow window, Micros bin_width) {
  std::set<int> ranks;
  for (const auto& iv : intervals)
    if (iv.lane_kind == LaneKind::CudaStream) ranks.insert(iv.rank);

  std::map<int, UtilizationSeries> out;
  const Micros span = window.end - window.start;
  const Micros nbins = span <= 0 ? 0 : (span + bin_width - 1) / bin_width;
  for (int rank : ranks) {
    UtilizationSeries series;
    series.bin_width = bin_width;
    for (Micros b = 0; b < nbins; ++b) {
      Micros lo = window.start + b * bin_width;
      Micros hi = std::min(window.end, lo + bin_width);
      Micros covered = 0;
      for (Micros us = lo; us < hi; ++us) {
        for (const auto& iv : intervals) {
          if (iv.lane_kind != LaneKind::CudaStream || iv.rank != rank) continue;
          if (iv.start <= us && us < iv.end) {
            ++covered;
            break;
          }
        }
      }
      series.bins.push_back(
          {lo, hi > lo ? static_cast<double>(covered) / static_cast<double>(hi - lo) : 0.0});
    }
    out[rank] = std::move(series);
  }
  return out;
}

std::vector<std::vector<PipelineSlot>> enumerate_1f1b(int pp, int num_microbatches) {
  if (pp < 1 || num_microbatches < pp)
    throw std::invalid_argument("enumerate_1f1b needs pp >= 1 and microbatches >= pp");
  const int m = num_microbatches;
  std::vector<std::vector<PipelineSlot>> order(pp);
  // f_done[s][i] / b_done[s][i]: tick at which stage s finished that pass
  std::vector<std::vector<int>> f_done(pp, std::vector<int>(m, -1));
  std::vector<std::vector<int>> b_done(pp, std::vector<int>(m, -1));
  std::vector<int> f_next(pp, 0), b_next(pp, 0);

  int finished_slots = 0;
  const int total = 2 * m * pp;
  const int tick_limit = 4 * (m + pp) + 8;
  for (int tick = 0; finished_slots < total; ++tick) {
    if (tick > tick_limit) throw std::logic_error("enumerate_1f1b did not converge");
    struct Start {
      int stage;
      bool forward;
      int mb;
    };
    std::vector<Start> starts;
    for (int s = 0; s < pp; ++s) {
      if (b_next[s] < m) {
        int i = b_next[s];
        bool fwd_done = f_done[s][i] >= 0 && f_done[s][i] <= tick;
        bool down_done = s == pp - 1 || (b_done[s + 1][i] >= 0 && b_done[s + 1][i] <= tick);
        if (fwd_done && down_done) {
          starts.push_back({s, false, i});
          continue;
        }
      }
      if (f_next[s] < m) {
        int i = f_next[s];
        bool up_done = s == 0 || (f_done[s - 1][i] >= 0 && f_done[s - 1][i] <= tick);
        int in_flight = f_next[s] - b_next[s];
        if (up_done && in_flight < pp - s) starts.push_back({s, true, i});
      }
    }
    for (const auto& st : starts) {
      order[st.stage].push_back({st.forward, st.mb});
      if (st.forward) {
        f_done[st.stage][st.mb] = tick + 1;
        ++f_next[st.stage];
      } else {
        b_done[st.stage][st.mb] = tick + 1;
        ++b_next[st.stage];
      }
      ++finished_slots;
    }
  }
  return order;
}

ExecutionGraph random_graph(std::mt19937_64& rng, int max_tasks, int max_lanes) {
  auto pick = [&](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  const int n = pick(1, max_tasks);
  const int n_lanes = pick(1, max_lanes);

  ExecutionGraph g;
  std::vector<ProcessorId> lanes;
  for (int l = 0; l < n_lanes; ++l) {
    ProcessorId p;
    p.rank = l < 2 ? 0 : 1;
    p.kind = pick(0, 1) ? LaneKind::CudaStream : LaneKind::CpuThread;
    p.lane = l;
    lanes.push_back(p);
    g.processors.insert(p);
  }

  for (TaskId i = 0; i < n; ++i) {
    Task t;
    t.id = i;
    const ProcessorId& proc = lanes[static_cast<std::size_t>(pick(0, n_lanes - 1))];
    t.processor = proc;
    t.kind = proc.kind == LaneKind::CudaStream ? TaskKind::Gpu : TaskKind::Cpu;
    t.op_class = t.kind == TaskKind::Gpu
                     ? (pick(0, 3) == 0 ? OpClass::Communication : OpClass::Compute)
                     : OpClass::Other;
    t.name = "t" + std::to_string(i);
    t.duration = pick(0, 40);
    t.original_start = pick(0, 500);
    g.tasks.push_back(std::move(t));
  }

  for (TaskId v = 1; v < n; ++v) {
    int edges = pick(0, 2);
    for (int e = 0; e < edges; ++e) {
      TaskId u = static_cast<TaskId>(pick(0, v - 1));
      g.fixed_edges.emplace_back(u, v);
    }
  }
  std::sort(g.fixed_edges.begin(), g.fixed_edges.end());
  g.fixed_edges.erase(std::unique(g.fixed_edges.begin(), g.fixed_edges.end()),
                      g.fixed_edges.end());

  std::set<TaskId> with_rule;
  const int n_rules = pick(0, std::max(1, n / 8));
  for (int r = 0; r < n_rules; ++r) {
    TaskId t = static_cast<TaskId>(pick(0, n - 1));
    if (!with_rule.insert(t).second) continue;
    RuntimeRule rule;
    rule.waiting_task = t;
    int kind = pick(0, 2);
    if (kind == 0 && t > 0) {
      rule.kind = RuntimeRule::Kind::EventSync;
      rule.event_id = r;
      rule.bound_task = static_cast<TaskId>(pick(0, t - 1));
    } else {
      rule.kind = kind == 1 ? RuntimeRule::Kind::DeviceSync : RuntimeRule::Kind::StreamSync;
      int n_watch = pick(1, n_lanes);
      std::set<int> seen;
      for (int w = 0; w < n_watch; ++w) {
        int l = pick(0, n_lanes - 1);
        if (seen.insert(l).second) rule.watched.push_back(lanes[static_cast<std::size_t>(l)]);
      }
    }
    g.rules.push_back(std::move(rule));
  }

  g.iteration_window.start = 0;
  Micros total = 0;
  for (const auto& t : g.tasks) total += t.duration;
  g.iteration_window.end = total + 1;
  return g;
}

}  // namespace tracesim::oracle
