#include "tracesim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

namespace tracesim {

std::vector<MetricInterval> task_intervals(const ExecutionGraph& graph,
                                           const SimulatedTrace* sim) {
  std::vector<MetricInterval> out;
  out.reserve(graph.tasks.size());
  for (const auto& t : graph.tasks) {
    MetricInterval iv;
    iv.start = t.original_start;
    iv.end = t.original_start + t.duration;
    iv.rank = t.processor.rank;
    iv.lane_kind = t.processor.kind;
    iv.lane = t.processor.lane;
    iv.is_comm = t.op_class == OpClass::Communication;
    out.push_back(iv);
  }
  if (sim) {
    std::vector<std::pair<Micros, Micros>> times(graph.tasks.size());
    for (const auto& e : sim->entries) times[e.task_id] = {e.sim_start, e.sim_end};
    for (auto& t : graph.tasks) {
      out[t.id].start = times[t.id].first;
      out[t.id].end = times[t.id].second;
    }
  }
  return out;
}

namespace {

struct Delta {
  Micros at;
  int compute;
  int comm;
};

Breakdown sweep(const std::vector<Delta>& deltas_sorted, IterationWindow window) {
  Breakdown b;
  b.total = window.end - window.start;
  Micros prev = window.start;
  int compute = 0, comm = 0;
  auto account = [&](Micros upto) {
    if (upto <= prev) return;
    Micros span = upto - prev;
    if (compute > 0 && comm > 0)
      b.overlapped += span;
    else if (compute > 0)
      b.exposed_compute += span;
    else if (comm > 0)
      b.exposed_comm += span;
    else
      b.other += span;
    prev = upto;
  };
  for (const auto& d : deltas_sorted) {
    account(d.at);
    compute += d.compute;
    comm += d.comm;
  }
  account(window.end);
  return b;
}

std::vector<Delta> gpu_deltas(const std::vector<MetricInterval>& intervals,
                              IterationWindow window, int rank_filter, bool any_rank) {
  std::vector<Delta> deltas;
  for (const auto& iv : intervals) {
    if (iv.lane_kind != LaneKind::CudaStream) continue;
    if (!any_rank && iv.rank != rank_filter) continue;
    Micros s = std::max(iv.start, window.start);
    Micros e = std::min(iv.end, window.end);
    if (s >= e) continue;
    int dc = iv.is_comm ? 0 : 1;
    int dm = iv.is_comm ? 1 : 0;
    deltas.push_back({s, dc, dm});
    deltas.push_back({e, -dc, -dm});
  }
  std::sort(deltas.begin(), deltas.end(),
            [](const Delta& a, const Delta& b) { return a.at < b.at; });
  return deltas;
}

}  // namespace

Breakdown breakdown(const std::vector<MetricInterval>& intervals, IterationWindow window) {
  if (window.end < window.start) window.end = window.start;
  return sweep(gpu_deltas(intervals, window, 0, true), window);
}

std::map<int, Breakdown> breakdown_by_rank(const std::vector<MetricInterval>& intervals,
                                           IterationWindow window) {
  if (window.end < window.start) window.end = window.start;
  std::map<int, Breakdown> out;
  for (const auto& iv : intervals) out.emplace(iv.rank, Breakdown{});
  for (auto& [rank, b] : out) b = sweep(gpu_deltas(intervals, window, rank, false), window);
  return out;
}

std::map<int, UtilizationSeries> utilization_by_rank(
    const std::vector<MetricInterval>& intervals, IterationWindow window, Micros bin_width) {
  if (bin_width <= 0) throw std::invalid_argument("bin_width must be positive");
  std::map<int, UtilizationSeries> out;
  if (window.end <= window.start) return out;

  std::map<int, std::vector<std::pair<Micros, int>>> deltas;  // rank -> (time, +-1)
  for (const auto& iv : intervals) {
    deltas.try_emplace(iv.rank);
    if (iv.lane_kind != LaneKind::CudaStream) continue;
    Micros s = std::max(iv.start, window.start);
    Micros e = std::min(iv.end, window.end);
    if (s >= e) continue;
    deltas[iv.rank].push_back({s, 1});
    deltas[iv.rank].push_back({e, -1});
  }

  for (auto& [rank, d] : deltas) {
    std::sort(d.begin(), d.end());
    UtilizationSeries series;
    series.bin_width = bin_width;
    std::size_t nbins = static_cast<std::size_t>(
        (window.end - window.start + bin_width - 1) / bin_width);
    std::vector<Micros> covered(nbins, 0);

    Micros prev = window.start;
    int depth = 0;
    auto add_covered = [&](Micros from, Micros to) {
      while (from < to) {
        std::size_t bin = static_cast<std::size_t>((from - window.start) / bin_width);
        Micros bin_end = window.start + static_cast<Micros>(bin + 1) * bin_width;
        Micros chunk = std::min(to, bin_end) - from;
        covered[bin] += chunk;
        from += chunk;
      }
    };
    for (const auto& [at, delta] : d) {
      if (depth > 0) add_covered(prev, at);
      depth += delta;
      prev = at;
    }

    for (std::size_t i = 0; i < nbins; ++i) {
      Micros bin_start = window.start + static_cast<Micros>(i) * bin_width;
      Micros span = std::min(bin_width, window.end - bin_start);
      series.bins.push_back({bin_start, static_cast<double>(covered[i]) / span});
    }
    out[rank] = std::move(series);
  }
  return out;
}

Micros makespan(const std::vector<MetricInterval>& intervals) {
  if (intervals.empty()) return 0;
  Micros lo = std::numeric_limits<Micros>::max();
  Micros hi = std::numeric_limits<Micros>::min();
  for (const auto& iv : intervals) {
    lo = std::min(lo, iv.start);
    hi = std::max(hi, iv.end);
  }
  return hi - lo;
}

std::map<int, Micros> makespan_by_rank(const std::vector<MetricInterval>& intervals) {
  std::map<int, std::pair<Micros, Micros>> span;
  for (const auto& iv : intervals) {
    auto [it, fresh] = span.try_emplace(iv.rank, std::pair(iv.start, iv.end));
    if (!fresh) {
      it->second.first = std::min(it->second.first, iv.start);
      it->second.second = std::max(it->second.second, iv.end);
    }
  }
  std::map<int, Micros> out;
  for (const auto& [rank, se] : span) out[rank] = se.second - se.first;
  return out;
}

double relative_error(Micros reference, Micros candidate, bool* zero_reference) {
  if (zero_reference) *zero_reference = reference == 0;
  if (reference == 0) return 0.0;
  return static_cast<double>(std::llabs(candidate - reference)) /
         static_cast<double>(reference);
}

ReplayReport compare_replay(const ExecutionGraph& graph, const SimulatedTrace& sim,
                            std::size_t worst_n) {
  ReplayReport rep;
  std::vector<TaskDelta> deltas;
  deltas.reserve(sim.entries.size());
  Micros ref_lo = std::numeric_limits<Micros>::max(), ref_hi = std::numeric_limits<Micros>::min();
  for (const auto& e : sim.entries) {
    const Task& t = graph.tasks[e.task_id];
    deltas.push_back({e.task_id, t.original_start, e.sim_start,
                      e.sim_start - t.original_start});
    ref_lo = std::min(ref_lo, t.original_start);
    ref_hi = std::max(ref_hi, t.original_start + t.duration);
  }
  rep.reference_makespan = deltas.empty() ? 0 : ref_hi - ref_lo;
  rep.simulated_makespan = sim.makespan;
  rep.relative_error =
      relative_error(rep.reference_makespan, rep.simulated_makespan, &rep.zero_reference);

  double sum = 0.0;
  for (const auto& d : deltas) {
    Micros mag = std::llabs(d.delta);
    sum += static_cast<double>(mag);
    rep.max_abs_delta = std::max(rep.max_abs_delta, mag);
  }
  rep.mean_abs_delta = deltas.empty() ? 0.0 : sum / static_cast<double>(deltas.size());

  std::sort(deltas.begin(), deltas.end(), [](const TaskDelta& a, const TaskDelta& b) {
    return std::pair(-std::llabs(a.delta), a.task) < std::pair(-std::llabs(b.delta), b.task);
  });
  if (deltas.size() > worst_n) deltas.resize(worst_n);
  rep.worst = std::move(deltas);
  return rep;
}

}  // namespace tracesim
