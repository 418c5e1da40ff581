#pragma once

#include <map>
#include <vector>

#include "tracesim/build.hpp"
#include "tracesim/simulate.hpp"
#include "tracesim/types.hpp"

namespace tracesim {

// Unit of accounting for all metrics: a half-open busy interval [start, end)
// on one lane, pre-classified so the sweeps need no lookups.
struct MetricInterval {
  Micros start = 0;
  Micros end = 0;
  int rank = 0;
  LaneKind lane_kind = LaneKind::CpuThread;
  int lane = 0;
  bool is_comm = false;  // communication kernel (only meaningful for GPU lanes)
};

// Intervals at recorded times (sim == nullptr) or simulated times.
std::vector<MetricInterval> task_intervals(const ExecutionGraph& graph,
                                           const SimulatedTrace* sim = nullptr);

// GPU time split against the window: every microsecond of [window) lands in
// exactly one bucket, so the four fields always sum to window span.
struct Breakdown {
  Micros total = 0;
  Micros exposed_compute = 0;  // >=1 compute kernel running, no comm
  Micros exposed_comm = 0;     // >=1 comm kernel running, no compute
  Micros overlapped = 0;       // both at once
  Micros other = 0;            // neither (CPU-only time, launch gaps, bubbles)
};

Breakdown breakdown(const std::vector<MetricInterval>& intervals, IterationWindow window);
std::map<int, Breakdown> breakdown_by_rank(const std::vector<MetricInterval>& intervals,
                                           IterationWindow window);

struct UtilizationBin {
  Micros start = 0;
  double value = 0.0;  // covered / bin span, in [0, 1]
};

struct UtilizationSeries {
  Micros bin_width = 0;
  std::vector<UtilizationBin> bins;
};

// Fraction of each bin covered by at least one kernel on any stream of the
// rank. The final bin may be shorter than bin_width; its value is normalized
// by its actual span.
std::map<int, UtilizationSeries> utilization_by_rank(
    const std::vector<MetricInterval>& intervals, IterationWindow window, Micros bin_width);

Micros makespan(const std::vector<MetricInterval>& intervals);
std::map<int, Micros> makespan_by_rank(const std::vector<MetricInterval>& intervals);

// |candidate - reference| / reference; zero_reference set (and 0 returned)
// when the reference is 0.
double relative_error(Micros reference, Micros candidate, bool* zero_reference = nullptr);

struct TaskDelta {
  TaskId task = 0;
  Micros reference_start = 0;
  Micros simulated_start = 0;
  Micros delta = 0;  // simulated - reference
};

struct ReplayReport {
  Micros reference_makespan = 0;
  Micros simulated_makespan = 0;
  double relative_error = 0.0;
  bool zero_reference = false;
  double mean_abs_delta = 0.0;
  Micros max_abs_delta = 0;
  std::vector<TaskDelta> worst;  // largest |delta| first
};

// Per-task start-time agreement between the recorded trace and its replay.
ReplayReport compare_replay(const ExecutionGraph& graph, const SimulatedTrace& sim,
                            std::size_t worst_n = 10);

}  // namespace tracesim
