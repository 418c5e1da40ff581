#pragma once

#include <span>
#include <string>
#include <vector>

#include "tracesim/build.hpp"
#include "tracesim/types.hpp"

namespace tracesim {

struct SimEntry {
  TaskId task_id = 0;
  Micros sim_start = 0;
  Micros sim_end = 0;
  ProcessorId processor;
};

struct SimulatedTrace {
  std::vector<SimEntry> entries;  // sorted by (sim_start, task_id)
  Micros start = 0;               // min sim_start
  Micros end = 0;                 // max sim_end
  Micros makespan = 0;            // end - start
};

struct ValidationIssue {
  enum class Kind { Cycle, BadEdge, NegativeDuration, EmptyScope, ChainOrder, BadRule };
  Kind kind;
  bool error = false;  // false: warning only, simulation may proceed
  std::string message;
  std::vector<TaskId> tasks;
};

// Structural checks: edge endpoints exist, durations non-negative, fixed edges
// form a DAG (witness on failure), per-lane edges run in nondecreasing
// original_start order (warning), rule scopes non-empty (warning).
std::vector<ValidationIssue> validate_graph(const ExecutionGraph& graph);

// Deterministic tie-break used everywhere a ready set is reduced to one task:
// smallest (original_start, id).
TaskId pick_ready(const ExecutionGraph& graph, std::span<const TaskId> ready);

// Replays the graph: every task runs for exactly its recorded duration, as
// early as its fixed dependencies, its processor, and its runtime sync rules
// allow. Lane clocks begin at the iteration window start. Per-lane dispatch
// follows (original_start, id) order among ready tasks; a sync task holds its
// lane until every watched lane is idle and has no enqueued-pending work.
//
// Throws SimulationError on validation errors and on deadlock (message lists
// the smallest blocked dependency cycle found).
SimulatedTrace simulate(const ExecutionGraph& graph);

// SimulatedTrace as Chrome trace JSON (one ph:"X" event per task; pid = rank,
// tid = lane). Output parses back through trace_model for re-analysis.
std::string simulated_to_chrome_json(const ExecutionGraph& graph, const SimulatedTrace& sim);

}  // namespace tracesim
