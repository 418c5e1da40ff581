#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tracesim/trace_parse.hpp"
#include "tracesim/types.hpp"

namespace tracesim {

// Table-driven knobs for dependency inference. Defaults cover CUDA/kineto
// naming; everything can be overridden from a JSON policy file.
struct BuildPolicy {
  Micros gap_threshold_us = 1000;

  std::vector<std::string> launch_names = {
      "cudaLaunchKernel",       "cudaLaunchKernelExC",
      "cuLaunchKernel",         "cudaLaunchCooperativeKernel",
      "cudaMemcpyAsync",        "cudaMemsetAsync",
  };
  // name -> sync flavor: "device", "stream", "event"
  std::map<std::string, std::string> sync_names = {
      {"cudaDeviceSynchronize", "device"},
      {"cudaStreamSynchronize", "stream"},
      {"cudaEventSynchronize", "event"},
  };
  std::vector<std::string> record_names = {"cudaEventRecord"};
  std::vector<std::string> wait_names = {"cudaStreamWaitEvent"};
  // case-insensitive substrings marking communication kernels
  std::vector<std::string> comm_patterns = {"nccl",         "allreduce", "allgather",
                                            "reducescatter", "sendrecv",  "alltoall"};

  static BuildPolicy from_json(const std::string& json_text);

  bool is_launch(const std::string& name) const;
  bool is_record(const std::string& name) const;
  bool is_wait(const std::string& name) const;
  std::optional<std::string> sync_flavor(const std::string& name) const;
  bool is_comm_name(const std::string& name) const;
};

struct RuntimeRule {
  enum class Kind { StreamSync, DeviceSync, EventSync };

  Kind kind = Kind::StreamSync;
  TaskId waiting_task = 0;
  std::vector<ProcessorId> watched;     // stream/device scope (empty => no-op)
  std::optional<std::int64_t> event_id; // EventSync only
  std::optional<TaskId> bound_task;     // EventSync: record-side predecessor
};

struct Diagnostic {
  enum class Kind {
    OrphanKernel,        // GPU task with no matching launch
    UnmatchedLaunch,     // launch correlation that matches no kernel
    UnmatchedWait,       // stream-wait with no earlier record for its event
    UnmatchedRecord,     // record with no kernel preceding it on its stream
    UnknownStream,       // stream sync naming a stream with no tasks
    DroppedEnclosingOp,  // nested CPU span dropped in favor of its leaves
    InterThreadEdge,     // gap-heuristic edge, reported for inspection
  };
  Kind kind;
  std::string message;
  std::vector<TaskId> tasks;
};

using Edge = std::pair<TaskId, TaskId>;  // from -> to, both must finish-start

struct ExecutionGraph {
  std::vector<Task> tasks;  // ids are dense: tasks[i].id == i
  std::vector<Edge> fixed_edges;
  std::vector<RuntimeRule> rules;
  std::set<ProcessorId> processors;
  IterationWindow iteration_window;
  // event id -> recording task / record-side predecessor kernel, in record
  // order (later records rebind); used by EventSync resolution and tests.
  std::map<std::int64_t, TaskId> event_bindings;
  std::vector<Diagnostic> diagnostics;

  const Task& task(TaskId id) const { return tasks.at(static_cast<std::size_t>(id)); }
};

// Classifies one event the way build_graph will. Exposed for tests/tools.
OpClass classify_task(const TraceEvent& event, const BuildPolicy& policy);

// CPU->CPU fixed edges over already-created CPU tasks: same-thread chaining is
// part of lane chains; this returns only the cross-thread gap edges.
std::vector<Edge> infer_cpu_cpu(const std::vector<Task>& tasks, const BuildPolicy& policy,
                                Micros window_start, std::vector<Diagnostic>* diagnostics);

// Per event id, the (record timestamp, record-side predecessor kernel) pairs
// in timestamp order. A re-recorded id appends; later waits/syncs bind to the
// most recent earlier entry.
using RecordTimeline = std::map<std::int64_t, std::vector<std::pair<Micros, TaskId>>>;

// GPU->CPU runtime rules for sync-class CPU tasks.
std::vector<RuntimeRule> infer_gpu_cpu(const std::vector<Task>& tasks,
                                       const std::set<ProcessorId>& processors,
                                       const BuildPolicy& policy, const RecordTimeline& records,
                                       std::vector<Diagnostic>* diagnostics);

// Builds the task-level execution graph for one rank's events. The rank label
// defaults to the events' process id. Throws GraphError on cycles (message
// carries a witness) and on structural violations.
ExecutionGraph build_graph(const std::vector<TraceEvent>& events,
                           const BuildPolicy& policy = BuildPolicy(),
                           std::optional<int> rank_override = std::nullopt);

// Joins per-rank graphs into one (disjoint processors, re-densified task ids).
// There are no cross-rank edges; transforms add them where needed.
ExecutionGraph merge_ranks(const std::map<int, ExecutionGraph>& per_rank);

// Per-rank slice of a (possibly merged) graph; keeps relative task order.
ExecutionGraph slice_rank(const ExecutionGraph& graph, int rank);

std::vector<int> ranks_in(const ExecutionGraph& graph);

}  // namespace tracesim
