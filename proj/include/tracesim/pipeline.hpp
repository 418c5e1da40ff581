#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tracesim/trace_parse.hpp"
#include "tracesim/types.hpp"

namespace tracesim {

// One pipeline-parallel schedule slot: run the forward or backward pass of a
// single microbatch on this stage.
struct PipelineSlot {
  bool forward = true;
  int microbatch = 0;
};

// Non-interleaved one-forward-one-backward order for one stage: min(pp-stage, m)
// warmup forwards, then strict backward/forward alternation, then the backward
// drain. Keeps at most pp-stage microbatches in flight on the stage.
std::vector<PipelineSlot> schedule_1f1b(int pp, int num_microbatches, int stage);

// A GPU kernel template the builder instantiates once per slot.
struct KernelSpec {
  std::string name;
  Micros duration = 0;
  OpClass op_class = OpClass::Compute;
  std::map<std::string, std::string> args;  // dims, bytes, tags; copied verbatim
};

struct StageSpec {
  std::vector<std::vector<KernelSpec>> layers_fwd;  // one entry per layer on the stage
  std::vector<std::vector<KernelSpec>> layers_bwd;  // same layers, backward-pass kernels
  std::vector<KernelSpec> pre_fwd;    // input embedding, first stage only
  std::vector<KernelSpec> post_fwd;   // final norm + loss, last stage only
  std::vector<KernelSpec> pre_bwd;    // loss gradient, last stage only
  std::vector<KernelSpec> post_bwd;   // embedding gradient, first stage only
  std::vector<KernelSpec> reduce;     // gradient allreduce kernels (empty when dp == 1)
  std::vector<KernelSpec> optimizer;  // per-stage optimizer step
};

struct HostCosts {
  Micros launch = 5;
  Micros record = 2;
  Micros wait = 2;
  Micros sync = 5;  // tail after the waited-for work completes
};

struct PipelineSpec {
  int pp = 1;
  int dp = 1;
  int num_microbatches = 1;
  std::vector<StageSpec> stages;  // size pp
  HostCosts host;
  Micros p2p_send = 0;       // activation transfer cost on the wire
  Micros p2p_recv_base = 0;  // receive-side cost once data has arrived
  std::int64_t activation_bytes = 0;  // tagged onto p2p kernels
  Micros origin = 0;         // timestamp of the first host op
  int compute_stream = 7;
  int reduce_stream = 9;
  int p2p_stream = 11;
  int main_thread = 100;
  int helper_thread = 200;  // backward launcher thread, pp == 1 only
  // id counters start here so consecutive builds (iterations) never collide
  std::int64_t first_event = 1;
  std::int64_t first_correlation = 1;
};

// Optional per-instance duration tweak. Called once per emitted op in a
// deterministic order with a running index; returns the duration to use.
using DurationHook = std::function<Micros(std::size_t op_index, Micros base)>;

struct BuiltPipeline {
  std::vector<TraceEvent> events;  // all ranks; pid = rank = stage + pp * dp_index
  Micros start = 0;
  Micros end = 0;
  std::map<int, Micros> rank_end;
  std::int64_t next_event = 1;        // one past the last event id handed out
  std::int64_t next_correlation = 1;  // one past the last correlation id
};

// Lays the schedule out in time. Cross-stage transfers rendezvous: the receive
// kernel begins when the receiver is locally ready and runs until the matching
// send has finished plus p2p_recv_base, so each rank's trace is self-contained.
// Collectives likewise start at local readiness and end at the group's latest
// start plus the kernel's own duration.
BuiltPipeline build_pipeline(const PipelineSpec& spec, const DurationHook& hook = {});

}  // namespace tracesim
