#pragma once

// Independent reference implementations the tests compare the real code
// against. Everything here favors obviousness over speed: microsecond tick
// loops and full rescans instead of event queues and incremental state.

#include <random>
#include <vector>

#include "tracesim/build.hpp"
#include "tracesim/metrics.hpp"
#include "tracesim/pipeline.hpp"
#include "tracesim/simulate.hpp"

namespace tracesim::oracle {

// Brute-force replay: advances time one microsecond at a time and rescans
// every task for startability using the same rules as the engine (completions
// before starts, per-lane (original_start, id) dispatch, sync scope idle plus
// empty pending-ready check). Throws SimulationError on deadlock.
SimulatedTrace tick_simulate(const ExecutionGraph& graph);

// Per-microsecond breakdown: classifies each microsecond of the window by
// scanning all intervals.
Breakdown tick_breakdown(const std::vector<MetricInterval>& intervals, IterationWindow window);

// Per-microsecond, per-rank utilization accumulation.
std::map<int, UtilizationSeries> tick_utilization(const std::vector<MetricInterval>& intervals,
                                                  IterationWindow window, Micros bin_width);

// Joint unit-time pipeline simulation: every stage greedily runs its next
// backward when one is ready, otherwise its next forward if the stage's
// in-flight count stays within pp - stage. Returns each stage's slots in
// start order; agreement with schedule_1f1b is the 1F1B correctness check.
std::vector<std::vector<PipelineSlot>> enumerate_1f1b(int pp, int num_microbatches);

// Random valid execution graphs for engine-vs-oracle fuzzing: forward-only
// fixed edges (acyclic by construction), a few lanes across one or two ranks,
// occasional sync rules. Some draws deadlock; callers compare that outcome
// too.
ExecutionGraph random_graph(std::mt19937_64& rng, int max_tasks = 50, int max_lanes = 4);

}  // namespace tracesim::oracle
