#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tracesim/build.hpp"
#include "tracesim/cost.hpp"
#include "tracesim/types.hpp"

namespace tracesim {

// How layer/microbatch/phase labels are recovered from a graph. Event args win;
// otherwise kernel names are matched against the layer patterns, and untagged
// GPU tasks inherit from their launching host op via correlation.
struct TagPolicy {
  std::vector<std::string> layer_keys = {"layer", "layer_id"};
  std::vector<std::string> microbatch_keys = {"mb", "microbatch", "micro_batch"};
  std::vector<std::string> phase_keys = {"phase"};
  bool infer_from_names = true;
  bool fill_between = true;  // host ops between two identically-tagged neighbors inherit

  static TagPolicy from_json(const std::string& text);
};

void tag_tasks(ExecutionGraph& graph, const TagPolicy& policy = {});

struct WhatIfConfig {
  ModelConfig source_model;
  ModelConfig target_model;
  ParallelismConfig source_par;
  ParallelismConfig target_par;
  std::shared_ptr<const CostModel> cost_model;
  std::int64_t activation_bytes = 0;  // per-microbatch boundary bytes; needed only
                                      // when adding stages to a trace with no p2p

  static WhatIfConfig from_json(const std::string& text);
  void validate() const;  // throws TransformError (tp changes are rejected here)
};

// Retimes data-parallel gradient collectives for a new group size. Durations
// and group tags change; the graph structure does not.
ExecutionGraph scale_dp(const ExecutionGraph& graph, int source_dp, int target_dp,
                        const CostModel& model);

// Retimes GEMMs (by m*n*k), gradient collectives and optimizer steps (by
// parameter bytes), and p2p sends (by activation bytes) for new model widths.
// Receive-side p2p durations in a multi-stage graph keep their recorded skew,
// so prefer apply_whatif for width changes at pp > 1.
ExecutionGraph change_hidden(const ExecutionGraph& graph, const ModelConfig& source,
                             const ModelConfig& target, const CostModel& model);

// Full pipeline rebuild: measures per-layer kernel sequences, host-op costs,
// p2p and collective sizes from the source graph, then lays out the target
// configuration's schedule from those measurements. Returns the source graph
// unchanged when the target differs in nothing the rebuild cares about.
ExecutionGraph scale_pp(const ExecutionGraph& graph, const WhatIfConfig& cfg);

// Rebuild with a different layer count: added layers clone the last measured
// layer; removed layers drop from the tail.
ExecutionGraph change_layers(const ExecutionGraph& graph, const WhatIfConfig& cfg);

struct TransformResult {
  ExecutionGraph graph;
  std::vector<std::string> notes;  // one line per applied step
};

// Applies the full source->target change: structural edits (layers, pipeline
// size, microbatch count, width at pp > 1, introducing or removing gradient
// collectives) go through one rebuild; pure retimes are applied in place.
TransformResult apply_whatif(const ExecutionGraph& graph, const WhatIfConfig& cfg);

}  // namespace tracesim
