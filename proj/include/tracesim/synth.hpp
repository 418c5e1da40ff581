#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tracesim/pipeline.hpp"
#include "tracesim/trace_parse.hpp"
#include "tracesim/types.hpp"

namespace tracesim {

// Base costs the generator assigns, all in µs. GEMMs scale from a timed
// reference point by m*n*k; collectives follow alpha + bytes*scale/beta; the
// optimizer scales linearly with the parameter bytes it touches.
struct SynthCosts {
  Micros launch = 5;
  Micros record = 2;
  Micros wait = 2;
  Micros sync = 5;
  Micros gemm_ref_us = 600;
  std::int64_t gemm_ref_mnk = std::int64_t{1} << 30;
  double bwd_gemm_factor = 2.0;
  Micros attn_misc = 300;
  Micros embed = 150;
  Micros head = 150;
  Micros loss_grad = 150;
  Micros optimizer_ref_us = 400;
  std::int64_t optimizer_ref_bytes = std::int64_t{1} << 24;
  double alpha_us = 10.0;
  double bytes_per_us = 50000.0;
  Micros p2p_recv_base = 10;
};

struct SynthSpec {
  ModelConfig model;
  ParallelismConfig par;
  std::int64_t tokens_per_microbatch = 2048;
  std::int64_t vocab = 32768;
  SynthCosts costs;
  double jitter_pct = 0.0;  // each op duration drawn from [1-j, 1+j] * base
  std::uint64_t seed = 1;
  int iterations = 1;
  Micros iteration_gap = 200000;
  Micros origin = 1000000;

  static SynthSpec from_json(const std::string& text);
  void validate() const;  // throws std::invalid_argument
};

struct IterationTruth {
  Micros start = 0;
  Micros end = 0;
  Micros makespan = 0;
  std::map<int, Micros> rank_end;
};

struct GroundTruth {
  std::vector<IterationTruth> iterations;
  std::string to_json() const;
};

struct SynthResult {
  std::vector<TraceEvent> events;  // all ranks, all iterations; pid = rank
  GroundTruth truth;
};

SynthResult generate(const SynthSpec& spec);

// The pipeline layout generate() runs, exposed so rescale predictions can be
// checked against a reference built from identical per-op costs.
PipelineSpec pipeline_spec_for(const SynthSpec& spec);

// Per-stage gradient bytes the generator all-reduces (layer shares plus the
// embedding table on the first stage and the output head on the last).
std::int64_t synth_stage_reduce_bytes(const SynthSpec& spec, int stage);

std::map<int, std::vector<TraceEvent>> split_by_rank(const std::vector<TraceEvent>& events);

}  // namespace tracesim
