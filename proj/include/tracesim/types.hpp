#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

namespace tracesim {

// All times are integer microseconds. Sub-microsecond values coming from a
// trace are rounded half-up at parse time; everything downstream is exact
// integer arithmetic.
using Micros = std::int64_t;
using TaskId = std::int32_t;
using CorrelationId = std::int64_t;

enum class EventCategory {
  CpuOp,
  CudaRuntime,
  GpuKernel,
  GpuMemcpy,
  GpuMemset,
  Metadata,
};

enum class TaskKind { Cpu, Gpu };

enum class OpClass {
  Compute,
  Communication,
  Launch,
  Sync,
  EventRecord,
  EventWait,
  Other,
};

enum class LaneKind { CpuThread, CudaStream };

const char* to_string(EventCategory c);
const char* to_string(TaskKind k);
const char* to_string(OpClass c);
const char* to_string(LaneKind k);

// A schedulable resource: one CPU thread or one CUDA stream of one rank.
struct ProcessorId {
  int rank = 0;
  LaneKind kind = LaneKind::CpuThread;
  int lane = 0;

  auto operator<=>(const ProcessorId&) const = default;
};

std::string to_string(const ProcessorId& p);

// One record of a Chrome-trace duration event after normalization.
struct TraceEvent {
  std::string name;
  EventCategory category = EventCategory::Metadata;
  Micros timestamp = 0;
  Micros duration = 0;
  int process_id = 0;
  int thread_id = 0;
  std::optional<CorrelationId> correlation_id;
  std::optional<int> stream_id;
  std::map<std::string, std::string> args;
};

// A node of the execution graph. Tasks are immutable once the graph is built;
// transforms produce new tasks rather than mutating shared state.
struct Task {
  TaskId id = 0;
  TaskKind kind = TaskKind::Cpu;
  OpClass op_class = OpClass::Other;
  std::string name;
  Micros duration = 0;
  ProcessorId processor;
  Micros original_start = 0;
  std::optional<CorrelationId> correlation_id;
  std::optional<int> layer_tag;
  std::optional<int> microbatch_tag;
  // Sparse string metadata carried over from event args (bytes, collective,
  // dims, phase, region, ...). Keys are stable so output stays deterministic.
  std::map<std::string, std::string> meta;
};

struct ModelConfig {
  std::int64_t n_params = 0;  // informational; derived quantities use the fields below
  int n_layers = 0;
  int d_model = 0;
  int d_ffn = 0;
  int n_heads = 0;
  int d_head = 0;
};

struct ParallelismConfig {
  int tp = 1;
  int pp = 1;
  int dp = 1;
  int num_microbatches = 1;
};

// Throws std::invalid_argument naming the offending field.
void validate(const ModelConfig& m);
void validate(const ParallelismConfig& p);

// Error taxonomy. The CLI maps these onto its exit codes.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& msg, std::size_t byte_offset = 0)
      : std::runtime_error(msg), byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TransformError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CostModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tracesim
