#include "tracesim/types.hpp"

namespace tracesim {

const char* to_string(EventCategory c) {
  switch (c) {
    case EventCategory::CpuOp: return "CpuOp";
    case EventCategory::CudaRuntime: return "CudaRuntime";
    case EventCategory::GpuKernel: return "GpuKernel";
    case EventCategory::GpuMemcpy: return "GpuMemcpy";
    case EventCategory::GpuMemset: return "GpuMemset";
    case EventCategory::Metadata: return "Metadata";
  }
  return "?";
}

const char* to_string(TaskKind k) {
  return k == TaskKind::Cpu ? "Cpu" : "Gpu";
}

const char* to_string(OpClass c) {
  switch (c) {
    case OpClass::Compute: return "Compute";
    case OpClass::Communication: return "Communication";
    case OpClass::Launch: return "Launch";
    case OpClass::Sync: return "Sync";
    case OpClass::EventRecord: return "EventRecord";
    case OpClass::EventWait: return "EventWait";
    case OpClass::Other: return "Other";
  }
  return "?";
}

const char* to_string(LaneKind k) {
  return k == LaneKind::CpuThread ? "CpuThread" : "CudaStream";
}

std::string to_string(const ProcessorId& p) {
  std::string s = "rank" + std::to_string(p.rank);
  s += p.kind == LaneKind::CpuThread ? "/thread" : "/stream";
  s += std::to_string(p.lane);
  return s;
}

void validate(const ModelConfig& m) {
  if (m.n_layers <= 0) throw std::invalid_argument("ModelConfig.n_layers must be positive");
  if (m.d_model <= 0) throw std::invalid_argument("ModelConfig.d_model must be positive");
  if (m.d_ffn <= 0) throw std::invalid_argument("ModelConfig.d_ffn must be positive");
  if (m.n_heads <= 0) throw std::invalid_argument("ModelConfig.n_heads must be positive");
  if (m.d_head <= 0) throw std::invalid_argument("ModelConfig.d_head must be positive");
  if (m.d_model != m.n_heads * m.d_head)
    throw std::invalid_argument("ModelConfig.d_model must equal n_heads * d_head");
}

void validate(const ParallelismConfig& p) {
  if (p.tp < 1) throw std::invalid_argument("ParallelismConfig.tp must be >= 1");
  if (p.pp < 1) throw std::invalid_argument("ParallelismConfig.pp must be >= 1");
  if (p.dp < 1) throw std::invalid_argument("ParallelismConfig.dp must be >= 1");
  if (p.num_microbatches < 1)
    throw std::invalid_argument("ParallelismConfig.num_microbatches must be >= 1");
  if (p.num_microbatches < p.pp)
    throw std::invalid_argument(
        "ParallelismConfig.num_microbatches must be >= pp (pipeline schedule needs one "
        "microbatch per stage in flight)");
}

}  // namespace tracesim
