#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tracesim/types.hpp"

namespace tracesim {

enum class Collective { AllReduce, AllGather, ReduceScatter, AllToAll, SendRecv };

const char* to_string(Collective c);
std::optional<Collective> collective_from_string(const std::string& s);

struct GemmDims {
  std::int64_t m = 0;
  std::int64_t n = 0;
  std::int64_t k = 0;
};

// What a duration estimate is asked about. Collective queries need collective,
// bytes and group_size; Gemm queries need dims plus a timed reference point.
struct KernelQuery {
  enum class Kind { Collective, P2P, Gemm, Other };

  struct Reference {
    std::optional<std::int64_t> bytes;
    std::optional<int> group_size;
    std::optional<GemmDims> dims;
  };

  Kind kind = Kind::Other;
  std::optional<Collective> collective;
  std::optional<std::int64_t> bytes;
  std::optional<int> group_size;
  std::optional<GemmDims> dims;
  std::optional<Micros> reference_duration;  // measured duration of the reference point
  std::optional<Reference> reference;        // what that duration was measured at
};

class CostModel {
 public:
  virtual ~CostModel() = default;
  // Returns a non-negative duration in µs; throws CostModelError when the
  // query cannot be satisfied by this backend.
  virtual Micros estimate(const KernelQuery& q) const = 0;
};

// Shared closed-form cost formulas. The synthetic generator uses exactly these
// functions to assign durations, so a what-if transform driven by an
// AnalyticalCostModel with the same constants has an exact oracle.
namespace formulas {

// Ring-style collective: alpha + bytes * traffic_scale(group) / beta.
// traffic scale: allreduce 2(g-1)/g, allgather/reducescatter/alltoall (g-1)/g,
// sendrecv 1 (point-to-point).
double collective_traffic_scale(Collective c, int group_size);
Micros collective_cost_us(Collective c, std::int64_t bytes, int group_size, double alpha_us,
                          double bytes_per_us);

// GEMM by flop ratio against a reference measurement.
Micros gemm_scaled_us(Micros reference_us, const GemmDims& reference_dims, const GemmDims& dims);

// Parameter bytes of one transformer layer / a stage of `layers` identical
// layers (attention 4*d_model^2 + MLP 2*d_model*d_ffn weights, 2-byte elems).
std::int64_t layer_param_bytes(const ModelConfig& m);
std::int64_t stage_param_bytes(const ModelConfig& m, int layers);

// Activation bytes crossing a pipeline boundary for one microbatch.
std::int64_t activation_bytes(const ModelConfig& m, std::int64_t tokens_per_microbatch);

}  // namespace formulas

// alpha/beta analytical backend plus ratio scaling when a reference is given.
class AnalyticalCostModel : public CostModel {
 public:
  AnalyticalCostModel(double alpha_us, double bytes_per_us)
      : alpha_us_(alpha_us), bytes_per_us_(bytes_per_us) {}

  Micros estimate(const KernelQuery& q) const override;

  double alpha_us() const { return alpha_us_; }
  double bytes_per_us() const { return bytes_per_us_; }

 private:
  double alpha_us_;
  double bytes_per_us_;
};

// Measurement-table backend with nearest-bytes linear interpolation inside one
// (collective, group_size) series. Construction from JSON text:
//   {"collectives": [{"collective": "allreduce", "group_size": 8,
//                     "bytes": 1048576, "us": 120}, ...],
//    "gemms": [{"m":..,"n":..,"k":..,"us":..}, ...]}
class TableCostModel : public CostModel {
 public:
  static TableCostModel from_json(const std::string& json_text);

  Micros estimate(const KernelQuery& q) const override;

 private:
  struct CollectiveRow {
    Collective collective;
    int group_size;
    std::int64_t bytes;
    Micros us;
  };
  struct GemmRow {
    GemmDims dims;
    Micros us;
  };

  std::vector<CollectiveRow> collectives_;  // sorted by (collective, group, bytes)
  std::vector<GemmRow> gemms_;
};

}  // namespace tracesim
