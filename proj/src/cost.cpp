#include "tracesim/cost.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <json.hpp>

namespace tracesim {

using nlohmann::json;

const char* to_string(Collective c) {
  switch (c) {
    case Collective::AllReduce: return "allreduce";
    case Collective::AllGather: return "allgather";
    case Collective::ReduceScatter: return "reducescatter";
    case Collective::AllToAll: return "alltoall";
    case Collective::SendRecv: return "sendrecv";
  }
  return "?";
}

std::optional<Collective> collective_from_string(const std::string& s) {
  std::string lower;
  lower.reserve(s.size());
  for (char c : s)
    if (c != '_') lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "allreduce") return Collective::AllReduce;
  if (lower == "allgather") return Collective::AllGather;
  if (lower == "reducescatter") return Collective::ReduceScatter;
  if (lower == "alltoall") return Collective::AllToAll;
  if (lower == "sendrecv" || lower == "send" || lower == "recv") return Collective::SendRecv;
  return std::nullopt;
}

namespace formulas {

double collective_traffic_scale(Collective c, int group_size) {
  if (group_size < 1) throw CostModelError("collective group_size must be >= 1");
  const double g = group_size;
  switch (c) {
    case Collective::AllReduce:
      return 2.0 * (g - 1.0) / g;
    case Collective::AllGather:
    case Collective::ReduceScatter:
    case Collective::AllToAll:
      return (g - 1.0) / g;
    case Collective::SendRecv:
      return 1.0;
  }
  return 1.0;
}

Micros collective_cost_us(Collective c, std::int64_t bytes, int group_size, double alpha_us,
                          double bytes_per_us) {
  if (bytes < 0) throw CostModelError("collective bytes must be non-negative");
  if (bytes_per_us <= 0) throw CostModelError("bytes_per_us must be positive");
  const double t = alpha_us + static_cast<double>(bytes) *
                                  collective_traffic_scale(c, group_size) / bytes_per_us;
  return std::max<Micros>(0, std::llround(t));
}

Micros gemm_scaled_us(Micros reference_us, const GemmDims& ref, const GemmDims& dims) {
  if (ref.m <= 0 || ref.n <= 0 || ref.k <= 0)
    throw CostModelError("gemm reference dims must be positive");
  if (dims.m <= 0 || dims.n <= 0 || dims.k <= 0)
    throw CostModelError("gemm dims must be positive");
  const double ratio = (static_cast<double>(dims.m) * dims.n * dims.k) /
                       (static_cast<double>(ref.m) * ref.n * ref.k);
  return std::max<Micros>(0, std::llround(static_cast<double>(reference_us) * ratio));
}

std::int64_t layer_param_bytes(const ModelConfig& m) {
  const std::int64_t d = m.d_model, f = m.d_ffn;
  return (4 * d * d + 2 * d * f) * 2;
}

std::int64_t stage_param_bytes(const ModelConfig& m, int layers) {
  return layer_param_bytes(m) * layers;
}

std::int64_t activation_bytes(const ModelConfig& m, std::int64_t tokens_per_microbatch) {
  return tokens_per_microbatch * m.d_model * 2;
}

}  // namespace formulas

Micros AnalyticalCostModel::estimate(const KernelQuery& q) const {
  using Kind = KernelQuery::Kind;
  switch (q.kind) {
    case Kind::Collective:
    case Kind::P2P: {
      Collective c = q.collective.value_or(Collective::SendRecv);
      if (q.kind == Kind::Collective && !q.collective)
        throw CostModelError("collective query without a collective name");
      if (!q.bytes) throw CostModelError("collective query without bytes");
      const int group = q.group_size.value_or(q.kind == Kind::P2P ? 2 : 0);
      if (group < 1) throw CostModelError("collective query without group_size");

      if (q.reference_duration && q.reference) {
        // Ratio against the measured point, keeping alpha in both legs.
        const std::int64_t ref_bytes = q.reference->bytes.value_or(*q.bytes);
        const int ref_group = q.reference->group_size.value_or(group);
        const double now = alpha_us_ + static_cast<double>(*q.bytes) *
                                           formulas::collective_traffic_scale(c, group) /
                                           bytes_per_us_;
        const double ref = alpha_us_ + static_cast<double>(ref_bytes) *
                                           formulas::collective_traffic_scale(c, ref_group) /
                                           bytes_per_us_;
        if (ref <= 0) throw CostModelError("degenerate collective reference");
        return std::max<Micros>(
            0, std::llround(static_cast<double>(*q.reference_duration) * now / ref));
      }
      return formulas::collective_cost_us(c, *q.bytes, group, alpha_us_, bytes_per_us_);
    }
    case Kind::Gemm: {
      if (!q.dims) throw CostModelError("gemm query without dims");
      if (!q.reference_duration || !q.reference || !q.reference->dims)
        throw CostModelError(
            "gemm estimates are ratio-based: need reference_duration and reference dims");
      return formulas::gemm_scaled_us(*q.reference_duration, *q.reference->dims, *q.dims);
    }
    case Kind::Other: {
      if (q.reference_duration) return *q.reference_duration;
      throw CostModelError("no analytical rule for kind=Other without a reference duration");
    }
  }
  throw CostModelError("unhandled query kind");
}

TableCostModel TableCostModel::from_json(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw CostModelError(std::string("cost table: ") + e.what());
  }
  TableCostModel model;
  if (root.contains("collectives")) {
    for (const json& row : root["collectives"]) {
      auto c = collective_from_string(row.at("collective").get<std::string>());
      if (!c)
        throw CostModelError("cost table: unknown collective '" +
                             row.at("collective").get<std::string>() + "'");
      model.collectives_.push_back({*c, row.at("group_size").get<int>(),
                                    row.at("bytes").get<std::int64_t>(),
                                    row.at("us").get<Micros>()});
    }
  }
  if (root.contains("gemms")) {
    for (const json& row : root["gemms"])
      model.gemms_.push_back({{row.at("m").get<std::int64_t>(), row.at("n").get<std::int64_t>(),
                               row.at("k").get<std::int64_t>()},
                              row.at("us").get<Micros>()});
  }
  if (model.collectives_.empty() && model.gemms_.empty())
    throw CostModelError("cost table is empty");
  std::sort(model.collectives_.begin(), model.collectives_.end(),
            [](const CollectiveRow& a, const CollectiveRow& b) {
              if (a.collective != b.collective) return a.collective < b.collective;
              if (a.group_size != b.group_size) return a.group_size < b.group_size;
              return a.bytes < b.bytes;
            });
  return model;
}

Micros TableCostModel::estimate(const KernelQuery& q) const {
  using Kind = KernelQuery::Kind;
  if (q.kind == Kind::Collective || q.kind == Kind::P2P) {
    if (!q.collective && q.kind == Kind::Collective)
      throw CostModelError("collective query without a collective name");
    const Collective c = q.collective.value_or(Collective::SendRecv);
    if (!q.bytes) throw CostModelError("collective query without bytes");
    const int group = q.group_size.value_or(q.kind == Kind::P2P ? 2 : 0);

    const CollectiveRow* lower = nullptr;
    const CollectiveRow* upper = nullptr;
    for (const CollectiveRow& row : collectives_) {
      if (row.collective != c || row.group_size != group) continue;
      if (row.bytes == *q.bytes) return row.us;
      if (row.bytes < *q.bytes) lower = &row;  // rows sorted: last one below wins
      else if (!upper) upper = &row;
    }
    if (lower && upper) {
      const double t = lower->us + (upper->us - lower->us) *
                                       (static_cast<double>(*q.bytes - lower->bytes) /
                                        static_cast<double>(upper->bytes - lower->bytes));
      return std::max<Micros>(0, std::llround(t));
    }
    throw CostModelError(std::string("cost table miss: ") + to_string(c) + " group " +
                         std::to_string(group) + " bytes " + std::to_string(*q.bytes) +
                         " has no interpolation neighbors");
  }
  if (q.kind == Kind::Gemm) {
    if (!q.dims) throw CostModelError("gemm query without dims");
    for (const GemmRow& row : gemms_)
      if (row.dims.m == q.dims->m && row.dims.n == q.dims->n && row.dims.k == q.dims->k)
        return row.us;
    throw CostModelError("cost table miss: gemm " + std::to_string(q.dims->m) + "x" +
                         std::to_string(q.dims->n) + "x" + std::to_string(q.dims->k));
  }
  if (q.reference_duration) return *q.reference_duration;
  throw CostModelError("cost table cannot answer kind=Other without a reference duration");
}

}  // namespace tracesim
