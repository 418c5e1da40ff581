#pragma once

#include "json.hpp"

#include "tracesim/types.hpp"

namespace tracesim::detail {

inline ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.n_layers = j.value("n_layers", m.n_layers);
  m.d_model = j.value("d_model", m.d_model);
  m.d_ffn = j.value("d_ffn", m.d_ffn);
  m.n_heads = j.value("n_heads", m.n_heads);
  m.d_head = j.value("d_head", m.d_head);
  if (j.contains("n_params")) m.n_params = j.at("n_params").get<std::int64_t>();
  return m;
}

inline ParallelismConfig par_from_json(const nlohmann::json& j) {
  ParallelismConfig p;
  p.tp = j.value("tp", p.tp);
  p.pp = j.value("pp", p.pp);
  p.dp = j.value("dp", p.dp);
  p.num_microbatches = j.value("microbatches", j.value("num_microbatches", p.num_microbatches));
  return p;
}

}  // namespace tracesim::detail
