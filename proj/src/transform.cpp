#include "tracesim/transform.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <sstream>

#include "json.hpp"

#include "json_util.hpp"
#include "tracesim/pipeline.hpp"

namespace tracesim {

namespace {

std::optional<std::int64_t> meta_i64(const Task& t, const std::string& key) {
  auto it = t.meta.find(key);
  if (it == t.meta.end()) return std::nullopt;
  try {
    std::size_t pos = 0;
    std::int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::string meta_str(const Task& t, const std::string& key) {
  auto it = t.meta.find(key);
  return it == t.meta.end() ? std::string() : it->second;
}

// a * num / den, rounded to nearest, without overflowing on trace-scale values
std::int64_t mul_div(std::int64_t a, std::int64_t num, std::int64_t den) {
  if (den == 0) throw TransformError("internal: zero denominator in rescale");
  __int128 prod = static_cast<__int128>(a) * num;
  __int128 half = den / 2;
  return static_cast<std::int64_t>((prod + half) / den);
}

std::string normalize_phase(std::string v) {
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "forward" || v == "fwd" || v == "f") return "fwd";
  if (v == "backward" || v == "bwd" || v == "b") return "bwd";
  return v;
}

}  // namespace

TagPolicy TagPolicy::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw TransformError(std::string("tag policy is not valid JSON: ") + e.what());
  }
  TagPolicy p;
  if (j.contains("layer_keys")) p.layer_keys = j.at("layer_keys").get<std::vector<std::string>>();
  if (j.contains("microbatch_keys"))
    p.microbatch_keys = j.at("microbatch_keys").get<std::vector<std::string>>();
  if (j.contains("phase_keys")) p.phase_keys = j.at("phase_keys").get<std::vector<std::string>>();
  p.infer_from_names = j.value("infer_from_names", p.infer_from_names);
  p.fill_between = j.value("fill_between", p.fill_between);
  return p;
}

void tag_tasks(ExecutionGraph& graph, const TagPolicy& policy) {
  static const std::regex layer_dot(R"(layers\.(\d+))");
  static const std::regex layer_us(R"(layer_(\d+))");

  auto first_meta = [](Task& t, const std::vector<std::string>& keys) -> std::optional<std::string> {
    for (const auto& k : keys) {
      auto it = t.meta.find(k);
      if (it != t.meta.end()) return it->second;
    }
    return std::nullopt;
  };
  auto to_int = [](const std::string& s) -> std::optional<int> {
    try {
      std::size_t pos = 0;
      int v = std::stoi(s, &pos);
      return pos == s.size() ? std::optional<int>(v) : std::nullopt;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  };

  for (auto& t : graph.tasks) {
    if (!t.layer_tag) {
      if (auto v = first_meta(t, policy.layer_keys)) t.layer_tag = to_int(*v);
    }
    if (!t.layer_tag && policy.infer_from_names) {
      std::smatch m;
      if (std::regex_search(t.name, m, layer_dot) || std::regex_search(t.name, m, layer_us))
        t.layer_tag = to_int(m[1].str());
    }
    if (!t.microbatch_tag) {
      if (auto v = first_meta(t, policy.microbatch_keys)) t.microbatch_tag = to_int(*v);
    }
    auto phase = first_meta(t, policy.phase_keys);
    if (phase) {
      t.meta["phase"] = normalize_phase(*phase);
    } else if (policy.infer_from_names) {
      if (t.name.find("bwd") != std::string::npos || t.name.find("backward") != std::string::npos ||
          t.name.find("wgrad") != std::string::npos || t.name.find("dgrad") != std::string::npos)
        t.meta["phase"] = "bwd";
      else if (t.name.find("fwd") != std::string::npos ||
               t.name.find("forward") != std::string::npos)
        t.meta["phase"] = "fwd";
    }
  }

  // kernels inherit missing tags from their launching host op and vice versa
  std::map<CorrelationId, TaskId> cpu_by_corr, gpu_by_corr;
  for (const auto& t : graph.tasks) {
    if (!t.correlation_id) continue;
    (t.kind == TaskKind::Cpu ? cpu_by_corr : gpu_by_corr)[*t.correlation_id] = t.id;
  }
  auto inherit = [&](Task& dst, const Task& src) {
    if (!dst.layer_tag) dst.layer_tag = src.layer_tag;
    if (!dst.microbatch_tag) dst.microbatch_tag = src.microbatch_tag;
    for (const char* key : {"phase", "region"}) {
      if (!dst.meta.count(key) && src.meta.count(key)) dst.meta[key] = src.meta.at(key);
    }
  };
  for (auto& t : graph.tasks) {
    if (!t.correlation_id) continue;
    const auto& other = t.kind == TaskKind::Gpu ? cpu_by_corr : gpu_by_corr;
    auto it = other.find(*t.correlation_id);
    if (it != other.end()) inherit(t, graph.tasks[it->second]);
  }

  if (!policy.fill_between) return;
  std::map<ProcessorId, std::vector<TaskId>> lanes;
  for (const auto& t : graph.tasks)
    if (t.kind == TaskKind::Cpu) lanes[t.processor].push_back(t.id);
  for (auto& [proc, ids] : lanes) {
    std::sort(ids.begin(), ids.end(), [&](TaskId a, TaskId b) {
      return graph.tasks[a].original_start < graph.tasks[b].original_start;
    });
    auto tagged = [&](TaskId id) {
      return graph.tasks[id].layer_tag.has_value() || graph.tasks[id].microbatch_tag.has_value();
    };
    std::size_t i = 0;
    while (i < ids.size()) {
      if (tagged(ids[i])) {
        ++i;
        continue;
      }
      std::size_t lo = i;
      while (i < ids.size() && !tagged(ids[i])) ++i;
      if (lo == 0 || i == ids.size()) continue;
      const Task& before = graph.tasks[ids[lo - 1]];
      const Task& after = graph.tasks[ids[i]];
      if (before.layer_tag == after.layer_tag && before.microbatch_tag == after.microbatch_tag &&
          meta_str(before, "phase") == meta_str(after, "phase")) {
        for (std::size_t k = lo; k < i; ++k) inherit(graph.tasks[ids[k]], before);
      }
    }
  }
}

void WhatIfConfig::validate() const {
  if (!cost_model) throw TransformError("what-if config has no cost model");
  if (source_par.tp != target_par.tp)
    throw TransformError("tensor-parallel rescaling is not supported");
  try {
    tracesim::validate(source_par);
    tracesim::validate(target_par);
    tracesim::validate(source_model);
    tracesim::validate(target_model);
  } catch (const std::invalid_argument& e) {
    throw TransformError(std::string("what-if config invalid: ") + e.what());
  }
}

WhatIfConfig WhatIfConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw TransformError(std::string("what-if config is not valid JSON: ") + e.what());
  }
  WhatIfConfig cfg;
  if (!j.contains("source") || !j.contains("target"))
    throw TransformError("what-if config needs source and target sections");
  const auto& src = j.at("source");
  const auto& tgt = j.at("target");
  if (src.contains("model")) cfg.source_model = detail::model_from_json(src.at("model"));
  if (src.contains("parallelism")) cfg.source_par = detail::par_from_json(src.at("parallelism"));
  if (tgt.contains("model")) cfg.target_model = detail::model_from_json(tgt.at("model"));
  if (tgt.contains("parallelism")) cfg.target_par = detail::par_from_json(tgt.at("parallelism"));
  cfg.activation_bytes =
      j.value("activation_bytes_per_microbatch", j.value("activation_bytes", cfg.activation_bytes));

  if (!j.contains("cost_model")) throw TransformError("what-if config needs a cost_model");
  const auto& cm = j.at("cost_model");
  std::string kind = cm.value("kind", std::string("analytical"));
  if (kind == "analytical") {
    cfg.cost_model = std::make_shared<AnalyticalCostModel>(cm.value("alpha_us", 10.0),
                                                           cm.value("bytes_per_us", 50000.0));
  } else if (kind == "table") {
    try {
      cfg.cost_model = std::make_shared<TableCostModel>(TableCostModel::from_json(cm.dump()));
    } catch (const CostModelError& e) {
      throw TransformError(std::string("what-if cost table invalid: ") + e.what());
    }
  } else {
    throw TransformError("unknown cost_model kind: " + kind);
  }
  cfg.validate();
  return cfg;
}

ExecutionGraph scale_dp(const ExecutionGraph& graph, int source_dp, int target_dp,
                        const CostModel& model) {
  if (source_dp < 1 || target_dp < 1)
    throw TransformError("data-parallel sizes must be >= 1");
  ExecutionGraph out = graph;
  if (source_dp == target_dp) return out;
  if (source_dp == 1)
    throw TransformError(
        "source trace has no gradient collectives to rescale; use apply_whatif to introduce them");
  if (target_dp == 1)
    throw TransformError(
        "cannot drop gradient collectives by retiming; use apply_whatif to rebuild without them");

  int changed = 0;
  for (auto& t : out.tasks) {
    if (t.kind != TaskKind::Gpu || t.op_class != OpClass::Communication) continue;
    if (meta_str(t, "collective") != "allreduce") continue;
    auto group = meta_i64(t, "group_size");
    if (!group || *group != source_dp) continue;
    auto bytes = meta_i64(t, "bytes");
    if (!bytes)
      throw TransformError("collective task " + std::to_string(t.id) + " carries no byte count");
    KernelQuery q;
    q.kind = KernelQuery::Kind::Collective;
    q.collective = Collective::AllReduce;
    q.bytes = *bytes;
    q.group_size = target_dp;
    try {
      t.duration = model.estimate(q);
    } catch (const CostModelError& e) {
      throw TransformError(std::string("cost model cannot retime collective: ") + e.what());
    }
    t.meta["group_size"] = std::to_string(target_dp);
    ++changed;
  }
  if (changed == 0)
    throw TransformError("no gradient collectives sized for data-parallel group " +
                         std::to_string(source_dp) + " found");
  return out;
}

namespace {

GemmDims dims_of(const Task& t) {
  GemmDims d;
  d.m = meta_i64(t, "m").value_or(0);
  d.n = meta_i64(t, "n").value_or(0);
  d.k = meta_i64(t, "k").value_or(0);
  return d;
}

std::int64_t substitute_dim(std::int64_t dim, const ModelConfig& source,
                            const ModelConfig& target) {
  if (dim == source.d_model) return target.d_model;
  if (dim == source.d_ffn) return target.d_ffn;
  return dim;
}

}  // namespace

ExecutionGraph change_hidden(const ExecutionGraph& graph, const ModelConfig& source,
                             const ModelConfig& target, const CostModel& model) {
  ExecutionGraph out = graph;
  if (source.d_model == target.d_model && source.d_ffn == target.d_ffn) return out;
  if (source.d_model <= 0 || target.d_model <= 0)
    throw TransformError("hidden-size rescale needs both model widths");

  for (auto& t : out.tasks) {
    if (t.kind != TaskKind::Gpu) continue;
    if (t.op_class == OpClass::Compute) {
      GemmDims d = dims_of(t);
      if (d.m > 0 && d.n > 0 && d.k > 0) {
        GemmDims nd{substitute_dim(d.m, source, target), substitute_dim(d.n, source, target),
                    substitute_dim(d.k, source, target)};
        std::int64_t oldprod = d.m * d.n * d.k;
        std::int64_t newprod = nd.m * nd.n * nd.k;
        t.duration = mul_div(t.duration, newprod, oldprod);
        t.meta["m"] = std::to_string(nd.m);
        t.meta["n"] = std::to_string(nd.n);
        t.meta["k"] = std::to_string(nd.k);
      } else if (meta_str(t, "region") == "opt") {
        if (auto bytes = meta_i64(t, "bytes")) {
          if (source.n_params <= 0 || target.n_params <= 0)
            throw TransformError("hidden-size rescale of optimizer work needs n_params on both models");
          std::int64_t nb = mul_div(*bytes, target.n_params, source.n_params);
          t.duration = mul_div(t.duration, target.n_params, source.n_params);
          t.meta["bytes"] = std::to_string(nb);
        }
      }
      continue;
    }
    if (t.op_class != OpClass::Communication) continue;
    std::string coll = meta_str(t, "collective");
    auto bytes = meta_i64(t, "bytes");
    if (coll == "allreduce" && bytes) {
      if (source.n_params <= 0 || target.n_params <= 0)
        throw TransformError("hidden-size rescale of collectives needs n_params on both models");
      std::int64_t nb = mul_div(*bytes, target.n_params, source.n_params);
      auto group = meta_i64(t, "group_size");
      if (!group)
        throw TransformError("collective task " + std::to_string(t.id) + " carries no group size");
      KernelQuery q;
      q.kind = KernelQuery::Kind::Collective;
      q.collective = Collective::AllReduce;
      q.bytes = nb;
      q.group_size = static_cast<int>(*group);
      try {
        t.duration = model.estimate(q);
      } catch (const CostModelError& e) {
        throw TransformError(std::string("cost model cannot retime collective: ") + e.what());
      }
      t.meta["bytes"] = std::to_string(nb);
    } else if (meta_str(t, "region") == "p2p" && bytes) {
      std::int64_t nb = mul_div(*bytes, target.d_model, source.d_model);
      t.meta["bytes"] = std::to_string(nb);
      if (meta_str(t, "dir") != "recv") {
        KernelQuery q;
        q.kind = KernelQuery::Kind::P2P;
        q.bytes = nb;
        q.group_size = 2;
        try {
          t.duration = model.estimate(q);
        } catch (const CostModelError& e) {
          throw TransformError(std::string("cost model cannot retime transfer: ") + e.what());
        }
      }
      // recv durations include recorded arrival skew; left as recorded
    }
  }
  return out;
}

namespace {

struct Measured {
  HostCosts host;
  std::vector<std::vector<KernelSpec>> layer_fwd;
  std::vector<std::vector<KernelSpec>> layer_bwd;
  std::vector<KernelSpec> pre_fwd, post_fwd, pre_bwd, post_bwd;
  std::string reduce_name = "ncclDevKernel_AllReduce_Sum_f16";
  std::map<int, std::int64_t> stage_bytes;  // source stage -> gradient bytes
  std::vector<KernelSpec> optimizer;        // duration rescaled per target stage later
  double opt_rate = 0.0;                    // us per gradient byte
  Micros p2p_send = -1;
  Micros p2p_recv_base = -1;
  std::int64_t act_bytes = 0;
  Micros origin = 0;
};

Micros median_of(std::vector<Micros> v, Micros fallback) {
  if (v.empty()) return fallback;
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

KernelSpec spec_from(const Task& t) {
  KernelSpec ks;
  ks.name = t.name;
  ks.duration = t.duration;
  ks.op_class = t.op_class;
  for (const auto& [k, v] : t.meta) {
    if (k == "mb" || k == "microbatch" || k == "micro_batch" || k == "layer" ||
        k == "layer_id" || k == "phase" || k == "region" || k == "dir" || k == "peer_stage")
      continue;
    ks.args[k] = v;
  }
  return ks;
}

std::vector<KernelSpec> specs_sorted(std::vector<const Task*> tasks) {
  std::sort(tasks.begin(), tasks.end(), [](const Task* a, const Task* b) {
    return std::pair(a->original_start, a->id) < std::pair(b->original_start, b->id);
  });
  std::vector<KernelSpec> out;
  out.reserve(tasks.size());
  for (const Task* t : tasks) out.push_back(spec_from(*t));
  return out;
}

Measured measure_pipeline(const ExecutionGraph& graph, const WhatIfConfig& cfg) {
  const int pp = cfg.source_par.pp;
  const int dp = cfg.source_par.dp;
  std::vector<int> ranks = ranks_in(graph);
  if (static_cast<int>(ranks.size()) != pp * dp)
    throw TransformError("graph covers " + std::to_string(ranks.size()) +
                         " ranks but source parallelism implies " + std::to_string(pp * dp));

  Measured m;
  m.origin = graph.iteration_window.start;

  std::map<int, int> stage_of;  // rank value -> stage, dp-major rank order
  std::map<int, bool> is_primary_replica;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    stage_of[ranks[i]] = static_cast<int>(i) % pp;
    is_primary_replica[ranks[i]] = static_cast<int>(i) / pp == 0;
  }

  std::vector<Micros> launches, records, waits, syncs;
  std::vector<Micros> sends, recvs;
  std::map<int, std::vector<const Task*>> fwd_groups, bwd_groups;  // global layer -> tasks
  std::map<int, Micros> opt_dur;
  std::map<int, std::int64_t> opt_bytes;
  std::vector<const Task*> pre_fwd, post_fwd, pre_bwd, post_bwd;

  for (const auto& t : graph.tasks) {
    if (!is_primary_replica.at(t.processor.rank)) continue;
    int stage = stage_of.at(t.processor.rank);
    if (t.kind == TaskKind::Cpu) {
      switch (t.op_class) {
        case OpClass::Launch: launches.push_back(t.duration); break;
        case OpClass::EventRecord: records.push_back(t.duration); break;
        case OpClass::EventWait: waits.push_back(t.duration); break;
        case OpClass::Sync: syncs.push_back(t.duration); break;
        default: break;
      }
      continue;
    }
    std::string region = meta_str(t, "region");
    std::string phase = meta_str(t, "phase");
    bool mb0 = t.microbatch_tag.value_or(-1) == 0;
    if (region == "p2p") {
      if (meta_str(t, "dir") == "recv") {
        recvs.push_back(t.duration);
      } else {
        sends.push_back(t.duration);
      }
      if (auto b = meta_i64(t, "bytes")) m.act_bytes = *b;
      continue;
    }
    if (region == "dp") {
      if (auto b = meta_i64(t, "bytes")) m.stage_bytes[stage] += *b;
      m.reduce_name = t.name;
      continue;
    }
    if (region == "opt") {
      opt_dur[stage] += t.duration;
      if (auto b = meta_i64(t, "bytes")) opt_bytes[stage] = *b;
      if (m.optimizer.empty()) m.optimizer.push_back(spec_from(t));
      continue;
    }
    if (t.layer_tag && mb0) {
      if (phase == "bwd")
        bwd_groups[*t.layer_tag].push_back(&t);
      else
        fwd_groups[*t.layer_tag].push_back(&t);
      continue;
    }
    if (!mb0) continue;
    if (region == "embed") {
      (phase == "bwd" ? post_bwd : pre_fwd).push_back(&t);
    } else if (region == "head") {
      (phase == "bwd" ? pre_bwd : post_fwd).push_back(&t);
    }
  }

  m.host.launch = median_of(std::move(launches), m.host.launch);
  m.host.record = median_of(std::move(records), m.host.record);
  m.host.wait = median_of(std::move(waits), m.host.wait);
  m.host.sync = median_of(std::move(syncs), m.host.sync);

  const int n_layers = cfg.source_model.n_layers;
  if (static_cast<int>(fwd_groups.size()) != n_layers ||
      static_cast<int>(bwd_groups.size()) != n_layers)
    throw TransformError("measured " + std::to_string(fwd_groups.size()) + " forward / " +
                         std::to_string(bwd_groups.size()) + " backward layer groups, source model has " +
                         std::to_string(n_layers) + " layers (is the trace tagged?)");
  for (int l = 0; l < n_layers; ++l) {
    auto fit = fwd_groups.find(l);
    auto bit = bwd_groups.find(l);
    if (fit == fwd_groups.end() || bit == bwd_groups.end())
      throw TransformError("layer " + std::to_string(l) + " missing from measured groups");
    m.layer_fwd.push_back(specs_sorted(fit->second));
    m.layer_bwd.push_back(specs_sorted(bit->second));
  }
  m.pre_fwd = specs_sorted(std::move(pre_fwd));
  m.post_fwd = specs_sorted(std::move(post_fwd));
  m.pre_bwd = specs_sorted(std::move(pre_bwd));
  m.post_bwd = specs_sorted(std::move(post_bwd));

  if (!sends.empty()) m.p2p_send = median_of(std::move(sends), 0);
  if (!recvs.empty()) m.p2p_recv_base = *std::min_element(recvs.begin(), recvs.end());

  // gradient byte totals: prefer collective tags, fall back to optimizer tags
  for (const auto& [stage, bytes] : opt_bytes) m.stage_bytes.try_emplace(stage, bytes);
  if (!opt_dur.empty()) {
    auto it = opt_dur.begin();
    auto bit = m.stage_bytes.find(it->first);
    if (bit != m.stage_bytes.end() && bit->second > 0)
      m.opt_rate = static_cast<double>(it->second) / static_cast<double>(bit->second);
  }
  return m;
}

// per-stage extra parameter bytes beyond the plain layer share
struct VocabBytes {
  std::int64_t embed = 0;
  std::int64_t head = 0;
};

VocabBytes derive_vocab_bytes(const Measured& m, const WhatIfConfig& cfg) {
  VocabBytes vb;
  if (m.stage_bytes.empty()) return vb;
  const int pp = cfg.source_par.pp;
  const int per_stage = cfg.source_model.n_layers / pp;
  const std::int64_t b_layer = formulas::layer_param_bytes(cfg.source_model);
  auto stage_total = [&](int s) -> std::int64_t {
    auto it = m.stage_bytes.find(s);
    return it == m.stage_bytes.end() ? 0 : it->second;
  };
  if (pp >= 2) {
    vb.embed = stage_total(0) - static_cast<std::int64_t>(per_stage) * b_layer;
    vb.head = stage_total(pp - 1) - static_cast<std::int64_t>(per_stage) * b_layer;
  } else {
    std::int64_t rem = stage_total(0) - static_cast<std::int64_t>(per_stage) * b_layer;
    vb.head = rem / 2;
    vb.embed = rem - vb.head;
  }
  if (vb.embed < 0 || vb.head < 0)
    throw TransformError("measured gradient bytes are smaller than the source model's layer share");
  return vb;
}

ExecutionGraph graph_from_events(const std::vector<TraceEvent>& events) {
  std::map<int, std::vector<TraceEvent>> by_rank;
  for (const auto& ev : events) by_rank[ev.process_id].push_back(ev);
  std::map<int, ExecutionGraph> graphs;
  for (auto& [rank, evs] : by_rank) graphs.emplace(rank, build_graph(evs, BuildPolicy(), rank));
  ExecutionGraph merged = merge_ranks(graphs);
  tag_tasks(merged);
  return merged;
}

bool hidden_changed(const WhatIfConfig& cfg) {
  return cfg.source_model.d_model != cfg.target_model.d_model ||
         cfg.source_model.d_ffn != cfg.target_model.d_ffn;
}

ExecutionGraph rebuild_pipeline(const ExecutionGraph& graph, const WhatIfConfig& cfg) {
  cfg.validate();
  const ModelConfig& sm = cfg.source_model;
  const ModelConfig& tm = cfg.target_model;
  const ParallelismConfig& sp = cfg.source_par;
  const ParallelismConfig& tp = cfg.target_par;

  bool same = sm.n_layers == tm.n_layers && !hidden_changed(cfg) && sp.pp == tp.pp &&
              sp.dp == tp.dp && sp.num_microbatches == tp.num_microbatches;
  if (same) {
    ExecutionGraph out = graph;
    tag_tasks(out);
    return out;
  }

  if (tm.n_layers % tp.pp != 0)
    throw TransformError("target layer count must divide evenly across pipeline stages");
  if (sm.n_layers % sp.pp != 0)
    throw TransformError("source layer count must divide evenly across pipeline stages");

  ExecutionGraph tagged = graph;
  tag_tasks(tagged);
  Measured meas = measure_pipeline(tagged, cfg);

  // target per-layer kernels: existing layers keep their measurements, added
  // layers clone the last measured layer, removed ones drop from the tail
  const bool width = hidden_changed(cfg);
  auto retime_specs = [&](std::vector<KernelSpec> specs) {
    if (!width) return specs;
    for (auto& ks : specs) {
      auto it_m = ks.args.find("m");
      auto it_n = ks.args.find("n");
      auto it_k = ks.args.find("k");
      if (it_m == ks.args.end() || it_n == ks.args.end() || it_k == ks.args.end()) continue;
      std::int64_t om = std::stoll(it_m->second), on = std::stoll(it_n->second),
                   ok = std::stoll(it_k->second);
      if (om <= 0 || on <= 0 || ok <= 0) continue;
      std::int64_t nm = substitute_dim(om, sm, tm), nn = substitute_dim(on, sm, tm),
                   nk = substitute_dim(ok, sm, tm);
      ks.duration = mul_div(ks.duration, nm * nn * nk, om * on * ok);
      it_m->second = std::to_string(nm);
      it_n->second = std::to_string(nn);
      it_k->second = std::to_string(nk);
    }
    return specs;
  };

  std::vector<std::vector<KernelSpec>> fwd, bwd;
  for (int l = 0; l < tm.n_layers; ++l) {
    int src = std::min(l, sm.n_layers - 1);
    fwd.push_back(retime_specs(meas.layer_fwd[src]));
    bwd.push_back(retime_specs(meas.layer_bwd[src]));
  }

  PipelineSpec ps;
  ps.pp = tp.pp;
  ps.dp = tp.dp;
  ps.num_microbatches = tp.num_microbatches;
  ps.host = meas.host;
  ps.origin = meas.origin;

  if (tp.pp > 1) {
    std::int64_t act = meas.act_bytes > 0 ? meas.act_bytes : cfg.activation_bytes;
    if (act > 0) {
      std::int64_t act_t = width ? mul_div(act, tm.d_model, sm.d_model) : act;
      ps.activation_bytes = act_t;
      KernelQuery q;
      q.kind = KernelQuery::Kind::P2P;
      q.bytes = act_t;
      q.group_size = 2;
      try {
        ps.p2p_send = cfg.cost_model->estimate(q);
      } catch (const CostModelError& e) {
        throw TransformError(std::string("cost model cannot size boundary transfers: ") + e.what());
      }
    } else if (meas.p2p_send >= 0) {
      ps.p2p_send = width ? mul_div(meas.p2p_send, tm.d_model, sm.d_model) : meas.p2p_send;
    } else {
      throw TransformError(
          "cannot size stage-boundary transfers: no p2p kernels in the source trace and no "
          "activation_bytes_per_microbatch in the config");
    }
    ps.p2p_recv_base = meas.p2p_recv_base >= 0 ? meas.p2p_recv_base : 10;
  }

  VocabBytes vocab = derive_vocab_bytes(meas, cfg);

  const std::int64_t b_layer_t = formulas::layer_param_bytes(tm);
  const std::int64_t embed_t =
      sm.d_model > 0 ? mul_div(vocab.embed, tm.d_model, sm.d_model) : vocab.embed;
  const std::int64_t head_t =
      sm.d_model > 0 ? mul_div(vocab.head, tm.d_model, sm.d_model) : vocab.head;
  const int per_stage_t = tm.n_layers / tp.pp;

  for (int s = 0; s < tp.pp; ++s) {
    StageSpec st;
    for (int l = 0; l < per_stage_t; ++l) {
      st.layers_fwd.push_back(fwd[static_cast<std::size_t>(s * per_stage_t + l)]);
      st.layers_bwd.push_back(bwd[static_cast<std::size_t>(s * per_stage_t + l)]);
    }
    if (s == 0) {
      st.pre_fwd = meas.pre_fwd;
      st.post_bwd = meas.post_bwd;
    }
    if (s == tp.pp - 1) {
      st.post_fwd = meas.post_fwd;
      st.pre_bwd = meas.pre_bwd;
    }
    std::int64_t stage_bytes = static_cast<std::int64_t>(per_stage_t) * b_layer_t +
                               (s == 0 ? embed_t : 0) + (s == tp.pp - 1 ? head_t : 0);
    if (tp.dp > 1) {
      if (meas.stage_bytes.empty())
        throw TransformError(
            "cannot size gradient collectives: source trace carries no byte counts");
      KernelSpec ar;
      ar.name = meas.reduce_name;
      ar.op_class = OpClass::Communication;
      KernelQuery q;
      q.kind = KernelQuery::Kind::Collective;
      q.collective = Collective::AllReduce;
      q.bytes = stage_bytes;
      q.group_size = tp.dp;
      try {
        ar.duration = cfg.cost_model->estimate(q);
      } catch (const CostModelError& e) {
        throw TransformError(std::string("cost model cannot size gradient collectives: ") +
                             e.what());
      }
      ar.args["bytes"] = std::to_string(stage_bytes);
      ar.args["collective"] = "allreduce";
      ar.args["group_size"] = std::to_string(tp.dp);
      st.reduce.push_back(std::move(ar));
    }
    if (!meas.optimizer.empty() && meas.opt_rate > 0.0) {
      KernelSpec opt = meas.optimizer.front();
      opt.duration = static_cast<Micros>(
          std::llround(meas.opt_rate * static_cast<double>(stage_bytes)));
      opt.args["bytes"] = std::to_string(stage_bytes);
      st.optimizer.push_back(std::move(opt));
    }
    ps.stages.push_back(std::move(st));
  }

  BuiltPipeline built = build_pipeline(ps);
  return graph_from_events(built.events);
}

}  // namespace

ExecutionGraph scale_pp(const ExecutionGraph& graph, const WhatIfConfig& cfg) {
  return rebuild_pipeline(graph, cfg);
}

ExecutionGraph change_layers(const ExecutionGraph& graph, const WhatIfConfig& cfg) {
  return rebuild_pipeline(graph, cfg);
}

TransformResult apply_whatif(const ExecutionGraph& graph, const WhatIfConfig& cfg) {
  cfg.validate();
  TransformResult res;
  const ModelConfig& sm = cfg.source_model;
  const ModelConfig& tm = cfg.target_model;
  const ParallelismConfig& sp = cfg.source_par;
  const ParallelismConfig& tp = cfg.target_par;

  bool layers = sm.n_layers != tm.n_layers;
  bool width = hidden_changed(cfg);
  bool pipe = sp.pp != tp.pp;
  bool micro = sp.num_microbatches != tp.num_microbatches;
  bool data = sp.dp != tp.dp;
  bool structural = layers || pipe || micro || (width && sp.pp > 1) ||
                    (data && (sp.dp == 1 || tp.dp == 1));

  if (structural) {
    res.graph = rebuild_pipeline(graph, cfg);
    std::ostringstream note;
    note << "rebuilt pipeline: layers " << sm.n_layers << "->" << tm.n_layers << ", pp " << sp.pp
         << "->" << tp.pp << ", dp " << sp.dp << "->" << tp.dp << ", microbatches "
         << sp.num_microbatches << "->" << tp.num_microbatches;
    if (width)
      note << ", d_model " << sm.d_model << "->" << tm.d_model << ", d_ffn " << sm.d_ffn << "->"
           << tm.d_ffn;
    res.notes.push_back(note.str());
    return res;
  }

  res.graph = graph;
  if (width) {
    res.graph = change_hidden(res.graph, sm, tm, *cfg.cost_model);
    std::ostringstream note;
    note << "retimed kernels for d_model " << sm.d_model << "->" << tm.d_model << ", d_ffn "
         << sm.d_ffn << "->" << tm.d_ffn;
    res.notes.push_back(note.str());
  }
  if (data) {
    res.graph = scale_dp(res.graph, sp.dp, tp.dp, *cfg.cost_model);
    std::ostringstream note;
    note << "retimed gradient collectives for dp " << sp.dp << "->" << tp.dp;
    res.notes.push_back(note.str());
  }
  if (res.notes.empty()) res.notes.push_back("no changes requested; graph returned as-is");
  return res;
}

}  // namespace tracesim
