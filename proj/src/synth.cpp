#include "tracesim/synth.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "json_util.hpp"
#include "tracesim/cost.hpp"

namespace tracesim {

void SynthSpec::validate() const {
  tracesim::validate(model);
  tracesim::validate(par);
  if (par.tp != 1)
    throw std::invalid_argument("generator supports tensor parallel size 1 only");
  if (model.n_layers % par.pp != 0)
    throw std::invalid_argument("layer count must divide evenly across pipeline stages");
  if (tokens_per_microbatch <= 0) throw std::invalid_argument("tokens_per_microbatch must be positive");
  if (vocab <= 0) throw std::invalid_argument("vocab must be positive");
  if (jitter_pct < 0.0 || jitter_pct > 0.5)
    throw std::invalid_argument("jitter_pct must be in [0, 0.5]");
  if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
  if (iteration_gap < 0) throw std::invalid_argument("iteration_gap must be >= 0");
}

namespace {

Micros gemm_cost(const SynthCosts& c, std::int64_t m, std::int64_t n, std::int64_t k,
                 double factor) {
  GemmDims ref{c.gemm_ref_mnk, 1, 1};
  GemmDims dims{m, n, k};
  Micros base = formulas::gemm_scaled_us(c.gemm_ref_us, ref, dims);
  return static_cast<Micros>(std::llround(static_cast<double>(base) * factor));
}

KernelSpec gemm_kernel(const std::string& name, const SynthCosts& c, std::int64_t m,
                       std::int64_t n, std::int64_t k, double factor) {
  KernelSpec ks;
  ks.name = name;
  ks.duration = gemm_cost(c, m, n, k, factor);
  ks.op_class = OpClass::Compute;
  ks.args["m"] = std::to_string(m);
  ks.args["n"] = std::to_string(n);
  ks.args["k"] = std::to_string(k);
  return ks;
}

KernelSpec plain_kernel(const std::string& name, Micros dur) {
  KernelSpec ks;
  ks.name = name;
  ks.duration = dur;
  ks.op_class = OpClass::Compute;
  return ks;
}

}  // namespace

std::int64_t synth_stage_reduce_bytes(const SynthSpec& spec, int stage) {
  int per_stage = spec.model.n_layers / spec.par.pp;
  std::int64_t bytes = formulas::stage_param_bytes(spec.model, per_stage);
  std::int64_t vocab_bytes = 2 * spec.vocab * spec.model.d_model;
  if (stage == 0) bytes += vocab_bytes;               // input embedding table
  if (stage == spec.par.pp - 1) bytes += vocab_bytes;  // output head
  return bytes;
}

PipelineSpec pipeline_spec_for(const SynthSpec& spec) {
  spec.validate();
  const SynthCosts& c = spec.costs;
  const std::int64_t t = spec.tokens_per_microbatch;
  const std::int64_t d = spec.model.d_model;
  const std::int64_t f = spec.model.d_ffn;

  PipelineSpec ps;
  ps.pp = spec.par.pp;
  ps.dp = spec.par.dp;
  ps.num_microbatches = spec.par.num_microbatches;
  ps.host = {c.launch, c.record, c.wait, c.sync};
  ps.activation_bytes = formulas::activation_bytes(spec.model, t);
  ps.p2p_send = formulas::collective_cost_us(Collective::SendRecv, ps.activation_bytes, 2,
                                             c.alpha_us, c.bytes_per_us);
  ps.p2p_recv_base = c.p2p_recv_base;
  ps.origin = spec.origin;

  std::vector<KernelSpec> layer_fwd{
      gemm_kernel("gemm_qkv", c, t, d, d, 1.0),
      plain_kernel("attn_core", c.attn_misc),
      gemm_kernel("gemm_mlp", c, t, f, d, 1.0),
  };
  std::vector<KernelSpec> layer_bwd{
      gemm_kernel("gemm_mlp_bwd", c, t, f, d, c.bwd_gemm_factor),
      plain_kernel("attn_core_bwd",
                   static_cast<Micros>(std::llround(static_cast<double>(c.attn_misc) *
                                                    c.bwd_gemm_factor))),
      gemm_kernel("gemm_qkv_bwd", c, t, d, d, c.bwd_gemm_factor),
  };

  int per_stage = spec.model.n_layers / spec.par.pp;
  for (int s = 0; s < spec.par.pp; ++s) {
    StageSpec st;
    st.layers_fwd.assign(per_stage, layer_fwd);
    st.layers_bwd.assign(per_stage, layer_bwd);
    if (s == 0) {
      st.pre_fwd.push_back(plain_kernel("embedding_fwd", c.embed));
      st.post_bwd.push_back(plain_kernel("embedding_bwd", c.embed));
    }
    if (s == spec.par.pp - 1) {
      st.post_fwd.push_back(plain_kernel("norm_loss_fwd", c.head));
      st.pre_bwd.push_back(plain_kernel("loss_bwd", c.loss_grad));
    }
    std::int64_t rbytes = synth_stage_reduce_bytes(spec, s);
    if (spec.par.dp > 1) {
      KernelSpec ar;
      ar.name = "ncclDevKernel_AllReduce_Sum_f16";
      ar.duration = formulas::collective_cost_us(Collective::AllReduce, rbytes, spec.par.dp,
                                                 c.alpha_us, c.bytes_per_us);
      ar.op_class = OpClass::Communication;
      ar.args["bytes"] = std::to_string(rbytes);
      ar.args["collective"] = "allreduce";
      ar.args["group_size"] = std::to_string(spec.par.dp);
      st.reduce.push_back(std::move(ar));
    }
    KernelSpec opt;
    opt.name = "adam_step";
    opt.duration = static_cast<Micros>(
        std::llround(static_cast<double>(c.optimizer_ref_us) * static_cast<double>(rbytes) /
                     static_cast<double>(c.optimizer_ref_bytes)));
    opt.op_class = OpClass::Compute;
    opt.args["bytes"] = std::to_string(rbytes);
    st.optimizer.push_back(std::move(opt));
    ps.stages.push_back(std::move(st));
  }
  return ps;
}

SynthResult generate(const SynthSpec& spec) {
  PipelineSpec ps = pipeline_spec_for(spec);
  SynthResult out;
  Micros origin = spec.origin;
  for (int it = 0; it < spec.iterations; ++it) {
    ps.origin = origin;
    DurationHook hook;
    std::mt19937_64 rng(spec.seed + static_cast<std::uint64_t>(it) * 0x9e3779b97f4a7c15ull);
    if (spec.jitter_pct > 0.0) {
      auto dist = std::uniform_real_distribution<double>(-spec.jitter_pct, spec.jitter_pct);
      hook = [rng, dist](std::size_t, Micros base) mutable -> Micros {
        double u = dist(rng);
        if (base == 0) return 0;
        Micros d = static_cast<Micros>(std::llround(static_cast<double>(base) * (1.0 + u)));
        return d < 1 ? 1 : d;
      };
    }
    BuiltPipeline built = build_pipeline(ps, hook);
    IterationTruth truth;
    truth.start = built.start;
    truth.end = built.end;
    truth.makespan = built.end - built.start;
    truth.rank_end = built.rank_end;
    out.truth.iterations.push_back(std::move(truth));
    out.events.insert(out.events.end(), built.events.begin(), built.events.end());
    origin = built.end + spec.iteration_gap;
    ps.first_event = built.next_event;
    ps.first_correlation = built.next_correlation;
  }
  return out;
}

std::map<int, std::vector<TraceEvent>> split_by_rank(const std::vector<TraceEvent>& events) {
  std::map<int, std::vector<TraceEvent>> out;
  for (const auto& ev : events) out[ev.process_id].push_back(ev);
  return out;
}

std::string GroundTruth::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["iterations"] = nlohmann::ordered_json::array();
  for (const auto& it : iterations) {
    nlohmann::ordered_json ji;
    ji["start"] = it.start;
    ji["end"] = it.end;
    ji["makespan"] = it.makespan;
    nlohmann::ordered_json ranks;
    for (const auto& [rank, end] : it.rank_end) ranks[std::to_string(rank)] = end;
    ji["rank_end"] = std::move(ranks);
    j["iterations"].push_back(std::move(ji));
  }
  return j.dump(2) + "\n";
}

SynthSpec SynthSpec::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("generator spec is not valid JSON: ") + e.what());
  }
  SynthSpec s;
  // defaults describe a small but structurally complete run
  s.model.n_layers = 4;
  s.model.d_model = 1024;
  s.model.d_ffn = 4096;
  s.model.n_heads = 16;
  s.model.d_head = 64;
  s.par.num_microbatches = 4;
  if (j.contains("model")) s.model = detail::model_from_json(j.at("model"));
  if (j.contains("parallelism")) s.par = detail::par_from_json(j.at("parallelism"));
  s.tokens_per_microbatch = j.value("tokens_per_microbatch", s.tokens_per_microbatch);
  s.vocab = j.value("vocab", s.vocab);
  s.jitter_pct = j.value("jitter_pct", s.jitter_pct);
  s.seed = j.value("seed", s.seed);
  s.iterations = j.value("iterations", s.iterations);
  s.iteration_gap = j.value("iteration_gap", s.iteration_gap);
  s.origin = j.value("origin", s.origin);
  if (j.contains("costs")) {
    const auto& jc = j.at("costs");
    SynthCosts& c = s.costs;
    c.launch = jc.value("launch_us", c.launch);
    c.record = jc.value("record_us", c.record);
    c.wait = jc.value("wait_us", c.wait);
    c.sync = jc.value("sync_us", c.sync);
    c.gemm_ref_us = jc.value("gemm_ref_us", c.gemm_ref_us);
    c.gemm_ref_mnk = jc.value("gemm_ref_mnk", c.gemm_ref_mnk);
    c.bwd_gemm_factor = jc.value("bwd_gemm_factor", c.bwd_gemm_factor);
    c.attn_misc = jc.value("attn_misc_us", c.attn_misc);
    c.embed = jc.value("embed_us", c.embed);
    c.head = jc.value("head_us", c.head);
    c.loss_grad = jc.value("loss_grad_us", c.loss_grad);
    c.optimizer_ref_us = jc.value("optimizer_ref_us", c.optimizer_ref_us);
    c.optimizer_ref_bytes = jc.value("optimizer_ref_bytes", c.optimizer_ref_bytes);
    c.alpha_us = jc.value("alpha_us", c.alpha_us);
    c.bytes_per_us = jc.value("bytes_per_us", c.bytes_per_us);
    c.p2p_recv_base = jc.value("p2p_recv_base_us", c.p2p_recv_base);
  }
  if (s.model.n_params == 0) {
    s.model.n_params = static_cast<std::int64_t>(s.model.n_layers) *
                           (4 * s.model.d_model * s.model.d_model +
                            2 * s.model.d_model * s.model.d_ffn) +
                       2 * s.vocab * s.model.d_model;
  }
  s.validate();
  return s;
}

}  // namespace tracesim
