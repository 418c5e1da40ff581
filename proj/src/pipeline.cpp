#include "tracesim/pipeline.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

namespace tracesim {

std::vector<PipelineSlot> schedule_1f1b(int pp, int num_microbatches, int stage) {
  if (pp < 1 || stage < 0 || stage >= pp)
    throw std::invalid_argument("schedule_1f1b: stage out of range");
  if (num_microbatches < 1)
    throw std::invalid_argument("schedule_1f1b: need at least one microbatch");
  const int m = num_microbatches;
  const int warmup = std::min(pp - stage, m);
  std::vector<PipelineSlot> slots;
  slots.reserve(static_cast<std::size_t>(2 * m));
  int next_f = 0, next_b = 0;
  for (; next_f < warmup; ++next_f) slots.push_back({true, next_f});
  while (next_b < m) {
    slots.push_back({false, next_b++});
    if (next_f < m) slots.push_back({true, next_f++});
  }
  return slots;
}

namespace {

struct POp {
  enum class Type { LaunchKernel, Record, WaitEvent, StreamSync, DeviceSync };
  Type type = Type::LaunchKernel;
  Micros cpu_dur = 0;
  KernelSpec kernel;
  Micros kernel_dur = 0;
  int stream = -1;  // kernel stream, or the record/wait/sync target
  std::int64_t event_id = -1;
  std::int64_t correlation = -1;
  std::string recv_key;
  std::string send_key;
  std::string barrier_key;
  std::vector<int> barrier_ranks;
  std::vector<std::string> pre_keys;  // host-side gating (thread handoffs)
  std::string pub_key;
};

struct ThreadOps {
  int rank = 0;
  int thread = 0;
  std::vector<POp> ops;
  std::size_t cursor = 0;
};

struct RankState {
  std::map<int, Micros> cpu_clock;     // thread -> time
  std::map<int, Micros> stream_clock;  // stream -> last kernel end
  std::map<int, Micros> stream_floor;  // stream -> wait-event barrier
  std::map<std::int64_t, Micros> event_bind;
};

class Builder {
 public:
  Builder(const PipelineSpec& spec, const DurationHook& hook) : spec_(spec), hook_(hook) {
    if (spec_.pp < 1 || spec_.dp < 1) throw std::invalid_argument("pipeline: pp and dp must be >= 1");
    if (static_cast<int>(spec_.stages.size()) != spec_.pp)
      throw std::invalid_argument("pipeline: need one stage spec per pipeline stage");
    if (spec_.num_microbatches < 1)
      throw std::invalid_argument("pipeline: need at least one microbatch");
  }

  BuiltPipeline run() {
    for (int j = 0; j < spec_.dp; ++j)
      for (int s = 0; s < spec_.pp; ++s) build_rank(s, j);
    time_all();
    BuiltPipeline out;
    std::stable_sort(events_.begin(), events_.end(), [](const TraceEvent& a, const TraceEvent& b) {
      return std::tie(a.process_id, a.timestamp, a.thread_id) <
             std::tie(b.process_id, b.timestamp, b.thread_id);
    });
    out.start = spec_.origin;
    out.end = spec_.origin;
    for (const auto& ev : events_) {
      Micros e = ev.timestamp + ev.duration;
      out.end = std::max(out.end, e);
      auto [it, fresh] = out.rank_end.try_emplace(ev.process_id, e);
      if (!fresh) it->second = std::max(it->second, e);
    }
    out.events = std::move(events_);
    out.next_event = next_event_;
    out.next_correlation = next_corr_;
    return out;
  }

 private:
  const PipelineSpec& spec_;
  const DurationHook& hook_;
  std::vector<ThreadOps> threads_;
  std::map<int, RankState> state_;
  std::vector<TraceEvent> events_;
  std::unordered_map<std::string, Micros> published_;
  std::map<std::string, std::map<int, Micros>> barrier_starts_;
  std::int64_t next_event_ = spec_.first_event;
  std::int64_t next_corr_ = spec_.first_correlation;
  std::size_t op_index_ = 0;

  Micros cost(Micros base) {
    Micros d = hook_ ? hook_(op_index_, base) : base;
    ++op_index_;
    return d < 0 ? 0 : d;
  }

  int rank_of(int stage, int dp_index) const { return stage + spec_.pp * dp_index; }
  int last_stage() const { return spec_.pp - 1; }

  static std::string mb_key(const char* what, bool forward, int stage_from, int dp_index, int mb) {
    return std::string(what) + (forward ? ":f:" : ":b:") + std::to_string(stage_from) + ":" +
           std::to_string(dp_index) + ":" + std::to_string(mb);
  }

  POp launch_op(KernelSpec k, std::map<std::string, std::string> tags) {
    POp op;
    op.type = POp::Type::LaunchKernel;
    op.cpu_dur = cost(spec_.host.launch);
    for (auto& [key, value] : tags) k.args[key] = value;
    op.kernel_dur = cost(k.duration);
    op.kernel = std::move(k);
    op.correlation = next_corr_++;
    return op;
  }

  POp record_op(int stream) {
    POp op;
    op.type = POp::Type::Record;
    op.cpu_dur = cost(spec_.host.record);
    op.stream = stream;
    op.event_id = next_event_++;
    return op;
  }

  POp wait_op(int stream, std::int64_t event_id) {
    POp op;
    op.type = POp::Type::WaitEvent;
    op.cpu_dur = cost(spec_.host.wait);
    op.stream = stream;
    op.event_id = event_id;
    return op;
  }

  POp sync_op(bool device, int stream, std::string pub_key = {}) {
    POp op;
    op.type = device ? POp::Type::DeviceSync : POp::Type::StreamSync;
    op.cpu_dur = cost(spec_.host.sync);
    op.stream = stream;
    op.pub_key = std::move(pub_key);
    return op;
  }

  KernelSpec p2p_kernel(bool send, bool forward, int peer_stage) const {
    KernelSpec k;
    k.name = "ncclDevKernel_SendRecv";
    k.duration = send ? spec_.p2p_send : spec_.p2p_recv_base;
    k.op_class = OpClass::Communication;
    k.args["region"] = "p2p";
    k.args["dir"] = send ? "send" : "recv";
    k.args["peer_stage"] = std::to_string(peer_stage);
    k.args["bytes"] = std::to_string(spec_.activation_bytes);
    k.args["collective"] = "sendrecv";
    k.args["phase"] = forward ? "fwd" : "bwd";
    return k;
  }

  // ops for receiving the slot's activations: recv kernel, then make the
  // compute stream wait on it
  void emit_recv(std::vector<POp>& ops, bool forward, int stage, int dp_index, int mb) {
    int from = forward ? stage - 1 : stage + 1;
    POp recv = launch_op(p2p_kernel(false, forward, from), {{"mb", std::to_string(mb)}});
    recv.stream = spec_.p2p_stream;
    recv.recv_key = mb_key("p2p", forward, from, dp_index, mb);
    ops.push_back(std::move(recv));
    POp rec = record_op(spec_.p2p_stream);
    std::int64_t ev = rec.event_id;
    ops.push_back(std::move(rec));
    ops.push_back(wait_op(spec_.compute_stream, ev));
  }

  // ops for sending this slot's output onward: compute stream record, p2p
  // stream waits, then the send kernel
  void emit_send(std::vector<POp>& ops, bool forward, int stage, int dp_index, int mb) {
    int to = forward ? stage + 1 : stage - 1;
    POp rec = record_op(spec_.compute_stream);
    std::int64_t ev = rec.event_id;
    ops.push_back(std::move(rec));
    ops.push_back(wait_op(spec_.p2p_stream, ev));
    POp send = launch_op(p2p_kernel(true, forward, to), {{"mb", std::to_string(mb)}});
    send.stream = spec_.p2p_stream;
    send.send_key = mb_key("p2p", forward, stage, dp_index, mb);
    ops.push_back(std::move(send));
  }

  void emit_compute(std::vector<POp>& ops, const std::vector<KernelSpec>& kernels,
                    std::map<std::string, std::string> tags) {
    for (const auto& k : kernels) {
      POp op = launch_op(k, tags);
      op.stream = spec_.compute_stream;
      ops.push_back(std::move(op));
    }
  }

  std::map<std::string, std::string> slot_tags(bool forward, int mb) const {
    return {{"mb", std::to_string(mb)}, {"phase", forward ? "fwd" : "bwd"}};
  }

  std::map<std::string, std::string> layer_tags(bool forward, int mb, int global_layer) const {
    auto tags = slot_tags(forward, mb);
    tags["layer"] = std::to_string(global_layer);
    return tags;
  }

  int first_global_layer(int stage) const {
    int acc = 0;
    for (int s = 0; s < stage; ++s) acc += static_cast<int>(spec_.stages[s].layers_fwd.size());
    return acc;
  }

  void emit_fwd_slot(std::vector<POp>& ops, int stage, int dp_index, int mb) {
    const StageSpec& st = spec_.stages[stage];
    if (stage > 0) emit_recv(ops, true, stage, dp_index, mb);
    if (stage == 0) {
      auto tags = slot_tags(true, mb);
      tags["region"] = "embed";
      emit_compute(ops, st.pre_fwd, tags);
    }
    int base = first_global_layer(stage);
    for (std::size_t l = 0; l < st.layers_fwd.size(); ++l)
      emit_compute(ops, st.layers_fwd[l], layer_tags(true, mb, base + static_cast<int>(l)));
    if (stage == last_stage()) {
      auto tags = slot_tags(true, mb);
      tags["region"] = "head";
      emit_compute(ops, st.post_fwd, tags);
    }
    if (stage < last_stage()) emit_send(ops, true, stage, dp_index, mb);
  }

  void emit_bwd_slot(std::vector<POp>& ops, int stage, int dp_index, int mb) {
    const StageSpec& st = spec_.stages[stage];
    if (stage < last_stage()) emit_recv(ops, false, stage, dp_index, mb);
    if (stage == last_stage()) {
      auto tags = slot_tags(false, mb);
      tags["region"] = "head";
      emit_compute(ops, st.pre_bwd, tags);
    }
    int base = first_global_layer(stage);
    int nl = static_cast<int>(st.layers_bwd.size());
    for (int l = 0; l < nl; ++l) {
      // layers run back to front in the backward pass
      int local = nl - 1 - l;
      emit_compute(ops, st.layers_bwd[local], layer_tags(false, mb, base + local));
    }
    if (stage == 0) {
      auto tags = slot_tags(false, mb);
      tags["region"] = "embed";
      emit_compute(ops, st.post_bwd, tags);
    }
    if (stage > 0) emit_send(ops, false, stage, dp_index, mb);
  }

  void emit_tail(std::vector<POp>& ops, int stage, std::string gate_key) {
    const StageSpec& st = spec_.stages[stage];
    bool gated = !gate_key.empty();
    auto gate = [&](POp op) {
      if (gated) {
        op.pre_keys.push_back(gate_key);
        gated = false;
      }
      ops.push_back(std::move(op));
    };
    bool reduced = spec_.dp > 1 && !st.reduce.empty();
    if (reduced) {
      POp rec = record_op(spec_.compute_stream);
      std::int64_t ev = rec.event_id;
      gate(std::move(rec));
      ops.push_back(wait_op(spec_.reduce_stream, ev));
      int seq = 0;
      for (const auto& k : st.reduce) {
        std::map<std::string, std::string> tags{{"region", "dp"}};
        POp op = launch_op(k, tags);
        op.stream = spec_.reduce_stream;
        op.barrier_key = "ar:" + std::to_string(stage) + ":" + std::to_string(seq++);
        for (int j = 0; j < spec_.dp; ++j) op.barrier_ranks.push_back(rank_of(stage, j));
        ops.push_back(std::move(op));
      }
      POp rec2 = record_op(spec_.reduce_stream);
      std::int64_t ev2 = rec2.event_id;
      ops.push_back(std::move(rec2));
      ops.push_back(wait_op(spec_.compute_stream, ev2));
    }
    for (const auto& k : st.optimizer) {
      std::map<std::string, std::string> tags{{"region", "opt"}};
      POp op = launch_op(k, tags);
      op.stream = spec_.compute_stream;
      gate(std::move(op));
    }
    gate(sync_op(true, -1));
  }

  void build_rank(int stage, int dp_index) {
    int rank = rank_of(stage, dp_index);
    auto& st = state_[rank];
    st.cpu_clock[spec_.main_thread] = spec_.origin;
    st.stream_clock[spec_.compute_stream] = spec_.origin;
    st.stream_clock[spec_.reduce_stream] = spec_.origin;
    st.stream_clock[spec_.p2p_stream] = spec_.origin;

    if (spec_.pp == 1) {
      build_single_stage_rank(rank, dp_index);
      return;
    }

    ThreadOps main;
    main.rank = rank;
    main.thread = spec_.main_thread;
    for (const PipelineSlot& slot : schedule_1f1b(spec_.pp, spec_.num_microbatches, stage)) {
      if (slot.forward)
        emit_fwd_slot(main.ops, stage, dp_index, slot.microbatch);
      else
        emit_bwd_slot(main.ops, stage, dp_index, slot.microbatch);
    }
    emit_tail(main.ops, stage, {});
    threads_.push_back(std::move(main));
  }

  // single-stage layout: the main thread launches forward passes, a second
  // thread launches backward passes, and stream syncs hand control back and
  // forth so host-side idle gaps mirror the data dependencies
  void build_single_stage_rank(int rank, int dp_index) {
    state_[rank].cpu_clock[spec_.helper_thread] = spec_.origin;

    ThreadOps main, helper;
    main.rank = helper.rank = rank;
    main.thread = spec_.main_thread;
    helper.thread = spec_.helper_thread;

    for (int mb = 0; mb < spec_.num_microbatches; ++mb) {
      std::size_t first_main = main.ops.size();
      emit_fwd_slot(main.ops, 0, dp_index, mb);
      if (mb > 0)
        main.ops[first_main].pre_keys.push_back(mb_key("sync", false, 0, dp_index, mb - 1));
      main.ops.push_back(
          sync_op(false, spec_.compute_stream, mb_key("sync", true, 0, dp_index, mb)));

      std::size_t first_helper = helper.ops.size();
      emit_bwd_slot(helper.ops, 0, dp_index, mb);
      helper.ops[first_helper].pre_keys.push_back(mb_key("sync", true, 0, dp_index, mb));
      helper.ops.push_back(
          sync_op(false, spec_.compute_stream, mb_key("sync", false, 0, dp_index, mb)));
    }
    emit_tail(main.ops, 0, mb_key("sync", false, 0, dp_index, spec_.num_microbatches - 1));
    threads_.push_back(std::move(main));
    threads_.push_back(std::move(helper));
  }

  bool try_process(ThreadOps& to) {
    if (to.cursor >= to.ops.size()) return false;
    POp& op = to.ops[to.cursor];
    RankState& st = state_[to.rank];
    Micros cpu = st.cpu_clock[to.thread];
    for (const auto& key : op.pre_keys) {
      auto it = published_.find(key);
      if (it == published_.end()) return false;
      cpu = std::max(cpu, it->second);
    }

    switch (op.type) {
      case POp::Type::LaunchKernel: {
        Micros cpu_end = cpu + op.cpu_dur;
        Micros kstart = std::max({st.stream_clock[op.stream], st.stream_floor[op.stream], cpu_end});
        Micros kend;
        if (!op.recv_key.empty()) {
          auto it = published_.find(op.recv_key);
          if (it == published_.end()) return false;
          kend = std::max(kstart, it->second) + op.kernel_dur;
        } else if (!op.barrier_key.empty()) {
          barrier_starts_[op.barrier_key][to.rank] = kstart;
          if (barrier_starts_[op.barrier_key].size() != op.barrier_ranks.size()) return false;
          Micros latest = kstart;
          for (const auto& [r, s] : barrier_starts_[op.barrier_key]) latest = std::max(latest, s);
          kend = latest + op.kernel_dur;
        } else {
          kend = kstart + op.kernel_dur;
        }
        emit_cpu(to, "cudaLaunchKernel", cpu, op.cpu_dur, op.correlation);
        TraceEvent kev;
        kev.name = op.kernel.name;
        kev.category = EventCategory::GpuKernel;
        kev.timestamp = kstart;
        kev.duration = kend - kstart;
        kev.process_id = to.rank;
        kev.thread_id = op.stream;
        kev.stream_id = op.stream;
        kev.correlation_id = op.correlation;
        kev.args = op.kernel.args;
        events_.push_back(std::move(kev));
        st.cpu_clock[to.thread] = cpu_end;
        st.stream_clock[op.stream] = kend;
        if (!op.send_key.empty()) published_[op.send_key] = kend;
        break;
      }
      case POp::Type::Record: {
        st.event_bind[op.event_id] = st.stream_clock[op.stream];
        emit_cpu(to, "cudaEventRecord", cpu, op.cpu_dur, -1,
                 {{"event", std::to_string(op.event_id)}, {"stream", std::to_string(op.stream)}});
        st.cpu_clock[to.thread] = cpu + op.cpu_dur;
        break;
      }
      case POp::Type::WaitEvent: {
        Micros bound = st.event_bind[op.event_id];
        st.stream_floor[op.stream] = std::max(st.stream_floor[op.stream], bound);
        emit_cpu(to, "cudaStreamWaitEvent", cpu, op.cpu_dur, -1,
                 {{"event", std::to_string(op.event_id)}, {"stream", std::to_string(op.stream)}});
        st.cpu_clock[to.thread] = cpu + op.cpu_dur;
        break;
      }
      case POp::Type::StreamSync: {
        Micros wake = std::max(cpu, st.stream_clock[op.stream]);
        emit_cpu(to, "cudaStreamSynchronize", wake, op.cpu_dur, -1,
                 {{"stream", std::to_string(op.stream)}});
        st.cpu_clock[to.thread] = wake + op.cpu_dur;
        if (!op.pub_key.empty()) published_[op.pub_key] = wake + op.cpu_dur;
        break;
      }
      case POp::Type::DeviceSync: {
        Micros wake = cpu;
        for (const auto& [stream, clk] : st.stream_clock) wake = std::max(wake, clk);
        emit_cpu(to, "cudaDeviceSynchronize", wake, op.cpu_dur, -1);
        st.cpu_clock[to.thread] = wake + op.cpu_dur;
        if (!op.pub_key.empty()) published_[op.pub_key] = wake + op.cpu_dur;
        break;
      }
    }
    ++to.cursor;
    return true;
  }

  void emit_cpu(const ThreadOps& to, const char* name, Micros ts, Micros dur,
                std::int64_t correlation,
                std::map<std::string, std::string> args = {}) {
    TraceEvent ev;
    ev.name = name;
    ev.category = EventCategory::CudaRuntime;
    ev.timestamp = ts;
    ev.duration = dur;
    ev.process_id = to.rank;
    ev.thread_id = to.thread;
    if (correlation >= 0) ev.correlation_id = correlation;
    ev.args = std::move(args);
    events_.push_back(std::move(ev));
  }

  void time_all() {
    std::size_t total = 0;
    for (const auto& to : threads_) total += to.ops.size();
    std::size_t done = 0;
    while (done < total) {
      std::size_t before = done;
      for (auto& to : threads_)
        while (try_process(to)) ++done;
      if (done == before)
        throw std::logic_error("pipeline schedule did not make progress");
    }
  }
};

}  // namespace

BuiltPipeline build_pipeline(const PipelineSpec& spec, const DurationHook& hook) {
  Builder b(spec, hook);
  return b.run();
}

}  // namespace tracesim
