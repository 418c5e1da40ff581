#include <algorithm>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "tracesim/build.hpp"
#include "tracesim/trace_parse.hpp"

using namespace tracesim;
using tracesim::testutil::ev;
using tracesim::testutil::trace_json;

namespace {

ExecutionGraph graph_of(const nlohmann::json& events, BuildPolicy policy = BuildPolicy()) {
    return build_graph(parse_trace(trace_json(events)), policy);
}

const Task* task_named(const ExecutionGraph& g, const std::string& name) {
    auto it = std::find_if(g.tasks.begin(), g.tasks.end(),
                           [&](const Task& t) { return t.name == name; });
    return it == g.tasks.end() ? nullptr : &*it;
}

bool has_edge(const ExecutionGraph& g, const std::string& from, const std::string& to) {
    const Task* a = task_named(g, from);
    const Task* b = task_named(g, to);
    REQUIRE(a != nullptr);
    REQUIRE(b != nullptr);
    return std::find(g.fixed_edges.begin(), g.fixed_edges.end(), Edge{a->id, b->id}) !=
           g.fixed_edges.end();
}

int count_kind(const ExecutionGraph& g, Diagnostic::Kind kind) {
    return static_cast<int>(std::count_if(g.diagnostics.begin(), g.diagnostics.end(),
                                          [&](const Diagnostic& d) { return d.kind == kind; }));
}

}  // namespace

TEST_CASE("classify_task follows names and categories") {
    BuildPolicy policy;
    auto classify = [&](const std::string& name, const std::string& cat,
                        nlohmann::json args = nullptr) {
        auto parsed = parse_trace(trace_json(nlohmann::json::array(
            {ev(name, cat, 0, 1, 0, 1, std::move(args))})));
        REQUIRE(parsed.size() == 1);
        return classify_task(parsed[0], policy);
    };
    // op_class captures runtime roles; host-side compute stays Other
    CHECK(classify("aten::mm", "cpu_op") == OpClass::Other);
    CHECK(classify("cudaLaunchKernel", "cuda_runtime", {{"correlation", 1}}) == OpClass::Launch);
    CHECK(classify("cudaMemcpyAsync", "cuda_runtime", {{"correlation", 1}}) == OpClass::Launch);
    CHECK(classify("cudaStreamSynchronize", "cuda_runtime") == OpClass::Sync);
    CHECK(classify("cudaDeviceSynchronize", "cuda_runtime") == OpClass::Sync);
    CHECK(classify("cudaEventRecord", "cuda_runtime") == OpClass::EventRecord);
    CHECK(classify("cudaStreamWaitEvent", "cuda_runtime") == OpClass::EventWait);
    CHECK(classify("cudaFree", "cuda_runtime") == OpClass::Other);
    CHECK(classify("gemm_kernel", "kernel", {{"stream", 7}}) == OpClass::Compute);
    CHECK(classify("ncclDevKernel_AllReduce_Sum", "kernel", {{"stream", 9}}) ==
          OpClass::Communication);
    CHECK(classify("Memcpy DtoH", "gpu_memcpy", {{"stream", 7}}) == OpClass::Communication);
}

TEST_CASE("launch edges connect runtime launches to their kernels") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 2, {{"correlation", 1}}));
    events.push_back(ev("k1", "kernel", 0, 7, 10, 50, {{"correlation", 1}, {"stream", 7}}));
    events.push_back(ev("cudaLaunchKernel2", "cuda_runtime", 0, 100, 3, 2, {{"correlation", 2}}));
    auto g = graph_of(events);

    // cudaLaunchKernel2 is not in the policy launch list, so no launch class,
    // but the first launch connects.
    CHECK(has_edge(g, "cudaLaunchKernel", "k1"));
    const Task* k1 = task_named(g, "k1");
    CHECK(k1->kind == TaskKind::Gpu);
    CHECK(k1->processor.kind == LaneKind::CudaStream);
    CHECK(k1->processor.lane == 7);
}

TEST_CASE("unmatched launches and orphan kernels are diagnosed, not fatal") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 2, {{"correlation", 1}}));
    events.push_back(ev("orphan", "kernel", 0, 7, 10, 50, {{"correlation", 9}, {"stream", 7}}));
    auto g = graph_of(events);
    CHECK(count_kind(g, Diagnostic::Kind::UnmatchedLaunch) == 1);
    CHECK(count_kind(g, Diagnostic::Kind::OrphanKernel) == 1);
    CHECK(!has_edge(g, "cudaLaunchKernel", "orphan"));
}

TEST_CASE("same-stream kernels chain by launch order, not kernel start order") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 1, {{"correlation", 1}}));
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 2, 1, {{"correlation", 2}}));
    events.push_back(ev("ka", "kernel", 0, 7, 10, 5, {{"correlation", 1}, {"stream", 7}}));
    events.push_back(ev("kb", "kernel", 0, 7, 20, 5, {{"correlation", 2}, {"stream", 7}}));
    auto g = graph_of(events);
    CHECK(has_edge(g, "ka", "kb"));
}

TEST_CASE("record and wait bridge streams through the event timeline") {
    // k1 runs on stream 7; its completion is recorded at ts=10 and stream 9
    // waits on the event at ts=12, so the next kernel enqueued to stream 9
    // must run after k1 even though no launch edge says so.
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 2, {{"correlation", 1}}));
    nlohmann::json rec;
    rec["name"] = "cudaEventRecord";
    rec["cat"] = "cuda_runtime";
    rec["ph"] = "X";
    rec["pid"] = 0;
    rec["tid"] = 100;
    rec["ts"] = 10;
    rec["dur"] = 1;
    rec["args"] = {{"event", 5}, {"stream", 7}};
    events.push_back(rec);
    nlohmann::json wait = rec;
    wait["name"] = "cudaStreamWaitEvent";
    wait["ts"] = 12;
    wait["args"] = {{"event", 5}, {"stream", 9}};
    events.push_back(wait);
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 60, 2, {{"correlation", 2}}));
    events.push_back(ev("k1", "kernel", 0, 7, 3, 50, {{"correlation", 1}, {"stream", 7}}));
    events.push_back(ev("k2", "kernel", 0, 9, 62, 20, {{"correlation", 2}, {"stream", 9}}));
    auto g = graph_of(events);

    CHECK(has_edge(g, "k1", "k2"));
    CHECK(g.event_bindings.count(5) == 1);
    CHECK(g.event_bindings.at(5) == task_named(g, "k1")->id);
    CHECK(count_kind(g, Diagnostic::Kind::UnmatchedWait) == 0);

    SUBCASE("a wait with no earlier record is diagnosed") {
        nlohmann::json early = rec;
        early["name"] = "cudaStreamWaitEvent";
        early["ts"] = 5;
        early["args"] = {{"event", 77}, {"stream", 9}};
        events.push_back(early);
        auto g2 = graph_of(events);
        CHECK(count_kind(g2, Diagnostic::Kind::UnmatchedWait) == 1);
    }
    SUBCASE("a record before any kernel on its stream is diagnosed") {
        nlohmann::json early = rec;
        early["ts"] = 1;
        early["args"] = {{"event", 78}, {"stream", 9}};
        events.push_back(early);
        auto g2 = graph_of(events);
        CHECK(count_kind(g2, Diagnostic::Kind::UnmatchedRecord) == 1);
    }
}

TEST_CASE("stream sync rules watch the named stream") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 2, {{"correlation", 1}}));
    events.push_back(ev("k1", "kernel", 0, 7, 3, 50, {{"correlation", 1}, {"stream", 7}}));
    events.push_back(ev("cudaStreamSynchronize", "cuda_runtime", 0, 100, 60, 5, {{"stream", 7}}));
    auto g = graph_of(events);
    REQUIRE(g.rules.size() == 1);
    const auto& rule = g.rules[0];
    CHECK(rule.kind == RuntimeRule::Kind::StreamSync);
    CHECK(g.task(rule.waiting_task).name == "cudaStreamSynchronize");
    REQUIRE(rule.watched.size() == 1);
    CHECK(rule.watched[0] == ProcessorId{0, LaneKind::CudaStream, 7});

    SUBCASE("a sync naming an unknown stream is diagnosed and watches nothing") {
        events.push_back(
            ev("cudaStreamSynchronize", "cuda_runtime", 0, 100, 70, 5, {{"stream", 11}}));
        auto g2 = graph_of(events);
        REQUIRE(g2.rules.size() == 2);
        CHECK(g2.rules[1].watched.empty());
        CHECK(count_kind(g2, Diagnostic::Kind::UnknownStream) == 1);
    }
}

TEST_CASE("device sync watches every stream of the rank") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 2, {{"correlation", 1}}));
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 3, 2, {{"correlation", 2}}));
    events.push_back(ev("k1", "kernel", 0, 7, 5, 50, {{"correlation", 1}, {"stream", 7}}));
    events.push_back(ev("k2", "kernel", 0, 9, 6, 50, {{"correlation", 2}, {"stream", 9}}));
    events.push_back(ev("cudaDeviceSynchronize", "cuda_runtime", 0, 100, 60, 5));
    auto g = graph_of(events);
    REQUIRE(g.rules.size() == 1);
    CHECK(g.rules[0].kind == RuntimeRule::Kind::DeviceSync);
    CHECK(g.rules[0].watched.size() == 2);
}

TEST_CASE("event sync binds the most recent earlier record") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 2, {{"correlation", 1}}));
    events.push_back(ev("k1", "kernel", 0, 7, 3, 50, {{"correlation", 1}, {"stream", 7}}));
    nlohmann::json rec;
    rec["name"] = "cudaEventRecord";
    rec["cat"] = "cuda_runtime";
    rec["ph"] = "X";
    rec["pid"] = 0;
    rec["tid"] = 100;
    rec["ts"] = 10;
    rec["dur"] = 1;
    rec["args"] = {{"event", 4}, {"stream", 7}};
    events.push_back(rec);
    events.push_back(
        ev("cudaEventSynchronize", "cuda_runtime", 0, 100, 20, 5, {{"event", 4}}));
    auto g = graph_of(events);
    REQUIRE(g.rules.size() == 1);
    CHECK(g.rules[0].kind == RuntimeRule::Kind::EventSync);
    REQUIRE(g.rules[0].bound_task.has_value());
    CHECK(*g.rules[0].bound_task == task_named(g, "k1")->id);
}

TEST_CASE("cross-thread gap edges bind the latest candidate, boundaries included") {
    BuildPolicy policy;
    policy.gap_threshold_us = 1000;

    // Thread 200's op leaves a 1490us gap after its previous op; thread 100
    // has candidates ending at 1400 and exactly at 1500.
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("early", "cpu_op", 0, 100, 900, 500));
    events.push_back(ev("exact", "cpu_op", 0, 100, 1450, 50));
    events.push_back(ev("waiter", "cpu_op", 0, 200, 1500, 30));
    events.push_back(ev("base", "cpu_op", 0, 200, 0, 10));
    auto g = graph_of(events, policy);
    // candidate ending exactly at the gap task's start wins (end == start ok)
    CHECK(has_edge(g, "exact", "waiter"));
    CHECK(!has_edge(g, "early", "waiter"));
    CHECK(count_kind(g, Diagnostic::Kind::InterThreadEdge) == 1);

    SUBCASE("gaps below the threshold get no edge") {
        nlohmann::json small = nlohmann::json::array();
        small.push_back(ev("base", "cpu_op", 0, 200, 0, 10));
        small.push_back(ev("near", "cpu_op", 0, 200, 900, 30));
        small.push_back(ev("other", "cpu_op", 0, 100, 0, 800));
        auto g2 = graph_of(small, policy);
        CHECK(count_kind(g2, Diagnostic::Kind::InterThreadEdge) == 0);
    }
    SUBCASE("a single CPU thread never gets gap edges") {
        nlohmann::json solo = nlohmann::json::array();
        solo.push_back(ev("a", "cpu_op", 0, 100, 0, 10));
        solo.push_back(ev("b", "cpu_op", 0, 100, 5000, 10));
        auto g2 = graph_of(solo, policy);
        CHECK(count_kind(g2, Diagnostic::Kind::InterThreadEdge) == 0);
    }
    SUBCASE("candidates ending before the previous op on the same thread are skipped") {
        nlohmann::json stale = nlohmann::json::array();
        stale.push_back(ev("prev", "cpu_op", 0, 200, 0, 600));
        stale.push_back(ev("waiter", "cpu_op", 0, 200, 2000, 30));
        stale.push_back(ev("too_old", "cpu_op", 0, 100, 100, 200));  // ends 300 < prev end 600
        stale.push_back(ev("good", "cpu_op", 0, 100, 500, 800));     // ends 1300
        auto g2 = graph_of(stale, policy);
        CHECK(has_edge(g2, "good", "waiter"));
        CHECK(!has_edge(g2, "too_old", "waiter"));
    }
}

TEST_CASE("enclosing CPU spans are dropped in favor of their leaves") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("outer_module", "cpu_op", 0, 100, 0, 100));
    events.push_back(ev("inner_a", "cpu_op", 0, 100, 10, 30));
    events.push_back(ev("inner_b", "cpu_op", 0, 100, 50, 30));
    auto g = graph_of(events);
    CHECK(task_named(g, "outer_module") == nullptr);
    CHECK(task_named(g, "inner_a") != nullptr);
    CHECK(task_named(g, "inner_b") != nullptr);
    CHECK(count_kind(g, Diagnostic::Kind::DroppedEnclosingOp) == 1);
}

TEST_CASE("build_graph rejects GPU events without a stream") {
    std::vector<TraceEvent> events(1);
    events[0].name = "kernel_without_stream";
    events[0].category = EventCategory::GpuKernel;
    events[0].timestamp = 0;
    events[0].duration = 10;
    CHECK_THROWS_AS(build_graph(events), GraphError);
}

TEST_CASE("build_graph is deterministic") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 0, 2, {{"correlation", 1}}));
    events.push_back(ev("k1", "kernel", 0, 7, 3, 50, {{"correlation", 1}, {"stream", 7}}));
    events.push_back(ev("cudaStreamSynchronize", "cuda_runtime", 0, 100, 60, 5, {{"stream", 7}}));
    auto a = graph_of(events);
    auto b = graph_of(events);
    REQUIRE(a.tasks.size() == b.tasks.size());
    for (std::size_t i = 0; i < a.tasks.size(); ++i) {
        CHECK(a.tasks[i].name == b.tasks[i].name);
        CHECK(a.tasks[i].original_start == b.tasks[i].original_start);
    }
    CHECK(a.fixed_edges == b.fixed_edges);
}

TEST_CASE("merge_ranks keeps ranks disjoint and ids dense") {
    nlohmann::json r0 = nlohmann::json::array();
    r0.push_back(ev("a0", "cpu_op", 0, 100, 0, 10));
    r0.push_back(ev("b0", "cpu_op", 0, 100, 12, 10));
    nlohmann::json r1 = nlohmann::json::array();
    r1.push_back(ev("a1", "cpu_op", 1, 100, 5, 10));

    std::map<int, ExecutionGraph> parts;
    parts[0] = build_graph(parse_trace(trace_json(r0)), BuildPolicy(), 0);
    parts[1] = build_graph(parse_trace(trace_json(r1)), BuildPolicy(), 1);
    auto merged = merge_ranks(parts);

    REQUIRE(merged.tasks.size() == 3);
    for (std::size_t i = 0; i < merged.tasks.size(); ++i)
        CHECK(merged.tasks[i].id == static_cast<TaskId>(i));
    auto ranks = ranks_in(merged);
    CHECK(ranks == std::vector<int>{0, 1});
    CHECK(merged.iteration_window.start == 0);
    CHECK(merged.iteration_window.end == 22);

    auto slice = slice_rank(merged, 1);
    REQUIRE(slice.tasks.size() == 1);
    CHECK(slice.tasks[0].name == "a1");
    CHECK(slice.tasks[0].id == 0);
}

TEST_CASE("build policy round trips from JSON and validates") {
    auto policy = BuildPolicy::from_json(
        R"({"gap_threshold_us": 500, "sync_names": {"myDeviceSync": "device"}})");
    CHECK(policy.gap_threshold_us == 500);
    CHECK(policy.sync_flavor("myDeviceSync") == std::string("device"));
    // defaults survive the merge
    CHECK(policy.is_launch("cudaLaunchKernel"));

    CHECK_THROWS_AS(BuildPolicy::from_json(R"({"gap_threshold_us": -1})"), ParseError);
    CHECK_THROWS_AS(BuildPolicy::from_json(R"({"sync_names": {"x": "sideways"}})"), ParseError);
}
