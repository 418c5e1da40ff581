#include <algorithm>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "tracesim/trace_parse.hpp"
#include "tracesim/types.hpp"

using namespace tracesim;
using tracesim::testutil::ev;
using tracesim::testutil::scratch_dir;
using tracesim::testutil::trace_json;
using tracesim::testutil::write_file;
namespace fs = std::filesystem;

namespace {

const TraceEvent* find_event(const std::vector<TraceEvent>& evs, const std::string& name) {
    auto it = std::find_if(evs.begin(), evs.end(),
                           [&](const TraceEvent& e) { return e.name == name; });
    return it == evs.end() ? nullptr : &*it;
}

}  // namespace

TEST_CASE("parse_trace keeps every category and normalizes fields") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("aten::mm", "cpu_op", 0, 100, 10, 5));
    events.push_back(ev("aten::add_", "cpu_op", 0, 100, 15, 3));
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 18, 2,
                        {{"correlation", 7}}));
    events.push_back(ev("cudaMemcpyAsync", "cuda_runtime", 0, 100, 20, 2,
                        {{"correlation", 8}}));
    events.push_back(ev("cudaStreamSynchronize", "cuda_runtime", 0, 100, 22, 4,
                        {{"stream", 7}}));
    events.push_back(ev("cudaDeviceSynchronize", "cuda_runtime", 0, 100, 30, 1));
    events.push_back(ev("gemm_kernel", "kernel", 0, 7, 25, 40,
                        {{"correlation", 7}, {"stream", 7}}));
    events.push_back(ev("ncclDevKernel_AllReduce_Sum", "kernel", 0, 9, 26, 12,
                        {{"stream", 9}, {"bytes", 4096}}));
    events.push_back(ev("elementwise_kernel", "kernel", 0, 7, 70, 4, {{"stream", 7}}));
    events.push_back(ev("Memcpy DtoH", "gpu_memcpy", 0, 7, 80, 6,
                        {{"correlation", 8}, {"stream", 7}}));
    events.push_back(ev("Memset (Device)", "gpu_memset", 0, 11, 90, 2));
    nlohmann::json meta;
    meta["name"] = "process_name";
    meta["ph"] = "M";
    meta["pid"] = 0;
    meta["tid"] = 100;
    meta["args"] = {{"name", "python"}};
    events.push_back(meta);

    auto parsed = parse_trace(trace_json(events));
    CHECK(parsed.size() == 11);  // the M record is dropped

    auto* mm = find_event(parsed, "aten::mm");
    REQUIRE(mm != nullptr);
    CHECK(mm->category == EventCategory::CpuOp);
    CHECK(mm->timestamp == 10);
    CHECK(mm->duration == 5);
    CHECK(mm->process_id == 0);
    CHECK(mm->thread_id == 100);
    CHECK(!mm->correlation_id.has_value());

    auto* launch = find_event(parsed, "cudaLaunchKernel");
    REQUIRE(launch != nullptr);
    CHECK(launch->category == EventCategory::CudaRuntime);
    REQUIRE(launch->correlation_id.has_value());
    CHECK(*launch->correlation_id == 7);

    auto* sync = find_event(parsed, "cudaStreamSynchronize");
    REQUIRE(sync != nullptr);
    CHECK(sync->args.at("stream") == "7");

    auto* gemm = find_event(parsed, "gemm_kernel");
    REQUIRE(gemm != nullptr);
    CHECK(gemm->category == EventCategory::GpuKernel);
    REQUIRE(gemm->stream_id.has_value());
    CHECK(*gemm->stream_id == 7);
    REQUIRE(gemm->correlation_id.has_value());
    CHECK(*gemm->correlation_id == 7);

    auto* nccl = find_event(parsed, "ncclDevKernel_AllReduce_Sum");
    REQUIRE(nccl != nullptr);
    CHECK(nccl->args.at("bytes") == "4096");

    auto* copy = find_event(parsed, "Memcpy DtoH");
    REQUIRE(copy != nullptr);
    CHECK(copy->category == EventCategory::GpuMemcpy);

    auto* memset_ev = find_event(parsed, "Memset (Device)");
    REQUIRE(memset_ev != nullptr);
    CHECK(memset_ev->category == EventCategory::GpuMemset);
    // No stream arg: GPU events fall back to tid as the stream id.
    REQUIRE(memset_ev->stream_id.has_value());
    CHECK(*memset_ev->stream_id == 11);

    CHECK(std::is_sorted(parsed.begin(), parsed.end(), [](const auto& a, const auto& b) {
        return std::tie(a.process_id, a.timestamp, a.thread_id) <
               std::tie(b.process_id, b.timestamp, b.thread_id);
    }));
}

TEST_CASE("parse_trace accepts a bare event array and fractional times") {
    nlohmann::json events = nlohmann::json::array();
    auto e = ev("op", "cpu_op", 0, 1, 0, 1);
    e["ts"] = 10.6;
    e["dur"] = 2.4;
    events.push_back(e);
    auto parsed = parse_trace(events.dump());
    REQUIRE(parsed.size() == 1);
    CHECK(parsed[0].timestamp == 11);  // rounded half-up
    CHECK(parsed[0].duration == 2);
}

TEST_CASE("zero-duration records survive only with a payload") {
    nlohmann::json events = nlohmann::json::array();
    nlohmann::json record;
    record["name"] = "cudaEventRecord";
    record["cat"] = "cuda_runtime";
    record["ph"] = "i";
    record["pid"] = 0;
    record["tid"] = 1;
    record["ts"] = 5;
    record["args"] = {{"event", 3}, {"stream", 7}};
    events.push_back(record);

    nlohmann::json marker = record;
    marker["name"] = "user marker";
    marker["args"] = nlohmann::json::object();
    events.push_back(marker);

    auto parsed = parse_trace(trace_json(events));
    REQUIRE(parsed.size() == 1);
    CHECK(parsed[0].name == "cudaEventRecord");
    CHECK(parsed[0].duration == 0);
}

TEST_CASE("parse_trace error reporting") {
    SUBCASE("malformed JSON carries a byte offset") {
        try {
            parse_trace("{\"traceEvents\": [ {]");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("malformed trace JSON") != std::string::npos);
            CHECK(e.byte_offset() > 0);
        }
    }
    SUBCASE("wrong top-level shape") {
        CHECK_THROWS_AS(parse_trace("42"), ParseError);
    }
    SUBCASE("duration event without ts names the record") {
        nlohmann::json events = nlohmann::json::array();
        events.push_back(ev("ok", "cpu_op", 0, 1, 0, 1));
        nlohmann::json bad = ev("bad", "cpu_op", 0, 1, 0, 1);
        bad.erase("ts");
        events.push_back(bad);
        try {
            parse_trace(trace_json(events));
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("record 1") != std::string::npos);
            CHECK(std::string(e.what()).find("missing ts") != std::string::npos);
        }
    }
    SUBCASE("negative times rejected") {
        nlohmann::json events = nlohmann::json::array();
        events.push_back(ev("bad", "cpu_op", 0, 1, -5, 1));
        CHECK_THROWS_AS(parse_trace(trace_json(events)), ParseError);
        events = nlohmann::json::array();
        events.push_back(ev("bad", "cpu_op", 0, 1, 5, -1));
        CHECK_THROWS_AS(parse_trace(trace_json(events)), ParseError);
    }
    SUBCASE("launch without correlation rejected") {
        nlohmann::json events = nlohmann::json::array();
        events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 1, 5, 1));
        try {
            parse_trace(trace_json(events));
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("launch-class") != std::string::npos);
        }
    }
}

TEST_CASE("category table lookups and overrides") {
    CategoryTable table;
    CHECK(table.lookup("cpu_op") == EventCategory::CpuOp);
    CHECK(table.lookup("Kernel") == EventCategory::GpuKernel);  // case-insensitive fallback
    CHECK(table.lookup("cuda_driver") == EventCategory::CudaRuntime);
    CHECK(table.lookup("something_else") == EventCategory::Metadata);

    auto custom = CategoryTable::from_json(R"({"my_ops": "CpuOp", "fabric": "GpuKernel"})");
    CHECK(custom.lookup("my_ops") == EventCategory::CpuOp);
    CHECK(custom.lookup("fabric") == EventCategory::GpuKernel);
    CHECK(custom.lookup("cpu_op") == EventCategory::CpuOp);  // defaults still present

    CHECK_THROWS_AS(CategoryTable::from_json(R"({"x": "NotACategory"})"), ParseError);
    CHECK_THROWS_AS(CategoryTable::from_json("[]"), ParseError);
}

TEST_CASE("chrome_json round trips through parse_trace") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("aten::mm", "cpu_op", 3, 100, 10, 5));
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 3, 100, 18, 2, {{"correlation", 7}}));
    events.push_back(ev("gemm_kernel", "kernel", 3, 7, 25, 40,
                        {{"correlation", 7}, {"stream", 7}, {"m", 1024}}));
    auto first = parse_trace(trace_json(events));
    auto second = parse_trace(chrome_json(first));
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
        CAPTURE(i);
        CHECK(first[i].name == second[i].name);
        CHECK(first[i].category == second[i].category);
        CHECK(first[i].timestamp == second[i].timestamp);
        CHECK(first[i].duration == second[i].duration);
        CHECK(first[i].process_id == second[i].process_id);
        CHECK(first[i].thread_id == second[i].thread_id);
        CHECK(first[i].correlation_id == second[i].correlation_id);
        CHECK(first[i].stream_id == second[i].stream_id);
        CHECK(first[i].args == second[i].args);
    }
    // Serialization itself is deterministic.
    CHECK(chrome_json(first) == chrome_json(second));
}

TEST_CASE("load_multirank derives ranks from filenames") {
    auto dir = scratch_dir("multirank");
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("op", "cpu_op", 0, 1, 0, 5));
    write_file(dir / "rank_0.json", trace_json(events));
    write_file(dir / "trace_rank1.json", trace_json(events));

    auto per_rank = load_multirank({(dir / "rank_0.json").string(),
                                    (dir / "trace_rank1.json").string()});
    REQUIRE(per_rank.size() == 2);
    CHECK(per_rank.count(0) == 1);
    CHECK(per_rank.count(1) == 1);
    CHECK(per_rank[1].size() == 1);

    SUBCASE("duplicate rank is an error") {
        write_file(dir / "other_rank_1.json", trace_json(events));
        CHECK_THROWS_AS(load_multirank({(dir / "trace_rank1.json").string(),
                                        (dir / "other_rank_1.json").string()}),
                        ParseError);
    }
    SUBCASE("missing rank marker is an error") {
        write_file(dir / "plain.json", trace_json(events));
        CHECK_THROWS_AS(load_multirank({(dir / "plain.json").string()}), ParseError);
    }
    SUBCASE("unreadable file is an error") {
        CHECK_THROWS_AS(load_multirank({(dir / "rank_9.json").string()}), ParseError);
    }
}

TEST_CASE("load_multirank_manifest resolves relative paths and overrides ranks") {
    auto dir = scratch_dir("manifest");
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("op", "cpu_op", 0, 1, 0, 5));
    write_file(dir / "a.json", trace_json(events));
    write_file(dir / "b.json", trace_json(events));
    nlohmann::json manifest;
    manifest["0"] = "a.json";
    manifest["3"] = (dir / "b.json").string();
    write_file(dir / "manifest.json", manifest.dump());

    auto per_rank = load_multirank_manifest((dir / "manifest.json").string());
    REQUIRE(per_rank.size() == 2);
    CHECK(per_rank.count(0) == 1);
    CHECK(per_rank.count(3) == 1);

    SUBCASE("non-numeric key is an error") {
        manifest["x"] = "a.json";
        write_file(dir / "bad.json", manifest.dump());
        CHECK_THROWS_AS(load_multirank_manifest((dir / "bad.json").string()), ParseError);
    }
}

TEST_CASE("detect_iteration_window splits on the dominant gap") {
    // Main thread: two bursts of CPU work separated by a 10000us hole. The
    // second burst has more events, so it wins.
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("it0_a", "cpu_op", 0, 100, 0, 50));
    events.push_back(ev("it0_b", "cpu_op", 0, 100, 60, 40));
    events.push_back(ev("it1_a", "cpu_op", 0, 100, 10100, 50));
    events.push_back(ev("it1_b", "cpu_op", 0, 100, 10160, 40));
    events.push_back(ev("it1_c", "cpu_op", 0, 100, 10210, 30));
    auto parsed = parse_trace(trace_json(events));
    auto window = detect_iteration_window(parsed);
    CHECK(window.start == 10100);
    CHECK(window.end == 10240);
}

TEST_CASE("detect_iteration_window returns the full span without a gap") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("a", "cpu_op", 0, 100, 0, 50));
    events.push_back(ev("b", "cpu_op", 0, 100, 55, 50));
    auto parsed = parse_trace(trace_json(events));
    auto window = detect_iteration_window(parsed);
    CHECK(window.start == 0);
    CHECK(window.end == 105);
}

TEST_CASE("filter_window keeps correlated GPU stragglers") {
    nlohmann::json events = nlohmann::json::array();
    events.push_back(ev("work", "cpu_op", 0, 100, 100, 20));
    events.push_back(ev("cudaLaunchKernel", "cuda_runtime", 0, 100, 120, 2, {{"correlation", 5}}));
    // Kernel starts after the window closes but belongs to an in-window launch.
    events.push_back(ev("late_kernel", "kernel", 0, 7, 400, 30,
                        {{"correlation", 5}, {"stream", 7}}));
    // Unrelated kernel outside the window is dropped.
    events.push_back(ev("stray_kernel", "kernel", 0, 7, 500, 10,
                        {{"correlation", 99}, {"stream", 7}}));
    events.push_back(ev("next_iter", "cpu_op", 0, 100, 900, 20));
    auto parsed = parse_trace(trace_json(events));

    IterationWindow window{100, 200};
    auto kept = filter_window(parsed, window);
    REQUIRE(kept.size() == 3);
    CHECK(find_event(kept, "work") != nullptr);
    CHECK(find_event(kept, "cudaLaunchKernel") != nullptr);
    CHECK(find_event(kept, "late_kernel") != nullptr);
    CHECK(find_event(kept, "stray_kernel") == nullptr);
    CHECK(find_event(kept, "next_iter") == nullptr);
}
