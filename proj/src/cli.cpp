#include "tracesim/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "tracesim/build.hpp"
#include "tracesim/metrics.hpp"
#include "tracesim/simulate.hpp"
#include "tracesim/synth.hpp"
#include "tracesim/trace_parse.hpp"
#include "tracesim/transform.hpp"
#include "tracesim/types.hpp"

namespace tracesim {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

void emit_output(const std::string& out_path, const std::string& text) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text << '\n';
  } else {
    write_text_file(out_path, text);
  }
}

struct InputOptions {
  std::vector<std::string> traces;
  std::string manifest;
  std::string window = "full";
  std::string policy_path;
  std::string categories_path;
};

void add_input_options(CLI::App* cmd, InputOptions& in) {
  cmd->add_option("--trace", in.traces,
                  "trace file, repeatable; files without a rank_<N> filename marker are split by "
                  "process id");
  cmd->add_option("--manifest", in.manifest, "JSON object mapping rank -> trace path");
  cmd->add_option("--window", in.window,
                  "iteration window: 'full', 'auto', or explicit 'START:END' in microseconds")
      ->capture_default_str();
  cmd->add_option("--policy", in.policy_path, "dependency-inference policy JSON file");
  cmd->add_option("--categories", in.categories_path, "category-table JSON file");
}

IterationWindow parse_window_arg(const std::string& text) {
  auto sep = text.find_first_of(":,");
  if (sep == std::string::npos)
    throw std::invalid_argument("window must be 'full', 'auto' or START:END, got '" + text + "'");
  IterationWindow w;
  try {
    w.start = std::stoll(text.substr(0, sep));
    w.end = std::stoll(text.substr(sep + 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("window bounds must be integers, got '" + text + "'");
  }
  if (w.end <= w.start) throw std::invalid_argument("window end must be after its start");
  return w;
}

bool has_rank_marker(const std::string& path) {
  static const std::regex re(R"(rank_?\d+)");
  const std::string name = fs::path(path).filename().string();
  return std::regex_search(name, re);
}

std::map<int, std::vector<TraceEvent>> load_inputs(const InputOptions& in,
                                                   const CategoryTable& categories) {
  std::map<int, std::vector<TraceEvent>> per_rank;
  auto take = [&](int rank, std::vector<TraceEvent> events) {
    if (!per_rank.emplace(rank, std::move(events)).second)
      throw ParseError("rank " + std::to_string(rank) + " appears in more than one input");
  };
  if (!in.manifest.empty())
    for (auto& [rank, events] : load_multirank_manifest(in.manifest, categories))
      take(rank, std::move(events));
  std::vector<std::string> marked;
  for (const auto& path : in.traces) {
    if (has_rank_marker(path)) {
      marked.push_back(path);
      continue;
    }
    auto events = parse_trace(read_text_file(path), categories);
    for (auto& [rank, sub] : split_by_rank(events)) take(rank, std::move(sub));
  }
  if (!marked.empty())
    for (auto& [rank, events] : load_multirank(marked, categories)) take(rank, std::move(events));
  if (per_rank.empty()) throw ParseError("no input traces; pass --trace or --manifest");
  return per_rank;
}

ExecutionGraph build_from_inputs(const InputOptions& in) {
  CategoryTable categories = in.categories_path.empty()
                                 ? CategoryTable()
                                 : CategoryTable::from_json(read_text_file(in.categories_path));
  BuildPolicy policy = in.policy_path.empty()
                           ? BuildPolicy()
                           : BuildPolicy::from_json(read_text_file(in.policy_path));
  auto per_rank = load_inputs(in, categories);
  std::map<int, ExecutionGraph> graphs;
  for (auto& [rank, events] : per_rank) {
    std::vector<TraceEvent> scoped = std::move(events);
    if (in.window == "auto") {
      scoped = filter_window(scoped, detect_iteration_window(scoped));
    } else if (in.window != "full") {
      scoped = filter_window(scoped, parse_window_arg(in.window));
    }
    graphs.emplace(rank, build_graph(scoped, policy, rank));
  }
  return merge_ranks(graphs);
}

ordered_json breakdown_json(const Breakdown& b) {
  return ordered_json{{"total_us", b.total},
                      {"exposed_compute_us", b.exposed_compute},
                      {"exposed_comm_us", b.exposed_comm},
                      {"overlapped_us", b.overlapped},
                      {"other_us", b.other}};
}

ordered_json breakdown_by_rank_json(const std::map<int, Breakdown>& by_rank) {
  ordered_json j = ordered_json::object();
  for (const auto& [rank, b] : by_rank) j[std::to_string(rank)] = breakdown_json(b);
  return j;
}

ordered_json window_json(const IterationWindow& w) {
  return ordered_json{{"start_us", w.start}, {"end_us", w.end}};
}

const char* diagnostic_kind_name(Diagnostic::Kind k) {
  switch (k) {
    case Diagnostic::Kind::OrphanKernel: return "orphan_kernel";
    case Diagnostic::Kind::UnmatchedLaunch: return "unmatched_launch";
    case Diagnostic::Kind::UnmatchedWait: return "unmatched_wait";
    case Diagnostic::Kind::UnmatchedRecord: return "unmatched_record";
    case Diagnostic::Kind::UnknownStream: return "unknown_stream";
    case Diagnostic::Kind::DroppedEnclosingOp: return "dropped_enclosing_op";
    case Diagnostic::Kind::InterThreadEdge: return "inter_thread_edge";
  }
  return "unknown";
}

ordered_json diagnostics_json(const std::vector<Diagnostic>& diags) {
  std::map<std::string, int> counts;
  for (const auto& d : diags) ++counts[diagnostic_kind_name(d.kind)];
  ordered_json j = ordered_json::object();
  for (const auto& [kind, n] : counts) j[kind] = n;
  return j;
}

int cmd_replay(const InputOptions& in, std::size_t worst_n, const std::string& out_path,
               const std::string& sim_trace_path) {
  ExecutionGraph graph = build_from_inputs(in);
  SimulatedTrace sim = simulate(graph);
  ReplayReport rep = compare_replay(graph, sim, worst_n);
  auto intervals = task_intervals(graph, &sim);
  // the simulated schedule may overrun the recorded window; widen the
  // accounting window so the breakdown keeps its conservation property
  IterationWindow metric_window = graph.iteration_window;
  metric_window.end = std::max(metric_window.end, metric_window.start + sim.makespan);

  ordered_json j;
  j["schema_version"] = 1;
  j["window"] = window_json(graph.iteration_window);
  j["ranks"] = ranks_in(graph);
  j["tasks"] = graph.tasks.size();
  j["reference_makespan_us"] = rep.reference_makespan;
  j["simulated_makespan_us"] = rep.simulated_makespan;
  j["relative_error"] = rep.relative_error;
  j["zero_reference"] = rep.zero_reference;
  j["mean_abs_delta_us"] = rep.mean_abs_delta;
  j["max_abs_delta_us"] = rep.max_abs_delta;
  ordered_json worst = ordered_json::array();
  for (const auto& d : rep.worst) {
    worst.push_back(ordered_json{{"task", d.task},
                                 {"name", graph.task(d.task).name},
                                 {"reference_start_us", d.reference_start},
                                 {"simulated_start_us", d.simulated_start},
                                 {"delta_us", d.delta}});
  }
  j["worst_tasks"] = std::move(worst);
  j["breakdown_by_rank"] = breakdown_by_rank_json(breakdown_by_rank(intervals, metric_window));
  j["diagnostics"] = diagnostics_json(graph.diagnostics);

  if (!sim_trace_path.empty()) write_text_file(sim_trace_path, simulated_to_chrome_json(graph, sim));
  emit_output(out_path, j.dump(2));
  return 0;
}

int cmd_whatif(const InputOptions& in, const std::string& config_path, const std::string& out_path,
               const std::string& sim_trace_path) {
  if (config_path.empty()) throw TransformError("whatif needs --config");
  ExecutionGraph source = build_from_inputs(in);
  WhatIfConfig cfg = WhatIfConfig::from_json(read_text_file(config_path));
  TransformResult result = apply_whatif(source, cfg);

  SimulatedTrace source_sim = simulate(source);
  SimulatedTrace target_sim = simulate(result.graph);
  auto source_iv = task_intervals(source, &source_sim);
  auto target_iv = task_intervals(result.graph, &target_sim);
  auto recorded_iv = task_intervals(source);
  // in-place retimes keep the source window; make sure a slower prediction is
  // not clipped out of its own breakdown
  IterationWindow source_window = source.iteration_window;
  source_window.end = std::max(source_window.end, source_window.start + source_sim.makespan);
  IterationWindow predicted_window = result.graph.iteration_window;
  predicted_window.end =
      std::max(predicted_window.end, predicted_window.start + target_sim.makespan);

  ordered_json j;
  j["schema_version"] = 1;
  j["notes"] = result.notes;
  j["source"] = ordered_json{
      {"window", window_json(source.iteration_window)},
      {"recorded_makespan_us", makespan(recorded_iv)},
      {"makespan_us", source_sim.makespan},
      {"breakdown_by_rank",
       breakdown_by_rank_json(breakdown_by_rank(source_iv, source_window))}};
  j["predicted"] = ordered_json{
      {"window", window_json(predicted_window)},
      {"makespan_us", target_sim.makespan},
      {"breakdown_by_rank",
       breakdown_by_rank_json(breakdown_by_rank(target_iv, predicted_window))}};
  bool zero = false;
  double rel = relative_error(source_sim.makespan, target_sim.makespan, &zero);
  j["makespan_change"] = ordered_json{
      {"delta_us", target_sim.makespan - source_sim.makespan}, {"relative", zero ? 0.0 : rel}};

  if (!sim_trace_path.empty())
    write_text_file(sim_trace_path, simulated_to_chrome_json(result.graph, target_sim));
  emit_output(out_path, j.dump(2));
  return 0;
}

int cmd_gen(const std::string& config_path, const std::string& out_dir, const std::string& prefix,
            const std::string& out_path) {
  if (config_path.empty()) throw std::invalid_argument("gen needs --config");
  SynthSpec spec = SynthSpec::from_json(read_text_file(config_path));
  SynthResult result = generate(spec);

  fs::create_directories(out_dir);
  ordered_json manifest = ordered_json::object();
  std::vector<std::string> files;
  for (const auto& [rank, events] : split_by_rank(result.events)) {
    fs::path path = fs::path(out_dir) / (prefix + std::to_string(rank) + ".json");
    write_text_file(path.string(), chrome_json(events));
    // the manifest lives next to the rank files and relative entries resolve
    // against it, so bare filenames keep the directory relocatable
    manifest[std::to_string(rank)] = path.filename().string();
    files.push_back(path.string());
  }
  fs::path manifest_path = fs::path(out_dir) / "manifest.json";
  fs::path truth_path = fs::path(out_dir) / "ground_truth.json";
  write_text_file(manifest_path.string(), manifest.dump(2));
  write_text_file(truth_path.string(), result.truth.to_json());

  ordered_json j;
  j["schema_version"] = 1;
  j["ranks"] = files.size();
  j["events"] = result.events.size();
  j["files"] = files;
  j["manifest"] = manifest_path.string();
  j["ground_truth"] = truth_path.string();
  ordered_json iters = ordered_json::array();
  for (const auto& it : result.truth.iterations)
    iters.push_back(ordered_json{
        {"start_us", it.start}, {"end_us", it.end}, {"makespan_us", it.makespan}});
  j["iterations"] = std::move(iters);
  emit_output(out_path, j.dump(2));
  return 0;
}

int cmd_analyze(const InputOptions& in, Micros bin_width, bool simulated,
                const std::string& out_path) {
  if (bin_width <= 0) throw std::invalid_argument("--bin-width must be positive");
  ExecutionGraph graph = build_from_inputs(in);
  std::vector<MetricInterval> intervals;
  IterationWindow metric_window = graph.iteration_window;
  if (simulated) {
    SimulatedTrace sim = simulate(graph);
    intervals = task_intervals(graph, &sim);
    metric_window.end = std::max(metric_window.end, metric_window.start + sim.makespan);
  } else {
    intervals = task_intervals(graph);
  }

  auto spans = makespan_by_rank(intervals);
  auto breakdowns = breakdown_by_rank(intervals, metric_window);
  auto util = utilization_by_rank(intervals, metric_window, bin_width);

  ordered_json j;
  j["schema_version"] = 1;
  j["window"] = window_json(graph.iteration_window);
  j["basis"] = simulated ? "simulated" : "recorded";
  j["tasks"] = graph.tasks.size();
  j["makespan_us"] = makespan(intervals);
  ordered_json ranks = ordered_json::object();
  for (int rank : ranks_in(graph)) {
    ordered_json r;
    r["makespan_us"] = spans.count(rank) ? spans.at(rank) : 0;
    r["breakdown"] = breakdown_json(breakdowns.count(rank) ? breakdowns.at(rank) : Breakdown{});
    ordered_json bins = ordered_json::array();
    if (auto it = util.find(rank); it != util.end()) {
      for (const auto& b : it->second.bins)
        bins.push_back(ordered_json{{"start_us", b.start}, {"value", b.value}});
    }
    r["utilization"] = ordered_json{{"bin_width_us", bin_width}, {"bins", std::move(bins)}};
    ranks[std::to_string(rank)] = std::move(r);
  }
  j["ranks"] = std::move(ranks);
  j["diagnostics"] = diagnostics_json(graph.diagnostics);
  emit_output(out_path, j.dump(2));
  return 0;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const GraphError& e) {
    std::cerr << "graph error: " << e.what() << '\n';
    return 3;
  } catch (const SimulationError& e) {
    std::cerr << "simulation error: " << e.what() << '\n';
    return 4;
  } catch (const TransformError& e) {
    std::cerr << "transform error: " << e.what() << '\n';
    return 5;
  } catch (const CostModelError& e) {
    std::cerr << "cost model error: " << e.what() << '\n';
    return 5;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"trace replay, analysis and what-if prediction for training iterations"};
  app.require_subcommand(1);

  InputOptions replay_in;
  std::size_t replay_worst = 10;
  std::string replay_out, replay_sim_trace;
  CLI::App* replay = app.add_subcommand("replay", "replay a trace and report timing agreement");
  add_input_options(replay, replay_in);
  replay->add_option("--worst", replay_worst, "number of worst-matching tasks to report")
      ->capture_default_str();
  replay->add_option("--out", replay_out, "report path (default: stdout)");
  replay->add_option("--sim-trace", replay_sim_trace, "write the simulated schedule as a trace");

  InputOptions whatif_in;
  std::string whatif_config, whatif_out, whatif_sim_trace;
  CLI::App* whatif = app.add_subcommand("whatif", "predict a configuration change from a trace");
  add_input_options(whatif, whatif_in);
  whatif->add_option("--config", whatif_config, "what-if config JSON")->required();
  whatif->add_option("--out", whatif_out, "report path (default: stdout)");
  whatif->add_option("--sim-trace", whatif_sim_trace, "write the predicted schedule as a trace");

  std::string gen_config, gen_dir = ".", gen_prefix = "rank_", gen_out;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic training trace");
  gen->add_option("--config", gen_config, "generator spec JSON")->required();
  gen->add_option("--out-dir", gen_dir, "directory for per-rank traces")->capture_default_str();
  gen->add_option("--prefix", gen_prefix, "trace filename prefix")->capture_default_str();
  gen->add_option("--out", gen_out, "summary path (default: stdout)");

  InputOptions analyze_in;
  Micros analyze_bin = 1000;
  bool analyze_sim = false;
  std::string analyze_out;
  CLI::App* analyze = app.add_subcommand("analyze", "metrics for a recorded or replayed trace");
  add_input_options(analyze, analyze_in);
  analyze->add_option("--bin-width", analyze_bin, "utilization bin width in microseconds")
      ->capture_default_str();
  analyze->add_flag("--simulated", analyze_sim, "compute metrics from the replayed schedule");
  analyze->add_option("--out", analyze_out, "report path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (replay->parsed())
    return guarded([&] { return cmd_replay(replay_in, replay_worst, replay_out, replay_sim_trace); });
  if (whatif->parsed())
    return guarded([&] { return cmd_whatif(whatif_in, whatif_config, whatif_out, whatif_sim_trace); });
  if (gen->parsed())
    return guarded([&] { return cmd_gen(gen_config, gen_dir, gen_prefix, gen_out); });
  if (analyze->parsed())
    return guarded([&] { return cmd_analyze(analyze_in, analyze_bin, analyze_sim, analyze_out); });
  return 1;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("tracesim");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const auto& s : full) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace tracesim
