#include "ph/cli.hpp"

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "ph/analytics.hpp"
#include "ph/core_model.hpp"
#include "ph/duration.hpp"
#include "ph/master_server.hpp"
#include "ph/rng.hpp"
#include "ph/simulator.hpp"
#include "ph/telemetry.hpp"
#include "ph/worker_agent.hpp"

namespace ph {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::atomic<bool> g_stop{false};
std::atomic<bool> g_abort{false};

extern "C" void on_signal(int) {
    if (g_stop.load()) g_abort.store(true);
    g_stop.store(true);
}

void install_signals() {
    struct sigaction sa {};
    sa.sa_handler = on_signal;
    sigemptyset(&sa.sa_mask);
    ::sigaction(SIGINT, &sa, nullptr);
    ::sigaction(SIGTERM, &sa, nullptr);
}

// All option storage. Durations stay strings until parse_duration.
struct Opts {
    bool json = false;
    std::string config;
    std::string log_level = "info";

    // shared
    std::string spec, out, workload, granularity, tasks, run_dir, ordering = "NATURAL";
    std::uint64_t seed = 0;
    bool seed_set = false;

    // master
    std::string listen = "127.0.0.1:7700", metrics, telemetry, port_file;
    std::string heartbeat = "10", lost_timeout = "30", telemetry_interval = "5", drain_grace = "10";
    int retry_cap = 3, target_pool = 0;

    // worker
    std::string master, exec = "simulated", command, timeout, log, worker_id, work_dir;
    std::string backoff_max = "30";
    int slots = 2, connect_attempts = 20;
    double speed = 1.0, time_scale = 1.0;

    // run-local
    int workers = 4;
    double kill_fraction = 0.0;
    std::string kill_at = "0";
    std::uint64_t kill_seed = 1;

    // sim / analyze / collector / verify / bounds
    std::string scenario, trace, dt = "60", duration, flush = "5", manifest, root, rows;
    double n_w = 0.0;
    std::size_t n_task = 0;
};

struct Cli {
    Opts o;
    CLI::App app{"Master/worker task farm: campaign generation, serving, simulation and analysis", "phgrid"};
    CLI::App* gen = nullptr;
    CLI::App* cluster = nullptr;
    CLI::App* master = nullptr;
    CLI::App* worker = nullptr;
    CLI::App* run_local = nullptr;
    CLI::App* sim = nullptr;
    CLI::App* analyze = nullptr;
    CLI::App* collector = nullptr;
    CLI::App* verify = nullptr;
    CLI::App* bounds = nullptr;
};

void add_master_flags(CLI::App* c, Opts& o) {
    c->add_option("--heartbeat", o.heartbeat, "Heartbeat interval (duration)")->capture_default_str();
    c->add_option("--lost-timeout", o.lost_timeout, "Silence before a worker is declared lost")->capture_default_str();
    c->add_option("--retry-cap", o.retry_cap, "Failed attempts tolerated per task")->capture_default_str();
    c->add_option("--ordering", o.ordering, "NATURAL, RANDOM, LONGEST_FIRST or SHORTEST_FIRST")->capture_default_str();
    c->add_option("--seed", o.seed, "Seed for RANDOM ordering");
}

void add_exec_flags(CLI::App* c, Opts& o) {
    c->add_option("--exec", o.exec, "Executor: simulated or command")->capture_default_str();
    c->add_option("--command", o.command, "Command template ({task_id} {payload_ref} {calc_ids_file} {calc_ids})");
    c->add_option("--speed", o.speed, "Simulated speed factor")->capture_default_str();
    c->add_option("--time-scale", o.time_scale, "Simulated sleep multiplier")->capture_default_str();
    c->add_option("--timeout", o.timeout, "Per-task timeout (duration), off by default");
    c->add_option("--work-dir", o.work_dir, "Directory for calc_ids files");
}

void add_task_source(CLI::App* c, Opts& o) {
    c->add_option("--tasks", o.tasks, "Tasks JSONL");
    c->add_option("--workload", o.workload, "Calculations JSONL (clustered with --granularity)");
    c->add_option("--granularity", o.granularity, "Granularity map JSON");
}

std::unique_ptr<Cli> build_cli() {
    auto cli = std::make_unique<Cli>();
    auto& app = cli->app;
    auto& o = cli->o;
    app.require_subcommand(1);
    app.add_flag("--json", o.json, "Machine-readable output on stdout");
    app.add_option("--config", o.config, "JSON config file (flags > PH_ env > config)");
    app.add_option("--log-level", o.log_level, "debug, info, warn, error")->capture_default_str();

    auto* gen = cli->gen = app.add_subcommand("gen", "Generate a workload of atomic calculations");
    gen->add_option("--spec", o.spec, "Workload spec JSON")->required();
    gen->add_option("--out", o.out, "Output JSONL")->required();
    gen->add_option("--seed", o.seed, "Override the spec seed");

    auto* cl = cli->cluster = app.add_subcommand("cluster", "Cluster calculations into tasks");
    cl->add_option("--workload", o.workload, "Calculations JSONL")->required();
    cl->add_option("--granularity", o.granularity, "Granularity map JSON")->required();
    cl->add_option("--out", o.out, "Output tasks JSONL")->required();
    cl->add_option("--ordering", o.ordering, "Calculation order before clustering")->capture_default_str();
    cl->add_option("--seed", o.seed, "Seed for RANDOM ordering");

    auto* m = cli->master = app.add_subcommand("master", "Serve a campaign to pull-model workers");
    add_task_source(m, o);
    m->add_option("--listen", o.listen, "Worker endpoint host:port (port 0 = ephemeral)")->capture_default_str();
    m->add_option("--run-dir", o.run_dir, "Run directory")->required();
    m->add_option("--target-pool", o.target_pool, "Expected pool size N_w (metrics only)");
    m->add_option("--metrics", o.metrics, "HTTP metrics endpoint host:port");
    m->add_option("--telemetry", o.telemetry, "UDP collector host:port");
    m->add_option("--telemetry-interval", o.telemetry_interval, "Telemetry period (duration)")->capture_default_str();
    m->add_option("--port-file", o.port_file, "Write the bound port here");
    m->add_option("--drain-grace", o.drain_grace, "Wait for workers after the end (duration)")->capture_default_str();
    add_master_flags(m, o);

    auto* w = cli->worker = app.add_subcommand("worker", "Run a worker agent");
    w->add_option("--master", o.master, "Master endpoint host:port")->required();
    w->add_option("--slots", o.slots, "Concurrent tasks")->capture_default_str();
    w->add_option("--heartbeat", o.heartbeat, "Heartbeat interval (duration)")->capture_default_str();
    w->add_option("--backoff-max", o.backoff_max, "NOWORK backoff cap (duration)")->capture_default_str();
    w->add_option("--connect-attempts", o.connect_attempts, "Connection attempts")->capture_default_str();
    w->add_option("--log", o.log, "Local JSONL task log");
    w->add_option("--worker-id", o.worker_id, "Requested worker id");
    add_exec_flags(w, o);

    auto* rl = cli->run_local = app.add_subcommand("run-local", "Master plus N local worker processes");
    add_task_source(rl, o);
    rl->add_option("--run-dir", o.run_dir, "Run directory")->required();
    rl->add_option("--workers", o.workers, "Worker processes")->capture_default_str();
    rl->add_option("--slots", o.slots, "Slots per worker")->capture_default_str();
    rl->add_option("--kill-fraction", o.kill_fraction, "Fraction of workers to SIGKILL mid-run");
    rl->add_option("--kill-at", o.kill_at, "When to kill them (duration)");
    rl->add_option("--kill-seed", o.kill_seed, "Victim selection seed");
    rl->add_option("--dt", o.dt, "Analysis bin width (duration)")->capture_default_str();
    rl->add_option("--metrics", o.metrics, "HTTP metrics endpoint host:port");
    rl->add_option("--telemetry", o.telemetry, "UDP collector host:port");
    add_master_flags(rl, o);
    add_exec_flags(rl, o);

    auto* s = cli->sim = app.add_subcommand("sim", "Simulate a scenario");
    s->add_option("--scenario", o.scenario, "Scenario JSON")->required();
    s->add_option("--out", o.out, "Output directory")->required();

    auto* a = cli->analyze = app.add_subcommand("analyze", "Decompose a run trace");
    a->add_option("--trace", o.trace, "trace.jsonl")->required();
    a->add_option("--n-w", o.n_w, "Target pool N_w in slots")->required();
    a->add_option("--dt", o.dt, "Bin width (duration)")->capture_default_str();
    a->add_option("--n-task", o.n_task, "Campaign size (default: tasks seen in the trace)");
    a->add_option("--out", o.out, "Write decomposition, series and profile here");

    auto* co = cli->collector = app.add_subcommand("collector", "Telemetry collector daemon");
    co->add_option("--listen", o.listen, "UDP host:port")->default_str("0.0.0.0:8884");
    co->add_option("--out", o.out, "Output directory")->required();
    co->add_option("--duration", o.duration, "Stop after (duration)");
    co->add_option("--flush", o.flush, "Flush period (duration)")->capture_default_str();

    auto* v = cli->verify = app.add_subcommand("verify", "Check files against a manifest");
    v->add_option("--manifest", o.manifest, "Manifest JSON")->required();
    v->add_option("--root", o.root, "Package root")->required();

    auto* b = cli->bounds = app.add_subcommand("bounds", "Check t_total >= t_busy / slots per row");
    b->add_option("--rows", o.rows, "CSV label,t_total,t_busy,slots")->required();
    return cli;
}

std::string env_name(const std::string& long_name) {
    std::string n = "PH_";
    for (char c : long_name) n += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return n;
}

bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "yes" || v == "on"; }

std::string json_scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
}

// Options not given on the command line, filled from PH_* or the config file.
std::vector<std::string> layered_args(CLI::App& app, const std::string& config_path) {
    nlohmann::json config = nlohmann::json::object();
    if (!config_path.empty()) {
        try {
            config = nlohmann::json::parse(read_file(config_path));
        } catch (const nlohmann::json::exception& e) {
            throw Error("config " + config_path + ": " + e.what());
        }
        if (!config.is_object()) throw Error("config " + config_path + ": expected a JSON object");
    }
    std::vector<std::string> extra;
    auto fill = [&](CLI::App* scope, const nlohmann::json* section, bool sub) {
        for (CLI::Option* opt : scope->get_options()) {
            if (opt->count() > 0 || opt->get_lnames().empty()) continue;
            const std::string name = opt->get_lnames().front();
            if (name == "help" || name == "config") continue;
            std::optional<std::string> value;
            if (const char* e = std::getenv(env_name(name).c_str())) {
                value = e;
            } else if (section && section->contains(name) && !(*section)[name].is_object()) {
                value = json_scalar((*section)[name]);
            } else if (sub && config.contains(name) && !config[name].is_object()) {
                value = json_scalar(config[name]);
            }
            if (!value) continue;
            if (opt->get_expected_min() == 0) {
                if (truthy(*value)) extra.push_back("--" + name);
            } else {
                extra.push_back("--" + name);
                extra.push_back(*value);
            }
        }
    };
    fill(&app, &config, false);
    std::vector<std::string> out;
    for (CLI::App* sub : app.get_subcommands()) {
        const nlohmann::json* section = nullptr;
        if (auto it = config.find(sub->get_name()); it != config.end() && it->is_object()) section = &*it;
        std::vector<std::string> before = std::move(extra);
        extra.clear();
        fill(sub, section, true);
        out.insert(out.end(), before.begin(), before.end());
        out.push_back("\x01" + sub->get_name());  // marker: following args belong to this subcommand
        out.insert(out.end(), extra.begin(), extra.end());
        extra.clear();
    }
    if (app.get_subcommands().empty()) out = extra;
    return out;
}

void setup_logging(const std::string& level) {
    spdlog::drop("phgrid");
    auto logger = spdlog::stderr_color_mt("phgrid");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("%Y-%m-%dT%H:%M:%S.%e %^%l%$ %v");
    spdlog::set_level(spdlog::level::from_str(level));
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

std::vector<Task> load_tasks(const Opts& o, const std::optional<fs::path>& copy_dir = std::nullopt) {
    if (!o.tasks.empty()) {
        std::ifstream in(o.tasks);
        if (!in) throw Error("cannot open " + o.tasks);
        auto tasks = read_tasks(in);
        if (copy_dir) {
            std::ofstream out(*copy_dir / "tasks.jsonl");
            write_tasks(out, tasks);
        }
        return tasks;
    }
    if (o.workload.empty() || o.granularity.empty()) throw CLI::ValidationError("--tasks or --workload with --granularity required");
    std::ifstream in(o.workload);
    if (!in) throw Error("cannot open " + o.workload);
    const auto calcs = read_workload(in);
    auto tasks = cluster(calcs, parse_granularity(read_file(o.granularity)), Ordering::NATURAL);
    if (copy_dir) {
        std::ofstream wl(*copy_dir / "workload.jsonl");
        write_workload(wl, calcs);
        std::ofstream out(*copy_dir / "tasks.jsonl");
        write_tasks(out, tasks);
    }
    return tasks;
}

MasterConfig master_config(const Opts& o) {
    MasterConfig c;
    c.heartbeat_interval_s = parse_duration(o.heartbeat);
    c.lost_timeout_s = parse_duration(o.lost_timeout);
    c.retry_cap = o.retry_cap;
    c.ordering = parse_ordering(o.ordering);
    c.seed = o.seed;
    c.target_pool = o.target_pool;
    c.validate();
    return c;
}

ExecutorSpec exec_spec(const Opts& o) {
    ExecutorSpec e;
    e.mode = parse_exec_mode(o.exec);
    e.command = o.command;
    e.speed = o.speed;
    e.time_scale = o.time_scale;
    if (!o.timeout.empty()) e.timeout_s = parse_duration(o.timeout);
    e.work_dir = o.work_dir.empty() ? fs::temp_directory_path().string() : o.work_dir;
    e.validate();
    return e;
}

void emit(const Opts& o, const ojson& j, const std::string& human) {
    if (o.json) {
        std::cout << j.dump() << std::endl;
    } else {
        std::cout << human << std::endl;
    }
}

ojson summary_json(const RunSummary& s) { return ojson::parse(summary_to_json(s, -1)); }

std::string human_summary(const RunSummary& s) {
    return "tasks " + std::to_string(s.n_done) + "/" + std::to_string(s.n_task) + " done, " +
           std::to_string(s.n_failed) + " failed (r_fail " + std::to_string(s.r_fail) + "), makespan " +
           format_duration(s.t_total) + ", busy " + format_duration(s.t_worker) + ", " + std::to_string(s.n_worker) +
           " workers";
}

// decomposition.json, series/series.csv, profile.csv
ojson write_analysis(const RunTrace& trace, double n_w, double dt, std::optional<std::size_t> n_task,
                     const fs::path& dir) {
    const auto d = decompose(trace, n_w, dt, n_task);
    const auto series = build_series(trace, dt, n_task);
    write_file(dir / "decomposition.json", decomposition_to_json(d) + "\n");
    {
        fs::create_directories(dir / "series");
        std::ofstream out(dir / "series" / "series.csv");
        write_series_csv(out, series);
    }
    {
        std::ofstream out(dir / "profile.csv");
        write_profile_csv(out, run_profile(trace));
    }
    return ojson::parse(decomposition_to_json(d, -1));
}

int cmd_gen(const Opts& o) {
    auto spec = parse_workload_spec(read_file(o.spec));
    if (o.seed_set) spec.seed = o.seed;
    const auto calcs = generate_workload(spec);
    fs::path p(o.out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + o.out);
    write_workload(out, calcs);
    double total = 0;
    for (const auto& c : calcs) total += c.cost;
    emit(o, {{"calcs", calcs.size()}, {"total_cost_s", total}, {"out", o.out}},
         std::to_string(calcs.size()) + " calculations, total cost " + format_duration(total) + " -> " + o.out);
    return 0;
}

int cmd_cluster(const Opts& o) {
    std::ifstream in(o.workload);
    if (!in) throw Error("cannot open " + o.workload);
    const auto calcs = read_workload(in);
    const auto tasks = cluster(calcs, parse_granularity(read_file(o.granularity)), parse_ordering(o.ordering), o.seed);
    fs::path p(o.out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    write_tasks(out, tasks);
    emit(o, {{"calcs", calcs.size()}, {"tasks", tasks.size()}, {"out", o.out}},
         std::to_string(calcs.size()) + " calculations -> " + std::to_string(tasks.size()) + " tasks -> " + o.out);
    return 0;
}

ServerConfig server_config(const Opts& o, const std::string& listen) {
    ServerConfig sc;
    sc.listen = parse_endpoint(listen);
    if (!o.metrics.empty()) sc.metrics = parse_endpoint(o.metrics);
    if (!o.telemetry.empty()) sc.telemetry = parse_endpoint(o.telemetry);
    sc.telemetry_interval_s = parse_duration(o.telemetry_interval);
    sc.drain_grace_s = parse_duration(o.drain_grace);
    sc.run_dir = o.run_dir;
    return sc;
}

int cmd_master(const Opts& o) {
    fs::create_directories(o.run_dir);
    auto tasks = load_tasks(o, fs::path(o.run_dir));
    const std::size_t n_task = tasks.size();
    MasterServer server(master_config(o), std::move(tasks), server_config(o, o.listen));
    if (!o.port_file.empty()) write_file(o.port_file, std::to_string(server.port()) + "\n");
    install_signals();
    const auto rep = server.run(&g_stop, &g_abort);
    ojson j;
    j["finished"] = rep.finished;
    j["port"] = server.port();
    j["n_task"] = n_task;
    j["summary"] = summary_json(rep.snapshot.summary);
    emit(o, j, std::string(rep.finished ? "campaign finished: " : "campaign stopped: ") + human_summary(rep.snapshot.summary));
    return rep.finished ? 0 : 1;
}

AgentConfig agent_config(const Opts& o, const Endpoint& master) {
    AgentConfig a;
    a.master = master;
    a.slots = o.slots;
    a.heartbeat_interval_s = parse_duration(o.heartbeat);
    a.backoff_max_s = parse_duration(o.backoff_max);
    a.connect_attempts = o.connect_attempts;
    if (!o.worker_id.empty()) a.worker_id = o.worker_id;
    a.log_path = o.log;
    return a;
}

int cmd_worker(const Opts& o) {
    const auto cfg = agent_config(o, parse_endpoint(o.master));
    const auto exec = exec_spec(o);
    install_signals();
    const auto rep = run_agent(cfg, exec, &g_stop);
    ojson j{{"worker_id", rep.worker_id}, {"exit_code", rep.exit_code}, {"tasks_run", rep.tasks_run},
            {"ok", rep.ok},               {"errors", rep.errors},       {"max_concurrent", rep.max_concurrent},
            {"busy_s", rep.busy_s},       {"reason", rep.reason}};
    emit(o, j,
         "worker " + rep.worker_id + ": " + std::to_string(rep.tasks_run) + " tasks (" + std::to_string(rep.errors) +
             " errors)" + (rep.reason.empty() ? "" : ", " + rep.reason));
    return rep.exit_code;
}

int cmd_run_local(const Opts& o) {
    if (o.workers < 1) throw CLI::ValidationError("--workers must be >= 1");
    if (o.kill_fraction < 0.0 || o.kill_fraction > 1.0) throw CLI::ValidationError("--kill-fraction must be in [0, 1]");
    const fs::path dir(o.run_dir);
    fs::create_directories(dir / "workers");
    auto tasks = load_tasks(o, dir);
    const std::size_t n_task = tasks.size();
    Opts mo = o;
    MasterServer server(master_config(o), std::move(tasks), server_config(mo, "127.0.0.1:0"));
    Endpoint ep{"127.0.0.1", server.port()};
    const auto exec = exec_spec(o);

    // fork before the server starts any thread
    std::vector<pid_t> children;
    for (int i = 0; i < o.workers; ++i) {
        std::cout.flush();
        std::cerr.flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw Error("fork failed");
        if (pid == 0) {
            // the child does not serve: drop the inherited listening state by exec-less exit paths only
            ::signal(SIGINT, SIG_IGN);  // the master propagates DRAIN
            Opts wo = o;
            wo.log = (dir / "workers" / ("worker-" + std::to_string(i) + ".jsonl")).string();
            AgentConfig cfg = agent_config(wo, ep);
            int code = 1;
            try {
                code = run_agent(cfg, exec, &g_stop).exit_code;
            } catch (const std::exception& e) {
                spdlog::error("worker {}: {}", i, e.what());
            }
            std::_Exit(code);
        }
        children.push_back(pid);
    }
    install_signals();

    std::atomic<bool> master_done{false};
    std::thread killer;
    std::size_t n_kill = 0;
    if (o.kill_fraction > 0.0) {
        n_kill = std::max<std::size_t>(1, static_cast<std::size_t>(o.kill_fraction * o.workers + 0.5));
        n_kill = std::min<std::size_t>(n_kill, children.size());
        std::vector<pid_t> victims = children;
        Rng rng(derive_seed(o.kill_seed, 1));
        rng.shuffle(victims);
        victims.resize(n_kill);
        const double at = parse_duration(o.kill_at);
        killer = std::thread([victims, at, &master_done] {
            const auto until = std::chrono::steady_clock::now() + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                                      std::chrono::duration<double>(at));
            while (std::chrono::steady_clock::now() < until && !master_done.load()) {
                std::this_thread::sleep_for(std::chrono::milliseconds(10));
            }
            if (master_done.load()) return;
            for (pid_t p : victims) {
                spdlog::warn("killing worker process {}", p);
                ::kill(p, SIGKILL);
            }
        });
    }

    const auto rep = server.run(&g_stop, &g_abort);
    master_done.store(true);
    if (killer.joinable()) killer.join();
    // reap children; stragglers after the grace get SIGKILL
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
    std::size_t alive = children.size();
    std::vector<int> codes(children.size(), -1);
    while (alive > 0) {
        for (std::size_t i = 0; i < children.size(); ++i) {
            if (codes[i] != -1) continue;
            int status = 0;
            if (::waitpid(children[i], &status, WNOHANG) == children[i]) {
                codes[i] = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
                --alive;
            }
        }
        if (alive == 0) break;
        if (std::chrono::steady_clock::now() > deadline) {
            for (std::size_t i = 0; i < children.size(); ++i) {
                if (codes[i] == -1) ::kill(children[i], SIGKILL);
            }
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }

    std::ifstream tin(dir / "trace.jsonl");
    const auto trace = read_trace(tin);
    ojson j;
    j["finished"] = rep.finished;
    j["n_task"] = n_task;
    j["workers"] = o.workers;
    j["killed"] = n_kill;
    j["worker_exit_codes"] = codes;
    j["summary"] = summary_json(rep.snapshot.summary);
    if (!trace.empty()) {
        j["decomposition"] = write_analysis(trace, static_cast<double>(o.workers) * o.slots, parse_duration(o.dt),
                                            n_task, dir);
    }
    emit(o, j, std::string(rep.finished ? "campaign finished: " : "campaign stopped: ") + human_summary(rep.snapshot.summary));
    return rep.finished ? 0 : 1;
}

int cmd_sim(const Opts& o) {
    const fs::path scenario(o.scenario);
    const auto sc = sim::parse_scenario(read_file(scenario), scenario.parent_path().string());
    sim::run_scenario(sc, o.out);
    ojson j{{"out", o.out}, {"tasks", sc.tasks.size()}, {"seeds", sc.seeds}};
    j["runs"] = ojson::array();
    for (auto seed : sc.seeds) {
        const auto dir = fs::path(o.out) / ("seed-" + std::to_string(seed));
        j["runs"].push_back({{"seed", seed}, {"summary", ojson::parse(read_file(dir / "summary.json"))}});
    }
    emit(o, j, "simulated " + std::to_string(sc.seeds.size()) + " seed(s) of " + std::to_string(sc.tasks.size()) +
                   " tasks -> " + o.out);
    return 0;
}

int cmd_analyze(const Opts& o) {
    std::ifstream in(o.trace);
    if (!in) throw Error("cannot open " + o.trace);
    const auto trace = read_trace(in);
    std::optional<std::size_t> n_task;
    if (o.n_task > 0) n_task = o.n_task;
    const double dt = parse_duration(o.dt);
    const auto summary = summarize_trace(trace, n_task);
    ojson j;
    j["summary"] = summary_json(summary);
    if (!o.out.empty()) {
        j["decomposition"] = write_analysis(trace, o.n_w, dt, n_task, o.out);
        write_file(fs::path(o.out) / "trace_summary.json", summary_to_json(summary) + "\n");
    } else {
        j["decomposition"] = ojson::parse(decomposition_to_json(decompose(trace, o.n_w, dt, n_task), -1));
    }
    const auto& d = j["decomposition"];
    emit(o, j,
         human_summary(summary) + "\nL " + std::to_string(d["percent"]["latency"].get<double>()) + "%  O " +
             std::to_string(d["percent"]["overhead"].get<double>()) + "%  I " +
             std::to_string(d["percent"]["tail_idle"].get<double>()) + "%  B " +
             std::to_string(d["percent"]["busy"].get<double>()) + "%");
    return 0;
}

int cmd_collector(const Opts& o) {
    telemetry::CollectorConfig cfg;
    const auto ep = parse_endpoint(o.listen, "0.0.0.0");
    cfg.host = ep.host;
    cfg.port = ep.port;
    cfg.out_dir = o.out;
    cfg.flush_interval_s = parse_duration(o.flush);
    if (!o.duration.empty()) cfg.duration_s = parse_duration(o.duration);
    telemetry::Collector c(cfg);
    spdlog::info("collector listening on {}:{}", cfg.host, c.port());
    install_signals();
    c.run(&g_stop);
    const auto stats = ojson::parse(c.store().stats_json(-1));
    emit(o, stats, "collector stopped, " + std::to_string(c.store().total_gaps()) + " gaps, " +
                       std::to_string(c.store().undecodable()) + " undecodable datagrams");
    return 0;
}

int cmd_verify(const Opts& o) {
    const auto m = parse_manifest(read_file(o.manifest));
    const auto rep = verify_manifest(m, o.root);
    ojson j{{"pass", rep.pass}};
    j["files"] = ojson::array();
    std::string human;
    for (const auto& it : rep.items) {
        j["files"].push_back({{"path", it.path}, {"status", to_string(it.status)}});
        human += std::string(to_string(it.status)) + "  " + it.path + "\n";
    }
    emit(o, j, human + (rep.pass ? "manifest OK" : "manifest FAILED"));
    return rep.pass ? 0 : 1;
}

int cmd_bounds(const Opts& o) {
    std::ifstream in(o.rows);
    if (!in) throw Error("cannot open " + o.rows);
    const auto verdicts = check_bounds(read_bounds_csv(in));
    bool all = true;
    ojson j{{"rows", ojson::array()}};
    std::string human;
    for (const auto& v : verdicts) {
        all = all && v.pass;
        j["rows"].push_back({{"label", v.row.label},
                             {"t_total_s", v.row.t_total_s},
                             {"t_busy_s", v.row.t_busy_s},
                             {"slots", v.row.slots},
                             {"lower_bound_s", v.lower_bound_s},
                             {"pass", v.pass}});
        human += std::string(v.pass ? "PASS " : "FAIL ") + v.row.label + ": " + format_duration(v.row.t_total_s) +
                 " >= " + format_duration(v.lower_bound_s) + "\n";
    }
    j["pass"] = all;
    emit(o, j, human + (all ? "all rows pass" : "some rows violate the bound"));
    return all ? 0 : 1;
}

}  // namespace

int run_cli(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    std::unique_ptr<Cli> cli;
    try {
        // pass 1: which options came from the command line
        auto probe = build_cli();
        try {
            probe->app.parse(argc, argv);
        } catch (const CLI::RequiredError&) {
            // may still be supplied by the environment or config
        }
        std::string config = probe->o.config;
        if (config.empty()) {
            if (const char* e = std::getenv("PH_CONFIG")) config = e;
        }
        auto layered = layered_args(probe->app, config);

        // pass 2: command line plus layered values, inserted right after their subcommand
        std::vector<std::string> full;
        std::string current_sub;
        std::vector<std::string> global_extra, sub_extra;
        for (const auto& a : layered) {
            if (!a.empty() && a[0] == '\x01') {
                current_sub = a.substr(1);
            } else {
                (current_sub.empty() ? global_extra : sub_extra).push_back(a);
            }
        }
        full.push_back(args[0]);
        full.insert(full.end(), global_extra.begin(), global_extra.end());
        bool placed = current_sub.empty();
        for (std::size_t i = 1; i < args.size(); ++i) {
            full.push_back(args[i]);
            if (!placed && args[i] == current_sub) {
                full.insert(full.end(), sub_extra.begin(), sub_extra.end());
                placed = true;
            }
        }
        cli = build_cli();
        std::vector<char*> ptrs;
        for (auto& s : full) ptrs.push_back(s.data());
        cli->app.parse(static_cast<int>(ptrs.size()), ptrs.data());
        for (auto* opt : cli->app.get_subcommands().front()->get_options()) {
            if (!opt->get_lnames().empty() && opt->get_lnames().front() == "seed" && opt->count() > 0) cli->o.seed_set = true;
        }
    } catch (const CLI::CallForHelp& e) {
        auto c = build_cli();
        return c->app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        auto c = build_cli();
        return c->app.exit(e);
    } catch (const CLI::ParseError& e) {
        auto c = build_cli();
        c->app.exit(e);
        return 2;
    } catch (const Error& e) {
        std::cerr << "phgrid: " << e.what() << std::endl;
        return 2;
    }

    try {
        setup_logging(cli->o.log_level);
    } catch (const std::exception& e) {
        std::cerr << "phgrid: bad --log-level: " << e.what() << std::endl;
        return 2;
    }
    const Opts& o = cli->o;
    try {
        if (cli->gen->parsed()) return cmd_gen(o);
        if (cli->cluster->parsed()) return cmd_cluster(o);
        if (cli->master->parsed()) return cmd_master(o);
        if (cli->worker->parsed()) return cmd_worker(o);
        if (cli->run_local->parsed()) return cmd_run_local(o);
        if (cli->sim->parsed()) return cmd_sim(o);
        if (cli->analyze->parsed()) return cmd_analyze(o);
        if (cli->collector->parsed()) return cmd_collector(o);
        if (cli->verify->parsed()) return cmd_verify(o);
        if (cli->bounds->parsed()) return cmd_bounds(o);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "phgrid: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 2;
}

}  // namespace ph
